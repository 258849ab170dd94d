//! In-memory datasets and the procedural texture generator.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Auxiliary,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Auxiliary => "auxiliary",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Labelled images grouped by class. Every image is `[3, n, n]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub classes: Vec<String>,
    pub samples: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn new(split: Split, classes: Vec<String>, samples: Vec<Vec<Tensor>>) -> Result<Self> {
        if classes.len() != samples.len() {
            return Err(invalid(format!(
                "dataset has {} class names but {} sample lists",
                classes.len(),
                samples.len()
            )));
        }
        for (name, imgs) in classes.iter().zip(&samples) {
            for img in imgs {
                let s = img.shape();
                if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
                    return Err(invalid(format!("class {name}: image shape {s:?} is not [3, n, n]")));
                }
            }
        }
        Ok(Dataset { split, classes, samples })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest per-class sample count.
    pub fn min_class_size(&self) -> usize {
        self.samples.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Every image resized to `[3, size, size]`.
    pub fn resized(&self, size: usize) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|imgs| imgs.iter().map(|img| super::augment::resize(img, size)).collect())
            .collect::<Result<_>>()?;
        Dataset::new(self.split, self.classes.clone(), samples)
    }

    /// Errors naming the first class that cannot fill `needed` slots.
    pub fn require_class_size(&self, needed: usize) -> Result<()> {
        for (name, imgs) in self.classes.iter().zip(&self.samples) {
            if imgs.len() < needed {
                return Err(invalid(format!(
                    "{} split: class `{name}` has {} samples, episodes need {needed}",
                    self.split.name(),
                    imgs.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-class deviation from the shared palette.
const COLOR_OFFSET: f64 = 0.25;
/// Per-sample colour shift.
const COLOR_JITTER: f64 = 0.08;
const PIXEL_NOISE: f64 = 0.06;

/// Parameters of one texture family.
#[derive(Clone, Debug)]
struct ClassStyle {
    background: [f64; 3],
    foreground: [f64; 3],
    blob_color: [f64; 3],
    frequency: f64,
    orientation: f64,
    blobs: Vec<(f64, f64, f64)>,
}

fn class_style(seed: u64, class: usize) -> ClassStyle {
    // Classes share one dataset-wide palette and differ from it by small
    // offsets, so colour alone does not identify a class.
    let mut palette_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a1e_77e5);
    let mut base = || [palette_rng.gen::<f64>(), palette_rng.gen::<f64>(), palette_rng.gen::<f64>()];
    let palette = [base(), base(), base()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5 ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut shade = |c: [f64; 3]| c.map(|v| (v + rng.gen_range(-COLOR_OFFSET..COLOR_OFFSET)).clamp(0.0, 1.0));
    let background = shade(palette[0]);
    let foreground = shade(palette[1]);
    let blob_color = shade(palette[2]);
    let frequency = rng.gen_range(1.5..4.5);
    let orientation = rng.gen_range(0.0..PI);
    let blobs = (0..rng.gen_range(1..4))
        .map(|_| (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.08..0.2)))
        .collect();
    ClassStyle {
        background,
        foreground,
        blob_color,
        frequency,
        orientation,
        blobs,
    }
}

fn render(style: &ClassStyle, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let frequency = style.frequency * rng.gen_range(0.9..1.1);
    let theta = style.orientation + rng.gen_range(-0.15..0.15);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let blobs: Vec<(f64, f64, f64)> = style
        .blobs
        .iter()
        .map(|&(x, y, r)| (x + rng.gen_range(-0.1..0.1), y + rng.gen_range(-0.1..0.1), r * rng.gen_range(0.8..1.2)))
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).collect();
    let brightness = rng.gen_range(0.85..1.15);
    let (c, s) = (theta.cos(), theta.sin());
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let stripe = 0.5 + 0.5 * (2.0 * PI * frequency * (u * c + v * s) + phase).sin();
            let blob = blobs
                .iter()
                .map(|&(bx, by, r)| (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * r * r)).exp())
                .fold(0.0, f64::max);
            for ch in 0..3 {
                let base = style.background[ch] * (1.0 - stripe) + style.foreground[ch] * stripe;
                let px = base * (1.0 - blob) + style.blob_color[ch] * blob;
                let px = (px + tint[ch]) * brightness + noise.sample(rng);
                data[(ch * size + y) * size + x] = px.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape matches")
}

/// Procedural dataset: each class is a texture family (colours, stripe
/// frequency and orientation, blob layout) with per-sample jitter and pixel
/// noise. Class `c` renders identically whatever `n_classes` is, so splits
/// drawn from disjoint class ranges are consistent.
pub fn synth_dataset(n_classes: usize, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    synth_classes(0..n_classes, n_per_class, size, seed, Split::Auxiliary)
}

/// Generates the classes with the given global indices.
pub fn synth_classes(
    classes: std::ops::Range<usize>,
    n_per_class: usize,
    size: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(invalid(format!("synthetic image size {size} must be a positive multiple of 8")));
    }
    let mut names = Vec::new();
    let mut samples = Vec::new();
    for class in classes {
        let style = class_style(seed, class);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1) ^ (class as u64).wrapping_mul(0xd134_2543_de82_ef95));
        names.push(format!("class_{class:03}"));
        samples.push((0..n_per_class).map(|_| render(&style, size, &mut rng)).collect());
    }
    Dataset::new(split, names, samples)
}

/// Auxiliary / validation / test splits over consecutive, disjoint class ranges.
#[derive(Clone, Debug)]
pub struct Splits {
    pub auxiliary: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn synth_splits(counts: [usize; 3], n_per_class: usize, size: usize, seed: u64) -> Result<Splits> {
    let [a, v, t] = counts;
    Ok(Splits {
        auxiliary: synth_classes(0..a, n_per_class, size, seed, Split::Auxiliary)?,
        validation: synth_classes(a..a + v, n_per_class, size, seed, Split::Validation)?,
        test: synth_classes(a + v..a + v + t, n_per_class, size, seed, Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_shapes() {
        let ds = synth_dataset(10, 20, 40, 7).unwrap();
        assert_eq!(ds.num_classes(), 10);
        assert_eq!(ds.len(), 200);
        assert!(ds.samples.iter().flatten().all(|t| t.shape() == [3, 40, 40]));
        assert!(ds.samples.iter().flatten().flat_map(|t| t.data()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_dataset(3, 4, 16, 9).unwrap();
        let b = synth_dataset(3, 4, 16, 9).unwrap();
        let c = synth_dataset(3, 4, 16, 10).unwrap();
        assert!(a.samples.iter().flatten().zip(b.samples.iter().flatten()).all(|(x, y)| x.bit_eq(y)));
        assert_ne!(a.samples[0][0].data(), c.samples[0][0].data());
    }

    #[test]
    fn classes_do_not_depend_on_range() {
        let all = synth_dataset(6, 3, 16, 1).unwrap();
        let tail = synth_classes(4..6, 3, 16, 1, Split::Test).unwrap();
        assert!(all.samples[4][2].bit_eq(&tail.samples[0][2]));
        assert_eq!(tail.classes[1], "class_005");
    }

    #[test]
    fn size_must_divide_by_eight() {
        assert!(synth_dataset(2, 2, 20, 0).is_err());
    }

    #[test]
    fn short_class_is_named() {
        let ds = synth_dataset(2, 3, 8, 0).unwrap();
        let err = ds.require_class_size(5).unwrap_err().to_string();
        assert!(err.contains("class_000") && err.contains("3 samples"), "{err}");
    }
}
