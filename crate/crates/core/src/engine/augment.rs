//! Loss-free image augmentation: flips, quarter-turn rotations, crops, and a
//! bilinear resize used once when a dataset is prepared.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side length images are resized to before cropping.
    pub resize: usize,
    /// Side length fed to the network.
    pub crop: usize,
    pub flip: bool,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize: 20,
            crop: 16,
            flip: true,
            rotate: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(invalid(format!(
                "crop {} must be positive and no larger than resize {}",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

fn side(image: &Tensor) -> Result<usize> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] == 0 {
        return Err(invalid(format!("expected a [c, n, n] image, got {s:?}")));
    }
    Ok(s[1])
}

/// Mirrors every row.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let n = side(image)?;
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(n) {
        row.reverse();
    }
    Ok(out)
}

/// Rotates counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(image: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let n = side(image)?;
    let mut cur = image.clone();
    for _ in 0..quarter_turns % 4 {
        let src = cur.data();
        let mut out = vec![0.0; src.len()];
        for (plane_out, plane_in) in out.chunks_mut(n * n).zip(src.chunks(n * n)) {
            for y in 0..n {
                for x in 0..n {
                    // (x, y) -> (y, n-1-x)
                    plane_out[(n - 1 - x) * n + y] = plane_in[y * n + x];
                }
            }
        }
        cur = Tensor::new(image.shape(), out)?;
    }
    Ok(cur)
}

/// Square window of side `size` with top-left corner `(top, left)`.
pub fn crop(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let n = side(image)?;
    if top + size > n || left + size > n || size == 0 {
        return Err(invalid(format!("crop {size} at ({top}, {left}) does not fit a {n}x{n} image")));
    }
    let c = image.shape()[0];
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let start = (ch * n + y) * n + left;
            out.extend_from_slice(&image.data()[start..start + size]);
        }
    }
    Tensor::new(&[c, size, size], out)
}

pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let n = side(image)?;
    if size > n {
        return Err(invalid(format!("center crop {size} larger than image {n}")));
    }
    let off = (n - size) / 2;
    crop(image, off, off, size)
}

fn taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|t| {
            let src = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a `[c, h, w]` image to `[c, size, size]`, with
/// half-pixel centres and edge clamping.
pub fn resize(image: &Tensor, size: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 || size == 0 {
        return Err(invalid(format!("cannot resize {s:?} to {size}x{size}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == size && w == size {
        return Ok(image.clone());
    }
    let (ty, tx) = (taps(h, size), taps(w, size));
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * size + y) * size + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[c, size, size], out)
}

/// Training view of an image already at `config.resize`: random flip,
/// random quarter-turn, random crop.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R, config: &AugmentConfig) -> Result<Tensor> {
    let n = side(image)?;
    if config.crop > n {
        return Err(invalid(format!("crop {} larger than image {n}", config.crop)));
    }
    let mut img = if config.flip && rng.gen_bool(0.5) {
        flip_horizontal(image)?
    } else {
        image.clone()
    };
    if config.rotate {
        img = rotate90(&img, rng.gen_range(0..4))?;
    }
    let top = rng.gen_range(0..=n - config.crop);
    let left = rng.gen_range(0..=n - config.crop);
    crop(&img, top, left, config.crop)
}

/// Deterministic evaluation view: centre crop only.
pub fn eval_view(image: &Tensor, config: &AugmentConfig) -> Result<Tensor> {
    center_crop(image, config.crop)
}
