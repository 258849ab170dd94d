//! C-way K-shot episode sampling and batch assembly.

use rand::seq::index::sample;
use rand::Rng;

use super::augment::{augment, eval_view, AugmentConfig};
use super::data::Dataset;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    /// Queries per class.
    pub queries: usize,
}

/// Sample references into a dataset. Labels are episode-local: class slot `c`
/// is label `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub shape: EpisodeShape,
    /// Dataset class index for each slot.
    pub classes: Vec<usize>,
    /// `support[c]` holds `shot` sample indices of `classes[c]`.
    pub support: Vec<Vec<usize>>,
    /// `query[c]` holds `queries` sample indices of `classes[c]`.
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    /// Query labels in batch order (class-major).
    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.shape.way).flat_map(|c| std::iter::repeat_n(c, self.shape.queries)).collect()
    }
}

pub fn sample_episode<R: Rng + ?Sized>(dataset: &Dataset, shape: EpisodeShape, rng: &mut R) -> Result<Episode> {
    let EpisodeShape { way, shot, queries } = shape;
    if way < 2 || shot == 0 || queries == 0 {
        return Err(invalid(format!(
            "episode needs way >= 2, shot >= 1, queries >= 1 (got {way}/{shot}/{queries})"
        )));
    }
    if dataset.num_classes() < way {
        return Err(invalid(format!(
            "{}-way episode needs {way} classes but the {} split has {} ({} short)",
            way,
            dataset.split.name(),
            dataset.num_classes(),
            way - dataset.num_classes()
        )));
    }
    dataset.require_class_size(shot + queries)?;
    let classes = sample(rng, dataset.num_classes(), way).into_vec();
    let mut support = Vec::with_capacity(way);
    let mut query = Vec::with_capacity(way);
    for &c in &classes {
        let picks = sample(rng, dataset.samples[c].len(), shot + queries).into_vec();
        support.push(picks[..shot].to_vec());
        query.push(picks[shot..].to_vec());
    }
    Ok(Episode {
        shape,
        classes,
        support,
        query,
    })
}

/// Images of one episode stacked as `[B, 3, n, n]`: support images first
/// (class-major), then queries (class-major).
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub shape: EpisodeShape,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl EpisodeBatch {
    pub fn support_count(&self) -> usize {
        self.shape.way * self.shape.shot
    }

    pub fn query_count(&self) -> usize {
        self.shape.way * self.shape.queries
    }
}

fn stack(images: Vec<Tensor>) -> Result<Tensor> {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in &images {
        if img.shape() != shape.as_slice() {
            return Err(invalid("episode images differ in shape"));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

fn ordered<'a>(dataset: &'a Dataset, episode: &'a Episode) -> impl Iterator<Item = &'a Tensor> {
    let pick = move |groups: &'a [Vec<usize>]| {
        episode
            .classes
            .iter()
            .zip(groups)
            .flat_map(move |(&c, idx)| idx.iter().map(move |&i| &dataset.samples[c][i]))
    };
    pick(&episode.support).chain(pick(&episode.query))
}

/// Training batch: each image gets an independent random augmentation.
pub fn training_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    episode: &Episode,
    augmentation: &AugmentConfig,
    rng: &mut R,
) -> Result<EpisodeBatch> {
    let images = ordered(dataset, episode)
        .map(|img| augment(img, rng, augmentation))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeBatch {
        shape: episode.shape,
        images: stack(images)?,
        labels: episode.query_labels(),
    })
}

/// Evaluation batch: centre crops only.
pub fn eval_batch(dataset: &Dataset, episode: &Episode, augmentation: &AugmentConfig) -> Result<EpisodeBatch> {
    let images = ordered(dataset, episode)
        .map(|img| eval_view(img, augmentation))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeBatch {
        shape: episode.shape,
        images: stack(images)?,
        labels: episode.query_labels(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::data::synth_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FIVE_ONE: EpisodeShape = EpisodeShape {
        way: 5,
        shot: 1,
        queries: 15,
    };

    #[test]
    fn five_way_one_shot_counts() {
        let ds = synth_dataset(10, 16, 8, 1).unwrap();
        let ep = sample_episode(&ds, FIVE_ONE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(ep.query.iter().map(Vec::len).sum::<usize>(), 75);
        for (s, q) in ep.support.iter().zip(&ep.query) {
            assert!(s.iter().all(|i| !q.contains(i)));
        }
        assert_eq!(ep.query_labels()[15], 1);
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = synth_dataset(10, 16, 8, 1).unwrap();
        let a = sample_episode(&ds, FIVE_ONE, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_episode(&ds, FIVE_ONE, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deficits_are_reported() {
        let ds = synth_dataset(10, 16, 8, 1).unwrap();
        let shape = EpisodeShape { way: 11, ..FIVE_ONE };
        let err = sample_episode(&ds, shape, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().to_string();
        assert!(err.contains("needs 11 classes") && err.contains("has 10"), "{err}");
        let shape = EpisodeShape { queries: 16, ..FIVE_ONE };
        let err = sample_episode(&ds, shape, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().to_string();
        assert!(err.contains("16 samples, episodes need 17"), "{err}");
    }

    #[test]
    fn batch_order_is_support_then_query() {
        let ds = synth_dataset(4, 6, 8, 2).unwrap();
        let shape = EpisodeShape {
            way: 2,
            shot: 2,
            queries: 1,
        };
        let ep = sample_episode(&ds, shape, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = AugmentConfig {
            resize: 8,
            crop: 8,
            flip: false,
            rotate: false,
        };
        let batch = eval_batch(&ds, &ep, &cfg).unwrap();
        assert_eq!(batch.images.shape(), &[6, 3, 8, 8]);
        let per = 3 * 64;
        let third = &batch.images.data()[2 * per..3 * per];
        assert_eq!(third, ds.samples[ep.classes[1]][ep.support[1][0]].data());
        let last = &batch.images.data()[5 * per..];
        assert_eq!(last, ds.samples[ep.classes[1]][ep.query[1][0]].data());
        assert_eq!(batch.labels, vec![0, 1]);
    }
}
