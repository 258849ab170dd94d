//! Episodic evaluation with top-1 accuracy and a normal-approximation 95% interval.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::AugmentConfig;
use super::data::Dataset;
use super::episode::{eval_batch, sample_episode, EpisodeBatch, EpisodeShape};
use super::model::{accuracy, Model};
use crate::error::{invalid, Result};
use crate::numeric::Mode;
use crate::tensor::Tensor;

/// Anything that turns an episode into `[queries, way]` logits.
pub trait EpisodeScorer {
    fn score(&mut self, batch: &EpisodeBatch) -> Result<Tensor>;
}

impl EpisodeScorer for Model {
    fn score(&mut self, batch: &EpisodeBatch) -> Result<Tensor> {
        Ok(self.forward(batch, Mode::Eval)?.logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
    pub episodes: usize,
    pub seconds: f64,
}

/// Mean and `1.96 s / sqrt(n)` with `s` the sample standard deviation.
pub fn confidence_interval(accuracies: &[f64]) -> Result<(f64, f64)> {
    let n = accuracies.len();
    if n < 2 {
        return Err(invalid(format!("confidence_interval needs at least 2 values, got {n}")));
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Generator for episode `index` of an evaluation run; independent of the
/// order in which episodes are visited.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn evaluate<S: EpisodeScorer + ?Sized>(
    scorer: &mut S,
    dataset: &Dataset,
    n_episodes: usize,
    shape: EpisodeShape,
    augmentation: &AugmentConfig,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_indices(scorer, dataset, &(0..n_episodes as u64).collect::<Vec<_>>(), shape, augmentation, seed)
}

/// Evaluates the given episode indices in the given order.
pub fn evaluate_indices<S: EpisodeScorer + ?Sized>(
    scorer: &mut S,
    dataset: &Dataset,
    indices: &[u64],
    shape: EpisodeShape,
    augmentation: &AugmentConfig,
    seed: u64,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut accuracies = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut rng = episode_rng(seed, i);
        let episode = sample_episode(dataset, shape, &mut rng)?;
        let batch = eval_batch(dataset, &episode, augmentation)?;
        let logits = scorer.score(&batch)?;
        accuracies.push(accuracy(&logits, &batch.labels));
    }
    let (mean, half_width) = confidence_interval(&accuracies)?;
    Ok(EvalReport {
        episodes: accuracies.len(),
        accuracies,
        mean,
        half_width,
        seconds: start.elapsed().as_secs_f64(),
    })
}
