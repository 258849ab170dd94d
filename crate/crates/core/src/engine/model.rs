//! Embedding plus similarity head, evaluated on one episode at a time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::episode::EpisodeBatch;
use crate::error::{invalid, Result};
use crate::frae::{embed, EmbeddingOptions, EmbeddingVariant, FraeWeights};
use crate::metric::{episode_logits_graph, EpisodeLayout, Metric, ProjectionParams, SimilarityVariant, Temperature};
use crate::numeric::{BatchNormConfig, Graph, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding: EmbeddingVariant,
    pub metric: Metric,
    /// Neighbours kept per query descriptor.
    pub k: usize,
    pub temperature: Temperature,
    pub leaky_slope: f64,
    pub fusion_norm_act: bool,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding: EmbeddingVariant::Frae,
            metric: Metric::NdpAbsInner,
            k: 1,
            temperature: Temperature::default(),
            leaky_slope: 0.2,
            fusion_norm_act: false,
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn similarity(&self) -> Result<SimilarityVariant> {
        SimilarityVariant::new(self.metric, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        self.similarity()?;
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(invalid(format!("leaky_slope {} must be in [0, 1)", self.leaky_slope)));
        }
        if let Temperature::Fixed(t) = self.temperature {
            if !t.is_finite() || t < 0.0 {
                return Err(invalid(format!("temperature {t} must be finite and non-negative")));
            }
        }
        ProjectionParams::new(self.alpha, self.beta, self.delta).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: FraeWeights,
    pub projection: ProjectionParams,
}

/// Loss and logits `[queries, way]` of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub loss: f64,
    pub logits: Tensor,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let options = EmbeddingOptions {
            variant: config.embedding,
            leaky_slope: config.leaky_slope,
            fusion_norm_act: config.fusion_norm_act,
            batch_norm: BatchNormConfig::default(),
        };
        Ok(Model {
            config,
            embedding: FraeWeights::init(options, rng),
            projection: ProjectionParams::new(config.alpha, config.beta, config.delta)?,
        })
    }

    /// Embedding tensors followed by α, β, δ.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.embedding.named_params();
        out.extend(self.projection.named_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.embedding.params_mut();
        out.extend(self.projection.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Keeps the similarity factors above their floor.
    pub fn clamp(&mut self) {
        self.projection.clamp();
    }

    fn run(&mut self, batch: &EpisodeBatch, mode: Mode, with_grad: bool) -> Result<EpisodeOutput> {
        let similarity = self.config.similarity()?;
        let mut g = Graph::new();
        let images = g.constant(batch.images.clone());
        let emb_vars = self.embedding.bind(&mut g, with_grad);
        let metric_vars = self.projection.bind(&mut g, with_grad);
        let maps = embed(&mut g, images, &mut self.embedding, &emb_vars, mode)?;
        let s = g.shape(maps).to_vec();
        let m = s[2] * s[3];
        let descriptors = g.descriptor_matrix(maps)?;
        let n_support = batch.support_count();
        let support = g.select_columns(descriptors, 0, n_support * m)?;
        let query = g.select_columns(descriptors, n_support * m, batch.query_count() * m)?;
        let layout = EpisodeLayout {
            way: batch.shape.way,
            shot: batch.shape.shot,
            queries: batch.query_count(),
            descriptors_per_image: m,
        };
        let logits = episode_logits_graph(
            &mut g,
            support,
            query,
            layout,
            metric_vars,
            similarity,
            self.config.temperature,
        )?;
        let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
        let out = EpisodeOutput {
            loss: g.value(loss).item(),
            logits: g.value(logits).clone(),
        };
        if with_grad {
            g.backward(loss)?;
            let vars: Vec<_> = emb_vars
                .into_iter()
                .chain([metric_vars.alpha, metric_vars.beta, metric_vars.delta])
                .collect();
            for (p, v) in self.params_mut().into_iter().zip(vars) {
                let grad = g.grad(v).expect("trainable leaf has a gradient");
                p.grad = Some(grad.to_vec());
            }
        }
        Ok(out)
    }

    /// Forward and backward in train mode; leaves dLoss/dθ in every parameter's grad slot.
    pub fn forward_backward(&mut self, batch: &EpisodeBatch) -> Result<EpisodeOutput> {
        self.run(batch, Mode::Train, true)
    }

    /// Forward only. Train mode still updates batch-norm running statistics.
    pub fn forward(&mut self, batch: &EpisodeBatch, mode: Mode) -> Result<EpisodeOutput> {
        self.run(batch, mode, false)
    }
}

/// Episode-local accuracy: fraction of rows whose first maximal logit is the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let cols = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(cols)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}
