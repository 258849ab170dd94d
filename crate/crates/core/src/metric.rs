//! Non-linear data projection similarity between local descriptors.
//!
//! Descriptors are standardized per column, pushed through the learnable
//! projection `sign(a) (1 - exp(-a^2 / 2f^2))` (factor α for queries, β for
//! support), and compared by absolute inner product. Each query descriptor
//! keeps its k best support matches; the image-to-class score sums them over
//! all query descriptors against the pooled descriptors of a class.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::frae::DescriptorSet;
use crate::numeric::{top_k_indices, Graph, Var};
use crate::tensor::Tensor;

/// Lower bound enforced on α, β and δ after every optimizer step.
pub const PARAM_FLOOR: f64 = 1e-3;
pub const STANDARDIZE_EPS: f64 = 1e-10;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Standardize, project, |inner product|.
    NdpAbsInner,
    /// Standardize, project, cosine similarity.
    Cosine,
    /// `1 - exp(-|<q, s>| / 2δ^2)` on raw descriptors.
    GaussianKernel,
    /// |inner product| on raw descriptors.
    RawAbsInner,
}

impl Metric {
    fn projects(self) -> bool {
        matches!(self, Metric::NdpAbsInner | Metric::Cosine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityVariant {
    pub metric: Metric,
    pub k: usize,
}

impl SimilarityVariant {
    pub fn new(metric: Metric, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("similarity: k must be at least 1"));
        }
        Ok(SimilarityVariant { metric, k })
    }
}

impl Default for SimilarityVariant {
    fn default() -> Self {
        SimilarityVariant {
            metric: Metric::NdpAbsInner,
            k: 1,
        }
    }
}

/// Scale applied to image-to-class sums before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Temperature {
    Fixed(f64),
    Preset(TemperaturePreset),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperaturePreset {
    /// `1 / m`, the reciprocal of descriptors per query image.
    PerDescriptor,
}

impl Temperature {
    pub fn value(self, descriptors_per_image: usize) -> f64 {
        match self {
            Temperature::Fixed(t) => t,
            Temperature::Preset(TemperaturePreset::PerDescriptor) => 1.0 / descriptors_per_image as f64,
        }
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::Fixed(1.0)
    }
}

/// Learnable scalars of the similarity: projection factors α (query) and β
/// (support), and the Gaussian-kernel scale δ.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub delta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct MetricVars {
    pub alpha: Var,
    pub beta: Var,
    pub delta: Var,
}

impl ProjectionParams {
    pub fn new(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("delta", delta)] {
            if !(v >= PARAM_FLOOR) || !v.is_finite() {
                return Err(invalid(format!("{name} = {v} must be finite and >= {PARAM_FLOOR}")));
            }
        }
        Ok(ProjectionParams {
            alpha: Tensor::scalar(alpha).with_grad(),
            beta: Tensor::scalar(beta).with_grad(),
            delta: Tensor::scalar(delta).with_grad(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.item()
    }

    pub fn beta(&self) -> f64 {
        self.beta.item()
    }

    pub fn delta(&self) -> f64 {
        self.delta.item()
    }

    /// Raises any factor below [`PARAM_FLOOR`] back to it.
    pub fn clamp(&mut self) {
        for t in [&mut self.alpha, &mut self.beta, &mut self.delta] {
            let v = &mut t.data_mut()[0];
            if !(*v >= PARAM_FLOOR) {
                *v = PARAM_FLOOR;
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("metric.alpha".into(), &self.alpha),
            ("metric.beta".into(), &self.beta),
            ("metric.delta".into(), &self.delta),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.alpha, &mut self.beta, &mut self.delta]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MetricVars {
        let mut leaf = |t: &Tensor| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
        MetricVars {
            alpha: leaf(&self.alpha),
            beta: leaf(&self.beta),
            delta: leaf(&self.delta),
        }
    }
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams::new(1.0, 1.0, 1.0).expect("defaults are valid")
    }
}

/// Scalar projection of one standardized value. Depends on `factor` only
/// through its square.
pub fn project_value(a: f64, factor: f64) -> f64 {
    crate::numeric::ndp_value(a, factor)
}

/// Pairwise scores `[mq, ms]` between query and support descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub values: Tensor,
    pub metric: Metric,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values.data()[i * c..(i + 1) * c]
    }
}

/// Standardizes (and, for projecting metrics, projects with `factor`) a
/// `[d, n]` block of descriptors on the graph.
pub fn prepare_descriptors(g: &mut Graph, descriptors: Var, factor: Var, metric: Metric) -> Result<Var> {
    if !metric.projects() {
        return Ok(descriptors);
    }
    let z = g.standardize_columns(descriptors, STANDARDIZE_EPS)?;
    g.ndp_project(z, factor)
}

/// Score block between prepared query and support descriptors.
pub fn score_block(g: &mut Graph, query: Var, support: Var, metric: Metric, delta: Var) -> Result<Var> {
    match metric {
        Metric::NdpAbsInner | Metric::RawAbsInner => {
            let dots = g.matmul_tn(query, support)?;
            Ok(g.abs(dots))
        }
        Metric::Cosine => g.cosine_scores(query, support, COSINE_EPS),
        Metric::GaussianKernel => {
            let dots = g.matmul_tn(query, support)?;
            let lam = g.abs(dots);
            g.gaussian_kernel(lam, delta)
        }
    }
}

/// Shape of the descriptor blocks fed to [`episode_logits_graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeLayout {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub descriptors_per_image: usize,
}

/// Logits `[queries, way]` from raw descriptor blocks. `support` is
/// `[d, way * shot * m]` ordered class-major; `query` is `[d, queries * m]`.
#[allow(clippy::too_many_arguments)]
pub fn episode_logits_graph(
    g: &mut Graph,
    support: Var,
    query: Var,
    layout: EpisodeLayout,
    vars: MetricVars,
    variant: SimilarityVariant,
    temperature: Temperature,
) -> Result<Var> {
    let m = layout.descriptors_per_image;
    if g.shape(support).get(1) != Some(&(layout.way * layout.shot * m))
        || g.shape(query).get(1) != Some(&(layout.queries * m))
    {
        return Err(invalid(format!(
            "episode_logits: descriptor blocks {:?} / {:?} do not match {layout:?}",
            g.shape(support),
            g.shape(query)
        )));
    }
    let sp = prepare_descriptors(g, support, vars.beta, variant.metric)?;
    let qp = prepare_descriptors(g, query, vars.alpha, variant.metric)?;
    let pool = layout.shot * m;
    let mut columns = Vec::with_capacity(layout.way);
    for c in 0..layout.way {
        let class_pool = g.select_columns(sp, c * pool, pool)?;
        let scores = score_block(g, qp, class_pool, variant.metric, vars.delta)?;
        columns.push(g.topk_group_sum(scores, variant.k, layout.queries)?);
    }
    let logits = g.stack_columns(&columns)?;
    Ok(g.scale(logits, temperature.value(m)))
}

fn check_set(ds: &DescriptorSet) -> Result<()> {
    if ds.dim() < 2 || ds.count() == 0 {
        return Err(invalid(format!(
            "descriptor set must have d >= 2 and m >= 1, got {:?}",
            ds.matrix.shape()
        )));
    }
    Ok(())
}

/// Per-descriptor standardization to zero mean and unit population variance.
pub fn standardize(descriptors: &DescriptorSet) -> Result<DescriptorSet> {
    check_set(descriptors)?;
    let mut g = Graph::new();
    let x = g.constant(descriptors.matrix.clone());
    let y = g.standardize_columns(x, STANDARDIZE_EPS)?;
    DescriptorSet::new(g.value(y).clone(), descriptors.h, descriptors.w)
}

/// Elementwise non-linear projection with the given factor.
pub fn ndp_project(descriptors: &DescriptorSet, factor: f64) -> Result<DescriptorSet> {
    if !(factor >= PARAM_FLOOR) {
        return Err(invalid(format!("ndp_project: factor {factor} below {PARAM_FLOOR}")));
    }
    let mut g = Graph::new();
    let x = g.constant(descriptors.matrix.clone());
    let f = g.constant(Tensor::scalar(factor));
    let y = g.ndp_project(x, f)?;
    DescriptorSet::new(g.value(y).clone(), descriptors.h, descriptors.w)
}

/// Scores between the given descriptors as they are (no standardization or
/// projection is applied here).
pub fn pairwise_scores(query: &DescriptorSet, support: &DescriptorSet, metric: Metric, delta: f64) -> Result<ScoreMatrix> {
    if query.dim() != support.dim() {
        return Err(invalid(format!(
            "pairwise_scores: descriptor dims differ ({} vs {})",
            query.dim(),
            support.dim()
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(query.matrix.clone());
    let s = g.constant(support.matrix.clone());
    let d = g.constant(Tensor::scalar(delta));
    let v = score_block(&mut g, q, s, metric, d)?;
    Ok(ScoreMatrix {
        values: g.value(v).clone(),
        metric,
    })
}

/// For each row, the `k` best column indices in descending score order,
/// ties resolved toward the lower index.
pub fn knn_select(scores: &ScoreMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > scores.cols() {
        return Err(invalid(format!("knn_select: k = {k} not in 1..={}", scores.cols())));
    }
    Ok((0..scores.rows()).map(|i| top_k_indices(scores.row(i), k)).collect())
}

fn pooled_similarity(
    query: &DescriptorSet,
    support: &[&DescriptorSet],
    params: &ProjectionParams,
    variant: SimilarityVariant,
) -> Result<f64> {
    check_set(query)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let q = g.constant(query.matrix.clone());
    let parts: Vec<Var> = support
        .iter()
        .map(|s| {
            check_set(s)?;
            if s.dim() != query.dim() {
                return Err(invalid(format!(
                    "descriptor dims differ ({} vs {})",
                    query.dim(),
                    s.dim()
                )));
            }
            Ok(g.constant(s.matrix.clone()))
        })
        .collect::<Result<_>>()?;
    let pool = g.concat_columns(&parts)?;
    let sp = prepare_descriptors(&mut g, pool, vars.beta, variant.metric)?;
    let qp = prepare_descriptors(&mut g, q, vars.alpha, variant.metric)?;
    let scores = score_block(&mut g, qp, sp, variant.metric, vars.delta)?;
    let total = g.topk_group_sum(scores, variant.k, 1)?;
    Ok(g.value(total).item())
}

/// Image-to-image similarity: the sum over query descriptors of their `k`
/// best scores against the support image's descriptors.
pub fn image_similarity(
    query: &DescriptorSet,
    support: &DescriptorSet,
    params: &ProjectionParams,
    variant: SimilarityVariant,
) -> Result<f64> {
    pooled_similarity(query, &[support], params, variant)
}

/// Image-to-class similarity: like [`image_similarity`] but neighbors are
/// searched in the pooled descriptors of all `K` support images of a class.
/// With `variant.k == 1` this is the 1-nearest-neighbor sum.
pub fn class_similarity(
    query: &DescriptorSet,
    support_class: &[DescriptorSet],
    params: &ProjectionParams,
    variant: SimilarityVariant,
) -> Result<f64> {
    if support_class.is_empty() {
        return Err(invalid("class_similarity: support class is empty"));
    }
    let refs: Vec<&DescriptorSet> = support_class.iter().collect();
    pooled_similarity(query, &refs, params, variant)
}

/// Logits `[queries, classes]` with entry `(q, c) = temperature * class_similarity(q, S_c)`.
pub fn episode_logits(
    queries: &[DescriptorSet],
    support: &[Vec<DescriptorSet>],
    params: &ProjectionParams,
    variant: SimilarityVariant,
    temperature: Temperature,
) -> Result<Tensor> {
    if support.len() < 2 {
        return Err(invalid(format!("episode_logits: need at least 2 classes, got {}", support.len())));
    }
    let shot = support[0].len();
    if shot == 0 || support.iter().any(|c| c.len() != shot) {
        return Err(invalid("episode_logits: every class needs the same non-zero shot count"));
    }
    let first = queries.first().ok_or_else(|| invalid("episode_logits: no queries"))?;
    let m = first.count();
    let all = queries.iter().chain(support.iter().flatten());
    for ds in all.clone() {
        check_set(ds)?;
        if ds.count() != m || ds.dim() != first.dim() {
            return Err(invalid("episode_logits: all descriptor sets must share d and m"));
        }
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let sparts: Vec<Var> = support.iter().flatten().map(|s| g.constant(s.matrix.clone())).collect();
    let qparts: Vec<Var> = queries.iter().map(|q| g.constant(q.matrix.clone())).collect();
    let s = g.concat_columns(&sparts)?;
    let q = g.concat_columns(&qparts)?;
    let layout = EpisodeLayout {
        way: support.len(),
        shot,
        queries: queries.len(),
        descriptors_per_image: m,
    };
    let logits = episode_logits_graph(&mut g, s, q, layout, vars, variant, temperature)?;
    Ok(g.value(logits).clone())
}
