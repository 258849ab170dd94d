//! Feature re-abstraction embedding.
//!
//! Four conv blocks produce Ω1 (N/2) and Ω2..Ω4 (N/4). The deep maps are summed,
//! upsampled x2, merged with Ω1, passed through an anti-aliasing conv and pooled
//! back to N/4. Each spatial position of the result is one 64-d descriptor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numeric::{BatchNormConfig, Graph, Mode, RunningStats, Var};
use crate::tensor::Tensor;

/// Filters per conv layer.
pub const CHANNELS: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
/// Spatial size must be divisible by this (two 2x2 pools before the descriptors).
pub const SIZE_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingVariant {
    /// Multi-level fusion with upsampling and re-pooling.
    Frae,
    /// Plain four-block backbone; descriptors come from the fourth block.
    Conv64f,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingOptions {
    pub variant: EmbeddingVariant,
    pub leaky_slope: f64,
    /// Follow the fusion conv with batch norm and leaky ReLU.
    pub fusion_norm_act: bool,
    pub batch_norm: BatchNormConfig,
}

impl Default for EmbeddingOptions {
    fn default() -> Self {
        EmbeddingOptions {
            variant: EmbeddingVariant::Frae,
            leaky_slope: 0.2,
            fusion_norm_act: false,
            batch_norm: BatchNormConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl Norm {
    fn new(channels: usize) -> Self {
        Norm {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running: RunningStats::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Norm,
    pub has_pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Option<Norm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FraeWeights {
    pub blocks: Vec<ConvBlockParams>,
    /// Present only for [`EmbeddingVariant::Frae`].
    pub fusion: Option<FusionParams>,
    pub options: EmbeddingOptions,
}

/// He-normal conv weight `[out, in, 3, 3]` and zero bias.
fn conv_init<R: Rng + ?Sized>(cin: usize, rng: &mut R) -> (Tensor, Tensor) {
    let std = (2.0 / (cin * 9) as f64).sqrt();
    (
        Tensor::randn(&[CHANNELS, cin, 3, 3], std, rng).with_grad(),
        Tensor::zeros(&[CHANNELS]).with_grad(),
    )
}

impl FraeWeights {
    pub fn init<R: Rng + ?Sized>(options: EmbeddingOptions, rng: &mut R) -> Self {
        let blocks = (0..4)
            .map(|i| {
                let (weight, bias) = conv_init(if i == 0 { IMAGE_CHANNELS } else { CHANNELS }, rng);
                ConvBlockParams {
                    weight,
                    bias,
                    norm: Norm::new(CHANNELS),
                    has_pool: i < 2,
                }
            })
            .collect();
        let fusion = (options.variant == EmbeddingVariant::Frae).then(|| {
            let (weight, bias) = conv_init(CHANNELS, rng);
            FusionParams {
                weight,
                bias,
                norm: options.fusion_norm_act.then(|| Norm::new(CHANNELS)),
            }
        });
        FraeWeights {
            blocks,
            fusion,
            options,
        }
    }

    /// Learnable tensors in a fixed order with stable dotted names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{}", i + 1);
            out.push((format!("{p}.conv.weight"), &b.weight));
            out.push((format!("{p}.conv.bias"), &b.bias));
            out.push((format!("{p}.bn.gamma"), &b.norm.gamma));
            out.push((format!("{p}.bn.beta"), &b.norm.beta));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.conv.weight".into(), &f.weight));
            out.push(("fusion.conv.bias".into(), &f.bias));
            if let Some(n) = &f.norm {
                out.push(("fusion.bn.gamma".into(), &n.gamma));
                out.push(("fusion.bn.beta".into(), &n.beta));
            }
        }
        out
    }

    /// Same order as [`FraeWeights::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        if let Some(f) = &mut self.fusion {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
            if let Some(n) = &mut f.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    /// Batch-norm running statistics with names, in a fixed order.
    pub fn running_stats(&self) -> Vec<(String, &RunningStats)> {
        let mut out: Vec<(String, &RunningStats)> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("block{}.bn", i + 1), &b.norm.running))
            .collect();
        if let Some(n) = self.fusion.as_ref().and_then(|f| f.norm.as_ref()) {
            out.push(("fusion.bn".into(), &n.running));
        }
        out
    }

    /// Mutable form of [`FraeWeights::running_stats`].
    pub fn running_stats_mut(&mut self) -> Vec<(String, &mut RunningStats)> {
        let mut out: Vec<(String, &mut RunningStats)> = self
            .blocks
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("block{}.bn", i + 1), &mut b.norm.running))
            .collect();
        if let Some(n) = self.fusion.as_mut().and_then(|f| f.norm.as_mut()) {
            out.push(("fusion.bn".into(), &mut n.running));
        }
        out
    }

    /// Records every learnable tensor as a graph leaf (trainable or constant).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn variant(&self) -> EmbeddingVariant {
        self.options.variant
    }
}

/// Graph handles for one conv block's learnable tensors.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub weight: Var,
    pub bias: Var,
    pub norm: Option<(Var, Var)>,
}

fn split_vars(weights: &FraeWeights, vars: &[Var]) -> Result<(Vec<BlockVars>, Option<FusionVars>)> {
    if vars.len() != weights.named_params().len() {
        return Err(invalid(format!(
            "embedding binding has {} handles, weights have {} tensors",
            vars.len(),
            weights.named_params().len()
        )));
    }
    let blocks = vars[..16]
        .chunks(4)
        .map(|c| BlockVars {
            weight: c[0],
            bias: c[1],
            gamma: c[2],
            beta: c[3],
        })
        .collect();
    let fusion = weights.fusion.as_ref().map(|f| FusionVars {
        weight: vars[16],
        bias: vars[17],
        norm: f.norm.as_ref().map(|_| (vars[18], vars[19])),
    });
    Ok((blocks, fusion))
}

/// conv(pad 1) -> batch norm -> leaky ReLU -> optional 2x2 max pool.
pub fn conv_block(
    g: &mut Graph,
    input: Var,
    params: &mut ConvBlockParams,
    vars: BlockVars,
    mode: Mode,
    options: &EmbeddingOptions,
) -> Result<Var> {
    let s = g.shape(input);
    if params.has_pool && (s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2)) {
        return Err(invalid(format!("conv_block: pooled block needs even spatial size, got {s:?}")));
    }
    let x = g.conv2d(input, vars.weight, vars.bias, 1)?;
    let x = g.batchnorm2d(x, vars.gamma, vars.beta, &mut params.norm.running, mode, options.batch_norm)?;
    let x = g.leaky_relu(x, options.leaky_slope)?;
    if params.has_pool {
        g.maxpool2(x)
    } else {
        Ok(x)
    }
}

/// Sums Ω2..Ω4, upsamples x2, adds Ω1, applies the anti-aliasing conv and pools.
#[allow(clippy::too_many_arguments)]
pub fn fuse_levels(
    g: &mut Graph,
    omega1: Var,
    omega2: Var,
    omega3: Var,
    omega4: Var,
    fusion: &mut FusionParams,
    vars: FusionVars,
    mode: Mode,
    options: &EmbeddingOptions,
) -> Result<Var> {
    let deep = g.shape(omega2).to_vec();
    if g.shape(omega3) != deep.as_slice() || g.shape(omega4) != deep.as_slice() {
        return Err(invalid(format!(
            "fuse_levels: deep maps disagree: {:?}, {:?}, {:?}",
            deep,
            g.shape(omega3),
            g.shape(omega4)
        )));
    }
    let shallow = g.shape(omega1);
    if deep.len() != 4
        || shallow.len() != 4
        || shallow[..2] != deep[..2]
        || shallow[2] != 2 * deep[2]
        || shallow[3] != 2 * deep[3]
    {
        return Err(invalid(format!(
            "fuse_levels: shallow map {shallow:?} must be the deep map {deep:?} at twice the resolution"
        )));
    }
    let combined = g.add(omega2, omega3)?;
    let combined = g.add(combined, omega4)?;
    let upsampled = g.upsample_bilinear2(combined)?;
    let merged = g.add(upsampled, omega1)?;
    let mut xi = g.conv2d(merged, vars.weight, vars.bias, 1)?;
    if let (Some(norm), Some((gamma, beta))) = (fusion.norm.as_mut(), vars.norm) {
        xi = g.batchnorm2d(xi, gamma, beta, &mut norm.running, mode, options.batch_norm)?;
        xi = g.leaky_relu(xi, options.leaky_slope)?;
    }
    g.maxpool2(xi)
}

/// Runs the embedding on `[B, 3, N, N]` images and returns the final feature
/// maps `[B, 64, N/4, N/4]`. `vars` must come from [`FraeWeights::bind`].
pub fn embed(g: &mut Graph, images: Var, weights: &mut FraeWeights, vars: &[Var], mode: Mode) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != IMAGE_CHANNELS {
        return Err(invalid(format!("embed: expected [B, 3, N, N] images, got {s:?}")));
    }
    if !s[2].is_multiple_of(SIZE_FACTOR) || !s[3].is_multiple_of(SIZE_FACTOR) || s[2] == 0 || s[3] == 0 {
        return Err(invalid(format!(
            "embed: image size {}x{} must be a positive multiple of {SIZE_FACTOR}",
            s[2], s[3]
        )));
    }
    let (block_vars, fusion_vars) = split_vars(weights, vars)?;
    let options = weights.options;
    let mut omegas = Vec::with_capacity(4);
    let mut x = images;
    for (block, bv) in weights.blocks.iter_mut().zip(block_vars) {
        x = conv_block(g, x, block, bv, mode, &options)?;
        omegas.push(x);
    }
    match (weights.fusion.as_mut(), fusion_vars) {
        (Some(fusion), Some(fv)) => fuse_levels(
            g, omegas[0], omegas[1], omegas[2], omegas[3], fusion, fv, mode, &options,
        ),
        _ => Ok(omegas[3]),
    }
}

/// The `d x m` local descriptors of one image; column `j` is the channel
/// vector at row-major spatial index `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub matrix: Tensor,
    pub h: usize,
    pub w: usize,
}

impl DescriptorSet {
    pub fn new(matrix: Tensor, h: usize, w: usize) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[1] != h * w {
            return Err(invalid(format!("descriptor matrix {s:?} is not [d, {h}*{w}]")));
        }
        Ok(DescriptorSet { matrix, h, w })
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Descriptor `j` as a `d`-vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let m = self.count();
        (0..self.dim()).map(|u| self.matrix.data()[u * m + j]).collect()
    }
}

/// Splits `[B, C, h, w]` feature maps into per-image descriptor sets.
pub fn extract_descriptors(maps: &Tensor) -> Result<Vec<DescriptorSet>> {
    let s = maps.shape();
    if s.len() != 4 {
        return Err(invalid(format!("extract_descriptors: expected [B, C, h, w], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    maps.data()
        .chunks(per)
        .map(|chunk| DescriptorSet::new(Tensor::new(&[c, h * w], chunk.to_vec())?, h, w))
        .collect()
}

/// Embeds a batch of images and returns one [`DescriptorSet`] per image.
pub fn frae_forward(images: &Tensor, weights: &mut FraeWeights, mode: Mode) -> Result<Vec<DescriptorSet>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let vars = weights.bind(&mut g, false);
    let maps = embed(&mut g, x, weights, &vars, mode)?;
    extract_descriptors(g.value(maps))
}
