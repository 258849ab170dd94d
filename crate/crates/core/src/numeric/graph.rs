//! Reverse-mode autodiff over a recorded tape of tensor kernels.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller indices and the backward pass is a single reverse sweep.

use crate::error::{invalid, Error, Result};
use crate::numeric::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    /// Weight kept on the old running statistic: `run = m * run + (1 - m) * batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

/// Per-channel running mean and (population) variance. Empty until the first
/// train-mode pass, which initializes them to that batch's statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub mean: Option<Vec<f64>>,
    pub var: Option<Vec<f64>>,
}

impl RunningStats {
    fn update(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        fn blend(slot: &mut Option<Vec<f64>>, batch: &[f64], m: f64) {
            match slot {
                Some(run) => run
                    .iter_mut()
                    .zip(batch)
                    .for_each(|(r, b)| *r = m * *r + (1.0 - m) * b),
                None => *slot = Some(batch.to_vec()),
            }
        }
        blend(&mut self.mean, mean, momentum);
        blend(&mut self.var, var, momentum);
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geo: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    DescriptorMatrix {
        input: Var,
    },
    SelectColumns {
        input: Var,
        start: usize,
    },
    ConcatColumns(Vec<Var>),
    StandardizeColumns {
        input: Var,
        inv_std: Vec<f64>,
    },
    NdpProject {
        input: Var,
        factor: Var,
    },
    MatMulTn(Var, Var),
    Abs(Var),
    CosineScores {
        a: Var,
        b: Var,
        eps: f64,
    },
    GaussianKernel {
        input: Var,
        delta: Var,
    },
    TopkGroupSum {
        input: Var,
        selected: Vec<usize>,
    },
    StackColumns(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &str, detail: String) -> Error {
    invalid(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad`.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data).expect("kernel output sized from shape");
        self.push(value, op, needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(&shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, data, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.record(&[1], vec![s], Op::Sum(a), &[a])
    }

    /// `sum_i weights[i] * x[i]` for a fixed weight vector.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(a).numel() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), self.value(a).numel()),
            ));
        }
        let s = self.data(a).iter().zip(weights).map(|(x, w)| x * w).sum();
        Ok(self.record(&[1], vec![s], Op::WeightedSum { input: a, weights: weights.to_vec() }, &[a]))
    }

    /// Stride-1 convolution with `pad` zeros on every border.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but weight expects {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {bs:?} does not match {} filters", ws[0]),
            ));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel {}x{} must be odd", ws[2], ws[3])));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} larger than padded input {:?}", ws[2], ws[3], xs),
            ));
        }
        let geo = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            pad,
        };
        let out = kernels::conv2d_forward(&geo, self.data(input), self.data(weight), self.data(bias));
        let shape = [geo.batch, geo.out_channels, geo.out_h(), geo.out_w()];
        Ok(self.record(
            &shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
            &[input, weight, bias],
        ))
    }

    /// Batch normalization over the (batch, height, width) axes of an NCHW tensor.
    ///
    /// Train mode normalizes with the batch's own statistics and folds them into
    /// `stats`; eval mode normalizes with `stats` and fails if they were never set.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("batchnorm2d", format!("expected NCHW input, got {xs:?}")));
        }
        let (batch, channels, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        if batch * plane == 0 {
            return Err(shape_err("batchnorm2d", "empty batch".into()));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(shape_err(
                "batchnorm2d",
                format!("gamma/beta must have shape [{channels}]"),
            ));
        }
        if config.eps <= 0.0 {
            return Err(shape_err("batchnorm2d", "eps must be positive".into()));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.data(input), batch, channels, plane);
                stats.update(&mean, &var, config.momentum);
                (mean, var)
            }
            Mode::Eval => match (&stats.mean, &stats.var) {
                (Some(m), Some(v)) if m.len() == channels && v.len() == channels => (m.clone(), v.clone()),
                _ => {
                    return Err(Error::State(
                        "batchnorm2d: eval mode requires initialized running statistics".into(),
                    ))
                }
            },
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + config.eps).sqrt()).collect();
        let (out, xhat) = kernels::batchnorm_apply(
            self.data(input),
            batch,
            channels,
            plane,
            &mean,
            &inv_std,
            self.data(gamma),
            self.data(beta),
        );
        Ok(self.record(
            &xs,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(invalid(format!("leaky_relu: slope {slope} outside [0, 1)")));
        }
        let out = kernels::leaky_relu_forward(self.data(input), slope);
        let shape = self.shape(input).to_vec();
        Ok(self.record(&shape, out, Op::LeakyRelu { input, slope }, &[input]))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("maxpool2", format!("expected NCHW input, got {xs:?}")));
        }
        if !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(shape_err(
                "maxpool2",
                format!("spatial size {}x{} must be even", xs[2], xs[3]),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.data(input), xs[0] * xs[1], xs[2], xs[3]);
        let shape = [xs[0], xs[1], xs[2] / 2, xs[3] / 2];
        Ok(self.record(&shape, out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Bilinear x2 upsampling with half-pixel centers and edge clamping.
    pub fn upsample_bilinear2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(shape_err(
                "upsample_bilinear2",
                format!("expected non-empty NCHW input, got {xs:?}"),
            ));
        }
        let out = kernels::upsample2_forward(self.data(input), xs[0] * xs[1], xs[2], xs[3]);
        let shape = [xs[0], xs[1], 2 * xs[2], 2 * xs[3]];
        Ok(self.record(&shape, out, Op::Upsample2 { input }, &[input]))
    }

    /// Rearranges `[B, C, H, W]` into `[C, B*H*W]`: column `b*H*W + y*W + x`
    /// is the channel vector of image `b` at spatial position `(y, x)`.
    pub fn descriptor_matrix(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("descriptor_matrix", format!("expected NCHW, got {xs:?}")));
        }
        let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.data(input);
        let cols = b * plane;
        let mut out = vec![0.0; c * cols];
        for bi in 0..b {
            for ci in 0..c {
                let s = &src[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                out[ci * cols + bi * plane..ci * cols + (bi + 1) * plane].copy_from_slice(s);
            }
        }
        Ok(self.record(&[c, cols], out, Op::DescriptorMatrix { input }, &[input]))
    }

    pub fn select_columns(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 || start + len > xs[1] || len == 0 {
            return Err(shape_err(
                "select_columns",
                format!("columns {start}..{} out of range for {xs:?}", start + len),
            ));
        }
        let src = self.data(input);
        let mut out = Vec::with_capacity(xs[0] * len);
        for r in 0..xs[0] {
            out.extend_from_slice(&src[r * xs[1] + start..r * xs[1] + start + len]);
        }
        Ok(self.record(&[xs[0], len], out, Op::SelectColumns { input, start }, &[input]))
    }

    pub fn concat_columns(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat_columns: no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_columns", format!("{s:?} does not have {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.record(&[rows, total], out, Op::ConcatColumns(inputs.to_vec()), inputs))
    }

    /// Centers each column of a `[d, m]` matrix and scales it to unit
    /// population variance: `(x - mean) / sqrt(var + eps)`.
    pub fn standardize_columns(&mut self, input: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 || xs[0] < 2 {
            return Err(shape_err(
                "standardize_columns",
                format!("need [d, m] with d >= 2, got {xs:?}"),
            ));
        }
        let (d, m) = (xs[0], xs[1]);
        let src = self.data(input);
        let mut out = vec![0.0; d * m];
        let mut inv_std = vec![0.0; m];
        for j in 0..m {
            let mean = (0..d).map(|u| src[u * m + j]).sum::<f64>() / d as f64;
            let var = (0..d).map(|u| (src[u * m + j] - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[j] = inv;
            for u in 0..d {
                out[u * m + j] = (src[u * m + j] - mean) * inv;
            }
        }
        Ok(self.record(&xs, out, Op::StandardizeColumns { input, inv_std }, &[input]))
    }

    /// Elementwise `sign(a) * (1 - exp(-a^2 / (2 f^2)))` with a scalar factor node `f`.
    pub fn ndp_project(&mut self, input: Var, factor: Var) -> Result<Var> {
        if self.shape(factor) != [1] {
            return Err(shape_err("ndp_project", format!("factor must be a scalar, got {:?}", self.shape(factor))));
        }
        let f = self.data(factor)[0];
        if f == 0.0 || !f.is_finite() {
            return Err(invalid(format!("ndp_project: factor {f} must be finite and non-zero")));
        }
        let out = self.data(input).iter().map(|&a| ndp_value(a, f)).collect();
        let shape = self.shape(input).to_vec();
        Ok(self.record(&shape, out, Op::NdpProject { input, factor }, &[input, factor]))
    }

    /// `a^T b` for `a: [d, p]` and `b: [d, q]`, giving `[p, q]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("matmul_tn", format!("{sa:?} and {sb:?} disagree on d")));
        }
        let out = kernels::matmul_tn(self.data(a), self.data(b), sa[0], sa[1], sb[1]);
        Ok(self.record(&[sa[1], sb[1]], out, Op::MatMulTn(a, b), &[a, b]))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let out = self.data(input).iter().map(|x| x.abs()).collect();
        let shape = self.shape(input).to_vec();
        self.record(&shape, out, Op::Abs(input), &[input])
    }

    /// Cosine similarity between columns: `<a_i, b_j> / (|a_i| |b_j| + eps)`.
    pub fn cosine_scores(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("cosine_scores", format!("{sa:?} and {sb:?} disagree on d")));
        }
        let (d, p, q) = (sa[0], sa[1], sb[1]);
        let dots = kernels::matmul_tn(self.data(a), self.data(b), d, p, q);
        let na = column_norms(self.data(a), d, p);
        let nb = column_norms(self.data(b), d, q);
        let out = (0..p * q)
            .map(|idx| dots[idx] / (na[idx / q] * nb[idx % q] + eps))
            .collect();
        Ok(self.record(&[p, q], out, Op::CosineScores { a, b, eps }, &[a, b]))
    }

    /// `1 - exp(-x / (2 delta^2))` elementwise, with a scalar node `delta`.
    pub fn gaussian_kernel(&mut self, input: Var, delta: Var) -> Result<Var> {
        if self.shape(delta) != [1] {
            return Err(shape_err("gaussian_kernel", "delta must be a scalar".into()));
        }
        let dl = self.data(delta)[0];
        if dl == 0.0 || !dl.is_finite() {
            return Err(invalid(format!("gaussian_kernel: delta {dl} must be finite and non-zero")));
        }
        let out = self
            .data(input)
            .iter()
            .map(|&x| 1.0 - (-x / (2.0 * dl * dl)).exp())
            .collect();
        let shape = self.shape(input).to_vec();
        Ok(self.record(&shape, out, Op::GaussianKernel { input, delta }, &[input, delta]))
    }

    /// For a `[groups * rows, cols]` score matrix, sums each row's `k` largest
    /// entries (ties to the lower column) and then sums rows within each group,
    /// giving `[groups]`. Gradient flows only into the selected entries.
    pub fn topk_group_sum(&mut self, input: Var, k: usize, groups: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("topk_group_sum", format!("expected 2-D scores, got {xs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        if k == 0 || k > cols {
            return Err(invalid(format!("topk_group_sum: k = {k} not in 1..={cols}")));
        }
        if groups == 0 || rows % groups != 0 {
            return Err(invalid(format!("topk_group_sum: {rows} rows not divisible into {groups} groups")));
        }
        let per_group = rows / groups;
        let src = self.data(input);
        let mut selected = Vec::with_capacity(rows * k);
        let mut out = vec![0.0; groups];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            for c in top_k_indices(row, k) {
                out[r / per_group] += row[c];
                selected.push(r * cols + c);
            }
        }
        Ok(self.record(&[groups], out, Op::TopkGroupSum { input, selected }, &[input]))
    }

    /// Places `C` vectors of length `n` side by side as an `[n, C]` matrix.
    pub fn stack_columns(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid("stack_columns: no inputs"))?;
        let n = self.value(*first).numel();
        let c = inputs.len();
        let mut out = vec![0.0; n * c];
        for (j, &v) in inputs.iter().enumerate() {
            let col = self.data(v);
            if col.len() != n {
                return Err(shape_err("stack_columns", format!("column {j} has {} entries, expected {n}", col.len())));
            }
            for (i, &x) in col.iter().enumerate() {
                out[i * c + j] = x;
            }
        }
        Ok(self.record(&[n, c], out, Op::StackColumns(inputs.to_vec()), inputs))
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() || xs[0] == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {xs:?} vs {} labels", labels.len()),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid(format!("softmax_cross_entropy: label {bad} >= {c} classes")));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.record(
            &[1],
            vec![loss / n as f64],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Propagates d(loss)/d(node) back to every leaf with `requires_grad`,
    /// accumulating into the leaf's grad slot. Leaves that do not influence
    /// the loss receive a zero gradient. Valid once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad.is_none() {
                let n = node.value.numel();
                node.value.grad = Some(vec![0.0; n]);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::WeightedSum { input, weights } => vec![(*input, weights.iter().map(|w| w * g[0]).collect())],
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            } => {
                let grads = kernels::conv2d_backward(
                    geo,
                    self.data(*input),
                    self.data(*weight),
                    g,
                    self.needs(*input),
                );
                let mut out = vec![(*weight, grads.weight), (*bias, grads.bias)];
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let (dgamma, dbeta) = kernels::batchnorm_affine_grads(g, xhat, b, c, plane);
                let gam = self.data(*gamma);
                let mut out = vec![(*gamma, dgamma), (*beta, dbeta)];
                if self.needs(*input) {
                    let dx = if *batch_stats {
                        kernels::batchnorm_train_input_grad(g, xhat, b, c, plane, gam, inv_std)
                    } else {
                        let mut dx = g.to_vec();
                        for bi in 0..b {
                            for ci in 0..c {
                                let off = (bi * c + ci) * plane;
                                let k = gam[ci] * inv_std[ci];
                                dx[off..off + plane].iter_mut().for_each(|v| *v *= k);
                            }
                        }
                        dx
                    };
                    out.push((*input, dx));
                }
                out
            }
            Op::LeakyRelu { input, slope } => {
                vec![(*input, kernels::leaky_relu_backward(self.data(*input), g, *slope))]
            }
            Op::MaxPool2 { input, argmax } => {
                vec![(*input, kernels::maxpool2_backward(g, argmax, self.value(*input).numel()))]
            }
            Op::Upsample2 { input } => {
                let s = self.shape(*input);
                vec![(*input, kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3]))]
            }
            Op::DescriptorMatrix { input } => {
                let s = self.shape(*input);
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let cols = b * plane;
                let mut dx = vec![0.0; b * c * plane];
                for bi in 0..b {
                    for ci in 0..c {
                        dx[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                            .copy_from_slice(&g[ci * cols + bi * plane..ci * cols + (bi + 1) * plane]);
                    }
                }
                vec![(*input, dx)]
            }
            Op::SelectColumns { input, start } => {
                let s = self.shape(*input);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; s[0] * s[1]];
                for r in 0..s[0] {
                    dx[r * s[1] + start..r * s[1] + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*input, dx)]
            }
            Op::ConcatColumns(inputs) => {
                let (rows, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let w = self.shape(v)[1];
                    let mut dx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    out.push((v, dx));
                }
                out
            }
            Op::StandardizeColumns { input, inv_std } => {
                let (d, m) = (node.value.shape()[0], node.value.shape()[1]);
                let y = node.value.data();
                let mut dx = vec![0.0; d * m];
                for j in 0..m {
                    let (mut sg, mut sgy) = (0.0, 0.0);
                    for u in 0..d {
                        sg += g[u * m + j];
                        sgy += g[u * m + j] * y[u * m + j];
                    }
                    let k = inv_std[j] / d as f64;
                    for u in 0..d {
                        let idx = u * m + j;
                        dx[idx] = k * (d as f64 * g[idx] - sg - y[idx] * sgy);
                    }
                }
                vec![(*input, dx)]
            }
            Op::NdpProject { input, factor } => {
                let f = self.data(*factor)[0];
                let a = self.data(*input);
                let f2 = f * f;
                let mut da = vec![0.0; a.len()];
                let mut df = 0.0;
                for (idx, (&x, &gi)) in a.iter().zip(g).enumerate() {
                    let e = (-x * x / (2.0 * f2)).exp();
                    // |x| e / f^2 is the C^1 derivative; it vanishes at x = 0
                    da[idx] = gi * x.abs() * e / f2;
                    df -= gi * x.signum_or_zero() * x * x * e / (f2 * f);
                }
                vec![(*input, da), (*factor, vec![df])]
            }
            Op::MatMulTn(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (d, p, q) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::with_capacity(2);
                if self.needs(*a) {
                    // da = b g^T : [d, q] x [q, p]
                    out.push((*a, kernels::matmul_nt(self.data(*b), g, d, q, p)));
                }
                if self.needs(*b) {
                    // db = a g : [d, p] x [p, q]
                    out.push((*b, kernels::matmul_nn(self.data(*a), g, d, p, q)));
                }
                out
            }
            Op::Abs(input) => {
                let dx = self
                    .data(*input)
                    .iter()
                    .zip(g)
                    .map(|(x, gi)| x.signum_or_zero() * gi)
                    .collect();
                vec![(*input, dx)]
            }
            Op::CosineScores { a, b, eps } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (d, p, q) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                let na = column_norms(ad, d, p);
                let nb = column_norms(bd, d, q);
                let dots = kernels::matmul_tn(ad, bd, d, p, q);
                // s = dot / den with den = |a_i||b_j| + eps.
                // ds/da_i = b_j / den - dot |b_j| a_i / (|a_i| den^2)
                let mut coef_b = vec![0.0; p * q]; // multiplies b_j in da_i, and a_i in db_j
                let mut self_a = vec![0.0; p];
                let mut self_b = vec![0.0; q];
                for i in 0..p {
                    for j in 0..q {
                        let den = na[i] * nb[j] + eps;
                        let gij = g[i * q + j];
                        coef_b[i * q + j] = gij / den;
                        let t = gij * dots[i * q + j] / (den * den);
                        if na[i] > 0.0 {
                            self_a[i] += t * nb[j] / na[i];
                        }
                        if nb[j] > 0.0 {
                            self_b[j] += t * na[i] / nb[j];
                        }
                    }
                }
                let mut da = kernels::matmul_nt(bd, &coef_b, d, q, p);
                for u in 0..d {
                    for i in 0..p {
                        da[u * p + i] -= self_a[i] * ad[u * p + i];
                    }
                }
                let mut db = kernels::matmul_nn(ad, &coef_b, d, p, q);
                for u in 0..d {
                    for j in 0..q {
                        db[u * q + j] -= self_b[j] * bd[u * q + j];
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::GaussianKernel { input, delta } => {
                let dl = self.data(*delta)[0];
                let x = self.data(*input);
                let two_d2 = 2.0 * dl * dl;
                let mut dx = vec![0.0; x.len()];
                let mut dd = 0.0;
                for (idx, (&xi, &gi)) in x.iter().zip(g).enumerate() {
                    let e = (-xi / two_d2).exp();
                    dx[idx] = gi * e / two_d2;
                    dd -= gi * e * xi / (dl * dl * dl);
                }
                vec![(*input, dx), (*delta, vec![dd])]
            }
            Op::TopkGroupSum { input, selected } => {
                let rows = self.shape(*input)[0];
                let cols = self.shape(*input)[1];
                let per_group = rows / g.len();
                let mut dx = vec![0.0; rows * cols];
                for &idx in selected {
                    dx[idx] += g[(idx / cols) / per_group];
                }
                vec![(*input, dx)]
            }
            Op::StackColumns(inputs) => {
                let c = inputs.len();
                inputs
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let n = self.value(v).numel();
                        (v, (0..n).map(|i| g[i * c + j]).collect())
                    })
                    .collect()
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * c + l] -= scale;
                }
                vec![(*logits, dz)]
            }
        }
    }
}

/// Sign with `sign(0) = 0` (`f64::signum` maps `+0.0` to `1.0`).
trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// `sign(a) (1 - exp(-a^2 / 2 factor^2))`, via `exp_m1` so small inputs keep
/// their precision.
pub fn ndp_value(a: f64, factor: f64) -> f64 {
    -a.signum_or_zero() * (-a * a / (2.0 * factor * factor)).exp_m1()
}

fn column_norms(data: &[f64], d: usize, m: usize) -> Vec<f64> {
    let mut n = vec![0.0; m];
    for u in 0..d {
        for (j, acc) in n.iter_mut().enumerate() {
            *acc += data[u * m + j] * data[u * m + j];
        }
    }
    n.iter().map(|v| v.sqrt()).collect()
}

/// Indices of the `k` largest entries in descending order; ties go to the
/// lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &v) in row.iter().enumerate() {
        if best.len() == k && v <= row[best[k - 1]] {
            continue;
        }
        let pos = best.partition_point(|&b| row[b] >= v);
        best.insert(pos, i);
        best.truncate(k);
    }
    best
}
