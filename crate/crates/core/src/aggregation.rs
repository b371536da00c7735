//! Fusion of K warped per-view feature maps into one map.
//!
//! Two aggregators are provided. Pooling applies a shared stack of two
//! residual blocks to every view and reduces across views with max or mean.
//! Self-attention attends across views at each spatial location separately:
//! per block, the SA output gets a residual branch, ChannelNorm, a shared
//! 3x3 convolution per view, and ChannelNorm again; after two such blocks a
//! shared per-view scoring head produces K score maps, softmax over views
//! turns them into a pixel-wise distribution, and the output is the
//! score-weighted average of the original (pre-block) view features.
//!
//! The scoring head is a shared c -> 1 convolution applied to each view, so
//! no parameter shape depends on K and an aggregator can be evaluated with
//! any number of views.
//!
//! Weight container names: `sa.block{0,1}.{wq,wk,wv}`,
//! `sa.block{0,1}.{norm1,norm2}.{scale,bias}`, `sa.block{0,1}.conv.{kernel,bias}`,
//! `sa.score.{kernel,bias}`, and `pool.res{0,1}.{conv1,conv2}.{kernel,bias}`,
//! `pool.res{0,1}.{norm1,norm2}.{scale,bias}`.

use crate::error::{Error, Result};
use crate::ops::{self, ReduceMode, CHANNEL_NORM_EPS};
use crate::tensor::{Parameter, Tensor};
use crate::weights::WeightMap;
use rand::Rng;

/// Number of stacked self-attention blocks.
pub const SA_BLOCK_COUNT: usize = 2;

/// K per-view feature maps of identical extents.
#[derive(Debug, Clone)]
pub struct ViewFeatureStack {
    views: Vec<Tensor>,
}

impl ViewFeatureStack {
    pub fn new(views: Vec<Tensor>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::arg("view stack needs at least one view"));
        }
        let shape = views[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("views must be c x H x W tensors"));
        }
        for (k, v) in views.iter().enumerate() {
            if v.shape() != shape {
                return Err(Error::shape(format!(
                    "view {k} has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
        }
        Ok(Self { views })
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn channels(&self) -> usize {
        self.views[0].shape()[0]
    }

    pub fn height(&self) -> usize {
        self.views[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.views[0].shape()[2]
    }

    pub fn views(&self) -> &[Tensor] {
        &self.views
    }

    pub fn view(&self, k: usize) -> &Tensor {
        &self.views[k]
    }

    /// Reorder views; `perm` must be a permutation of `0..K`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.views.len() {
            return Err(Error::arg("permutation length mismatch"));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::arg("not a permutation"));
            }
            seen[p] = true;
        }
        Ok(Self {
            views: perm.iter().map(|&p| self.views[p].clone()).collect(),
        })
    }
}

/// ChannelNorm affine pair.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub scale: Parameter,
    pub bias: Parameter,
}

impl NormParams {
    pub fn identity(c: usize) -> Self {
        Self {
            scale: Parameter::new(Tensor::filled(vec![c], 1.0).expect("finite")),
            bias: Parameter::new(Tensor::zeros(vec![c])),
        }
    }

    pub fn random(c: usize, rng: &mut impl Rng, scale: f32) -> Self {
        Self {
            scale: Parameter::new(Tensor::random(vec![c], rng, scale)),
            bias: Parameter::new(Tensor::random(vec![c], rng, scale)),
        }
    }
}

/// Convolution kernel + bias pair.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kernel: Parameter,
    pub bias: Parameter,
}

impl ConvParams {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            kernel: Parameter::new(Tensor::zeros(vec![c_out, c_in, k, k])),
            bias: Parameter::new(Tensor::zeros(vec![c_out])),
        }
    }

    pub fn random(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng, scale: f32) -> Self {
        Self {
            kernel: Parameter::new(Tensor::random(vec![c_out, c_in, k, k], rng, scale)),
            bias: Parameter::new(Tensor::random(vec![c_out], rng, scale)),
        }
    }
}

/// One self-attention block: query/key/value projections, then residual +
/// norm + shared 3x3 conv + norm.
#[derive(Debug, Clone)]
pub struct SaBlockParams {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub norm1: NormParams,
    pub conv: ConvParams,
    pub norm2: NormParams,
}

/// Parameters of the self-attention aggregator.
#[derive(Debug, Clone)]
pub struct SaParams {
    pub blocks: Vec<SaBlockParams>,
    pub score: ConvParams,
}

impl SaParams {
    /// Random initialization with attention dimension `d`; callers usually
    /// default `d` to the channel count.
    pub fn random(c: usize, d: usize, rng: &mut impl Rng, scale: f32) -> Self {
        let blocks = (0..SA_BLOCK_COUNT)
            .map(|_| SaBlockParams {
                wq: Parameter::new(Tensor::random(vec![c, d], rng, scale)),
                wk: Parameter::new(Tensor::random(vec![c, d], rng, scale)),
                wv: Parameter::new(Tensor::random(vec![c, c], rng, scale)),
                norm1: NormParams::random(c, rng, scale),
                conv: ConvParams::random(c, c, 3, rng, scale),
                norm2: NormParams::random(c, rng, scale),
            })
            .collect();
        Self {
            blocks,
            score: ConvParams::random(1, c, 1, rng, scale),
        }
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].wq.value.shape()[0]
    }

    pub fn attention_dim(&self) -> usize {
        self.blocks[0].wq.value.shape()[1]
    }

    pub fn from_weights(weights: &WeightMap) -> Result<Self> {
        let mut blocks = Vec::with_capacity(SA_BLOCK_COUNT);
        for b in 0..SA_BLOCK_COUNT {
            let p = |suffix: &str| -> Result<Parameter> {
                Ok(Parameter::new(
                    weights.require(&format!("sa.block{b}.{suffix}"))?.clone(),
                ))
            };
            blocks.push(SaBlockParams {
                wq: p("wq")?,
                wk: p("wk")?,
                wv: p("wv")?,
                norm1: NormParams {
                    scale: p("norm1.scale")?,
                    bias: p("norm1.bias")?,
                },
                conv: ConvParams {
                    kernel: p("conv.kernel")?,
                    bias: p("conv.bias")?,
                },
                norm2: NormParams {
                    scale: p("norm2.scale")?,
                    bias: p("norm2.bias")?,
                },
            });
        }
        let params = Self {
            blocks,
            score: ConvParams {
                kernel: Parameter::new(weights.require("sa.score.kernel")?.clone()),
                bias: Parameter::new(weights.require("sa.score.bias")?.clone()),
            },
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save_into(&self, weights: &mut WeightMap) {
        for (b, block) in self.blocks.iter().enumerate() {
            weights.insert(format!("sa.block{b}.wq"), block.wq.value.clone());
            weights.insert(format!("sa.block{b}.wk"), block.wk.value.clone());
            weights.insert(format!("sa.block{b}.wv"), block.wv.value.clone());
            weights.insert(
                format!("sa.block{b}.norm1.scale"),
                block.norm1.scale.value.clone(),
            );
            weights.insert(
                format!("sa.block{b}.norm1.bias"),
                block.norm1.bias.value.clone(),
            );
            weights.insert(
                format!("sa.block{b}.conv.kernel"),
                block.conv.kernel.value.clone(),
            );
            weights.insert(
                format!("sa.block{b}.conv.bias"),
                block.conv.bias.value.clone(),
            );
            weights.insert(
                format!("sa.block{b}.norm2.scale"),
                block.norm2.scale.value.clone(),
            );
            weights.insert(
                format!("sa.block{b}.norm2.bias"),
                block.norm2.bias.value.clone(),
            );
        }
        weights.insert("sa.score.kernel", self.score.kernel.value.clone());
        weights.insert("sa.score.bias", self.score.bias.value.clone());
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.len() != SA_BLOCK_COUNT {
            return Err(Error::shape(format!(
                "expected {SA_BLOCK_COUNT} SA blocks, got {}",
                self.blocks.len()
            )));
        }
        let c = self.channels();
        let d = self.attention_dim();
        if d < 1 {
            return Err(Error::shape("attention dimension must be at least 1"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.wq.value.shape() != [c, d]
                || b.wk.value.shape() != [c, d]
                || b.wv.value.shape() != [c, c]
            {
                return Err(Error::shape(format!(
                    "block {i} projection shapes inconsistent"
                )));
            }
            if b.conv.kernel.value.shape() != [c, c, 3, 3] {
                return Err(Error::shape(format!(
                    "block {i} conv kernel must be {c}x{c}x3x3"
                )));
            }
        }
        if self.score.kernel.value.shape() != [1, c, 1, 1] {
            return Err(Error::shape(
                "scoring head must be a shared c -> 1 convolution",
            ));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.wq.zero_grad();
            b.wk.zero_grad();
            b.wv.zero_grad();
            b.norm1.scale.zero_grad();
            b.norm1.bias.zero_grad();
            b.conv.kernel.zero_grad();
            b.conv.bias.zero_grad();
            b.norm2.scale.zero_grad();
            b.norm2.bias.zero_grad();
        }
        self.score.kernel.zero_grad();
        self.score.bias.zero_grad();
    }
}

/// Pooling mode of the pooling aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "mean" => Ok(PoolMode::Mean),
            other => Err(Error::arg(format!("invalid pooling mode `{other}`"))),
        }
    }
}

/// One residual block: conv -> norm -> relu -> conv -> norm with additive skip.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub conv1: ConvParams,
    pub norm1: NormParams,
    pub conv2: ConvParams,
    pub norm2: NormParams,
}

/// Parameters of the pooling aggregator: two residual blocks shared across
/// views, then max or mean across the view axis.
#[derive(Debug, Clone)]
pub struct PoolParams {
    pub blocks: Vec<ResBlockParams>,
    pub mode: PoolMode,
}

impl PoolParams {
    /// Zero conv kernels make the residual branch vanish, so the block stack
    /// passes features through untouched and only the pooling acts.
    pub fn passthrough(c: usize, mode: PoolMode) -> Self {
        let blocks = (0..2)
            .map(|_| ResBlockParams {
                conv1: ConvParams::zeros(c, c, 3),
                norm1: NormParams::identity(c),
                conv2: ConvParams::zeros(c, c, 3),
                norm2: NormParams::identity(c),
            })
            .collect();
        Self { blocks, mode }
    }

    pub fn random(c: usize, mode: PoolMode, rng: &mut impl Rng, scale: f32) -> Self {
        let blocks = (0..2)
            .map(|_| ResBlockParams {
                conv1: ConvParams::random(c, c, 3, rng, scale),
                norm1: NormParams::random(c, rng, scale),
                conv2: ConvParams::random(c, c, 3, rng, scale),
                norm2: NormParams::random(c, rng, scale),
            })
            .collect();
        Self { blocks, mode }
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].conv1.kernel.value.shape()[0]
    }

    pub fn from_weights(weights: &WeightMap, mode: PoolMode) -> Result<Self> {
        let mut blocks = Vec::with_capacity(2);
        for b in 0..2 {
            let t = |suffix: &str| -> Result<Parameter> {
                Ok(Parameter::new(
                    weights.require(&format!("pool.res{b}.{suffix}"))?.clone(),
                ))
            };
            blocks.push(ResBlockParams {
                conv1: ConvParams {
                    kernel: t("conv1.kernel")?,
                    bias: t("conv1.bias")?,
                },
                norm1: NormParams {
                    scale: t("norm1.scale")?,
                    bias: t("norm1.bias")?,
                },
                conv2: ConvParams {
                    kernel: t("conv2.kernel")?,
                    bias: t("conv2.bias")?,
                },
                norm2: NormParams {
                    scale: t("norm2.scale")?,
                    bias: t("norm2.bias")?,
                },
            });
        }
        Ok(Self { blocks, mode })
    }

    pub fn save_into(&self, weights: &mut WeightMap) {
        for (b, block) in self.blocks.iter().enumerate() {
            weights.insert(
                format!("pool.res{b}.conv1.kernel"),
                block.conv1.kernel.value.clone(),
            );
            weights.insert(
                format!("pool.res{b}.conv1.bias"),
                block.conv1.bias.value.clone(),
            );
            weights.insert(
                format!("pool.res{b}.norm1.scale"),
                block.norm1.scale.value.clone(),
            );
            weights.insert(
                format!("pool.res{b}.norm1.bias"),
                block.norm1.bias.value.clone(),
            );
            weights.insert(
                format!("pool.res{b}.conv2.kernel"),
                block.conv2.kernel.value.clone(),
            );
            weights.insert(
                format!("pool.res{b}.conv2.bias"),
                block.conv2.bias.value.clone(),
            );
            weights.insert(
                format!("pool.res{b}.norm2.scale"),
                block.norm2.scale.value.clone(),
            );
            weights.insert(
                format!("pool.res{b}.norm2.bias"),
                block.norm2.bias.value.clone(),
            );
        }
    }
}

/// Either aggregation strategy behind one dispatch point.
#[derive(Debug, Clone)]
pub enum Aggregator {
    SelfAttention(SaParams),
    Pool(PoolParams),
}

impl Aggregator {
    pub fn aggregate(&self, stack: &ViewFeatureStack) -> Result<Tensor> {
        match self {
            Aggregator::SelfAttention(p) => sa_aggregate(stack, p),
            Aggregator::Pool(p) => pool_aggregate(stack, p),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Aggregator::SelfAttention(p) => p.channels(),
            Aggregator::Pool(p) => p.channels(),
        }
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose preserves finiteness")
}

fn scale_tensor(t: &Tensor, s: f32) -> Tensor {
    let data = t.data().iter().map(|&v| v * s).collect();
    Tensor::new(t.shape().to_vec(), data).expect("scaling preserves finiteness")
}

/// Self-attention over the K views at one spatial location:
/// `A = softmax(Z Wq (Z Wk)^T / sqrt(d)) (Z Wv)` with row-stochastic
/// attention weights.
pub fn sa_attend_per_location(z: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(Error::shape("per-location input must be K x c"));
    }
    let d = wq.shape()[1];
    let q = ops::matmul(z, wq)?;
    let k = ops::matmul(z, wk)?;
    let v = ops::matmul(z, wv)?;
    let logits = scale_tensor(&ops::matmul(&q, &transpose2(&k))?, 1.0 / (d as f32).sqrt());
    let attn = ops::softmax(&logits, 1)?;
    ops::matmul(&attn, &v)
}

/// Gather the K x c matrix of view features at one pixel.
fn z_at(views: &[Tensor], pixel: usize, c: usize, plane: usize) -> Tensor {
    let k = views.len();
    let mut data = vec![0.0f32; k * c];
    for (ki, v) in views.iter().enumerate() {
        for ch in 0..c {
            data[ki * c + ch] = v.data()[ch * plane + pixel];
        }
    }
    Tensor::new(vec![k, c], data).expect("gather preserves finiteness")
}

/// Apply per-location SA over every pixel, shared weights.
fn sa_apply(views: &[Tensor], wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Vec<Tensor>> {
    let (c, h, w) = (
        views[0].shape()[0],
        views[0].shape()[1],
        views[0].shape()[2],
    );
    let plane = h * w;
    let k = views.len();
    let mut out: Vec<Vec<f32>> = vec![vec![0.0f32; c * plane]; k];
    for p in 0..plane {
        let z = z_at(views, p, c, plane);
        let a = sa_attend_per_location(&z, wq, wk, wv)?;
        for (ki, view_out) in out.iter_mut().enumerate() {
            for ch in 0..c {
                view_out[ch * plane + p] = a.data()[ki * c + ch];
            }
        }
    }
    out.into_iter()
        .map(|data| Tensor::new(vec![c, h, w], data))
        .collect()
}

struct BlockTrace {
    input: Vec<Tensor>,
    resid: Vec<Tensor>,
    normed1: Vec<Tensor>,
    conved: Vec<Tensor>,
    output: Vec<Tensor>,
}

struct SaTrace {
    blocks: Vec<BlockTrace>,
    view_weights: Tensor, // K x H x W softmax over views
}

fn sa_block_forward(input: Vec<Tensor>, block: &SaBlockParams) -> Result<BlockTrace> {
    let attended = sa_apply(&input, &block.wq.value, &block.wk.value, &block.wv.value)?;
    let resid: Vec<Tensor> = input
        .iter()
        .zip(&attended)
        .map(|(x, a)| {
            let data = x
                .data()
                .iter()
                .zip(a.data())
                .map(|(&u, &v)| u + v)
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    let normed1: Vec<Tensor> = resid
        .iter()
        .map(|t| {
            ops::channel_norm(
                t,
                &block.norm1.scale.value,
                &block.norm1.bias.value,
                CHANNEL_NORM_EPS,
            )
        })
        .collect::<Result<_>>()?;
    let conved: Vec<Tensor> = normed1
        .iter()
        .map(|t| ops::conv2d(t, &block.conv.kernel.value, &block.conv.bias.value))
        .collect::<Result<_>>()?;
    let output: Vec<Tensor> = conved
        .iter()
        .map(|t| {
            ops::channel_norm(
                t,
                &block.norm2.scale.value,
                &block.norm2.bias.value,
                CHANNEL_NORM_EPS,
            )
        })
        .collect::<Result<_>>()?;
    Ok(BlockTrace {
        input,
        resid,
        normed1,
        conved,
        output,
    })
}

fn sa_forward(stack: &ViewFeatureStack, params: &SaParams) -> Result<(Tensor, SaTrace)> {
    params.validate()?;
    if stack.channels() != params.channels() {
        return Err(Error::shape(format!(
            "stack has {} channels, aggregator expects {}",
            stack.channels(),
            params.channels()
        )));
    }
    let (c, h, w) = (stack.channels(), stack.height(), stack.width());
    let plane = h * w;
    let k = stack.view_count();

    let mut blocks = Vec::with_capacity(SA_BLOCK_COUNT);
    let mut cur: Vec<Tensor> = stack.views().to_vec();
    for block in &params.blocks {
        let trace = sa_block_forward(cur, block)?;
        cur = trace.output.clone();
        blocks.push(trace);
    }

    // Shared per-view scoring head, then softmax across views per pixel.
    let mut score_data = vec![0.0f32; k * plane];
    for (ki, view) in cur.iter().enumerate() {
        let s = ops::conv2d(view, &params.score.kernel.value, &params.score.bias.value)?;
        score_data[ki * plane..(ki + 1) * plane].copy_from_slice(s.data());
    }
    let scores = Tensor::new(vec![k, h, w], score_data)?;
    let view_weights = ops::softmax(&scores, 0)?;

    // Weighted average of the original inputs.
    let mut out = vec![0.0f32; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            let mut acc = 0.0f32;
            for ki in 0..k {
                acc += view_weights.data()[ki * plane + p] * stack.view(ki).data()[ch * plane + p];
            }
            out[ch * plane + p] = acc;
        }
    }
    let output = Tensor::new(vec![c, h, w], out)?;
    Ok((
        output,
        SaTrace {
            blocks,
            view_weights,
        },
    ))
}

/// Self-attention aggregation of a view stack.
pub fn sa_aggregate(stack: &ViewFeatureStack, params: &SaParams) -> Result<Tensor> {
    sa_forward(stack, params).map(|(out, _)| out)
}

/// Per-pixel view weights of the self-attention aggregator (K x H x W,
/// softmax across views). Useful for inspecting which view wins where.
pub fn sa_view_weights(stack: &ViewFeatureStack, params: &SaParams) -> Result<Tensor> {
    sa_forward(stack, params).map(|(_, trace)| trace.view_weights)
}

/// Backward pass of [`sa_aggregate`]: accumulates parameter gradients into
/// `params` and returns the gradient with respect to each input view.
pub fn sa_aggregate_backward(
    stack: &ViewFeatureStack,
    params: &mut SaParams,
    cotangent: &Tensor,
) -> Result<Vec<Tensor>> {
    let (_, trace) = sa_forward(stack, params)?;
    let (c, h, w) = (stack.channels(), stack.height(), stack.width());
    let plane = h * w;
    let k = stack.view_count();
    if cotangent.shape() != [c, h, w] {
        return Err(Error::shape(
            "cotangent shape does not match aggregate output",
        ));
    }
    let g = cotangent.data();

    // Weighted-average head: gradients to the view weights and directly to
    // the original inputs.
    let mut d_weights = vec![0.0f32; k * plane];
    let mut d_stack: Vec<Vec<f32>> = vec![vec![0.0f32; c * plane]; k];
    for p in 0..plane {
        for (ki, view_grad) in d_stack.iter_mut().enumerate() {
            let wv = trace.view_weights.data()[ki * plane + p];
            let mut acc = 0.0f32;
            for ch in 0..c {
                let gv = g[ch * plane + p];
                acc += gv * stack.view(ki).data()[ch * plane + p];
                view_grad[ch * plane + p] += wv * gv;
            }
            d_weights[ki * plane + p] = acc;
        }
    }
    let d_weights = Tensor::new(vec![k, h, w], d_weights)?;
    let d_scores = ops::softmax_backward(&trace.view_weights, &d_weights, 0)?;

    // Scoring conv, shared across views.
    let final_stack = &trace.blocks[SA_BLOCK_COUNT - 1].output;
    let mut d_out: Vec<Tensor> = Vec::with_capacity(k);
    for ki in 0..k {
        let ds = Tensor::new(
            vec![1, h, w],
            d_scores.data()[ki * plane..(ki + 1) * plane].to_vec(),
        )?;
        let (dx, dk, db) = ops::conv2d_backward(&final_stack[ki], &params.score.kernel.value, &ds)?;
        params.score.kernel.accumulate(&dk)?;
        params.score.bias.accumulate(&db)?;
        d_out.push(dx);
    }

    // Blocks in reverse.
    for (bi, block_trace) in trace.blocks.iter().enumerate().rev() {
        let block = &mut params.blocks[bi];
        let mut d_input: Vec<Tensor> = Vec::with_capacity(k);
        let mut d_resid: Vec<Tensor> = Vec::with_capacity(k);
        for ki in 0..k {
            let (d_conved, ds2, db2) = ops::channel_norm_backward(
                &block_trace.conved[ki],
                &block.norm2.scale.value,
                CHANNEL_NORM_EPS,
                &d_out[ki],
            )?;
            block.norm2.scale.accumulate(&ds2)?;
            block.norm2.bias.accumulate(&db2)?;
            let (d_normed1, dk, db) = ops::conv2d_backward(
                &block_trace.normed1[ki],
                &block.conv.kernel.value,
                &d_conved,
            )?;
            block.conv.kernel.accumulate(&dk)?;
            block.conv.bias.accumulate(&db)?;
            let (dr, ds1, db1) = ops::channel_norm_backward(
                &block_trace.resid[ki],
                &block.norm1.scale.value,
                CHANNEL_NORM_EPS,
                &d_normed1,
            )?;
            block.norm1.scale.accumulate(&ds1)?;
            block.norm1.bias.accumulate(&db1)?;
            d_resid.push(dr.clone());
            d_input.push(dr); // identity branch of the residual
        }

        // Per-pixel SA backward; the attention branch receives d_resid.
        let d = block.wq.value.shape()[1];
        let inv_sqrt_d = 1.0 / (d as f32).sqrt();
        let wq_t = transpose2(&block.wq.value);
        let wk_t = transpose2(&block.wk.value);
        let wv_t = transpose2(&block.wv.value);
        let mut d_wq = Tensor::zeros(block.wq.value.shape().to_vec());
        let mut d_wk = Tensor::zeros(block.wk.value.shape().to_vec());
        let mut d_wv = Tensor::zeros(block.wv.value.shape().to_vec());
        for p in 0..plane {
            let z = z_at(&block_trace.input, p, c, plane);
            let q = ops::matmul(&z, &block.wq.value)?;
            let key = ops::matmul(&z, &block.wk.value)?;
            let v = ops::matmul(&z, &block.wv.value)?;
            let logits = scale_tensor(&ops::matmul(&q, &transpose2(&key))?, inv_sqrt_d);
            let attn = ops::softmax(&logits, 1)?;

            let da = z_at(&d_resid, p, c, plane);
            let dv = ops::matmul(&transpose2(&attn), &da)?;
            let dp = ops::matmul(&da, &transpose2(&v))?;
            let dlogits = scale_tensor(&ops::softmax_backward(&attn, &dp, 1)?, inv_sqrt_d);
            let dq = ops::matmul(&dlogits, &key)?;
            let dkey = ops::matmul(&transpose2(&dlogits), &q)?;

            let zt = transpose2(&z);
            add_into(&mut d_wq, &ops::matmul(&zt, &dq)?);
            add_into(&mut d_wk, &ops::matmul(&zt, &dkey)?);
            add_into(&mut d_wv, &ops::matmul(&zt, &dv)?);

            let dz_q = ops::matmul(&dq, &wq_t)?;
            let dz_k = ops::matmul(&dkey, &wk_t)?;
            let dz_v = ops::matmul(&dv, &wv_t)?;
            for (ki, view_grad) in d_input.iter_mut().enumerate() {
                for ch in 0..c {
                    let contrib = dz_q.data()[ki * c + ch]
                        + dz_k.data()[ki * c + ch]
                        + dz_v.data()[ki * c + ch];
                    view_grad.data_mut()[ch * plane + p] += contrib;
                }
            }
        }
        block.wq.accumulate(&d_wq)?;
        block.wk.accumulate(&d_wk)?;
        block.wv.accumulate(&d_wv)?;
        d_out = d_input;
    }

    // Direct path through the weighted average joins the block-0 input path.
    let mut input_grads = Vec::with_capacity(k);
    for (ki, direct) in d_stack.into_iter().enumerate() {
        let mut t = d_out[ki].clone();
        for (a, b) in t.data_mut().iter_mut().zip(direct) {
            *a += b;
        }
        input_grads.push(t);
    }
    Ok(input_grads)
}

fn add_into(acc: &mut Tensor, delta: &Tensor) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

fn res_block(x: &Tensor, block: &ResBlockParams) -> Result<Tensor> {
    let t = ops::conv2d(x, &block.conv1.kernel.value, &block.conv1.bias.value)?;
    let t = ops::channel_norm(
        &t,
        &block.norm1.scale.value,
        &block.norm1.bias.value,
        CHANNEL_NORM_EPS,
    )?;
    let t = ops::relu(&t);
    let t = ops::conv2d(&t, &block.conv2.kernel.value, &block.conv2.bias.value)?;
    let t = ops::channel_norm(
        &t,
        &block.norm2.scale.value,
        &block.norm2.bias.value,
        CHANNEL_NORM_EPS,
    )?;
    let data = x
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Pooling aggregation: the shared residual stack runs on every view, then
/// max or mean across the view axis.
pub fn pool_aggregate(stack: &ViewFeatureStack, params: &PoolParams) -> Result<Tensor> {
    if stack.channels() != params.channels() {
        return Err(Error::shape(format!(
            "stack has {} channels, aggregator expects {}",
            stack.channels(),
            params.channels()
        )));
    }
    let (c, h, w) = (stack.channels(), stack.height(), stack.width());
    let k = stack.view_count();
    let mut stacked = vec![0.0f32; k * c * h * w];
    for (ki, view) in stack.views().iter().enumerate() {
        let mut t = view.clone();
        for block in &params.blocks {
            t = res_block(&t, block)?;
        }
        stacked[ki * c * h * w..(ki + 1) * c * h * w].copy_from_slice(t.data());
    }
    let all = Tensor::new(vec![k, c, h, w], stacked)?;
    let mode = match params.mode {
        PoolMode::Max => ReduceMode::Max,
        PoolMode::Mean => ReduceMode::Mean,
    };
    ops::reduce(&all, 0, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stack(
        k: usize,
        c: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> ViewFeatureStack {
        ViewFeatureStack::new(
            (0..k)
                .map(|_| Tensor::random(vec![c, h, w], rng, 1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn stack_validates_shapes() {
        assert!(ViewFeatureStack::new(vec![]).is_err());
        let a = Tensor::zeros(vec![2, 3, 3]);
        let b = Tensor::zeros(vec![2, 3, 4]);
        assert!(ViewFeatureStack::new(vec![a.clone(), b]).is_err());
        assert!(ViewFeatureStack::new(vec![a.clone(), a]).is_ok());
    }

    #[test]
    fn attend_single_view_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::random(vec![1, 3], &mut rng, 1.0);
        let wq = Tensor::random(vec![3, 2], &mut rng, 1.0);
        let wk = Tensor::random(vec![3, 2], &mut rng, 1.0);
        let wv = Tensor::random(vec![3, 3], &mut rng, 1.0);
        let a = sa_attend_per_location(&z, &wq, &wk, &wv).unwrap();
        let zv = ops::matmul(&z, &wv).unwrap();
        assert_eq!(a, zv);
    }

    #[test]
    fn attend_zero_query_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::random(vec![4, 3], &mut rng, 1.0);
        let wq = Tensor::zeros(vec![3, 2]);
        let wk = Tensor::random(vec![3, 2], &mut rng, 1.0);
        let wv = Tensor::random(vec![3, 3], &mut rng, 1.0);
        let a = sa_attend_per_location(&z, &wq, &wk, &wv).unwrap();
        let zv = ops::matmul(&z, &wv).unwrap();
        for ch in 0..3 {
            let mean: f32 = (0..4).map(|k| zv.at(&[k, ch])).sum::<f32>() / 4.0;
            for k in 0..4 {
                assert!((a.at(&[k, ch]) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attend_scalar_closed_form() {
        // Z = [1, 3]^T with unit projections and d = 1: row-1 logits are
        // [1, 3], so the first output is w*1 + (1-w)*3 with w = 1/(1+e^2).
        let z = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let a = sa_attend_per_location(&z, &one, &one, &one).unwrap();
        let w = 1.0 / (1.0 + std::f32::consts::E.powi(2));
        let expected0 = w * 1.0 + (1.0 - w) * 3.0;
        assert!((a.at(&[0, 0]) - expected0).abs() < 1e-6);
        let w2 = 1.0 / (1.0 + (6.0f32).exp());
        let expected1 = w2 * 1.0 + (1.0 - w2) * 3.0;
        assert!((a.at(&[1, 0]) - expected1).abs() < 1e-6);
    }

    #[test]
    fn sa_single_view_returns_input_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = random_stack(1, 3, 4, 4, &mut rng);
        let params = SaParams::random(3, 3, &mut rng, 0.5);
        let out = sa_aggregate(&stack, &params).unwrap();
        assert_eq!(out, *stack.view(0));
    }

    #[test]
    fn sa_identical_views_return_that_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::random(vec![2, 3, 3], &mut rng, 1.0);
        let stack = ViewFeatureStack::new(vec![v.clone(), v.clone(), v.clone()]).unwrap();
        let params = SaParams::random(2, 2, &mut rng, 0.5);
        let out = sa_aggregate(&stack, &params).unwrap();
        for (o, e) in out.data().iter().zip(v.data()) {
            assert!((o - e).abs() < 1e-5);
        }
    }

    #[test]
    fn sa_view_weights_are_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let stack = random_stack(3, 2, 3, 3, &mut rng);
        let params = SaParams::random(2, 2, &mut rng, 0.7);
        let weights = sa_view_weights(&stack, &params).unwrap();
        for p in 0..9 {
            let sum: f32 = (0..3).map(|k| weights.data()[k * 9 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn params_roundtrip_through_weight_container() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let stack = random_stack(2, 3, 3, 3, &mut rng);
        let sa = SaParams::random(3, 2, &mut rng, 0.5);
        let pool = PoolParams::random(3, PoolMode::Max, &mut rng, 0.5);

        let mut container = WeightMap::new();
        sa.save_into(&mut container);
        pool.save_into(&mut container);
        let mut buf = Vec::new();
        container.write_to(&mut buf).unwrap();
        let loaded = WeightMap::read_from(buf.as_slice()).unwrap();

        let sa_back = SaParams::from_weights(&loaded).unwrap();
        assert_eq!(sa_back.attention_dim(), 2);
        assert_eq!(
            sa_aggregate(&stack, &sa).unwrap(),
            sa_aggregate(&stack, &sa_back).unwrap()
        );
        let pool_back = PoolParams::from_weights(&loaded, PoolMode::Max).unwrap();
        assert_eq!(
            pool_aggregate(&stack, &pool).unwrap(),
            pool_aggregate(&stack, &pool_back).unwrap()
        );

        // Missing entries are reported by name.
        let empty = WeightMap::new();
        assert!(SaParams::from_weights(&empty).is_err());
        assert!(PoolParams::from_weights(&empty, PoolMode::Mean).is_err());
    }

    #[test]
    fn sa_output_lies_in_view_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let stack = random_stack(3, 2, 3, 3, &mut rng);
            let params = SaParams::random(2, 2, &mut rng, 0.7);
            let out = sa_aggregate(&stack, &params).unwrap();
            let plane = 9;
            for ch in 0..2 {
                for p in 0..plane {
                    let vals: Vec<f32> = (0..3)
                        .map(|k| stack.view(k).data()[ch * plane + p])
                        .collect();
                    let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                    let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let o = out.data()[ch * plane + p];
                    assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
                }
            }
        }
    }

    #[test]
    fn sa_permutation_invariance_single_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = random_stack(3, 2, 3, 3, &mut rng);
        let params = SaParams::random(2, 2, &mut rng, 0.7);
        let base = sa_aggregate(&stack, &params).unwrap();
        let perm = stack.permuted(&[2, 0, 1]).unwrap();
        let out = sa_aggregate(&perm, &params).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn sa_handles_any_view_count_with_fixed_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = SaParams::random(2, 2, &mut rng, 0.5);
        for k in 1..=5 {
            let stack = random_stack(k, 2, 2, 2, &mut rng);
            let out = sa_aggregate(&stack, &params).unwrap();
            assert_eq!(out.shape(), &[2, 2, 2]);
        }
    }

    #[test]
    fn pool_single_view_is_residual_stack_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = random_stack(1, 2, 4, 4, &mut rng);
        let params = PoolParams::random(2, PoolMode::Max, &mut rng, 0.3);
        let out = pool_aggregate(&stack, &params).unwrap();
        let mut expected = stack.view(0).clone();
        for block in &params.blocks {
            expected = res_block(&expected, block).unwrap();
        }
        assert_eq!(out, expected);
    }

    #[test]
    fn passthrough_max_pool_is_elementwise_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::random(vec![2, 3, 3], &mut rng, 1.0);
        let b = Tensor::random(vec![2, 3, 3], &mut rng, 1.0);
        let stack = ViewFeatureStack::new(vec![a.clone(), b.clone()]).unwrap();
        let params = PoolParams::passthrough(2, PoolMode::Max);
        let out = pool_aggregate(&stack, &params).unwrap();
        for i in 0..out.len() {
            assert_eq!(out.data()[i], a.data()[i].max(b.data()[i]));
        }
    }

    #[test]
    fn passthrough_mean_pool_averages() {
        let ones = Tensor::filled(vec![2, 2, 2], 1.0).unwrap();
        let threes = Tensor::filled(vec![2, 2, 2], 3.0).unwrap();
        let stack = ViewFeatureStack::new(vec![ones, threes]).unwrap();
        let params = PoolParams::passthrough(2, PoolMode::Mean);
        let out = pool_aggregate(&stack, &params).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack = random_stack(2, 3, 2, 2, &mut rng);
        let params = SaParams::random(2, 2, &mut rng, 0.5);
        assert!(sa_aggregate(&stack, &params).is_err());
        let pool = PoolParams::passthrough(2, PoolMode::Max);
        assert!(pool_aggregate(&stack, &pool).is_err());
    }

    #[test]
    fn sa_gradient_sanity_on_wq() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let stack = random_stack(2, 2, 2, 2, &mut rng);
        let mut params = SaParams::random(2, 2, &mut rng, 0.5);
        let cot = Tensor::random(vec![2, 2, 2], &mut rng, 1.0);
        let dir = Tensor::random(vec![2, 2], &mut rng, 1.0);
        params.zero_grad();
        sa_aggregate_backward(&stack, &mut params, &cot).unwrap();
        let analytic: f64 = params.blocks[0]
            .wq
            .gradient
            .data()
            .iter()
            .zip(dir.data())
            .map(|(&g, &d)| g as f64 * d as f64)
            .sum();

        let h = 1e-3f32;
        let loss_at = |offset: f32| -> f64 {
            let mut p = params.clone();
            let data: Vec<f32> = p.blocks[0]
                .wq
                .value
                .data()
                .iter()
                .zip(dir.data())
                .map(|(&v, &d)| v + offset * d)
                .collect();
            p.blocks[0].wq.value = Tensor::new(vec![2, 2], data).unwrap();
            sa_aggregate(&stack, &p)
                .unwrap()
                .data()
                .iter()
                .zip(cot.data())
                .map(|(&o, &c)| o as f64 * c as f64)
                .sum()
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h as f64);
        assert!(
            (analytic - fd).abs() <= 1e-3 * analytic.abs().max(fd.abs()).max(1.0),
            "{analytic} vs {fd}"
        );
    }
}
