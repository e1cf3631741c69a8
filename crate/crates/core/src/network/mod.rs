//! Residual encoder-decoder segmentation network with deep supervision.
//!
//! Every encoder stage holds two residual blocks (conv-instnorm-ReLU, then
//! conv-instnorm, a skip path and a final ReLU); the first block of every
//! stage but the top one carries the pooling stride. Decoder stages upsample
//! with a kernel-equals-stride transposed convolution, concatenate the
//! encoder skip and run residual blocks. Output heads are pointwise
//! convolutions followed by a softmax.

mod layers;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{num_voxels, Dims};
use crate::error::{Error, Result};
use crate::planner::Plan;

pub use layers::{softmax, softmax_backward, NORM_EPS};
pub use tensor::Tensor;

use layers::{ConvCache, ConvGeom, NormCache, UpCache, UpGeom};

/// Static description of one network; everything needed to build the
/// parameter layout and run the forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: Dims,
    pub kernel: Dims,
    /// Stride entering each level; level 0 is always `[1, 1, 1]`.
    pub strides: Vec<Dims>,
    pub channels: Vec<usize>,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Number of output heads, finest level first.
    pub ds_outputs: usize,
}

/// Default head count: every level but the two coarsest, at least one.
pub fn default_ds_outputs(levels: usize) -> usize {
    levels.saturating_sub(2).max(1)
}

impl Architecture {
    pub fn from_plan(plan: &Plan) -> Self {
        let mut strides = vec![[1, 1, 1]];
        strides.extend(plan.pool_schedule.iter().copied());
        let levels = strides.len();
        Self {
            in_channels: 1,
            num_classes: plan.num_classes,
            patch_size: plan.patch_size,
            kernel: plan.kernel(),
            strides,
            channels: plan.channels(),
            encoder_blocks: 2,
            decoder_blocks: 1,
            ds_outputs: default_ds_outputs(levels),
        }
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    /// Spatial extent at each level for the configured patch.
    pub fn level_dims(&self) -> Vec<Dims> {
        let mut out = Vec::with_capacity(self.levels());
        let mut d = self.patch_size;
        for s in &self.strides {
            d = [0, 1, 2].map(|a| d[a] / s[a]);
            out.push(d);
        }
        out
    }

    /// Head output shapes, finest first.
    pub fn head_dims(&self) -> Vec<Dims> {
        self.level_dims().into_iter().take(self.ds_outputs).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        if self.levels() == 0 || self.channels.len() != self.levels() {
            return bad("channel list must have one entry per level".into());
        }
        if self.strides[0] != [1, 1, 1] {
            return bad("level 0 must not be strided".into());
        }
        if self.ds_outputs == 0 || self.ds_outputs > self.levels() {
            return bad(format!("ds_outputs {} out of range", self.ds_outputs));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return bad("need at least one block per stage".into());
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return bad("kernel extents must be odd".into());
        }
        let mut d = self.patch_size;
        for s in &self.strides {
            for a in 0..3 {
                if s[a] == 0 || !d[a].is_multiple_of(s[a]) {
                    return bad(format!(
                        "patch {:?} not divisible by strides {:?}",
                        self.patch_size, self.strides
                    ));
                }
                d[a] /= s[a];
            }
        }
        Ok(())
    }

    /// Stable identity string stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    pub fn layout(&self) -> Layout {
        Layout::build(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// He-normal with the given fan-in.
    Weight { fan_in: usize },
    NormScale,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct ConvRef {
    geom: ConvGeom,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone)]
struct NormRef {
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone)]
struct BlockRef {
    conv1: ConvRef,
    norm1: NormRef,
    conv2: ConvRef,
    norm2: NormRef,
    proj: Option<(ConvRef, NormRef)>,
}

#[derive(Debug, Clone)]
struct UpRef {
    geom: UpGeom,
    weight: usize,
    bias: usize,
}

/// Parameter table plus the wiring that refers into it.
#[derive(Debug, Clone)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    encoder: Vec<Vec<BlockRef>>,
    /// `up[l]` lifts level `l + 1` to level `l`.
    up: Vec<UpRef>,
    decoder: Vec<Vec<BlockRef>>,
    heads: Vec<ConvRef>,
}

impl Layout {
    fn build(arch: &Architecture) -> Self {
        let mut params = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
            params.push(ParamSpec { name, shape, kind });
            params.len() - 1
        };
        let conv = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize,
                        name: String,
                        geom: ConvGeom,
                        bias: bool| {
            let mut shape = vec![geom.cout, geom.cin];
            shape.extend(geom.kernel);
            let weight = push(
                format!("{name}.weight"),
                shape,
                ParamKind::Weight {
                    fan_in: geom.fan_in(),
                },
            );
            let bias = bias.then(|| push(format!("{name}.bias"), vec![geom.cout], ParamKind::Zero));
            ConvRef { geom, weight, bias }
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize,
                    name: String,
                    c: usize| NormRef {
            scale: push(format!("{name}.scale"), vec![c], ParamKind::NormScale),
            shift: push(format!("{name}.shift"), vec![c], ParamKind::Zero),
        };
        let block = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize,
                         name: String,
                         cin: usize,
                         cout: usize,
                         stride: Dims| {
            let g1 = ConvGeom {
                cin,
                cout,
                kernel: arch.kernel,
                stride,
            };
            let g2 = ConvGeom {
                cin: cout,
                cout,
                kernel: arch.kernel,
                stride: [1, 1, 1],
            };
            let conv1 = conv(push, format!("{name}.conv1"), g1, false);
            let norm1 = norm(push, format!("{name}.norm1"), cout);
            let conv2 = conv(push, format!("{name}.conv2"), g2, false);
            let norm2 = norm(push, format!("{name}.norm2"), cout);
            let proj = (cin != cout || stride != [1, 1, 1]).then(|| {
                let gp = ConvGeom {
                    cin,
                    cout,
                    kernel: [1, 1, 1],
                    stride,
                };
                (
                    conv(push, format!("{name}.proj"), gp, false),
                    norm(push, format!("{name}.proj_norm"), cout),
                )
            });
            BlockRef {
                conv1,
                norm1,
                conv2,
                norm2,
                proj,
            }
        };

        let levels = arch.levels();
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 {
                arch.in_channels
            } else {
                arch.channels[l - 1]
            };
            let cout = arch.channels[l];
            let blocks = (0..arch.encoder_blocks)
                .map(|b| {
                    let (bin, stride) = if b == 0 {
                        (cin, arch.strides[l])
                    } else {
                        (cout, [1, 1, 1])
                    };
                    block(&mut push, format!("enc{l}.block{b}"), bin, cout, stride)
                })
                .collect();
            encoder.push(blocks);
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..levels.saturating_sub(1) {
            let geom = UpGeom {
                cin: arch.channels[l + 1],
                cout: arch.channels[l],
                stride: arch.strides[l + 1],
            };
            let mut shape = vec![geom.cin, geom.cout];
            shape.extend(geom.stride);
            let weight = push(
                format!("dec{l}.up.weight"),
                shape,
                ParamKind::Weight { fan_in: geom.cin },
            );
            let bias = push(format!("dec{l}.up.bias"), vec![geom.cout], ParamKind::Zero);
            up.push(UpRef { geom, weight, bias });
            let c = arch.channels[l];
            let blocks = (0..arch.decoder_blocks)
                .map(|b| {
                    let cin = if b == 0 { 2 * c } else { c };
                    block(&mut push, format!("dec{l}.block{b}"), cin, c, [1, 1, 1])
                })
                .collect();
            decoder.push(blocks);
        }
        let heads = (0..arch.ds_outputs)
            .map(|l| {
                let geom = ConvGeom {
                    cin: arch.channels[l],
                    cout: arch.num_classes,
                    kernel: [1, 1, 1],
                    stride: [1, 1, 1],
                };
                conv(&mut push, format!("head{l}"), geom, true)
            })
            .collect();
        Self {
            params,
            encoder,
            up,
            decoder,
            heads,
        }
    }
}

/// A named real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All trainable tensors of one network (or a gradient of the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub tensors: Vec<ParamTensor>,
}

impl NetParams {
    pub fn zeros(arch: &Architecture) -> Self {
        Self::zeros_from_layout(&arch.layout())
    }

    fn zeros_from_layout(layout: &Layout) -> Self {
        Self {
            tensors: layout
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.len()],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &NetParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data
                .iter_mut()
                .zip(&b.data)
                .for_each(|(x, y)| *x += factor * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn matches(&self, arch: &Architecture) -> bool {
        self.matches_layout(&arch.layout())
    }

    fn matches_layout(&self, layout: &Layout) -> bool {
        self.tensors.len() == layout.params.len()
            && self
                .tensors
                .iter()
                .zip(&layout.params)
                .all(|(t, p)| t.name == p.name && t.shape == p.shape && t.data.len() == p.len())
    }

    fn slice(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    fn slice_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }
}

/// He-normal initialization: weights ~ N(0, 2 / fan_in), norm scales 1,
/// offsets and biases 0.
pub fn init_params(arch: &Architecture, seed: u64) -> NetParams {
    let layout = arch.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::zeros_from_layout(&layout);
    for (entry, t) in layout.params.iter().zip(params.tensors.iter_mut()) {
        match entry.kind {
            ParamKind::Weight { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            ParamKind::NormScale => t.data.iter_mut().for_each(|v| *v = 1.0),
            ParamKind::Zero => {}
        }
    }
    params
}

/// Per-voxel class probabilities, layout (class, z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub num_classes: usize,
    pub dims: Dims,
    pub probs: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(num_classes: usize, dims: Dims, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), num_classes * num_voxels(dims));
        Self {
            num_classes,
            dims,
            probs,
        }
    }

    pub fn voxels(&self) -> usize {
        num_voxels(self.dims)
    }

    #[inline]
    pub fn prob(&self, class: usize, voxel: usize) -> f64 {
        self.probs[class * self.voxels() + voxel]
    }

    /// Hard one-hot map of a label array.
    pub fn one_hot(labels: &[u8], num_classes: usize, dims: Dims) -> Self {
        let n = num_voxels(dims);
        let mut probs = vec![0.0; num_classes * n];
        for (v, &c) in labels.iter().enumerate() {
            probs[c as usize * n + v] = 1.0;
        }
        Self::new(num_classes, dims, probs)
    }

    /// Per-voxel argmax, ties broken toward the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.voxels();
        (0..n)
            .map(|v| {
                let mut best = 0;
                let mut best_p = self.probs[v];
                for c in 1..self.num_classes {
                    let p = self.probs[c * n + v];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best as u8
            })
            .collect()
    }
}

struct BlockCache {
    conv1: ConvCache,
    norm1: NormCache,
    act1: Tensor,
    conv2: ConvCache,
    norm2: NormCache,
    proj: Option<(ConvCache, NormCache)>,
    out: Tensor,
}

/// Intermediate state kept by [`forward_train`] for [`backward`].
pub struct ForwardCache {
    encoder: Vec<Vec<BlockCache>>,
    up: Vec<UpCache>,
    decoder: Vec<Vec<BlockCache>>,
    head_inputs: Vec<(ConvCache, Vec<f64>)>,
    skip_channels: Vec<usize>,
}

impl ForwardCache {
    /// On/off state of every ReLU unit, in a fixed order. Two inputs or
    /// parameter sets with equal patterns lie on the same linear piece of
    /// every activation.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for block in self.encoder.iter().chain(self.decoder.iter()).flatten() {
            out.extend(block.act1.data.iter().map(|v| *v > 0.0));
            out.extend(block.out.data.iter().map(|v| *v > 0.0));
        }
        out
    }
}

fn block_forward(x: &Tensor, b: &BlockRef, p: &NetParams) -> BlockCache {
    let (a1, conv1) = layers::conv_forward(x, &b.conv1.geom, p.slice(b.conv1.weight), None);
    let (mut act1, norm1) = layers::norm_forward(&a1, p.slice(b.norm1.scale), p.slice(b.norm1.shift));
    layers::relu_inplace(&mut act1);
    let (a2, conv2) = layers::conv_forward(&act1, &b.conv2.geom, p.slice(b.conv2.weight), None);
    let (mut out, norm2) = layers::norm_forward(&a2, p.slice(b.norm2.scale), p.slice(b.norm2.shift));
    let proj = match &b.proj {
        Some((c, n)) => {
            let (s, cc) = layers::conv_forward(x, &c.geom, p.slice(c.weight), None);
            let (s, nc) = layers::norm_forward(&s, p.slice(n.scale), p.slice(n.shift));
            out.add_assign(&s);
            Some((cc, nc))
        }
        None => {
            out.add_assign(x);
            None
        }
    };
    layers::relu_inplace(&mut out);
    BlockCache {
        conv1,
        norm1,
        act1,
        conv2,
        norm2,
        proj,
        out,
    }
}

/// Adjoint of [`block_forward`]; `dy` is the gradient w.r.t. the block output.
fn block_backward(
    mut dy: Tensor,
    b: &BlockRef,
    cache: &BlockCache,
    p: &NetParams,
    g: &mut NetParams,
    need_input_grad: bool,
) -> Option<Tensor> {
    layers::relu_backward_inplace(&mut dy, &cache.out);
    let mut dx_skip = match (&b.proj, &cache.proj) {
        (Some((c, n)), Some((cc, nc))) => {
            let (ds, dsh) = grad_pair(g, n.scale, n.shift);
            let dn = layers::norm_backward(&dy, p.slice(n.scale), nc, ds, dsh);
            layers::conv_backward(
                &dn,
                &c.geom,
                p.slice(c.weight),
                cc,
                g.slice_mut(c.weight),
                None,
                need_input_grad,
            )
        }
        _ => need_input_grad.then(|| dy.clone()),
    };
    let (ds, dsh) = grad_pair(g, b.norm2.scale, b.norm2.shift);
    let da2 = layers::norm_backward(&dy, p.slice(b.norm2.scale), &cache.norm2, ds, dsh);
    let mut dact1 = layers::conv_backward(
        &da2,
        &b.conv2.geom,
        p.slice(b.conv2.weight),
        &cache.conv2,
        g.slice_mut(b.conv2.weight),
        None,
        true,
    )
    .expect("input grad requested");
    layers::relu_backward_inplace(&mut dact1, &cache.act1);
    let (ds, dsh) = grad_pair(g, b.norm1.scale, b.norm1.shift);
    let da1 = layers::norm_backward(&dact1, p.slice(b.norm1.scale), &cache.norm1, ds, dsh);
    let dx = layers::conv_backward(
        &da1,
        &b.conv1.geom,
        p.slice(b.conv1.weight),
        &cache.conv1,
        g.slice_mut(b.conv1.weight),
        None,
        need_input_grad,
    );
    match (dx, dx_skip.as_mut()) {
        (Some(mut dx), Some(skip)) => {
            dx.add_assign(skip);
            Some(dx)
        }
        (dx, _) => dx,
    }
}

fn grad_pair(g: &mut NetParams, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = g.tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

fn check_input(arch: &Architecture, layout: &Layout, params: &NetParams, input: &Tensor) -> Result<()> {
    if input.channels != arch.in_channels || input.dims != arch.patch_size {
        return Err(Error::ShapeMismatch(format!(
            "input ({}, {:?}) does not match architecture ({}, {:?})",
            input.channels, input.dims, arch.in_channels, arch.patch_size
        )));
    }
    if !params.matches_layout(layout) {
        return Err(Error::ShapeMismatch(
            "parameters do not match the architecture".into(),
        ));
    }
    Ok(())
}

/// Forward pass keeping what the backward pass needs.
pub fn forward_train(
    params: &NetParams,
    arch: &Architecture,
    input: &Tensor,
) -> Result<(Vec<ConfidenceMap>, ForwardCache)> {
    let layout = arch.layout();
    check_input(arch, &layout, params, input)?;
    let levels = arch.levels();
    let mut encoder: Vec<Vec<BlockCache>> = Vec::with_capacity(levels);
    for l in 0..levels {
        let mut caches: Vec<BlockCache> = Vec::with_capacity(arch.encoder_blocks);
        for b in &layout.encoder[l] {
            let x = match caches.last() {
                Some(c) => &c.out,
                None if l == 0 => input,
                None => &encoder[l - 1].last().unwrap().out,
            };
            let c = block_forward(x, b, params);
            caches.push(c);
        }
        encoder.push(caches);
    }

    let mut up = Vec::with_capacity(levels.saturating_sub(1));
    let mut decoder: Vec<Vec<BlockCache>> = (0..levels.saturating_sub(1)).map(|_| Vec::new()).collect();
    let mut skip_channels = Vec::new();
    for l in (0..levels.saturating_sub(1)).rev() {
        let below = if l + 1 == levels - 1 {
            &encoder[l + 1].last().unwrap().out
        } else {
            &decoder[l + 1].last().unwrap().out
        };
        let u = &layout.up[l];
        let (lifted, uc) = layers::up_forward(below, &u.geom, params.slice(u.weight), params.slice(u.bias));
        up.push(uc);
        skip_channels.push(lifted.channels);
        let mut x = lifted.concat(&encoder[l].last().unwrap().out);
        for b in &layout.decoder[l] {
            let c = block_forward(&x, b, params);
            x = c.out.clone();
            decoder[l].push(c);
        }
    }
    // `up` and `skip_channels` were filled coarse to fine.
    up.reverse();
    skip_channels.reverse();

    let mut outputs = Vec::with_capacity(arch.ds_outputs);
    let mut head_inputs = Vec::with_capacity(arch.ds_outputs);
    for (l, h) in layout.heads.iter().enumerate() {
        let feat = level_output(l, levels, &encoder, &decoder);
        let (logits, hc) = layers::conv_forward(
            feat,
            &h.geom,
            params.slice(h.weight),
            Some(params.slice(h.bias.unwrap())),
        );
        let probs = layers::softmax(&logits);
        outputs.push(ConfidenceMap::new(arch.num_classes, logits.dims, probs.clone()));
        head_inputs.push((hc, probs));
    }
    Ok((
        outputs,
        ForwardCache {
            encoder,
            up,
            decoder,
            head_inputs,
            skip_channels,
        },
    ))
}

fn level_output<'a>(
    l: usize,
    levels: usize,
    encoder: &'a [Vec<BlockCache>],
    decoder: &'a [Vec<BlockCache>],
) -> &'a Tensor {
    if l == levels - 1 {
        &encoder[l].last().unwrap().out
    } else {
        &decoder[l].last().unwrap().out
    }
}

/// Softmax outputs for every head, finest first.
pub fn forward(params: &NetParams, arch: &Architecture, input: &Tensor) -> Result<Vec<ConfidenceMap>> {
    Ok(forward_train(params, arch, input)?.0)
}

/// Backpropagate `dprobs[i]` (gradient w.r.t. the probabilities of head `i`;
/// an empty vector means zero) to every parameter.
pub fn backward(
    params: &NetParams,
    arch: &Architecture,
    cache: &ForwardCache,
    dprobs: &[Vec<f64>],
) -> Result<NetParams> {
    let layout = arch.layout();
    let levels = arch.levels();
    let mut grads = NetParams::zeros_from_layout(&layout);
    if dprobs.len() != layout.heads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} head gradients for {} heads",
            dprobs.len(),
            layout.heads.len()
        )));
    }

    // Gradient arriving at each level's output feature map.
    let mut level_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    for (l, (h, (hc, probs))) in layout.heads.iter().zip(&cache.head_inputs).enumerate() {
        if dprobs[l].is_empty() {
            continue;
        }
        if dprobs[l].len() != probs.len() {
            return Err(Error::ShapeMismatch(format!("head {l} gradient size")));
        }
        let dz = layers::softmax_backward(probs, &dprobs[l], arch.num_classes);
        let dims = arch.level_dims()[l];
        let dlogits = Tensor::from_vec(arch.num_classes, dims, dz);
        let bias = h.bias.unwrap();
        let (dw, db) = grad_pair(&mut grads, h.weight, bias);
        let dfeat = layers::conv_backward(&dlogits, &h.geom, params.slice(h.weight), hc, dw, Some(db), true)
            .expect("input grad requested");
        accumulate(&mut level_grads[l], dfeat);
    }

    // Encoder-output gradients from skip connections.
    let mut skip_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    for l in 0..levels.saturating_sub(1) {
        let Some(dy) = level_grads[l].take() else {
            continue;
        };
        let mut d = dy;
        for (b, c) in layout.decoder[l].iter().zip(&cache.decoder[l]).rev() {
            d = block_backward(d, b, c, params, &mut grads, true).expect("input grad requested");
        }
        let (dlift, dskip) = d.split(cache.skip_channels[l]);
        accumulate(&mut skip_grads[l], dskip);
        let u = &layout.up[l];
        let (dw, db) = grad_pair(&mut grads, u.weight, u.bias);
        let dbelow = layers::up_backward(&dlift, &u.geom, params.slice(u.weight), &cache.up[l], dw, db);
        accumulate(&mut level_grads[l + 1], dbelow);
    }
    // The bottleneck output gradient sits in level_grads[levels - 1].
    let mut carry = level_grads[levels - 1].take();
    for l in (0..levels).rev() {
        if l < levels - 1 {
            if let Some(s) = skip_grads[l].take() {
                accumulate(&mut carry, s);
            }
        }
        let Some(mut d) = carry.take() else {
            continue;
        };
        let blocks = &layout.encoder[l];
        for (i, (b, c)) in blocks.iter().zip(&cache.encoder[l]).enumerate().rev() {
            let need = !(l == 0 && i == 0);
            match block_backward(d, b, c, params, &mut grads, need) {
                Some(next) => d = next,
                None => {
                    d = Tensor::zeros(0, [0, 0, 0]);
                    break;
                }
            }
        }
        if l > 0 {
            carry = Some(d);
        }
    }
    if !grads.is_finite() {
        let bad = grads
            .tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.clone())
            .unwrap_or_default();
        return Err(Error::NonFiniteGradient(format!("parameter {bad}")));
    }
    Ok(grads)
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// Gradient of a scalar loss of the network outputs. `loss` returns the value
/// and its gradient w.r.t. each head's probabilities.
pub fn gradients<F>(
    params: &NetParams,
    arch: &Architecture,
    input: &Tensor,
    loss: F,
) -> Result<(f64, NetParams)>
where
    F: FnOnce(&[ConfidenceMap]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (outputs, cache) = forward_train(params, arch, input)?;
    let (value, dprobs) = loss(&outputs)?;
    let grads = backward(params, arch, &cache, &dprobs)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch(levels: usize, patch: Dims, classes: usize) -> Architecture {
        let mut strides = vec![[1, 1, 1]];
        strides.extend(std::iter::repeat_n([2, 2, 2], levels - 1));
        Architecture {
            in_channels: 1,
            num_classes: classes,
            patch_size: patch,
            kernel: [3, 3, 3],
            strides,
            channels: crate::planner::channel_widths(levels, 4, 64),
            encoder_blocks: 2,
            decoder_blocks: 1,
            ds_outputs: default_ds_outputs(levels),
        }
    }

    fn input(dims: Dims, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_vec(1, dims, (0..num_voxels(dims)).map(|_| normal.sample(&mut rng)).collect())
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let arch = tiny_arch(2, [8, 8, 8], 3);
        assert_eq!(init_params(&arch, 1), init_params(&arch, 1));
        assert_ne!(init_params(&arch, 1), init_params(&arch, 2));
        let p = init_params(&arch, 3);
        assert!(p.get("enc0.block0.norm1.scale").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(p.get("enc0.block0.norm1.shift").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(p.get("head0.bias").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_variance_of_3x3x3_conv_with_8_inputs() {
        // enc1.block1.conv1 is 8 -> 8 with a 3x3x3 kernel.
        let arch = tiny_arch(2, [8, 8, 8], 3);
        let mut draws = Vec::new();
        let mut seed = 0;
        while draws.len() < 10_000 {
            let p = init_params(&arch, seed);
            let t = p.get("enc1.block1.conv1.weight").unwrap();
            assert_eq!(t.shape, vec![8, 8, 3, 3, 3]);
            draws.extend_from_slice(&t.data);
            seed += 1;
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / (27.0 * 8.0);
        assert!((var - expected).abs() < 0.1 * expected, "var {var} vs {expected}");
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let arch = tiny_arch(3, [8, 8, 8], 4);
        let p = NetParams::zeros(&arch);
        let out = forward(&p, &arch, &input([8, 8, 8], 1)).unwrap();
        for map in &out {
            assert!(map.probs.iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn probabilities_normalize() {
        let arch = tiny_arch(3, [8, 8, 8], 3);
        let p = init_params(&arch, 7);
        let out = forward(&p, &arch, &input([8, 8, 8], 2)).unwrap();
        for map in &out {
            for v in 0..map.voxels() {
                let s: f64 = (0..3).map(|c| map.prob(c, v)).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
            assert!(map.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn head_shapes_follow_strides() {
        let mut arch = tiny_arch(3, [32, 32, 32], 2);
        arch.ds_outputs = 3;
        let p = init_params(&arch, 0);
        let out = forward(&p, &arch, &input([32, 32, 32], 0)).unwrap();
        let dims: Vec<Dims> = out.iter().map(|m| m.dims).collect();
        assert_eq!(dims, vec![[32, 32, 32], [16, 16, 16], [8, 8, 8]]);
    }

    #[test]
    fn wrong_input_shape() {
        let arch = tiny_arch(2, [8, 8, 8], 2);
        let p = init_params(&arch, 0);
        assert!(matches!(
            forward(&p, &arch, &input([8, 8, 4], 0)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = tiny_arch(2, [8, 8, 8], 3);
        let p = init_params(&arch, 4);
        let x = input([8, 8, 8], 4);
        assert_eq!(forward(&p, &arch, &x).unwrap(), forward(&p, &arch, &x).unwrap());
    }

    fn class1_sum(out: &[ConfidenceMap]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut grads = Vec::new();
        let mut total = 0.0;
        for (i, m) in out.iter().enumerate() {
            let n = m.voxels();
            let mut g = vec![0.0; m.probs.len()];
            if i == 0 {
                for v in 0..n {
                    total += m.prob(1, v);
                    g[n + v] = 1.0;
                }
            }
            grads.push(g);
        }
        Ok((total, grads))
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let arch = tiny_arch(2, [8, 8, 8], 3);
        let p = init_params(&arch, 5);
        let (_, g) = gradients(&p, &arch, &input([8, 8, 8], 5), |out| {
            Ok((1.0, out.iter().map(|m| vec![0.0; m.probs.len()]).collect()))
        })
        .unwrap();
        assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scaled_loss_scales_gradient() {
        let arch = tiny_arch(2, [8, 8, 8], 3);
        let p = init_params(&arch, 6);
        let x = input([8, 8, 8], 6);
        let (_, g1) = gradients(&p, &arch, &x, class1_sum).unwrap();
        let (_, g2) = gradients(&p, &arch, &x, |out| {
            let (v, g) = class1_sum(out)?;
            Ok((2.0 * v, g.into_iter().map(|h| h.into_iter().map(|x| 2.0 * x).collect()).collect()))
        })
        .unwrap();
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn zero_params_head_bias_gradient_matches_central_differences() {
        let arch = tiny_arch(2, [8, 8, 8], 3);
        let p = NetParams::zeros(&arch);
        let x = input([8, 8, 8], 8);
        let (_, g) = gradients(&p, &arch, &x, class1_sum).unwrap();
        let idx = p.tensors.iter().position(|t| t.name == "head0.bias").unwrap();
        let h = 1e-4;
        for c in 0..3 {
            let eval = |delta: f64| {
                let mut q = p.clone();
                q.tensors[idx].data[c] += delta;
                class1_sum(&forward(&q, &arch, &x).unwrap()).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.tensors[idx].data[c];
            assert!(an.abs() > 1.0, "bias gradient should be nonzero");
            assert!((an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()), "{an} vs {fd}");
        }
    }
}
