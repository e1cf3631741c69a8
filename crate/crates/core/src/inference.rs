//! Whole-volume prediction: sliding-window tiling with Gaussian blending,
//! mirroring TTA and restoration to the input geometry.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::data::{num_voxels, offset, Dims, Volume};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::network::{forward, Architecture, ConfidenceMap, NetParams, Tensor};
use crate::planner::{enforced_spacing, Plan, SpacingRule};
use crate::preprocess::{flip_axis, normalize, resample, resample_to, Interpolation};

pub const DEFAULT_STEP_FRACTION: f64 = 0.7;
/// Floor of the importance map relative to its peak.
pub const MIN_IMPORTANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TileLayout {
    pub volume_dims: Dims,
    pub patch_size: Dims,
    pub step_fraction: f64,
    /// Tile corners, z-major order.
    pub positions: Vec<Dims>,
}

/// Evenly spaced tile starts along one axis: `ceil((L - P) / (step * P)) + 1`
/// tiles from 0 to `L - P`, rounded; duplicates from rounding are dropped.
pub fn axis_positions(len: usize, patch: usize, step_fraction: f64) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let span = (len - patch) as f64;
    let n = (span / (step_fraction * patch as f64)).ceil() as usize + 1;
    let mut out: Vec<usize> = (0..n)
        .map(|i| (i as f64 * span / (n - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

pub fn tile_positions(volume_dims: Dims, patch_size: Dims, step_fraction: f64) -> Result<TileLayout> {
    if !(step_fraction > 0.0 && step_fraction <= 1.0) {
        return Err(Error::Config(format!("step fraction {step_fraction} not in (0, 1]")));
    }
    let axes = [0, 1, 2].map(|a| axis_positions(volume_dims[a], patch_size[a], step_fraction));
    let mut positions = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                positions.push([z, y, x]);
            }
        }
    }
    Ok(TileLayout {
        volume_dims,
        patch_size,
        step_fraction,
        positions,
    })
}

/// Centre-peaked Gaussian weights with sigma = patch / 8 per axis, scaled so
/// the peak is 1 and floored at [`MIN_IMPORTANCE`].
pub fn gaussian_importance(patch: Dims) -> Vec<f64> {
    let axis = |p: usize| -> Vec<f64> {
        let c = (p as f64 - 1.0) / 2.0;
        let sigma = p as f64 / 8.0;
        (0..p).map(|i| -0.5 * ((i as f64 - c) / sigma).powi(2)).collect()
    };
    let (az, ay, ax) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(num_voxels(patch));
    for z in &az {
        for y in &ay {
            for x in &ax {
                w.push((z + y + x).exp());
            }
        }
    }
    let peak = w.iter().copied().fold(0.0, f64::max);
    w.iter_mut().for_each(|v| *v = (*v / peak).max(MIN_IMPORTANCE));
    w
}

/// Anything that maps a one-channel patch to class probabilities at the
/// patch resolution.
pub trait PatchPredictor: Sync {
    fn patch_size(&self) -> Dims;
    fn num_classes(&self) -> usize;
    fn predict(&self, input: &Tensor) -> Result<ConfidenceMap>;
}

/// Finest-level output of a trained network.
pub struct NetPredictor<'a> {
    pub params: &'a NetParams,
    pub arch: &'a Architecture,
}

impl PatchPredictor for NetPredictor<'_> {
    fn patch_size(&self) -> Dims {
        self.arch.patch_size
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn predict(&self, input: &Tensor) -> Result<ConfidenceMap> {
        let mut out = forward(self.params, self.arch, input)?;
        Ok(out.swap_remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceMode {
    pub tta: bool,
}

impl InferenceMode {
    /// Mirroring TTA on.
    pub fn normal() -> Self {
        Self { tta: true }
    }

    /// Single sliding-window pass.
    pub fn fast() -> Self {
        Self { tta: false }
    }
}

fn extract(data: &[f64], dims: Dims, corner: Dims, patch: Dims) -> Vec<f64> {
    let mut out = Vec::with_capacity(num_voxels(patch));
    for z in 0..patch[0] {
        for y in 0..patch[1] {
            let start = offset(dims, corner[0] + z, corner[1] + y, corner[2]);
            out.extend_from_slice(&data[start..start + patch[2]]);
        }
    }
    out
}

/// Pad to at least `min` per axis with zeros, centred; returns the padded
/// array, its dims and the low-side padding.
fn pad_to(data: &[f64], dims: Dims, min: Dims) -> (Vec<f64>, Dims, Dims) {
    let out_dims = [0, 1, 2].map(|a| dims[a].max(min[a]));
    if out_dims == dims {
        return (data.to_vec(), dims, [0; 3]);
    }
    let lo = [0, 1, 2].map(|a| (out_dims[a] - dims[a]) / 2);
    let mut out = vec![0.0; num_voxels(out_dims)];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = offset(dims, z, y, 0);
            let dst = offset(out_dims, z + lo[0], y + lo[1], lo[2]);
            out[dst..dst + dims[2]].copy_from_slice(&data[src..src + dims[2]]);
        }
    }
    (out, out_dims, lo)
}

fn crop_classes(probs: &[f64], classes: usize, dims: Dims, lo: Dims, out: Dims) -> Vec<f64> {
    let n = num_voxels(dims);
    let mut res = Vec::with_capacity(classes * num_voxels(out));
    for c in 0..classes {
        for z in 0..out[0] {
            for y in 0..out[1] {
                let start = c * n + offset(dims, z + lo[0], y + lo[1], lo[2]);
                res.extend_from_slice(&probs[start..start + out[2]]);
            }
        }
    }
    res
}

/// Blend patch predictions over a grid of tiles. `data` is one channel of
/// normalized intensities with shape `dims`; volumes smaller than the patch
/// are zero-padded and cropped back.
pub fn sliding_window_array(
    net: &dyn PatchPredictor,
    data: &[f64],
    dims: Dims,
    step_fraction: f64,
    workers: usize,
) -> Result<ConfidenceMap> {
    let patch = net.patch_size();
    let (padded, pdims, lo) = pad_to(data, dims, patch);
    let layout = tile_positions(pdims, patch, step_fraction)?;
    let map = blend_tiles(net, &padded, &layout, workers)?;
    if pdims == dims {
        return Ok(map);
    }
    let classes = map.num_classes;
    Ok(ConfidenceMap::new(classes, dims, crop_classes(&map.probs, classes, pdims, lo, dims)))
}

fn blend_tiles(net: &dyn PatchPredictor, data: &[f64], layout: &TileLayout, workers: usize) -> Result<ConfidenceMap> {
    let dims = layout.volume_dims;
    let patch = layout.patch_size;
    if (0..3).any(|a| dims[a] < patch[a]) {
        return Err(Error::ShapeMismatch(format!(
            "volume {dims:?} smaller than patch {patch:?}; pad first"
        )));
    }
    let classes = net.num_classes();
    let weights = gaussian_importance(patch);
    let n = num_voxels(dims);
    let np = num_voxels(patch);
    let mut num = vec![0.0; classes * n];
    let mut den = vec![0.0; n];

    let run = |corner: &Dims| -> Result<ConfidenceMap> {
        let input = Tensor::from_vec(1, patch, extract(data, dims, *corner, patch));
        let out = net.predict(&input)?;
        if out.dims != patch || out.num_classes != classes {
            return Err(Error::ShapeMismatch("predictor output does not match its patch".into()));
        }
        Ok(out)
    };
    let mut accumulate = |corner: &Dims, out: &ConfidenceMap| {
        let mut i = 0;
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                for x in 0..patch[2] {
                    let v = offset(dims, corner[0] + z, corner[1] + y, corner[2] + x);
                    let w = weights[i];
                    den[v] += w;
                    for c in 0..classes {
                        num[c * n + v] += w * out.probs[c * np + i];
                    }
                    i += 1;
                }
            }
        }
    };
    if workers > 1 {
        // Predict a chunk in parallel, then accumulate in layout order.
        for chunk in layout.positions.chunks(workers) {
            let outs: Vec<Result<ConfidenceMap>> = chunk.par_iter().map(run).collect();
            for (corner, out) in chunk.iter().zip(outs) {
                accumulate(corner, &out?);
            }
        }
    } else {
        for corner in &layout.positions {
            let out = run(corner)?;
            accumulate(corner, &out);
        }
    }
    for c in 0..classes {
        for v in 0..n {
            num[c * n + v] /= den[v];
        }
    }
    Ok(ConfidenceMap::new(classes, dims, num))
}

/// Sliding-window prediction over an explicit layout.
pub fn sliding_window_predict(net: &dyn PatchPredictor, volume: &Volume, layout: &TileLayout) -> Result<ConfidenceMap> {
    if layout.volume_dims != volume.dims() {
        return Err(Error::ShapeMismatch("layout was built for another volume".into()));
    }
    let data: Vec<f64> = volume.image_values()?.iter().map(|&v| v as f64).collect();
    blend_tiles(net, &data, layout, 1)
}

/// Axes mirrored by TTA: all three for 3D patches, only y and x when the
/// patch is one slice thick.
pub fn mirror_axes(patch: Dims) -> Vec<usize> {
    if patch[0] == 1 {
        vec![1, 2]
    } else {
        vec![0, 1, 2]
    }
}

/// Sliding-window prediction, averaged over all mirror combinations when
/// `mode.tta` is set.
pub fn tta_predict_array(
    net: &dyn PatchPredictor,
    data: &[f64],
    dims: Dims,
    mode: InferenceMode,
    step_fraction: f64,
    workers: usize,
) -> Result<ConfidenceMap> {
    if !mode.tta {
        return sliding_window_array(net, data, dims, step_fraction, workers);
    }
    let axes = mirror_axes(net.patch_size());
    let combos = 1usize << axes.len();
    let n = num_voxels(dims);
    let classes = net.num_classes();
    let mut total = vec![0.0; classes * n];
    for mask in 0..combos {
        let flips: Vec<usize> = axes
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &a)| a)
            .collect();
        let mut input = data.to_vec();
        for &a in &flips {
            flip_axis(&mut input, dims, a);
        }
        let mut out = sliding_window_array(net, &input, dims, step_fraction, workers)?;
        for c in 0..classes {
            let slice = &mut out.probs[c * n..(c + 1) * n];
            for &a in &flips {
                flip_axis(slice, dims, a);
            }
        }
        total.iter_mut().zip(&out.probs).for_each(|(t, p)| *t += p);
    }
    let scale = 1.0 / combos as f64;
    total.iter_mut().for_each(|v| *v *= scale);
    Ok(ConfidenceMap::new(classes, dims, total))
}

pub fn tta_predict(
    net: &dyn PatchPredictor,
    volume: &Volume,
    layout: &TileLayout,
    mode: InferenceMode,
) -> Result<ConfidenceMap> {
    if layout.patch_size != net.patch_size() || layout.volume_dims != volume.dims() {
        return Err(Error::ShapeMismatch("layout does not match volume and network".into()));
    }
    let data: Vec<f64> = volume.image_values()?.iter().map(|&v| v as f64).collect();
    tta_predict_array(net, &data, volume.dims(), mode, layout.step_fraction, 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub mode: InferenceMode,
    pub force_spacing: Option<SpacingRule>,
    pub postprocess_cc: bool,
    pub step_fraction: f64,
    pub workers: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            mode: InferenceMode::normal(),
            force_spacing: None,
            postprocess_cc: false,
            step_fraction: DEFAULT_STEP_FRACTION,
            workers: 1,
        }
    }
}

/// Spacing a raw case is resampled to before prediction.
pub fn inference_spacing(raw: &Volume, plan: &Plan, force: Option<&SpacingRule>) -> [f64; 3] {
    match force {
        Some(rule) => enforced_spacing(raw.dims()[0], raw.spacing(), rule),
        None => plan.target_spacing,
    }
}

/// Segment a raw image and return a label volume on the raw grid.
pub fn predict_case(
    net: &dyn PatchPredictor,
    raw: &Volume,
    plan: &Plan,
    fp: &Fingerprint,
    options: &InferenceOptions,
) -> Result<Volume> {
    raw.image_values()?;
    if net.num_classes() != plan.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "network has {} classes, plan {}",
            net.num_classes(),
            plan.num_classes
        )));
    }
    let spacing = inference_spacing(raw, plan, options.force_spacing.as_ref());
    let resampled = resample(raw, spacing, Interpolation::Linear)?;
    let normalized = normalize(&resampled, fp)?;
    let data: Vec<f64> = normalized.image_values()?.iter().map(|&v| v as f64).collect();
    let probs = tta_predict_array(
        net,
        &data,
        normalized.dims(),
        options.mode,
        options.step_fraction,
        options.workers,
    )?;
    let mut labels = probs.argmax();
    if options.postprocess_cc {
        keep_largest_components(&mut labels, probs.dims, probs.num_classes);
    }
    let seg = Volume::labels(normalized.dims(), spacing, labels)?;
    resample_to(&seg, raw.dims(), raw.spacing(), Interpolation::Nearest)
}

/// For every foreground class keep only its largest 6-connected component;
/// removed voxels become background.
pub fn keep_largest_components(labels: &mut [u8], dims: Dims, num_classes: usize) {
    let n = num_voxels(dims);
    let mut component = vec![usize::MAX; n];
    for class in 1..num_classes as u8 {
        let mut sizes = Vec::new();
        for start in 0..n {
            if labels[start] != class || component[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            component[start] = id;
            while let Some(v) = queue.pop_front() {
                size += 1;
                let x = v % dims[2];
                let y = (v / dims[2]) % dims[1];
                let z = v / (dims[1] * dims[2]);
                let mut visit = |u: usize| {
                    if labels[u] == class && component[u] == usize::MAX {
                        component[u] = id;
                        queue.push_back(u);
                    }
                };
                if x > 0 {
                    visit(v - 1);
                }
                if x + 1 < dims[2] {
                    visit(v + 1);
                }
                if y > 0 {
                    visit(v - dims[2]);
                }
                if y + 1 < dims[1] {
                    visit(v + dims[2]);
                }
                if z > 0 {
                    visit(v - dims[1] * dims[2]);
                }
                if z + 1 < dims[0] {
                    visit(v + dims[1] * dims[2]);
                }
            }
            sizes.push(size);
        }
        // First component wins ties.
        let Some(best) = (0..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))) else {
            continue;
        };
        for v in 0..n {
            if labels[v] == class && component[v] != best {
                labels[v] = 0;
            }
        }
        for v in 0..n {
            if labels[v] == class {
                component[v] = usize::MAX;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Constant {
        patch: Dims,
        q: Vec<f64>,
        calls: AtomicUsize,
    }

    impl PatchPredictor for Constant {
        fn patch_size(&self) -> Dims {
            self.patch
        }
        fn num_classes(&self) -> usize {
            self.q.len()
        }
        fn predict(&self, _input: &Tensor) -> Result<ConfidenceMap> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let n = num_voxels(self.patch);
            let probs = self.q.iter().flat_map(|&p| std::iter::repeat_n(p, n)).collect();
            Ok(ConfidenceMap::new(self.q.len(), self.patch, probs))
        }
    }

    /// Emits class-1 probability equal to the first input voxel.
    struct FirstVoxel {
        patch: Dims,
    }

    impl PatchPredictor for FirstVoxel {
        fn patch_size(&self) -> Dims {
            self.patch
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn predict(&self, input: &Tensor) -> Result<ConfidenceMap> {
            let n = num_voxels(self.patch);
            let p = input.data[0];
            let mut probs = vec![1.0 - p; n];
            probs.extend(std::iter::repeat_n(p, n));
            Ok(ConfidenceMap::new(2, self.patch, probs))
        }
    }

    #[test]
    fn layout_examples() {
        assert_eq!(axis_positions(100, 64, 0.7), vec![0, 36]);
        assert_eq!(axis_positions(64, 64, 0.7), vec![0]);
        assert_eq!(axis_positions(10, 64, 0.7), vec![0]);
        let l = tile_positions([64, 64, 64], [64, 64, 64], 0.7).unwrap();
        assert_eq!(l.positions, vec![[0, 0, 0]]);
        assert!(tile_positions([8; 3], [4; 3], 0.0).is_err());
    }

    #[test]
    fn importance_map_shape() {
        let w = gaussian_importance([8, 8, 8]);
        let peak = w.iter().copied().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&v| v >= MIN_IMPORTANCE));
        assert_eq!(w[0], MIN_IMPORTANCE);
    }

    #[test]
    fn two_tile_blend_matches_weighted_average() {
        // Volume 1 x 1 x 12, patch 1 x 1 x 8: tiles at x = 0 and x = 4.
        let patch = [1, 1, 8];
        let mut values = vec![0.0f32; 12];
        values[0] = 0.25;
        values[4] = 0.75;
        let vol = Volume::image([1, 1, 12], [1.0; 3], values).unwrap();
        let layout = tile_positions([1, 1, 12], patch, 0.7).unwrap();
        assert_eq!(layout.positions, vec![[0, 0, 0], [0, 0, 4]]);
        let net = FirstVoxel { patch };
        let map = sliding_window_predict(&net, &vol, &layout).unwrap();
        let w = gaussian_importance(patch);
        for x in 4..8 {
            let (wa, wb) = (w[x], w[x - 4]);
            let expected = (wa * 0.25 + wb * 0.75) / (wa + wb);
            assert!((map.prob(1, x) - expected).abs() < 1e-12);
        }
        assert!((map.prob(1, 0) - 0.25).abs() < 1e-12);
        assert!((map.prob(1, 11) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn constant_network_and_pass_counts() {
        let net = Constant {
            patch: [4, 4, 4],
            q: vec![0.2, 0.5, 0.3],
            calls: AtomicUsize::new(0),
        };
        let dims = [6, 9, 5];
        let data = vec![0.0; num_voxels(dims)];
        let fast = tta_predict_array(&net, &data, dims, InferenceMode::fast(), 0.7, 1).unwrap();
        let fast_calls = net.calls.swap(0, Ordering::SeqCst);
        let normal = tta_predict_array(&net, &data, dims, InferenceMode::normal(), 0.7, 1).unwrap();
        let normal_calls = net.calls.load(Ordering::SeqCst);
        assert_eq!(normal_calls, 8 * fast_calls);
        for map in [fast, normal] {
            for v in 0..map.voxels() {
                for c in 0..3 {
                    assert!((map.prob(c, v) - net.q[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn small_volume_is_padded() {
        let net = Constant {
            patch: [4, 4, 4],
            q: vec![0.6, 0.4],
            calls: AtomicUsize::new(0),
        };
        let map = sliding_window_array(&net, &[0.0; 2 * 3 * 5], [2, 3, 5], 0.7, 1).unwrap();
        assert_eq!(map.dims, [2, 3, 5]);
        assert!(map.probs[..30].iter().all(|&p| (p - 0.6).abs() < 1e-12));
    }

    #[test]
    fn parallel_tiles_match_serial() {
        let net = FirstVoxel { patch: [2, 2, 4] };
        let dims = [5, 3, 11];
        let data: Vec<f64> = (0..num_voxels(dims)).map(|i| (i % 7) as f64 / 7.0).collect();
        let a = sliding_window_array(&net, &data, dims, 0.5, 1).unwrap();
        let b = sliding_window_array(&net, &data, dims, 0.5, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn largest_component_kept() {
        let dims = [1, 1, 9];
        let mut labels = vec![1, 1, 0, 1, 1, 1, 0, 2, 1];
        keep_largest_components(&mut labels, dims, 3);
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1, 0, 2, 0]);
    }

    proptest::proptest! {
        #[test]
        fn layout_covers_and_steps(len in 1usize..200, patch in 1usize..80, step in 0.1f64..=1.0) {
            let pos = axis_positions(len, patch, step);
            proptest::prop_assert_eq!(pos[0], 0);
            if len > patch {
                proptest::prop_assert_eq!(*pos.last().unwrap(), len - patch);
                for w in pos.windows(2) {
                    proptest::prop_assert!(w[1] > w[0]);
                    proptest::prop_assert!((w[1] - w[0]) as f64 <= (step * patch as f64).ceil());
                }
            }
            let mut covered = vec![false; len];
            for p in &pos {
                for c in covered.iter_mut().skip(*p).take(patch) {
                    *c = true;
                }
            }
            proptest::prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
