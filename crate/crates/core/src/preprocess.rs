//! Resampling, intensity normalization, patch sampling and augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{num_voxels, offset, Dims, Spacing, Volume, VolumeData, VolumeKind};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Linear,
}

/// Output extent for resampling `dims` from `spacing` to `target`.
pub fn resampled_dims(dims: Dims, spacing: Spacing, target: Spacing) -> Dims {
    [0, 1, 2].map(|a| ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

pub fn resample(volume: &Volume, target_spacing: Spacing, order: Interpolation) -> Result<Volume> {
    if target_spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidVolume(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let dims = resampled_dims(volume.dims(), volume.spacing(), target_spacing);
    resample_to(volume, dims, target_spacing, order)
}

/// Per-axis source coordinate table for one output axis. Voxel centres are
/// mapped through the shared physical extent: `src = (i + 0.5) * n_in / n_out - 0.5`.
struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
    nearest: Vec<usize>,
}

impl AxisMap {
    fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut map = AxisMap {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            frac: Vec::with_capacity(n_out),
            nearest: Vec::with_capacity(n_out),
        };
        let last = (n_in - 1) as f64;
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor();
            map.lo.push(lo as usize);
            map.hi.push((lo as usize + 1).min(n_in - 1));
            map.frac.push(src - lo);
            map.nearest.push((((i as f64 + 0.5) * scale).floor() as usize).min(n_in - 1));
        }
        map
    }
}

/// Resample onto an explicit grid of `dims` voxels covering the same physical
/// extent, tagging the result with `spacing`.
pub fn resample_to(
    volume: &Volume,
    dims: Dims,
    spacing: Spacing,
    order: Interpolation,
) -> Result<Volume> {
    let src_dims = volume.dims();
    if volume.kind() == VolumeKind::Labels && order == Interpolation::Linear {
        return Err(Error::InterpolationOnLabels);
    }
    if dims == src_dims {
        return volume.clone().with_spacing(spacing);
    }
    let maps = [0, 1, 2].map(|a| AxisMap::new(src_dims[a], dims[a]));
    let n = num_voxels(dims);
    let data = match (volume.data(), order) {
        (VolumeData::Labels(src), _) => {
            VolumeData::Labels(gather_nearest(src, src_dims, dims, &maps))
        }
        (VolumeData::Image(src), Interpolation::Nearest) => {
            VolumeData::Image(gather_nearest(src, src_dims, dims, &maps))
        }
        (VolumeData::Image(src), Interpolation::Linear) => {
            let mut out = Vec::with_capacity(n);
            let [mz, my, mx] = &maps;
            for z in 0..dims[0] {
                let (z0, z1, fz) = (mz.lo[z], mz.hi[z], mz.frac[z]);
                for y in 0..dims[1] {
                    let (y0, y1, fy) = (my.lo[y], my.hi[y], my.frac[y]);
                    for x in 0..dims[2] {
                        let (x0, x1, fx) = (mx.lo[x], mx.hi[x], mx.frac[x]);
                        let at = |z, y, x| src[offset(src_dims, z, y, x)] as f64;
                        let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                        let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                        let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                        let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                        let c0 = c00 * (1.0 - fy) + c01 * fy;
                        let c1 = c10 * (1.0 - fy) + c11 * fy;
                        out.push((c0 * (1.0 - fz) + c1 * fz) as f32);
                    }
                }
            }
            VolumeData::Image(out)
        }
    };
    Volume::new(dims, spacing, data)
}

fn gather_nearest<T: Copy>(src: &[T], src_dims: Dims, dims: Dims, maps: &[AxisMap; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(num_voxels(dims));
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.push(
                    src[offset(src_dims, maps[0].nearest[z], maps[1].nearest[y], maps[2].nearest[x])],
                );
            }
        }
    }
    out
}

/// CT-style normalization: clip to the fingerprint percentiles, then z-score
/// with the pooled mean and std. A zero std falls back to a unit divisor.
pub fn normalize(volume: &Volume, fp: &Fingerprint) -> Result<Volume> {
    let values = volume.image_values()?;
    let std = if fp.std > 0.0 {
        fp.std
    } else {
        log::warn!("DegenerateStd: fingerprint std is 0, normalizing with divisor 1");
        1.0
    };
    let out = values
        .iter()
        .map(|&v| ((v as f64).clamp(fp.p_low, fp.p_high) - fp.mean) / std)
        .map(|v| v as f32)
        .collect();
    Volume::image(volume.dims(), volume.spacing(), out)
}

/// A fixed-size training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub dims: Dims,
    pub image: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    pub case_id: usize,
    /// Corner of the crop in (padded) source coordinates.
    pub corner: Dims,
}

/// Crop `patch_size` out of `image` (and `labels`). With probability
/// `oversample_foreground` a labeled crop is forced to contain a uniformly
/// chosen foreground voxel. Volumes smaller than the patch are zero-padded
/// symmetrically.
pub fn sample_patch<R: Rng + ?Sized>(
    image: &Volume,
    labels: Option<&Volume>,
    patch_size: Dims,
    rng: &mut R,
    oversample_foreground: f64,
    case_id: usize,
) -> Result<Patch> {
    let dims = image.dims();
    let src = image.image_values()?;
    let lab = match labels {
        Some(l) => {
            if l.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} vs labels {:?}",
                    dims,
                    l.dims()
                )));
            }
            Some(l.label_values()?)
        }
        None => None,
    };
    let padded = [0, 1, 2].map(|a| dims[a].max(patch_size[a]));
    let pad_before = [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2);
    let max_corner = [0, 1, 2].map(|a| padded[a] - patch_size[a]);

    let mut forced = None;
    if let Some(lab) = lab {
        if rng.random::<f64>() < oversample_foreground {
            let count = lab.iter().filter(|&&v| v > 0).count();
            if count > 0 {
                let pick = rng.random_range(0..count);
                let flat = lab
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0)
                    .nth(pick)
                    .map(|(i, _)| i)
                    .unwrap();
                let voxel = [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]];
                forced = Some(voxel);
            }
        }
    }
    let corner = match forced {
        Some(v) => [0, 1, 2].map(|a| {
            let centre = v[a] + pad_before[a];
            centre.saturating_sub(patch_size[a] / 2).min(max_corner[a])
        }),
        None => [0, 1, 2].map(|a| rng.random_range(0..=max_corner[a])),
    };

    let n = num_voxels(patch_size);
    let mut img = vec![0.0f64; n];
    let mut out_labels = lab.map(|_| vec![0u8; n]);
    for z in 0..patch_size[0] {
        let Some(sz) = (corner[0] + z).checked_sub(pad_before[0]).filter(|&s| s < dims[0]) else {
            continue;
        };
        for y in 0..patch_size[1] {
            let Some(sy) = (corner[1] + y).checked_sub(pad_before[1]).filter(|&s| s < dims[1])
            else {
                continue;
            };
            for x in 0..patch_size[2] {
                let Some(sx) = (corner[2] + x).checked_sub(pad_before[2]).filter(|&s| s < dims[2])
                else {
                    continue;
                };
                let si = offset(dims, sz, sy, sx);
                let di = offset(patch_size, z, y, x);
                img[di] = src[si] as f64;
                if let (Some(out), Some(lab)) = (out_labels.as_mut(), lab) {
                    out[di] = lab[si];
                }
            }
        }
    }
    Ok(Patch {
        dims: patch_size,
        image: img,
        labels: out_labels,
        case_id,
        corner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    pub scale_prob: f64,
    pub noise_prob: f64,
    pub scale_range: (f64, f64),
    pub noise_sigma_max: f64,
    pub oversample_foreground: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mirror_prob: 0.5,
            scale_prob: 0.5,
            noise_prob: 0.5,
            scale_range: (0.9, 1.1),
            noise_sigma_max: 0.1,
            oversample_foreground: 0.33,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            mirror_prob: 0.0,
            scale_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Reverse the order of voxels along `axis`.
pub fn flip_axis<T: Copy>(values: &mut [T], dims: Dims, axis: usize) {
    let n = dims[axis];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let mut idx = [z, y, x];
                if idx[axis] >= n / 2 {
                    continue;
                }
                let a = offset(dims, idx[0], idx[1], idx[2]);
                idx[axis] = n - 1 - idx[axis];
                let b = offset(dims, idx[0], idx[1], idx[2]);
                values.swap(a, b);
            }
        }
    }
}

/// Mirror each axis, scale intensities and add Gaussian noise, each with its
/// own probability. Spatial ops touch image and labels alike; intensity ops
/// only the image.
pub fn augment<R: Rng + ?Sized>(mut patch: Patch, rng: &mut R, config: &AugmentConfig) -> Patch {
    for axis in 0..3 {
        if rng.random::<f64>() < config.mirror_prob {
            flip_axis(&mut patch.image, patch.dims, axis);
            if let Some(l) = patch.labels.as_mut() {
                flip_axis(l, patch.dims, axis);
            }
        }
    }
    if rng.random::<f64>() < config.scale_prob {
        let (lo, hi) = config.scale_range;
        let factor = lo + (hi - lo) * rng.random::<f64>();
        patch.image.iter_mut().for_each(|v| *v *= factor);
    }
    if rng.random::<f64>() < config.noise_prob {
        let sigma = config.noise_sigma_max * rng.random::<f64>();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            patch.image.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
    patch
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn ramp(dims: Dims, spacing: Spacing) -> Volume {
        Volume::image(dims, spacing, (0..num_voxels(dims)).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn identity_resample() {
        let v = ramp([3, 4, 5], [1.5, 0.7, 0.7]);
        let out = resample(&v, [1.5, 0.7, 0.7], Interpolation::Linear).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn upsample_dims() {
        let v = ramp([4, 4, 4], [2.0; 3]);
        let out = resample(&v, [1.0; 3], Interpolation::Linear).unwrap();
        assert_eq!(out.dims(), [8, 8, 8]);
        assert_eq!(out.spacing(), [1.0; 3]);
    }

    #[test]
    fn linear_on_labels_rejected() {
        let l = Volume::labels([2, 2, 2], [1.0; 3], vec![0; 8]).unwrap();
        assert!(matches!(
            resample(&l, [0.5; 3], Interpolation::Linear),
            Err(Error::InterpolationOnLabels)
        ));
    }

    #[test]
    fn label_values_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let classes = [0u8, 2, 5];
        let values: Vec<u8> = (0..6 * 7 * 5).map(|_| classes[rng.random_range(0..3)]).collect();
        let l = Volume::labels([6, 7, 5], [1.0, 0.8, 1.3], values).unwrap();
        for target in [[0.37, 1.9, 0.5], [2.0, 2.0, 2.0], [0.9, 0.9, 0.9]] {
            let out = resample(&l, target, Interpolation::Nearest).unwrap();
            let set: BTreeSet<u8> = out.as_labels().unwrap().iter().copied().collect();
            assert!(set.is_subset(&classes.into_iter().collect()));
        }
    }

    #[test]
    fn linear_interpolation_of_a_linear_ramp_is_exact_in_interior() {
        // 1D ramp along x, doubled resolution: interior samples lie on the line.
        let v = Volume::image([1, 1, 4], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resample(&v, [1.0, 1.0, 0.5], Interpolation::Linear).unwrap();
        let got = out.as_image().unwrap();
        assert_eq!(got.len(), 8);
        for (i, g) in got.iter().enumerate().take(7).skip(1) {
            let expected = (i as f64 + 0.5) * 0.5 - 0.5;
            assert!((*g as f64 - expected).abs() < 1e-6);
        }
    }

    fn fp(mean: f64, std: f64, lo: f64, hi: f64) -> Fingerprint {
        Fingerprint {
            mean,
            std,
            p_low: lo,
            p_high: hi,
            median_spacing: [1.0; 3],
            num_cases: 1,
            num_voxels: 1,
        }
    }

    #[test]
    fn normalize_values() {
        let f = fp(100.0, 50.0, 0.0, 200.0);
        let v = Volume::image([1, 1, 4], [1.0; 3], vec![100.0, 150.0, 200.0, 1200.0]).unwrap();
        let out = normalize(&v, &f).unwrap();
        assert_eq!(out.as_image().unwrap(), &[0.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn normalize_degenerate_std_uses_unit_divisor() {
        let f = fp(3.0, 0.0, 0.0, 10.0);
        let v = Volume::image([1, 1, 2], [1.0; 3], vec![3.0, 5.0]).unwrap();
        assert_eq!(normalize(&v, &f).unwrap().as_image().unwrap(), &[0.0, 2.0]);
    }

    #[test]
    fn whole_volume_patch() {
        let v = ramp([4, 4, 4], [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_patch(&v, None, [4, 4, 4], &mut rng, 0.33, 0).unwrap();
        let expected: Vec<f64> = v.as_image().unwrap().iter().map(|&x| x as f64).collect();
        assert_eq!(p.image, expected);
    }

    #[test]
    fn forced_foreground_patch_contains_foreground() {
        let dims = [20, 20, 20];
        let mut labels = vec![0u8; num_voxels(dims)];
        labels[offset(dims, 17, 2, 15)] = 3;
        let l = Volume::labels(dims, [1.0; 3], labels).unwrap();
        let v = ramp(dims, [1.0; 3]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_patch(&v, Some(&l), [6, 6, 6], &mut rng, 1.0, 0).unwrap();
            assert!(p.labels.unwrap().iter().any(|&c| c > 0));
        }
    }

    #[test]
    fn small_volume_is_padded_symmetrically() {
        let v = Volume::image([1, 2, 2], [1.0; 3], vec![1.0; 4]).unwrap();
        let l = Volume::labels([1, 2, 2], [1.0; 3], vec![1; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_patch(&v, Some(&l), [1, 4, 4], &mut rng, 0.0, 0).unwrap();
        let expected_img = vec![
            0.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 1.0, 0.0, //
            0.0, 1.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(p.image, expected_img);
        assert_eq!(p.labels.unwrap().iter().filter(|&&c| c == 1).count(), 4);
    }

    #[test]
    fn patch_sampling_is_seeded() {
        let v = ramp([10, 9, 8], [1.0; 3]);
        let a = sample_patch(&v, None, [4, 4, 4], &mut ChaCha8Rng::seed_from_u64(9), 0.0, 0)
            .unwrap();
        let b = sample_patch(&v, None, [4, 4, 4], &mut ChaCha8Rng::seed_from_u64(9), 0.0, 0)
            .unwrap();
        assert_eq!(a, b);
    }

    fn labeled_patch(seed: u64) -> Patch {
        let dims = [4, 5, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch {
            dims,
            image: (0..num_voxels(dims)).map(|_| rng.random::<f64>()).collect(),
            labels: Some((0..num_voxels(dims)).map(|_| rng.random_range(0..4)).collect()),
            case_id: 0,
            corner: [0; 3],
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let p = labeled_patch(1);
        let out = augment(p.clone(), &mut ChaCha8Rng::seed_from_u64(3), &AugmentConfig::disabled());
        assert_eq!(out, p);
    }

    #[test]
    fn mirror_is_an_involution() {
        let p = labeled_patch(2);
        for axis in 0..3 {
            let mut img = p.image.clone();
            flip_axis(&mut img, p.dims, axis);
            assert_ne!(img, p.image);
            flip_axis(&mut img, p.dims, axis);
            assert_eq!(img, p.image);
        }
    }

    #[test]
    fn augmentation_keeps_label_multiset_and_shape() {
        let cfg = AugmentConfig {
            mirror_prob: 1.0,
            scale_prob: 1.0,
            noise_prob: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..10 {
            let p = labeled_patch(seed);
            let mut before = p.labels.clone().unwrap();
            let out = augment(p.clone(), &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            let mut after = out.labels.clone().unwrap();
            before.sort_unstable();
            after.sort_unstable();
            assert_eq!(before, after);
            assert_eq!(out.dims, p.dims);
            assert_eq!(out.image.len(), p.image.len());
        }
    }
}
