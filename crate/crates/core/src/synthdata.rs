//! Reproducible multi-organ ellipsoid phantoms.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{num_voxels, write_volume, DatasetManifest, Dims, LabeledCase, Spacing, Volume};
use crate::error::{Error, Result};

/// Rejection-sampling budget per organ.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub num_organs: usize,
    pub background_mean: f64,
    /// Mean intensity of organ `i + 1`; cycled when shorter than `num_organs`.
    pub organ_means: Vec<f64>,
    pub intensity_jitter: f64,
    pub noise_sigma: f64,
    /// Per-axis radius bounds as fractions of the axis length.
    pub radius_frac: (f64, f64),
    pub spacing_range: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            num_organs: 3,
            background_mean: 0.0,
            organ_means: vec![100.0, 200.0, 300.0],
            intensity_jitter: 10.0,
            noise_sigma: 30.0,
            radius_frac: (0.125, 0.25),
            spacing_range: (0.8, 1.2),
        }
    }
}

impl PhantomConfig {
    pub fn num_classes(&self) -> usize {
        self.num_organs + 1
    }

    fn organ_mean(&self, organ: usize) -> f64 {
        self.organ_means[organ % self.organ_means.len()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.dims.iter().any(|&d| d < 2) {
            return bad("dims must be at least 2 per axis");
        }
        if self.num_organs == 0 || self.num_organs > 254 {
            return bad("num_organs must be in 1..=254");
        }
        if self.organ_means.is_empty() {
            return bad("organ_means must not be empty");
        }
        let (lo, hi) = self.radius_frac;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad("radius_frac must satisfy 0 < lo <= hi < 0.5");
        }
        let (slo, shi) = self.spacing_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad("spacing_range must satisfy 0 < lo <= hi");
        }
        if !(self.noise_sigma >= 0.0 && self.intensity_jitter >= 0.0) {
            return bad("noise_sigma and intensity_jitter must be >= 0");
        }
        Ok(())
    }
}

/// An axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }

    fn voxels(&self, dims: Dims) -> Vec<usize> {
        let lo = [0, 1, 2].map(|a| (self.center[a] - self.radii[a]).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((self.center[a] + self.radii[a]).ceil() as usize).min(dims[a] - 1));
        let mut out = Vec::new();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    if self.contains(z, y, x) {
                        out.push((z * dims[1] + y) * dims[2] + x);
                    }
                }
            }
        }
        out
    }
}

/// Draw a phantom: the ellipsoids that were placed plus the image and label
/// volumes.
pub fn generate_phantom_with_shapes(config: &PhantomConfig, seed: u64) -> Result<(Volume, Volume, Vec<Ellipsoid>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.dims;
    let n = num_voxels(dims);
    let spacing: Spacing = [0, 1, 2].map(|_| rng.random_range(config.spacing_range.0..=config.spacing_range.1));

    let mut labels = vec![0u8; n];
    let mut shapes = Vec::with_capacity(config.num_organs);
    for organ in 0..config.num_organs {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let radii = [0, 1, 2].map(|a| {
                let len = dims[a] as f64;
                rng.random_range(len * config.radius_frac.0..=len * config.radius_frac.1)
            });
            let center = [0, 1, 2].map(|a| {
                let lo = radii[a];
                let hi = dims[a] as f64 - 1.0 - radii[a];
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    (dims[a] as f64 - 1.0) / 2.0
                }
            });
            let e = Ellipsoid { center, radii };
            let voxels = e.voxels(dims);
            if voxels.is_empty() || voxels.iter().any(|&v| labels[v] != 0) {
                continue;
            }
            for v in voxels {
                labels[v] = (organ + 1) as u8;
            }
            shapes.push(e);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementFailure {
                organ: organ + 1,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let jitter = |rng: &mut ChaCha8Rng| {
        if config.intensity_jitter > 0.0 {
            rng.random_range(-config.intensity_jitter..=config.intensity_jitter)
        } else {
            0.0
        }
    };
    let mut means = vec![config.background_mean + jitter(&mut rng)];
    for organ in 0..config.num_organs {
        means.push(config.organ_mean(organ) + jitter(&mut rng));
    }
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let image: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let mut v = means[l as usize];
            if config.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            v as f32
        })
        .collect();

    Ok((
        Volume::image(dims, spacing, image)?,
        Volume::labels(dims, spacing, labels)?,
        shapes,
    ))
}

pub fn generate_phantom(config: &PhantomConfig, seed: u64) -> Result<(Volume, Volume)> {
    let (image, labels, _) = generate_phantom_with_shapes(config, seed)?;
    Ok((image, labels))
}

pub fn image_file_name(index: usize) -> String {
    format!("case_{index:03}.mvol")
}

pub fn label_file_name(index: usize) -> String {
    format!("case_{index:03}_seg.mvol")
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Write `n_labeled + n_unlabeled` phantoms and a manifest into `out_dir`.
/// Case `i` uses seed `seed + i`; unlabeled cases get no label file.
pub fn generate_dataset(
    n_labeled: usize,
    n_unlabeled: usize,
    config: &PhantomConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    if n_labeled == 0 {
        return Err(Error::EmptyLabeledSet(out_dir.join(MANIFEST_NAME)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        num_classes: config.num_classes(),
    };
    for i in 0..n_labeled + n_unlabeled {
        let (image, labels) = generate_phantom(config, seed.wrapping_add(i as u64))?;
        let img_name = image_file_name(i);
        write_volume(&image, out_dir.join(&img_name))?;
        if i < n_labeled {
            let lab_name = label_file_name(i);
            write_volume(&labels, out_dir.join(&lab_name))?;
            manifest.labeled.push(LabeledCase {
                image: img_name.into(),
                labels: lab_name.into(),
            });
        } else {
            manifest.unlabeled.push(img_name.into());
        }
    }
    let path = out_dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic_in_seed() {
        let c = PhantomConfig::default();
        assert_eq!(generate_phantom(&c, 5).unwrap(), generate_phantom(&c, 5).unwrap());
        assert_ne!(generate_phantom(&c, 5).unwrap(), generate_phantom(&c, 6).unwrap());
    }

    #[test]
    fn noiseless_image_has_one_value_per_class() {
        let c = PhantomConfig {
            noise_sigma: 0.0,
            intensity_jitter: 0.0,
            ..PhantomConfig::default()
        };
        let (img, _) = generate_phantom(&c, 1).unwrap();
        let distinct: BTreeSet<u32> = img.image_values().unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), c.num_organs + 1);
    }

    #[test]
    fn organ_volumes_match_ellipsoids() {
        let c = PhantomConfig::default();
        for seed in 0..10 {
            let (_, labels, shapes) = generate_phantom_with_shapes(&c, seed).unwrap();
            let l = labels.label_values().unwrap();
            for (i, e) in shapes.iter().enumerate() {
                assert!(e.radii.iter().all(|&r| r >= 4.0));
                let count = l.iter().filter(|&&v| v as usize == i + 1).count() as f64;
                let ratio = count / e.volume();
                assert!((0.9..=1.1).contains(&ratio), "seed {seed} organ {i}: {ratio}");
            }
        }
    }

    #[test]
    fn every_class_present_and_learnable() {
        let c = PhantomConfig::default();
        for seed in 0..10 {
            let (img, labels) = generate_phantom(&c, seed).unwrap();
            let l = labels.label_values().unwrap();
            let v = img.image_values().unwrap();
            let class_mean = |k: u8| {
                let sel: Vec<f64> = l.iter().zip(v).filter(|(&a, _)| a == k).map(|(_, &b)| b as f64).collect();
                assert!(!sel.is_empty(), "class {k} missing");
                sel.iter().sum::<f64>() / sel.len() as f64
            };
            let bg = class_mean(0);
            for k in 1..=c.num_organs as u8 {
                assert!((class_mean(k) - bg).abs() >= 3.0 * c.noise_sigma);
            }
            let s = img.spacing();
            assert!(s.iter().all(|&x| (0.8..=1.2).contains(&x)));
        }
    }

    #[test]
    fn crowded_config_fails() {
        let c = PhantomConfig {
            dims: [8, 8, 8],
            num_organs: 40,
            radius_frac: (0.3, 0.45),
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_phantom(&c, 0), Err(Error::PlacementFailure { .. })));
    }

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        use sha2::{Digest, Sha256};
        let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let bytes = fs::read(&p).unwrap();
                (p.file_name().unwrap().to_string_lossy().into_owned(), Sha256::digest(&bytes).to_vec())
            })
            .collect()
    }

    #[test]
    fn dataset_layout_and_reproducibility() {
        let c = PhantomConfig {
            dims: [16, 16, 16],
            ..PhantomConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(4, 32, &c, 9, a.path()).unwrap();
        generate_dataset(4, 32, &c, 9, b.path()).unwrap();
        let manifest = load_manifest(&m).unwrap();
        assert_eq!(manifest.labeled.len(), 4);
        assert_eq!(manifest.unlabeled.len(), 32);
        assert_eq!(manifest.num_classes, 4);
        assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
        let digests: BTreeSet<Vec<u8>> = dir_digest(a.path()).into_iter().map(|(_, d)| d).collect();
        assert_eq!(digests.len(), 4 + 4 + 32 + 1);
        assert!(matches!(generate_dataset(0, 3, &c, 0, a.path()), Err(Error::EmptyLabeledSet(_))));
    }
}
