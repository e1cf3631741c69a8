//! Dataset fingerprint over the pooled intensities of every voxel of every
//! case, labeled or not. No foreground mask is involved, so unlabeled cases
//! contribute to the intensity statistics on equal footing.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Spacing, Volume};
use crate::error::{Error, Result};
use crate::kv::KvDoc;

/// Lower and upper clipping quantiles, in per-mille.
pub const P_LOW_PERMILLE: usize = 5;
pub const P_HIGH_PERMILLE: usize = 995;

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub mean: f64,
    pub std: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub median_spacing: Spacing,
    pub num_cases: usize,
    pub num_voxels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FingerprintOptions {
    /// Uniformly subsample at most this many voxels per case.
    pub max_voxels_per_case: Option<usize>,
    pub seed: u64,
}

/// Collects per-case voxels and spacings; `finish` reduces them.
#[derive(Debug, Default)]
pub struct FingerprintAccumulator {
    options: FingerprintOptions,
    values: Vec<f32>,
    spacings: Vec<Spacing>,
}

impl FingerprintAccumulator {
    pub fn new(options: FingerprintOptions) -> Self {
        Self {
            options,
            ..Default::default()
        }
    }

    pub fn add_case(&mut self, image: &Volume) -> Result<()> {
        let values = image.image_values()?;
        let case_index = self.spacings.len() as u64;
        match self.options.max_voxels_per_case {
            Some(limit) if limit < values.len() => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.options.seed.wrapping_add(case_index));
                let mut idx = sample(&mut rng, values.len(), limit).into_vec();
                idx.sort_unstable();
                self.values.extend(idx.into_iter().map(|i| values[i]));
            }
            _ => self.values.extend_from_slice(values),
        }
        self.spacings.push(image.spacing());
        Ok(())
    }

    pub fn finish(mut self) -> Result<Fingerprint> {
        if self.spacings.is_empty() || self.values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        // Everything below runs on the sorted multiset, so the result does not
        // depend on case or voxel order.
        self.values.sort_unstable_by(f32::total_cmp);
        let n = self.values.len();
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = self
            .values
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let median_spacing = [0, 1, 2].map(|axis| {
            let mut s: Vec<f64> = self.spacings.iter().map(|sp| sp[axis]).collect();
            median(&mut s)
        });
        Ok(Fingerprint {
            mean,
            std: var.sqrt(),
            p_low: nearest_rank(&self.values, P_LOW_PERMILLE) as f64,
            p_high: nearest_rank(&self.values, P_HIGH_PERMILLE) as f64,
            median_spacing,
            num_cases: self.spacings.len(),
            num_voxels: n,
        })
    }
}

/// Nearest-rank percentile on sorted data: the value at 1-based rank
/// `ceil(q * n)` with `q` given in per-mille.
pub fn nearest_rank(sorted: &[f32], permille: usize) -> f32 {
    let n = sorted.len();
    let rank = (permille * n).div_ceil(1000).clamp(1, n);
    sorted[rank - 1]
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn compute_fingerprint(images: &[Volume]) -> Result<Fingerprint> {
    compute_fingerprint_with(images, FingerprintOptions::default())
}

pub fn compute_fingerprint_with(
    images: &[Volume],
    options: FingerprintOptions,
) -> Result<Fingerprint> {
    let mut acc = FingerprintAccumulator::new(options);
    for image in images {
        acc.add_case(image)?;
    }
    acc.finish()
}

impl Fingerprint {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.push("mean", self.mean);
        doc.push("std", self.std);
        doc.push("p_low", self.p_low);
        doc.push("p_high", self.p_high);
        doc.push("spacing_z", self.median_spacing[0]);
        doc.push("spacing_y", self.median_spacing[1]);
        doc.push("spacing_x", self.median_spacing[2]);
        doc.push("num_cases", self.num_cases);
        doc.push("num_voxels", self.num_voxels);
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let known = [
            "mean",
            "std",
            "p_low",
            "p_high",
            "spacing_z",
            "spacing_y",
            "spacing_x",
            "num_cases",
            "num_voxels",
        ];
        if let Some((k, _)) = doc.entries().iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown fingerprint key {k}")));
        }
        Ok(Self {
            mean: doc.get("mean")?,
            std: doc.get("std")?,
            p_low: doc.get("p_low")?,
            p_high: doc.get("p_high")?,
            median_spacing: [
                doc.get("spacing_z")?,
                doc.get("spacing_y")?,
                doc.get("spacing_x")?,
            ],
            num_cases: doc.get("num_cases")?,
            num_voxels: doc.get("num_voxels")?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvDoc::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(values: Vec<f32>, spacing: Spacing) -> Volume {
        let n = values.len();
        Volume::image([1, 1, n], spacing, values).unwrap()
    }

    #[test]
    fn constant_volume() {
        let v = Volume::image([4, 4, 4], [1.0; 3], vec![7.0; 64]).unwrap();
        let fp = compute_fingerprint(&[v]).unwrap();
        assert_eq!(fp.mean, 7.0);
        assert_eq!(fp.std, 0.0);
        assert_eq!(fp.p_low, 7.0);
        assert_eq!(fp.p_high, 7.0);
        assert_eq!(fp.num_voxels, 64);
    }

    /// Sort-based oracle over the explicit multiset: rank ceil(q*N), 1-based.
    fn oracle_percentile(values: &[f32], q: f64) -> f32 {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((q * s.len() as f64) - 1e-9).ceil() as usize;
        s[rank.max(1) - 1]
    }

    #[test]
    fn nearest_rank_on_one_to_thousand() {
        let values: Vec<f32> = (1..=1000).rev().map(|i| i as f32).collect();
        assert_eq!(oracle_percentile(&values, 0.005), 5.0);
        assert_eq!(oracle_percentile(&values, 0.995), 995.0);
        let fp = compute_fingerprint(&[vol(values, [1.0; 3])]).unwrap();
        assert_eq!(fp.p_low, 5.0);
        assert_eq!(fp.p_high, 995.0);
    }

    #[test]
    fn pooled_population_std() {
        let a = vol(vec![0.0; 4], [1.0; 3]);
        let b = vol(vec![4.0; 4], [1.0; 3]);
        let fp = compute_fingerprint(&[a, b]).unwrap();
        assert_eq!(fp.mean, 2.0);
        assert_eq!(fp.std, 2.0);
        assert_eq!(fp.num_cases, 2);
    }

    #[test]
    fn median_spacing_per_axis() {
        let cases = vec![
            vol(vec![0.0], [1.0, 0.5, 2.0]),
            vol(vec![0.0], [3.0, 0.7, 2.0]),
            vol(vec![0.0], [2.0, 0.6, 1.0]),
        ];
        let fp = compute_fingerprint(&cases).unwrap();
        assert_eq!(fp.median_spacing, [2.0, 0.6, 2.0]);
    }

    #[test]
    fn empty_dataset() {
        assert!(matches!(compute_fingerprint(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn labels_rejected() {
        let l = Volume::labels([1, 1, 1], [1.0; 3], vec![0]).unwrap();
        assert!(compute_fingerprint(&[l]).is_err());
    }

    #[test]
    fn unlabeled_cases_shift_fingerprint_only_if_intensities_differ() {
        let labeled = vol(vec![1.0, 2.0, 3.0, 4.0], [1.0; 3]);
        let same = vol(vec![4.0, 3.0, 2.0, 1.0], [1.0; 3]);
        let different = vol(vec![10.0, 20.0, 30.0, 40.0], [1.0; 3]);
        let base = compute_fingerprint(std::slice::from_ref(&labeled)).unwrap();
        let with_same = compute_fingerprint(&[labeled.clone(), same]).unwrap();
        let with_diff = compute_fingerprint(&[labeled, different]).unwrap();
        assert_eq!((base.mean, base.std), (with_same.mean, with_same.std));
        assert_ne!(base.mean, with_diff.mean);
    }

    #[test]
    fn subsampling_is_seeded_and_bounded() {
        let v = vol((0..5000).map(|i| i as f32).collect(), [1.0; 3]);
        let opts = FingerprintOptions {
            max_voxels_per_case: Some(100),
            seed: 3,
        };
        let a = compute_fingerprint_with(std::slice::from_ref(&v), opts).unwrap();
        let b = compute_fingerprint_with(&[v], opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_voxels, 100);
    }

    #[test]
    fn kv_round_trip() {
        let v = vol(vec![0.25, -3.5, 1e-3, 17.0], [1.1, 0.9, 0.8]);
        let fp = compute_fingerprint(&[v]).unwrap();
        let back = Fingerprint::from_kv(&KvDoc::parse(&fp.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(fp, back);
    }

    proptest! {
        #[test]
        fn order_invariance(
            mut cases in prop::collection::vec(prop::collection::vec(-1000.0f32..1000.0, 1..40), 1..5),
            seed in 0u64..1000,
        ) {
            let vols: Vec<Volume> = cases.iter().map(|c| vol(c.clone(), [1.0; 3])).collect();
            let reference = compute_fingerprint(&vols).unwrap();

            // Shuffle case order and voxel order deterministically.
            let k = (seed as usize) % cases.len();
            cases.rotate_left(k);
            for c in cases.iter_mut() {
                let k = (seed as usize) % c.len();
                c.rotate_right(k);
                c.reverse();
            }
            let permuted: Vec<Volume> = cases.iter().map(|c| vol(c.clone(), [1.0; 3])).collect();
            prop_assert_eq!(&compute_fingerprint(&permuted).unwrap(), &reference);

            // Pooling: one concatenated case carries identical intensity stats.
            let concat: Vec<f32> = cases.concat();
            let pooled = compute_fingerprint(&[vol(concat, [1.0; 3])]).unwrap();
            prop_assert_eq!(pooled.mean, reference.mean);
            prop_assert_eq!(pooled.std, reference.std);
            prop_assert_eq!(pooled.p_low, reference.p_low);
            prop_assert_eq!(pooled.p_high, reference.p_high);

            // Median lies between the clipping percentiles.
            let mut all: Vec<f32> = cases.concat();
            all.sort_by(f32::total_cmp);
            let med = all[all.len() / 2] as f64;
            prop_assert!(reference.p_low <= med && med <= reference.p_high);
        }
    }
}
