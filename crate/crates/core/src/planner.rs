//! Heuristic experiment planning and the enforced-spacing rule used for
//! resource-constrained inference.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Dims, Spacing};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::kv::{join, KvDoc};

/// An axis keeps being halved while it is at least this long.
pub const HALVING_THRESHOLD: usize = 8;
/// Smallest admissible bottleneck extent along a pooled axis.
pub const MIN_BOTTLENECK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimensionality {
    TwoD,
    ThreeD,
}

impl fmt::Display for Dimensionality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimensionality::TwoD => "2d",
            Dimensionality::ThreeD => "3d",
        })
    }
}

impl FromStr for Dimensionality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Dimensionality::TwoD),
            "3d" => Ok(Dimensionality::ThreeD),
            other => Err(Error::Config(format!("unknown dimensionality {other:?}"))),
        }
    }
}

/// Derived training and inference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub dimensionality: Dimensionality,
    pub target_spacing: Spacing,
    pub patch_size: Dims,
    /// One stride triple per pooling step, finest first.
    pub pool_schedule: Vec<Dims>,
    pub base_channels: usize,
    pub max_channels: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub num_classes: usize,
    /// Intensity statistics used for normalization.
    pub fingerprint: Fingerprint,
}

impl Plan {
    pub fn levels(&self) -> usize {
        self.pool_schedule.len() + 1
    }

    pub fn channels(&self) -> Vec<usize> {
        channel_widths(self.levels(), self.base_channels, self.max_channels)
    }

    pub fn bottleneck(&self) -> Dims {
        bottleneck(self.patch_size, &self.pool_schedule)
    }

    /// Convolution kernel extent per axis: 2D plans never convolve across z.
    pub fn kernel(&self) -> Dims {
        match self.dimensionality {
            Dimensionality::TwoD => [1, 3, 3],
            Dimensionality::ThreeD => [3, 3, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled != self.batch_unlabeled {
            return Err(Error::InfeasiblePlan(format!(
                "batch sizes differ: {} labeled vs {} unlabeled",
                self.batch_labeled, self.batch_unlabeled
            )));
        }
        if self.batch_labeled == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::InfeasiblePlan("zero batch or channel count".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InfeasiblePlan("need at least two classes".into()));
        }
        if self.dimensionality == Dimensionality::TwoD
            && (self.patch_size[0] != 1 || self.pool_schedule.iter().any(|s| s[0] != 1))
        {
            return Err(Error::InfeasiblePlan("2D plans need z extent 1 and z stride 1".into()));
        }
        let mut size = self.patch_size;
        for strides in &self.pool_schedule {
            for axis in 0..3 {
                if !(strides[axis] == 1 || strides[axis] == 2) || !size[axis].is_multiple_of(strides[axis]) {
                    return Err(Error::InfeasiblePlan(format!(
                        "patch {:?} not divisible by schedule {:?}",
                        self.patch_size, self.pool_schedule
                    )));
                }
                size[axis] /= strides[axis];
            }
        }
        for axis in 0..3 {
            if self.patch_size[axis] > 1 && size[axis] < MIN_BOTTLENECK {
                return Err(Error::InfeasiblePlan(format!(
                    "bottleneck {size:?} below {MIN_BOTTLENECK}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.push("dimensionality", self.dimensionality);
        doc.push("target_spacing", join(&self.target_spacing));
        doc.push("patch_size", join(&self.patch_size));
        let schedule: Vec<String> = self.pool_schedule.iter().map(|s| join(s)).collect();
        doc.push("pool_schedule", schedule.join(";"));
        doc.push("base_channels", self.base_channels);
        doc.push("max_channels", self.max_channels);
        doc.push("batch_labeled", self.batch_labeled);
        doc.push("batch_unlabeled", self.batch_unlabeled);
        doc.push("num_classes", self.num_classes);
        for (k, v) in self.fingerprint.to_kv().entries() {
            doc.push(format!("fp.{k}"), v);
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let schedule_raw = doc
            .raw("pool_schedule")
            .ok_or_else(|| Error::Config("missing key pool_schedule".into()))?;
        let mut pool_schedule = Vec::new();
        for part in schedule_raw.split(';').filter(|p| !p.trim().is_empty()) {
            let v: Vec<usize> = crate::kv::parse_list(part)
                .ok_or_else(|| Error::Config(format!("bad pool_schedule entry {part:?}")))?;
            pool_schedule.push(
                v.try_into()
                    .map_err(|_| Error::Config("pool_schedule entries need 3 strides".into()))?,
            );
        }
        let mut fp_doc = KvDoc::new();
        for (k, v) in doc.entries() {
            if let Some(stripped) = k.strip_prefix("fp.") {
                fp_doc.push(stripped, v);
            }
        }
        let plan = Plan {
            dimensionality: doc.get("dimensionality")?,
            target_spacing: doc.get_triple("target_spacing")?,
            patch_size: doc.get_triple("patch_size")?,
            pool_schedule,
            base_channels: doc.get("base_channels")?,
            max_channels: doc.get("max_channels")?,
            batch_labeled: doc.get("batch_labeled")?,
            batch_unlabeled: doc.get("batch_unlabeled")?,
            num_classes: doc.get("num_classes")?,
            fingerprint: Fingerprint::from_kv(&fp_doc)?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvDoc::read(path)?)
    }
}

/// Knobs for `make_plan`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanConstraints {
    pub max_patch_voxels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub batch_size: usize,
    pub num_classes: usize,
}

impl Default for PlanConstraints {
    fn default() -> Self {
        Self {
            max_patch_voxels: 16 * 16 * 16,
            base_channels: 4,
            max_channels: 64,
            batch_size: 2,
            num_classes: 4,
        }
    }
}

/// Number of halvings an axis of length `len` receives, or `None` when some
/// halving would hit an odd length.
pub fn axis_halvings(len: usize) -> Option<usize> {
    if len == 0 {
        return None;
    }
    let mut len = len;
    let mut n = 0;
    while len >= HALVING_THRESHOLD {
        if !len.is_multiple_of(2) {
            return None;
        }
        len /= 2;
        n += 1;
    }
    Some(n)
}

/// Pooling strides per level for `patch`: each axis is halved while it is at
/// least [`HALVING_THRESHOLD`] long, until every axis is below it.
pub fn pool_schedule_for(patch: Dims) -> Result<Vec<Dims>> {
    let mut halvings = [0usize; 3];
    for axis in 0..3 {
        halvings[axis] = axis_halvings(patch[axis]).ok_or_else(|| {
            Error::InfeasiblePlan(format!("axis {axis} of patch {patch:?} is not evenly halvable"))
        })?;
    }
    let steps = halvings.iter().copied().max().unwrap_or(0);
    Ok((0..steps)
        .map(|level| [0, 1, 2].map(|axis| if level < halvings[axis] { 2 } else { 1 }))
        .collect())
}

pub fn bottleneck(patch: Dims, schedule: &[Dims]) -> Dims {
    let mut size = patch;
    for strides in schedule {
        for axis in 0..3 {
            size[axis] /= strides[axis];
        }
    }
    size
}

pub fn channel_widths(levels: usize, base: usize, max: usize) -> Vec<usize> {
    (0..levels)
        .map(|l| base.saturating_mul(1usize << l.min(30)).min(max))
        .collect()
}

fn largest_valid_len(upper: usize) -> Option<usize> {
    (MIN_BOTTLENECK..=upper)
        .rev()
        .find(|&l| axis_halvings(l).is_some())
}

/// Largest patch within the voxel budget whose extents follow the inverse
/// spacing (isotropic in mm) and are divisible by their pooling strides.
fn choose_patch(spacing: Spacing, dimensionality: Dimensionality, budget: usize) -> Option<Dims> {
    let axes: &[usize] = match dimensionality {
        Dimensionality::TwoD => &[1, 2],
        Dimensionality::ThreeD => &[0, 1, 2],
    };
    let finest = axes
        .iter()
        .map(|&a| spacing[a])
        .fold(f64::INFINITY, f64::min);
    let patch_at = |edge: usize| -> Option<Dims> {
        let mut patch = [1usize; 3];
        for &axis in axes {
            let target = ((edge as f64) * finest / spacing[axis]).floor() as usize;
            patch[axis] = largest_valid_len(target.max(MIN_BOTTLENECK))?;
        }
        let voxels = patch.iter().try_fold(1usize, |acc, &l| acc.checked_mul(l))?;
        (voxels <= budget).then_some(patch)
    };
    // Patch extents grow monotonically with `edge`, so bisect for the largest fit.
    let mut lo = MIN_BOTTLENECK;
    let mut best = patch_at(lo)?;
    let mut hi = budget.max(lo);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        match patch_at(mid) {
            Some(p) => {
                best = p;
                lo = mid;
            }
            None => hi = mid - 1,
        }
    }
    Some(best)
}

pub fn make_plan(
    fingerprint: &Fingerprint,
    dimensionality: Dimensionality,
    constraints: PlanConstraints,
) -> Result<Plan> {
    if fingerprint.median_spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InfeasiblePlan("fingerprint spacing must be positive".into()));
    }
    let patch_size = choose_patch(
        fingerprint.median_spacing,
        dimensionality,
        constraints.max_patch_voxels,
    )
    .ok_or_else(|| {
        Error::InfeasiblePlan(format!(
            "no divisible patch fits within {} voxels",
            constraints.max_patch_voxels
        ))
    })?;
    let pool_schedule = pool_schedule_for(patch_size)?;
    let plan = Plan {
        dimensionality,
        target_spacing: fingerprint.median_spacing,
        patch_size,
        pool_schedule,
        base_channels: constraints.base_channels,
        max_channels: constraints.max_channels.max(constraints.base_channels),
        batch_labeled: constraints.batch_size,
        batch_unlabeled: constraints.batch_size,
        num_classes: constraints.num_classes,
        fingerprint: fingerprint.clone(),
    };
    plan.validate()?;
    Ok(plan)
}

/// Manual spacing override keyed on the number of slices S.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacingRule {
    /// Default spacing, (z, y, x) mm.
    pub default_spacing: Spacing,
    pub s_low: usize,
    pub s_high: usize,
    pub z_floor: f64,
}

impl Default for SpacingRule {
    fn default() -> Self {
        Self {
            default_spacing: [0.5, 0.75, 0.75],
            s_low: 150,
            s_high: 600,
            z_floor: 0.8,
        }
    }
}

impl SpacingRule {
    pub fn validate(&self) -> Result<()> {
        if self.s_low >= self.s_high || !(self.z_floor > 0.0 && self.z_floor <= 1.0) {
            return Err(Error::Config(format!("invalid spacing rule {self:?}")));
        }
        if self.default_spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("default spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Spacing (z, y, x) to resample to before inference when the override is on.
///
/// Fewer than `s_low` slices keep the original z spacing; up to `s_high`
/// slices everything takes the defaults; longer scans scale the original z
/// spacing by `max(z_floor, s_high / S)`.
pub fn enforced_spacing(num_slices: usize, original: Spacing, rule: &SpacingRule) -> Spacing {
    let [dz, dy, dx] = rule.default_spacing;
    let s = num_slices.max(1);
    if s < rule.s_low {
        [original[0], dy, dx]
    } else if s <= rule.s_high {
        [dz, dy, dx]
    } else {
        let factor = f64::max(rule.z_floor, rule.s_high as f64 / s as f64);
        [factor * original[0], dy, dx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(spacing: Spacing) -> Fingerprint {
        Fingerprint {
            mean: 0.0,
            std: 1.0,
            p_low: -1.0,
            p_high: 1.0,
            median_spacing: spacing,
            num_cases: 1,
            num_voxels: 1,
        }
    }

    #[test]
    fn residual_3d_geometry() {
        let schedule = pool_schedule_for([112, 160, 128]).unwrap();
        assert_eq!(schedule.len() + 1, 6);
        assert_eq!(bottleneck([112, 160, 128], &schedule), [7, 5, 4]);
        let halvings: Vec<usize> = (0..3)
            .map(|a| schedule.iter().filter(|s| s[a] == 2).count())
            .collect();
        assert_eq!(halvings, vec![4, 5, 5]);
    }

    #[test]
    fn residual_2d_geometry() {
        let schedule = pool_schedule_for([1, 512, 512]).unwrap();
        assert_eq!(schedule.len() + 1, 8);
        assert_eq!(bottleneck([1, 512, 512], &schedule), [1, 4, 4]);
    }

    #[test]
    fn cube_32() {
        let schedule = pool_schedule_for([32, 32, 32]).unwrap();
        assert_eq!(schedule, vec![[2, 2, 2]; 3]);
        assert_eq!(bottleneck([32, 32, 32], &schedule), [4, 4, 4]);
    }

    #[test]
    fn odd_halving_is_infeasible() {
        assert!(pool_schedule_for([18, 16, 16]).is_err());
        assert_eq!(axis_halvings(20), Some(2));
        assert_eq!(axis_halvings(5), Some(0));
    }

    #[test]
    fn make_plan_isotropic_budget() {
        let plan = make_plan(&fp([1.0; 3]), Dimensionality::ThreeD, PlanConstraints::default())
            .unwrap();
        assert_eq!(plan.patch_size, [16, 16, 16]);
        assert_eq!(plan.levels(), 3);
        assert_eq!(plan.bottleneck(), [4, 4, 4]);
        assert_eq!(plan.channels(), vec![4, 8, 16]);
        assert_eq!(plan.target_spacing, [1.0; 3]);
    }

    #[test]
    fn make_plan_anisotropic_and_2d() {
        let c = PlanConstraints {
            max_patch_voxels: 16 * 32 * 32,
            ..Default::default()
        };
        let plan = make_plan(&fp([2.0, 1.0, 1.0]), Dimensionality::ThreeD, c).unwrap();
        assert_eq!(plan.patch_size, [16, 32, 32]);
        let c2 = PlanConstraints {
            max_patch_voxels: 512 * 512,
            ..Default::default()
        };
        let plan2 = make_plan(&fp([2.0, 1.0, 1.0]), Dimensionality::TwoD, c2).unwrap();
        assert_eq!(plan2.patch_size, [1, 512, 512]);
        assert_eq!(plan2.bottleneck(), [1, 4, 4]);
        assert_eq!(plan2.kernel(), [1, 3, 3]);
    }

    #[test]
    fn make_plan_infeasible_budget() {
        let c = PlanConstraints {
            max_patch_voxels: 10,
            ..Default::default()
        };
        assert!(matches!(
            make_plan(&fp([1.0; 3]), Dimensionality::ThreeD, c),
            Err(Error::InfeasiblePlan(_))
        ));
    }

    #[test]
    fn make_plan_is_deterministic_and_round_trips() {
        let a = make_plan(&fp([1.2, 0.8, 0.8]), Dimensionality::ThreeD, PlanConstraints::default())
            .unwrap();
        let b = make_plan(&fp([1.2, 0.8, 0.8]), Dimensionality::ThreeD, PlanConstraints::default())
            .unwrap();
        assert_eq!(a, b);
        let back = Plan::from_kv(&KvDoc::parse(&a.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn enforced_spacing_branches() {
        let rule = SpacingRule::default();
        assert_eq!(enforced_spacing(100, [2.5, 0.8, 0.8], &rule), [2.5, 0.75, 0.75]);
        assert_eq!(enforced_spacing(300, [3.0, 0.6, 0.6], &rule), [0.5, 0.75, 0.75]);
        assert_eq!(enforced_spacing(1200, [2.5, 0.8, 0.8], &rule), [2.0, 0.75, 0.75]);
        // 600/700 > 0.8
        let z = enforced_spacing(700, [1.0, 1.0, 1.0], &rule)[0];
        assert!((z - 600.0 / 700.0).abs() < 1e-15);
    }

    #[test]
    fn enforced_z_factor_monotone_above_high() {
        let rule = SpacingRule::default();
        let mut prev = f64::INFINITY;
        for s in 601..3000 {
            let z = enforced_spacing(s, [1.0, 1.0, 1.0], &rule)[0];
            assert!(z <= prev && z >= 0.8);
            prev = z;
        }
    }
}
