//! Dice similarity coefficient and normalized surface dice.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{read_volume, Dims, Spacing, Volume, VolumeKind};
use crate::error::{Error, Result};

/// Default NSD tolerance in millimetres.
pub const DEFAULT_TOLERANCE_MM: f64 = 1.0;

fn masks(pred: &Volume, gt: &Volume, class_id: u8) -> Result<(Vec<bool>, Vec<bool>)> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let a = pred.label_values()?.iter().map(|&v| v == class_id).collect();
    let b = gt.label_values()?.iter().map(|&v| v == class_id).collect();
    Ok((a, b))
}

/// `2|A ∩ B| / (|A| + |B|)` for the voxels labelled `class_id`.
pub fn dsc(pred: &Volume, gt: &Volume, class_id: u8) -> Result<f64> {
    let (a, b) = masks(pred, gt, class_id)?;
    Ok(dsc_masks(&a, &b))
}

pub fn dsc_masks(a: &[bool], b: &[bool]) -> f64 {
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
            2.0 * inter as f64 / (na + nb) as f64
        }
    }
}

/// Mask voxels with at least one face neighbour outside the mask; the
/// volume border counts as outside.
pub fn surface_voxels(mask: &[bool], dims: Dims) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * ny + y) * nx + x];
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !at(z, y, x) {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < nz
                    && y > 0
                    && y + 1 < ny
                    && x > 0
                    && x + 1 < nx
                    && at(z - 1, y, x)
                    && at(z + 1, y, x)
                    && at(z, y - 1, x)
                    && at(z, y + 1, x)
                    && at(z, y, x - 1)
                    && at(z, y, x + 1);
                if !interior {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Squared physical distance between two voxel centres.
#[inline]
pub fn squared_distance(a: [usize; 3], b: [usize; 3], spacing: Spacing) -> f64 {
    let mut d = 0.0;
    for i in 0..3 {
        let t = (a[i] as f64 - b[i] as f64) * spacing[i];
        d += t * t;
    }
    d
}

/// Count of `from` voxels lying within `tol` of some voxel of `to`. `to_grid`
/// marks the `to` voxels on the full grid.
fn count_within(from: &[[usize; 3]], to_grid: &[bool], dims: Dims, spacing: Spacing, tol: f64) -> usize {
    let tol2 = tol * tol;
    let reach: [usize; 3] = [0, 1, 2].map(|a| {
        let r = (tol / spacing[a]).ceil();
        if r.is_finite() {
            (r as usize).min(dims[a])
        } else {
            dims[a]
        }
    });
    from.iter()
        .filter(|&&p| {
            let lo = [0, 1, 2].map(|a| p[a].saturating_sub(reach[a]));
            let hi = [0, 1, 2].map(|a| (p[a] + reach[a]).min(dims[a] - 1));
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        if to_grid[(z * dims[1] + y) * dims[2] + x]
                            && squared_distance(p, [z, y, x], spacing) <= tol2
                        {
                            return true;
                        }
                    }
                }
            }
            false
        })
        .count()
}

/// Symmetric fraction of surface voxels lying within `tolerance_mm` of the
/// other mask's surface.
pub fn nsd(pred: &Volume, gt: &Volume, class_id: u8, tolerance_mm: f64) -> Result<f64> {
    if pred.spacing() != gt.spacing() {
        return Err(Error::ShapeMismatch(format!(
            "spacing {:?} vs {:?}",
            pred.spacing(),
            gt.spacing()
        )));
    }
    if !(tolerance_mm >= 0.0) {
        return Err(Error::InvalidTarget(format!("tolerance {tolerance_mm} must be >= 0")));
    }
    let (a, b) = masks(pred, gt, class_id)?;
    Ok(nsd_masks(&a, &b, pred.dims(), pred.spacing(), tolerance_mm))
}

pub fn nsd_masks(a: &[bool], b: &[bool], dims: Dims, spacing: Spacing, tol: f64) -> f64 {
    let sa = surface_voxels(a, dims);
    let sb = surface_voxels(b, dims);
    match (sa.len(), sb.len()) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let grid = |s: &[[usize; 3]]| {
        let mut g = vec![false; a.len()];
        for p in s {
            g[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        g
    };
    let ga = grid(&sa);
    let gb = grid(&sb);
    let hits = count_within(&sa, &gb, dims, spacing, tol) + count_within(&sb, &ga, dims, spacing, tol);
    hits as f64 / (sa.len() + sb.len()) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseScore {
    pub case: String,
    /// Index `c - 1` holds class `c`.
    pub per_class_dsc: Vec<f64>,
    pub per_class_nsd: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Score every foreground class of one case.
pub fn score_case(case: &str, pred: &Volume, gt: &Volume, num_classes: usize, tolerance_mm: f64) -> Result<CaseScore> {
    let mut per_class_dsc = Vec::with_capacity(num_classes.saturating_sub(1));
    let mut per_class_nsd = Vec::with_capacity(num_classes.saturating_sub(1));
    for c in 1..num_classes {
        per_class_dsc.push(dsc(pred, gt, c as u8)?);
        per_class_nsd.push(nsd(pred, gt, c as u8, tolerance_mm)?);
    }
    Ok(CaseScore {
        case: case.to_string(),
        mean_dsc: mean(&per_class_dsc),
        mean_nsd: mean(&per_class_nsd),
        per_class_dsc,
        per_class_nsd,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub num_classes: usize,
    pub cases: Vec<CaseScore>,
}

impl EvaluationReport {
    pub fn class_mean_dsc(&self, class: usize) -> f64 {
        mean(&self.cases.iter().map(|c| c.per_class_dsc[class - 1]).collect::<Vec<_>>())
    }

    pub fn class_mean_nsd(&self, class: usize) -> f64 {
        mean(&self.cases.iter().map(|c| c.per_class_nsd[class - 1]).collect::<Vec<_>>())
    }

    pub fn mean_dsc(&self) -> f64 {
        mean(&self.cases.iter().map(|c| c.mean_dsc).collect::<Vec<_>>())
    }

    pub fn mean_nsd(&self) -> f64 {
        mean(&self.cases.iter().map(|c| c.mean_nsd).collect::<Vec<_>>())
    }

    /// Rows `case,class,dsc,nsd`, then one `mean,<class>` row per class and a
    /// final `mean,all` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,class,dsc,nsd\n");
        for case in &self.cases {
            for c in 1..self.num_classes {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    case.case,
                    c,
                    case.per_class_dsc[c - 1],
                    case.per_class_nsd[c - 1]
                );
            }
        }
        for c in 1..self.num_classes {
            let _ = writeln!(s, "mean,{},{},{}", c, self.class_mean_dsc(c), self.class_mean_nsd(c));
        }
        let _ = writeln!(s, "mean,all,{},{}", self.mean_dsc(), self.mean_nsd());
        s
    }
}

fn case_name(file: &Path) -> String {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    stem.strip_suffix("_seg").unwrap_or(stem).to_string()
}

/// Ground-truth label volumes in `gt_dir`, sorted by file name.
fn label_files(gt_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(gt_dir).map_err(|e| Error::io(gt_dir, e))? {
        let path = entry.map_err(|e| Error::io(gt_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("mvol") {
            files.push(path);
        }
    }
    files.sort();
    let mut labels = Vec::new();
    for f in files {
        if read_volume(&f)?.kind() == VolumeKind::Labels {
            labels.push(f);
        }
    }
    Ok(labels)
}

/// Score every label volume of `gt_dir` against the prediction of the same
/// case in `pred_dir` (same file name, or the case name with `.mvol`).
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, num_classes: usize, tolerance_mm: f64) -> Result<EvaluationReport> {
    let mut cases = Vec::new();
    for gt_path in label_files(gt_dir)? {
        let name = case_name(&gt_path);
        let candidates = [
            pred_dir.join(gt_path.file_name().expect("file has a name")),
            pred_dir.join(format!("{name}.mvol")),
        ];
        let pred_path = candidates
            .iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::MissingCase(format!("no prediction for {name} in {}", pred_dir.display())))?;
        let gt = read_volume(&gt_path)?;
        let pred = read_volume(pred_path)?;
        cases.push(score_case(&name, &pred, &gt, num_classes, tolerance_mm)?);
    }
    if cases.is_empty() {
        return Err(Error::MissingCase(format!("no label volumes in {}", gt_dir.display())));
    }
    Ok(EvaluationReport { num_classes, cases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_volume;
    use proptest::prelude::*;

    fn labels(dims: Dims, spacing: Spacing, v: Vec<u8>) -> Volume {
        Volume::labels(dims, spacing, v).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = labels([1, 1, 6], [1.0; 3], vec![1, 1, 1, 1, 0, 0]);
        let b = labels([1, 1, 6], [1.0; 3], vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.5);
        let c = labels([1, 1, 6], [1.0; 3], vec![0, 0, 0, 0, 1, 1]);
        let d = labels([1, 1, 6], [1.0; 3], vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(dsc(&c, &d, 1).unwrap(), 0.0);
        assert_eq!(dsc(&c, &d, 2).unwrap(), 1.0);
        let e = labels([1, 2, 3], [1.0; 3], vec![0; 6]);
        assert!(matches!(dsc(&a, &e, 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn translated_voxel() {
        let mut a = vec![0; 27];
        let mut b = vec![0; 27];
        a[13] = 1;
        b[14] = 1;
        let a = labels([3, 3, 3], [1.0; 3], a);
        let b = labels([3, 3, 3], [1.0; 3], b);
        assert_eq!(nsd(&a, &b, 1, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &b, 1, 0.5).unwrap(), 0.0);
        assert_eq!(nsd(&a, &a, 1, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn empty_conventions() {
        let z = labels([2, 2, 2], [1.0; 3], vec![0; 8]);
        let mut one = vec![0; 8];
        one[3] = 1;
        let o = labels([2, 2, 2], [1.0; 3], one);
        assert_eq!(nsd(&z, &z, 1, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&z, &o, 1, 1.0).unwrap(), 0.0);
        assert_eq!(dsc(&o, &z, 1).unwrap(), 0.0);
    }

    #[test]
    fn interior_voxel_is_not_surface() {
        let mask = vec![true; 27];
        let s = surface_voxels(&mask, [3, 3, 3]);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[1, 1, 1]));
    }

    #[test]
    fn evaluate_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let gt = dir.path().join("gt");
        let pred = dir.path().join("pred");
        fs::create_dir_all(&gt).unwrap();
        fs::create_dir_all(&pred).unwrap();
        let g = labels([1, 1, 6], [1.0; 3], vec![1, 1, 1, 1, 2, 2]);
        let p = labels([1, 1, 6], [1.0; 3], vec![0, 0, 1, 1, 1, 1]);
        write_volume(&g, gt.join("case_000_seg.mvol")).unwrap();
        write_volume(&Volume::image([1, 1, 6], [1.0; 3], vec![0.0; 6]).unwrap(), gt.join("case_000.mvol")).unwrap();
        write_volume(&p, pred.join("case_000.mvol")).unwrap();
        let r = evaluate(&pred, &gt, 3, 1.0).unwrap();
        assert_eq!(r.cases.len(), 1);
        assert_eq!(r.cases[0].case, "case_000");
        assert_eq!(r.cases[0].per_class_dsc, vec![dsc(&p, &g, 1).unwrap(), dsc(&p, &g, 2).unwrap()]);
        assert_eq!(r.cases[0].per_class_dsc[1], 0.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("case,class,dsc,nsd\n"));
        assert!(csv.lines().last().unwrap().starts_with("mean,all,"));
        assert_eq!(csv.lines().count(), 1 + 2 + 2 + 1);

        let same = evaluate(&gt, &gt, 3, 1.0).unwrap();
        assert!(same.cases.iter().all(|c| c.mean_dsc == 1.0 && c.mean_nsd == 1.0));

        fs::remove_file(pred.join("case_000.mvol")).unwrap();
        assert!(matches!(evaluate(&pred, &gt, 3, 1.0), Err(Error::MissingCase(_))));
    }

    fn mask_strategy() -> impl Strategy<Value = (Dims, Vec<bool>, Vec<bool>, Spacing)> {
        (1usize..=6, 1usize..=6, 1usize..=6).prop_flat_map(|(z, y, x)| {
            let n = z * y * x;
            (
                Just([z, y, x]),
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
                [0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0],
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_symmetric((dims, a, b, sp) in mask_strategy(), tol in 0.0f64..3.0) {
            prop_assert_eq!(dsc_masks(&a, &b), dsc_masks(&b, &a));
            prop_assert_eq!(nsd_masks(&a, &b, dims, sp, tol), nsd_masks(&b, &a, dims, sp, tol));
        }

        #[test]
        fn nsd_monotone_in_tolerance((dims, a, b, sp) in mask_strategy(), t1 in 0.0f64..3.0, dt in 0.0f64..2.0) {
            prop_assert!(nsd_masks(&a, &b, dims, sp, t1) <= nsd_masks(&a, &b, dims, sp, t1 + dt));
        }

        #[test]
        fn self_scores_are_one((dims, a, _b, sp) in mask_strategy()) {
            prop_assert_eq!(dsc_masks(&a, &a), 1.0);
            prop_assert_eq!(nsd_masks(&a, &a, dims, sp, 0.0), 1.0);
        }

        #[test]
        fn scores_in_unit_interval((dims, a, b, sp) in mask_strategy(), tol in 0.0f64..3.0) {
            let d = dsc_masks(&a, &b);
            let n = nsd_masks(&a, &b, dims, sp, tol);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((0.0..=1.0).contains(&n));
        }
    }
}
