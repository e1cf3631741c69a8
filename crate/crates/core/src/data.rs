//! Volume containers, the MVOL on-disk format and dataset manifests.
//!
//! MVOL layout (all little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `MVOL`                            |
//! | 4     | version `u32` = 1                       |
//! | 1     | dtype `u8` (0 = f32 image, 1 = u8 labels) |
//! | 3     | reserved, zero                          |
//! | 24    | dims `u64 x 3` (z, y, x)                |
//! | 24    | spacing `f64 x 3` in mm (z, y, x)       |
//! | ...   | payload, z-major                        |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Grid extent along (z, y, x).
pub type Dims = [usize; 3];
/// Voxel size in mm along (z, y, x).
pub type Spacing = [f64; 3];

pub const MVOL_MAGIC: &[u8; 4] = b"MVOL";
pub const MVOL_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 3 + 24 + 24;

pub fn num_voxels(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Flat z-major offset of `(z, y, x)`.
#[inline]
pub fn offset(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Image,
    Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Image(Vec<f32>),
    Labels(Vec<u8>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::Image(v) => v.len(),
            VolumeData::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A 3D scalar grid with physical spacing. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: VolumeData,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: VolumeData) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let expected = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidVolume(format!("dims {dims:?} overflow")))?;
        if data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "payload has {} values, dims {:?} need {}",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn image(dims: Dims, spacing: Spacing, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, VolumeData::Image(values))
    }

    pub fn labels(dims: Dims, spacing: Spacing, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, VolumeData::Labels(values))
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        match self.data {
            VolumeData::Image(_) => VolumeKind::Image,
            VolumeData::Labels(_) => VolumeKind::Labels,
        }
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Image payload, or `None` for a label volume.
    pub fn as_image(&self) -> Option<&[f32]> {
        match &self.data {
            VolumeData::Image(v) => Some(v),
            VolumeData::Labels(_) => None,
        }
    }

    pub fn as_labels(&self) -> Option<&[u8]> {
        match &self.data {
            VolumeData::Labels(v) => Some(v),
            VolumeData::Image(_) => None,
        }
    }

    pub fn image_values(&self) -> Result<&[f32]> {
        self.as_image()
            .ok_or_else(|| Error::InvalidVolume("expected an image volume".into()))
    }

    pub fn label_values(&self) -> Result<&[u8]> {
        self.as_labels()
            .ok_or_else(|| Error::InvalidVolume("expected a label volume".into()))
    }

    /// Replace the spacing, keeping the payload.
    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn into_data(self) -> VolumeData {
        self.data
    }
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MVOL_MAGIC);
    header.extend_from_slice(&MVOL_VERSION.to_le_bytes());
    header.push(match volume.kind() {
        VolumeKind::Image => 0,
        VolumeKind::Labels => 1,
    });
    header.extend_from_slice(&[0u8; 3]);
    for d in volume.dims {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in volume.spacing {
        header.extend_from_slice(&s.to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    match &volume.data {
        VolumeData::Image(values) => {
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
        VolumeData::Labels(values) => w.write_all(values).map_err(|e| Error::io(path, e))?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; HEADER_LEN];
    read_header(&mut r, &mut header, path)?;
    if &header[0..4] != MVOL_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&header[0..4])
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MVOL_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let dtype = header[8];
    let elem_size: u64 = match dtype {
        0 => 4,
        1 => 1,
        other => return Err(Error::MalformedHeader(format!("unknown dtype code {other}"))),
    };
    let mut dims = [0usize; 3];
    let mut count: u64 = 1;
    for (i, d) in dims.iter_mut().enumerate() {
        let raw = u64::from_le_bytes(header[12 + 8 * i..20 + 8 * i].try_into().unwrap());
        if raw == 0 {
            return Err(Error::MalformedHeader("zero-sized dimension".into()));
        }
        count = count
            .checked_mul(raw)
            .ok_or_else(|| Error::MalformedHeader("dims overflow".into()))?;
        *d = usize::try_from(raw).map_err(|_| Error::MalformedHeader("dims overflow".into()))?;
    }
    let mut spacing = [0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f64::from_le_bytes(header[36 + 8 * i..44 + 8 * i].try_into().unwrap());
    }
    let expected = count
        .checked_mul(elem_size)
        .ok_or_else(|| Error::MalformedHeader("payload size overflow".into()))?;

    // `take` bounds the allocation by the declared size even for hostile files.
    let mut payload = Vec::new();
    r.by_ref()
        .take(expected)
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if (payload.len() as u64) < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len() as u64,
        });
    }
    let data = if dtype == 0 {
        VolumeData::Image(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        VolumeData::Labels(payload)
    };
    Volume::new(dims, spacing, data).map_err(|e| Error::MalformedHeader(e.to_string()))
}

fn read_header(r: &mut impl Read, header: &mut [u8], path: &Path) -> Result<()> {
    let mut filled = 0;
    while filled < header.len() {
        let n = r.read(&mut header[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            // Too short to even hold the magic: report the magic as the problem.
            if filled < 4 || &header[0..4] != MVOL_MAGIC {
                return Err(Error::MalformedHeader("file shorter than header".into()));
            }
            return Err(Error::MalformedHeader(format!(
                "header truncated at {filled} of {} bytes",
                header.len()
            )));
        }
        filled += n;
    }
    Ok(())
}

/// One labeled training case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCase {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Labeled set D_l and unlabeled set D_u.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<PathBuf>,
    pub num_classes: usize,
}

impl DatasetManifest {
    /// Render the manifest text. Paths are written as given.
    pub fn to_text(&self) -> String {
        let mut out = format!("classes={}\n", self.num_classes);
        for case in &self.labeled {
            out.push_str(&format!(
                "{},{}\n",
                case.image.display(),
                case.labels.display()
            ));
        }
        for image in &self.unlabeled {
            out.push_str(&format!("{},\n", image.display()));
        }
        out
    }
}

/// Parse the manifest text without touching the filesystem. Relative paths are
/// joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines
        .next()
        .ok_or_else(|| Error::MalformedManifest("empty manifest".into()))?;
    let num_classes: usize = first
        .strip_prefix("classes=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::MalformedManifest(format!("expected classes=<N>, got {first:?}")))?;
    if num_classes < 2 {
        return Err(Error::MalformedManifest(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for line in lines {
        let (image, label) = line
            .split_once(',')
            .ok_or_else(|| Error::MalformedManifest(format!("row without comma: {line:?}")))?;
        let (image, label) = (image.trim(), label.trim());
        if image.is_empty() {
            return Err(Error::MalformedManifest(format!("row without image: {line:?}")));
        }
        if label.is_empty() {
            unlabeled.push(resolve(image));
        } else {
            labeled.push(LabeledCase {
                image: resolve(image),
                labels: resolve(label),
            });
        }
    }
    for case in &labeled {
        if unlabeled.contains(&case.image) {
            return Err(Error::MalformedManifest(format!(
                "{} listed as both labeled and unlabeled",
                case.image.display()
            )));
        }
    }
    Ok(DatasetManifest {
        labeled,
        unlabeled,
        num_classes,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    if manifest.labeled.is_empty() {
        return Err(Error::EmptyLabeledSet(path.to_path_buf()));
    }
    let referenced = manifest
        .labeled
        .iter()
        .flat_map(|c| [&c.image, &c.labels])
        .chain(manifest.unlabeled.iter());
    for p in referenced {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    log::info!(
        "manifest {}: |D_l| = {}, |D_u| = {}, classes = {}",
        path.display(),
        manifest.labeled.len(),
        manifest.unlabeled.len(),
        manifest.num_classes
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_small_image() {
        let dir = tmp();
        let path = dir.path().join("v.mvol");
        let v = Volume::image([2, 2, 2], [1.0, 1.0, 1.0], (0..8).map(|i| i as f32).collect())
            .unwrap();
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn bad_magic_is_malformed() {
        let dir = tmp();
        let path = dir.path().join("bad.mvol");
        let mut bytes = b"XVOL".to_vec();
        bytes.extend_from_slice(&[0u8; 100]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn unknown_dtype_and_version_are_malformed() {
        let dir = tmp();
        let path = dir.path().join("v.mvol");
        let v = Volume::labels([1, 1, 2], [1.0; 3], vec![0, 1]).unwrap();
        write_volume(&v, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[8] = 7;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::MalformedHeader(_))));

        let mut bad = good;
        bad[4] = 2;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn short_payload_is_truncated() {
        let dir = tmp();
        let path = dir.path().join("t.mvol");
        let v = Volume::image([4, 4, 4], [1.0; 3], vec![0.0; 64]).unwrap();
        write_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..HEADER_LEN + 32]).unwrap();
        match read_volume(&path) {
            Err(Error::TruncatedPayload { expected, found }) => {
                assert_eq!(expected, 256);
                assert_eq!(found, 32);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_labels_are_still_writable() {
        let dir = tmp();
        let path = dir.path().join("l.mvol");
        let v = Volume::labels([1, 1, 3], [1.0; 3], vec![0, 2, 255]).unwrap();
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            Volume::image([0, 2, 2], [1.0; 3], vec![]),
            Err(Error::InvalidVolume(_))
        ));
        assert!(matches!(
            Volume::image([1, 1, 1], [0.0, 1.0, 1.0], vec![1.0]),
            Err(Error::InvalidVolume(_))
        ));
    }

    fn write_dummy(dir: &Path, name: &str) {
        let v = Volume::image([1, 1, 1], [1.0; 3], vec![0.0]).unwrap();
        write_volume(&v, dir.join(name)).unwrap();
    }

    #[test]
    fn manifest_counts() {
        let dir = tmp();
        for n in ["a", "a_seg", "b", "b_seg", "u1", "u2", "u3"] {
            write_dummy(dir.path(), &format!("{n}.mvol"));
        }
        let text = "classes=4\na.mvol,a_seg.mvol\nb.mvol,b_seg.mvol\nu1.mvol,\nu2.mvol,\nu3.mvol,\n";
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.labeled.len(), 2);
        assert_eq!(m.unlabeled.len(), 3);
        assert_eq!(m.num_classes, 4);
    }

    #[test]
    fn manifest_without_labeled_rows() {
        let dir = tmp();
        write_dummy(dir.path(), "u.mvol");
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, "classes=2\nu.mvol,\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::EmptyLabeledSet(_))));
    }

    #[test]
    fn manifest_missing_file() {
        let dir = tmp();
        write_dummy(dir.path(), "a.mvol");
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, "classes=2\na.mvol,nope.mvol\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::MissingFile(_))));
    }

    #[test]
    fn manifest_rejects_overlap_between_sets() {
        let err = parse_manifest("classes=2\na,b\na,\n", Path::new("/x")).unwrap_err();
        assert!(matches!(err, Error::MalformedManifest(_)));
    }
}
