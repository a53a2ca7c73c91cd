//! On-disk data model: embedding streams, labels, ground truth and dataset
//! manifests, plus the synthetic planted-anomaly generator.
//!
//! Streams use the `STPK` binary layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "STPK"
//! 4       2     format version (u16 LE, currently 1)
//! 6       4     T (u32 LE)
//! 10      4     H (u32 LE)
//! 14      4     W (u32 LE)
//! 18      4     D (u32 LE)
//! 22      ...   frame features, T·D f32 LE, row-major
//!               patch features, T·H·W·D f32 LE, row-major [t][h][w][d]
//! ```
//!
//! Standalone matrices (query and prompt embeddings) use the `STPM`
//! variant of the same convention: magic, version, rows, cols, then
//! `rows·cols` f32 LE values.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};

pub const STREAM_MAGIC: &[u8; 4] = b"STPK";
pub const MATRIX_MAGIC: &[u8; 4] = b"STPM";
pub const FORMAT_VERSION: u16 = 1;
const STREAM_HEADER_LEN: usize = 22;
const MATRIX_HEADER_LEN: usize = 14;

/// Frame-level and patch-level embeddings of one (pre-sampled) video.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStream {
    pub video_id: String,
    frames: usize,
    height: usize,
    width: usize,
    dim: usize,
    frame_feats: Vec<f32>,
    patch_feats: Vec<f32>,
}

impl EmbeddingStream {
    /// Validates shapes and finiteness.
    pub fn new(
        video_id: impl Into<String>,
        (frames, height, width, dim): (usize, usize, usize, usize),
        frame_feats: Vec<f32>,
        patch_feats: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || dim == 0 {
            return Err(Error::DimensionMismatch(format!(
                "stream dims must be positive, got T={frames} H={height} W={width} D={dim}"
            )));
        }
        if frame_feats.len() != frames * dim {
            return Err(Error::DimensionMismatch(format!(
                "frame features hold {} values, expected T·D = {}",
                frame_feats.len(),
                frames * dim
            )));
        }
        if patch_feats.len() != frames * height * width * dim {
            return Err(Error::DimensionMismatch(format!(
                "patch features hold {} values, expected T·H·W·D = {}",
                patch_feats.len(),
                frames * height * width * dim
            )));
        }
        check_finite(frame_feats.iter().chain(&patch_feats))?;
        Ok(Self {
            video_id: video_id.into(),
            frames,
            height,
            width,
            dim,
            frame_feats,
            patch_feats,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_feats(&self) -> &[f32] {
        &self.frame_feats
    }

    pub fn patch_feats(&self) -> &[f32] {
        &self.patch_feats
    }

    pub fn patch(&self, t: usize, h: usize, w: usize) -> &[f32] {
        let off = ((t * self.height + h) * self.width + w) * self.dim;
        &self.patch_feats[off..off + self.dim]
    }

    /// Frame features as a `T×D` matrix.
    pub fn frame_matrix(&self) -> Matrix {
        to_matrix(self.frames, self.dim, &self.frame_feats)
    }

    /// Patch features as a `(T·H·W)×D` matrix, rows ordered `[t][h][w]`.
    pub fn patch_matrix(&self) -> Matrix {
        to_matrix(self.frames * self.height * self.width, self.dim, &self.patch_feats)
    }

    /// One frame's patch grid as an `(H·W)×D` matrix.
    pub fn frame_patches(&self, t: usize) -> Matrix {
        let n = self.height * self.width * self.dim;
        to_matrix(
            self.height * self.width,
            self.dim,
            &self.patch_feats[t * n..(t + 1) * n],
        )
    }

    /// Keeps only the listed frames, in order.
    pub fn select_frames(&self, idx: &[usize]) -> EmbeddingStream {
        let n = self.height * self.width * self.dim;
        let mut frame_feats = Vec::with_capacity(idx.len() * self.dim);
        let mut patch_feats = Vec::with_capacity(idx.len() * n);
        for &t in idx {
            frame_feats.extend_from_slice(&self.frame_feats[t * self.dim..(t + 1) * self.dim]);
            patch_feats.extend_from_slice(&self.patch_feats[t * n..(t + 1) * n]);
        }
        EmbeddingStream {
            video_id: self.video_id.clone(),
            frames: idx.len(),
            height: self.height,
            width: self.width,
            dim: self.dim,
            frame_feats,
            patch_feats,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            STREAM_HEADER_LEN + 4 * (self.frame_feats.len() + self.patch_feats.len()),
        );
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for d in [self.frames, self.height, self.width, self.dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.frame_feats.iter().chain(&self.patch_feats) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(video_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STREAM_HEADER_LEN {
            return Err(Error::MalformedHeader(format!(
                "stream is {} bytes, shorter than the {STREAM_HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != STREAM_MAGIC {
            return Err(Error::MalformedHeader("bad magic, expected \"STPK\"".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported stream version {version}"
            )));
        }
        let dims: Vec<usize> = (0..4).map(|i| read_u32(bytes, 6 + 4 * i) as usize).collect();
        let (t, h, w, d) = (dims[0], dims[1], dims[2], dims[3]);
        if t == 0 || h == 0 || w == 0 || d == 0 {
            return Err(Error::MalformedHeader(format!(
                "zero dimension in header: T={t} H={h} W={w} D={d}"
            )));
        }
        let n_frame = t * d;
        let n_patch = t * h * w * d;
        let expected = 4 * (n_frame + n_patch);
        let payload = &bytes[STREAM_HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::PayloadSizeMismatch {
                expected,
                found: payload.len(),
            });
        }
        let values = decode_f32s(payload)?;
        let patch_feats = values[n_frame..].to_vec();
        let mut frame_feats = values;
        frame_feats.truncate(n_frame);
        EmbeddingStream::new(video_id, (t, h, w, d), frame_feats, patch_feats)
    }
}

/// Writes a stream in the `STPK` format.
pub fn write_stream(stream: &EmbeddingStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, stream.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an `STPK` stream. The video id is taken from the file stem; the
/// manifest loader overrides it with the entry's id.
pub fn read_stream(path: impl AsRef<Path>) -> Result<EmbeddingStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingStream::from_bytes(id, &bytes)
}

pub fn matrix_to_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(Error::MalformedHeader(
            "matrix file shorter than its header".into(),
        ));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::MalformedHeader("bad magic, expected \"STPM\"".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported matrix version {version}"
        )));
    }
    let rows = read_u32(bytes, 6) as usize;
    let cols = read_u32(bytes, 10) as usize;
    let payload = &bytes[MATRIX_HEADER_LEN..];
    if payload.len() != 4 * rows * cols {
        return Err(Error::PayloadSizeMismatch {
            expected: 4 * rows * cols,
            found: payload.len(),
        });
    }
    let values = decode_f32s(payload)?;
    Ok(Matrix::from_vec(
        rows,
        cols,
        values.into_iter().map(f64::from).collect(),
    ))
}

/// Writes a matrix in the `STPM` format (values stored as f32).
pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix_to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    matrix_from_bytes(&bytes)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn decode_f32s(payload: &[u8]) -> Result<Vec<f32>> {
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(values.iter())?;
    Ok(values)
}

fn check_finite<'a>(values: impl Iterator<Item = &'a f32>) -> Result<()> {
    for (i, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
    }
    Ok(())
}

fn to_matrix(rows: usize, cols: usize, values: &[f32]) -> Matrix {
    Matrix::from_vec(rows, cols, values.iter().map(|&v| f64::from(v)).collect())
}

/// Video-level labels. Category 0 is the normal class; the binary label is
/// derived from the category so the two can never disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabel", into = "RawLabel")]
pub struct VideoLabel {
    category: usize,
}

#[derive(Serialize, Deserialize)]
struct RawLabel {
    y_b: u8,
    y_c: usize,
}

impl TryFrom<RawLabel> for VideoLabel {
    type Error = Error;

    fn try_from(raw: RawLabel) -> Result<Self> {
        VideoLabel::from_parts(raw.y_b, raw.y_c)
    }
}

impl From<VideoLabel> for RawLabel {
    fn from(l: VideoLabel) -> Self {
        RawLabel {
            y_b: l.binary(),
            y_c: l.category,
        }
    }
}

impl VideoLabel {
    pub const NORMAL: VideoLabel = VideoLabel { category: 0 };

    pub fn from_category(category: usize) -> Self {
        Self { category }
    }

    /// Checks `y_b = 0 ⟺ y_c = 0`.
    pub fn from_parts(binary: u8, category: usize) -> Result<Self> {
        match (binary, category) {
            (0, 0) => Ok(Self::NORMAL),
            (1, c) if c > 0 => Ok(Self { category: c }),
            (b, c) => Err(Error::InvalidLabel(format!(
                "y_b={b} inconsistent with y_c={c}"
            ))),
        }
    }

    pub fn binary(self) -> u8 {
        u8::from(self.category > 0)
    }

    pub fn category(self) -> usize {
        self.category
    }

    pub fn is_abnormal(self) -> bool {
        self.category > 0
    }

    /// One-hot encoding over the `1+C` classes.
    pub fn one_hot(self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        v[self.category] = 1.0;
        v
    }
}

/// Axis-aligned rectangle in pixel coordinates: `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let ix = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let iy = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn within(&self, (height, width): (u32, u32)) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w >= 0.0
            && self.h >= 0.0
            && self.x + self.w <= f64::from(width)
            && self.y + self.h <= f64::from(height)
    }
}

/// Frame flags and per-frame boxes of one test video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame_flags: Vec<u8>,
    pub boxes: Vec<Vec<Rect>>,
}

impl GroundTruth {
    pub fn normal(frames: usize) -> Self {
        Self {
            frame_flags: vec![0; frames],
            boxes: vec![Vec::new(); frames],
        }
    }

    pub fn validate(&self, frame_size: (u32, u32)) -> Result<()> {
        if self.frame_flags.len() != self.boxes.len() {
            return Err(Error::InvalidDataset(format!(
                "ground truth has {} flags but {} box lists",
                self.frame_flags.len(),
                self.boxes.len()
            )));
        }
        for (t, (&flag, boxes)) in self.frame_flags.iter().zip(&self.boxes).enumerate() {
            if flag > 1 {
                return Err(Error::InvalidDataset(format!("frame {t}: flag {flag} not binary")));
            }
            if flag == 0 && !boxes.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "frame {t}: boxes present on a normal frame"
                )));
            }
            if let Some(b) = boxes.iter().find(|b| !b.within(frame_size)) {
                return Err(Error::InvalidDataset(format!(
                    "frame {t}: box {b:?} outside the {}x{} frame",
                    frame_size.0, frame_size.1
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: VideoLabel,
    pub stream: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

/// A list of videos with labels and file locations. Relative paths are
/// resolved against the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `1+C` names; index 0 is the normal class.
    pub class_names: Vec<String>,
    /// `(height, width)` in pixels.
    pub nominal_frame_size: (u32, u32),
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        class_names: Vec<String>,
        nominal_frame_size: (u32, u32),
        entries: Vec<ManifestEntry>,
    ) -> Self {
        Self {
            class_names,
            nominal_frame_size,
            entries,
            base_dir: PathBuf::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::InvalidDataset(
                "class_names needs the normal class plus at least one abnormal class".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.video_id) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate video id {}",
                    e.video_id
                )));
            }
            if e.label.category() >= self.class_names.len() {
                return Err(Error::InvalidLabel(format!(
                    "video {} has category {} but only {} classes exist",
                    e.video_id,
                    e.label.category(),
                    self.class_names.len()
                )));
            }
        }
        Ok(())
    }

    /// Loads and validates a manifest, checking that every referenced file
    /// exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let manifest =
            manifest.with_base_dir(path.parent().map(Path::to_path_buf).unwrap_or_default());
        manifest.validate()?;
        for e in &manifest.entries {
            let files = std::iter::once(&e.stream).chain(e.ground_truth.as_ref());
            for f in files {
                let resolved = manifest.resolve(f);
                if !resolved.is_file() {
                    return Err(Error::InvalidDataset(format!(
                        "video {}: missing file {}",
                        e.video_id,
                        resolved.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_stream(&self, entry: &ManifestEntry) -> Result<EmbeddingStream> {
        let mut s = read_stream(self.resolve(&entry.stream))?;
        s.video_id = entry.video_id.clone();
        Ok(s)
    }

    pub fn load_ground_truth(&self, entry: &ManifestEntry) -> Result<Option<GroundTruth>> {
        match &entry.ground_truth {
            None => Ok(None),
            Some(p) => {
                let gt = GroundTruth::load(self.resolve(p))?;
                gt.validate(self.nominal_frame_size)?;
                Ok(Some(gt))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EmbeddingStream {
        EmbeddingStream::new(
            "v",
            (2, 1, 1, 3),
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![-1.0, 0.5, 0.25, 7.0, 8.0, 9.0],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_small_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.stpk");
        let s = tiny();
        write_stream(&s, &p).unwrap();
        assert_eq!(read_stream(&p).unwrap(), s);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = tiny().to_bytes();
        assert_eq!(&bytes[..4], b"STPK");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &3u32.to_le_bytes());
        assert_eq!(&bytes[22..26], &0.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22 + 4 * 12);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let s = EmbeddingStream::new("v", (5, 1, 1, 1), vec![0.0; 5], vec![0.0; 5]).unwrap();
        let mut bytes = s.to_bytes();
        // Drop one frame's worth of values (frame + patch) so T=4 data remains.
        bytes.truncate(bytes.len() - 8);
        let err = EmbeddingStream::from_bytes("v", &bytes).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn nan_is_rejected_with_index() {
        let s = tiny();
        let mut bytes = s.to_bytes();
        bytes[22 + 4 * 7..22 + 4 * 8].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = EmbeddingStream::from_bytes("v", &bytes).unwrap_err();
        assert!(
            err.to_string().contains("non-finite value at index 7"),
            "{err}"
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = tiny().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingStream::from_bytes("v", &bytes),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn label_consistency() {
        assert!(VideoLabel::from_parts(0, 0).is_ok());
        assert!(VideoLabel::from_parts(1, 2).is_ok());
        assert!(VideoLabel::from_parts(1, 0).is_err());
        assert!(VideoLabel::from_parts(0, 3).is_err());
        let parsed: Result<VideoLabel, _> = serde_json::from_str(r#"{"y_b":0,"y_c":2}"#);
        assert!(parsed.is_err());
        let l: VideoLabel = serde_json::from_str(r#"{"y_b":1,"y_c":2}"#).unwrap();
        assert_eq!(l.one_hot(4), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn ground_truth_rejects_boxes_on_normal_frames() {
        let gt = GroundTruth {
            frame_flags: vec![0, 1],
            boxes: vec![vec![Rect::new(0.0, 0.0, 4.0, 4.0)], vec![]],
        };
        assert!(gt.validate((32, 32)).is_err());
        let gt = GroundTruth {
            frame_flags: vec![0, 1],
            boxes: vec![vec![], vec![Rect::new(30.0, 0.0, 4.0, 4.0)]],
        };
        assert!(gt.validate((32, 32)).is_err());
    }

    #[test]
    fn rect_iou() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        let b = Rect::new(5.0, 0.0, 10.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_file_round_trip() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5], vec![0.125, 3.0]]);
        assert_eq!(matrix_from_bytes(&matrix_to_bytes(&m)).unwrap(), m);
    }
}
