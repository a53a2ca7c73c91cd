//! Training-free spatial localization: patch-vs-query retrieval, two-scale
//! fusion, bilinear upsampling and box extraction.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{EmbeddingStream, Rect};
use crate::prompt_bank::QuerySet;
use crate::tensor::{norm, softmax, Matrix};

/// Sliding-window geometry in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub window: u32,
    pub stride: u32,
}

impl ScaleSpec {
    pub const FINE: ScaleSpec = ScaleSpec {
        window: 32,
        stride: 32,
    };
    pub const COARSE: ScaleSpec = ScaleSpec {
        window: 80,
        stride: 48,
    };

    /// Windows along one axis: `⌊(size − P)/S⌋ + 1`.
    pub fn cells(&self, size: u32) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("window and stride must be positive".into()));
        }
        if self.window > size {
            return Err(Error::InvalidConfig(format!(
                "window {} exceeds frame size {size}",
                self.window
            )));
        }
        Ok(((size - self.window) / self.stride + 1) as usize)
    }

    /// Grid dimensions `(H', W')` for a `(height, width)` frame.
    pub fn grid(&self, frame_size: (u32, u32)) -> Result<(usize, usize)> {
        Ok((self.cells(frame_size.0)?, self.cells(frame_size.1)?))
    }

    /// Pixel coordinate of the centre of cell `i` along one axis.
    fn centre(&self, i: usize) -> f64 {
        i as f64 * f64::from(self.stride) + f64::from(self.window) / 2.0
    }
}

/// Patch embeddings of one frame at one scale, `(H'·W')×D` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub scale: ScaleSpec,
    pub features: Matrix,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, scale: ScaleSpec, features: Matrix) -> Result<Self> {
        if features.rows() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} patch rows for a {rows}x{cols} grid",
                features.rows()
            )));
        }
        Ok(Self {
            rows,
            cols,
            scale,
            features,
        })
    }

    /// The stream's native patch grid of frame `t`, which tiles the frame
    /// at `scale`.
    pub fn from_stream(stream: &EmbeddingStream, t: usize, scale: ScaleSpec) -> Result<Self> {
        let (h, w) = stream.grid();
        Self::new(h, w, scale, stream.frame_patches(t))
    }

    /// Pools this grid into the windows of `target`. Each window is the
    /// overlap-area weighted mean of the cells it covers.
    pub fn pool_to(&self, target: ScaleSpec, frame_size: (u32, u32)) -> Result<PatchGrid> {
        let (rows, cols) = target.grid(frame_size)?;
        let d = self.features.cols();
        let src = self.scale;
        let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| (a1.min(b1) - a0.max(b0)).max(0.0);
        let mut out = Matrix::zeros(rows * cols, d);
        for i in 0..rows {
            let y0 = (i as u32 * target.stride) as f64;
            let y1 = y0 + f64::from(target.window);
            for j in 0..cols {
                let x0 = (j as u32 * target.stride) as f64;
                let x1 = x0 + f64::from(target.window);
                let mut total = 0.0;
                let row = out.row_mut(i * cols + j);
                for a in 0..self.rows {
                    let cy0 = (a as u32 * src.stride) as f64;
                    let oy = overlap(y0, y1, cy0, cy0 + f64::from(src.window));
                    if oy == 0.0 {
                        continue;
                    }
                    for b in 0..self.cols {
                        let cx0 = (b as u32 * src.stride) as f64;
                        let wgt = oy * overlap(x0, x1, cx0, cx0 + f64::from(src.window));
                        if wgt == 0.0 {
                            continue;
                        }
                        total += wgt;
                        for (o, v) in row.iter_mut().zip(self.features.row(a * self.cols + b)) {
                            *o += wgt * v;
                        }
                    }
                }
                if total > 0.0 {
                    row.iter_mut().for_each(|v| *v /= total);
                }
            }
        }
        PatchGrid::new(rows, cols, target, out)
    }
}

/// Heat values of one frame at one scale, in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialHeatMap {
    pub scale: ScaleSpec,
    /// `H'×W'`
    pub values: Matrix,
}

impl SpatialHeatMap {
    /// Bilinear interpolation between cell centres, evaluated at pixel
    /// centres of a `(height, width)` frame and clamped at the borders.
    pub fn upsample(&self, frame_size: (u32, u32)) -> Matrix {
        let (height, width) = (frame_size.0 as usize, frame_size.1 as usize);
        let axis = |n: usize, cells: usize| -> Vec<(usize, usize, f64)> {
            (0..n)
                .map(|p| {
                    let pos = p as f64 + 0.5;
                    let first = self.scale.centre(0);
                    let step = f64::from(self.scale.stride);
                    let u = ((pos - first) / step).clamp(0.0, (cells - 1) as f64);
                    let i0 = (u.floor() as usize).min(cells - 1);
                    let i1 = (i0 + 1).min(cells - 1);
                    (i0, i1, u - i0 as f64)
                })
                .collect()
        };
        let ys = axis(height, self.values.rows());
        let xs = axis(width, self.values.cols());
        let v = &self.values;
        let mut out = Matrix::zeros(height, width);
        for (y, &(r0, r1, fy)) in ys.iter().enumerate() {
            for (x, &(c0, c1, fx)) in xs.iter().enumerate() {
                let top = v[(r0, c0)] * (1.0 - fx) + v[(r0, c1)] * fx;
                let bottom = v[(r1, c0)] * (1.0 - fx) + v[(r1, c1)] * fx;
                out[(y, x)] = top * (1.0 - fy) + bottom * fy;
            }
        }
        out
    }
}

/// Unit-normalizes every row, rejecting zero rows.
fn unit_rows(m: &Matrix, what: &str) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if !(n > 0.0) {
            return Err(Error::DegenerateEmbedding(format!("{what} row {r} has zero norm")));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Per patch: softmax over all queries of `cos/τ`, summed over the
/// abnormal queries.
pub fn retrieve(patches: &PatchGrid, queries: &QuerySet, tau: f64) -> Result<SpatialHeatMap> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    if patches.features.cols() != queries.dim() {
        return Err(Error::DimensionMismatch(format!(
            "patches have D={}, queries D={}",
            patches.features.cols(),
            queries.dim()
        )));
    }
    let unit = unit_rows(&patches.features, "patch")?;
    let q = queries.stacked();
    let n_normal = queries.normal().rows();
    let sims = unit.matmul_t(&q);
    let mut values = Matrix::zeros(patches.rows, patches.cols);
    for p in 0..unit.rows() {
        let logits: Vec<f64> = sims.row(p).iter().map(|s| s / tau).collect();
        let probs = softmax(&logits);
        values.as_mut_slice()[p] = probs[n_normal..].iter().sum();
    }
    Ok(SpatialHeatMap {
        scale: patches.scale,
        values,
    })
}

/// `λ·a + (1−λ)·b` elementwise.
pub fn fuse_scales(a: &Matrix, b: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "cannot fuse {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.zip_map(b, |x, y| lambda * x + (1.0 - lambda) * y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedBox {
    pub rect: Rect,
    /// Maximum heat inside the component.
    pub confidence: f64,
}

/// Labels the 4-connected components of `mask` (row-major `rows×cols`).
/// Returns one label per pixel (0 = background) and the component count.
pub fn label_components(mask: &[bool], rows: usize, cols: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; rows * cols];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..rows * cols {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / cols, p % cols);
            let mut visit = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - cols);
            }
            if r + 1 < rows {
                visit(p + cols);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < cols {
                visit(p + 1);
            }
        }
    }
    (labels, next)
}

/// Thresholds `heat`, labels 4-connected components and returns the tight
/// rectangle of every component with at least `min_area` pixels, in label
/// order (row-major order of each component's first pixel).
pub fn extract_boxes(heat: &Matrix, threshold: f64, min_area: usize) -> Vec<DetectedBox> {
    let (rows, cols) = heat.shape();
    let mask: Vec<bool> = heat.as_slice().iter().map(|&v| v >= threshold).collect();
    let (labels, count) = label_components(&mask, rows, cols);
    // (min_r, min_c, max_r, max_c, area, max heat)
    let mut stats = vec![(usize::MAX, usize::MAX, 0, 0, 0usize, f64::NEG_INFINITY); count];
    for (p, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let s = &mut stats[l - 1];
        let (r, c) = (p / cols, p % cols);
        s.0 = s.0.min(r);
        s.1 = s.1.min(c);
        s.2 = s.2.max(r);
        s.3 = s.3.max(c);
        s.4 += 1;
        s.5 = s.5.max(heat.as_slice()[p]);
    }
    stats
        .into_iter()
        .filter(|s| s.4 >= min_area.max(1))
        .map(|(r0, c0, r1, c1, _, conf)| DetectedBox {
            rect: Rect::new(
                c0 as f64,
                r0 as f64,
                (c1 - c0 + 1) as f64,
                (r1 - r0 + 1) as f64,
            ),
            confidence: conf.clamp(0.0, 1.0),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    /// The scale the stream's patch grid tiles the frame at.
    pub fine: ScaleSpec,
    /// Second scale, pooled from the fine grid.
    pub coarse: ScaleSpec,
    /// Weight of the fine-scale map in the fusion.
    pub lambda: f64,
    pub threshold: f64,
    /// Frames whose temporal score does not exceed this are skipped.
    pub trigger: f64,
    pub tau: f64,
    /// Minimum component area in pixels; `None` means one fine cell.
    pub min_area: Option<usize>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            fine: ScaleSpec::FINE,
            coarse: ScaleSpec::COARSE,
            lambda: 0.5,
            threshold: 0.6,
            trigger: 0.5,
            tau: 0.07,
            min_area: None,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must lie in [0, 1]".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig("threshold must lie in (0, 1)".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        Ok(())
    }

    pub fn min_area_pixels(&self) -> usize {
        self.min_area
            .unwrap_or((self.fine.window * self.fine.window) as usize)
    }
}

/// Fused full-resolution heat of frame `t`.
pub fn frame_heat(
    stream: &EmbeddingStream,
    t: usize,
    queries: &QuerySet,
    cfg: &LocalizerConfig,
    frame_size: (u32, u32),
) -> Result<Matrix> {
    let fine = PatchGrid::from_stream(stream, t, cfg.fine)?;
    let expected = cfg.fine.grid(frame_size)?;
    if (fine.rows, fine.cols) != expected {
        return Err(Error::DimensionMismatch(format!(
            "stream grid {}x{} does not tile a {}x{} frame at window {} stride {}",
            fine.rows, fine.cols, frame_size.0, frame_size.1, cfg.fine.window, cfg.fine.stride
        )));
    }
    let coarse = fine.pool_to(cfg.coarse, frame_size)?;
    let fine_heat = retrieve(&fine, queries, cfg.tau)?.upsample(frame_size);
    let coarse_heat = retrieve(&coarse, queries, cfg.tau)?.upsample(frame_size);
    fuse_scales(&fine_heat, &coarse_heat, cfg.lambda)
}

/// Boxes for every frame of `stream`. With `scores`, frames at or below
/// the trigger are left empty.
pub fn localize_video(
    stream: &EmbeddingStream,
    scores: Option<&[f64]>,
    queries: &QuerySet,
    cfg: &LocalizerConfig,
    frame_size: (u32, u32),
) -> Result<Vec<Vec<DetectedBox>>> {
    cfg.validate()?;
    if let Some(s) = scores {
        if s.len() != stream.frames() {
            return Err(Error::DimensionMismatch(format!(
                "video {}: {} scores for {} frames",
                stream.video_id,
                s.len(),
                stream.frames()
            )));
        }
    }
    (0..stream.frames())
        .into_par_iter()
        .map(|t| {
            if scores.is_some_and(|s| s[t] <= cfg.trigger) {
                return Ok(Vec::new());
            }
            let heat = frame_heat(stream, t, queries, cfg, frame_size)?;
            Ok(extract_boxes(&heat, cfg.threshold, cfg.min_area_pixels()))
        })
        .collect()
}

/// Writes `heat` (clamped to `[0, 1]`) as an 8-bit grayscale PNG.
pub fn write_heatmap_png(heat: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = heat.shape();
    let pixels: Vec<u8> = heat
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer length matches dimensions");
    img.save(path.as_ref())?;
    Ok(())
}

/// One row of a box file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub video_id: String,
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl BoxRecord {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }
}

pub fn box_records(video_id: &str, boxes: &[Vec<DetectedBox>]) -> Vec<BoxRecord> {
    boxes
        .iter()
        .enumerate()
        .flat_map(|(t, frame)| {
            frame.iter().map(move |b| BoxRecord {
                video_id: video_id.to_string(),
                frame: t,
                x: b.rect.x,
                y: b.rect.y,
                w: b.rect.w,
                h: b.rect.h,
                confidence: b.confidence,
            })
        })
        .collect()
}

pub fn write_box_records(path: impl AsRef<Path>, records: &[BoxRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_box_records(path: impl AsRef<Path>) -> Result<Vec<BoxRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Groups records of `video_id` into per-frame rectangles for `frames`
/// frames.
pub fn boxes_by_frame(records: &[BoxRecord], video_id: &str, frames: usize) -> Result<Vec<Vec<Rect>>> {
    let mut out = vec![Vec::new(); frames];
    for r in records.iter().filter(|r| r.video_id == video_id) {
        let slot = out.get_mut(r.frame).ok_or_else(|| {
            Error::InvalidDataset(format!(
                "box for {video_id} frame {} beyond {frames} frames",
                r.frame
            ))
        })?;
        slot.push(r.rect());
    }
    Ok(out)
}

/// Reads a heatmap PNG back into `[0, 1]` values.
pub fn read_heatmap_png(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Matrix::from_vec(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|p| f64::from(p) / 255.0).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn queries(normal: Vec<Vec<f64>>, abnormal: Vec<Vec<f64>>) -> QuerySet {
        QuerySet::new(
            Matrix::from_rows(&normal),
            Matrix::from_rows(&abnormal),
            Vec::new(),
            Vec::new(),
        )
        .unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(ScaleSpec::FINE.grid((224, 224)).unwrap(), (7, 7));
        assert_eq!(ScaleSpec::COARSE.grid((224, 224)).unwrap(), (4, 4));
        assert!(ScaleSpec::COARSE.cells(64).is_err());
    }

    #[test]
    fn equal_similarity_gives_one_half() {
        let q = queries(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        let grid = PatchGrid::new(1, 1, ScaleSpec::FINE, Matrix::from_rows(&[vec![1.0, 1.0]])).unwrap();
        let heat = retrieve(&grid, &q, 0.07).unwrap();
        assert!((heat.values[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn abnormal_prototype_saturates() {
        let q = queries(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        let grid = PatchGrid::new(1, 1, ScaleSpec::FINE, Matrix::from_rows(&[vec![0.0, 3.0]])).unwrap();
        let heat = retrieve(&grid, &q, 0.07).unwrap();
        assert!((heat.values[(0, 0)] - 1.0).abs() < 1e-6);
        let want = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
        assert!((heat.values[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_patch_is_rejected() {
        let q = queries(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        let grid = PatchGrid::new(1, 1, ScaleSpec::FINE, Matrix::zeros(1, 2)).unwrap();
        assert!(retrieve(&grid, &q, 0.07).is_err());
    }

    #[test]
    fn fusion_examples() {
        let a = Matrix::filled(2, 2, 0.2);
        let b = Matrix::filled(2, 2, 0.6);
        assert_eq!(fuse_scales(&a, &b, 1.0).unwrap(), a);
        assert_eq!(fuse_scales(&a, &a, 0.5).unwrap(), a);
        let f = fuse_scales(&a, &b, 0.5).unwrap();
        assert!(f.as_slice().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(fuse_scales(&a, &b, 1.5).is_err());
    }

    #[test]
    fn box_extraction_examples() {
        assert!(extract_boxes(&Matrix::zeros(8, 8), 0.6, 1).is_empty());
        let mut heat = Matrix::zeros(10, 12);
        for r in 2..5 {
            for c in 3..9 {
                heat[(r, c)] = 1.0;
            }
        }
        let boxes = extract_boxes(&heat, 0.6, 1);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].rect, Rect::new(3.0, 2.0, 6.0, 3.0));
        assert_eq!(boxes[0].confidence, 1.0);
        heat[(8, 0)] = 0.7;
        assert_eq!(extract_boxes(&heat, 0.6, 1).len(), 2);
        assert_eq!(extract_boxes(&heat, 0.6, 2).len(), 1);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let mask = [true, false, false, true];
        assert_eq!(label_components(&mask, 2, 2).1, 2);
    }

    #[test]
    fn upsampling_stays_in_range_and_hits_centres() {
        let values = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.25, 0.5]]);
        let map = SpatialHeatMap {
            scale: ScaleSpec {
                window: 4,
                stride: 4,
            },
            values,
        };
        let up = map.upsample((8, 8));
        assert!(up.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        // Cell centres sit between pixels 1 and 2, and 5 and 6.
        assert!(up[(0, 0)] == 0.0 && up[(0, 7)] == 1.0);
        assert!((up[(7, 7)] - 0.5).abs() < 1e-15);
        // Pixel 2 centre (2.5) is 0.5/4 past the first centre (2.0).
        assert!((up[(0, 2)] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn pooling_averages_covered_cells() {
        // 2x2 grid of 32px cells; one 64px window covers all of it.
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
        let fine = PatchGrid::new(2, 2, ScaleSpec::FINE, f).unwrap();
        let pooled = fine
            .pool_to(
                ScaleSpec {
                    window: 64,
                    stride: 64,
                },
                (64, 64),
            )
            .unwrap();
        assert_eq!(pooled.features.as_slice(), &[1.0, 1.0]);
        let identity = fine.pool_to(ScaleSpec::FINE, (64, 64)).unwrap();
        assert_eq!(identity.features, fine.features);
    }

    #[test]
    fn box_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.csv");
        let recs = box_records(
            "v1",
            &[
                vec![],
                vec![DetectedBox {
                    rect: Rect::new(1.0, 2.0, 3.0, 4.0),
                    confidence: 0.9,
                }],
            ],
        );
        write_box_records(&path, &recs).unwrap();
        assert_eq!(read_box_records(&path).unwrap(), recs);
        let per_frame = boxes_by_frame(&recs, "v1", 2).unwrap();
        assert!(per_frame[0].is_empty() && per_frame[1].len() == 1);
    }

    #[test]
    fn heatmap_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        let heat = Matrix::from_rows(&[vec![0.0, 1.0, 0.5], vec![1.2, -0.1, 0.2]]);
        write_heatmap_png(&heat, &path).unwrap();
        let back = read_heatmap_png(&path).unwrap();
        assert_eq!(back.shape(), (2, 3));
        assert_eq!(back[(0, 1)], 1.0);
        assert_eq!(back[(1, 0)], 1.0);
        assert_eq!(back[(1, 1)], 0.0);
        assert!((back[(0, 2)] - 128.0 / 255.0).abs() < 1e-12);
    }
}
