//! Synthetic datasets with planted spatio-temporal anomalies.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_stream, DatasetManifest, EmbeddingStream, GroundTruth, ManifestEntry, Rect, VideoLabel};
use crate::error::{Error, Result};
use crate::prompt_bank::QuerySet;
use crate::tensor::{norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    /// Inclusive range of video lengths.
    pub frames: (usize, usize),
    pub dim: usize,
    pub grid: (usize, usize),
    /// Number of abnormal categories `C`.
    pub num_classes: usize,
    pub num_backgrounds: usize,
    /// Inclusive range of the planted block's side length, in patches.
    pub anomaly_extent: (usize, usize),
    /// Inclusive range of the planted temporal span, in frames.
    pub anomaly_span: (usize, usize),
    /// Per-element standard deviation of the additive noise.
    pub noise_scale: f64,
    /// Lag-one autocorrelation of each patch's noise over time, in `[0, 1)`.
    pub noise_correlation: f64,
    /// Planted patches alternate between `1 ± anomaly_flicker` times their
    /// prototype on consecutive frames, which gives them motion without
    /// changing their direction.
    pub anomaly_flicker: f64,
    /// In `(0, 1]`; 1 makes anomaly prototypes orthogonal to the background.
    pub contrast: f64,
    /// Pixel side of one grid cell; the nominal frame is `grid × patch_pixels`.
    pub patch_pixels: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 60,
            test_videos: 40,
            frames: (32, 64),
            dim: 32,
            grid: (7, 7),
            num_classes: 3,
            num_backgrounds: 4,
            anomaly_extent: (2, 3),
            anomaly_span: (8, 24),
            noise_scale: 0.1,
            noise_correlation: 0.9,
            anomaly_flicker: 0.4,
            contrast: 1.0,
            patch_pixels: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.train_videos == 0 || self.test_videos == 0 {
            return bad("video counts must be positive".into());
        }
        if self.frames.0 == 0 || self.frames.0 > self.frames.1 {
            return bad(format!("invalid frame range {:?}", self.frames));
        }
        if self.dim == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("dim and grid must be positive".into());
        }
        if self.num_classes == 0 || self.num_backgrounds == 0 {
            return bad("need at least one abnormal class and one background".into());
        }
        let (e0, e1) = self.anomaly_extent;
        if e0 == 0 || e0 > e1 {
            return bad(format!("invalid anomaly extent range {:?}", self.anomaly_extent));
        }
        if e1 > self.grid.0 || e1 > self.grid.1 {
            return bad(format!(
                "anomaly extent {e1} exceeds the {}x{} grid",
                self.grid.0, self.grid.1
            ));
        }
        let (s0, s1) = self.anomaly_span;
        if s0 == 0 || s0 > s1 {
            return bad(format!("invalid anomaly span range {:?}", self.anomaly_span));
        }
        if s1 > self.frames.0 {
            return bad(format!(
                "anomaly span {s1} exceeds the shortest video length {}",
                self.frames.0
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.noise_correlation) {
            return bad("noise_correlation must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.anomaly_flicker) {
            return bad("anomaly_flicker must lie in [0, 1)".into());
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad("contrast must lie in (0, 1]".into());
        }
        if self.patch_pixels == 0 {
            return bad("patch_pixels must be positive".into());
        }
        Ok(())
    }

    pub fn frame_size(&self) -> (u32, u32) {
        (
            self.grid.0 as u32 * self.patch_pixels,
            self.grid.1 as u32 * self.patch_pixels,
        )
    }
}

/// One generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub stream: EmbeddingStream,
    pub label: VideoLabel,
    pub ground_truth: GroundTruth,
    /// Planted block as `(frame range, row range, col range)`, half-open.
    pub planted: Option<PlantedAnomaly>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedAnomaly {
    pub frames: (usize, usize),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub class_names: Vec<String>,
    pub train: Vec<SynthVideo>,
    pub test: Vec<SynthVideo>,
    /// Background prototypes as normal queries, class prototypes as
    /// abnormal queries.
    pub queries: QuerySet,
    pub background_prototypes: Matrix,
    /// Row `c-1` is the prototype of abnormal class `c`.
    pub class_prototypes: Matrix,
}

/// Paths written by [`SyntheticDataset::write`].
#[derive(Debug, Clone)]
pub struct WrittenDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub queries: PathBuf,
}

impl SyntheticDataset {
    pub fn manifest(&self, videos: &[SynthVideo], with_ground_truth: bool) -> DatasetManifest {
        let entries = videos
            .iter()
            .map(|v| ManifestEntry {
                video_id: v.stream.video_id.clone(),
                label: v.label,
                stream: PathBuf::from(format!("streams/{}.stpk", v.stream.video_id)),
                ground_truth: with_ground_truth
                    .then(|| PathBuf::from(format!("gt/{}.json", v.stream.video_id))),
            })
            .collect();
        DatasetManifest::new(self.class_names.clone(), self.config.frame_size(), entries)
    }

    pub fn train_manifest(&self) -> DatasetManifest {
        self.manifest(&self.train, false)
    }

    pub fn test_manifest(&self) -> DatasetManifest {
        self.manifest(&self.test, true)
    }

    /// Writes streams, ground truth, both manifests and the oracle queries
    /// under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<WrittenDataset> {
        let dir = dir.as_ref();
        for sub in ["streams", "gt", "queries"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for v in self.train.iter().chain(&self.test) {
            write_stream(&v.stream, dir.join(format!("streams/{}.stpk", v.stream.video_id)))?;
        }
        for v in &self.test {
            v.ground_truth
                .save(dir.join(format!("gt/{}.json", v.stream.video_id)))?;
        }
        let out = WrittenDataset {
            train_manifest: dir.join("train.json"),
            test_manifest: dir.join("test.json"),
            queries: dir.join("queries/queries.json"),
        };
        self.train_manifest().save(&out.train_manifest)?;
        self.test_manifest().save(&out.test_manifest)?;
        self.queries.save(&out.queries)?;
        Ok(out)
    }
}

/// Generates a dataset from `cfg`. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (backgrounds, classes) = prototypes(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_scale.max(0.0))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let gen_split = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<SynthVideo>> {
        let mut abnormal_seen = 0;
        (0..count)
            .map(|i| {
                let label = if i % 2 == 1 {
                    abnormal_seen += 1;
                    VideoLabel::from_category(1 + (abnormal_seen - 1) % cfg.num_classes)
                } else {
                    VideoLabel::NORMAL
                };
                generate_video(
                    cfg,
                    format!("{prefix}_{i:04}"),
                    label,
                    &backgrounds,
                    &classes,
                    &noise,
                    rng,
                )
            })
            .collect()
    };
    let train = gen_split("train", cfg.train_videos, &mut rng)?;
    let test = gen_split("test", cfg.test_videos, &mut rng)?;

    let mut class_names = vec!["normal".to_string()];
    class_names.extend((1..=cfg.num_classes).map(|c| format!("anomaly_{c}")));
    let queries = QuerySet::new(
        backgrounds.clone(),
        classes.clone(),
        (0..backgrounds.rows()).map(|i| format!("background {i}")).collect(),
        class_names[1..].to_vec(),
    )?;
    Ok(SyntheticDataset {
        config: cfg.clone(),
        class_names,
        train,
        test,
        queries,
        background_prototypes: backgrounds,
        class_prototypes: classes,
    })
}

/// Unit-norm background and class prototypes, rounded to f32 so that
/// prototypes and the stored features agree exactly.
fn prototypes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let total = cfg.num_backgrounds + cfg.num_classes;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(total);
    while basis.len() < total {
        let mut v: Vec<f64> = Matrix::randn(1, cfg.dim, 1.0, rng).into_vec();
        // Gram-Schmidt while the dimension allows an orthonormal set.
        if basis.len() < cfg.dim {
            for b in &basis {
                let p = crate::tensor::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let rounded_unit = |v: Vec<f64>| -> Vec<f64> {
        let n = norm(&v);
        v.iter().map(|x| f64::from((x / n) as f32)).collect()
    };
    let bg: Vec<Vec<f64>> = basis[..cfg.num_backgrounds]
        .iter()
        .cloned()
        .map(rounded_unit)
        .collect();
    let cls: Vec<Vec<f64>> = basis[cfg.num_backgrounds..]
        .iter()
        .map(|e| {
            let mixed: Vec<f64> = e
                .iter()
                .zip(&basis[0])
                .map(|(a, b)| cfg.contrast * a + (1.0 - cfg.contrast) * b)
                .collect();
            rounded_unit(mixed)
        })
        .collect();
    (Matrix::from_rows(&bg), Matrix::from_rows(&cls))
}

fn generate_video(
    cfg: &SynthConfig,
    video_id: String,
    label: VideoLabel,
    backgrounds: &Matrix,
    classes: &Matrix,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SynthVideo> {
    let (gh, gw) = cfg.grid;
    let d = cfg.dim;
    let frames = rng.random_range(cfg.frames.0..=cfg.frames.1);
    let layout: Vec<usize> = (0..gh * gw)
        .map(|_| rng.random_range(0..cfg.num_backgrounds))
        .collect();

    let planted = label.is_abnormal().then(|| {
        let span = rng.random_range(cfg.anomaly_span.0..=cfg.anomaly_span.1);
        let start = rng.random_range(0..=frames - span);
        let bh = rng.random_range(cfg.anomaly_extent.0..=cfg.anomaly_extent.1);
        let bw = rng.random_range(cfg.anomaly_extent.0..=cfg.anomaly_extent.1);
        let r0 = rng.random_range(0..=gh - bh);
        let c0 = rng.random_range(0..=gw - bw);
        PlantedAnomaly {
            frames: (start, start + span),
            rows: (r0, r0 + bh),
            cols: (c0, c0 + bw),
        }
    });

    let inside = |t: usize, h: usize, w: usize| {
        planted.is_some_and(|p| {
            (p.frames.0..p.frames.1).contains(&t)
                && (p.rows.0..p.rows.1).contains(&h)
                && (p.cols.0..p.cols.1).contains(&w)
        })
    };

    // AR(1) noise per patch element with stationary std `noise_scale`.
    let rho = cfg.noise_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut state: Vec<f64> = if cfg.noise_scale > 0.0 {
        (0..gh * gw * d).map(|_| noise.sample(rng)).collect()
    } else {
        vec![0.0; gh * gw * d]
    };

    let mut patch_feats = Vec::with_capacity(frames * gh * gw * d);
    let mut frame_feats = Vec::with_capacity(frames * d);
    for t in 0..frames {
        if t > 0 && cfg.noise_scale > 0.0 {
            for n in state.iter_mut() {
                *n = rho * *n + innovation * noise.sample(rng);
            }
        }
        let mut acc = vec![0.0f64; d];
        for h in 0..gh {
            for w in 0..gw {
                let (proto, amplitude) = if inside(t, h, w) {
                    let start = planted.map_or(0, |p| p.frames.0);
                    let sign = if (t - start) % 2 == 0 { 1.0 } else { -1.0 };
                    (classes.row(label.category() - 1), 1.0 + sign * cfg.anomaly_flicker)
                } else {
                    (backgrounds.row(layout[h * gw + w]), 1.0)
                };
                let base = (h * gw + w) * d;
                for (c, (a, &p)) in acc.iter_mut().zip(proto).enumerate() {
                    let v = (amplitude * p + state[base + c]) as f32;
                    patch_feats.push(v);
                    *a += f64::from(v);
                }
            }
        }
        let n = (gh * gw) as f64;
        frame_feats.extend(acc.into_iter().map(|a| (a / n) as f32));
    }

    let px = f64::from(cfg.patch_pixels);
    let ground_truth = match planted {
        None => GroundTruth::normal(frames),
        Some(p) => {
            let rect = Rect::new(
                p.cols.0 as f64 * px,
                p.rows.0 as f64 * px,
                (p.cols.1 - p.cols.0) as f64 * px,
                (p.rows.1 - p.rows.0) as f64 * px,
            );
            let mut gt = GroundTruth::normal(frames);
            for t in p.frames.0..p.frames.1 {
                gt.frame_flags[t] = 1;
                gt.boxes[t].push(rect);
            }
            gt
        }
    };

    Ok(SynthVideo {
        stream: EmbeddingStream::new(video_id, (frames, gh, gw, d), frame_feats, patch_feats)?,
        label,
        ground_truth,
        planted,
    })
}
