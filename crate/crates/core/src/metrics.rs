//! Frame-level ROC AUC, the frame-hit TIoU and the evaluation report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{DatasetManifest, GroundTruth, Rect};
use crate::spatial_localizer::{boxes_by_frame, BoxRecord};

fn check_inputs(scores: &[f64], flags: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != flags.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} flags",
            scores.len(),
            flags.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let pos = flags.iter().filter(|&&f| f != 0).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Rank-based ROC AUC; tied scores share their average rank, so each tied
/// positive/negative pair contributes one half.
pub fn frame_auc(scores: &[f64], flags: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, flags)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| flags[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC operating points, one per distinct score plus the origin, by
/// decreasing threshold.
pub fn roc_curve(scores: &[f64], flags: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_inputs(scores, flags)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if flags[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(out)
}

/// Localized and total ground-truth anomalous frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TiouCounts {
    pub localized: usize,
    pub total: usize,
}

impl TiouCounts {
    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.localized as f64 / self.total as f64)
    }

    pub fn merge(self, other: TiouCounts) -> TiouCounts {
        TiouCounts {
            localized: self.localized + other.localized,
            total: self.total + other.total,
        }
    }
}

/// Counts ground-truth anomalous frames whose best predicted-vs-GT IoU
/// reaches `iou_threshold`.
pub fn tiou_counts(pred: &[Vec<Rect>], gt: &GroundTruth, iou_threshold: f64) -> Result<TiouCounts> {
    if pred.len() != gt.frame_flags.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.frame_flags.len()
        )));
    }
    let mut c = TiouCounts::default();
    for ((&flag, gt_boxes), boxes) in gt.frame_flags.iter().zip(&gt.boxes).zip(pred) {
        if flag == 0 {
            continue;
        }
        c.total += 1;
        let best = boxes
            .iter()
            .flat_map(|p| gt_boxes.iter().map(move |g| p.iou(g)))
            .fold(0.0, f64::max);
        if !boxes.is_empty() && !gt_boxes.is_empty() && best >= iou_threshold {
            c.localized += 1;
        }
    }
    Ok(c)
}

/// Fraction of ground-truth anomalous frames localized at
/// `iou_threshold`; `None` without any such frame.
pub fn tiou(pred: &[Vec<Rect>], gt: &GroundTruth, iou_threshold: f64) -> Result<Option<f64>> {
    Ok(tiou_counts(pred, gt, iou_threshold)?.ratio())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub video_id: String,
    pub frames: usize,
    pub anomalous_frames: usize,
    pub mean_score: f64,
    pub tiou: Option<TiouCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub tiou: Option<f64>,
    pub iou_threshold: f64,
    pub videos: usize,
    pub frames: usize,
    pub anomalous_frames: usize,
    pub per_video: Vec<VideoEval>,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn write_roc_csv(path: impl AsRef<Path>, points: &[RocPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub frame: usize,
    pub score: f64,
}

pub fn write_scores(path: impl AsRef<Path>, scores: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (id, s) in scores {
        for (frame, &score) in s.iter().enumerate() {
            w.serialize(ScoreRecord {
                video_id: id.clone(),
                frame,
                score,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a score file; frames of each video must be listed as `0..T`.
pub fn read_scores(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: ScoreRecord = row?;
        let v = out.entry(r.video_id.clone()).or_default();
        if r.frame != v.len() {
            return Err(Error::InvalidDataset(format!(
                "video {}: frame {} out of order",
                r.video_id, r.frame
            )));
        }
        v.push(r.score);
    }
    Ok(out)
}

/// Evaluates per-frame scores (and optionally boxes) against the ground
/// truth of every manifest entry.
pub fn evaluate(
    scores: &BTreeMap<String, Vec<f64>>,
    boxes: Option<&[BoxRecord]>,
    manifest: &DatasetManifest,
    iou_threshold: f64,
) -> Result<EvalReport> {
    let manifest_ids: BTreeSet<&str> = manifest.entries.iter().map(|e| e.video_id.as_str()).collect();
    let score_ids: BTreeSet<&str> = scores.keys().map(String::as_str).collect();
    if manifest_ids != score_ids {
        let missing: Vec<_> = manifest_ids.difference(&score_ids).collect();
        let extra: Vec<_> = score_ids.difference(&manifest_ids).collect();
        return Err(Error::InvalidDataset(format!(
            "video ids differ between scores and manifest (missing scores: {missing:?}, unknown: {extra:?})"
        )));
    }
    if let Some(b) = boxes {
        if let Some(r) = b.iter().find(|r| !manifest_ids.contains(r.video_id.as_str())) {
            return Err(Error::InvalidDataset(format!(
                "box record for unknown video {}",
                r.video_id
            )));
        }
    }

    let mut all_scores = Vec::new();
    let mut all_flags = Vec::new();
    let mut per_video = Vec::new();
    let mut total_tiou: Option<TiouCounts> = None;
    for entry in &manifest.entries {
        let gt = manifest.load_ground_truth(entry)?.ok_or_else(|| {
            Error::InvalidDataset(format!("video {} has no ground truth", entry.video_id))
        })?;
        let s = &scores[&entry.video_id];
        if s.len() != gt.frame_flags.len() {
            return Err(Error::DimensionMismatch(format!(
                "video {}: {} scores for {} ground-truth frames",
                entry.video_id,
                s.len(),
                gt.frame_flags.len()
            )));
        }
        let counts = match boxes {
            Some(b) => {
                let pred = boxes_by_frame(b, &entry.video_id, s.len())?;
                let c = tiou_counts(&pred, &gt, iou_threshold)?;
                total_tiou = Some(total_tiou.unwrap_or_default().merge(c));
                Some(c)
            }
            None => None,
        };
        per_video.push(VideoEval {
            video_id: entry.video_id.clone(),
            frames: s.len(),
            anomalous_frames: gt.frame_flags.iter().filter(|&&f| f != 0).count(),
            mean_score: s.iter().sum::<f64>() / s.len().max(1) as f64,
            tiou: counts,
        });
        all_scores.extend_from_slice(s);
        all_flags.extend_from_slice(&gt.frame_flags);
    }
    Ok(EvalReport {
        auc: frame_auc(&all_scores, &all_flags)?,
        tiou: total_tiou.and_then(|c| c.ratio()),
        iou_threshold,
        videos: per_video.len(),
        frames: all_scores.len(),
        anomalous_frames: all_flags.iter().filter(|&&f| f != 0).count(),
        per_video,
    })
}
