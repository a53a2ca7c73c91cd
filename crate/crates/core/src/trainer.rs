//! Batched forward/backward, the AdamW loop, checkpoints and the
//! finite-difference gradient audit.

use std::fs;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::feature_io::DatasetManifest;
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{self, Model, ModelConfig, ModelParams, ModelVars, VideoInput};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Longer videos are uniformly subsampled to this many frames.
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            max_len: 256,
            epochs: 200,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return bad("batch_size and max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Loss and gradients of a batch, gradients in [`ModelParams::learnable`]
/// order.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: LossBreakdown,
    pub grads: Vec<Matrix>,
}

fn video_gradients(
    input: &VideoInput,
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params);
    let x_clip = g.constant(input.x_clip.clone());
    let x_as = g.constant(input.x_as.clone());
    let nodes = model::forward_on(&mut g, params, &vars, cfg, x_clip, x_as)?;
    let losses = model::losses_on(&mut g, &nodes, input.label, weights);
    let breakdown = losses.breakdown(&g);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            video_id: input.video_id.clone(),
            detail: format!("{breakdown:?}"),
        });
    }
    let grads = g.backward(losses.total);
    let out = vars
        .ordered()
        .into_iter()
        .zip(params.learnable())
        .map(|(v, (_, m))| grads.wrt(v, m.shape()))
        .collect();
    Ok((breakdown, out))
}

fn pairwise_sum(mut items: Vec<(LossBreakdown, Vec<Matrix>)>) -> (LossBreakdown, Vec<Matrix>) {
    if items.len() == 1 {
        return items.pop().expect("non-empty");
    }
    let right = items.split_off(items.len() / 2);
    let (mut la, mut ga) = pairwise_sum(items);
    let (lb, gb) = pairwise_sum(right);
    la.l_class += lb.l_class;
    la.l_align += lb.l_align;
    la.l_const += lb.l_const;
    la.total += lb.total;
    for (a, b) in ga.iter_mut().zip(&gb) {
        a.add_assign(b);
    }
    (la, ga)
}

/// Mean loss and gradient over `batch`.
///
/// Videos are processed in video-id order and reduced with a fixed
/// pairwise tree, so the result does not depend on the order of `batch`.
pub fn forward_backward(
    batch: &[&VideoInput],
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    let mut ordered: Vec<&VideoInput> = batch.to_vec();
    ordered.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let per_video: Vec<(LossBreakdown, Vec<Matrix>)> = ordered
        .par_iter()
        .map(|v| video_gradients(v, params, cfg, weights))
        .collect::<Result<_>>()?;
    let n = per_video.len() as f64;
    let (sum_loss, sum_grads) = pairwise_sum(per_video);
    Ok(BatchGradients {
        loss: LossBreakdown {
            l_class: sum_loss.l_class / n,
            l_align: sum_loss.l_align / n,
            l_const: sum_loss.l_const / n,
            total: sum_loss.total / n,
        },
        grads: sum_grads.into_iter().map(|g| g.scale(1.0 / n)).collect(),
    })
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .learnable()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params
            .learnable_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Serializable position of the trainer's random stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub epoch: usize,
    pub rng: RngState,
    pub params: ModelParams,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    class_names: Vec<String>,
    epoch: usize,
    rng: RngState,
    sigma: f64,
    tensors: Vec<(String, usize, usize)>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    fn all_tensors(params: &ModelParams) -> Vec<(String, &Matrix)> {
        let mut t = params.learnable();
        t.extend(params.frozen());
        t
    }

    /// `STCK`, version (u16 LE), header length (u64 LE), JSON header, then
    /// every tensor as f64 LE in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = Self::all_tensors(&self.params);
        let header = CheckpointHeader {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            sigma: self.params.adapter.sigma,
            tensors: tensors
                .iter()
                .map(|(n, m)| (n.clone(), m.rows(), m.cols()))
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.into());
        if bytes.len() < 14 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let header_end = 14usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[14..header_end])?;
        let dim = header
            .tensors
            .iter()
            .find(|(n, _, _)| n == "head.weight")
            .map(|t| t.1)
            .ok_or_else(|| bad("missing head.weight"))?;
        let mut skeleton_rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(
            &header.config.model,
            dim,
            header.class_names.len(),
            &mut skeleton_rng,
        );
        params.adapter.sigma = header.sigma;

        let mut offset = header_end;
        let mut payload = std::collections::HashMap::new();
        for (name, rows, cols) in &header.tensors {
            let n = rows * cols;
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated tensor payload"));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload.insert(name.clone(), Matrix::from_vec(*rows, *cols, data));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        let mut fill = |name: &str, slot: &mut Matrix| -> Result<()> {
            let m = payload
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if m.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
            Ok(())
        };
        for (name, slot) in params.learnable_mut() {
            fill(&name, slot)?;
        }
        fill("prompt.class_tokens", &mut params.prompt.class_tokens)?;
        fill(
            "prompt.encoder.context_weight",
            &mut params.prompt.encoder.context_weight,
        )?;
        fill("prompt.encoder.class_weight", &mut params.prompt.encoder.class_weight)?;
        fill("prompt.encoder.bias", &mut params.prompt.encoder.bias)?;
        Ok(Self {
            config: header.config,
            class_names: header.class_names,
            epoch: header.epoch,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_class: f64,
    pub l_align: f64,
    pub l_const: f64,
    pub total: f64,
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Frame indices that uniformly subsample `frames` down to `max_len`.
pub fn subsample_indices(frames: usize, max_len: usize) -> Vec<usize> {
    if frames <= max_len {
        (0..frames).collect()
    } else {
        (0..max_len).map(|i| i * frames / max_len).collect()
    }
}

/// Reads every video of `manifest`, subsampling to `cfg.max_len`.
pub fn prepare_inputs(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Vec<VideoInput>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let stream = manifest.load_stream(e)?;
            let idx = subsample_indices(stream.frames(), cfg.max_len);
            let stream = if idx.len() < stream.frames() {
                stream.select_frames(&idx)
            } else {
                stream
            };
            VideoInput::prepare(&stream, e.label, &cfg.model)
        })
        .collect()
}

pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let inputs = prepare_inputs(manifest, cfg)?;
    train_inputs(&inputs, &manifest.class_names, cfg, |_, _, _| ControlFlow::Continue(()))
}

/// Trains on prepared inputs. `on_epoch` sees each finished epoch and may
/// stop training early.
pub fn train_inputs(
    inputs: &[VideoInput],
    class_names: &[String],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ModelParams, &EpochLog) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidDataset("training manifest is empty".into()));
    }
    if inputs.iter().all(|v| !v.label.is_abnormal()) {
        return Err(Error::InvalidDataset("training set has no abnormal video".into()));
    }
    if inputs.iter().all(|v| v.label.is_abnormal()) {
        return Err(Error::InvalidDataset("training set has no normal video".into()));
    }
    let dim = inputs[0].x_clip.cols();
    if let Some(v) = inputs.iter().find(|v| v.x_clip.cols() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "video {} has D={}, expected {dim}",
            v.video_id,
            v.x_clip.cols()
        )));
    }
    if let Some(v) = inputs.iter().find(|v| v.label.category() >= class_names.len()) {
        return Err(Error::InvalidLabel(format!(
            "video {} has category {} with only {} classes",
            v.video_id,
            v.label.category(),
            class_names.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&cfg.model, dim, class_names.len(), &mut rng);
    let mut opt = AdamW::new(cfg, &params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&VideoInput> = chunk.iter().map(|&i| &inputs[i]).collect();
            let out = forward_backward(&batch, &params, &cfg.model, &cfg.loss)?;
            let w = chunk.len() as f64;
            acc.l_class += out.loss.l_class * w;
            acc.l_align += out.loss.l_align * w;
            acc.l_const += out.loss.l_const * w;
            acc.total += out.loss.total * w;
            opt.update(&mut params, &out.grads);
        }
        let n = inputs.len() as f64;
        let entry = EpochLog {
            epoch,
            l_class: acc.l_class / n,
            l_align: acc.l_align / n,
            l_const: acc.l_const / n,
            total: acc.total / n,
        };
        log::info!(
            "epoch {epoch}: total {:.6} (class {:.6}, align {:.6}, const {:.6})",
            entry.total,
            entry.l_class,
            entry.l_align,
            entry.l_const
        );
        log.push(entry);
        epochs_run = epoch;
        if on_epoch(epoch, &params, &entry).is_break() {
            break;
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            class_names: class_names.to_vec(),
            epoch: epochs_run,
            rng: RngState::capture(&rng),
            params,
        },
        log,
    })
}

mod grad_check;
pub use grad_check::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport, LossTerm};
