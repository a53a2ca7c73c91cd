//! Central finite-difference audit of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::feature_io::VideoLabel;
use crate::losses::LossWeights;
use crate::model::{self, ModelConfig, ModelParams, ModelVars};
use crate::sa2;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Class,
    Align,
    Const,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Class, LossTerm::Align, LossTerm::Const, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Class => "class",
            LossTerm::Align => "align",
            LossTerm::Const => "const",
            LossTerm::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_frames: usize,
    pub max_dim: usize,
    pub max_classes: usize,
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 7,
            max_frames: 8,
            max_dim: 8,
            max_classes: 3,
            step: 1e-5,
            floor: 1e-4,
            tolerance: 1e-4,
            weights: LossWeights::default(),
            model: ModelConfig {
                top_k: 3,
                context_len: 2,
                ..ModelConfig::default()
            },
        }
    }
}

/// Worst relative error for one (instance, tensor, loss term).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub instance: usize,
    pub tensor: String,
    pub term: LossTerm,
    pub max_rel_err: f64,
    pub analytic_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.max_error() <= self.tolerance
    }

    /// Worst error per (tensor, term) across instances.
    pub fn worst_by_tensor(&self) -> Vec<(String, LossTerm, f64)> {
        let mut out: Vec<(String, LossTerm, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(n, t, _)| *n == e.tensor && *t == e.term) {
                Some(slot) => slot.2 = slot.2.max(e.max_rel_err),
                None => out.push((e.tensor.clone(), e.term, e.max_rel_err)),
            }
        }
        out
    }
}

struct Instance {
    frames: usize,
    grid: (usize, usize),
    label: VideoLabel,
    params: ModelParams,
    x_clip: Matrix,
    patches: Matrix,
}

fn make_instance(cfg: &GradCheckConfig, index: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let frames = rng.random_range(2..=cfg.max_frames.max(2));
    let dim = rng.random_range(2..=cfg.max_dim.max(2));
    let classes = rng.random_range(1..=cfg.max_classes.max(1));
    let grid = (rng.random_range(2..=3), rng.random_range(2..=3));
    let label = if index % 2 == 0 {
        VideoLabel::NORMAL
    } else {
        VideoLabel::from_category(rng.random_range(1..=classes))
    };
    let mut params = ModelParams::init(&cfg.model, dim, classes + 1, &mut rng);
    // Move every trainable tensor off its structured initial value so that
    // gains, biases and the head all carry non-trivial gradients.
    for (_, m) in params.learnable_mut() {
        let noise = Matrix::randn(m.rows(), m.cols(), 0.1, &mut rng);
        m.add_assign(&noise);
    }
    let x_clip = Matrix::randn(frames, dim, 1.0, &mut rng);
    let patches = Matrix::randn(frames * grid.0 * grid.1, dim, 1.0, &mut rng);
    Instance {
        frames,
        grid,
        label,
        params,
        x_clip,
        patches,
    }
}

/// All four loss values plus, optionally, their gradients with respect to
/// every learnable tensor followed by `x_clip` and the patch features.
fn evaluate(
    inst: &Instance,
    params: &ModelParams,
    x_clip: &Matrix,
    patches: &Matrix,
    cfg: &GradCheckConfig,
    with_grads: bool,
) -> Result<([f64; 4], Vec<[Matrix; 4]>)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params);
    let xc = g.param(x_clip.clone());
    let xp = g.param(patches.clone());
    let x_as = if cfg.model.use_sa2 {
        let mo = sa2::motion_on(&mut g, xp, inst.frames, inst.grid);
        let k = cfg.model.top_k.min(inst.grid.0 * inst.grid.1);
        sa2::aggregate_on(&mut g, xp, mo, inst.frames, inst.grid, k)?.features
    } else {
        g.constant(Matrix::zeros(x_clip.rows(), x_clip.cols()))
    };
    let nodes = model::forward_on(&mut g, params, &vars, &cfg.model, xc, x_as)?;
    let losses = model::losses_on(&mut g, &nodes, inst.label, &cfg.weights);
    let outs = [losses.class, losses.align, losses.contrast, losses.total];
    let values = outs.map(|v| g.scalar(v));
    if !with_grads {
        return Ok((values, Vec::new()));
    }
    let mut targets: Vec<(crate::autodiff::Var, (usize, usize))> = vars
        .ordered()
        .into_iter()
        .zip(params.learnable())
        .map(|(v, (_, m))| (v, m.shape()))
        .collect();
    targets.push((xc, x_clip.shape()));
    targets.push((xp, patches.shape()));
    let per_term: Vec<_> = outs.iter().map(|&o| g.backward(o)).collect();
    let grads = targets
        .iter()
        .map(|&(v, shape)| std::array::from_fn(|t| per_term[t].wrt(v, shape)))
        .collect();
    Ok((values, grads))
}

fn tensor_names(params: &ModelParams) -> Vec<String> {
    let mut names: Vec<String> = params.learnable().into_iter().map(|(n, _)| n).collect();
    names.push("input.x_clip".into());
    names.push("input.patch_feats".into());
    names
}

fn check_instance(cfg: &GradCheckConfig, index: usize) -> Result<Vec<GradCheckEntry>> {
    let inst = make_instance(cfg, index);
    let (_, analytic) = evaluate(&inst, &inst.params, &inst.x_clip, &inst.patches, cfg, true)?;
    let names = tensor_names(&inst.params);
    let n_learnable = names.len() - 2;
    let h = cfg.step;

    let mut entries = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti][0].len();
        let mut worst = [0.0f64; 4];
        for e in 0..len {
            let at = |delta: f64| -> Result<[f64; 4]> {
                let mut params = inst.params.clone();
                let mut x_clip = inst.x_clip.clone();
                let mut patches = inst.patches.clone();
                let slot: &mut Matrix = if ti < n_learnable {
                    params.learnable_mut().swap_remove(ti).1
                } else if ti == n_learnable {
                    &mut x_clip
                } else {
                    &mut patches
                };
                slot.as_mut_slice()[e] += delta;
                Ok(evaluate(&inst, &params, &x_clip, &patches, cfg, false)?.0)
            };
            let plus = at(h)?;
            let minus = at(-h)?;
            for t in 0..4 {
                let numeric = (plus[t] - minus[t]) / (2.0 * h);
                let a = analytic[ti][t].as_slice()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
                worst[t] = worst[t].max(err);
            }
        }
        for (t, term) in LossTerm::ALL.iter().enumerate() {
            entries.push(GradCheckEntry {
                instance: index,
                tensor: name.clone(),
                term: *term,
                max_rel_err: worst[t],
                analytic_max_abs: analytic[ti][t].max_abs(),
            });
        }
    }
    Ok(entries)
}

/// Compares analytic and central-difference gradients of every loss term
/// for every learnable tensor and both feature inputs on small random
/// problems.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 {
        return Err(Error::InvalidConfig("grad check needs at least one instance".into()));
    }
    if !(cfg.step > 0.0 && cfg.floor > 0.0) {
        return Err(Error::InvalidConfig("step and floor must be positive".into()));
    }
    cfg.model.validate()?;
    cfg.weights.validate()?;
    let per_instance: Vec<Vec<GradCheckEntry>> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| check_instance(cfg, i))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        entries: per_instance.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_check_passes() {
        let cfg = GradCheckConfig {
            instances: 3,
            max_frames: 5,
            max_dim: 4,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&cfg).unwrap();
        assert!(report.passed(), "max error {}", report.max_error());
        assert!(report.entries.iter().any(|e| e.tensor == "input.patch_feats"));
    }

    #[test]
    fn a_wrong_gradient_would_be_caught() {
        let mut report = GradCheckReport {
            tolerance: 1e-4,
            entries: vec![],
        };
        assert!(!report.passed());
        report.entries.push(GradCheckEntry {
            instance: 0,
            tensor: "x".into(),
            term: LossTerm::Total,
            max_rel_err: 0.5,
            analytic_max_abs: 1.0,
        });
        assert!(!report.passed());
    }
}
