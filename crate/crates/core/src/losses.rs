//! Training objectives: top-k MIL classification loss, MIL-Align loss, the
//! prompt dispersion loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{norm, top_k_indices, Matrix};

/// Clamp applied to the pooled video probability before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 2.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidConfig("alpha and beta must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `k = ⌊T/16⌋ + 1`.
pub fn topk_count(frames: usize) -> usize {
    frames / 16 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub l_align: f64,
    pub l_const: f64,
    pub total: f64,
}

fn effective_k(k: usize, frames: usize) -> usize {
    if k > frames {
        log::warn!("k={k} exceeds video length {frames}; using k={frames}");
        frames
    } else {
        k.max(1)
    }
}

/// Records the top-k binary cross-entropy on `g`. `confidence` is `T×1`.
pub fn class_loss_on(g: &mut Graph, confidence: Var, binary_label: u8, k: usize) -> Var {
    let values = g.value(confidence).as_slice().to_vec();
    let k = effective_k(k, values.len());
    let idx = top_k_indices(&values, k);
    let top = g.gather(confidence, idx, k, 1);
    let p = g.mean(top);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let target = if binary_label == 1 {
        p
    } else {
        let neg = g.scale(p, -1.0);
        g.add_scalar(neg, 1.0)
    };
    let log = g.log(target);
    g.scale(log, -1.0)
}

/// Records the MIL-Align cross-entropy on `g`. `alignment` is `T×(1+C)`.
pub fn align_loss_on(g: &mut Graph, alignment: Var, category: usize, k: usize, tau: f64) -> Var {
    let m = g.value(alignment).clone();
    let (frames, classes) = m.shape();
    let k = effective_k(k, frames);
    let mut flat = vec![0; k * classes];
    for c in 0..classes {
        for (i, r) in top_k_indices(&m.column(c), k).into_iter().enumerate() {
            flat[i * classes + c] = r * classes + c;
        }
    }
    let top = g.gather(alignment, flat, k, classes);
    let pooled = g.mean_rows(top);
    let logits = g.scale(pooled, 1.0 / tau);
    let log_p = g.log_softmax(logits);
    let picked = g.gather(log_p, vec![category], 1, 1);
    g.scale(picked, -1.0)
}

/// Records `Σ_{i≠j} max(0, cos(P_i, P_j))` on `g`.
pub fn contrastive_loss_on(g: &mut Graph, prompts: Var) -> Var {
    let n = g.value(prompts).rows();
    let unit = g.row_normalize(prompts);
    let cos = g.matmul_t(unit, unit);
    let pos = g.relu(cos);
    let mask = g.constant(Matrix::filled(n, n, 1.0).zip_map(&Matrix::identity(n), |a, b| a - b));
    let off = g.mul(pos, mask);
    g.sum(off)
}

/// Records `l_class + α·l_align + β·l_const` on `g`.
pub fn total_on(g: &mut Graph, class: Var, align: Var, contrast: Var, w: &LossWeights) -> Var {
    let a = g.scale(align, w.alpha);
    let b = g.scale(contrast, w.beta);
    let s = g.add(class, a);
    g.add(s, b)
}

pub fn topk_class_loss(confidence: &[f64], binary_label: u8, k: usize) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Matrix::from_vec(confidence.len(), 1, confidence.to_vec()));
    let l = class_loss_on(&mut g, a, binary_label, k);
    g.scalar(l)
}

pub fn mil_align_loss(alignment: &Matrix, category: usize, k: usize, tau: f64) -> Result<f64> {
    if category >= alignment.cols() {
        return Err(Error::InvalidLabel(format!(
            "category {category} out of range for {} classes",
            alignment.cols()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let mut g = Graph::new();
    let m = g.constant(alignment.clone());
    let l = align_loss_on(&mut g, m, category, k, tau);
    Ok(g.scalar(l))
}

pub fn prompt_contrastive_loss(prompts: &Matrix) -> Result<f64> {
    for r in 0..prompts.rows() {
        if !(norm(prompts.row(r)) > 0.0) {
            return Err(Error::DegenerateEmbedding(format!("prompt row {r} has zero norm")));
        }
    }
    let mut g = Graph::new();
    let p = g.constant(prompts.clone());
    let l = contrastive_loss_on(&mut g, p);
    Ok(g.scalar(l))
}

pub fn total_loss(l_class: f64, l_align: f64, l_const: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_class,
        l_align,
        l_const,
        total: l_class + w.alpha * l_align + w.beta * l_const,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_rule() {
        assert_eq!(topk_count(4), 1);
        assert_eq!(topk_count(15), 1);
        assert_eq!(topk_count(16), 2);
        assert_eq!(topk_count(64), 5);
    }

    #[test]
    fn class_loss_hand_example() {
        let a = [0.9, 0.1, 0.2, 0.8];
        let l = topk_class_loss(&a, 1, topk_count(4));
        assert!((l - 0.10536).abs() < 1e-5);
        assert!((l + 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn class_loss_constant_half() {
        for k in 1..=5 {
            let l = topk_class_loss(&[0.5; 5], 0, k);
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn class_loss_is_clamped_at_the_minimum() {
        let l = topk_class_loss(&[1.0, 1.0], 1, 1);
        assert!(l >= 0.0 && l < 1e-6);
        let l = topk_class_loss(&[0.0, 0.0], 0, 2);
        assert!(l >= 0.0 && l < 1e-6);
        assert!(topk_class_loss(&[0.0], 1, 1).is_finite());
    }

    #[test]
    fn oversized_k_degrades_to_full_mean() {
        let a = [0.2, 0.4, 0.9];
        assert_eq!(topk_class_loss(&a, 1, 10), topk_class_loss(&a, 1, 3));
    }

    #[test]
    fn full_k_equals_bce_of_mean() {
        let a = [0.2, 0.4, 0.9, 0.35];
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        assert!((topk_class_loss(&a, 1, 4) + mean.ln()).abs() < 1e-15);
        assert!((topk_class_loss(&a, 0, 4) + (1.0 - mean).ln()).abs() < 1e-15);
    }

    #[test]
    fn align_loss_examples() {
        let sym = Matrix::from_rows(&[vec![0.2, 0.2], vec![0.2, 0.2]]);
        assert!((mil_align_loss(&sym, 1, 1, 0.07).unwrap() - 2f64.ln()).abs() < 1e-12);

        let m = Matrix::from_rows(&[vec![0.9, -0.3], vec![0.5, 0.1]]);
        let l = mil_align_loss(&m, 0, 1, 1.0).unwrap();
        let want = -(0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp())).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.37110).abs() < 1e-5);
    }

    #[test]
    fn align_loss_permutation_invariance() {
        let m = Matrix::from_rows(&[
            vec![0.1, 0.5, -0.2, 0.3],
            vec![0.4, 0.0, 0.6, -0.1],
            vec![-0.3, 0.2, 0.1, 0.8],
        ]);
        // Swap abnormal columns 1 and 3 together with the label.
        let perm = [0, 3, 2, 1];
        let mut p = Matrix::zeros(3, 4);
        for r in 0..3 {
            for c in 0..4 {
                p[(r, c)] = m[(r, perm[c])];
            }
        }
        let a = mil_align_loss(&m, 1, 2, 0.2).unwrap();
        let b = mil_align_loss(&p, 3, 2, 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn contrastive_examples() {
        let ortho = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]);
        assert_eq!(prompt_contrastive_loss(&ortho).unwrap(), 0.0);
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!((prompt_contrastive_loss(&same).unwrap() - 2.0).abs() < 1e-12);
        let deg60 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 3f64.sqrt() / 2.0]]);
        assert!((prompt_contrastive_loss(&deg60).unwrap() - 1.0).abs() < 1e-12);
        let obtuse = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.1]]);
        assert_eq!(prompt_contrastive_loss(&obtuse).unwrap(), 0.0);
        assert!(prompt_contrastive_loss(&Matrix::from_rows(&[vec![1.0], vec![0.0]])).is_err());
    }

    #[test]
    fn total_examples() {
        let w0 = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            tau: 0.07,
        };
        assert_eq!(total_loss(0.3, 5.0, 7.0, &w0).total, 0.3);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &LossWeights::default()).total, 0.0);
        let t = total_loss(0.5, 0.2, 0.1, &LossWeights::default()).total;
        assert!((t - 0.88).abs() < 1e-15);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.tau), (0.9, 2.0, 0.07));
    }
}
