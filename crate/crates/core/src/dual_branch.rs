//! Classification and alignment branches, and the per-frame inference score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::prompt_bank::PromptMatrix;
use crate::tensor::{norm, softmax, Matrix};

/// Single-neuron linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `D×1`
    pub weight: Matrix,
    /// `1×1`
    pub bias: Matrix,
}

impl HeadParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, 1),
            bias: Matrix::zeros(1, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::randn(dim, 1, 1.0 / (dim as f64).sqrt(), rng),
            bias: Matrix::zeros(1, 1),
        }
    }
}

/// Which branch produces the final frame score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBranch {
    /// `1 − softmax(M/τ)[normal]`.
    #[default]
    Alignment,
    /// The sigmoid confidence `A`.
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    /// Frame anomaly confidence, `T` entries in `(0, 1)`.
    pub confidence: Vec<f64>,
    /// Frame-vs-class cosine similarities, `T×(1+C)`.
    pub alignment: Matrix,
}

impl BranchOutputs {
    pub fn frame_scores(&self, branch: ScoreBranch, tau: f64) -> Result<Vec<f64>> {
        match branch {
            ScoreBranch::Classification => Ok(self.confidence.clone()),
            ScoreBranch::Alignment => frame_anomaly_score(&self.alignment, tau),
        }
    }
}

/// Records `sigmoid(x_TA · w + b)` on `g` as a `T×1` node.
pub fn classify_on(g: &mut Graph, x_ta: Var, weight: Var, bias: Var) -> Var {
    let logits = g.matmul(x_ta, weight);
    let logits = g.add_row(logits, bias);
    g.sigmoid(logits)
}

/// Frame anomaly confidence `A[t] = sigmoid(w·x_TA[t] + b)`.
pub fn classify(x_ta: &Matrix, head: &HeadParams) -> Result<Vec<f64>> {
    if x_ta.cols() != head.weight.rows() {
        return Err(Error::DimensionMismatch(format!(
            "classifier expects D={}, got {}",
            head.weight.rows(),
            x_ta.cols()
        )));
    }
    let b = head.bias[(0, 0)];
    Ok((0..x_ta.rows())
        .map(|t| sigmoid(crate::tensor::dot(x_ta.row(t), head.weight.as_slice()) + b))
        .collect())
}

/// Records the cosine-similarity matrix between the rows of `frames` and
/// the rows of `prompts` on `g`.
pub fn align_on(g: &mut Graph, frames: Var, prompts: Var) -> Var {
    let f = g.row_normalize(frames);
    let p = g.row_normalize(prompts);
    g.matmul_t(f, p)
}

fn check_rows(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        if !(norm(m.row(r)) > 0.0) {
            return Err(Error::DegenerateEmbedding(format!("{what} row {r} has zero norm")));
        }
    }
    Ok(())
}

/// `M[t,i] = cos(x_CLIP[t] + x_TA[t], prompt_i)`.
pub fn align(x_clip: &Matrix, x_ta: &Matrix, prompts: &PromptMatrix) -> Result<Matrix> {
    if x_clip.shape() != x_ta.shape() {
        return Err(Error::DimensionMismatch(format!(
            "x_CLIP is {:?}, x_TA is {:?}",
            x_clip.shape(),
            x_ta.shape()
        )));
    }
    if prompts.0.cols() != x_clip.cols() {
        return Err(Error::DimensionMismatch(format!(
            "prompts have D={}, frames D={}",
            prompts.0.cols(),
            x_clip.cols()
        )));
    }
    let frames = x_clip.zip_map(x_ta, |a, b| a + b);
    check_rows(&frames, "frame")?;
    check_rows(&prompts.0, "prompt")?;
    let mut g = Graph::new();
    let f = g.constant(frames);
    let p = g.constant(prompts.0.clone());
    let m = align_on(&mut g, f, p);
    Ok(g.value(m).clone())
}

/// `score[t] = 1 − softmax(M[t,·]/τ)[0]`.
pub fn frame_anomaly_score(alignment: &Matrix, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    Ok((0..alignment.rows())
        .map(|t| {
            let logits: Vec<f64> = alignment.row(t).iter().map(|&m| m / tau).collect();
            let p = softmax(&logits);
            // 1 − p₀ computed as the abnormal mass keeps precision near 0.
            p[1..].iter().sum::<f64>()
        })
        .collect())
}
