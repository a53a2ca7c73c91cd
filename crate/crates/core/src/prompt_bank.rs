//! Label prompt embeddings and the fixed text queries used for spatial
//! localization.
//!
//! A class prompt is the sequence `{e_1, …, e_l, t_c}`: `l` learnable
//! context tokens shared by every class followed by the frozen class token.
//! The sequence goes through a frozen surrogate text encoder, a seeded
//! random affine map over the flattened sequence followed by `tanh`.
//! Because the affine map is linear in the concatenation, it is evaluated
//! as `flat(context)·W_ctx + t_c·W_cls + b`, which shares the context term
//! across classes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::feature_io::{read_matrix, write_matrix};
use crate::tensor::{norm, Matrix};

pub const DEFAULT_CONTEXT_LEN: usize = 8;

/// Frozen random affine map + `tanh` standing in for the text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTextEncoder {
    pub seed: u64,
    /// `(l·D_tok)×D`
    pub context_weight: Matrix,
    /// `D_tok×D`
    pub class_weight: Matrix,
    /// `1×D`
    pub bias: Matrix,
}

impl SurrogateTextEncoder {
    pub fn new(seed: u64, context_len: usize, token_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = ((context_len + 1) * token_dim) as f64;
        let std = 1.0 / fan_in.sqrt();
        Self {
            seed,
            context_weight: Matrix::randn(context_len * token_dim, out_dim, std, &mut rng),
            class_weight: Matrix::randn(token_dim, out_dim, std, &mut rng),
            bias: Matrix::randn(1, out_dim, 0.1, &mut rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    /// Learnable shared prefix, `l×D_tok`.
    pub context: Matrix,
    /// Frozen class tokens, `(1+C)×D_tok`; row 0 is the normal class.
    pub class_tokens: Matrix,
    pub encoder: SurrogateTextEncoder,
}

impl PromptParams {
    /// Context initialized `N(0, 0.02²)`, class tokens `N(0, 1)`, both from
    /// `rng`; the encoder from `encoder_seed`.
    pub fn init<R: rand::Rng + ?Sized>(
        num_classes: usize,
        context_len: usize,
        token_dim: usize,
        out_dim: usize,
        encoder_seed: u64,
        rng: &mut R,
    ) -> Self {
        Self {
            context: Matrix::randn(context_len, token_dim, 0.02, rng),
            class_tokens: Matrix::randn(num_classes, token_dim, 1.0, rng),
            encoder: SurrogateTextEncoder::new(encoder_seed, context_len, token_dim, out_dim),
        }
    }

    pub fn context_len(&self) -> usize {
        self.context.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.rows()
    }

    /// Records the prompt encoding on `g`, with `context` bound to the
    /// caller's (trainable) node. Returns the `(1+C)×D` prompt matrix.
    pub fn encode_on(&self, g: &mut Graph, context: Var) -> Var {
        let (l, dt) = self.context.shape();
        let flat = g.reshape(context, 1, l * dt);
        let w_ctx = g.constant(self.encoder.context_weight.clone());
        let shared = g.matmul(flat, w_ctx);
        let tokens = g.constant(self.class_tokens.clone());
        let w_cls = g.constant(self.encoder.class_weight.clone());
        let per_class = g.matmul(tokens, w_cls);
        let pre = g.add_row(per_class, shared);
        let bias = g.constant(self.encoder.bias.clone());
        let pre = g.add_row(pre, bias);
        g.tanh(pre)
    }
}

/// Label prompt embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix(pub Matrix);

impl PromptMatrix {
    pub fn embeddings(&self) -> &Matrix {
        &self.0
    }
}

/// Encodes every class prompt through the frozen encoder.
pub fn encode_prompts(params: &PromptParams) -> Result<PromptMatrix> {
    let mut g = Graph::new();
    let ctx = g.constant(params.context.clone());
    let out = params.encode_on(&mut g, ctx);
    let m = g.value(out).clone();
    for r in 0..m.rows() {
        if norm(m.row(r)) < 1e-12 {
            return Err(Error::DegenerateEmbedding(format!("prompt row {r} has zero norm")));
        }
    }
    Ok(PromptMatrix(m))
}

/// Normal and abnormal text-query embeddings, rows unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    normal: Matrix,
    abnormal: Matrix,
    pub normal_texts: Vec<String>,
    pub abnormal_texts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct QueryGroupFile {
    embeddings: PathBuf,
    #[serde(default)]
    texts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct QueryIndexFile {
    normal: QueryGroupFile,
    abnormal: QueryGroupFile,
}

impl QuerySet {
    /// Validates and L2-normalizes both groups. Texts may be empty; when
    /// given they must match the row counts.
    pub fn new(
        normal: Matrix,
        abnormal: Matrix,
        normal_texts: Vec<String>,
        abnormal_texts: Vec<String>,
    ) -> Result<Self> {
        if normal.rows() == 0 {
            return Err(Error::EmptyQuerySet("no normal queries".into()));
        }
        if abnormal.rows() == 0 {
            return Err(Error::EmptyQuerySet("no abnormal queries".into()));
        }
        if normal.cols() != abnormal.cols() {
            return Err(Error::DimensionMismatch(format!(
                "normal queries have D={}, abnormal D={}",
                normal.cols(),
                abnormal.cols()
            )));
        }
        for (texts, m, which) in [
            (&normal_texts, &normal, "normal"),
            (&abnormal_texts, &abnormal, "abnormal"),
        ] {
            if !texts.is_empty() && texts.len() != m.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "{} {which} texts for {} embeddings",
                    texts.len(),
                    m.rows()
                )));
            }
        }
        let normalize = |m: Matrix, offset: usize| -> Result<Matrix> {
            let mut m = m;
            for r in 0..m.rows() {
                let n = norm(m.row(r));
                if !(n > 1e-12) || !n.is_finite() {
                    return Err(Error::DegenerateQuery(offset + r));
                }
                m.row_mut(r).iter_mut().for_each(|x| *x /= n);
            }
            Ok(m)
        };
        let n_rows = normal.rows();
        Ok(Self {
            normal: normalize(normal, 0)?,
            abnormal: normalize(abnormal, n_rows)?,
            normal_texts,
            abnormal_texts,
        })
    }

    pub fn normal(&self) -> &Matrix {
        &self.normal
    }

    pub fn abnormal(&self) -> &Matrix {
        &self.abnormal
    }

    pub fn dim(&self) -> usize {
        self.normal.cols()
    }

    /// All queries stacked, normal rows first.
    pub fn stacked(&self) -> Matrix {
        Matrix::vstack(&[&self.normal, &self.abnormal])
    }

    /// Loads a query index (JSON naming one `STPM` matrix per group).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: QueryIndexFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let normal = read_matrix(resolve(&index.normal.embeddings))?;
        let abnormal = read_matrix(resolve(&index.abnormal.embeddings))?;
        Self::new(normal, abnormal, index.normal.texts, index.abnormal.texts)
    }

    /// Writes `path` plus `normal.stpm` / `abnormal.stpm` beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        write_matrix(&self.normal, base.join("normal.stpm"))?;
        write_matrix(&self.abnormal, base.join("abnormal.stpm"))?;
        let index = QueryIndexFile {
            normal: QueryGroupFile {
                embeddings: "normal.stpm".into(),
                texts: self.normal_texts.clone(),
            },
            abnormal: QueryGroupFile {
                embeddings: "abnormal.stpm".into(),
                texts: self.abnormal_texts.clone(),
            },
        };
        fs::write(path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(path, e))
    }
}
