//! The complete temporal detector: spatial aggregation, temporal adapter,
//! classification and alignment branches, wired on one tape per video.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dual_branch::{self, BranchOutputs, HeadParams, ScoreBranch};
use crate::error::{Error, Result};
use crate::feature_io::{EmbeddingStream, VideoLabel};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::prompt_bank::PromptParams;
use crate::sa2::{self, PatchFeatures};
use crate::temporal_adapter::{self, AdapterLayerVars, AdapterParams};
use crate::tensor::Matrix;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `K` of the spatial top-K selection.
    pub top_k: usize,
    pub sigma: f64,
    pub adapter_layers: usize,
    /// FFN width; `None` means `4·D`.
    pub hidden: Option<usize>,
    /// Number of learnable context tokens `l`.
    pub context_len: usize,
    pub encoder_seed: u64,
    pub use_sa2: bool,
    pub use_adapter: bool,
    pub score_branch: ScoreBranch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            top_k: sa2::DEFAULT_TOP_K,
            sigma: 1.0,
            adapter_layers: 1,
            hidden: None,
            context_len: crate::prompt_bank::DEFAULT_CONTEXT_LEN,
            encoder_seed: 0x5eed,
            use_sa2: true,
            use_adapter: true,
            score_branch: ScoreBranch::Alignment,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if self.context_len == 0 {
            return Err(Error::InvalidConfig("context_len must be at least 1".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidConfig("hidden width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden.unwrap_or(4 * dim)
    }
}

/// Every tensor of the model. Only the classifier, the adapter and the
/// prompt context are trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub head: HeadParams,
    pub adapter: AdapterParams,
    pub prompt: PromptParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let head = HeadParams::init(dim, rng);
        let adapter = AdapterParams::init(dim, cfg.hidden_for(dim), cfg.adapter_layers, cfg.sigma, rng);
        let prompt = PromptParams::init(num_classes, cfg.context_len, dim, dim, cfg.encoder_seed, rng);
        Self {
            head,
            adapter,
            prompt,
        }
    }

    pub fn dim(&self) -> usize {
        self.head.weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.prompt.num_classes()
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn learnable(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("head.weight".to_string(), &self.head.weight),
            ("head.bias".to_string(), &self.head.bias),
        ];
        for (i, l) in self.adapter.layers.iter().enumerate() {
            out.extend(l.tensors().into_iter().map(|(n, m)| (format!("adapter.{i}.{n}"), m)));
        }
        out.push(("prompt.context".to_string(), &self.prompt.context));
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("head.weight".to_string(), &mut self.head.weight),
            ("head.bias".to_string(), &mut self.head.bias),
        ];
        for (i, l) in self.adapter.layers.iter_mut().enumerate() {
            out.extend(
                l.tensors_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("adapter.{i}.{n}"), m)),
            );
        }
        out.push(("prompt.context".to_string(), &mut self.prompt.context));
        out
    }

    /// Frozen tensors: class tokens and the surrogate encoder.
    pub fn frozen(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("prompt.class_tokens".to_string(), &self.prompt.class_tokens),
            (
                "prompt.encoder.context_weight".to_string(),
                &self.prompt.encoder.context_weight,
            ),
            (
                "prompt.encoder.class_weight".to_string(),
                &self.prompt.encoder.class_weight,
            ),
            ("prompt.encoder.bias".to_string(), &self.prompt.encoder.bias),
        ]
    }
}

/// Graph handles for the trainable tensors, in [`ModelParams::learnable`]
/// order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub head_weight: Var,
    pub head_bias: Var,
    pub adapter: Vec<AdapterLayerVars>,
    pub context: Var,
}

impl ModelVars {
    pub fn bind(g: &mut Graph, p: &ModelParams) -> Self {
        let head_weight = g.param(p.head.weight.clone());
        let head_bias = g.param(p.head.bias.clone());
        let adapter = p
            .adapter
            .layers
            .iter()
            .map(|l| AdapterLayerVars::bind(g, l, true))
            .collect();
        let context = g.param(p.prompt.context.clone());
        Self {
            head_weight,
            head_bias,
            adapter,
            context,
        }
    }

    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.head_weight, self.head_bias];
        for l in &self.adapter {
            out.extend(l.as_array());
        }
        out.push(self.context);
        out
    }
}

/// One video prepared for the model.
#[derive(Debug, Clone)]
pub struct VideoInput {
    pub video_id: String,
    pub label: VideoLabel,
    /// `T×D`
    pub x_clip: Matrix,
    /// `T×D` aggregated spatial features, zeros when SA² is disabled.
    pub x_as: Matrix,
}

impl VideoInput {
    pub fn prepare(stream: &EmbeddingStream, label: VideoLabel, cfg: &ModelConfig) -> Result<Self> {
        let x_clip = stream.frame_matrix();
        let x_as = if cfg.use_sa2 {
            let patches = PatchFeatures::from_stream(stream);
            let k = cfg.top_k.min(patches.patches_per_frame());
            sa2::spatial_aggregate(&patches, k)?.features
        } else {
            Matrix::zeros(x_clip.rows(), x_clip.cols())
        };
        Ok(Self {
            video_id: stream.video_id.clone(),
            label,
            x_clip,
            x_as,
        })
    }

    pub fn frames(&self) -> usize {
        self.x_clip.rows()
    }
}

/// Nodes produced by [`forward_on`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub x_ta: Var,
    pub confidence: Var,
    pub alignment: Var,
    pub prompts: Var,
}

/// Records the model on `g` for features `x_clip` and `x_as` (both `T×D`
/// nodes).
pub fn forward_on(
    g: &mut Graph,
    params: &ModelParams,
    vars: &ModelVars,
    cfg: &ModelConfig,
    x_clip: Var,
    x_as: Var,
) -> Result<ForwardNodes> {
    let frames = g.value(x_clip).rows();
    let input = g.add(x_clip, x_as);
    let x_ta = if cfg.use_adapter {
        temporal_adapter::forward_on(g, input, frames, params.adapter.sigma, &vars.adapter)?.1
    } else {
        input
    };
    let confidence = dual_branch::classify_on(g, x_ta, vars.head_weight, vars.head_bias);
    let prompts = params.prompt.encode_on(g, vars.context);
    let fused = g.add(x_clip, x_ta);
    let alignment = dual_branch::align_on(g, fused, prompts);
    Ok(ForwardNodes {
        x_ta,
        confidence,
        alignment,
        prompts,
    })
}

/// Loss nodes for one video.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub class: Var,
    pub align: Var,
    pub contrast: Var,
    pub total: Var,
}

pub fn losses_on(
    g: &mut Graph,
    nodes: &ForwardNodes,
    label: VideoLabel,
    weights: &LossWeights,
) -> LossNodes {
    let k = losses::topk_count(g.value(nodes.confidence).rows());
    let class = losses::class_loss_on(g, nodes.confidence, label.binary(), k);
    let align = losses::align_loss_on(g, nodes.alignment, label.category(), k, weights.tau);
    let contrast = losses::contrastive_loss_on(g, nodes.prompts);
    let total = losses::total_on(g, class, align, contrast, weights);
    LossNodes {
        class,
        align,
        contrast,
        total,
    }
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_class: g.scalar(self.class),
            l_align: g.scalar(self.align),
            l_const: g.scalar(self.contrast),
            total: g.scalar(self.total),
        }
    }
}

/// A trained model ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn branch_outputs(&self, input: &VideoInput) -> Result<BranchOutputs> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params);
        let x_clip = g.constant(input.x_clip.clone());
        let x_as = g.constant(input.x_as.clone());
        let nodes = forward_on(&mut g, &self.params, &vars, &self.config, x_clip, x_as)?;
        Ok(BranchOutputs {
            confidence: g.value(nodes.confidence).as_slice().to_vec(),
            alignment: g.value(nodes.alignment).clone(),
        })
    }

    /// Per-frame anomaly scores from the configured branch.
    pub fn frame_scores(&self, stream: &EmbeddingStream, tau: f64) -> Result<Vec<f64>> {
        let input = VideoInput::prepare(stream, VideoLabel::NORMAL, &self.config)?;
        self.branch_outputs(&input)?
            .frame_scores(self.config.score_branch, tau)
    }
}
