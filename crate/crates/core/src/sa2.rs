//! Motion prior-aware spatial attention aggregation.
//!
//! Each patch's motion magnitude is the channel-wise Euclidean norm of its
//! temporal second difference `2·x[i] − x[i−1] − x[i+1]`, with the first and
//! last frames replicated at the boundaries. Per frame the `K` patches of
//! largest motion are kept (ties to the smaller flattened index `h·W+w`),
//! their magnitudes are softmax-normalized, and the attention-weighted sum of
//! their features is the frame's aggregated spatial feature.
//!
//! The top-K selection is a constant of the forward pass: gradients flow
//! through the kept magnitudes and features but not through which patches
//! were kept.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::feature_io::EmbeddingStream;
use crate::tensor::{top_k_indices, Matrix};

pub const DEFAULT_TOP_K: usize = 12;

/// Patch features of one video, rows ordered `[t][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub frames: usize,
    pub grid: (usize, usize),
    /// `(T·H·W)×D`
    pub data: Matrix,
}

impl PatchFeatures {
    pub fn new(frames: usize, grid: (usize, usize), data: Matrix) -> Result<Self> {
        if frames == 0 || grid.0 == 0 || grid.1 == 0 || data.cols() == 0 {
            return Err(Error::DimensionMismatch("empty patch tensor".into()));
        }
        if data.rows() != frames * grid.0 * grid.1 {
            return Err(Error::DimensionMismatch(format!(
                "{} patch rows for T={frames}, grid {:?}",
                data.rows(),
                grid
            )));
        }
        Ok(Self { frames, grid, data })
    }

    pub fn from_stream(s: &EmbeddingStream) -> Self {
        Self {
            frames: s.frames(),
            grid: s.grid(),
            data: s.patch_matrix(),
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Non-negative motion magnitudes, `T×(H·W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub magnitudes: Matrix,
}

impl MotionField {
    pub fn at(&self, t: usize, patch: usize) -> f64 {
        self.magnitudes[(t, patch)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSpatial {
    /// `T×D`
    pub features: Matrix,
    /// `T×K` softmax weights over the selected patches.
    pub attention: Matrix,
    /// `T×K` selected patch indices within each frame, by descending motion.
    pub selected: Vec<Vec<usize>>,
}

fn neighbour_rows(frames: usize, per_frame: usize) -> (Vec<usize>, Vec<usize>) {
    let mut prev = Vec::with_capacity(frames * per_frame);
    let mut next = Vec::with_capacity(frames * per_frame);
    for t in 0..frames {
        let tp = t.saturating_sub(1);
        let tn = (t + 1).min(frames - 1);
        for p in 0..per_frame {
            prev.push(tp * per_frame + p);
            next.push(tn * per_frame + p);
        }
    }
    (prev, next)
}

/// Records the motion magnitudes of `patches` on `g` as a `(T·H·W)×1` node.
pub fn motion_on(g: &mut Graph, patches: Var, frames: usize, grid: (usize, usize)) -> Var {
    let (prev_idx, next_idx) = neighbour_rows(frames, grid.0 * grid.1);
    let prev = g.gather_rows(patches, &prev_idx);
    let next = g.gather_rows(patches, &next_idx);
    let doubled = g.scale(patches, 2.0);
    let diff = g.sub(doubled, prev);
    let diff = g.sub(diff, next);
    g.row_norm(diff)
}

pub fn motion_magnitude(patches: &PatchFeatures) -> MotionField {
    let mut g = Graph::new();
    let p = g.constant(patches.data.clone());
    let mo = motion_on(&mut g, p, patches.frames, patches.grid);
    MotionField {
        magnitudes: g
            .value(mo)
            .clone()
            .reshape(patches.frames, patches.patches_per_frame()),
    }
}

/// Output of [`aggregate_on`]: the `T×D` node plus the selection it used.
pub struct AggregateNodes {
    pub features: Var,
    pub attention: Var,
    pub selected: Vec<Vec<usize>>,
}

/// Records top-K selection, softmax attention and weighted aggregation on
/// `g`. `motion` is a `(T·H·W)×1` node (see [`motion_on`]).
pub fn aggregate_on(
    g: &mut Graph,
    patches: Var,
    motion: Var,
    frames: usize,
    grid: (usize, usize),
    k: usize,
) -> Result<AggregateNodes> {
    let per_frame = grid.0 * grid.1;
    if k == 0 || k > per_frame {
        return Err(Error::InvalidConfig(format!(
            "K={k} must lie in 1..={per_frame} (H·W)"
        )));
    }
    let mo = g.value(motion).as_slice();
    let mut selected = Vec::with_capacity(frames);
    let mut flat = Vec::with_capacity(frames * k);
    for t in 0..frames {
        let frame = &mo[t * per_frame..(t + 1) * per_frame];
        let top = top_k_indices(frame, k);
        flat.extend(top.iter().map(|&p| t * per_frame + p));
        selected.push(top);
    }
    let mo_top = g.gather(motion, flat.clone(), frames, k);
    let attention = g.softmax(mo_top);
    let x_mo = g.gather_rows(patches, &flat);
    let features = g.group_weighted_sum(attention, x_mo);
    Ok(AggregateNodes {
        features,
        attention,
        selected,
    })
}

/// Aggregates each frame's patches using precomputed motion.
pub fn aggregate(patches: &PatchFeatures, motion: &MotionField, k: usize) -> Result<AggregatedSpatial> {
    if motion.magnitudes.shape() != (patches.frames, patches.patches_per_frame()) {
        return Err(Error::DimensionMismatch(format!(
            "motion field {:?} does not match T={} and {} patches per frame",
            motion.magnitudes.shape(),
            patches.frames,
            patches.patches_per_frame()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(patches.data.clone());
    let mo = g.constant(motion.magnitudes.clone().reshape(patches.data.rows(), 1));
    let nodes = aggregate_on(&mut g, p, mo, patches.frames, patches.grid, k)?;
    Ok(AggregatedSpatial {
        features: g.value(nodes.features).clone(),
        attention: g.value(nodes.attention).clone(),
        selected: nodes.selected,
    })
}

/// Motion magnitude followed by aggregation.
pub fn spatial_aggregate(patches: &PatchFeatures, k: usize) -> Result<AggregatedSpatial> {
    aggregate(patches, &motion_magnitude(patches), k)
}
