//! Combined cost volume, volume filtering and initial disparity regression.
//!
//! Volumes are `[G, D, h, w]` at quarter resolution: `G` channel groups and
//! `D` integer disparity candidates.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Group-wise correlation plus a projected concatenation volume, merged by
/// a pointwise convolution.
#[derive(Clone, Debug)]
pub struct CombinedVolume {
    pub groups: usize,
    pub ndisp: usize,
    /// Shared per-view projection to `G` channels.
    pub view_proj: Conv,
    /// `3G -> G` per voxel.
    pub merge: Conv,
}

impl CombinedVolume {
    pub fn new(prefix: &str, channels: usize, groups: usize, ndisp: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{channels} feature channels not divisible into {groups} groups"
            )));
        }
        if ndisp == 0 {
            return Err(Error::Config("need at least one disparity candidate".into()));
        }
        Ok(Self {
            groups,
            ndisp,
            view_proj: Conv::new(format!("{prefix}.view_proj"), channels, groups, 3, 1),
            merge: Conv::linear(format!("{prefix}.merge"), 3 * groups, groups),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.view_proj.init(store, rng);
        self.merge
            .init_scaled(store, rng, (1.0 / (3 * self.groups) as f64).sqrt());
    }

    pub fn forward(&self, g: &mut Graph, left: Var, right: Var) -> Result<Var> {
        let w = g.shape(left)[2];
        if self.ndisp > w {
            return Err(Error::shape(
                "build_combined_volume",
                format!("{} candidates exceed quarter width {w}", self.ndisp),
            ));
        }
        let cor = g.group_correlation(left, right, self.groups, self.ndisp);
        let pl = self.view_proj.forward(g, left);
        let pr = self.view_proj.forward(g, right);
        let cat = g.concat_volume(pl, pr, self.ndisp);
        let both = g.concat(&[cor, cat]);
        Ok(self.merge.forward_volume(g, both))
    }
}

/// Volume filtering: a disparity-softmaxed pointwise projection of the
/// volume, scaled by projected spatial context, gates the volume through a
/// sigmoid.
#[derive(Clone, Debug)]
pub struct VolumeGate {
    pub volume_proj: Conv,
    pub context_proj: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub refined: Var,
    /// Pre-sigmoid filter `[G, D, h, w]`.
    pub filter: Var,
    /// Softmax over candidates `[G, D, h, w]`.
    pub distribution: Var,
}

impl VolumeGate {
    pub fn new(prefix: &str, context_channels: usize, groups: usize) -> Self {
        Self {
            volume_proj: Conv::linear(format!("{prefix}.volume_proj"), groups, groups),
            context_proj: Conv::linear(format!("{prefix}.context_proj"), context_channels, groups),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.volume_proj.init(store, rng);
        self.context_proj
            .init_scaled(store, rng, (1.0 / self.context_proj.cin as f64).sqrt());
    }

    pub fn forward(&self, g: &mut Graph, volume: Var, context: Var) -> GateOutput {
        let vs = g.shape(volume).to_vec();
        let (groups, h, w) = (vs[0], vs[2], vs[3]);
        let logits = self.volume_proj.forward_volume(g, volume);
        let distribution = g.softmax(logits, 1);
        let ctx = self.context_proj.forward(g, context);
        let ctx = g.reshape(ctx, &[groups, 1, h, w]);
        let filter = g.mul(distribution, ctx);
        let gate = g.sigmoid(filter);
        GateOutput {
            refined: g.mul(gate, volume),
            filter,
            distribution,
        }
    }
}

/// Candidate indices `[D, 1, 1]`.
fn candidates(ndisp: usize) -> Tensor {
    Tensor::from_fn(&[ndisp, 1, 1], |i| i as f64)
}

/// Soft-argmax over candidate scores `[D, h, w]` -> `[1, h, w]`.
pub fn soft_argmax_var(g: &mut Graph, scores: Var) -> Var {
    let nd = g.shape(scores)[0];
    let p = g.softmax(scores, 0);
    let c = g.constant(candidates(nd));
    let e = g.mul(p, c);
    g.sum_axis(e, 0)
}

pub fn soft_argmax(scores: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let d = soft_argmax_var(&mut g, s);
    g.value(d).clone()
}

/// Reduces groups to one score per candidate and takes the soft-argmax.
#[derive(Clone, Debug)]
pub struct DisparityRegression {
    pub score: Conv,
}

impl DisparityRegression {
    pub fn new(prefix: &str, groups: usize) -> Self {
        Self {
            score: Conv::linear(format!("{prefix}.score"), groups, 1),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.score.init(store, rng);
    }

    /// `volume: [G, D, h, w]` -> `d0: [1, h, w]` in candidate units.
    pub fn forward(&self, g: &mut Graph, volume: Var) -> Var {
        let vs = g.shape(volume).to_vec();
        let s = self.score.forward_volume(g, volume);
        let s = g.reshape(s, &[vs[1], vs[2], vs[3]]);
        soft_argmax_var(g, s)
    }
}
