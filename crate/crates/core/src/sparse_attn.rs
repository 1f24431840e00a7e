//! Sparse deformable attention.
//!
//! Every query pixel predicts `k` sampling points, gathers projected value
//! features there by bilinear interpolation and mixes them with softmax
//! weights. [`SpatialAttention`] samples anywhere on its own map;
//! [`DualMatchingAttention`] samples the other view along the query's own
//! row, once over gated image features and once over normal features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, LayerNorm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// 2D sinusoidal embedding `[C, h, w]`: the first `C/2` channels encode x,
/// the rest encode y. Within each half, channel `2f` is `sin(pos * w_f)` and
/// `2f + 1` is `cos(pos * w_f)`, with `w_f` geometric from 1 down to 1e-4.
pub fn positional_embed(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::shape(
            "positional_embed",
            format!("channel count {c} must be even and positive"),
        ));
    }
    let half = c / 2;
    let nfreq = half.div_ceil(2);
    let freq = |f: usize| {
        if nfreq == 1 {
            1.0
        } else {
            10000f64.powf(-(f as f64) / (nfreq - 1) as f64)
        }
    };
    let mut t = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let j = ch % half;
        let wf = freq(j / 2);
        let trig = |p: usize| {
            let a = p as f64 * wf;
            if j.is_multiple_of(2) {
                a.sin()
            } else {
                a.cos()
            }
        };
        for y in 0..h {
            for x in 0..w {
                let pos = if ch < half { x } else { y };
                t.set3(ch, y, x, trig(pos));
            }
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Spatial,
    Epipolar,
}

/// Initial offsets spread over a 3x3 neighbourhood (spatial) or
/// `+-{1, 2, 4, 8}` columns (epipolar); larger `k` repeats the pattern at
/// doubled radius.
pub fn initial_offsets(mode: SamplingMode, k: usize) -> Vec<(f64, f64)> {
    let base: Vec<(f64, f64)> = match mode {
        SamplingMode::Spatial => vec![
            (0.0, 0.0),
            (-1.0, 0.0),
            (1.0, 0.0),
            (0.0, -1.0),
            (0.0, 1.0),
            (-1.0, -1.0),
            (1.0, -1.0),
            (-1.0, 1.0),
            (1.0, 1.0),
        ],
        SamplingMode::Epipolar => [-1.0, 1.0, -2.0, 2.0, -4.0, 4.0, -8.0, 8.0]
            .iter()
            .map(|&x| (x, 0.0))
            .collect(),
    };
    (0..k)
        .map(|j| {
            let s = (1 << (j / base.len())) as f64;
            let (x, y) = base[j % base.len()];
            (x * s, y * s)
        })
        .collect()
}

fn pixel_grid(k: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    let xs = Tensor::from_fn(&[k, h, w], |i| (i % w) as f64);
    let ys = Tensor::from_fn(&[k, h, w], |i| ((i / w) % h) as f64);
    (xs, ys)
}

/// Key-point sampling: an offset head on the query map and a value
/// projection on the value map.
#[derive(Clone, Debug)]
pub struct KeyPointSampler {
    pub offsets: Conv,
    pub value: Conv,
    pub k: usize,
    pub mode: SamplingMode,
}

/// Sampling points `[k, h, w]` each (pixel coordinates) and sampled values
/// `[k, C, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct Sampled {
    pub px: Var,
    pub py: Var,
    pub values: Var,
}

impl KeyPointSampler {
    pub fn new(prefix: &str, channels: usize, k: usize, mode: SamplingMode) -> Self {
        Self {
            offsets: Conv::linear(format!("{prefix}.offsets"), channels, 2 * k),
            value: Conv::linear(format!("{prefix}.value"), channels, channels),
            k,
            mode,
        }
    }

    /// Zero offset weights with the spread initial pattern in the bias.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.offsets.init_zero(store);
        let bias = store.expect_mut(&self.offsets.bias());
        for (j, (dx, dy)) in initial_offsets(self.mode, self.k).into_iter().enumerate() {
            bias.data_mut()[j] = dx;
            bias.data_mut()[self.k + j] = dy;
        }
        self.value.init_scaled(store, rng, (1.0 / self.value.cin as f64).sqrt());
    }

    pub fn forward(&self, g: &mut Graph, query: Var, value: Var) -> Sampled {
        let s = g.shape(query).to_vec();
        let (h, w) = (s[1], s[2]);
        let k = self.k;
        let raw = self.offsets.forward(g, query);
        let (gx, gy) = pixel_grid(k, h, w);
        let off_x = g.narrow(raw, 0, k);
        let gx = g.constant(gx);
        let px = g.add(gx, off_x);
        let py = match self.mode {
            SamplingMode::Spatial => {
                let off_y = g.narrow(raw, k, k);
                let gy = g.constant(gy);
                g.add(gy, off_y)
            }
            SamplingMode::Epipolar => g.constant(gy),
        };
        let projected = self.value.forward(g, value);
        let values = g.grid_sample(projected, px, py);
        Sampled { px, py, values }
    }
}

/// `sum_j weights[j] * values[j]`; `weights: [k, h, w]`,
/// `values: [k, C, h, w]`, result `[C, h, w]`.
pub fn weighted_sum(g: &mut Graph, weights: Var, values: Var) -> Var {
    let vs = g.shape(values).to_vec();
    let (k, c, h, w) = (vs[0], vs[1], vs[2], vs[3]);
    let wt = g.reshape(weights, &[k, 1, h, w]);
    let prod = g.mul(wt, values);
    let sum = g.sum_axis(prod, 0);
    g.reshape(sum, &[c, h, w])
}

/// Attention head: logits by a linear map, softmax over the `k` points.
fn attention_weights(g: &mut Graph, head: &Conv, query: Var) -> Var {
    let logits = head.forward(g, query);
    g.softmax(logits, 0)
}

/// Intermediate tensors of one attention block, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub sampled: Sampled,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub sampler: KeyPointSampler,
    pub attn: Conv,
    pub proj: Conv,
    pub norm1: LayerNorm,
    pub ffn: Conv,
    pub norm2: LayerNorm,
}

impl SpatialAttention {
    pub fn new(prefix: &str, channels: usize, k: usize) -> Self {
        Self {
            sampler: KeyPointSampler::new(&format!("{prefix}.kps"), channels, k, SamplingMode::Spatial),
            attn: Conv::linear(format!("{prefix}.attn"), channels, k),
            proj: Conv::linear(format!("{prefix}.proj"), channels, channels),
            norm1: LayerNorm::new(format!("{prefix}.norm1"), channels),
            ffn: Conv::linear(format!("{prefix}.ffn"), channels, channels),
            norm2: LayerNorm::new(format!("{prefix}.norm2"), channels),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.sampler.init(store, rng);
        self.attn.init_zero(store);
        let c = self.proj.cin as f64;
        self.proj.init_scaled(store, rng, (1.0 / c).sqrt());
        self.ffn.init_scaled(store, rng, (1.0 / c).sqrt());
        self.norm1.init(store);
        self.norm2.init(store);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, AttentionTrace) {
        let s = g.shape(x).to_vec();
        let pe = positional_embed(s[1], s[2], s[0]).expect("even channel count checked at construction");
        let pe = g.constant(pe);
        let x = g.add(x, pe);
        let sampled = self.sampler.forward(g, x, x);
        let weights = attention_weights(g, &self.attn, x);
        let agg = weighted_sum(g, weights, sampled.values);
        let agg = self.proj.forward(g, agg);
        let y = g.add(x, agg);
        let y = self.norm1.forward(g, y);
        let f = self.ffn.forward(g, y);
        let out = g.add(y, f);
        (self.norm2.forward(g, out), AttentionTrace { sampled, weights })
    }
}

/// One epipolar cross-view branch: key normalisation, sampler and weights.
#[derive(Clone, Debug)]
pub struct EpipolarBranch {
    pub key_norm: LayerNorm,
    pub sampler: KeyPointSampler,
    pub attn: Conv,
}

impl EpipolarBranch {
    fn new(prefix: &str, channels: usize, k: usize) -> Self {
        Self {
            key_norm: LayerNorm::new(format!("{prefix}.key_norm"), channels),
            sampler: KeyPointSampler::new(&format!("{prefix}.kps"), channels, k, SamplingMode::Epipolar),
            attn: Conv::linear(format!("{prefix}.attn"), channels, k),
        }
    }

    fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.key_norm.init(store);
        self.sampler.init(store, rng);
        self.attn.init_zero(store);
    }

    fn forward(&self, g: &mut Graph, query: Var, keys: Var) -> (Var, AttentionTrace) {
        let keys = self.key_norm.forward(g, keys);
        let sampled = self.sampler.forward(g, query, keys);
        let weights = attention_weights(g, &self.attn, query);
        (
            weighted_sum(g, weights, sampled.values),
            AttentionTrace { sampled, weights },
        )
    }
}

/// Cross-view matching attention. Each view queries the other view's gated
/// image features and, when enabled, its normal features; both directions
/// share weights.
#[derive(Clone, Debug)]
pub struct DualMatchingAttention {
    pub query_norm: LayerNorm,
    pub image: EpipolarBranch,
    pub normal: Option<EpipolarBranch>,
    pub proj: Conv,
    pub ffn_norm: LayerNorm,
    pub ffn: Conv,
}

/// Per-view result of [`DualMatchingAttention`].
#[derive(Clone, Copy, Debug)]
pub struct MatchOutput {
    pub features: Var,
    pub image: AttentionTrace,
    pub normal: Option<AttentionTrace>,
}

impl DualMatchingAttention {
    pub fn new(prefix: &str, channels: usize, k: usize, with_normals: bool) -> Self {
        let branches = if with_normals { 2 } else { 1 };
        Self {
            query_norm: LayerNorm::new(format!("{prefix}.query_norm"), channels),
            image: EpipolarBranch::new(&format!("{prefix}.image"), channels, k),
            normal: with_normals.then(|| EpipolarBranch::new(&format!("{prefix}.normal"), channels, k)),
            proj: Conv::linear(format!("{prefix}.proj"), branches * channels, channels),
            ffn_norm: LayerNorm::new(format!("{prefix}.ffn_norm"), channels),
            ffn: Conv::linear(format!("{prefix}.ffn"), channels, channels),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.query_norm.init(store);
        self.image.init(store, rng);
        if let Some(n) = &self.normal {
            n.init(store, rng);
        }
        self.proj.init_scaled(store, rng, (1.0 / self.proj.cin as f64).sqrt());
        self.ffn_norm.init(store);
        self.ffn.init_scaled(store, rng, (1.0 / self.ffn.cin as f64).sqrt());
    }

    /// One direction: `fused` queries `other_filtered` / `other_normals`.
    pub fn forward_one(
        &self,
        g: &mut Graph,
        fused: Var,
        other_filtered: Var,
        other_normals: Option<Var>,
    ) -> MatchOutput {
        let s = g.shape(fused).to_vec();
        let pe = positional_embed(s[1], s[2], s[0]).expect("even channel count checked at construction");
        let pe = g.constant(pe);
        let q = g.add(fused, pe);
        let qn = self.query_norm.forward(g, q);
        let (img_agg, image) = self.image.forward(g, qn, other_filtered);
        let (cat, normal) = match (&self.normal, other_normals) {
            (Some(branch), Some(keys)) => {
                let (nrm_agg, tr) = branch.forward(g, qn, keys);
                (g.concat(&[img_agg, nrm_agg]), Some(tr))
            }
            (None, _) => (img_agg, None),
            (Some(_), None) => panic!("normal branch enabled but no normal features given"),
        };
        let mixed = self.proj.forward(g, cat);
        let f = g.add(q, mixed);
        let fn_ = self.ffn_norm.forward(g, f);
        let fn_ = self.ffn.forward(g, fn_);
        MatchOutput {
            features: g.add(f, fn_),
            image,
            normal,
        }
    }

    /// Both directions: left queries right and right queries left.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        fused_l: Var,
        fused_r: Var,
        filtered_l: Var,
        filtered_r: Var,
        normals_l: Option<Var>,
        normals_r: Option<Var>,
    ) -> (MatchOutput, MatchOutput) {
        let left = self.forward_one(g, fused_l, filtered_r, normals_r);
        let right = self.forward_one(g, fused_r, filtered_l, normals_l);
        (left, right)
    }
}

/// Check that a channel count suits the sinusoidal embedding.
pub fn validate_channels(c: usize) -> Result<()> {
    if !c.is_multiple_of(2) {
        return Err(Error::Config(format!("attention channels must be even, got {c}")));
    }
    Ok(())
}
