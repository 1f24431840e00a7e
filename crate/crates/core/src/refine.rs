//! Iterative disparity refinement at quarter resolution.
//!
//! Each iteration looks up the filtered cost volume around the current
//! disparity, updates a ConvGRU hidden state, adds a predicted disparity
//! increment and convex-upsamples the result to full resolution. An
//! optional relative-depth prior is aligned to the initial disparity by a
//! learned per-pixel scale and shift before the loop starts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{convex_weights_shape, Graph, Var, CONVEX_TAPS};
use crate::error::{Error, Result};
use crate::maps::FloatMap;
use crate::nn::Conv;
use crate::params::ParamStore;
use crate::synthdata::StereoSample;
use crate::tensor::Tensor;

/// Resolution ratio between the refinement grid and the input images.
pub const UPSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub hidden: usize,
    pub context: usize,
    pub motion: usize,
    pub head: usize,
    pub radius: usize,
    /// Collapse the aligned scale and shift maps to their spatial means.
    pub global_scale_shift: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            hidden: 96,
            context: 96,
            motion: 64,
            head: 64,
            radius: 4,
            global_scale_shift: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.hidden, self.context, self.motion, self.head].contains(&0) {
            return Err(Error::Config("refinement channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Initial hidden state and per-iteration context from left-view features.
#[derive(Clone, Debug)]
pub struct ContextHead {
    pub conv: Conv,
    pub hidden: usize,
}

impl ContextHead {
    pub fn new(prefix: &str, cin: usize, cfg: &RefineConfig) -> Self {
        Self {
            conv: Conv::new(format!("{prefix}.conv"), cin, cfg.hidden + cfg.context, 3, 1),
            hidden: cfg.hidden,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.conv.init(store, rng);
    }

    /// Returns `(tanh hidden, relu context)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let y = self.conv.forward(g, x);
        let total = g.shape(y)[0];
        let h = g.narrow(y, 0, self.hidden);
        let c = g.narrow(y, self.hidden, total - self.hidden);
        (g.tanh(h), g.relu(c))
    }
}

/// Convolutional GRU cell with a motion encoder over looked-up costs and
/// heads for the disparity increment and convex upsampling weights.
#[derive(Clone, Debug)]
pub struct UpdateBlock {
    pub motion: Conv,
    pub z: Conv,
    pub r: Conv,
    pub q: Conv,
    pub delta: [Conv; 2],
    pub mask: [Conv; 2],
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub hidden: Var,
    pub delta: Var,
}

impl UpdateBlock {
    pub fn new(prefix: &str, cost_channels: usize, cfg: &RefineConfig) -> Self {
        let inputs = cfg.context + cfg.motion + 1;
        let gate = |n: &str| Conv::new(format!("{prefix}.{n}"), cfg.hidden + inputs, cfg.hidden, 3, 1);
        Self {
            motion: Conv::new(format!("{prefix}.motion"), cost_channels + 1, cfg.motion, 3, 1),
            z: gate("z"),
            r: gate("r"),
            q: gate("q"),
            delta: [
                Conv::new(format!("{prefix}.delta0"), cfg.hidden, cfg.head, 3, 1),
                Conv::new(format!("{prefix}.delta1"), cfg.head, 1, 3, 1),
            ],
            mask: [
                Conv::new(format!("{prefix}.mask0"), cfg.hidden, cfg.head, 3, 1),
                Conv::linear(format!("{prefix}.mask1"), cfg.head, CONVEX_TAPS * UPSAMPLE * UPSAMPLE),
            ],
            hidden: cfg.hidden,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in [&self.motion, &self.z, &self.r, &self.q, &self.delta[0], &self.mask[0]] {
            c.init(store, rng);
        }
        self.delta[1].init_scaled(store, rng, 1e-2);
        self.mask[1].init_scaled(store, rng, 1e-2);
    }

    /// One GRU update. `cost: [taps*G, h, w]`, `disp: [1, h, w]`.
    pub fn step(&self, g: &mut Graph, hidden: Var, context: Var, cost: Var, disp: Var) -> StepOutput {
        let m_in = g.concat(&[cost, disp]);
        let m = self.motion.forward(g, m_in);
        let m = g.relu(m);
        let x = g.concat(&[context, m, disp]);
        let hx = g.concat(&[hidden, x]);
        let z = self.z.forward(g, hx);
        let z = g.sigmoid(z);
        let r = self.r.forward(g, hx);
        let r = g.sigmoid(r);
        let rh = g.mul(r, hidden);
        let rhx = g.concat(&[rh, x]);
        let q = self.q.forward(g, rhx);
        let q = g.tanh(q);
        let keep = g.one_minus(z);
        let kept = g.mul(keep, hidden);
        let upd = g.mul(z, q);
        let hidden = g.add(kept, upd);
        let d = self.delta[0].forward(g, hidden);
        let d = g.relu(d);
        let delta = self.delta[1].forward(g, d);
        StepOutput { hidden, delta }
    }

    /// Softmaxed convex weights `[9, 16, h, w]` from the hidden state.
    pub fn upsample_weights(&self, g: &mut Graph, hidden: Var) -> Var {
        let s = g.shape(hidden).to_vec();
        let m = self.mask[0].forward(g, hidden);
        let m = g.relu(m);
        let m = self.mask[1].forward(g, m);
        let m = g.scale(m, 0.25);
        let m = g.reshape(m, &convex_weights_shape(s[1], s[2], UPSAMPLE));
        g.softmax(m, 0)
    }
}

/// Full-resolution disparity from a quarter-scale map and convex weights.
pub fn upsample_disparity(g: &mut Graph, disp: Var, weights: Var) -> Var {
    g.convex_upsample(disp, weights, UPSAMPLE)
}

/// Quarter-scale state entering the loop.
#[derive(Clone, Copy, Debug)]
pub struct LoopInput {
    pub volume: Var,
    pub init: Var,
    pub hidden: Var,
    pub context: Var,
}

/// Per-iteration outputs of [`run_refinement`].
#[derive(Clone, Debug, Default)]
pub struct LoopOutput {
    /// Full-resolution disparities, one per iteration.
    pub full: Vec<Var>,
    /// Quarter-scale disparities after each iteration.
    pub coarse: Vec<Var>,
    pub hidden: Vec<Var>,
}

/// Runs `iters` updates. The disparity is detached before each lookup, so
/// gradients reach the cost volume only through the looked-up values.
pub fn run_refinement(g: &mut Graph, block: &UpdateBlock, input: LoopInput, radius: usize, iters: usize) -> LoopOutput {
    let mut out = LoopOutput::default();
    let mut hidden = input.hidden;
    let mut disp = input.init;
    for _ in 0..iters {
        let d = g.detach(disp);
        let cost = g.lookup_cost(input.volume, d, radius);
        let step = block.step(g, hidden, input.context, cost, d);
        hidden = step.hidden;
        disp = g.add(d, step.delta);
        let w = block.upsample_weights(g, hidden);
        out.full.push(upsample_disparity(g, disp, w));
        out.coarse.push(disp);
        out.hidden.push(hidden);
    }
    out
}

/// Aligns a relative prior to the initial disparity:
/// `(alpha, beta) = net(d0, d_rel)`, `d_met = alpha * d_rel + beta`.
#[derive(Clone, Debug)]
pub struct ScaleShift {
    pub conv: [Conv; 2],
    pub global: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub aligned: Var,
    pub scale: Var,
    pub shift: Var,
}

impl ScaleShift {
    pub fn new(prefix: &str, hidden: usize, global: bool) -> Self {
        Self {
            conv: [
                Conv::new(format!("{prefix}.conv0"), 2, hidden, 3, 1),
                Conv::new(format!("{prefix}.conv1"), hidden, 2, 3, 1),
            ],
            global,
        }
    }

    /// Starts near the identity map: scale 1, shift 0.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.conv[0].init(store, rng);
        self.conv[1].init_scaled(store, rng, 1e-3);
        store.expect_mut(&self.conv[1].bias()).data_mut()[0] = 1.0;
    }

    pub fn forward(&self, g: &mut Graph, d0: Var, d_rel: Var) -> Alignment {
        let x = g.concat(&[d0, d_rel]);
        let y = self.conv[0].forward(g, x);
        let y = g.relu(y);
        let y = self.conv[1].forward(g, y);
        let mut scale = g.narrow(y, 0, 1);
        let mut shift = g.narrow(y, 1, 1);
        if self.global {
            scale = spatial_mean(g, scale);
            shift = spatial_mean(g, shift);
        }
        let s = g.mul(scale, d_rel);
        Alignment {
            aligned: g.add(s, shift),
            scale,
            shift,
        }
    }
}

/// `[C, H, W] -> [C, 1, 1]` mean.
fn spatial_mean(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let a = g.sum_axis(x, 1);
    let a = g.sum_axis(a, 2);
    g.scale(a, 1.0 / (s[1] * s[2]) as f64)
}

/// Distortion applied by [`stub_relative_depth`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorDistortion {
    pub scale: [f64; 2],
    pub shift: [f64; 2],
    /// Smooth noise amplitude relative to the scaled mean disparity.
    pub noise: f64,
}

impl Default for PriorDistortion {
    fn default() -> Self {
        Self {
            scale: [0.5, 2.0],
            shift: [-2.0, 2.0],
            noise: 0.05,
        }
    }
}

/// A stand-in for a monocular relative-depth prior:
/// `a * disparity + b + noise`, with `(a, b)` drawn from the configured
/// ranges and the noise a sum of a few long-wavelength sinusoids with peak
/// amplitude `noise * a * mean(disparity)`.
pub fn stub_relative_depth(sample: &StereoSample, rng: &mut ChaCha8Rng, params: &PriorDistortion) -> FloatMap {
    let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] >= r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) };
    let a = draw(rng, params.scale);
    let b = draw(rng, params.shift);
    let d = &sample.disparity_gt;
    let (h, w) = (d.height, d.width);
    let mean = d.data.iter().map(|&v| v as f64).sum::<f64>() / d.data.len().max(1) as f64;
    let amp = params.noise * a.abs() * mean;
    const WAVES: usize = 3;
    let waves: Vec<[f64; 4]> = (0..WAVES)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let lambda = rng.gen_range(0.5..1.5) * h.max(w) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            [theta.cos(), theta.sin(), std::f64::consts::TAU / lambda, phase]
        })
        .collect();
    let mut out = FloatMap::new(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let n = if amp == 0.0 {
                0.0
            } else {
                let s: f64 = waves
                    .iter()
                    .map(|v| ((v[0] * x as f64 + v[1] * y as f64) * v[2] + v[3]).sin())
                    .sum();
                amp * s / WAVES as f64
            };
            out.set(0, y, x, (a * d.at(0, y, x) as f64 + b + n) as f32);
        }
    }
    out
}

/// Full-resolution map -> quarter-scale `[1, H/4, W/4]` in quarter pixels
/// (block mean, divided by 4).
pub fn to_quarter_scale(map: &FloatMap) -> Result<Tensor> {
    if map.channels != 1 || !map.height.is_multiple_of(UPSAMPLE) || !map.width.is_multiple_of(UPSAMPLE) {
        return Err(Error::shape(
            "to_quarter_scale",
            format!("{}x{}x{} map", map.channels, map.height, map.width),
        ));
    }
    let mut g = Graph::new();
    let t = g.constant(map.to_tensor());
    let p = g.avg_pool(t, UPSAMPLE);
    let p = g.scale(p, 1.0 / UPSAMPLE as f64);
    Ok(g.value(p).clone())
}
