//! Gated fusion of image and normal features.
//!
//! A small gating network looks at quarter-scale image and normal features
//! together with the resized raw inputs and predicts a single-channel mask
//! in (0, 1). The mask is average-pooled to every pyramid level, multiplies
//! the image features, and the filtered features are fused with the normal
//! features by one ConvINReLU per level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{PyramidVars, STRIDES};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvInRelu};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 3 }
    }
}

/// Single-channel masks at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedMaskSet {
    pub levels: [Tensor; 4],
}

/// Bilinear resize of `[C, H, W]` with pixel-centre alignment.
pub fn resize_bilinear(t: &Tensor, ho: usize, wo: usize) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let tap = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for y in 0..ho {
        let (y0, y1, fy) = tap(y, h, ho);
        for x in 0..wo {
            let (x0, x1, fx) = tap(x, w, wo);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * t.at3(ch, y0, x0) + fx * t.at3(ch, y0, x1))
                    + fy * ((1.0 - fx) * t.at3(ch, y1, x0) + fx * t.at3(ch, y1, x1));
                out.set3(ch, y, x, v);
            }
        }
    }
    out
}

/// The mask-predicting network.
pub struct GmNet {
    body: Vec<ConvInRelu>,
    head: Conv,
}

impl GmNet {
    pub const PREFIX: &'static str = "gcgf.gm";

    /// `feat_channels` is the stride-4 channel count of both encoders.
    pub fn new(feat_channels: usize, cfg: &GateConfig) -> Self {
        let mut body = Vec::new();
        let mut cin = 2 * feat_channels + 6;
        for i in 0..cfg.layers {
            body.push(ConvInRelu::new(
                format!("{}.body{i}", Self::PREFIX),
                cin,
                cfg.hidden,
                3,
                1,
            ));
            cin = cfg.hidden;
        }
        Self {
            body,
            head: Conv::new(format!("{}.head", Self::PREFIX), cin, 1, 3, 1),
        }
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.body.iter().for_each(|l| l.init(store, rng));
        self.head.init(store, rng);
    }

    /// Inputs are aligned quarter-scale maps; returns `M4: [1, h, w]`.
    pub fn forward(&self, g: &mut Graph, f_img: Var, img: Var, f_nrm: Var, nrm: Var) -> Var {
        let mut x = g.concat(&[f_img, img, f_nrm, nrm]);
        for l in &self.body {
            x = l.forward(g, x);
        }
        let logits = self.head.forward(g, x);
        g.sigmoid(logits)
    }
}

/// Masks for all strides by non-overlapping averaging of `m4`.
pub fn downsample_masks_vars(g: &mut Graph, m4: Var) -> [Var; 4] {
    let m8 = g.avg_pool(m4, 2);
    let m16 = g.avg_pool(m4, 4);
    let m32 = g.avg_pool(m4, 8);
    [m4, m8, m16, m32]
}

pub fn downsample_masks(m4: &Tensor) -> Result<GatedMaskSet> {
    if m4.rank() != 3 || m4.dim(0) != 1 {
        return Err(Error::shape(
            "downsample_masks",
            format!("expected [1, h, w], got {:?}", m4.shape()),
        ));
    }
    if !m4.dim(1).is_multiple_of(8) || !m4.dim(2).is_multiple_of(8) {
        return Err(Error::shape(
            "downsample_masks",
            format!("{:?} not divisible by 8", m4.shape()),
        ));
    }
    let mut g = Graph::new();
    let m = g.constant(m4.clone());
    let levels = downsample_masks_vars(&mut g, m);
    Ok(GatedMaskSet {
        levels: levels.map(|v| g.value(v).clone()),
    })
}

/// Per-level fusion convolutions.
pub struct FusionNet {
    layers: [ConvInRelu; 4],
}

pub struct FusionOutput {
    pub fused: PyramidVars,
    /// Gated image features at stride 4.
    pub filtered4: Var,
}

impl FusionNet {
    pub const PREFIX: &'static str = "gcgf.fuse";

    pub fn new(channels: [usize; 4]) -> Self {
        let layer = |i: usize| {
            ConvInRelu::new(
                format!("{}{}", Self::PREFIX, STRIDES[i]),
                2 * channels[i],
                channels[i],
                3,
                1,
            )
        };
        Self {
            layers: [layer(0), layer(1), layer(2), layer(3)],
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.layers.iter().for_each(|l| l.init(store, rng));
    }

    pub fn forward(&self, g: &mut Graph, img: &PyramidVars, masks: &[Var; 4], nrm: &PyramidVars) -> FusionOutput {
        let mut fused = img.levels;
        let mut filtered4 = img.levels[0];
        for i in 0..4 {
            let filtered = g.mul(img.levels[i], masks[i]);
            if i == 0 {
                filtered4 = filtered;
            }
            let cat = g.concat(&[filtered, nrm.levels[i]]);
            fused[i] = self.layers[i].forward(g, cat);
        }
        FusionOutput {
            fused: PyramidVars { levels: fused },
            filtered4,
        }
    }
}
