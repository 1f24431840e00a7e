//! Image and normal feature pyramids at strides 4, 8, 16 and 32.
//!
//! The image encoder is a strided ConvINReLU stack: two stride-2 stem
//! layers reach stride 4, then one stride-2 stage per further level. The
//! normal encoder runs the same downsampling path and then climbs back up
//! with skip connections (a small U-Net), emitting one side output per
//! stride.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::maps::FloatMap;
use crate::nn::ConvInRelu;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channels at strides 4, 8, 16, 32.
    pub channels: [usize; 4],
    /// Extra stride-1 ConvINReLU layers after each strided layer.
    pub extra_depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [48, 64, 96, 128],
            extra_depth: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        Ok(())
    }

    fn stem_channels(&self) -> usize {
        self.channels[0].div_ceil(2).max(1)
    }
}

/// Feature maps `C_i x H/i x W/i` for each stride in [`STRIDES`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn level(&self, stride: usize) -> Option<&Tensor> {
        STRIDES.iter().position(|&s| s == stride).map(|i| &self.levels[i])
    }
}

/// Pyramid levels living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub levels: [Var; 4],
}

impl PyramidVars {
    pub fn values(&self, g: &Graph) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.map(|v| g.value(v).clone()),
        }
    }
}

/// A strided layer followed by `extra_depth` stride-1 layers.
struct Stage {
    layers: Vec<ConvInRelu>,
}

impl Stage {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize, extra: usize) -> Self {
        let mut layers = vec![ConvInRelu::new(format!("{prefix}.0"), cin, cout, 3, stride)];
        for i in 0..extra {
            layers.push(ConvInRelu::new(format!("{prefix}.{}", i + 1), cout, cout, 3, 1));
        }
        Self { layers }
    }

    fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for l in &self.layers {
            x = l.forward(g, x);
        }
        x
    }
}

/// Shared downsampling path: stem to stride 4, then one stage per level.
struct DownPath {
    stem: [Stage; 2],
    stages: [Stage; 3],
}

impl DownPath {
    fn new(prefix: &str, cfg: &EncoderConfig) -> Self {
        let c = cfg.channels;
        let e = cfg.extra_depth;
        Self {
            stem: [
                Stage::new(&format!("{prefix}.stem0"), 3, cfg.stem_channels(), 2, 0),
                Stage::new(&format!("{prefix}.stem1"), cfg.stem_channels(), c[0], 2, e),
            ],
            stages: [
                Stage::new(&format!("{prefix}.down8"), c[0], c[1], 2, e),
                Stage::new(&format!("{prefix}.down16"), c[1], c[2], 2, e),
                Stage::new(&format!("{prefix}.down32"), c[2], c[3], 2, e),
            ],
        }
    }

    fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stem.iter().chain(&self.stages).for_each(|s| s.init(store, rng));
    }

    fn forward(&self, g: &mut Graph, x: Var) -> [Var; 4] {
        let x = self.stem[0].forward(g, x);
        let f4 = self.stem[1].forward(g, x);
        let f8 = self.stages[0].forward(g, f4);
        let f16 = self.stages[1].forward(g, f8);
        let f32_ = self.stages[2].forward(g, f16);
        [f4, f8, f16, f32_]
    }
}

pub struct ImageEncoder {
    down: DownPath,
}

impl ImageEncoder {
    pub const PREFIX: &'static str = "enc_img";

    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            down: DownPath::new(Self::PREFIX, cfg),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.down.init(store, rng);
    }

    /// `x: [3, H, W]`. Works on any size; level sizes are `ceil` of the
    /// stride arithmetic.
    pub fn forward(&self, g: &mut Graph, x: Var) -> PyramidVars {
        PyramidVars {
            levels: self.down.forward(g, x),
        }
    }
}

pub struct NormalEncoder {
    down: DownPath,
    up: [ConvInRelu; 3],
}

impl NormalEncoder {
    pub const PREFIX: &'static str = "enc_nrm";

    pub fn new(cfg: &EncoderConfig) -> Self {
        let c = cfg.channels;
        let p = Self::PREFIX;
        Self {
            down: DownPath::new(p, cfg),
            up: [
                ConvInRelu::new(format!("{p}.up16"), c[3] + c[2], c[2], 3, 1),
                ConvInRelu::new(format!("{p}.up8"), c[2] + c[1], c[1], 3, 1),
                ConvInRelu::new(format!("{p}.up4"), c[1] + c[0], c[0], 3, 1),
            ],
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.down.init(store, rng);
        self.up.iter().for_each(|l| l.init(store, rng));
    }

    /// `x: [3, H, W]` with `H`, `W` divisible by 32.
    pub fn forward(&self, g: &mut Graph, x: Var) -> PyramidVars {
        let [e4, e8, e16, e32] = self.down.forward(g, x);
        let skip_merge = |g: &mut Graph, layer: &ConvInRelu, coarse: Var, skip: Var| {
            let up = g.upsample_nearest(coarse, 2);
            let cat = g.concat(&[up, skip]);
            layer.forward(g, cat)
        };
        let d16 = skip_merge(g, &self.up[0], e32, e16);
        let d8 = skip_merge(g, &self.up[1], d16, e8);
        let d4 = skip_merge(g, &self.up[2], d8, e4);
        PyramidVars {
            levels: [d4, d8, d16, e32],
        }
    }
}

fn check_input(map: &FloatMap, what: &str) -> Result<()> {
    if map.channels != 3 {
        return Err(Error::shape(
            "encode",
            format!("{what} has {} channels, expected 3", map.channels),
        ));
    }
    if map.height == 0 || map.width == 0 || !map.height.is_multiple_of(32) || !map.width.is_multiple_of(32) {
        return Err(Error::shape(
            "encode",
            format!(
                "{what} is {}x{}; both sides must be positive multiples of 32",
                map.height, map.width
            ),
        ));
    }
    Ok(())
}

pub fn encode_image(image: &FloatMap, params: &ParamStore, cfg: &EncoderConfig) -> Result<FeaturePyramid> {
    check_input(image, "image")?;
    let mut g = Graph::with_params(params);
    let x = g.constant(image.to_tensor());
    Ok(ImageEncoder::new(cfg).forward(&mut g, x).values(&g))
}

pub fn encode_normals(normals: &FloatMap, params: &ParamStore, cfg: &EncoderConfig) -> Result<FeaturePyramid> {
    check_input(normals, "normal map")?;
    let mut g = Graph::with_params(params);
    let x = g.constant(normals.to_tensor());
    Ok(NormalEncoder::new(cfg).forward(&mut g, x).values(&g))
}

/// Encode several images independently with the same weights.
pub fn encode_image_batch(
    images: &[FloatMap],
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<Vec<FeaturePyramid>> {
    images.iter().map(|im| encode_image(im, params, cfg)).collect()
}
