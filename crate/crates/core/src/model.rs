//! Assembly of the three network variants and their forward pass.
//!
//! - `sparse_only`: image features only; no gating, no normal branch.
//! - `greaten`: gated image/normal fusion and both matching branches.
//! - `greaten_prior`: `greaten` plus a relative-depth prior aligned by a
//!   learned scale/shift that initialises the refinement loop.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{EncoderConfig, ImageEncoder, NormalEncoder, PyramidVars};
use crate::error::{Error, Result};
use crate::gcgf::{downsample_masks_vars, resize_bilinear, FusionNet, GateConfig, GmNet};
use crate::maps::FloatMap;
use crate::nn::Conv;
use crate::params::ParamStore;
use crate::refine::{
    run_refinement, ContextHead, LoopInput, PriorDistortion, RefineConfig, ScaleShift, UpdateBlock, UPSAMPLE,
};
use crate::sparse_attn::{validate_channels, AttentionTrace, DualMatchingAttention, MatchOutput, SpatialAttention};
use crate::synthdata::StereoSample;
use crate::tensor::Tensor;
use crate::volume::{CombinedVolume, DisparityRegression, GateOutput, VolumeGate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SparseOnly,
    Greaten,
    GreatenPrior,
}

impl Variant {
    pub fn uses_normals(self) -> bool {
        self != Variant::SparseOnly
    }

    pub fn uses_prior(self) -> bool {
        self == Variant::GreatenPrior
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SparseOnly => "sparse_only",
            Variant::Greaten => "greaten",
            Variant::GreatenPrior => "greaten_prior",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub gate: GateConfig,
    /// Sampling points per query pixel.
    pub points: usize,
    pub groups: usize,
    /// Full-resolution disparity range; the volume holds `max_disparity / 4`
    /// candidates.
    pub max_disparity: usize,
    pub refine: RefineConfig,
    pub scale_shift_hidden: usize,
    pub prior: PriorDistortion,
    pub train_iters: usize,
    pub infer_iters: usize,
    /// Apply specular/transparent augmentation to training samples.
    pub sta: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Greaten,
            encoder: EncoderConfig::default(),
            gate: GateConfig::default(),
            points: 8,
            groups: 8,
            max_disparity: 64,
            refine: RefineConfig::default(),
            scale_shift_hidden: 8,
            prior: PriorDistortion::default(),
            train_iters: 6,
            infer_iters: 12,
            sta: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow channel plan sized for single-core CPU training.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                channels: [16, 24, 32, 32],
                extra_depth: 0,
            },
            gate: GateConfig { hidden: 16, layers: 2 },
            refine: RefineConfig {
                hidden: 24,
                context: 16,
                motion: 16,
                head: 24,
                radius: 4,
                global_scale_shift: false,
            },
            ..Self::default()
        }
    }

    pub fn ndisp(&self) -> usize {
        self.max_disparity / UPSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.refine.validate()?;
        let c4 = self.encoder.channels[0];
        validate_channels(c4)?;
        for &c in &self.encoder.channels[1..] {
            validate_channels(c)?;
        }
        if self.max_disparity == 0 || !self.max_disparity.is_multiple_of(UPSAMPLE) {
            return Err(Error::Config(format!(
                "max_disparity {} must be a positive multiple of {UPSAMPLE}",
                self.max_disparity
            )));
        }
        if self.groups == 0 || !c4.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "stride-4 channels {c4} not divisible into {} groups",
                self.groups
            )));
        }
        if self.points == 0 {
            return Err(Error::Config("points must be positive".into()));
        }
        if self.train_iters == 0 || self.infer_iters == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if self.gate.layers == 0 || self.gate.hidden == 0 {
            return Err(Error::Config("gate network needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub left: Tensor,
    pub right: Tensor,
    pub left_normals: Tensor,
    pub right_normals: Tensor,
    /// Quarter-scale relative prior `[1, H/4, W/4]`, required by
    /// `greaten_prior`.
    pub prior: Option<Tensor>,
}

impl ModelInput {
    pub fn from_sample(sample: &StereoSample, prior: Option<Tensor>) -> Self {
        Self {
            left: sample.left_image.to_tensor(),
            right: sample.right_image.to_tensor(),
            left_normals: sample.left_normals.to_tensor(),
            right_normals: sample.right_normals.to_tensor(),
            prior,
        }
    }

    pub fn height(&self) -> usize {
        self.left.dim(1)
    }

    pub fn width(&self) -> usize {
        self.left.dim(2)
    }
}

/// Graph nodes produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Quarter-scale initial disparity in quarter pixels.
    pub d0: Var,
    pub aligned: Option<Var>,
    /// Full-resolution iterates.
    pub iterates: Vec<Var>,
    pub masks_left: Option<[Var; 4]>,
    pub masks_right: Option<[Var; 4]>,
    pub spatial: Vec<AttentionTrace>,
    pub matching: (MatchOutput, MatchOutput),
    pub volume: Var,
    pub gate: GateOutput,
    pub hidden: Vec<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    image_encoder: ImageEncoder,
    normal_encoder: Option<NormalEncoder>,
    gmnet: Option<GmNet>,
    fusion: Option<FusionNet>,
    spatial: Vec<SpatialAttention>,
    matching: DualMatchingAttention,
    volume: CombinedVolume,
    volume_gate: VolumeGate,
    regression: DisparityRegression,
    context_lift: Vec<Conv>,
    context: ContextHead,
    update: UpdateBlock,
    scale_shift: Option<ScaleShift>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.encoder.channels;
        let normals = config.variant.uses_normals();
        let taps = 2 * config.refine.radius + 1;
        Ok(Self {
            image_encoder: ImageEncoder::new(&config.encoder),
            normal_encoder: normals.then(|| NormalEncoder::new(&config.encoder)),
            gmnet: normals.then(|| GmNet::new(c[0], &config.gate)),
            fusion: normals.then(|| FusionNet::new(c)),
            spatial: (0..4)
                .map(|i| SpatialAttention::new(&format!("ssa{}", crate::encoders::STRIDES[i]), c[i], config.points))
                .collect(),
            matching: DualMatchingAttention::new("sdma", c[0], config.points, normals),
            volume: CombinedVolume::new("volume", c[0], config.groups, config.ndisp())?,
            volume_gate: VolumeGate::new("sva", c[0], config.groups),
            regression: DisparityRegression::new("regress", config.groups),
            context_lift: (1..4)
                .map(|i| Conv::linear(format!("ctx.lift{}", crate::encoders::STRIDES[i]), c[i], c[0]))
                .collect(),
            context: ContextHead::new("ctx", 2 * c[0], &config.refine),
            update: UpdateBlock::new("gru", taps * config.groups, &config.refine),
            scale_shift: config.variant.uses_prior().then(|| {
                ScaleShift::new(
                    "scale_shift",
                    config.scale_shift_hidden,
                    config.refine.global_scale_shift,
                )
            }),
            config,
        })
    }

    /// Fresh parameters drawn from `config.seed`.
    pub fn init_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.image_encoder.init(&mut store, &mut rng);
        if let Some(n) = &self.normal_encoder {
            n.init(&mut store, &mut rng);
        }
        if let Some(m) = &self.gmnet {
            m.init(&mut store, &mut rng);
        }
        if let Some(f) = &self.fusion {
            f.init(&mut store, &mut rng);
        }
        self.spatial.iter().for_each(|s| s.init(&mut store, &mut rng));
        self.matching.init(&mut store, &mut rng);
        self.volume.init(&mut store, &mut rng);
        self.volume_gate.init(&mut store, &mut rng);
        self.regression.init(&mut store, &mut rng);
        self.context_lift.iter().for_each(|l| l.init(&mut store, &mut rng));
        self.context.init(&mut store, &mut rng);
        self.update.init(&mut store, &mut rng);
        if let Some(s) = &self.scale_shift {
            s.init(&mut store, &mut rng);
        }
        store
    }

    pub fn gmnet(&self) -> Option<&GmNet> {
        self.gmnet.as_ref()
    }

    pub fn matching(&self) -> &DualMatchingAttention {
        &self.matching
    }

    pub fn scale_shift(&self) -> Option<&ScaleShift> {
        self.scale_shift.as_ref()
    }

    pub fn update_block(&self) -> &UpdateBlock {
        &self.update
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let (h, w) = (input.height(), input.width());
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(
                "forward",
                format!("{h}x{w} input; sides must be multiples of 32"),
            ));
        }
        for (name, t) in [
            ("left image", &input.left),
            ("right image", &input.right),
            ("left normals", &input.left_normals),
            ("right normals", &input.right_normals),
        ] {
            if t.shape() != [3, h, w] {
                return Err(Error::shape(
                    "forward",
                    format!("{name} has shape {:?}, expected [3, {h}, {w}]", t.shape()),
                ));
            }
        }
        if self.config.ndisp() > w / UPSAMPLE {
            return Err(Error::Config(format!(
                "max_disparity {} exceeds image width {w}",
                self.config.max_disparity
            )));
        }
        if self.config.variant.uses_prior() {
            match &input.prior {
                Some(p) if p.shape() == [1, h / UPSAMPLE, w / UPSAMPLE] => {}
                Some(p) => return Err(Error::shape("forward", format!("prior has shape {:?}", p.shape()))),
                None => return Err(Error::Config("the prior variant needs a relative-depth prior".into())),
            }
        }
        Ok(())
    }

    /// Gated fusion for one view: `(fused pyramid, filtered stride-4
    /// features, stride-4 normal features, masks)`.
    fn fuse_view(
        &self,
        g: &mut Graph,
        img: &Tensor,
        nrm: &Tensor,
    ) -> (PyramidVars, Var, Option<Var>, Option<[Var; 4]>) {
        let x = g.constant(img.clone());
        let fi = self.image_encoder.forward(g, x);
        let (Some(nenc), Some(gm), Some(fusion)) = (&self.normal_encoder, &self.gmnet, &self.fusion) else {
            return (fi, fi.levels[0], None, None);
        };
        let n = g.constant(nrm.clone());
        let fnrm = nenc.forward(g, n);
        let (h4, w4) = (img.dim(1) / UPSAMPLE, img.dim(2) / UPSAMPLE);
        let i4 = g.constant(resize_bilinear(img, h4, w4));
        let n4 = g.constant(resize_bilinear(nrm, h4, w4));
        let m4 = gm.forward(g, fi.levels[0], i4, fnrm.levels[0], n4);
        let masks = downsample_masks_vars(g, m4);
        let out = fusion.forward(g, &fi, &masks, &fnrm);
        (out.fused, out.filtered4, Some(fnrm.levels[0]), Some(masks))
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput, iters: usize) -> Result<ForwardVars> {
        self.check_input(input)?;
        let (fused_l, filt_l, nrm_l, masks_l) = self.fuse_view(g, &input.left, &input.left_normals);
        let (fused_r, filt_r, nrm_r, masks_r) = self.fuse_view(g, &input.right, &input.right_normals);

        let mut spatial_out = Vec::with_capacity(4);
        let mut traces = Vec::with_capacity(4);
        for (block, &f) in self.spatial.iter().zip(&fused_l.levels) {
            let (out, tr) = block.forward(g, f);
            spatial_out.push(out);
            traces.push(tr);
        }

        let (ml, mr) = self
            .matching
            .forward(g, fused_l.levels[0], fused_r.levels[0], filt_l, filt_r, nrm_l, nrm_r);
        let volume = self.volume.forward(g, ml.features, mr.features)?;
        let gate = self.volume_gate.forward(g, volume, spatial_out[0]);
        let d0 = self.regression.forward(g, gate.refined);

        let aligned = match (&self.scale_shift, &input.prior) {
            (Some(ss), Some(p)) => {
                let p = g.constant(p.clone());
                Some(ss.forward(g, d0, p).aligned)
            }
            _ => None,
        };

        let mut ctx = spatial_out[0];
        for (i, lift) in self.context_lift.iter().enumerate() {
            let l = lift.forward(g, spatial_out[i + 1]);
            let up = g.upsample_nearest(l, 2 << i);
            ctx = g.add(ctx, up);
        }
        let ctx_in = g.concat(&[fused_l.levels[0], ctx]);
        let (hidden, context) = self.context.forward(g, ctx_in);
        let init = aligned.unwrap_or(d0);
        let loop_out = run_refinement(
            g,
            &self.update,
            LoopInput {
                volume: gate.refined,
                init,
                hidden,
                context,
            },
            self.config.refine.radius,
            iters,
        );
        Ok(ForwardVars {
            d0,
            aligned,
            iterates: loop_out.full,
            masks_left: masks_l,
            masks_right: masks_r,
            spatial: traces,
            matching: (ml, mr),
            volume,
            gate,
            hidden: loop_out.hidden,
        })
    }
}

/// Evaluated outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub d0: Tensor,
    pub aligned: Option<Tensor>,
    pub iterates: Vec<FloatMap>,
    pub mask_left: Option<FloatMap>,
    pub mask_right: Option<FloatMap>,
}

impl Prediction {
    pub fn final_disparity(&self) -> &FloatMap {
        self.iterates.last().expect("at least one iteration")
    }
}

/// Forward without gradient bookkeeping on parameters.
pub fn predict(
    model: &Model,
    params: &ParamStore,
    input: &ModelInput,
    iters: usize,
) -> Result<(Prediction, ForwardSnapshot)> {
    let mut g = Graph::with_params(params);
    let out = model.forward(&mut g, input, iters)?;
    let mask = |m: Option<[Var; 4]>| m.map(|m| FloatMap::from_tensor(g.value(m[0])));
    let snapshot = ForwardSnapshot::capture(&g, &out);
    Ok((
        Prediction {
            d0: g.value(out.d0).clone(),
            aligned: out.aligned.map(|a| g.value(a).clone()),
            iterates: out
                .iterates
                .iter()
                .map(|&v| FloatMap::from_tensor(g.value(v)))
                .collect(),
            mask_left: mask(out.masks_left),
            mask_right: mask(out.masks_right),
        },
        snapshot,
    ))
}

/// Sampling points of the left view's matching attention, for inspection.
#[derive(Clone, Debug)]
pub struct ForwardSnapshot {
    /// `(px, py)` per branch, `[k, h, w]` each.
    pub image_points: (Tensor, Tensor),
    pub normal_points: Option<(Tensor, Tensor)>,
    pub image_weights: Tensor,
}

impl ForwardSnapshot {
    fn capture(g: &Graph, out: &ForwardVars) -> Self {
        let ml = &out.matching.0;
        let pts = |t: &AttentionTrace| (g.value(t.sampled.px).clone(), g.value(t.sampled.py).clone());
        Self {
            image_points: pts(&ml.image),
            normal_points: ml.normal.as_ref().map(pts),
            image_weights: g.value(ml.image.weights).clone(),
        }
    }
}
