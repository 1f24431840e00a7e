//! Training step and the deterministic training loop.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_sta, StaConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::loss::{compute_metrics, stereo_loss, LossBreakdown, MetricReport, DEFAULT_GAMMA, DEFAULT_THRESHOLDS};
use crate::model::{predict, Model, ModelInput};
use crate::optim::{clip_elementwise, AdamW, AdamWConfig, OneCycle};
use crate::params::ParamStore;
use crate::refine::{stub_relative_depth, to_quarter_scale};
use crate::synthdata::StereoSample;
use crate::tensor::Tensor;

/// One supervised example ready for the network.
#[derive(Clone, Debug)]
pub struct Supervised {
    pub input: ModelInput,
    pub gt: Tensor,
    pub valid: Vec<bool>,
}

impl Supervised {
    pub fn from_sample(sample: &StereoSample, prior: Option<Tensor>) -> Self {
        Self {
            input: ModelInput::from_sample(sample, prior),
            gt: sample.disparity_gt.to_tensor(),
            valid: sample.valid_mask.data.clone(),
        }
    }
}

/// Quarter-scale relative prior for `sample`, drawn from `rng`.
pub fn prior_for(model: &Model, sample: &StereoSample, rng: &mut ChaCha8Rng) -> Result<Option<Tensor>> {
    if !model.config.variant.uses_prior() {
        return Ok(None);
    }
    let rel = stub_relative_depth(sample, rng, &model.config.prior);
    to_quarter_scale(&rel).map(Some)
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let iters = parts[0].iterations.len();
    LossBreakdown {
        init: avg(&|p| p.init),
        aligned: parts[0].aligned.map(|_| avg(&|p| p.aligned.unwrap_or(0.0))),
        iterations: (0..iters).map(|i| avg(&|p| p.iterations[i])).collect(),
        total: avg(&|p| p.total),
        gamma: parts[0].gamma,
    }
}

/// Forward, loss, backward, elementwise clipping and one optimiser update
/// on the mean gradient over `batch`. Returns the mean loss terms.
pub fn train_step(
    model: &Model,
    params: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[Supervised],
    lr: f64,
    gamma: f64,
    clip: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut parts = Vec::with_capacity(batch.len());
    for item in batch {
        let mut g = Graph::with_params(params);
        let out = model.forward(&mut g, &item.input, model.config.train_iters)?;
        let loss = stereo_loss(&mut g, out.d0, out.aligned, &out.iterates, &item.gt, &item.valid, gamma)?;
        let back = g.backward(loss.total);
        for (name, t) in g.param_grads(&back) {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
        parts.push(loss.breakdown);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.values_mut().for_each(|t| t.scale_inplace(inv));
    clip_elementwise(&mut grads, clip);
    opt.update(params, &grads, lr);
    Ok(mean_breakdown(&parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub schedule: OneCycle,
    pub adamw: AdamWConfig,
    pub clip: f64,
    pub gamma: f64,
    /// Evaluate the held-out scene every this many steps (0 = never).
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 1,
            schedule: OneCycle::default(),
            adamw: AdamWConfig::default(),
            clip: 1.0,
            gamma: DEFAULT_GAMMA,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// End-point error of the final iterate on the held-out scene.
    pub heldout_epe: Option<f64>,
}

impl LogEntry {
    /// Plain-text rendering with full float precision.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} lr={:e} total={:e} init={:e}",
            self.step, self.lr, self.loss.total, self.loss.init
        );
        if let Some(a) = self.loss.aligned {
            s.push_str(&format!(" aligned={a:e}"));
        }
        for (i, t) in self.loss.iterations.iter().enumerate() {
            s.push_str(&format!(" it{}={t:e}", i + 1));
        }
        if let Some(e) = self.heldout_epe {
            s.push_str(&format!(" heldout_epe={e:e}"));
        }
        s
    }
}

/// Evaluate the final iterate with inference-time iterations.
pub fn evaluate(model: &Model, params: &ParamStore, sample: &StereoSample, prior_seed: u64) -> Result<MetricReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(prior_seed);
    let prior = prior_for(model, sample, &mut rng)?;
    let input = ModelInput::from_sample(sample, prior);
    let (pred, _) = predict(model, params, &input, model.config.infer_iters)?;
    compute_metrics(
        pred.final_disparity(),
        &sample.disparity_gt,
        &sample.valid_mask,
        &sample.occlusion_mask,
        &DEFAULT_THRESHOLDS,
    )
}

/// Drives [`train_step`] over a fixed corpus. Every random choice (scene
/// order, augmentation, prior distortion) comes from one seeded stream.
pub struct Trainer<'m> {
    pub model: &'m Model,
    pub config: TrainConfig,
    pub sta: StaConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, params: ParamStore, config: TrainConfig, sta: StaConfig) -> Result<Self> {
        config.validate()?;
        sta.validate()?;
        let optimizer = AdamW::new(config.adamw.clone(), &params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            config,
            sta,
            params,
            optimizer,
            step: 0,
            rng,
        })
    }

    fn prepare(&mut self, sample: &StereoSample) -> Result<Supervised> {
        let sample = if self.model.config.sta {
            apply_sta(sample, None, &mut self.rng, &self.sta)?.0
        } else {
            sample.clone()
        };
        let prior = prior_for(self.model, &sample, &mut self.rng)?;
        Ok(Supervised::from_sample(&sample, prior))
    }

    /// One step on `batch` scenes drawn uniformly from `corpus`.
    pub fn step(&mut self, corpus: &[StereoSample], heldout: Option<&StereoSample>) -> Result<LogEntry> {
        if corpus.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        let mut batch = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let i = self.rng.gen_range(0..corpus.len());
            batch.push(self.prepare(&corpus[i])?);
        }
        let lr = self.config.schedule.lr(self.step);
        let loss = train_step(
            self.model,
            &mut self.params,
            &mut self.optimizer,
            &batch,
            lr,
            self.config.gamma,
            self.config.clip,
        )?;
        self.step += 1;
        let due = self.config.eval_every > 0
            && (self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.steps);
        let heldout_epe = match heldout {
            Some(s) if due || self.step == 1 => evaluate(self.model, &self.params, s, self.config.seed)?
                .all
                .map(|r| r.epe),
            _ => None,
        };
        Ok(LogEntry {
            step: self.step,
            lr,
            loss,
            heldout_epe,
        })
    }
}
