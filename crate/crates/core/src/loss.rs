//! Training loss and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::maps::{BoolMap, FloatMap};
use crate::refine::UPSAMPLE;
use crate::tensor::Tensor;

/// Threshold of the SmoothL1 penalty on the initial and aligned disparities.
pub const SMOOTH_L1_DELTA: f64 = 1.0;

/// Default iteration weight decay.
pub const DEFAULT_GAMMA: f64 = 0.9;

/// Scalar loss terms. `iterations[i]` is the weighted term
/// `gamma^(N-1-i) * L_i` for the zero-based iteration `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub init: f64,
    pub aligned: Option<f64>,
    pub iterations: Vec<f64>,
    pub total: f64,
    pub gamma: f64,
}

/// Weights `gamma^(N-1-i)` for `N` iterations, so the last one weighs 1.
pub fn iteration_weights(n: usize, gamma: f64) -> Vec<f64> {
    (0..n).map(|i| gamma.powi((n - 1 - i) as i32)).collect()
}

impl LossBreakdown {
    /// Assemble from unweighted per-iteration losses.
    pub fn combine(init: f64, aligned: Option<f64>, raw_iterations: &[f64], gamma: f64) -> Self {
        let iterations: Vec<f64> = iteration_weights(raw_iterations.len(), gamma)
            .iter()
            .zip(raw_iterations)
            .map(|(w, l)| w * l)
            .collect();
        let total = init + aligned.unwrap_or(0.0) + iterations.iter().sum::<f64>();
        Self {
            init,
            aligned,
            iterations,
            total,
            gamma,
        }
    }
}

/// Loss nodes on a graph together with their values.
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Supervises the quarter-scale initial (and optional aligned) disparity
/// after bilinear upsampling, plus every full-resolution iterate, over
/// `valid` pixels.
pub fn stereo_loss(
    g: &mut Graph,
    d0: Var,
    aligned: Option<Var>,
    iterates: &[Var],
    gt: &Tensor,
    valid: &[bool],
    gamma: f64,
) -> Result<LossVars> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma {gamma} outside (0, 1]")));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptyRegion("no valid pixels to supervise".into()));
    }
    let check = |name: &str, v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                term: name.to_string(),
                value: v,
            })
        }
    };
    let up = g.upsample_bilinear(d0, UPSAMPLE, UPSAMPLE as f64);
    let l_init = g.masked_smooth_l1(up, gt, valid, SMOOTH_L1_DELTA);
    let init = check("init", g.value(l_init).item())?;
    let mut terms = vec![l_init];
    let mut aligned_value = None;
    if let Some(a) = aligned {
        let up = g.upsample_bilinear(a, UPSAMPLE, UPSAMPLE as f64);
        let l = g.masked_smooth_l1(up, gt, valid, SMOOTH_L1_DELTA);
        aligned_value = Some(check("aligned", g.value(l).item())?);
        terms.push(l);
    }
    let weights = iteration_weights(iterates.len(), gamma);
    let mut raw = Vec::with_capacity(iterates.len());
    for (i, (&d, &w)) in iterates.iter().zip(&weights).enumerate() {
        let l = g.masked_l1(d, gt, valid);
        raw.push(check(&format!("iteration {}", i + 1), g.value(l).item())?);
        terms.push(g.scale(l, w));
    }
    let all = g.concat(&terms);
    let total = g.sum_all(all);
    let breakdown = LossBreakdown::combine(init, aligned_value, &raw, gamma);
    check("total", breakdown.total)?;
    Ok(LossVars { total, breakdown })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub threshold: f64,
    /// Percentage of pixels with error strictly above `threshold`.
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub count: usize,
    pub epe: f64,
    pub bad: Vec<Threshold>,
}

/// Regions with no pixels are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub all: Option<RegionMetrics>,
    pub noc: Option<RegionMetrics>,
    pub occ: Option<RegionMetrics>,
}

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

fn region(errors: &[f64], thresholds: &[f64]) -> Option<RegionMetrics> {
    if errors.is_empty() {
        return None;
    }
    let n = errors.len() as f64;
    Some(RegionMetrics {
        count: errors.len(),
        epe: errors.iter().sum::<f64>() / n,
        bad: thresholds
            .iter()
            .map(|&t| Threshold {
                threshold: t,
                percent: 100.0 * errors.iter().filter(|&&e| e > t).count() as f64 / n,
            })
            .collect(),
    })
}

/// EPE and bad-pixel rates over all valid, non-occluded and occluded
/// pixels. Predictions are clamped at zero.
pub fn compute_metrics(
    pred: &FloatMap,
    gt: &FloatMap,
    valid: &BoolMap,
    occluded: &BoolMap,
    thresholds: &[f64],
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, valid, occluded)?;
    Ok(acc.report(thresholds))
}

/// Pools per-pixel errors over several samples.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    noc: Vec<f64>,
    occ: Vec<f64>,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &FloatMap, gt: &FloatMap, valid: &BoolMap, occluded: &BoolMap) -> Result<()> {
        let want = (gt.height, gt.width);
        for (name, hw) in [
            ("prediction", (pred.height, pred.width)),
            ("valid mask", (valid.height, valid.width)),
            ("occlusion mask", (occluded.height, occluded.width)),
        ] {
            if hw != want {
                return Err(Error::SizeMismatch {
                    a: format!("{name} ({}x{})", hw.0, hw.1),
                    b: format!("ground truth ({}x{})", want.0, want.1),
                });
            }
        }
        for y in 0..gt.height {
            for x in 0..gt.width {
                if !valid.get(y, x) {
                    continue;
                }
                let e = (pred.at(0, y, x).max(0.0) as f64 - gt.at(0, y, x) as f64).abs();
                if occluded.get(y, x) {
                    self.occ.push(e);
                } else {
                    self.noc.push(e);
                }
            }
        }
        Ok(())
    }

    pub fn report(&self, thresholds: &[f64]) -> MetricReport {
        let all: Vec<f64> = self.noc.iter().chain(&self.occ).copied().collect();
        MetricReport {
            all: region(&all, thresholds),
            noc: region(&self.noc, thresholds),
            occ: region(&self.occ, thresholds),
        }
    }
}

impl MetricReport {
    /// `region,count,epe,<D..>` rows; absent regions are omitted.
    pub fn to_csv(&self) -> String {
        let thresholds: Vec<f64> = [&self.all, &self.noc, &self.occ]
            .iter()
            .find_map(|r| r.as_ref().map(|r| r.bad.iter().map(|t| t.threshold).collect()))
            .unwrap_or_default();
        let mut s = String::from("region,count,epe");
        for t in &thresholds {
            s.push_str(&format!(",D{t}"));
        }
        s.push('\n');
        for (name, r) in [("all", &self.all), ("noc", &self.noc), ("occ", &self.occ)] {
            if let Some(r) = r {
                s.push_str(&format!("{name},{},{}", r.count, r.epe));
                for t in &r.bad {
                    s.push_str(&format!(",{}", t.percent));
                }
                s.push('\n');
            }
        }
        s
    }
}
