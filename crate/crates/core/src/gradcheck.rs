//! Central finite-difference checking of analytic parameter gradients.
//!
//! The scalar objective is `sum(out * R)` for a fixed pseudo-random `R`, so
//! every output element contributes with a distinct weight. Entries whose
//! perturbation moves any piecewise op onto another branch (a ReLU changing
//! sign, a sample crossing a bilinear cell, a loss changing regime) are not
//! differentiable across the stencil; they are skipped and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, relative error, entries checked)`.
    pub per_param: Vec<(String, f64, usize)>,
    /// Entries whose stencil straddled a branch change.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn entries_checked(&self) -> usize {
        self.per_param.iter().map(|p| p.2).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per tensor (chosen at random).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn objective<F>(store: &ParamStore, forward: &F, proj: Option<&Tensor>, seed: u64) -> (f64, Tensor, u64)
where
    F: Fn(&mut Graph) -> Var,
{
    let mut g = Graph::with_params(store);
    g.track_branches();
    let out = forward(&mut g);
    let r = proj.cloned().unwrap_or_else(|| projection(g.shape(out), seed));
    let value = g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    (value, r, g.branch_signature().unwrap_or(0))
}

/// Compare analytic and finite-difference gradients for every parameter in
/// `names`. The relative error per tensor is
/// `|a - n| / max(|a|, |n|)` over the checked entries (Euclidean norms).
pub fn check_gradients<F>(store: &ParamStore, names: &[&str], forward: F, opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let (_, proj, base) = objective(store, &forward, None, opts.seed);

    let analytic = {
        let mut g = Graph::with_params(store);
        let out = forward(&mut g);
        let r = g.constant(proj.clone());
        let prod = g.mul(out, r);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        g.param_grads(&grads)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_param = Vec::new();
    let mut skipped = 0;
    let mut work = store.clone();
    for &name in names {
        let n = store.expect(name).numel();
        let zero = Tensor::zeros(store.expect(name).shape());
        let a = analytic.get(name).unwrap_or(&zero);
        let indices: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut checked = 0;
        for &i in &indices {
            let orig = store.expect(name).data()[i];
            work.expect_mut(name).data_mut()[i] = orig + opts.step;
            let (fp, _, sp) = objective(&work, &forward, Some(&proj), opts.seed);
            work.expect_mut(name).data_mut()[i] = orig - opts.step;
            let (fm, _, sm) = objective(&work, &forward, Some(&proj), opts.seed);
            work.expect_mut(name).data_mut()[i] = orig;
            if sp != base || sm != base {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let an = a.data()[i];
            diff2 += (an - numeric).powi(2);
            a2 += an * an;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom };
        per_param.push((name.to_string(), rel, checked));
    }
    GradCheckReport { per_param, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::convex_weights_shape;

    const TOL: f64 = 1e-4;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone());
        }
        s
    }

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn assert_ok(report: GradCheckReport) {
        for (name, err, _) in &report.per_param {
            assert!(*err < TOL, "{name}: relative error {err}");
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let s = store_with(&[
            ("a", rand_tensor(&[2, 3, 4], 1, -1.0, 1.0)),
            ("b", rand_tensor(&[2, 1, 4], 2, 0.2, 1.0)),
        ]);
        let rep = check_gradients(
            &s,
            &["a", "b"],
            |g| {
                let a = g.param("a");
                let b = g.param("b");
                let x = g.mul(a, b);
                let y = g.sub(x, b);
                let y = g.add(y, a);
                let y = g.tanh(y);
                let z = g.sigmoid(a);
                let z = g.one_minus(z);
                let z = g.scale(z, 1.7);
                let z = g.add_scalar(z, 0.3);
                let y = g.mul(y, z);
                let s = g.softmax(y, 1);
                let r = g.sum_axis(s, 2);
                let m = g.mean_all(y);
                let m = g.reshape(m, &[1, 1, 1]);
                let r = g.add(r, m);
                let r2 = g.reshape(r, &[3, 2]);
                let n = g.narrow(a, 1, 1);
                let n = g.reshape(n, &[3, 4]);
                let n = g.sum_all(n);
                let n = g.reshape(n, &[1, 1]);
                let c = g.concat(&[r2, r2]);
                g.add(c, n)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }

    #[test]
    fn relu_away_from_kink() {
        let s = store_with(&[("a", Tensor::from_vec(&[4], vec![-0.7, -0.2, 0.3, 1.1]))]);
        let rep = check_gradients(
            &s,
            &["a"],
            |g| {
                let a = g.param("a");
                g.relu(a)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }

    #[test]
    fn conv_pool_upsample() {
        let s = store_with(&[
            ("x", rand_tensor(&[2, 8, 8], 3, -1.0, 1.0)),
            ("w", rand_tensor(&[3, 2, 3, 3], 4, -0.5, 0.5)),
            ("b", rand_tensor(&[3], 5, -0.5, 0.5)),
            ("w1", rand_tensor(&[2, 3, 1, 1], 6, -0.5, 0.5)),
        ]);
        let rep = check_gradients(
            &s,
            &["x", "w", "b", "w1"],
            |g| {
                let x = g.param("x");
                let w = g.param("w");
                let b = g.param("b");
                let w1 = g.param("w1");
                let y = g.conv2d(x, w, Some(b), 2, 1);
                let y = g.conv2d(y, w1, None, 1, 0);
                let p = g.avg_pool(y, 2);
                let u = g.upsample_nearest(p, 2);
                g.add(u, y)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }

    #[test]
    fn norms() {
        let s = store_with(&[
            ("x", rand_tensor(&[3, 4, 5], 7, -1.0, 1.0)),
            ("gamma", rand_tensor(&[3], 8, 0.5, 1.5)),
            ("beta", rand_tensor(&[3], 9, -0.5, 0.5)),
        ]);
        let rep = check_gradients(
            &s,
            &["x", "gamma", "beta"],
            |g| {
                let x = g.param("x");
                let gm = g.param("gamma");
                let bt = g.param("beta");
                let a = g.instance_norm(x);
                let b = g.layer_norm(x, gm, bt);
                g.add(a, b)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }

    #[test]
    fn grid_sample_features_and_points() {
        let s = store_with(&[
            ("f", rand_tensor(&[2, 5, 6], 10, -1.0, 1.0)),
            ("px", Tensor::from_vec(&[2, 1, 3], vec![0.3, 2.6, 4.2, 1.4, -0.6, 5.3])),
            ("py", Tensor::from_vec(&[2, 1, 3], vec![1.2, 3.7, 0.4, 2.5, 1.6, 3.3])),
        ]);
        let rep = check_gradients(
            &s,
            &["f", "px", "py"],
            |g| {
                let f = g.param("f");
                let px = g.param("px");
                let py = g.param("py");
                g.grid_sample(f, px, py)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }

    #[test]
    fn cost_volumes_and_lookup() {
        let s = store_with(&[
            ("l", rand_tensor(&[4, 3, 7], 11, -1.0, 1.0)),
            ("r", rand_tensor(&[4, 3, 7], 12, -1.0, 1.0)),
            (
                "d",
                rand_tensor(&[1, 3, 7], 13, 0.1, 3.9).map(|v| if (v - v.round()).abs() < 0.05 { v + 0.1 } else { v }),
            ),
        ]);
        let rep = check_gradients(
            &s,
            &["l", "r", "d"],
            |g| {
                let l = g.param("l");
                let r = g.param("r");
                let d = g.param("d");
                let corr = g.group_correlation(l, r, 2, 4);
                let cat = g.concat_volume(l, r, 4);
                let cat = g.narrow(cat, 0, 2);
                let v = g.add(corr, cat);
                g.lookup_cost(v, d, 1)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }

    #[test]
    fn upsampling_ops() {
        let ws = convex_weights_shape(3, 4, 2);
        let s = store_with(&[
            ("d", rand_tensor(&[1, 3, 4], 14, 0.0, 5.0)),
            ("m", rand_tensor(&ws, 15, -1.0, 1.0)),
        ]);
        let rep = check_gradients(
            &s,
            &["d", "m"],
            |g| {
                let d = g.param("d");
                let m = g.param("m");
                let a = g.convex_upsample(d, m, 2);
                let b = g.upsample_bilinear(d, 2, 2.0);
                g.add(a, b)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }

    #[test]
    fn masked_losses() {
        let pred = Tensor::from_vec(&[1, 2, 3], vec![0.2, 1.9, -0.4, 3.0, 0.7, 2.2]);
        let target = Tensor::from_vec(&[1, 2, 3], vec![0.0, 0.1, 0.5, 0.5, 0.0, 2.0]);
        let mask = vec![true, true, true, false, true, true];
        let s = store_with(&[("p", pred)]);
        let rep = check_gradients(
            &s,
            &["p"],
            |g| {
                let p = g.param("p");
                let a = g.masked_smooth_l1(p, &target, &mask, 1.0);
                let b = g.masked_l1(p, &target, &mask);
                g.add(a, b)
            },
            GradCheckOptions::default(),
        );
        assert_ok(rep);
    }
}
