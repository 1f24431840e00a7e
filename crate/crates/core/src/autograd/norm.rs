//! Instance normalisation (per channel over space) and channel layer
//! normalisation (per pixel over channels).

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Variance epsilon shared by both normalisations. A constant channel
/// normalises to exactly zero.
pub const NORM_EPS: f64 = 1e-5;

/// Writes `(x - mean) / sqrt(var + eps)` for the `n` indexed values into
/// `out` and returns the inverse standard deviation.
fn normalise(x: &[f64], idx: impl Fn(usize) -> usize, n: usize, out: &mut [f64]) -> f64 {
    let first = x[idx(0)];
    let mean = if (1..n).all(|i| x[idx(i)] == first) {
        first
    } else {
        (0..n).map(|i| x[idx(i)]).sum::<f64>() / n as f64
    };
    let var = (0..n)
        .map(|i| {
            let d = x[idx(i)] - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    for i in 0..n {
        out[idx(i)] = (x[idx(i)] - mean) * inv;
    }
    inv
}

/// Backward of `xhat = (x - mean) * inv` given `dxhat`.
fn normalise_backward(dxhat: &[f64], xhat: &[f64], idx: impl Fn(usize) -> usize, n: usize, inv: f64, out: &mut [f64]) {
    let nf = n as f64;
    let mean_d = (0..n).map(|i| dxhat[idx(i)]).sum::<f64>() / nf;
    let mean_dx = (0..n).map(|i| dxhat[idx(i)] * xhat[idx(i)]).sum::<f64>() / nf;
    for i in 0..n {
        let j = idx(i);
        out[j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
    }
}

impl<'p> Graph<'p> {
    /// Instance norm without affine terms over `[C, H, W]`.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let hw: usize = shape[1..].iter().product();
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        let mut invs = Vec::with_capacity(c);
        for ch in 0..c {
            invs.push(normalise(xv, |i| ch * hw + i, hw, &mut y));
        }
        let value = Tensor::from_vec(&shape, y);
        self.op(
            value,
            &[x],
            Box::new(move |g, _, out, _| {
                let mut gx = vec![0.0; g.numel()];
                for (ch, &inv) in invs.iter().enumerate() {
                    normalise_backward(g.data(), out.data(), |i| ch * hw + i, hw, inv, &mut gx);
                }
                vec![Some(Tensor::from_vec(out.shape(), gx))]
            }),
        )
    }

    /// LayerNorm across channels at every pixel of `[C, H, W]`, with
    /// per-channel `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let hw: usize = shape[1..].iter().product();
        assert_eq!(self.shape(gamma), &[c], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[c], "layer_norm beta shape");
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut invs = Vec::with_capacity(hw);
        for p in 0..hw {
            invs.push(normalise(xv, |i| i * hw + p, c, &mut xhat));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let y: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i / hw] + bv[i / hw])
            .collect();
        let value = Tensor::from_vec(&shape, y);
        self.op(
            value,
            &[x, gamma, beta],
            Box::new(move |g, ins, _, needs| {
                let gd = g.data();
                let gamma = ins[1].data();
                let gx = needs[0].then(|| {
                    let dxhat: Vec<f64> = gd.iter().enumerate().map(|(i, &d)| d * gamma[i / hw]).collect();
                    let mut gx = vec![0.0; gd.len()];
                    for (p, &inv) in invs.iter().enumerate() {
                        normalise_backward(&dxhat, &xhat, |i| i * hw + p, c, inv, &mut gx);
                    }
                    Tensor::from_vec(&shape, gx)
                });
                let ggamma = needs[1]
                    .then(|| Tensor::from_fn(&[c], |ch| (0..hw).map(|p| gd[ch * hw + p] * xhat[ch * hw + p]).sum()));
                let gbeta = needs[2].then(|| Tensor::from_fn(&[c], |ch| gd[ch * hw..(ch + 1) * hw].iter().sum()));
                vec![gx, ggamma, gbeta]
            }),
        )
    }
}
