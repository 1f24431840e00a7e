//! Elementwise, broadcasting, shape and reduction ops.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Same-rank broadcasting: each dim must match or be 1 on one side.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// For every linear index of `out`, the linear index into `inp` it reads.
fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if inp[d] == 1 { 0 } else { s };
        s *= inp[d];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut lin = 0usize;
    for _ in 0..n {
        map.push(lin);
        for d in (0..rank).rev() {
            idx[d] += 1;
            lin += in_strides[d];
            if idx[d] < out[d] {
                break;
            }
            lin -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_by_map(grad: &Tensor, map: Option<&[usize]>, shape: &[usize]) -> Tensor {
    match map {
        None => grad.clone(),
        Some(map) => {
            let mut out = Tensor::zeros(shape);
            let o = out.data_mut();
            for (g, &j) in grad.data().iter().zip(map) {
                o[j] += g;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl<'p> Graph<'p> {
    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb);
        let ma = (sa != out_shape).then(|| index_map(&out_shape, &sa));
        let mb = (sb != out_shape).then(|| index_map(&out_shape, &sb));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        };
        let data: Vec<f64> = match (&ma, &mb) {
            (None, None) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = ma.as_ref().map_or(i, |m| m[i]);
                    let ib = mb.as_ref().map_or(i, |m| m[i]);
                    f(va[ia], vb[ib])
                })
                .collect(),
        };
        let value = Tensor::from_vec(&out_shape, data);
        self.op(
            value,
            &[a, b],
            Box::new(move |g, inputs, _out, needs| {
                let (ga, gb) = match op {
                    BinOp::Add | BinOp::Sub => {
                        let ga = needs[0].then(|| reduce_by_map(g, ma.as_deref(), &sa));
                        let gb = needs[1].then(|| {
                            let mut t = reduce_by_map(g, mb.as_deref(), &sb);
                            if matches!(op, BinOp::Sub) {
                                t.scale_inplace(-1.0);
                            }
                            t
                        });
                        (ga, gb)
                    }
                    BinOp::Mul => {
                        let (xa, xb) = (inputs[0].data(), inputs[1].data());
                        let gd = g.data();
                        let ga = needs[0].then(|| {
                            let mut out = Tensor::zeros(&sa);
                            let o = out.data_mut();
                            for i in 0..gd.len() {
                                let ia = ma.as_ref().map_or(i, |m| m[i]);
                                let ib = mb.as_ref().map_or(i, |m| m[i]);
                                o[ia] += gd[i] * xb[ib];
                            }
                            out
                        });
                        let gb = needs[1].then(|| {
                            let mut out = Tensor::zeros(&sb);
                            let o = out.data_mut();
                            for i in 0..gd.len() {
                                let ia = ma.as_ref().map_or(i, |m| m[i]);
                                let ib = mb.as_ref().map_or(i, |m| m[i]);
                                o[ib] += gd[i] * xa[ia];
                            }
                            out
                        });
                        (ga, gb)
                    }
                };
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Sub)
    }

    /// Elementwise product with same-rank broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.op(value, &[a], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.op(value, &[a], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 - v);
        self.op(value, &[a], Box::new(|g, _, _, _| vec![Some(g.map(|v| -v))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        if self.tracking_branches() {
            let signs: Vec<i64> = value.data().iter().map(|&v| (v > 0.0) as i64).collect();
            self.note_branches(signs);
        }
        self.op(
            value,
            &[a],
            Box::new(|g, inputs, _, _| vec![Some(g.zip_map(inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.op(
            value,
            &[a],
            Box::new(|g, _, out, _| vec![Some(g.zip_map(out, |gv, y| gv * y * (1.0 - y)))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.op(
            value,
            &[a],
            Box::new(|g, _, out, _| vec![Some(g.zip_map(out, |gv, y| gv * (1.0 - y * y)))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a).to_vec();
        let value = self.value(a).clone().reshape(shape);
        self.op(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(g.clone().reshape(&old))]),
        )
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let lens: Vec<usize> = tensors.iter().map(|t| t.dim(0)).collect();
        let value = Tensor::cat0(&tensors);
        self.op(
            value,
            parts,
            Box::new(move |g, _, _, needs| {
                let mut start = 0;
                lens.iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let piece = need.then(|| g.narrow0(start, len));
                        start += len;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// Slice `start..start + len` along axis 0.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Var {
        let full = self.shape(a).to_vec();
        let value = self.value(a).narrow0(start, len);
        self.op(
            value,
            &[a],
            Box::new(move |g, _, _, _| {
                let inner: usize = full[1..].iter().product();
                let mut out = Tensor::zeros(&full);
                out.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                vec![Some(out)]
            }),
        )
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let value = Tensor::from_vec(&out_shape, out);
        self.op(
            value,
            &[a],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut gx = Tensor::zeros(&shape);
                let d = gx.data_mut();
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        d[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        self.op(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (x[idx(k)] - m).exp();
                    y[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[idx(k)] /= z;
                }
            }
        }
        let value = Tensor::from_vec(&shape, y);
        self.op(
            value,
            &[a],
            Box::new(move |g, _, out, _| {
                let (gd, yd) = (g.data(), out.data());
                let mut gx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(out.shape(), gx))]
            }),
        )
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Logistic function, computed without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
