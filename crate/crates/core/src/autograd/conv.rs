//! 2D convolution (im2col + GEMM), pooling and nearest upsampling.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage. `a` is
/// `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides describe
    // exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let kk = self.k * self.k;
        let mut cols = vec![0.0; self.cin * kk * n];
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * n;
                    let dst = &mut cols[row..row + n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let kk = self.k * self.k;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * n;
                    let src = &cols[row..row + n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let prow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                prow[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<'p> Graph<'p> {
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`, optional `b: [Cout]`, zero
    /// padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co,Ci,k,k], got {ws:?}");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch: weight {ws:?} input {xs:?}");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (cout, k) = (ws[0], ws[2]);
        assert!(
            xs[1] + 2 * pad >= k && xs[2] + 2 * pad >= k,
            "conv2d kernel larger than input"
        );
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            k,
            stride,
            pad,
            ho: (xs[1] + 2 * pad - k) / stride + 1,
            wo: (xs[2] + 2 * pad - k) / stride + 1,
        };
        let n = geom.ho * geom.wo;
        let kdim = geom.cin * k * k;

        let mut out = vec![0.0; cout * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if geom.is_pointwise() {
                gemm(cout, kdim, n, wv, false, xv, false, &mut out, 0.0);
            } else {
                let cols = geom.im2col(xv);
                gemm(cout, kdim, n, wv, false, &cols, false, &mut out, 0.0);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), cout, "conv2d bias length");
                for (co, &bias) in bv.iter().enumerate() {
                    for v in &mut out[co * n..(co + 1) * n] {
                        *v += bias;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[cout, geom.ho, geom.wo], out);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        self.op(
            value,
            &inputs,
            Box::new(move |g, ins, _, needs| {
                let gd = g.data();
                let (xv, wv) = (ins[0].data(), ins[1].data());
                let cols_owned;
                let cols: &[f64] = if geom.is_pointwise() {
                    xv
                } else if needs[1] {
                    cols_owned = geom.im2col(xv);
                    &cols_owned
                } else {
                    &[]
                };
                let gx = needs[0].then(|| {
                    let mut dcols = vec![0.0; kdim * n];
                    gemm(kdim, cout, n, wv, true, gd, false, &mut dcols, 0.0);
                    let data = if geom.is_pointwise() {
                        dcols
                    } else {
                        geom.col2im(&dcols)
                    };
                    Tensor::from_vec(&[geom.cin, geom.h, geom.w], data)
                });
                let gw = needs[1].then(|| {
                    let mut dw = vec![0.0; cout * kdim];
                    gemm(cout, n, kdim, gd, false, cols, true, &mut dw, 0.0);
                    Tensor::from_vec(&[cout, geom.cin, geom.k, geom.k], dw)
                });
                let mut result = vec![gx, gw];
                if ins.len() == 3 {
                    let gb = needs[2].then(|| Tensor::from_fn(&[cout], |co| gd[co * n..(co + 1) * n].iter().sum()));
                    result.push(gb);
                }
                result
            }),
        )
    }

    /// Non-overlapping average pooling of `[C, H, W]` by `factor`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(
            h % factor == 0 && w % factor == 0,
            "avg_pool: {xs:?} not divisible by {factor}"
        );
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv.at3(ch, y, xx);
                    let o = &mut out.data_mut()[(ch * ho + y / factor) * wo + xx / factor];
                    *o += v;
                }
            }
        }
        out.scale_inplace(inv);
        self.op(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx.set3(ch, y, xx, g.at3(ch, y / factor, xx / factor) * inv);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[c, h * factor, w * factor]);
        for ch in 0..c {
            for y in 0..h * factor {
                for xx in 0..w * factor {
                    out.set3(ch, y, xx, xv.at3(ch, y / factor, xx / factor));
                }
            }
        }
        self.op(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..h * factor {
                        for xx in 0..w * factor {
                            let v = gx.at3(ch, y / factor, xx / factor) + g.at3(ch, y, xx);
                            gx.set3(ch, y / factor, xx / factor, v);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
