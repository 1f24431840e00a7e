//! Stereo-specific differentiable ops: bilinear point sampling, group-wise
//! correlation, concatenation volumes, cost lookup, convex upsampling and
//! masked regression losses.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Number of coarse neighbours mixed by convex upsampling (3x3).
pub const CONVEX_TAPS: usize = 9;

/// Shape of the (softmaxed) convex upsampling weights for a coarse map.
pub fn convex_weights_shape(h: usize, w: usize, factor: usize) -> [usize; 4] {
    [CONVEX_TAPS, factor * factor, h, w]
}

/// Bilinear corner weights and indices at `(px, py)` on an `h x w` grid.
/// Out-of-range corners get `None`.
#[inline]
fn corners(px: f64, py: f64, h: usize, w: usize) -> ([Option<usize>; 4], [f64; 4], f64, f64) {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |x: isize, y: isize| {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
    };
    (
        [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        fx,
        fy,
    )
}

impl<'p> Graph<'p> {
    /// Sample `feat: [C, hf, wf]` at `k` points per query pixel.
    /// `px, py: [k, h, w]` are pixel coordinates on `feat`; the result is
    /// `[k, C, h, w]`. Samples outside the map read zeros.
    pub fn grid_sample(&mut self, feat: Var, px: Var, py: Var) -> Var {
        let fs = self.shape(feat).to_vec();
        let ps = self.shape(px).to_vec();
        assert_eq!(ps, self.shape(py), "grid_sample: px/py shape mismatch");
        let (c, hf, wf) = (fs[0], fs[1], fs[2]);
        let (k, h, w) = (ps[0], ps[1], ps[2]);
        let hw = h * w;
        let fv = self.value(feat).data();
        let (xv, yv) = (self.value(px).data(), self.value(py).data());
        let mut out = vec![0.0; k * c * hw];
        for j in 0..k {
            for p in 0..hw {
                let (idx, wt, _, _) = corners(xv[j * hw + p], yv[j * hw + p], hf, wf);
                for ch in 0..c {
                    let plane = &fv[ch * hf * wf..(ch + 1) * hf * wf];
                    let mut s = 0.0;
                    for q in 0..4 {
                        if let Some(i) = idx[q] {
                            s += wt[q] * plane[i];
                        }
                    }
                    out[(j * c + ch) * hw + p] = s;
                }
            }
        }
        if self.tracking_branches() {
            let cells: Vec<i64> = xv.iter().chain(yv).map(|v| v.floor() as i64).collect();
            self.note_branches(cells);
        }
        let value = Tensor::from_vec(&[k, c, h, w], out);
        self.op(
            value,
            &[feat, px, py],
            Box::new(move |g, ins, _, needs| {
                let gd = g.data();
                let fv = ins[0].data();
                let (xv, yv) = (ins[1].data(), ins[2].data());
                let mut gfeat = needs[0].then(|| vec![0.0; c * hf * wf]);
                let mut gx = needs[1].then(|| vec![0.0; k * hw]);
                let mut gy = needs[2].then(|| vec![0.0; k * hw]);
                for j in 0..k {
                    for p in 0..hw {
                        let (idx, wt, fx, fy) = corners(xv[j * hw + p], yv[j * hw + p], hf, wf);
                        let mut dx = 0.0;
                        let mut dy = 0.0;
                        for ch in 0..c {
                            let go = gd[(j * c + ch) * hw + p];
                            if go == 0.0 {
                                continue;
                            }
                            let base = ch * hf * wf;
                            if let Some(gf) = gfeat.as_mut() {
                                for q in 0..4 {
                                    if let Some(i) = idx[q] {
                                        gf[base + i] += go * wt[q];
                                    }
                                }
                            }
                            let v = |q: usize| idx[q].map_or(0.0, |i| fv[base + i]);
                            let (v00, v10, v01, v11) = (v(0), v(1), v(2), v(3));
                            dx += go * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                            dy += go * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[j * hw + p] = dx;
                        }
                        if let Some(gy) = gy.as_mut() {
                            gy[j * hw + p] = dy;
                        }
                    }
                }
                vec![
                    gfeat.map(|d| Tensor::from_vec(&[c, hf, wf], d)),
                    gx.map(|d| Tensor::from_vec(&[k, h, w], d)),
                    gy.map(|d| Tensor::from_vec(&[k, h, w], d)),
                ]
            }),
        )
    }

    /// Group-wise correlation volume `[G, D, H, W]`:
    /// `alpha * <left_g(x, y), right_g(x - d, y)>` with `alpha = G / C`;
    /// candidates with `x - d < 0` are zero.
    pub fn group_correlation(&mut self, left: Var, right: Var, groups: usize, ndisp: usize) -> Var {
        let s = self.shape(left).to_vec();
        assert_eq!(s, self.shape(right), "group_correlation: view shapes differ");
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(
            c % groups == 0,
            "group_correlation: {c} channels not divisible by {groups}"
        );
        let cg = c / groups;
        let alpha = 1.0 / cg as f64;
        let (lv, rv) = (self.value(left).data(), self.value(right).data());
        let mut out = vec![0.0; groups * ndisp * h * w];
        for g in 0..groups {
            for d in 0..ndisp {
                for y in 0..h {
                    let orow = &mut out[((g * ndisp + d) * h + y) * w..((g * ndisp + d) * h + y + 1) * w];
                    for ch in g * cg..(g + 1) * cg {
                        let lrow = &lv[(ch * h + y) * w..(ch * h + y + 1) * w];
                        let rrow = &rv[(ch * h + y) * w..(ch * h + y + 1) * w];
                        for x in d..w {
                            orow[x] += lrow[x] * rrow[x - d];
                        }
                    }
                    for v in orow.iter_mut() {
                        *v *= alpha;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[groups, ndisp, h, w], out);
        self.op(
            value,
            &[left, right],
            Box::new(move |gr, ins, _, needs| {
                let gd = gr.data();
                let (lv, rv) = (ins[0].data(), ins[1].data());
                let mut gl = vec![0.0; c * h * w];
                let mut grt = vec![0.0; c * h * w];
                for g in 0..groups {
                    for d in 0..ndisp {
                        for y in 0..h {
                            let grow = &gd[((g * ndisp + d) * h + y) * w..((g * ndisp + d) * h + y + 1) * w];
                            for ch in g * cg..(g + 1) * cg {
                                let off = (ch * h + y) * w;
                                for x in d..w {
                                    let go = grow[x] * alpha;
                                    gl[off + x] += go * rv[off + x - d];
                                    grt[off + x - d] += go * lv[off + x];
                                }
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(&[c, h, w], gl)),
                    needs[1].then(|| Tensor::from_vec(&[c, h, w], grt)),
                ]
            }),
        )
    }

    /// Concatenation volume `[2G, D, H, W]`: the first `G` channels repeat
    /// `left(g, y, x)` for every candidate, the last `G` hold
    /// `right(g, y, x - d)` (zero when out of range).
    pub fn concat_volume(&mut self, left: Var, right: Var, ndisp: usize) -> Var {
        let s = self.shape(left).to_vec();
        assert_eq!(s, self.shape(right), "concat_volume: view shapes differ");
        let (g, h, w) = (s[0], s[1], s[2]);
        let (lv, rv) = (self.value(left).data(), self.value(right).data());
        let mut out = vec![0.0; 2 * g * ndisp * h * w];
        for ch in 0..g {
            for d in 0..ndisp {
                for y in 0..h {
                    let src = (ch * h + y) * w;
                    let dl = ((ch * ndisp + d) * h + y) * w;
                    let dr = (((g + ch) * ndisp + d) * h + y) * w;
                    out[dl..dl + w].copy_from_slice(&lv[src..src + w]);
                    for x in d..w {
                        out[dr + x] = rv[src + x - d];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[2 * g, ndisp, h, w], out);
        self.op(
            value,
            &[left, right],
            Box::new(move |gr, _, _, needs| {
                let gd = gr.data();
                let mut gl = vec![0.0; g * h * w];
                let mut grt = vec![0.0; g * h * w];
                for ch in 0..g {
                    for d in 0..ndisp {
                        for y in 0..h {
                            let src = (ch * h + y) * w;
                            let dl = ((ch * ndisp + d) * h + y) * w;
                            let dr = (((g + ch) * ndisp + d) * h + y) * w;
                            for x in 0..w {
                                gl[src + x] += gd[dl + x];
                            }
                            for x in d..w {
                                grt[src + x - d] += gd[dr + x];
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(&[g, h, w], gl)),
                    needs[1].then(|| Tensor::from_vec(&[g, h, w], grt)),
                ]
            }),
        )
    }

    /// Linearly interpolated volume values at candidates
    /// `disp - r ..= disp + r`. `volume: [G, D, H, W]`, `disp: [1, H, W]`,
    /// result `[(2r + 1) * G, H, W]` ordered offset-major. Candidates outside
    /// `[0, D - 1]` read zeros.
    pub fn lookup_cost(&mut self, volume: Var, disp: Var, radius: usize) -> Var {
        let vs = self.shape(volume).to_vec();
        let (g, nd, h, w) = (vs[0], vs[1], vs[2], vs[3]);
        assert_eq!(self.shape(disp), &[1, h, w], "lookup_cost: disparity shape");
        let taps = 2 * radius + 1;
        let hw = h * w;
        let vv = self.value(volume).data();
        let dv = self.value(disp).data();
        let mut out = vec![0.0; taps * g * hw];
        let read = move |vv: &[f64], ch: usize, d: isize, p: usize| -> f64 {
            if d < 0 || d >= nd as isize {
                0.0
            } else {
                vv[(ch * nd + d as usize) * hw + p]
            }
        };
        for p in 0..hw {
            for t in 0..taps {
                let pos = dv[p] + t as f64 - radius as f64;
                let d0 = pos.floor();
                let f = pos - d0;
                let d0 = d0 as isize;
                for ch in 0..g {
                    out[(t * g + ch) * hw + p] = (1.0 - f) * read(vv, ch, d0, p) + f * read(vv, ch, d0 + 1, p);
                }
            }
        }
        if self.tracking_branches() {
            let cells: Vec<i64> = dv.iter().map(|v| v.floor() as i64).collect();
            self.note_branches(cells);
        }
        let value = Tensor::from_vec(&[taps * g, h, w], out);
        self.op(
            value,
            &[volume, disp],
            Box::new(move |gr, ins, _, needs| {
                let gd = gr.data();
                let (vv, dv) = (ins[0].data(), ins[1].data());
                let mut gvol = needs[0].then(|| vec![0.0; g * nd * hw]);
                let mut gdisp = vec![0.0; hw];
                for p in 0..hw {
                    for t in 0..taps {
                        let pos = dv[p] + t as f64 - radius as f64;
                        let d0 = pos.floor();
                        let f = pos - d0;
                        let d0 = d0 as isize;
                        for ch in 0..g {
                            let go = gd[(t * g + ch) * hw + p];
                            gdisp[p] += go * (read(vv, ch, d0 + 1, p) - read(vv, ch, d0, p));
                            if let Some(gv) = gvol.as_mut() {
                                if d0 >= 0 && d0 < nd as isize {
                                    gv[(ch * nd + d0 as usize) * hw + p] += go * (1.0 - f);
                                }
                                if d0 + 1 >= 0 && d0 + 1 < nd as isize {
                                    gv[(ch * nd + (d0 + 1) as usize) * hw + p] += go * f;
                                }
                            }
                        }
                    }
                }
                vec![
                    gvol.map(|d| Tensor::from_vec(&[g, nd, h, w], d)),
                    needs[1].then(|| Tensor::from_vec(&[1, h, w], gdisp)),
                ]
            }),
        )
    }

    /// Convex upsampling: each fine pixel is a convex combination of the
    /// 3x3 coarse neighbourhood (edge-replicated), then scaled by `factor`
    /// since disparity is measured in pixels. `disp: [1, h, w]`,
    /// `weights: [9, factor^2, h, w]` already normalised over axis 0.
    pub fn convex_upsample(&mut self, disp: Var, weights: Var, factor: usize) -> Var {
        let ds = self.shape(disp).to_vec();
        let (h, w) = (ds[1], ds[2]);
        assert_eq!(
            self.shape(weights),
            &convex_weights_shape(h, w, factor),
            "convex_upsample: weight shape"
        );
        let hw = h * w;
        let ff = factor * factor;
        let (fh, fw) = (h * factor, w * factor);
        let scale = factor as f64;
        let neighbour = move |y: usize, x: usize, n: usize| -> usize {
            let ny = (y as isize + n as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
            let nx = (x as isize + n as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
            ny * w + nx
        };
        let dv = self.value(disp).data();
        let wv = self.value(weights).data();
        let mut out = vec![0.0; fh * fw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for sy in 0..factor {
                    for sx in 0..factor {
                        let s = sy * factor + sx;
                        let mut acc = 0.0;
                        for n in 0..CONVEX_TAPS {
                            acc += wv[(n * ff + s) * hw + p] * dv[neighbour(y, x, n)];
                        }
                        out[(y * factor + sy) * fw + x * factor + sx] = scale * acc;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[1, fh, fw], out);
        self.op(
            value,
            &[disp, weights],
            Box::new(move |gr, ins, _, needs| {
                let gd = gr.data();
                let (dv, wv) = (ins[0].data(), ins[1].data());
                let mut gdisp = vec![0.0; hw];
                let mut gw = vec![0.0; CONVEX_TAPS * ff * hw];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        for sy in 0..factor {
                            for sx in 0..factor {
                                let s = sy * factor + sx;
                                let go = scale * gd[(y * factor + sy) * fw + x * factor + sx];
                                for n in 0..CONVEX_TAPS {
                                    let q = neighbour(y, x, n);
                                    gdisp[q] += go * wv[(n * ff + s) * hw + p];
                                    gw[(n * ff + s) * hw + p] = go * dv[q];
                                }
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(&[1, h, w], gdisp)),
                    needs[1].then(|| Tensor::from_vec(&convex_weights_shape(h, w, factor), gw)),
                ]
            }),
        )
    }

    /// Bilinear upsampling of `[C, h, w]` by `factor` with pixel-centre
    /// alignment and edge clamping; values are multiplied by `value_scale`.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize, value_scale: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (fh, fw) = (h * factor, w * factor);
        let taps_y = bilinear_taps(h, fh);
        let taps_x = bilinear_taps(w, fw);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * fh * fw];
        for ch in 0..c {
            for (yy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                    let at = |y: usize, x: usize| xv[(ch * h + y) * w + x];
                    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    out[(ch * fh + yy) * fw + xx] = value_scale * v;
                }
            }
        }
        let value = Tensor::from_vec(&[c, fh, fw], out);
        self.op(
            value,
            &[x],
            Box::new(move |gr, _, _, _| {
                let gd = gr.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for (yy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                            let go = value_scale * gd[(ch * fh + yy) * fw + xx];
                            let base = ch * h * w;
                            gx[base + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                            gx[base + y0 * w + x1] += go * (1.0 - fy) * fx;
                            gx[base + y1 * w + x0] += go * fy * (1.0 - fx);
                            gx[base + y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[c, h, w], gx))]
            }),
        )
    }

    /// Mean over `mask`ed pixels of SmoothL1(`pred - target`) with threshold
    /// `delta`.
    pub fn masked_smooth_l1(&mut self, pred: Var, target: &Tensor, mask: &[bool], delta: f64) -> Var {
        self.masked_regression(pred, target, mask, Some(delta))
    }

    /// Mean over `mask`ed pixels of `|pred - target|`.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Var {
        self.masked_regression(pred, target, mask, None)
    }

    fn masked_regression(&mut self, pred: Var, target: &Tensor, mask: &[bool], delta: Option<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "masked loss: prediction/target shape");
        assert_eq!(pv.numel(), mask.len(), "masked loss: mask length");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "masked loss over an empty mask");
        let inv = 1.0 / count as f64;
        let diff: Vec<f64> = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .map(|((&p, &t), &m)| if m { p - t } else { 0.0 })
            .collect();
        let total: f64 = diff
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&e, _)| match delta {
                Some(d) if e.abs() < d => 0.5 * e * e / d,
                Some(d) => e.abs() - 0.5 * d,
                None => e.abs(),
            })
            .sum();
        let shape = pv.shape().to_vec();
        if self.tracking_branches() {
            let regimes: Vec<i64> = diff
                .iter()
                .map(|&e| match delta {
                    Some(d) => (e.abs() < d) as i64 + 2 * (e > 0.0) as i64,
                    None => (e > 0.0) as i64,
                })
                .collect();
            self.note_branches(regimes);
        }
        self.op(
            Tensor::scalar(total * inv),
            &[pred],
            Box::new(move |g, _, _, _| {
                let s = g.item() * inv;
                let gp: Vec<f64> = diff
                    .iter()
                    .map(|&e| {
                        let de = match delta {
                            Some(d) if e.abs() < d => e / d,
                            _ => e.signum() * (e != 0.0) as u8 as f64,
                        };
                        s * de
                    })
                    .collect();
                vec![Some(Tensor::from_vec(&shape, gp))]
            }),
        )
    }
}

/// For each fine index, the two coarse taps and the blend factor.
fn bilinear_taps(coarse: usize, fine: usize) -> Vec<(usize, usize, f64)> {
    let ratio = coarse as f64 / fine as f64;
    (0..fine)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (coarse - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(coarse - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sample_lattice_point_is_exact() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 1.5));
        let px = g.constant(Tensor::from_vec(&[1, 1, 1], vec![2.0]));
        let py = g.constant(Tensor::from_vec(&[1, 1, 1], vec![1.0]));
        let v = g.grid_sample(f, px, py);
        assert_eq!(g.value(v).data(), &[6.0 * 1.5, 18.0 * 1.5]);
    }

    #[test]
    fn lookup_integer_disparity_reads_volume() {
        let mut g = Graph::new();
        let vol = g.constant(Tensor::from_fn(&[2, 5, 1, 2], |i| i as f64));
        let d = g.constant(Tensor::from_vec(&[1, 1, 2], vec![3.0, 0.0]));
        let out = g.lookup_cost(vol, d, 0);
        let v = g.value(out);
        // group 0, pixel 0, d=3 -> index (0*5+3)*2+0 = 6
        assert_eq!(v.data(), &[6.0, 1.0, 16.0, 11.0]);
    }

    #[test]
    fn bilinear_upsample_constant_scales() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::full(&[1, 3, 4], 2.5));
        let up = g.upsample_bilinear(d, 4, 4.0);
        assert_eq!(g.shape(up), &[1, 12, 16]);
        assert!(g.value(up).data().iter().all(|&v| (v - 10.0).abs() < 1e-12));
    }

    #[test]
    fn smooth_l1_branches() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[1, 1, 2], vec![0.5, 2.0]));
        let t = Tensor::zeros(&[1, 1, 2]);
        let a = g.masked_smooth_l1(p, &t, &[true, false], 1.0);
        let b = g.masked_smooth_l1(p, &t, &[false, true], 1.0);
        assert!((g.value(a).item() - 0.125).abs() < 1e-15);
        assert!((g.value(b).item() - 1.5).abs() < 1e-15);
    }
}
