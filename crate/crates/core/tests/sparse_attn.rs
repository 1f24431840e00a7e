mod common;

use common::{max_abs_diff, rng, uniform};
use greaten::autograd::{Graph, Var};
use greaten::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use greaten::sparse_attn::*;
use greaten::{Error, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;

/// Scalar bilinear interpolation with zero padding outside the map.
fn bilinear_oracle(feat: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (feat.dim(1) as i64, feat.dim(2) as i64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            feat.at3(c, yi as usize, xi as usize)
        }
    };
    px(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + px(x0 + 1, y0) * fx * (1.0 - fy)
        + px(x0, y0 + 1) * (1.0 - fx) * fy
        + px(x0 + 1, y0 + 1) * fx * fy
}

fn assert_grad(report: &GradCheckReport) {
    assert!(report.max_rel_err() < TOL, "{:?}", report.per_param);
    assert!(
        report.entries_checked() > 0 && report.skipped * 2 < report.entries_checked(),
        "{report:?}"
    );
}

fn all_names(store: &ParamStore) -> Vec<String> {
    store.names().cloned().collect()
}

#[test]
fn grid_sample_matches_scalar_oracle_on_random_points() {
    let mut r = rng(1);
    let feat = uniform(&mut r, &[3, 7, 9], -1.0, 1.0);
    let (k, h, w) = (10, 10, 10);
    let px = uniform(&mut r, &[k, h, w], -1.5, 9.5);
    let py = uniform(&mut r, &[k, h, w], -1.5, 7.5);
    let mut g = Graph::new();
    let (f, x, y) = (g.constant(feat.clone()), g.constant(px.clone()), g.constant(py.clone()));
    let out = g.grid_sample(f, x, y);
    let out = g.value(out);
    assert_eq!(out.shape(), &[k, 3, h, w]);
    for j in 0..k {
        for i in 0..h * w {
            let (xv, yv) = (px.data()[j * h * w + i], py.data()[j * h * w + i]);
            for c in 0..3 {
                let got = out.data()[(j * 3 + c) * h * w + i];
                assert!((got - bilinear_oracle(&feat, c, xv, yv)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn grid_sample_lattice_and_midpoints() {
    let feat = uniform(&mut rng(2), &[2, 7, 9], -1.0, 1.0);
    let mut g = Graph::new();
    let f = g.constant(feat.clone());
    let px = g.constant(Tensor::from_vec(&[2, 1, 1], vec![4.0, 4.5]));
    let py = g.constant(Tensor::from_vec(&[2, 1, 1], vec![3.0, 3.0]));
    let out = g.grid_sample(f, px, py);
    let out = g.value(out);
    for c in 0..2 {
        assert_eq!(out.at4(0, c, 0, 0), feat.at3(c, 3, 4));
        let mid = 0.5 * (feat.at3(c, 3, 4) + feat.at3(c, 3, 5));
        assert!((out.at4(1, c, 0, 0) - mid).abs() < 1e-15);
    }
}

#[test]
fn grid_sample_gradients_match_finite_differences() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    store.insert("feat", uniform(&mut r, &[2, 7, 9], -1.0, 1.0));
    store.insert("px", uniform(&mut r, &[4, 5, 5], -0.8, 8.8));
    store.insert("py", uniform(&mut r, &[4, 5, 5], -0.8, 6.8));
    let report = check_gradients(
        &store,
        &["feat", "px", "py"],
        |g: &mut Graph| {
            let (f, x, y) = (g.param("feat"), g.param("px"), g.param("py"));
            g.grid_sample(f, x, y)
        },
        GradCheckOptions::default(),
    );
    assert_grad(&report);
}

fn sampler_store(s: &KeyPointSampler, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    s.init(&mut store, &mut rng(seed));
    store
}

#[test]
fn zero_offsets_read_each_pixel_of_the_projected_values() {
    let c = 6;
    let s = KeyPointSampler::new("kps", c, 3, SamplingMode::Spatial);
    let mut store = sampler_store(&s, 4);
    store
        .expect_mut(&s.offsets.bias())
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let mut r = rng(5);
    let (q, v) = (
        uniform(&mut r, &[c, 5, 7], -1.0, 1.0),
        uniform(&mut r, &[c, 5, 7], -1.0, 1.0),
    );
    let mut g = Graph::with_params(&store);
    let (qv, vv) = (g.constant(q), g.constant(v));
    let out = s.forward(&mut g, qv, vv);
    let projected = s.value.forward(&mut g, vv);
    let (px, py) = (g.value(out.px), g.value(out.py));
    let values = g.value(out.values);
    let proj = g.value(projected);
    for j in 0..3 {
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(px.at3(j, y, x), x as f64);
                assert_eq!(py.at3(j, y, x), y as f64);
                for ch in 0..c {
                    assert_eq!(values.at4(j, ch, y, x), proj.at3(ch, y, x));
                }
            }
        }
    }
}

fn randomise(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-scale..scale));
    }
}

#[test]
fn epipolar_points_stay_on_the_query_row() {
    let c = 4;
    let s = KeyPointSampler::new("kps", c, 5, SamplingMode::Epipolar);
    for seed in 0..5 {
        let mut store = sampler_store(&s, seed);
        randomise(&mut store, seed + 10, 3.0);
        let mut r = rng(seed + 20);
        let q = uniform(&mut r, &[c, 6, 8], -2.0, 2.0);
        let mut g = Graph::with_params(&store);
        let qv = g.constant(q);
        let out = s.forward(&mut g, qv, qv);
        let py = g.value(out.py);
        for j in 0..5 {
            for y in 0..6 {
                for x in 0..8 {
                    assert_eq!(py.at3(j, y, x), y as f64);
                }
            }
        }
    }
}

#[test]
fn spatial_sampling_composes_projection_and_grid_sample() {
    let c = 4;
    let s = KeyPointSampler::new("kps", c, 4, SamplingMode::Spatial);
    let mut store = sampler_store(&s, 6);
    randomise(&mut store, 7, 1.0);
    let mut r = rng(8);
    let (q, v) = (
        uniform(&mut r, &[c, 6, 8], -1.0, 1.0),
        uniform(&mut r, &[c, 6, 8], -1.0, 1.0),
    );
    let mut g = Graph::with_params(&store);
    let (qv, vv) = (g.constant(q), g.constant(v));
    let out = s.forward(&mut g, qv, vv);
    let proj = s.value.forward(&mut g, vv);
    let (pxc, pyc) = (g.value(out.px).clone(), g.value(out.py).clone());
    let (pxv, pyv) = (g.constant(pxc), g.constant(pyc));
    let direct = g.grid_sample(proj, pxv, pyv);
    assert_eq!(g.value(out.values), g.value(direct));
}

#[test]
fn sampler_gradients_match_finite_differences() {
    let c = 4;
    for mode in [SamplingMode::Spatial, SamplingMode::Epipolar] {
        let s = KeyPointSampler::new("kps", c, 4, mode);
        let mut store = sampler_store(&s, 9);
        randomise(&mut store, 10, 0.3);
        let mut r = rng(11);
        let (q, v) = (
            uniform(&mut r, &[c, 5, 6], -1.0, 1.0),
            uniform(&mut r, &[c, 5, 6], -1.0, 1.0),
        );
        let names = all_names(&store);
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = check_gradients(
            &store,
            &names,
            |g: &mut Graph| {
                let (qv, vv) = (g.constant(q.clone()), g.constant(v.clone()));
                s.forward(g, qv, vv).values
            },
            GradCheckOptions::default(),
        );
        assert_grad(&report);
    }
}

fn ssa_store(block: &SpatialAttention, seed: u64, jitter: f64) -> ParamStore {
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(seed));
    randomise(&mut store, seed + 1, jitter);
    store
}

#[test]
fn ssa_with_self_weights_and_zero_residuals_is_double_layer_norm() {
    let c = 8;
    let block = SpatialAttention::new("ssa", c, 4);
    let mut store = ssa_store(&block, 12, 0.5);
    // Point 0 sits on the query pixel; force all weight onto it.
    store
        .expect_mut(&block.sampler.offsets.weight())
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let ob = store.expect_mut(&block.sampler.offsets.bias());
    ob.data_mut()[0] = 0.0;
    ob.data_mut()[4] = 0.0;
    store
        .expect_mut(&block.attn.weight())
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let ab = store.expect_mut(&block.attn.bias()).data_mut();
    ab.iter_mut().for_each(|v| *v = -1e3);
    ab[0] = 1e3;
    block.proj.init_zero(&mut store);
    block.ffn.init_zero(&mut store);

    let x = uniform(&mut rng(13), &[c, 8, 12], -1.0, 1.0);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x.clone());
    let (out, trace) = block.forward(&mut g, xv);
    let w = g.value(trace.weights);
    assert!(w.data()[..96].iter().all(|&v| v == 1.0));

    let pe = positional_embed(8, 12, c).unwrap();
    let mut h = Graph::with_params(&store);
    let xin = h.constant(x.zip_map(&pe, |a, b| a + b));
    let n1 = block.norm1.forward(&mut h, xin);
    let n2 = block.norm2.forward(&mut h, n1);
    assert!(max_abs_diff(g.value(out), h.value(n2)) < 1e-12);
}

#[test]
fn ssa_weights_sum_to_one_and_shape_is_preserved() {
    let c = 8;
    let block = SpatialAttention::new("ssa", c, 5);
    for seed in 0..5 {
        let store = ssa_store(&block, seed, 2.0);
        let x = uniform(&mut rng(seed + 50), &[c, 6, 10], -3.0, 3.0);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let (out, trace) = block.forward(&mut g, xv);
        assert_eq!(g.shape(out), &[c, 6, 10]);
        let w = g.value(trace.weights);
        for p in 0..60 {
            let s: f64 = (0..5).map(|j| w.data()[j * 60 + p]).sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!((0..5).all(|j| w.data()[j * 60 + p] >= 0.0));
        }
    }
}

#[test]
fn ssa_block_gradients_match_finite_differences() {
    let c = 8;
    let block = SpatialAttention::new("ssa", c, 4);
    let store = ssa_store(&block, 14, 0.3);
    assert!(store.num_scalars() <= 10_000);
    let x = uniform(&mut rng(15), &[c, 8, 12], -1.0, 1.0);
    let names = all_names(&store);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = check_gradients(
        &store,
        &names,
        |g: &mut Graph| {
            let xv = g.constant(x.clone());
            block.forward(g, xv).0
        },
        GradCheckOptions {
            max_entries: Some(24),
            ..Default::default()
        },
    );
    assert_grad(&report);
}

struct SdmaInputs {
    fused: [Tensor; 2],
    filtered: [Tensor; 2],
    normals: [Tensor; 2],
}

fn sdma_inputs(seed: u64, c: usize, h: usize, w: usize) -> SdmaInputs {
    let mut r = rng(seed);
    let mut t = || uniform(&mut r, &[c, h, w], -1.0, 1.0);
    SdmaInputs {
        fused: [t(), t()],
        filtered: [t(), t()],
        normals: [t(), t()],
    }
}

fn run_sdma(block: &DualMatchingAttention, store: &ParamStore, i: &SdmaInputs) -> (Tensor, Tensor, Vec<Tensor>) {
    let mut g = Graph::with_params(store);
    let c = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    let (fl, fr) = (c(&mut g, &i.fused[0]), c(&mut g, &i.fused[1]));
    let (il, ir) = (c(&mut g, &i.filtered[0]), c(&mut g, &i.filtered[1]));
    let (nl, nr) = (c(&mut g, &i.normals[0]), c(&mut g, &i.normals[1]));
    let (l, r) = block.forward(&mut g, fl, fr, il, ir, Some(nl), Some(nr));
    let mut py = vec![];
    for o in [&l, &r] {
        py.push(g.value(o.image.sampled.py).clone());
        py.push(g.value(o.normal.unwrap().sampled.py).clone());
    }
    (g.value(l.features).clone(), g.value(r.features).clone(), py)
}

fn sdma_store(block: &DualMatchingAttention, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(seed));
    randomise(&mut store, seed + 1, 0.5);
    store
}

#[test]
fn sdma_zero_projection_severs_the_normal_branch() {
    let block = DualMatchingAttention::new("sdma", 8, 4, true);
    let mut store = sdma_store(&block, 16);
    store
        .expect_mut(&block.proj.weight())
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let a = sdma_inputs(17, 8, 4, 10);
    let mut b = sdma_inputs(17, 8, 4, 10);
    let mut r = rng(18);
    b.normals = [
        uniform(&mut r, &[8, 4, 10], -9.0, 9.0),
        uniform(&mut r, &[8, 4, 10], -9.0, 9.0),
    ];
    let (la, ra, _) = run_sdma(&block, &store, &a);
    let (lb, rb, _) = run_sdma(&block, &store, &b);
    assert_eq!(la, lb);
    assert_eq!(ra, rb);
}

#[test]
fn sdma_swapping_views_swaps_outputs() {
    let block = DualMatchingAttention::new("sdma", 8, 4, true);
    let store = sdma_store(&block, 19);
    let a = sdma_inputs(20, 8, 4, 10);
    let swapped = SdmaInputs {
        fused: [a.fused[1].clone(), a.fused[0].clone()],
        filtered: [a.filtered[1].clone(), a.filtered[0].clone()],
        normals: [a.normals[1].clone(), a.normals[0].clone()],
    };
    let (l, r, _) = run_sdma(&block, &store, &a);
    let (l2, r2, _) = run_sdma(&block, &store, &swapped);
    assert_eq!(l, r2);
    assert_eq!(r, l2);
}

#[test]
fn sdma_points_lie_on_the_query_row_in_both_branches() {
    let block = DualMatchingAttention::new("sdma", 8, 4, true);
    let mut store = sdma_store(&block, 21);
    randomise(&mut store, 22, 5.0);
    let (_, _, pys) = run_sdma(&block, &store, &sdma_inputs(23, 8, 4, 10));
    for py in pys {
        for j in 0..4 {
            for y in 0..4 {
                for x in 0..10 {
                    assert_eq!(py.at3(j, y, x), y as f64);
                }
            }
        }
    }
}

#[test]
fn sdma_gradients_match_finite_differences() {
    let block = DualMatchingAttention::new("sdma", 8, 4, true);
    let store = sdma_store(&block, 24);
    let i = sdma_inputs(25, 8, 4, 10);
    let names = all_names(&store);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = check_gradients(
        &store,
        &names,
        |g: &mut Graph| {
            let v: Vec<Var> = [&i.fused, &i.filtered, &i.normals]
                .iter()
                .flat_map(|p| p.iter())
                .map(|t| g.constant(t.clone()))
                .collect();
            let (l, r) = block.forward(g, v[0], v[1], v[2], v[3], Some(v[4]), Some(v[5]));
            g.concat(&[l.features, r.features])
        },
        GradCheckOptions {
            max_entries: Some(16),
            ..Default::default()
        },
    );
    assert_grad(&report);
}

#[test]
fn positional_embedding_basics() {
    let pe = positional_embed(5, 7, 16).unwrap();
    for ch in (0..8).step_by(2) {
        assert_eq!(pe.at3(ch, 0, 0), 0.0);
        assert_eq!(pe.at3(ch + 8, 0, 0), 0.0);
    }
    assert_eq!(pe, positional_embed(5, 7, 16).unwrap());
    assert!(matches!(positional_embed(4, 4, 7), Err(Error::Shape { .. })));
    assert!(validate_channels(7).is_err());
}

#[test]
fn positional_embedding_distinguishes_every_column_and_row() {
    for c in [2, 4, 8, 16, 32] {
        let pe = positional_embed(64, 64, c).unwrap();
        let half = c / 2;
        for a in 0..64 {
            for b in a + 1..64 {
                let dx = (0..half)
                    .map(|ch| (pe.at3(ch, 0, a) - pe.at3(ch, 0, b)).abs())
                    .fold(0.0, f64::max);
                let dy = (half..c)
                    .map(|ch| (pe.at3(ch, a, 0) - pe.at3(ch, b, 0)).abs())
                    .fold(0.0, f64::max);
                assert!(dx > 1e-9 && dy > 1e-9, "C={c} positions {a},{b}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kps_points_are_finite_and_epipolar_rows_exact(seed in 0u64..10_000, k in 1usize..10) {
        for mode in [SamplingMode::Spatial, SamplingMode::Epipolar] {
            let s = KeyPointSampler::new("kps", 4, k, mode);
            let mut store = sampler_store(&s, seed);
            randomise(&mut store, seed, 4.0);
            let q = uniform(&mut rng(seed ^ 7), &[4, 3, 5], -5.0, 5.0);
            let mut g = Graph::with_params(&store);
            let qv = g.constant(q);
            let out = s.forward(&mut g, qv, qv);
            prop_assert!(g.value(out.px).is_finite() && g.value(out.values).is_finite());
            if mode == SamplingMode::Epipolar {
                for (i, &v) in g.value(out.py).data().iter().enumerate() {
                    prop_assert_eq!(v, ((i / 5) % 3) as f64);
                }
            }
        }
    }

    #[test]
    fn sdma_preserves_shape(seed in 0u64..1000, h in 1usize..4, w in 2usize..8) {
        let block = DualMatchingAttention::new("sdma", 4, 3, seed % 2 == 0);
        let store = sdma_store(&block, seed);
        let mut r = rng(seed);
        let mut g = Graph::with_params(&store);
        let v: Vec<Var> = (0..6).map(|_| g.constant(uniform(&mut r, &[4, h, w], -1.0, 1.0))).collect();
        let normals = block.normal.is_some();
        let (l, rr) = block.forward(&mut g, v[0], v[1], v[2], v[3], normals.then_some(v[4]), normals.then_some(v[5]));
        prop_assert_eq!(g.shape(l.features), &[4, h, w]);
        prop_assert_eq!(g.shape(rr.features), &[4, h, w]);
    }
}
