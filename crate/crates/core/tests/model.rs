mod common;

use common::{rng, uniform};
use greaten::augment::StaConfig;
use greaten::checkpoint;
use greaten::encoders::EncoderConfig;
use greaten::gcgf::GateConfig;
use greaten::model::*;
use greaten::optim::AdamW;
use greaten::refine::RefineConfig;
use greaten::synthdata::{generate_scene, SceneConfig, StereoSample};
use greaten::train::*;
use greaten::{Error, ParamStore, Tensor};

fn micro(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        encoder: EncoderConfig {
            channels: [8, 8, 8, 8],
            extra_depth: 0,
        },
        gate: GateConfig { hidden: 4, layers: 1 },
        points: 2,
        groups: 4,
        max_disparity: 16,
        refine: RefineConfig {
            hidden: 6,
            context: 4,
            motion: 4,
            head: 6,
            radius: 1,
            global_scale_shift: false,
        },
        scale_shift_hidden: 4,
        train_iters: 2,
        infer_iters: 3,
        ..ModelConfig::default()
    }
}

fn scene(seed: u64) -> StereoSample {
    generate_scene(&SceneConfig {
        height: 32,
        width: 64,
        max_disparity: 16,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

/// Every output value as raw bits, so that `-0.0` and `0.0` differ.
fn output_bits(model: &Model, params: &ParamStore, input: &ModelInput) -> Vec<u64> {
    let (pred, _) = predict(model, params, input, 3).unwrap();
    let mut bits: Vec<u64> = pred.d0.data().iter().map(|v| v.to_bits()).collect();
    for it in &pred.iterates {
        bits.extend(it.data.iter().map(|v| v.to_bits() as u64));
    }
    bits
}

#[test]
fn sparse_only_ignores_normals() {
    let model = Model::new(micro(Variant::SparseOnly)).unwrap();
    let params = model.init_params();
    let mut input = ModelInput::from_sample(&scene(1), None);
    let before = output_bits(&model, &params, &input);
    let mut r = rng(2);
    input.left_normals = uniform(&mut r, &[3, 32, 64], -1.0, 1.0);
    input.right_normals = uniform(&mut r, &[3, 32, 64], -1.0, 1.0);
    assert_eq!(before, output_bits(&model, &params, &input));
}

#[test]
fn closed_gate_and_zeroed_image_branch_ignore_images() {
    let cfg = micro(Variant::Greaten);
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = model.init_params();
    let head = model.gmnet().unwrap().head();
    head.init_zero(&mut params);
    params.expect_mut(&head.bias()).data_mut()[0] = -1e3;
    // The matching projection reads [image branch, normal branch]; drop
    // the image half.
    let c = cfg.encoder.channels[0];
    let proj = params.expect_mut(&model.matching().proj.weight());
    let cin = proj.dim(1);
    for (i, v) in proj.data_mut().iter_mut().enumerate() {
        if (i / model.matching().proj.k.pow(2)) % cin < c {
            *v = 0.0;
        }
    }

    let mut input = ModelInput::from_sample(&scene(3), None);
    let (pred, _) = predict(&model, &params, &input, 3).unwrap();
    assert!(pred.mask_left.unwrap().data.iter().all(|&m| m == 0.0));
    let before = output_bits(&model, &params, &input);
    let mut r = rng(4);
    input.left = uniform(&mut r, &[3, 32, 64], 0.0, 1.0);
    input.right = uniform(&mut r, &[3, 32, 64], 0.0, 1.0);
    assert_eq!(before, output_bits(&model, &params, &input));
}

#[test]
fn image_perturbation_changes_the_open_model() {
    let model = Model::new(micro(Variant::Greaten)).unwrap();
    let params = model.init_params();
    let mut input = ModelInput::from_sample(&scene(5), None);
    let before = output_bits(&model, &params, &input);
    input.left = uniform(&mut rng(6), &[3, 32, 64], 0.0, 1.0);
    assert_ne!(before, output_bits(&model, &params, &input));
}

#[test]
fn structural_ranges_on_a_forward_pass() {
    let cfg = micro(Variant::Greaten);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init_params();
    let (pred, snap) = predict(&model, &params, &ModelInput::from_sample(&scene(7), None), 3).unwrap();
    let top = (cfg.ndisp() - 1) as f64;
    assert!(pred.d0.data().iter().all(|&d| (0.0..=top).contains(&d)));
    for m in [pred.mask_left.unwrap(), pred.mask_right.unwrap()] {
        assert!(m.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert_eq!(pred.iterates.len(), 3);
    assert_eq!(pred.iterates[0].height, 32);
    let (_, py) = &snap.image_points;
    for k in 0..py.dim(0) {
        for y in 0..py.dim(1) {
            for x in 0..py.dim(2) {
                assert_eq!(py.at3(k, y, x), y as f64);
            }
        }
    }
}

#[test]
fn zero_scale_prior_alignment_is_the_shift() {
    let model = Model::new(micro(Variant::GreatenPrior)).unwrap();
    let mut params = model.init_params();
    let ss = model.scale_shift().unwrap();
    params
        .expect_mut(&ss.conv[1].weight())
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    params
        .expect_mut(&ss.conv[1].bias())
        .data_mut()
        .copy_from_slice(&[0.0, 1.75]);
    let prior = uniform(&mut rng(8), &[1, 8, 16], 0.0, 4.0);
    let (pred, _) = predict(&model, &params, &ModelInput::from_sample(&scene(9), Some(prior)), 1).unwrap();
    assert!(pred.aligned.unwrap().data().iter().all(|&v| v == 1.75));
}

#[test]
fn forward_rejects_bad_inputs() {
    let model = Model::new(micro(Variant::GreatenPrior)).unwrap();
    let params = model.init_params();
    let input = ModelInput::from_sample(&scene(10), None);
    assert!(matches!(predict(&model, &params, &input, 1), Err(Error::Config(_))));
    let mut bad = ModelInput::from_sample(&scene(10), Some(Tensor::zeros(&[1, 8, 16])));
    bad.left = Tensor::zeros(&[3, 32, 48]);
    assert!(matches!(predict(&model, &params, &bad, 1), Err(Error::Shape { .. })));
    let wide = ModelConfig {
        max_disparity: 128,
        ..micro(Variant::Greaten)
    };
    let m = Model::new(wide).unwrap();
    let r = predict(&m, &m.init_params(), &ModelInput::from_sample(&scene(10), None), 1);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let model = Model::new(micro(Variant::Greaten)).unwrap();
    let mut params = model.init_params();
    let before = params.clone();
    let tc = TrainConfig::default();
    let mut opt = AdamW::new(tc.adamw.clone(), &params);
    let batch = [Supervised::from_sample(&scene(11), None)];
    let loss = train_step(&model, &mut params, &mut opt, &batch, 0.0, tc.gamma, tc.clip).unwrap();
    assert!(loss.total.is_finite() && loss.total > 0.0);
    assert_eq!(params, before);
}

#[test]
fn training_is_deterministic() {
    let model = Model::new(micro(Variant::Greaten)).unwrap();
    let corpus = [scene(12), scene(13)];
    let run = || {
        let tc = TrainConfig {
            steps: 12,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(&model, model.init_params(), tc, StaConfig::default()).unwrap();
        (0..12)
            .map(|_| tr.step(&corpus, None).unwrap().to_line())
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|l| !l.contains("NaN")));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = micro(Variant::GreatenPrior);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init_params();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &cfg, &params, 7).unwrap();
    let (loaded, lp, manifest) = checkpoint::load_model(dir.path()).unwrap();
    assert_eq!(manifest.step, 7);
    assert_eq!(loaded.config, cfg);
    // Blobs are f32, so the reference is the f32-rounded store.
    let mut rounded = params.clone();
    for (_, t) in rounded.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    assert_eq!(lp, rounded);
    let sample = scene(14);
    let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let prior = prior_for(&model, &sample, &mut r).unwrap();
    let input = ModelInput::from_sample(&sample, prior);
    assert_eq!(output_bits(&model, &rounded, &input), output_bits(&loaded, &lp, &input));
}
