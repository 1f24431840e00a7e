//! Command-line interface: `gen-data`, `augment`, `train`, `eval`, `infer`.
//!
//! Exit codes: 0 on success, 1 for configuration errors (bad flags, bad
//! config files, invalid settings), 2 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::GrayImage;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::apply_sta;
use crate::checkpoint;
use crate::colormap::{colorize, error_image};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::{compute_metrics, MetricAccumulator, MetricReport, DEFAULT_THRESHOLDS};
use crate::maps::FloatMap;
use crate::model::{predict, Model, ModelInput, Variant};
use crate::synthdata::io::{read_pfm, read_sample, write_pfm, write_rgb_png, write_sample, DISP_PFM, META_JSON};
use crate::synthdata::{generate_scene, SceneConfig, StereoSample};
use crate::train::{prior_for, Trainer};

pub const DATA_DIR_ENV: &str = "GREATEN_DATA_DIR";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const STA_RECORD: &str = "sta_record.json";
/// Offset added to the scene seed for the generated held-out scene.
const HELDOUT_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Parser)]
#[command(name = "greaten", version, about = "Stereo matching on synthetic scenes")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print progress lines.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stereo corpus.
    GenData(GenDataArgs),
    /// Preview specular/transparent augmentation on one sample.
    Augment(AugmentArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Compute metrics for a checkpoint or for stored predictions.
    Eval(EvalArgs),
    /// Predict disparity for one sample.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, env = DATA_DIR_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long = "max-disp")]
    pub max_disp: Option<u32>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus root; scenes are generated in memory when absent.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Train on the first N scenes only.
    #[arg(long)]
    pub overfit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long = "checkpoint-every")]
    pub checkpoint_every: Option<u64>,
    /// Enable or disable augmentation (`true`/`false`).
    #[arg(long)]
    pub sta: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = DATA_DIR_ENV)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<sample name>.pfm` predictions, used instead of a model.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample directory.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Write every iterate as PFM and false-colour PNG.
    #[arg(long = "dump-seq")]
    pub dump_seq: Option<PathBuf>,
    /// Write the gated masks as 8-bit PNGs.
    #[arg(long = "dump-masks")]
    pub dump_masks: bool,
    /// Write matching-attention sampling points for pixel `X,Y`.
    #[arg(long = "dump-points", value_parser = parse_pixel)]
    pub dump_points: Option<[usize; 2]>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "sparse_only" => Ok(Variant::SparseOnly),
        "greaten" => Ok(Variant::Greaten),
        "greaten_prior" => Ok(Variant::GreatenPrior),
        _ => Err(format!(
            "unknown variant `{s}` (expected sparse_only, greaten or greaten_prior)"
        )),
    }
}

fn parse_pixel(s: &str) -> std::result::Result<[usize; 2], String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got `{s}`"))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad coordinate `{v}`: {e}"))
    };
    Ok([p(x)?, p(y)?])
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn require(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("missing required path: {what}")))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.verbose > 0 {
        cfg.verbosity = cli.verbose;
    }
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Augment(a) => augment(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Infer(a) => infer(cfg, a),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_JSON).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sample_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    cfg.command = Some("gen-data".into());
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.run.count, a.count);
    set(&mut cfg.scene.seed, a.seed);
    set(&mut cfg.scene.height, a.height);
    set(&mut cfg.scene.width, a.width);
    set(&mut cfg.scene.max_disparity, a.max_disp);
    cfg.scene.validate()?;
    let out = require(cfg.paths.out.clone(), "--out or GREATEN_DATA_DIR")?;
    fs::create_dir_all(&out)?;
    cfg.write_snapshot(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scene.seed);
    for i in 0..cfg.run.count {
        let scene = SceneConfig {
            seed: rng.next_u64() >> 1,
            ..cfg.scene.clone()
        };
        let sample = generate_scene(&scene)?;
        let dir = out.join(format!("sample_{i:04}"));
        write_sample(&sample, &dir)?;
        if cfg.verbosity > 0 {
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn augment(mut cfg: RunConfig, a: AugmentArgs) -> Result<()> {
    cfg.command = Some("augment".into());
    set_path(&mut cfg.paths.input, a.input);
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.sta.seed, a.seed);
    cfg.sta.validate()?;
    let input = require(cfg.paths.input.clone(), "--in")?;
    let out = require(cfg.paths.out.clone(), "--out")?;
    let sample = read_sample(&input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sta.seed);
    let (aug, record) = apply_sta(&sample, None, &mut rng, &cfg.sta)?;
    fs::create_dir_all(&out)?;
    cfg.write_snapshot(&out)?;
    write_rgb_png(&out.join("left.png"), &aug.left_image)?;
    write_rgb_png(&out.join("right.png"), &aug.right_image)?;
    fs::write(out.join(STA_RECORD), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<StereoSample>> {
    let mut samples = match &cfg.paths.data {
        Some(root) => {
            let dirs = sample_dirs(root)?;
            let take = if cfg.run.overfit > 0 {
                cfg.run.overfit
            } else {
                dirs.len()
            };
            dirs.iter()
                .take(take)
                .map(|d| read_sample(d))
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let n = if cfg.run.overfit > 0 {
                cfg.run.overfit
            } else {
                cfg.run.generated_scenes
            };
            (0..n as u64)
                .map(|i| {
                    generate_scene(&SceneConfig {
                        seed: cfg.scene.seed + i,
                        ..cfg.scene.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if cfg.run.overfit > 0 && samples.len() < cfg.run.overfit {
        return Err(Error::Config(format!(
            "--overfit {} but only {} samples available",
            cfg.run.overfit,
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Config("no training samples found".into()));
    }
    samples.shrink_to_fit();
    Ok(samples)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    cfg.command = Some("train".into());
    set_path(&mut cfg.paths.data, a.data);
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.train.steps, a.steps);
    set(&mut cfg.run.overfit, a.overfit);
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
        cfg.model.seed = seed;
        cfg.scene.seed = seed;
    }
    set(&mut cfg.model.variant, a.variant);
    set(&mut cfg.train.schedule.max_lr, a.lr);
    set(&mut cfg.train.batch, a.batch);
    set(&mut cfg.run.checkpoint_every, a.checkpoint_every);
    set(&mut cfg.model.sta, a.sta);
    cfg.train.schedule.total_steps = cfg.train.steps;
    cfg.validate()?;
    let out = require(cfg.paths.out.clone(), "--out")?;

    let corpus = load_corpus(&cfg)?;
    let first = &corpus[0];
    let heldout = generate_scene(&SceneConfig {
        seed: cfg.scene.seed.wrapping_add(HELDOUT_SEED_OFFSET),
        height: first.height(),
        width: first.width(),
        max_disparity: first.meta.max_disparity,
        ..cfg.scene.clone()
    })?;
    let model = Model::new(cfg.model.clone())?;
    let params = model.init_params();
    fs::create_dir_all(&out)?;
    cfg.write_snapshot(&out)?;
    let mut log = fs::File::create(out.join(TRAIN_LOG))?;
    let mut trainer = Trainer::new(&model, params, cfg.train.clone(), cfg.sta.clone())?;
    for _ in 0..cfg.train.steps {
        let entry = trainer.step(&corpus, Some(&heldout))?;
        let line = entry.to_line();
        writeln!(log, "{line}")?;
        if cfg.verbosity > 0 {
            println!("{line}");
        }
        let every = cfg.run.checkpoint_every;
        if every > 0 && entry.step % every == 0 {
            checkpoint::save(
                &out.join("checkpoints").join(format!("step_{:06}", entry.step)),
                &model.config,
                &trainer.params,
                entry.step,
            )?;
        }
    }
    log.flush()?;
    checkpoint::save(&out.join("checkpoint"), &model.config, &trainer.params, trainer.step)?;
    Ok(())
}

#[derive(Serialize)]
struct SampleMetrics {
    name: String,
    report: MetricReport,
}

#[derive(Serialize)]
struct EvalReport {
    samples: Vec<SampleMetrics>,
    pooled: MetricReport,
}

fn model_input(model: &Model, sample: &StereoSample, seed: u64) -> Result<ModelInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = prior_for(model, sample, &mut rng)?;
    Ok(ModelInput::from_sample(sample, prior))
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    cfg.command = Some("eval".into());
    set_path(&mut cfg.paths.data, a.data);
    set_path(&mut cfg.paths.checkpoint, a.checkpoint);
    set_path(&mut cfg.paths.predictions, a.pred);
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.run.iters, a.iters);
    let data = require(cfg.paths.data.clone(), "--data or GREATEN_DATA_DIR")?;
    let out = require(cfg.paths.out.clone(), "--out")?;
    let model = match (&cfg.paths.checkpoint, &cfg.paths.predictions) {
        (Some(ck), None) => Some(checkpoint::load_model(ck)?),
        (None, Some(_)) => None,
        _ => return Err(Error::Config("eval needs exactly one of --checkpoint or --pred".into())),
    };
    let mut pooled = MetricAccumulator::default();
    let mut samples = Vec::new();
    for dir in sample_dirs(&data)? {
        let sample = read_sample(&dir)?;
        let name = sample_name(&dir);
        let pred = match (&model, &cfg.paths.predictions) {
            (Some((m, params, _)), _) => {
                let iters = if cfg.run.iters > 0 {
                    cfg.run.iters
                } else {
                    m.config.infer_iters
                };
                let input = model_input(m, &sample, cfg.train.seed)?;
                predict(m, params, &input, iters)?.0.final_disparity().clone()
            }
            (None, Some(pdir)) => read_pfm(&pdir.join(format!("{name}.pfm")))?,
            (None, None) => unreachable!("checked above"),
        };
        pooled.add(&pred, &sample.disparity_gt, &sample.valid_mask, &sample.occlusion_mask)?;
        let report = compute_metrics(
            &pred,
            &sample.disparity_gt,
            &sample.valid_mask,
            &sample.occlusion_mask,
            &DEFAULT_THRESHOLDS,
        )?;
        samples.push(SampleMetrics { name, report });
    }
    let report = EvalReport {
        samples,
        pooled: pooled.report(&DEFAULT_THRESHOLDS),
    };
    fs::create_dir_all(&out)?;
    cfg.write_snapshot(&out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("metrics.csv"), report.pooled.to_csv())?;
    if cfg.verbosity > 0 {
        print!("{}", report.pooled.to_csv());
    }
    Ok(())
}

#[derive(Serialize)]
struct PointDump {
    pixel: [usize; 2],
    quarter_pixel: [usize; 2],
    image_branch: Vec<[f64; 3]>,
    normal_branch: Option<Vec<[f64; 2]>>,
}

fn write_mask_png(path: &Path, m: &FloatMap) -> Result<()> {
    let img = GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
        image::Luma([crate::synthdata::io::quantize(m.at(0, y as usize, x as usize))])
    });
    img.save(path)?;
    Ok(())
}

fn infer(mut cfg: RunConfig, a: InferArgs) -> Result<()> {
    cfg.command = Some("infer".into());
    set_path(&mut cfg.paths.checkpoint, a.checkpoint);
    set_path(&mut cfg.paths.input, a.input);
    set_path(&mut cfg.paths.out, a.out);
    set_path(&mut cfg.paths.dump_seq, a.dump_seq);
    set(&mut cfg.run.iters, a.iters);
    cfg.run.dump_masks |= a.dump_masks;
    if a.dump_points.is_some() {
        cfg.run.dump_points = a.dump_points;
    }
    let ck = require(cfg.paths.checkpoint.clone(), "--checkpoint")?;
    let input = require(cfg.paths.input.clone(), "--input")?;
    let out = require(cfg.paths.out.clone(), "--out")?;
    let (model, params, _) = checkpoint::load_model(&ck)?;
    let sample = read_sample(&input)?;
    if let Some([x, y]) = cfg.run.dump_points {
        if x >= sample.width() || y >= sample.height() {
            return Err(Error::Config(format!("--dump-points {x},{y} is outside the image")));
        }
    }
    let iters = if cfg.run.iters > 0 {
        cfg.run.iters
    } else {
        model.config.infer_iters
    };
    let mi = model_input(&model, &sample, cfg.train.seed)?;
    let (pred, snap) = predict(&model, &params, &mi, iters)?;
    let max_disp = model.config.max_disparity as f64;

    fs::create_dir_all(&out)?;
    cfg.write_snapshot(&out)?;
    let disp = pred.final_disparity();
    write_pfm(&out.join(DISP_PFM), disp)?;
    colorize(disp, max_disp).save(out.join("disp.png"))?;
    error_image(disp, &sample.disparity_gt, &sample.valid_mask, 4.0).save(out.join("error.png"))?;
    let report = compute_metrics(
        disp,
        &sample.disparity_gt,
        &sample.valid_mask,
        &sample.occlusion_mask,
        &DEFAULT_THRESHOLDS,
    )?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;

    if let Some(seq) = &cfg.paths.dump_seq {
        fs::create_dir_all(seq)?;
        write_pfm(&seq.join("d0_quarter.pfm"), &FloatMap::from_tensor(&pred.d0))?;
        if let Some(a) = &pred.aligned {
            write_pfm(&seq.join("aligned_quarter.pfm"), &FloatMap::from_tensor(a))?;
        }
        for (i, d) in pred.iterates.iter().enumerate() {
            write_pfm(&seq.join(format!("iter_{:02}.pfm", i + 1)), d)?;
            colorize(d, max_disp).save(seq.join(format!("iter_{:02}.png", i + 1)))?;
        }
    }
    if cfg.run.dump_masks {
        match (&pred.mask_left, &pred.mask_right) {
            (Some(l), Some(r)) => {
                write_mask_png(&out.join("mask_left.png"), l)?;
                write_mask_png(&out.join("mask_right.png"), r)?;
            }
            _ => {
                return Err(Error::Config(format!(
                    "variant {} has no gated masks",
                    model.config.variant
                )))
            }
        }
    }
    if let Some([x, y]) = cfg.run.dump_points {
        let (qx, qy) = (x / crate::refine::UPSAMPLE, y / crate::refine::UPSAMPLE);
        let (px, py) = &snap.image_points;
        let (k, h, w) = (px.dim(0), px.dim(1), px.dim(2));
        let at = |t: &crate::tensor::Tensor, j: usize| t.data()[(j * h + qy) * w + qx];
        let dump = PointDump {
            pixel: [x, y],
            quarter_pixel: [qx, qy],
            image_branch: (0..k)
                .map(|j| [at(px, j), at(py, j), at(&snap.image_weights, j)])
                .collect(),
            normal_branch: snap
                .normal_points
                .as_ref()
                .map(|(nx, ny)| (0..k).map(|j| [at(nx, j), at(ny, j)]).collect()),
        };
        fs::write(out.join("points.json"), serde_json::to_string_pretty(&dump)?)?;
    }
    Ok(())
}
