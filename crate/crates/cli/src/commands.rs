use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mdvae_core::corpus::{
    build_clean_corpus, build_noisy_corpus, load_motion, save_motion, CorpusConfig, CorpusManifest, MotionKind, MotionSequence, MANIFEST_FILE,
};
use mdvae_core::denoiser::{
    denoise_optimization, denoise_regression, train_denoiser, DenoiserConfig, DenoiserModel, DenoiserTrainConfig, Denoised, NoisyObservationSeq,
    OptimizeConfig, OutputMode,
};
use mdvae_core::kinematics::{Observation3D, RawPose};
use mdvae_core::metrics_eval::{observation_accel, threshold_report, v2v, write_csv, Baselines, EvalReport, SequenceMetrics, ThresholdReport};
use mdvae_core::motion_dvae::{continue_training, init_training, DvaeConfig, DvaeModel, EpochLog, TrainConfig, TrainState};
use mdvae_core::trajectory_fit::{fit_global_trajectory, load_detections, save_detections, Detection2D, PinholeCamera, TrajectoryConfig};

use crate::run::{load_config, require, set, usage, OutDir, RESOLVED_CONFIG};

pub const PRIOR_FILE: &str = "prior.json";
pub const TRAIN_STATE_FILE: &str = "train_state.json";
pub const DENOISER_FILE: &str = "denoiser.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const THRESHOLD_FILE: &str = "threshold_report.json";
pub const DENOISED_DIR: &str = "denoised";
pub const CAMERA_FILE: &str = "camera.json";
pub const DETECTIONS_DIR: &str = "detections";

// ---------------------------------------------------------------- gen-corpus

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenCorpusConfig {
    pub corpus: CorpusConfig,
    /// Also write a noisy twin corpus at this axis-angle noise level.
    pub sigma: Option<f64>,
    pub noise_seed: u64,
    pub noise_root: bool,
    /// Also render 2D detections of the test split through a fixed camera.
    pub detections: bool,
}

impl Default for GenCorpusConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            sigma: None,
            noise_seed: 1,
            noise_root: true,
            detections: false,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Sequence duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
    /// Comma-separated motion kinds (walk, wave, squat, smooth_random).
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    kinds: Option<Vec<MotionKind>>,
    /// Write a noisy twin corpus with this noise level (rad).
    #[arg(long)]
    sigma: Option<f64>,
    /// Leave the root orientation noise-free in the noisy twin.
    #[arg(long)]
    no_root_noise: bool,
    /// Render test-split 2D detections and a camera for trajectory fitting.
    #[arg(long)]
    detections: bool,
}

fn parse_kind(s: &str) -> std::result::Result<MotionKind, String> {
    s.parse().map_err(|e: mdvae_core::Error| e.to_string())
}

/// The camera used for rendered detections: four metres in front of the
/// origin at chest height.
pub fn scenario_camera() -> mdvae_core::Result<PinholeCamera> {
    PinholeCamera::looking_at([0.0, 1.3, -4.0], [0.0, 0.9, 0.0], 1000.0, 1280.0, 720.0)
}

pub fn gen_corpus(args: GenCorpusArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: GenCorpusConfig = load_config(args.config.as_deref())?;
    set!(cfg.corpus.n_train, args.n_train);
    set!(cfg.corpus.n_val, args.n_val);
    set!(cfg.corpus.n_test, args.n_test);
    set!(cfg.corpus.duration_s, args.duration);
    set!(cfg.corpus.fps, args.fps);
    set!(cfg.corpus.kinds, args.kinds);
    set!(cfg.corpus.seed, seed);
    if let Some(s) = seed {
        cfg.noise_seed = s.wrapping_add(1);
    }
    if args.sigma.is_some() {
        cfg.sigma = args.sigma;
    }
    if args.no_root_noise {
        cfg.noise_root = false;
    }
    cfg.detections |= args.detections;
    if let Some(s) = cfg.sigma {
        if !(s >= 0.0) {
            return Err(usage(format!("--sigma must be non-negative, got {s}")));
        }
    }
    if !(cfg.corpus.duration_s > 0.0 && cfg.corpus.fps > 0.0) {
        return Err(usage("--duration and --fps must be positive"));
    }

    let dir = OutDir::open(out)?;
    dir.write_json(RESOLVED_CONFIG, &cfg)?;
    let manifest = build_clean_corpus(&dir.path, &cfg.corpus)?;
    let total: usize = manifest.splits.values().map(Vec::len).sum();
    println!("wrote {total} sequences and {}", dir.join(MANIFEST_FILE).display());
    if let Some(sigma) = cfg.sigma {
        let noisy_dir = dir.join(format!("noisy_sigma{sigma}"));
        let noisy = build_noisy_corpus(&dir.join(MANIFEST_FILE), &noisy_dir, sigma, cfg.noise_seed, cfg.noise_root)?;
        let spec = noisy.corruption.as_ref().expect("noisy manifest records its corruption");
        println!(
            "wrote noisy twin corpus {} (test-split observation V2V {:.2} cm)",
            noisy_dir.join(MANIFEST_FILE).display(),
            spec.baseline_v2v_cm.get("test").copied().unwrap_or(0.0)
        );
    }
    if cfg.detections {
        let camera = scenario_camera()?;
        camera.save(&dir.join(CAMERA_FILE))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        for (rel, path) in manifest.split("test")?.iter().zip(manifest.resolve(&manifest_path, "test")?) {
            let seq = load_motion(&path)?;
            let dets: Vec<Detection2D> = seq.observations().iter().map(|o| Detection2D::render(&o.joints, &camera, 1.0)).collect();
            let target = dir.join(DETECTIONS_DIR).join(Path::new(rel).with_extension("jsonl"));
            std::fs::create_dir_all(target.parent().expect("detection files live in a directory"))?;
            save_detections(&dets, &target)?;
        }
        println!("wrote test-split detections under {}", dir.join(DETECTIONS_DIR).display());
    }
    Ok(())
}

// --------------------------------------------------------------- train-prior

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPriorConfig {
    pub model: DvaeConfig,
    pub train: TrainConfig,
}

impl Default for TrainPriorConfig {
    fn default() -> Self {
        Self {
            model: DvaeConfig {
                d_z: 16,
                hidden: 64,
                embed: 32,
                mlp_hidden: 64,
                integrate_body: true,
                ..DvaeConfig::default()
            },
            train: TrainConfig {
                lr: 3e-3,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainPriorArgs {
    /// Clean corpus manifest.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Continue from the checkpoint and optimizer state in this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total epochs (the schedule still follows --epochs).
    #[arg(long)]
    stop_after: Option<usize>,
}

fn loss_csv_prior(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,kl_weight,train_total,train_rec,train_mesh,train_kl,val_total\n");
    for l in log {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.epoch,
            l.kl_weight,
            l.train.total,
            l.train.rec,
            l.train.mesh,
            l.train.kl,
            l.val.as_ref().map(|v| v.total.to_string()).unwrap_or_default()
        ));
    }
    s
}

pub fn train_prior(args: TrainPriorArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: TrainPriorConfig = load_config(args.config.as_deref())?;
    set!(cfg.train.epochs, args.epochs);
    set!(cfg.train.lr, args.lr);
    set!(cfg.train.batch_size, args.batch_size);
    set!(cfg.model.d_z, args.d_z);
    if let Some(h) = args.hidden {
        cfg.model.hidden = h;
        cfg.model.mlp_hidden = h;
        cfg.model.embed = (h / 2).max(1);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    require(&args.corpus, "corpus manifest", "create it with `mdvae gen-corpus`")?;
    let manifest = CorpusManifest::load(&args.corpus)?;
    let train = manifest.load_split(&args.corpus, "train")?;
    let val = manifest.load_split(&args.corpus, "val").unwrap_or_default();

    let dir = OutDir::open(out)?;
    dir.write_json(RESOLVED_CONFIG, &cfg)?;
    let (model, state, mut prev_log) = match &args.resume {
        None => {
            let (m, s) = init_training(&train, cfg.model.clone(), &cfg.train)?;
            (m, s, Vec::new())
        }
        Some(r) => {
            require(&r.join(PRIOR_FILE), "checkpoint", "point --resume at a train-prior output directory")?;
            let m = DvaeModel::load(&r.join(PRIOR_FILE))?;
            if m.config != cfg.model {
                return Err(usage("--resume checkpoint was trained with a different model config"));
            }
            let text = std::fs::read_to_string(r.join(TRAIN_STATE_FILE)).with_context(|| format!("reading {}", r.join(TRAIN_STATE_FILE).display()))?;
            let s: TrainState = serde_json::from_str(&text).map_err(|e| mdvae_core::Error::parse(TRAIN_STATE_FILE, e.to_string()))?;
            let log_path = r.join("log.json");
            let log: Vec<EpochLog> = match std::fs::read_to_string(&log_path) {
                Ok(t) => serde_json::from_str(&t).map_err(|e| mdvae_core::Error::parse(log_path.display().to_string(), e.to_string()))?,
                Err(_) => Vec::new(),
            };
            log::info!("resuming after epoch {}", s.epochs_done);
            (m, s, log)
        }
    };
    let until = args.stop_after.unwrap_or(cfg.train.epochs);
    let t0 = Instant::now();
    let outcome = continue_training(model, state, &train, &val, &cfg.train, until)?;
    prev_log.extend(outcome.log);
    outcome.model.save(&dir.join(PRIOR_FILE))?;
    dir.write_json(TRAIN_STATE_FILE, &outcome.state)?;
    dir.write_json("log.json", &prev_log)?;
    dir.write_text(LOSS_CSV, &loss_csv_prior(&prev_log))?;
    println!(
        "trained {} epochs in {:.1}s; final train loss {:.3}; checkpoint {}",
        outcome.state.epochs_done,
        t0.elapsed().as_secs_f64(),
        prev_log.last().map(|l| l.train.total).unwrap_or(f64::NAN),
        dir.join(PRIOR_FILE).display()
    );
    Ok(())
}

// ------------------------------------------------------------ train-denoiser

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainDenoiserConfig {
    pub model: DenoiserConfig,
    pub train: DenoiserTrainConfig,
}

impl Default for TrainDenoiserConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig {
                obs_unit: 0.1,
                ..DenoiserConfig::default()
            },
            train: DenoiserTrainConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainDenoiserArgs {
    /// Prior checkpoint written by train-prior.
    #[arg(long)]
    prior: PathBuf,
    /// Noisy corpus manifest (its clean twins are never read).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Confidence of the noise prior.
    #[arg(long)]
    lambda: Option<f64>,
}

fn load_noisy_split(manifest_path: &Path, split: &str) -> Result<Vec<(String, NoisyObservationSeq)>> {
    let manifest = CorpusManifest::load(manifest_path)?;
    let rels = manifest.split(split)?.to_vec();
    let paths = manifest.resolve(manifest_path, split)?;
    rels.into_iter()
        .zip(paths)
        .map(|(rel, p)| Ok((rel, NoisyObservationSeq::new(load_motion(&p)?)?)))
        .collect()
}

pub fn train_denoiser_cmd(args: TrainDenoiserArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: TrainDenoiserConfig = load_config(args.config.as_deref())?;
    set!(cfg.train.epochs, args.epochs);
    set!(cfg.train.lr, args.lr);
    set!(cfg.train.batch_size, args.batch_size);
    set!(cfg.train.lambda, args.lambda);
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    require(&args.prior, "prior checkpoint", "train one first with `mdvae train-prior`")?;
    require(&args.corpus, "noisy corpus manifest", "create it with `mdvae gen-corpus --sigma <s>`")?;
    let prior = DvaeModel::load(&args.prior)?;
    let train: Vec<_> = load_noisy_split(&args.corpus, "train")?.into_iter().map(|(_, s)| s).collect();
    let val: Vec<_> = load_noisy_split(&args.corpus, "val").map(|v| v.into_iter().map(|(_, s)| s).collect()).unwrap_or_default();

    let dir = OutDir::open(out)?;
    dir.write_json(RESOLVED_CONFIG, &cfg)?;
    let t0 = Instant::now();
    let outcome = train_denoiser(&prior, cfg.model.clone(), &train, &val, &cfg.train)?;
    outcome.model.save(&dir.join(DENOISER_FILE))?;
    let mut csv = String::from("epoch,train_total,train_rec,train_kl_dvae,train_kl_noise,val_total\n");
    for l in &outcome.log {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch,
            l.train.total,
            l.train.rec,
            l.train.kl_dvae,
            l.train.kl_noise,
            l.val.as_ref().map(|v| v.total.to_string()).unwrap_or_default()
        ));
    }
    dir.write_text(LOSS_CSV, &csv)?;
    println!(
        "trained denoiser for {} epochs in {:.1}s; generative weights verified unchanged; checkpoint {}",
        outcome.log.len(),
        t0.elapsed().as_secs_f64(),
        dir.join(DENOISER_FILE).display()
    );
    Ok(())
}

// ------------------------------------------------------------------- denoise

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiseMode {
    #[default]
    Regression,
    Optimization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputArg {
    PurePrior,
    Blend,
}

impl From<OutputArg> for OutputMode {
    fn from(o: OutputArg) -> Self {
        match o {
            OutputArg::PurePrior => OutputMode::PurePrior,
            OutputArg::Blend => OutputMode::Blend,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub mode: DenoiseMode,
    pub iters: usize,
    pub split: String,
    pub optimize: OptimizeConfig,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            mode: DenoiseMode::Regression,
            iters: 50,
            split: "test".into(),
            optimize: OptimizeConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    /// Denoiser checkpoint written by train-denoiser.
    #[arg(long)]
    model: PathBuf,
    /// Noisy corpus manifest.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<DenoiseMode>,
    /// Optimization-mode iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    /// Latent samples averaged per sequence.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    output: Option<OutputArg>,
}

pub fn denoised_motion(d: &Denoised, like: &MotionSequence) -> MotionSequence {
    MotionSequence {
        fps: like.fps,
        betas: like.betas.clone(),
        frames: d.states.iter().map(RawPose::from_state).collect(),
    }
}

/// Metrics of predictions against clean twins, with the observations as the
/// accuracy baseline and the clean motion as the plausibility reference.
pub fn score(
    method: &str,
    sigma: Option<f64>,
    split: &str,
    items: &[(String, Vec<Observation3D>, f64)],
    noisy: &[Vec<Observation3D>],
    clean: &[MotionSequence],
) -> Result<(EvalReport, ThresholdReport)> {
    let fps = clean.first().map(|c| c.fps).unwrap_or(mdvae_core::corpus::DEFAULT_FPS);
    let mut seqs = Vec::with_capacity(items.len());
    let (mut obs_v2v, mut gt_accel) = (0.0, 0.0);
    for ((name, pred, spf), (y, gt)) in items.iter().zip(noisy.iter().zip(clean)) {
        let gt_obs = gt.observations();
        seqs.push(SequenceMetrics::compute(name, pred, &gt_obs, fps, *spf)?);
        obs_v2v += v2v(y, &gt_obs)?;
        gt_accel += observation_accel(&gt_obs, fps)?;
    }
    let n = items.len().max(1) as f64;
    let report = EvalReport::new(method, sigma, split, seqs);
    let thresholds = threshold_report(
        &report.aggregate,
        &Baselines {
            obs_v2v: obs_v2v / n,
            gt_accel: gt_accel / n,
            fps,
        },
    );
    Ok((report, thresholds))
}

fn clean_twins(manifest_path: &Path, split: &str) -> Result<Option<Vec<MotionSequence>>> {
    let manifest = CorpusManifest::load(manifest_path)?;
    if manifest.corruption.is_none() {
        return Ok(None);
    }
    let pairs = manifest.twin_pairs(manifest_path, split)?;
    Ok(Some(pairs.iter().map(|(_, c)| load_motion(c)).collect::<mdvae_core::Result<_>>()?))
}

fn write_scores(dir: &OutDir, report: &EvalReport, thresholds: &ThresholdReport) -> Result<()> {
    dir.write_json(METRICS_FILE, report)?;
    dir.write_json(THRESHOLD_FILE, thresholds)?;
    write_csv(std::slice::from_ref(report), &dir.join("metrics.csv"))?;
    let a = &report.aggregate;
    println!(
        "{}: v2v {:.2} cm, mpjpe {:.2} cm, g-mpjpe {:.2} cm, accel {:.2} m/s^2, {:.5} s/frame\n{}",
        report.method,
        a.v2v_cm,
        a.mpjpe_cm,
        a.gmpjpe_cm,
        a.accel_m_s2,
        a.sec_per_frame,
        thresholds.summary()
    );
    Ok(())
}

pub fn denoise(args: DenoiseArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: DenoiseConfig = load_config(args.config.as_deref())?;
    set!(cfg.mode, args.mode);
    set!(cfg.iters, args.iters);
    set!(cfg.split, args.split);
    set!(cfg.optimize.n_samples, args.samples);
    set!(cfg.optimize.seed, seed);
    if let Some(o) = args.output {
        cfg.optimize.mode = o.into();
    }
    if cfg.optimize.n_samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    if cfg.mode == DenoiseMode::Optimization && cfg.iters == 0 {
        log::warn!("optimization mode with zero iterations is regression mode");
    }
    require(&args.model, "denoiser checkpoint", "train one first with `mdvae train-denoiser`")?;
    require(&args.corpus, "noisy corpus manifest", "create it with `mdvae gen-corpus --sigma <s>`")?;
    let model = DenoiserModel::load(&args.model)?;
    let inputs = load_noisy_split(&args.corpus, &cfg.split)?;
    let clean = clean_twins(&args.corpus, &cfg.split)?;
    let sigma = CorpusManifest::load(&args.corpus)?.corruption.map(|c| c.sigma);

    let dir = OutDir::open(out)?;
    dir.write_json(RESOLVED_CONFIG, &cfg)?;
    let mut outputs: Vec<(String, Denoised, f64)> = Vec::with_capacity(inputs.len());
    match cfg.mode {
        DenoiseMode::Regression => {
            for (rel, y) in &inputs {
                let t0 = Instant::now();
                let d = denoise_regression(&model, y, cfg.optimize.n_samples, cfg.optimize.seed, cfg.optimize.mode)?;
                outputs.push((rel.clone(), d, t0.elapsed().as_secs_f64() / y.len() as f64));
            }
        }
        DenoiseMode::Optimization => {
            let set: Vec<NoisyObservationSeq> = inputs.iter().map(|(_, y)| y.clone()).collect();
            let frames: usize = set.iter().map(|y| y.len()).sum();
            let t0 = Instant::now();
            let outcome = denoise_optimization(&model, &set, cfg.iters, &cfg.optimize)?;
            let spf = t0.elapsed().as_secs_f64() / frames.max(1) as f64;
            if outcome.diverged {
                log::warn!("optimization diverged; kept iterate {}", outcome.best_iter);
            }
            let trace: String = outcome.loss_trace.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
            dir.write_text("optimization_loss.csv", &format!("iter,loss\n{trace}"))?;
            for ((rel, _), d) in inputs.iter().zip(outcome.predictions) {
                outputs.push((rel.clone(), d, spf));
            }
        }
    }
    for ((rel, d, _), (_, y)) in outputs.iter().zip(&inputs) {
        let path = dir.join(DENOISED_DIR).join(rel);
        save_motion(&denoised_motion(d, &y.y_raw), &path)?;
    }
    println!("wrote {} denoised sequences under {}", outputs.len(), dir.join(DENOISED_DIR).display());
    if let Some(clean) = clean {
        let method = match cfg.mode {
            DenoiseMode::Regression => "mdvae-regression".to_string(),
            DenoiseMode::Optimization => format!("mdvae-optimization-{}", cfg.iters),
        };
        let items: Vec<_> = outputs.iter().map(|(rel, d, spf)| (rel.clone(), d.points.clone(), *spf)).collect();
        let noisy: Vec<_> = inputs.iter().map(|(_, y)| y.y_raw.observations()).collect();
        let (report, thresholds) = score(&method, sigma, &cfg.split, &items, &noisy, &clean)?;
        write_scores(&dir, &report, &thresholds)?;
    }
    Ok(())
}

// ------------------------------------------------------------ fit-trajectory

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub trajectory: TrajectoryConfig,
    /// Latent samples when chaining into the denoiser.
    pub chain_samples: usize,
}

#[derive(Args, Debug)]
pub struct FitTrajectoryArgs {
    /// 2D detections, one JSON line per frame.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Motion file supplying body pose, shape and the initial root orientation.
    #[arg(long)]
    poses: PathBuf,
    /// Ground-truth motion; reports per-frame translation error.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda_data: Option<f64>,
    #[arg(long)]
    lambda_smooth: Option<f64>,
    /// Robust penalty scale in pixels.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Start from the translations in --poses instead of the depth estimate.
    #[arg(long)]
    init_from_poses: bool,
    /// Denoise the fitted motion with this denoiser checkpoint.
    #[arg(long)]
    chain_denoise: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct FitReport {
    frames: usize,
    initial_objective: f64,
    objective: f64,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    translation_error_mean_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    translation_error_max_m: Option<f64>,
}

pub fn fit_trajectory(args: FitTrajectoryArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: FitConfig = load_config(args.config.as_deref())?;
    set!(cfg.trajectory.lambda_data, args.lambda_data);
    set!(cfg.trajectory.lambda_smooth, args.lambda_smooth);
    set!(cfg.trajectory.c, args.c);
    set!(cfg.trajectory.max_iters, args.max_iters);
    cfg.trajectory.use_input_translation |= args.init_from_poses;
    if cfg.chain_samples == 0 {
        cfg.chain_samples = 10;
    }
    require(&args.camera, "camera file", "pass a JSON pinhole camera with --camera")?;
    require(&args.detections, "detections file", "pass 2D detections with --detections")?;
    require(&args.poses, "pose file", "pass a motion file with --poses")?;
    let camera = PinholeCamera::load(&args.camera)?;
    let dets = load_detections(&args.detections)?;
    let poses = load_motion(&args.poses)?;
    if dets.len() != poses.len() {
        return Err(mdvae_core::Error::Invalid(format!("{} detection frames but {} pose frames", dets.len(), poses.len())).into());
    }
    let chain = match &args.chain_denoise {
        Some(p) => {
            require(p, "denoiser checkpoint", "train one with `mdvae train-denoiser`")?;
            Some(DenoiserModel::load(p)?)
        }
        None => None,
    };

    let dir = OutDir::open(out)?;
    dir.write_json(RESOLVED_CONFIG, &cfg)?;
    let fit = fit_global_trajectory(&dets, &poses.frames, &poses.betas, &camera, &cfg.trajectory)?;
    let fitted = MotionSequence {
        frames: poses
            .frames
            .iter()
            .zip(fit.r.iter().zip(&fit.phi))
            .map(|(p, (r, phi))| RawPose { r: *r, phi: *phi, theta: p.theta })
            .collect(),
        ..poses.clone()
    };
    save_motion(&fitted, &dir.join("fitted.json"))?;
    let mut report = FitReport {
        frames: fitted.len(),
        initial_objective: fit.initial_objective,
        objective: fit.objective,
        iterations: fit.iterations,
        translation_error_mean_m: None,
        translation_error_max_m: None,
    };
    if let Some(t) = &args.truth {
        let truth = load_motion(t)?;
        if truth.len() != fitted.len() {
            return Err(mdvae_core::Error::Invalid("--truth has a different frame count".into()).into());
        }
        let errs: Vec<f64> = fitted
            .frames
            .iter()
            .zip(&truth.frames)
            .map(|(a, b)| (0..3).map(|k| (a.r[k] - b.r[k]).powi(2)).sum::<f64>().sqrt())
            .collect();
        report.translation_error_mean_m = Some(errs.iter().sum::<f64>() / errs.len() as f64);
        report.translation_error_max_m = Some(errs.iter().copied().fold(0.0, f64::max));
    }
    dir.write_json("fit_report.json", &report)?;
    println!(
        "fitted {} frames in {} iterations (objective {:.4} -> {:.4}){}",
        report.frames,
        report.iterations,
        report.initial_objective,
        report.objective,
        report
            .translation_error_max_m
            .map(|m| format!("; translation error mean {:.4} m, max {m:.4} m", report.translation_error_mean_m.unwrap_or(0.0)))
            .unwrap_or_default()
    );
    if let Some(model) = chain {
        let y = NoisyObservationSeq::new(fitted.clone())?;
        let d = denoise_regression(&model, &y, cfg.chain_samples, seed.unwrap_or(0), OutputMode::Blend)?;
        save_motion(&denoised_motion(&d, &fitted), &dir.join("denoised.json"))?;
        println!("wrote {}", dir.join("denoised.json").display());
    }
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Noisy corpus manifest with clean twins.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// A denoise output directory; without it the raw observations are scored.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Method name in the report.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Debug, Serialize)]
struct EvalConfig<'a> {
    corpus: &'a Path,
    split: &'a str,
    pred: Option<&'a Path>,
    method: &'a str,
}

pub fn eval(args: EvalArgs, out: &Path) -> Result<()> {
    require(&args.corpus, "noisy corpus manifest", "create it with `mdvae gen-corpus --sigma <s>`")?;
    let manifest = CorpusManifest::load(&args.corpus)?;
    let sigma = manifest.corruption.as_ref().map(|c| c.sigma);
    let clean = clean_twins(&args.corpus, &args.split)?
        .ok_or_else(|| mdvae_core::Error::Invalid(format!("{} has no clean twins to score against", args.corpus.display())))?;
    let inputs = load_noisy_split(&args.corpus, &args.split)?;
    let method = args.method.clone().unwrap_or_else(|| if args.pred.is_some() { "prediction".into() } else { "observed".into() });

    let dir = OutDir::open(out)?;
    dir.write_json(
        RESOLVED_CONFIG,
        &EvalConfig {
            corpus: &args.corpus,
            split: &args.split,
            pred: args.pred.as_deref(),
            method: &method,
        },
    )?;
    let timing: Option<EvalReport> = args.pred.as_ref().and_then(|p| {
        let text = std::fs::read_to_string(p.join(METRICS_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    });
    let mut items = Vec::with_capacity(inputs.len());
    for (rel, y) in &inputs {
        let (pred, spf) = match &args.pred {
            None => (y.y_raw.observations(), 0.0),
            Some(p) => {
                let path = p.join(DENOISED_DIR).join(rel);
                require(&path, "prediction", "run `mdvae denoise` into the --pred directory first")?;
                let spf = timing
                    .as_ref()
                    .and_then(|t| t.sequences.iter().find(|s| &s.name == rel))
                    .map(|s| s.sec_per_frame)
                    .unwrap_or(0.0);
                (load_motion(&path)?.observations(), spf)
            }
        };
        items.push((rel.clone(), pred, spf));
    }
    let noisy: Vec<_> = inputs.iter().map(|(_, y)| y.y_raw.observations()).collect();
    let (report, thresholds) = score(&method, sigma, &args.split, &items, &noisy, &clean)?;
    write_scores(&dir, &report, &thresholds)
}
