//! Subcommand implementations. Each returns a small summary so tests can
//! check results without scraping stdout.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;

use flowseg_core::data::{dataset_load, dataset_save, gen_dataset, write_pgm, Dataset};
use flowseg_core::parallel::{try_map_indexed, Execution};
use flowseg_core::pipeline::{
    checkpoint_load, evaluate, fit, posterior_sample, predict, EpochRecord, FitOptions, FitOutcome, Model,
    ModelConfig, PipelineError, ResumeState, TrainState, Version,
};
use flowseg_core::rng::{seeded, stream};

use crate::{CliError, Common, RunConfig};

pub const METRICS_HEADER: &str = "epoch,loss,dice_val,kl_y,kl_z,kl_x,kl_m";
pub const CONFIG_ECHO: &str = "config.echo";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CKPT_BEST: &str = "ckpt-best.dbfc";
pub const CKPT_LAST: &str = "ckpt-last.dbfc";

const TAG_POSTERIOR: u64 = 0x5053;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn check_dataset(cfg: &ModelConfig, ds: &Dataset, path: &Path) -> Result<(), CliError> {
    if ds.height != cfg.height || ds.width != cfg.width || usize::from(ds.classes) != cfg.num_classes {
        return Err(PipelineError::ConfigMismatch {
            field: "dataset dimensions",
            expected: format!("{}x{} with {} classes", cfg.height, cfg.width, cfg.num_classes),
            found: format!(
                "{}x{} with {} classes in {}",
                ds.height,
                ds.width,
                ds.classes,
                path.display()
            ),
        }
        .into());
    }
    Ok(())
}

fn metrics_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        r.epoch, r.loss, r.dice_val, r.kl_y, r.kl_z, r.kl_x, r.kl_m
    )
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "×"
    }
}

// gen-data

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Named domain (A, B, C, D); individual fields can be overridden with --set.
    #[arg(long)]
    pub domain: Option<String>,
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1\n\nUsage: flowseg gen-data --n <N> --out <OUT> [--domain <NAME>]".into()));
    }
    let mut cfg = args.common.run_config()?;
    if let Some(d) = &args.domain {
        cfg.set("domain", d).map_err(CliError::Usage)?;
    }
    cfg.validate()?;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let ds = gen_dataset(&cfg.domain, args.n, h, w, &mut seeded(cfg.domain.seed))?;
    dataset_save(&ds, &args.out)?;
    let fg: f64 = ds
        .samples
        .iter()
        .map(|s| s.mask.iter().filter(|&&l| l > 0).count() as f64 / (h * w) as f64)
        .sum::<f64>()
        / ds.len() as f64;
    let d = &cfg.domain;
    say!(
        "wrote {} samples of {h}x{w} (K={}) to {}",
        ds.len(),
        ds.classes,
        args.out.display()
    );
    say!(
        "domain {}: noise_sigma={} bias_amplitude={} contrast_gamma={} texture_amplitude={} seed={} foreground={:.3}",
        d.name, d.noise_sigma, d.bias_amplitude, d.contrast_gamma, d.texture_amplitude, d.seed, fg
    );
    Ok(())
}

// train

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training dataset file.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation dataset file (defaults to the training file).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output root; the run goes to `<out>/<run_name>`.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    /// Component combination, ver1..ver5.
    #[arg(long)]
    pub version: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Continue from a checkpoint (usually `ckpt-last.dbfc`); epoch numbering continues.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Do not print per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub outcome: FitOutcome,
}

/// Trains `cfg` on already-loaded data, writing the run directory.
pub fn train_run(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    out: &Path,
    resume: Option<ResumeState>,
    exec: Execution,
    quiet: bool,
) -> Result<TrainSummary, CliError> {
    let run_dir = out.join(&cfg.run_name);
    create_dir(&run_dir)?;
    write_file(&run_dir.join(CONFIG_ECHO), cfg.echo())?;

    let metrics_path = run_dir.join(METRICS_CSV);
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| CliError::io(&metrics_path, e))?
    } else {
        let mut f = fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
        writeln!(f, "{METRICS_HEADER}").map_err(|e| CliError::io(&metrics_path, e))?;
        f
    };

    let model = match &resume {
        Some(r) => r.model.clone(),
        None => Model::new(&cfg.model)?,
    };
    let mut write_err = None;
    let run_name = cfg.run_name.clone();
    let mut on_epoch = |r: &EpochRecord| {
        if let Err(e) = metrics.write_all(metrics_row(r).as_bytes()) {
            write_err.get_or_insert(e);
        }
        if !quiet {
            say!(
                "[{run_name}] epoch {:>3}  loss {:.4}  dice_val {:.4}  best {:.4}",
                r.epoch, r.loss, r.dice_val, r.best_dice
            );
        }
    };
    let outcome = fit(
        model,
        train,
        val,
        FitOptions {
            exec,
            run_dir: Some(run_dir.clone()),
            resume,
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    if let Some(e) = write_err {
        return Err(CliError::io(&metrics_path, e));
    }
    Ok(TrainSummary {
        run_dir,
        config: cfg.clone(),
        outcome,
    })
}

fn load_checked(path: &Path, cfg: &ModelConfig) -> Result<Dataset, CliError> {
    let ds = dataset_load(path)?;
    check_dataset(cfg, &ds, path)?;
    Ok(ds)
}

pub fn train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let mut base = RunConfig::default();
    let mut resume_from = None;
    if let Some(path) = &args.resume {
        let last = checkpoint_load(path)?;
        base.model = last.model.config.clone();
        base.set("num_classes", &base.model.num_classes.to_string())
            .map_err(CliError::Usage)?;
        if let Some(name) = path.parent().and_then(|p| p.file_name()) {
            base.run_name = name.to_string_lossy().into_owned();
        }
        resume_from = Some((path.clone(), last));
    }
    let mut cfg = base;
    if let Some(p) = &args.common.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_overrides(&args.common.overrides)?;
    if let Some(seed) = args.common.seed {
        cfg.set("seed", &seed.to_string()).map_err(CliError::Usage)?;
    }
    if let Some(v) = &args.version {
        cfg.set("version", v).map_err(CliError::Usage)?;
    }
    if let Some(e) = args.epochs {
        cfg.model.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.model.learning_rate = lr;
    }
    if let Some(name) = &args.run_name {
        cfg.set("run_name", name).map_err(CliError::Usage)?;
    }
    cfg.validate()?;

    let resume = match resume_from {
        Some((path, mut last)) => {
            cfg.model.check_compatible(&last.model.config)?;
            last.model.config = cfg.model.clone();
            let best_path = path.with_file_name(CKPT_BEST);
            let best = if best_path.exists() {
                let mut b = checkpoint_load(&best_path)?;
                b.model.config = cfg.model.clone();
                Some(b)
            } else {
                None
            };
            Some(ResumeState::from_checkpoints(last, best)?)
        }
        None => None,
    };

    let train = load_checked(&args.train, &cfg.model)?;
    let val = match &args.val {
        Some(p) => load_checked(p, &cfg.model)?,
        None => train.clone(),
    };
    let summary = train_run(&cfg, &train, &val, &args.out, resume, args.common.exec(), args.quiet)?;
    let s = summary.outcome.state;
    say!(
        "trained {} epochs; best val Dice {:.4} at epoch {}; run directory {}",
        s.epochs_done,
        s.best_dice,
        s.best_epoch,
        summary.run_dir.display()
    );
    Ok(summary)
}

// eval

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source-domain dataset(s); reported but excluded from the target average.
    #[arg(long)]
    pub source: Vec<PathBuf>,
    /// Target-domain dataset(s).
    #[arg(long)]
    pub target: Vec<PathBuf>,
    /// CSV output (defaults to `eval.csv` next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub role: &'static str,
    pub dice: f64,
}

pub const EVAL_HEADER: &str = "dataset,role,dice";

pub fn eval_rows(model: &Model, sources: &[PathBuf], targets: &[PathBuf], exec: Execution) -> Result<Vec<EvalRow>, CliError> {
    let mut rows = Vec::new();
    for (paths, role) in [(sources, "source"), (targets, "target")] {
        for p in paths {
            let ds = load_checked(p, &model.config)?;
            let report = evaluate(model, &ds, exec)?;
            rows.push(EvalRow {
                dataset: stem(p),
                role,
                dice: report.mean_dice,
            });
        }
    }
    let t: Vec<f64> = rows.iter().filter(|r| r.role == "target").map(|r| r.dice).collect();
    if !t.is_empty() {
        rows.push(EvalRow {
            dataset: "avg_targets".into(),
            role: "average",
            dice: t.iter().sum::<f64>() / t.len() as f64,
        });
    }
    Ok(rows)
}

pub fn eval(args: &EvalArgs) -> Result<Vec<EvalRow>, CliError> {
    if args.source.is_empty() && args.target.is_empty() {
        return Err(CliError::Usage("eval needs at least one --source or --target dataset".into()));
    }
    let ckpt = checkpoint_load(&args.ckpt)?;
    let rows = eval_rows(&ckpt.model, &args.source, &args.target, args.common.exec())?;
    let mut csv = format!("{EVAL_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.dataset, r.role, r.dice);
        say!("{:<16} {:<8} {:.4}", r.dataset, r.role, r.dice);
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.ckpt.with_file_name("eval.csv"));
    write_file(&out, csv)?;
    Ok(rows)
}

// ablate

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out source-domain file (defaults to the training file).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Target-domain dataset(s).
    #[arg(long, required = true)]
    pub target: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value = "ablate")]
    pub run_name: String,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub version: Version,
    pub source_dice: f64,
    pub target_dice: Vec<f64>,
    pub avg_targets: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub source: String,
    pub targets: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("version,nf_posterior,ncvi,sde_girsanov,{}", self.source);
        for t in &self.targets {
            let _ = write!(out, ",{t}");
        }
        out.push_str(",avg_targets\n");
        for r in &self.rows {
            let t = r.version.toggles();
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.version,
                mark(t.nf_posterior),
                mark(t.ncvi),
                mark(t.sde_girsanov),
                r.source_dice
            );
            for d in &r.target_dice {
                let _ = write!(out, ",{d}");
            }
            let _ = writeln!(out, ",{}", r.avg_targets);
        }
        out
    }
}

pub fn ablate(args: &AblateArgs) -> Result<AblationTable, CliError> {
    let mut base = args.common.run_config()?;
    if let Some(e) = args.epochs {
        base.model.epochs = e;
    }
    base.validate()?;
    let train = load_checked(&args.train, &base.model)?;
    let val_path = args.val.clone().unwrap_or_else(|| args.train.clone());
    let val = load_checked(&val_path, &base.model)?;
    let targets = args
        .target
        .iter()
        .map(|p| load_checked(p, &base.model))
        .collect::<Result<Vec<_>, _>>()?;
    let out = args.out.join(&args.run_name);
    let exec = args.common.exec();

    // Versions train independently; rows are collected in version order.
    let rows = try_map_indexed(exec, Version::ALL.len(), |i| {
        let version = Version::ALL[i];
        let mut cfg = base.clone();
        cfg.set("version", version.name()).map_err(CliError::Usage)?;
        cfg.run_name = version.name().to_string();
        let summary = train_run(&cfg, &train, &val, &out, None, exec, true)?;
        let best = &summary.outcome.best;
        let source_dice = evaluate(best, &val, exec)?.mean_dice;
        let target_dice = targets
            .iter()
            .map(|t| evaluate(best, t, exec).map(|r| r.mean_dice))
            .collect::<Result<Vec<_>, _>>()?;
        let avg_targets = target_dice.iter().sum::<f64>() / target_dice.len() as f64;
        Ok::<_, CliError>(AblationRow {
            version,
            source_dice,
            target_dice,
            avg_targets,
        })
    })?;
    let table = AblationTable {
        source: stem(&val_path),
        targets: args.target.iter().map(|p| stem(p)).collect(),
        rows,
    };
    write_file(&out.join("ablation.csv"), table.to_csv())?;
    say_raw!("{}", table.to_csv().replace(',', "\t"));
    Ok(table)
}

// sample-posterior

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset file holding the image.
    #[arg(long)]
    pub data: PathBuf,
    /// Sample index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Number of posterior samples.
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub labels: Vec<Vec<u8>>,
    /// Per-pixel entropy (nats) of the empirical label distribution.
    pub entropy: Vec<f64>,
    pub log_weights: Vec<f64>,
    /// Mean of `exp(w)` over every per-coordinate log-weight `w` of every sample.
    /// Each coordinate's weight has expectation 1, so this should sit near 1.
    pub mean_weight: f64,
}

pub const LOG_WEIGHTS_HEADER: &str = "sample,log_w_m,log_w_x,log_w_z,log_w_n,log_w,mean_coord_weight";

pub fn sample_posterior(args: &SampleArgs) -> Result<PosteriorSummary, CliError> {
    if args.m == 0 {
        return Err(CliError::Usage("--m must be at least 1".into()));
    }
    let ckpt = checkpoint_load(&args.ckpt)?;
    let model = &ckpt.model;
    let cfg = &model.config;
    let ds = load_checked(&args.data, cfg)?;
    let sample = ds.samples.get(args.index).ok_or_else(|| {
        CliError::Usage(format!("--index {} out of range for {} samples", args.index, ds.len()))
    })?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let draws = try_map_indexed(args.common.exec(), args.m, |s| {
        let mut rng = stream(seed, &[TAG_POSTERIOR, args.index as u64, s as u64]);
        posterior_sample(model, &sample.image, &mut rng)
    })?;

    create_dir(&args.out)?;
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_classes);
    let mut csv = format!("{LOG_WEIGHTS_HEADER}\n");
    let mut counts = vec![0usize; k * h * w];
    let mut labels = Vec::with_capacity(args.m);
    let mut log_weights = Vec::with_capacity(args.m);
    let mut coord_means = Vec::with_capacity(args.m);
    for (s, d) in draws.into_iter().enumerate() {
        let vals: Vec<f64> = d.labels.iter().map(|&l| f64::from(l)).collect();
        write_pgm(&args.out.join(format!("sample_{s:03}.pgm")), &vals, h, w)?;
        for (p, &l) in d.labels.iter().enumerate() {
            counts[usize::from(l) * h * w + p] += 1;
        }
        let lw = d.log_weights;
        let total = lw.importance();
        let coord_mean = if d.coord_log_weights.is_empty() {
            1.0
        } else {
            d.coord_log_weights.iter().map(|w| w.exp()).sum::<f64>() / d.coord_log_weights.len() as f64
        };
        coord_means.push(coord_mean);
        let _ = writeln!(csv, "{s},{},{},{},{},{total},{coord_mean}", lw.m, lw.x, lw.z, lw.n);
        log_weights.push(total);
        labels.push(d.labels);
    }
    let m = args.m as f64;
    let entropy: Vec<f64> = (0..h * w)
        .map(|p| {
            -(0..k)
                .map(|c| counts[c * h * w + p] as f64 / m)
                .filter(|&q| q > 0.0)
                .map(|q| q * q.ln())
                .sum::<f64>()
        })
        .map(|e: f64| e.max(0.0))
        .collect();
    write_pgm(&args.out.join("entropy.pgm"), &entropy, h, w)?;
    write_file(&args.out.join("log_weights.csv"), csv)?;
    let mean_weight = coord_means.iter().sum::<f64>() / m;
    let uncertain = entropy.iter().filter(|&&e| e > 0.0).count();
    say!(
        "{} samples written to {}; mean per-coordinate weight {:.4}; {} of {} pixels disagree",
        args.m,
        args.out.display(),
        mean_weight,
        uncertain,
        h * w
    );
    Ok(PosteriorSummary {
        labels,
        entropy,
        log_weights,
        mean_weight,
    })
}

// inspect

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file to summarise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to summarise; with --data also dumps its prediction.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Directory for PGM dumps; nothing is written without it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn describe_checkpoint(model: &Model, state: &TrainState, has_adam: bool) -> String {
    let mut s = String::new();
    let cfg = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    };
    let _ = writeln!(
        s,
        "checkpoint: {} parameters, {} epochs done, best Dice {:.4} at epoch {}, optimiser state {}",
        model.num_params(),
        state.epochs_done,
        state.best_dice,
        state.best_epoch,
        if has_adam { "present" } else { "absent" }
    );
    for key in crate::config::KEYS.iter().skip(1).take_while(|k| **k != "domain") {
        let _ = writeln!(s, "  {key} = {}", cfg.get(key).unwrap_or_default());
    }
    s
}

pub fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    if args.data.is_none() && args.ckpt.is_none() {
        return Err(CliError::Usage("inspect needs --data and/or --ckpt".into()));
    }
    let ckpt = args.ckpt.as_deref().map(checkpoint_load).transpose()?;
    if let Some(c) = &ckpt {
        say_raw!("{}", describe_checkpoint(&c.model, &c.state, c.adam.is_some()));
    }
    let Some(path) = &args.data else {
        return Ok(());
    };
    let ds = dataset_load(path)?;
    let (h, w) = (ds.height, ds.width);
    let fg: Vec<f64> = ds
        .samples
        .iter()
        .map(|s| s.mask.iter().filter(|&&l| l > 0).count() as f64 / (h * w) as f64)
        .collect();
    say!(
        "dataset {}: {} samples, {h}x{w}, K={}, mean foreground fraction {:.4}",
        path.display(),
        ds.len(),
        ds.classes,
        fg.iter().sum::<f64>() / fg.len() as f64
    );
    let sample = ds.samples.get(args.index).ok_or_else(|| {
        CliError::Usage(format!("--index {} out of range for {} samples", args.index, ds.len()))
    })?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        let i = args.index;
        write_pgm(&out.join(format!("image_{i}.pgm")), &sample.image, h, w)?;
        let mask: Vec<f64> = sample.mask.iter().map(|&l| f64::from(l)).collect();
        write_pgm(&out.join(format!("mask_{i}.pgm")), &mask, h, w)?;
        if let Some(c) = &ckpt {
            check_dataset(&c.model.config, &ds, path)?;
            let pred = predict(&c.model, &sample.image)?;
            let labels: Vec<f64> = pred.labels.iter().map(|&l| f64::from(l)).collect();
            write_pgm(&out.join(format!("pred_{i}.pgm")), &labels, h, w)?;
            let fg_prob = &pred.confidence.values()[h * w..2 * h * w];
            write_pgm(&out.join(format!("prob_{i}.pgm")), fg_prob, h, w)?;
        }
        say!("wrote PGMs for sample {i} to {}", out.display());
    }
    Ok(())
}
