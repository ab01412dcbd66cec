use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use smoothmix::adversary::{attack_objective, smoothmix_attack};
use smoothmix::checkpoint::{load_checkpoint, save_checkpoint};
use smoothmix::config::RunConfig;
use smoothmix::evaluation::{
    acr, certified_accuracy_curve, certify_dataset, equal_confidence_mixing_ratio, median, pgd_confidence_table,
    CertifiedResultSet,
};
use smoothmix::report::{self, to_file, AttackRow, ExperimentManifest, MetricsRow};
use smoothmix::rng::fnv1a;
use smoothmix::smoothing::{sample_noise, soft_smoothed_predict};
use smoothmix::theory::verify_decay;
use smoothmix::training::train;
use smoothmix::{Error, Mlp, Result, Stream};

/// Randomized smoothing experiments: training, certification and diagnostics.
#[derive(Parser)]
#[command(name = "smoothmix", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to $SMOOTHMIX_OUT or ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-point work.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sequential execution with zeroed timings, for byte-identical artifacts.
    #[arg(long, global = true)]
    reference: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write model.json and train_log.csv.
    Train,
    /// Certify the test split with a trained model.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarize certification CSVs into metrics.csv.
    Evaluate {
        /// Certification CSVs, one per model.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Radius thresholds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        radii: Option<Vec<f64>>,
    },
    /// Trace the unrestricted attack on one test point.
    AttackDemo {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test point index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Equal-confidence mixing ratios and the off-class confidence table.
    Mixratio {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Monte Carlo check of the C/d decay bound.
    TheorySim,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Train => "train",
            Cmd::Certify { .. } => "certify",
            Cmd::Evaluate { .. } => "evaluate",
            Cmd::AttackDemo { .. } => "attack-demo",
            Cmd::Mixratio { .. } => "mixratio",
            Cmd::TheorySim => "theory-sim",
        }
    }

    fn needs_config(&self) -> bool {
        !matches!(self, Cmd::Evaluate { .. } | Cmd::TheorySim)
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    reference: bool,
    artifacts: Vec<PathBuf>,
    timings: Vec<(String, f64)>,
    notes: Vec<String>,
}

impl Ctx {
    fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.clone());
        p
    }

    fn time<T>(&mut self, label: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let v = f(self)?;
        let secs = if self.reference { 0.0 } else { start.elapsed().as_secs_f64() };
        self.timings.push((label.to_string(), secs));
        Ok(v)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None if cli.cmd.needs_config() => {
            return Err(Error::InvalidConfig(format!("{} requires --config", cli.cmd.name())));
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = c
        .out
        .or_else(|| std::env::var_os("SMOOTHMIX_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    let workers = if c.reference { 1 } else { c.workers.unwrap_or(0) };
    if c.workers == Some(0) {
        return Err(Error::InvalidConfig("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let name = cli.cmd.name();
    let mut ctx = Ctx {
        cfg,
        out,
        reference: c.reference,
        artifacts: Vec::new(),
        timings: Vec::new(),
        notes: Vec::new(),
    };
    pool.install(|| match &cli.cmd {
        Cmd::Train => cmd_train(&mut ctx),
        Cmd::Certify { checkpoint } => cmd_certify(&mut ctx, checkpoint),
        Cmd::Evaluate { inputs, radii } => cmd_evaluate(&mut ctx, inputs, radii.as_deref()),
        Cmd::AttackDemo { checkpoint, index } => cmd_attack_demo(&mut ctx, checkpoint, *index),
        Cmd::Mixratio { checkpoint } => cmd_mixratio(&mut ctx, checkpoint),
        Cmd::TheorySim => cmd_theory_sim(&mut ctx),
    })?;

    let config = ctx.cfg.to_toml();
    let manifest = ExperimentManifest {
        run_id: format!("{name}-{}-{:016x}", ctx.cfg.seed, fnv1a(config.as_bytes())),
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        artifacts: ctx.artifacts.clone(),
        timings: ctx.timings.clone(),
        notes: ctx.notes.clone(),
    };
    manifest.write(&ctx.out.join(format!("manifest-{name}.json")))
}

fn cmd_train(ctx: &mut Ctx) -> Result<()> {
    let (train_set, _) = ctx.time("load", |c| c.cfg.datasets())?;
    let dims = ctx.cfg.layer_dims(train_set.dim(), train_set.class_count);
    let net = Mlp::init(&dims, ctx.cfg.seed)?;
    let run = ctx.cfg.train_run();
    let method = ctx.cfg.method_config();
    let (net, log) = ctx.time("train", |_| {
        train(net, &train_set, &run, &method, |e| {
            eprintln!(
                "epoch {:>3}  loss_nat {:.4}  loss_mix {:.4}  lr {:.5}  {:.1}s",
                e.epoch, e.loss_nat, e.loss_mix, e.lr, e.seconds
            )
        })
    })?;
    let model = ctx.artifact("model.json");
    save_checkpoint(&net, &model)?;
    let log_path = ctx.artifact("train_log.csv");
    let reference = ctx.reference;
    to_file(&log_path, |f| report::write_training_log(f, &log, reference))
}

fn cmd_certify(ctx: &mut Ctx, checkpoint: &Path) -> Result<()> {
    let net: Mlp = load_checkpoint(checkpoint)?;
    let (_, test) = ctx.time("load", |c| c.cfg.datasets())?;
    let smoothing = ctx.cfg.smoothing();
    let seed = ctx.cfg.seed;
    let model_id = checkpoint.display().to_string();
    let results = ctx.time("certify", |_| certify_dataset(&net, &test, &smoothing, seed, &model_id))?;
    ctx.notes.push(format!(
        "n = {} caps the certifiable radius at {:.6}",
        smoothing.n,
        smoothing.max_radius()
    ));
    ctx.notes.push(format!("acr = {:.6}", acr(&results)));
    eprintln!("certified {} points, ACR {:.4}", results.rows.len(), acr(&results));
    let path = ctx.artifact("certify.csv");
    let reference = ctx.reference;
    to_file(&path, |f| report::write_certification(f, &results.rows, reference))
}

fn cmd_evaluate(ctx: &mut Ctx, inputs: &[PathBuf], radii: Option<&[f64]>) -> Result<()> {
    let radii = radii.map_or_else(|| ctx.cfg.radii.clone(), <[f64]>::to_vec);
    let mut rows = Vec::new();
    for input in inputs {
        let parsed = report::read_certification(fs::File::open(input)?)?;
        let set = CertifiedResultSet::new(parsed, ctx.cfg.smoothing(), input.display().to_string(), ctx.cfg.seed)?;
        rows.push(MetricsRow {
            model: model_name(input),
            acr: acr(&set),
            curve: certified_accuracy_curve(&set, &radii)?,
        });
    }
    let path = ctx.artifact("metrics.csv");
    to_file(&path, |f| report::write_metrics(f, &radii, &rows))
}

/// `runs/gauss/certify.csv` -> `gauss`; otherwise the file stem.
fn model_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "certify" {
        if let Some(parent) = path.parent().and_then(Path::file_name) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn cmd_attack_demo(ctx: &mut Ctx, checkpoint: &Path, index: usize) -> Result<()> {
    let net: Mlp = load_checkpoint(checkpoint)?;
    let (_, test) = ctx.cfg.datasets()?;
    if index >= test.len() {
        return Err(Error::InvalidConfig(format!("index {index} outside the test split of {}", test.len())));
    }
    let x = &test.inputs[index];
    let y = test.labels[index];
    let cfg = match ctx.cfg.method_config() {
        smoothmix::training::MethodConfig::SmoothMix(c) => c.attack,
        _ => smoothmix::adversary::AttackConfig {
            alpha_step: ctx.cfg.alpha_step,
            steps: ctx.cfg.attack_steps,
            epsilon_cap: None,
        },
    };
    let noise = sample_noise(ctx.cfg.sigma, x.len(), ctx.cfg.m, &Stream::new(ctx.cfg.seed, "attack-demo", index as u64))?;
    let traj = smoothmix_attack(&net, x, y, &noise, &cfg)?;
    let rows = traj
        .points
        .iter()
        .enumerate()
        .map(|(step, p)| {
            let dist = p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            Ok(AttackRow {
                step,
                distance_from_x: dist,
                objective: attack_objective(&net, p, y, &noise)?.value,
                true_class_prob: soft_smoothed_predict(&net, p, &noise)?.probs()[y],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = ctx.artifact("attack.csv");
    to_file(&path, |f| report::write_attack(f, &rows))
}

fn cmd_mixratio(ctx: &mut Ctx, checkpoint: &Path) -> Result<()> {
    use rayon::prelude::*;

    let net: Mlp = load_checkpoint(checkpoint)?;
    let (_, test) = ctx.cfg.datasets()?;
    let test = test.take(ctx.cfg.mix_points);
    let cfg = ctx.cfg.clone();
    let ratios = ctx.time("mixratio", |_| {
        (0..test.len())
            .into_par_iter()
            .map(|i| {
                let r = equal_confidence_mixing_ratio(
                    &net,
                    &test.inputs[i],
                    test.labels[i],
                    cfg.sigma,
                    cfg.pgd_steps,
                    cfg.pgd_eps,
                    cfg.estimation_m,
                    &Stream::new(cfg.seed, "mixratio", i as u64),
                )?;
                Ok((i, r))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let found: Vec<f64> = ratios.iter().filter_map(|r| r.1).collect();
    if let Some(med) = median(&found) {
        ctx.notes.push(format!("median lambda* = {med:.2} over {} points", found.len()));
    }
    let path = ctx.artifact("mixratio.csv");
    to_file(&path, |f| report::write_mixratio(f, &ratios))?;

    let points: Vec<(Vec<f64>, usize)> = test.iter().map(|(x, y)| (x.to_vec(), y)).collect();
    let table = ctx.time("confidence", |_| {
        pgd_confidence_table(
            &net,
            &points,
            cfg.sigma,
            &cfg.confidence_eps,
            cfg.pgd_steps,
            cfg.estimation_m,
            cfg.n,
            &Stream::new(cfg.seed, "confidence", 0),
        )
    })?;
    let path = ctx.artifact("confidence.csv");
    to_file(&path, |f| report::write_confidence(f, &table))
}

fn cmd_theory_sim(ctx: &mut Ctx) -> Result<()> {
    let families = ctx.cfg.theory_families.clone();
    let dims = ctx.cfg.dims.clone();
    for family in families {
        let template = ctx.cfg.theory(family);
        let stream = Stream::new(ctx.cfg.seed, "theory", 0);
        let report = ctx.time(family.name(), |_| verify_decay(&template, &dims, &stream))?;
        ctx.notes.push(format!(
            "{}: C = {:.6}, pass = {}",
            family.name(),
            report.constant.c(),
            report.pass()
        ));
        let path = ctx.artifact(&format!("theory_{}.csv", family.name()));
        to_file(&path, |f| report::write_theory(f, &report))?;
    }
    Ok(())
}
