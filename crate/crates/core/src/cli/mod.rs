//! The `resflow` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 validation error, 4 numerical
//! failure. Relative output paths are resolved against `--out-dir`, which
//! defaults to `$RESFLOW_OUT_DIR` and then the working directory.

mod manifest;
mod presets;
mod reproduce;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use manifest::{run_manifest_path, sha256_file, FileRecord, RunManifest, VERSION};
pub use presets::{ErrorMetric, ExperimentPreset, PresetId, DEFAULT_INIT_STD};
pub use reproduce::{
    reproduce, FineSummary, ModelSummary, ReproduceOptions, ReproduceSummary, TheoryEntry,
    EVAL_POINTS, LIPSCHITZ_PAIRS, MAX_BOUND_STEPS,
};

use crate::dataio::{
    generate_pairs, load_training_set, save_training_set, sidecar_path, NoiseSpec,
};
use crate::dynamics::{
    estimate_lipschitz, lookup_system, reference_trajectory, toggle_switch, IntegratorConfig,
    StateVector, SystemDef,
};
use crate::error::{Error, Result};
use crate::flowmodels::{trajectory_csv, FlowModel, ModelKind};
use crate::neuralnet::Architecture;
use crate::rng;
use crate::theory::{self, BoundReport};
use crate::training::{holdout_error, train, Optimizer, TrainConfig};
use manifest::ManifestBuilder;

pub const OUT_DIR_ENV: &str = "RESFLOW_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "resflow",
    version,
    about = "Learn ODE flow maps with residual networks"
)]
pub struct Cli {
    /// Directory for relative output paths.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample training pairs from a builtin system.
    Generate(GenerateArgs),
    /// Train a model on a training-set CSV.
    Train(TrainArgs),
    /// Iterate a trained model from an initial state.
    Rollout(RolloutArgs),
    /// One-step holdout error of a model against reference integration.
    Evaluate(EvaluateArgs),
    /// Numerical checks of the flow-map error estimates.
    TheoryCheck(TheoryArgs),
    /// Run a preset experiment end to end.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct SystemArgs {
    /// Builtin system name (example1, example2, pendulum, toggle, exponential, zero<n>).
    #[arg(long)]
    pub system: String,
    /// Toggle-switch IPTG exponent.
    #[arg(long)]
    pub eta: Option<f64>,
}

impl SystemArgs {
    fn resolve(&self) -> Result<SystemDef> {
        resolve_system(&self.system, self.eta)
    }
}

fn resolve_system(name: &str, eta: Option<f64>) -> Result<SystemDef> {
    match (name, eta) {
        ("toggle", Some(eta)) => Ok(toggle_switch(eta)),
        (_, Some(_)) => Err(Error::Usage(
            "--eta applies only to the toggle system".into(),
        )),
        (name, None) => lookup_system(name),
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long = "J", default_value_t = 1000)]
    pub j: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Std of Gaussian noise added to the outputs.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Also perturb the inputs.
    #[arg(long)]
    pub noise_inputs: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Resnet,
    Rt,
    Rs,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Resnet => ModelKind::ResNet,
            KindArg::Rt => ModelKind::RtResNet,
            KindArg::Rs => ModelKind::RsResNet,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Expected lag; must match the training set.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum, default_value = "resnet")]
    pub kind: KindArg,
    /// Blocks per lag (default 1 for resnet, 3 otherwise).
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "30,30,30")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    /// Std of the Gaussian weight initialization.
    #[arg(long, default_value_t = DEFAULT_INIT_STD)]
    pub init_std: f64,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Vec<f64>,
    #[arg(long)]
    pub steps: usize,
    /// Record every block application (RT-ResNet only).
    #[arg(long)]
    pub fine: bool,
    /// Append reference columns from this builtin system.
    #[arg(long = "ref")]
    pub reference: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = EVAL_POINTS)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path (default: next to the model).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    FlowLipschitz,
    Composition,
    NearIdentity,
    RolloutBound,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, value_enum)]
    pub check: Vec<CheckKind>,
    /// Run every check (needs --model and --x0).
    #[arg(long)]
    pub all: bool,
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Time for the flow Lipschitz check (default: delta).
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long, default_value_t = LIPSCHITZ_PAIRS)]
    pub pairs: usize,
    #[arg(long, default_value_t = EVAL_POINTS)]
    pub samples: usize,
    /// Lipschitz constant of f (default: sampled estimate).
    #[arg(long = "L")]
    pub l: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    /// One-step model error (default: sampled holdout sup error).
    #[arg(long)]
    pub sup_error: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON array output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub preset: PresetId,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "J", default_value_t = 1000)]
    pub j: usize,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "resnet,rt,rs"
    )]
    pub kinds: Vec<KindArg>,
    /// Fail (exit 4) when an accuracy threshold is missed.
    #[arg(long)]
    pub strict: bool,
    /// Output directory (default: <out-dir>/<preset>).
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let args: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    let out = |p: &Path| -> Result<PathBuf> {
        let path = if p.is_absolute() {
            p.to_path_buf()
        } else {
            cli.out_dir.join(p)
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        Ok(path)
    };
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, &out(&a.out)?, args),
        Command::Train(a) => cmd_train(a, &out(&a.out)?, args),
        Command::Rollout(a) => cmd_rollout(a, &out(&a.out)?, args),
        Command::Evaluate(a) => {
            let path = match &a.out {
                Some(p) => out(p)?,
                None => a.model.with_extension("eval.json"),
            };
            cmd_evaluate(a, &path, args)
        }
        Command::TheoryCheck(a) => {
            let path = a.out.as_deref().map(out).transpose()?;
            cmd_theory(a, path.as_deref(), args)
        }
        Command::Reproduce(a) => {
            let dir = match &a.dir {
                Some(d) => out(d)?,
                None => cli.out_dir.join(a.preset.name()),
            };
            let options = ReproduceOptions {
                seed: a.seed,
                j: a.j,
                epochs: a.epochs,
                kinds: a.kinds.iter().map(|&k| k.into()).collect(),
                strict: a.strict,
            };
            let summary = reproduce(a.preset, &options, &dir, args)?;
            print!("{}", summary.table());
            println!("artifacts in {}", dir.display());
            Ok(())
        }
    }
}

fn cmd_generate(a: &GenerateArgs, path: &Path, args: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::new("generate", args);
    let system = a.system.resolve()?;
    let noise = NoiseSpec {
        perturb_inputs: a.noise_inputs,
        ..NoiseSpec::gaussian(a.noise)
    };
    let cfg = IntegratorConfig::default();
    let set = generate_pairs(
        &system,
        &system.default_domain,
        a.j,
        a.delta,
        noise,
        &cfg,
        a.seed,
    )?;
    save_training_set(&set, path)?;
    manifest
        .config(serde_json::json!({
            "system": system.name,
            "parameters": system.parameters,
            "domain": set.domain,
            "J": a.j,
            "delta": a.delta,
            "noise": noise,
            "integrator": cfg,
        }))
        .seed("data", a.seed)
        .output(path)
        .output(&sidecar_path(path))
        .write(&run_manifest_path(path))?;
    println!("wrote {} pairs to {}", set.len(), path.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, path: &Path, args: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train", args);
    let set = load_training_set(&a.data)?;
    if let Some(d) = a.delta {
        if (d - set.lag).abs() > 1e-12 * set.lag.abs().max(1.0) {
            return Err(Error::Validation(format!(
                "--delta {d} does not match the training-set lag {}",
                set.lag
            )));
        }
    }
    let kind = ModelKind::from(a.kind);
    let k = a.k.unwrap_or(if kind == ModelKind::ResNet { 1 } else { 3 });
    let arch = Architecture::with_hidden(set.dim(), &a.hidden)?;
    let model = FlowModel::init(kind, k, set.lag, &arch, a.seed, Some(a.init_std))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        learning_rate: a.lr,
        seed: a.seed,
        holdout_fraction: a.holdout,
        ..TrainConfig::default()
    };
    let (model, report) = train(&model, &set, &cfg)?;
    model.save(path)?;
    let loss_path = path.with_file_name(format!("{}.loss.csv", stem(path)));
    fs::write(&loss_path, report.to_csv())?;
    manifest
        .config(serde_json::json!({
            "kind": kind,
            "K": k,
            "architecture": arch,
            "init_std": a.init_std,
            "train": cfg,
        }))
        .seed("init", a.seed)
        .seed("train", a.seed)
        .input(&a.data)
        .output(path)
        .output(&loss_path)
        .write(&run_manifest_path(path))?;
    println!(
        "trained {kind} (K={k}); final train loss {:.6e}; model {}",
        report
            .per_epoch_train_loss
            .last()
            .copied()
            .unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_rollout(a: &RolloutArgs, path: &Path, args: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::new("rollout", args);
    let model = FlowModel::load(&a.model)?;
    let traj = model.rollout(&a.x0, a.steps, a.fine)?;
    let reference = match &a.reference {
        Some(name) => {
            let system = resolve_system(name, a.eta)?;
            Some(reference_trajectory(
                &system,
                &a.x0,
                traj.step,
                a.steps,
                &IntegratorConfig::default(),
            )?)
        }
        None => None,
    };
    fs::write(path, trajectory_csv(&traj, reference.as_deref())?)?;
    manifest
        .config(serde_json::json!({
            "x0": a.x0,
            "steps": a.steps,
            "fine": a.fine,
            "step": traj.step,
            "reference": a.reference,
            "eta": a.eta,
        }))
        .input(&a.model)
        .output(path)
        .write(&run_manifest_path(path))?;
    println!("wrote {} states to {}", traj.states.len(), path.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvaluateReport<'a> {
    model: &'a Path,
    system: &'a str,
    points: usize,
    seed: u64,
    sup_error: f64,
    mean_error: f64,
}

fn cmd_evaluate(a: &EvaluateArgs, path: &Path, args: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::new("evaluate", args);
    let model = FlowModel::load(&a.model)?;
    let system = a.system.resolve()?;
    let (sup, mean) = holdout_error(&model, &system, &system.default_domain, a.points, a.seed)?;
    let report = EvaluateReport {
        model: &a.model,
        system: &system.name,
        points: a.points,
        seed: a.seed,
        sup_error: sup,
        mean_error: mean,
    };
    fs::write(path, serde_json::to_string_pretty(&report)?)?;
    manifest
        .config(serde_json::json!({ "system": system.name, "points": a.points }))
        .seed("evaluation", a.seed)
        .input(&a.model)
        .output(path)
        .write(&run_manifest_path(path))?;
    println!(
        "sup_error {sup:.6e}  mean_error {mean:.6e}  ({} points)",
        a.points
    );
    Ok(())
}

fn cmd_theory(a: &TheoryArgs, path: Option<&Path>, args: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::new("theory-check", args);
    let checks: Vec<CheckKind> = if a.all {
        CheckKind::value_variants().to_vec()
    } else {
        a.check.clone()
    };
    if checks.is_empty() {
        return Err(Error::Usage("give --check <name> or --all".into()));
    }
    let system = a.system.resolve()?;
    let domain = system.default_domain.clone();
    let model = a.model.as_deref().map(FlowModel::load).transpose()?;
    let k = a.k.or(model.as_ref().map(|m| m.k)).unwrap_or(1);
    let cfg = IntegratorConfig::default();
    let l = match a.l {
        Some(l) => l,
        None => estimate_lipschitz(&system, &domain, a.samples.max(2), a.seed)?.value,
    };

    let mut reports: Vec<BoundReport> = Vec::new();
    for check in checks {
        match check {
            CheckKind::FlowLipschitz => reports.push(theory::check_flow_lipschitz(
                &system,
                &domain,
                a.t.unwrap_or(a.delta),
                a.pairs,
                l,
                a.seed,
            )?),
            CheckKind::Composition => {
                let points: Vec<StateVector> = match &a.x0 {
                    Some(x0) => vec![x0.clone().into()],
                    None => {
                        let mut r = rng::stream(a.seed, 0);
                        (0..100).map(|_| domain.sample(&mut r)).collect()
                    }
                };
                let mut worst: Option<BoundReport> = None;
                for x in &points {
                    let r = theory::check_composition(&system, x, a.delta, k, &cfg)?;
                    if worst.as_ref().is_none_or(|w| r.measured > w.measured) {
                        worst = Some(r);
                    }
                }
                let mut worst = worst.expect("at least one point");
                worst.context.insert("points".into(), points.len() as f64);
                reports.push(worst);
            }
            CheckKind::NearIdentity => reports.push(theory::check_near_identity(
                &system, &domain, a.delta, k, a.samples, a.seed,
            )?),
            CheckKind::RolloutBound => {
                let model = model
                    .as_ref()
                    .ok_or_else(|| Error::Usage("rollout-bound needs --model".into()))?;
                let x0 =
                    a.x0.as_ref()
                        .ok_or_else(|| Error::Usage("rollout-bound needs --x0".into()))?;
                let sup_error = match a.sup_error {
                    Some(e) => e,
                    None => holdout_error(model, &system, &domain, a.samples, a.seed)?.0,
                };
                reports.push(theory::check_rollout_bound(
                    model, &system, &domain, x0, a.m, l, sup_error,
                )?);
            }
        }
    }
    print!("{}", BoundReport::table(&reports));
    if let Some(path) = path {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
        if let Some(m) = &a.model {
            manifest.input(m);
        }
        manifest
            .config(serde_json::json!({
                "system": system.name,
                "delta": a.delta,
                "K": k,
                "L": l,
                "pairs": a.pairs,
                "samples": a.samples,
                "m": a.m,
                "x0": a.x0,
            }))
            .seed("checks", a.seed)
            .output(path)
            .write(&run_manifest_path(path))?;
    }
    Ok(())
}
