use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::ManifestBuilder;
use super::presets::{ErrorMetric, ExperimentPreset, PresetId, DEFAULT_INIT_STD};
use crate::dataio::{generate_pairs, save_training_set, NoiseSpec};
use crate::dynamics::{
    estimate_lipschitz, lookup_system, reference_trajectory, sup_f_norm, IntegratorConfig,
    StateVector,
};
use crate::error::{Error, Result};
use crate::flowmodels::{trajectory_csv, FlowModel, ModelKind};
use crate::neuralnet::Architecture;
use crate::theory::{self, BoundReport};
use crate::training::{holdout_error, train, TrainConfig};

/// Points used for holdout errors, Lipschitz and `sup ‖f‖` estimates.
pub const EVAL_POINTS: usize = 10_000;
/// Pairs for the flow-map Lipschitz check.
pub const LIPSCHITZ_PAIRS: usize = 1000;
/// Largest `m` in the rollout error bound series.
pub const MAX_BOUND_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceOptions {
    pub seed: u64,
    #[serde(rename = "J")]
    pub j: usize,
    pub epochs: usize,
    pub kinds: Vec<ModelKind>,
    pub strict: bool,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        ReproduceOptions {
            seed: 1,
            j: 1000,
            epochs: 500,
            kinds: ModelKind::ALL.to_vec(),
            strict: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: ModelKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub final_train_loss: f64,
    pub final_holdout_loss: Option<f64>,
    /// Mean train loss over the first and last 100 epochs (or fewer).
    pub leading_loss_mean: f64,
    pub trailing_loss_mean: f64,
    pub holdout_sup_error: f64,
    pub holdout_mean_error: f64,
    pub max_error: f64,
    pub mean_error: f64,
    pub max_relative_error: f64,
    /// `None` when no threshold applies to this kind.
    pub passed: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineSummary {
    pub rows: usize,
    pub max_error: f64,
    /// Largest difference between every K-th fine state and the coarse rollout.
    pub coarse_mismatch: f64,
    pub passed: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryEntry {
    pub subject: String,
    #[serde(flatten)]
    pub report: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceSummary {
    pub preset: PresetId,
    pub options: ReproduceOptions,
    pub metric: ErrorMetric,
    pub threshold: f64,
    pub lipschitz: f64,
    pub sup_f: f64,
    pub models: Vec<ModelSummary>,
    pub fine: Option<FineSummary>,
    pub theory: Vec<TheoryEntry>,
    pub passed: bool,
}

impl ReproduceSummary {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.kind == kind)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{} seed={} J={} epochs={} metric={:?} threshold={}\n",
            self.preset.name(),
            self.options.seed,
            self.options.j,
            self.options.epochs,
            self.metric,
            self.threshold
        );
        writeln!(
            out,
            "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12} {:>7}",
            "model", "train_loss", "holdout_sup", "max_err", "mean_err", "max_rel", "pass"
        )
        .unwrap();
        for m in &self.models {
            writeln!(
                out,
                "{:<10} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>7}",
                m.kind.to_string(),
                m.final_train_loss,
                m.holdout_sup_error,
                m.max_error,
                m.mean_error,
                m.max_relative_error,
                pass_str(m.passed)
            )
            .unwrap();
        }
        if let Some(f) = &self.fine {
            writeln!(
                out,
                "RT fine: rows={} max_err={:.4e} coarse_mismatch={:.3e} pass={}",
                f.rows,
                f.max_error,
                f.coarse_mismatch,
                pass_str(f.passed)
            )
            .unwrap();
        }
        let unsatisfied = self
            .theory
            .iter()
            .filter(|e| !e.report.satisfied && !e.report.hypothesis_violated)
            .count();
        writeln!(
            out,
            "theory checks: {} reports, {} unsatisfied; L={:.6} sup|f|={:.6}",
            self.theory.len(),
            unsatisfied,
            self.lipschitz,
            self.sup_f
        )
        .unwrap();
        writeln!(
            out,
            "overall: {}",
            if self.passed { "PASS" } else { "FAIL" }
        )
        .unwrap();
        out
    }
}

fn pass_str(p: Option<bool>) -> &'static str {
    match p {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "-",
    }
}

/// Per-step absolute and relative errors against the reference.
fn errors(states: &[StateVector], reference: &[StateVector]) -> (f64, f64, f64) {
    let mut max = 0.0f64;
    let mut sum = 0.0;
    let mut max_rel = 0.0f64;
    for (y, x) in states.iter().zip(reference) {
        let e = y.distance(x);
        max = max.max(e);
        sum += e;
        max_rel = max_rel.max(e / x.norm().max(f64::MIN_POSITIVE));
    }
    (max, sum / states.len() as f64, max_rel)
}

fn window_mean(v: &[f64], leading: bool) -> f64 {
    let n = v.len().min(100);
    if n == 0 {
        return 0.0;
    }
    let w = if leading { &v[..n] } else { &v[v.len() - n..] };
    w.iter().sum::<f64>() / n as f64
}

fn phase_csv(
    kinds: &[ModelKind],
    reference: &[StateVector],
    rollouts: &[Vec<StateVector>],
    lag: f64,
) -> String {
    let n = reference.first().map_or(0, StateVector::dim);
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("ref_x{i}")));
    for kind in kinds {
        cols.extend((1..=n).map(|i| format!("{}_x{i}", kind.short_name())));
    }
    let mut out = cols.join(",");
    out.push('\n');
    for (i, r) in reference.iter().enumerate() {
        write!(out, "{}", i as f64 * lag).unwrap();
        for v in r.iter().chain(rollouts.iter().flat_map(|s| s[i].iter())) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

struct Writer<'a> {
    dir: &'a Path,
    manifest: &'a mut ManifestBuilder,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.manifest.output(&path);
        Ok(path)
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.context(format!("stage '{name}'")))
}

/// Run a preset end to end, writing every artifact into `dir`.
///
/// With `options.strict`, threshold failures become an error after all
/// artifacts are written.
pub fn reproduce(
    id: PresetId,
    options: &ReproduceOptions,
    dir: &Path,
    args: &[String],
) -> Result<ReproduceSummary> {
    let preset = ExperimentPreset::get(id);
    if options.kinds.is_empty() {
        return Err(Error::Usage("no model kinds selected".into()));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = ManifestBuilder::new("reproduce", args);
    manifest
        .config(serde_json::json!({
            "preset": preset,
            "options": options,
            "init_std": DEFAULT_INIT_STD,
            "train": TrainConfig { epochs: options.epochs, seed: options.seed, ..TrainConfig::default() },
            "integrator": IntegratorConfig::default(),
            "eval_points": EVAL_POINTS,
            "lipschitz_pairs": LIPSCHITZ_PAIRS,
        }))
        .seed("data", options.seed)
        .seed("init", options.seed)
        .seed("train", options.seed)
        .seed("evaluation", options.seed);

    let system = lookup_system(preset.system)?;
    let domain = system.default_domain.clone();
    let cfg = IntegratorConfig::default();
    let seed = options.seed;
    let steps = preset.steps();

    let set = stage(
        "generate",
        generate_pairs(
            &system,
            &domain,
            options.j,
            preset.delta,
            NoiseSpec::none(),
            &cfg,
            seed,
        ),
    )?;
    let data_path = dir.join("data.csv");
    stage("generate", save_training_set(&set, &data_path))?;
    manifest.output(&data_path);
    manifest.output(&crate::dataio::sidecar_path(&data_path));

    let reference = stage(
        "reference",
        reference_trajectory(&system, preset.x0, preset.delta, steps, &cfg),
    )?;
    let lipschitz = stage(
        "lipschitz",
        estimate_lipschitz(&system, &domain, EVAL_POINTS, seed),
    )?
    .value;
    let sup_f = stage("sup-f", sup_f_norm(&system, &domain, EVAL_POINTS, seed))?;

    let mut theory_entries = Vec::new();
    let mut push_system = |r: BoundReport| {
        theory_entries.push(TheoryEntry {
            subject: "system".into(),
            report: r,
        })
    };
    push_system(stage(
        "theory",
        theory::check_flow_lipschitz(
            &system,
            &domain,
            preset.delta,
            LIPSCHITZ_PAIRS,
            lipschitz,
            seed,
        ),
    )?);
    for k in [1, 2, 3, 5] {
        push_system(stage(
            "theory",
            theory::check_composition(&system, preset.x0, preset.delta, k, &cfg),
        )?);
    }
    for k in [1, preset.k] {
        push_system(stage(
            "theory",
            theory::check_near_identity(&system, &domain, preset.delta, k, EVAL_POINTS, seed),
        )?);
    }

    let mut writer = Writer {
        dir,
        manifest: &mut manifest,
    };
    let mut models = Vec::new();
    let mut rollouts = Vec::new();
    let mut fine = None;
    for &kind in &options.kinds {
        let short = kind.short_name();
        let label = format!("train {short}");
        let (hidden, k) = preset.shape(kind);
        let arch = Architecture::with_hidden(system.dimension, hidden)?;
        let model = FlowModel::init(kind, k, preset.delta, &arch, seed, Some(DEFAULT_INIT_STD))?;
        let train_cfg = TrainConfig {
            epochs: options.epochs,
            seed,
            ..TrainConfig::default()
        };
        let (model, report) = stage(&label, train(&model, &set, &train_cfg))?;
        writer.write(&format!("{short}.model.json"), &model.to_json()?)?;
        writer.write(&format!("{short}.loss.csv"), &report.to_csv())?;

        let label = format!("rollout {short}");
        let traj = stage(&label, model.rollout(preset.x0, steps, false))?;
        writer.write(
            &format!("{short}.rollout.csv"),
            &trajectory_csv(&traj, Some(&reference))?,
        )?;
        let (max_error, mean_error, max_relative_error) = errors(&traj.states, &reference);
        let score = match preset.metric {
            ErrorMetric::Absolute => max_error,
            ErrorMetric::Relative => max_relative_error,
        };
        let passed = preset
            .checked_kinds
            .contains(&kind)
            .then_some(score < preset.threshold);

        if kind == ModelKind::RtResNet {
            let fine_steps = steps * model.k;
            let fine_traj = stage(&label, model.rollout(preset.x0, fine_steps, true))?;
            let fine_ref = stage(
                "reference",
                reference_trajectory(&system, preset.x0, fine_traj.step, fine_steps, &cfg),
            )?;
            writer.write("rt.fine.csv", &trajectory_csv(&fine_traj, Some(&fine_ref))?)?;
            let (fmax, _, _) = errors(&fine_traj.states, &fine_ref);
            let mismatch = traj
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| s.distance(&fine_traj.states[i * model.k]))
                .fold(0.0f64, f64::max);
            fine = Some(FineSummary {
                rows: fine_traj.states.len(),
                max_error: fmax,
                coarse_mismatch: mismatch,
                passed: preset.fine_threshold.map(|t| fmax < t && mismatch <= 1e-12),
            });
        }

        let (hsup, hmean) = stage(
            &format!("evaluate {short}"),
            holdout_error(&model, &system, &domain, EVAL_POINTS, seed),
        )?;
        let m = steps.min(MAX_BOUND_STEPS);
        for r in stage(
            "theory",
            theory::rollout_bound_series(&model, &system, &domain, preset.x0, m, lipschitz, hsup),
        )? {
            theory_entries.push(TheoryEntry {
                subject: kind.to_string(),
                report: r,
            });
        }

        models.push(ModelSummary {
            kind,
            k: model.k,
            final_train_loss: *report.per_epoch_train_loss.last().unwrap_or(&f64::NAN),
            final_holdout_loss: report.final_holdout_loss,
            leading_loss_mean: window_mean(&report.per_epoch_train_loss, true),
            trailing_loss_mean: window_mean(&report.per_epoch_train_loss, false),
            holdout_sup_error: hsup,
            holdout_mean_error: hmean,
            max_error,
            mean_error,
            max_relative_error,
            passed,
        });
        rollouts.push(traj.states);
    }

    writer.write(
        "phase.csv",
        &phase_csv(&options.kinds, &reference, &rollouts, preset.delta),
    )?;
    writer.write(
        "theory.json",
        &serde_json::to_string_pretty(&theory_entries)?,
    )?;

    let passed = models.iter().all(|m| m.passed != Some(false))
        && fine.as_ref().is_none_or(|f| f.passed != Some(false));
    let summary = ReproduceSummary {
        preset: id,
        options: options.clone(),
        metric: preset.metric,
        threshold: preset.threshold,
        lipschitz,
        sup_f,
        models,
        fine,
        theory: theory_entries,
        passed,
    };
    writer.write("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    writer.write("summary.txt", &summary.table())?;
    manifest.write(&dir.join("reproduce.run.json"))?;

    if options.strict && !summary.passed {
        return Err(Error::Numerical(format!(
            "{} accuracy thresholds not met:\n{}",
            id.name(),
            summary.table()
        )));
    }
    Ok(summary)
}
