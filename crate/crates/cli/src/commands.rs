use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use duetfair::cohort::Cohort;
use duetfair::experiment::ExperimentConfig;
use duetfair::metrics::MetricsReport;
use duetfair::model::ModelParams;
use duetfair::oracle::{run_oracles, GradientCheckConfig, SweepConfig};
use duetfair::objectives::Variant;
use duetfair::report::emit_report;
use duetfair::robust::RobustnessConfig;
use duetfair::synth::generate_cohort;
use duetfair::trainer::{evaluate, train};
use duetfair::{validate_cohort, Execution};

use crate::args::{Command, Common, Overrides};
use crate::manifest::ManifestBuilder;

/// Process exit status for a failed oracle check.
pub const EXIT_ORACLE_FAILURE: i32 = 2;

/// Config file (or defaults), then flag overrides, then validation.
fn load_config(common: &Common, overrides: Option<&Overrides>) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::read(path).with_context(|| format!("config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(o) = overrides {
        if let Some(v) = o.objective {
            config.objective.variant = v;
        }
        if let Some(rho) = o.rho {
            config.objective.robustness = RobustnessConfig::Scalar(rho);
        }
        if let Some(l) = o.lambda_rob {
            config.objective.lambda_rob = l;
        }
        if o.no_dmoe {
            config.model.use_dmoe = false;
        }
    }
    config.validate()?;
    Ok(config)
}

fn prepare_out(config: &ExperimentConfig) -> Result<PathBuf> {
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(out)
}

fn read_cohort(path: &Path) -> Result<Cohort> {
    let cohort = Cohort::read(path).with_context(|| format!("cohort {}", path.display()))?;
    if let Some(v) = validate_cohort(&cohort).first() {
        bail!("cohort {} is invalid: {}", path.display(), v.detail);
    }
    Ok(cohort)
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData(common) => gen_data(&common),
        Command::Train {
            common,
            overrides,
            cohort,
        } => train_cmd(&common, &overrides, cohort.as_deref()),
        Command::Eval {
            common,
            overrides,
            params,
            cohort,
            method,
        } => eval_cmd(&common, &overrides, params.as_deref(), cohort.as_deref(), method),
        Command::Oracle(common) => oracle_cmd(&common),
        Command::Report { common, inputs } => report_cmd(&common, &inputs),
    }
}

fn gen_data(common: &Common) -> Result<i32> {
    let config = load_config(common, None)?;
    let out = prepare_out(&config)?;
    let config_json = config.to_json()?;
    let mut manifest = ManifestBuilder::start(&config.run_name, "gen-data", &config_json, &out);
    let cohort = generate_cohort(&config.synth)?;
    let held_out = generate_cohort(&config.held_out_synth())?;
    manifest.write("cohort.json", cohort.to_json()?.as_bytes())?;
    manifest.write("cohort_heldout.json", held_out.to_json()?.as_bytes())?;
    manifest.write("config.json", config_json.as_bytes())?;
    let (path, _) = manifest.finish()?;
    println!(
        "wrote {} training and {} held-out samples; manifest {}",
        cohort.len(),
        held_out.len(),
        path.display()
    );
    Ok(0)
}

fn train_cmd(common: &Common, overrides: &Overrides, cohort_path: Option<&Path>) -> Result<i32> {
    let config = load_config(common, Some(overrides))?;
    let out = prepare_out(&config)?;
    let config_json = config.to_json()?;
    let mut manifest = ManifestBuilder::start(&config.run_name, "train", &config_json, &out);
    let cohort = match cohort_path {
        Some(p) => read_cohort(p)?,
        None => generate_cohort(&config.synth)?,
    };
    let (params, log) = train(&cohort, &config.model, &config.objective, &config.train)?;
    manifest.write("params.json", params.to_json()?.as_bytes())?;
    manifest.write("train_log.jsonl", log.to_json_lines()?.as_bytes())?;
    manifest.write("config.json", config_json.as_bytes())?;
    let (path, _) = manifest.finish()?;
    let last = log.epochs.last().expect("at least one epoch");
    println!(
        "{} epochs of {} on {} samples, final objective {:.6}; manifest {}",
        log.epochs.len(),
        config.objective.variant,
        cohort.len(),
        last.objective,
        path.display()
    );
    Ok(0)
}

fn eval_cmd(
    common: &Common,
    overrides: &Overrides,
    params_path: Option<&Path>,
    cohort_path: Option<&Path>,
    method: Option<String>,
) -> Result<i32> {
    let config = load_config(common, Some(overrides))?;
    let out = prepare_out(&config)?;
    let params_path = params_path.map(Path::to_path_buf).unwrap_or_else(|| out.join("params.json"));
    let params = ModelParams::read(&params_path).with_context(|| format!("params {}", params_path.display()))?;
    let cohort = match cohort_path {
        Some(p) => read_cohort(p)?,
        None => generate_cohort(&config.held_out_synth())?,
    };
    let config_json = config.to_json()?;
    let mut manifest = ManifestBuilder::start(&config.run_name, "eval", &config_json, &out);
    let mut report = evaluate(&cohort, &params, &config.model, Some(&config.bootstrap))?;
    report.method = Some(method.unwrap_or_else(|| config.run_name.clone()));
    manifest.write("metrics.json", report.to_json()?.as_bytes())?;
    manifest.write("per_sample.csv", report.per_sample_csv().as_bytes())?;
    let (path, _) = manifest.finish()?;
    println!(
        "dice {:.4} iou {:.4} es-dice {:.4} worst group {} ({:.4}); manifest {}",
        report.population.dice,
        report.population.iou,
        report.es.dice,
        report.worst_group.label,
        report.worst_group.dice,
        path.display()
    );
    Ok(0)
}

fn oracle_cmd(common: &Common) -> Result<i32> {
    let config = load_config(common, None)?;
    let out = prepare_out(&config)?;
    let seed = common.seed.unwrap_or(0);
    let config_json = config.to_json()?;
    let mut manifest = ManifestBuilder::start(&config.run_name, "oracle", &config_json, &out);
    let sweep = SweepConfig {
        seed,
        ..SweepConfig::default()
    };
    let gradient = GradientCheckConfig {
        seed,
        objective: duetfair::objectives::ObjectiveConfig {
            variant: Variant::FairDro,
            ..config.objective.clone()
        },
        ..GradientCheckConfig::default()
    };
    let report = run_oracles(&sweep, &gradient, Execution::default())?;
    let json = serde_json::to_string_pretty(&report)?;
    manifest.write("oracle.json", json.as_bytes())?;
    manifest.finish()?;
    println!(
        "dual/primal {}/{} within {:e} (max diff {:.3e}); gradient {}/{} within {:e} (max rel {:.3e})",
        report.dual_primal.agreements,
        report.dual_primal.instances,
        report.dual_primal.tolerance,
        report.dual_primal.max_abs_diff,
        report.gradient.passed,
        report.gradient.checked,
        report.gradient.tolerance,
        report.gradient.max_rel_error
    );
    if report.passed {
        return Ok(0);
    }
    eprintln!("oracle failure");
    for case in &report.dual_primal.failures {
        eprintln!("{}", serde_json::to_string(case)?);
    }
    for case in &report.gradient.failures {
        eprintln!("{}", serde_json::to_string(case)?);
    }
    Ok(EXIT_ORACLE_FAILURE)
}

/// Method name: the one stored in the report, else the file's parent directory.
fn method_name(path: &Path, report: &MetricsReport) -> String {
    report.method.clone().unwrap_or_else(|| {
        path.parent()
            .and_then(|p| p.file_name())
            .or_else(|| path.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "method".into())
    })
}

fn report_cmd(common: &Common, inputs: &[PathBuf]) -> Result<i32> {
    let config = load_config(common, None)?;
    let out = prepare_out(&config)?;
    let reports = inputs
        .iter()
        .map(|p| {
            let r = MetricsReport::read(p).with_context(|| format!("metrics {}", p.display()))?;
            Ok((method_name(p, &r), r))
        })
        .collect::<Result<Vec<_>>>()?;
    let config_json = config.to_json()?;
    let mut manifest = ManifestBuilder::start(&config.run_name, "report", &config_json, &out);
    let bundle = emit_report(&reports, &out)?;
    for f in bundle.files() {
        manifest.add_existing(&f)?;
    }
    let (path, _) = manifest.finish()?;
    println!(
        "compared {} method(s) over {} group plot(s); manifest {}",
        reports.len(),
        bundle.plots.len(),
        path.display()
    );
    Ok(0)
}
