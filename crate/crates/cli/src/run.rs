//! Executes a resolved [`RunConfig`] and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cfm::error::{Error, Result};
use cfm::evaluate::{in_sample_r2, out_of_sample_r2, OosConfig, R2Scores, RollingTuning};
use cfm::extract::{default_delta, extract_factors, LowRankFit, RankRule};
use cfm::panel_io::{build_design, load_panel, save_estimate, EstimateArchive, Provenance, Schema};
use cfm::problems::{ModelFamily, Panel};
use cfm::prox_apg::{default_lambda, SolverConfig};
use cfm::rng::derive_seed;
use cfm::simulate::{generate, run_study_with, run_sweep, Dgp, DgpSpec, Tuning};
use cfm::tuning::{cross_validate_with, CvPlan, CvResult};
use serde::{Deserialize, Serialize};

use crate::config::{Command, DataSource, RunConfig};

pub const MANIFEST: &str = "manifest.json";

/// What a run wrote and what to print.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub config: RunConfig,
    pub seed: u64,
    pub library_version: String,
    pub wall_time_seconds: f64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))
    }
}

/// Exit status for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConfigError(_) => 2,
        Error::InvalidInput(_) | Error::DegenerateInput(_) | Error::FormatError { .. } | Error::Io(_) => 3,
        Error::NumericalFailure(_) | Error::TuningFailure(_) => 4,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "InvalidInput",
        Error::DegenerateInput(_) => "DegenerateInput",
        Error::NumericalFailure(_) => "NumericalFailure",
        Error::TuningFailure(_) => "TuningFailure",
        Error::FormatError { .. } => "FormatError",
        Error::ConfigError(_) => "ConfigError",
        Error::Io(_) => "Io",
    }
}

/// Machine-readable error record.
pub fn error_record(e: &Error) -> String {
    serde_json::json!({
        "error": error_kind(e),
        "message": e.to_string(),
        "exit_code": exit_code(e),
    })
    .to_string()
}

/// Runs the command, then writes the manifest. Errors are returned untouched.
pub fn run(config: &RunConfig) -> Result<Outcome> {
    fs::create_dir_all(&config.out)
        .map_err(|e| Error::ConfigError(format!("cannot create {}: {e}", config.out.display())))?;
    let start = Instant::now();
    let outcome = execute(config)?;
    let manifest = Manifest {
        command: config.command,
        config: config.clone(),
        seed: config.seed,
        library_version: cfm::VERSION.to_string(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        artifacts: outcome
            .artifacts
            .iter()
            .map(|p| p.strip_prefix(&config.out).unwrap_or(p).display().to_string())
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(config.out.join(MANIFEST), text)?;
    Ok(outcome)
}

pub fn execute(config: &RunConfig) -> Result<Outcome> {
    match config.command {
        Command::Estimate => estimate(config),
        Command::Cv => cv(config),
        Command::Simulate => simulate(config),
        Command::Evaluate => evaluate(config),
    }
}

/// A panel with its row and column labels.
pub struct LoadedPanel {
    pub panel: Panel,
    pub assets: Vec<String>,
    pub periods: Vec<String>,
}

fn labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| i.to_string()).collect()
}

fn dgp_of(d: u8) -> Result<Dgp> {
    d.to_string().parse()
}

pub fn load(config: &RunConfig) -> Result<LoadedPanel> {
    match &config.source {
        DataSource::File { path, asset, period, ret } => {
            let schema = Schema {
                asset: asset.clone(),
                period: period.clone(),
                ret: ret.clone(),
            };
            let table = load_panel(path, &schema)?;
            let spec = config.design.to_spec(&table.characteristics);
            spec.validate(config.model_family()?)?;
            let panel = build_design(&table, &spec)?;
            Ok(LoadedPanel {
                panel,
                assets: table.assets,
                periods: table.periods,
            })
        }
        DataSource::Simulated { dgp, n, t } => {
            let truth = generate(&DgpSpec::new(dgp_of(*dgp)?, *n, *t, config.seed))?;
            Ok(LoadedPanel {
                panel: truth.panel,
                assets: labels(*n),
                periods: labels(*t),
            })
        }
    }
}

pub fn solver(config: &RunConfig) -> SolverConfig {
    SolverConfig::default()
        .with_tolerance(config.tol)
        .with_max_iterations(config.max_iter)
}

pub fn cv_plan(config: &RunConfig) -> CvPlan {
    CvPlan {
        n_folds: config.folds,
        grid: config.grid.clone(),
        seed: derive_seed(config.seed, "cv", 0),
        warm_start: config.warm_start,
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(header).map_err(csv_io)?;
    for row in rows {
        w.write_record(row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_cv_table(path: &Path, result: &CvResult) -> Result<()> {
    let rows: Vec<Vec<String>> = result
        .per_c_mse
        .iter()
        .map(|p| {
            vec![
                num(p.c),
                p.mse.map(num).unwrap_or_default(),
                (p.c == result.chosen_c).to_string(),
            ]
        })
        .collect();
    write_csv(path, &strings(&["c", "mse", "chosen"]), &rows)
}

fn scores_fields(s: &R2Scores) -> Vec<String> {
    vec![num(s.total), num(s.ts_avg), num(s.cs_avg)]
}

/// `c` from the config, or from cross-validation (writing `cv.csv`).
fn choose_c(config: &RunConfig, panel: &Panel, family: ModelFamily, artifacts: &mut Vec<PathBuf>) -> Result<f64> {
    if !config.cv {
        return Ok(config.lambda_c.expect("validated"));
    }
    let result = cross_validate_with(panel, family, &cv_plan(config), &solver(config))?;
    let path = config.out.join("cv.csv");
    write_cv_table(&path, &result)?;
    artifacts.push(path);
    Ok(result.chosen_c)
}

fn fit_at(config: &RunConfig, panel: &Panel, family: ModelFamily, c: f64) -> Result<LowRankFit> {
    let lambda = default_lambda(panel, family, c)?;
    LowRankFit::estimate(panel, family, &SolverConfig { lambda, ..solver(config) })
}

fn estimate(config: &RunConfig) -> Result<Outcome> {
    let family = config.model_family()?;
    let data = load(config)?;
    let panel = &data.panel;
    let mut artifacts = Vec::new();
    let c = choose_c(config, panel, family, &mut artifacts)?;
    let fit = fit_at(config, panel, family, c)?;
    let delta = match config.delta {
        Some(d) => d,
        None => default_delta(panel, family)?,
    };
    let est = extract_factors(&fit, RankRule::Threshold(delta))?;
    let scores = in_sample_r2(panel, &est)?;
    let archive_dir = config.out.join("estimate");
    save_estimate(
        &EstimateArchive {
            estimate: est.clone(),
            provenance: Provenance::from_fit(&fit),
        },
        &archive_dir,
    )?;
    artifacts.push(archive_dir);
    let path = config.out.join("in_sample.csv");
    let mut row = vec![num(c), num(fit.lambda_used), est.k_hat.to_string()];
    row.extend(scores_fields(&scores));
    write_csv(
        &path,
        &strings(&["c", "lambda", "k_hat", "r2_total", "r2_ts_avg", "r2_cs_avg"]),
        &[row],
    )?;
    artifacts.push(path);
    let mut summary = format!(
        "{} fit: c = {c}, lambda = {:.6}, K_hat = {}, iterations = {}{}\n",
        family.kind,
        fit.lambda_used,
        est.k_hat,
        fit.report.iterations,
        if fit.report.converged { "" } else { " (not converged)" }
    );
    summary += &format!(
        "in-sample R2: total {:.4}, ts-avg {:.4}, cs-avg {:.4}\n",
        scores.total, scores.ts_avg, scores.cs_avg
    );
    for w in &est.warnings {
        summary += &format!("warning: {w:?}\n");
    }
    Ok(Outcome { summary, artifacts })
}

fn cv(config: &RunConfig) -> Result<Outcome> {
    let family = config.model_family()?;
    let data = load(config)?;
    let result = cross_validate_with(&data.panel, family, &cv_plan(config), &solver(config))?;
    let path = config.out.join("cv.csv");
    write_cv_table(&path, &result)?;
    let mut summary = format!("{}-fold CV over {} values of c\n", config.folds, config.grid.len());
    for p in &result.per_c_mse {
        let mse = p.mse.map(|m| format!("{m:.6}")).unwrap_or_else(|| "failed".into());
        summary += &format!("  c = {:<6} mse = {mse}\n", p.c);
    }
    summary += &format!("chosen c = {}\n", result.chosen_c);
    Ok(Outcome {
        summary,
        artifacts: vec![path],
    })
}

fn simulate(config: &RunConfig) -> Result<Outcome> {
    let family = config.model_family()?;
    let DataSource::Simulated { dgp, n, t } = config.source else {
        return Err(Error::ConfigError("simulate needs --dgp".into()));
    };
    let spec = DgpSpec::new(dgp_of(dgp)?, n, t, config.seed);
    let base = solver(config);
    let plan = cv_plan(config);
    let tuning = if config.cv {
        Tuning::CrossValidated(plan.clone())
    } else {
        Tuning::Fixed(config.lambda_c.expect("validated"))
    };
    let report = run_study_with(&spec, family, &tuning, config.reps, &base)?;
    let mut artifacts = Vec::new();

    let mut header = strings(&["dgp", "n", "t", "family", "reps", "failures", "k_correct_rate"]);
    let mut row = vec![
        dgp.to_string(),
        n.to_string(),
        t.to_string(),
        family.kind.to_string(),
        config.reps.to_string(),
        report.failures.to_string(),
        num(report.k_correct_rate),
    ];
    for m in &report.metrics {
        header.push(m.name.clone());
        row.push(num(m.mean_all));
        header.push(format!("{}_correct_k", m.name));
        row.push(num(m.mean_correct_k));
    }
    let table = config.out.join("table.csv");
    write_csv(&table, &header, &[row])?;
    artifacts.push(table);

    let mut names: Vec<String> = report.metrics.iter().map(|m| m.name.clone()).collect();
    names.sort();
    let mut header = strings(&["rep", "seed", "chosen_c", "lambda", "k_hat", "converged"]);
    header.extend(names.iter().cloned());
    let rows: Vec<Vec<String>> = report
        .outcomes
        .iter()
        .map(|o| {
            let mut r = vec![
                o.rep.to_string(),
                o.seed.to_string(),
                num(o.chosen_c),
                num(o.lambda),
                o.k_hat.to_string(),
                o.converged.to_string(),
            ];
            r.extend(names.iter().map(|k| o.metrics.get(k).map(|v| num(*v)).unwrap_or_default()));
            r
        })
        .collect();
    let reps = config.out.join("replications.csv");
    write_csv(&reps, &header, &rows)?;
    artifacts.push(reps);

    let mut summary = format!(
        "{} on (N, T) = ({n}, {t}), {} family, {} replications ({} failed)\nK correct rate: {:.3}\n",
        spec.which.name(),
        family.kind,
        config.reps,
        report.failures,
        report.k_correct_rate
    );
    for m in &report.metrics {
        summary += &format!("  {:<12} {:.4}  (K correct: {:.4})\n", m.name, m.mean_all, m.mean_correct_k);
    }

    if config.sweep {
        let sweep = run_sweep(&spec, family, &config.grid, config.cv.then_some(&plan), config.reps, &base)?;
        let mut rows: Vec<Vec<String>> = sweep
            .grid
            .iter()
            .zip(&sweep.fixed)
            .map(|(c, v)| vec![num(*c), num(*v)])
            .collect();
        if let Some(cv) = sweep.cv {
            rows.push(vec!["cv".into(), num(cv)]);
        }
        let path = config.out.join("sweep.csv");
        write_csv(&path, &["c".to_string(), sweep.metric.clone()], &rows)?;
        artifacts.push(path);
        summary += &format!("sweep of {} written ({} grid values)\n", sweep.metric, sweep.grid.len());
    }
    Ok(Outcome { summary, artifacts })
}

fn evaluate(config: &RunConfig) -> Result<Outcome> {
    let family = config.model_family()?;
    let data = load(config)?;
    let panel = &data.panel;
    let t_len = panel.n_periods();
    let burn_in = config.burn_in.unwrap_or((t_len / 2 + 1).max(2));
    let mut artifacts = Vec::new();

    let c = choose_c(config, panel, family, &mut artifacts)?;
    let fit = fit_at(config, panel, family, c)?;
    let rules: Vec<RankRule> = config.k.iter().map(|&k| RankRule::Fixed(k)).collect();
    let oos = out_of_sample_r2(
        panel,
        family,
        &OosConfig {
            burn_in,
            tuning: match (config.cv, config.cv_each_period) {
                (false, _) => RollingTuning::Fixed(c),
                (true, false) => RollingTuning::CvOnce(cv_plan(config)),
                (true, true) => RollingTuning::CvEachPeriod(cv_plan(config)),
            },
            rank_rules: rules.clone(),
            solver: solver(config),
            warm_start: config.warm_start,
        },
    )?;

    let spec_name = format!("{}{}", family.kind, if family.zero_alpha { "-zero-alpha" } else { "" });
    let mut rows = Vec::new();
    let mut summary = format!("{spec_name}: c = {c}, burn-in period {burn_in} of {t_len}\n");
    for (rule, result) in rules.iter().zip(&oos.rules) {
        let RankRule::Fixed(k) = *rule else { unreachable!() };
        let in_sample = extract_factors(&fit, *rule).and_then(|est| in_sample_r2(panel, &est));
        let ins = match &in_sample {
            Ok(s) => scores_fields(s),
            Err(e) => {
                log::warn!("in-sample scores for K = {k}: {e}");
                vec![num(f64::NAN); 3]
            }
        };
        let mut row = vec![spec_name.clone(), k.to_string()];
        row.extend(ins.iter().cloned());
        row.extend(scores_fields(&result.scores));
        row.push(result.failed_periods.len().to_string());
        rows.push(row);
        summary += &format!(
            "  K = {k}: R2 {} | R2_oos {}\n",
            ins.join(" "),
            scores_fields(&result.scores).join(" ")
        );
    }
    let path = config.out.join("scores.csv");
    write_csv(
        &path,
        &strings(&[
            "model", "k", "r2_total", "r2_ts_avg", "r2_cs_avg", "r2o_total", "r2o_ts_avg", "r2o_cs_avg", "failed_periods",
        ]),
        &rows,
    )?;
    artifacts.push(path);

    let c_rows: Vec<Vec<String>> = oos
        .c_path
        .iter()
        .map(|(t, c)| vec![data.periods[t - 1].clone(), num(*c)])
        .collect();
    let path = config.out.join("c_path.csv");
    write_csv(&path, &strings(&["period", "c"]), &c_rows)?;
    artifacts.push(path);
    if !oos.skipped_periods.is_empty() {
        summary += &format!("skipped periods: {:?}\n", oos.skipped_periods);
    }
    Ok(Outcome { summary, artifacts })
}
