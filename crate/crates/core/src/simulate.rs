//! Monte Carlo designs, replication runner and rotation-aligned error metrics.
//!
//! Covariates are ordered `(1, x1, x2, x3)`: the constant comes first so every
//! design can be fitted by the semiparametric family, and `a_i`, `B_i` are
//! permuted to match.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extract::{default_delta, extract_factors, rotation_align, FactorEstimate, Intercepts, Loadings, RankRule};
use crate::matdecomp::pseudo_inverse;
use crate::problems::{DecisionMatrix, FamilyKind, ModelFamily, Panel, Problem};
use crate::prox_apg::{default_lambda, solve_problem, SolverConfig};
use crate::rng::{derive_seed, substream};
use crate::tuning::{cross_validate_with, CvPlan};

/// Number of covariates in every design.
pub const P: usize = 4;
/// Number of factors in every design.
pub const K: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dgp {
    /// Heterogeneous `a_i` and `B_i`.
    Dgp1,
    /// Heterogeneous intercept row only.
    Dgp2,
    /// Homogeneous `a_i` and `B_i`.
    Dgp3,
}

impl Dgp {
    /// The family each design is estimated with.
    pub fn default_family(self) -> ModelFamily {
        match self {
            Dgp::Dgp1 => ModelFamily::unconstrained(),
            Dgp::Dgp2 => ModelFamily::semiparametric(),
            Dgp::Dgp3 => ModelFamily::homogeneous(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dgp::Dgp1 => "dgp1",
            Dgp::Dgp2 => "dgp2",
            Dgp::Dgp3 => "dgp3",
        }
    }
}

impl std::str::FromStr for Dgp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dgp1" | "1" => Ok(Dgp::Dgp1),
            "dgp2" | "2" => Ok(Dgp::Dgp2),
            "dgp3" | "3" => Ok(Dgp::Dgp3),
            other => Err(Error::ConfigError(format!("unknown DGP '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub which: Dgp,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    /// Variance of the idiosyncratic errors (4 in the reference design).
    pub noise_variance: f64,
}

impl DgpSpec {
    pub fn new(which: Dgp, n: usize, t: usize, seed: u64) -> Self {
        DgpSpec {
            which,
            n,
            t,
            seed,
            noise_variance: 4.0,
        }
    }

    fn for_replication(&self, rep: usize) -> DgpSpec {
        DgpSpec {
            seed: derive_seed(self.seed, "replication", rep as u64),
            ..self.clone()
        }
    }
}

/// A generated panel together with every piece that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub spec: DgpSpec,
    pub panel: Panel,
    /// `Np`; entries `i*p .. (i+1)*p` hold `a_i`.
    pub a: DVector<f64>,
    /// `Np x K`.
    pub b: DMatrix<f64>,
    /// `T x K`.
    pub f: DMatrix<f64>,
    /// `N x T` idiosyncratic errors.
    pub eps: DMatrix<f64>,
}

impl SimTruth {
    /// `Pi = a 1_T' + B F'`.
    pub fn pi(&self) -> DMatrix<f64> {
        let t = self.f.nrows();
        &self.a * DMatrix::from_element(1, t, 1.0) + &self.b * self.f.transpose()
    }

    fn block_rows_homogeneous(&self, first: usize) -> bool {
        let (n, p) = (self.spec.n, P);
        (0..n).all(|i| {
            (first..p).all(|k| {
                self.a[i * p + k] == self.a[k] && self.b.row(i * p + k) == self.b.row(k)
            })
        })
    }

    /// The truth as a decision of `kind`, when it lies in that family.
    pub fn decision(&self, kind: FamilyKind) -> Option<DecisionMatrix> {
        let pi = self.pi();
        let (n, p) = (self.spec.n, P);
        match kind {
            FamilyKind::Unconstrained => Some(DecisionMatrix::Unconstrained(pi)),
            FamilyKind::Semiparametric if self.block_rows_homogeneous(1) => Some(DecisionMatrix::Semiparametric {
                diamond: DMatrix::from_fn(n, pi.ncols(), |i, t| pi[(i * p, t)]),
                star: pi.rows(1, p - 1).into_owned(),
            }),
            FamilyKind::Homogeneous if self.block_rows_homogeneous(0) => {
                Some(DecisionMatrix::Homogeneous(pi.rows(0, p).into_owned()))
            }
            _ => None,
        }
    }

    /// `(mu, phi, Lambda, Phi)` when the truth is semiparametric.
    pub fn semiparametric_parts(&self) -> Option<(DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        if !self.block_rows_homogeneous(1) {
            return None;
        }
        let (n, p) = (self.spec.n, P);
        let mu = DVector::from_fn(n, |i, _| self.a[i * p]);
        let phi = self.a.rows(1, p - 1).into_owned();
        let lambda = DMatrix::from_fn(n, K, |i, k| self.b[(i * p, k)]);
        let phi_mat = self.b.rows(1, p - 1).into_owned();
        Some((mu, phi, lambda, phi_mat))
    }

    /// `(phi_0, Phi_0)` when the truth is homogeneous.
    pub fn homogeneous_parts(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        if !self.block_rows_homogeneous(0) {
            return None;
        }
        Some((self.a.rows(0, P).into_owned(), self.b.rows(0, P).into_owned()))
    }
}

/// Draws one panel from the design.
pub fn generate(spec: &DgpSpec) -> Result<SimTruth> {
    let (n, t) = (spec.n, spec.t);
    if n < 2 || t < 2 {
        return Err(Error::InvalidInput(format!("designs need N, T >= 2 (got {n}, {t})")));
    }
    if !(spec.noise_variance >= 0.0) || !spec.noise_variance.is_finite() {
        return Err(Error::InvalidInput(format!("noise variance must be >= 0, got {}", spec.noise_variance)));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");

    let mut rng = substream(spec.seed, "volatility", 0);
    let sigma: Vec<f64> = (0..t).map(|_| rng.gen_range(1.0..2.0)).collect();

    // x[(t * N + i) * P + k], constant first
    let mut x = vec![0.0; n * t * P];
    let mut rng = substream(spec.seed, "covariates", 0);
    let mut lagged: Vec<f64> = (0..n).map(|_| std_normal.sample(&mut rng)).collect();
    for tt in 0..t {
        for (i, lag) in lagged.iter_mut().enumerate() {
            let u1 = std_normal.sample(&mut rng);
            let u2 = std_normal.sample(&mut rng);
            let u3 = std_normal.sample(&mut rng);
            *lag = 0.3 * *lag + u2;
            let cell = (tt * n + i) * P;
            x[cell] = 1.0;
            x[cell + 1] = sigma[tt] * u1;
            x[cell + 2] = *lag;
            x[cell + 3] = u3;
        }
    }

    let mut rng = substream(spec.seed, "factors", 0);
    let f0_sd = (1.0f64 / 0.91).sqrt();
    let mut prev = [
        1.0 / 0.7 + f0_sd * std_normal.sample(&mut rng),
        1.0 / 0.7 + f0_sd * std_normal.sample(&mut rng),
    ];
    let mut f = DMatrix::zeros(t, K);
    for tt in 0..t {
        for k in 0..K {
            prev[k] = 0.3 * prev[k] + 1.0 + std_normal.sample(&mut rng);
            f[(tt, k)] = prev[k];
        }
    }

    let mut rng = substream(spec.seed, "loadings", 0);
    let scale = Uniform::new(1.0, 3.0);
    let mut a = DVector::zeros(n * P);
    let mut b = DMatrix::zeros(n * P, K);
    for i in 0..n {
        let theta = std_normal.sample(&mut rng);
        let delta = scale.sample(&mut rng);
        let r = i * P;
        // rows: constant, x1, x2, x3
        a[r + 1] = 1.0;
        a[r + 2] = match spec.which {
            Dgp::Dgp1 => theta,
            Dgp::Dgp2 | Dgp::Dgp3 => 1.0,
        };
        b[(r + 3, 0)] = 2.0;
        b[(r, 1)] = match spec.which {
            Dgp::Dgp1 | Dgp::Dgp2 => delta,
            Dgp::Dgp3 => 2.0,
        };
    }

    let mut rng = substream(spec.seed, "noise", 0);
    let noise_sd = spec.noise_variance.sqrt();
    let eps = DMatrix::from_fn(n, t, |_, _| noise_sd * std_normal.sample(&mut rng));

    let mut y = DMatrix::zeros(n, t);
    for tt in 0..t {
        for i in 0..n {
            let xi = &x[(tt * n + i) * P..(tt * n + i + 1) * P];
            let mut v = eps[(i, tt)];
            for k in 0..P {
                let coef = a[i * P + k] + b[(i * P + k, 0)] * f[(tt, 0)] + b[(i * P + k, 1)] * f[(tt, 1)];
                v += xi[k] * coef;
            }
            y[(i, tt)] = v;
        }
    }
    let panel = Panel::fully_observed(y, P, |i, tt, k| x[(tt * n + i) * P + k])?;
    Ok(SimTruth {
        spec: spec.clone(),
        panel,
        a,
        b,
        f,
        eps,
    })
}

/// How `c` is chosen in each replication.
#[derive(Debug, Clone, PartialEq)]
pub enum Tuning {
    Fixed(f64),
    CrossValidated(CvPlan),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub rep: usize,
    pub seed: u64,
    pub chosen_c: f64,
    pub lambda: f64,
    pub k_hat: usize,
    pub converged: bool,
    /// Normalized squared errors keyed by estimand name.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    /// Mean over replications where the metric is defined.
    pub mean_all: f64,
    pub count_all: usize,
    /// Mean over replications with `K_hat = K`.
    pub mean_correct_k: f64,
    pub count_correct_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub dgp: Dgp,
    pub n: usize,
    pub t: usize,
    pub family: ModelFamily,
    pub reps: usize,
    pub k_correct_rate: f64,
    pub metrics: Vec<MetricSummary>,
    pub failures: usize,
    pub outcomes: Vec<ReplicationOutcome>,
}

impl SimReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn chosen_c(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.chosen_c).collect()
    }
}

/// Name of the family's headline fit metric (the one the c-sweep figures plot).
pub fn headline_metric(kind: FamilyKind) -> &'static str {
    match kind {
        FamilyKind::Unconstrained => "pi",
        FamilyKind::Semiparametric => "pi_stacked",
        FamilyKind::Homogeneous => "pi0",
    }
}

fn sq(m: &DMatrix<f64>) -> f64 {
    m.norm_squared()
}

/// Fit-level metrics that need no factor extraction.
pub fn fit_metrics(truth: &SimTruth, fit: &DecisionMatrix) -> BTreeMap<String, f64> {
    let (n, t) = (truth.spec.n as f64, truth.spec.t as f64);
    let mut out = BTreeMap::new();
    let pi = truth.pi();
    out.insert("pi".to_string(), sq(&(fit.expand(truth.spec.n, P) - &pi)) / (n * t));
    match (fit, truth.decision(fit.kind())) {
        (
            DecisionMatrix::Semiparametric { diamond, star },
            Some(DecisionMatrix::Semiparametric { diamond: d0, star: s0 }),
        ) => {
            let dd = sq(&(diamond - d0));
            let ds = sq(&(star - s0));
            out.insert("pi_diamond".into(), dd / (n * t));
            out.insert("pi_star".into(), ds / t);
            out.insert("pi_stacked".into(), (dd + n * ds) / (n * t));
        }
        (DecisionMatrix::Homogeneous(g), Some(DecisionMatrix::Homogeneous(g0))) => {
            out.insert("pi0".into(), sq(&(g - g0)) / t);
        }
        _ => {}
    }
    out
}

/// Extraction metrics; alignment-dependent ones only when `K_hat >= 1` and `H` exists.
pub fn factor_metrics(truth: &SimTruth, est: &FactorEstimate) -> BTreeMap<String, f64> {
    let (n, t) = (truth.spec.n, truth.spec.t);
    let (nf, tf) = (n as f64, t as f64);
    let mut out = BTreeMap::new();
    let a_hat = est.a_full(n, P);
    out.insert("a".into(), (&a_hat - &truth.a).norm_squared() / nf);
    match &est.a_hat {
        Intercepts::Semiparametric { mu, phi } => {
            if let Some((mu0, phi0, _, _)) = truth.semiparametric_parts() {
                out.insert("mu".into(), (mu - mu0).norm_squared() / nf);
                out.insert("phi".into(), (phi - phi0).norm_squared());
            }
        }
        Intercepts::Homogeneous(phi) => {
            if let Some((phi0, _)) = truth.homogeneous_parts() {
                out.insert("phi0".into(), (phi - phi0).norm_squared());
            }
        }
        Intercepts::Full(_) => {}
    }
    if est.k_hat == 0 {
        return out;
    }
    let Ok(h) = rotation_align(&truth.f, &est.f_hat) else {
        return out;
    };
    let Ok(h_inv_t) = pseudo_inverse(&h.transpose()) else {
        return out;
    };
    out.insert("f".into(), sq(&(&est.f_hat - &truth.f * h_inv_t)) / tf);
    out.insert("b".into(), sq(&(est.b_full(n, P) - &truth.b * &h)) / nf);
    match &est.b_hat {
        Loadings::Semiparametric { lambda, phi } => {
            if let Some((_, _, lambda0, phi_mat0)) = truth.semiparametric_parts() {
                out.insert("lambda".into(), sq(&(lambda - lambda0 * &h)) / nf);
                out.insert("phi_mat".into(), sq(&(phi - phi_mat0 * &h)));
            }
        }
        Loadings::Homogeneous(phi) => {
            if let Some((_, phi_mat0)) = truth.homogeneous_parts() {
                out.insert("phi0_mat".into(), sq(&(phi - phi_mat0 * &h)));
            }
        }
        Loadings::Full(_) => {}
    }
    out
}

fn choose_c(
    truth: &SimTruth,
    family: ModelFamily,
    tuning: &Tuning,
    base: &SolverConfig,
) -> Result<f64> {
    match tuning {
        Tuning::Fixed(c) => Ok(*c),
        Tuning::CrossValidated(plan) => {
            let plan = CvPlan {
                seed: derive_seed(truth.spec.seed, "cv", 0),
                ..plan.clone()
            };
            Ok(cross_validate_with(&truth.panel, family, &plan, base)?.chosen_c)
        }
    }
}

/// One replication: generate, tune, solve, extract, score.
pub fn run_replication(
    spec: &DgpSpec,
    family: ModelFamily,
    tuning: &Tuning,
    base: &SolverConfig,
    rep: usize,
) -> Result<ReplicationOutcome> {
    let spec = spec.for_replication(rep);
    let truth = generate(&spec)?;
    let panel = &truth.panel;
    let c = choose_c(&truth, family, tuning, base)?;
    let lambda = default_lambda(panel, family, c)?;
    let problem = Problem::new(panel, family)?;
    let (fit, report) = solve_problem(
        &problem,
        &SolverConfig {
            lambda,
            initial: None,
            ..base.clone()
        },
    )?;
    let low_rank = crate::extract::LowRankFit {
        family,
        n_assets: spec.n,
        n_covariates: P,
        matrix: fit,
        lambda_used: lambda,
        report,
    };
    let est = extract_factors(&low_rank, RankRule::Threshold(default_delta(panel, family)?))?;
    let mut metrics = fit_metrics(&truth, &low_rank.matrix);
    metrics.extend(factor_metrics(&truth, &est));
    Ok(ReplicationOutcome {
        rep,
        seed: spec.seed,
        chosen_c: c,
        lambda,
        k_hat: est.k_hat,
        converged: low_rank.report.converged,
        metrics,
    })
}

/// Runs `reps` replications in parallel and aggregates them in replication order.
pub fn run_study(spec: &DgpSpec, family: ModelFamily, tuning: &Tuning, reps: usize) -> Result<SimReport> {
    run_study_with(spec, family, tuning, reps, &SolverConfig::default())
}

/// [`run_study`] with explicit solver tolerance and iteration cap.
pub fn run_study_with(
    spec: &DgpSpec,
    family: ModelFamily,
    tuning: &Tuning,
    reps: usize,
    base: &SolverConfig,
) -> Result<SimReport> {
    if reps == 0 {
        return Err(Error::InvalidInput("need at least one replication".into()));
    }
    if let Tuning::CrossValidated(plan) = tuning {
        plan.validate()?;
    }
    let results: Vec<Result<ReplicationOutcome>> = (0..reps)
        .into_par_iter()
        .map(|rep| run_replication(spec, family, tuning, base, rep))
        .collect();
    let mut failures = 0;
    let mut outcomes = Vec::with_capacity(reps);
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("replication failed: {e}");
                failures += 1;
            }
        }
    }
    if outcomes.is_empty() {
        return Err(Error::NumericalFailure(format!("all {reps} replications failed")));
    }
    Ok(SimReport {
        dgp: spec.which,
        n: spec.n,
        t: spec.t,
        family,
        reps,
        k_correct_rate: outcomes.iter().filter(|o| o.k_hat == K).count() as f64 / outcomes.len() as f64,
        metrics: summarize(&outcomes),
        failures,
        outcomes,
    })
}

/// Per-metric means over all replications and over those with the correct rank.
pub fn summarize(outcomes: &[ReplicationOutcome]) -> Vec<MetricSummary> {
    let mut names: Vec<&String> = outcomes.iter().flat_map(|o| o.metrics.keys()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|name| {
            let (mut s_all, mut n_all, mut s_ok, mut n_ok) = (0.0, 0, 0.0, 0);
            for o in outcomes {
                if let Some(v) = o.metrics.get(name) {
                    s_all += v;
                    n_all += 1;
                    if o.k_hat == K {
                        s_ok += v;
                        n_ok += 1;
                    }
                }
            }
            let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
            MetricSummary {
                name: name.clone(),
                mean_all: mean(s_all, n_all),
                count_all: n_all,
                mean_correct_k: mean(s_ok, n_ok),
                count_correct_k: n_ok,
            }
        })
        .collect()
}

/// Fixed-c sweep of the headline fit metric, with the CV-selected value alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub grid: Vec<f64>,
    /// Mean headline metric per grid value.
    pub fixed: Vec<f64>,
    /// Mean headline metric at each replication's CV choice.
    pub cv: Option<f64>,
    pub metric: String,
    /// `per_rep[r][g]`.
    pub per_rep: Vec<Vec<f64>>,
    pub chosen_c: Vec<f64>,
    pub failures: usize,
}

/// For each replication: fit every grid value (walking `c` downward with warm starts) and,
/// when `plan` is given, record the metric at the CV choice.
pub fn run_sweep(
    spec: &DgpSpec,
    family: ModelFamily,
    grid: &[f64],
    plan: Option<&CvPlan>,
    reps: usize,
    base: &SolverConfig,
) -> Result<SweepReport> {
    if reps == 0 || grid.is_empty() {
        return Err(Error::InvalidInput("need at least one replication and one grid value".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::InvalidInput("grid must be ascending and nonnegative".into()));
    }
    let metric = headline_metric(family.kind).to_string();
    let rows: Vec<Result<(Vec<f64>, Option<f64>)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let spec = spec.for_replication(rep);
            let truth = generate(&spec)?;
            let problem = Problem::new(&truth.panel, family)?;
            let mut values = vec![f64::NAN; grid.len()];
            let mut warm: Option<DecisionMatrix> = None;
            for (g, &c) in grid.iter().enumerate().rev() {
                let lambda = default_lambda(&truth.panel, family, c)?;
                let config = SolverConfig {
                    lambda,
                    initial: if lambda > 0.0 { warm.clone() } else { None },
                    ..base.clone()
                };
                let (fit, _) = solve_problem(&problem, &config)?;
                values[g] = *fit_metrics(&truth, &fit)
                    .get(&metric)
                    .ok_or_else(|| Error::InvalidInput(format!("the truth does not lie in the {} family", family.kind)))?;
                if lambda > 0.0 {
                    warm = Some(fit);
                }
            }
            let chosen = match plan {
                Some(p) => Some(choose_c(&truth, family, &Tuning::CrossValidated(p.clone()), base)?),
                None => None,
            };
            Ok((values, chosen))
        })
        .collect();
    let mut per_rep = Vec::new();
    let mut chosen_c = Vec::new();
    let mut cv_values = Vec::new();
    let mut failures = 0;
    for r in rows {
        match r {
            Ok((values, chosen)) => {
                if let Some(c) = chosen {
                    // a chosen c off the sweep grid is scored by a separate fit
                    let g = grid.iter().position(|&x| x == c);
                    chosen_c.push(c);
                    if let Some(g) = g {
                        cv_values.push(values[g]);
                    }
                }
                per_rep.push(values);
            }
            Err(e) => {
                log::warn!("sweep replication failed: {e}");
                failures += 1;
            }
        }
    }
    if per_rep.is_empty() {
        return Err(Error::NumericalFailure("every sweep replication failed".into()));
    }
    let fixed = (0..grid.len())
        .map(|g| per_rep.iter().map(|v| v[g]).sum::<f64>() / per_rep.len() as f64)
        .collect();
    let cv = if plan.is_some() && !cv_values.is_empty() {
        Some(cv_values.iter().sum::<f64>() / cv_values.len() as f64)
    } else {
        None
    };
    Ok(SweepReport {
        grid: grid.to_vec(),
        fixed,
        cv,
        metric,
        per_rep,
        chosen_c,
        failures,
    })
}
