//! Accelerated proximal gradient solver with backtracking.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matdecomp::shrink;
use crate::problems::{DecisionMatrix, FamilyKind, ModelFamily, Panel, Problem};

/// Maximum number of step-size adjustments per iteration.
pub const MAX_BACKTRACKS: usize = 60;

/// Relative slack on the majorization test, absorbing rounding in `f`.
const MAJORIZATION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Regularization level; `0` returns the least-squares fit.
    pub lambda: f64,
    /// Backtracking factor in `(0, 1)`.
    pub eta: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Warm start; zero when absent.
    pub initial: Option<DecisionMatrix>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.0,
            eta: 0.8,
            tolerance: 1e-5,
            max_iterations: 5000,
            initial: None,
        }
    }
}

impl SolverConfig {
    pub fn new(lambda: f64) -> Self {
        SolverConfig {
            lambda,
            ..Default::default()
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_initial(mut self, initial: Option<DecisionMatrix>) -> Self {
        self.initial = initial;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidInput(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    pub converged: bool,
    /// `||D|| / (tau max(1, ||Gamma*||))` at the last iteration.
    pub final_subgradient_ratio: f64,
    /// Objective `F` at each post-prox iterate.
    pub objective_trace: Vec<f64>,
    /// The quadratic model `Q_tau(Gamma*, Gamma)` (including the penalty) at each accepted step.
    pub majorization_trace: Vec<f64>,
    pub final_tau: f64,
    /// Iterations in which backtracking hit its cap or failed at `tau = L`, and `L` was accepted.
    pub backtrack_cap_hits: usize,
    /// Objective at the returned matrix.
    pub objective: f64,
    pub lipschitz: f64,
}

/// Minimizes `1/2 sum_observed (y - tr(X'Gamma))^2 + lambda ||Gamma||_*` over the family.
pub fn solve(panel: &Panel, family: ModelFamily, config: &SolverConfig) -> Result<(DecisionMatrix, SolverReport)> {
    config.validate()?;
    let problem = Problem::new(panel, family)?;
    solve_problem(&problem, config)
}

/// [`solve`] for a prepared problem (reuses its cached Lipschitz constant).
pub fn solve_problem(problem: &Problem<'_>, config: &SolverConfig) -> Result<(DecisionMatrix, SolverReport)> {
    config.validate()?;
    let lipschitz = problem.lipschitz();
    let lambda = config.lambda;

    if lambda == 0.0 {
        let fit = problem.least_squares()?;
        let objective = problem.loss_stacked(&problem.stack(&fit)?);
        if !objective.is_finite() {
            return Err(Error::NumericalFailure("least-squares objective is not finite".into()));
        }
        let report = SolverReport {
            iterations: 0,
            converged: true,
            final_subgradient_ratio: 0.0,
            objective_trace: vec![objective],
            majorization_trace: vec![objective],
            final_tau: lipschitz,
            backtrack_cap_hits: 0,
            objective,
            lipschitz,
        };
        return Ok((fit, report));
    }

    let (rows, cols) = problem.stacked_shape();
    let start = match &config.initial {
        Some(d) => problem.stack(d)?,
        None => DMatrix::zeros(rows, cols),
    };
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial matrix has non-finite entries".into()));
    }

    let mut previous = start.clone();
    let mut current = start;
    let (mut w_prev, mut w) = (1.0_f64, 1.0_f64);
    let mut tau = lipschitz;

    let mut trace = Vec::new();
    let mut majorization = Vec::new();
    let mut cap_hits = 0;
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let mut converged = false;
    let mut ratio = f64::INFINITY;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        // Step 1: search point
        let momentum = (w_prev - 1.0) / w;
        let search = if momentum == 0.0 {
            current.clone()
        } else {
            &current + (&current - &previous) * momentum
        };
        let f_search = problem.loss_stacked(&search);
        let g_search = problem.gradient_stacked(&search);
        if !f_search.is_finite() {
            return Err(Error::NumericalFailure(format!("loss is {f_search} at iteration {iterations}")));
        }

        // Step 2: backtracking; Step 3: the prox point at the accepted step size
        let mut tau_hat = config.eta * tau;
        let mut adjustments = 0;
        let (candidate, nuclear, f_candidate, model) = loop {
            let step = prox_point(&search, &g_search, tau_hat, lambda);
            let f_step = problem.loss_stacked(&step.0);
            let diff = &step.0 - &search;
            let q = f_search + diff.dot(&g_search) + 0.5 * tau_hat * diff.norm_squared();
            if f_step <= q + MAJORIZATION_SLACK * (1.0 + q.abs()) {
                break (step.0, step.1, f_step, q);
            }
            if tau_hat >= lipschitz {
                cap_hits += 1;
                break (step.0, step.1, f_step, q);
            }
            adjustments += 1;
            if adjustments >= MAX_BACKTRACKS {
                cap_hits += 1;
                tau_hat = lipschitz;
                let step = prox_point(&search, &g_search, tau_hat, lambda);
                let f_step = problem.loss_stacked(&step.0);
                let diff = &step.0 - &search;
                let q = f_search + diff.dot(&g_search) + 0.5 * tau_hat * diff.norm_squared();
                break (step.0, step.1, f_step, q);
            }
            tau_hat = (tau_hat / config.eta).min(lipschitz);
        };
        tau = tau_hat;

        let objective = f_candidate + lambda * nuclear;
        if !objective.is_finite() {
            return Err(Error::NumericalFailure(format!("objective is {objective} at iteration {iterations}")));
        }
        trace.push(objective);
        majorization.push(model + lambda * nuclear);
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, candidate.clone()));
        }

        // Step 5 statistic
        let g_candidate = problem.gradient_stacked(&candidate);
        let d = (&search - &candidate) * tau + g_candidate - &g_search;
        ratio = d.norm() / (tau * candidate.norm().max(1.0));

        // Step 4: momentum
        let w_next = (1.0 + (1.0 + 4.0 * w * w).sqrt()) / 2.0;
        w_prev = w;
        w = w_next;
        previous = std::mem::replace(&mut current, candidate);

        if ratio <= config.tolerance {
            converged = true;
            break;
        }
    }

    let (objective, chosen) = if converged {
        (*trace.last().expect("at least one iteration"), current)
    } else {
        best.expect("at least one iteration")
    };
    let report = SolverReport {
        iterations,
        converged,
        final_subgradient_ratio: ratio,
        objective_trace: trace,
        majorization_trace: majorization,
        final_tau: tau,
        backtrack_cap_hits: cap_hits,
        objective,
        lipschitz,
    };
    Ok((problem.unstack(chosen), report))
}

fn prox_point(search: &DMatrix<f64>, grad: &DMatrix<f64>, tau: f64, lambda: f64) -> (DMatrix<f64>, f64) {
    let target = search - grad / tau;
    let s = shrink(&target, lambda / tau);
    (s.matrix, s.nuclear_norm)
}

/// One proximal gradient step `S_{lambda/tau}(Gamma - grad f(Gamma) / tau)` in stacked coordinates.
pub fn proximal_step(
    panel: &Panel,
    family: ModelFamily,
    decision: &DecisionMatrix,
    tau: f64,
    lambda: f64,
) -> Result<DecisionMatrix> {
    if !(tau > 0.0) || !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("tau and lambda must be positive (got {tau}, {lambda})")));
    }
    let problem = Problem::new(panel, family)?;
    let z = problem.stack(decision)?;
    let g = problem.gradient_stacked(&z);
    Ok(problem.unstack(prox_point(&z, &g, tau, lambda).0))
}

/// Objective `f + lambda ||stacked||_*` at a decision.
pub fn objective(panel: &Panel, family: ModelFamily, decision: &DecisionMatrix, lambda: f64) -> Result<f64> {
    let problem = Problem::new(panel, family)?;
    let z = problem.stack(decision)?;
    Ok(problem.loss_stacked(&z) + lambda * crate::matdecomp::nuclear_norm(&z)?)
}

/// `c sqrt((Np + T) log N)`, or `c sqrt(N (p + T) log N)` for the homogeneous family.
pub fn default_lambda(panel: &Panel, family: ModelFamily, c: f64) -> Result<f64> {
    default_lambda_for(panel.n_assets(), panel.n_periods(), panel.n_covariates(), family.kind, c)
}

/// [`default_lambda`] from dimensions alone.
pub fn default_lambda_for(n: usize, t: usize, p: usize, kind: FamilyKind, c: f64) -> Result<f64> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::InvalidInput(format!("c must be finite and >= 0, got {c}")));
    }
    if n < 2 {
        return Err(Error::DegenerateInput(format!("need N >= 2 for log N > 0, got N = {n}")));
    }
    let (n, t, p) = (n as f64, t as f64, p as f64);
    let base = match kind {
        FamilyKind::Unconstrained | FamilyKind::Semiparametric => (n * p + t) * n.ln(),
        FamilyKind::Homogeneous => n * (p + t) * n.ln(),
    };
    Ok(c * base.sqrt())
}
