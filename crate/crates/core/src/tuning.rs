//! Cross-validated choice of the regularization constant `c`.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problems::{DecisionMatrix, ModelFamily, Panel, Problem};
use crate::prox_apg::{default_lambda, solve_problem, SolverConfig};
use crate::rng::substream;

/// Grid used for the Monte Carlo designs.
pub const SIMULATION_GRID: [f64; 14] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5, 2.0];

/// Grid used for the empirical profile.
pub const EMPIRICAL_GRID: [f64; 10] = [0.0, 0.0001, 0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05];

pub fn simulation_grid() -> Vec<f64> {
    SIMULATION_GRID.to_vec()
}

pub fn empirical_grid() -> Vec<f64> {
    EMPIRICAL_GRID.to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub n_folds: usize,
    /// Ascending, nonnegative.
    pub grid: Vec<f64>,
    pub seed: u64,
    /// Walk each fold's grid from the largest `c` down, starting every solve at the previous solution.
    pub warm_start: bool,
}

impl CvPlan {
    pub fn simulation(seed: u64) -> Self {
        CvPlan {
            n_folds: 5,
            grid: simulation_grid(),
            seed,
            warm_start: true,
        }
    }

    pub fn empirical(seed: u64) -> Self {
        CvPlan {
            grid: empirical_grid(),
            ..Self::simulation(seed)
        }
    }

    /// Named preset: `simulation` or `empirical`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "simulation" => Ok(Self::simulation(seed)),
            "empirical" => Ok(Self::empirical(seed)),
            other => Err(Error::ConfigError(format!("unknown grid preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 folds, got {}", self.n_folds)));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidInput("the c grid is empty".into()));
        }
        if self.grid.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidInput("grid values must be finite and nonnegative".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("grid must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPoint {
    pub c: f64,
    /// Mean over folds of the held-out MSE; `None` when some fold failed numerically.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    /// One entry per grid value, in grid order.
    pub per_c_mse: Vec<CvPoint>,
    pub chosen_c: f64,
    pub fold_sizes: Vec<usize>,
}

/// Balanced random partition of the observed cells into `n_folds` folds.
///
/// Cells are shuffled with the plan's seed and dealt round-robin, so fold sizes differ by at most one.
pub fn assign_folds(panel: &Panel, plan: &CvPlan) -> Result<Vec<Vec<(usize, usize)>>> {
    plan.validate()?;
    let mut cells = panel.observed_cells();
    if cells.len() < plan.n_folds {
        return Err(Error::DegenerateInput(format!(
            "{} observed cells cannot fill {} folds",
            cells.len(),
            plan.n_folds
        )));
    }
    cells.shuffle(&mut substream(plan.seed, "cv-folds", 0));
    let mut folds = vec![Vec::new(); plan.n_folds];
    for (j, cell) in cells.into_iter().enumerate() {
        folds[j % plan.n_folds].push(cell);
    }
    for fold in &mut folds {
        fold.sort_unstable_by_key(|&(i, t)| (t, i));
    }
    Ok(folds)
}

/// Held-out MSE of each grid value on one fold, in grid order.
fn fold_errors(
    panel: &Panel,
    family: ModelFamily,
    plan: &CvPlan,
    base: &SolverConfig,
    held_out: &[(usize, usize)],
) -> Vec<Option<f64>> {
    let train = panel.mask_cells(held_out);
    let problem = match Problem::new(&train, family) {
        Ok(p) => p,
        Err(_) => return vec![None; plan.grid.len()],
    };
    let mut out = vec![None; plan.grid.len()];
    let mut warm: Option<DecisionMatrix> = None;
    for (g, &c) in plan.grid.iter().enumerate().rev() {
        let lambda = match default_lambda(panel, family, c) {
            Ok(l) => l,
            Err(_) => continue,
        };
        let config = SolverConfig {
            lambda,
            initial: if plan.warm_start && lambda > 0.0 { warm.clone() } else { None },
            ..base.clone()
        };
        let Ok((fit, _)) = solve_problem(&problem, &config) else {
            continue;
        };
        let mut sse = 0.0;
        for &(i, t) in held_out {
            let r = panel.y(i, t) - crate::problems::fitted_value(&fit, panel.x(i, t), i, t);
            sse += r * r;
        }
        let mse = sse / held_out.len() as f64;
        if mse.is_finite() {
            out[g] = Some(mse);
        }
        if lambda > 0.0 {
            warm = Some(fit);
        }
    }
    out
}

/// L-fold cell-holdout cross-validation over the plan's grid.
pub fn cross_validate(panel: &Panel, family: ModelFamily, plan: &CvPlan) -> Result<CvResult> {
    cross_validate_with(panel, family, plan, &SolverConfig::default())
}

/// [`cross_validate`] with explicit solver tolerance and iteration cap (`base.lambda` and
/// `base.initial` are ignored).
pub fn cross_validate_with(
    panel: &Panel,
    family: ModelFamily,
    plan: &CvPlan,
    base: &SolverConfig,
) -> Result<CvResult> {
    let folds = assign_folds(panel, plan)?;
    default_lambda(panel, family, 1.0)?;
    let per_fold: Vec<Vec<Option<f64>>> = folds
        .par_iter()
        .map(|held_out| fold_errors(panel, family, plan, base, held_out))
        .collect();
    let per_c_mse: Vec<CvPoint> = plan
        .grid
        .iter()
        .enumerate()
        .map(|(g, &c)| {
            let mut total = 0.0;
            for fold in &per_fold {
                match fold[g] {
                    Some(v) => total += v,
                    None => return CvPoint { c, mse: None },
                }
            }
            CvPoint {
                c,
                mse: Some(total / per_fold.len() as f64),
            }
        })
        .collect();
    // strict comparison keeps the smallest c among ties
    let mut chosen: Option<(f64, f64)> = None;
    for point in &per_c_mse {
        if let Some(m) = point.mse {
            if chosen.is_none_or(|(_, best)| m < best) {
                chosen = Some((point.c, m));
            }
        }
    }
    let (chosen_c, _) = chosen.ok_or_else(|| Error::TuningFailure("every grid value failed on some fold".into()))?;
    Ok(CvResult {
        per_c_mse,
        chosen_c,
        fold_sizes: folds.iter().map(Vec::len).collect(),
    })
}
