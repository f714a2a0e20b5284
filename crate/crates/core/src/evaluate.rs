//! In-sample and recursive out-of-sample R² measures.
//!
//! Naming: `ts_avg` averages each asset's time-series R² over assets;
//! `cs_avg` averages each period's cross-sectional R² over periods.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::extract::{default_delta, extract_factors, FactorEstimate, LowRankFit, RankRule};
use crate::problems::{DecisionMatrix, ModelFamily, Panel, Problem};
use crate::prox_apg::{default_lambda, solve_problem, SolverConfig};
use crate::tuning::{cross_validate_with, CvPlan};

/// Three R² measures plus how many per-asset / per-period terms were dropped for a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2Scores {
    pub total: f64,
    pub ts_avg: f64,
    pub cs_avg: f64,
    pub excluded_assets: usize,
    pub excluded_periods: usize,
}

/// In-sample and out-of-sample scores of one model specification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitScores {
    pub in_sample: R2Scores,
    pub out_of_sample: R2Scores,
    pub burn_in: usize,
}

/// Accumulates squared residuals and squared returns per asset and per period.
#[derive(Debug, Clone)]
struct R2Accumulator {
    res_asset: Vec<f64>,
    tot_asset: Vec<f64>,
    res_period: Vec<f64>,
    tot_period: Vec<f64>,
    seen_period: Vec<bool>,
}

impl R2Accumulator {
    fn new(n: usize, t: usize) -> Self {
        R2Accumulator {
            res_asset: vec![0.0; n],
            tot_asset: vec![0.0; n],
            res_period: vec![0.0; t],
            tot_period: vec![0.0; t],
            seen_period: vec![false; t],
        }
    }

    fn add(&mut self, i: usize, t: usize, y: f64, prediction: f64) {
        let r = y - prediction;
        self.res_asset[i] += r * r;
        self.tot_asset[i] += y * y;
        self.res_period[t] += r * r;
        self.tot_period[t] += y * y;
        self.seen_period[t] = true;
    }

    fn finish(&self) -> R2Scores {
        let total_res: f64 = self.res_asset.iter().sum();
        let total: f64 = self.tot_asset.iter().sum();
        let average = |res: &[f64], tot: &[f64], include: &dyn Fn(usize) -> bool| {
            let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
            for j in 0..res.len() {
                if !include(j) {
                    continue;
                }
                if tot[j] > 0.0 {
                    sum += res[j] / tot[j];
                    used += 1;
                } else {
                    excluded += 1;
                }
            }
            let value = if used == 0 { f64::NAN } else { 1.0 - sum / used as f64 };
            (value, excluded)
        };
        let (ts_avg, excluded_assets) = average(&self.res_asset, &self.tot_asset, &|_| true);
        let (cs_avg, excluded_periods) = average(&self.res_period, &self.tot_period, &|t| self.seen_period[t]);
        R2Scores {
            total: if total > 0.0 { 1.0 - total_res / total } else { f64::NAN },
            ts_avg,
            cs_avg,
            excluded_assets,
            excluded_periods,
        }
    }
}

/// `x_it' a_i + x_it' B_i g` for a factor-model estimate.
pub fn predict_cell(est: &FactorEstimate, x: &[f64], i: usize, g: &DVector<f64>) -> f64 {
    let p = x.len();
    let coef = est.alpha_coefficients(i, p) + est.beta_coefficients(i, p) * g;
    x.iter().zip(coef.iter()).map(|(a, b)| a * b).sum()
}

/// In-sample R² with residuals `y - x'a_i - x'B_i f_t` over observed cells.
pub fn in_sample_r2(panel: &Panel, est: &FactorEstimate) -> Result<R2Scores> {
    let (n, t_len, p) = (panel.n_assets(), panel.n_periods(), panel.n_covariates());
    if est.f_hat.nrows() != t_len || est.a_full(n, p).len() != n * p {
        return Err(Error::InvalidInput("estimate dimensions do not match the panel".into()));
    }
    let mut acc = R2Accumulator::new(n, t_len);
    for t in 0..t_len {
        let f_t = est.f_hat.row(t).transpose();
        for i in 0..n {
            if panel.is_observed(i, t) {
                acc.add(i, t, panel.y(i, t), predict_cell(est, panel.x(i, t), i, &f_t));
            }
        }
    }
    Ok(acc.finish())
}

/// How `c` is chosen in the rolling scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum RollingTuning {
    Fixed(f64),
    /// Cross-validate once on the periods before `burn_in`.
    CvOnce(CvPlan),
    /// Cross-validate on every training window.
    CvEachPeriod(CvPlan),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OosConfig {
    /// First evaluated period, 1-based; periods `burn_in..=T` are predicted.
    pub burn_in: usize,
    pub tuning: RollingTuning,
    pub rank_rules: Vec<RankRule>,
    pub solver: SolverConfig,
    /// Start each refit at the previous solution padded with a zero column.
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OosRuleResult {
    pub rule: RankRule,
    pub scores: R2Scores,
    /// `N x T`; `NaN` where no prediction was made.
    pub predictions: DMatrix<f64>,
    /// 1-based periods where this rule could not be applied.
    pub failed_periods: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OosResult {
    pub rules: Vec<OosRuleResult>,
    /// 1-based periods whose refit failed.
    pub skipped_periods: Vec<usize>,
    /// `c` used at each evaluated period (1-based period, c).
    pub c_path: Vec<(usize, f64)>,
}

/// Recursive out-of-sample R²: for each `t >= burn_in`, refit on periods `1..t-1` and predict
/// `x_it' (a_i + B_i lambda_t)` with `lambda_t` the mean of the estimated factors.
pub fn out_of_sample_r2(panel: &Panel, family: ModelFamily, config: &OosConfig) -> Result<OosResult> {
    let (n, t_len) = (panel.n_assets(), panel.n_periods());
    if config.burn_in < 2 || config.burn_in > t_len {
        return Err(Error::InvalidInput(format!(
            "burn_in must lie in 2..={t_len}, got {}",
            config.burn_in
        )));
    }
    if config.rank_rules.is_empty() {
        return Err(Error::InvalidInput("need at least one rank rule".into()));
    }
    let fixed_c = match &config.tuning {
        RollingTuning::Fixed(c) => Some(*c),
        RollingTuning::CvOnce(plan) => {
            let window = panel.head_periods(config.burn_in - 1)?;
            Some(cross_validate_with(&window, family, plan, &config.solver)?.chosen_c)
        }
        RollingTuning::CvEachPeriod(_) => None,
    };

    let mut accumulators: Vec<R2Accumulator> = config.rank_rules.iter().map(|_| R2Accumulator::new(n, t_len)).collect();
    let mut predictions: Vec<DMatrix<f64>> =
        config.rank_rules.iter().map(|_| DMatrix::from_element(n, t_len, f64::NAN)).collect();
    let mut failed: Vec<Vec<usize>> = vec![Vec::new(); config.rank_rules.len()];
    let mut skipped = Vec::new();
    let mut c_path = Vec::new();
    let mut warm: Option<DecisionMatrix> = None;

    for t in config.burn_in..=t_len {
        let target = t - 1; // 0-based index of the predicted period
        let window = panel.head_periods(t - 1)?;
        let fitted = (|| -> Result<(LowRankFit, f64)> {
            let c = match (&config.tuning, fixed_c) {
                (_, Some(c)) => c,
                (RollingTuning::CvEachPeriod(plan), None) => {
                    cross_validate_with(&window, family, plan, &config.solver)?.chosen_c
                }
                _ => unreachable!(),
            };
            let lambda = default_lambda(&window, family, c)?;
            let problem = Problem::new(&window, family)?;
            let initial = if config.warm_start && lambda > 0.0 {
                warm.as_ref().map(|w| w.pad_periods(1))
            } else {
                None
            };
            let (matrix, report) = solve_problem(
                &problem,
                &SolverConfig {
                    lambda,
                    initial,
                    ..config.solver.clone()
                },
            )?;
            Ok((
                LowRankFit {
                    family,
                    n_assets: n,
                    n_covariates: panel.n_covariates(),
                    matrix,
                    lambda_used: lambda,
                    report,
                },
                c,
            ))
        })();
        let (fit, c) = match fitted {
            Ok(v) => v,
            Err(e) => {
                log::warn!("refit for period {t} failed: {e}");
                skipped.push(t);
                continue;
            }
        };
        c_path.push((t, c));
        for (r, rule) in config.rank_rules.iter().enumerate() {
            let rule = match rule {
                RankRule::Threshold(d) if d.is_nan() => match default_delta(&window, family) {
                    Ok(d) => RankRule::Threshold(d),
                    Err(_) => {
                        failed[r].push(t);
                        continue;
                    }
                },
                other => *other,
            };
            let est = match extract_factors(&fit, rule) {
                Ok(e) => e,
                Err(_) => {
                    failed[r].push(t);
                    continue;
                }
            };
            let k = est.k_hat;
            let lambda_t = if k == 0 {
                DVector::zeros(0)
            } else {
                DVector::from_fn(k, |j, _| est.f_hat.column(j).mean())
            };
            for i in 0..n {
                if panel.is_observed(i, target) {
                    let y_hat = predict_cell(&est, panel.x(i, target), i, &lambda_t);
                    predictions[r][(i, target)] = y_hat;
                    accumulators[r].add(i, target, panel.y(i, target), y_hat);
                }
            }
        }
        warm = Some(fit.matrix);
    }

    let rules = config
        .rank_rules
        .iter()
        .enumerate()
        .map(|(r, rule)| OosRuleResult {
            rule: *rule,
            scores: accumulators[r].finish(),
            predictions: predictions[r].clone(),
            failed_periods: failed[r].clone(),
        })
        .collect();
    Ok(OosResult {
        rules,
        skipped_periods: skipped,
        c_path,
    })
}

/// Rank rule that resolves to the family's default threshold on each training window.
pub fn default_threshold_rule() -> RankRule {
    RankRule::Threshold(f64::NAN)
}
