//! Rank selection and factor extraction from a fitted low-rank matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matdecomp::{demean_rows, row_means, svd};
use crate::problems::{DecisionMatrix, FamilyKind, ModelFamily, Panel};
use crate::prox_apg::{solve, SolverConfig, SolverReport};

/// Upper bound on the condition number of `F_hat' M_T F_hat` accepted by [`rotation_align`].
pub const MAX_ROTATION_CONDITION: f64 = 1e12;

/// Solver output together with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFit {
    pub family: ModelFamily,
    pub n_assets: usize,
    pub n_covariates: usize,
    pub matrix: DecisionMatrix,
    pub lambda_used: f64,
    pub report: SolverReport,
}

impl LowRankFit {
    pub fn estimate(panel: &Panel, family: ModelFamily, config: &SolverConfig) -> Result<Self> {
        let (matrix, report) = solve(panel, family, config)?;
        Ok(LowRankFit {
            family,
            n_assets: panel.n_assets(),
            n_covariates: panel.n_covariates(),
            matrix,
            lambda_used: config.lambda,
            report,
        })
    }

    /// Wraps an externally produced matrix (tests, archives).
    pub fn from_matrix(
        family: ModelFamily,
        n_assets: usize,
        n_covariates: usize,
        matrix: DecisionMatrix,
        lambda_used: f64,
    ) -> Result<Self> {
        let (n, p) = (n_assets, n_covariates);
        let ok = match (&matrix, family.kind) {
            (DecisionMatrix::Unconstrained(g), FamilyKind::Unconstrained) => g.nrows() == n * p,
            (DecisionMatrix::Semiparametric { diamond, star }, FamilyKind::Semiparametric) => {
                p >= 2 && diamond.nrows() == n && star.nrows() == p - 1 && star.ncols() == diamond.ncols()
            }
            (DecisionMatrix::Homogeneous(g), FamilyKind::Homogeneous) => g.nrows() == p,
            _ => false,
        };
        if !ok || matrix.n_periods() == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix does not fit a {} model with N={n}, p={p}",
                family.kind
            )));
        }
        Ok(LowRankFit {
            family,
            n_assets,
            n_covariates,
            matrix,
            lambda_used,
            report: SolverReport {
                iterations: 0,
                converged: true,
                final_subgradient_ratio: 0.0,
                objective_trace: Vec::new(),
                majorization_trace: Vec::new(),
                final_tau: 0.0,
                backtrack_cap_hits: 0,
                objective: f64::NAN,
                lipschitz: f64::NAN,
            },
        })
    }
}

/// How the number of factors is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankRule {
    /// Count Gram eigenvalues at or above the threshold.
    Threshold(f64),
    /// Use exactly this many factors.
    Fixed(usize),
}

/// Intercept part `a`.
#[derive(Debug, Clone, PartialEq)]
pub enum Intercepts {
    /// `Np` vector; entries `i*p .. (i+1)*p` hold `a_i`.
    Full(DVector<f64>),
    /// `a_i = (mu_i, phi')'`.
    Semiparametric { mu: DVector<f64>, phi: DVector<f64> },
    /// `a_i = phi_0` for all `i`.
    Homogeneous(DVector<f64>),
}

/// Loading part `B`.
#[derive(Debug, Clone, PartialEq)]
pub enum Loadings {
    /// `Np x K`; rows `i*p .. (i+1)*p` hold `B_i`.
    Full(DMatrix<f64>),
    /// `B_i = (lambda_i, Phi')'`; `lambda` is `N x K`, `phi` is `(p-1) x K`.
    Semiparametric { lambda: DMatrix<f64>, phi: DMatrix<f64> },
    /// `B_i = Phi_0` for all `i`.
    Homogeneous(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractWarning {
    /// The selected rank reaches the ceiling `min(rows, T) - 1` the theory assumes is not hit.
    RankOverflow { k_hat: usize, ceiling: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub family: ModelFamily,
    pub k_hat: usize,
    pub a_hat: Intercepts,
    pub b_hat: Loadings,
    /// `T x K`.
    pub f_hat: DMatrix<f64>,
    /// Threshold used, or `NaN` under [`RankRule::Fixed`].
    pub delta_used: f64,
    /// Gram eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    pub warnings: Vec<ExtractWarning>,
}

impl FactorEstimate {
    /// `a_i` as a `p` vector.
    pub fn alpha_coefficients(&self, i: usize, p: usize) -> DVector<f64> {
        match &self.a_hat {
            Intercepts::Full(a) => a.rows(i * p, p).into_owned(),
            Intercepts::Semiparametric { mu, phi } => {
                let mut out = DVector::zeros(p);
                out[0] = mu[i];
                out.rows_mut(1, p - 1).copy_from(phi);
                out
            }
            Intercepts::Homogeneous(phi) => phi.clone(),
        }
    }

    /// `B_i` as a `p x K` matrix.
    pub fn beta_coefficients(&self, i: usize, p: usize) -> DMatrix<f64> {
        match &self.b_hat {
            Loadings::Full(b) => b.rows(i * p, p).into_owned(),
            Loadings::Semiparametric { lambda, phi } => {
                let k = lambda.ncols();
                let mut out = DMatrix::zeros(p, k);
                out.row_mut(0).copy_from(&lambda.row(i));
                out.rows_mut(1, p - 1).copy_from(phi);
                out
            }
            Loadings::Homogeneous(phi) => phi.clone(),
        }
    }

    /// `a` stacked to `Np`.
    pub fn a_full(&self, n: usize, p: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n * p);
        for i in 0..n {
            out.rows_mut(i * p, p).copy_from(&self.alpha_coefficients(i, p));
        }
        out
    }

    /// `B` stacked to `Np x K`.
    pub fn b_full(&self, n: usize, p: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n * p, self.k_hat);
        for i in 0..n {
            out.rows_mut(i * p, p).copy_from(&self.beta_coefficients(i, p));
        }
        out
    }
}

/// The matrix whose left singular vectors carry the loadings, before demeaning.
fn loading_source(matrix: &DecisionMatrix) -> DMatrix<f64> {
    match matrix {
        DecisionMatrix::Unconstrained(g) | DecisionMatrix::Homogeneous(g) => g.clone(),
        DecisionMatrix::Semiparametric { diamond, star } => {
            let n = diamond.nrows();
            let mut s = DMatrix::zeros(n + star.nrows(), diamond.ncols());
            s.rows_mut(0, n).copy_from(diamond);
            s.rows_mut(n, star.nrows()).copy_from(&(star * (n as f64).sqrt()));
            s
        }
    }
}

fn family_source(fit: &LowRankFit) -> DMatrix<f64> {
    let s = loading_source(&fit.matrix);
    if fit.family.zero_alpha {
        s
    } else {
        demean_rows(&s)
    }
}

/// Eigenvalues of the family Gram matrix in descending order.
///
/// The Gram is `S S'` where `S` is `Pi M_T` (unconstrained), `(Pi_diamond; sqrt(N) Pi_star) M_T`
/// (semiparametric) or `Pi_0 M_T` (homogeneous); `M_T` is dropped under zero alpha.
pub fn gram_eigenvalues(fit: &LowRankFit) -> Result<Vec<f64>> {
    // squared singular values of S, so rank selection agrees with extract_factors
    let dec = svd(&family_source(fit))?;
    Ok(dec.singular_values.iter().map(|s| s * s).collect())
}

/// Number of Gram eigenvalues at or above `delta`.
pub fn select_rank(fit: &LowRankFit, delta: f64) -> Result<usize> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    Ok(gram_eigenvalues(fit)?.iter().filter(|&&v| v >= delta).count())
}

/// `2 (Np + T) log N`, or `2 (p + T) log N / sqrt(N)` for the homogeneous family.
pub fn default_delta(panel: &Panel, family: ModelFamily) -> Result<f64> {
    default_delta_for(panel.n_assets(), panel.n_periods(), panel.n_covariates(), family.kind)
}

/// [`default_delta`] from dimensions alone.
pub fn default_delta_for(n: usize, t: usize, p: usize, kind: FamilyKind) -> Result<f64> {
    if n < 2 {
        return Err(Error::DegenerateInput(format!("need N >= 2 for log N > 0, got N = {n}")));
    }
    let (n, t, p) = (n as f64, t as f64, p as f64);
    Ok(match kind {
        FamilyKind::Unconstrained | FamilyKind::Semiparametric => 2.0 * (n * p + t) * n.ln(),
        FamilyKind::Homogeneous => 2.0 * (p + t) * n.ln() / n.sqrt(),
    })
}

/// Extracts `(K, a, B, F)` with `B'B/N = I` (`Phi_0'Phi_0 = I` when homogeneous) and `B'a = 0`.
pub fn extract_factors(fit: &LowRankFit, rule: RankRule) -> Result<FactorEstimate> {
    let source = family_source(fit);
    let t = source.ncols();
    let dec = svd(&source)?;
    let eigenvalues: Vec<f64> = dec.singular_values.iter().map(|s| s * s).collect();
    let (k_hat, delta_used) = match rule {
        RankRule::Threshold(delta) => {
            if !(delta > 0.0) {
                return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
            }
            (eigenvalues.iter().filter(|&&v| v >= delta).count(), delta)
        }
        RankRule::Fixed(k) => {
            if k > eigenvalues.len() {
                return Err(Error::InvalidInput(format!(
                    "cannot extract {k} factors from a source with {} singular values",
                    eigenvalues.len()
                )));
            }
            (k, f64::NAN)
        }
    };
    let (n, p) = (fit.n_assets, fit.n_covariates);
    let ceiling = match fit.family.kind {
        FamilyKind::Homogeneous => p.min(t),
        _ => (n * p).min(t),
    }
    .saturating_sub(1);
    let mut warnings = Vec::new();
    if k_hat > 0 && k_hat >= ceiling {
        warnings.push(ExtractWarning::RankOverflow { k_hat, ceiling });
    }
    let u = dec.left_vectors.columns(0, k_hat).into_owned();
    let zero_alpha = fit.family.zero_alpha;
    let nf = n as f64;

    let (a_hat, b_hat, f_hat) = match &fit.matrix {
        DecisionMatrix::Unconstrained(pi) => {
            let b = &u * nf.sqrt();
            let f = pi.tr_mul(&b) / nf;
            let a = if zero_alpha {
                DVector::zeros(pi.nrows())
            } else {
                let mean = row_means(pi);
                &mean - &b * (b.tr_mul(&mean) / nf)
            };
            (Intercepts::Full(a), Loadings::Full(b), f)
        }
        DecisionMatrix::Homogeneous(pi) => {
            let f = pi.tr_mul(&u);
            let a = if zero_alpha {
                DVector::zeros(pi.nrows())
            } else {
                let mean = row_means(pi);
                &mean - &u * u.tr_mul(&mean)
            };
            (Intercepts::Homogeneous(a), Loadings::Homogeneous(u), f)
        }
        DecisionMatrix::Semiparametric { diamond, star } => {
            let q = star.nrows();
            let lambda = u.rows(0, n).into_owned() * nf.sqrt();
            let phi_mat = u.rows(n, q).into_owned();
            let f = diamond.tr_mul(&lambda) / nf + star.tr_mul(&phi_mat);
            let (mu, phi) = if zero_alpha {
                (DVector::zeros(n), DVector::zeros(q))
            } else {
                let m_d = row_means(diamond);
                let m_s = row_means(star);
                // B' (Pi 1_T / T) / N for the interleaved B, including the cross terms
                let proj = lambda.tr_mul(&m_d) / nf + phi_mat.tr_mul(&m_s);
                (&m_d - &lambda * &proj, &m_s - &phi_mat * &proj)
            };
            (
                Intercepts::Semiparametric { mu, phi },
                Loadings::Semiparametric { lambda, phi: phi_mat },
                f,
            )
        }
    };
    Ok(FactorEstimate {
        family: fit.family,
        k_hat,
        a_hat,
        b_hat,
        f_hat,
        delta_used,
        eigenvalues,
        warnings,
    })
}

/// `H = (F' M F_hat)(F_hat' M F_hat)^{-1}` (`K x K_hat`), with `M = M_T`.
///
/// `H'` is the least-squares coefficient of `M F` on `M F_hat`, so `B H` and
/// `F (H')^{-1}` (pseudo-inverse when `K_hat != K`) are comparable to the estimates.
pub fn rotation_align(f_true: &DMatrix<f64>, f_est: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    rotation_align_with(f_true, f_est, true)
}

/// [`rotation_align`] with optional demeaning; the zero-alpha variant uses `F'F_hat (F_hat'F_hat)^{-1}`.
pub fn rotation_align_with(f_true: &DMatrix<f64>, f_est: &DMatrix<f64>, demean: bool) -> Result<DMatrix<f64>> {
    if f_true.nrows() != f_est.nrows() {
        return Err(Error::InvalidInput(format!(
            "factor series have {} and {} periods",
            f_true.nrows(),
            f_est.nrows()
        )));
    }
    if f_est.ncols() == 0 {
        return Err(Error::InvalidInput("rotation needs at least one estimated factor".into()));
    }
    let center = |f: &DMatrix<f64>| {
        if demean {
            demean_rows(&f.transpose()).transpose()
        } else {
            f.clone()
        }
    };
    let mf_est = center(f_est);
    let gram = f_est.tr_mul(&mf_est);
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_ROTATION_CONDITION {
        return Err(Error::DegenerateInput(format!(
            "F_hat' M F_hat is singular or ill-conditioned (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    let cross = f_true.tr_mul(&mf_est);
    let inv = gram
        .cholesky()
        .ok_or_else(|| Error::DegenerateInput("F_hat' M F_hat is not positive definite".into()))?
        .inverse();
    Ok(cross * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_fit(rng: &mut ChaCha8Rng, kind: FamilyKind, n: usize, t: usize, p: usize, zero_alpha: bool) -> LowRankFit {
        let matrix = match kind {
            FamilyKind::Unconstrained => DecisionMatrix::Unconstrained(rand_mat(rng, n * p, t)),
            FamilyKind::Semiparametric => DecisionMatrix::Semiparametric {
                diamond: rand_mat(rng, n, t),
                star: rand_mat(rng, p - 1, t),
            },
            FamilyKind::Homogeneous => DecisionMatrix::Homogeneous(rand_mat(rng, p, t)),
        };
        LowRankFit::from_matrix(ModelFamily::new(kind).with_zero_alpha(zero_alpha), n, p, matrix, 0.0).unwrap()
    }

    /// Flips columns of `b` to match the sign of the largest-magnitude entry of the matching column of `a`.
    fn align_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for j in 0..a.ncols() {
            let col = a.column(j);
            let idx = col.iamax();
            if col[idx] * b[(idx, j)] < 0.0 {
                out.column_mut(j).neg_mut();
            }
        }
        out
    }

    fn expanded(fit: &LowRankFit) -> LowRankFit {
        let big = fit.matrix.expand(fit.n_assets, fit.n_covariates);
        LowRankFit::from_matrix(
            ModelFamily::unconstrained().with_zero_alpha(fit.family.zero_alpha),
            fit.n_assets,
            fit.n_covariates,
            DecisionMatrix::Unconstrained(big),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn default_delta_values() {
        assert!((default_delta_for(50, 50, 4, FamilyKind::Unconstrained).unwrap() - 1956.0).abs() < 0.1);
        assert!((default_delta_for(100, 50, 4, FamilyKind::Homogeneous).unwrap() - 49.74).abs() < 0.01);
        for kind in FamilyKind::ALL {
            assert!(default_delta_for(50, 100, 4, kind).unwrap() > default_delta_for(50, 50, 4, kind).unwrap());
        }
        assert!(default_delta_for(1, 50, 4, FamilyKind::Homogeneous).is_err());
    }

    #[test]
    fn zero_fit_has_no_factors() {
        for kind in FamilyKind::ALL {
            let fit = LowRankFit::from_matrix(ModelFamily::new(kind), 4, 3, DecisionMatrix::zeros(kind, 4, 5, 3), 0.0)
                .unwrap();
            assert_eq!(select_rank(&fit, 1e-6).unwrap(), 0);
            let est = extract_factors(&fit, RankRule::Threshold(1e-6)).unwrap();
            assert_eq!(est.k_hat, 0);
            assert_eq!(est.f_hat.ncols(), 0);
            assert_eq!(est.a_full(4, 3).amax(), 0.0);
        }
    }

    #[test]
    fn rank_one_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
        let f = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let pi = &b * f.transpose();
        let fit = LowRankFit::from_matrix(ModelFamily::unconstrained(), 4, 2, DecisionMatrix::Unconstrained(pi), 0.0)
            .unwrap();
        let top = gram_eigenvalues(&fit).unwrap()[0];
        assert_eq!(select_rank(&fit, 0.5 * top).unwrap(), 1);
        assert_eq!(select_rank(&fit, 2.0 * top).unwrap(), 0);
    }

    #[test]
    fn select_rank_monotone_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let fit = random_fit(&mut rng, FamilyKind::Unconstrained, 5, 8, 2, false);
        let mut last = usize::MAX;
        for delta in [1e-3, 0.1, 0.5, 1.0, 2.0, 5.0, 50.0] {
            let k = select_rank(&fit, delta).unwrap();
            assert!(k <= last);
            last = k;
        }
    }

    #[test]
    fn semiparametric_rank_matches_expanded() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let zero_alpha = rng.gen_bool(0.3);
            let fit = random_fit(&mut rng, FamilyKind::Semiparametric, 6, 7, 3, zero_alpha);
            let big = expanded(&fit);
            let e1 = gram_eigenvalues(&fit).unwrap();
            let e2 = gram_eigenvalues(&big).unwrap();
            for (a, b) in e1.iter().zip(&e2) {
                assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
            }
            // thresholds midway between eigenvalues avoid ties
            for w in e1.windows(2) {
                let delta = 0.5 * (w[0] + w[1]);
                if delta > 0.0 {
                    assert_eq!(select_rank(&fit, delta).unwrap(), select_rank(&big, delta).unwrap());
                }
            }
        }
    }

    fn assert_estimates_match(small: &FactorEstimate, big: &FactorEstimate, n: usize, p: usize) {
        assert_eq!(small.k_hat, big.k_hat);
        let b_small = small.b_full(n, p);
        let b_big = align_columns(&b_small, &big.b_full(n, p));
        assert!((&b_small - &b_big).amax() < 1e-8);
        let f_big = align_columns(&small.f_hat, &big.f_hat);
        assert!((&small.f_hat - f_big).amax() < 1e-8);
        assert!((small.a_full(n, p) - big.a_full(n, p)).amax() < 1e-8);
    }

    #[test]
    fn semiparametric_extraction_matches_expanded() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for zero_alpha in [false, true] {
            for k in 1..4 {
                let fit = random_fit(&mut rng, FamilyKind::Semiparametric, 6, 7, 3, zero_alpha);
                let small = extract_factors(&fit, RankRule::Fixed(k)).unwrap();
                let big = extract_factors(&expanded(&fit), RankRule::Fixed(k)).unwrap();
                assert_estimates_match(&small, &big, 6, 3);
            }
        }
    }

    #[test]
    fn homogeneous_extraction_matches_expanded() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let n = 9;
        for zero_alpha in [false, true] {
            let fit = random_fit(&mut rng, FamilyKind::Homogeneous, n, 8, 4, zero_alpha);
            let big_fit = expanded(&fit);
            let e = gram_eigenvalues(&fit).unwrap();
            let delta0 = 0.5 * (e[1] + e[2]);
            let small = extract_factors(&fit, RankRule::Threshold(delta0)).unwrap();
            let big = extract_factors(&big_fit, RankRule::Threshold(delta0 * n as f64)).unwrap();
            assert_eq!(small.k_hat, 2);
            assert_estimates_match(&small, &big, n, 4);
        }
    }

    fn check_normalization(est: &FactorEstimate, n: usize, p: usize) {
        let k = est.k_hat;
        let b = est.b_full(n, p);
        let a = est.a_full(n, p);
        let scale = if matches!(est.b_hat, Loadings::Homogeneous(_)) { 1.0 } else { n as f64 };
        let compact_gram = match &est.b_hat {
            Loadings::Homogeneous(phi) => phi.tr_mul(phi),
            _ => b.tr_mul(&b) / scale,
        };
        assert!((compact_gram - DMatrix::identity(k, k)).amax() < 1e-8);
        assert!(b.tr_mul(&a).amax() < 1e-8 * (1.0 + a.amax()));
        if !est.family.zero_alpha {
            let mf = demean_rows(&est.f_hat.transpose());
            let cov = &mf * mf.transpose() / est.f_hat.nrows() as f64;
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        assert!(cov[(i, j)].abs() < 1e-8 * (1.0 + cov.amax()));
                    }
                }
                if i > 0 {
                    assert!(cov[(i, i)] <= cov[(i - 1, i - 1)] * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn normalization_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for kind in FamilyKind::ALL {
            for zero_alpha in [false, true] {
                for k in 0..3 {
                    let fit = random_fit(&mut rng, kind, 5, 7, 3, zero_alpha);
                    let est = extract_factors(&fit, RankRule::Fixed(k)).unwrap();
                    check_normalization(&est, 5, 3);
                }
            }
        }
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (n, t, p, k) = (6, 20, 2, 2);
        // orthonormal columns scaled so B'B/N = I
        let q = rand_mat(&mut rng, n * p, k + 1).qr().q();
        let b = q.columns(0, k) * (n as f64).sqrt();
        let a = q.column(k) * 0.7;
        // factors with demeaned covariance diag(4, 1)
        let raw = rand_mat(&mut rng, t, k);
        let centered = demean_rows(&raw.transpose()).transpose();
        let basis = centered.qr().q();
        let mut f = DMatrix::zeros(t, k);
        for (j, s) in [2.0, 1.0].iter().enumerate() {
            f.column_mut(j).copy_from(&(basis.column(j) * (*s * (t as f64).sqrt())));
        }
        f.column_mut(0).add_scalar_mut(0.4);
        let pi = &a * DMatrix::from_element(1, t, 1.0) + &b * f.transpose();
        let fit = LowRankFit::from_matrix(ModelFamily::unconstrained(), n, p, DecisionMatrix::Unconstrained(pi), 0.0)
            .unwrap();
        let est = extract_factors(&fit, RankRule::Threshold(1e-6)).unwrap();
        assert_eq!(est.k_hat, k);
        let b_hat = align_columns(&b, &est.b_full(n, p));
        assert!((&b_hat - &b).amax() < 1e-6);
        let f_hat = align_columns(&f, &est.f_hat);
        assert!((&f_hat - &f).amax() < 1e-6);
        assert!((est.a_full(n, p) - &a).amax() < 1e-6);
    }

    #[test]
    fn rank_overflow_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let fit = random_fit(&mut rng, FamilyKind::Homogeneous, 4, 6, 3, false);
        let est = extract_factors(&fit, RankRule::Fixed(2)).unwrap();
        assert_eq!(est.warnings, vec![ExtractWarning::RankOverflow { k_hat: 2, ceiling: 2 }]);
        let est = extract_factors(&fit, RankRule::Fixed(1)).unwrap();
        assert!(est.warnings.is_empty());
    }

    #[test]
    fn rotation_identity_and_change_of_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let f = rand_mat(&mut rng, 30, 3);
        let h = rotation_align(&f, &f).unwrap();
        assert!((h - DMatrix::identity(3, 3)).amax() < 1e-10);
        let r = rand_mat(&mut rng, 3, 3) + DMatrix::identity(3, 3) * 2.0;
        let h = rotation_align(&f, &(&f * &r)).unwrap();
        // F_hat = F R gives H = (R')^{-1}; H = R only when R is orthogonal
        let expected = r.transpose().try_inverse().unwrap();
        assert!((&h - &expected).amax() < 1e-10);
        let orth = rand_mat(&mut rng, 3, 3).qr().q();
        let h = rotation_align(&f, &(&f * &orth)).unwrap();
        assert!((h - orth).amax() < 1e-10);
    }

    #[test]
    fn rotation_is_least_squares_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let f = rand_mat(&mut rng, 25, 2);
        let f_hat = rand_mat(&mut rng, 25, 2);
        let h = rotation_align(&f, &f_hat).unwrap();
        let m = |x: &DMatrix<f64>| demean_rows(&x.transpose()).transpose();
        let best = m(&(&f - &f_hat * h.transpose())).norm();
        for _ in 0..200 {
            let q = h.transpose() + rand_mat(&mut rng, 2, 2) * 0.5;
            assert!(best <= m(&(&f - &f_hat * q)).norm() + 1e-12);
        }
    }

    #[test]
    fn rotation_rejects_singular() {
        let f = DMatrix::from_fn(10, 2, |i, j| (i + j) as f64);
        let constant = DMatrix::from_element(10, 1, 3.0);
        assert!(matches!(rotation_align(&f, &constant), Err(Error::DegenerateInput(_))));
    }
}
