//! Panels, model families and the smooth least-squares losses consumed by the solver.
//!
//! Every family is solved over a "stacked" matrix:
//!
//! * unconstrained: the `Np x T` matrix whose column `t` stacks `gamma_{1t}, ..., gamma_{Nt}`;
//! * semiparametric: the `(N + p - 1) x T` matrix `(Gamma_diamond; sqrt(N) Gamma_star)`;
//! * homogeneous: the `p x T` matrix `Gamma`.
//!
//! The nuclear norm penalty always acts on the stacked matrix. Callers see
//! [`DecisionMatrix`] values on the original covariate scale.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which constraint set the regularized estimator works over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    /// Heterogeneous `a_i`, `B_i`.
    Unconstrained,
    /// Heterogeneous intercept rows, homogeneous rows for the remaining covariates.
    Semiparametric,
    /// `a_i`, `B_i` identical across assets.
    Homogeneous,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [
        FamilyKind::Unconstrained,
        FamilyKind::Semiparametric,
        FamilyKind::Homogeneous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Unconstrained => "unconstrained",
            FamilyKind::Semiparametric => "semiparametric",
            FamilyKind::Homogeneous => "homogeneous",
        }
    }
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unconstrained" => Ok(FamilyKind::Unconstrained),
            "semiparametric" => Ok(FamilyKind::Semiparametric),
            "homogeneous" => Ok(FamilyKind::Homogeneous),
            other => Err(Error::ConfigError(format!("unknown model family '{other}'"))),
        }
    }
}

/// A family plus the zero-alpha flag, which only changes factor extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelFamily {
    pub kind: FamilyKind,
    pub zero_alpha: bool,
}

impl ModelFamily {
    pub fn new(kind: FamilyKind) -> Self {
        ModelFamily {
            kind,
            zero_alpha: false,
        }
    }

    pub fn unconstrained() -> Self {
        Self::new(FamilyKind::Unconstrained)
    }

    pub fn semiparametric() -> Self {
        Self::new(FamilyKind::Semiparametric)
    }

    pub fn homogeneous() -> Self {
        Self::new(FamilyKind::Homogeneous)
    }

    pub fn with_zero_alpha(mut self, zero_alpha: bool) -> Self {
        self.zero_alpha = zero_alpha;
        self
    }
}

/// Returns, covariates and the observation mask of an `N x T` panel.
///
/// Masked cells always carry `y = 0` and `x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    n_assets: usize,
    n_periods: usize,
    n_covariates: usize,
    y: DMatrix<f64>,
    // indexed by t * N + i
    mask: Vec<bool>,
    // cell (i, t) occupies [(t * N + i) * p, (t * N + i + 1) * p)
    x: Vec<f64>,
}

impl Panel {
    /// Builds a panel from `y` (`N x T`), a mask (`true` = observed) and a
    /// covariate accessor. Masked cells are zeroed.
    pub fn from_fn(
        y: DMatrix<f64>,
        mask: DMatrix<bool>,
        n_covariates: usize,
        mut covariate: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Panel> {
        let (n, t) = y.shape();
        if n == 0 || t == 0 || n_covariates == 0 {
            return Err(Error::InvalidInput(format!(
                "panel needs N, T, p >= 1 (got {n}, {t}, {n_covariates})"
            )));
        }
        if mask.shape() != (n, t) {
            return Err(Error::InvalidInput(format!(
                "mask is {:?}, returns are {:?}",
                mask.shape(),
                (n, t)
            )));
        }
        let p = n_covariates;
        let mut x = vec![0.0; n * t * p];
        let mut y = y;
        let mut flat_mask = vec![false; n * t];
        for tt in 0..t {
            for i in 0..n {
                let cell = tt * n + i;
                if !mask[(i, tt)] {
                    y[(i, tt)] = 0.0;
                    continue;
                }
                flat_mask[cell] = true;
                if !y[(i, tt)].is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "observed return at ({i}, {tt}) is not finite"
                    )));
                }
                for k in 0..p {
                    let v = covariate(i, tt, k);
                    if !v.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "observed covariate {k} at ({i}, {tt}) is not finite"
                        )));
                    }
                    x[cell * p + k] = v;
                }
            }
        }
        Ok(Panel {
            n_assets: n,
            n_periods: t,
            n_covariates: p,
            y,
            mask: flat_mask,
            x,
        })
    }

    /// Fully observed panel.
    pub fn fully_observed(
        y: DMatrix<f64>,
        n_covariates: usize,
        covariate: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Panel> {
        let mask = DMatrix::from_element(y.nrows(), y.ncols(), true);
        Self::from_fn(y, mask, n_covariates, covariate)
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.y
    }

    #[inline]
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[(i, t)]
    }

    #[inline]
    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[t * self.n_assets + i]
    }

    #[inline]
    pub fn x(&self, i: usize, t: usize) -> &[f64] {
        let start = (t * self.n_assets + i) * self.n_covariates;
        &self.x[start..start + self.n_covariates]
    }

    pub fn mask(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.n_assets, self.n_periods, |i, t| self.is_observed(i, t))
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Observed cells in column-major order `(i, t)`.
    pub fn observed_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::with_capacity(self.n_observed());
        for t in 0..self.n_periods {
            for i in 0..self.n_assets {
                if self.is_observed(i, t) {
                    cells.push((i, t));
                }
            }
        }
        cells
    }

    /// Copy of the panel with the listed cells marked unobserved.
    pub fn mask_cells(&self, cells: &[(usize, usize)]) -> Panel {
        let mut out = self.clone();
        let p = self.n_covariates;
        for &(i, t) in cells {
            let cell = t * self.n_assets + i;
            out.mask[cell] = false;
            out.y[(i, t)] = 0.0;
            out.x[cell * p..(cell + 1) * p].iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// The first `periods` periods.
    pub fn head_periods(&self, periods: usize) -> Result<Panel> {
        if periods == 0 || periods > self.n_periods {
            return Err(Error::InvalidInput(format!(
                "cannot take {periods} of {} periods",
                self.n_periods
            )));
        }
        let n = self.n_assets;
        let p = self.n_covariates;
        Ok(Panel {
            n_assets: n,
            n_periods: periods,
            n_covariates: p,
            y: self.y.columns(0, periods).into_owned(),
            mask: self.mask[..periods * n].to_vec(),
            x: self.x[..periods * n * p].to_vec(),
        })
    }

    /// Panel with covariate columns reordered: column `k` of the result is column `order[k]` of `self`.
    pub fn permute_covariates(&self, order: &[usize]) -> Result<Panel> {
        let p = self.n_covariates;
        let mut seen = vec![false; p];
        if order.len() != p || order.iter().any(|&k| k >= p || std::mem::replace(&mut seen[k], true)) {
            return Err(Error::InvalidInput(format!("{order:?} is not a permutation of 0..{p}")));
        }
        let mut out = self.clone();
        for cell in 0..self.n_assets * self.n_periods {
            for (k, &src) in order.iter().enumerate() {
                out.x[cell * p + k] = self.x[cell * p + src];
            }
        }
        Ok(out)
    }
}

/// Family-native decision variable, always on the original covariate scale.
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionMatrix {
    /// `Np x T`; rows `i*p .. (i+1)*p` of column `t` hold `gamma_it`.
    Unconstrained(DMatrix<f64>),
    /// `diamond` is `N x T`, `star` is `(p-1) x T`.
    Semiparametric {
        diamond: DMatrix<f64>,
        star: DMatrix<f64>,
    },
    /// `p x T`.
    Homogeneous(DMatrix<f64>),
}

impl DecisionMatrix {
    pub fn zeros(kind: FamilyKind, n: usize, t: usize, p: usize) -> Self {
        match kind {
            FamilyKind::Unconstrained => DecisionMatrix::Unconstrained(DMatrix::zeros(n * p, t)),
            FamilyKind::Semiparametric => DecisionMatrix::Semiparametric {
                diamond: DMatrix::zeros(n, t),
                star: DMatrix::zeros(p.saturating_sub(1), t),
            },
            FamilyKind::Homogeneous => DecisionMatrix::Homogeneous(DMatrix::zeros(p, t)),
        }
    }

    pub fn kind(&self) -> FamilyKind {
        match self {
            DecisionMatrix::Unconstrained(_) => FamilyKind::Unconstrained,
            DecisionMatrix::Semiparametric { .. } => FamilyKind::Semiparametric,
            DecisionMatrix::Homogeneous(_) => FamilyKind::Homogeneous,
        }
    }

    pub fn n_periods(&self) -> usize {
        match self {
            DecisionMatrix::Unconstrained(g) | DecisionMatrix::Homogeneous(g) => g.ncols(),
            DecisionMatrix::Semiparametric { diamond, .. } => diamond.ncols(),
        }
    }

    /// The full `Np x T` matrix this decision represents.
    pub fn expand(&self, n: usize, p: usize) -> DMatrix<f64> {
        match self {
            DecisionMatrix::Unconstrained(g) => g.clone(),
            DecisionMatrix::Semiparametric { diamond, star } => {
                let t = diamond.ncols();
                let mut out = DMatrix::zeros(n * p, t);
                for i in 0..n {
                    out.row_mut(i * p).copy_from(&diamond.row(i));
                    out.rows_mut(i * p + 1, p - 1).copy_from(star);
                }
                out
            }
            DecisionMatrix::Homogeneous(g) => {
                let t = g.ncols();
                let mut out = DMatrix::zeros(n * p, t);
                for i in 0..n {
                    out.rows_mut(i * p, p).copy_from(g);
                }
                out
            }
        }
    }

    /// Appends `extra` zero columns (warm starts for longer panels).
    pub fn pad_periods(&self, extra: usize) -> Self {
        let pad = |g: &DMatrix<f64>| g.clone().resize_horizontally(g.ncols() + extra, 0.0);
        match self {
            DecisionMatrix::Unconstrained(g) => DecisionMatrix::Unconstrained(pad(g)),
            DecisionMatrix::Semiparametric { diamond, star } => DecisionMatrix::Semiparametric {
                diamond: pad(diamond),
                star: pad(star),
            },
            DecisionMatrix::Homogeneous(g) => DecisionMatrix::Homogeneous(pad(g)),
        }
    }

    /// Largest absolute entry of the homogeneous covariate block, when there is one.
    pub fn star_max_abs(&self) -> Option<f64> {
        match self {
            DecisionMatrix::Semiparametric { star, .. } => Some(if star.is_empty() { 0.0 } else { star.amax() }),
            _ => None,
        }
    }

    fn parts(&self) -> Vec<&DMatrix<f64>> {
        match self {
            DecisionMatrix::Unconstrained(g) | DecisionMatrix::Homogeneous(g) => vec![g],
            DecisionMatrix::Semiparametric { diamond, star } => vec![diamond, star],
        }
    }

    /// Entrywise Frobenius inner product over all blocks.
    pub fn dot(&self, other: &DecisionMatrix) -> f64 {
        self.parts()
            .iter()
            .zip(other.parts())
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.parts().iter().map(|g| g.norm_squared()).sum()
    }

    /// `self + scale * other`, blockwise.
    pub fn axpy(&self, scale: f64, other: &DecisionMatrix) -> DecisionMatrix {
        match (self, other) {
            (DecisionMatrix::Unconstrained(a), DecisionMatrix::Unconstrained(b)) => {
                DecisionMatrix::Unconstrained(a + b * scale)
            }
            (DecisionMatrix::Homogeneous(a), DecisionMatrix::Homogeneous(b)) => {
                DecisionMatrix::Homogeneous(a + b * scale)
            }
            (
                DecisionMatrix::Semiparametric { diamond: d1, star: s1 },
                DecisionMatrix::Semiparametric { diamond: d2, star: s2 },
            ) => DecisionMatrix::Semiparametric {
                diamond: d1 + d2 * scale,
                star: s1 + s2 * scale,
            },
            _ => panic!("axpy across different families"),
        }
    }
}

/// The smooth part of the objective for one `(panel, family)` pair.
///
/// The Lipschitz constant of the gradient is computed once at construction.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    panel: &'a Panel,
    family: ModelFamily,
    lipschitz: f64,
}

impl<'a> Problem<'a> {
    pub fn new(panel: &'a Panel, family: ModelFamily) -> Result<Self> {
        validate_family(panel, family.kind)?;
        let lipschitz = compute_lipschitz(panel, family.kind)?;
        Ok(Problem {
            panel,
            family,
            lipschitz,
        })
    }

    pub fn panel(&self) -> &'a Panel {
        self.panel
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    /// Lipschitz constant of the stacked gradient.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn sqrt_n(&self) -> f64 {
        (self.panel.n_assets as f64).sqrt()
    }

    pub fn stacked_shape(&self) -> (usize, usize) {
        let (n, t, p) = (self.panel.n_assets, self.panel.n_periods, self.panel.n_covariates);
        match self.family.kind {
            FamilyKind::Unconstrained => (n * p, t),
            FamilyKind::Semiparametric => (n + p - 1, t),
            FamilyKind::Homogeneous => (p, t),
        }
    }

    fn check_shape(&self, d: &DecisionMatrix) -> Result<()> {
        let (n, t, p) = (self.panel.n_assets, self.panel.n_periods, self.panel.n_covariates);
        let ok = match (self.family.kind, d) {
            (FamilyKind::Unconstrained, DecisionMatrix::Unconstrained(g)) => g.shape() == (n * p, t),
            (FamilyKind::Semiparametric, DecisionMatrix::Semiparametric { diamond, star }) => {
                diamond.shape() == (n, t) && star.shape() == (p - 1, t)
            }
            (FamilyKind::Homogeneous, DecisionMatrix::Homogeneous(g)) => g.shape() == (p, t),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "decision matrix does not fit a {} panel with N={n}, T={t}, p={p}",
                self.family.kind
            )))
        }
    }

    /// Maps a decision to the solver's stacked coordinates.
    pub fn stack(&self, d: &DecisionMatrix) -> Result<DMatrix<f64>> {
        self.check_shape(d)?;
        Ok(match d {
            DecisionMatrix::Unconstrained(g) | DecisionMatrix::Homogeneous(g) => g.clone(),
            DecisionMatrix::Semiparametric { diamond, star } => {
                let n = diamond.nrows();
                let mut z = DMatrix::zeros(n + star.nrows(), diamond.ncols());
                z.rows_mut(0, n).copy_from(diamond);
                z.rows_mut(n, star.nrows()).copy_from(&(star * self.sqrt_n()));
                z
            }
        })
    }

    /// Inverse of [`Problem::stack`].
    pub fn unstack(&self, z: DMatrix<f64>) -> DecisionMatrix {
        match self.family.kind {
            FamilyKind::Unconstrained => DecisionMatrix::Unconstrained(z),
            FamilyKind::Homogeneous => DecisionMatrix::Homogeneous(z),
            FamilyKind::Semiparametric => {
                let n = self.panel.n_assets;
                let q = z.nrows() - n;
                DecisionMatrix::Semiparametric {
                    diamond: z.rows(0, n).into_owned(),
                    star: z.rows(n, q).into_owned() / self.sqrt_n(),
                }
            }
        }
    }

    /// Fitted value `tr(X_it' Gamma)` from a stacked matrix.
    #[inline]
    fn fitted_stacked(&self, z: &DMatrix<f64>, i: usize, t: usize) -> f64 {
        let panel = self.panel;
        let p = panel.n_covariates;
        let x = panel.x(i, t);
        let col = z.column(t);
        let col = col.as_slice();
        match self.family.kind {
            FamilyKind::Unconstrained => dot(x, &col[i * p..(i + 1) * p]),
            FamilyKind::Homogeneous => dot(x, col),
            FamilyKind::Semiparametric => {
                let n = panel.n_assets;
                col[i] + dot(&x[1..], &col[n..]) / self.sqrt_n()
            }
        }
    }

    /// `1/2 sum_observed (y_it - tr(X_it' Gamma))^2` at a stacked matrix.
    pub fn loss_stacked(&self, z: &DMatrix<f64>) -> f64 {
        let panel = self.panel;
        let mut total = 0.0;
        for t in 0..panel.n_periods {
            for i in 0..panel.n_assets {
                if panel.is_observed(i, t) {
                    let r = panel.y(i, t) - self.fitted_stacked(z, i, t);
                    total += r * r;
                }
            }
        }
        0.5 * total
    }

    /// Gradient of [`Problem::loss_stacked`].
    pub fn gradient_stacked(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let panel = self.panel;
        let (n, p) = (panel.n_assets, panel.n_covariates);
        let mut grad = DMatrix::zeros(z.nrows(), z.ncols());
        let inv_sqrt_n = 1.0 / self.sqrt_n();
        for t in 0..panel.n_periods {
            let mut gcol = grad.column_mut(t);
            let g = gcol.as_mut_slice();
            for i in 0..n {
                if !panel.is_observed(i, t) {
                    continue;
                }
                let r = self.fitted_stacked(z, i, t) - panel.y(i, t);
                let x = panel.x(i, t);
                match self.family.kind {
                    FamilyKind::Unconstrained => {
                        for (gk, xk) in g[i * p..(i + 1) * p].iter_mut().zip(x) {
                            *gk += xk * r;
                        }
                    }
                    FamilyKind::Homogeneous => {
                        for (gk, xk) in g.iter_mut().zip(x) {
                            *gk += xk * r;
                        }
                    }
                    FamilyKind::Semiparametric => {
                        g[i] += r;
                        for (gk, xk) in g[n..].iter_mut().zip(&x[1..]) {
                            *gk += xk * inv_sqrt_n * r;
                        }
                    }
                }
            }
        }
        grad
    }

    /// Fitted value `tr(X_it' Gamma)` for a decision on the original scale.
    pub fn fitted(&self, d: &DecisionMatrix, i: usize, t: usize) -> f64 {
        let x = self.panel.x(i, t);
        fitted_value(d, x, i, t)
    }

    /// Unregularized least-squares fit. Where the problem is underdetermined
    /// this is the minimum-Frobenius-norm solution in stacked coordinates,
    /// the point gradient iterations started from zero converge to.
    pub fn least_squares(&self) -> Result<DecisionMatrix> {
        let panel = self.panel;
        let (n, t_len, p) = (panel.n_assets, panel.n_periods, panel.n_covariates);
        let (rows, cols) = self.stacked_shape();
        let mut z = DMatrix::zeros(rows, cols);
        match self.family.kind {
            FamilyKind::Unconstrained => {
                for t in 0..t_len {
                    for i in 0..n {
                        if !panel.is_observed(i, t) {
                            continue;
                        }
                        let x = panel.x(i, t);
                        let xx = dot(x, x);
                        if xx > 0.0 {
                            let s = panel.y(i, t) / xx;
                            for k in 0..p {
                                z[(i * p + k, t)] = x[k] * s;
                            }
                        }
                    }
                }
            }
            FamilyKind::Homogeneous => {
                for t in 0..t_len {
                    let mut gram = DMatrix::zeros(p, p);
                    let mut rhs = DVector::zeros(p);
                    for i in 0..n {
                        if panel.is_observed(i, t) {
                            let x = DVector::from_column_slice(panel.x(i, t));
                            gram += &x * x.transpose();
                            rhs += &x * panel.y(i, t);
                        }
                    }
                    let coef = crate::matdecomp::pseudo_inverse(&gram)? * rhs;
                    z.column_mut(t).copy_from(&coef);
                }
            }
            FamilyKind::Semiparametric => {
                let q = p - 1;
                let sqrt_n = self.sqrt_n();
                for t in 0..t_len {
                    let obs: Vec<usize> = (0..n).filter(|&i| panel.is_observed(i, t)).collect();
                    let w = DMatrix::from_fn(obs.len(), q, |r, k| panel.x(obs[r], t)[k + 1] / sqrt_n);
                    let yt = DVector::from_iterator(obs.len(), obs.iter().map(|&i| panel.y(i, t)));
                    let lhs = w.tr_mul(&w) + DMatrix::identity(q, q);
                    let zstar = lhs
                        .cholesky()
                        .ok_or_else(|| Error::NumericalFailure("ridge system not positive definite".into()))?
                        .solve(&w.tr_mul(&yt));
                    let resid = &yt - &w * &zstar;
                    for (r, &i) in obs.iter().enumerate() {
                        z[(i, t)] = resid[r];
                    }
                    z.view_mut((n, t), (q, 1)).copy_from(&zstar);
                }
            }
        }
        Ok(self.unstack(z))
    }
}

pub fn fitted_value(d: &DecisionMatrix, x: &[f64], i: usize, t: usize) -> f64 {
    match d {
        DecisionMatrix::Unconstrained(g) => {
            let p = x.len();
            let col = g.column(t);
            dot(x, &col.as_slice()[i * p..(i + 1) * p])
        }
        DecisionMatrix::Homogeneous(g) => dot(x, g.column(t).as_slice()),
        DecisionMatrix::Semiparametric { diamond, star } => {
            diamond[(i, t)] + dot(&x[1..], star.column(t).as_slice())
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn validate_family(panel: &Panel, kind: FamilyKind) -> Result<()> {
    if kind != FamilyKind::Semiparametric {
        return Ok(());
    }
    if panel.n_covariates < 2 {
        return Err(Error::InvalidInput(
            "the semiparametric family needs p >= 2 (intercept plus covariates)".into(),
        ));
    }
    for t in 0..panel.n_periods {
        for i in 0..panel.n_assets {
            if panel.is_observed(i, t) && panel.x(i, t)[0] != 1.0 {
                return Err(Error::InvalidInput(format!(
                    "the semiparametric family needs x_it,1 == 1; cell ({i}, {t}) has {}",
                    panel.x(i, t)[0]
                )));
            }
        }
    }
    Ok(())
}

fn lambda_max(s: DMatrix<f64>) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    s.symmetric_eigen().eigenvalues.iter().copied().fold(0.0, f64::max)
}

fn compute_lipschitz(panel: &Panel, kind: FamilyKind) -> Result<f64> {
    if panel.n_observed() == 0 {
        return Err(Error::DegenerateInput("every cell of the panel is masked".into()));
    }
    let (n, t_len, p) = (panel.n_assets, panel.n_periods, panel.n_covariates);
    let observed = || {
        (0..t_len).flat_map(move |t| (0..n).map(move |i| (i, t))).filter(|&(i, t)| panel.is_observed(i, t))
    };
    let l = match kind {
        FamilyKind::Unconstrained => observed()
            .map(|(i, t)| dot(panel.x(i, t), panel.x(i, t)))
            .fold(0.0, f64::max),
        FamilyKind::Homogeneous => (0..t_len)
            .map(|t| {
                let mut s = DMatrix::zeros(p, p);
                for i in 0..n {
                    if panel.is_observed(i, t) {
                        let x = DVector::from_column_slice(panel.x(i, t));
                        s += &x * x.transpose();
                    }
                }
                lambda_max(s)
            })
            .fold(0.0, f64::max),
        FamilyKind::Semiparametric => {
            let q = p - 1;
            let max_sq = observed()
                .map(|(i, t)| dot(&panel.x(i, t)[1..], &panel.x(i, t)[1..]))
                .fold(0.0, f64::max);
            let lam = (0..t_len)
                .map(|t| {
                    let mut s = DMatrix::zeros(q, q);
                    for i in 0..n {
                        if panel.is_observed(i, t) {
                            let x = DVector::from_column_slice(&panel.x(i, t)[1..]);
                            s += &x * x.transpose();
                        }
                    }
                    lambda_max(s / n as f64)
                })
                .fold(0.0, f64::max);
            (2.0 * (1.0 + max_sq).max(lam + lam * lam)).sqrt()
        }
    };
    if l > 0.0 && l.is_finite() {
        Ok(l)
    } else {
        Err(Error::DegenerateInput(format!(
            "gradient Lipschitz constant is {l}; observed covariates are all zero"
        )))
    }
}

/// `1/2 sum_observed (y_it - tr(X_it' Gamma))^2`.
pub fn loss(panel: &Panel, family: ModelFamily, decision: &DecisionMatrix) -> Result<f64> {
    let problem = Problem::new(panel, family)?;
    Ok(problem.loss_stacked(&problem.stack(decision)?))
}

/// Gradient of [`loss`] with respect to the decision on its original scale.
pub fn gradient(panel: &Panel, family: ModelFamily, decision: &DecisionMatrix) -> Result<DecisionMatrix> {
    let problem = Problem::new(panel, family)?;
    let g = problem.gradient_stacked(&problem.stack(decision)?);
    Ok(match problem.unstack(g) {
        // d/dGamma_star = sqrt(N) d/d(sqrt(N) Gamma_star); unstack divided once already
        DecisionMatrix::Semiparametric { diamond, star } => {
            let n = panel.n_assets as f64;
            DecisionMatrix::Semiparametric {
                diamond,
                star: star * n,
            }
        }
        other => other,
    })
}

/// Lipschitz constant of the gradient in the solver's stacked coordinates.
pub fn lipschitz_constant(panel: &Panel, family: ModelFamily) -> Result<f64> {
    Ok(Problem::new(panel, family)?.lipschitz())
}
