//! Dense decompositions and the nuclear-norm toolbox.
//!
//! Every decomposition returned from this module carries a fixed sign
//! convention: each singular (or eigen) vector pair is flipped so that the
//! entry of largest magnitude in the left vector is positive, with ties going
//! to the lowest row index. Extracted factors are therefore reproducible.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular triplets below `sigma - x <= RANK_CUTOFF` are dropped by the
/// soft-thresholding operator.
pub const RANK_CUTOFF: f64 = 1e-12;

/// Symmetry tolerance accepted by [`eig_top_k`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// The fast Gram-eigen route of the prox is only taken when every retained
/// singular value exceeds this fraction of the largest one.
const GRAM_ROUTE_MIN_RATIO: f64 = 1e-4;

/// Thin singular value decomposition `A = U diag(s) V'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `m x r` matrix with orthonormal columns.
    pub left_vectors: DMatrix<f64>,
    /// Nonnegative, sorted descending; `r = min(m, n)`.
    pub singular_values: DVector<f64>,
    /// `n x r` matrix with orthonormal columns.
    pub right_vectors: DMatrix<f64>,
}

impl Svd {
    pub fn rank(&self, tol: f64) -> usize {
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }

    /// Rebuilds `U diag(s) V'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.left_vectors.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.right_vectors.transpose()
    }
}

/// Leading eigenpairs of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigTopK {
    /// Descending.
    pub values: DVector<f64>,
    /// `m x k`, orthonormal columns.
    pub vectors: DMatrix<f64>,
}

fn ensure_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

/// Index of the entry with the largest magnitude; first one wins on ties.
fn pivot_index(column: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in column.enumerate() {
        match best {
            Some((_, b)) if v.abs() <= b.abs() => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

/// Flips column pairs so the largest-magnitude entry of each `left` column is positive.
pub(crate) fn fix_signs(left: &mut DMatrix<f64>, mut right: Option<&mut DMatrix<f64>>) {
    for j in 0..left.ncols() {
        let flip = matches!(pivot_index(left.column(j).iter().copied()), Some((_, v)) if v < 0.0);
        if flip {
            left.column_mut(j).neg_mut();
            if let Some(r) = right.as_deref_mut() {
                r.column_mut(j).neg_mut();
            }
        }
    }
}

/// Descending order of `values`, stable with respect to the input order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Full thin SVD with descending singular values and the module sign convention.
pub fn svd(a: &DMatrix<f64>) -> Result<Svd> {
    ensure_finite(a, "matrix")?;
    let (m, n) = a.shape();
    let r = m.min(n);
    if r == 0 {
        return Ok(Svd {
            left_vectors: DMatrix::zeros(m, 0),
            singular_values: DVector::zeros(0),
            right_vectors: DMatrix::zeros(n, 0),
        });
    }

    // nalgebra's bidiagonal SVD can return wrong factors for rank-deficient
    // inputs, so the decomposition itself is delegated to faer.
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let dec = fa
        .thin_svd()
        .map_err(|e| Error::NumericalFailure(format!("SVD did not converge: {e:?}")))?;
    let (fu, fs, fv) = (dec.U(), dec.S().column_vector(), dec.V());
    let u = DMatrix::from_fn(m, r, |i, j| fu[(i, j)]);
    let v = DMatrix::from_fn(n, r, |i, j| fv[(i, j)]);
    let s = DVector::from_fn(r, |j, _| fs[j]);

    let order = descending_order(s.as_slice());
    let mut left = select_columns(&u, &order);
    let mut right = select_columns(&v, &order);
    let singular_values = DVector::from_iterator(r, order.iter().map(|&j| s[j].max(0.0)));
    fix_signs(&mut left, Some(&mut right));
    Ok(Svd {
        left_vectors: left,
        singular_values,
        right_vectors: right,
    })
}

/// Sum of singular values.
pub fn nuclear_norm(a: &DMatrix<f64>) -> Result<f64> {
    Ok(svd(a)?.singular_values.sum())
}

/// Largest singular value (spectral norm).
pub fn operator_norm(a: &DMatrix<f64>) -> Result<f64> {
    Ok(svd(a)?.singular_values.iter().copied().next().unwrap_or(0.0))
}

/// The `k` largest eigenpairs of a symmetric matrix.
pub fn eig_top_k(s: &DMatrix<f64>, k: usize) -> Result<EigTopK> {
    ensure_finite(s, "matrix")?;
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "eig_top_k needs a square matrix, got {}x{}",
            n,
            s.ncols()
        )));
    }
    if k > n {
        return Err(Error::InvalidInput(format!(
            "requested {k} eigenpairs of a {n}x{n} matrix"
        )));
    }
    let scale = s.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (s[(i, j)] - s[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if n == 0 {
        return Ok(EigTopK {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let order = descending_order(eig.eigenvalues.as_slice());
    let top = &order[..k];
    let mut vectors = select_columns(&eig.eigenvectors, top);
    fix_signs(&mut vectors, None);
    Ok(EigTopK {
        values: DVector::from_iterator(k, top.iter().map(|&j| eig.eigenvalues[j])),
        vectors,
    })
}

/// Result of a singular value shrinkage.
#[derive(Debug, Clone)]
pub(crate) struct Shrunk {
    pub matrix: DMatrix<f64>,
    /// Nuclear norm of `matrix`, i.e. `sum(max(0, sigma_j - x))`.
    pub nuclear_norm: f64,
    #[allow(dead_code)] // read by the tests
    pub rank: usize,
}

/// `U diag(max(0, s - x)) V'`; the solver's prox operator.
pub fn soft_threshold_singular(a: &DMatrix<f64>, x: f64) -> Result<DMatrix<f64>> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidInput(format!(
            "threshold must be positive and finite, got {x}"
        )));
    }
    ensure_finite(a, "matrix")?;
    Ok(shrink(a, x).matrix)
}

/// Shrinkage without input validation. Small inputs and thresholds that reach
/// deep into the spectrum use the full SVD; otherwise the retained part is
/// built from the eigendecomposition of the smaller Gram matrix as
/// `A V diag(1 - x/s) V'`, which never forms `U` explicitly.
pub(crate) fn shrink(a: &DMatrix<f64>, x: f64) -> Shrunk {
    let (m, n) = a.shape();
    if m.min(n) == 0 {
        return Shrunk {
            matrix: DMatrix::zeros(m, n),
            nuclear_norm: 0.0,
            rank: 0,
        };
    }
    let tall = m >= n;
    let gram = if tall {
        a.tr_mul(a)
    } else {
        a * a.transpose()
    };
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if lambda_max <= 0.0 || lambda_max.sqrt() - x <= RANK_CUTOFF {
        return Shrunk {
            matrix: DMatrix::zeros(m, n),
            nuclear_norm: 0.0,
            rank: 0,
        };
    }
    if x < GRAM_ROUTE_MIN_RATIO * lambda_max.sqrt() {
        return shrink_via_svd(a, x);
    }

    let order = descending_order(eig.eigenvalues.as_slice());
    let mut kept = Vec::new();
    let mut weights = Vec::new();
    let mut nuclear = 0.0;
    for &j in &order {
        let sigma = eig.eigenvalues[j].max(0.0).sqrt();
        if sigma - x <= RANK_CUTOFF {
            break;
        }
        kept.push(j);
        weights.push(1.0 - x / sigma);
        nuclear += sigma - x;
    }
    let basis = select_columns(&eig.eigenvectors, &kept);
    let mut scaled = basis.clone();
    for (j, w) in weights.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*w);
    }
    let matrix = if tall {
        (a * basis) * scaled.transpose()
    } else {
        basis * (scaled.tr_mul(a))
    };
    Shrunk {
        matrix,
        nuclear_norm: nuclear,
        rank: kept.len(),
    }
}

fn shrink_via_svd(a: &DMatrix<f64>, x: f64) -> Shrunk {
    let dec = svd(a).expect("finite input");
    let kept = dec
        .singular_values
        .iter()
        .take_while(|&&s| s - x > RANK_CUTOFF)
        .count();
    let mut left = dec.left_vectors.columns(0, kept).into_owned();
    let mut nuclear = 0.0;
    for j in 0..kept {
        let s = dec.singular_values[j] - x;
        nuclear += s;
        left.column_mut(j).scale_mut(s);
    }
    let matrix = left * dec.right_vectors.columns(0, kept).transpose();
    Shrunk {
        matrix,
        nuclear_norm: nuclear,
        rank: kept,
    }
}

/// `A M_T`: subtracts each row's mean.
pub fn demean_rows(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    let t = a.ncols();
    if t == 0 {
        return out;
    }
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / t as f64;
        row.add_scalar_mut(-mean);
    }
    out
}

/// `A 1_T / T` as a column vector.
pub fn row_means(a: &DMatrix<f64>) -> DVector<f64> {
    let t = a.ncols().max(1) as f64;
    DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.sum() / t))
}

/// Moore-Penrose pseudo-inverse with a relative singular value cutoff.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dec = svd(a)?;
    let (m, n) = a.shape();
    let smax = dec.singular_values.iter().copied().next().unwrap_or(0.0);
    let cutoff = smax * (m.max(n) as f64) * f64::EPSILON;
    let mut out = DMatrix::zeros(n, m);
    for (j, s) in dec.singular_values.iter().enumerate() {
        if *s > cutoff && *s > 0.0 {
            out += dec.right_vectors.column(j) * dec.left_vectors.column(j).transpose() / *s;
        }
    }
    Ok(out)
}
