//! Surrogate data from full summary statistics.
//!
//! Given X^T X, X^T Y, Y^T Y, and n, builds matrices (X_check, Y_check)
//! whose bordered Gram equals the input one. Any statistic that depends on
//! the data only through that Gram is unchanged by the swap, so downstream
//! solvers can run on the surrogate as if it were the original data.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numkit::{sym_eigen, SymMatrix};

/// Summary statistics with the full feature Gram available.
#[derive(Debug, Clone)]
pub struct FullSummaryStats {
    pub xtx: SymMatrix,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n: usize,
}

impl FullSummaryStats {
    pub fn new(xtx: SymMatrix, xty: DVector<f64>, yty: f64, n: usize) -> Result<Self> {
        let p = xtx.dim();
        if xty.len() != p {
            return Err(Error::invalid(format!(
                "xty has length {} but xtx is {p}x{p}",
                xty.len()
            )));
        }
        if n < 1 {
            return Err(Error::invalid("sample size n must be >= 1"));
        }
        if !yty.is_finite() || yty < 0.0 {
            return Err(Error::invalid(format!("yty = {yty} must be >= 0")));
        }
        if xty.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("xty contains a non-finite entry"));
        }
        Ok(FullSummaryStats { xtx, xty, yty, n })
    }

    pub fn p(&self) -> usize {
        self.xtx.dim()
    }

    /// The (p+1) x (p+1) bordered Gram [[X^T X, X^T Y], [Y^T X, Y^T Y]].
    pub fn bordered_gram(&self) -> SymMatrix {
        let p = self.p();
        let mut b = DMatrix::zeros(p + 1, p + 1);
        b.view_mut((0, 0), (p, p)).copy_from(self.xtx.as_matrix());
        for j in 0..p {
            b[(j, p)] = self.xty[j];
            b[(p, j)] = self.xty[j];
        }
        b[(p, p)] = self.yty;
        SymMatrix::symmetrized(b)
    }
}

/// Surrogate data matrices sharing the bordered Gram of the inputs.
#[derive(Debug, Clone)]
pub struct SurrogateData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Builds (X_check, Y_check) from the eigendecomposition of the bordered
/// Gram B = U diag(d) U^T:
///
/// * n >= p+1: rows are D^{1/2} U^T followed by n-p-1 zero rows;
/// * n < p+1: only the top-n eigenpairs are used (exact when B has rank <= n,
///   which holds for any Gram computed from n real observations).
///
/// Eigenvalues in [-1e-6 * scale, 0) are clamped to zero; anything lower is
/// rejected as an invalid summary.
pub fn reconstruct_surrogate(stats: &FullSummaryStats) -> Result<SurrogateData> {
    let p = stats.p();
    if p < 1 {
        return Err(Error::invalid("need at least one feature"));
    }
    let n = stats.n;
    let b = stats.bordered_gram();
    let eig = sym_eigen(&b);
    let scale = eig.values[0].abs().max(1.0);
    let min = eig.values[p];
    if min < -1e-6 * scale {
        return Err(Error::NotPsd(format!(
            "bordered summary Gram has eigenvalue {min:.6e}; inputs are inconsistent"
        )));
    }
    let rank = n.min(p + 1);
    let mut full = DMatrix::zeros(n, p + 1);
    for k in 0..rank {
        let root = eig.values[k].max(0.0).sqrt();
        for c in 0..(p + 1) {
            full[(k, c)] = root * eig.vectors[(c, k)];
        }
    }
    let x = full.view((0, 0), (n, p)).clone_owned();
    let y = full.column(p).clone_owned();
    Ok(SurrogateData { x, y })
}

/// Bordered Gram of ([X, X_knockoffs], Y); the joint statistic matrix used
/// by the known-covariance pipelines and their exchangeability checks.
pub fn assemble_gram(x: &DMatrix<f64>, x_knock: &DMatrix<f64>, y: &DVector<f64>) -> Result<SymMatrix> {
    let n = x.nrows();
    if x_knock.nrows() != n || y.len() != n {
        return Err(Error::invalid(format!(
            "row counts disagree: X has {n}, knockoffs {}, Y {}",
            x_knock.nrows(),
            y.len()
        )));
    }
    let total = x.ncols() + x_knock.ncols() + 1;
    let mut a = DMatrix::zeros(n, total);
    a.view_mut((0, 0), (n, x.ncols())).copy_from(x);
    a.view_mut((0, x.ncols()), (n, x_knock.ncols()))
        .copy_from(x_knock);
    a.set_column(total - 1, y);
    Ok(SymMatrix::symmetrized(a.transpose() * a))
}
