//! Shared numeric kernels: symmetric-matrix wrapper, eigendecomposition
//! helpers, PSD square roots, Cholesky solves, and seedable RNG streams.
//!
//! Everything downstream (knockoff construction, surrogate reconstruction,
//! solvers) goes through this module so that tolerance and determinism
//! conventions live in one place.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check in [`SymMatrix::new`].
const SYMMETRY_RTOL: f64 = 1e-12;

/// Relative tolerance below which a negative eigenvalue is treated as
/// round-off rather than genuine indefiniteness.
const PSD_RTOL: f64 = 1e-8;

/// A validated symmetric matrix. Construction symmetrizes the payload, so
/// code holding a `SymMatrix` may rely on exact `m[(i,j)] == m[(j,i)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Wraps a square matrix, requiring symmetry up to 1e-12 relative to the
    /// largest entry. Non-finite entries are rejected.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = check_finite(&m)?.max(1.0);
        let mut max_asym = 0.0f64;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if max_asym > SYMMETRY_RTOL * scale {
            return Err(Error::invalid(format!(
                "matrix is not symmetric: max |a_ij - a_ji| = {max_asym:.3e} exceeds tolerance"
            )));
        }
        Ok(Self::symmetrized(m))
    }

    /// Wraps a matrix that is symmetric in exact arithmetic but may carry
    /// round-off skew (e.g. a triple product): averages with its transpose
    /// without the strict asymmetry check. Still rejects non-finite entries
    /// and non-square shapes via a panic-free path.
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "symmetrized() needs a square matrix");
        let mut s = m;
        for i in 0..s.nrows() {
            for j in (i + 1)..s.ncols() {
                let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        Self { m: s }
    }

    pub fn identity(p: usize) -> Self {
        Self {
            m: DMatrix::identity(p, p),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }
}

/// Rejects NaN/Inf; returns the max absolute entry.
fn check_finite(m: &DMatrix<f64>) -> Result<f64> {
    let mut max_abs = 0.0f64;
    for v in m.iter() {
        if !v.is_finite() {
            return Err(Error::invalid("matrix contains a non-finite entry"));
        }
        max_abs = max_abs.max(v.abs());
    }
    Ok(max_abs)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending
/// with matching eigenvector columns.
pub struct EigenPairs {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(m: &SymMatrix) -> EigenPairs {
    let se = m.m.clone().symmetric_eigen();
    let p = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .expect("eigenvalues of a finite symmetric matrix are finite")
    });
    let values = DVector::from_fn(p, |i, _| se.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &se.eigenvectors.column(src));
    }
    EigenPairs { values, vectors }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &SymMatrix) -> f64 {
    let se = m.m.clone().symmetric_eigen();
    se.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Symmetric PSD square root with eigenvalue clamping: eigenvalues below
/// `floor` (and any round-off negatives) are raised to `floor`. Eigenvalues
/// more negative than round-off (relative 1e-8) are an error.
pub fn psd_sqrt(m: &SymMatrix, floor: f64) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(m);
    let p = m.dim();
    let scale = eig.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.values[p - 1];
    if min < -PSD_RTOL * scale {
        return Err(Error::NotPsd(format!(
            "smallest eigenvalue {min:.6e} is below tolerance {:.1e}",
            -PSD_RTOL * scale
        )));
    }
    let roots = DVector::from_fn(p, |i, _| eig.values[i].max(floor).max(0.0).sqrt());
    let scaled = &eig.vectors * DMatrix::from_diagonal(&roots);
    Ok(SymMatrix::symmetrized(&scaled * eig.vectors.transpose()).into_inner())
}

/// Reconstructs the matrix with every eigenvalue raised to at least `floor`.
/// Used for PSD projection (floor 0) and covariance repair (small positive
/// floors).
pub fn clamp_eigenvalues(m: &SymMatrix, floor: f64) -> SymMatrix {
    let eig = sym_eigen(m);
    let p = m.dim();
    let clamped = DVector::from_fn(p, |i, _| eig.values[i].max(floor));
    let scaled = &eig.vectors * DMatrix::from_diagonal(&clamped);
    SymMatrix::symmetrized(&scaled * eig.vectors.transpose())
}

/// Factorization of a PSD matrix that tolerates exact singularity: Cholesky
/// when the matrix is numerically positive definite, otherwise an
/// eigendecomposition supporting pseudo-solves (null directions dropped) and
/// square-root factors. Knockoff joint Grams sit exactly on the PSD boundary
/// whenever the s-vector is optimal, so the fallback is routine, not
/// exceptional.
pub enum PsdFactor {
    Chol(Cholesky<f64, Dyn>),
    Eigen(EigenPairs),
}

/// Relative eigenvalue cutoff below which a direction counts as null for
/// pseudo-solves.
const PSEUDO_RTOL: f64 = 1e-10;

impl PsdFactor {
    pub fn new(m: &SymMatrix) -> Result<Self> {
        if let Ok(chol) = cholesky(m) {
            return Ok(PsdFactor::Chol(chol));
        }
        let eig = sym_eigen(m);
        let scale = eig.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let min = eig.values[eig.values.len() - 1];
        if min < -PSD_RTOL * scale {
            return Err(Error::NotPsd(format!(
                "smallest eigenvalue {min:.6e} is below tolerance {:.1e}",
                -PSD_RTOL * scale
            )));
        }
        Ok(PsdFactor::Eigen(eig))
    }

    /// Solve M x = b; for singular M this is the pseudo-solve, exact when b
    /// is orthogonal to the null space.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            PsdFactor::Chol(c) => c.solve(b),
            PsdFactor::Eigen(eig) => {
                let cutoff = PSEUDO_RTOL * eig.values[0].max(0.0);
                let coords = eig.vectors.transpose() * b;
                let scaled = DVector::from_fn(coords.len(), |i, _| {
                    if eig.values[i] > cutoff {
                        coords[i] / eig.values[i]
                    } else {
                        0.0
                    }
                });
                &eig.vectors * scaled
            }
        }
    }

    /// A factor L with L L' = M (up to null-space rounding).
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        match self {
            PsdFactor::Chol(c) => c.l(),
            PsdFactor::Eigen(eig) => {
                let roots = DVector::from_fn(eig.values.len(), |i, _| {
                    eig.values[i].max(0.0).sqrt()
                });
                &eig.vectors * DMatrix::from_diagonal(&roots)
            }
        }
    }
}

/// Cholesky of a symmetric positive definite matrix. Failure maps to
/// [`Error::NeedsRidge`] so callers know a jitter retry is the usual fix.
pub fn cholesky(m: &SymMatrix) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.m.clone()).ok_or_else(|| {
        Error::NeedsRidge(format!(
            "Cholesky of a {p}x{p} symmetric matrix",
            p = m.dim()
        ))
    })
}

/// Solves `m x = rhs` for each column of `rhs` via Cholesky.
pub fn solve_spd(m: &SymMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky(m)?.solve(rhs))
}

/// Standard-normal matrix with a documented fill order (row-major: the
/// (0,0), (0,1), ... entries consume successive draws). The order is part of
/// the reproducibility contract.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.standard_normal();
        }
    }
    m
}

pub fn gaussian_vector(rng: &mut RngStream, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.standard_normal())
}

/// Seedable, stream-splittable RNG handle. A stream is identified by
/// `(seed, stream id)`; substreams are derived from those identifiers (not
/// from consumption position), so parallel workers that derive their own
/// substreams produce identical draws regardless of scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Derives a child stream from this stream's identity, a label, and an
    /// index. The derivation hashes `(parent stream, label, index)` with
    /// FNV-1a + SplitMix64; it does not depend on how much of the parent has
    /// been consumed.
    pub fn substream(&self, label: &str, index: u64) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ self.stream;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        RngStream::new(self.seed, splitmix64(h))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    /// Sample `k` distinct indices from `0..n`, ascending order not
    /// guaranteed; the draw order is part of the reproducibility contract.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k).into_vec()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
