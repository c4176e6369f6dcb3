//! Knockoff model construction on a correlation-scale covariance.
//!
//! A model fixes the free diagonal (or block-diagonal) matrix D and
//! precomputes the transfer matrix P = [I - Sigma^-1 D, ...] and the
//! conditional covariance V needed to sample knockoff copies, either as a
//! data matrix (X given) or directly on the score scale (X^T Y given).
//! Feasibility of D means the joint Gram of (X, knockoff copies) stays PSD.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numkit::{
    cholesky, min_eigenvalue, psd_sqrt, solve_spd, sym_eigen, RngStream, SymMatrix,
};
use crate::numkit::{gaussian_matrix, gaussian_vector};

/// Tolerance for the unit-diagonal check at model-construction entry points.
const UNIT_DIAG_TOL: f64 = 1e-8;

/// Convergence threshold for the SDP coordinate-ascent sweep.
const SDP_SWEEP_TOL: f64 = 1e-6;

/// PD margin kept between diag(s) and its feasibility boundary during the
/// SDP ascent, so intermediate factorizations stay well posed.
const SDP_MARGIN: f64 = 1e-9;

fn require_unit_diagonal(sigma: &SymMatrix) -> Result<()> {
    for j in 0..sigma.dim() {
        if (sigma.as_matrix()[(j, j)] - 1.0).abs() > UNIT_DIAG_TOL {
            return Err(Error::invalid(format!(
                "covariance must be on correlation scale (unit diagonal); entry ({j},{j}) = {}",
                sigma.as_matrix()[(j, j)]
            )));
        }
    }
    Ok(())
}

fn require_copies(copies: usize) -> Result<f64> {
    if copies == 0 {
        return Err(Error::invalid("number of knockoff copies must be >= 1"));
    }
    Ok((copies as f64 + 1.0) / copies as f64)
}

/// Converts a covariance to correlation scale and remembers the per-feature
/// standard deviations so score vectors can be rescaled to match.
pub struct Standardized {
    pub sigma: SymMatrix,
    pub scales: DVector<f64>,
}

pub fn standardize_covariance(cov: &SymMatrix) -> Result<Standardized> {
    let p = cov.dim();
    let mut scales = DVector::zeros(p);
    for j in 0..p {
        let v = cov.as_matrix()[(j, j)];
        if v <= 0.0 {
            return Err(Error::invalid(format!(
                "covariance diagonal entry {j} is {v}; must be positive"
            )));
        }
        scales[j] = v.sqrt();
    }
    let m = DMatrix::from_fn(p, p, |i, j| cov.as_matrix()[(i, j)] / (scales[i] * scales[j]));
    Ok(Standardized {
        sigma: SymMatrix::symmetrized(m),
        scales,
    })
}

impl Standardized {
    /// Rescales X^T Y to match the standardized features: entry j is divided
    /// by the standard deviation of feature j.
    pub fn scale_xty(&self, xty: &DVector<f64>) -> Result<DVector<f64>> {
        if xty.len() != self.scales.len() {
            return Err(Error::invalid(format!(
                "xty length {} does not match p = {}",
                xty.len(),
                self.scales.len()
            )));
        }
        Ok(DVector::from_fn(xty.len(), |j, _| xty[j] / self.scales[j]))
    }
}

/// Equicorrelated construction: every s_j set to
/// min(1, (M+1)/M * lambda_min(Sigma)).
pub fn solve_s_equicorrelated(sigma: &SymMatrix, copies: usize) -> Result<DVector<f64>> {
    require_unit_diagonal(sigma)?;
    let c = require_copies(copies)?;
    let lam_min = min_eigenvalue(sigma);
    if lam_min < -1e-8 {
        return Err(Error::NotPsd(format!(
            "covariance has smallest eigenvalue {lam_min:.6e}"
        )));
    }
    let s = (c * lam_min.max(0.0)).min(1.0);
    Ok(DVector::from_element(sigma.dim(), s))
}

/// Near-optimal s for the objective sum |1 - s_j| subject to s_j >= 0 and
/// diag(s) <= (M+1)/M * Sigma, by deterministic cyclic coordinate ascent.
///
/// Each coordinate is pushed toward 1 as far as the positive-definiteness
/// certificate allows, using the Schur-complement bound 1/(B^-1)_jj on the
/// feasible increment (B the slack matrix). The result is always feasible
/// and never worse than the equicorrelated solution.
pub fn solve_s_sdp(sigma: &SymMatrix, copies: usize, max_sweeps: usize) -> Result<DVector<f64>> {
    require_unit_diagonal(sigma)?;
    let c = require_copies(copies)?;
    let p = sigma.dim();
    let eig = sym_eigen(sigma);
    let lam_min = eig.values[p - 1];
    let lam_max = eig.values[0].max(0.0);
    if lam_min < -1e-8 {
        return Err(Error::NotPsd(format!(
            "covariance has smallest eigenvalue {lam_min:.6e}"
        )));
    }
    let s_eq = (c * lam_min.max(0.0)).min(1.0);
    let equi = DVector::from_element(p, s_eq);

    let margin = SDP_MARGIN * c * lam_max.max(1.0);
    // Ascent must start strictly inside the feasible region: s = 0. The
    // equicorrelated point is unusable as a start because it already sits on
    // the PSD boundary, where no single coordinate can grow.
    let mut s = DVector::from_element(p, 0.0);

    // B = c*Sigma - diag(s) - margin*I must start PD; if it cannot be
    // factored (Sigma nearly singular), the equicorrelated point is all we
    // certify.
    let slack = |s: &DVector<f64>| {
        let mut b = sigma.as_matrix() * c;
        for j in 0..p {
            b[(j, j)] -= s[j] + margin;
        }
        SymMatrix::symmetrized(b)
    };
    let mut binv = match cholesky(&slack(&s)) {
        Ok(ch) => ch.inverse(),
        Err(_) => return certify_s(sigma, c, equi.clone(), &equi),
    };

    for _ in 0..max_sweeps {
        let mut max_delta = 0.0f64;
        for j in 0..p {
            let bjj = binv[(j, j)];
            if !bjj.is_finite() || bjj <= 0.0 {
                break;
            }
            // Largest PD-preserving increment is 1/(B^-1)_jj; take 90% of
            // it (full steps make the next Sherman-Morrison update
            // singular), or less if the cap s_j <= 1 binds first.
            let delta = (0.9 / bjj).min(1.0 - s[j]);
            if delta <= 1e-15 {
                continue;
            }
            let denom = 1.0 - delta * bjj;
            let u = binv.column(j).clone_owned();
            let k = delta / denom;
            for a in 0..p {
                let ka = k * u[a];
                for b in 0..p {
                    binv[(a, b)] += ka * u[b];
                }
            }
            s[j] += delta;
            max_delta = max_delta.max(delta);
        }
        // Refresh the inverse each sweep: Sherman-Morrison drift compounds.
        match cholesky(&slack(&s)) {
            Ok(ch) => binv = ch.inverse(),
            Err(_) => break,
        }
        if max_delta < SDP_SWEEP_TOL {
            break;
        }
    }

    certify_s(sigma, c, s, &equi)
}

/// Feasibility certificate plus the dominance guarantee over the
/// equicorrelated point. Falls back to the equicorrelated s if the candidate
/// fails either check.
fn certify_s(
    sigma: &SymMatrix,
    c: f64,
    candidate: DVector<f64>,
    equi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let p = sigma.dim();
    let objective = |s: &DVector<f64>| s.iter().map(|v| (1.0 - v).abs()).sum::<f64>();
    let feasible = |s: &DVector<f64>| {
        let mut a = sigma.as_matrix() * c;
        for j in 0..p {
            a[(j, j)] -= s[j];
        }
        let scale = c * a.norm().max(1.0);
        min_eigenvalue(&SymMatrix::symmetrized(a)) >= -1e-8 * scale
    };
    let pick_equi =
        !feasible(&candidate) || objective(&candidate) > objective(equi) + 1e-8;
    let s = if pick_equi { equi.clone() } else { candidate };
    if !feasible(&s) {
        return Err(Error::NotPsd(
            "no feasible s vector: covariance is numerically singular".into(),
        ));
    }
    Ok(s)
}

/// Disjoint cover of 0..p by feature groups.
#[derive(Debug, Clone)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    p: usize,
}

impl GroupPartition {
    pub fn new(groups: Vec<Vec<usize>>, p: usize) -> Result<Self> {
        let mut seen = vec![false; p];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("group {g} is empty")));
            }
            for &i in members {
                if i >= p {
                    return Err(Error::invalid(format!(
                        "group {g} references feature {i} but p = {p}"
                    )));
                }
                if seen[i] {
                    return Err(Error::invalid(format!(
                        "feature {i} appears in more than one group"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&v| !v) {
            return Err(Error::invalid(format!(
                "feature {missing} is not covered by any group"
            )));
        }
        Ok(GroupPartition { groups, p })
    }

    /// Consecutive groups of `group_size` (last group may be short).
    pub fn contiguous(p: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("group size must be >= 1"));
        }
        let groups = (0..p)
            .step_by(group_size)
            .map(|start| (start..(start + group_size).min(p)).collect())
            .collect();
        GroupPartition::new(groups, p)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

/// A ready-to-sample knockoff model for M exchangeable copies.
#[derive(Debug, Clone)]
pub struct KnockoffModel {
    sigma: SymMatrix,
    d: DMatrix<f64>,
    copies: usize,
    /// p x (M p): horizontally stacked copies of I - Sigma^-1 D.
    p_mat: DMatrix<f64>,
    /// (M p) x (M p) conditional covariance of the stacked copies.
    v: SymMatrix,
    v_sqrt: DMatrix<f64>,
}

/// Builds a model with a diagonal free matrix D = diag(s).
pub fn build_model(sigma: &SymMatrix, s: &DVector<f64>, copies: usize) -> Result<KnockoffModel> {
    require_unit_diagonal(sigma)?;
    let p = sigma.dim();
    if s.len() != p {
        return Err(Error::invalid(format!(
            "s has length {} but Sigma is {p}x{p}",
            s.len()
        )));
    }
    for (j, &v) in s.iter().enumerate() {
        if !v.is_finite() || v < -1e-12 {
            return Err(Error::invalid(format!("s[{j}] = {v} is not a valid entry")));
        }
    }
    let d = DMatrix::from_diagonal(&s.map(|v| v.max(0.0)));
    build_model_with_d(sigma, d, copies)
}

/// Group construction: D = c * blockdiag(Sigma_gg) with
/// c = min(1, (M+1)/M * lambda_min(B^-1/2 Sigma B^-1/2)).
pub fn build_group_model(
    sigma: &SymMatrix,
    partition: &GroupPartition,
    copies: usize,
) -> Result<KnockoffModel> {
    require_unit_diagonal(sigma)?;
    let cm = require_copies(copies)?;
    let p = sigma.dim();
    if partition.n_features() != p {
        return Err(Error::invalid(format!(
            "partition covers {} features but Sigma is {p}x{p}",
            partition.n_features()
        )));
    }
    // Block-diagonal B and its inverse square root, block by block.
    let mut b = DMatrix::zeros(p, p);
    let mut b_inv_sqrt = DMatrix::zeros(p, p);
    for members in partition.groups() {
        let k = members.len();
        let block = DMatrix::from_fn(k, k, |a, c| sigma.as_matrix()[(members[a], members[c])]);
        let eig = sym_eigen(&SymMatrix::symmetrized(block.clone()));
        if eig.values[k - 1] <= 0.0 {
            return Err(Error::NotPsd(format!(
                "within-group covariance block is singular (eigenvalue {:.3e})",
                eig.values[k - 1]
            )));
        }
        let inv_roots = DVector::from_fn(k, |i, _| 1.0 / eig.values[i].sqrt());
        let inv_sqrt = &eig.vectors * DMatrix::from_diagonal(&inv_roots) * eig.vectors.transpose();
        for (a, &ia) in members.iter().enumerate() {
            for (c, &ic) in members.iter().enumerate() {
                b[(ia, ic)] = block[(a, c)];
                b_inv_sqrt[(ia, ic)] = inv_sqrt[(a, c)];
            }
        }
    }
    let whitened = SymMatrix::symmetrized(&b_inv_sqrt * sigma.as_matrix() * &b_inv_sqrt);
    let lam_min = min_eigenvalue(&whitened);
    if lam_min < -1e-8 {
        return Err(Error::NotPsd(format!(
            "whitened covariance has smallest eigenvalue {lam_min:.6e}"
        )));
    }
    let c = (cm * lam_min.max(0.0)).min(1.0);
    build_model_with_d(sigma, b * c, copies)
}

fn build_model_with_d(sigma: &SymMatrix, d: DMatrix<f64>, copies: usize) -> Result<KnockoffModel> {
    require_copies(copies)?;
    let p = sigma.dim();
    let a = solve_spd(sigma, &d)?; // Sigma^-1 D
    let p_block = DMatrix::identity(p, p) - &a;
    let dsd = SymMatrix::symmetrized(&d * &a).into_inner(); // D Sigma^-1 D
    let v_diag = 2.0 * &d - &dsd;
    let v_off = &d - &dsd;

    let mp = copies * p;
    let mut p_mat = DMatrix::zeros(p, mp);
    let mut v = DMatrix::zeros(mp, mp);
    for m in 0..copies {
        p_mat.view_mut((0, m * p), (p, p)).copy_from(&p_block);
        for l in 0..copies {
            let block = if m == l { &v_diag } else { &v_off };
            v.view_mut((m * p, l * p), (p, p)).copy_from(block);
        }
    }
    let v = SymMatrix::symmetrized(v);
    let v_sqrt = psd_sqrt(&v, 0.0)?;
    Ok(KnockoffModel {
        sigma: sigma.clone(),
        d,
        copies,
        p_mat,
        v,
        v_sqrt,
    })
}

impl KnockoffModel {
    pub fn p(&self) -> usize {
        self.sigma.dim()
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn sigma(&self) -> &SymMatrix {
        &self.sigma
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn transfer(&self) -> &DMatrix<f64> {
        &self.p_mat
    }

    pub fn conditional_cov(&self) -> &SymMatrix {
        &self.v
    }

    /// Joint Gram of (X, all M knockoff copies) divided by n: (M+1)p square,
    /// Sigma on the diagonal blocks and Sigma - D everywhere else.
    pub fn joint_gram(&self) -> SymMatrix {
        let p = self.p();
        let m1 = self.copies + 1;
        let off = self.sigma.as_matrix() - &self.d;
        let mut g = DMatrix::zeros(m1 * p, m1 * p);
        for a in 0..m1 {
            for b in 0..m1 {
                let block = if a == b {
                    self.sigma.as_matrix()
                } else {
                    &off
                };
                g.view_mut((a * p, b * p), (p, p)).copy_from(block);
            }
        }
        SymMatrix::symmetrized(g)
    }

    /// Samples the n x (M p) knockoff data matrix X P + E V^{1/2} for a
    /// realized X (one fresh standard-normal row per observation).
    pub fn sample_knockoff_matrix(
        &self,
        x: &DMatrix<f64>,
        rng: &mut RngStream,
    ) -> Result<DMatrix<f64>> {
        if x.ncols() != self.p() {
            return Err(Error::invalid(format!(
                "X has {} columns but the model was built for p = {}",
                x.ncols(),
                self.p()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("X contains a non-finite entry"));
        }
        let e = gaussian_matrix(rng, x.nrows(), self.copies * self.p());
        Ok(x * &self.p_mat + e * &self.v_sqrt)
    }

    /// Samples knockoff score vectors directly from summary statistics:
    /// P^T (X^T Y) + ||Y||_2 * V^{1/2} xi with xi standard normal. `y_norm2`
    /// is the squared norm Y^T Y.
    pub fn sample_ghost_zscores(
        &self,
        xty: &DVector<f64>,
        y_norm2: f64,
        rng: &mut RngStream,
    ) -> Result<DVector<f64>> {
        if xty.len() != self.p() {
            return Err(Error::invalid(format!(
                "xty has length {} but the model was built for p = {}",
                xty.len(),
                self.p()
            )));
        }
        if !y_norm2.is_finite() || y_norm2 < 0.0 {
            return Err(Error::invalid(format!("y_norm2 = {y_norm2} must be >= 0")));
        }
        if xty.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("xty contains a non-finite entry"));
        }
        let xi = gaussian_vector(rng, self.copies * self.p());
        Ok(self.p_mat.transpose() * xty + y_norm2.sqrt() * (&self.v_sqrt * xi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn corr2(rho: f64) -> SymMatrix {
        SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])).unwrap()
    }

    fn ar1(p: usize, rho: f64) -> SymMatrix {
        SymMatrix::symmetrized(DMatrix::from_fn(p, p, |i, j| {
            rho.powi((i as i32 - j as i32).abs())
        }))
    }

    /// Random correlation matrix from a seeded spectrum, for property loops.
    fn random_corr(p: usize, seed: u64) -> SymMatrix {
        let mut rng = RngStream::new(seed, 0);
        let a = gaussian_matrix(&mut rng, p + 3, p);
        let cov = SymMatrix::symmetrized(a.transpose() * &a);
        standardize_covariance(&cov).unwrap().sigma
    }

    #[test]
    fn equicorrelated_identity_is_all_ones() {
        let s = solve_s_equicorrelated(&SymMatrix::identity(3), 1).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn equicorrelated_two_by_two() {
        let s = solve_s_equicorrelated(&corr2(0.8), 1).unwrap();
        assert_relative_eq!(s[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(s[1], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn equicorrelated_five_copies() {
        let s = solve_s_equicorrelated(&corr2(0.5), 5).unwrap();
        assert_relative_eq!(s[0], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn equicorrelated_rejects_covariance_scale() {
        let m = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 4.0])).unwrap();
        assert!(solve_s_equicorrelated(&m, 1).is_err());
    }

    #[test]
    fn sdp_identity_is_all_ones() {
        let s = solve_s_sdp(&SymMatrix::identity(3), 1, 100).unwrap();
        for &v in s.iter() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sdp_two_by_two_half_correlation() {
        // 2 Sigma - I = [[1,1],[1,1]] sits exactly on the PSD boundary, so
        // (1, 1) is feasible and optimal.
        let s = solve_s_sdp(&corr2(0.5), 1, 100).unwrap();
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(s[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn sdp_ar1_beats_equicorrelated() {
        let sigma = ar1(10, 0.8);
        let s = solve_s_sdp(&sigma, 1, 200).unwrap();
        let objective: f64 = s.iter().map(|v| (1.0 - v).abs()).sum();
        let s_eq = solve_s_equicorrelated(&sigma, 1).unwrap();
        let objective_eq: f64 = s_eq.iter().map(|v| (1.0 - v).abs()).sum();
        assert!(
            objective <= objective_eq + 1e-8,
            "objective {objective} worse than equicorrelated {objective_eq}"
        );
        // Independent-solver oracle: the exact optimum of this program is
        // 7.0423, so any feasible s must land at or above it.
        assert!(objective >= 7.0422, "objective {objective} below the SDP optimum");
    }

    #[test]
    fn sdp_feasible_and_dominant_on_random_correlations() {
        for seed in 0..20 {
            for copies in [1usize, 3] {
                let sigma = random_corr(8, seed);
                let c = (copies as f64 + 1.0) / copies as f64;
                let s = solve_s_sdp(&sigma, copies, 100).unwrap();
                let s_eq = solve_s_equicorrelated(&sigma, copies).unwrap();
                let mut slack = sigma.as_matrix() * c;
                for j in 0..8 {
                    assert!((0.0..=1.0 + 1e-12).contains(&s[j]), "s out of range");
                    slack[(j, j)] -= s[j];
                }
                let lam = min_eigenvalue(&SymMatrix::symmetrized(slack));
                assert!(lam >= -1e-8, "infeasible: lambda_min {lam} (seed {seed})");
                let obj: f64 = s.iter().map(|v| 1.0 - v).sum();
                let obj_eq: f64 = s_eq.iter().map(|v| 1.0 - v).sum();
                assert!(obj <= obj_eq + 1e-8, "dominance failed on seed {seed}");
            }
        }
    }

    #[test]
    fn model_algebra_single_copy() {
        let sigma = ar1(5, 0.6);
        let s = solve_s_sdp(&sigma, 1, 100).unwrap();
        let model = build_model(&sigma, &s, 1).unwrap();
        let d = DMatrix::from_diagonal(&s);
        let sigma_inv = sigma.as_matrix().clone().try_inverse().unwrap();
        let p_expect = DMatrix::identity(5, 5) - &sigma_inv * &d;
        assert_relative_eq!(*model.transfer(), p_expect, epsilon = 1e-10);
        let v_expect = 2.0 * &d - &d * &sigma_inv * &d;
        assert_relative_eq!(
            *model.conditional_cov().as_matrix(),
            v_expect,
            epsilon = 1e-10
        );
    }

    #[test]
    fn model_identity_two_copies_blocks() {
        let sigma = SymMatrix::identity(3);
        let s = DVector::from_element(3, 1.0);
        let model = build_model(&sigma, &s, 2).unwrap();
        // V diagonal blocks 2D - D = I, off-diagonal D - D = 0.
        let v = model.conditional_cov().as_matrix();
        assert_relative_eq!(
            v.view((0, 0), (3, 3)).clone_owned(),
            DMatrix::identity(3, 3),
            epsilon = 1e-10
        );
        assert_relative_eq!(
            v.view((0, 3), (3, 3)).clone_owned(),
            DMatrix::zeros(3, 3),
            epsilon = 1e-10
        );
        // P = [0 | 0] since Sigma^-1 D = I.
        assert_relative_eq!(*model.transfer(), DMatrix::zeros(3, 6), epsilon = 1e-12);
    }

    #[test]
    fn joint_gram_layout_and_feasibility() {
        let sigma = ar1(4, 0.5);
        let s = solve_s_sdp(&sigma, 2, 100).unwrap();
        let model = build_model(&sigma, &s, 2).unwrap();
        let g = model.joint_gram();
        assert_eq!(g.dim(), 12);
        let gm = g.as_matrix();
        assert_relative_eq!(
            gm.view((0, 0), (4, 4)).clone_owned(),
            *sigma.as_matrix(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            gm.view((0, 4), (4, 4)).clone_owned(),
            sigma.as_matrix() - model.d(),
            epsilon = 1e-12
        );
        assert!(min_eigenvalue(&g) >= -1e-8);
    }

    #[test]
    fn ghost_zscores_match_target_moments() {
        // Monte Carlo oracle for the score sampler: empirical mean must
        // approach P^T xty, empirical covariance y_norm2 * V.
        let sigma = corr2(0.5);
        let s = solve_s_sdp(&sigma, 1, 100).unwrap();
        let model = build_model(&sigma, &s, 1).unwrap();
        let xty = DVector::from_vec(vec![3.0, -1.0]);
        let y_norm2 = 4.0;
        let reps = 40_000;
        let mut rng = RngStream::new(42, 0);
        let mut mean = DVector::zeros(2);
        let mut cov = DMatrix::zeros(2, 2);
        let mut draws = Vec::with_capacity(reps);
        for _ in 0..reps {
            let z = model.sample_ghost_zscores(&xty, y_norm2, &mut rng).unwrap();
            mean += &z;
            draws.push(z);
        }
        mean /= reps as f64;
        for z in &draws {
            let c = z - &mean;
            cov += &c * c.transpose();
        }
        cov /= reps as f64;
        let target_mean = model.transfer().transpose() * &xty;
        let target_cov = model.conditional_cov().as_matrix() * y_norm2;
        assert_relative_eq!(mean, target_mean, epsilon = 0.05);
        assert_relative_eq!(cov, target_cov, epsilon = 0.15);
    }

    #[test]
    fn knockoff_matrix_conditional_mean() {
        let sigma = ar1(3, 0.4);
        let s = solve_s_equicorrelated(&sigma, 1).unwrap();
        let model = build_model(&sigma, &s, 1).unwrap();
        let mut rng = RngStream::new(5, 0);
        let x = gaussian_matrix(&mut rng, 4, 3);
        let reps = 20_000;
        let mut mean = DMatrix::zeros(4, 3);
        for r in 0..reps {
            let mut draw_rng = RngStream::new(5, 1).substream("draw", r as u64);
            mean += model.sample_knockoff_matrix(&x, &mut draw_rng).unwrap();
        }
        mean /= reps as f64;
        assert_relative_eq!(mean, &x * model.transfer(), epsilon = 0.05);
    }

    #[test]
    fn group_model_free_matrix_is_scaled_blockdiag() {
        // p = 4, two groups of two; the oracle recomputes c from its
        // definition and checks D block by block.
        let mut m = DMatrix::identity(4, 4);
        for (i, j, v) in [(0usize, 1usize, 0.7), (2, 3, 0.7), (0, 2, 0.2), (0, 3, 0.2), (1, 2, 0.2), (1, 3, 0.2)] {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        let sigma = SymMatrix::new(m).unwrap();
        let partition = GroupPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let model = build_group_model(&sigma, &partition, 1).unwrap();

        let mut b = DMatrix::zeros(4, 4);
        for members in partition.groups() {
            for &i in members {
                for &j in members {
                    b[(i, j)] = sigma.as_matrix()[(i, j)];
                }
            }
        }
        let b_sym = SymMatrix::symmetrized(b.clone());
        let b_inv_sqrt = {
            let eig = sym_eigen(&b_sym);
            let inv_roots = DVector::from_fn(4, |i, _| 1.0 / eig.values[i].sqrt());
            &eig.vectors * DMatrix::from_diagonal(&inv_roots) * eig.vectors.transpose()
        };
        let whitened = SymMatrix::symmetrized(&b_inv_sqrt * sigma.as_matrix() * &b_inv_sqrt);
        let c = (2.0 * min_eigenvalue(&whitened)).min(1.0);
        assert_relative_eq!(*model.d(), b * c, epsilon = 1e-10);
        assert!(min_eigenvalue(&model.joint_gram()) >= -1e-8);
    }

    #[test]
    fn group_partition_validation() {
        assert!(GroupPartition::new(vec![vec![0], vec![0]], 1).is_err());
        assert!(GroupPartition::new(vec![vec![0]], 2).is_err());
        assert!(GroupPartition::new(vec![vec![0], vec![2]], 2).is_err());
        assert!(GroupPartition::new(vec![vec![0, 1], vec![]], 2).is_err());
        let part = GroupPartition::contiguous(7, 3).unwrap();
        assert_eq!(part.n_groups(), 3);
        assert_eq!(part.groups()[2], vec![6]);
    }

    #[test]
    fn standardize_covariance_rescales() {
        let cov = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 9.0])).unwrap();
        let std = standardize_covariance(&cov).unwrap();
        assert_relative_eq!(std.sigma.as_matrix()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(std.sigma.as_matrix()[(0, 1)], 0.5, epsilon = 1e-12);
        let xty = DVector::from_vec(vec![2.0, 6.0]);
        let scaled = std.scale_xty(&xty).unwrap();
        assert_relative_eq!(scaled[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(scaled[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sampler_rejects_dimension_mismatch() {
        let model = build_model(&SymMatrix::identity(2), &DVector::from_element(2, 1.0), 1).unwrap();
        let mut rng = RngStream::new(0, 0);
        let bad = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(model.sample_ghost_zscores(&bad, 1.0, &mut rng).is_err());
        assert!(model
            .sample_ghost_zscores(&DVector::from_vec(vec![1.0, 2.0]), -1.0, &mut rng)
            .is_err());
        let x = DMatrix::zeros(3, 3);
        assert!(model.sample_knockoff_matrix(&x, &mut rng).is_err());
    }
}
