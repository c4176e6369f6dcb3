//! Conditional-randomization p-values from summary statistics.
//!
//! For feature j the conditional law of X_j given the rest is Gaussian with
//! slope gamma_j and residual variance v_j, both functions of Sigma alone.
//! The marginal variant resamples the score X_j'Y directly; the lasso
//! variant resamples the surrogate column and refits. Both count how often a
//! resampled importance beats the observed one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numkit::{cholesky, RngStream, SymMatrix};
use crate::pipelines::SummaryStats;
use crate::reconstruct::{reconstruct_surrogate, FullSummaryStats};
use crate::solvers::{cd_quadratic_lasso, QuadProblem, SolverConfig};

/// Conditional law of one feature given the others: X_j | X_-j is Gaussian
/// with mean X_-j gamma and variance v.
#[derive(Debug, Clone)]
pub struct ConditionalParams {
    pub gamma: DVector<f64>,
    pub v: f64,
}

/// Direct Schur-complement computation for a single feature.
pub fn conditional_params(sigma: &SymMatrix, j: usize) -> Result<ConditionalParams> {
    let p = sigma.dim();
    if j >= p {
        return Err(Error::invalid(format!("feature index {j} out of range for p = {p}")));
    }
    let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
    let m = sigma.as_matrix();
    let sub = SymMatrix::symmetrized(DMatrix::from_fn(p - 1, p - 1, |a, b| {
        m[(others[a], others[b])]
    }));
    let cross = DVector::from_fn(p - 1, |a, _| m[(others[a], j)]);
    let chol = cholesky(&sub).map_err(|_| {
        Error::NotPsd(format!("covariance submatrix excluding feature {j} is not positive definite"))
    })?;
    let gamma = chol.solve(&cross);
    let v = m[(j, j)] - cross.dot(&gamma);
    if !(v > 0.0) {
        return Err(Error::NotPsd(format!(
            "conditional variance of feature {j} is {v}; covariance is not positive definite"
        )));
    }
    Ok(ConditionalParams { gamma, v })
}

/// All features at once via the precision matrix: gamma_j = -Omega_{-j,j} /
/// Omega_jj and v_j = 1 / Omega_jj. One factorization instead of p.
pub fn conditional_params_all(sigma: &SymMatrix) -> Result<Vec<ConditionalParams>> {
    let p = sigma.dim();
    let chol = cholesky(sigma).map_err(|_| {
        Error::NotPsd("covariance is not positive definite".into())
    })?;
    let omega = chol.solve(&DMatrix::identity(p, p));
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let ojj = omega[(j, j)];
        if !(ojj > 0.0) {
            return Err(Error::NotPsd(format!(
                "precision diagonal {ojj} at feature {j}; covariance is not positive definite"
            )));
        }
        let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let gamma = DVector::from_fn(p - 1, |a, _| -omega[(others[a], j)] / ojj);
        out.push(ConditionalParams { gamma, v: 1.0 / ojj });
    }
    Ok(out)
}

/// Form of the resampled statistic in the marginal test. The observed side
/// is always |xty_j|; comparing it against the signed resample (`Literal`)
/// breaks null exchangeability and yields liberal p-values, so the
/// absolute-value form is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrtStatistic {
    Absolute,
    Literal,
}

fn count_to_pvalue(beats: usize, b: usize) -> f64 {
    (1.0 + beats as f64) / (b as f64 + 1.0)
}

/// Marginal-score randomization p-values. For each feature the score
/// resamples as gamma_j' xty_-j + ||Y|| N(0, v_j); the p-value is the
/// (tie-inclusive) rank of the observed |xty_j| among the resamples.
/// Features use independent derived rng streams, so results do not depend
/// on evaluation order or worker count.
pub fn ghost_crt_marginal(
    stats: &SummaryStats,
    sigma: &SymMatrix,
    b: usize,
    statistic: CrtStatistic,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    let p = stats.p();
    if sigma.dim() != p {
        return Err(Error::invalid(format!(
            "covariance is {}x{} but xty has length {p}",
            sigma.dim(),
            sigma.dim()
        )));
    }
    if b < 1 {
        return Err(Error::invalid("resample count B must be >= 1"));
    }
    let params = conditional_params_all(sigma)?;
    let y_norm = stats.yty.sqrt();
    let per_feature = crate::par::run_indexed(p, None, |j| {
        let mut r = rng.substream("crt-marginal/feature", j as u64);
        let mean: f64 = params[j]
            .gamma
            .iter()
            .zip((0..p).filter(|&k| k != j))
            .map(|(&g, k)| g * stats.xty[k])
            .sum();
        let sd = y_norm * params[j].v.sqrt();
        let observed = stats.xty[j].abs();
        let mut beats = 0usize;
        for _ in 0..b {
            let draw = mean + sd * r.standard_normal();
            let t = match statistic {
                CrtStatistic::Absolute => draw.abs(),
                CrtStatistic::Literal => draw,
            };
            if t >= observed {
                beats += 1;
            }
        }
        count_to_pvalue(beats, b)
    });
    Ok(per_feature)
}

/// Penalized-regression randomization p-values on surrogate data. The
/// observed statistic is |beta_j| from the lasso on (X_check, Y_check); each
/// resample replaces column j by its conditional draw, patches the Gram row
/// and cross product, and refits warm-started from the observed solution.
///
/// `max_refits` caps the total B * p lasso solves.
pub fn ghost_crt_lasso(
    stats: &FullSummaryStats,
    sigma: &SymMatrix,
    b: usize,
    lambda: f64,
    max_refits: Option<usize>,
    rng: &RngStream,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    let p = stats.p();
    if sigma.dim() != p {
        return Err(Error::invalid(format!(
            "covariance is {}x{} but xtx is {p}x{p}",
            sigma.dim(),
            sigma.dim()
        )));
    }
    if b < 1 {
        return Err(Error::invalid("resample count B must be >= 1"));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("lambda = {lambda} must be positive")));
    }
    if let Some(cap) = max_refits {
        if b * p > cap {
            return Err(Error::invalid(format!(
                "B * p = {} refits exceeds the budget {cap}",
                b * p
            )));
        }
    }
    let params = conditional_params_all(sigma)?;
    let surrogate = reconstruct_surrogate(stats)?;
    let observed_fit = cd_quadratic_lasso(
        &QuadProblem {
            c: &stats.xtx,
            d: &stats.xty,
            lambda,
            gamma: 0.0,
        },
        config,
    )?;

    let per_feature = crate::par::run_indexed(p, None, |j| -> Result<f64> {
        let mut r = rng.substream("crt-lasso/feature", j as u64);
        let observed = observed_fit[j].abs();
        let n_rows = surrogate.x.nrows();
        let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        // Conditional mean of column j given the rest of the surrogate.
        let mut mean_col = DVector::zeros(n_rows);
        for (a, &k) in others.iter().enumerate() {
            mean_col.axpy(params[j].gamma[a], &surrogate.x.column(k), 1.0);
        }
        let sd = params[j].v.sqrt();
        let mut beats = 0usize;
        for _ in 0..b {
            let noise = crate::numkit::gaussian_vector(&mut r, n_rows);
            let col = &mean_col + sd * noise;
            let mut c = stats.xtx.as_matrix().clone();
            let mut d = stats.xty.clone();
            for k in 0..p {
                let dot = if k == j {
                    col.norm_squared()
                } else {
                    col.dot(&surrogate.x.column(k))
                };
                c[(j, k)] = dot;
                c[(k, j)] = dot;
            }
            d[j] = col.dot(&surrogate.y);
            let patched = SymMatrix::symmetrized(c);
            let cfg = SolverConfig {
                warm_start: Some(observed_fit.clone()),
                ..config.clone()
            };
            let refit = cd_quadratic_lasso(
                &QuadProblem {
                    c: &patched,
                    d: &d,
                    lambda,
                    gamma: 0.0,
                },
                &cfg,
            )?;
            if refit[j].abs() >= observed {
                beats += 1;
            }
        }
        Ok(count_to_pvalue(beats, b))
    });
    per_feature.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::benjamini_hochberg;
    use crate::numkit::{gaussian_matrix, gaussian_vector, psd_sqrt};
    use approx::assert_abs_diff_eq;

    fn ar1(p: usize, rho: f64) -> SymMatrix {
        SymMatrix::new(DMatrix::from_fn(p, p, |i, j| {
            rho.powi((i as i32 - j as i32).abs())
        }))
        .unwrap()
    }

    fn rng(stream: u64) -> RngStream {
        RngStream::new(0xc27, stream)
    }

    #[test]
    fn identity_covariance_gives_trivial_conditionals() {
        let sigma = SymMatrix::identity(4);
        for j in 0..4 {
            let params = conditional_params(&sigma, j).unwrap();
            assert!(params.gamma.iter().all(|&g| g == 0.0));
            assert_abs_diff_eq!(params.v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_by_two_schur_complement_by_hand() {
        let sigma = ar1(2, 0.5);
        let params = conditional_params(&sigma, 1).unwrap();
        assert_abs_diff_eq!(params.gamma[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(params.v, 0.75, epsilon = 1e-14);
    }

    #[test]
    fn conditional_variance_matches_precision_diagonal() {
        let sigma = ar1(5, 0.5);
        let inv = sigma.as_matrix().clone().try_inverse().unwrap();
        let params = conditional_params(&sigma, 2).unwrap();
        assert_abs_diff_eq!(params.v, 1.0 / inv[(2, 2)], epsilon = 1e-10);
    }

    #[test]
    fn batch_conditionals_match_direct_ones() {
        let mut r = rng(1);
        let raw = gaussian_matrix(&mut r, 12, 6);
        let sigma = SymMatrix::symmetrized(
            raw.transpose() * &raw / 12.0 + DMatrix::identity(6, 6) * 0.2,
        );
        let all = conditional_params_all(&sigma).unwrap();
        for j in 0..6 {
            let direct = conditional_params(&sigma, j).unwrap();
            assert_abs_diff_eq!(all[j].v, direct.v, epsilon = 1e-10);
            for a in 0..5 {
                assert_abs_diff_eq!(all[j].gamma[a], direct.gamma[a], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let m = DMatrix::from_row_slice(3, 3, &[
            1.0, 1.0, 0.0, //
            1.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ]);
        let sigma = SymMatrix::new(m).unwrap();
        assert!(matches!(
            conditional_params_all(&sigma),
            Err(Error::NotPsd(_))
        ));
        assert!(matches!(conditional_params(&sigma, 2), Err(Error::NotPsd(_))));
    }

    #[test]
    fn single_resample_below_observed_gives_one_half() {
        // Observed score 9 standard deviations out: the single draw is below
        // it essentially surely, so p = (1+0)/2.
        let n = 100;
        let yty = n as f64;
        let xty = DVector::from_column_slice(&[0.9 * n as f64, 0.0]);
        let stats = SummaryStats::new(xty, yty, n).unwrap();
        let sigma = SymMatrix::identity(2);
        let p = ghost_crt_marginal(&stats, &sigma, 1, CrtStatistic::Absolute, &rng(2)).unwrap();
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn pvalues_stay_in_the_attainable_range() {
        let mut r = rng(3);
        let p_dim = 8;
        let sigma = ar1(p_dim, 0.4);
        for b in [1usize, 19, 99] {
            let yty: f64 = 50.0;
            let root = psd_sqrt(&sigma, 0.0).unwrap();
            let xty = yty.sqrt() * (root * gaussian_vector(&mut r, p_dim));
            let stats = SummaryStats::new(xty, yty, 50).unwrap();
            let pv = ghost_crt_marginal(&stats, &sigma, b, CrtStatistic::Absolute, &r).unwrap();
            let floor = 1.0 / (b as f64 + 1.0);
            assert!(pv.iter().all(|&v| v >= floor - 1e-12 && v <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn null_pvalues_are_super_uniform() {
        // Null summaries: xty ~ N(0, yty * Sigma) conditional on Y.
        let p_dim = 10;
        let sigma = ar1(p_dim, 0.5);
        let root = psd_sqrt(&sigma, 0.0).unwrap();
        let b = 19;
        let seeds = 300;
        let mut below = vec![0usize; 3];
        let thresholds = [0.1, 0.25, 0.5];
        for seed in 0..seeds {
            let mut r = rng(100 + seed);
            let yty: f64 = 200.0;
            let xty = yty.sqrt() * (&root * gaussian_vector(&mut r, p_dim));
            let stats = SummaryStats::new(xty, yty, 200).unwrap();
            let pv = ghost_crt_marginal(&stats, &sigma, b, CrtStatistic::Absolute, &r).unwrap();
            for (i, &t) in thresholds.iter().enumerate() {
                if pv[0] <= t {
                    below[i] += 1;
                }
            }
        }
        for (i, &t) in thresholds.iter().enumerate() {
            let rate = below[i] as f64 / seeds as f64;
            let se = (t * (1.0 - t) / seeds as f64).sqrt();
            assert!(rate <= t + 3.0 * se, "P(p <= {t}) = {rate}");
        }
    }

    #[test]
    fn bh_rejects_a_strong_signal_reliably() {
        let p_dim = 5;
        let sigma = SymMatrix::identity(p_dim);
        let b = 99;
        let mut hits = 0;
        let seeds = 50;
        for seed in 0..seeds {
            let mut r = rng(1_000 + seed);
            let yty: f64 = 400.0;
            let mut xty = yty.sqrt() * gaussian_vector(&mut r, p_dim);
            xty[2] = 10.0 * yty.sqrt();
            let stats = SummaryStats::new(xty, yty, 400).unwrap();
            let pv = ghost_crt_marginal(&stats, &sigma, b, CrtStatistic::Absolute, &r).unwrap();
            if benjamini_hochberg(&pv, 0.1).unwrap().contains(&2) {
                hits += 1;
            }
        }
        assert!(hits >= 45, "signal rejected in only {hits}/{seeds} seeds");
    }

    #[test]
    fn literal_statistic_is_more_liberal_than_absolute() {
        let p_dim = 6;
        let sigma = ar1(p_dim, 0.3);
        let root = psd_sqrt(&sigma, 0.0).unwrap();
        for seed in 0..20 {
            let mut r = rng(2_000 + seed);
            let yty: f64 = 100.0;
            let xty = yty.sqrt() * (&root * gaussian_vector(&mut r, p_dim));
            let stats = SummaryStats::new(xty, yty, 100).unwrap();
            let shared = rng(3_000 + seed);
            let abs = ghost_crt_marginal(&stats, &sigma, 49, CrtStatistic::Absolute, &shared)
                .unwrap();
            let lit = ghost_crt_marginal(&stats, &sigma, 49, CrtStatistic::Literal, &shared)
                .unwrap();
            for j in 0..p_dim {
                assert!(lit[j] <= abs[j] + 1e-12);
            }
        }
    }

    fn lasso_crt_fixture(
        n: usize,
        p: usize,
        signal: &[usize],
        amp: f64,
        r: &mut RngStream,
    ) -> (FullSummaryStats, SymMatrix) {
        let mut x = gaussian_matrix(r, n, p);
        for j in 0..p {
            let scale = (n as f64).sqrt() / x.column(j).norm();
            x.column_mut(j).scale_mut(scale);
        }
        let mut y = gaussian_vector(r, n);
        for &j in signal {
            y += x.column(j) * amp;
        }
        let xtx = SymMatrix::symmetrized(x.transpose() * &x);
        let xty = x.transpose() * &y;
        let sigma = SymMatrix::symmetrized(xtx.as_matrix() / n as f64);
        (
            FullSummaryStats::new(xtx, xty, y.norm_squared(), n).unwrap(),
            sigma,
        )
    }

    #[test]
    fn huge_penalty_gives_all_ones() {
        let mut r = rng(4);
        let (stats, sigma) = lasso_crt_fixture(40, 6, &[0], 3.0, &mut r);
        let pv = ghost_crt_lasso(
            &stats,
            &sigma,
            9,
            1e9,
            None,
            &r,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(pv.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn refit_budget_is_enforced() {
        let mut r = rng(5);
        let (stats, sigma) = lasso_crt_fixture(30, 5, &[], 0.0, &mut r);
        let out = ghost_crt_lasso(
            &stats,
            &sigma,
            10,
            1.0,
            Some(40),
            &r,
            &SolverConfig::default(),
        );
        assert!(matches!(out, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn null_feature_lasso_pvalues_dominate_uniform() {
        // One-sided KS: the empirical CDF must not exceed the uniform CDF by
        // more than the 1% critical deviation.
        let seeds = 200;
        let b = 19;
        let mut pvals = Vec::with_capacity(seeds);
        for seed in 0..seeds {
            let mut r = rng(5_000 + seed as u64);
            let (stats, sigma) = lasso_crt_fixture(60, 10, &[0, 1, 2], 2.0, &mut r);
            let lambda = stats.xty.amax() / 20.0;
            let pv = ghost_crt_lasso(&stats, &sigma, b, lambda, None, &r, &SolverConfig::default())
                .unwrap();
            // Feature 7 is null by construction.
            pvals.push(pv[7]);
        }
        pvals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut worst = 0.0f64;
        for (i, &pv) in pvals.iter().enumerate() {
            let emp = (i + 1) as f64 / seeds as f64;
            worst = worst.max(emp - pv);
        }
        let critical = ((100.0f64).ln() / (2.0 * seeds as f64)).sqrt();
        assert!(worst <= critical, "one-sided KS {worst} > {critical}");
    }

    #[test]
    fn signal_features_get_smaller_lasso_pvalues_than_nulls() {
        let mut signal_mean = 0.0;
        let mut null_mean = 0.0;
        let seeds = 40;
        for seed in 0..seeds {
            let mut r = rng(7_000 + seed);
            let (stats, sigma) = lasso_crt_fixture(60, 8, &[0], 4.0, &mut r);
            let lambda = stats.xty.amax() / 10.0;
            let pv = ghost_crt_lasso(&stats, &sigma, 19, lambda, None, &r, &SolverConfig::default())
                .unwrap();
            signal_mean += pv[0];
            null_mean += pv[5];
        }
        signal_mean /= seeds as f64;
        null_mean /= seeds as f64;
        assert!(
            signal_mean < null_mean,
            "signal mean {signal_mean} vs null mean {null_mean}"
        );
    }
}
