//! End-to-end selection methods.
//!
//! Three families, all sharing the filter machinery:
//!
//! * `gk_marginal`: marginal-score contrasts sampled directly from summary
//!   statistics, no regression.
//! * `gk_known_cov`: penalized-regression statistics on surrogate data
//!   reconstructed from the full Gram (fixed penalty, square-root lasso, or
//!   path entry values).
//! * `gk_pseudolasso`: penalized regression assembled from population
//!   covariance blocks when the empirical Gram is unavailable, with two
//!   data-driven penalty rules (`tune_lasso_min`, `tune_pseudo_sum`).
//!
//! `kf_lassocv` is the individual-level reference method for benchmarking.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{knockoff_threshold, multi_knockoff_filter, ImportanceTable, SelectionResult};
use crate::knockoff::{GroupPartition, KnockoffModel};
use crate::numkit::{gaussian_vector, PsdFactor, RngStream, SymMatrix};
use crate::reconstruct::{reconstruct_surrogate, FullSummaryStats};
use crate::solvers::{
    cd_quadratic_lasso, cv_lasso, default_ridge, geometric_grid, lasso_entry_values, sqrt_lasso,
    QuadProblem, SolverConfig,
};

/// Marginal summary statistics: cross products X'Y, the squared response
/// norm, and the sample size. Features are assumed standardized so that each
/// column of X has squared norm n; Cauchy-Schwarz then bounds |xty_j| by
/// sqrt(n * yty).
#[derive(Debug, Clone)]
pub struct SummaryStats {
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n: usize,
}

impl SummaryStats {
    pub fn new(xty: DVector<f64>, yty: f64, n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("sample size n must be >= 1"));
        }
        if !yty.is_finite() || yty < 0.0 {
            return Err(Error::invalid(format!("yty = {yty} must be >= 0")));
        }
        let bound = (n as f64 * yty).sqrt() * (1.0 + 1e-6);
        for (j, &v) in xty.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("xty[{j}] is not finite")));
            }
            if v.abs() > bound {
                return Err(Error::invalid(format!(
                    "xty[{j}] = {v} violates the Cauchy-Schwarz bound {bound:.6} for \
                     standardized features"
                )));
            }
        }
        Ok(SummaryStats { xty, yty, n })
    }

    pub fn p(&self) -> usize {
        self.xty.len()
    }
}

/// Importance statistic for the known-covariance pipeline.
#[derive(Debug, Clone)]
pub enum KnownCovStatistic {
    /// Coefficient magnitudes at a caller-supplied penalty.
    FixedLambda { lambda: f64 },
    /// Scale-free fit; the penalty is kappa times a Monte Carlo estimate of
    /// E[||A' eps||_inf / ||eps||_2] over standard-normal eps.
    SqrtLasso { kappa: f64, mc_samples: usize },
    /// Largest penalty at which each coordinate enters the path.
    LassoMax { grid_size: usize },
}

impl KnownCovStatistic {
    pub fn sqrt_lasso_default() -> Self {
        KnownCovStatistic::SqrtLasso {
            kappa: 0.3,
            mc_samples: 200,
        }
    }

    pub fn lasso_max_default() -> Self {
        KnownCovStatistic::LassoMax { grid_size: 100 }
    }
}

/// Penalty rule for the pseudo-lasso pipeline.
#[derive(Debug, Clone)]
pub enum TuningRule {
    Fixed { lambda: f64 },
    /// Expected-minimum-penalty rule: kappa * (sigma0 / n) * E||A' eps||_inf
    /// with the expectation and the noise scale estimated from the same
    /// summary statistics.
    LassoMin {
        kappa: f64,
        mc_samples: usize,
        /// Estimate sigma0 from the original block only. Cheaper, but breaks
        /// the exact swap symmetry of the penalty; off by default.
        dimension_reduced: bool,
    },
    /// Pseudo train/validation split of the summary statistics; picks the
    /// grid penalty whose solution best correlates with the validation side.
    PseudoSum { grid_size: usize, train_fraction: f64 },
}

impl TuningRule {
    pub fn lasso_min_default() -> Self {
        TuningRule::LassoMin {
            kappa: 0.6,
            mc_samples: 10,
            dimension_reduced: false,
        }
    }

    pub fn pseudo_sum_default() -> Self {
        TuningRule::PseudoSum {
            grid_size: 100,
            train_fraction: 0.8,
        }
    }
}

/// Builds a selection from per-entity importances: `original[j]` against
/// `copies_stacked[l*p + j]` for copies l = 0..M. Single-copy problems use
/// the signed contrast W = original - copy; multi-copy problems use the
/// winner/margin rule.
fn select_from_blocks(
    original: &DVector<f64>,
    copies_stacked: &DVector<f64>,
    copies: usize,
    q: f64,
) -> Result<SelectionResult> {
    let p = original.len();
    if copies_stacked.len() != copies * p {
        return Err(Error::invalid(format!(
            "knockoff importance block has length {} but expected {}",
            copies_stacked.len(),
            copies * p
        )));
    }
    if copies == 1 {
        let w: Vec<f64> = (0..p).map(|j| original[j] - copies_stacked[j]).collect();
        let (threshold, selected) = knockoff_threshold(&w, q)?;
        Ok(SelectionResult {
            selected,
            threshold,
            q,
            w,
            kappa: None,
        })
    } else {
        let values = DMatrix::from_fn(p, copies + 1, |j, l| {
            if l == 0 {
                original[j]
            } else {
                copies_stacked[(l - 1) * p + j]
            }
        });
        let table = ImportanceTable::new(copies, values)?;
        multi_knockoff_filter(&table, q)
    }
}

fn empty_selection(p: usize, q: f64) -> SelectionResult {
    SelectionResult {
        selected: Vec::new(),
        threshold: f64::INFINITY,
        q,
        w: vec![0.0; p],
        kappa: None,
    }
}

/// Marginal-score method: contrasts |xty_j| against ghost scores sampled
/// from their conditional law given the summary statistics.
pub fn gk_marginal(
    stats: &SummaryStats,
    model: &KnockoffModel,
    q: f64,
    rng: &mut RngStream,
) -> Result<SelectionResult> {
    let ghost = model.sample_ghost_zscores(&stats.xty, stats.yty, rng)?;
    let original = stats.xty.abs();
    let copies = ghost.abs();
    select_from_blocks(&original, &copies, model.copies(), q)
}

/// Penalized-regression methods when the full empirical Gram is known: the
/// surrogate data route. The surrogate is rebuilt from `stats.xtx`, while
/// `model` carries the covariance the knockoff sampler conditions on; the
/// two need not agree (the model is typically a population or reference
/// panel estimate).
pub fn gk_known_cov(
    stats: &FullSummaryStats,
    model: &KnockoffModel,
    statistic: &KnownCovStatistic,
    q: f64,
    rng: &mut RngStream,
    config: &SolverConfig,
) -> Result<SelectionResult> {
    let p = stats.p();
    if model.p() != p {
        return Err(Error::invalid(format!(
            "model dimension {} does not match xtx dimension {p}",
            model.p()
        )));
    }
    if stats.yty == 0.0 {
        return Ok(empty_selection(p, q));
    }

    let surrogate = reconstruct_surrogate(stats)?;
    let x_knock = model.sample_knockoff_matrix(&surrogate.x, rng)?;
    let dim = (model.copies() + 1) * p;
    let rows = surrogate.x.nrows();
    let mut a = DMatrix::zeros(rows, dim);
    a.view_mut((0, 0), (rows, p)).copy_from(&surrogate.x);
    a.view_mut((0, p), (rows, dim - p)).copy_from(&x_knock);
    let gram = SymMatrix::symmetrized(a.transpose() * &a);
    let aty = a.transpose() * &surrogate.y;

    let beta_abs: DVector<f64> = match statistic {
        KnownCovStatistic::FixedLambda { lambda } => {
            if !(lambda.is_finite() && *lambda > 0.0) {
                return Err(Error::invalid(format!("lambda = {lambda} must be positive")));
            }
            let problem = QuadProblem {
                c: &gram,
                d: &aty,
                lambda: *lambda,
                gamma: 0.0,
            };
            cd_quadratic_lasso(&problem, config)?.abs()
        }
        KnownCovStatistic::SqrtLasso { kappa, mc_samples } => {
            if !(*kappa > 0.0 && *kappa <= 1.0) {
                return Err(Error::invalid(format!("kappa = {kappa} must lie in (0, 1]")));
            }
            if *mc_samples < 1 {
                return Err(Error::invalid("mc_samples must be >= 1"));
            }
            let mut total = 0.0;
            for _ in 0..*mc_samples {
                let eps = gaussian_vector(rng, rows);
                let scores = a.transpose() * &eps;
                total += scores.amax() / eps.norm();
            }
            let lambda = kappa * total / *mc_samples as f64;
            let (beta, _) = sqrt_lasso(&gram, &aty, stats.yty, stats.n, lambda, 0.0, config)?;
            beta.abs()
        }
        KnownCovStatistic::LassoMax { grid_size } => {
            let top = aty.amax();
            if top == 0.0 {
                return Ok(empty_selection(p, q));
            }
            let grid = geometric_grid(top, 1000.0, (*grid_size).max(2))?;
            lasso_entry_values(&gram, &aty, &grid, 0.0, config)?
        }
    };
    let original = beta_abs.rows(0, p).into_owned();
    let copies = beta_abs.rows(p, dim - p).into_owned();
    select_from_blocks(&original, &copies, model.copies(), q)
}

/// Shared state for the pseudo-lasso pipeline: the ghost scores are drawn
/// once and reused by both the tuning rule and the final fit, preserving the
/// coupling that makes the penalty swap-invariant.
struct PseudoParts {
    gram: SymMatrix,
    d: DVector<f64>,
    gamma: f64,
    ghost: DVector<f64>,
}

fn assemble_pseudo(
    stats: &SummaryStats,
    model: &KnockoffModel,
    rng: &mut RngStream,
) -> Result<PseudoParts> {
    if model.p() != stats.p() {
        return Err(Error::invalid(format!(
            "model dimension {} does not match xty length {}",
            model.p(),
            stats.p()
        )));
    }
    let ghost = model.sample_ghost_zscores(&stats.xty, stats.yty, rng)?;
    let n = stats.n as f64;
    let p = stats.p();
    let dim = (model.copies() + 1) * p;
    let mut d = DVector::zeros(dim);
    d.rows_mut(0, p).copy_from(&(&stats.xty / n));
    d.rows_mut(p, dim - p).copy_from(&(&ghost / n));
    let gram = model.joint_gram();
    let gamma = default_ridge(&gram);
    Ok(PseudoParts { gram, d, gamma, ghost })
}

/// Noise-scale estimate from summary statistics and one realized ghost
/// draw. `dimension_reduced` drops the ghost block (and shrinks the
/// dimension constant accordingly), trading exact swap symmetry for speed.
pub fn estimate_noise_scale(
    stats: &SummaryStats,
    model: &KnockoffModel,
    ghost: &DVector<f64>,
    dimension_reduced: bool,
) -> Result<f64> {
    let p = stats.p();
    if ghost.len() != model.copies() * p {
        return Err(Error::invalid(format!(
            "ghost vector has length {} but expected {}",
            ghost.len(),
            model.copies() * p
        )));
    }
    let n = stats.n as f64;
    // The joint Gram is singular whenever the s-vector sits on the PSD
    // boundary; the assembled v is orthogonal to that null space, so the
    // pseudo-solve recovers the intended quadratic form.
    let (dim, quad) = if dimension_reduced {
        let factor = PsdFactor::new(model.sigma())?;
        let solved = factor.solve_vec(&stats.xty);
        (p as f64, stats.xty.dot(&solved))
    } else {
        let dim = (model.copies() + 1) * p;
        let mut v = DVector::zeros(dim);
        v.rows_mut(0, p).copy_from(&stats.xty);
        v.rows_mut(p, dim - p).copy_from(ghost);
        let factor = PsdFactor::new(&model.joint_gram())?;
        let solved = factor.solve_vec(&v);
        (dim as f64, v.dot(&solved))
    };
    let lead = (dim + n + 1.0) / (n * (n + 1.0)) * stats.yty;
    Ok((lead - quad / (n * (n + 1.0))).max(0.0).sqrt())
}

/// Expected-minimum-penalty rule. The expectation E||A' eps||_inf factors as
/// sqrt(n) * E||L z||_inf with L the Cholesky factor of the joint Gram; a
/// handful of draws suffices because the max concentrates.
pub fn tune_lasso_min(
    stats: &SummaryStats,
    model: &KnockoffModel,
    ghost: &DVector<f64>,
    kappa: f64,
    mc_samples: usize,
    dimension_reduced: bool,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::invalid(format!("kappa = {kappa} must lie in (0, 1]")));
    }
    if mc_samples < 1 {
        return Err(Error::invalid("mc_samples must be >= 1"));
    }
    let sigma0 = estimate_noise_scale(stats, model, ghost, dimension_reduced)?;
    let gram = model.joint_gram();
    let l = PsdFactor::new(&gram)?.sqrt_factor();
    let dim = gram.dim();
    let mut total = 0.0;
    for _ in 0..mc_samples {
        let z = gaussian_vector(rng, dim);
        total += (&l * z).amax();
    }
    let n = stats.n as f64;
    Ok(kappa * (sigma0 / n) * n.sqrt() * (total / mc_samples as f64))
}

/// Pseudo train/validation penalty rule. The grid top is the realized
/// ||training d||_inf (guaranteeing the all-zero fit there); scoring is the
/// correlation surrogate f = beta' d_v / sqrt(beta' G beta) with beta = 0
/// scored as -inf; ties keep the larger penalty.
pub fn tune_pseudo_sum(
    stats: &SummaryStats,
    model: &KnockoffModel,
    ghost: &DVector<f64>,
    grid_size: usize,
    train_fraction: f64,
    rng: &mut RngStream,
    config: &SolverConfig,
) -> Result<f64> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction = {train_fraction} must lie in (0, 1)"
        )));
    }
    if grid_size < 2 {
        return Err(Error::invalid("grid_size must be >= 2"));
    }
    let p = stats.p();
    if ghost.len() != model.copies() * p {
        return Err(Error::invalid(format!(
            "ghost vector has length {} but expected {}",
            ghost.len(),
            model.copies() * p
        )));
    }
    let n = stats.n as f64;
    let dim = (model.copies() + 1) * p;
    let mut rr = DVector::zeros(dim);
    rr.rows_mut(0, p).copy_from(&(&stats.xty / n));
    rr.rows_mut(p, dim - p).copy_from(&(ghost / n));

    let gram = model.joint_gram();
    let n_t = train_fraction * n;
    let n_v = n - n_t;
    let noise = PsdFactor::new(&gram)?.sqrt_factor() * gaussian_vector(rng, dim);
    // rr carries sampling noise with covariance roughly (yty/n) * G / n, so
    // the injected split noise needs the same response scale; without it the
    // training and validation halves coincide and the score only rewards
    // smaller penalties.
    let noise_scale = (stats.yty / n).sqrt() * (n_v / (n * n_t)).sqrt();
    let rr_t = &rr + noise_scale * noise;
    let rr_v = (n * &rr - n_t * &rr_t) / n_v;

    let top = rr_t.amax();
    if rr.amax() == 0.0 || top == 0.0 {
        // No signal in the summary statistics: every score is noise, so fall
        // back to the maximal penalty (the all-zero fit).
        return Ok(if top > 0.0 { top } else { 1.0 });
    }
    let grid = geometric_grid(top, 1000.0, grid_size)?;
    let gamma = default_ridge(&gram);
    let mut warm = DVector::zeros(dim);
    let mut best_lambda = grid[0];
    let mut best_score = f64::NEG_INFINITY;
    for &lambda in &grid {
        let problem = QuadProblem {
            c: &gram,
            d: &rr_t,
            lambda,
            gamma,
        };
        let cfg = SolverConfig {
            warm_start: Some(warm),
            ..config.clone()
        };
        let beta = cd_quadratic_lasso(&problem, &cfg)?;
        let denom2 = (gram.as_matrix() * &beta).dot(&beta);
        if denom2 > 0.0 {
            let score = beta.dot(&rr_v) / denom2.sqrt();
            if score > best_score {
                best_score = score;
                best_lambda = lambda;
            }
        }
        warm = beta;
    }
    Ok(best_lambda)
}

fn pseudo_fit(
    parts: &PseudoParts,
    stats: &SummaryStats,
    model: &KnockoffModel,
    tuning: &TuningRule,
    rng: &mut RngStream,
    config: &SolverConfig,
) -> Result<DVector<f64>> {
    let lambda = match tuning {
        TuningRule::Fixed { lambda } => {
            if !(lambda.is_finite() && *lambda >= 0.0) {
                return Err(Error::invalid(format!("lambda = {lambda} must be >= 0")));
            }
            *lambda
        }
        TuningRule::LassoMin {
            kappa,
            mc_samples,
            dimension_reduced,
        } => tune_lasso_min(
            stats,
            model,
            &parts.ghost,
            *kappa,
            *mc_samples,
            *dimension_reduced,
            rng,
        )?,
        TuningRule::PseudoSum {
            grid_size,
            train_fraction,
        } => tune_pseudo_sum(
            stats,
            model,
            &parts.ghost,
            *grid_size,
            *train_fraction,
            rng,
            config,
        )?,
    };
    let problem = QuadProblem {
        c: &parts.gram,
        d: &parts.d,
        lambda,
        gamma: parts.gamma,
    };
    cd_quadratic_lasso(&problem, config)
}

/// Penalized regression without the empirical Gram: population covariance
/// blocks stand in for A'A and the ghost scores for the knockoff cross
/// products. The ghost draw is shared between tuning and the final fit.
pub fn gk_pseudolasso(
    stats: &SummaryStats,
    model: &KnockoffModel,
    tuning: &TuningRule,
    q: f64,
    rng: &mut RngStream,
    config: &SolverConfig,
) -> Result<SelectionResult> {
    let parts = assemble_pseudo(stats, model, rng)?;
    let beta = pseudo_fit(&parts, stats, model, tuning, rng, config)?;
    let p = stats.p();
    let abs = beta.abs();
    let original = abs.rows(0, p).into_owned();
    let copies = abs.rows(p, abs.len() - p).into_owned();
    select_from_blocks(&original, &copies, model.copies(), q)
}

/// Group-level pseudo-lasso: identical fit, with importances summed within
/// groups before filtering. The winner/margin rule applies even for one
/// knockoff copy so group scores keep their aggregate form.
pub fn gk_pseudolasso_groups(
    stats: &SummaryStats,
    model: &KnockoffModel,
    partition: &GroupPartition,
    tuning: &TuningRule,
    q: f64,
    rng: &mut RngStream,
    config: &SolverConfig,
) -> Result<SelectionResult> {
    if partition.n_features() != stats.p() {
        return Err(Error::invalid(format!(
            "partition covers {} features but xty has length {}",
            partition.n_features(),
            stats.p()
        )));
    }
    let parts = assemble_pseudo(stats, model, rng)?;
    let beta = pseudo_fit(&parts, stats, model, tuning, rng, config)?;
    let table = crate::filter::group_aggregate(&beta, partition, model.copies())?;
    multi_knockoff_filter(&table, q)
}

/// Individual-level reference method: sample knockoff columns, run
/// cross-validated lasso on the augmented design, contrast the coefficient
/// magnitudes.
pub fn kf_lassocv(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &KnockoffModel,
    q: f64,
    folds: usize,
    rng: &mut RngStream,
    config: &SolverConfig,
) -> Result<SelectionResult> {
    let p = model.p();
    if x.ncols() != p {
        return Err(Error::invalid(format!(
            "X has {} columns but the model was built for p = {p}",
            x.ncols()
        )));
    }
    if y.len() != x.nrows() {
        return Err(Error::invalid(format!(
            "Y has length {} but X has {} rows",
            y.len(),
            x.nrows()
        )));
    }
    if y.amax() == 0.0 {
        return Ok(empty_selection(p, q));
    }
    let x_knock = model.sample_knockoff_matrix(x, rng)?;
    let dim = (model.copies() + 1) * p;
    let mut a = DMatrix::zeros(x.nrows(), dim);
    a.view_mut((0, 0), (x.nrows(), p)).copy_from(x);
    a.view_mut((0, p), (x.nrows(), dim - p)).copy_from(&x_knock);
    let fit = cv_lasso(&a, y, folds, None, 0.0, rng, config)?;
    let abs = fit.beta.abs();
    let original = abs.rows(0, p).into_owned();
    let copies = abs.rows(p, dim - p).into_owned();
    select_from_blocks(&original, &copies, model.copies(), q)
}
