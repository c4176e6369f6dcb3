//! Synthetic experiments: generate Gaussian designs, run each selection
//! method over many replicates, and tabulate power and false discovery
//! proportion.
//!
//! Reproducibility contract: every replicate draws from a stream derived
//! from (design seed, design label, method name, replicate index), so
//! results are byte-identical across worker counts and unchanged when other
//! methods are added to a run.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::knockoff::{build_model, solve_s_equicorrelated, KnockoffModel};
use crate::numkit::{RngStream, SymMatrix};
use crate::pipelines::{
    gk_known_cov, gk_marginal, gk_pseudolasso, kf_lassocv, KnownCovStatistic, SummaryStats,
    TuningRule,
};
use crate::reconstruct::FullSummaryStats;
use crate::solvers::SolverConfig;

/// Feature covariance for generated designs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSpec {
    Identity,
    Ar1 { rho: f64 },
}

impl SigmaSpec {
    pub fn matrix(&self, p: usize) -> SymMatrix {
        match *self {
            SigmaSpec::Identity => SymMatrix::identity(p),
            SigmaSpec::Ar1 { rho } => SymMatrix::symmetrized(DMatrix::from_fn(p, p, |i, j| {
                rho.powi((i as i32 - j as i32).abs())
            })),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SigmaSpec::Identity => "identity".into(),
            SigmaSpec::Ar1 { rho } => format!("ar1_{rho}"),
        }
    }
}

/// One experimental design: dimensions, covariance, signal layout, noise
/// per the linear model Y = X beta + sqrt(n) eps.
#[derive(Debug, Clone)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub sigma: SigmaSpec,
    pub k_nonnull: usize,
    pub amplitude: f64,
    pub replications: usize,
    pub seed: u64,
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(Error::invalid(format!(
                "design needs n >= 2 and p >= 1, got n = {}, p = {}",
                self.n, self.p
            )));
        }
        if self.k_nonnull > self.p {
            return Err(Error::invalid(format!(
                "k_nonnull = {} exceeds p = {}",
                self.k_nonnull, self.p
            )));
        }
        if let SigmaSpec::Ar1 { rho } = self.sigma {
            if !(0.0..=0.95).contains(&rho) {
                return Err(Error::invalid(format!(
                    "AR(1) correlation {rho} outside [0, 0.95]"
                )));
            }
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::invalid(format!(
                "amplitude {} must be finite and nonnegative",
                self.amplitude
            )));
        }
        if self.replications == 0 {
            return Err(Error::invalid("need at least one replication"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "n{}_p{}_{}_k{}_a{}",
            self.n,
            self.p,
            self.sigma.label(),
            self.k_nonnull,
            self.amplitude
        )
    }
}

/// The six selection methods the harness compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GkMarginal,
    GkSqrtLasso,
    GkLassoMax,
    GkPseudoLassoMin,
    GkPseudoLassoSum,
    KfLassoCv,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::GkMarginal,
        Method::GkSqrtLasso,
        Method::GkLassoMax,
        Method::GkPseudoLassoMin,
        Method::GkPseudoLassoSum,
        Method::KfLassoCv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::GkMarginal => "gk-marginal",
            Method::GkSqrtLasso => "gk-sqrtlasso",
            Method::GkLassoMax => "gk-lassomax",
            Method::GkPseudoLassoMin => "gk-pseudolasso-min",
            Method::GkPseudoLassoSum => "gk-pseudolasso-sum",
            Method::KfLassoCv => "kf-lassocv",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == name)
    }
}

/// Draw one dataset: X rows i.i.d. N(0, Sigma), beta with `k_nonnull`
/// entries at +/- amplitude on a uniform support, Y = X beta + sqrt(n) eps.
/// Draw order (X row-major, then support, then signs, then eps) is fixed.
pub fn generate_dataset(
    design: &SimDesign,
    rng: &mut RngStream,
) -> Result<(DMatrix<f64>, DVector<f64>, Vec<usize>)> {
    design.validate()?;
    let (n, p) = (design.n, design.p);
    let mut x = DMatrix::zeros(n, p);
    match design.sigma {
        SigmaSpec::Identity => {
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = rng.standard_normal();
                }
            }
        }
        SigmaSpec::Ar1 { rho } => {
            // Markov recursion along each row: exact AR(1) covariance.
            let scale = (1.0 - rho * rho).sqrt();
            for i in 0..n {
                let mut prev = rng.standard_normal();
                x[(i, 0)] = prev;
                for j in 1..p {
                    prev = rho * prev + scale * rng.standard_normal();
                    x[(i, j)] = prev;
                }
            }
        }
    }
    let mut support = rng.sample_indices(p, design.k_nonnull);
    support.sort_unstable();
    let mut beta = DVector::zeros(p);
    for &j in &support {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        beta[j] = sign * design.amplitude;
    }
    let noise_scale = (n as f64).sqrt();
    let mut y = &x * beta;
    for i in 0..n {
        y[i] += noise_scale * rng.standard_normal();
    }
    Ok((x, y, support))
}

/// Power and false discovery proportion of a selection against the true
/// support. Empty selections count FDP as 0; empty support counts power 0.
pub fn summarize(selected: &[usize], support: &[usize]) -> (f64, f64) {
    let true_hits = selected.iter().filter(|j| support.contains(j)).count();
    let false_hits = selected.len() - true_hits;
    let power = if support.is_empty() {
        0.0
    } else {
        true_hits as f64 / support.len() as f64
    };
    let fdp = false_hits as f64 / (selected.len().max(1)) as f64;
    (power, fdp)
}

#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub power: f64,
    pub fdp: f64,
    pub n_selected: usize,
    pub error: Option<String>,
}

/// Aggregated results for one (design, method, q) cell, with the raw
/// per-replicate outcomes kept for audit.
#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub design: String,
    pub method: &'static str,
    pub q: f64,
    pub replications: usize,
    pub failures: usize,
    pub mean_power: f64,
    pub se_power: f64,
    pub mean_fdp: f64,
    pub se_fdp: f64,
    pub wall_secs: f64,
    pub outcomes: Vec<ReplicateOutcome>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    /// CSV of the aggregate columns. Wall time is deliberately excluded so
    /// the emitted table is byte-identical across machines and worker
    /// counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "design,method,q,replications,failures,mean_power,se_power,mean_fdp,se_fdp\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.design,
                r.method,
                r.q,
                r.replications,
                r.failures,
                r.mean_power,
                r.se_power,
                r.mean_fdp,
                r.se_fdp
            )
            .expect("writing to a String cannot fail");
        }
        out
    }
}

fn standardize_columns(x: &mut DMatrix<f64>) -> Result<()> {
    let n = x.nrows() as f64;
    for j in 0..x.ncols() {
        let norm = x.column(j).norm();
        if norm <= 0.0 {
            return Err(Error::DegenerateFit(format!("design column {j} is zero")));
        }
        let s = n.sqrt() / norm;
        x.column_mut(j).scale_mut(s);
    }
    Ok(())
}

fn replicate_stream(design: &SimDesign, method: Method, replicate: usize) -> RngStream {
    RngStream::new(design.seed, 0).substream(
        &format!("sim/{}/{}", design.label(), method.name()),
        replicate as u64,
    )
}

fn run_replicate(
    design: &SimDesign,
    method: Method,
    q: f64,
    pop_model: &KnockoffModel,
    replicate: usize,
    config: &SolverConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = replicate_stream(design, method, replicate);
    let (mut x, y, support) = generate_dataset(design, &mut rng)?;
    standardize_columns(&mut x)?;
    let xty = x.transpose() * &y;
    let yty = y.norm_squared();
    let selection = match method {
        Method::GkMarginal => {
            let stats = SummaryStats::new(xty, yty, design.n)?;
            gk_marginal(&stats, pop_model, q, &mut rng)?
        }
        Method::GkSqrtLasso | Method::GkLassoMax => {
            // The surrogate route keeps the realized Gram in the statistics
            // while the knockoff sampler conditions on the design covariance.
            let xtx = SymMatrix::symmetrized(x.transpose() * &x);
            let stats = FullSummaryStats::new(xtx, xty, yty, design.n)?;
            let statistic = if method == Method::GkSqrtLasso {
                KnownCovStatistic::sqrt_lasso_default()
            } else {
                KnownCovStatistic::lasso_max_default()
            };
            gk_known_cov(&stats, pop_model, &statistic, q, &mut rng, config)?
        }
        Method::GkPseudoLassoMin => {
            let stats = SummaryStats::new(xty, yty, design.n)?;
            gk_pseudolasso(&stats, pop_model, &TuningRule::lasso_min_default(), q, &mut rng, config)?
        }
        Method::GkPseudoLassoSum => {
            let stats = SummaryStats::new(xty, yty, design.n)?;
            gk_pseudolasso(&stats, pop_model, &TuningRule::pseudo_sum_default(), q, &mut rng, config)?
        }
        Method::KfLassoCv => {
            let folds = 10.min(design.n);
            kf_lassocv(&x, &y, pop_model, q, folds, &mut rng, config)?
        }
    };
    Ok((selection.selected, support))
}

/// Run every (design, method, q) cell for its design's replication count.
/// Failures inside a replicate are recorded in the row rather than aborting
/// the run; model-construction failures that precede replication (bad
/// design, infeasible population covariance) abort.
pub fn run_experiment(
    designs: &[SimDesign],
    methods: &[Method],
    qs: &[f64],
    workers: Option<usize>,
    config: &SolverConfig,
) -> Result<ExperimentTable> {
    if designs.is_empty() || methods.is_empty() || qs.is_empty() {
        return Err(Error::invalid("need at least one design, method, and q"));
    }
    for &q in qs {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::invalid(format!("q = {q} outside (0, 1)")));
        }
    }
    let mut table = ExperimentTable::default();
    for design in designs {
        design.validate()?;
        let sigma_pop = design.sigma.matrix(design.p);
        let s_pop = solve_s_equicorrelated(&sigma_pop, 1)?;
        let pop_model = build_model(&sigma_pop, &s_pop, 1)?;
        for &method in methods {
            for &q in qs {
                let started = Instant::now();
                let outcomes: Vec<ReplicateOutcome> =
                    crate::par::run_indexed(design.replications, workers, |rep| {
                        match run_replicate(design, method, q, &pop_model, rep, config) {
                            Ok((selected, support)) => {
                                let (power, fdp) = summarize(&selected, &support);
                                ReplicateOutcome {
                                    replicate: rep,
                                    power,
                                    fdp,
                                    n_selected: selected.len(),
                                    error: None,
                                }
                            }
                            Err(e) => ReplicateOutcome {
                                replicate: rep,
                                power: f64::NAN,
                                fdp: f64::NAN,
                                n_selected: 0,
                                error: Some(e.to_string()),
                            },
                        }
                    });
                let ok: Vec<&ReplicateOutcome> =
                    outcomes.iter().filter(|o| o.error.is_none()).collect();
                let failures = outcomes.len() - ok.len();
                let (mean_power, se_power) = mean_se(ok.iter().map(|o| o.power));
                let (mean_fdp, se_fdp) = mean_se(ok.iter().map(|o| o.fdp));
                table.rows.push(ExperimentRow {
                    design: design.label(),
                    method: method.name(),
                    q,
                    replications: design.replications,
                    failures,
                    mean_power,
                    se_power,
                    mean_fdp,
                    se_fdp,
                    wall_secs: started.elapsed().as_secs_f64(),
                    outcomes,
                });
            }
        }
    }
    Ok(table)
}

/// Sample mean and standard error (sample SD over sqrt of count). Empty
/// input gives (0, 0); a single value gives SE 0.
pub fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let vals: Vec<f64> = values.collect();
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let r = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / r;
    if vals.len() == 1 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}
