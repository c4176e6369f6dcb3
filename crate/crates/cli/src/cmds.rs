//! Subcommand implementations and the exit-code policy: 2 for malformed
//! input (bad files, bad flags, inconsistent dimensions), 3 for numeric
//! failures inside the selection machinery.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use ghostknock::filter::benjamini_hochberg;
use ghostknock::knockoff::{build_model, solve_s_equicorrelated, solve_s_sdp, KnockoffModel};
use ghostknock::numkit::{RngStream, SymMatrix};
use ghostknock::pipelines::{
    gk_known_cov, gk_marginal, gk_pseudolasso, KnownCovStatistic, SummaryStats, TuningRule,
};
use ghostknock::reconstruct::FullSummaryStats;
use ghostknock::sim::run_experiment;
use ghostknock::solvers::SolverConfig;
use ghostknock::{crt, meta};
use nalgebra::DVector;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{config_digest, load_simulate_plan, SimulateOverrides};
use crate::io;

pub const ARTIFACT_VERSION: u32 = 1;
pub const WORKERS_ENV: &str = "GHOSTKNOCK_WORKERS";

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn library(error: ghostknock::Error) -> Self {
        let code = if error.is_contract_violation() { 2 } else { 3 };
        Failure { code, error: anyhow::Error::new(error) }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }
}

trait LibResult<T> {
    fn lib(self) -> Result<T, Failure>;
}

impl<T> LibResult<T> for ghostknock::Result<T> {
    fn lib(self) -> Result<T, Failure> {
        self.map_err(Failure::library)
    }
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, content)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::from),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn header_block(seed: u64, digest: &str, extra: &[(&str, String)]) -> String {
    let mut block = format!(
        "# artifact_version={ARTIFACT_VERSION}\n# master_seed={seed}\n# config_digest={digest}\n"
    );
    for (k, v) in extra {
        block.push_str(&format!("# {k}={v}\n"));
    }
    block
}

fn read_sigma(path: &Path, expect_dim: Option<usize>) -> Result<SymMatrix, Failure> {
    let raw = io::read_matrix(path)?;
    io::require_symmetric(&raw, path)?;
    if let Some(p) = expect_dim {
        if raw.nrows() != p {
            return Err(anyhow!(
                "{}: covariance is {}x{} but the summary table has {p} features",
                path.display(),
                raw.nrows(),
                raw.ncols()
            )
            .into());
        }
    }
    Ok(SymMatrix::symmetrized(raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SRule {
    /// Equicorrelated construction: s = min(c * lambda_min, 1) everywhere.
    Equi,
    /// Coordinate-ascent SDP refinement, falling back to equicorrelated
    /// whenever the ascent result is infeasible or dominated.
    Sdp,
}

fn solve_s(
    rule: SRule,
    sigma: &SymMatrix,
    copies: usize,
    max_sweeps: usize,
) -> ghostknock::Result<DVector<f64>> {
    match rule {
        SRule::Equi => solve_s_equicorrelated(sigma, copies),
        SRule::Sdp => solve_s_sdp(sigma, copies, max_sweeps),
    }
}

fn build_model_for(
    rule: SRule,
    sigma: &SymMatrix,
    copies: usize,
) -> Result<KnockoffModel, Failure> {
    let s = solve_s(rule, sigma, copies, 100).lib()?;
    build_model(sigma, &s, copies).lib()
}

// ---------------------------------------------------------------- select --

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMethod {
    GkMarginal,
    GkLasso,
    GkSqrtlasso,
    GkLassomax,
    GkPseudolasso,
}

impl SelectMethod {
    fn name(self) -> &'static str {
        match self {
            SelectMethod::GkMarginal => "gk-marginal",
            SelectMethod::GkLasso => "gk-lasso",
            SelectMethod::GkSqrtlasso => "gk-sqrtlasso",
            SelectMethod::GkLassomax => "gk-lassomax",
            SelectMethod::GkPseudolasso => "gk-pseudolasso",
        }
    }

    fn needs_xtx(self) -> bool {
        matches!(
            self,
            SelectMethod::GkLasso | SelectMethod::GkSqrtlasso | SelectMethod::GkLassomax
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningName {
    LassoMin,
    PseudoSum,
    Fixed,
}

#[derive(Args)]
pub struct SelectArgs {
    /// Selection method.
    #[arg(long, value_enum)]
    pub method: SelectMethod,
    /// Feature covariance matrix (text "rows cols" or GKMX1 binary).
    #[arg(long)]
    pub sigma: PathBuf,
    /// Summary statistics TSV (feature_id, xty) with a `.meta` sidecar
    /// holding yty and n.
    #[arg(long)]
    pub sumstats: PathBuf,
    /// Empirical Gram X'X; required by gk-lasso, gk-sqrtlasso, gk-lassomax.
    #[arg(long)]
    pub xtx: Option<PathBuf>,
    /// Target false discovery rate.
    #[arg(long, default_value_t = 0.2)]
    pub q: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Knockoff copies per feature.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, value_enum, default_value_t = SRule::Equi)]
    pub s_rule: SRule,
    /// Penalty level for gk-lasso, and for gk-pseudolasso with fixed tuning.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Penalty rule for gk-pseudolasso.
    #[arg(long, value_enum, default_value_t = TuningName::LassoMin)]
    pub tuning: TuningName,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SelectPlan<'a> {
    method: &'a str,
    sigma: String,
    sumstats: String,
    xtx: Option<String>,
    q: f64,
    seed: u64,
    m: usize,
    s_rule: SRule,
    lambda: Option<f64>,
    tuning: TuningName,
}

#[derive(Serialize)]
struct SelectOutput<'a> {
    artifact_version: u32,
    master_seed: u64,
    config_digest: &'a str,
    method: &'a str,
    q: f64,
    seed: u64,
    /// +infinity (nothing selected) serializes as null.
    threshold: f64,
    selected: &'a [usize],
    #[serde(rename = "W")]
    w: &'a [f64],
}

pub fn cmd_select(args: &SelectArgs) -> Result<(), Failure> {
    let table = io::read_summary_table(&args.sumstats)?;
    let p = table.xty.len();
    let sigma = read_sigma(&args.sigma, Some(p))?;
    let model = build_model_for(args.s_rule, &sigma, args.m)?;
    let mut rng = RngStream::new(args.seed, 0);
    let solver = SolverConfig::for_selection();

    if args.method.needs_xtx() && args.xtx.is_none() {
        return Err(anyhow!("method {} requires --xtx", args.method.name()).into());
    }
    let full_stats = match &args.xtx {
        Some(path) if args.method.needs_xtx() => {
            let raw = io::read_matrix(path)?;
            io::require_symmetric(&raw, path)?;
            if raw.nrows() != p {
                return Err(anyhow!(
                    "{}: Gram is {}x{} but the summary table has {p} features",
                    path.display(),
                    raw.nrows(),
                    raw.ncols()
                )
                .into());
            }
            Some(
                FullSummaryStats::new(
                    SymMatrix::symmetrized(raw),
                    table.xty.clone(),
                    table.yty,
                    table.n,
                )
                .lib()?,
            )
        }
        _ => None,
    };

    let selection = match args.method {
        SelectMethod::GkMarginal => {
            let stats = SummaryStats::new(table.xty.clone(), table.yty, table.n).lib()?;
            gk_marginal(&stats, &model, args.q, &mut rng).lib()?
        }
        SelectMethod::GkLasso => {
            let lambda = args
                .lambda
                .ok_or_else(|| anyhow!("gk-lasso requires --lambda"))?;
            gk_known_cov(
                full_stats.as_ref().unwrap(),
                &model,
                &KnownCovStatistic::FixedLambda { lambda },
                args.q,
                &mut rng,
                &solver,
            )
            .lib()?
        }
        SelectMethod::GkSqrtlasso => gk_known_cov(
            full_stats.as_ref().unwrap(),
            &model,
            &KnownCovStatistic::sqrt_lasso_default(),
            args.q,
            &mut rng,
            &solver,
        )
        .lib()?,
        SelectMethod::GkLassomax => gk_known_cov(
            full_stats.as_ref().unwrap(),
            &model,
            &KnownCovStatistic::lasso_max_default(),
            args.q,
            &mut rng,
            &solver,
        )
        .lib()?,
        SelectMethod::GkPseudolasso => {
            let stats = SummaryStats::new(table.xty.clone(), table.yty, table.n).lib()?;
            let tuning = match args.tuning {
                TuningName::LassoMin => TuningRule::lasso_min_default(),
                TuningName::PseudoSum => TuningRule::pseudo_sum_default(),
                TuningName::Fixed => TuningRule::Fixed {
                    lambda: args
                        .lambda
                        .ok_or_else(|| anyhow!("--tuning fixed requires --lambda"))?,
                },
            };
            gk_pseudolasso(&stats, &model, &tuning, args.q, &mut rng, &solver).lib()?
        }
    };

    let plan = SelectPlan {
        method: args.method.name(),
        sigma: args.sigma.display().to_string(),
        sumstats: args.sumstats.display().to_string(),
        xtx: args.xtx.as_ref().map(|p| p.display().to_string()),
        q: args.q,
        seed: args.seed,
        m: args.m,
        s_rule: args.s_rule,
        lambda: args.lambda,
        tuning: args.tuning,
    };
    let digest = config_digest(&plan);
    let output = SelectOutput {
        artifact_version: ARTIFACT_VERSION,
        master_seed: args.seed,
        config_digest: &digest,
        method: args.method.name(),
        q: args.q,
        seed: args.seed,
        threshold: selection.threshold,
        selected: &selection.selected,
        w: &selection.w,
    };
    let json = serde_json::to_string_pretty(&output).expect("output serializes");
    emit(args.out.as_deref(), &format!("{json}\n"))
}

// -------------------------------------------------------------- simulate --

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML run configuration; flags below override file values.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated q levels.
    #[arg(long, value_delimiter = ',')]
    pub qs: Option<Vec<f64>>,
    /// Worker threads; GHOSTKNOCK_WORKERS is honored when the flag is absent.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Override the replication count of every design.
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let env_workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            anyhow!("{WORKERS_ENV}={v:?} is not a worker count")
        })?),
        Err(_) => None,
    };
    let overrides = SimulateOverrides {
        seed: args.seed,
        methods: args.methods.clone(),
        qs: args.qs.clone(),
        workers: args.workers,
        replications: args.replications,
    };
    let plan = load_simulate_plan(&args.config, &overrides, env_workers)?;
    let digest = config_digest(&plan);
    let table = run_experiment(
        &plan.designs,
        &plan.resolved_methods,
        &plan.qs,
        plan.workers,
        &plan.solver_config(),
    )
    .lib()?;
    let content = format!("{}{}", header_block(plan.seed, &digest, &[]), table.to_csv());
    emit(args.out.as_deref(), &content)
}

// ------------------------------------------------------------------- crt --

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrtKind {
    Marginal,
    Lasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrtStatName {
    Absolute,
    Literal,
}

#[derive(Args)]
pub struct CrtArgs {
    #[arg(long, value_enum, default_value_t = CrtKind::Marginal)]
    pub kind: CrtKind,
    #[arg(long)]
    pub sigma: PathBuf,
    #[arg(long)]
    pub sumstats: PathBuf,
    /// Empirical Gram X'X; required by --kind lasso.
    #[arg(long)]
    pub xtx: Option<PathBuf>,
    /// Resamples per feature.
    #[arg(long, default_value_t = 99)]
    pub b: usize,
    #[arg(long, value_enum, default_value_t = CrtStatName::Absolute)]
    pub statistic: CrtStatName,
    /// Penalty for --kind lasso.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Cap on per-feature lasso refits.
    #[arg(long)]
    pub max_refits: Option<usize>,
    /// Benjamini-Hochberg level for the reported rejection set.
    #[arg(long, default_value_t = 0.2)]
    pub q: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CrtPlan {
    kind: CrtKind,
    sigma: String,
    sumstats: String,
    xtx: Option<String>,
    b: usize,
    statistic: CrtStatName,
    lambda: Option<f64>,
    max_refits: Option<usize>,
    q: f64,
    seed: u64,
}

#[derive(Serialize)]
struct CrtOutput<'a> {
    artifact_version: u32,
    master_seed: u64,
    config_digest: &'a str,
    kind: CrtKind,
    statistic: CrtStatName,
    b: usize,
    q: f64,
    pvalues: &'a [f64],
    rejected: &'a [usize],
}

pub fn cmd_crt(args: &CrtArgs) -> Result<(), Failure> {
    let table = io::read_summary_table(&args.sumstats)?;
    let p = table.xty.len();
    let sigma = read_sigma(&args.sigma, Some(p))?;
    let rng = RngStream::new(args.seed, 0);
    let statistic = match args.statistic {
        CrtStatName::Absolute => crt::CrtStatistic::Absolute,
        CrtStatName::Literal => crt::CrtStatistic::Literal,
    };

    let pvalues = match args.kind {
        CrtKind::Marginal => {
            let stats = SummaryStats::new(table.xty.clone(), table.yty, table.n).lib()?;
            crt::ghost_crt_marginal(&stats, &sigma, args.b, statistic, &rng).lib()?
        }
        CrtKind::Lasso => {
            let xtx_path = args
                .xtx
                .as_ref()
                .ok_or_else(|| anyhow!("--kind lasso requires --xtx"))?;
            let lambda = args
                .lambda
                .ok_or_else(|| anyhow!("--kind lasso requires --lambda"))?;
            let raw = io::read_matrix(xtx_path)?;
            io::require_symmetric(&raw, xtx_path)?;
            let stats = FullSummaryStats::new(
                SymMatrix::symmetrized(raw),
                table.xty.clone(),
                table.yty,
                table.n,
            )
            .lib()?;
            crt::ghost_crt_lasso(
                &stats,
                &sigma,
                args.b,
                lambda,
                args.max_refits,
                &rng,
                &SolverConfig::for_selection(),
            )
            .lib()?
        }
    };
    let rejected = benjamini_hochberg(&pvalues, args.q).lib()?;

    let plan = CrtPlan {
        kind: args.kind,
        sigma: args.sigma.display().to_string(),
        sumstats: args.sumstats.display().to_string(),
        xtx: args.xtx.as_ref().map(|p| p.display().to_string()),
        b: args.b,
        statistic: args.statistic,
        lambda: args.lambda,
        max_refits: args.max_refits,
        q: args.q,
        seed: args.seed,
    };
    let digest = config_digest(&plan);
    let output = CrtOutput {
        artifact_version: ARTIFACT_VERSION,
        master_seed: args.seed,
        config_digest: &digest,
        kind: args.kind,
        statistic: args.statistic,
        b: args.b,
        q: args.q,
        pvalues: &pvalues,
        rejected: &rejected,
    };
    let json = serde_json::to_string_pretty(&output).expect("output serializes");
    emit(args.out.as_deref(), &format!("{json}\n"))
}

// ------------------------------------------------------------------ meta --

#[derive(Args)]
pub struct MetaArgs {
    /// Multi-study z-score TSV (feature_id, z1, ..., zK) with a `.meta`
    /// sidecar holding the per-study sizes.
    #[arg(long)]
    pub studies: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct MetaPlan {
    studies: String,
    sizes: Vec<usize>,
    seed: u64,
}

pub fn cmd_meta(args: &MetaArgs) -> Result<(), Failure> {
    let table = io::read_study_table(&args.studies)?;
    let studies: Vec<meta::Study> = table
        .zscores
        .iter()
        .zip(&table.sizes)
        .map(|(z, &n)| meta::Study::new(z.clone(), n))
        .collect::<ghostknock::Result<_>>()
        .lib()?;
    let cor_s = meta::estimate_study_correlation(&studies).lib()?;
    let weights = meta::solve_meta_weights(&cor_s, &table.sizes).lib()?;
    let panel = meta::StudyPanel::new(studies, cor_s).lib()?;
    let zmeta = meta::meta_zscore(&panel, &weights).lib()?;

    let plan = MetaPlan {
        studies: args.studies.display().to_string(),
        sizes: table.sizes.clone(),
        seed: args.seed,
    };
    let digest = config_digest(&plan);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let weights_str: Vec<String> = weights.iter().map(|w| format!("{w:.12e}")).collect();
    let mut out = header_block(args.seed, &digest, &[("weights", weights_str.join(","))]);
    out.push_str("feature_id\tz_meta\tp_value\n");
    for (id, z) in table.feature_ids.iter().zip(&zmeta) {
        match z {
            Some(z) => {
                let p = 2.0 * (1.0 - normal.cdf(z.abs()));
                out.push_str(&format!("{id}\t{z:.12e}\t{p:.12e}\n"));
            }
            None => out.push_str(&format!("{id}\tNA\tNA\n")),
        }
    }
    emit(args.out.as_deref(), &out)
}

// --------------------------------------------------------------- s-solve --

#[derive(Args)]
pub struct SSolveArgs {
    #[arg(long)]
    pub sigma: PathBuf,
    #[arg(long, value_enum, default_value_t = SRule::Equi)]
    pub rule: SRule,
    /// Knockoff copies the construction must support.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Ascent sweep budget for --rule sdp.
    #[arg(long, default_value_t = 100)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SSolvePlan {
    sigma: String,
    rule: SRule,
    m: usize,
    max_sweeps: usize,
    seed: u64,
}

pub fn cmd_s_solve(args: &SSolveArgs) -> Result<(), Failure> {
    let sigma = read_sigma(&args.sigma, None)?;
    let s = solve_s(args.rule, &sigma, args.m, args.max_sweeps).lib()?;
    let plan = SSolvePlan {
        sigma: args.sigma.display().to_string(),
        rule: args.rule,
        m: args.m,
        max_sweeps: args.max_sweeps,
        seed: args.seed,
    };
    let digest = config_digest(&plan);
    let mut out = header_block(args.seed, &digest, &[]);
    out.push_str(&format!("{} 1\n", s.len()));
    for v in s.iter() {
        out.push_str(&format!("{v:.17e}\n"));
    }
    emit(args.out.as_deref(), &out)
}
