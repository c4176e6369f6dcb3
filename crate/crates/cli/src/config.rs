//! Simulation run configuration: a TOML file mirrored into the harness
//! types, with command-line flags taking precedence over file values.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ghostknock::sim::{Method, SigmaSpec, SimDesign};
use ghostknock::solvers::SolverConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub seed: u64,
    pub methods: Vec<String>,
    pub qs: Vec<f64>,
    pub workers: Option<usize>,
    pub replications: Option<usize>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(rename = "design")]
    pub designs: Vec<DesignSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub n: usize,
    pub p: usize,
    pub sigma: String,
    pub rho: Option<f64>,
    pub k_nonnull: usize,
    pub amplitude: f64,
    pub replications: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub tol: Option<f64>,
    pub kkt_rtol: Option<f64>,
    pub max_sweeps: Option<usize>,
}

/// Fully merged simulate parameters; also the digest payload.
#[derive(Debug, Serialize)]
pub struct SimulatePlan {
    pub seed: u64,
    pub methods: Vec<&'static str>,
    pub qs: Vec<f64>,
    /// Worker count never changes results, so it stays out of the digest.
    #[serde(skip)]
    pub workers: Option<usize>,
    pub tol: f64,
    pub kkt_rtol: f64,
    pub max_sweeps: usize,
    /// (label, replications) per design; the label alone omits the
    /// replication count, which does change results.
    pub design_cells: Vec<(String, usize)>,
    #[serde(skip)]
    pub designs: Vec<SimDesign>,
    #[serde(skip)]
    pub resolved_methods: Vec<Method>,
}

pub struct SimulateOverrides {
    pub seed: Option<u64>,
    pub methods: Option<Vec<String>>,
    pub qs: Option<Vec<f64>>,
    pub workers: Option<usize>,
    pub replications: Option<usize>,
}

pub fn load_simulate_plan(
    path: &Path,
    overrides: &SimulateOverrides,
    env_workers: Option<usize>,
) -> Result<SimulatePlan> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let file: SimulateFile =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;

    let seed = overrides.seed.unwrap_or(file.seed);
    let method_names = overrides.methods.clone().unwrap_or(file.methods);
    let resolved_methods: Vec<Method> = method_names
        .iter()
        .map(|name| {
            Method::from_name(name).ok_or_else(|| {
                anyhow::anyhow!(
                    "unknown method {name:?}; expected one of {}",
                    Method::ALL.map(|m| m.name()).join(", ")
                )
            })
        })
        .collect::<Result<_>>()?;
    if resolved_methods.is_empty() {
        bail!("config {} lists no methods", path.display());
    }
    let qs = overrides.qs.clone().unwrap_or(file.qs);
    if qs.is_empty() {
        bail!("config {} lists no q levels", path.display());
    }
    // Worker precedence: flag, then environment, then config file.
    let workers = overrides.workers.or(env_workers).or(file.workers);
    let replications = overrides.replications.or(file.replications);

    if file.designs.is_empty() {
        bail!("config {} lists no [[design]] sections", path.display());
    }
    let mut designs = Vec::with_capacity(file.designs.len());
    for (i, d) in file.designs.iter().enumerate() {
        let sigma = match (d.sigma.as_str(), d.rho) {
            ("identity", None) => SigmaSpec::Identity,
            ("identity", Some(_)) => {
                bail!("design {i}: rho is only valid with sigma = \"ar1\"")
            }
            ("ar1", Some(rho)) => SigmaSpec::Ar1 { rho },
            ("ar1", None) => bail!("design {i}: sigma = \"ar1\" requires rho"),
            (other, _) => bail!("design {i}: unknown sigma {other:?} (identity or ar1)"),
        };
        let design = SimDesign {
            n: d.n,
            p: d.p,
            sigma,
            k_nonnull: d.k_nonnull,
            amplitude: d.amplitude,
            replications: replications.unwrap_or(d.replications),
            seed,
        };
        design
            .validate()
            .with_context(|| format!("design {i} in {}", path.display()))?;
        designs.push(design);
    }

    let solver_defaults = SolverConfig::for_selection();
    Ok(SimulatePlan {
        seed,
        methods: resolved_methods.iter().map(|m| m.name()).collect(),
        qs,
        workers,
        tol: file.solver.tol.unwrap_or(solver_defaults.tol),
        kkt_rtol: file.solver.kkt_rtol.unwrap_or(solver_defaults.kkt_rtol),
        max_sweeps: file.solver.max_sweeps.unwrap_or(solver_defaults.max_sweeps),
        design_cells: designs.iter().map(|d| (d.label(), d.replications)).collect(),
        designs,
        resolved_methods,
    })
}

impl SimulatePlan {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            kkt_rtol: self.kkt_rtol,
            max_sweeps: self.max_sweeps,
            ..SolverConfig::default()
        }
    }
}

/// Hex SHA-256 of the serialized effective parameters; stamped on every
/// output so a result can be traced to the exact configuration that made it.
pub fn config_digest<T: Serialize>(effective: &T) -> String {
    let canonical = serde_json::to_string(effective).expect("config types serialize");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("sim.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    const BASE: &str = r#"
seed = 7
methods = ["gk-marginal"]
qs = [0.2]

[[design]]
n = 50
p = 10
sigma = "ar1"
rho = 0.4
k_nonnull = 2
amplitude = 4.0
replications = 3
"#;

    #[test]
    fn parses_and_merges_overrides() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), BASE);
        let plan = load_simulate_plan(
            &path,
            &SimulateOverrides {
                seed: Some(9),
                methods: None,
                qs: None,
                workers: None,
                replications: Some(5),
            },
            Some(4),
        )
        .unwrap();
        assert_eq!(plan.seed, 9);
        assert_eq!(plan.designs[0].seed, 9);
        assert_eq!(plan.designs[0].replications, 5);
        assert_eq!(plan.workers, Some(4));
        assert_eq!(plan.kkt_rtol, SolverConfig::for_selection().kkt_rtol);
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), &format!("{BASE}\ntypo_key = 1\n"));
        let err = format!(
            "{:#}",
            load_simulate_plan(
                &path,
                &SimulateOverrides {
                    seed: None,
                    methods: None,
                    qs: None,
                    workers: None,
                    replications: None,
                },
                None,
            )
            .unwrap_err()
        );
        assert!(err.contains("typo_key"), "{err}");
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let dir = tempdir().unwrap();
        let path = write_config(dir.path(), BASE);
        let no_overrides = SimulateOverrides {
            seed: None,
            methods: None,
            qs: None,
            workers: None,
            replications: None,
        };
        let a = load_simulate_plan(&path, &no_overrides, None).unwrap();
        let b = load_simulate_plan(&path, &no_overrides, None).unwrap();
        assert_eq!(config_digest(&a), config_digest(&b));
        let c = load_simulate_plan(
            &path,
            &SimulateOverrides { seed: Some(8), ..no_overrides },
            None,
        )
        .unwrap();
        assert_ne!(config_digest(&a), config_digest(&c));
    }
}
