use ghostknock::sim::*;
use ghostknock::solvers::SolverConfig;
use std::time::Instant;

fn main() {
    let cfg = SolverConfig { tol: 1e-6, kkt_rtol: 3e-4, ..SolverConfig::default() };
    let designs: Vec<SimDesign> = [0.0_f64, 0.4, 0.8]
        .iter()
        .map(|&rho| SimDesign {
            n: 600, p: 200,
            sigma: if rho == 0.0 { SigmaSpec::Identity } else { SigmaSpec::Ar1 { rho } },
            k_nonnull: 30, amplitude: 4.0, replications: 20, seed: 1,
        })
        .collect();
    let t = Instant::now();
    let table = run_experiment(&designs, &Method::ALL, &[0.2], Some(1), &cfg).unwrap();
    for row in &table.rows {
        println!(
            "{:<28} {:<22} power {:.3} (se {:.3})  fdr {:.3}  fail {}  {:.1}s",
            row.design, row.method, row.mean_power, row.se_power, row.mean_fdp, row.failures,
            row.wall_secs
        );
    }
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
}
