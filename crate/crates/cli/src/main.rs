use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sampled_cbf::sim::{self, AuditReport, RunReport, Scenario, Verdict};

/// Closed-loop safety scenarios on a simulated mini-Segway.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its trace and report.
    Run {
        scenario: PathBuf,
        /// Output directory for trace.csv and report.toml.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario's run.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the scenario once per control rate.
    Sweep {
        scenario: PathBuf,
        /// Comma-separated rates in Hz.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        rates: Vec<f64>,
        /// Writes one trace per rate here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the tube / reduced-set audits (or the filter feasibility check) only.
    Audit { scenario: PathBuf },
}

const EXIT_UNSAFE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(all_safe) => ExitCode::from(if all_safe { 0 } else { EXIT_UNSAFE }),
        // a failed reduced-set audit is a safety verdict, not a configuration problem
        Err(e @ sampled_cbf::Error::AuditFailed { .. }) => {
            eprintln!("audit failed: {e}");
            ExitCode::from(EXIT_UNSAFE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn load(path: &Path) -> sampled_cbf::Result<Scenario> {
    Scenario::load(path).map_err(|e| sampled_cbf::Error::Config(format!("{}: {e}", path.display())))
}

fn print_report(r: &RunReport) {
    println!(
        "{:<13} {:>7.1} Hz  verdict {:<10} min_h {:>+.6e}  violations {:>5}  infeasible {:>4} (hard-row {})  max|θ| {:.4}  max|u| {:.3}",
        r.controller, r.rate_hz, r.verdict, r.min_h, r.violations, r.infeasibilities, r.hard_row_infeasibilities, r.max_abs_theta, r.max_abs_u
    );
    if let Some(f) = &r.failure {
        println!("  stopped early: {f}");
    }
    for n in r.notes.iter().take(3) {
        println!("  note: {n}");
    }
}

fn write_outputs(r: &RunReport, dir: &Path, stem: &str) -> sampled_cbf::Result<()> {
    std::fs::create_dir_all(dir)?;
    r.write_trace(&dir.join(format!("{stem}.csv")))?;
    std::fs::write(dir.join(format!("{stem}.toml")), r.summary_toml()?)?;
    Ok(())
}

fn run(cli: Cli) -> sampled_cbf::Result<bool> {
    match cli.cmd {
        Cmd::Run { scenario, out, seed } => {
            let mut sc = load(&scenario)?;
            if let Some(s) = seed {
                sc.run.seed = s;
            }
            let rep = sim::run_scenario(&sc)?;
            print_report(&rep);
            if let Some(dir) = out {
                write_outputs(&rep, &dir, "trace")?;
            }
            Ok(rep.verdict == Verdict::Safe)
        }
        Cmd::Sweep { scenario, rates, out } => {
            let sc = load(&scenario)?;
            let sw = sim::sweep_rates(&sc, &rates)?;
            for r in &sw.reports {
                print_report(r);
                if let Some(dir) = &out {
                    write_outputs(r, dir, &format!("trace_{}hz", r.rate_hz))?;
                }
            }
            if !sw.reports.is_empty() {
                match sw.min_safe_rate {
                    Some(r) => println!("minimum safe rate: {r} Hz"),
                    None => println!("minimum safe rate: none of the swept rates"),
                }
                if !sw.monotone {
                    println!("warning: verdicts are not monotone in the rate");
                }
            }
            Ok(sw.reports.iter().all(|r| r.verdict == Verdict::Safe))
        }
        Cmd::Audit { scenario } => {
            let sc = load(&scenario)?;
            match sim::audit(&sc)? {
                AuditReport::Tube { k_aux, omega, g, u_tight, containment_margin, viability_margin, samples } => {
                    println!("K_aux        {k_aux:?}");
                    println!("Omega        ±{omega:?}");
                    println!("G            [{:.6}, {:.6}]", g.0, g.1);
                    println!("U'           [{:.6}, {:.6}]", u_tight.0, u_tight.1);
                    println!("containment  passed (margin {containment_margin:.3e})");
                    println!("viability    passed (margin {viability_margin:.3e})");
                    println!("samples      {samples}");
                    Ok(true)
                }
                AuditReport::Dbc(rows) => {
                    let mut ok = true;
                    for r in rows {
                        println!("{:>7.1} Hz: {}/{} boundary-adjacent states infeasible", r.rate_hz, r.infeasible, r.samples);
                        ok &= r.infeasible == 0;
                    }
                    Ok(ok)
                }
                AuditReport::None => {
                    println!("nothing to audit for controller {}", sc.controller.kind.name());
                    Ok(true)
                }
            }
        }
    }
}
