use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mzm_braid::anneal::{anneal, anneal_warm};
use mzm_braid::bangbang::{optimize_bangbang, BangBangOptions};
use mzm_braid::config::{ExperimentConfig, Grid, Range};
use mzm_braid::error::{Error, Result};
use mzm_braid::experiments::{
    baseline, estimate_regimes, extrapolate, histogram, run_sweep, write_baseline_csv,
    write_regimes_csv, SweepResult,
};
use mzm_braid::io::fmt_f64;
use mzm_braid::model::NoiseStrength;
use mzm_braid::pontryagin::{
    evaluate_switching, polish_continuous, polish_switch_times, refine, verify_optimality,
    VerifyOptions,
};
use mzm_braid::propagator::{propagate, protocol_cost};
use mzm_braid::Protocol;

/// Optimal control of a noisy four-Majorana braiding gate.
#[derive(Parser, Debug)]
#[command(name = "mzm-braid", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Grid step for annealing and refinement.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// TOML experiment configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Propagate a protocol file and print its cost.
    Simulate {
        protocol: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        /// Also write the density-matrix trajectory to this CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Simulated annealing on the time grid.
    Anneal {
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long)]
        sweeps: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Extra chain started from this protocol.
        #[arg(long)]
        warm: Option<PathBuf>,
    },
    /// Six-switch-time bang-bang optimization.
    Bangbang {
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long)]
        multistarts: Option<usize>,
    },
    /// Iterate the minimum principle on a protocol.
    Refine {
        protocol: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Afterwards re-optimize switch times on exact segments (W = 0) or
        /// the interior controls by quasi-Newton descent (W > 0).
        #[arg(long)]
        polish: bool,
    },
    /// Check a protocol against the minimum principle.
    Verify {
        protocol: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps_sing: f64,
        /// Write the switching functions to this CSV.
        #[arg(long)]
        switching: Option<PathBuf>,
    },
    /// Optimize every (τ, W) on a grid.
    Sweep {
        /// Comma-separated noise strengths.
        #[arg(long, value_delimiter = ',')]
        w: Option<Vec<f64>>,
        /// Comma-separated list or start:stop:step.
        #[arg(long)]
        tau: Option<String>,
    },
    /// Critical time and end of the fast descent for each W of a sweep.
    Regimes {
        sweep: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Cost of the linear ramp protocol.
    Baseline {
        #[arg(long, value_delimiter = ',')]
        w: Option<Vec<f64>>,
        #[arg(long)]
        tau: Option<String>,
    },
    /// Cost distribution of uniformly random protocols.
    Histogram {
        #[arg(long)]
        tau: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Polynomial fit of C_min in 1/τ with a bootstrap intercept error.
    Extrapolate {
        sweep: PathBuf,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        tau_min: Option<f64>,
        #[arg(long)]
        tau_max: Option<f64>,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        bootstrap: Option<usize>,
    },
}

fn parse_grid(s: &str) -> Result<Grid> {
    let bad = |e: String| Error::Domain(format!("grid `{s}`: {e}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => Ok(Grid::Range(Range {
            start: num(start)?,
            stop: num(stop)?,
            step: num(step)?,
        })),
        [_] => Ok(Grid::List(s.split(',').map(num).collect::<Result<_>>()?)),
        _ => Err(bad("expected a comma list or start:stop:step".into())),
    }
}

fn noise(w: f64) -> Result<NoiseStrength> {
    NoiseStrength::new(w)
}

fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_globals(g.seed, g.dt);
    cfg.validate()?;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&g.out_dir)?;
    let out = &g.out_dir;

    match cli.command {
        Command::Simulate {
            protocol,
            w,
            trajectory,
            stride,
        } => {
            let p = Protocol::load(&protocol)?;
            let n = noise(w)?;
            let pair = mzm_braid::model::StatePair::default();
            let (rho, traj) = propagate(&p, n, &pair.rho0, trajectory.is_some());
            let cost = mzm_braid::cost::trace_distance(&pair.sigma, &rho);
            if let (Some(path), Some(t)) = (trajectory, traj) {
                t.write_csv(create(&path)?, stride)?;
            }
            println!("cost {}", fmt_f64(cost));
        }
        Command::Anneal {
            tau,
            w,
            sweeps,
            restarts,
            warm,
        } => {
            let mut acfg = cfg.anneal.clone();
            if let Some(s) = sweeps {
                acfg.sweeps = s;
            }
            if let Some(r) = restarts {
                acfg.restarts = r;
            }
            let n = noise(w)?;
            let result = match warm {
                Some(path) => anneal_warm(tau, n, &acfg, &Protocol::load(&path)?)?,
                None => anneal(tau, n, &acfg)?,
            };
            let stem = format!("anneal_tau{tau:.4}_w{w:.4}");
            result
                .best_protocol
                .save(&out_path(out, &format!("{stem}.json")))?;
            result.write_trace_csv(create(&out_path(out, &format!("{stem}_trace.csv")))?)?;
            println!("cost {}", fmt_f64(result.best_cost));
            println!("restart_spread {}", fmt_f64(result.spread()));
        }
        Command::Bangbang {
            tau,
            w,
            multistarts,
        } => {
            let opts = BangBangOptions {
                multistarts: multistarts.unwrap_or(cfg.pipeline.multistarts),
                seed: cfg.seed,
                ..Default::default()
            };
            let r = optimize_bangbang(tau, noise(w)?, &opts)?;
            let mut p = r.params.protocol(tau)?;
            p.metadata.insert("method".into(), "bangbang".into());
            p.metadata.insert(
                "switch_times".into(),
                serde_json::to_value(r.params.times()).expect("finite times"),
            );
            p.save(&out_path(
                out,
                &format!("bangbang_tau{tau:.4}_w{w:.4}.json"),
            ))?;
            println!("cost {}", fmt_f64(r.cost));
            println!(
                "switch_times {}",
                r.params
                    .times()
                    .iter()
                    .map(|t| fmt_f64(*t))
                    .collect::<Vec<_>>()
                    .join(",")
            );
        }
        Command::Refine {
            protocol,
            w,
            max_iters,
            lambda,
            polish,
        } => {
            let p = Protocol::load(&protocol)?;
            let n = noise(w)?;
            let mut opts = cfg.pipeline.refine_options();
            if let Some(m) = max_iters {
                opts.max_iters = m;
            }
            if let Some(l) = lambda {
                opts.lambda = l;
            }
            let (mut q, report) = refine(&p, n, &opts)?;
            let mut cost = report.final_cost;
            if polish && n.w2() == 0.0 {
                let (schedule, c) = polish_switch_times(&q, n)?;
                if c < cost {
                    let meta = q.metadata.clone();
                    q = schedule.protocol()?;
                    q.metadata = meta;
                    cost = protocol_cost(&q, n);
                }
            } else if polish {
                (q, cost) = polish_continuous(&q, n, 8)?;
            }
            let stem = protocol
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("protocol");
            q.save(&out_path(out, &format!("{stem}_refined.json")))?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            fs::write(out_path(out, &format!("{stem}_refine_report.json")), json)?;
            println!("initial_cost {}", fmt_f64(report.initial_cost));
            println!("cost {}", fmt_f64(cost));
            println!("iterations {}", report.iterations);
            println!("stop {:?}", report.stop);
            println!("sign_violations {}", report.sign_violations());
            if report.failed() {
                return Err(Error::Numerical(
                    "refinement step weight underflowed; best-so-far protocol written".into(),
                ));
            }
        }
        Command::Verify {
            protocol,
            w,
            eps_sing,
            switching,
        } => {
            let p = Protocol::load(&protocol)?;
            let n = noise(w)?;
            if let Some(path) = switching {
                evaluate_switching(&p, n)?.write_csv(create(&path)?)?;
            }
            let report = verify_optimality(
                &p,
                n,
                &VerifyOptions {
                    eps_sing,
                    ..Default::default()
                },
            )?;
            println!("cost {}", fmt_f64(report.final_cost));
            println!("checked {}", report.checked);
            println!("sign_violations {}", report.sign_violations());
            println!(
                "hamiltonian_deviation {}",
                fmt_f64(report.hamiltonian_deviation)
            );
            println!(
                "bang_fraction {}",
                fmt_f64(mzm_braid::pontryagin::bang_fraction(&p, 1e-6))
            );
        }
        Command::Sweep { w, tau } => {
            let ws = w.unwrap_or(cfg.sweep.w.clone());
            let taus = match tau {
                Some(s) => parse_grid(&s)?.values()?,
                None => cfg.sweep.tau.values()?,
            };
            let dir = out_path(out, "protocols");
            fs::create_dir_all(&dir)?;
            let (mut result, _) = run_sweep(&ws, &taus, &cfg.pipeline, &cfg.anneal, Some(&dir))?;
            for r in &mut result.rows {
                if !r.protocol_file.is_empty() {
                    r.protocol_file = format!("protocols/{}", r.protocol_file);
                }
            }
            result.save(&out_path(out, "sweep.csv"))?;
            let failed = result.rows.iter().filter(|r| !r.succeeded()).count();
            println!("points {}", result.rows.len());
            println!("failed {failed}");
        }
        Command::Regimes { sweep, delta } => {
            let s = SweepResult::load(&sweep)?;
            let delta = delta.unwrap_or(cfg.regimes.delta);
            let regimes = s
                .ws()
                .into_iter()
                .map(|w| estimate_regimes(w, &s.curve(w), delta))
                .collect::<Result<Vec<_>>>()?;
            write_regimes_csv(&regimes, create(&out_path(out, "regimes.csv"))?)?;
            write_regimes_csv(&regimes, std::io::stdout())?;
        }
        Command::Baseline { w, tau } => {
            let ws = w.unwrap_or(cfg.baseline.w.clone());
            let taus = match tau {
                Some(s) => parse_grid(&s)?.values()?,
                None => cfg.baseline.tau.values()?,
            };
            let rows = baseline(&ws, &taus, cfg.dt)?;
            write_baseline_csv(&rows, create(&out_path(out, "baseline.csv"))?)?;
            write_baseline_csv(&rows, std::io::stdout())?;
        }
        Command::Histogram {
            tau,
            samples,
            w,
            bins,
        } => {
            let h = &cfg.histogram;
            let taus = match tau {
                Some(s) => parse_grid(&s)?.values()?,
                None => h.tau.values()?,
            };
            let result = histogram(
                &taus,
                samples.unwrap_or(h.samples),
                cfg.dt,
                noise(w.unwrap_or(h.w))?,
                cfg.seed,
                bins.unwrap_or(h.bins),
            )?;
            result.write_counts_csv(create(&out_path(out, "histogram_counts.csv"))?)?;
            result.write_envelope_csv(create(&out_path(out, "histogram_envelope.csv"))?)?;
            result.write_envelope_csv(std::io::stdout())?;
        }
        Command::Extrapolate {
            sweep,
            w,
            tau_min,
            tau_max,
            degree,
            bootstrap,
        } => {
            let e = &cfg.extrapolate;
            let s = SweepResult::load(&sweep)?;
            let w = w.unwrap_or(e.w);
            let (lo, hi) = (tau_min.unwrap_or(e.tau_min), tau_max.unwrap_or(e.tau_max));
            let pts: Vec<(f64, f64)> = s
                .curve(w)
                .into_iter()
                .filter(|p| p.0 >= lo && p.0 <= hi)
                .collect();
            let r = extrapolate(
                w,
                &pts,
                degree.unwrap_or(e.degree),
                bootstrap.unwrap_or(e.bootstrap),
                cfg.seed,
            )?;
            if let Some(msg) = &r.warning {
                log::warn!("{msg}");
            }
            let json = serde_json::to_string_pretty(&r).expect("result serializes");
            fs::write(
                out_path(out, &format!("extrapolation_w{w:.4}_deg{}.json", r.degree)),
                &json,
            )?;
            println!("intercept {}", fmt_f64(r.intercept));
            println!("intercept_error {}", fmt_f64(r.intercept_error));
            println!("rms_residual {}", fmt_f64(r.rms_residual));
            println!("condition_number {}", fmt_f64(r.condition_number));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) | Error::SingularGradient => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
