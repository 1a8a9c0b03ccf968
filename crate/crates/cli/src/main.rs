//! `fraudsys` command-line front end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fraudsys::classifier::{cross_validate, train, DEFAULT_K};
use fraudsys::cookie::ServiceKey;
use fraudsys::hashrate::{measure_local_hashrate, profile_row};
use fraudsys::penalty::{penalty_curves_csv, PenaltyParams};
use fraudsys::service::api::{serve_stdio, serve_tcp};
use fraudsys::service::{Service, ServiceConfig, SystemClock};
use fraudsys::sim::{
    generate_synthetic, labeled_examples, payout_compare, payout_from_penalty, read_log, replay, write_log,
    SimConfig, SimReport,
};
use fraudsys::Exec;

#[derive(Parser)]
#[command(name = "fraudsys", version, about = "Computational puzzles that throttle online fraud")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic logs, replays and reports.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Measure this machine's double-SHA-256 rate and print a profile row.
    Bench {
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value = "local")]
        model_name: String,
        #[arg(long, default_value = "unknown")]
        cpu_class: String,
        /// Hash on one thread only.
        #[arg(long)]
        sequential: bool,
    },
    /// Print `(r, τ)` samples of the three score-to-penalty conversions as CSV.
    PlotPenalty {
        #[command(flatten)]
        penalty: PenaltyArgs,
        #[arg(long, default_value_t = 101)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a k-NN model on a labeled activity log.
    Train {
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = fraudsys::graph::DEFAULT_THETA)]
        theta: f64,
        #[arg(long)]
        drop_temporal: bool,
        /// Also report stratified cross-validation with this many folds.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the service over line-delimited JSON.
    Serve {
        /// TOML service config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Listen on a TCP address, e.g. 127.0.0.1:7878.
        #[arg(long, conflicts_with = "stdio")]
        addr: Option<String>,
        /// Read requests from stdin and answer on stdout.
        #[arg(long)]
        stdio: bool,
    },
    /// Print a fresh random service key as hex.
    Keygen,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Write a planted-community activity log as CSV.
    Generate {
        #[arg(long, default_value_t = 5)]
        workers: usize,
        #[arg(long, default_value_t = 20)]
        accounts: usize,
        #[arg(long, default_value_t = 50)]
        subjects: usize,
        #[arg(long, default_value_t = 500)]
        honest: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a log through the full pipeline and write a report bundle.
    Replay {
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sim: Box<SimArgs>,
    },
    /// Print the summary of a report bundle.
    Report { bundle: PathBuf },
    /// Compare fraud income under puzzles against mining with the same device.
    Payout {
        /// Report bundle to take the average fraud penalty from.
        #[arg(long, required_unless_present = "avg_hours", conflicts_with = "avg_hours")]
        report: Option<PathBuf>,
        /// Average fraud penalty in hours, instead of a report.
        #[arg(long)]
        avg_hours: Option<f64>,
        #[arg(long, default_value_t = 2.0)]
        price: f64,
        #[arg(long, default_value_t = 3.67)]
        mining: f64,
    },
}

#[derive(Args)]
struct PenaltyArgs {
    #[arg(long, default_value_t = 2.0)]
    minh: f64,
    #[arg(long, default_value_t = 300.0)]
    maxh: f64,
    #[arg(long, default_value_t = 300.0)]
    minf: f64,
    #[arg(long, default_value_t = 86_400.0)]
    maxf: f64,
    #[arg(long, default_value_t = 0.5)]
    thr: f64,
    /// Logistic growth rate.
    #[arg(long, default_value_t = 30.0)]
    growth: f64,
}

impl PenaltyArgs {
    fn params(&self) -> Result<PenaltyParams> {
        Ok(PenaltyParams::new(self.minh, self.maxh, self.minf, self.maxf, self.thr, self.growth)?)
    }
}

/// Replay parameters. Flags override values from `--config`.
#[derive(Args)]
struct SimArgs {
    /// TOML file with any `SimConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    minh: Option<f64>,
    #[arg(long)]
    maxh: Option<f64>,
    #[arg(long)]
    minf: Option<f64>,
    #[arg(long)]
    maxf: Option<f64>,
    #[arg(long)]
    thr: Option<f64>,
    #[arg(long)]
    growth: Option<f64>,
    #[arg(long)]
    shares: Option<u32>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    /// Score at or above which an activity counts as fraud in the metrics.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    honest_train: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    drop_temporal: bool,
    /// Give every account its own timeout instead of one per worker.
    #[arg(long)]
    per_account: bool,
    /// Solve puzzles for real when Δ is at most this.
    #[arg(long)]
    real_solve_max: Option<u64>,
    #[arg(long)]
    min_hashrate: Option<f64>,
    #[arg(long)]
    max_backlog_ms: Option<u64>,
    #[arg(long)]
    sequential: bool,
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => SimConfig::default(),
        };
        let p = c.penalty;
        c.penalty = PenaltyParams::new(
            self.minh.unwrap_or(p.minh()),
            self.maxh.unwrap_or(p.maxh()),
            self.minf.unwrap_or(p.minf()),
            self.maxf.unwrap_or(p.maxf()),
            self.thr.unwrap_or(p.thr()),
            self.growth.unwrap_or(p.k()),
        )?;
        if let Some(v) = self.shares {
            c.shares_required = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.theta {
            c.theta = v;
        }
        if let Some(v) = self.threshold {
            c.threshold = v;
        }
        if let Some(v) = self.honest_train {
            c.honest_train = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.min_hashrate {
            c.min_hashrate = v;
        }
        if self.real_solve_max.is_some() {
            c.real_solve_max_difficulty = self.real_solve_max;
        }
        if self.max_backlog_ms.is_some() {
            c.max_backlog_ms = self.max_backlog_ms;
        }
        c.drop_temporal |= self.drop_temporal;
        if self.per_account {
            c.cluster_workers = false;
        }
        if self.sequential {
            c.exec = Exec::Sequential;
        }
        Ok(c)
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn load_log(path: &Path) -> Result<fraudsys::sim::LoadedLog> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let log = read_log(BufReader::new(f))?;
    if log.skipped > 0 {
        log::warn!("skipped {} malformed rows in {}", log.skipped, path.display());
    }
    Ok(log)
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn run_sim(cmd: SimCmd) -> Result<()> {
    match cmd {
        SimCmd::Generate {
            workers,
            accounts,
            subjects,
            honest,
            seed,
            out,
        } => {
            if subjects == 0 || workers + honest == 0 {
                bail!("need at least one subject and one activity");
            }
            let rows = generate_synthetic(workers, accounts, subjects, honest, seed);
            let mut w = output(out.as_deref())?;
            write_log(&mut w, &rows)?;
            w.flush()?;
            log::info!("wrote {} rows", rows.len());
        }
        SimCmd::Replay { log, out, sim } => {
            let cfg = sim.config()?;
            let loaded = load_log(&log)?;
            let report = replay(&loaded, &cfg)?;
            report.write_bundle(&out)?;
            print!("{}", report.summary());
        }
        SimCmd::Report { bundle } => {
            let report = SimReport::load(&report_path(&bundle))?;
            print!("{}", report.summary());
        }
        SimCmd::Payout {
            report,
            avg_hours,
            price,
            mining,
        } => {
            let p = match (report, avg_hours) {
                (Some(r), _) => payout_compare(&SimReport::load(&report_path(&r))?, price, mining),
                (None, Some(h)) => payout_from_penalty(h, price, mining),
                (None, None) => unreachable!("clap requires one"),
            };
            println!("avg fraud penalty   {:.2} h", p.avg_penalty_hours);
            println!("activities per day  {:.3}", p.activities_per_day);
            println!("fraud payout        ${:.2}/day", p.fraud_usd_per_day);
            println!("mining payout       ${:.2}/day", p.mining_usd_per_day);
            println!("fraud pays more     {}", if p.fraud_pays { "yes" } else { "no" });
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Sim(cmd) => run_sim(cmd)?,
        Cmd::Bench {
            seconds,
            model_name,
            cpu_class,
            sequential,
        } => {
            if !(seconds > 0.0 && seconds.is_finite()) {
                bail!("--seconds must be positive");
            }
            let rate = measure_local_hashrate(Duration::from_secs_f64(seconds), exec(sequential));
            log::info!("{:.0} double hashes per second", rate.hps());
            print!("{}", profile_row(&model_name, &cpu_class, rate));
        }
        Cmd::PlotPenalty { penalty, points, out } => {
            let mut w = output(out.as_deref())?;
            w.write_all(penalty_curves_csv(&penalty.params()?, points).as_bytes())?;
            w.flush()?;
        }
        Cmd::Train {
            log,
            out,
            k,
            theta,
            drop_temporal,
            folds,
            seed,
        } => {
            let loaded = load_log(&log)?;
            let cfg = fraudsys::graph::FeatureConfig { theta, drop_temporal };
            let examples = labeled_examples(&loaded.rows, &cfg);
            if let Some(folds) = folds {
                let m = cross_validate(&examples, folds, k, seed, Exec::Parallel)?;
                println!(
                    "{folds}-fold cv: accuracy {:.4}, FPR {:.4}, FNR {:.4}",
                    m.accuracy, m.fpr, m.fnr
                );
            }
            let model = train(&examples, k)?;
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            model.save(BufWriter::new(f))?;
            println!("trained on {} examples, k = {k}, saved to {}", model.len(), out.display());
        }
        Cmd::Serve { config, addr, stdio } => {
            let cfg = match &config {
                Some(p) => ServiceConfig::load(p)?,
                None => ServiceConfig::default(),
            };
            let svc = Service::open(cfg, Arc::new(SystemClock))?;
            if stdio {
                serve_stdio(&svc)?;
            } else {
                let addr = addr.unwrap_or_else(|| "127.0.0.1:7878".into());
                let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                log::info!("listening on {}", listener.local_addr()?);
                serve_tcp(Arc::new(svc), listener)?;
            }
        }
        Cmd::Keygen => println!("{}", ServiceKey::generate().to_hex()),
    }
    Ok(())
}
