//! Command-line front end. Data goes to `--out` or stdout, diagnostics to
//! stderr. Exit status: 0 on success, 2 for usage or configuration
//! problems, 1 when a run fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{cluster_observations, ObservationSet};
use crate::casefile::load_case;
use crate::error::Error;
use crate::harness::{cusum_trace, curve_csv, detection_curve, observation_history, run_scenario, Detector, ScenarioConfig};
use crate::powerflow::Mode;

#[derive(Debug, Parser)]
#[command(name = "mtdlab", version, about = "FDI attack and moving target defense lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write the per-trial report CSV.
    Run(ScenarioArgs),
    /// Run a scenario for each nlp in a range and write the curve CSV.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Inclusive range such as `nlp=1..16`.
        range: String,
    },
    /// Print bus, branch and meter counts of a case.
    Inspect {
        /// Bundled case name or path to a case file.
        case: String,
        #[arg(long, default_value = "dc")]
        mode: String,
    },
    /// Write the T-SNE embedding and DBSCAN labels of one trial's history.
    ClusterDemo(DemoArgs),
    /// Write the residual and CUSUM trace of one attacked trial.
    CusumDemo(DemoArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trial whose history is shown.
    #[arg(long, default_value_t = 0)]
    trial: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure with its exit status.
struct Failure {
    code: i32,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::MixedConfigs(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("mtdlab: {}", f.msg);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(args) => {
            let cfg = scenario(Some(&args.config), &args.common)?;
            let report = run_scenario(&cfg)?;
            let p = report.detection_probability.map_or("n/a".into(), |p| format!("{p:.4}"));
            eprintln!(
                "{}: detection probability {p} over {} trials, {} abstained (seed {})",
                cfg.scenario_id,
                report.trials(),
                report.abstentions,
                report.seed_fingerprint
            );
            emit(args.common.out.as_deref(), &report.to_csv())
        }
        Command::Sweep { scenario: args, range } => {
            let cfg = scenario(Some(&args.config), &args.common)?;
            let (lo, hi) = parse_range(&range)?;
            let mut reports = Vec::with_capacity(hi - lo + 1);
            for nlp in lo..=hi {
                let mut c = cfg.clone();
                c.nlp = nlp;
                let r = run_scenario(&c)?;
                eprintln!("nlp {nlp}: {:?} ({} abstained)", r.detection_probability, r.abstentions);
                reports.push(r);
            }
            emit(args.common.out.as_deref(), &curve_csv(&detection_curve(&reports)?))
        }
        Command::Inspect { case, mode } => {
            let mode: Mode = mode.parse().map_err(|e: Error| usage(e.to_string()))?;
            let c = load_case(&case).map_err(|e| usage(format!("case {case:?}: {e}")))?;
            let meters = match mode {
                Mode::Dc => c.branch_count() + c.bus_count(),
                Mode::Ac => 2 * c.branch_count() + 3 * c.bus_count(),
            };
            println!(
                "{} buses, {} branches, {meters} meters ({})",
                c.bus_count(),
                c.branch_count(),
                mode.to_string().to_uppercase()
            );
            Ok(())
        }
        Command::ClusterDemo(args) => {
            let cfg = scenario(args.config.as_deref(), &args.common)?;
            let (rows, topology) = observation_history(&cfg, args.trial)?;
            let obs = ObservationSet::from_rows(rows)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ args.trial as u64);
            let (emb, labels) = cluster_observations(&obs, &cfg.tsne_params(), &cfg.dbscan_params(), &mut rng)?;
            eprintln!("{} clusters over {} observations", labels.cluster_count, obs.len());
            let mut s = String::from("x,y,label,topology\n");
            for (i, p) in emb.points.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", p[0], p[1], labels.labels[i], topology[i]);
            }
            emit(args.common.out.as_deref(), &s)
        }
        Command::CusumDemo(args) => {
            let mut cfg = scenario(args.config.as_deref(), &args.common)?;
            cfg.detector = Some(Detector::Cusum);
            let (record, trace) = cusum_trace(&cfg, args.trial)?;
            match (&record.abstained, record.latency) {
                (Some(why), _) => eprintln!("attacker abstained: {why}"),
                (None, Some(l)) => eprintln!("alarm after {l} attacked period(s)"),
                (None, None) => eprintln!("no alarm within {} attacked period(s)", cfg.horizon()),
            }
            let mut s = String::from("period,topology,residual,statistic,limit,attacked,alarm\n");
            for p in &trace {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    p.period, p.topology, p.residual, p.statistic, p.limit, p.attacked, p.alarm
                );
            }
            emit(args.common.out.as_deref(), &s)
        }
    }
}

fn scenario(path: Option<&Path>, common: &CommonArgs) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            ScenarioConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => ScenarioConfig::default(),
    };
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_range(spec: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("expected a range like nlp=1..16, got {spec:?}"));
    let (key, r) = spec.split_once('=').ok_or_else(bad)?;
    if key.trim() != "nlp" {
        return Err(usage(format!("only nlp can be swept, got {key:?}")));
    }
    let (a, b) = r.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let lo: usize = a.trim().parse().map_err(|_| bad())?;
    let hi: usize = b.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn emit(out: Option<&Path>, data: &str) -> Result<(), Failure> {
    let res = match out {
        Some(p) => fs::write(p, data).map_err(|e| format!("{}: {e}", p.display())),
        None => std::io::stdout().write_all(data.as_bytes()).map_err(|e| e.to_string()),
    };
    res.map_err(|msg| Failure { code: 1, msg })
}
