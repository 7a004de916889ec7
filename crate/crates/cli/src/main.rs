//! `foodchain` command-line front end.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foodchain::convergence::{self, RateFit};
use foodchain::hormander::{self, HormanderReport};
use foodchain::lyapunov::{self, CertInputs, ScanPlan};
use foodchain::sim::{self, EnsembleRequest, HistogramSpec, SimConfig};
use foodchain::{persistence, ChainSpec, Regime, State};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use manifest::RunManifest;

const SEED_ENV: &str = "FOODCHAIN_SEED";

const EXIT_USAGE: u8 = 2;
const EXIT_FAILURE: u8 = 1;
const EXIT_HORMANDER: u8 = 20;
const EXIT_LYAPUNOV: u8 = 21;
const EXIT_ACCESSIBILITY: u8 = 22;

#[derive(Parser, Debug)]
#[command(name = "foodchain", version, about = "Persistence analysis and simulation of stochastic Lotka-Volterra food chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify the long-run regime of a chain.
    Analyze(AnalyzeArgs),
    /// Check Lyapunov, bracket-rank and accessibility certificates.
    Verify(VerifyArgs),
    /// Simulate trajectories and report occupation and extinction statistics.
    Simulate(SimulateArgs),
    /// Estimate the convergence regime from ensemble snapshots.
    Rates(RatesArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Chain specification (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; results go to stdout as JSON when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    lyapunov: bool,
    #[arg(long)]
    hormander: bool,
    #[arg(long)]
    accessibility: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the basal species in U.
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    /// Moment order for the U^q drift check.
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    r_min: f64,
    #[arg(long, default_value_t = 1e3)]
    r_max: f64,
    #[arg(long, default_value_t = 25)]
    shells: usize,
    #[arg(long, default_value_t = 400)]
    samples: usize,
    /// Random interior points probed for the bracket rank.
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = hormander::DEFAULT_RANK_TOLERANCE)]
    rank_tol: f64,
    /// Random starts for the accessibility probe.
    #[arg(long, default_value_t = 5)]
    starts: usize,
    #[arg(long, default_value_t = 500.0)]
    probe_horizon: f64,
    #[arg(long, default_value_t = 1e-6)]
    probe_tol: f64,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Initial state as comma-separated densities; defaults to p* when it
    /// exists, else all ones.
    #[arg(long)]
    x0: Option<String>,
    #[arg(long, default_value_t = sim::DEFAULT_DT)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for ensembles; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 100.0)]
    horizon: f64,
    /// Defaults to 20% of the horizon.
    #[arg(long)]
    burn_in: Option<f64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    /// Density below which a species counts as absent.
    #[arg(long, default_value_t = 1e-6)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct RatesArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sim: SimArgs,
    /// Snapshot times, comma-separated and increasing.
    #[arg(long)]
    times: String,
    #[arg(long, default_value_t = 10_000)]
    replicas: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

struct LoadedSpec {
    path: PathBuf,
    bytes: Vec<u8>,
    spec: ChainSpec,
}

fn load_spec(path: &Path) -> Result<LoadedSpec, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    let spec = ChainSpec::from_json(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(LoadedSpec {
        path: path.to_path_buf(),
        bytes,
        spec,
    })
}

/// `FOODCHAIN_SEED` takes precedence over `--seed`.
fn effective_seed(flag: u64) -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn parse_csv(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("{what}: {s:?} is not a number")))
        })
        .collect()
}

fn initial_state(spec: &ChainSpec, x0: Option<&str>) -> Result<State, CliError> {
    match x0 {
        Some(text) => {
            let v = parse_csv(text, "--x0")?;
            if v.len() != spec.n() {
                return Err(CliError::Usage(format!("--x0 has {} entries, the chain has {}", v.len(), spec.n())));
            }
            Ok(State(v))
        }
        None => Ok(persistence::equilibrium(&spec.tilde()).unwrap_or_else(|_| State(vec![1.0; spec.n()]))),
    }
}

/// Destination for a command's results: a directory with a manifest, or a
/// single JSON document on stdout.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn new(out: &Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(d) = out {
            fs::create_dir_all(d)?;
        }
        Ok(Self { dir: out.clone() })
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        if let Some(d) = &self.dir {
            fs::write(d.join(name), contents)?;
        }
        Ok(())
    }

    fn write_json(&self, name: &str, v: &Value) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(v).map_err(failure)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(&self, manifest: RunManifest, stdout_doc: &Value) -> Result<(), CliError> {
        match &self.dir {
            Some(_) => self.write_json(manifest::FILE_NAME, &serde_json::to_value(manifest.finish()).map_err(failure)?),
            None => {
                use std::io::Write;
                let text = serde_json::to_string_pretty(stdout_doc).map_err(failure)?;
                match writeln!(std::io::stdout().lock(), "{text}") {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                    _ => Ok(()),
                }
            }
        }
    }
}

fn analyze(args: &AnalyzeArgs) -> Result<u8, CliError> {
    let loaded = load_spec(&args.common.spec)?;
    let manifest = RunManifest::new("analyze", &loaded.path, &loaded.bytes, None, json!({}));
    let report = persistence::classify(&loaded.spec);
    let doc = report.to_json();
    let sink = Sink::new(&args.common.out)?;
    sink.write_json("analysis.json", &doc)?;
    sink.finish(manifest, &doc)?;
    Ok(match report.classification {
        Regime::Persistent => 0,
        Regime::ExtinctAbove(_) => 10,
        Regime::Boundary(_) => 11,
        Regime::UnsupportedNoise => 12,
    })
}

/// Variant name and message of an error, for JSON reports.
fn error_doc<E: std::fmt::Debug + std::fmt::Display>(e: &E) -> Value {
    let debug = format!("{e:?}");
    let name: String = debug.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
    json!({ "error": name, "message": e.to_string(), "detail": debug })
}

/// Log-uniform points in `[center/10, 10·center]` per coordinate.
fn random_interior(rng: &mut ChaCha8Rng, center: &[f64], count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| center.iter().map(|c| c * 10f64.powf(rng.random_range(-1.0..1.0))).collect())
        .collect()
}

fn verify(args: &VerifyArgs) -> Result<u8, CliError> {
    let loaded = load_spec(&args.common.spec)?;
    let seed = effective_seed(args.seed)?;
    let spec = &loaded.spec;
    let tilde = spec.tilde();
    let all = !(args.lyapunov || args.hormander || args.accessibility);
    let params = json!({
        "lyapunov": args.lyapunov || all,
        "hormander": args.hormander || all,
        "accessibility": args.accessibility || all,
        "c1": args.c1, "q": args.q,
        "r_min": args.r_min, "r_max": args.r_max, "shells": args.shells, "samples": args.samples,
        "points": args.points, "rank_tol": args.rank_tol,
        "starts": args.starts, "probe_horizon": args.probe_horizon, "probe_tol": args.probe_tol,
    });
    let manifest = RunManifest::new("verify", &loaded.path, &loaded.bytes, Some(seed), params);
    let pstar = persistence::equilibrium(&tilde).ok();
    let center = pstar.as_ref().map_or_else(|| vec![1.0; spec.n()], |p| p.0.clone());
    let mut failed: Vec<u8> = Vec::new();
    let mut doc = serde_json::Map::new();

    if args.lyapunov || all {
        let inputs = CertInputs {
            c1: args.c1,
            q: args.q,
            ..CertInputs::default()
        };
        let plan = ScanPlan::log_shells(args.r_min, args.r_max, args.shells, args.samples, seed);
        match lyapunov::verify_drift_inequalities(spec, &inputs, &plan) {
            Ok(cert) => {
                if !cert.passed() {
                    failed.push(EXIT_LYAPUNOV);
                }
                doc.insert("lyapunov".into(), serde_json::to_value(&cert.scan_results).map_err(failure)?);
                let mut constants = serde_json::to_value(&cert).map_err(failure)?;
                if let Some(m) = constants.as_object_mut() {
                    m.remove("scan_results");
                }
                doc.insert("lyapunov_constants".into(), constants);
            }
            Err(e) => {
                failed.push(EXIT_LYAPUNOV);
                doc.insert("lyapunov".into(), error_doc(&e));
            }
        }
    }

    if args.hormander || all {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match hormander::default_chain(&tilde) {
            Ok(chain) => {
                let mut points = Vec::new();
                if let Some(p) = &pstar {
                    points.push(p.0.clone());
                }
                points.extend(random_interior(&mut rng, &center, args.points));
                let mut reports: Vec<Value> = Vec::new();
                let mut ok = true;
                for x in &points {
                    let r: Result<HormanderReport, _> = chain.rank_at(x, args.rank_tol);
                    match r {
                        Ok(r) => {
                            ok &= r.satisfied;
                            reports.push(serde_json::to_value(&r).map_err(failure)?);
                        }
                        Err(e) => {
                            ok = false;
                            reports.push(error_doc(&e));
                        }
                    }
                }
                if !ok {
                    failed.push(EXIT_HORMANDER);
                }
                doc.insert("hormander".into(), Value::Array(reports));
            }
            Err(e) => {
                failed.push(EXIT_HORMANDER);
                doc.insert("hormander".into(), error_doc(&e));
            }
        }
    }

    if args.accessibility || all {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce_5510);
        if pstar.is_none() {
            failed.push(EXIT_ACCESSIBILITY);
            let e = hormander::accessibility_probe(&tilde, &State(center.clone()), args.probe_horizon, 1)
                .err()
                .map(|e| error_doc(&e))
                .unwrap_or(Value::Null);
            doc.insert("accessibility".into(), e);
        } else {
            let mut reports = Vec::new();
            let mut ok = true;
            for x in random_interior(&mut rng, &center, args.starts) {
                match hormander::accessibility_probe(&tilde, &State(x), args.probe_horizon, 10) {
                    Ok(r) => {
                        let reached = r.final_distance_to_pstar < args.probe_tol;
                        ok &= reached;
                        let mut v = serde_json::to_value(&r).map_err(failure)?;
                        v["reached"] = json!(reached);
                        reports.push(v);
                    }
                    Err(e) => {
                        ok = false;
                        reports.push(error_doc(&e));
                    }
                }
            }
            if !ok {
                failed.push(EXIT_ACCESSIBILITY);
            }
            doc.insert("accessibility".into(), Value::Array(reports));
        }
    }

    let doc = Value::Object(doc);
    let sink = Sink::new(&args.common.out)?;
    sink.write_json("verify.json", &doc)?;
    sink.finish(manifest, &doc)?;
    Ok(failed.into_iter().min().unwrap_or(0))
}

fn simulate(args: &SimulateArgs) -> Result<u8, CliError> {
    let loaded = load_spec(&args.common.spec)?;
    if args.replicas == 0 {
        return Err(CliError::Usage("--replicas must be at least 1".into()));
    }
    let seed = effective_seed(args.sim.seed)?;
    let spec = &loaded.spec;
    let x0 = initial_state(spec, args.sim.x0.as_deref())?;
    let mut cfg = SimConfig::new(args.horizon, seed).with_dt(args.sim.dt);
    if let Some(b) = args.burn_in {
        cfg = cfg.with_burn_in(b);
    }
    if let Some(t) = args.thin {
        cfg = cfg.with_thin(t);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let params = json!({
        "x0": x0.0, "config": cfg, "replicas": args.replicas,
        "threshold": args.threshold, "workers": args.sim.workers,
    });
    let manifest = RunManifest::new("simulate", &loaded.path, &loaded.bytes, Some(seed), params);

    let traj = sim::simulate(spec, &x0, &cfg).map_err(failure)?;
    if let Some(e) = &traj.exited {
        log::warn!("replica 0 exited at t = {} (species {})", e.time, e.species);
    }
    let (occupation, extinction, exited) = if args.replicas == 1 {
        let occ = sim::occupation_measure(&traj, &spec.tilde(), HistogramSpec::default()).ok();
        let ext = sim::extinction_stats(&traj, args.threshold);
        (occ, ext, usize::from(traj.exited.is_some()))
    } else {
        let mut req = EnsembleRequest::new(args.replicas);
        req.extinction_threshold = args.threshold;
        req.workers = args.sim.workers;
        let sum = sim::ensemble(spec, &x0, &req, &cfg).map_err(failure)?;
        if sum.exited > 0 {
            log::warn!("{} of {} replicas exited and were excluded", sum.exited, sum.replicas);
        }
        (sum.occupation, sum.extinction, sum.exited)
    };
    let occ_doc = serde_json::to_value(&occupation).map_err(failure)?;
    let ext_doc = json!({
        "threshold": args.threshold,
        "replicas": args.replicas,
        "exited": exited,
        "species": extinction,
    });

    let sink = Sink::new(&args.common.out)?;
    sink.write("trajectory.csv", traj.to_csv().as_bytes())?;
    sink.write_json("occupation.json", &occ_doc)?;
    sink.write_json("extinction.json", &ext_doc)?;
    let rows: Vec<Value> = traj.iter().map(|(t, x)| json!([t, x])).collect();
    let doc = json!({
        "trajectory": { "exited": traj.exited, "records": rows },
        "occupation": occ_doc,
        "extinction": ext_doc,
    });
    sink.finish(manifest, &doc)?;
    Ok(0)
}

fn rates_doc(fit: &RateFit, replicas: usize, exited: usize) -> Value {
    let distances: Vec<Value> = fit.distances.iter().map(|(t, d)| json!({"t": t, "d": d})).collect();
    json!({
        "distances": distances,
        "exp": fit.exp,
        "poly": fit.poly,
        "verdict": fit.verdict,
        "noise_floor": fit.noise_floor,
        "last_gap": fit.last_gap,
        "points_above_floor": fit.points_above_floor,
        "reason": fit.reason,
        "replicas": replicas,
        "exited": exited,
    })
}

fn rates(args: &RatesArgs) -> Result<u8, CliError> {
    let loaded = load_spec(&args.common.spec)?;
    if args.replicas == 0 {
        return Err(CliError::Usage("--replicas must be at least 1".into()));
    }
    let seed = effective_seed(args.sim.seed)?;
    let spec = &loaded.spec;
    let x0 = initial_state(spec, args.sim.x0.as_deref())?;
    let times = parse_csv(&args.times, "--times")?;
    let last = *times.last().ok_or_else(|| CliError::Usage("--times is empty".into()))?;
    let cfg = SimConfig::new(last.max(args.sim.dt), seed).with_dt(args.sim.dt);
    let params = json!({
        "x0": x0.0, "times": times, "dt": cfg.dt, "replicas": args.replicas, "workers": args.sim.workers,
    });
    let manifest = RunManifest::new("rates", &loaded.path, &loaded.bytes, Some(seed), params);
    let set = convergence::snapshot_distributions(spec, &x0, &times, args.replicas, &cfg, args.sim.workers).map_err(|e| match e {
        convergence::ConvergenceError::Sim(sim::SimError::InvalidConfig(m)) => CliError::Usage(m),
        e => failure(e),
    })?;
    let fit = convergence::rate_fit(&set).map_err(|e| CliError::Usage(e.to_string()))?;
    let doc = rates_doc(&fit, set.replica_count, set.exited);
    let mut csv = String::from("t,d\n");
    for (t, d) in &fit.distances {
        csv.push_str(&format!("{t},{d}\n"));
    }
    let sink = Sink::new(&args.common.out)?;
    sink.write_json("rates.json", &doc)?;
    sink.write("distances.csv", csv.as_bytes())?;
    sink.finish(manifest, &doc)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Verify(a) => verify(a),
        Command::Simulate(a) => simulate(a),
        Command::Rates(a) => rates(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            match &e {
                CliError::Usage(m) | CliError::Failure(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
