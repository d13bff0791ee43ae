use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;

use mehler_core::control::Weight;
use mehler_core::functions::TestFunction;
use mehler_core::harnack::{harnack_check, strong_feller_bound};
use mehler_core::kernel::probe_frequencies;
use mehler_core::measures::{invariance_defect_pair, limit_triplet};
use mehler_core::scenario::{load_scenario, Lab};
use mehler_core::stats::{SeedSplitter, Verdict};
use mehler_core::suite::{run_suite, Record, Report, Suite, SuiteOptions};
use mehler_core::{MehlerError, Result};

#[derive(Parser)]
#[command(name = "mehlerlab", version, about = "Non-autonomous generalized Mehler semigroup lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo sample count.
    #[arg(long, global = true, default_value_t = 100_000)]
    n: usize,
    #[arg(long, global = true, default_value_t = 1e-6)]
    tol: f64,
    /// Directory for the report; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Record wall time in the report (breaks byte-for-byte reproducibility).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct Window {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    s: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    t: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Triplet of the kernel measure and an optional `p_{s,t} f(x)` estimate.
    Kernel {
        #[command(flatten)]
        window: Window,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        #[arg(long, default_value = "cosine")]
        f: String,
    },
    /// Limit measure `ν_t`; with `--check`, the invariance defect on `[s, t]`.
    EvolutionMeasure {
        #[command(flatten)]
        window: Window,
        #[arg(long)]
        check: bool,
    },
    /// Dimension-free Harnack inequality check between two start points.
    Harnack {
        #[command(flatten)]
        window: Window,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Vec<f64>,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value = "tanh_shift")]
        f: String,
        #[arg(long)]
        log_mode: bool,
    },
    /// Strong Feller bound between two start points.
    FellerBound {
        #[command(flatten)]
        window: Window,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Vec<f64>,
        #[arg(long, default_value = "tanh")]
        f: String,
    },
    /// Controllability Gramian, minimal energy and an explicit null control.
    Control {
        #[command(subcommand)]
        mode: Option<ControlMode>,
        #[command(flatten)]
        window: Window,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        /// `constant` or `exp:BETA`.
        #[arg(long)]
        weight: Option<String>,
    },
    /// Girsanov-weighted semilinear estimates and inequality checks.
    Semilinear {
        #[command(subcommand)]
        mode: SemilinearMode,
    },
    /// Run a check suite and report one verdict per record.
    Suite {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Subcommand)]
enum ControlMode {
    /// Compare the minimal energy with the brute-force discretization.
    Oracle {
        #[arg(long, default_value_t = 256)]
        nodes: usize,
    },
}

#[derive(Args, Clone)]
struct PathArgs {
    #[command(flatten)]
    window: Window,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x: Option<Vec<f64>>,
    #[arg(long, default_value_t = 64)]
    steps: usize,
}

#[derive(Subcommand)]
enum SemilinearMode {
    /// Weighted estimate of the semilinear semigroup applied to f.
    Apply {
        #[command(flatten)]
        path: PathArgs,
        #[arg(long, default_value = "cosine")]
        f: String,
    },
    /// Girsanov weight moments against their bounds.
    Moments {
        #[command(flatten)]
        path: PathArgs,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
    },
    /// Semilinear Harnack inequality with the Girsanov constant.
    Harnack {
        #[command(flatten)]
        path: PathArgs,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Vec<f64>,
        #[arg(long, default_value_t = 4.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.428_355)]
        p: f64,
        #[arg(long, default_value_t = 1.428_355)]
        q: f64,
        #[arg(long, default_value = "tanh_shift")]
        f: String,
    },
}

fn vector(lab: &Lab, v: Option<Vec<f64>>, field: &str) -> Result<DVector<f64>> {
    let d = lab.mehler.dim();
    match v {
        None => Ok(DVector::from_element(d, 1.0 / (d as f64).sqrt())),
        Some(v) if v.len() == d => Ok(DVector::from_vec(v)),
        Some(v) => Err(MehlerError::Config(format!("--{field}: expected {d} entries, found {}", v.len()))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable payload")
}

fn execute(cli: &Cli, lab: &Lab, argv: &str) -> Result<Report> {
    let c = &cli.common;
    let seeds = SeedSplitter::new(c.seed);
    let mut report = Report::new(argv, lab, c.seed);
    match &cli.command {
        Command::Kernel { window, x, f } => {
            let trip = lab.mehler.build_triplet(window.s, window.t)?;
            report.records.push(Record::new("covariance_trace", window.s, window.t, "", trip.r.trace(), Verdict::Info));
            report.records.push(Record::new("jump_mass", window.s, window.t, format!("atoms={}", trip.m.len()), trip.m.total_mass(), Verdict::Info));
            if let Some(x) = x.clone() {
                let x = vector(lab, Some(x), "x")?;
                let f = TestFunction::from_name(f)?;
                let est = lab.mehler.mehler_apply(window.s, window.t, &|y: &DVector<f64>| f.eval(y), &x, c.n, &mut seeds.stream("kernel/apply"))?;
                let (lo, hi) = est.ci();
                report.records.push(Record::new("mehler_apply", window.s, window.t, "", est.mean, Verdict::Info).with_ci(lo, hi));
            }
            report.payload = Some(to_json(&trip));
        }
        Command::EvolutionMeasure { window, check } => {
            let hint = lab.stability.ok_or_else(|| MehlerError::Config("scenario has no stability hint".into()))?;
            let nu_t = limit_triplet(&lab.mehler, window.t, &hint, c.tol)?;
            report.records.push(Record::new("limit_horizon", window.t, window.t, "", nu_t.horizon, Verdict::Info));
            report.records.push(Record::new("tail_bound", window.t, window.t, "", nu_t.tail_bound, Verdict::bound(nu_t.tail_bound, c.tol)));
            if *check {
                let nu_s = limit_triplet(&lab.mehler, window.s, &hint, c.tol)?;
                let probes = probe_frequencies(lab.mehler.dim(), 10);
                let defect = invariance_defect_pair(&lab.mehler, &nu_s.nu, &nu_t.nu, window.s, window.t, &probes)?;
                report.records.push(Record::new("invariance_defect", window.s, window.t, format!("tol={}", c.tol), defect, Verdict::bound(defect, 10.0 * c.tol)));
            }
            report.payload = Some(to_json(&nu_t));
        }
        Command::Harnack { window, x, y, alpha, f, log_mode } => {
            let (x, y) = (vector(lab, Some(x.clone()), "x")?, vector(lab, Some(y.clone()), "y")?);
            let f = TestFunction::from_name(f)?;
            let f = if *log_mode { f.shifted_above_one().unwrap_or(f) } else { f };
            let rep = harnack_check(&lab.mehler, window.s, window.t, &f, *alpha, &x, &y, c.n, &mut seeds.stream("harnack"), *log_mode)?;
            report.records.push(Record::new(&rep.check, window.s, window.t, format!("alpha={alpha}"), rep.lhs - rep.rhs, rep.verdict));
            report.payload = Some(to_json(&rep));
        }
        Command::FellerBound { window, x, y, f } => {
            let (x, y) = (vector(lab, Some(x.clone()), "x")?, vector(lab, Some(y.clone()), "y")?);
            let f = TestFunction::from_name(f)?;
            let rep = strong_feller_bound(&lab.mehler, window.s, window.t, &f, &x, &y, c.n, &mut seeds.stream("feller"))?;
            report.records.push(Record::new(&rep.check, window.s, window.t, "", rep.lhs - rep.rhs, rep.verdict));
            report.payload = Some(to_json(&rep));
        }
        Command::Control { mode, window, x, weight } => {
            let csys = lab.control.as_ref().ok_or_else(|| MehlerError::Config("scenario has no control operator".into()))?;
            let x = vector(lab, x.clone(), "x")?;
            match mode {
                Some(ControlMode::Oracle { nodes }) => {
                    let energy = csys.min_energy(window.s, window.t, &x)?;
                    let oracle = csys.brute_force_min_energy(window.s, window.t, &x, *nodes)?;
                    let gap = if energy.is_infinite() && oracle.is_infinite() { 0.0 } else { (energy - oracle).abs() };
                    let verdict = Verdict::bound(gap, 1e-3 * (1.0 + energy));
                    report.records.push(Record::new("min_energy_oracle", window.s, window.t, format!("nodes={nodes}"), gap, verdict).with_ci(energy, oracle));
                    report.payload = Some(json!({ "min_energy": fmt_inf(energy), "oracle": fmt_inf(oracle), "gap": fmt_inf(gap) }));
                }
                None => {
                    let cert = match weight {
                        Some(w) => csys.synthesize_control(window.s, window.t, &x, &Weight::from_name(w)?)?,
                        None => csys.certificate(window.s, window.t, &x)?,
                    };
                    report.records.push(Record::new("min_energy", window.s, window.t, "", cert.min_energy, Verdict::Info));
                    let mut payload = to_json(&cert);
                    payload["min_energy"] = fmt_inf(cert.min_energy);
                    report.payload = Some(payload);
                }
            }
        }
        Command::Semilinear { mode } => {
            let ssys = lab.semilinear.as_ref().ok_or_else(|| MehlerError::Config("scenario has no semilinear section".into()))?;
            match mode {
                SemilinearMode::Apply { path, f } => {
                    let x = vector(lab, path.x.clone(), "x")?;
                    let f = TestFunction::from_name(f)?;
                    let est = ssys.semigroup_apply(path.window.s, path.window.t, &|y: &DVector<f64>| f.eval(y), &x, c.n, path.steps, &mut seeds.stream("semilinear/apply"))?;
                    let (lo, hi) = est.value.ci();
                    report.records.push(Record::new("semigroup_apply", path.window.s, path.window.t, format!("ess={:.0}", est.effective_sample_size), est.value.mean, Verdict::Info).with_ci(lo, hi));
                    let w = est.weight_mean;
                    let verdict = if w.within_se(1.0, 5.0) { Verdict::Pass } else { Verdict::Fail };
                    report.records.push(Record::new("girsanov_mean", path.window.s, path.window.t, "", w.mean, verdict));
                    report.payload = Some(to_json(&est));
                }
                SemilinearMode::Moments { path, p, delta } => {
                    let x = vector(lab, path.x.clone(), "x")?;
                    let rep = ssys.weight_moment_check(path.window.s, path.window.t, &x, *p, *delta, c.n, path.steps, &mut seeds.stream("semilinear/moments"))?;
                    report.records.push(Record::new("weight_moment_p", path.window.s, path.window.t, format!("p={p}"), rep.moment_p.mean - rep.bound_p, rep.verdict_p));
                    report.records.push(Record::new("weight_moment_neg", path.window.s, path.window.t, format!("delta={delta}"), rep.moment_neg.mean - rep.bound_neg, rep.verdict_neg));
                    report.payload = Some(to_json(&rep));
                }
                SemilinearMode::Harnack { path, y, alpha, p, q, f } => {
                    let x = vector(lab, path.x.clone(), "x")?;
                    let y = vector(lab, Some(y.clone()), "y")?;
                    let f = TestFunction::from_name(f)?;
                    let rep = ssys.harnack_semilinear_check(path.window.s, path.window.t, &f, *alpha, *p, *q, &x, &y, c.n, path.steps, &mut seeds.stream("semilinear/harnack"))?;
                    report.records.push(Record::new(&rep.check, path.window.s, path.window.t, format!("alpha={alpha};p={p};q={q}"), rep.lhs - rep.rhs, rep.verdict));
                    report.payload = Some(to_json(&rep));
                }
            }
        }
        Command::Suite { suite } => {
            let suite: Suite = suite.parse()?;
            let opts = SuiteOptions { n: c.n, tol: c.tol, timing: c.timing };
            let mut full = run_suite(lab, suite, c.seed, &opts)?;
            full.command = argv.to_string();
            return Ok(full);
        }
    }
    Ok(report)
}

fn fmt_inf(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Kernel { .. } => "kernel",
        Command::EvolutionMeasure { .. } => "evolution-measure",
        Command::Harnack { .. } => "harnack",
        Command::FellerBound { .. } => "feller-bound",
        Command::Control { .. } => "control",
        Command::Semilinear { .. } => "semilinear",
        Command::Suite { .. } => "suite",
    }
}

fn run(cli: &Cli) -> Result<i32> {
    if let Ok(threads) = std::env::var("MEHLERLAB_THREADS") {
        let threads: usize = threads
            .parse()
            .map_err(|_| MehlerError::Config(format!("MEHLERLAB_THREADS must be a positive integer, got '{threads}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| MehlerError::Config(e.to_string()))?;
    }
    let path = cli
        .common
        .scenario
        .as_ref()
        .ok_or_else(|| MehlerError::Config("--scenario is required".into()))?;
    let lab = load_scenario(path)?;
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let started = Instant::now();
    let mut report = execute(cli, &lab, &argv.join(" "))?;
    if cli.common.timing {
        report.wall_time_s = Some(started.elapsed().as_secs_f64());
    }
    let (body, ext) = match cli.common.format {
        Format::Json => (report.to_json(), "json"),
        Format::Csv => (report.to_csv(), "csv"),
    };
    match &cli.common.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{}.{ext}", command_name(&cli.command))), body)?;
        }
        None => print!("{body}"),
    }
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
