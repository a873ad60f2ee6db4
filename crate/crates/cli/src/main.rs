//! `ceco`: ETF frame tools, feature-dump analysis, gradient checks and
//! training experiments.
//!
//! Exit status: 0 success, 1 a check failed, 2 bad input, 3 I/O error,
//! 4 not enough classes to analyze, 5 training diverged.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ceco_core::etf::{make_etf, verify_etf, DEFAULT_VERIFY_TOL};
use ceco_core::gradcheck::{run_all, Fault, GRAD_TOL};
use ceco_core::harness::{
    default_lambda_grid, lambda_sweep, run_ablation_grid, train, training_scene_configs,
    ComparisonTable, TrainConfig, TrainLog,
};
use ceco_core::io::{
    fmt_f64, format_dump, format_frame, format_log, format_scene_config, format_table,
    parse_dump, parse_frame, to_json,
};
use ceco_core::metrics::{imbalance_factor, nc_report, FeatureBatch};
use ceco_core::toy::{gen_scene, scene_center_counts, total_pixel_counts};
use ceco_core::Error;
use clap::{Parser, Subcommand};

use config::{ConfigArg, RunArgs};

const EXIT_CHECK: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CLASSES: u8 = 4;
const EXIT_DIVERGED: u8 = 5;

const PRECEDENCE: &str = "Settings are resolved in this order: command-line flags, then \
keys from the --config TOML file, then built-in defaults.";

#[derive(Parser)]
#[command(
    name = "ceco",
    version,
    about = "Center-collapse regularization experiments and neural-collapse diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a simplex ETF frame file
    MakeEtf {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a frame file against the ETF identities (exit 1 if it fails)
    VerifyEtf {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VERIFY_TOL)]
        tol: f64,
        /// Also write the JSON report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Neural-collapse statistics of a feature dump, as JSON
    Analyze {
        #[arg(long)]
        features: PathBuf,
        /// Frame file of a classifier to compare against
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every analytic gradient
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        /// Negate the center-loss feature gradient (checks the checker)
        #[arg(long, hide = true)]
        mutate: bool,
    },
    /// Train one model and write its evaluation log (one JSON object per line)
    #[command(after_help = PRECEDENCE)]
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the five classifier variants and write a CSV table
    #[command(after_help = PRECEDENCE)]
    Ablation {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of runs in parallel
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train once per loss weight and write a CSV table
    #[command(after_help = PRECEDENCE)]
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated loss weights (default 0.0,0.1,...,0.6)
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write the training scenes of a run as feature dumps with sidecars
    #[command(after_help = PRECEDENCE)]
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        config: ConfigArg,
        /// Number of scenes (defaults to the run's training scene count)
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self {
            code,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::InsufficientClasses { .. } => EXIT_CLASSES,
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::Numeric(_) | Error::StaleCache => EXIT_CHECK,
            _ => EXIT_INPUT,
        };
        Failure::new(code, e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_failure(path, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| io_failure(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(|e| io_failure(path, e))?;
    }
    tmp.persist(path).map_err(|e| io_failure(path, e.error))?;
    Ok(())
}

fn load_config(run: RunArgs, config: &ConfigArg) -> Result<TrainConfig, Failure> {
    let file = match &config.config {
        Some(p) => RunArgs::from_toml(&read(p)?)
            .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", p.display())))?,
        None => RunArgs::default(),
    };
    let cfg = run.or(file).resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn with_jobs<T: Send>(
    jobs: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, Failure> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Failure::new(EXIT_INPUT, "--jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn summary_line(log: &TrainLog) -> String {
    match log.last() {
        Some(r) => format!(
            "iteration={} accuracy={} head={} common={} tail={} equiang_std_centers={} maxangle_avg_centers={}",
            r.iteration,
            fmt_f64(r.accuracy),
            fmt_f64(r.head_accuracy),
            fmt_f64(r.common_accuracy),
            fmt_f64(r.tail_accuracy),
            fmt_f64(r.equiang_std_centers),
            fmt_f64(r.maxangle_avg_centers),
        ),
        None => "no records".into(),
    }
}

fn cmd_make_etf(dim: usize, classes: usize, alpha: f64, seed: u64, out: &Path) -> CliResult {
    let frame = make_etf(dim, classes, alpha, seed)?;
    write_atomic(out, &format_frame(&frame))?;
    println!("wrote {dim}x{classes} frame with alpha={} to {}", fmt_f64(alpha), out.display());
    Ok(())
}

fn cmd_verify_etf(frame: &Path, tol: f64, out: Option<&Path>) -> CliResult {
    if !(tol > 0.0) {
        return Err(Failure::new(EXIT_INPUT, "--tol must be positive"));
    }
    let f = parse_frame(&read(frame)?)?;
    let report = verify_etf(f.matrix(), tol)?;
    let json = to_json(&report)?;
    if let Some(p) = out {
        write_atomic(p, &format!("{json}\n"))?;
    }
    println!("{json}");
    if report.is_etf {
        println!("frame is a simplex ETF at tol={}", fmt_f64(tol));
        Ok(())
    } else {
        Err(Failure::new(EXIT_CHECK, "frame is not a simplex ETF"))
    }
}

fn cmd_analyze(features: &Path, classifier: Option<&Path>, out: &Path) -> CliResult {
    let batch = parse_dump(&read(features)?)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", features.display())))?;
    let w = match classifier {
        Some(p) => Some(
            parse_frame(&read(p)?)
                .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let report = nc_report(&batch, w.as_ref().map(|f| f.matrix()))?;
    write_atomic(out, &format!("{}\n", to_json(&report)?))?;
    println!(
        "classes_used={} excluded={:?} equiang_std_centers={} maxangle_avg_centers={}",
        report.n_classes_used,
        report.excluded_classes,
        fmt_f64(report.equiang_std_centers),
        fmt_f64(report.maxangle_avg_centers),
    );
    Ok(())
}

fn cmd_grad_check(seed: u64, trials: usize, mutate: bool) -> CliResult {
    let fault = if mutate { Fault::FlipFeatureGrad } else { Fault::None };
    let results = run_all(trials, seed, fault)?;
    let mut first_failure = None;
    for r in &results {
        println!(
            "{} trials={} worst_rel_error={} worst_seed={} {}",
            r.suite.name(),
            r.trials,
            fmt_f64(r.worst_error),
            r.worst_seed,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed && first_failure.is_none() {
            first_failure = Some(r);
        }
    }
    match first_failure {
        None => {
            println!("all gradients match within {}", fmt_f64(GRAD_TOL));
            Ok(())
        }
        Some(r) => Err(Failure::new(
            EXIT_CHECK,
            format!(
                "{} gradient mismatch, failing instance seed {}",
                r.suite.name(),
                r.worst_seed
            ),
        )),
    }
}

fn cmd_train(cfg: &TrainConfig, out: &Path) -> CliResult {
    match train(cfg) {
        Ok(log) => {
            write_atomic(out, &format_log(&log)?)?;
            println!("final {}", summary_line(&log));
            Ok(())
        }
        Err(Error::Diverged { iteration, partial }) => {
            write_atomic(out, &format_log(&partial)?)?;
            Err(Failure::new(
                EXIT_DIVERGED,
                format!(
                    "training diverged at iteration {iteration}; {} records kept in {}",
                    partial.records.len(),
                    out.display()
                ),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn write_table(table: &ComparisonTable, out: &Path) -> CliResult {
    write_atomic(out, &format_table(table)?)?;
    for r in &table.rows {
        println!(
            "pr={} cc={} lambda={} accuracy={} tail={} equiang_std_centers={}",
            r.pr_mode.label(),
            r.cc_mode.label(),
            fmt_f64(r.lambda),
            fmt_f64(r.accuracy),
            fmt_f64(r.tail_accuracy),
            fmt_f64(r.equiang_std_centers),
        );
    }
    println!("wrote {} rows to {}", table.rows.len(), out.display());
    Ok(())
}

fn cmd_gen_data(cfg: &TrainConfig, out_dir: &Path) -> CliResult {
    fs::create_dir_all(out_dir).map_err(|e| io_failure(out_dir, e))?;
    let k = cfg.classes();
    let mut scenes = Vec::with_capacity(cfg.train_scenes);
    for (i, sc) in training_scene_configs(cfg).iter().enumerate() {
        let scene = gen_scene(sc)?;
        let batch = FeatureBatch::new(scene.inputs.clone(), scene.labels.clone(), k)?;
        write_atomic(&out_dir.join(format!("scene_{i:03}.txt")), &format_dump(&batch))?;
        write_atomic(&out_dir.join(format!("scene_{i:03}.cfg")), &format_scene_config(sc))?;
        scenes.push(scene);
    }
    let pixel_if = imbalance_factor(&total_pixel_counts(&scenes, k))?;
    let center_if = imbalance_factor(&scene_center_counts(&scenes, k))?;
    println!(
        "wrote {} scenes to {} pixel_imbalance={} center_imbalance={}",
        scenes.len(),
        out_dir.display(),
        fmt_f64(pixel_if),
        fmt_f64(center_if),
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.cmd {
        Cmd::MakeEtf {
            dim,
            classes,
            alpha,
            seed,
            out,
        } => cmd_make_etf(dim, classes, alpha, seed, &out),
        Cmd::VerifyEtf { frame, tol, out } => cmd_verify_etf(&frame, tol, out.as_deref()),
        Cmd::Analyze {
            features,
            classifier,
            out,
        } => cmd_analyze(&features, classifier.as_deref(), &out),
        Cmd::GradCheck {
            seed,
            trials,
            mutate,
        } => cmd_grad_check(seed, trials as usize, mutate),
        Cmd::Train { run, config, out } => cmd_train(&load_config(run, &config)?, &out),
        Cmd::Ablation {
            run,
            config,
            out,
            jobs,
        } => {
            let cfg = load_config(run, &config)?;
            let table = with_jobs(jobs, || run_ablation_grid(&cfg))??;
            write_table(&table, &out)
        }
        Cmd::Sweep {
            run,
            config,
            lambdas,
            out,
            jobs,
        } => {
            let cfg = load_config(run, &config)?;
            let lambdas = lambdas.unwrap_or_else(default_lambda_grid);
            let table = with_jobs(jobs, || lambda_sweep(&cfg, &lambdas))??;
            write_table(&table, &out)
        }
        Cmd::GenData {
            run,
            config,
            count,
            out_dir,
        } => {
            let mut cfg = load_config(run, &config)?;
            if let Some(n) = count {
                cfg.train_scenes = n;
            }
            cmd_gen_data(&cfg, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
