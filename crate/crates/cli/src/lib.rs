//! Command-line front end for `impactsim`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use impactsim::analysis::{self, ConvergenceProblem, ConvergenceReport, Reference, ReferenceKind};
use impactsim::io::{self as csvio, format_float, TrajectoryTable};
use impactsim::models::{self, ModelDescriptor};
use impactsim::oracle::{self, EventDrivenConfig, OracleStatus, OracleTrajectory};
use impactsim::scheme::{self, SchemeConfig};
use impactsim::Vector;
use thiserror::Error;

pub mod config;

pub use config::RunConfig;

/// Environment variable capping the number of worker threads used by `converge`.
pub const THREADS_ENV: &str = "IMPACTSIM_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "impactsim",
    version,
    about = "Time-stepping for mechanical systems with impacts"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for output files (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one trajectory and write trajectory and impact CSVs.
    Run,
    /// Run an h-refinement sweep and write convergence.csv with a summary.
    Converge,
    /// Check the discrete velocity bound on random scalar recurrences.
    LemmaCheck {
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        /// Defaults to `seed` from the config, or 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// List the available models.
    Models,
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("impactsim: {err}");
            err.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let out = Output {
        dir: cli.global.out_dir.clone(),
        quiet: cli.global.quiet,
    };
    match &cli.command {
        Command::Run => cmd_run(&require_config(&cli.global)?, &out),
        Command::Converge => cmd_converge(&require_config(&cli.global)?, &out),
        Command::LemmaCheck { count, seed, steps } => {
            let seed = match (seed, &cli.global.config) {
                (Some(s), _) => *s,
                (None, Some(path)) => RunConfig::load(path)?.seed,
                (None, None) => 0,
            };
            cmd_lemma_check(*count, *steps, seed, &out)
        }
        Command::Models => {
            cmd_models(&out);
            Ok(())
        }
    }
}

fn require_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this subcommand needs --config <FILE>".into()))?;
    RunConfig::load(path)
}

/// Where files go and whether the summary is printed.
pub struct Output {
    pub dir: PathBuf,
    pub quiet: bool,
}

impl Output {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn path(&self, name: &Path) -> PathBuf {
        if name.is_absolute() {
            name.to_path_buf()
        } else {
            self.dir.join(name)
        }
    }

    fn create(&self, name: &Path) -> Result<BufWriter<File>, CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|err| {
                CliError::Config(format!("cannot create {}: {err}", parent.display()))
            })?;
        }
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|err| CliError::Config(format!("cannot write {}: {err}", path.display())))
    }
}

fn write_failed(what: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("writing {what}: {err}"))
}

pub fn cmd_run(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let traj = scheme::run(
        &model.initial,
        &cfg.scheme,
        &model.force,
        &model.metric,
        &model.constraint,
    )
    .map_err(|err| CliError::Config(format!("scheme: {err}")))?;

    // Outputs are written before reporting a failure so the partial trajectory is kept.
    let table = TrajectoryTable::from_trajectory(&traj, &model.constraint, &model.metric)
        .map_err(|err| CliError::Numerical(err.to_string()))?;
    table
        .write_csv(out.create(&cfg.outputs.trajectory)?)
        .map_err(|err| write_failed("trajectory", err))?;
    let impacts = analysis::detect_impacts(&traj, &model.constraint, &model.metric)
        .map_err(|err| CliError::Numerical(err.to_string()))?;
    csvio::write_impacts_csv(&impacts, model.dim, out.create(&cfg.outputs.impacts)?)
        .map_err(|err| write_failed("impacts", err))?;

    out.say(format!(
        "model {} (d = {}), h = {:e}, e = {}, {} rows, {} active steps, {} impacts",
        model.name,
        model.dim,
        cfg.scheme.h,
        cfg.scheme.e,
        traj.samples.len(),
        traj.active_steps(),
        impacts.events.len()
    ));
    if let Some(first) = impacts.events.first() {
        out.say(format!(
            "first impact at t = {:.6}, measured e = {}",
            first.t,
            first
                .measured_e
                .map_or("graze".to_string(), |e| format!("{e:.6}"))
        ));
    }
    let drift = scheme::max_feasibility_drift(&traj, &model.constraint)
        .map_err(|err| CliError::Numerical(err.to_string()))?;
    let vmax = traj.samples.iter().map(|s| s.v.norm()).fold(0.0, f64::max);
    out.say(format!(
        "max distance to K {drift:.3e} (bound (max|V| + 1) h = {:.3e})",
        (vmax + 1.0) * cfg.scheme.h
    ));
    for warning in impacts.warnings() {
        eprintln!("warning: {warning}");
    }

    if cfg.oracle {
        run_oracle(cfg, &model, out)?;
    }

    match &traj.failure {
        None => {
            out.say(format!(
                "wrote {} and {}",
                out.path(&cfg.outputs.trajectory).display(),
                out.path(&cfg.outputs.impacts).display()
            ));
            Ok(())
        }
        Some(failure) => Err(CliError::Numerical(format!(
            "{}; partial trajectory ({} rows) written to {}",
            failure.error,
            traj.samples.len(),
            out.path(&cfg.outputs.trajectory).display()
        ))),
    }
}

fn run_oracle(cfg: &RunConfig, model: &ModelDescriptor, out: &Output) -> Result<(), CliError> {
    let result = oracle::integrate_event_driven(
        &model.initial,
        &model.force,
        &model.metric,
        &model.constraint,
        cfg.scheme.e,
        &EventDrivenConfig::default(),
        cfg.scheme.t_end,
    )
    .map_err(|err| CliError::Numerical(format!("event-driven oracle: {err}")))?;
    write_oracle_csv(&result, model.dim, out.create(&cfg.outputs.oracle)?)?;
    let status = match result.status {
        OracleStatus::Completed => "completed".to_string(),
        OracleStatus::ZenoStop { t } => format!("zeno-stop at t = {t:.6}"),
        OracleStatus::ZenoOverflow { t } => format!("zeno-overflow at t = {t:.6}"),
    };
    out.say(format!(
        "event-driven oracle: {} impacts, {status}; wrote {}",
        result.impacts.len(),
        out.path(&cfg.outputs.oracle).display()
    ));
    Ok(())
}

fn write_oracle_csv(
    traj: &OracleTrajectory,
    dim: usize,
    mut w: impl Write,
) -> Result<(), CliError> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=dim).map(|i| format!("u_{i}")));
    header.extend((1..=dim).map(|i| format!("v_{i}")));
    writeln!(w, "{}", header.join(",")).map_err(|err| write_failed("oracle trajectory", err))?;
    for s in &traj.samples {
        let mut fields = vec![format_float(s.t)];
        fields.extend(s.u.iter().chain(s.v.iter()).map(|x| format_float(*x)));
        writeln!(w, "{}", fields.join(","))
            .map_err(|err| write_failed("oracle trajectory", err))?;
    }
    w.flush()
        .map_err(|err| write_failed("oracle trajectory", err))
}

/// Threads for a sweep of `jobs` runs: `IMPACTSIM_THREADS` if set, capped at `jobs`.
pub fn thread_count(jobs: usize) -> Result<usize, CliError> {
    let jobs = jobs.max(1);
    match std::env::var(THREADS_ENV) {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(jobs)),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {raw:?}"
            ))),
        },
        Err(_) => Ok(jobs),
    }
}

pub fn cmd_converge(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    cfg.check_convergence()?;
    let horizon = cfg.horizon();
    let problem = ConvergenceProblem {
        cs: model.constraint.clone(),
        metric: model.metric.clone(),
        force: model.force.clone(),
        data: model.initial.clone(),
        scheme: SchemeConfig {
            t_end: horizon,
            ..cfg.scheme.clone()
        },
        horizon,
    };
    let reference = match (cfg.convergence.reference_kind(&model), model.closed_form) {
        (ReferenceKind::Oracle, Some(ball)) => Reference::Oracle {
            position: Arc::new(move |t| Vector::from_element(1, ball.state_at(t).0)),
            first_impact: Some(ball.first_impact_time()),
        },
        _ => Reference::FinestGrid {
            refinement: cfg.convergence.refinement,
        },
    };
    let threads = thread_count(cfg.convergence.h_values.len())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|err| CliError::Config(format!("thread pool: {err}")))?;
    let report = pool
        .install(|| analysis::convergence_study(&problem, &cfg.convergence.h_values, &reference))
        .map_err(|err| match err {
            analysis::AnalysisError::InvalidSweep(msg) => {
                CliError::Config(format!("convergence: {msg}"))
            }
            other => CliError::Numerical(other.to_string()),
        })?;

    csvio::write_convergence_csv(&report, out.create(&cfg.outputs.convergence)?)
        .map_err(|err| write_failed("convergence", err))?;
    let summary = convergence_summary(&model, &report, horizon);
    let mut file = out.create(&cfg.outputs.summary)?;
    file.write_all(summary.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|err| write_failed("summary", err))?;
    out.say(summary.trim_end());

    if report.is_partial() {
        return Err(CliError::Numerical(format!(
            "{} of {} runs failed; see {}",
            report.rows.iter().filter(|r| r.failure.is_some()).count(),
            report.rows.len(),
            out.path(&cfg.outputs.summary).display()
        )));
    }
    Ok(())
}

fn convergence_summary(
    model: &ModelDescriptor,
    report: &ConvergenceReport,
    horizon: f64,
) -> String {
    let reference = match report.reference {
        ReferenceKind::Oracle => "closed-form",
        ReferenceKind::FinestGrid => "finest-grid",
    };
    let mut s = format!(
        "model={} horizon={horizon} reference={reference}\n",
        model.name
    );
    for row in &report.rows {
        let err = row
            .sup_err
            .map_or("NaN".to_string(), |e| format!("{e:.6e}"));
        s.push_str(&format!("h={:e} sup_err={err}", row.h));
        if let Some(failure) = &row.failure {
            s.push_str(&format!(" FAILED: {failure}"));
        }
        s.push('\n');
    }
    match report.observed_order {
        Some(order) => s.push_str(&format!("observed_order={order:.4}\n")),
        None => s.push_str("observed_order=NaN\n"),
    }
    s
}

pub fn cmd_lemma_check(
    count: usize,
    steps: usize,
    seed: u64,
    out: &Output,
) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if steps < 3 {
        return Err(CliError::Usage("--steps must be at least 3".into()));
    }
    let report = scheme::lemma_suite(count, steps, seed);
    if let Some((case, violation)) = &report.first_counterexample {
        println!("first counterexample: case {case}, {violation}");
        return Err(CliError::Numerical(format!(
            "velocity bound violated in {} of {} cases (seed {seed})",
            report.failures, report.cases
        )));
    }
    out.say(format!(
        "velocity bound holds: {} cases x {} steps, seed {seed}",
        report.cases, report.steps
    ));
    Ok(())
}

pub fn cmd_models(out: &Output) {
    for (name, description) in models::catalog() {
        out.say(format!("{name:<14} {description}"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 2);
    }
}
