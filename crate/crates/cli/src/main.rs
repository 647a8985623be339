//! `cbc`: run simulator scenarios and write metrics, gap histograms and
//! transcripts.
//!
//! Exit status: 0 on success, 1 for configuration or I/O problems, 2 when a
//! finished run breaks a protocol invariant.

mod audit;
mod output;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cbc_core::adversary::{forge_probability, Adv1Tap, AdversaryKind};
use cbc_core::channel::{min_confirmations, ChannelMode, RequestChannel};
use cbc_core::sim::{run, SimOutput};
use cbc_core::{Chain, SystemId, Transaction};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use output::{ForgeRow, MetricsRow};
use scenario::{RunSpec, ScenarioFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Invariant(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "cbc", version, about = "Cross-chain task simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (or every point of its sweep).
    Run {
        scenario: PathBuf,
        #[arg(long, env = "CBC_OUT_DIR", default_value = ".")]
        out: PathBuf,
        /// Replace the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Sweep points to run at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Run an adversarial scenario and write its detection report.
    Attack {
        scenario: PathBuf,
        #[arg(long, env = "CBC_OUT_DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Print a scenario file with every parameter at its default.
    PrintConfig,
}

fn simulate(spec: &RunSpec) -> Result<SimOutput, CliError> {
    run(&spec.config).map_err(|e| CliError::Config(format!("{}: {e}", spec.label)))
}

fn write_run(out_dir: &Path, spec: &RunSpec, out: &SimOutput) -> Result<(), CliError> {
    output::write_gaps(&out_dir.join(format!("{}.gaps.csv", spec.label)), &out.metrics)?;
    output::write_transcript(&out_dir.join(format!("{}.transcript.jsonl", spec.label)), &out.transcript)
}

fn prepare(out_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))
}

fn cmd_run(path: &Path, out_dir: &Path, seed: Option<u64>, parallel: usize) -> Result<(), CliError> {
    let scenario = ScenarioFile::load(path)?;
    let runs = scenario.runs(seed)?;
    prepare(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let results: Vec<Result<SimOutput, CliError>> = pool.install(|| runs.par_iter().map(simulate).collect());

    let mut rows = Vec::with_capacity(runs.len());
    let mut violation = None;
    for (spec, res) in runs.iter().zip(results) {
        let out = res?;
        write_run(out_dir, spec, &out)?;
        rows.push(MetricsRow::new(&spec.config, &out.metrics));
        println!(
            "{}: requests {} gossips {} tasks {} mean gap {:.2}",
            spec.label,
            out.metrics.requests(),
            out.metrics.gossips(),
            out.metrics.tasks_started,
            out.metrics.mean_gap()
        );
        if let Err(e) = audit::check(&out) {
            violation.get_or_insert(e);
        }
    }
    output::write_rows(&out_dir.join(format!("{}.metrics.csv", scenario.name)), &rows)?;
    violation.map_or(Ok(()), Err)
}

/// Monte Carlo of Adv1 forgeries on one channel, one row per target probability.
fn forge_sweep(scenario: &ScenarioFile, spec: &RunSpec) -> Result<Vec<ForgeRow>, CliError> {
    let dir = spec.config.directory();
    let adv = &spec.config.adversary;
    let sys = dir.iter().find(|c| adv.controlled_nodes(c) > 0).unwrap_or(&dir[0]);
    let controlled = adv.controlled_nodes(sys);
    let mut responder = Chain::new(sys.clone());
    for _ in 0..=sys.t + 1 {
        responder.commit(Vec::new()).map_err(|e| CliError::Config(e.to_string()))?;
    }
    let probe = Transaction::local(b"forge-probe".to_vec(), Vec::new(), sys.id);
    let mut rows = Vec::new();
    for (i, &p) in scenario.forge_targets.iter().enumerate() {
        let m = min_confirmations(sys.q, sys.r, p).map_err(|e| CliError::Config(e.to_string()))?.m;
        let tap = Adv1Tap { q: sys.q, r: sys.r, controlled, m };
        let mut ch = RequestChannel::new(SystemId(u16::MAX), sys.id, spec.config.channel_mode);
        ch.interceptor = Some(tap);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.config.seed.wrapping_add(i as u64));
        let mut forged = 0u64;
        for _ in 0..scenario.forge_requests {
            let reply =
                ch.send_check(&responder, &[probe.id], &mut rng).map_err(|e| CliError::Config(e.to_string()))?;
            forged += reply.forged as u64;
        }
        let n = scenario.forge_requests.max(1) as f64;
        rows.push(ForgeRow {
            p_target: p,
            q: sys.q,
            r: sys.r,
            controlled,
            m,
            closed_form: forge_probability(&tap, ChannelMode::PermissionedSampled),
            empirical: forged as f64 / n,
            bound: p + 3.0 * (p * (1.0 - p) / n).sqrt(),
            requests: scenario.forge_requests,
        });
    }
    Ok(rows)
}

fn cmd_attack(path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let scenario = ScenarioFile::load(path)?;
    let runs = scenario.runs(None)?;
    if runs.iter().any(|r| r.config.adversary.kind == AdversaryKind::None) {
        return Err(CliError::Config("attack scenarios need an adversary".into()));
    }
    prepare(out_dir)?;
    let mut rows = Vec::new();
    let mut violation = None;
    for spec in &runs {
        let out = simulate(spec)?;
        write_run(out_dir, spec, &out)?;
        rows.push(MetricsRow::new(&spec.config, &out.metrics));
        if let Some(report) = &out.attack {
            output::write_report(&out_dir.join(format!("{}.attack.json", spec.label)), report)?;
            println!(
                "{}: detected {} at tick {:?}, evidence {}, victims {:?}, double completion {}",
                spec.label,
                report.detected,
                report.detection_tick,
                report.evidence_count,
                report.victim_outcomes,
                report.double_completion
            );
        }
        if spec.config.adversary.kind == AdversaryKind::Adv1 {
            let forge = forge_sweep(&scenario, spec)?;
            for row in &forge {
                println!(
                    "{}: p {} m {} forged {:.5} (closed form {:.5}, bound {:.5})",
                    spec.label, row.p_target, row.m, row.empirical, row.closed_form, row.bound
                );
            }
            output::write_rows(&out_dir.join(format!("{}.forge.csv", spec.label)), &forge)?;
            println!("{}: {} forged answers accepted in-run", spec.label, out.metrics.forged_accepted);
        }
        if let Err(e) = audit::check(&out) {
            violation.get_or_insert(e);
        }
    }
    output::write_rows(&out_dir.join(format!("{}.metrics.csv", scenario.name)), &rows)?;
    violation.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run { scenario, out, seed, parallel } => cmd_run(&scenario, &out, seed, parallel),
        Command::Attack { scenario, out } => cmd_attack(&scenario, &out),
        Command::PrintConfig => {
            let text = serde_json::to_string_pretty(&ScenarioFile::default()).expect("serializable");
            println!("{text}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cbc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
