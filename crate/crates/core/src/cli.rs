//! The `jitfb` command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::analytics::{build_report, ReportOptions};
use crate::classifier::{
    evaluate, evaluate_baseline, render_table, ClassificationStrategy, LabeledDataset, LabeledItem,
};
use crate::config::{Fields, ServeConfig};
use crate::domain::{ErrorLabel, FewShotExample};
use crate::gateway::Gateway;
use crate::io::{read_jsonl, read_to_string};
use crate::service::events::{read_log, replay};
use crate::service::http::{serve, AppState};
use crate::service::{EventLog, ServiceOptions, SessionService};
use crate::sim::{simulate_to_log, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "jitfb",
    version,
    about = "Just-in-time feedback service for student strategy essays"
)]
pub struct Cli {
    /// Output format for read-only commands.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service until interrupted.
    Serve {
        /// key=value config file; JITFB_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `bind` from the config.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Evaluate classification strategies on a labeled dataset.
    Eval {
        /// JSONL of {"essay", "label"} items.
        #[arg(long)]
        dataset: PathBuf,
        /// Backend, gateway and quiz settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Passes over the dataset per strategy.
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Also report the lexical nearest-example baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Run a seeded student cohort and write its event log.
    Simulate {
        /// Simulator settings (n_students, seed, p_continue, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Event log to write (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyze an event log.
    Report {
        /// Event log (JSONL).
        #[arg(long)]
        log: PathBuf,
        /// Also write plot-ready CSV files here.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
        /// Merge repeated consecutive labels in trajectory paths.
        #[arg(long)]
        collapse: bool,
    },
    /// Check a few-shot bank against the prompt's per-label requirement.
    ValidateBank {
        /// Few-shot bank (JSONL).
        #[arg(long)]
        bank: PathBuf,
        /// Examples required per label.
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Rebuild sessions from a log and report integrity.
    Replay {
        /// Event log (JSONL).
        #[arg(long)]
        log: PathBuf,
    },
}

/// Runs the CLI against the process's standard streams.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Like [`run`], writing to the given streams. `argv[0]` is the program name.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    2
                }
            };
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 1;
        }
    };
    match runtime.block_on(execute(cli, out)) {
        Ok(code) => code,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

type CmdResult = Result<i32, String>;

fn print(out: &mut dyn Write, text: &str) -> CmdResult {
    out.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    Ok(0)
}

fn serve_config(path: Option<&Path>) -> Result<ServeConfig, String> {
    ServeConfig::load(path, std::env::vars()).map_err(|e| e.to_string())
}

async fn execute(cli: Cli, out: &mut dyn Write) -> CmdResult {
    let format = cli.format;
    match cli.command {
        Command::Serve { config, bind } => cmd_serve(config.as_deref(), bind, out).await,
        Command::Eval {
            dataset,
            config,
            trials,
            baseline,
        } => cmd_eval(&dataset, config.as_deref(), trials, baseline, format, out).await,
        Command::Simulate { config, out: log_path } => cmd_simulate(config.as_deref(), &log_path, format, out).await,
        Command::Report { log, csv_dir, collapse } => cmd_report(&log, csv_dir.as_deref(), collapse, format, out),
        Command::ValidateBank { bank, k } => cmd_validate_bank(&bank, k, format, out),
        Command::Replay { log } => cmd_replay(&log, format, out),
    }
}

async fn cmd_serve(config: Option<&Path>, bind: Option<String>, out: &mut dyn Write) -> CmdResult {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .try_init();
    let mut cfg = serve_config(config)?;
    if let Some(b) = bind {
        cfg.bind = b;
    }
    let quizzes = cfg.quizzes().map_err(|e| e.to_string())?;
    let bank = cfg.bank().map_err(|e| e.to_string())?;
    let backend = cfg.backend(&bank).map_err(|e| e.to_string())?;
    let gateway = Gateway::new(backend, cfg.gateway.clone()).map_err(|e| e.to_string())?;
    let log = EventLog::open(&cfg.log_path).map_err(|e| e.to_string())?;
    let options = ServiceOptions {
        strategy: cfg.strategy,
        request: cfg.request.clone(),
        anonymization_key: cfg.anonymization_key.clone(),
        id_nonce: cfg.id_nonce.clone(),
    };
    let service = SessionService::new(quizzes, bank, Arc::new(gateway), log, options).map_err(|e| e.to_string())?;
    let listener = tokio::net::TcpListener::bind(&cfg.bind)
        .await
        .map_err(|e| format!("bind {}: {e}", cfg.bind))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let _ = writeln!(out, "listening on http://{addr}");
    let _ = out.flush();
    tracing::info!(%addr, log = %cfg.log_path.display(), "serving");
    let state = AppState::new(Arc::new(service), cfg.admin_token.clone());
    serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
    .map_err(|e| e.to_string())?;
    Ok(0)
}

async fn cmd_eval(
    dataset: &Path,
    config: Option<&Path>,
    trials: usize,
    baseline: bool,
    format: Format,
    out: &mut dyn Write,
) -> CmdResult {
    let cfg = serve_config(config)?;
    let items: Vec<LabeledItem> = read_jsonl(dataset).map_err(|e| e.to_string())?;
    let dataset = LabeledDataset::new(items).map_err(|e| e.to_string())?;
    let quizzes = cfg.quizzes().map_err(|e| e.to_string())?;
    let problem = quizzes.first().ok_or("no quiz configured")?;
    let bank = cfg.bank().map_err(|e| e.to_string())?;
    let backend = cfg.backend(&bank).map_err(|e| e.to_string())?;
    let gateway = Gateway::new(backend, cfg.gateway.clone()).map_err(|e| e.to_string())?;
    let k = cfg.strategy.k_per_label.max(1);
    let strategies = [
        ClassificationStrategy::zero_shot(false),
        ClassificationStrategy::zero_shot(true),
        ClassificationStrategy::few_shot(k, false),
        ClassificationStrategy::few_shot(k, true),
    ];
    let mut rows = Vec::new();
    if baseline {
        let r = evaluate_baseline(&dataset, &bank).map_err(|e| e.to_string())?;
        rows.push(("Lexical nearest example".to_string(), r));
    }
    for s in &strategies {
        let r = evaluate(&dataset, problem, s, &bank, &gateway, &cfg.request, trials)
            .await
            .map_err(|e| e.to_string())?;
        rows.push((s.display_name(), r));
    }
    match format {
        Format::Text => print(out, &render_table(&rows)),
        Format::Json => {
            let doc: Vec<_> = rows
                .iter()
                .map(|(name, r)| {
                    json!({
                        "method": name,
                        "accuracy_mean": r.accuracy_mean,
                        "accuracy_halfrange": r.accuracy_halfrange,
                        "macro_f1_mean": r.macro_f1_mean,
                        "macro_f1_halfrange": r.macro_f1_halfrange,
                        "trials": r.trials,
                    })
                })
                .collect();
            print(out, &format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")))
        }
    }
}

async fn cmd_simulate(config: Option<&Path>, log_path: &Path, format: Format, out: &mut dyn Write) -> CmdResult {
    let text = match config {
        Some(p) => read_to_string(p).map_err(|e| e.to_string())?,
        None => String::new(),
    };
    let fields = Fields::parse(&text).map_err(|e| e.to_string())?;
    let cfg = SimConfig::from_fields(fields).map_err(|e| e.to_string())?;
    let (log, summary) = simulate_to_log(&cfg, Some(log_path)).await.map_err(|e| e.to_string())?;
    let doc = json!({
        "students": summary.students,
        "turns": summary.turns,
        "degraded_turns": summary.degraded_turns,
        "events": log.len(),
        "log": log_path.display().to_string(),
    });
    match format {
        Format::Json => print(out, &format!("{}\n", serde_json::to_string_pretty(&doc).expect("json"))),
        Format::Text => print(
            out,
            &format!(
                "simulated {} students, {} turns ({} degraded), {} events written to {}\n",
                summary.students,
                summary.turns,
                summary.degraded_turns,
                log.len(),
                log_path.display()
            ),
        ),
    }
}

fn cmd_report(log: &Path, csv_dir: Option<&Path>, collapse: bool, format: Format, out: &mut dyn Write) -> CmdResult {
    let records = read_log(log).map_err(|e| e.to_string())?;
    let report = build_report(
        &records,
        ReportOptions {
            collapse_trajectories: collapse,
        },
    )
    .map_err(|e| e.to_string())?;
    if let Some(dir) = csv_dir {
        report.write_csvs(dir).map_err(|e| e.to_string())?;
    }
    match format {
        Format::Text => print(out, &report.to_text()),
        Format::Json => print(out, &report.to_json()),
    }
}

fn cmd_validate_bank(bank_path: &Path, k: usize, format: Format, out: &mut dyn Write) -> CmdResult {
    let bank: Vec<FewShotExample> = read_jsonl(bank_path).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for (i, ex) in bank.iter().enumerate() {
        if !ex.is_well_formed() {
            problems.push(format!("Malformed(example {})", i + 1));
        }
    }
    let mut counts = [0usize; 4];
    for ex in &bank {
        counts[ex.label.index()] += 1;
    }
    for label in ErrorLabel::ALL {
        let have = counts[label.index()];
        if have < k {
            problems.push(format!("InsufficientBank({label:?}, {have}, {k})"));
        }
    }
    let code = i32::from(!problems.is_empty());
    match format {
        Format::Json => {
            let doc = json!({
                "examples": bank.len(),
                "per_label": ErrorLabel::ALL.iter().map(|l| (l.as_str(), counts[l.index()])).collect::<std::collections::BTreeMap<_, _>>(),
                "k": k,
                "problems": problems,
            });
            print(out, &format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")))?;
        }
        Format::Text => {
            let mut text = format!("{} examples", bank.len());
            for l in ErrorLabel::ALL {
                text.push_str(&format!(", {} {}", counts[l.index()], l));
            }
            text.push('\n');
            for p in &problems {
                text.push_str(p);
                text.push('\n');
            }
            if problems.is_empty() {
                text.push_str(&format!("ok for k = {k}\n"));
            }
            print(out, &text)?;
        }
    }
    Ok(code)
}

fn cmd_replay(log: &Path, format: Format, out: &mut dyn Write) -> CmdResult {
    let records = read_log(log).map_err(|e| e.to_string())?;
    let state = replay(&records).map_err(|e| format!("integrity check failed: {e}"))?;
    let turns: usize = state.sessions.iter().map(|s| s.turns.len()).sum();
    let answered = state.sessions.iter().filter(|s| s.final_answer.is_some()).count();
    let surveys = state.sessions.iter().filter(|s| s.survey.is_some()).count();
    let chosen = state.preferences.values().filter(|p| p.chosen.is_some()).count();
    let doc = json!({
        "ok": true,
        "events": records.len(),
        "sessions": state.sessions.len(),
        "turns": turns,
        "answered": answered,
        "surveys": surveys,
        "posthoc": state.preferences.len(),
        "preferences": chosen,
    });
    match format {
        Format::Json => print(out, &format!("{}\n", serde_json::to_string_pretty(&doc).expect("json"))),
        Format::Text => print(
            out,
            &format!(
                "ok: {} events, {} sessions, {} turns, {} answered, {} surveys, {} post-hoc, {} preferences\n",
                records.len(),
                state.sessions.len(),
                turns,
                answered,
                surveys,
                state.preferences.len(),
                chosen
            ),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("jitfb").chain(args.iter().copied());
        let code = run_with(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_two() {
        let (code, out, err) = run_capture(&["eval"]);
        assert_eq!(code, 2);
        assert!(out.is_empty());
        assert!(err.contains("--dataset"));
        assert_eq!(run_capture(&["report", "--log", "x", "--bogus"]).0, 2);
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&["--help"]).0, 0);
    }

    #[test]
    fn validate_bank_reports_shortfall() {
        let dir = tempfile::tempdir().unwrap();
        let bank: Vec<FewShotExample> = crate::assets::sample_bank();
        let mut dropped = false;
        let short: Vec<_> = bank
            .into_iter()
            .filter(|e| {
                if e.label == ErrorLabel::Position && !dropped {
                    dropped = true;
                    return false;
                }
                true
            })
            .collect();
        let path = dir.path().join("bank.jsonl");
        std::fs::write(&path, crate::io::to_jsonl(&short)).unwrap();
        let (code, out, _) = run_capture(&["validate-bank", "--bank", path.to_str().unwrap(), "--k", "3"]);
        assert_eq!(code, 1);
        assert!(out.contains("InsufficientBank(Position, 2, 3)"), "{out}");
        let (code, _, _) = run_capture(&["validate-bank", "--bank", path.to_str().unwrap(), "--k", "2"]);
        assert_eq!(code, 0);
    }

    #[test]
    fn simulate_report_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("sim.conf");
        std::fs::write(&cfg, "n_students = 60\nseed = 3\np_continue_first = 0.6\n").unwrap();
        let log = dir.path().join("events.jsonl");
        let (code, _, err) = run_capture(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            log.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        let (code, text, _) = run_capture(&["report", "--log", log.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(text.contains("Conversational instances"));
        let (code, json_out, _) = run_capture(&["--format", "json", "report", "--log", log.to_str().unwrap()]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&json_out).unwrap();
        assert_eq!(v["conversation"]["total_instances"], 60);
        let (code, out, _) = run_capture(&["replay", "--log", log.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(out.starts_with("ok:"));
        let (code, _, err) = run_capture(&["report", "--log", dir.path().join("missing").to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error:"));
    }

    #[test]
    fn eval_runs_offline() {
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<LabeledItem> = crate::assets::sample_bank()
            .into_iter()
            .map(|e| LabeledItem {
                essay_text: e.essay_text,
                gold_label: e.label,
            })
            .collect();
        let path = dir.path().join("ds.jsonl");
        std::fs::write(&path, crate::io::to_jsonl(&items)).unwrap();
        let (code, out, err) = run_capture(&[
            "eval",
            "--dataset",
            path.to_str().unwrap(),
            "--trials",
            "1",
            "--baseline",
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("Few-shot"), "{out}");
        assert!(out.contains("100.00 ±0.000"));
    }
}
