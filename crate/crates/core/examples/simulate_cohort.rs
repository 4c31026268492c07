//! Simulates a seeded student cohort in process and prints summary figures.
//!
//! ```text
//! cargo run --example simulate_cohort -- 500 /tmp/events.jsonl
//! ```

use std::path::PathBuf;

use jit_feedback::sim::{simulate_to_log, SimConfig};

#[tokio::main]
async fn main() {
    let mut args = std::env::args().skip(1);
    let n_students = args.next().and_then(|n| n.parse().ok()).unwrap_or(300);
    let out = args.next().map(PathBuf::from);
    let config = SimConfig {
        n_students,
        ..SimConfig::default()
    };
    let (log, summary) = simulate_to_log(&config, out.as_deref()).await.expect("simulation");
    println!(
        "{} students, {} turns ({} degraded), {} busy retries, {} events",
        summary.students,
        summary.turns,
        summary.degraded_turns,
        summary.busy_retries,
        log.len()
    );
    let multi = summary.traces.iter().filter(|t| t.hidden_labels.len() > 1).count();
    println!("{multi} students revised at least once");
    if let Some(path) = out {
        println!("log written to {}", path.display());
    }
}
