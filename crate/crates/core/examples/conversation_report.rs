//! Builds the analytics report from an event log, either a file given on the
//! command line or a freshly simulated cohort.

use jit_feedback::analytics::{build_report, ReportOptions};
use jit_feedback::service::events::read_log;
use jit_feedback::sim::{simulate_to_log, SimConfig};

#[tokio::main]
async fn main() {
    let records = match std::env::args().nth(1) {
        Some(path) => read_log(path.as_ref()).expect("readable log"),
        None => {
            let (log, _) = simulate_to_log(&SimConfig::default(), None).await.expect("simulation");
            log.snapshot().to_vec()
        }
    };
    let report = build_report(
        &records,
        ReportOptions {
            collapse_trajectories: true,
        },
    )
    .expect("report");
    print!("{}", report.to_text());
}
