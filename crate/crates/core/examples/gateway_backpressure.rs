//! Floods a small gateway and shows admission control, rate limiting and the
//! degraded path when a flaky backend exhausts its retries.

use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use jit_feedback::gateway::{CompletionRequest, DispatchOutcome, Gateway, GatewayConfig, ScriptedBackend};
use jit_feedback::prompt::{PromptText, TemplateId};

#[tokio::main]
async fn main() {
    let backend = ScriptedBackend::new("flaky")
        .with_default_response("{}")
        .with_latency(Duration::from_millis(40))
        .with_failure_rate(0.3, 9);
    let config = GatewayConfig {
        rate_limit_per_s: 50.0,
        burst: 10,
        max_in_flight: 4,
        retry_limit: 1,
        retry_backoff_ms: vec![20],
        queue_capacity: 16,
    };
    let gateway = Arc::new(Gateway::new(Arc::new(backend), config).expect("valid config"));
    let start = Instant::now();
    let outcomes = join_all((0..40).map(|i| {
        let gateway = gateway.clone();
        async move {
            let request = CompletionRequest::new(
                PromptText::new(format!("request {i}"), TemplateId::Jit),
                format!("req-{i}"),
            );
            gateway.dispatch(&request).await
        }
    }))
    .await;
    let (mut done, mut busy, mut degraded) = (0, 0, 0);
    for o in &outcomes {
        match o {
            DispatchOutcome::Completed(_) => done += 1,
            DispatchOutcome::Busy => busy += 1,
            DispatchOutcome::Degraded { .. } => degraded += 1,
        }
    }
    println!(
        "40 requests in {:.2}s: {done} completed, {degraded} degraded, {busy} busy",
        start.elapsed().as_secs_f64()
    );
    println!("{:?}", gateway.stats());
}
