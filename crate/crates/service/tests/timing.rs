//! Per-iteration time reported by the service against the bench harness on
//! the same cell. Kept in its own binary so no other test competes for cores.

use std::net::SocketAddr;

use holomask_api::SolveRequest;
use holomask_client::Client;
use holomask_core::bench::{bench_target, run_bench, BenchPlan};
use holomask_core::{GridSpec, PrecisionTag, Strategy};
use holomask_service::{spawn, ServiceConfig};

#[tokio::test(flavor = "multi_thread")]
async fn per_iter_time_agrees_with_bench_within_two_times() {
    let size = GridSpec::square(256).unwrap();
    let plan = BenchPlan {
        sizes: vec![size],
        iters: 25,
        repetitions: 5,
        warmup: 1,
        strategies: vec![Strategy::Serial],
        precisions: vec![PrecisionTag::Double],
        seed: 1,
    };
    let bench = run_bench(&plan).unwrap().cells[0].median().unwrap().per_iter_ms;

    let svc = spawn(ServiceConfig {
        bind: SocketAddr::from(([127, 0, 0, 1], 0)),
        ..Default::default()
    })
    .await
    .unwrap();
    let client = Client::new(svc.url());
    let spots: Vec<_> = bench_target(size, 1).unwrap().spots.iter().map(|s| (s.j, s.k)).collect();
    let req = SolveRequest::spots(size, &spots);
    client.solve(&req).await.unwrap();
    let mut served = Vec::new();
    for _ in 0..5 {
        served.push(client.solve(&req).await.unwrap().timing.per_iter_ms);
    }
    served.sort_by(f64::total_cmp);
    let served = served[2];
    let ratio = served / bench;
    assert!((0.5..=2.0).contains(&ratio), "service {served:.4} ms vs bench {bench:.4} ms");
    svc.stop().await.unwrap();
}
