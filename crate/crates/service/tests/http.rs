use std::net::SocketAddr;
use std::time::{Duration, Instant};

use holomask_api::{encode_image, SolveRequest, StreamQuery, Target};
use holomask_client::{Client, StreamEvent};
use holomask_core::patterns::{encode_png8, SpotSpec};
use holomask_core::{GridSpec, PrecisionTag, StopReason};
use holomask_service::{spawn, Running, ServiceConfig};

fn config() -> ServiceConfig {
    ServiceConfig {
        bind: SocketAddr::from(([127, 0, 0, 1], 0)),
        max_concurrent: 4,
        ..Default::default()
    }
}

async fn start() -> (Running, Client) {
    start_with(config()).await
}

async fn start_with(config: ServiceConfig) -> (Running, Client) {
    let running = spawn(config).await.unwrap();
    let client = Client::new(running.url());
    (running, client)
}

fn grid(nx: usize, ny: usize) -> GridSpec {
    GridSpec::new(nx, ny).unwrap()
}

fn nine_spots(size: GridSpec, iters: usize) -> SolveRequest {
    let spec = SpotSpec::scattered(size, 9, 1).unwrap();
    let centers: Vec<_> = spec.spots.iter().map(|s| (s.j, s.k)).collect();
    let mut req = SolveRequest::spots(size, &centers);
    req.iters = iters;
    req
}

fn gaps(records: &[holomask_api::ProgressEvent]) -> Vec<u64> {
    records.iter().map(|r| r.gap.to_bits()).collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn solve_fills_every_field_and_repeats_bitwise() {
    let (svc, client) = start().await;
    let req = nine_spots(grid(256, 256), 5);
    let first = client.solve(&req).await.unwrap();

    assert_eq!(first.size, grid(256, 256));
    assert_eq!(first.iters_run, 5);
    assert_eq!(first.history.len(), 5);
    assert_eq!(first.stop_reason, StopReason::MaxIters);
    assert_eq!(first.precision, PrecisionTag::Double);
    assert_eq!(first.metrics.gap, first.history[4].gap);
    assert!(first.metrics.gap > 0.0 && first.metrics.err_lit >= 0.0 && first.metrics.err_dark >= 0.0);
    assert!(first.metrics.contrast.unwrap() > 1.0);
    assert_eq!(first.mask_codes().unwrap().len(), 256 * 256);
    assert_eq!(first.reconstruction_log_codes().unwrap().len(), 256 * 256);
    assert_eq!(first.reconstruction_linear_codes().unwrap().len(), 256 * 256);
    let t = first.timing;
    for v in [t.ingest_ms, t.plan_ms, t.per_iter_ms, t.fft_ms, t.constraint_ms, t.solve_ms, t.total_ms] {
        assert!(v.is_finite() && v >= 0.0);
    }
    assert_eq!(first.budget_met, t.total_ms <= first.budget_ms);
    assert!(!t.plan_cache_hit);

    let second = client.solve(&req).await.unwrap();
    assert_eq!(second.mask_png, first.mask_png);
    assert_eq!(second.mask_codes().unwrap(), first.mask_codes().unwrap());
    assert_eq!(gaps(&second.history), gaps(&first.history));
    // The second solve of a size reuses the plan.
    assert!(second.timing.plan_cache_hit);
    assert!(second.timing.plan_ms <= first.timing.plan_ms);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn all_dark_target_is_unprocessable() {
    let (svc, client) = start().await;
    let size = grid(32, 32);
    let png = encode_png8(size, &vec![0; 32 * 32]).unwrap();
    let req = SolveRequest::new(size, Target::Image { data: encode_image(&png) });
    let err = client.solve(&req).await.unwrap_err();
    assert_eq!(err.status(), Some(422));
    let err = client.stream(&req).await.err().unwrap();
    assert_eq!(err.status(), Some(422));
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_requests_get_their_status() {
    let (svc, client) = start_with(ServiceConfig {
        max_body_bytes: 64 * 1024,
        ..config()
    })
    .await;
    let http = reqwest::Client::new();
    let post = |body: String| http.post(format!("{}/api/solve", svc.url())).header("content-type", "application/json").body(body).send();

    assert_eq!(post("{not json".into()).await.unwrap().status(), 400);
    assert_eq!(post(r#"{"size":"8x8","target":{"kind":"pattern","name":"siemens"},"colour":1}"#.into()).await.unwrap().status(), 400);
    let status = post(r#"{"size":"8x8","target":{"kind":"spots","spots":[{"j":9,"k":0}]}}"#.into()).await.unwrap().status();
    assert_eq!(status, 400);
    // Grid over the size cap, and a body over the byte cap.
    let status = post(r#"{"size":"5000x5000","target":{"kind":"pattern","name":"siemens"}}"#.into()).await.unwrap().status();
    assert_eq!(status, 413);
    let huge = format!(r#"{{"size":"8x8","target":{{"kind":"image","data":"{}"}}}}"#, "A".repeat(100 * 1024));
    assert_eq!(post(huge).await.unwrap().status(), 413);

    let resp = http.get(format!("{}/api/nope", svc.url())).send().await.unwrap();
    assert_eq!(resp.status(), 404);
    let body: holomask_api::ErrorBody = resp.json().await.unwrap();
    assert_eq!(body.status, 404);

    let q = StreamQuery {
        size: "8x8".into(),
        ..Default::default()
    };
    assert_eq!(client.stream_query(&q).await.err().unwrap().status(), Some(400));
    let resp = http.get(format!("{}/api/solve/stream?size=8x8&bogus=1", svc.url())).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn stream_sends_one_event_per_record_then_final() {
    let (svc, client) = start().await;
    let mut req = nine_spots(grid(64, 64), 3);
    req.record_every = 1;

    let query = StreamQuery::from_request(&req).unwrap();
    let mut stream = client.stream_query(&query).await.unwrap();
    let mut events = Vec::new();
    while let Some(ev) = stream.next().await {
        events.push(ev.unwrap());
    }
    assert_eq!(events.len(), 4);
    for (i, ev) in events[..3].iter().enumerate() {
        assert!(matches!(ev, StreamEvent::Progress(r) if r.iter == i + 1), "{ev:?}");
    }
    assert!(matches!(&events[3], StreamEvent::Final(r) if r.iters_run == 3));

    // Records every other iteration: 1, 3, 5, 7 and the final one.
    req.iters = 8;
    req.record_every = 2;
    let (progress, done) = client.stream(&req).await.unwrap().finish().await.unwrap();
    assert_eq!(progress.len(), done.history.len());
    assert!(progress.windows(2).all(|w| w[0].iter < w[1].iter));
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn streamed_gaps_match_a_direct_solve_bitwise() {
    let (svc, client) = start().await;
    let req = nine_spots(grid(256, 256), 25);
    let direct = client.solve(&req).await.unwrap();

    let query = StreamQuery::from_request(&req).unwrap();
    let (progress, done) = client.stream_query(&query).await.unwrap().finish().await.unwrap();
    assert_eq!(gaps(&progress), gaps(&direct.history));
    assert_eq!(gaps(&done.history), gaps(&direct.history));
    assert_eq!(done.mask_codes().unwrap(), direct.mask_codes().unwrap());
    assert_eq!(done.reconstruction_log_png, direct.reconstruction_log_png);

    let (posted, _) = client.stream(&req).await.unwrap().finish().await.unwrap();
    assert_eq!(gaps(&posted), gaps(&direct.history));
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn disconnect_stops_the_solve_and_frees_the_stream() {
    let (svc, client) = start().await;
    let baseline = client.health().await.unwrap();
    assert_eq!(baseline.active_streams, 0);

    // Far longer than the test would wait if the solve kept running.
    let req = nine_spots(grid(128, 128), holomask_api::MAX_ITERS);
    let mut stream = client.stream(&req).await.unwrap();
    let first = stream.next().await.unwrap().unwrap();
    assert!(matches!(first, StreamEvent::Progress(r) if r.iter == 1));
    assert_eq!(client.health().await.unwrap().active_streams, 1);
    drop(stream);

    let start = Instant::now();
    loop {
        let h = client.health().await.unwrap();
        if h.active_streams == baseline.active_streams {
            assert_eq!(h.solves_completed, baseline.solves_completed);
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(10), "stream still active: {h:?}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    // The slot is free again.
    client.solve(&nine_spots(grid(32, 32), 2)).await.unwrap();
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_sizes_match_single_client_results() {
    let (svc, client) = start().await;
    let reqs: Vec<SolveRequest> = [grid(64, 64), grid(96, 80), grid(128, 128), grid(50, 70)]
        .into_iter()
        .map(|g| {
            let mut r = nine_spots(g, 10);
            r.precision = PrecisionTag::Single;
            r
        })
        .collect();
    let mut golden = Vec::new();
    for r in &reqs {
        golden.push(client.solve(r).await.unwrap());
    }

    let mut tasks = Vec::new();
    for round in 0..3 {
        for (i, r) in reqs.iter().enumerate() {
            let (client, r) = (client.clone(), r.clone());
            tasks.push(tokio::spawn(async move {
                let resp = if round % 2 == 0 {
                    client.solve(&r).await.unwrap()
                } else {
                    client.stream(&r).await.unwrap().finish().await.unwrap().1
                };
                (i, resp)
            }));
        }
    }
    for task in tasks {
        let (i, resp) = task.await.unwrap();
        assert_eq!(resp.mask_codes().unwrap(), golden[i].mask_codes().unwrap(), "request {i}");
        assert_eq!(gaps(&resp.history), gaps(&golden[i].history));
    }
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_fresh_and_busy_service() {
    let (svc, client) = start().await;
    let h = client.health().await.unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.version, env!("CARGO_PKG_VERSION"));
    assert_eq!((h.plan_cache.entries, h.plan_cache.hits, h.plan_cache.misses), (0, 0, 0));
    assert_eq!(h.solves_completed, 0);
    assert_eq!(h.budget_ms, 10.0);

    let req = nine_spots(grid(16, 16), 1);
    for _ in 0..100 {
        client.solve(&req).await.unwrap();
    }
    let h = client.health().await.unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.solves_completed, 100);
    assert_eq!((h.plan_cache.entries, h.plan_cache.hits, h.plan_cache.misses), (1, 99, 1));
    assert_eq!(h.active_streams, 0);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn deadline_ships_the_current_mask() {
    let (svc, client) = start().await;
    let mut req = nine_spots(grid(64, 64), 1000);
    req.deadline_ms = Some(0.0);
    let resp = client.solve(&req).await.unwrap();
    assert_eq!(resp.stop_reason, StopReason::Deadline);
    assert!(resp.iters_run >= 1 && resp.iters_run < 1000);
    assert_eq!(resp.mask_codes().unwrap().len(), 64 * 64);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn budget_flag_follows_the_configured_budget() {
    let (svc, client) = start_with(ServiceConfig {
        budget_ms: 1e9,
        ..config()
    })
    .await;
    let resp = client.solve(&nine_spots(grid(32, 32), 2)).await.unwrap();
    assert!(resp.budget_met && resp.budget_ms == 1e9);
    svc.stop().await.unwrap();

    let (svc, client) = start_with(ServiceConfig {
        budget_ms: 0.0,
        ..config()
    })
    .await;
    assert!(!client.solve(&nine_spots(grid(32, 32), 2)).await.unwrap().budget_met);
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_admits_local_pages_only() {
    let (svc, _) = start().await;
    let http = reqwest::Client::new();
    let preflight = |origin: &'static str| {
        http.request(reqwest::Method::OPTIONS, format!("{}/api/solve", svc.url()))
            .header("origin", origin)
            .header("access-control-request-method", "POST")
            .header("access-control-request-headers", "content-type")
            .send()
    };
    let ok = preflight("http://localhost:5173").await.unwrap();
    assert_eq!(ok.headers()["access-control-allow-origin"], "http://localhost:5173");
    let denied = preflight("http://example.com").await.unwrap();
    assert!(denied.headers().get("access-control-allow-origin").is_none());
    svc.stop().await.unwrap();
}
