use std::net::SocketAddr;

use holomask_api::{SolveRequest, StreamQuery, Target};
use holomask_client::{Client, ClientError, StreamEvent};
use holomask_core::GridSpec;
use holomask_service::{spawn, ServiceConfig};

async fn service() -> holomask_service::Running {
    spawn(ServiceConfig {
        bind: SocketAddr::from(([127, 0, 0, 1], 0)),
        ..Default::default()
    })
    .await
    .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn streamed_and_direct_payloads_agree_after_decoding() {
    let svc = service().await;
    let client = Client::new(format!("{}/", svc.url()));
    let size = GridSpec::square(256).unwrap();
    let mut req = SolveRequest::new(size, Target::Pattern { name: "scatter:9:2".into() });
    req.iters = 6;

    let direct = client.solve(&req).await.unwrap();
    let q = StreamQuery::from_request(&req).unwrap();
    let mut stream = client.stream_query(&q).await.unwrap();
    let mut records = Vec::new();
    let last = loop {
        match stream.next().await.unwrap().unwrap() {
            StreamEvent::Progress(r) => records.push(r),
            StreamEvent::Final(resp) => break resp,
            StreamEvent::Error(e) => panic!("{e:?}"),
        }
    };
    assert!(stream.next().await.is_none());

    let bits = |v: &[holomask_api::ProgressEvent]| -> Vec<[u64; 3]> {
        v.iter().map(|r| [r.gap.to_bits(), r.err_lit.to_bits(), r.err_dark.to_bits()]).collect()
    };
    assert_eq!(bits(&records), bits(&direct.history));
    assert_eq!(last.reconstruction_log_codes().unwrap(), direct.reconstruction_log_codes().unwrap());
    assert_eq!(last.mask_codes().unwrap(), direct.mask_codes().unwrap());
    svc.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn refusals_carry_status_and_message() {
    let svc = service().await;
    let client = Client::new(svc.url());
    let req = SolveRequest::new(GridSpec::square(8).unwrap(), Target::Pattern { name: "wheel".into() });
    match client.solve(&req).await {
        Err(ClientError::Api { status: 400, message }) => assert!(message.contains("wheel"), "{message}"),
        other => panic!("{other:?}"),
    }
    svc.stop().await.unwrap();

    // Nothing listening any more.
    let err = client.health().await.unwrap_err();
    assert!(matches!(err, ClientError::Http(_)) && err.status().is_none());
}
