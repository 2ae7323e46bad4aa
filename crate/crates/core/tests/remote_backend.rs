use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::Router;

use forge_core::input_assembly::assemble;
use forge_core::io::{decode_model_input, encode_tnsr};
use forge_core::prompt_encoding::{tei_encode, EnergyMap, TeiConfig};
use forge_core::saliency_backend::{Backend, BackendKind, RemoteConfig, SaliencyBackend};
use forge_core::types::{FloatMap, Prompt, PromptSet, RasterImage};
use forge_core::ForgeError;

#[derive(Clone)]
struct Mock {
    calls: Arc<AtomicUsize>,
    /// Number of leading calls answered with the given status.
    fail_first: usize,
    fail_status: StatusCode,
    reply: fn(&forge_core::input_assembly::ModelInput) -> Vec<FloatMap>,
}

async fn infer(State(mock): State<Mock>, body: Bytes) -> (StatusCode, Vec<u8>) {
    let n = mock.calls.fetch_add(1, Ordering::SeqCst);
    if n < mock.fail_first {
        return (mock.fail_status, b"nope".to_vec());
    }
    let input = match decode_model_input(&body, "<request>") {
        Ok(i) => i,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string().into_bytes()),
    };
    (StatusCode::OK, encode_tnsr(&(mock.reply)(&input)).unwrap())
}

/// Serves the mock on a background runtime and returns its base URL.
fn spawn(mock: Mock) -> String {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/infer", post(infer)).with_state(mock);
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn echo_energy(input: &forge_core::input_assembly::ModelInput) -> Vec<FloatMap> {
    vec![input.energy().clone()]
}

fn mock(fail_first: usize, fail_status: StatusCode) -> (Mock, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    (
        Mock {
            calls: calls.clone(),
            fail_first,
            fail_status,
            reply: echo_energy,
        },
        calls,
    )
}

fn fixture() -> (forge_core::input_assembly::ModelInput, EnergyMap) {
    let image = RasterImage::new(24, 16, (0..384).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let prompts =
        PromptSet::new("r", vec![Prompt::centroid(5, 6), Prompt::centroid(18, 9)]).unwrap();
    let energy = tei_encode(&prompts, 24, 16, &TeiConfig::default()).unwrap();
    (assemble(&image, &energy).unwrap(), energy)
}

fn backend(url: String, retries: u32) -> Backend {
    let mut cfg = RemoteConfig::new(url);
    cfg.retries = retries;
    cfg.timeout_ms = 5_000;
    Backend::new(BackendKind::Remote(cfg)).unwrap()
}

#[test]
fn round_trip_through_wire_format() {
    let (m, calls) = mock(0, StatusCode::OK);
    let url = spawn(m);
    let (input, energy) = fixture();
    let out = backend(url, 0).infer(&input, &energy).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    assert_eq!(out.dims(), (24, 16));
    for (a, b) in out.data().iter().zip(energy.map.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn server_errors_are_retried() {
    let (m, calls) = mock(2, StatusCode::SERVICE_UNAVAILABLE);
    let url = spawn(m);
    let (input, energy) = fixture();
    backend(url, 2).infer(&input, &energy).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_exhausted() {
    let (m, calls) = mock(10, StatusCode::INTERNAL_SERVER_ERROR);
    let url = spawn(m);
    let (input, energy) = fixture();
    match backend(url, 1).infer(&input, &energy) {
        Err(ForgeError::Transport {
            attempts, detail, ..
        }) => {
            assert_eq!(attempts, 2);
            assert!(detail.contains("500"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (m, calls) = mock(10, StatusCode::UNPROCESSABLE_ENTITY);
    let url = spawn(m);
    let (input, energy) = fixture();
    match backend(url, 3).infer(&input, &energy) {
        Err(ForgeError::Transport { attempts, .. }) => assert_eq!(attempts, 1),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn out_of_range_response_violates_contract() {
    let calls = Arc::new(AtomicUsize::new(0));
    let url = spawn(Mock {
        calls,
        fail_first: 0,
        fail_status: StatusCode::OK,
        reply: |input| {
            let (w, h) = input.dims();
            vec![FloatMap::new(w, h, vec![1.5; w * h]).unwrap()]
        },
    });
    let (input, energy) = fixture();
    assert!(matches!(
        backend(url, 0).infer(&input, &energy),
        Err(ForgeError::Contract(_))
    ));
}

#[test]
fn multi_channel_response_rejected() {
    let calls = Arc::new(AtomicUsize::new(0));
    let url = spawn(Mock {
        calls,
        fail_first: 0,
        fail_status: StatusCode::OK,
        reply: |input| vec![input.energy().clone(), input.energy().clone()],
    });
    let (input, energy) = fixture();
    assert!(matches!(
        backend(url, 0).infer(&input, &energy),
        Err(ForgeError::Contract(_))
    ));
}
