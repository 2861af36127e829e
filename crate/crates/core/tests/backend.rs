mod common;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use divgen_core::backend::{
    generate_plan, mock_image, read_checkpoint, BackendError, DirectorySink, ImageBackend,
    MemorySink, MockBackend, RemoteBackend, RunError, RunOptions, WireRequest, FINGERPRINT_HEADER,
};
use divgen_core::{BackendDescriptor, GenerationRequest, ImageRecord, TrickKind};

struct Reply {
    status: u16,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

/// Serve `respond` on a loopback port; returns the base URL and the count
/// of requests seen.
fn serve(respond: impl Fn(usize, &WireRequest) -> Reply + Send + 'static) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let n = counter.fetch_add(1, Ordering::SeqCst);
            if let Some(req) = read_request(&stream) {
                write_reply(stream, respond(n, &req));
            }
        }
    });
    (url, hits)
}

fn read_request(stream: &TcpStream) -> Option<WireRequest> {
    let mut reader = BufReader::new(stream);
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    serde_json::from_slice(&body).ok()
}

fn write_reply(mut stream: TcpStream, reply: Reply) {
    let mut head = format!("HTTP/1.1 {} X\r\nContent-Length: {}\r\nConnection: close\r\n", reply.status, reply.body.len());
    for (k, v) in &reply.headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("\r\n");
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(&reply.body);
}

fn png_for(req: &WireRequest) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    mock_image(req).write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn remote(url: &str, retries: u32) -> RemoteBackend {
    let mut desc = BackendDescriptor::remote(url);
    desc.retry_limit = retries;
    desc.retry_backoff = 0.01;
    desc.request_timeout = 5.0;
    RemoteBackend::new(&desc).unwrap()
}

fn one_request() -> GenerationRequest {
    let task = common::toy_task("wire", &["cat"], 32, 1);
    common::small_plan(&task, TrickKind::BaseClass, 1, 16).remove(0)
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let (url, hits) = serve(|_, _| Reply { status: 503, headers: vec![], body: b"busy".to_vec() });
    let err = remote(&url, 2).generate(&one_request()).unwrap_err();
    assert!(matches!(err, BackendError::BackendUnreachable { attempts: 3, .. }), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = serve(|_, _| Reply { status: 422, headers: vec![], body: b"bad prompt".to_vec() });
    let err = remote(&url, 3).generate(&one_request()).unwrap_err();
    assert_eq!(err, BackendError::BackendRejectedRequest { status: 422, body: "bad prompt".into() });
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn transient_failure_then_success() {
    let (url, hits) = serve(|n, req| {
        if n == 0 {
            Reply { status: 500, headers: vec![], body: vec![] }
        } else {
            Reply {
                status: 200,
                headers: vec![(FINGERPRINT_HEADER.into(), "sd-test-rev".into())],
                body: png_for(req),
            }
        }
    });
    let req = one_request();
    let record = remote(&url, 2).generate(&req).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    assert_eq!(record.request_id, req.request_id);
    assert_eq!(record.pixels, mock_image(&WireRequest::from(&req)));
    assert!(record.backend_fingerprint.ends_with("+sd-test-rev"), "{}", record.backend_fingerprint);
}

#[test]
fn wrong_geometry_is_reported() {
    let (url, _) = serve(|_, req| {
        let mut small = req.clone();
        small.width /= 2;
        Reply { status: 200, headers: vec![], body: png_for(&small) }
    });
    let err = remote(&url, 0).generate(&one_request()).unwrap_err();
    assert!(matches!(err, BackendError::PixelShapeMismatch { .. }), "{err:?}");
}

#[test]
fn unreachable_host() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = remote(&url, 1).generate(&one_request()).unwrap_err();
    assert!(matches!(err, BackendError::BackendUnreachable { attempts: 2, .. }), "{err:?}");
}

/// Mock wrapper that counts calls, tracks concurrency and fails chosen ids.
struct Instrumented {
    inner: MockBackend,
    fail: HashSet<u64>,
    calls: AtomicUsize,
    active: AtomicUsize,
    peak: AtomicUsize,
}

impl Instrumented {
    fn new(fail: HashSet<u64>) -> Self {
        Self {
            inner: MockBackend::new("instrumented"),
            fail,
            calls: AtomicUsize::new(0),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }
}

impl ImageBackend for Instrumented {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageRecord, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(2));
        let out = if self.fail.contains(&req.request_id) {
            Err(BackendError::BackendRejectedRequest { status: 400, body: "injected".into() })
        } else {
            self.inner.generate(req)
        };
        self.active.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

fn hundred() -> Vec<GenerationRequest> {
    let task = common::toy_task("runner", &["a", "b", "c", "d"], 32, 25);
    common::small_plan(&task, TrickKind::RandomGuidance, 4, 16)
}

#[test]
fn concurrency_is_bounded() {
    let plan = hundred();
    let backend = Instrumented::new(HashSet::new());
    let mut sink = MemorySink::default();
    let opts = RunOptions { max_in_flight: 8, ..Default::default() };
    let summary = generate_plan(&plan, &backend, &mut sink, &opts).unwrap();
    assert_eq!(summary.generated, 100);
    assert_eq!(sink.records.len(), 100);
    let peak = backend.peak.load(Ordering::SeqCst);
    assert!((1..=8).contains(&peak), "peak {peak}");
}

#[test]
fn resume_generates_only_the_remainder() {
    let plan = hundred();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("done.txt");
    let opts = RunOptions {
        max_in_flight: 8,
        checkpoint: Some(ckpt.clone()),
        checkpoint_batch: 7,
        ..Default::default()
    };

    // The sink refuses record 41 onward, standing in for a crash.
    let mut accepted = 0;
    let mut crashing = |_: ImageRecord| {
        accepted += 1;
        if accepted > 40 {
            Err("disk full".to_string())
        } else {
            Ok(())
        }
    };
    let first = generate_plan(&plan, &MockBackend::new("m"), &mut crashing, &opts);
    assert!(matches!(first, Err(RunError::Sink { .. })));
    assert_eq!(read_checkpoint(&ckpt).unwrap().len(), 40);

    let backend = Instrumented::new(HashSet::new());
    let mut sink = MemorySink::default();
    let summary = generate_plan(&plan, &backend, &mut sink, &opts).unwrap();
    assert_eq!(backend.calls.load(Ordering::SeqCst), 60);
    assert_eq!((summary.generated, summary.skipped), (60, 40));
    assert_eq!(read_checkpoint(&ckpt).unwrap().len(), 100);
}

#[test]
fn failures_above_threshold_abort() {
    let plan = hundred();
    let fail: HashSet<u64> = plan.iter().step_by(50).map(|r| r.request_id).collect();
    assert_eq!(fail.len(), 2);
    let mut sink = MemorySink::default();
    let opts = RunOptions { max_in_flight: 1, failure_threshold: 0.01, ..Default::default() };
    match generate_plan(&plan, &Instrumented::new(fail.clone()), &mut sink, &opts) {
        Err(RunError::PlanAborted { failed_ids, total, .. }) => {
            assert_eq!(total, 100);
            assert_eq!(failed_ids.into_iter().collect::<HashSet<_>>(), fail);
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn failures_below_threshold_are_reported() {
    let plan = hundred();
    let fail: HashSet<u64> = [plan[10].request_id].into();
    let mut sink = MemorySink::default();
    let opts = RunOptions { max_in_flight: 4, failure_threshold: 0.01, ..Default::default() };
    let summary = generate_plan(&plan, &Instrumented::new(fail), &mut sink, &opts).unwrap();
    assert_eq!(summary.generated, 99);
    assert_eq!(summary.failed.len(), 1);
    assert_eq!(summary.failed[0].0, plan[10].request_id);
}

#[test]
fn directory_sink_writes_pngs() {
    let plan = &hundred()[..5];
    let dir = tempfile::tempdir().unwrap();
    let mut sink = DirectorySink::open(dir.path()).unwrap();
    generate_plan(plan, &MockBackend::new("m"), &mut sink, &RunOptions::default()).unwrap();
    for r in plan {
        let img = image::open(DirectorySink::image_path(dir.path(), r.request_id)).unwrap().to_rgb8();
        assert_eq!(img, mock_image(&WireRequest::from(r)));
    }
}

#[test]
fn output_is_independent_of_concurrency() {
    let plan = hundred();
    let collect = |workers| {
        let out = Mutex::new(Vec::new());
        let mut sink = |r: ImageRecord| {
            out.lock().unwrap().push((r.request_id, r.pixels));
            Ok(())
        };
        let opts = RunOptions { max_in_flight: workers, ..Default::default() };
        generate_plan(&plan, &MockBackend::new("m"), &mut sink, &opts).unwrap();
        let mut v = out.into_inner().unwrap();
        v.sort_by_key(|(id, _)| *id);
        v
    };
    assert_eq!(collect(1), collect(8));
}
