//! Remote annotator client against a local mock HTTP server: verdict
//! parsing, missing-verdict handling, and retry-with-backoff behavior.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use agentps::annotator::{remote_annotate, QuestionKind, QuestionTemplate, RemoteConfig};
use agentps::data::{generate_dataset, DatasetSpec};

/// Minimal single-threaded HTTP/1.1 server. `respond` maps the request count
/// (1-based) and body to (status line, body).
fn spawn_server(
    n_requests: usize,
    respond: impl Fn(usize, &str) -> (&'static str, String) + Send + 'static,
) -> (String, std::thread::JoinHandle<usize>, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let counter = Arc::new(AtomicUsize::new(0));
    let counter_in = counter.clone();
    let handle = std::thread::spawn(move || {
        let mut served = 0;
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8_lossy(&body).into_owned();
            served += 1;
            counter_in.fetch_add(1, Ordering::SeqCst);
            let (status, reply) = respond(served, &body);
            let response = format!(
                "{status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
            if served == n_requests {
                break;
            }
        }
        served
    });
    (format!("http://{addr}/annotate"), handle, counter)
}

fn test_samples(n: usize) -> Vec<agentps::data::Sample> {
    let spec = DatasetSpec {
        n_samples: n,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec).unwrap()
}

fn config(endpoint: String) -> RemoteConfig {
    RemoteConfig {
        endpoint,
        api_key: "test-key".to_string(),
        max_in_flight: 1,
        max_retries: 3,
        base_backoff_ms: 1,
        timeout_ms: 5_000,
    }
}

fn templates() -> Vec<QuestionTemplate> {
    let mut v: Vec<QuestionTemplate> = (0..4)
        .map(|i| QuestionTemplate {
            prompt: format!("question {i}"),
            kind: QuestionKind::Binary,
        })
        .collect();
    v.push(QuestionTemplate {
        prompt: "final question".to_string(),
        kind: QuestionKind::Binary,
    });
    v
}

#[test]
fn yes_no_answers_become_labels() {
    let samples = test_samples(2);
    let (endpoint, handle, _) = spawn_server(2, |_, _| {
        (
            "HTTP/1.1 200 OK",
            r#"{"answers":["Yes, clearly.","no","YES","It is not. No.","yes definitely"]}"#
                .to_string(),
        )
    });
    let (results, stats) = remote_annotate(&samples, &config(endpoint), &templates());
    handle.join().unwrap();
    assert_eq!(stats.retries, 0);
    assert_eq!(stats.failed_samples, 0);
    assert_eq!(results.len(), 2);
    for (r, s) in results.iter().zip(&samples) {
        assert_eq!(r.sample_id, s.id);
        assert_eq!(
            r.labels,
            vec![Some(1), Some(0), Some(1), Some(0), Some(1)]
        );
        let raw = r.raw_responses.as_ref().unwrap();
        assert_eq!(raw.len(), 5);
    }
}

#[test]
fn unparseable_answers_are_missing_not_errors() {
    let samples = test_samples(1);
    let (endpoint, handle, _) = spawn_server(1, |_, _| {
        (
            "HTTP/1.1 200 OK",
            r#"{"answers":["hard to say","yes","I cannot determine that","false","hmm"]}"#
                .to_string(),
        )
    });
    let (results, stats) = remote_annotate(&samples, &config(endpoint), &templates());
    handle.join().unwrap();
    assert_eq!(stats.failed_samples, 0);
    assert_eq!(
        results[0].labels,
        vec![None, Some(1), None, Some(0), None]
    );
}

#[test]
fn transient_failures_retry_then_succeed() {
    let samples = test_samples(1);
    // two 500s, then success: 3 requests total, 2 retries
    let (endpoint, handle, counter) = spawn_server(3, |n, _| {
        if n <= 2 {
            ("HTTP/1.1 500 Internal Server Error", "busy".to_string())
        } else {
            (
                "HTTP/1.1 200 OK",
                r#"{"answers":["yes","no","yes","no","yes"]}"#.to_string(),
            )
        }
    });
    let (results, stats) = remote_annotate(&samples, &config(endpoint), &templates());
    handle.join().unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), 3);
    assert_eq!(stats.retries, 2);
    assert_eq!(stats.failed_samples, 0);
    assert_eq!(
        results[0].labels,
        vec![Some(1), Some(0), Some(1), Some(0), Some(1)]
    );
}

#[test]
fn non_transient_failure_marks_sample_missing_and_continues() {
    let samples = test_samples(2);
    // request 1 -> 400 (no retry), request 2 -> success
    let (endpoint, handle, counter) = spawn_server(2, |n, _| {
        if n == 1 {
            ("HTTP/1.1 400 Bad Request", "bad".to_string())
        } else {
            (
                "HTTP/1.1 200 OK",
                r#"{"answers":["no","no","no","no","no"]}"#.to_string(),
            )
        }
    });
    let (results, stats) = remote_annotate(&samples, &config(endpoint), &templates());
    handle.join().unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), 2);
    assert_eq!(stats.retries, 0);
    assert_eq!(stats.failed_samples, 1);
    assert_eq!(results[0].labels, vec![None; 5]);
    assert_eq!(results[1].labels, vec![Some(0); 5]);
}

#[test]
fn results_preserve_sample_order_with_concurrency() {
    let samples = test_samples(6);
    let (endpoint, handle, _) = spawn_server(6, |_, body| {
        // echo the sample id back through the first answer? the client maps
        // results by index, so it suffices to answer deterministically
        let label = if body.contains("\"id\":\"s0000") { "yes" } else { "yes" };
        (
            "HTTP/1.1 200 OK",
            format!(r#"{{"answers":["{label}","{label}","{label}","{label}","{label}"]}}"#),
        )
    });
    let mut cfg = config(endpoint);
    cfg.max_in_flight = 3;
    let (results, _) = remote_annotate(&samples, &cfg, &templates());
    handle.join().unwrap();
    let ids: Vec<&str> = results.iter().map(|r| r.sample_id.as_str()).collect();
    let expected: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, expected);
}
