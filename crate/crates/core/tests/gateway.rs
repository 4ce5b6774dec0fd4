mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{join, Oracle};
use longsel::corpus::{Sample, SampleKind};
use longsel::gateway::protocol::{decode, encode};
use longsel::gateway::server::serve_tcp;
use longsel::gateway::{
    self, BackendDescriptor, CopyLm, ErrorCode, GatewayError, Message, RemoteBackend, RequestMode, ScoringBackend,
    ScoringRequest, ScoringResponse,
};

fn oracle() -> Oracle {
    Oracle {
        v: 20,
        beta: 7.5,
        window: Some(6),
        gamma: 4.0,
        shift: 3,
    }
}

fn lm() -> CopyLm {
    CopyLm::new("copylm", oracle().params(), 4096).unwrap()
}

fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let toks = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
                let len = rng.gen_range(lo..=hi);
                (0..len).map(|_| rng.gen_range(0..20u32)).collect::<Vec<_>>()
            };
            Sample {
                id: format!("s{i}"),
                context: join(&toks(&mut rng, 1, 40)),
                instruction: join(&toks(&mut rng, 0, 3)),
                response: join(&toks(&mut rng, 1, 6)),
                kind: SampleKind::Long,
                meta: BTreeMap::new(),
            }
        })
        .collect()
}

fn start_tcp_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let backend: Arc<dyn ScoringBackend> = Arc::new(lm());
    std::thread::spawn(move || serve_tcp(backend, listener));
    addr
}

fn assert_same_scores(remote: &dyn ScoringBackend, local: &dyn ScoringBackend, samples: &[Sample]) {
    for s in samples {
        let r = gateway::score_full(remote, s).unwrap();
        let l = gateway::score_full(local, s).unwrap();
        assert!((r - l).abs() <= 1e-12 * l.max(1.0), "{}: {r} vs {l}", s.id);
        let rs = gateway::score_segment(remote, s, 5, 0).unwrap();
        let ls = gateway::score_segment(local, s, 5, 0).unwrap();
        assert!((rs - ls).abs() <= 1e-12 * ls.max(1.0));
        assert_eq!(
            gateway::attention_profile(remote, s, 5).unwrap(),
            gateway::attention_profile(local, s, 5).unwrap()
        );
    }
}

#[test]
fn tcp_scores_match_in_process() {
    let addr = start_tcp_server();
    let remote = RemoteBackend::connect_tcp(addr.as_str(), 8).unwrap();
    let local = lm();
    assert_eq!(remote.descriptor(), local.descriptor());
    assert_same_scores(&remote, &local, &random_samples(50, 1));
}

#[test]
fn concurrent_callers_get_their_own_answers() {
    let addr = start_tcp_server();
    let remote = RemoteBackend::connect_tcp(addr.as_str(), 4).unwrap();
    let local = lm();
    let samples = random_samples(200, 2);
    std::thread::scope(|scope| {
        for chunk in samples.chunks(25) {
            let remote = &remote;
            let local = &local;
            scope.spawn(move || {
                for s in chunk {
                    let r = gateway::score_full(remote, s).unwrap();
                    let l = gateway::score_full(local, s).unwrap();
                    assert_eq!(r.to_bits(), l.to_bits(), "{}", s.id);
                }
            });
        }
    });
}

/// A backend that collects `n` requests and answers them in reverse order.
fn reversing_server(n: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        let desc = BackendDescriptor {
            name: "reverser".into(),
            context_window: 100,
            supports_attention: false,
            tokenizer_fingerprint: "fp".into(),
        };
        writer.write_all(encode(&Message::Descriptor(desc)).as_bytes()).unwrap();
        let mut reqs = Vec::new();
        for line in BufReader::new(stream).lines() {
            match decode(&line.unwrap()).unwrap() {
                Message::Request(r) => reqs.push(r),
                other => panic!("unexpected {other:?}"),
            }
            if reqs.len() == n {
                break;
            }
        }
        for r in reqs.iter().rev() {
            let nll: f64 = r.response.parse().unwrap();
            let resp = ScoringResponse {
                request_id: r.request_id.clone(),
                token_count_context: 0,
                token_count_response: 1,
                mean_response_nll: nll,
                per_segment_attention: None,
                error: None,
            };
            writer.write_all(encode(&Message::Response(resp)).as_bytes()).unwrap();
        }
    });
    addr
}

#[test]
fn out_of_order_responses_are_matched_by_id() {
    const N: usize = 8;
    let remote = RemoteBackend::connect_tcp(reversing_server(N).as_str(), N).unwrap();
    std::thread::scope(|scope| {
        for i in 0..N {
            let remote = &remote;
            scope.spawn(move || {
                let req = ScoringRequest {
                    // Every caller uses the same id; the client must still route correctly.
                    request_id: "dup".into(),
                    mode: RequestMode::FullPpl,
                    context: String::new(),
                    instruction: String::new(),
                    response: format!("{i}.5"),
                    segment_length: None,
                    segment_index: None,
                };
                let resp = remote.call(&req).unwrap();
                assert_eq!(resp.request_id, "dup");
                assert_eq!(resp.mean_response_nll, i as f64 + 0.5);
            });
        }
    });
}

#[test]
fn server_reports_malformed_requests_in_band() {
    let addr = start_tcp_server();
    let stream = TcpStream::connect(&addr).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut lines = BufReader::new(stream).lines();
    assert!(matches!(decode(&lines.next().unwrap().unwrap()).unwrap(), Message::Descriptor(_)));

    let send = |w: &mut TcpStream, text: &str| w.write_all(text.as_bytes()).unwrap();
    send(&mut writer, "{\"type\":\"request\",\"request_id\":\"x1\",\"mode\":\"no_such_mode\"}\n");
    send(
        &mut writer,
        "{\"type\":\"request\",\"request_id\":\"x2\",\"mode\":\"segment_ppl\",\"context\":\"1 2\",\"response\":\"1\",\"segment_length\":1,\"segment_index\":7}\n",
    );
    send(&mut writer, "not json\n");
    let mut codes = BTreeMap::new();
    for _ in 0..3 {
        match decode(&lines.next().unwrap().unwrap()).unwrap() {
            Message::Response(r) => {
                codes.insert(r.request_id.clone(), r.error.expect("error body").code);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(codes["x1"], ErrorCode::BadRequest);
    assert_eq!(codes["x2"], ErrorCode::InvalidSegment);
    assert_eq!(codes[""], ErrorCode::BadRequest);
}

#[test]
fn child_process_backend_matches_in_process() {
    let o = oracle();
    let args: Vec<String> = [
        "serve-mock",
        "--name",
        "copylm",
        "--vocab-size",
        "20",
        "--copy-bonus",
        "7.5",
        "--window",
        "6",
        "--attention-bonus",
        "4",
        "--attention-shift",
        "3",
        "--context-window",
        "4096",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let remote = RemoteBackend::spawn(env!("CARGO_BIN_EXE_longsel"), &args, 4).unwrap();
    let local = lm();
    assert_eq!(remote.descriptor(), local.descriptor());
    assert_eq!(remote.descriptor().tokenizer_fingerprint, o.params().tokenizer_fingerprint());
    assert_same_scores(&remote, &local, &random_samples(20, 3));
}

#[test]
fn closed_connection_fails_pending_calls() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let desc = BackendDescriptor {
            name: "dies".into(),
            context_window: 10,
            supports_attention: false,
            tokenizer_fingerprint: "fp".into(),
        };
        stream.write_all(encode(&Message::Descriptor(desc)).as_bytes()).unwrap();
        let mut line = String::new();
        BufReader::new(&stream).read_line(&mut line).unwrap();
    });
    let remote = RemoteBackend::connect_tcp(addr, 2).unwrap();
    let s = &random_samples(1, 4)[0];
    let err = gateway::score_full(&remote, s).unwrap_err();
    assert!(matches!(err, GatewayError::Closed | GatewayError::Io(_)), "{err:?}");
}
