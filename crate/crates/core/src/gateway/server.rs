//! Serves any `ScoringBackend` over the line protocol (stdio or TCP).

use std::io::{BufRead, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use super::copylm::{CopyLm, CopyLmParams};
use super::protocol::{self, ErrorCode, Message, ScoringResponse};
use super::{GatewayError, ScoringBackend};

const WORKERS: usize = 4;

fn handle_line(backend: &dyn ScoringBackend, line: &str) -> ScoringResponse {
    match protocol::decode(line) {
        Ok(Message::Request(req)) => match backend.call(&req) {
            Ok(resp) => resp,
            Err(e) => ScoringResponse::error(&req.request_id, ErrorCode::Internal, e.to_string()),
        },
        Ok(_) => ScoringResponse::error(
            protocol::salvage_request_id(line),
            ErrorCode::BadRequest,
            "only request messages are accepted",
        ),
        Err(e) => ScoringResponse::error(protocol::salvage_request_id(line), ErrorCode::BadRequest, e.to_string()),
    }
}

/// Announces the backend descriptor, then answers requests until EOF.
/// Requests are handled by a small worker pool, so responses may be written
/// in a different order than the requests arrived.
pub fn serve<R, W>(backend: &dyn ScoringBackend, reader: R, writer: W) -> Result<(), GatewayError>
where
    R: BufRead,
    W: Write + Send,
{
    let writer = Mutex::new(writer);
    {
        let mut w = writer.lock().expect("writer poisoned");
        w.write_all(protocol::encode(&Message::Descriptor(backend.descriptor().clone())).as_bytes())?;
        w.flush()?;
    }
    let (tx, rx) = mpsc::channel::<String>();
    let rx = Mutex::new(rx);
    let write_error: Mutex<Option<std::io::Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..WORKERS {
            scope.spawn(|| loop {
                let line = match rx.lock().expect("queue poisoned").recv() {
                    Ok(l) => l,
                    Err(_) => return,
                };
                let out = protocol::encode(&Message::Response(handle_line(backend, &line)));
                let mut w = writer.lock().expect("writer poisoned");
                if let Err(e) = w.write_all(out.as_bytes()).and_then(|_| w.flush()) {
                    write_error.lock().expect("poisoned").get_or_insert(e);
                }
            });
        }
        let mut read_result = Ok(());
        for line in reader.lines() {
            match line {
                Ok(l) if l.trim().is_empty() => {}
                Ok(l) => {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    read_result = Err(e);
                    break;
                }
            }
        }
        drop(tx);
        read_result
    })?;
    match write_error.into_inner().expect("poisoned") {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Accepts connections forever, serving each on its own thread.
pub fn serve_tcp(backend: Arc<dyn ScoringBackend>, listener: TcpListener) -> Result<(), GatewayError> {
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        std::thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            let result = stream
                .try_clone()
                .map_err(GatewayError::from)
                .and_then(|read| serve(backend.as_ref(), std::io::BufReader::new(read), stream));
            if let Err(e) = result {
                log::warn!("connection {peer}: {e}");
            }
        });
    }
    Ok(())
}

pub enum Transport {
    Stdio,
    Tcp(TcpListener),
}

/// Runs a CopyLM backend on the given transport until the transport closes.
pub fn serve_mock(
    name: &str,
    params: CopyLmParams,
    context_window: usize,
    transport: Transport,
) -> Result<(), GatewayError> {
    let lm = CopyLm::new(name, params, context_window).map_err(GatewayError::Protocol)?;
    match transport {
        Transport::Stdio => {
            let stdin = std::io::stdin();
            serve(&lm, stdin.lock(), std::io::stdout())
        }
        Transport::Tcp(listener) => serve_tcp(Arc::new(lm), listener),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::protocol::{RequestMode, ScoringRequest};

    fn lm() -> CopyLm {
        CopyLm::new(
            "mock",
            CopyLmParams {
                vocab_size: 10,
                copy_bonus: 9.0,
                window: None,
                attention_bonus: 9.0,
                attention_shift: 0,
            },
            64,
        )
        .unwrap()
    }

    fn run(input: &str) -> Vec<Message> {
        let mut out = Vec::new();
        serve(&lm(), input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| protocol::decode(l).unwrap())
            .collect()
    }

    #[test]
    fn descriptor_comes_first() {
        let msgs = run("");
        assert_eq!(msgs.len(), 1);
        assert!(matches!(&msgs[0], Message::Descriptor(d) if d.name == "mock"));
    }

    #[test]
    fn tokenize_info_counts_whitespace_integers() {
        let req = ScoringRequest {
            request_id: "t1".into(),
            mode: RequestMode::TokenizeInfo,
            context: "1 2 3".into(),
            instruction: String::new(),
            response: String::new(),
            segment_length: None,
            segment_index: None,
        };
        let msgs = run(&protocol::encode(&Message::Request(req)));
        match &msgs[1] {
            Message::Response(r) => {
                assert_eq!(r.request_id, "t1");
                assert_eq!(r.token_count_context, 3);
                assert!(r.error.is_none());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_request_reports_bad_request_with_id() {
        let msgs = run("{\"type\":\"request\",\"request_id\":\"oops\",\"mode\":\"bogus\"}\nnot json\n");
        let mut errors: Vec<(String, ErrorCode)> = msgs[1..]
            .iter()
            .map(|m| match m {
                Message::Response(r) => (r.request_id.clone(), r.error.as_ref().unwrap().code),
                other => panic!("{other:?}"),
            })
            .collect();
        errors.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(
            errors,
            vec![("".into(), ErrorCode::BadRequest), ("oops".into(), ErrorCode::BadRequest)]
        );
    }
}
