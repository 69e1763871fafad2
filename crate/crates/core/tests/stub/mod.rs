//! A scripted in-process HTTP stub standing in for a remote teacher
//! service. Each incoming request consumes the next scripted behavior
//! (the last one repeats), and everything received is captured so tests
//! can assert on headers and bodies.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use dyncot::cotgen::TeacherEndpoint;

/// What the stub does with one incoming request. The last entry repeats
/// if more requests arrive than scripted.
#[derive(Clone)]
pub enum Behavior {
    /// 200 with a well-formed chat payload carrying this content.
    Ok(&'static str),
    /// 200 with this raw body.
    Raw(&'static str),
    /// Error status with this body.
    Status(u16, &'static str),
    /// Sleep before answering, long enough for the client to time out.
    Hang(u64),
    /// Close the connection without answering.
    Drop,
}

pub struct Received {
    pub headers: String,
    pub body: String,
}

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<Mutex<Vec<Received>>>,
    handle: Option<JoinHandle<()>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Received> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
        match stream.read(&mut chunk) {
            Ok(0) => return None,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).into_owned();
    let content_length = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        match stream.read(&mut chunk) {
            Ok(0) => return None,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
    }
    let body = String::from_utf8_lossy(&buf[header_end..header_end + content_length]).into_owned();
    Some(Received { headers, body })
}

fn respond(stream: &mut TcpStream, status: u16, reason: &str, body: &str) {
    let msg = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    // The client may already have hung up (e.g. after its timeout).
    let _ = stream.write_all(msg.as_bytes());
}

fn chat_payload(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string()
}

impl StubServer {
    pub fn start(behaviors: Vec<Behavior>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind ephemeral port");
        let addr = listener.local_addr().expect("local addr");
        let stop = Arc::new(AtomicBool::new(false));
        let requests: Arc<Mutex<Vec<Received>>> = Arc::new(Mutex::new(Vec::new()));
        let handle = {
            let stop = Arc::clone(&stop);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                let mut served = 0usize;
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(mut stream) = stream else { continue };
                    let Some(received) = read_request(&mut stream) else { continue };
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    requests.lock().expect("requests lock").push(received);
                    let behavior = behaviors
                        .get(served)
                        .or(behaviors.last())
                        .expect("at least one behavior")
                        .clone();
                    served += 1;
                    match behavior {
                        Behavior::Ok(content) => respond(&mut stream, 200, "OK", &chat_payload(content)),
                        Behavior::Raw(body) => respond(&mut stream, 200, "OK", body),
                        Behavior::Status(code, body) => respond(&mut stream, code, "Error", body),
                        Behavior::Hang(ms) => {
                            std::thread::sleep(Duration::from_millis(ms));
                            respond(&mut stream, 200, "OK", &chat_payload("late"));
                        }
                        Behavior::Drop => drop(stream),
                    }
                }
            })
        };
        StubServer {
            addr,
            stop,
            requests,
            handle: Some(handle),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().expect("requests lock").len()
    }

    pub fn request(&self, i: usize) -> (String, String) {
        let reqs = self.requests.lock().expect("requests lock");
        (reqs[i].headers.clone(), reqs[i].body.clone())
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        if let Ok(mut s) = TcpStream::connect(self.addr) {
            let _ = s.write_all(b"POST / HTTP/1.1\r\nContent-Length: 0\r\n\r\n");
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Endpoint tuned for tests: tiny timeout and backoff so suites stay fast.
pub fn endpoint(server: &StubServer) -> TeacherEndpoint {
    let mut ep = TeacherEndpoint::new(server.url(), "stub-model");
    ep.timeout = Duration::from_millis(250);
    ep.retry_budget = 3;
    ep.backoff_base = Duration::from_millis(1);
    ep.parallel = 1;
    ep
}
