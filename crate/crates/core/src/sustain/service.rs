//! Wire transport for the sustainability service: newline-delimited JSON
//! over TCP. Message types: `subscribe`, `subscribe_ack`, `unsubscribe`,
//! `notify`, `error`; rates in bps, times in seconds since service start.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{QoSNotification, Registry, SeriesProvider, SubscribeRequest};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Subscribe(SubscribeRequest),
    SubscribeAck { sub_id: String, client_request_id: Option<String> },
    Unsubscribe { sub_id: String },
    Notify(QoSNotification),
    Error { message: String, field: Option<String> },
}

struct Shared {
    registry: Mutex<Registry>,
    /// Write halves per client id; `None` once a client disconnected. The
    /// subscription itself is retained until its window expires.
    clients: Mutex<Vec<Option<TcpStream>>>,
    shutdown: AtomicBool,
}

impl Shared {
    fn send(&self, client: usize, msg: &WireMessage) {
        let mut clients = self.clients.lock().unwrap();
        if let Some(slot) = clients.get_mut(client) {
            if let Some(stream) = slot {
                let line = serde_json::to_string(msg).expect("wire message serializes");
                let ok = stream
                    .write_all(line.as_bytes())
                    .and_then(|_| stream.write_all(b"\n"))
                    .and_then(|_| stream.flush())
                    .is_ok();
                if !ok {
                    *slot = None;
                }
            }
        }
    }
}

/// Running service; dropping it without [`ServiceHandle::shutdown`] leaves
/// the threads detached.
pub struct ServiceHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Serve subscriptions over `listener`. Every `eval_period_s` of service
/// time the provider is asked for the latest prediction (lazily: only while
/// subscriptions exist) and every subscription is evaluated; notifications
/// go out over their owning client connection in subscription order.
/// `pace` throttles the wall-clock loop. The loop ends when the provider
/// reports its source exhausted or on shutdown.
pub fn serve<P>(
    listener: TcpListener,
    mut provider: P,
    eval_period_s: f64,
    pace: Duration,
) -> std::io::Result<ServiceHandle>
where
    P: SeriesProvider + Send + 'static,
{
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let shared = Arc::new(Shared {
        registry: Mutex::new(Registry::new()),
        clients: Mutex::new(Vec::new()),
        shutdown: AtomicBool::new(false),
    });

    let accept_shared = Arc::clone(&shared);
    let acceptor = std::thread::spawn(move || loop {
        if accept_shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let client_id = {
                    let mut clients = accept_shared.clients.lock().unwrap();
                    clients.push(Some(stream.try_clone().expect("clone stream")));
                    clients.len() - 1
                };
                let reader_shared = Arc::clone(&accept_shared);
                std::thread::spawn(move || client_reader(reader_shared, stream, client_id));
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break,
        }
    });

    let eval_shared = Arc::clone(&shared);
    let evaluator = std::thread::spawn(move || {
        let mut now_s = 0.0;
        loop {
            if eval_shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            now_s += eval_period_s;
            let has_subs = !eval_shared.registry.lock().unwrap().is_empty();
            if has_subs {
                match provider.predict(now_s) {
                    Some((series, location)) => {
                        let batch = eval_shared
                            .registry
                            .lock()
                            .unwrap()
                            .evaluate_all(&series, &location, now_s);
                        for (client, note) in batch {
                            eval_shared.send(client, &WireMessage::Notify(note));
                        }
                    }
                    None => break,
                }
            }
            std::thread::sleep(pace);
        }
    });

    Ok(ServiceHandle { addr, shared, threads: vec![acceptor, evaluator] })
}

fn client_reader(shared: Arc<Shared>, stream: TcpStream, client_id: usize) {
    stream.set_read_timeout(Some(Duration::from_millis(100))).ok();
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break, // client closed
            Ok(_) => {
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                handle_client_message(&shared, client_id, trimmed);
            }
            Err(ref e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => break,
        }
    }
    if let Some(slot) = shared.clients.lock().unwrap().get_mut(client_id) {
        *slot = None;
    }
}

fn handle_client_message(shared: &Arc<Shared>, client_id: usize, raw: &str) {
    match serde_json::from_str::<WireMessage>(raw) {
        Ok(WireMessage::Subscribe(req)) => {
            let result = shared.registry.lock().unwrap().subscribe(&req, client_id);
            let reply = match result {
                Ok(sub_id) => WireMessage::SubscribeAck {
                    sub_id,
                    client_request_id: req.client_request_id.clone(),
                },
                Err(e) => {
                    WireMessage::Error { message: e.reason.clone(), field: Some(e.field.into()) }
                }
            };
            shared.send(client_id, &reply);
        }
        Ok(WireMessage::Unsubscribe { sub_id }) => {
            shared.registry.lock().unwrap().unsubscribe(&sub_id);
        }
        Ok(_) => {
            shared.send(
                client_id,
                &WireMessage::Error {
                    message: "clients may only send subscribe/unsubscribe".into(),
                    field: Some("type".into()),
                },
            );
        }
        Err(e) => {
            shared.send(
                client_id,
                &WireMessage::Error { message: format!("malformed message: {e}"), field: None },
            );
        }
    }
}
