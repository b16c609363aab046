//! Thread-per-connection servers for the protocol actors.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::pdu::Pdu;
use crate::trace::WireTrace;
use crate::transport::{Connection, Endpoint, Network, TransportError};

pub(crate) const POLL: Duration = Duration::from_millis(20);

/// Per-connection request handler: maps one inbound PDU to zero or more
/// replies on the same connection.
pub type Handler = Box<dyn FnMut(Pdu) -> Vec<Pdu> + Send>;

/// A running server; stops and joins its threads on [`ServerHandle::shutdown`]
/// or drop.
pub struct ServerHandle {
    endpoint: Endpoint,
    stop: Arc<AtomicBool>,
    threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle")
            .field("endpoint", &self.endpoint)
            .finish()
    }
}

impl ServerHandle {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
        let threads = std::mem::take(&mut *self.threads.lock().unwrap_or_else(|e| e.into_inner()));
        for t in threads {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Listens on `endpoint` and serves each connection on its own thread with a
/// handler produced by `make_handler`. Replies are recorded in `trace` as
/// sent by `name`.
pub fn spawn_server<F>(
    net: &Network,
    endpoint: &Endpoint,
    name: &str,
    trace: WireTrace,
    make_handler: F,
) -> Result<ServerHandle, TransportError>
where
    F: Fn() -> Handler + Send + 'static,
{
    let listener = net.listen(endpoint)?;
    trace.alias(&endpoint.to_string(), name);
    let stop = Arc::new(AtomicBool::new(false));
    let threads: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let name = name.to_string();
    let acceptor = {
        let stop = stop.clone();
        let threads = threads.clone();
        thread::Builder::new()
            .name(format!("{name}-accept"))
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let conn = match listener.accept(POLL) {
                        Ok(Some(conn)) => conn,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    let handler = make_handler();
                    let stop = stop.clone();
                    let trace = trace.clone();
                    let name = name.clone();
                    let t = thread::Builder::new()
                        .name(format!("{name}-conn"))
                        .spawn(move || serve_connection(conn, handler, &name, &trace, &stop))
                        .expect("spawn connection thread");
                    threads.lock().unwrap_or_else(|e| e.into_inner()).push(t);
                }
            })
            .expect("spawn acceptor thread")
    };
    Ok(ServerHandle {
        endpoint: endpoint.clone(),
        stop,
        threads,
        acceptor: Some(acceptor),
    })
}

fn serve_connection(
    conn: Connection,
    mut handler: Handler,
    name: &str,
    trace: &WireTrace,
    stop: &AtomicBool,
) {
    while !stop.load(Ordering::SeqCst) {
        match conn.recv(POLL) {
            Ok(pdu) => {
                for reply in handler(pdu) {
                    if trace.send(&conn, name, conn.peer(), &reply).is_err() {
                        return;
                    }
                }
            }
            Err(TransportError::Timeout) => continue,
            Err(_) => return,
        }
    }
    conn.close();
}
