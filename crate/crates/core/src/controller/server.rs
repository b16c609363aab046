//! Runs the controller and its resource managers over a [`Network`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::bbu::BbuManager;
use super::compute::ComputeManager;
use super::{ClientId, Controller, ControllerConfig, Outgoing, Peer};
use crate::runtime::{spawn_server, ServerHandle, POLL};
use crate::trace::WireTrace;
use crate::transport::{Connection, Endpoint, Network, TransportError, DEFAULT_TIMEOUT};

/// Trace label of the controller.
pub const CONTROLLER_NAME: &str = "ctrl";
pub const BBU_NAME: &str = "bbu";
pub const CLOUD_NAME: &str = "cloud";

const TICK: Duration = Duration::from_millis(10);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Serves Manage_BBU requests from `manager` on `endpoint`.
pub fn spawn_bbu(
    net: &Network,
    endpoint: &Endpoint,
    manager: Arc<Mutex<BbuManager>>,
    trace: WireTrace,
) -> Result<ServerHandle, TransportError> {
    spawn_server(net, endpoint, BBU_NAME, trace, move || {
        let manager = manager.clone();
        Box::new(move |pdu| lock(&manager).handle_manage_bbu(&pdu).into_iter().collect())
    })
}

/// Serves Manage_Compute requests from `manager` on `endpoint`.
pub fn spawn_compute(
    net: &Network,
    endpoint: &Endpoint,
    manager: Arc<Mutex<ComputeManager>>,
    trace: WireTrace,
) -> Result<ServerHandle, TransportError> {
    spawn_server(net, endpoint, CLOUD_NAME, trace, move || {
        let manager = manager.clone();
        Box::new(move |pdu| vec![lock(&manager).handle_manage_compute(&pdu)])
    })
}

struct Shared {
    controller: Mutex<Controller>,
    ues: Mutex<HashMap<ClientId, Connection>>,
    bbu: Connection,
    cloud: Connection,
    trace: WireTrace,
    start: Instant,
    stop: AtomicBool,
    next_client: AtomicU64,
}

impl Shared {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    /// Feeds one event to the controller and sends its output while still
    /// holding the controller lock, so wire order matches decision order.
    fn step(&self, f: impl FnOnce(&mut Controller, u64) -> Vec<Outgoing>) {
        let mut controller = lock(&self.controller);
        let out = f(&mut controller, self.now_ms());
        for o in out {
            let conn = match o.to {
                Peer::Bbu => Some(self.bbu.clone()),
                Peer::Cloud => Some(self.cloud.clone()),
                Peer::Ue(client) => lock(&self.ues).get(&client).cloned(),
            };
            if let Some(conn) = conn {
                let _ = self.trace.send(&conn, CONTROLLER_NAME, conn.peer(), &o.pdu);
            }
        }
    }
}

/// The controller bound to its listening endpoint and connected to the BBU and
/// cloud backends. Stops on [`ControllerServer::shutdown`] or drop.
pub struct ControllerServer {
    endpoint: Endpoint,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    readers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl std::fmt::Debug for ControllerServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControllerServer")
            .field("endpoint", &self.endpoint)
            .finish()
    }
}

impl ControllerServer {
    pub fn spawn(
        net: &Network,
        endpoint: &Endpoint,
        bbu: &Endpoint,
        cloud: &Endpoint,
        config: ControllerConfig,
        trace: WireTrace,
    ) -> Result<Self, TransportError> {
        let listener = net.listen(endpoint)?;
        let bbu_conn = net.connect_until(bbu, DEFAULT_TIMEOUT)?;
        let cloud_conn = net.connect_until(cloud, DEFAULT_TIMEOUT)?;
        trace.alias(&endpoint.to_string(), CONTROLLER_NAME);
        trace.alias(bbu_conn.local(), CONTROLLER_NAME);
        trace.alias(cloud_conn.local(), CONTROLLER_NAME);
        let shared = Arc::new(Shared {
            controller: Mutex::new(Controller::new(config)),
            ues: Mutex::default(),
            bbu: bbu_conn.clone(),
            cloud: cloud_conn.clone(),
            trace,
            start: Instant::now(),
            stop: AtomicBool::new(false),
            next_client: AtomicU64::new(1),
        });
        let readers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let mut threads = Vec::new();

        for (conn, peer) in [(bbu_conn, Peer::Bbu), (cloud_conn, Peer::Cloud)] {
            let shared = shared.clone();
            threads.push(spawn_named("ctrl-backend", move || {
                read_loop(&shared, &conn, peer)
            }));
        }

        {
            let shared = shared.clone();
            threads.push(spawn_named("ctrl-tick", move || {
                while !shared.stop.load(Ordering::SeqCst) {
                    thread::sleep(TICK);
                    shared.step(|c, now| c.supervise_timeouts(now).outgoing);
                }
            }));
        }

        {
            let shared = shared.clone();
            let readers = readers.clone();
            threads.push(spawn_named("ctrl-accept", move || {
                while !shared.stop.load(Ordering::SeqCst) {
                    let conn = match listener.accept(POLL) {
                        Ok(Some(conn)) => conn,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    let client = ClientId(shared.next_client.fetch_add(1, Ordering::SeqCst));
                    lock(&shared.ues).insert(client, conn.clone());
                    let shared = shared.clone();
                    let t = spawn_named("ctrl-ue", move || {
                        read_loop(&shared, &conn, Peer::Ue(client));
                        shared.step(|c, now| c.on_client_closed(client, now));
                        lock(&shared.ues).remove(&client);
                    });
                    lock(&readers).push(t);
                }
            }));
        }

        Ok(ControllerServer {
            endpoint: endpoint.clone(),
            shared,
            threads,
            readers,
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Runs `f` against the controller state under its lock.
    pub fn inspect<R>(&self, f: impl FnOnce(&Controller) -> R) -> R {
        f(&lock(&self.shared.controller))
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let readers = std::mem::take(&mut *lock(&self.readers));
        for t in readers {
            let _ = t.join();
        }
        self.shared.bbu.close();
        self.shared.cloud.close();
    }
}

impl Drop for ControllerServer {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

fn spawn_named(name: &str, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    thread::Builder::new()
        .name(name.to_string())
        .spawn(f)
        .expect("spawn controller thread")
}

fn read_loop(shared: &Shared, conn: &Connection, peer: Peer) {
    while !shared.stop.load(Ordering::SeqCst) {
        match conn.recv(POLL) {
            Ok(pdu) => shared.step(|c, now| c.handle(peer, pdu, now)),
            Err(TransportError::Timeout) => continue,
            Err(_) => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::bbu::BbuConfig;
    use super::super::compute::ComputeConfig;
    use super::*;
    use crate::pdu::{Label, Pdu, PduType};

    #[test]
    fn serves_one_offload_over_loopback() {
        let net = Network::loopback();
        let trace = WireTrace::new();
        let bbu_ep = Endpoint::localhost(9001);
        let cloud_ep = Endpoint::localhost(9002);
        let ctrl_ep = Endpoint::localhost(9000);
        let bbu = Arc::new(Mutex::new(BbuManager::new(BbuConfig::default())));
        let compute = Arc::new(Mutex::new(
            ComputeManager::new(ComputeConfig::default()).unwrap(),
        ));
        let _b = spawn_bbu(&net, &bbu_ep, bbu.clone(), trace.clone()).unwrap();
        let _c = spawn_compute(&net, &cloud_ep, compute, trace.clone()).unwrap();
        let server = ControllerServer::spawn(
            &net,
            &ctrl_ep,
            &bbu_ep,
            &cloud_ep,
            ControllerConfig::default(),
            trace.clone(),
        )
        .unwrap();
        let ue = net.connect(&ctrl_ep).unwrap();
        ue.send(&Pdu::new(PduType::OffloadReq, 1)).unwrap();
        let accept = ue.recv(DEFAULT_TIMEOUT).unwrap();
        assert_eq!(accept.pdu_type, PduType::OffloadAccept);
        let start = ue.recv(DEFAULT_TIMEOUT).unwrap();
        assert_eq!(start.pdu_type, PduType::OffloadStart);
        assert!(start.get_str(Label::CloneAddress).unwrap().starts_with("vm-1@"));
        assert_eq!(lock(&bbu).available(), 99);
        ue.send(&Pdu::new(PduType::OffloadFin, 1)).unwrap();
        assert_eq!(ue.recv(DEFAULT_TIMEOUT).unwrap().ack, 1);
        let deadline = Instant::now() + Duration::from_secs(2);
        while !server.inspect(Controller::is_quiescent) && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        assert!(server.inspect(Controller::is_quiescent));
        assert_eq!(lock(&bbu).available(), 100);
        let from_ctrl = trace
            .events()
            .iter()
            .filter(|e| e.from == CONTROLLER_NAME)
            .count();
        // Allocate x2, Accept, Start, release, commit, FIN ack.
        assert_eq!(from_ctrl, 7);
        server.shutdown();
    }
}
