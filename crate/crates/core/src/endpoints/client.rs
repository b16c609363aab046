//! UE-side offload client.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::clone::indexed;
use super::tasks::{AppError, TaskDescriptor};
use crate::pdu::{Label, ObjectBinding, Pdu, PduType, ACK_DATA, ACK_OK};
use crate::sim::VmId;
use crate::trace::WireTrace;
use crate::transport::{Connection, Endpoint, Network, TransportError, DEFAULT_TIMEOUT};

/// Inputs longer than this travel in App_Data ahead of the App_Request.
pub const BULK_THRESHOLD: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("offload denied with code {0}")]
    Denied(u32),
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("session is closed")]
    SessionClosed,
    #[error(transparent)]
    App(#[from] AppError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Transport(TransportError),
}

impl From<TransportError> for ClientError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout => ClientError::Timeout,
            other => ClientError::Transport(other),
        }
    }
}

/// Resources asked for in an Offload_Req. Unset fields are left to the
/// controller's defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OffloadManifest {
    pub bandwidth_units: Option<u32>,
    pub vcpus: Option<u32>,
    pub ram_gb: Option<u32>,
    pub disk_gb: Option<u32>,
}

impl OffloadManifest {
    fn apply(&self, mut pdu: Pdu) -> Pdu {
        let fields = [
            (Label::BandwidthUnits, self.bandwidth_units),
            (Label::Vcpu, self.vcpus),
            (Label::RamMb, self.ram_gb.map(|g| g * 1024)),
            (Label::DiskGb, self.disk_gb),
        ];
        for (label, value) in fields {
            if let Some(v) = value {
                pdu = pdu.with_label(label, v.to_string());
            }
        }
        pdu
    }
}

/// Waits on `conn` for a PDU of one of `types` answering `request_id`,
/// skipping anything else.
fn await_reply(
    conn: &Connection,
    request_id: u32,
    types: &[PduType],
    deadline: Instant,
) -> Result<Pdu, ClientError> {
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(ClientError::Timeout);
        }
        let pdu = conn.recv(remaining)?;
        if pdu.request_id == request_id && types.contains(&pdu.pdu_type) {
            return Ok(pdu);
        }
    }
}

/// A UE attached to one controller.
#[derive(Debug)]
pub struct UeClient {
    net: Network,
    conn: Connection,
    next_request: Arc<AtomicU32>,
    timeout: Duration,
    trace: WireTrace,
}

impl UeClient {
    /// Connects to the controller, retrying until `DEFAULT_TIMEOUT`.
    pub fn connect(
        net: &Network,
        controller: &Endpoint,
        trace: WireTrace,
    ) -> Result<Self, ClientError> {
        Self::connect_with_timeout(net, controller, trace, DEFAULT_TIMEOUT)
    }

    /// `timeout` bounds the connect and every later wait for a reply.
    pub fn connect_with_timeout(
        net: &Network,
        controller: &Endpoint,
        trace: WireTrace,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        let conn = net.connect_until(controller, timeout)?;
        Ok(UeClient {
            net: net.clone(),
            conn,
            next_request: Arc::new(AtomicU32::new(1)),
            timeout,
            trace,
        })
    }

    /// Trace label of this UE.
    pub fn name(&self) -> &str {
        self.conn.local()
    }

    fn next_id(&self) -> u32 {
        self.next_request.fetch_add(1, Ordering::SeqCst)
    }

    fn send(&self, conn: &Connection, to: &str, pdu: &Pdu) -> Result<(), ClientError> {
        self.trace.send(conn, self.name(), to, pdu)?;
        Ok(())
    }

    /// Sends Offload_Req and waits for Offload_Accept then Offload_Start, then
    /// connects to the advertised clone.
    pub fn request_offload(&self, manifest: &OffloadManifest) -> Result<OffloadSession, ClientError> {
        let id = self.next_id();
        let deadline = Instant::now() + self.timeout;
        self.send(
            &self.conn,
            self.conn.peer(),
            &manifest.apply(Pdu::new(PduType::OffloadReq, id)),
        )?;
        let wanted = [PduType::OffloadAccept, PduType::OffloadStart, PduType::OffloadDenied];
        let mut accepted = false;
        let start = loop {
            let pdu = await_reply(&self.conn, id, &wanted, deadline)?;
            match pdu.pdu_type {
                PduType::OffloadDenied => return Err(ClientError::Denied(pdu.ack)),
                PduType::OffloadAccept => accepted = true,
                _ if accepted => break pdu,
                _ => return Err(ClientError::Protocol("Offload_Start before Offload_Accept".into())),
            }
        };
        let address = start
            .get_str(Label::CloneAddress)
            .ok_or_else(|| ClientError::Protocol("Offload_Start without clone_address".into()))?
            .to_string();
        let (vm, endpoint) = parse_clone_address(&address)?;
        let remaining = deadline.saturating_duration_since(Instant::now());
        let clone = self.net.connect_until(&endpoint, remaining)?;
        self.trace.alias(clone.local(), self.name());
        Ok(OffloadSession {
            controller: self.conn.clone(),
            clone,
            vm,
            clone_address: address,
            request_id: id,
            next_request: self.next_request.clone(),
            timeout: self.timeout,
            trace: self.trace.clone(),
            name: self.name().to_string(),
            open: true,
        })
    }

    pub fn close(&self) {
        self.conn.close();
    }
}

/// Splits `vm-N@host:port`.
pub fn parse_clone_address(address: &str) -> Result<(VmId, Endpoint), ClientError> {
    let bad = || ClientError::Protocol(format!("bad clone_address {address:?}"));
    let (vm, endpoint) = address.split_once('@').ok_or_else(bad)?;
    Ok((vm.parse().map_err(|_| bad())?, endpoint.parse().map_err(|_| bad())?))
}

/// One accepted offload: talks to the clone and ends with Offload_FIN.
#[derive(Debug)]
pub struct OffloadSession {
    controller: Connection,
    clone: Connection,
    vm: VmId,
    clone_address: String,
    request_id: u32,
    next_request: Arc<AtomicU32>,
    timeout: Duration,
    trace: WireTrace,
    name: String,
    open: bool,
}

impl OffloadSession {
    /// Request id of the Offload_Req that opened the session.
    pub fn request_id(&self) -> u32 {
        self.request_id
    }

    pub fn vm(&self) -> VmId {
        self.vm
    }

    pub fn clone_address(&self) -> &str {
        &self.clone_address
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    fn ensure_open(&self) -> Result<(), ClientError> {
        if self.open {
            Ok(())
        } else {
            Err(ClientError::SessionClosed)
        }
    }

    fn next_id(&self) -> u32 {
        self.next_request.fetch_add(1, Ordering::SeqCst)
    }

    fn send_clone(&self, pdu: &Pdu) -> Result<(), ClientError> {
        self.trace.send(&self.clone, &self.name, self.clone.peer(), pdu)?;
        Ok(())
    }

    /// Registers code units by name with the clone.
    pub fn register_app(&mut self, units: &[&str]) -> Result<(), ClientError> {
        self.ensure_open()?;
        let id = self.next_id();
        let mut pdu = Pdu::new(PduType::AppRegister, id);
        for (i, unit) in units.iter().enumerate() {
            pdu = pdu.with_binding(ObjectBinding::new(indexed(Label::Code, i as u32), *unit));
        }
        self.send_clone(&pdu)?;
        let reply = await_reply(
            &self.clone,
            id,
            &[PduType::AppRegister],
            Instant::now() + self.timeout,
        )?;
        if reply.ack == ACK_OK {
            Ok(())
        } else {
            Err(ClientError::App(AppError::new(
                reply.ack,
                reply.get_str(Label::ErrorMessage).unwrap_or_default(),
            )))
        }
    }

    /// Runs `tasks` in one App_Request. The outer result fails only for
    /// transport or protocol problems; per-task failures come back inline, in
    /// task order.
    pub fn offload_task(
        &mut self,
        tasks: &[TaskDescriptor],
    ) -> Result<Vec<Result<Vec<u8>, AppError>>, ClientError> {
        self.ensure_open()?;
        if tasks.is_empty() {
            return Err(ClientError::InvalidRequest("empty task list".into()));
        }
        let id = self.next_id();
        let mut request = Pdu::new(PduType::AppRequest, id);
        for (i, task) in tasks.iter().enumerate() {
            let i = i as u32;
            request = request.with_binding(ObjectBinding::new(
                indexed(Label::TaskId, i),
                task.task_id.as_str(),
            ));
            let input = ObjectBinding::new(indexed(Label::UserData, i), task.input.clone());
            if task.input.len() > BULK_THRESHOLD {
                self.send_clone(&Pdu::new(PduType::AppData, id).with_binding(input))?;
            } else {
                request = request.with_binding(input);
            }
        }
        self.send_clone(&request)?;
        let reply = await_reply(
            &self.clone,
            id,
            &[PduType::AppResponse],
            Instant::now() + self.timeout,
        )?;
        if reply.ack != ACK_DATA {
            return Err(ClientError::App(AppError::new(
                reply.ack,
                reply.get_str(Label::ErrorMessage).unwrap_or_default(),
            )));
        }
        (0..tasks.len() as u32)
            .map(|i| {
                let find = |label: Label| {
                    let name = indexed(label, i);
                    reply
                        .bindings
                        .iter()
                        .find(|b| b.name == name)
                        .map(|b| b.value.clone())
                };
                if let Some(code) = find(Label::AppError) {
                    let code = String::from_utf8_lossy(&code).parse().map_err(|_| {
                        ClientError::Protocol(format!("non-numeric app_error for task {i}"))
                    })?;
                    let message = find(Label::ErrorMessage).unwrap_or_default();
                    Ok(Err(AppError::new(code, String::from_utf8_lossy(&message))))
                } else {
                    find(Label::UserData)
                        .map(Ok)
                        .ok_or_else(|| ClientError::Protocol(format!("no result for task {i}")))
                }
            })
            .collect()
    }

    /// Sends Offload_FIN. The session is closed afterwards whatever the
    /// outcome.
    pub fn finish(&mut self) -> Result<(), ClientError> {
        self.ensure_open()?;
        self.open = false;
        self.clone.close();
        let fin = Pdu::new(PduType::OffloadFin, self.request_id);
        self.trace
            .send(&self.controller, &self.name, self.controller.peer(), &fin)?;
        let reply = await_reply(
            &self.controller,
            self.request_id,
            &[PduType::OffloadFin],
            Instant::now() + self.timeout,
        )?;
        if reply.ack == ACK_OK {
            Ok(())
        } else {
            Err(ClientError::Denied(reply.ack))
        }
    }
}
