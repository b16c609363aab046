//! Clone-side executor: answers App_Register and App_Request.
//!
//! Bulk inputs arrive as App_Data PDUs carrying `[2, i]` bindings ahead of
//! the App_Request with the same request id; the clone merges them into the
//! request before executing. App_Data itself is never answered.

use std::collections::HashMap;

use super::tasks::{clone_execute, is_builtin, AppError, TaskDescriptor, BAD_INPUT, UNKNOWN_TASK};
use crate::pdu::{codes, Label, ObjectBinding, ObjectName, Pdu, PduType, ACK_DATA, ACK_OK};
use crate::runtime::{spawn_server, Handler, ServerHandle};
use crate::trace::WireTrace;
use crate::transport::{Endpoint, Network, TransportError};

pub const CLONE_NAME: &str = "clone";

pub(crate) fn indexed(label: Label, i: u32) -> ObjectName {
    label.name().indexed(i).expect("two-component name is valid")
}

/// Reads the tasks of an App_Request: `[10, i]` names and `[2, i]` inputs for
/// consecutive `i` from 0.
pub fn tasks_from_request(pdu: &Pdu) -> Vec<TaskDescriptor> {
    let mut inputs: HashMap<u32, Vec<u8>> = HashMap::new();
    let mut names: HashMap<u32, String> = HashMap::new();
    for b in &pdu.bindings {
        let Some(i) = b.name.index() else { continue };
        if b.name.kind() == Label::TaskId.id() {
            names.insert(i, String::from_utf8_lossy(&b.value).into_owned());
        } else if b.name.kind() == Label::UserData.id() {
            inputs.insert(i, b.value.clone());
        }
    }
    (0..)
        .map_while(|i| {
            names.remove(&i).map(|task_id| TaskDescriptor {
                task_id,
                input: inputs.remove(&i).unwrap_or_default(),
            })
        })
        .collect()
}

/// Result bindings: `[2, i]` on success, `[3, i]` (code) and `[8, i]`
/// (message) on failure.
pub fn response_for(request_id: u32, results: &[Result<Vec<u8>, AppError>]) -> Pdu {
    let mut pdu = Pdu::new(PduType::AppResponse, request_id);
    for (i, r) in results.iter().enumerate() {
        let i = i as u32;
        pdu = match r {
            Ok(bytes) => pdu.with_binding(ObjectBinding::new(
                indexed(Label::UserData, i),
                bytes.clone(),
            )),
            Err(e) => pdu
                .with_binding(ObjectBinding::new(
                    indexed(Label::AppError, i),
                    e.code.to_string(),
                ))
                .with_binding(ObjectBinding::new(
                    indexed(Label::ErrorMessage, i),
                    e.message.clone(),
                )),
        };
    }
    pdu
}

/// Per-connection clone state.
#[derive(Debug, Default)]
pub struct CloneExecutor {
    staged: HashMap<u32, Vec<(u32, Vec<u8>)>>,
}

impl CloneExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Handles one inbound PDU, returning the reply if one is due.
    pub fn handle(&mut self, pdu: Pdu) -> Option<Pdu> {
        if pdu.ack != ACK_DATA {
            return None;
        }
        match pdu.pdu_type {
            PduType::AppRegister => Some(self.register(&pdu)),
            PduType::AppData => {
                let staged = self.staged.entry(pdu.request_id).or_default();
                for b in pdu.bindings {
                    if let (Some(i), true) = (b.name.index(), b.name.kind() == Label::UserData.id())
                    {
                        staged.push((i, b.value));
                    }
                }
                None
            }
            PduType::AppRequest => Some(self.execute(pdu)),
            other => Some(Pdu::new(other, pdu.request_id).with_ack(codes::UNSUPPORTED)),
        }
    }

    fn register(&self, pdu: &Pdu) -> Pdu {
        let units: Vec<String> = pdu
            .bindings
            .iter()
            .filter(|b| b.name.kind() == Label::Code.id())
            .map(|b| String::from_utf8_lossy(&b.value).into_owned())
            .collect();
        let reply = Pdu::new(PduType::AppRegister, pdu.request_id);
        if units.is_empty() {
            return reply
                .with_ack(BAD_INPUT)
                .with_label(Label::AppError, BAD_INPUT.to_string())
                .with_label(Label::ErrorMessage, "no code units named");
        }
        match units.iter().find(|u| !is_builtin(u)) {
            Some(unknown) => reply
                .with_ack(UNKNOWN_TASK)
                .with_label(Label::AppError, UNKNOWN_TASK.to_string())
                .with_label(Label::ErrorMessage, format!("unknown code unit {unknown:?}")),
            None => reply.with_ack(ACK_OK),
        }
    }

    fn execute(&mut self, mut pdu: Pdu) -> Pdu {
        if let Some(staged) = self.staged.remove(&pdu.request_id) {
            for (i, value) in staged {
                pdu = pdu.with_binding(ObjectBinding::new(
                    indexed(Label::UserData, i),
                    value,
                ));
            }
        }
        let tasks = tasks_from_request(&pdu);
        if tasks.is_empty() {
            return Pdu::new(PduType::AppResponse, pdu.request_id)
                .with_ack(BAD_INPUT)
                .with_label(Label::ErrorMessage, "no tasks in request");
        }
        let results: Vec<_> = tasks.iter().map(clone_execute).collect();
        response_for(pdu.request_id, &results)
    }
}

/// Serves the clone executor on `endpoint`, one executor per connection.
pub fn spawn_clone(
    net: &Network,
    endpoint: &Endpoint,
    trace: WireTrace,
) -> Result<ServerHandle, TransportError> {
    spawn_server(net, endpoint, CLONE_NAME, trace, || -> Handler {
        let mut exec = CloneExecutor::new();
        Box::new(move |pdu| exec.handle(pdu).into_iter().collect())
    })
}
