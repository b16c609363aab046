//! UE client and clone executor against a full in-process stack.

mod common;

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use common::matmul_checksum_oracle;
use proptest::prelude::*;
use uop::controller::bbu::{BbuConfig, BbuManager};
use uop::controller::compute::{ComputeConfig, ComputeManager};
use uop::controller::server::{spawn_bbu, spawn_compute, ControllerServer};
use uop::controller::ControllerConfig;
use uop::endpoints::clone::spawn_clone;
use uop::endpoints::tasks::{matmul_inputs, BAD_INPUT, TASK_FAILED, UNKNOWN_TASK};
use uop::endpoints::{ClientError, OffloadManifest, TaskDescriptor, UeClient};
use uop::pdu::codes::{self, APP_ERROR_BASE};
use uop::runtime::{spawn_server, Handler, ServerHandle};
use uop::trace::WireTrace;
use uop::transport::{Endpoint, Network};
use uop::{Label, Pdu, PduType};

const CTRL: u16 = 7077;
const CLONE: u16 = 7078;
const BBU: u16 = 7079;
const CLOUD: u16 = 7080;

struct Stack {
    net: Network,
    trace: WireTrace,
    _servers: Vec<ServerHandle>,
    controller: ControllerServer,
}

impl Stack {
    fn start(compute_failure: f64) -> Self {
        let net = Network::loopback();
        let trace = WireTrace::new();
        let ep = Endpoint::localhost;
        let bbu = Arc::new(Mutex::new(BbuManager::new(BbuConfig::default())));
        let compute = Arc::new(Mutex::new(
            ComputeManager::new(ComputeConfig {
                failure_rate: compute_failure,
                ..ComputeConfig::default()
            })
            .unwrap(),
        ));
        let servers = vec![
            spawn_bbu(&net, &ep(BBU), bbu, trace.clone()).unwrap(),
            spawn_compute(&net, &ep(CLOUD), compute, trace.clone()).unwrap(),
            spawn_clone(&net, &ep(CLONE), trace.clone()).unwrap(),
        ];
        let controller = ControllerServer::spawn(
            &net,
            &ep(CTRL),
            &ep(BBU),
            &ep(CLOUD),
            ControllerConfig {
                clone_endpoint: ep(CLONE),
                ..ControllerConfig::default()
            },
            trace.clone(),
        )
        .unwrap();
        Stack {
            net,
            trace,
            _servers: servers,
            controller,
        }
    }

    fn client(&self) -> UeClient {
        UeClient::connect(&self.net, &Endpoint::localhost(CTRL), self.trace.clone()).unwrap()
    }
}

fn fib(n: u32) -> TaskDescriptor {
    TaskDescriptor::new("fib", n.to_string())
}

fn text(result: &Result<Vec<u8>, uop::endpoints::AppError>) -> &str {
    std::str::from_utf8(result.as_ref().unwrap()).unwrap()
}

#[test]
fn healthy_session_runs_tasks_and_finishes() {
    let stack = Stack::start(0.0);
    let ue = stack.client();
    let mut session = ue.request_offload(&OffloadManifest::default()).unwrap();
    assert!(session.clone_address().starts_with("vm-1@"));
    session.register_app(&["fib", "matmul_n"]).unwrap();

    let one = session.offload_task(&[fib(20)]).unwrap();
    assert_eq!(text(&one[0]), "6765");
    let two = session.offload_task(&[fib(10), fib(15)]).unwrap();
    assert_eq!([text(&two[0]), text(&two[1])], ["55", "610"]);

    session.finish().unwrap();
    assert!(!session.is_open());
    assert!(matches!(session.finish(), Err(ClientError::SessionClosed)));
    assert!(matches!(
        session.offload_task(&[fib(1)]),
        Err(ClientError::SessionClosed)
    ));
    assert!(matches!(
        session.register_app(&["fib"]),
        Err(ClientError::SessionClosed)
    ));
    stack.controller.shutdown();
}

#[test]
fn compute_failure_is_denied_with_code_three() {
    let stack = Stack::start(1.0);
    let ue = stack.client();
    let err = ue.request_offload(&OffloadManifest::default()).unwrap_err();
    assert!(matches!(err, ClientError::Denied(codes::COMPUTE_FAILURE)), "{err}");
}

#[test]
fn registering_an_unknown_unit_is_an_application_error() {
    let stack = Stack::start(0.0);
    let ue = stack.client();
    let mut session = ue.request_offload(&OffloadManifest::default()).unwrap();
    match session.register_app(&["fib", "quantum"]) {
        Err(ClientError::App(e)) => {
            assert!(e.code >= APP_ERROR_BASE);
            assert!(e.message.contains("quantum"), "{}", e.message);
        }
        other => panic!("{other:?}"),
    }
    // The session is still usable.
    session.register_app(&["fib"]).unwrap();
    session.finish().unwrap();
}

#[test]
fn application_errors_leave_the_session_intact() {
    let stack = Stack::start(0.0);
    let ue = stack.client();
    let mut session = ue.request_offload(&OffloadManifest::default()).unwrap();
    let results = session
        .offload_task(&[
            TaskDescriptor::new("nope", ""),
            fib(12),
            TaskDescriptor::new("fail_always", ""),
            TaskDescriptor::new("matmul_n", "n=0"),
        ])
        .unwrap();
    let err = results[0].as_ref().unwrap_err();
    assert_eq!((err.code, err.message.as_str()), (UNKNOWN_TASK, "unknown task"));
    assert_eq!(text(&results[1]), "144");
    assert_eq!(results[2].as_ref().unwrap_err().code, TASK_FAILED);
    assert_eq!(results[3].as_ref().unwrap_err().code, BAD_INPUT);

    let next = session.offload_task(&[fib(20)]).unwrap();
    assert_eq!(text(&next[0]), "6765");
    assert!(matches!(
        session.offload_task(&[]),
        Err(ClientError::InvalidRequest(_))
    ));
    session.finish().unwrap();
}

#[test]
fn matmul_matches_the_naive_oracle() {
    let stack = Stack::start(0.0);
    let ue = stack.client();
    let mut session = ue.request_offload(&OffloadManifest::default()).unwrap();
    let results = session
        .offload_task(&[TaskDescriptor::new("matmul_n", "n=64 seed=7")])
        .unwrap();
    let (a, b) = matmul_inputs(64, 7);
    assert_eq!(text(&results[0]), matmul_checksum_oracle(&a, &b, 64).to_string());
    session.finish().unwrap();
}

#[test]
fn bulk_input_travels_as_app_data() {
    let stack = Stack::start(0.0);
    let ue = stack.client();
    let mut session = ue.request_offload(&OffloadManifest::default()).unwrap();
    // Leading zeros pad the decimal input past the bulk threshold.
    let input = format!("{}{}", "0".repeat(80 * 1024), 30);
    let results = session
        .offload_task(&[TaskDescriptor::new("fib", input), fib(5)])
        .unwrap();
    assert_eq!([text(&results[0]), text(&results[1])], ["832040", "5"]);
    session.finish().unwrap();
    let data: Vec<_> = stack
        .trace
        .events()
        .into_iter()
        .filter(|e| e.pdu_type == PduType::AppData)
        .collect();
    assert_eq!(data.len(), 1);
    // App_Data is never answered.
    assert!(data[0].to == uop::endpoints::clone::CLONE_NAME);
}

#[test]
fn second_offload_reuses_the_clone() {
    let stack = Stack::start(0.0);
    let ue = stack.client();
    let mut first = ue.request_offload(&OffloadManifest::default()).unwrap();
    first.finish().unwrap();
    let manifest = OffloadManifest {
        vcpus: Some(2),
        ..OffloadManifest::default()
    };
    let mut second = ue.request_offload(&manifest).unwrap();
    assert_eq!(second.vm(), first.vm());
    assert_ne!(second.request_id(), first.request_id());
    second.finish().unwrap();
}

/// A controller that starts every session and then never answers FIN.
fn silent_controller(net: &Network, trace: WireTrace) -> ServerHandle {
    spawn_server(net, &Endpoint::localhost(CTRL), "ctrl", trace, || -> Handler {
        Box::new(|pdu: Pdu| match pdu.pdu_type {
            PduType::OffloadReq => vec![
                Pdu::new(PduType::OffloadAccept, pdu.request_id),
                Pdu::new(PduType::OffloadStart, pdu.request_id)
                    .with_label(Label::CloneAddress, format!("vm-1@{}", Endpoint::localhost(CLONE))),
            ],
            _ => Vec::new(),
        })
    })
    .unwrap()
}

#[test]
fn finish_against_a_silent_controller_times_out_and_closes() {
    let net = Network::loopback();
    let trace = WireTrace::new();
    let _clone = spawn_clone(&net, &Endpoint::localhost(CLONE), trace.clone()).unwrap();
    let _ctrl = silent_controller(&net, trace.clone());
    let ue = UeClient::connect_with_timeout(
        &net,
        &Endpoint::localhost(CTRL),
        trace,
        Duration::from_millis(300),
    )
    .unwrap();
    let mut session = ue.request_offload(&OffloadManifest::default()).unwrap();
    assert_eq!(text(&session.offload_task(&[fib(7)]).unwrap()[0]), "13");
    assert!(matches!(session.finish(), Err(ClientError::Timeout)));
    assert!(!session.is_open());
    assert!(matches!(session.finish(), Err(ClientError::SessionClosed)));
}

#[test]
fn unreachable_controller_is_a_timeout() {
    let net = Network::loopback();
    let result = UeClient::connect_with_timeout(
        &net,
        &Endpoint::localhost(CTRL),
        WireTrace::new(),
        Duration::from_millis(100),
    );
    assert!(matches!(result, Err(ClientError::Timeout)));
}

fn check_request_response_pairing(trace: &WireTrace) -> Result<(), TestCaseError> {
    let events = trace.events();
    for (i, resp) in events.iter().enumerate() {
        if resp.pdu_type != PduType::AppResponse {
            continue;
        }
        let requests = events[..i]
            .iter()
            .filter(|e| {
                e.pdu_type == PduType::AppRequest
                    && e.request_id == resp.request_id
                    && e.from == resp.to
            })
            .count();
        prop_assert_eq!(requests, 1, "response {} to {}", resp.request_id, resp.to);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn interleaved_sessions_get_their_own_answers(
        plans in prop::collection::vec(
            prop::collection::vec(prop::collection::vec(0u32..60, 1..4), 1..6),
            2..6,
        )
    ) {
        let stack = Stack::start(0.0);
        let outcomes: Vec<Vec<Vec<String>>> = thread::scope(|s| {
            let handles: Vec<_> = plans
                .iter()
                .map(|plan| {
                    let ue = stack.client();
                    s.spawn(move || {
                        let mut session = ue.request_offload(&OffloadManifest::default()).unwrap();
                        let got = plan
                            .iter()
                            .map(|batch| {
                                let tasks: Vec<_> = batch.iter().map(|&n| fib(n)).collect();
                                session
                                    .offload_task(&tasks)
                                    .unwrap()
                                    .iter()
                                    .map(|r| text(r).to_string())
                                    .collect()
                            })
                            .collect();
                        session.finish().unwrap();
                        got
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (plan, got) in plans.iter().zip(&outcomes) {
            for (batch, results) in plan.iter().zip(got) {
                let want: Vec<String> = batch
                    .iter()
                    .map(|&n| {
                        let (mut a, mut b) = (0u64, 1u64);
                        for _ in 0..n {
                            (a, b) = (b, a + b);
                        }
                        a.to_string()
                    })
                    .collect();
                prop_assert_eq!(results, &want);
            }
        }
        check_request_response_pairing(&stack.trace)?;
    }
}
