//! Unified offloading protocol for mobile cloud task offloading and
//! resource management.
//!
//! The crate is organised bottom-up:
//!
//! - [`pdu`]: the binary PDU format and object-binding registry.
//! - [`transport`]: length-prefixed framing over TCP or an in-process loopback.
//! - [`scaling`]: polynomial resize-delay models, least-squares fitting and the
//!   built-in coefficient table.
//! - [`sim`]: a deterministic discrete-event cloud whose resize delays follow
//!   those models.
//! - [`controller`]: the mobile cloud controller transaction state machine, the
//!   BBU stub and the compute backend.
//! - [`endpoints`]: the UE-side offload client and the clone-side executor.
//! - [`scenario`]: end-to-end runs wiring all actors together.
//!
//! The guide under `book/` walks through each layer; its code listings are
//! compiled and run as doctests of this crate.

pub mod controller;
pub mod endpoints;
pub mod pdu;
pub mod runtime;
pub mod scaling;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod transport;

pub use pdu::{CodecError, Label, ObjectBinding, ObjectName, Pdu, PduType};
pub use scaling::{
    builtin_model, fit_polynomial, predict_delay, squared_error, DelaySample, Direction, Mode,
    PolyModel, ResourceKind, ScalingScenario,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/wire-format.md")]
    mod wire_format {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/scaling-models.md")]
    mod scaling_models {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/endpoints.md")]
    mod endpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
