//! The two protocol ends around the controller.
//!
//! [`client`] is the UE: it requests an offload, talks to the clone it is
//! given, and finishes. [`clone`] executes tasks from the [`tasks`] registry.

pub mod client;
pub mod clone;
pub mod tasks;

pub use client::{ClientError, OffloadManifest, OffloadSession, UeClient};
pub use clone::{spawn_clone, CloneExecutor};
pub use tasks::{clone_execute, AppError, TaskDescriptor};
