//! Shared, line-oriented traces of wire traffic and transaction states.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::pdu::{Pdu, PduType};
use crate::transport::{Connection, TransportError};

/// One PDU as it was handed to the transport.
#[derive(Debug, Clone, PartialEq)]
pub struct WireEvent {
    pub t_ms: f64,
    pub from: String,
    pub to: String,
    pub pdu_type: PduType,
    pub request_id: u32,
    pub ack: u32,
    pub summary: String,
}

impl fmt::Display for WireEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.3} {}->{} {}",
            self.t_ms, self.from, self.to, self.summary
        )
    }
}

/// Append-only wire log shared by every actor of a run.
#[derive(Clone)]
pub struct WireTrace {
    start: Instant,
    events: Arc<Mutex<Vec<WireEvent>>>,
    aliases: Arc<Mutex<HashMap<String, String>>>,
}

impl Default for WireTrace {
    fn default() -> Self {
        WireTrace {
            start: Instant::now(),
            events: Arc::default(),
            aliases: Arc::default(),
        }
    }
}

impl fmt::Debug for WireTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WireTrace")
            .field("events", &self.len())
            .finish()
    }
}

impl WireTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `address` as `name` from now on, so that an actor with several
    /// connections appears under one label.
    pub fn alias(&self, address: &str, name: &str) {
        self.aliases
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(address.to_string(), name.to_string());
    }

    fn resolve(&self, label: &str) -> String {
        let aliases = self.aliases.lock().unwrap_or_else(|e| e.into_inner());
        aliases.get(label).cloned().unwrap_or_else(|| label.to_string())
    }

    pub fn record(&self, from: &str, to: &str, pdu: &Pdu) {
        let event = WireEvent {
            t_ms: self.start.elapsed().as_secs_f64() * 1e3,
            from: self.resolve(from),
            to: self.resolve(to),
            pdu_type: pdu.pdu_type,
            request_id: pdu.request_id,
            ack: pdu.ack,
            summary: pdu.to_string(),
        };
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(event);
    }

    /// Records, then sends. Recording first keeps the log causally ordered:
    /// a reply can only be logged after the request it answers.
    pub fn send(
        &self,
        conn: &Connection,
        from: &str,
        to: &str,
        pdu: &Pdu,
    ) -> Result<(), TransportError> {
        self.record(from, to, pdu);
        conn.send(pdu)
    }

    pub fn events(&self) -> Vec<WireEvent> {
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().map(|e| e.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lines(&self) -> Vec<String> {
        self.events().iter().map(ToString::to_string).collect()
    }
}
