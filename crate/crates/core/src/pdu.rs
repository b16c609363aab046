//! Bit-exact encoding of protocol data units.
//!
//! Every PDU starts with a fixed 16-byte header followed by the object
//! bindings. All integers are big-endian:
//!
//! ```text
//! [pdu_type:4][request_id:4][ack:4][binding_count:4]
//! per binding: [name_len:4][name ids: 4 * name_len][value_len:4][value bytes]
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Size of the fixed header in bytes.
pub const HEADER_LEN: usize = 16;

/// Upper bound on the encoded size of a single PDU (16 MiB).
pub const MAX_PDU_LEN: usize = 16 * 1024 * 1024;

/// Maximum number of integers in an object name.
pub const MAX_NAME_LEN: usize = 16;

/// ACK field value of a request or response data packet.
pub const ACK_DATA: u32 = 0;

/// ACK field value of an acknowledgement packet.
pub const ACK_OK: u32 = 1;

/// Rejection codes carried in the ACK field (always > 1).
pub mod codes {
    pub const DUPLICATE: u32 = 2;
    pub const COMPUTE_FAILURE: u32 = 3;
    /// Unsupported resize or otherwise unsupported request.
    pub const UNSUPPORTED: u32 = 4;
    pub const CAPACITY: u32 = 5;
    pub const TIMEOUT: u32 = 6;
    pub const BBU_FAILURE: u32 = 7;
    /// First code of the application error band relayed from clones.
    pub const APP_ERROR_BASE: u32 = 100;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unknown PDU type {0}")]
    UnknownPduType(u32),
    #[error("malformed PDU: {0}")]
    Malformed(String),
    #[error("encoded PDU of {0} bytes exceeds the 16 MiB cap")]
    OversizePdu(usize),
    #[error("unknown object label {0:?}")]
    UnknownLabel(String),
}

/// The eleven PDU types of the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum PduType {
    OffloadReq = 0,
    OffloadAccept = 1,
    OffloadDenied = 2,
    OffloadStart = 3,
    AppRegister = 4,
    AppRequest = 5,
    AppData = 6,
    AppResponse = 7,
    OffloadFin = 8,
    ManageCompute = 9,
    ManageBbu = 10,
}

impl PduType {
    pub const ALL: [PduType; 11] = [
        PduType::OffloadReq,
        PduType::OffloadAccept,
        PduType::OffloadDenied,
        PduType::OffloadStart,
        PduType::AppRegister,
        PduType::AppRequest,
        PduType::AppData,
        PduType::AppResponse,
        PduType::OffloadFin,
        PduType::ManageCompute,
        PduType::ManageBbu,
    ];

    pub fn value(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            PduType::OffloadReq => "Offload_Req",
            PduType::OffloadAccept => "Offload_Accept",
            PduType::OffloadDenied => "Offload_Denied",
            PduType::OffloadStart => "Offload_Start",
            PduType::AppRegister => "App_Register",
            PduType::AppRequest => "App_Request",
            PduType::AppData => "App_Data",
            PduType::AppResponse => "App_Response",
            PduType::OffloadFin => "Offload_FIN",
            PduType::ManageCompute => "Manage_Compute",
            PduType::ManageBbu => "Manage_BBU",
        }
    }
}

impl TryFrom<u32> for PduType {
    type Error = CodecError;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        PduType::ALL
            .get(value as usize)
            .copied()
            .ok_or(CodecError::UnknownPduType(value))
    }
}

impl fmt::Display for PduType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Object name: a non-empty sequence of at most 16 integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectName(Vec<u32>);

impl ObjectName {
    pub fn new(ids: Vec<u32>) -> Result<Self, CodecError> {
        if ids.is_empty() || ids.len() > MAX_NAME_LEN {
            return Err(CodecError::Malformed(format!(
                "object name length {} outside 1..={MAX_NAME_LEN}",
                ids.len()
            )));
        }
        Ok(ObjectName(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    /// Appends an instance index, e.g. `[10]` becomes `[10, 3]` for the
    /// fourth task of a multi-task PDU.
    pub fn indexed(&self, index: u32) -> Result<Self, CodecError> {
        let mut ids = self.0.clone();
        ids.push(index);
        ObjectName::new(ids)
    }

    /// The first id, which selects the object kind.
    pub fn kind(&self) -> u32 {
        self.0[0]
    }

    /// Instance index of a name built with [`ObjectName::indexed`].
    pub fn index(&self) -> Option<u32> {
        match self.0.as_slice() {
            [_, index] => Some(*index),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, id) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{id}")?;
        }
        Ok(())
    }
}

/// Registry of well-known object names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Code = 1,
    UserData = 2,
    AppError = 3,
    Vcpu = 4,
    RamMb = 5,
    DiskGb = 6,
    CloneAddress = 7,
    ErrorMessage = 8,
    BandwidthUnits = 9,
    TaskId = 10,
}

impl Label {
    pub const ALL: [Label; 10] = [
        Label::Code,
        Label::UserData,
        Label::AppError,
        Label::Vcpu,
        Label::RamMb,
        Label::DiskGb,
        Label::CloneAddress,
        Label::ErrorMessage,
        Label::BandwidthUnits,
        Label::TaskId,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Code => "code",
            Label::UserData => "user_data",
            Label::AppError => "app_error",
            Label::Vcpu => "vcpu",
            Label::RamMb => "ram_mb",
            Label::DiskGb => "disk_gb",
            Label::CloneAddress => "clone_address",
            Label::ErrorMessage => "error_message",
            Label::BandwidthUnits => "bandwidth_units",
            Label::TaskId => "task_id",
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> ObjectName {
        ObjectName(vec![self.id()])
    }
}

impl FromStr for Label {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| CodecError::UnknownLabel(s.to_string()))
    }
}

/// Looks up the fixed id sequence for a registry label such as `"vcpu"`.
pub fn well_known_name(label: &str) -> Result<ObjectName, CodecError> {
    label.parse::<Label>().map(Label::name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectBinding {
    pub name: ObjectName,
    pub value: Vec<u8>,
}

impl ObjectBinding {
    pub fn new(name: ObjectName, value: impl Into<Vec<u8>>) -> Self {
        ObjectBinding {
            name,
            value: value.into(),
        }
    }

    pub fn labelled(label: Label, value: impl Into<Vec<u8>>) -> Self {
        ObjectBinding::new(label.name(), value)
    }

    fn encoded_len(&self) -> usize {
        8 + 4 * self.name.0.len() + self.value.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pdu {
    pub pdu_type: PduType,
    pub request_id: u32,
    pub ack: u32,
    pub bindings: Vec<ObjectBinding>,
}

impl Pdu {
    /// A data packet (ack = 0) with no bindings.
    pub fn new(pdu_type: PduType, request_id: u32) -> Self {
        Pdu {
            pdu_type,
            request_id,
            ack: ACK_DATA,
            bindings: Vec::new(),
        }
    }

    pub fn with_ack(mut self, ack: u32) -> Self {
        self.ack = ack;
        self
    }

    pub fn with_binding(mut self, binding: ObjectBinding) -> Self {
        self.bindings.push(binding);
        self
    }

    pub fn with_label(self, label: Label, value: impl Into<Vec<u8>>) -> Self {
        self.with_binding(ObjectBinding::labelled(label, value))
    }

    /// Value of the first binding whose name is exactly `label`.
    pub fn get(&self, label: Label) -> Option<&[u8]> {
        self.bindings
            .iter()
            .find(|b| b.name.ids() == [label.id()])
            .map(|b| b.value.as_slice())
    }

    pub fn get_str(&self, label: Label) -> Option<&str> {
        self.get(label).and_then(|v| std::str::from_utf8(v).ok())
    }

    pub fn is_ack(&self) -> bool {
        self.ack == ACK_OK
    }

    pub fn is_rejection(&self) -> bool {
        self.ack > ACK_OK
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .bindings
                .iter()
                .map(ObjectBinding::encoded_len)
                .sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let len = self.encoded_len();
        if len > MAX_PDU_LEN {
            return Err(CodecError::OversizePdu(len));
        }
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(&self.pdu_type.value().to_be_bytes());
        out.extend_from_slice(&self.request_id.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.extend_from_slice(&(self.bindings.len() as u32).to_be_bytes());
        for binding in &self.bindings {
            out.extend_from_slice(&(binding.name.0.len() as u32).to_be_bytes());
            for id in &binding.name.0 {
                out.extend_from_slice(&id.to_be_bytes());
            }
            out.extend_from_slice(&(binding.value.len() as u32).to_be_bytes());
            out.extend_from_slice(&binding.value);
        }
        debug_assert_eq!(out.len(), len);
        Ok(out)
    }

    /// Decodes a buffer holding exactly one PDU.
    pub fn decode(bytes: &[u8]) -> Result<Pdu, CodecError> {
        let (pdu, consumed) = Pdu::decode_prefix(bytes)?;
        if consumed != bytes.len() {
            return Err(CodecError::Malformed(format!(
                "{} trailing bytes after PDU",
                bytes.len() - consumed
            )));
        }
        Ok(pdu)
    }

    /// Decodes one PDU from the front of `bytes`, returning it together with
    /// the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Pdu, usize), CodecError> {
        let mut reader = Reader { bytes, pos: 0 };
        let type_value = reader.u32()?;
        let request_id = reader.u32()?;
        let ack = reader.u32()?;
        let count = reader.u32()? as usize;
        let pdu_type = PduType::try_from(type_value)?;

        // Each binding occupies at least 12 bytes; never trust `count` for allocation.
        let mut bindings = Vec::with_capacity(count.min(reader.remaining() / 12));
        for _ in 0..count {
            let name_len = reader.u32()? as usize;
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(CodecError::Malformed(format!(
                    "object name length {name_len} outside 1..={MAX_NAME_LEN}"
                )));
            }
            let mut ids = Vec::with_capacity(name_len);
            for _ in 0..name_len {
                ids.push(reader.u32()?);
            }
            let value_len = reader.u32()? as usize;
            let value = reader.take(value_len)?.to_vec();
            bindings.push(ObjectBinding {
                name: ObjectName(ids),
                value,
            });
            if reader.pos > MAX_PDU_LEN {
                return Err(CodecError::OversizePdu(reader.pos));
            }
        }
        Ok((
            Pdu {
                pdu_type,
                request_id,
                ack,
                bindings,
            },
            reader.pos,
        ))
    }
}

impl fmt::Display for Pdu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} req={} ack={}",
            self.pdu_type, self.request_id, self.ack
        )?;
        for b in &self.bindings {
            match std::str::from_utf8(&b.value) {
                Ok(s) if s.len() <= 48 && !s.contains(char::is_whitespace) => {
                    write!(f, " {}={}", b.name, s)?
                }
                _ => write!(f, " {}=<{} bytes>", b.name, b.value.len())?,
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated {
                needed: self.pos + n,
                available: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}
