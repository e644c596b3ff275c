use thiserror::Error;

use super::{ProtocolError, Result};
use crate::model::{ModelError, ModelParams};
use crate::scalar::Scalar;

pub const MAGIC: u32 = 0xFED5_9A17;
pub const PROTOCOL_VERSION: u8 = 1;
/// magic, version, round, sender, d, k, sample count, two losses
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 2 + 2 + 4 + 8 + 8;
/// CRC-32 over everything before it.
pub const TRAILER_LEN: usize = 4;

/// Total encoded size of a message carrying a `k`-class, `d`-feature model.
pub fn encoded_len(d: usize, k: usize) -> usize {
    HEADER_LEN + 8 * (k * d + k) + TRAILER_LEN
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported protocol version {0}")]
    VersionUnsupported(u8),
    #[error("checksum mismatch: message carries {carried:#010x}, payload hashes to {computed:#010x}")]
    ChecksumMismatch { carried: u32, computed: u32 },
    #[error("truncated message: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{extra} unexpected bytes after the checksum")]
    TrailingBytes { extra: usize },
    #[error("malformed message: {0}")]
    Malformed(String),
}

/// One trained model travelling upstream (client to driver, or driver to
/// global server).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage<T = f64> {
    pub protocol_version: u8,
    pub round: u32,
    pub sender_id: u32,
    pub params: ModelParams<T>,
    pub sample_count: u32,
    pub loss_before: f64,
    pub loss_after: f64,
    /// CRC-32 of the encoded header and payload, set by [`UpdateMessage::new`].
    pub checksum: u32,
}

impl<T: Scalar> UpdateMessage<T> {
    /// Builds a sealed message whose checksum matches its contents.
    pub fn new(
        round: u32,
        sender_id: u32,
        params: ModelParams<T>,
        sample_count: u32,
        loss_before: f64,
        loss_after: f64,
    ) -> Result<Self> {
        if sample_count == 0 {
            return Err(ProtocolError::InvalidMessage("sample_count must be >= 1".into()));
        }
        if params.num_features() > u16::MAX as usize || params.num_classes() > u16::MAX as usize {
            return Err(ProtocolError::InvalidMessage(format!(
                "model shape {}x{} does not fit the 16-bit header fields",
                params.num_features(),
                params.num_classes()
            )));
        }
        let mut msg = Self {
            protocol_version: PROTOCOL_VERSION,
            round,
            sender_id,
            params,
            sample_count,
            loss_before,
            loss_after,
            checksum: 0,
        };
        msg.checksum = msg.compute_checksum();
        Ok(msg)
    }

    pub fn compute_checksum(&self) -> u32 {
        crc32fast::hash(&self.body_bytes())
    }

    pub fn checksum_valid(&self) -> bool {
        self.checksum == self.compute_checksum()
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(self.params.num_features(), self.params.num_classes())
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(self.protocol_version);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender_id.to_le_bytes());
        out.extend_from_slice(&(self.params.num_features() as u16).to_le_bytes());
        out.extend_from_slice(&(self.params.num_classes() as u16).to_le_bytes());
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        out.extend_from_slice(&self.loss_before.to_le_bytes());
        out.extend_from_slice(&self.loss_after.to_le_bytes());
        for v in self.params.iter_flat() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }
}

/// Serializes a message. The trailer is the message's own checksum field, so
/// a message whose fields were altered after sealing fails to decode.
pub fn encode_update<T: Scalar>(msg: &UpdateMessage<T>) -> Vec<u8> {
    let mut out = msg.body_bytes();
    out.extend_from_slice(&msg.checksum.to_le_bytes());
    out
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4-byte slice"))
}

fn read_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8-byte slice"))
}

pub fn decode_update<T: Scalar>(bytes: &[u8]) -> std::result::Result<UpdateMessage<T>, WireError> {
    let min = HEADER_LEN + TRAILER_LEN;
    if bytes.len() < min {
        return Err(WireError::Truncated {
            needed: min,
            got: bytes.len(),
        });
    }
    let magic = read_u32(bytes, 0);
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = bytes[4];
    if version != PROTOCOL_VERSION {
        return Err(WireError::VersionUnsupported(version));
    }
    let d = read_u16(bytes, 13) as usize;
    let k = read_u16(bytes, 15) as usize;
    let needed = encoded_len(d, k);
    if bytes.len() < needed {
        return Err(WireError::Truncated {
            needed,
            got: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(WireError::TrailingBytes {
            extra: bytes.len() - needed,
        });
    }
    let body = &bytes[..needed - TRAILER_LEN];
    let carried = read_u32(bytes, needed - TRAILER_LEN);
    let computed = crc32fast::hash(body);
    if carried != computed {
        return Err(WireError::ChecksumMismatch { carried, computed });
    }

    let flat: Vec<T> = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    let params = ModelParams::from_flat(d, k, &flat).map_err(|e: ModelError| WireError::Malformed(e.to_string()))?;
    let sample_count = read_u32(bytes, 17);
    if sample_count == 0 {
        return Err(WireError::Malformed("sample_count is zero".into()));
    }
    Ok(UpdateMessage {
        protocol_version: version,
        round: read_u32(bytes, 5),
        sender_id: read_u32(bytes, 9),
        params,
        sample_count,
        loss_before: read_f64(bytes, 21),
        loss_after: read_f64(bytes, 29),
        checksum: carried,
    })
}
