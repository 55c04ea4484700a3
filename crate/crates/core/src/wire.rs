//! Binary particle messages.
//!
//! Layout (little-endian): `"FWBA"`, version `u16`, round `u32`, client id
//! `u32`, `n u32`, `m u32`, then `n * m` row-major `f32` values, then the
//! FNV-1a 64-bit hash of the value bytes.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"FWBA";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 22;
pub const CHECKSUM_BYTES: usize = 8;
/// Client id carried by server-to-client messages.
pub const BROADCAST_ID: u32 = u32::MAX;

/// Encoded size of an `n x m` message.
pub fn message_size(n: usize, m: usize) -> usize {
    HEADER_BYTES + 4 * n * m + CHECKSUM_BYTES
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Decoded message contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub round: u32,
    pub client_id: u32,
    pub particles: Matrix,
}

fn narrow(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Wire(format!("{what} {n} does not fit in u32")))
}

pub fn encode(round: u32, client_id: u32, particles: &Matrix) -> Result<Vec<u8>> {
    let (n, m) = particles.shape();
    let mut out = Vec::with_capacity(message_size(n, m));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&client_id.to_le_bytes());
    out.extend_from_slice(&narrow(n, "particle count")?.to_le_bytes());
    out.extend_from_slice(&narrow(m, "dimension")?.to_le_bytes());
    for &v in particles.as_slice() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Wire(format!("value {v} is not representable as a finite f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    let sum = fnv1a64(&out[HEADER_BYTES..]);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < HEADER_BYTES + CHECKSUM_BYTES {
        return Err(Error::Wire(format!("message of {} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::Wire(format!("unsupported version {version}")));
    }
    let round = u32_at(6);
    let client_id = u32_at(10);
    let n = u32_at(14) as usize;
    let m = u32_at(18) as usize;
    let expected = n
        .checked_mul(m)
        .and_then(|nm| nm.checked_mul(4))
        .and_then(|p| p.checked_add(HEADER_BYTES + CHECKSUM_BYTES));
    if expected != Some(bytes.len()) {
        return Err(Error::Wire(format!(
            "length {} does not match a {n}x{m} payload",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_BYTES..bytes.len() - CHECKSUM_BYTES];
    let stored = u64::from_le_bytes(bytes[bytes.len() - CHECKSUM_BYTES..].try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::Wire("checksum mismatch".into()));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Wire("non-finite value in payload".into()));
    }
    Ok(Frame {
        round,
        client_id,
        particles: Matrix::from_vec(n, m, data)?,
    })
}

/// Server to client: the current global particles.
#[derive(Clone, Debug, PartialEq)]
pub struct BroadcastMsg {
    pub round: u32,
    pub particles: Matrix,
}

impl BroadcastMsg {
    pub fn encode(&self) -> Result<Vec<u8>> {
        encode(self.round, BROADCAST_ID, &self.particles)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let f = decode(bytes)?;
        if f.client_id != BROADCAST_ID {
            return Err(Error::Wire(format!("client id {} on a broadcast", f.client_id)));
        }
        Ok(Self {
            round: f.round,
            particles: f.particles,
        })
    }
}

/// Client to server: the client's local posterior particles.
#[derive(Clone, Debug, PartialEq)]
pub struct UploadMsg {
    pub round: u32,
    pub client_id: u32,
    pub particles: Matrix,
}

impl UploadMsg {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.client_id == BROADCAST_ID {
            return Err(Error::Wire("client id is reserved for broadcasts".into()));
        }
        encode(self.round, self.client_id, &self.particles)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let f = decode(bytes)?;
        if f.client_id == BROADCAST_ID {
            return Err(Error::Wire("broadcast id on an upload".into()));
        }
        Ok(Self {
            round: f.round,
            client_id: f.client_id,
            particles: f.particles,
        })
    }
}
