//! Bundles in a minimal BPv7 profile: a primary block and a payload block,
//! no CRCs, no extension blocks, no fragmentation.
//!
//! Wire layout (CBOR diagnostic notation):
//!
//! ```text
//! [_ [7, 0, 0, dest, source, report_to, [time, seq], lifetime],
//!    [1, 1, 0, 0, h'payload'] ]
//! ```
//!
//! Endpoint IDs are `[1, "//node/app"]` for `dtn://node/app`, `[1, 0]` for
//! `dtn:none` and `[2, [node, service]]` for `ipn:node.service`.

use thiserror::Error;

use crate::cbor::{CborError, Decoder, Encoder};

pub const BP_VERSION: u64 = 7;
pub const DEFAULT_MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const NULL_EID: &str = "dtn:none";

const PAYLOAD_BLOCK_TYPE: u64 = 1;
const PAYLOAD_BLOCK_NUMBER: u64 = 1;
const SCHEME_DTN: u64 = 1;
const SCHEME_IPN: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CreationTimestamp {
    /// Milliseconds since 2000-01-01T00:00:00Z, or 0 when the source has
    /// no clock.
    pub time: u64,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub version: u64,
    pub dest_eid: String,
    pub source_eid: String,
    pub creation_ts: CreationTimestamp,
    pub lifetime_ms: u64,
    pub payload: Vec<u8>,
}

impl Bundle {
    pub fn new(dest: impl Into<String>, source: impl Into<String>, seq: u64, payload: Vec<u8>) -> Self {
        Self {
            version: BP_VERSION,
            dest_eid: dest.into(),
            source_eid: source.into(),
            creation_ts: CreationTimestamp { time: 0, seq },
            lifetime_ms: 3_600_000,
            payload,
        }
    }

    /// Source EID plus creation timestamp; unique per bundle.
    pub fn id(&self) -> String {
        format!("{}:{}:{}", self.source_eid, self.creation_ts.time, self.creation_ts.seq)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("unsupported bundle protocol version {0}")]
    Version(u64),
    #[error("lifetime must be positive")]
    ZeroLifetime,
    #[error("invalid endpoint id {0:?}")]
    Eid(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// The buffer holds a prefix of a bundle.
    #[error("need more data")]
    NeedMoreData,
    #[error("invalid bundle at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

impl From<CborError> for DecodeError {
    fn from(e: CborError) -> Self {
        match e {
            CborError::NeedMoreData => DecodeError::NeedMoreData,
            CborError::Invalid { offset, reason } => DecodeError::Invalid { offset, reason },
        }
    }
}

fn encode_eid(e: &mut Encoder, eid: &str) -> Result<(), EncodeError> {
    e.array(2);
    if eid == NULL_EID {
        e.uint(SCHEME_DTN).uint(0);
    } else if let Some(ssp) = eid.strip_prefix("dtn:") {
        if !ssp.starts_with("//") || ssp.len() <= 2 {
            return Err(EncodeError::Eid(eid.to_string()));
        }
        e.uint(SCHEME_DTN).text(ssp);
    } else if let Some(ssp) = eid.strip_prefix("ipn:") {
        let (node, service) = ssp
            .split_once('.')
            .and_then(|(n, s)| Some((n.parse::<u64>().ok()?, s.parse::<u64>().ok()?)))
            .ok_or_else(|| EncodeError::Eid(eid.to_string()))?;
        e.uint(SCHEME_IPN).array(2).uint(node).uint(service);
    } else {
        return Err(EncodeError::Eid(eid.to_string()));
    }
    Ok(())
}

fn decode_eid(d: &mut Decoder<'_>) -> Result<String, DecodeError> {
    let start = d.position();
    if d.array()? != Some(2) {
        return Err(d.invalid(start, "endpoint id must be a 2-element array").into());
    }
    let scheme_at = d.position();
    match d.uint()? {
        SCHEME_DTN => {
            let at = d.position();
            match d.peek_major()? {
                0 => match d.uint()? {
                    0 => Ok(NULL_EID.to_string()),
                    _ => Err(d.invalid(at, "only dtn:none may be encoded as an integer").into()),
                },
                _ => {
                    let ssp = d.text()?;
                    if !ssp.starts_with("//") {
                        return Err(d.invalid(at, "dtn scheme-specific part must start with //").into());
                    }
                    Ok(format!("dtn:{ssp}"))
                }
            }
        }
        SCHEME_IPN => {
            let at = d.position();
            if d.array()? != Some(2) {
                return Err(d.invalid(at, "ipn ssp must be a 2-element array").into());
            }
            let node = d.uint()?;
            let service = d.uint()?;
            Ok(format!("ipn:{node}.{service}"))
        }
        other => Err(d.invalid(scheme_at, format!("unknown EID scheme {other}")).into()),
    }
}

/// Serializes `b`; deterministic for equal inputs.
pub fn encode_bundle(b: &Bundle, max_payload: usize) -> Result<Vec<u8>, EncodeError> {
    if b.version != BP_VERSION {
        return Err(EncodeError::Version(b.version));
    }
    if b.payload.len() > max_payload {
        return Err(EncodeError::PayloadTooLarge {
            size: b.payload.len(),
            max: max_payload,
        });
    }
    if b.lifetime_ms == 0 {
        return Err(EncodeError::ZeroLifetime);
    }
    let mut e = Encoder::with_capacity(b.payload.len() + 96);
    e.begin_indefinite_array();
    e.array(8).uint(BP_VERSION).uint(0).uint(0);
    encode_eid(&mut e, &b.dest_eid)?;
    encode_eid(&mut e, &b.source_eid)?;
    encode_eid(&mut e, NULL_EID)?;
    e.array(2).uint(b.creation_ts.time).uint(b.creation_ts.seq);
    e.uint(b.lifetime_ms);
    e.array(5)
        .uint(PAYLOAD_BLOCK_TYPE)
        .uint(PAYLOAD_BLOCK_NUMBER)
        .uint(0)
        .uint(0)
        .bytes(&b.payload);
    e.end_indefinite();
    Ok(e.finish())
}

/// Parses one complete bundle occupying all of `data`.
///
/// A strict prefix of a valid encoding yields [`DecodeError::NeedMoreData`].
pub fn decode_bundle(data: &[u8]) -> Result<Bundle, DecodeError> {
    let mut d = Decoder::new(data);
    if d.array()? != None {
        return Err(d.invalid(0, "bundle must be an indefinite-length array").into());
    }

    let at = d.position();
    if d.array()? != Some(8) {
        return Err(d.invalid(at, "primary block without CRC must have 8 elements").into());
    }
    let at = d.position();
    let version = d.uint()?;
    if version != BP_VERSION {
        return Err(d.invalid(at, format!("unsupported version {version}")).into());
    }
    let _flags = d.uint()?;
    let at = d.position();
    if d.uint()? != 0 {
        return Err(d.invalid(at, "CRCs are not supported").into());
    }
    let dest_eid = decode_eid(&mut d)?;
    let source_eid = decode_eid(&mut d)?;
    let _report_to = decode_eid(&mut d)?;
    let at = d.position();
    if d.array()? != Some(2) {
        return Err(d.invalid(at, "creation timestamp must be a 2-element array").into());
    }
    let creation_ts = CreationTimestamp {
        time: d.uint()?,
        seq: d.uint()?,
    };
    let at = d.position();
    let lifetime_ms = d.uint()?;
    if lifetime_ms == 0 {
        return Err(d.invalid(at, "lifetime must be positive").into());
    }

    let at = d.position();
    if d.array()? != Some(5) {
        return Err(d.invalid(at, "payload block without CRC must have 5 elements").into());
    }
    let at = d.position();
    if d.uint()? != PAYLOAD_BLOCK_TYPE {
        return Err(d.invalid(at, "only the payload block is supported").into());
    }
    let at = d.position();
    if d.uint()? != PAYLOAD_BLOCK_NUMBER {
        return Err(d.invalid(at, "payload block must be block number 1").into());
    }
    let _block_flags = d.uint()?;
    let at = d.position();
    if d.uint()? != 0 {
        return Err(d.invalid(at, "CRCs are not supported").into());
    }
    let payload = d.bytes()?.to_vec();

    let at = d.position();
    if !d.try_break()? {
        return Err(d.invalid(at, "expected end of bundle after payload block").into());
    }
    if d.remaining() > 0 {
        return Err(d.invalid(d.position(), "trailing data after bundle").into());
    }
    Ok(Bundle {
        version,
        dest_eid,
        source_eid,
        creation_ts,
        lifetime_ms,
        payload,
    })
}

/// Node part of a `dtn://node/...` EID, e.g. `dtn://node`.
pub fn node_of(eid: &str) -> Option<&str> {
    let rest = eid.strip_prefix("dtn://")?;
    let end = rest.find('/').map_or(eid.len(), |i| i + "dtn://".len());
    Some(&eid[..end])
}
