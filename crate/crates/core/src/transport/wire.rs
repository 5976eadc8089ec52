//! Length-prefixed binary frames.
//!
//! Layout (little-endian): a 16-byte header `"SARW" kind src dst dtype
//! layer:u32 reserved:u32`, then `u64` payload length, then the payload.
//! Tensor payloads are `u64 rows, u64 cols` followed by row-major values.

use std::io::{Read, Write};

use crate::error::{protocol_err, Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SARW";
pub const HEADER_LEN: usize = 16;
/// Frame overhead in front of the payload.
pub const FRAME_PREFIX_LEN: usize = HEADER_LEN + 8;
/// dtype code for row-id payloads.
pub const DTYPE_U64: u8 = 2;
/// dtype code for payloads that carry no numbers.
pub const DTYPE_NONE: u8 = 255;
/// Frames larger than this are rejected on decode.
pub const MAX_PAYLOAD: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    FetchRequest,
    FeatureChunk,
    GradChunk,
    AllReduceChunk,
    Barrier,
    Abort,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::FetchRequest,
        MessageKind::FeatureChunk,
        MessageKind::GradChunk,
        MessageKind::AllReduceChunk,
        MessageKind::Barrier,
        MessageKind::Abort,
    ];

    pub fn code(self) -> u8 {
        match self {
            MessageKind::FetchRequest => 1,
            MessageKind::FeatureChunk => 2,
            MessageKind::GradChunk => 3,
            MessageKind::AllReduceChunk => 4,
            MessageKind::Barrier => 5,
            MessageKind::Abort => 6,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        MessageKind::ALL.into_iter().find(|k| k.code() == c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub src: u8,
    pub dst: u8,
    pub dtype: u8,
    pub layer: u32,
    pub payload: Vec<u8>,
}

fn tensor_payload_len(rows: u64, cols: u64, elem: usize) -> Option<u64> {
    rows.checked_mul(cols)?
        .checked_mul(elem as u64)?
        .checked_add(16)
}

fn element_size(dtype: u8) -> Option<usize> {
    match dtype {
        DTYPE_U64 => Some(8),
        c => DType::from_code(c).map(DType::size),
    }
}

impl WireMessage {
    fn with_payload(
        kind: MessageKind,
        src: usize,
        dst: usize,
        layer: u32,
        dtype: u8,
        payload: Vec<u8>,
    ) -> Self {
        WireMessage {
            kind,
            src: src as u8,
            dst: dst as u8,
            dtype,
            layer,
            payload,
        }
    }

    /// A frame carrying tensor rows (features, gradients, reduce buffers).
    pub fn tensor<T: Scalar>(
        kind: MessageKind,
        src: usize,
        dst: usize,
        layer: u32,
        t: &Tensor<T>,
    ) -> Self {
        let mut payload = Vec::with_capacity(16 + t.nbytes());
        payload.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        payload.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Self::with_payload(kind, src, dst, layer, T::DTYPE.code(), payload)
    }

    /// A fetch request for owner-local row ids.
    pub fn fetch_request(src: usize, dst: usize, layer: u32, rows: &[u32]) -> Self {
        let mut payload = Vec::with_capacity(16 + 8 * rows.len());
        payload.extend_from_slice(&(rows.len() as u64).to_le_bytes());
        payload.extend_from_slice(&1u64.to_le_bytes());
        for &r in rows {
            payload.extend_from_slice(&(r as u64).to_le_bytes());
        }
        Self::with_payload(
            MessageKind::FetchRequest,
            src,
            dst,
            layer,
            DTYPE_U64,
            payload,
        )
    }

    pub fn barrier(src: usize, dst: usize, seq: u32) -> Self {
        Self::with_payload(MessageKind::Barrier, src, dst, seq, DTYPE_NONE, Vec::new())
    }

    pub fn abort(src: usize, dst: usize, reason: &str) -> Self {
        Self::with_payload(
            MessageKind::Abort,
            src,
            dst,
            0,
            DTYPE_NONE,
            reason.as_bytes().to_vec(),
        )
    }

    fn shape(&self) -> Result<(usize, usize)> {
        if self.payload.len() < 16 {
            return Err(protocol_err!(
                "tensor payload shorter than its shape header"
            ));
        }
        let rows = u64::from_le_bytes(self.payload[..8].try_into().unwrap());
        let cols = u64::from_le_bytes(self.payload[8..16].try_into().unwrap());
        Ok((rows as usize, cols as usize))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE.code() {
            return Err(protocol_err!(
                "payload dtype {} does not match local dtype {:?}",
                self.dtype,
                T::DTYPE
            ));
        }
        let (rows, cols) = self.shape()?;
        let size = T::DTYPE.size();
        let data = self.payload[16..]
            .chunks_exact(size)
            .map(T::read_le)
            .collect();
        Tensor::new(rows, cols, data)
            .map_err(|_| protocol_err!("payload length does not match shape"))
    }

    pub fn to_row_ids(&self) -> Result<Vec<u32>> {
        if self.dtype != DTYPE_U64 {
            return Err(protocol_err!("fetch request must carry u64 row ids"));
        }
        let (rows, _) = self.shape()?;
        let ids: Vec<u32> = self.payload[16..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .map(|v| u32::try_from(v).map_err(|_| protocol_err!("row id {v} out of range")))
            .collect::<Result<_>>()?;
        if ids.len() != rows {
            return Err(protocol_err!("fetch request row count mismatch"));
        }
        Ok(ids)
    }

    pub fn reason(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    /// Validates kind-specific payload structure.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MessageKind::Barrier | MessageKind::Abort => {
                if self.dtype != DTYPE_NONE {
                    return Err(protocol_err!(
                        "{:?} frame with dtype {}",
                        self.kind,
                        self.dtype
                    ));
                }
                if self.kind == MessageKind::Barrier && !self.payload.is_empty() {
                    return Err(protocol_err!("barrier frame with a payload"));
                }
                Ok(())
            }
            kind => {
                let elem = element_size(self.dtype)
                    .ok_or_else(|| protocol_err!("unknown dtype code {}", self.dtype))?;
                let id_frame = self.dtype == DTYPE_U64;
                if (kind == MessageKind::FetchRequest) != id_frame {
                    return Err(protocol_err!("{kind:?} frame with dtype {}", self.dtype));
                }
                if kind == MessageKind::AllReduceChunk && self.dtype != DType::F64.code() {
                    return Err(protocol_err!("all-reduce chunks must be f64"));
                }
                let (rows, cols) = self.shape()?;
                let expected = tensor_payload_len(rows as u64, cols as u64, elem)
                    .ok_or_else(|| protocol_err!("tensor shape overflows"))?;
                if expected != self.payload.len() as u64 {
                    return Err(protocol_err!(
                        "payload of {} bytes does not match {rows}x{cols} elements",
                        self.payload.len()
                    ));
                }
                if id_frame && cols != 1 {
                    return Err(protocol_err!("fetch request must have one column"));
                }
                Ok(())
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_PREFIX_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.kind.code());
        out.push(self.src);
        out.push(self.dst);
        out.push(self.dtype);
        out.extend_from_slice(&self.layer.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    fn parse_prefix(prefix: &[u8]) -> Result<(MessageKind, u8, u8, u8, u32, u64)> {
        if prefix[..4] != MAGIC {
            return Err(protocol_err!("bad frame magic"));
        }
        let kind = MessageKind::from_code(prefix[4])
            .ok_or_else(|| protocol_err!("unknown message kind {}", prefix[4]))?;
        let layer = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
        let len = u64::from_le_bytes(prefix[16..24].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(protocol_err!("frame payload of {len} bytes is too large"));
        }
        Ok((kind, prefix[5], prefix[6], prefix[7], layer, len))
    }

    /// Decodes one frame from the front of `bytes`; returns it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize)> {
        if bytes.len() < FRAME_PREFIX_LEN {
            return Err(protocol_err!("truncated frame header"));
        }
        let (kind, src, dst, dtype, layer, len) = Self::parse_prefix(&bytes[..FRAME_PREFIX_LEN])?;
        let end = FRAME_PREFIX_LEN + len as usize;
        if bytes.len() < end {
            return Err(protocol_err!("truncated frame payload"));
        }
        let msg = WireMessage {
            kind,
            src,
            dst,
            dtype,
            layer,
            payload: bytes[FRAME_PREFIX_LEN..end].to_vec(),
        };
        msg.validate()?;
        Ok((msg, end))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<WireMessage>> {
        let mut prefix = [0u8; FRAME_PREFIX_LEN];
        match r.read_exact(&mut prefix[..1]) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(Error::Io(e)),
        }
        r.read_exact(&mut prefix[1..])?;
        let (kind, src, dst, dtype, layer, len) = Self::parse_prefix(&prefix)?;
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        let msg = WireMessage {
            kind,
            src,
            dst,
            dtype,
            layer,
            payload,
        };
        msg.validate()?;
        Ok(Some(msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_sixteen_bytes_then_length() {
        let m = WireMessage::tensor(MessageKind::GradChunk, 1, 2, 7, &Tensor::<f32>::zeros(2, 3));
        let b = m.encode();
        assert_eq!(&b[..4], b"SARW");
        assert_eq!(b[4], MessageKind::GradChunk.code());
        assert_eq!((b[5], b[6], b[7]), (1, 2, 0));
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 16 + 24);
        assert_eq!(b.len(), FRAME_PREFIX_LEN + 40);
    }

    #[test]
    fn corrupted_frames_are_rejected() {
        let m = WireMessage::tensor(
            MessageKind::FeatureChunk,
            0,
            1,
            0,
            &Tensor::<f64>::zeros(1, 2),
        );
        let mut b = m.encode();
        b[0] = b'X';
        assert!(WireMessage::decode(&b).is_err());
        let mut b = m.encode();
        b.pop();
        assert!(WireMessage::decode(&b).is_err());
        let mut b = m.encode();
        b[7] = DTYPE_U64;
        assert!(WireMessage::decode(&b).is_err());
    }

    #[test]
    fn dtype_mismatch_is_protocol_error() {
        let m = WireMessage::tensor(
            MessageKind::FeatureChunk,
            0,
            1,
            0,
            &Tensor::<f64>::zeros(1, 2),
        );
        assert!(matches!(m.to_tensor::<f32>(), Err(Error::Protocol(_))));
    }

    #[test]
    fn zero_row_request() {
        let m = WireMessage::fetch_request(0, 1, 3, &[]);
        let (d, _) = WireMessage::decode(&m.encode()).unwrap();
        assert!(d.to_row_ids().unwrap().is_empty());
    }

    fn arb_message() -> impl Strategy<Value = WireMessage> {
        let tensor_kind = prop_oneof![
            Just(MessageKind::FeatureChunk),
            Just(MessageKind::GradChunk),
            Just(MessageKind::AllReduceChunk),
        ];
        prop_oneof![
            (
                tensor_kind,
                0u8..8,
                0u8..8,
                any::<u32>(),
                0usize..5,
                0usize..5,
                any::<bool>(),
                any::<u64>()
            )
                .prop_map(|(kind, src, dst, layer, rows, cols, wide, seed)| {
                    let vals: Vec<f64> = (0..rows * cols)
                        .map(|k| ((seed.wrapping_mul(k as u64 + 1) % 10007) as f64) / 7.0 - 700.0)
                        .collect();
                    let wide = wide || kind == MessageKind::AllReduceChunk;
                    if wide {
                        WireMessage::tensor(
                            kind,
                            src as usize,
                            dst as usize,
                            layer,
                            &Tensor::new(rows, cols, vals).unwrap(),
                        )
                    } else {
                        let t: Tensor<f32> = Tensor::new(rows, cols, vals).unwrap().cast();
                        WireMessage::tensor(kind, src as usize, dst as usize, layer, &t)
                    }
                }),
            (
                0u8..8,
                0u8..8,
                any::<u32>(),
                prop::collection::vec(any::<u32>(), 0..20)
            )
                .prop_map(|(s, d, l, ids)| WireMessage::fetch_request(
                    s as usize, d as usize, l, &ids
                )),
            (0u8..8, 0u8..8, any::<u32>())
                .prop_map(|(s, d, l)| WireMessage::barrier(s as usize, d as usize, l)),
            (0u8..8, 0u8..8, "[a-z ]{0,30}")
                .prop_map(|(s, d, r)| WireMessage::abort(s as usize, d as usize, &r)),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(m in arb_message()) {
            let bytes = m.encode();
            let (d, used) = WireMessage::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&d, &m);
            let mut cursor = std::io::Cursor::new(bytes);
            let r = WireMessage::read_from(&mut cursor).unwrap().unwrap();
            prop_assert_eq!(r, m);
        }
    }
}
