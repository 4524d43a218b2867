//! The slice of CBOR (RFC 8949) the bundle codec needs: unsigned
//! integers, byte and text strings, definite and indefinite arrays.
//! Heads are always encoded in their shortest form.

use thiserror::Error;

const MAJOR_UINT: u8 = 0;
const MAJOR_BYTES: u8 = 2;
const MAJOR_TEXT: u8 = 3;
const MAJOR_ARRAY: u8 = 4;
const INDEFINITE: u8 = 31;
const BREAK: u8 = 0xff;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CborError {
    /// Input ended before the item was complete.
    #[error("need more data")]
    NeedMoreData,
    #[error("invalid CBOR at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    fn head(&mut self, major: u8, v: u64) {
        let m = major << 5;
        match v {
            0..=23 => self.buf.push(m | v as u8),
            24..=0xff => self.buf.extend_from_slice(&[m | 24, v as u8]),
            0x100..=0xffff => {
                self.buf.push(m | 25);
                self.buf.extend_from_slice(&(v as u16).to_be_bytes());
            }
            0x1_0000..=0xffff_ffff => {
                self.buf.push(m | 26);
                self.buf.extend_from_slice(&(v as u32).to_be_bytes());
            }
            _ => {
                self.buf.push(m | 27);
                self.buf.extend_from_slice(&v.to_be_bytes());
            }
        }
    }

    pub fn uint(&mut self, v: u64) -> &mut Self {
        self.head(MAJOR_UINT, v);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.head(MAJOR_BYTES, b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn text(&mut self, s: &str) -> &mut Self {
        self.head(MAJOR_TEXT, s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn array(&mut self, len: u64) -> &mut Self {
        self.head(MAJOR_ARRAY, len);
        self
    }

    pub fn begin_indefinite_array(&mut self) -> &mut Self {
        self.buf.push((MAJOR_ARRAY << 5) | INDEFINITE);
        self
    }

    pub fn end_indefinite(&mut self) -> &mut Self {
        self.buf.push(BREAK);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Pull decoder over a complete or partial buffer.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn invalid(&self, offset: usize, reason: impl Into<String>) -> CborError {
        CborError::Invalid {
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CborError> {
        if self.remaining() < n {
            return Err(CborError::NeedMoreData);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn peek_byte(&self) -> Result<u8, CborError> {
        self.data.get(self.pos).copied().ok_or(CborError::NeedMoreData)
    }

    /// Reads a head, returning `(major, argument)`; `None` argument means
    /// indefinite length.
    fn head(&mut self) -> Result<(u8, Option<u64>), CborError> {
        let start = self.pos;
        let initial = self.take(1)?[0];
        let major = initial >> 5;
        let info = initial & 0x1f;
        let arg = match info {
            0..=23 => Some(info as u64),
            24 => Some(self.take(1)?[0] as u64),
            25 => Some(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")) as u64),
            26 => Some(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")) as u64),
            27 => Some(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes"))),
            INDEFINITE => None,
            _ => return Err(self.invalid(start, format!("reserved additional info {info}"))),
        };
        Ok((major, arg))
    }

    fn expect_major(&mut self, want: u8, what: &str) -> Result<Option<u64>, CborError> {
        let start = self.pos;
        let (major, arg) = self.head()?;
        if major != want {
            return Err(self.invalid(start, format!("expected {what}, found major type {major}")));
        }
        Ok(arg)
    }

    pub fn uint(&mut self) -> Result<u64, CborError> {
        let start = self.pos;
        self.expect_major(MAJOR_UINT, "unsigned integer")?
            .ok_or_else(|| self.invalid(start, "indefinite unsigned integer"))
    }

    fn definite_len(&mut self, major: u8, what: &str) -> Result<usize, CborError> {
        let start = self.pos;
        let len = self
            .expect_major(major, what)?
            .ok_or_else(|| self.invalid(start, format!("indefinite-length {what} not supported")))?;
        usize::try_from(len).map_err(|_| self.invalid(start, "length overflows usize"))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CborError> {
        let len = self.definite_len(MAJOR_BYTES, "byte string")?;
        self.take(len)
    }

    pub fn text(&mut self) -> Result<&'a str, CborError> {
        let start = self.pos;
        let len = self.definite_len(MAJOR_TEXT, "text string")?;
        let raw = self.take(len)?;
        std::str::from_utf8(raw).map_err(|_| self.invalid(start, "text string is not UTF-8"))
    }

    /// Array head; `None` for an indefinite-length array.
    pub fn array(&mut self) -> Result<Option<u64>, CborError> {
        self.expect_major(MAJOR_ARRAY, "array")
    }

    /// Major type of the next item without consuming it.
    pub fn peek_major(&self) -> Result<u8, CborError> {
        Ok(self.peek_byte()? >> 5)
    }

    /// Consumes a break byte if one is next.
    pub fn try_break(&mut self) -> Result<bool, CborError> {
        if self.peek_byte()? == BREAK {
            self.pos += 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }
}
