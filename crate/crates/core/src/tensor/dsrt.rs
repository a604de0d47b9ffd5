//! "DSRT v1" tensor record: magic `DSRT`, dtype code byte, rank byte,
//! `rank` little-endian u32 extents, then the row-major little-endian payload.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Element};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DSRT";

/// A decoded record of any supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    U8(Tensor<u8>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::U8(_) => DType::U8,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn encode<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid(
            "dsrt",
            format!("rank {} too large", t.rank()),
        ));
    }
    out.extend_from_slice(&MAGIC);
    out.push(E::DTYPE.code());
    out.push(t.rank() as u8);
    for &ext in t.shape() {
        let ext = u32::try_from(ext)
            .map_err(|_| Error::invalid("dsrt", format!("extent {ext} exceeds u32")))?;
        out.extend_from_slice(&ext.to_le_bytes());
    }
    out.reserve(t.numel() * E::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn to_bytes<E: Element>(t: &Tensor<E>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode(t, &mut out)?;
    Ok(out)
}

/// Byte cursor that reports absolute offsets in errors.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn record(&mut self) -> Result<AnyTensor> {
        let start = self.pos;
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: start,
                msg: format!("bad magic {magic:02x?}"),
            });
        }
        let code_at = self.pos;
        let code = self.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format {
            offset: code_at,
            msg: format!("unknown dtype code {code}"),
        })?;
        let rank = self.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format {
                offset: start,
                msg: "element count overflows".into(),
            })?;
        let payload_at = self.pos;
        let bytes = n.checked_mul(dtype.size()).ok_or_else(|| Error::Format {
            offset: payload_at,
            msg: "payload size overflows".into(),
        })?;
        let payload = self.take(bytes, "payload")?;
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(decode_payload(shape, payload)),
            DType::U8 => AnyTensor::U8(decode_payload(shape, payload)),
            DType::F64 => AnyTensor::F64(decode_payload(shape, payload)),
        })
    }

    pub fn typed<E: Element>(&mut self) -> Result<Tensor<E>> {
        let at = self.pos;
        let any = self.record()?;
        downcast(any).map_err(|got| Error::Format {
            offset: at,
            msg: format!("expected dtype {:?}, found {:?}", E::DTYPE, got),
        })
    }
}

fn decode_payload<E: Element>(shape: Vec<usize>, payload: &[u8]) -> Tensor<E> {
    let data = payload
        .chunks_exact(E::DTYPE.size())
        .map(E::read_le)
        .collect();
    Tensor::new(shape, data).expect("payload length checked")
}

fn downcast<E: Element>(any: AnyTensor) -> std::result::Result<Tensor<E>, DType> {
    use std::any::Any;
    let got = any.dtype();
    let boxed: Box<dyn Any> = match any {
        AnyTensor::F32(t) => Box::new(t),
        AnyTensor::U8(t) => Box::new(t),
        AnyTensor::F64(t) => Box::new(t),
    };
    boxed.downcast::<Tensor<E>>().map(|b| *b).map_err(|_| got)
}

pub fn from_bytes<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    let mut r = Reader::new(bytes);
    let t = r.typed()?;
    if !r.is_empty() {
        return Err(Error::Format {
            offset: r.offset(),
            msg: "trailing bytes after record".into(),
        });
    }
    Ok(t)
}

pub fn write_file<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let bytes = to_bytes(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<u8>::new(vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let b = to_bytes(&t).unwrap();
        assert_eq!(&b[..4], &[0x44, 0x53, 0x52, 0x54]);
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[14..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn float_payload_is_little_endian() {
        let t = Tensor::<f32>::new(vec![1], vec![1.0]).unwrap();
        let b = to_bytes(&t).unwrap();
        assert_eq!(b[4], 0);
        assert_eq!(&b[10..], &1.0f32.to_le_bytes());
        let t = Tensor::<f64>::new(vec![], vec![-2.5]).unwrap();
        let b = to_bytes(&t).unwrap();
        assert_eq!(b[4], 2);
        assert_eq!(b[5], 0);
        assert_eq!(from_bytes::<f64>(&b).unwrap(), t);
    }

    #[test]
    fn truncation_names_offset() {
        let t = Tensor::<f32>::zeros(&[4, 4]);
        let b = to_bytes(&t).unwrap();
        let err = from_bytes::<f32>(&b[..b.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 14),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_magic_and_wrong_dtype() {
        let t = Tensor::<f32>::zeros(&[2]);
        let mut b = to_bytes(&t).unwrap();
        assert!(from_bytes::<u8>(&b).is_err());
        b[0] = b'X';
        let err = from_bytes::<f32>(&b).unwrap_err();
        assert!(err.to_string().contains("offset 0"), "{err}");
    }
}
