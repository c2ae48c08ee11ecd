//! Byte layout for distributed blocks on the wire.
//!
//! ```text
//! u8  dtype (1 = f64, 2 = i64, 3 = u8)
//! u8  ndim
//! [u8; 6] reserved, zero
//! u64 × ndim shape (little-endian)
//! data, row-major, little-endian
//! ```

use std::fmt::Debug;

use super::{PgasError, Result};

const PREFIX_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    I64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 1,
            Dtype::I64 => 2,
            Dtype::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F64),
            2 => Some(Dtype::I64),
            3 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Scalar types a [`DistArray`](super::DistArray) can hold.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Element for i64 {
    const DTYPE: Dtype = Dtype::I64;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        i64::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Element for u8 {
    const DTYPE: Dtype = Dtype::U8;
    fn put_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// A shaped, typed block of values in wire form.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedArrayPayload {
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    /// Row-major little-endian element bytes.
    pub data: Vec<u8>,
}

impl TypedArrayPayload {
    pub fn from_values<T: Element>(shape: &[usize], values: &[T]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(PgasError::Argument(format!(
                "shape {shape:?} holds {count} values, got {}",
                values.len()
            )));
        }
        let mut data = Vec::with_capacity(values.len() * T::DTYPE.size());
        for &v in values {
            v.put_le(&mut data);
        }
        Ok(TypedArrayPayload {
            dtype: T::DTYPE,
            shape: shape.iter().map(|&n| n as u64).collect(),
            data,
        })
    }

    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn shape_usize(&self) -> Vec<usize> {
        self.shape.iter().map(|&n| n as usize).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PREFIX_LEN + 8 * self.shape.len() + self.data.len());
        out.push(self.dtype.code());
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&[0u8; 6]);
        for &n in &self.shape {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |what: String| PgasError::Protocol(format!("typed array payload: {what}"));
        if bytes.len() < PREFIX_LEN {
            return Err(bad(format!("only {} bytes", bytes.len())));
        }
        let dtype = Dtype::from_code(bytes[0]).ok_or_else(|| bad(format!("dtype code {}", bytes[0])))?;
        let ndim = bytes[1] as usize;
        if bytes[2..8].iter().any(|&b| b != 0) {
            return Err(bad("reserved bytes are not zero".into()));
        }
        let shape_end = PREFIX_LEN + 8 * ndim;
        if bytes.len() < shape_end {
            return Err(bad(format!("truncated shape for {ndim} dims")));
        }
        let shape: Vec<u64> = bytes[PREFIX_LEN..shape_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected = shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| bad("shape overflows".into()))?;
        let data = &bytes[shape_end..];
        if data.len() as u64 != expected {
            return Err(bad(format!(
                "{} data bytes for shape {shape:?}, expected {expected}",
                data.len()
            )));
        }
        Ok(TypedArrayPayload {
            dtype,
            shape,
            data: data.to_vec(),
        })
    }

    pub fn values<T: Element>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(PgasError::Protocol(format!(
                "payload holds {:?}, expected {:?}",
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self
            .data
            .chunks_exact(T::DTYPE.size())
            .map(T::get_le)
            .collect())
    }
}
