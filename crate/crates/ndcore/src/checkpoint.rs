//! Named-array container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DWMR0001"
//! u32                      number of arrays
//! per array:
//!   u16 name length, name bytes (UTF-8)
//!   u8  dtype (0 = f32, 1 = f64)
//!   u8  rank
//!   u32 × rank dims
//!   raw values
//! ```

use std::io::{Read, Write};

use crate::error::{NdError, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DWMR0001";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let dims = t.shape().iter().map(|&d| d as u32).collect();
        let data = if T::DTYPE == 0 {
            ArrayData::F32(t.data().iter().map(|v| v.f64() as f32).collect())
        } else {
            ArrayData::F64(t.data().iter().map(|v| v.f64()).collect())
        };
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn from_values<T: Real>(name: impl Into<String>, values: &[T]) -> Self {
        let t = Tensor::new(vec![values.len()], values.to_vec()).expect("1-d");
        Self::from_tensor(name, &t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let values = match &self.data {
            ArrayData::F32(v) if T::DTYPE == 0 => v.iter().map(|&x| T::lit(x as f64)).collect(),
            ArrayData::F64(v) if T::DTYPE == 1 => v.iter().map(|&x| T::lit(x)).collect(),
            _ => {
                return Err(NdError::Checkpoint(format!(
                    "array `{}` has a different dtype than {}",
                    self.name,
                    T::NAME
                )))
            }
        };
        Tensor::new(self.shape(), values)
    }
}

pub fn write_arrays<W: Write>(mut w: W, arrays: &[NamedArray]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let name = a.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| NdError::Checkpoint(format!("name too long: {}", a.name)))?;
        let count: usize = a.dims.iter().map(|&d| d as usize).product();
        if count != a.data.len() {
            return Err(NdError::Checkpoint(format!(
                "array `{}`: dims {:?} do not match {} values",
                a.name,
                a.dims,
                a.data.len()
            )));
        }
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let (code, raw) = match &a.data {
            ArrayData::F32(v) => (0u8, f32::to_le_bytes_vec(v)),
            ArrayData::F64(v) => (1u8, f64::to_le_bytes_vec(v)),
        };
        w.write_all(&[code, a.dims.len() as u8])?;
        for d in &a.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&raw)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| NdError::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub fn read_arrays<R: Read>(mut r: R) -> Result<Vec<NamedArray>> {
    let magic = read_exact(&mut r, 8, "magic")?;
    if magic != MAGIC {
        return Err(NdError::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, 4, "count")?.try_into().unwrap());
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(read_exact(&mut r, 2, "name length")?.try_into().unwrap());
        let name = String::from_utf8(read_exact(&mut r, nlen as usize, "name")?)
            .map_err(|_| NdError::Checkpoint("name is not UTF-8".into()))?;
        let head = read_exact(&mut r, 2, "dtype/rank")?;
        let (code, rank) = (head[0], head[1] as usize);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_exact(&mut r, 4, "dims")?.try_into().unwrap()));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| NdError::Checkpoint(format!("array `{name}`: dims overflow")))?;
        let data = match code {
            0 => {
                let raw = read_exact(&mut r, n * 4, &name)?;
                ArrayData::F32(raw.chunks_exact(4).map(f32::from_le_chunk).collect())
            }
            1 => {
                let raw = read_exact(&mut r, n * 8, &name)?;
                ArrayData::F64(raw.chunks_exact(8).map(f64::from_le_chunk).collect())
            }
            other => return Err(NdError::Checkpoint(format!("unknown dtype code {other}"))),
        };
        out.push(NamedArray { name, dims, data });
    }
    Ok(out)
}

/// All entries of `ps` as arrays named `{prefix}{entry}`.
pub fn params_to_arrays<T: Real>(prefix: &str, ps: &ParamSet<T>) -> Vec<NamedArray> {
    ps.entries()
        .iter()
        .map(|e| NamedArray::from_tensor(format!("{prefix}{}", e.name), &e.value))
        .collect()
}

/// Overwrites every entry of `ps` from `arrays`; missing names or shape
/// differences are errors.
pub fn load_params<T: Real>(prefix: &str, ps: &mut ParamSet<T>, arrays: &[NamedArray]) -> Result<()> {
    let names: Vec<String> = ps.entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let full = format!("{prefix}{name}");
        let arr = arrays
            .iter()
            .find(|a| a.name == full)
            .ok_or_else(|| NdError::Checkpoint(format!("missing array `{full}`")))?;
        let t = arr.to_tensor::<T>()?;
        let slot = ps.get_mut(&name)?;
        if slot.shape() != t.shape() {
            return Err(NdError::Checkpoint(format!(
                "shape mismatch for `{full}`: model {:?}, file {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}
