//! Named parameter storage and the binary tensor container used for
//! checkpoints.
//!
//! Container layout, repeated once per tensor until end of file (all
//! integers little-endian):
//!
//! ```text
//! u32 name_len | name bytes (UTF-8) | u32 rank | u64 dims[rank] | u8 dtype | values
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64; values are raw little-endian floats.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// Name-ordered map of tensors. Iteration order is lexicographic, which
/// keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

/// One record read back from a tensor container.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor<f64>,
}

pub fn encode_tensors<'a, T: Scalar>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let mut buf = Vec::new();
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(T::DTYPE.tag());
        T::write_le(t.data(), &mut buf);
    }
    buf
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Parse(format!("tensor container truncated at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(bytes, &mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Parse(format!("tensor name is not UTF-8: {e}")))?;
        let rank = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let tag = take(bytes, &mut pos, 1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Parse(format!("tensor '{name}': unknown dtype tag {tag}")))?;
        let n: usize = shape.iter().product();
        let raw = take(bytes, &mut pos, n * dtype.size())?;
        let values: Vec<f64> = match dtype {
            DType::F32 => f32::read_le(raw).into_iter().map(f64::from).collect(),
            DType::F64 => f64::read_le(raw),
        };
        out.push(StoredTensor { name, dtype, tensor: Tensor::new(shape, values)? });
    }
    Ok(out)
}

/// Writes via a temporary file and rename so readers never observe a
/// partially written container.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensors<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_atomic(path, &encode_tensors(store.iter().map(|(k, v)| (k.as_str(), v))))
}

pub fn load_tensors(path: &Path) -> Result<Vec<StoredTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_container_is_a_parse_error() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let bytes = encode_tensors([("w", &t)]);
        let err = decode_tensors(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    proptest! {
        #[test]
        fn container_round_trips_bit_exactly(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let vals: Vec<f32> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f32) * 0.37 - 100.0).collect();
            let t = Tensor::new(dims.clone(), vals).unwrap();
            let t64: Tensor<f64> = t.cast();
            let bytes = encode_tensors([("a.b", &t)]);
            let mut more = bytes.clone();
            more.extend(encode_tensors([("c", &t64)]));
            let back = decode_tensors(&more).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].name, "a.b");
            prop_assert_eq!(back[0].dtype, DType::F32);
            prop_assert_eq!(back[0].tensor.cast::<f32>(), t);
            prop_assert_eq!(back[1].dtype, DType::F64);
            prop_assert_eq!(&back[1].tensor, &t64);
        }
    }
}
