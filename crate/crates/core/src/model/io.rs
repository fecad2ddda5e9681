//! Model file format.
//!
//! ```text
//! "MKIS" | version: u32 | config_len: u32 | config (key=value text)
//! tensor_count: u32 | tensor record × tensor_count
//! section_count: u32 | (tag: [u8; 4] | len: u64 | payload) × section_count
//!
//! tensor record:
//!   name_len: u16 | name | dtype: u8 | rank: u8 | dims: u64 × rank
//!   crc32(payload): u32 | payload (little-endian elements)
//! ```
//!
//! All integers are little-endian. Parameters are stored under their own
//! names, batch-norm statistics as `<layer>.running_mean` / `.running_var`.
//! Sections carry optional extra state such as optimizer moments.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{Model, ModelConfig, ModelError};
use crate::kv::KvMap;
use crate::tensor::{BatchNormStats, DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"MKIS";
pub const FORMAT_VERSION: u32 = 1;

/// Tagged payload appended after the tensor records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

/// Fully decoded file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile<T: Float> {
    pub model: Model<T>,
    pub sections: Vec<Section>,
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Truncated { what: what.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_tensor<T: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size_bytes());
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
}

fn read_tensor<T: Float>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>), ModelError> {
    let len = r.u16("tensor name length")? as usize;
    let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
        .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?;
    let tag = r.u8(&format!("dtype of {name}"))?;
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| ModelError::Malformed(format!("tensor {name:?} has unknown dtype tag {tag}")))?;
    let rank = r.u8(&format!("rank of {name}"))? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64(&format!("shape of {name}"))? as usize);
    }
    let checksum = r.u32(&format!("checksum of {name}"))?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ModelError::Malformed(format!("tensor {name:?} shape overflows")))?;
    let bytes = numel
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| ModelError::Malformed(format!("tensor {name:?} shape overflows")))?;
    let payload = r.take(bytes, &format!("payload of {name}"))?;
    if crc32fast::hash(payload) != checksum {
        return Err(ModelError::Checksum { tensor: name });
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| ModelError::Malformed(e.to_string()))?;
    Ok((name, t))
}

/// Encodes named tensors as a count followed by tensor records.
pub fn encode_tensors<'a, T: Float>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut count = 0u32;
    for (name, t) in tensors {
        write_tensor(&mut body, name, t);
        count += 1;
    }
    let mut out = count.to_le_bytes().to_vec();
    out.extend(body);
    out
}

/// Inverse of [`encode_tensors`]; rejects trailing bytes.
pub fn decode_tensors<T: Float>(bytes: &[u8]) -> Result<IndexMap<String, Tensor<T>>, ModelError> {
    let mut r = Reader::new(bytes);
    let tensors = read_tensor_block(&mut r)?;
    if !r.is_empty() {
        return Err(ModelError::Malformed("trailing bytes after tensor records".into()));
    }
    Ok(tensors)
}

fn read_tensor_block<T: Float>(r: &mut Reader<'_>) -> Result<IndexMap<String, Tensor<T>>, ModelError> {
    let count = r.u32("tensor count")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(ModelError::Malformed(format!("duplicate tensor {name:?}")));
        }
    }
    Ok(tensors)
}

pub fn encode_model<T: Float>(model: &Model<T>, sections: &[Section]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut kv = KvMap::new();
    model.config().write_kv(&mut kv);
    let config = kv.to_string();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());

    let stats: Vec<(String, Tensor<T>)> = model
        .bn_stats()
        .iter()
        .flat_map(|(k, s)| {
            let c = s.mean.len();
            [
                (format!("{k}.running_mean"), Tensor::new(&[c], s.mean.clone()).expect("1-D")),
                (format!("{k}.running_var"), Tensor::new(&[c], s.var.clone()).expect("1-D")),
            ]
        })
        .collect();
    let records = model
        .params()
        .iter()
        .map(|(k, t)| (k.as_str(), t))
        .chain(stats.iter().map(|(k, t)| (k.as_str(), t)));
    out.extend(encode_tensors(records));

    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in sections {
        out.extend_from_slice(&s.tag);
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
    }
    out
}

pub fn decode_model<T: Float>(bytes: &[u8]) -> Result<ModelFile<T>, ModelError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic").map_err(|_| ModelError::BadMagic)? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| ModelError::Malformed("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(&KvMap::parse(text)?)?;
    let skeleton = Model::<T>::build(config.clone(), 0)?;
    let mut tensors = read_tensor_block::<T>(&mut r)?;

    let mut params = IndexMap::new();
    for (name, expected) in skeleton.params() {
        let t = tensors
            .shift_remove(name)
            .ok_or_else(|| ModelError::Malformed(format!("missing tensor {name:?}")))?;
        if t.shape() != expected.shape() {
            return Err(ModelError::Malformed(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                expected.shape()
            )));
        }
        params.insert(name.clone(), t);
    }
    let mut bn_stats = IndexMap::new();
    for (key, expected) in skeleton.bn_stats() {
        let mut take = |suffix: &str| {
            let name = format!("{key}.{suffix}");
            let t = tensors
                .shift_remove(&name)
                .ok_or_else(|| ModelError::Malformed(format!("missing tensor {name:?}")))?;
            if t.len() != expected.mean.len() {
                return Err(ModelError::Malformed(format!("tensor {name:?} has wrong length")));
            }
            Ok(t.into_data())
        };
        let mean = take("running_mean")?;
        let var = take("running_var")?;
        bn_stats.insert(key.clone(), BatchNormStats { mean, var });
    }
    if let Some(name) = tensors.keys().next() {
        return Err(ModelError::Malformed(format!("unexpected tensor {name:?}")));
    }

    let count = r.u32("section count")?;
    let mut sections = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
        let len = r.u64("section length")? as usize;
        let payload = r.take(len, "section payload")?.to_vec();
        sections.push(Section { tag, payload });
    }
    if !r.is_empty() {
        return Err(ModelError::Malformed("trailing bytes after sections".into()));
    }
    Ok(ModelFile {
        model: Model::from_parts(config, params, bn_stats),
        sections,
    })
}

pub fn serialized_size<T: Float>(model: &Model<T>) -> usize {
    encode_model(model, &[]).len()
}

pub fn save_model<T: Float>(model: &Model<T>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    write_file(path.as_ref(), &encode_model(model, &[]))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("partial");
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_model_file<T: Float>(path: impl AsRef<Path>) -> Result<ModelFile<T>, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_model(&bytes)
}

/// Loads a model; checkpoint files load too, their extra sections ignored.
pub fn load_model<T: Float>(path: impl AsRef<Path>) -> Result<Model<T>, ModelError> {
    Ok(read_model_file(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model<f32> {
        let mut m = Model::build(ModelConfig { width: 3, ..Default::default() }, 9).unwrap();
        m.bn_stats_mut()["block1.k3.bn"].mean[1] = 0.125;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let sections = vec![Section { tag: *b"TEST", payload: vec![1, 2, 3] }];
        let file = decode_model::<f32>(&encode_model(&m, &sections)).unwrap();
        assert_eq!(file.model, m);
        assert_eq!(file.sections, sections);
    }

    #[test]
    fn corrupted_payload_names_tensor() {
        let m = small();
        let mut bytes = encode_model(&m, &[]);
        let n = bytes.len();
        // last bytes belong to the final running_var payload
        bytes[n - 6] ^= 0x40;
        match decode_model::<f32>(&bytes) {
            Err(ModelError::Checksum { tensor }) => assert_eq!(tensor, "decoder2.bn.running_var"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_magic_and_truncation() {
        let m = small();
        let mut bytes = encode_model(&m, &[]);
        bytes[4] = 99;
        assert!(matches!(
            decode_model::<f32>(&bytes),
            Err(ModelError::Version { found: 99, .. })
        ));
        let bytes = encode_model(&m, &[]);
        assert!(matches!(decode_model::<f32>(&bytes[..bytes.len() - 10]), Err(ModelError::Truncated { .. })));
        assert!(matches!(decode_model::<f32>(b"NOPE"), Err(ModelError::BadMagic)));
        assert!(matches!(decode_model::<f32>(b"MK"), Err(ModelError::BadMagic)));
    }

    #[test]
    fn unexpected_tensor_is_rejected() {
        let m = small();
        let bytes = encode_model(&m, &[]);
        let mut r = Reader::new(&bytes);
        r.take(8, "").unwrap();
        let len = r.u32("").unwrap() as usize;
        let header_len = 12 + len;
        let mut tensors = decode_tensors_prefix(&bytes[header_len..]);
        tensors.insert("extra".into(), Tensor::zeros(&[1]));
        let mut forged = bytes[..header_len].to_vec();
        forged.extend(encode_tensors(tensors.iter().map(|(k, t)| (k.as_str(), t))));
        forged.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_model::<f32>(&forged), Err(ModelError::Malformed(_))));
    }

    fn decode_tensors_prefix(bytes: &[u8]) -> IndexMap<String, Tensor<f32>> {
        read_tensor_block(&mut Reader::new(bytes)).unwrap()
    }

    #[test]
    fn precision_conversion_on_load() {
        let m = small();
        let file = decode_model::<f64>(&encode_model(&m, &[])).unwrap();
        assert_eq!(file.model.cast::<f32>(), m);
    }
}
