//! Checkpoint and exchange-payload wire format.
//!
//! Layout: magic `LWFS`, version `u16` little-endian, a length-prefixed
//! (`u32` LE) UTF-8 JSON header listing tensor names, shapes, dtype, and
//! active depth, then raw little-endian IEEE-754 tensor payloads in header
//! order. Round-trips are bitwise lossless, and payload sizes are exactly
//! what the communication ledger charges for.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{build_model, GroupId, ModelSpec, ModelState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LWFS";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not an LWFS checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u16),
    #[error("truncated checkpoint: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("dtype mismatch: checkpoint holds {found}, expected {expected}")]
    Dtype { expected: &'static str, found: String },
    #[error("tensor {name}: payload does not match shape {shape:?}")]
    ShapeMismatch { name: String, shape: Vec<usize> },
    #[error("checkpoint does not describe a model: {0}")]
    Structure(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderJson {
    dtype: String,
    active_depth: usize,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

fn header_bytes(dtype: &str, active_depth: usize, tensors: &[(String, Vec<usize>)]) -> Vec<u8> {
    let header = HeaderJson {
        dtype: dtype.to_string(),
        active_depth,
        tensors: tensors
            .iter()
            .map(|(name, shape)| TensorMeta { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    serde_json::to_vec(&header).expect("header serializes")
}

/// Serialize a named tensor collection.
pub fn serialize_named<T: Scalar>(
    tensors: &[(String, &Tensor<T>)],
    active_depth: usize,
) -> Vec<u8> {
    let inventory: Vec<(String, Vec<usize>)> =
        tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    let header = header_bytes(T::DTYPE, active_depth, &inventory);
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * T::BYTES).sum();
    let mut out = Vec::with_capacity(4 + 2 + 4 + header.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Exact byte length [`serialize_named`] would produce for this inventory,
/// computable without materializing any tensor data. The communication
/// ledger relies on this agreement.
pub fn serialized_len(
    inventory: &[(String, Vec<usize>)],
    bytes_per_elem: usize,
    dtype: &str,
    active_depth: usize,
) -> usize {
    let header = header_bytes(dtype, active_depth, inventory);
    let payload: usize =
        inventory.iter().map(|(_, s)| s.iter().product::<usize>() * bytes_per_elem).sum();
    4 + 2 + 4 + header.len() + payload
}

/// Parse a serialized tensor collection.
pub fn deserialize_named<T: Scalar>(
    bytes: &[u8],
) -> Result<(Vec<(String, Tensor<T>)>, usize), CheckpointError> {
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated { needed: 10, had: bytes.len() });
    }
    if bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body_start = 10 + header_len;
    if bytes.len() < body_start {
        return Err(CheckpointError::Truncated { needed: body_start, had: bytes.len() });
    }
    let header: HeaderJson = serde_json::from_slice(&bytes[10..body_start])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype { expected: T::DTYPE, found: header.dtype });
    }
    let mut offset = body_start;
    let mut out = Vec::with_capacity(header.tensors.len());
    for meta in header.tensors {
        let numel: usize = meta.shape.iter().product();
        let need = numel * T::BYTES;
        if bytes.len() < offset + need {
            return Err(CheckpointError::Truncated { needed: offset + need, had: bytes.len() });
        }
        let data: Vec<T> =
            (0..numel).map(|i| T::read_le(&bytes[offset + i * T::BYTES..])).collect();
        offset += need;
        let tensor = Tensor::from_vec(meta.shape.clone(), data)
            .map_err(|_| CheckpointError::ShapeMismatch { name: meta.name.clone(), shape: meta.shape })?;
        out.push((meta.name, tensor));
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Ok((out, header.active_depth))
}

/// Serialize a full model: every block and both heads, canonical order.
pub fn serialize_model<T: Scalar>(m: &ModelState<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    m.visit(&mut |name, t, _| tensors.push((name, t)));
    serialize_named(&tensors, m.active_depth)
}

/// Serialize only the given exchange groups, canonical order.
pub fn serialize_groups<T: Scalar>(m: &ModelState<T>, groups: &[GroupId]) -> Vec<u8> {
    let mut tensors = Vec::new();
    for &g in groups {
        m.visit_group(g, &mut |name, t, _| tensors.push((name, t)));
    }
    serialize_named(&tensors, m.active_depth)
}

fn dim_of(
    map: &std::collections::HashMap<String, Vec<usize>>,
    name: &str,
    axis: usize,
) -> Result<usize, CheckpointError> {
    map.get(name)
        .and_then(|s| s.get(axis))
        .copied()
        .ok_or_else(|| CheckpointError::Structure(format!("missing tensor {name}")))
}

/// Rebuild a full model from checkpoint bytes. The architecture is recovered
/// from tensor names and shapes; `frozen_prefix` resets to zero.
pub fn deserialize_model<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>, CheckpointError> {
    let (tensors, active_depth) = deserialize_named::<T>(bytes)?;
    let shapes: std::collections::HashMap<String, Vec<usize>> =
        tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();

    let num_layers = (0..)
        .take_while(|i| shapes.contains_key(&format!("enc.{i}.lin1.weight")))
        .count();
    if num_layers == 0 {
        return Err(CheckpointError::Structure("no encoder blocks found".into()));
    }
    let spec = ModelSpec {
        input_dim: dim_of(&shapes, "enc.0.lin1.weight", 0)?,
        num_layers,
        block_hidden_dim: dim_of(&shapes, "enc.0.lin1.weight", 1)?,
        block_out_dim: dim_of(&shapes, "enc.0.lin2.weight", 1)?,
        proj_hidden: dim_of(&shapes, "proj.0.lin.weight", 1)?,
        proj_out: dim_of(&shapes, "proj.2.lin.weight", 1)?,
        pred_hidden: dim_of(&shapes, "pred.0.lin.weight", 1)?,
    };

    let expected = spec.inventory(&spec.all_groups());
    if expected.len() != tensors.len() {
        return Err(CheckpointError::Structure(format!(
            "expected {} tensors for this architecture, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for (name, shape) in &expected {
        match shapes.get(name) {
            None => return Err(CheckpointError::Structure(format!("missing tensor {name}"))),
            Some(s) if s != shape => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    shape: shape.clone(),
                })
            }
            Some(_) => {}
        }
    }

    let mut model = build_model::<T>(&spec, 0);
    let map: std::collections::BTreeMap<String, Tensor<T>> = tensors.into_iter().collect();
    model
        .set_tensors(&map)
        .map_err(|e| CheckpointError::Structure(e.to_string()))?;
    model.active_depth = active_depth;
    model.frozen_prefix = 0;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 6,
            num_layers: 2,
            block_hidden_dim: 8,
            block_out_dim: 6,
            proj_hidden: 8,
            proj_out: 4,
            pred_hidden: 8,
        }
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let m = build_model::<f32>(&spec(), 77);
        let bytes = serialize_model(&m);
        let back = deserialize_model::<f32>(&bytes).unwrap();
        assert!(m.bit_eq(&back));
    }

    #[test]
    fn single_scalar_tensor_payload_is_four_bytes_at_32_bit() {
        let w = Tensor::<f32>::from_vec(vec![1], vec![0.5]).unwrap();
        let named = vec![("w".to_string(), &w)];
        let bytes = serialize_named(&named, 0);
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - (10 + header_len), 4);
        assert_eq!(&bytes[bytes.len() - 4..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn serialized_size_is_header_plus_four_bytes_per_element() {
        let s = spec();
        let m = build_model::<f32>(&s, 3);
        let bytes = serialize_model(&m);
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let elems = m.num_param_elems() + m.num_buffer_elems();
        assert_eq!(bytes.len(), 10 + header_len + 4 * elems);
        // The static length computation agrees with actual serialization.
        let inv = s.inventory(&s.all_groups());
        assert_eq!(serialized_len(&inv, 4, "f32", m.active_depth), bytes.len());
    }

    #[test]
    fn group_payload_matches_static_length() {
        let s = spec();
        let m = build_model::<f32>(&s, 3);
        let groups = [GroupId::Enc(1), GroupId::Proj, GroupId::Pred];
        let bytes = serialize_groups(&m, &groups);
        let inv = s.inventory(&groups);
        assert_eq!(serialized_len(&inv, 4, "f32", m.active_depth), bytes.len());
    }

    #[test]
    fn distinct_parse_errors() {
        let m = build_model::<f32>(&spec(), 1);
        let good = serialize_model(&m);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(deserialize_model::<f32>(&bad_magic), Err(CheckpointError::BadMagic)));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            deserialize_model::<f32>(&bad_version),
            Err(CheckpointError::Version(9))
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            deserialize_model::<f32>(truncated),
            Err(CheckpointError::Truncated { .. })
        ));

        assert!(matches!(
            deserialize_model::<f64>(&good),
            Err(CheckpointError::Dtype { .. })
        ));
    }
}
