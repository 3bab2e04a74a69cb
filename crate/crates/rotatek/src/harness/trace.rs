//! Bit-exact binary trace container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    magic "RTKC"
//! bytes 4..8    format version (u32)
//! bytes 8..12   header length (u32)
//! bytes 12..    JSON header: sequence layout + tensor manifest
//! then          payload: contiguous row-major tensors in manifest order
//! ```
//!
//! Tensors are 32-bit floats except the optional token mask, which is one
//! byte per token (0 or 1). Offsets in the manifest are relative to the
//! payload start and must be contiguous. Every load revalidates magic,
//! version, manifest consistency, payload length, and float finiteness, each
//! failure with its own diagnostic.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{HeadData, PrefillInput, SequenceLayout};
use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"RTKC";
pub const FORMAT_VERSION: u32 = 1;

/// Hard cap on the declared header length, to fail fast on garbage.
const MAX_HEADER_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic: found {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("file too short: {len} bytes cannot hold the fixed header")]
    TooShort { len: usize },
    #[error("declared header length {declared} exceeds the header cap or the available {available} bytes")]
    TruncatedHeader { declared: u32, available: usize },
    #[error("header is not valid metadata: {reason}")]
    HeaderParse { reason: String },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("manifest mismatch: {reason}")]
    ManifestMismatch { reason: String },
    #[error("non-finite value in tensor {tensor} at flat index {index}")]
    NonFinite { tensor: String, index: usize },
    #[error("tensor {tensor} byte {index} is {value}, expected 0 or 1")]
    BadMaskByte {
        tensor: String,
        index: usize,
        value: u8,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    /// Used by compressed-cache snapshots for the rotation state, which is
    /// double precision by construction.
    F64,
    U8,
}

impl Dtype {
    fn width(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset relative to the payload start.
    pub offset: u64,
    pub len_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceHeader {
    layout: SequenceLayout,
    tensors: Vec<TensorMeta>,
}

/// One decoded tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32 { shape: Vec<usize>, values: Vec<f32> },
    F64 { shape: Vec<usize>, values: Vec<f64> },
    U8 { shape: Vec<usize>, values: Vec<u8> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32 { shape, .. }
            | TensorData::F64 { shape, .. }
            | TensorData::U8 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32 { .. } => Dtype::F32,
            TensorData::F64 { .. } => Dtype::F64,
            TensorData::U8 { .. } => Dtype::U8,
        }
    }

    fn len_bytes(&self) -> u64 {
        match self {
            TensorData::F32 { values, .. } => values.len() as u64 * 4,
            TensorData::F64 { values, .. } => values.len() as u64 * 8,
            TensorData::U8 { values, .. } => values.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTensor {
    pub name: String,
    pub data: TensorData,
}

/// An in-memory trace: layout plus named tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub layout: SequenceLayout,
    pub tensors: Vec<TraceTensor>,
}

impl TraceFile {
    pub fn tensor(&self, name: &str) -> Option<&TensorData> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.data)
    }

    /// Serializes to the container byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut metas = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            let len_bytes = t.data.len_bytes();
            metas.push(TensorMeta {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.data.shape().to_vec(),
                offset,
                len_bytes,
            });
            offset += len_bytes;
        }
        let header = TraceHeader {
            layout: self.layout,
            tensors: metas,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(12 + header_json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32 { values, .. } => {
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorData::F64 { values, .. } => {
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorData::U8 { values, .. } => out.extend_from_slice(values),
            }
        }
        out
    }

    /// Parses and fully validates the container byte format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        if bytes.len() < 12 {
            return Err(TraceError::TooShort { len: bytes.len() });
        }
        let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(TraceError::BadMagic { found });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(TraceError::UnsupportedVersion { found: version });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let available = bytes.len() - 12;
        if header_len > MAX_HEADER_LEN || header_len as usize > available {
            return Err(TraceError::TruncatedHeader {
                declared: header_len,
                available,
            });
        }
        let header_end = 12 + header_len as usize;
        let header: TraceHeader = serde_json::from_slice(&bytes[12..header_end]).map_err(|e| {
            TraceError::HeaderParse {
                reason: e.to_string(),
            }
        })?;

        // Manifest consistency: shapes match byte counts, offsets contiguous.
        let mut expected_offset = 0u64;
        for meta in &header.tensors {
            let count = meta
                .shape
                .iter()
                .try_fold(1u64, |acc, &s| acc.checked_mul(s as u64));
            let Some(count) = count else {
                return Err(TraceError::ManifestMismatch {
                    reason: format!("tensor {} shape overflows", meta.name),
                });
            };
            let want = count * meta.dtype.width();
            if want != meta.len_bytes {
                return Err(TraceError::ManifestMismatch {
                    reason: format!(
                        "tensor {} declares {} bytes but shape {:?} needs {}",
                        meta.name, meta.len_bytes, meta.shape, want
                    ),
                });
            }
            if meta.offset != expected_offset {
                return Err(TraceError::ManifestMismatch {
                    reason: format!(
                        "tensor {} at offset {} breaks contiguity (expected {})",
                        meta.name, meta.offset, expected_offset
                    ),
                });
            }
            expected_offset += want;
        }
        let payload = &bytes[header_end..];
        if payload.len() as u64 != expected_offset {
            return Err(TraceError::TruncatedPayload {
                expected: expected_offset,
                actual: payload.len() as u64,
            });
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let start = meta.offset as usize;
            let end = start + meta.len_bytes as usize;
            let raw = &payload[start..end];
            let data = match meta.dtype {
                Dtype::F32 => {
                    let mut values = Vec::with_capacity(raw.len() / 4);
                    for (i, chunk) in raw.chunks_exact(4).enumerate() {
                        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                        if !v.is_finite() {
                            return Err(TraceError::NonFinite {
                                tensor: meta.name.clone(),
                                index: i,
                            });
                        }
                        values.push(v);
                    }
                    TensorData::F32 {
                        shape: meta.shape.clone(),
                        values,
                    }
                }
                Dtype::F64 => {
                    let mut values = Vec::with_capacity(raw.len() / 8);
                    for (i, chunk) in raw.chunks_exact(8).enumerate() {
                        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                        if !v.is_finite() {
                            return Err(TraceError::NonFinite {
                                tensor: meta.name.clone(),
                                index: i,
                            });
                        }
                        values.push(v);
                    }
                    TensorData::F64 {
                        shape: meta.shape.clone(),
                        values,
                    }
                }
                Dtype::U8 => {
                    for (i, &b) in raw.iter().enumerate() {
                        if b > 1 {
                            return Err(TraceError::BadMaskByte {
                                tensor: meta.name.clone(),
                                index: i,
                                value: b,
                            });
                        }
                    }
                    TensorData::U8 {
                        shape: meta.shape.clone(),
                        values: raw.to_vec(),
                    }
                }
            };
            tensors.push(TraceTensor {
                name: meta.name.clone(),
                data,
            });
        }
        Ok(TraceFile {
            layout: header.layout,
            tensors,
        })
    }
}

/// Writes a trace container to disk.
pub fn trace_write(path: &Path, trace: &TraceFile) -> Result<(), TraceError> {
    std::fs::write(path, trace.to_bytes())?;
    Ok(())
}

/// Reads and validates a trace container from disk.
pub fn trace_read(path: &Path) -> Result<TraceFile, TraceError> {
    let bytes = std::fs::read(path)?;
    TraceFile::from_bytes(&bytes)
}

fn matrix_to_f32(m: &Matrix) -> Vec<f32> {
    m.as_slice().iter().map(|&v| v as f32).collect()
}

fn stack_to_tensor(name: &str, mats: &[&Matrix]) -> TraceTensor {
    let heads = mats.len();
    let rows = mats.first().map_or(0, |m| m.rows());
    let cols = mats.first().map_or(0, |m| m.cols());
    let mut values = Vec::with_capacity(heads * rows * cols);
    for m in mats {
        assert!(
            m.rows() == rows && m.cols() == cols,
            "ragged per-head shapes for tensor {name}: {}x{} vs {rows}x{cols}",
            m.rows(),
            m.cols()
        );
        values.extend(matrix_to_f32(m));
    }
    TraceTensor {
        name: name.to_string(),
        data: TensorData::F32 {
            shape: vec![heads, rows, cols],
            values,
        },
    }
}

/// Builds a trace from prefill activations. Tensor order: `q`, `k_visual`,
/// `v_visual`, `k_text`, `v_text`, then the optional `token_mask` bytes.
pub fn trace_from_prefill(
    input: &PrefillInput,
    layout: &SequenceLayout,
    token_mask: Option<&[bool]>,
) -> TraceFile {
    let q: Vec<&Matrix> = input.query_windows.iter().collect();
    let kv: Vec<&Matrix> = input.heads.iter().map(|h| &h.visual_keys).collect();
    let vv: Vec<&Matrix> = input.heads.iter().map(|h| &h.visual_values).collect();
    let kt: Vec<&Matrix> = input.heads.iter().map(|h| &h.text_keys).collect();
    let vt: Vec<&Matrix> = input.heads.iter().map(|h| &h.text_values).collect();
    let mut tensors = vec![
        stack_to_tensor("q", &q),
        stack_to_tensor("k_visual", &kv),
        stack_to_tensor("v_visual", &vv),
        stack_to_tensor("k_text", &kt),
        stack_to_tensor("v_text", &vt),
    ];
    if let Some(mask) = token_mask {
        tensors.push(TraceTensor {
            name: "token_mask".to_string(),
            data: TensorData::U8 {
                shape: vec![mask.len()],
                values: mask.iter().map(|&b| u8::from(b)).collect(),
            },
        });
    }
    TraceFile {
        layout: *layout,
        tensors,
    }
}

fn tensor_to_matrices(data: &TensorData, what: &str) -> Result<Vec<Matrix>, TraceError> {
    let TensorData::F32 { shape, values } = data else {
        return Err(TraceError::ManifestMismatch {
            reason: format!("{what} must be f32"),
        });
    };
    if shape.len() != 3 {
        return Err(TraceError::ManifestMismatch {
            reason: format!("{what} must be rank-3 [heads, rows, cols], got {shape:?}"),
        });
    }
    let (heads, rows, cols) = (shape[0], shape[1], shape[2]);
    let per = rows * cols;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let slice = &values[h * per..(h + 1) * per];
        let data: Vec<f64> = slice.iter().map(|&v| f64::from(v)).collect();
        out.push(
            Matrix::from_vec(rows, cols, data).map_err(|e| TraceError::ManifestMismatch {
                reason: format!("{what}: {e}"),
            })?,
        );
    }
    Ok(out)
}

/// Reassembles prefill inputs from a trace, with the optional token mask.
pub fn trace_to_prefill(
    trace: &TraceFile,
) -> Result<(PrefillInput, Option<Vec<bool>>), TraceError> {
    let need = |name: &str| {
        trace
            .tensor(name)
            .ok_or_else(|| TraceError::ManifestMismatch {
                reason: format!("missing tensor {name}"),
            })
    };
    let q = tensor_to_matrices(need("q")?, "q")?;
    let kv = tensor_to_matrices(need("k_visual")?, "k_visual")?;
    let vv = tensor_to_matrices(need("v_visual")?, "v_visual")?;
    let kt = tensor_to_matrices(need("k_text")?, "k_text")?;
    let vt = tensor_to_matrices(need("v_text")?, "v_text")?;
    let layout = &trace.layout;
    if kv.len() != layout.heads_kv || q.len() != layout.heads_q {
        return Err(TraceError::ManifestMismatch {
            reason: format!(
                "tensor head counts ({}, {}) disagree with layout ({}, {})",
                q.len(),
                kv.len(),
                layout.heads_q,
                layout.heads_kv
            ),
        });
    }
    if kv
        .iter()
        .any(|m| m.rows() != layout.n_visual || m.cols() != layout.d)
    {
        return Err(TraceError::ManifestMismatch {
            reason: "k_visual shape disagrees with layout".into(),
        });
    }
    let heads = kv
        .into_iter()
        .zip(vv)
        .zip(kt.into_iter().zip(vt))
        .map(
            |((visual_keys, visual_values), (text_keys, text_values))| HeadData {
                visual_keys,
                visual_values,
                text_keys,
                text_values,
            },
        )
        .collect();
    let mask = match trace.tensor("token_mask") {
        Some(TensorData::U8 { values, .. }) => Some(values.iter().map(|&b| b == 1).collect()),
        Some(_) => {
            return Err(TraceError::ManifestMismatch {
                reason: "token_mask must be u8".into(),
            })
        }
        None => None,
    };
    Ok((
        PrefillInput {
            heads,
            query_windows: q,
        },
        mask,
    ))
}

fn f32_tensor(name: String, m: &crate::linalg::MatrixF32) -> TraceTensor {
    TraceTensor {
        name,
        data: TensorData::F32 {
            shape: vec![m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
        },
    }
}

fn f64_tensor(name: String, shape: Vec<usize>, values: Vec<f64>) -> TraceTensor {
    TraceTensor {
        name,
        data: TensorData::F64 { shape, values },
    }
}

/// Serializes a compressed cache into the container: per-head segment-tagged
/// tensors (`head{h}/...`), cached KV data in its single-precision storage
/// form, the rotation state in double precision.
pub fn cache_to_trace(cache: &crate::cache::CompressedCache) -> TraceFile {
    let mut tensors = Vec::new();
    tensors.push(f64_tensor(
        "meta/requested_rank".into(),
        vec![1],
        vec![cache.requested_rank as f64],
    ));
    for (h, head) in cache.heads.iter().enumerate() {
        tensors.push(f32_tensor(
            format!("head{h}/visual_keys_rot"),
            &head.visual_keys_rot,
        ));
        tensors.push(f32_tensor(
            format!("head{h}/visual_values"),
            &head.visual_values,
        ));
        tensors.push(f32_tensor(format!("head{h}/text_keys"), &head.text_keys));
        tensors.push(f32_tensor(
            format!("head{h}/text_values"),
            &head.text_values,
        ));
        let basis = &head.rotation.basis;
        tensors.push(f64_tensor(
            format!("head{h}/rotation_basis"),
            vec![basis.rows(), basis.cols()],
            basis.as_slice().to_vec(),
        ));
        tensors.push(f64_tensor(
            format!("head{h}/rotation_mean"),
            vec![head.rotation.mean.len()],
            head.rotation.mean.clone(),
        ));
        tensors.push(f64_tensor(
            format!("head{h}/rotation_mean_residual"),
            vec![head.rotation.mean_residual.len()],
            head.rotation.mean_residual.clone(),
        ));
    }
    TraceFile {
        layout: cache.layout,
        tensors,
    }
}

/// Rebuilds a compressed cache from its container snapshot.
pub fn cache_from_trace(trace: &TraceFile) -> Result<crate::cache::CompressedCache, TraceError> {
    let missing = |name: &str| TraceError::ManifestMismatch {
        reason: format!("missing cache tensor {name}"),
    };
    let f32_matrix = |name: &str| -> Result<crate::linalg::MatrixF32, TraceError> {
        match trace.tensor(name) {
            Some(TensorData::F32 { shape, values }) if shape.len() == 2 => {
                crate::linalg::MatrixF32::from_vec(shape[0], shape[1], values.clone()).map_err(
                    |e| TraceError::ManifestMismatch {
                        reason: format!("{name}: {e}"),
                    },
                )
            }
            Some(_) => Err(TraceError::ManifestMismatch {
                reason: format!("{name} must be a rank-2 f32 tensor"),
            }),
            None => Err(missing(name)),
        }
    };
    let f64_values = |name: &str| -> Result<(Vec<usize>, Vec<f64>), TraceError> {
        match trace.tensor(name) {
            Some(TensorData::F64 { shape, values }) => Ok((shape.clone(), values.clone())),
            Some(_) => Err(TraceError::ManifestMismatch {
                reason: format!("{name} must be an f64 tensor"),
            }),
            None => Err(missing(name)),
        }
    };

    let (_, rank) = f64_values("meta/requested_rank")?;
    let requested_rank = rank.first().copied().unwrap_or(0.0) as usize;
    let mut heads = Vec::with_capacity(trace.layout.heads_kv);
    for h in 0..trace.layout.heads_kv {
        let (basis_shape, basis_values) = f64_values(&format!("head{h}/rotation_basis"))?;
        if basis_shape.len() != 2 {
            return Err(TraceError::ManifestMismatch {
                reason: format!("head{h}/rotation_basis must be rank-2"),
            });
        }
        let basis =
            Matrix::from_vec(basis_shape[0], basis_shape[1], basis_values).map_err(|e| {
                TraceError::ManifestMismatch {
                    reason: format!("head{h}/rotation_basis: {e}"),
                }
            })?;
        let (_, mean) = f64_values(&format!("head{h}/rotation_mean"))?;
        let (_, mean_residual) = f64_values(&format!("head{h}/rotation_mean_residual"))?;
        let rank_k = basis.cols();
        heads.push(crate::cache::HeadCache {
            visual_keys_rot: f32_matrix(&format!("head{h}/visual_keys_rot"))?,
            visual_values: f32_matrix(&format!("head{h}/visual_values"))?,
            text_keys: f32_matrix(&format!("head{h}/text_keys"))?,
            text_values: f32_matrix(&format!("head{h}/text_values"))?,
            rotation: crate::rotation::RotationState {
                basis,
                mean,
                mean_residual,
                rank_k,
            },
        });
    }
    Ok(crate::cache::CompressedCache {
        layout: trace.layout,
        requested_rank,
        heads,
    })
}
