//! MCT tensor files: `"MCT1" | dtype u8 | rank u8 | dims u32 x rank | payload`,
//! little-endian, row-major. INT8 files carry no quant params and load with
//! unit scale and zero point 0.

use std::path::Path;

use super::{ExecError, TensorValue};
use crate::ir::{DType, QuantParams, TensorSpec};

pub const TENSOR_MAGIC: &[u8; 4] = b"MCT1";

pub fn tensor_to_bytes(t: &TensorValue) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + t.spec.byte_len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.dtype().code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    out
}

pub fn read_tensor_bytes(bytes: &[u8]) -> Result<TensorValue, ExecError> {
    if bytes.len() < 6 || &bytes[..4] != TENSOR_MAGIC {
        return Err(ExecError::Format("bad magic".into()));
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(ExecError::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let mut spec = TensorSpec::new(shape, dtype);
    if dtype == DType::I8 {
        spec.quant = Some(QuantParams {
            scale: 1.0,
            zero_point: 0,
        });
    }
    let payload = &bytes[header..];
    if payload.len() != spec.byte_len() {
        return Err(ExecError::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            spec.byte_len()
        )));
    }
    TensorValue::from_le_bytes(spec, payload)
}

pub fn write_tensor(path: &Path, t: &TensorValue) -> Result<(), ExecError> {
    std::fs::write(path, tensor_to_bytes(t)).map_err(|e| ExecError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn read_tensor(path: &Path) -> Result<TensorValue, ExecError> {
    let bytes = std::fs::read(path).map_err(|e| ExecError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    read_tensor_bytes(&bytes).map_err(|e| match e {
        ExecError::Format(msg) => ExecError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
