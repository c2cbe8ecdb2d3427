use half::f16;

use super::ExecError;
use crate::ir::{DType, QuantParams, TensorSpec};

/// Largest finite FP16 value; conversions saturate here instead of overflowing.
pub const F16_MAX: f32 = 65504.0;

/// Round-to-nearest-even conversion that saturates to `±65504`.
pub fn f32_to_f16_saturating(x: f32) -> f16 {
    if x.is_nan() {
        return f16::NAN;
    }
    f16::from_f32(x.clamp(-F16_MAX, F16_MAX))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// A tensor with its spec and a flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub spec: TensorSpec,
    pub data: TensorData,
}

impl TensorValue {
    pub fn new(spec: TensorSpec, data: TensorData) -> Result<Self, ExecError> {
        if spec.numel() != data.len() {
            return Err(ExecError::Shape(format!(
                "shape {:?} needs {} elements, buffer has {}",
                spec.shape,
                spec.numel(),
                data.len()
            )));
        }
        if spec.dtype != data.dtype() {
            return Err(ExecError::DType(format!(
                "spec says {}, buffer holds {}",
                spec.dtype,
                data.dtype()
            )));
        }
        if spec.dtype == DType::I8 && spec.quant.is_none() {
            return Err(ExecError::MissingQuantParams);
        }
        Ok(TensorValue { spec, data })
    }

    pub fn f32(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self, ExecError> {
        Self::new(TensorSpec::new(shape, DType::F32), TensorData::F32(data))
    }

    pub fn f16(shape: impl Into<Vec<usize>>, data: Vec<f16>) -> Result<Self, ExecError> {
        Self::new(TensorSpec::new(shape, DType::F16), TensorData::F16(data))
    }

    pub fn i8(shape: impl Into<Vec<usize>>, data: Vec<i8>, quant: QuantParams) -> Result<Self, ExecError> {
        Self::new(TensorSpec::quantized(shape, quant), TensorData::I8(data))
    }

    /// Decodes a little-endian payload laid out per `spec`.
    pub fn from_le_bytes(spec: TensorSpec, bytes: &[u8]) -> Result<Self, ExecError> {
        if bytes.len() != spec.byte_len() {
            return Err(ExecError::Shape(format!(
                "payload has {} bytes, {:?} {} needs {}",
                bytes.len(),
                spec.shape,
                spec.dtype,
                spec.byte_len()
            )));
        }
        let data = match spec.dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Self::new(spec, data)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.spec.shape
    }

    pub fn dtype(&self) -> DType {
        self.spec.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Real values as f32; INT8 is dequantized through its params.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            TensorData::I8(v) => {
                let q = self.spec.quant.expect("INT8 tensor has quant params");
                v.iter().map(|&x| q.dequantize(x) as f32).collect()
            }
            TensorData::I32(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Borrow the FP32 buffer, if that is what this tensor holds.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn with_shape(mut self, shape: Vec<usize>) -> Result<Self, ExecError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(ExecError::Shape(format!(
                "cannot view {:?} as {:?}",
                self.spec.shape, shape
            )));
        }
        self.spec.shape = shape;
        Ok(self)
    }
}
