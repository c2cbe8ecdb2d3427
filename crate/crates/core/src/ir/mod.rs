//! Computation-graph IR.
//!
//! A [`Graph`] is an immutable DAG of typed [`Node`]s drawn from a fixed set
//! of ten op kinds. Graph inputs are value sources that live in the same id
//! space as nodes but are not nodes themselves, so they never appear in an
//! op histogram.

mod manifest;
mod mobilenet;
mod serial;
mod topo;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use manifest::{manifest_path, read_model, write_model, Manifest};
pub use mobilenet::{build_mobilenet_v2, make_divisible, MobileNetConfig};
pub use serial::{deserialize, serialize, weight_payload_bytes, FORMAT_VERSION, MAGIC};
pub use topo::topo_sort;
pub use validate::{validate, Rule, ValidationReport, Violation};

/// Identifier shared by nodes and graph inputs.
pub type NodeId = u32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IrError {
    #[error("bad magic: expected \"MCE1\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("truncated {0} section")]
    Truncated(&'static str),
    #[error("unknown op code {0}")]
    UnknownOpCode(u8),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("unknown precision tag {0}")]
    UnknownPrecision(u16),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed {0}")]
    Malformed(String),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
    I32,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
            DType::I32 => 4,
        }
    }

    pub const fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::I8 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, IrError> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F16,
            2 => DType::I8,
            3 => DType::I32,
            other => return Err(IrError::UnknownDType(other)),
        })
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "FP32",
            DType::F16 => "FP16",
            DType::I8 => "INT8",
            DType::I32 => "INT32",
        })
    }
}

/// Affine map between INT8 codes and reals: `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

/// Smallest scale ever produced; degenerate (constant) ranges floor to this.
pub const SCALE_EPSILON: f64 = 1e-12;

impl QuantParams {
    pub const QMIN: i32 = -128;
    pub const QMAX: i32 = 127;

    /// Symmetric params over `[-127, 127]` with zero point 0.
    pub fn symmetric(min: f64, max: f64) -> Self {
        let amax = min.abs().max(max.abs());
        QuantParams {
            scale: (amax / 127.0).max(SCALE_EPSILON),
            zero_point: 0,
        }
    }

    /// Affine params over `[-128, 127]`. The range is widened to include 0
    /// so that real zero (padding, relu floor) is exactly representable.
    pub fn affine(min: f64, max: f64) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = ((hi - lo) / 255.0).max(SCALE_EPSILON);
        let zp = (Self::QMIN as f64 - lo / scale).round_ties_even();
        let zero_point = zp.clamp(Self::QMIN as f64, Self::QMAX as f64) as i32;
        QuantParams { scale, zero_point }
    }

    pub fn is_valid(&self) -> bool {
        self.scale.is_finite() && self.scale > 0.0 && (Self::QMIN..=Self::QMAX).contains(&self.zero_point)
    }

    /// Round-half-even quantization, saturating to `[lo, hi]`.
    pub fn quantize_in(&self, x: f64, lo: i32, hi: i32) -> i8 {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f64;
        // NaN maps to the zero point
        if q.is_nan() {
            return self.zero_point as i8;
        }
        q.clamp(lo as f64, hi as f64) as i8
    }

    pub fn quantize(&self, x: f64) -> i8 {
        self.quantize_in(x, Self::QMIN, Self::QMAX)
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * (q as i32 - self.zero_point) as f64
    }
}

/// Shape, element type and (for INT8) quantization of a tensor.
///
/// Activation shapes are NHWC (or `[N, C]` after the global mean) and carry a
/// nominal batch of 1; the executor accepts any leading batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub quant: Option<QuantParams>,
}

impl TensorSpec {
    pub fn new(shape: impl Into<Vec<usize>>, dtype: DType) -> Self {
        TensorSpec {
            shape: shape.into(),
            dtype,
            quant: None,
        }
    }

    pub fn quantized(shape: impl Into<Vec<usize>>, quant: QuantParams) -> Self {
        TensorSpec {
            shape: shape.into(),
            dtype: DType::I8,
            quant: Some(quant),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype.byte_width()
    }

    /// Describes every broken invariant, or `None` when the spec is well formed.
    pub fn check(&self) -> Option<String> {
        if self.shape.len() > 4 {
            return Some(format!("rank {} exceeds 4", self.shape.len()));
        }
        if self.shape.contains(&0) {
            return Some(format!("zero-sized dim in {:?}", self.shape));
        }
        match (self.dtype, self.quant) {
            (DType::I8, None) => Some("INT8 tensor without quant params".into()),
            (DType::I8, Some(q)) if !q.is_valid() => Some(format!("invalid quant params {q:?}")),
            (DType::I8, Some(_)) => None,
            (_, Some(_)) => Some(format!("{} tensor carries quant params", self.dtype)),
            (_, None) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Conv2D,
    DepthwiseConv2dNative,
    MatMul,
    Relu6,
    Mean,
    Mul,
    AddV2,
    Const,
    Pad,
    Cast,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Conv2D,
        OpKind::DepthwiseConv2dNative,
        OpKind::MatMul,
        OpKind::Relu6,
        OpKind::Mean,
        OpKind::Mul,
        OpKind::AddV2,
        OpKind::Const,
        OpKind::Pad,
        OpKind::Cast,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, IrError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(IrError::UnknownOpCode(code))
    }

    /// Required number of inputs.
    pub fn arity(self) -> usize {
        match self {
            OpKind::Const => 0,
            OpKind::Relu6 | OpKind::Mean | OpKind::Pad | OpKind::Cast => 1,
            OpKind::Conv2D | OpKind::DepthwiseConv2dNative | OpKind::MatMul | OpKind::Mul | OpKind::AddV2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2D => "Conv2D",
            OpKind::DepthwiseConv2dNative => "DepthwiseConv2dNative",
            OpKind::MatMul => "MatMul",
            OpKind::Relu6 => "Relu6",
            OpKind::Mean => "Mean",
            OpKind::Mul => "Mul",
            OpKind::AddV2 => "AddV2",
            OpKind::Const => "Const",
            OpKind::Pad => "Pad",
            OpKind::Cast => "Cast",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

/// Kind-specific node attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attrs {
    None,
    Conv {
        strides: [u32; 2],
        padding: Padding,
    },
    /// `(before, after)` zero padding per dimension.
    Pad {
        amounts: Vec<[u32; 2]>,
    },
    Mean {
        axes: Vec<u32>,
    },
    Cast {
        to: DType,
    },
}

/// Where a node sits in the network, recorded at build time. Not serialized;
/// deserialized graphs carry `Role::Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Role {
    #[default]
    Unknown,
    Weight,
    Bias,
    BnScale,
    BiasAdd,
    ResidualAdd,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub attrs: Attrs,
    /// Output tensor spec.
    pub spec: TensorSpec,
    /// Raw little-endian weight bytes, Const only.
    pub payload: Option<Vec<u8>>,
    pub role: Role,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.kind == other.kind
            && self.inputs == other.inputs
            && self.attrs == other.attrs
            && self.spec == other.spec
            && self.payload == other.payload
    }
}

impl Node {
    pub fn op(id: NodeId, kind: OpKind, inputs: Vec<NodeId>, attrs: Attrs, spec: TensorSpec) -> Self {
        Node {
            id,
            kind,
            inputs,
            attrs,
            spec,
            payload: None,
            role: Role::Unknown,
        }
    }

    pub fn constant(id: NodeId, spec: TensorSpec, payload: Vec<u8>) -> Self {
        Node {
            id,
            kind: OpKind::Const,
            inputs: Vec::new(),
            attrs: Attrs::None,
            spec,
            payload: Some(payload),
            role: Role::Unknown,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Original,
    Fp32,
    Fp16,
    Int8,
}

impl Precision {
    pub fn tag(self) -> u16 {
        match self {
            Precision::Original => 0,
            Precision::Fp32 => 1,
            Precision::Fp16 => 2,
            Precision::Int8 => 3,
        }
    }

    pub fn from_tag(tag: u16) -> Result<Self, IrError> {
        Ok(match tag {
            0 => Precision::Original,
            1 => Precision::Fp32,
            2 => Precision::Fp16,
            3 => Precision::Int8,
            other => return Err(IrError::UnknownPrecision(other)),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Original => "original",
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(Precision::Original),
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            other => Err(format!("unknown precision {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub name: String,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub id: NodeId,
    pub name: String,
    pub spec: TensorSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphOutput {
    pub id: NodeId,
    pub name: String,
}

/// Immutable computation graph. Share it by reference (or `Arc`) across
/// threads; passes produce new graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    metadata: Metadata,
    inputs: Vec<GraphInput>,
    nodes: BTreeMap<NodeId, Node>,
    outputs: Vec<GraphOutput>,
}

impl Graph {
    /// Assembles a graph without validating it. Use [`validate`] before
    /// handing the result to anything that assumes well-formedness.
    pub fn from_parts(
        metadata: Metadata,
        inputs: Vec<GraphInput>,
        nodes: impl IntoIterator<Item = Node>,
        outputs: Vec<GraphOutput>,
    ) -> Self {
        let nodes = nodes.into_iter().map(|n| (n.id, n)).collect();
        Graph {
            metadata,
            inputs,
            nodes,
            outputs,
        }
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn name(&self) -> &str {
        &self.metadata.name
    }

    pub fn precision(&self) -> Precision {
        self.metadata.precision
    }

    pub fn inputs(&self) -> &[GraphInput] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[GraphOutput] {
        &self.outputs
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl ExactSizeIterator<Item = &Node> + Clone {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn input(&self, id: NodeId) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.id == id)
    }

    /// Output spec of a node or graph input.
    pub fn value_spec(&self, id: NodeId) -> Option<&TensorSpec> {
        self.nodes
            .get(&id)
            .map(|n| &n.spec)
            .or_else(|| self.input(id).map(|i| &i.spec))
    }

    pub fn max_id(&self) -> NodeId {
        let node_max = self.nodes.keys().next_back().copied().unwrap_or(0);
        let input_max = self.inputs.iter().map(|i| i.id).max().unwrap_or(0);
        node_max.max(input_max)
    }

    /// Decomposes into parts for building a derived graph.
    pub fn into_parts(self) -> (Metadata, Vec<GraphInput>, BTreeMap<NodeId, Node>, Vec<GraphOutput>) {
        (self.metadata, self.inputs, self.nodes, self.outputs)
    }
}

/// Counts nodes per op kind. Kinds with no nodes are omitted.
pub fn op_histogram(graph: &Graph) -> BTreeMap<OpKind, usize> {
    let mut hist = BTreeMap::new();
    for node in graph.nodes() {
        *hist.entry(node.kind).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtype_widths() {
        assert_eq!(DType::F32.byte_width(), 4);
        assert_eq!(DType::F16.byte_width(), 2);
        assert_eq!(DType::I8.byte_width(), 1);
        assert_eq!(DType::I32.byte_width(), 4);
    }

    #[test]
    fn op_codes_round_trip() {
        for kind in OpKind::ALL {
            assert_eq!(OpKind::from_code(kind.code()).unwrap(), kind);
        }
        assert_eq!(OpKind::from_code(10), Err(IrError::UnknownOpCode(10)));
    }

    #[test]
    fn symmetric_params() {
        let q = QuantParams::symmetric(-2.54, 2.54);
        assert!((q.scale - 0.02).abs() < 1e-15);
        assert_eq!(q.zero_point, 0);
        assert_eq!(q.quantize(1.0), 50);
        assert_eq!(q.quantize(0.0), 0);
    }

    #[test]
    fn degenerate_range_floors_scale() {
        let q = QuantParams::symmetric(0.0, 0.0);
        assert_eq!(q.scale, SCALE_EPSILON);
        assert_eq!(q.zero_point, 0);
        let a = QuantParams::affine(0.0, 0.0);
        assert_eq!(a.scale, SCALE_EPSILON);
    }

    #[test]
    fn affine_represents_zero_exactly() {
        let q = QuantParams::affine(0.3, 5.7);
        assert_eq!(q.dequantize(q.quantize(0.0)), 0.0);
        let q = QuantParams::affine(-4.0, -1.0);
        assert_eq!(q.dequantize(q.quantize(0.0)), 0.0);
    }

    #[test]
    fn spec_check() {
        assert!(TensorSpec::new([1, 2], DType::F32).check().is_none());
        assert!(TensorSpec::new([1, 0], DType::F32).check().is_some());
        assert!(TensorSpec::new([1, 1, 1, 1, 1], DType::F32).check().is_some());
        assert!(TensorSpec::new([1], DType::I8).check().is_some());
        let q = QuantParams {
            scale: 0.1,
            zero_point: 0,
        };
        assert!(TensorSpec::quantized([3], q).check().is_none());
        let mut f = TensorSpec::new([3], DType::F32);
        f.quant = Some(q);
        assert!(f.check().is_some());
    }
}
