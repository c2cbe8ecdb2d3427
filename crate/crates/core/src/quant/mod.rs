//! Compression passes: FP16 lowering, INT8 post-training quantization,
//! mixed-precision cast insertion and size reporting.
//!
//! Weights are quantized symmetrically per tensor (`[-127, 127]`, zero point
//! 0); activations affinely per tensor (`[-128, 127]`). Tensors covered by
//! the [`PrecisionPolicy`] stay FP32 and `Cast` nodes bridge the boundaries.

mod calibrate;
mod casts;
mod size;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use calibrate::{
    calibrate, calibrate_batches, AbsHistogram, CalibrationEntry, CalibrationMethod, CalibrationTable, RangeObserver,
    TensorKind, HISTOGRAM_BINS,
};
pub use casts::insert_casts;
pub use size::{size_report, size_report_files, SizeReport};

use crate::exec::{f32_to_f16_saturating, ExecError, TensorValue};
use crate::ir::{
    topo_sort, validate, DType, Graph, IrError, Node, NodeId, OpKind, Precision, QuantParams, SCALE_EPSILON,
};

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("non-finite value in tensor {0} during calibration")]
    NonFinite(NodeId),
    #[error("node {0} is not FP32; calibration needs an FP32 graph")]
    NotFp32(NodeId),
    #[error("calibration table has no entry for tensor {0}")]
    MissingEntry(NodeId),
    #[error("scale for tensor {0} underflows")]
    ScaleUnderflow(NodeId),
    #[error("policy: {0}")]
    Policy(String),
    #[error("calibration table JSON: {0}")]
    Json(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Fp16,
    Int8,
}

impl Target {
    pub fn dtype(self) -> DType {
        match self {
            Target::Fp16 => DType::F16,
            Target::Int8 => DType::I8,
        }
    }
}

/// Structural roles that may be pinned to FP32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepRole {
    GraphInputs,
    GraphOutputs,
    /// The global average-pool reduction.
    Mean,
}

/// Which parts of a graph stay FP32. Graph inputs and outputs are always kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecisionPolicy {
    target: Target,
    keep_fp32: BTreeSet<KeepRole>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default)]
    keep_fp32: Vec<KeepRole>,
}

impl PrecisionPolicy {
    pub fn new(target: Target, extra: impl IntoIterator<Item = KeepRole>) -> Self {
        let mut keep_fp32: BTreeSet<KeepRole> = extra.into_iter().collect();
        keep_fp32.insert(KeepRole::GraphInputs);
        keep_fp32.insert(KeepRole::GraphOutputs);
        PrecisionPolicy { target, keep_fp32 }
    }

    /// I/O and the global mean in FP32: four casts on MobileNetV2.
    pub fn default_for(target: Target) -> Self {
        Self::new(target, [KeepRole::Mean])
    }

    /// Only the mandatory I/O roles kept.
    pub fn io_only(target: Target) -> Self {
        Self::new(target, [])
    }

    /// Parses `{"keep_fp32": ["mean", ...]}`; I/O roles are implied.
    pub fn from_json(target: Target, text: &str) -> Result<Self, QuantError> {
        let file: PolicyFile = serde_json::from_str(text).map_err(|e| QuantError::Policy(e.to_string()))?;
        Ok(Self::new(target, file.keep_fp32))
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn keeps(&self, role: KeepRole) -> bool {
        self.keep_fp32.contains(&role)
    }

    pub fn roles(&self) -> impl Iterator<Item = KeepRole> + '_ {
        self.keep_fp32.iter().copied()
    }

    fn keeps_node(&self, node: &Node) -> bool {
        node.kind == OpKind::Mean && self.keeps(KeepRole::Mean)
    }
}

/// Retags non-Const nodes to the target dtype (or FP32 when kept) and gives
/// every Const the dtype of its consumers, splitting a Const whose consumers
/// disagree. Returns the nodes plus, for split copies, the original id.
fn retag(graph: &Graph, policy: &PrecisionPolicy) -> (BTreeMap<NodeId, Node>, BTreeMap<NodeId, NodeId>) {
    let target = policy.target.dtype();
    let mut nodes: BTreeMap<NodeId, Node> = graph.nodes().map(|n| (n.id, n.clone())).collect();
    for node in nodes.values_mut().filter(|n| n.kind != OpKind::Const) {
        node.spec.dtype = if policy.keeps_node(node) { DType::F32 } else { target };
        node.spec.quant = None;
    }

    let mut const_uses: BTreeMap<NodeId, BTreeMap<DType, Vec<(NodeId, usize)>>> = BTreeMap::new();
    for node in nodes.values().filter(|n| n.kind != OpKind::Const) {
        for (slot, &src) in node.inputs.iter().enumerate() {
            if graph.node(src).is_some_and(|n| n.kind == OpKind::Const) {
                const_uses
                    .entry(src)
                    .or_default()
                    .entry(node.spec.dtype)
                    .or_default()
                    .push((node.id, slot));
            }
        }
    }

    let mut origin = BTreeMap::new();
    let mut next_id = graph.max_id() + 1;
    for (cid, by_dtype) in const_uses {
        for (i, (dtype, uses)) in by_dtype.into_iter().enumerate() {
            let id = if i == 0 {
                cid
            } else {
                let id = next_id;
                next_id += 1;
                let mut copy = nodes[&cid].clone();
                copy.id = id;
                nodes.insert(id, copy);
                for (consumer, slot) in uses {
                    nodes.get_mut(&consumer).unwrap().inputs[slot] = id;
                }
                id
            };
            nodes.get_mut(&id).unwrap().spec.dtype = dtype;
            origin.insert(id, cid);
        }
    }
    (nodes, origin)
}

fn f32_payload(node: &Node) -> Result<Vec<f32>, QuantError> {
    let mut spec = node.spec.clone();
    spec.dtype = DType::F32;
    spec.quant = None;
    let value = TensorValue::from_le_bytes(spec, node.payload.as_deref().unwrap_or_default())?;
    Ok(value.as_f32().unwrap().to_vec())
}

fn ensure_fp32_source(graph: &Graph) -> Result<(), QuantError> {
    validate(graph).into_result()?;
    match graph.nodes().find(|n| n.spec.dtype != DType::F32) {
        Some(n) => Err(QuantError::NotFp32(n.id)),
        None => Ok(()),
    }
}

fn rebuild(graph: &Graph, nodes: BTreeMap<NodeId, Node>, precision: Precision) -> Graph {
    let mut metadata = graph.metadata().clone();
    metadata.precision = precision;
    Graph::from_parts(
        metadata,
        graph.inputs().to_vec(),
        nodes.into_values(),
        graph.outputs().to_vec(),
    )
}

/// Re-encodes weights as FP16 (round-to-nearest-even, saturating at
/// ±65504), retags hidden nodes to FP16 and inserts casts.
pub fn lower_fp16(graph: &Graph, policy: &PrecisionPolicy) -> Result<Graph, QuantError> {
    ensure_fp32_source(graph)?;
    let policy = PrecisionPolicy {
        target: Target::Fp16,
        keep_fp32: policy.keep_fp32.clone(),
    };
    let (mut nodes, _) = retag(graph, &policy);
    for node in nodes
        .values_mut()
        .filter(|n| n.kind == OpKind::Const && n.spec.dtype == DType::F16)
    {
        let values = f32_payload(node)?;
        node.payload = Some(
            values
                .into_iter()
                .flat_map(|v| f32_to_f16_saturating(v).to_le_bytes())
                .collect(),
        );
    }
    let retagged = rebuild(graph, nodes, Precision::Fp16);
    let lowered = insert_casts(&retagged, &policy, None)?;
    validate(&lowered).into_result()?;
    Ok(lowered)
}

fn checked(id: NodeId, params: QuantParams) -> Result<QuantParams, QuantError> {
    if !(params.scale.is_finite() && params.scale >= SCALE_EPSILON) || !params.is_valid() {
        return Err(QuantError::ScaleUnderflow(id));
    }
    Ok(params)
}

/// Symmetric per-tensor weight quantization over `[-127, 127]`.
pub fn quantize_weights(values: &[f32], params: QuantParams) -> Vec<i8> {
    values
        .iter()
        .map(|&v| params.quantize_in(v as f64, -127, 127))
        .collect()
}

/// Stores weights as INT8, gives activations their calibrated affine params
/// and bridges kept-FP32 tensors with casts.
pub fn quantize_int8(graph: &Graph, table: &CalibrationTable, policy: &PrecisionPolicy) -> Result<Graph, QuantError> {
    ensure_fp32_source(graph)?;
    let policy = PrecisionPolicy {
        target: Target::Int8,
        keep_fp32: policy.keep_fp32.clone(),
    };
    let (mut nodes, origin) = retag(graph, &policy);

    let entry = |id: NodeId| table.get(id).ok_or(QuantError::MissingEntry(id));
    for node in nodes.values_mut().filter(|n| n.spec.dtype == DType::I8) {
        if node.kind == OpKind::Const {
            let source = origin.get(&node.id).copied().unwrap_or(node.id);
            let params = checked(source, entry(source)?.params)?;
            let params = QuantParams {
                zero_point: 0,
                ..params
            };
            node.payload = Some(
                quantize_weights(&f32_payload(node)?, params)
                    .into_iter()
                    .map(|q| q as u8)
                    .collect(),
            );
            node.spec.quant = Some(params);
        } else {
            node.spec.quant = Some(checked(node.id, entry(node.id)?.params)?);
        }
    }
    // Pad moves data only: keep its input's params so no requantization happens
    for id in topo_sort(graph)? {
        let node = &nodes[&id];
        if node.kind == OpKind::Pad && node.spec.dtype == DType::I8 {
            let src_quant = nodes.get(&node.inputs[0]).and_then(|s| s.spec.quant);
            if let Some(q) = src_quant {
                nodes.get_mut(&id).unwrap().spec.quant = Some(q);
            }
        }
    }

    let retagged = rebuild(graph, nodes, Precision::Int8);
    let quantized = insert_casts(&retagged, &policy, Some(table))?;
    validate(&quantized).into_result()?;
    Ok(quantized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{ExecOptions, Executor, TensorData};
    use crate::ir::{build_mobilenet_v2, op_histogram, MobileNetConfig};
    use rand::{Rng, SeedableRng};

    fn small() -> Graph {
        build_mobilenet_v2(&MobileNetConfig {
            resolution: 32,
            width: 0.35,
            num_outputs: 1,
            seed: 5,
        })
        .unwrap()
    }

    fn random_batch(n: usize, res: usize, seed: u64) -> TensorValue {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * res * res * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        TensorValue::f32([n, res, res, 3], data).unwrap()
    }

    fn casts(g: &Graph) -> usize {
        op_histogram(g).get(&OpKind::Cast).copied().unwrap_or(0)
    }

    #[test]
    fn policy_always_keeps_io() {
        let p = PrecisionPolicy::io_only(Target::Fp16);
        assert!(p.keeps(KeepRole::GraphInputs) && p.keeps(KeepRole::GraphOutputs));
        assert!(!p.keeps(KeepRole::Mean));
        let p = PrecisionPolicy::from_json(Target::Int8, r#"{"keep_fp32": ["mean"]}"#).unwrap();
        assert_eq!(p, PrecisionPolicy::default_for(Target::Int8));
        assert!(PrecisionPolicy::from_json(Target::Int8, r#"{"keep": []}"#).is_err());
    }

    #[test]
    fn fp16_cast_counts() {
        let g = small();
        assert_eq!(
            casts(&lower_fp16(&g, &PrecisionPolicy::default_for(Target::Fp16)).unwrap()),
            4
        );
        assert_eq!(
            casts(&lower_fp16(&g, &PrecisionPolicy::io_only(Target::Fp16)).unwrap()),
            2
        );
    }

    #[test]
    fn fp16_weights_are_half_precision() {
        let g = small();
        let lowered = lower_fp16(&g, &PrecisionPolicy::default_for(Target::Fp16)).unwrap();
        assert_eq!(lowered.precision(), Precision::Fp16);
        for node in lowered.nodes().filter(|n| n.kind == OpKind::Const) {
            assert_eq!(node.spec.dtype, DType::F16);
            let src = g.node(node.id).unwrap();
            assert_eq!(
                node.payload.as_ref().unwrap().len() * 2,
                src.payload.as_ref().unwrap().len()
            );
        }
        let mean = lowered.nodes().find(|n| n.kind == OpKind::Mean).unwrap();
        assert_eq!(mean.spec.dtype, DType::F32);
    }

    #[test]
    fn insert_casts_is_idempotent_and_noop_on_fp32() {
        let g = small();
        let policy = PrecisionPolicy::default_for(Target::Fp16);
        let once = lower_fp16(&g, &policy).unwrap();
        let twice = insert_casts(&once, &policy, None).unwrap();
        assert_eq!(once, twice);
        let same = insert_casts(&g, &policy, None).unwrap();
        assert_eq!(same, g);
        assert_eq!(casts(&same), 0);
    }

    #[test]
    fn int8_pipeline_runs() {
        let g = small();
        let calib: Vec<_> = (0..2).map(|s| random_batch(4, 32, s)).collect();
        let table = calibrate_batches(&g, &calib, CalibrationMethod::MinMax).unwrap();
        let q = quantize_int8(&g, &table, &PrecisionPolicy::default_for(Target::Int8)).unwrap();
        assert_eq!(casts(&q), 4);
        assert_eq!(q.precision(), Precision::Int8);
        for node in q.nodes().filter(|n| n.kind == OpKind::Const) {
            assert_eq!(node.spec.dtype, DType::I8);
            assert_eq!(node.spec.quant.unwrap().zero_point, 0);
        }
        let x = random_batch(3, 32, 9);
        let out = Executor::new(&q)
            .unwrap()
            .run_one(
                &x,
                ExecOptions {
                    check_shapes: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let logits = &out.outputs["logits"];
        assert_eq!(logits.shape(), &[3, 1]);
        assert!(matches!(logits.data, TensorData::F32(_)));

        let io_only = quantize_int8(&g, &table, &PrecisionPolicy::io_only(Target::Int8)).unwrap();
        assert_eq!(casts(&io_only), 2);
        Executor::new(&io_only)
            .unwrap()
            .run_one(
                &x,
                ExecOptions {
                    check_shapes: true,
                    ..Default::default()
                },
            )
            .unwrap();
    }

    #[test]
    fn int8_errors() {
        let g = small();
        let calib = [random_batch(2, 32, 1)];
        let mut table = calibrate_batches(&g, &calib, CalibrationMethod::MinMax).unwrap();
        let policy = PrecisionPolicy::default_for(Target::Int8);

        let weight_id = g.nodes().find(|n| n.kind == OpKind::Const).unwrap().id;
        let mut broken = table.clone();
        broken.entries.get_mut(&weight_id).unwrap().params.scale = 1e-300;
        assert!(matches!(quantize_int8(&g, &broken, &policy), Err(QuantError::ScaleUnderflow(id)) if id == weight_id));

        table.entries.remove(&weight_id);
        assert!(matches!(quantize_int8(&g, &table, &policy), Err(QuantError::MissingEntry(id)) if id == weight_id));

        assert!(matches!(
            calibrate_batches(&g, &[], CalibrationMethod::MinMax),
            Err(QuantError::EmptyCalibration)
        ));
        let bad = TensorValue::f32([1, 32, 32, 3], vec![f32::NAN; 32 * 32 * 3]).unwrap();
        assert!(matches!(
            calibrate_batches(&g, &[bad], CalibrationMethod::MinMax),
            Err(QuantError::NonFinite(0))
        ));
    }

    #[test]
    fn weight_quantization_examples() {
        let params = QuantParams::symmetric(-2.54, 2.54);
        assert_eq!(
            quantize_weights(&[1.0, 0.0, 2.54, -2.54], params),
            vec![50, 0, 127, -127]
        );
    }
}
