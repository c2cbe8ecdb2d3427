//! Reference executor.
//!
//! Runs a validated [`Graph`] node by node in topological order. An
//! [`Executor`] owns its scratch state and is not meant to be shared between
//! threads; create one executor per thread over the same immutable graph.
//! Per-node timings, when enabled, are wall-clock measurements taken on the
//! calling thread, so benchmarks should drive a single executor from a
//! single thread.

mod dataset;
mod kernels;
mod tensor;
mod tensor_file;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

pub use dataset::{Batch, Dataset, Sample};
pub use kernels::{
    cast, conv2d, conv_geometry, depthwise_conv2d, elementwise, global_mean, matmul, pad, relu6, ConvGeometry,
};
pub use tensor::{f32_to_f16_saturating, TensorData, TensorValue, F16_MAX};
pub use tensor_file::{read_tensor, read_tensor_bytes, tensor_to_bytes, write_tensor, TENSOR_MAGIC};

use crate::ir::{topo_sort, validate, Attrs, Graph, IrError, Node, NodeId, OpKind};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("zero-sized output: {0}")]
    ZeroSizedOutput(String),
    #[error("broadcast mismatch: {0}")]
    Broadcast(String),
    #[error("dtype mismatch: {0}")]
    DType(String),
    #[error("INT8 tensor requires quant params")]
    MissingQuantParams,
    #[error("missing graph input {0:?}")]
    MissingInput(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("node {node} ({kind}): {source}")]
    AtNode {
        node: NodeId,
        kind: OpKind,
        #[source]
        source: Box<ExecError>,
    },
    #[error(transparent)]
    Graph(#[from] IrError),
    #[error("tensor file: {0}")]
    Format(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("dataset: {0}")]
    Dataset(String),
}

impl ExecError {
    /// Node id the failure was reported at, if any.
    pub fn node(&self) -> Option<NodeId> {
        match self {
            ExecError::AtNode { node, .. } => Some(*node),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Compare each produced tensor with the node's declared spec.
    pub check_shapes: bool,
    pub record_per_node_timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeTiming {
    pub node: NodeId,
    pub kind: OpKind,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outputs: BTreeMap<String, TensorValue>,
    /// Empty unless per-node timing was requested.
    pub timings: Vec<NodeTiming>,
}

pub struct Executor<'g> {
    graph: &'g Graph,
    /// Non-Const nodes in execution order.
    order: Vec<NodeId>,
    consts: HashMap<NodeId, TensorValue>,
    /// Position in `order` after which a value is no longer needed.
    last_use: HashMap<NodeId, usize>,
    values: HashMap<NodeId, TensorValue>,
}

fn pad_amounts(amounts: &[[u32; 2]]) -> Vec<[usize; 2]> {
    amounts.iter().map(|[b, a]| [*b as usize, *a as usize]).collect()
}

fn strides(s: [u32; 2]) -> [usize; 2] {
    [s[0] as usize, s[1] as usize]
}

impl<'g> Executor<'g> {
    /// Validates the graph, fixes the execution order and decodes weights once.
    pub fn new(graph: &'g Graph) -> Result<Self, ExecError> {
        validate(graph).into_result()?;
        let order: Vec<NodeId> = topo_sort(graph)?
            .into_iter()
            .filter(|&id| graph.node(id).unwrap().kind != OpKind::Const)
            .collect();
        let mut consts = HashMap::new();
        for node in graph.nodes().filter(|n| n.kind == OpKind::Const) {
            let payload = node.payload.as_deref().unwrap_or_default();
            let value = TensorValue::from_le_bytes(node.spec.clone(), payload).map_err(|e| ExecError::AtNode {
                node: node.id,
                kind: node.kind,
                source: Box::new(e),
            })?;
            consts.insert(node.id, value);
        }
        let mut last_use = HashMap::new();
        for (pos, &id) in order.iter().enumerate() {
            for &src in &graph.node(id).unwrap().inputs {
                last_use.insert(src, pos);
            }
        }
        // graph outputs must survive to the end
        for out in graph.outputs() {
            last_use.insert(out.id, usize::MAX);
        }
        Ok(Executor {
            graph,
            order,
            consts,
            last_use,
            values: HashMap::new(),
        })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Runs a graph with exactly one input.
    pub fn run_one(&mut self, input: &TensorValue, opts: ExecOptions) -> Result<RunOutput, ExecError> {
        let [gi] = self.graph.inputs() else {
            return Err(ExecError::Unsupported(format!(
                "graph has {} inputs",
                self.graph.inputs().len()
            )));
        };
        let mut inputs = BTreeMap::new();
        inputs.insert(gi.name.clone(), input.clone());
        self.run(&inputs, opts)
    }

    pub fn run(&mut self, inputs: &BTreeMap<String, TensorValue>, opts: ExecOptions) -> Result<RunOutput, ExecError> {
        self.run_observed(inputs, opts, &mut |_, _| Ok(()))
    }

    /// Like [`Executor::run`], but hands every graph input and every node
    /// output to `observe` as soon as it exists.
    pub fn run_observed(
        &mut self,
        inputs: &BTreeMap<String, TensorValue>,
        opts: ExecOptions,
        observe: &mut dyn FnMut(NodeId, &TensorValue) -> Result<(), ExecError>,
    ) -> Result<RunOutput, ExecError> {
        let graph = self.graph;
        let mut bound: HashMap<NodeId, &TensorValue> = HashMap::new();
        for gi in graph.inputs() {
            let value = inputs
                .get(&gi.name)
                .ok_or_else(|| ExecError::MissingInput(gi.name.clone()))?;
            let ok = value.dtype() == gi.spec.dtype
                && value.shape().len() == gi.spec.shape.len()
                && value.shape().get(1..) == gi.spec.shape.get(1..);
            if !ok {
                return Err(ExecError::Shape(format!(
                    "input {:?}: expected [N, {:?}] {}, got {:?} {}",
                    gi.name,
                    gi.spec.shape.get(1..).unwrap_or_default(),
                    gi.spec.dtype,
                    value.shape(),
                    value.dtype()
                )));
            }
            observe(gi.id, value)?;
            bound.insert(gi.id, value);
        }

        self.values.clear();
        let mut timings = Vec::new();
        for pos in 0..self.order.len() {
            let node = graph.node(self.order[pos]).unwrap();
            let start = opts.record_per_node_timing.then(Instant::now);
            let result = self.eval_node(node, &bound).and_then(|out| {
                if opts.check_shapes {
                    check_against_spec(node, &out)?;
                }
                Ok(out)
            });
            let out = result.map_err(|e| ExecError::AtNode {
                node: node.id,
                kind: node.kind,
                source: Box::new(e),
            })?;
            if let Some(start) = start {
                timings.push(NodeTiming {
                    node: node.id,
                    kind: node.kind,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            observe(node.id, &out)?;
            self.values.insert(node.id, out);
            for &src in &node.inputs {
                if self.last_use.get(&src) == Some(&pos) {
                    self.values.remove(&src);
                }
            }
        }

        let mut outputs = BTreeMap::new();
        for out in graph.outputs() {
            let value = match self.values.get(&out.id) {
                Some(v) => v.clone(),
                None => self.lookup(out.id, &bound)?.clone(),
            };
            outputs.insert(out.name.clone(), value);
        }
        self.values.clear();
        Ok(RunOutput { outputs, timings })
    }

    fn lookup<'a>(
        &'a self,
        id: NodeId,
        bound: &HashMap<NodeId, &'a TensorValue>,
    ) -> Result<&'a TensorValue, ExecError> {
        self.values
            .get(&id)
            .or_else(|| self.consts.get(&id))
            .or_else(|| bound.get(&id).copied())
            .ok_or_else(|| ExecError::Shape(format!("value {id} is not available")))
    }

    fn eval_node(&self, node: &Node, bound: &HashMap<NodeId, &TensorValue>) -> Result<TensorValue, ExecError> {
        let args = node
            .inputs
            .iter()
            .map(|&id| self.lookup(id, bound))
            .collect::<Result<Vec<_>, _>>()?;
        if node.kind != OpKind::Cast {
            if let Some(bad) = args.iter().find(|a| a.dtype() != node.spec.dtype) {
                return Err(ExecError::DType(format!(
                    "{} node fed a {} tensor",
                    node.spec.dtype,
                    bad.dtype()
                )));
            }
        }
        let q = node.spec.quant;
        match (node.kind, &node.attrs) {
            (OpKind::Conv2D, Attrs::Conv { strides: s, padding }) => conv2d(args[0], args[1], strides(*s), *padding, q),
            (OpKind::DepthwiseConv2dNative, Attrs::Conv { strides: s, padding }) => {
                depthwise_conv2d(args[0], args[1], strides(*s), *padding, q)
            }
            (OpKind::MatMul, _) => matmul(args[0], args[1], q),
            (OpKind::Relu6, _) => relu6(args[0], q),
            (OpKind::Mean, Attrs::Mean { axes }) => {
                if axes != &[1, 2] {
                    return Err(ExecError::Unsupported(format!("Mean over axes {axes:?}")));
                }
                global_mean(args[0], q)
            }
            (OpKind::Mul | OpKind::AddV2, _) => elementwise(node.kind, args[0], args[1], q),
            (OpKind::Pad, Attrs::Pad { amounts }) => pad(args[0], &pad_amounts(amounts), q),
            (OpKind::Cast, Attrs::Cast { to }) => cast(args[0], *to, q),
            (kind, attrs) => Err(ExecError::Unsupported(format!("{kind} with {attrs:?}"))),
        }
    }
}

fn check_against_spec(node: &Node, out: &TensorValue) -> Result<(), ExecError> {
    let declared = &node.spec;
    let same_rank = declared.shape.len() == out.shape().len();
    if !same_rank || declared.shape.get(1..) != out.shape().get(1..) || declared.dtype != out.dtype() {
        return Err(ExecError::Shape(format!(
            "declared {:?} {}, produced {:?} {}",
            declared.shape,
            declared.dtype,
            out.shape(),
            out.dtype()
        )));
    }
    Ok(())
}

/// One-shot convenience over [`Executor`].
pub fn run(graph: &Graph, inputs: &BTreeMap<String, TensorValue>, opts: ExecOptions) -> Result<RunOutput, ExecError> {
    Executor::new(graph)?.run(inputs, opts)
}
