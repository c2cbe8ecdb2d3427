use std::collections::{BTreeMap, HashMap};

use super::{CalibrationTable, KeepRole, PrecisionPolicy, QuantError};
use crate::ir::{Attrs, DType, Graph, GraphOutput, Node, NodeId, OpKind, Role, TensorSpec};

/// Key identifying a cast so each (source, target) pair is emitted once.
type CastKey = (NodeId, DType);

struct Inserter<'a> {
    graph: &'a Graph,
    table: Option<&'a CalibrationTable>,
    next_id: NodeId,
    created: HashMap<CastKey, NodeId>,
    new_nodes: Vec<Node>,
}

impl Inserter<'_> {
    /// Returns a value carrying `src` converted to `target`, reusing an
    /// existing cast or bypassing one that would undo a previous cast.
    fn convert(&mut self, src: NodeId, src_spec: &TensorSpec, target: &TensorSpec) -> Result<NodeId, QuantError> {
        if let Some(node) = self.graph.node(src).filter(|n| n.kind == OpKind::Cast) {
            let origin = node.inputs[0];
            if self
                .graph
                .value_spec(origin)
                .is_some_and(|s| s.dtype == target.dtype && s.quant == target.quant)
            {
                return Ok(origin);
            }
        }
        let key = (src, target.dtype);
        if let Some(&id) = self.created.get(&key) {
            return Ok(id);
        }
        let quant = if target.dtype == DType::I8 {
            let entry = self
                .table
                .and_then(|t| t.get(src))
                .ok_or(QuantError::MissingEntry(src))?;
            Some(entry.params)
        } else {
            None
        };
        let id = self.next_id;
        self.next_id += 1;
        let spec = TensorSpec {
            shape: src_spec.shape.clone(),
            dtype: target.dtype,
            quant,
        };
        self.new_nodes.push(Node::op(
            id,
            OpKind::Cast,
            vec![src],
            Attrs::Cast { to: target.dtype },
            spec,
        ));
        self.created.insert(key, id);
        Ok(id)
    }
}

/// Inserts a `Cast` on every edge whose producer and consumer disagree on
/// dtype, and before every graph output that is not FP32. Const operands are
/// expected to already be stored in their consumer's dtype. INT8 cast targets
/// take their params from `table` (keyed by the source tensor).
///
/// Applying it to its own output changes nothing.
pub fn insert_casts(
    graph: &Graph,
    policy: &PrecisionPolicy,
    table: Option<&CalibrationTable>,
) -> Result<Graph, QuantError> {
    let mut ins = Inserter {
        graph,
        table,
        next_id: graph.max_id() + 1,
        created: HashMap::new(),
        new_nodes: Vec::new(),
    };
    let mut rewired: BTreeMap<NodeId, Node> = BTreeMap::new();

    for node in graph.nodes() {
        let mut node = node.clone();
        if node.kind != OpKind::Cast && node.kind != OpKind::Const {
            for slot in 0..node.inputs.len() {
                let src = node.inputs[slot];
                let Some(src_spec) = graph.value_spec(src) else {
                    continue;
                };
                let is_const = graph.node(src).is_some_and(|n| n.kind == OpKind::Const);
                if is_const || src_spec.dtype == node.spec.dtype {
                    continue;
                }
                let target = node.spec.clone();
                node.inputs[slot] = ins.convert(src, &src_spec.clone(), &target)?;
            }
        }
        rewired.insert(node.id, node);
    }

    let mut new_outputs = Vec::with_capacity(graph.outputs().len());
    for out in graph.outputs().iter().cloned() {
        let spec = graph.value_spec(out.id).cloned();
        match spec {
            Some(spec) if spec.dtype != DType::F32 && policy.keeps(KeepRole::GraphOutputs) => {
                let target = TensorSpec::new(spec.shape.clone(), DType::F32);
                let id = ins.convert(out.id, &spec, &target)?;
                new_outputs.push(GraphOutput { id, name: out.name });
            }
            _ => new_outputs.push(out),
        }
    }

    let nodes = rewired
        .into_values()
        .chain(ins.new_nodes.into_iter().map(|n| n.with_role(Role::Unknown)));
    Ok(Graph::from_parts(
        graph.metadata().clone(),
        graph.inputs().to_vec(),
        nodes,
        new_outputs,
    ))
}
