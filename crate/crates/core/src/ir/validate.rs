use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::Serialize;

use super::{Attrs, Graph, NodeId, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Cycle,
    Arity,
    DanglingEdge,
    ConstPayload,
    Attrs,
    Spec,
    DuplicateId,
    Unreachable,
    MissingOutput,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Cycle => "cycle",
            Rule::Arity => "arity",
            Rule::DanglingEdge => "dangling_edge",
            Rule::ConstPayload => "const_payload",
            Rule::Attrs => "attrs",
            Rule::Spec => "spec",
            Rule::DuplicateId => "duplicate_id",
            Rule::Unreachable => "unreachable",
            Rule::MissingOutput => "missing_output",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "node {id}: {}: {}", self.rule, self.detail),
            None => write!(f, "graph: {}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    pub fn into_result(self) -> Result<(), super::IrError> {
        if self.ok {
            Ok(())
        } else {
            let msg = self
                .violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            Err(super::IrError::Invalid(msg))
        }
    }
}

fn attrs_fit(kind: OpKind, attrs: &Attrs) -> bool {
    matches!(
        (kind, attrs),
        (OpKind::Conv2D | OpKind::DepthwiseConv2dNative, Attrs::Conv { .. })
            | (OpKind::Pad, Attrs::Pad { .. })
            | (OpKind::Mean, Attrs::Mean { .. })
            | (OpKind::Cast, Attrs::Cast { .. })
            | (
                OpKind::MatMul | OpKind::Relu6 | OpKind::Mul | OpKind::AddV2 | OpKind::Const,
                Attrs::None
            )
    )
}

/// Checks every structural invariant. Violations are collected, never raised.
pub fn validate(graph: &Graph) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |node: Option<NodeId>, rule: Rule, detail: String| {
        violations.push(Violation { node, rule, detail });
    };

    let mut input_ids = BTreeSet::new();
    for input in graph.inputs() {
        if !input_ids.insert(input.id) || graph.node(input.id).is_some() {
            push(
                Some(input.id),
                Rule::DuplicateId,
                format!("graph input {:?} reuses an id", input.name),
            );
        }
        if let Some(msg) = input.spec.check() {
            push(Some(input.id), Rule::Spec, msg);
        }
    }
    let exists = |id: NodeId| graph.node(id).is_some() || input_ids.contains(&id);

    for node in graph.nodes() {
        let arity = node.kind.arity();
        if node.inputs.len() != arity {
            push(
                Some(node.id),
                Rule::Arity,
                format!("{} expects {arity} inputs, has {}", node.kind, node.inputs.len()),
            );
        }
        for &src in &node.inputs {
            if !exists(src) {
                push(Some(node.id), Rule::DanglingEdge, format!("input {src} does not exist"));
            }
        }
        match (node.kind, &node.payload) {
            (OpKind::Const, None) => push(Some(node.id), Rule::ConstPayload, "Const without payload".into()),
            (OpKind::Const, Some(bytes)) if bytes.len() != node.spec.byte_len() => push(
                Some(node.id),
                Rule::ConstPayload,
                format!("payload has {} bytes, spec needs {}", bytes.len(), node.spec.byte_len()),
            ),
            (OpKind::Const, Some(_)) => {}
            (kind, Some(_)) => push(Some(node.id), Rule::ConstPayload, format!("{kind} carries a payload")),
            (_, None) => {}
        }
        if !attrs_fit(node.kind, &node.attrs) {
            push(
                Some(node.id),
                Rule::Attrs,
                format!("{:?} does not fit {}", node.attrs, node.kind),
            );
        }
        if let Some(msg) = node.spec.check() {
            push(Some(node.id), Rule::Spec, msg);
        }
    }

    // Kahn's algorithm over node-to-node edges; leftovers sit on or behind a cycle.
    let mut indegree: HashMap<NodeId, usize> = graph.nodes().map(|n| (n.id, 0)).collect();
    let mut consumers: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for node in graph.nodes() {
        for &src in &node.inputs {
            if graph.node(src).is_some() {
                *indegree.get_mut(&node.id).unwrap() += 1;
            }
            consumers.entry(src).or_default().push(node.id);
        }
    }
    let mut queue: VecDeque<NodeId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut remaining = indegree.clone();
    while let Some(id) = queue.pop_front() {
        remaining.remove(&id);
        for &c in consumers.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(&c).unwrap();
            *d -= 1;
            if *d == 0 {
                queue.push_back(c);
            }
        }
    }
    let mut cyclic: Vec<NodeId> = remaining.into_keys().collect();
    cyclic.sort_unstable();
    for id in cyclic {
        push(Some(id), Rule::Cycle, "node lies on or behind a cycle".into());
    }

    // Forward reachability from graph inputs.
    let mut reached: BTreeSet<NodeId> = input_ids.clone();
    let mut frontier: Vec<NodeId> = input_ids.iter().copied().collect();
    while let Some(id) = frontier.pop() {
        for &c in consumers.get(&id).into_iter().flatten() {
            if reached.insert(c) {
                frontier.push(c);
            }
        }
    }
    for node in graph.nodes() {
        if node.kind != OpKind::Const && !reached.contains(&node.id) {
            push(
                Some(node.id),
                Rule::Unreachable,
                "not reachable from graph inputs".into(),
            );
        }
    }

    for output in graph.outputs() {
        if !exists(output.id) {
            push(
                Some(output.id),
                Rule::MissingOutput,
                format!("output {:?} names no value", output.name),
            );
        }
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}
