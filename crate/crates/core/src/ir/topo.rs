use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::{Graph, IrError, NodeId};

/// Orders nodes so each follows all of its inputs. Among ready nodes the
/// smallest id goes first, which makes the order unique for a given graph.
pub fn topo_sort(graph: &Graph) -> Result<Vec<NodeId>, IrError> {
    let mut indegree: HashMap<NodeId, usize> = HashMap::with_capacity(graph.node_count());
    let mut consumers: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for node in graph.nodes() {
        let deps = node.inputs.iter().filter(|&&src| graph.node(src).is_some()).count();
        indegree.insert(node.id, deps);
        for &src in &node.inputs {
            if graph.node(src).is_some() {
                consumers.entry(src).or_default().push(node.id);
            }
        }
    }

    let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(graph.node_count());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for &c in consumers.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(&c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(c));
            }
        }
    }

    if order.len() != graph.node_count() {
        return Err(IrError::Cycle);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::*;

    fn spec() -> TensorSpec {
        TensorSpec::new([1], DType::F32)
    }

    fn graph(nodes: Vec<Node>, input: bool) -> Graph {
        let inputs = if input {
            vec![GraphInput {
                id: 100,
                name: "x".into(),
                spec: spec(),
            }]
        } else {
            vec![]
        };
        Graph::from_parts(
            Metadata {
                name: "t".into(),
                precision: Precision::Fp32,
            },
            inputs,
            nodes,
            vec![],
        )
    }

    fn relu(id: NodeId, src: NodeId) -> Node {
        Node::op(id, OpKind::Relu6, vec![src], Attrs::None, spec())
    }

    fn add(id: NodeId, a: NodeId, b: NodeId) -> Node {
        Node::op(id, OpKind::AddV2, vec![a, b], Attrs::None, spec())
    }

    #[test]
    fn chain() {
        // ids deliberately out of order relative to the chain
        let g = graph(vec![relu(5, 100), relu(2, 5), relu(9, 2)], true);
        assert_eq!(topo_sort(&g).unwrap(), vec![5, 2, 9]);
    }

    #[test]
    fn diamond_prefers_small_ids() {
        // a=1 -> {b=2, c=3} -> d=4
        let g = graph(vec![relu(1, 100), relu(3, 1), relu(2, 1), add(4, 2, 3)], true);
        assert_eq!(topo_sort(&g).unwrap(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn diamond_order_is_the_smallest_valid_order() {
        // enumerate every permutation and keep the ones respecting edges
        let g = graph(vec![relu(1, 100), relu(3, 1), relu(2, 1), add(4, 2, 3)], true);
        let ids = [1u32, 2, 3, 4];
        let mut valid = Vec::new();
        for a in ids {
            for b in ids {
                for c in ids {
                    for d in ids {
                        let p = [a, b, c, d];
                        let mut s = p.to_vec();
                        s.sort();
                        s.dedup();
                        if s.len() != 4 {
                            continue;
                        }
                        let pos = |x: u32| p.iter().position(|&y| y == x).unwrap();
                        let ok = g.nodes().all(|n| {
                            n.inputs
                                .iter()
                                .filter(|&&i| g.node(i).is_some())
                                .all(|&i| pos(i) < pos(n.id))
                        });
                        if ok {
                            valid.push(p.to_vec());
                        }
                    }
                }
            }
        }
        assert_eq!(valid.len(), 2);
        valid.sort();
        assert_eq!(topo_sort(&g).unwrap(), valid[0]);
    }

    #[test]
    fn cycle_is_an_error() {
        let g = graph(vec![relu(0, 1), relu(1, 0)], false);
        assert_eq!(topo_sort(&g), Err(IrError::Cycle));
    }
}
