//! MobileNetV2 binary-classifier graph builder.
//!
//! Batch norm after regular convolutions is assumed folded into their weights
//! and bias. After each depthwise convolution it stays as an explicit
//! per-channel `Mul` (scale) followed by the bias `AddV2` (shift). Stride-2
//! depthwise convolutions get an explicit `Pad` and run with VALID padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Attrs, DType, Graph, GraphInput, GraphOutput, IrError, Metadata, Node, NodeId, OpKind, Padding, Precision, Role,
    TensorSpec,
};

/// Inverted-residual stages: expansion factor, output channels, repeats, first stride.
const STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

const STEM_CHANNELS: usize = 32;
const HEAD_CHANNELS: usize = 1280;

#[derive(Debug, Clone, PartialEq)]
pub struct MobileNetConfig {
    pub resolution: usize,
    pub width: f64,
    pub num_outputs: usize,
    pub seed: u64,
}

impl Default for MobileNetConfig {
    fn default() -> Self {
        MobileNetConfig {
            resolution: 224,
            width: 1.0,
            num_outputs: 1,
            seed: 0,
        }
    }
}

/// Rounds a channel count to the nearest multiple of `divisor` (at least
/// `divisor`), bumping up when rounding would lose more than 10%.
pub fn make_divisible(value: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut rounded = (((value + d / 2.0) / d).floor() * d).max(d);
    if rounded < 0.9 * value {
        rounded += d;
    }
    rounded as usize
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    next_id: NodeId,
}

impl Builder {
    fn fresh_id(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn constant(&mut self, shape: Vec<usize>, values: Vec<f32>, role: Role) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = self.fresh_id();
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.nodes
            .push(Node::constant(id, TensorSpec::new(shape, DType::F32), payload).with_role(role));
        id
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64, role: Role) -> NodeId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.constant(shape, values, role)
    }

    fn uniform(&mut self, shape: Vec<usize>, lo: f32, hi: f32, role: Role) -> NodeId {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        self.constant(shape, values, role)
    }

    fn op(&mut self, kind: OpKind, inputs: Vec<NodeId>, attrs: Attrs, shape: Vec<usize>, role: Role) -> NodeId {
        let id = self.fresh_id();
        self.nodes
            .push(Node::op(id, kind, inputs, attrs, TensorSpec::new(shape, DType::F32)).with_role(role));
        id
    }

    fn bias_add(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let c = *shape.last().unwrap();
        let bias = self.normal(vec![c], 0.02, Role::Bias);
        self.op(OpKind::AddV2, vec![x, bias], Attrs::None, shape.to_vec(), Role::BiasAdd)
    }

    fn relu6(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.op(OpKind::Relu6, vec![x], Attrs::None, shape.to_vec(), Role::Unknown)
    }

    /// Conv2D + bias; `gain` scales the He-normal init.
    fn conv(
        &mut self,
        x: NodeId,
        shape: &[usize],
        out_c: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> (NodeId, Vec<usize>) {
        let [n, h, w, in_c] = [shape[0], shape[1], shape[2], shape[3]];
        let fan_in = (k * k * in_c) as f64;
        let weights = self.normal(vec![k, k, in_c, out_c], gain * (2.0 / fan_in).sqrt(), Role::Weight);
        let out_shape = vec![n, h.div_ceil(stride), w.div_ceil(stride), out_c];
        let attrs = Attrs::Conv {
            strides: [stride as u32; 2],
            padding: Padding::Same,
        };
        let conv = self.op(
            OpKind::Conv2D,
            vec![x, weights],
            attrs,
            out_shape.clone(),
            Role::Unknown,
        );
        (self.bias_add(conv, &out_shape), out_shape)
    }

    /// [Pad] + depthwise 3x3 + BN scale + shift.
    fn depthwise(&mut self, x: NodeId, shape: &[usize], stride: usize) -> (NodeId, Vec<usize>) {
        let [n, h, w, c] = [shape[0], shape[1], shape[2], shape[3]];
        let (src, padding) = if stride == 2 {
            let pad = |len: usize| {
                let out = len.div_ceil(2);
                let total = ((out - 1) * 2 + 3).saturating_sub(len) as u32;
                [total / 2, total - total / 2]
            };
            let amounts = vec![[0, 0], pad(h), pad(w), [0, 0]];
            let padded = vec![
                n,
                h + (amounts[1][0] + amounts[1][1]) as usize,
                w + (amounts[2][0] + amounts[2][1]) as usize,
                c,
            ];
            let p = self.op(OpKind::Pad, vec![x], Attrs::Pad { amounts }, padded, Role::Unknown);
            (p, Padding::Valid)
        } else {
            (x, Padding::Same)
        };
        let weights = self.normal(vec![3, 3, c], (2.0f64 / 9.0).sqrt(), Role::Weight);
        let out_shape = vec![n, h.div_ceil(stride), w.div_ceil(stride), c];
        let attrs = Attrs::Conv {
            strides: [stride as u32; 2],
            padding,
        };
        let dw = self.op(
            OpKind::DepthwiseConv2dNative,
            vec![src, weights],
            attrs,
            out_shape.clone(),
            Role::Unknown,
        );
        let scale = self.uniform(vec![c], 0.75, 1.25, Role::BnScale);
        let scaled = self.op(
            OpKind::Mul,
            vec![dw, scale],
            Attrs::None,
            out_shape.clone(),
            Role::Unknown,
        );
        (self.bias_add(scaled, &out_shape), out_shape)
    }
}

/// Builds the classifier with deterministic weights drawn from `config.seed`.
/// The graph emits raw logits of shape `[N, num_outputs]`.
pub fn build_mobilenet_v2(config: &MobileNetConfig) -> Result<Graph, IrError> {
    let res = config.resolution;
    if res == 0 || !res.is_multiple_of(32) {
        return Err(IrError::Config(format!(
            "resolution {res} is not a positive multiple of 32"
        )));
    }
    if !(config.width.is_finite() && config.width > 0.0) {
        return Err(IrError::Config(format!(
            "width multiplier {} must be positive",
            config.width
        )));
    }
    if config.num_outputs == 0 {
        return Err(IrError::Config("num_outputs must be at least 1".into()));
    }

    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        nodes: Vec::new(),
        next_id: 1,
    };
    let input_shape = vec![1, res, res, 3];
    let input = GraphInput {
        id: 0,
        name: "input".into(),
        spec: TensorSpec::new(input_shape.clone(), DType::F32),
    };

    let stem_c = make_divisible(STEM_CHANNELS as f64 * config.width, 8);
    let (x, shape) = b.conv(input.id, &input_shape, stem_c, 3, 2, 1.0);
    let mut x = b.relu6(x, &shape);
    let mut shape = shape;

    for (t, c, repeats, first_stride) in STAGES {
        let out_c = make_divisible(c as f64 * config.width, 8);
        for i in 0..repeats {
            let stride = if i == 0 { first_stride } else { 1 };
            let in_c = shape[3];
            let block_in = x;
            let block_shape = shape.clone();

            let (mut h, mut h_shape) = (x, shape.clone());
            if t != 1 {
                let (e, e_shape) = b.conv(h, &h_shape, in_c * t, 1, 1, 1.0);
                h = b.relu6(e, &e_shape);
                h_shape = e_shape;
            }
            let (d, d_shape) = b.depthwise(h, &h_shape, stride);
            h = b.relu6(d, &d_shape);
            // linear bottleneck: smaller init keeps the residual stream bounded
            let (p, p_shape) = b.conv(h, &d_shape, out_c, 1, 1, 0.8);

            if stride == 1 && in_c == out_c {
                x = b.op(
                    OpKind::AddV2,
                    vec![block_in, p],
                    Attrs::None,
                    block_shape,
                    Role::ResidualAdd,
                );
            } else {
                x = p;
            }
            shape = p_shape;
        }
    }

    let head_c = make_divisible(HEAD_CHANNELS as f64 * config.width.max(1.0), 8);
    let (h, h_shape) = b.conv(x, &shape, head_c, 1, 1, 1.0);
    let h = b.relu6(h, &h_shape);
    let pooled_shape = vec![1, head_c];
    let pooled = b.op(
        OpKind::Mean,
        vec![h],
        Attrs::Mean { axes: vec![1, 2] },
        pooled_shape.clone(),
        Role::Unknown,
    );

    let fc = b.normal(
        vec![head_c, config.num_outputs],
        (1.0 / head_c as f64).sqrt(),
        Role::Weight,
    );
    let logits_shape = vec![1, config.num_outputs];
    let mm = b.op(
        OpKind::MatMul,
        vec![pooled, fc],
        Attrs::None,
        logits_shape.clone(),
        Role::Unknown,
    );
    let logits = b.bias_add(mm, &logits_shape);

    let name = format!("mobilenet_v2_{res}_w{}", config.width);
    Ok(Graph::from_parts(
        Metadata {
            name,
            precision: Precision::Original,
        },
        vec![input],
        b.nodes,
        vec![GraphOutput {
            id: logits,
            name: "logits".into(),
        }],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{op_histogram, serialize, validate};

    #[test]
    fn channel_rounding() {
        assert_eq!(make_divisible(32.0, 8), 32);
        assert_eq!(make_divisible(32.0 * 0.35, 8), 16);
        assert_eq!(make_divisible(16.0 * 0.35, 8), 8);
        assert_eq!(make_divisible(3.0, 8), 8);
        assert_eq!(make_divisible(24.0 * 0.75, 8), 24);
    }

    #[test]
    fn rejects_bad_resolution() {
        for res in [0, 100, 225] {
            let cfg = MobileNetConfig {
                resolution: res,
                ..Default::default()
            };
            assert!(matches!(build_mobilenet_v2(&cfg), Err(IrError::Config(_))));
        }
    }

    #[test]
    fn default_graph_histogram() {
        let g = build_mobilenet_v2(&MobileNetConfig::default()).unwrap();
        assert!(validate(&g).ok);
        let h = op_histogram(&g);
        let count = |k| h.get(&k).copied().unwrap_or(0);
        assert_eq!(count(OpKind::Conv2D), 35);
        assert_eq!(count(OpKind::DepthwiseConv2dNative), 17);
        assert_eq!(count(OpKind::MatMul), 1);
        assert_eq!(count(OpKind::Relu6), 35);
        assert_eq!(count(OpKind::Mean), 1);
        assert_eq!(count(OpKind::Mul), 17);
        assert_eq!(count(OpKind::AddV2), 63);
        assert_eq!(count(OpKind::Pad), 4);
        assert_eq!(count(OpKind::Cast), 0);
        assert_eq!(h.values().sum::<usize>(), g.node_count());
    }

    #[test]
    fn add_decomposition_by_role() {
        let g = build_mobilenet_v2(&MobileNetConfig::default()).unwrap();
        let adds: Vec<_> = g.nodes().filter(|n| n.kind == OpKind::AddV2).collect();
        let bias = adds.iter().filter(|n| n.role == Role::BiasAdd).count();
        let residual = adds.iter().filter(|n| n.role == Role::ResidualAdd).count();
        // 35 conv + 17 depthwise + 1 matmul biases
        assert_eq!(bias, 53);
        assert_eq!(residual, 10);
        // the Mul count matches depthwise layers one to one
        for mul in g.nodes().filter(|n| n.kind == OpKind::Mul) {
            let src = g.node(mul.inputs[0]).unwrap();
            assert_eq!(src.kind, OpKind::DepthwiseConv2dNative);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = MobileNetConfig {
            resolution: 64,
            width: 0.5,
            num_outputs: 1,
            seed: 11,
        };
        let a = build_mobilenet_v2(&cfg).unwrap();
        let b = build_mobilenet_v2(&cfg).unwrap();
        let out = a.node(a.outputs()[0].id).unwrap();
        assert_eq!(out.spec.shape, vec![1, 1]);
        assert_eq!(serialize(&a), serialize(&b));
        let c = build_mobilenet_v2(&MobileNetConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(serialize(&a), serialize(&c));
    }
}
