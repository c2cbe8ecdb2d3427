//! Brute-force f64 reference implementations used as test oracles, plus a
//! whole-graph evaluator composed from them.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mce_core::exec::TensorValue;
use mce_core::ir::{topo_sort, Attrs, DType, Graph, NodeId, OpKind, Padding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr { shape, data }
    }

    pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        Arr::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(lo..hi) as f32 as f64).collect(),
        )
    }

    pub fn from_value(v: &TensorValue) -> Self {
        Arr::new(v.shape().to_vec(), v.to_f32_vec().into_iter().map(f64::from).collect())
    }

    pub fn to_value(&self) -> TensorValue {
        TensorValue::f32(self.shape.clone(), self.data.iter().map(|&x| x as f32).collect()).unwrap()
    }

    fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let s = &self.shape;
        self.data[((a * s[1] + b) * s[2] + c) * s[3] + d]
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Output extent and leading pad, following the TF SAME/VALID rules.
pub fn out_and_pad(input: usize, k: usize, s: usize, same: bool) -> (usize, usize) {
    if same {
        let out = input.div_ceil(s);
        let total = ((out - 1) * s + k).saturating_sub(input);
        (out, total / 2)
    } else {
        ((input - k) / s + 1, 0)
    }
}

pub fn conv2d(x: &Arr, w: &Arr, s: [usize; 2], same: bool) -> Arr {
    let [n, h, wd, ci] = x.shape[..] else { panic!() };
    let [kh, kw, _, co] = w.shape[..] else { panic!() };
    let (oh, pt) = out_and_pad(h, kh, s[0], same);
    let (ow, pl) = out_and_pad(wd, kw, s[1], same);
    let mut out = Vec::with_capacity(n * oh * ow * co);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s[0] + ky) as isize - pt as isize;
                            let ix = (ox * s[1] + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.at4(b, iy as usize, ix as usize, c) * w.at4(ky, kx, c, o);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Arr::new(vec![n, oh, ow, co], out)
}

pub fn depthwise(x: &Arr, w: &Arr, s: [usize; 2], same: bool) -> Arr {
    let [n, h, wd, c] = x.shape[..] else { panic!() };
    let [kh, kw, _] = w.shape[..] else { panic!() };
    let (oh, pt) = out_and_pad(h, kh, s[0], same);
    let (ow, pl) = out_and_pad(wd, kw, s[1], same);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s[0] + ky) as isize - pt as isize;
                            let ix = (ox * s[1] + kx) as isize - pl as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                acc += x.at4(b, iy as usize, ix as usize, ch) * w.data[(ky * kw + kx) * c + ch];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Arr::new(vec![n, oh, ow, c], out)
}

pub fn matmul(a: &Arr, b: &Arr) -> Arr {
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.data[i * k + t] * b.data[t * m + j]).sum();
        }
    }
    Arr::new(vec![n, m], out)
}

pub fn relu6(x: &Arr) -> Arr {
    Arr::new(x.shape.clone(), x.data.iter().map(|&v| v.clamp(0.0, 6.0)).collect())
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = i % shape[d];
        i /= shape[d];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &d)| acc * d + i)
}

pub fn pad(x: &Arr, amounts: &[[usize; 2]]) -> Arr {
    let shape: Vec<usize> = x.shape.iter().zip(amounts).map(|(&d, p)| d + p[0] + p[1]).collect();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let idx = unravel(i, &shape);
            let mut src = Vec::with_capacity(idx.len());
            for (d, &v) in idx.iter().enumerate() {
                if v < amounts[d][0] || v >= amounts[d][0] + x.shape[d] {
                    return 0.0;
                }
                src.push(v - amounts[d][0]);
            }
            x.data[ravel(&src, &x.shape)]
        })
        .collect();
    Arr::new(shape, data)
}

/// Mean over `axes`, which are dropped from the result.
pub fn mean(x: &Arr, axes: &[usize]) -> Arr {
    let shape: Vec<usize> = (0..x.shape.len())
        .filter(|d| !axes.contains(d))
        .map(|d| x.shape[d])
        .collect();
    let mut sums = vec![0.0; shape.iter().product()];
    for (i, &v) in x.data.iter().enumerate() {
        let idx = unravel(i, &x.shape);
        let kept: Vec<usize> = (0..idx.len()).filter(|d| !axes.contains(d)).map(|d| idx[d]).collect();
        sums[ravel(&kept, &shape)] += v;
    }
    let count: usize = axes.iter().map(|&a| x.shape[a]).product();
    Arr::new(shape, sums.into_iter().map(|s| s / count as f64).collect())
}

/// Right-aligned broadcasting as in numpy.
pub fn binary(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let rank = a.shape.len().max(b.shape.len());
    let aligned = |s: &[usize]| [vec![1; rank - s.len()], s.to_vec()].concat();
    let (sa, sb) = (aligned(&a.shape), aligned(&b.shape));
    let shape: Vec<usize> = sa.iter().zip(&sb).map(|(&x, &y)| x.max(y)).collect();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let idx = unravel(i, &shape);
            let pick =
                |s: &[usize]| -> Vec<usize> { idx.iter().zip(s).map(|(&v, &d)| if d == 1 { 0 } else { v }).collect() };
            f(a.data[ravel(&pick(&sa), &sa)], b.data[ravel(&pick(&sb), &sb)])
        })
        .collect();
    Arr::new(shape, data)
}

fn const_arr(graph: &Graph, id: NodeId) -> Arr {
    let node = graph.node(id).unwrap();
    assert_eq!(node.spec.dtype, DType::F32, "oracle evaluates FP32 graphs only");
    let bytes = node.payload.as_ref().unwrap();
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Arr::new(node.spec.shape.clone(), data)
}

/// Evaluates an FP32 graph node by node with the functions above.
pub fn eval_graph(graph: &Graph, input: &Arr) -> BTreeMap<String, Arr> {
    let mut values: BTreeMap<NodeId, Arr> = BTreeMap::new();
    values.insert(graph.inputs()[0].id, input.clone());
    for id in topo_sort(graph).unwrap() {
        let node = graph.node(id).unwrap();
        let arg = |i: usize| {
            values
                .get(&node.inputs[i])
                .cloned()
                .unwrap_or_else(|| const_arr(graph, node.inputs[i]))
        };
        let out = match (node.kind, &node.attrs) {
            (OpKind::Const, _) => continue,
            (OpKind::Conv2D, Attrs::Conv { strides, padding }) => {
                conv2d(&arg(0), &arg(1), strides.map(|s| s as usize), *padding == Padding::Same)
            }
            (OpKind::DepthwiseConv2dNative, Attrs::Conv { strides, padding }) => {
                depthwise(&arg(0), &arg(1), strides.map(|s| s as usize), *padding == Padding::Same)
            }
            (OpKind::MatMul, _) => matmul(&arg(0), &arg(1)),
            (OpKind::Relu6, _) => relu6(&arg(0)),
            (OpKind::Pad, Attrs::Pad { amounts }) => pad(
                &arg(0),
                &amounts.iter().map(|p| p.map(|v| v as usize)).collect::<Vec<_>>(),
            ),
            (OpKind::Mean, Attrs::Mean { axes }) => {
                mean(&arg(0), &axes.iter().map(|&a| a as usize).collect::<Vec<_>>())
            }
            (OpKind::AddV2, _) => binary(&arg(0), &arg(1), |x, y| x + y),
            (OpKind::Mul, _) => binary(&arg(0), &arg(1), |x, y| x * y),
            (OpKind::Cast, _) => arg(0),
            (kind, attrs) => panic!("oracle cannot evaluate {kind:?} with {attrs:?}"),
        };
        values.insert(id, out);
    }
    graph
        .outputs()
        .iter()
        .map(|o| (o.name.clone(), values[&o.id].clone()))
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const KERNEL_OPS: [&str; 9] = [
    "conv2d",
    "depthwise",
    "matmul",
    "relu6",
    "pad",
    "mean",
    "add",
    "mul",
    "bias_add",
];

/// Runs kernel `KERNEL_OPS[i % 9]` on a random shape and returns its name
/// and the max absolute difference from the oracle.
pub fn random_kernel_case(i: usize, rng: &mut ChaCha8Rng) -> (&'static str, f64) {
    use mce_core::exec as k;
    let op = KERNEL_OPS[i % KERNEL_OPS.len()];
    let n = rng.random_range(1..=3);
    let h = rng.random_range(1..=9);
    let w = rng.random_range(1..=9);
    let c = rng.random_range(1..=8);
    let x = Arr::random(&[n, h, w, c], rng, -2.0, 2.0);
    let (got, want) = match op {
        "conv2d" | "depthwise" => {
            let kh = rng.random_range(1..=3.min(h));
            let kw = rng.random_range(1..=3.min(w));
            let s = [rng.random_range(1..=2), rng.random_range(1..=2)];
            let same = rng.random_bool(0.5);
            let padding = if same { Padding::Same } else { Padding::Valid };
            if op == "conv2d" {
                let co = rng.random_range(1..=8);
                let wt = Arr::random(&[kh, kw, c, co], rng, -1.0, 1.0);
                (
                    k::conv2d(&x.to_value(), &wt.to_value(), s, padding, None),
                    conv2d(&x, &wt, s, same),
                )
            } else {
                let wt = Arr::random(&[kh, kw, c], rng, -1.0, 1.0);
                (
                    k::depthwise_conv2d(&x.to_value(), &wt.to_value(), s, padding, None),
                    depthwise(&x, &wt, s, same),
                )
            }
        }
        "matmul" => {
            let (rows, inner, cols) = (
                rng.random_range(1..=6),
                rng.random_range(1..=40),
                rng.random_range(1..=6),
            );
            let a = Arr::random(&[rows, inner], rng, -1.0, 1.0);
            let b = Arr::random(&[inner, cols], rng, -1.0, 1.0);
            (k::matmul(&a.to_value(), &b.to_value(), None), matmul(&a, &b))
        }
        "relu6" => {
            let x = Arr::random(&x.shape, rng, -8.0, 8.0);
            (k::relu6(&x.to_value(), None), relu6(&x))
        }
        "pad" => {
            let amounts: Vec<[usize; 2]> = (0..4)
                .map(|_| [rng.random_range(0..=2), rng.random_range(0..=2)])
                .collect();
            (k::pad(&x.to_value(), &amounts, None), pad(&x, &amounts))
        }
        "mean" => (k::global_mean(&x.to_value(), None), mean(&x, &[1, 2])),
        "add" | "mul" => {
            let y = Arr::random(&x.shape, rng, -2.0, 2.0);
            let kind = if op == "add" { OpKind::AddV2 } else { OpKind::Mul };
            let f = if op == "add" {
                |a: f64, b: f64| a + b
            } else {
                |a: f64, b: f64| a * b
            };
            (
                k::elementwise(kind, &x.to_value(), &y.to_value(), None),
                binary(&x, &y, f),
            )
        }
        _ => {
            let bias = Arr::random(&[c], rng, -1.0, 1.0);
            (
                k::elementwise(OpKind::AddV2, &x.to_value(), &bias.to_value(), None),
                binary(&x, &bias, |a, b| a + b),
            )
        }
    };
    let got = Arr::from_value(&got.unwrap_or_else(|e| panic!("{op}: {e}")));
    assert_eq!(got.shape, want.shape, "{op} shape");
    (op, max_abs_diff(&got.data, &want.data))
}
