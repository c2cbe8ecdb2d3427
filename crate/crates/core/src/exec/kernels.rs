//! Kernels for every op kind.
//!
//! FP32 accumulates in FP32. FP16 tensors are widened to FP32, computed, and
//! rounded back to FP16 once per output. INT8 convolutions and matmuls
//! accumulate `(q - zero_point)` products in INT32 and requantize with the
//! multiplier `scale_in * scale_w / scale_out` in f64; every other INT8 op
//! dequantizes, computes in f64 and requantizes. Reductions always run in
//! ascending index order so results are bit-reproducible.

use std::ops::{AddAssign, Mul};

use half::f16;

use super::tensor::{f32_to_f16_saturating, TensorData, TensorValue};
use super::ExecError;
use crate::ir::{DType, OpKind, Padding, QuantParams, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_dim(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize), ExecError> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < k {
                return Err(ExecError::ZeroSizedOutput(format!(
                    "input extent {input} smaller than kernel {k}"
                )));
            }
            Ok(((input - k) / stride + 1, 0))
        }
    }
}

/// Output extent and leading pad for SAME/VALID padding. SAME splits
/// `max((out - 1) * stride + k - in, 0)` with the smaller half first.
pub fn conv_geometry(
    in_hw: [usize; 2],
    k_hw: [usize; 2],
    strides: [usize; 2],
    padding: Padding,
) -> Result<ConvGeometry, ExecError> {
    if strides.contains(&0) {
        return Err(ExecError::Shape("strides must be at least 1".into()));
    }
    let (out_h, pad_top) = out_dim(in_hw[0], k_hw[0], strides[0], padding)?;
    let (out_w, pad_left) = out_dim(in_hw[1], k_hw[1], strides[1], padding)?;
    if out_h == 0 || out_w == 0 {
        return Err(ExecError::ZeroSizedOutput(format!("{out_h}x{out_w}")));
    }
    Ok(ConvGeometry {
        out_h,
        out_w,
        pad_top,
        pad_left,
    })
}

trait Accum: Copy + Default + AddAssign + Mul<Output = Self> {}
impl Accum for f32 {}
impl Accum for i32 {}

struct ConvDims {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    strides: [usize; 2],
    geom: ConvGeometry,
}

impl ConvDims {
    /// Input row/col for an output position and kernel offset, `None` inside padding.
    #[inline]
    fn src(&self, out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (out * stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

fn conv_loop<T: Accum>(x: &[T], wt: &[T], d: &ConvDims) -> Vec<T> {
    let ConvGeometry {
        out_h,
        out_w,
        pad_top,
        pad_left,
    } = d.geom;
    let mut out = vec![T::default(); d.n * out_h * out_w * d.c_out];
    for b in 0..d.n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let base = ((b * out_h + oy) * out_w + ox) * d.c_out;
                let acc = &mut out[base..base + d.c_out];
                for ky in 0..d.kh {
                    let Some(iy) = d.src(oy, ky, d.strides[0], pad_top, d.h) else {
                        continue;
                    };
                    for kx in 0..d.kw {
                        let Some(ix) = d.src(ox, kx, d.strides[1], pad_left, d.w) else {
                            continue;
                        };
                        let px = ((b * d.h + iy) * d.w + ix) * d.c_in;
                        for ci in 0..d.c_in {
                            let xv = x[px + ci];
                            let row = ((ky * d.kw + kx) * d.c_in + ci) * d.c_out;
                            for (a, &wv) in acc.iter_mut().zip(&wt[row..row + d.c_out]) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_loop<T: Accum>(x: &[T], wt: &[T], d: &ConvDims) -> Vec<T> {
    let ConvGeometry {
        out_h,
        out_w,
        pad_top,
        pad_left,
    } = d.geom;
    let c = d.c_in;
    let mut out = vec![T::default(); d.n * out_h * out_w * c];
    for b in 0..d.n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let base = ((b * out_h + oy) * out_w + ox) * c;
                let acc = &mut out[base..base + c];
                for ky in 0..d.kh {
                    let Some(iy) = d.src(oy, ky, d.strides[0], pad_top, d.h) else {
                        continue;
                    };
                    for kx in 0..d.kw {
                        let Some(ix) = d.src(ox, kx, d.strides[1], pad_left, d.w) else {
                            continue;
                        };
                        let px = ((b * d.h + iy) * d.w + ix) * c;
                        let row = (ky * d.kw + kx) * c;
                        for ((a, &xv), &wv) in acc.iter_mut().zip(&x[px..px + c]).zip(&wt[row..row + c]) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn matmul_loop<T: Accum>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::default(); n * m];
    for r in 0..n {
        let acc = &mut out[r * m..(r + 1) * m];
        for i in 0..k {
            let av = a[r * k + i];
            for (o, &bv) in acc.iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn rank(t: &TensorValue, expected: usize, what: &str) -> Result<(), ExecError> {
    if t.shape().len() != expected {
        return Err(ExecError::Shape(format!(
            "{what} must be rank {expected}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn same_dtype(a: &TensorValue, b: &TensorValue) -> Result<DType, ExecError> {
    if a.dtype() != b.dtype() {
        return Err(ExecError::DType(format!(
            "operands are {} and {}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(a.dtype())
}

/// Widened float view of an FP32/FP16 tensor.
fn float_view(t: &TensorValue) -> std::borrow::Cow<'_, [f32]> {
    match &t.data {
        TensorData::F32(v) => std::borrow::Cow::Borrowed(v.as_slice()),
        _ => std::borrow::Cow::Owned(t.to_f32_vec()),
    }
}

/// Packs an FP32 result into the requested float dtype.
fn float_result(shape: Vec<usize>, dtype: DType, values: Vec<f32>) -> Result<TensorValue, ExecError> {
    match dtype {
        DType::F32 => TensorValue::f32(shape, values),
        DType::F16 => TensorValue::f16(shape, values.into_iter().map(f32_to_f16_saturating).collect()),
        other => Err(ExecError::DType(format!("{other} is not a float type"))),
    }
}

fn centered(t: &TensorValue) -> Result<(Vec<i32>, QuantParams), ExecError> {
    let q = t.spec.quant.ok_or(ExecError::MissingQuantParams)?;
    match &t.data {
        TensorData::I8(v) => Ok((v.iter().map(|&x| x as i32 - q.zero_point).collect(), q)),
        _ => Err(ExecError::DType(format!("expected INT8, got {}", t.dtype()))),
    }
}

fn requantize(acc: &[i32], multiplier: f64, out: QuantParams) -> Vec<i8> {
    acc.iter()
        .map(|&a| {
            let q = (a as f64 * multiplier).round_ties_even() + out.zero_point as f64;
            q.clamp(QuantParams::QMIN as f64, QuantParams::QMAX as f64) as i8
        })
        .collect()
}

fn quantize_all(values: impl Iterator<Item = f64>, q: QuantParams) -> Vec<i8> {
    values.map(|v| q.quantize(v)).collect()
}

fn dequantized(t: &TensorValue) -> Vec<f64> {
    match &t.data {
        TensorData::I8(v) => {
            let q = t.spec.quant.expect("INT8 tensor has quant params");
            v.iter().map(|&x| q.dequantize(x)).collect()
        }
        TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        TensorData::F16(v) => v.iter().map(|x| x.to_f64()).collect(),
        TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
    }
}

/// Standard NHWC x HWIO cross-correlation.
pub fn conv2d(
    input: &TensorValue,
    weights: &TensorValue,
    strides: [usize; 2],
    padding: Padding,
    out_quant: Option<QuantParams>,
) -> Result<TensorValue, ExecError> {
    rank(input, 4, "conv2d input")?;
    rank(weights, 4, "conv2d weights")?;
    let [n, h, w, c_in] = input.shape().try_into().unwrap();
    let [kh, kw, wc_in, c_out] = weights.shape().try_into().unwrap();
    if c_in != wc_in {
        return Err(ExecError::ChannelMismatch(format!(
            "input has {c_in} channels, weights expect {wc_in}"
        )));
    }
    let geom = conv_geometry([h, w], [kh, kw], strides, padding)?;
    let dims = ConvDims {
        n,
        h,
        w,
        c_in,
        kh,
        kw,
        c_out,
        strides,
        geom,
    };
    let shape = vec![n, geom.out_h, geom.out_w, c_out];
    match same_dtype(input, weights)? {
        DType::I8 => {
            let out = out_quant.ok_or(ExecError::MissingQuantParams)?;
            let (x, qx) = centered(input)?;
            let (wt, qw) = centered(weights)?;
            let acc = conv_loop(&x, &wt, &dims);
            TensorValue::i8(shape, requantize(&acc, qx.scale * qw.scale / out.scale, out), out)
        }
        DType::I32 => Err(ExecError::DType("INT32 convolution is not supported".into())),
        float => float_result(shape, float, conv_loop(&float_view(input), &float_view(weights), &dims)),
    }
}

/// Per-channel spatial convolution; weights are `[kh, kw, C]`.
pub fn depthwise_conv2d(
    input: &TensorValue,
    weights: &TensorValue,
    strides: [usize; 2],
    padding: Padding,
    out_quant: Option<QuantParams>,
) -> Result<TensorValue, ExecError> {
    rank(input, 4, "depthwise input")?;
    rank(weights, 3, "depthwise weights")?;
    let [n, h, w, c] = input.shape().try_into().unwrap();
    let [kh, kw, wc] = weights.shape().try_into().unwrap();
    if c != wc {
        return Err(ExecError::ChannelMismatch(format!(
            "input has {c} channels, depthwise kernel has {wc}"
        )));
    }
    let geom = conv_geometry([h, w], [kh, kw], strides, padding)?;
    let dims = ConvDims {
        n,
        h,
        w,
        c_in: c,
        kh,
        kw,
        c_out: c,
        strides,
        geom,
    };
    let shape = vec![n, geom.out_h, geom.out_w, c];
    match same_dtype(input, weights)? {
        DType::I8 => {
            let out = out_quant.ok_or(ExecError::MissingQuantParams)?;
            let (x, qx) = centered(input)?;
            let (wt, qw) = centered(weights)?;
            let acc = depthwise_loop(&x, &wt, &dims);
            TensorValue::i8(shape, requantize(&acc, qx.scale * qw.scale / out.scale, out), out)
        }
        DType::I32 => Err(ExecError::DType("INT32 convolution is not supported".into())),
        float => float_result(
            shape,
            float,
            depthwise_loop(&float_view(input), &float_view(weights), &dims),
        ),
    }
}

/// `[N, K] x [K, M] -> [N, M]`, summing over K in ascending order.
pub fn matmul(a: &TensorValue, b: &TensorValue, out_quant: Option<QuantParams>) -> Result<TensorValue, ExecError> {
    rank(a, 2, "matmul lhs")?;
    rank(b, 2, "matmul rhs")?;
    let [n, k] = a.shape().try_into().unwrap();
    let [kb, m] = b.shape().try_into().unwrap();
    if k != kb {
        return Err(ExecError::Shape(format!(
            "inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    match same_dtype(a, b)? {
        DType::I8 => {
            let out = out_quant.ok_or(ExecError::MissingQuantParams)?;
            let (x, qa) = centered(a)?;
            let (y, qb) = centered(b)?;
            let acc = matmul_loop(&x, &y, n, k, m);
            TensorValue::i8(vec![n, m], requantize(&acc, qa.scale * qb.scale / out.scale, out), out)
        }
        DType::I32 => Err(ExecError::DType("INT32 matmul is not supported".into())),
        float => float_result(vec![n, m], float, matmul_loop(&float_view(a), &float_view(b), n, k, m)),
    }
}

pub fn relu6(x: &TensorValue, out_quant: Option<QuantParams>) -> Result<TensorValue, ExecError> {
    let shape = x.shape().to_vec();
    match &x.data {
        TensorData::F32(v) => TensorValue::f32(shape, v.iter().map(|&e| e.clamp(0.0, 6.0)).collect()),
        TensorData::F16(v) => {
            let (zero, six) = (f16::from_f32(0.0), f16::from_f32(6.0));
            TensorValue::f16(shape, v.iter().map(|&e| e.clamp(zero, six)).collect())
        }
        TensorData::I8(_) => {
            let out = out_quant.or(x.spec.quant).ok_or(ExecError::MissingQuantParams)?;
            let values = dequantized(x).into_iter().map(|e| e.clamp(0.0, 6.0));
            TensorValue::i8(shape, quantize_all(values, out), out)
        }
        TensorData::I32(_) => Err(ExecError::DType("INT32 relu6 is not supported".into())),
    }
}

/// Inserts real zeros: `amounts[d] = [before, after]` for each dim.
pub fn pad(x: &TensorValue, amounts: &[[usize; 2]], out_quant: Option<QuantParams>) -> Result<TensorValue, ExecError> {
    if amounts.len() != x.shape().len() {
        return Err(ExecError::Shape(format!(
            "{} pad pairs for rank {}",
            amounts.len(),
            x.shape().len()
        )));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = in_shape.iter().zip(amounts).map(|(&d, [b, a])| d + b + a).collect();

    fn scatter<T: Copy>(src: &[T], fill: T, in_shape: &[usize], out_shape: &[usize], amounts: &[[usize; 2]]) -> Vec<T> {
        let mut out = vec![fill; out_shape.iter().product()];
        let rank = in_shape.len();
        let mut in_strides = vec![1; rank];
        let mut out_strides = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
            out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
        }
        for (i, &v) in src.iter().enumerate() {
            let mut offset = 0;
            for d in 0..rank {
                let coord = (i / in_strides[d]) % in_shape[d];
                offset += (coord + amounts[d][0]) * out_strides[d];
            }
            out[offset] = v;
        }
        out
    }

    match &x.data {
        TensorData::F32(v) => TensorValue::f32(out_shape.clone(), scatter(v, 0.0, in_shape, &out_shape, amounts)),
        TensorData::F16(v) => TensorValue::f16(out_shape.clone(), scatter(v, f16::ZERO, in_shape, &out_shape, amounts)),
        TensorData::I32(v) => TensorValue::new(
            TensorSpec::new(out_shape.clone(), DType::I32),
            TensorData::I32(scatter(v, 0, in_shape, &out_shape, amounts)),
        ),
        TensorData::I8(v) => {
            let qin = x.spec.quant.ok_or(ExecError::MissingQuantParams)?;
            let out = out_quant.unwrap_or(qin);
            let codes: Vec<i8> = if out == qin {
                v.clone()
            } else {
                quantize_all(dequantized(x).into_iter(), out)
            };
            let fill = out.quantize(0.0);
            TensorValue::i8(
                out_shape.clone(),
                scatter(&codes, fill, in_shape, &out_shape, amounts),
                out,
            )
        }
    }
}

/// Averages NHWC over H and W, giving `[N, C]`.
pub fn global_mean(x: &TensorValue, out_quant: Option<QuantParams>) -> Result<TensorValue, ExecError> {
    rank(x, 4, "global mean input")?;
    let [n, h, w, c] = x.shape().try_into().unwrap();
    let area = h * w;
    match x.dtype() {
        DType::I8 => {
            let out = out_quant.ok_or(ExecError::MissingQuantParams)?;
            let v = dequantized(x);
            let mut sums = vec![0.0f64; n * c];
            for b in 0..n {
                for p in 0..area {
                    let row = (b * area + p) * c;
                    for ch in 0..c {
                        sums[b * c + ch] += v[row + ch];
                    }
                }
            }
            TensorValue::i8(
                vec![n, c],
                quantize_all(sums.into_iter().map(|s| s / area as f64), out),
                out,
            )
        }
        DType::I32 => Err(ExecError::DType("INT32 mean is not supported".into())),
        float => {
            let v = float_view(x);
            let mut sums = vec![0.0f32; n * c];
            for b in 0..n {
                for p in 0..area {
                    let row = (b * area + p) * c;
                    for (s, &e) in sums[b * c..(b + 1) * c].iter_mut().zip(&v[row..row + c]) {
                        *s += e;
                    }
                }
            }
            let inv = area as f32;
            float_result(vec![n, c], float, sums.into_iter().map(|s| s / inv).collect())
        }
    }
}

enum Broadcast {
    Full,
    Scalar,
    PerChannel(usize),
}

fn broadcast(big: &[usize], small: &[usize]) -> Result<Broadcast, ExecError> {
    let small_n: usize = small.iter().product();
    if big == small {
        Ok(Broadcast::Full)
    } else if small_n == 1 {
        Ok(Broadcast::Scalar)
    } else if big.last() == Some(&small_n) {
        Ok(Broadcast::PerChannel(small_n))
    } else {
        Err(ExecError::Broadcast(format!("cannot broadcast {small:?} onto {big:?}")))
    }
}

/// `AddV2` or `Mul`. The second operand may also be a scalar or a
/// per-channel vector matching the first operand's last dim (and vice versa).
pub fn elementwise(
    kind: OpKind,
    a: &TensorValue,
    b: &TensorValue,
    out_quant: Option<QuantParams>,
) -> Result<TensorValue, ExecError> {
    let (big, small) = if a.numel() >= b.numel() { (a, b) } else { (b, a) };
    let mode = broadcast(big.shape(), small.shape())?;
    let index = |i: usize| match mode {
        Broadcast::Full => i,
        Broadcast::Scalar => 0,
        Broadcast::PerChannel(c) => i % c,
    };
    let shape = big.shape().to_vec();
    macro_rules! apply {
        ($x:expr, $y:expr) => {
            match kind {
                OpKind::AddV2 => $x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + $y[index(i)])
                    .collect::<Vec<_>>(),
                OpKind::Mul => $x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * $y[index(i)])
                    .collect::<Vec<_>>(),
                other => return Err(ExecError::Unsupported(format!("{other} is not elementwise"))),
            }
        };
    }
    match same_dtype(a, b)? {
        DType::I8 => {
            let out = out_quant.ok_or(ExecError::MissingQuantParams)?;
            let (x, y) = (dequantized(big), dequantized(small));
            let values = apply!(x, y);
            TensorValue::i8(shape, quantize_all(values.into_iter(), out), out)
        }
        DType::I32 => Err(ExecError::DType("INT32 elementwise is not supported".into())),
        float => {
            let (x, y) = (float_view(big), float_view(small));
            float_result(shape, float, apply!(x, y))
        }
    }
}

/// Converts between dtypes. Float narrowing rounds to nearest even and
/// saturates; INT8 targets quantize through `quant`, saturating to `[-128, 127]`.
pub fn cast(x: &TensorValue, to: DType, quant: Option<QuantParams>) -> Result<TensorValue, ExecError> {
    let shape = x.shape().to_vec();
    match to {
        DType::F32 => TensorValue::f32(shape, x.to_f32_vec()),
        DType::F16 => {
            let values = match &x.data {
                TensorData::F16(v) => v.clone(),
                _ => x.to_f32_vec().into_iter().map(f32_to_f16_saturating).collect(),
            };
            TensorValue::f16(shape, values)
        }
        DType::I8 => {
            let q = quant.ok_or(ExecError::MissingQuantParams)?;
            if x.dtype() == DType::I8 && x.spec.quant == Some(q) {
                return Ok(x.clone());
            }
            // FP32 sources quantize from their exact value
            TensorValue::i8(shape, quantize_all(dequantized(x).into_iter(), q), q)
        }
        DType::I32 => Err(ExecError::Unsupported("cast to INT32".into())),
    }
}
