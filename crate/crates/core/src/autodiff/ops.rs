use rand::Rng;

use super::conv::ConvGeom;
use super::{numel, Shape, Tensor};
use crate::error::{Error, Result};

/// Smoothing constant of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

pub(super) enum Op {
    Leaf,
    Conv { x: Tensor, w: Tensor, b: Tensor, stride: usize },
    ConvTranspose { x: Tensor, w: Tensor, b: Tensor },
    Relu { x: Tensor },
    Concat { xs: Vec<Tensor> },
    Add { x: Tensor, y: Tensor },
    Mul { x: Tensor, y: Tensor },
    Sum { x: Tensor },
    Affine { x: Tensor, scale: f64 },
    Dropout { x: Tensor, keep: Vec<f64> },
    Softmax { x: Tensor },
    SelectChannel { x: Tensor, c: usize },
    Crop { x: Tensor, offset: [usize; 3] },
    SoftDice { p: Tensor, g: Tensor, sp: f64, sg: f64, spg: f64 },
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv3d",
            Op::ConvTranspose { .. } => "conv_transpose3d",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Affine { .. } => "affine",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "channel_softmax",
            Op::SelectChannel { .. } => "select_channel",
            Op::Crop { .. } => "crop",
            Op::SoftDice { .. } => "soft_dice",
        }
    }

    pub(super) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b } => vec![x, w, b],
            Op::Concat { xs } => xs.iter().collect(),
            Op::Add { x, y } | Op::Mul { x, y } => vec![x, y],
            Op::Relu { x }
            | Op::Sum { x }
            | Op::Affine { x, .. }
            | Op::Dropout { x, .. }
            | Op::Softmax { x }
            | Op::SelectChannel { x, .. }
            | Op::Crop { x, .. } => vec![x],
            Op::SoftDice { p, .. } => vec![p],
        }
    }

    /// Push `g = d loss / d out` to the parents that require gradients.
    pub(super) fn backward(&self, out: &Tensor, g: &[f64]) {
        match self {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride } => {
                let xs = x.shape();
                let ws = w.shape();
                let geom = ConvGeom::new(xs[1], ws[0], ws[2], *stride, x.spatial());
                let in_len = xs[1] * geom.in_len();
                let out_len = ws[0] * geom.out_len();
                if x.requires_grad() {
                    let mut dx = vec![0.0; x.len()];
                    for n in 0..xs[0] {
                        geom.backward_data(
                            &g[n * out_len..(n + 1) * out_len],
                            w.value(),
                            &mut dx[n * in_len..(n + 1) * in_len],
                        );
                    }
                    x.accumulate(dx);
                }
                if w.requires_grad() {
                    let mut dw = vec![0.0; w.len()];
                    for n in 0..xs[0] {
                        geom.backward_weight(
                            &x.value()[n * in_len..(n + 1) * in_len],
                            &g[n * out_len..(n + 1) * out_len],
                            &mut dw,
                        );
                    }
                    w.accumulate(dw);
                }
                if b.requires_grad() {
                    b.accumulate(channel_sums(g, out.shape()));
                }
            }
            Op::ConvTranspose { x, w, b } => {
                // Forward was the data-adjoint of a stride-2 conv from the
                // output grid to the input grid.
                let ws = w.shape();
                let xs = x.shape();
                let os = out.shape();
                let geom = ConvGeom::new(ws[1], ws[0], ws[2], 2, [os[2], os[3], os[4]]);
                let small = ws[0] * geom.out_len();
                let big = ws[1] * geom.in_len();
                if x.requires_grad() {
                    let mut dx = vec![0.0; x.len()];
                    for n in 0..xs[0] {
                        geom.forward(
                            &g[n * big..(n + 1) * big],
                            w.value(),
                            &mut dx[n * small..(n + 1) * small],
                        );
                    }
                    x.accumulate(dx);
                }
                if w.requires_grad() {
                    let mut dw = vec![0.0; w.len()];
                    for n in 0..xs[0] {
                        geom.backward_weight(
                            &g[n * big..(n + 1) * big],
                            &x.value()[n * small..(n + 1) * small],
                            &mut dw,
                        );
                    }
                    w.accumulate(dw);
                }
                if b.requires_grad() {
                    b.accumulate(channel_sums(g, os));
                }
            }
            Op::Relu { x } => {
                let dx = x.value().iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                x.accumulate(dx);
            }
            Op::Concat { xs } => {
                let os = out.shape();
                let plane = os[2] * os[3] * os[4];
                let mut grads: Vec<Vec<f64>> = xs.iter().map(|t| Vec::with_capacity(t.len())).collect();
                for n in 0..os[0] {
                    let mut c0 = 0;
                    for (t, dst) in xs.iter().zip(grads.iter_mut()) {
                        let c = t.channels();
                        let start = (n * os[1] + c0) * plane;
                        dst.extend_from_slice(&g[start..start + c * plane]);
                        c0 += c;
                    }
                }
                for (t, dt) in xs.iter().zip(grads) {
                    if t.requires_grad() {
                        t.accumulate(dt);
                    }
                }
            }
            Op::Add { x, y } => {
                if x.requires_grad() {
                    x.accumulate(g.to_vec());
                }
                if y.requires_grad() {
                    y.accumulate(g.to_vec());
                }
            }
            Op::Mul { x, y } => {
                if x.requires_grad() {
                    x.accumulate(g.iter().zip(y.value()).map(|(a, b)| a * b).collect());
                }
                if y.requires_grad() {
                    y.accumulate(g.iter().zip(x.value()).map(|(a, b)| a * b).collect());
                }
            }
            Op::Sum { x } => x.accumulate(vec![g[0]; x.len()]),
            Op::Affine { x, scale } => x.accumulate(g.iter().map(|d| d * scale).collect()),
            Op::Dropout { x, keep } => x.accumulate(g.iter().zip(keep).map(|(a, k)| a * k).collect()),
            Op::Softmax { x } => {
                let s = out.shape();
                let plane = s[2] * s[3] * s[4];
                let y = out.value();
                let mut dx = vec![0.0; x.len()];
                for n in 0..s[0] {
                    let base = n * s[1] * plane;
                    for v in 0..plane {
                        let dot: f64 = (0..s[1]).map(|c| g[base + c * plane + v] * y[base + c * plane + v]).sum();
                        for c in 0..s[1] {
                            let i = base + c * plane + v;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                x.accumulate(dx);
            }
            Op::SelectChannel { x, c } => {
                let s = x.shape();
                let plane = s[2] * s[3] * s[4];
                let mut dx = vec![0.0; x.len()];
                for n in 0..s[0] {
                    let src = n * plane;
                    let dst = (n * s[1] + c) * plane;
                    dx[dst..dst + plane].copy_from_slice(&g[src..src + plane]);
                }
                x.accumulate(dx);
            }
            Op::Crop { x, offset } => {
                let mut dx = vec![0.0; x.len()];
                crop_copy(out.shape(), x.shape(), *offset, |src, dst, n| {
                    dx[dst..dst + n].copy_from_slice(&g[src..src + n])
                });
                x.accumulate(dx);
            }
            Op::SoftDice { p, g: target, sp, sg, spg } => {
                let den = sp + sg + DICE_EPS;
                let num = 2.0 * spg + DICE_EPS;
                let up = g[0];
                let dp = target
                    .value()
                    .iter()
                    .map(|&t| up * (2.0 * t * den - num) / (den * den))
                    .collect();
                p.accumulate(dp);
            }
        }
    }
}

fn channel_sums(g: &[f64], s: Shape) -> Vec<f64> {
    let plane = s[2] * s[3] * s[4];
    let mut out = vec![0.0; s[1]];
    for n in 0..s[0] {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (n * s[1] + c) * plane;
            *o += g[start..start + plane].iter().sum::<f64>();
        }
    }
    out
}

/// Call `f(src_index_in_small, dst_index_in_big, run_len)` for every x-run of
/// a crop from `big` (at `offset`) to `small`.
fn crop_copy(small: Shape, big: Shape, offset: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    for n in 0..small[0] {
        for c in 0..small[1] {
            for z in 0..small[4] {
                for y in 0..small[3] {
                    let s = (((n * small[1] + c) * small[4] + z) * small[3] + y) * small[2];
                    let d = (((n * big[1] + c) * big[4] + z + offset[2]) * big[3] + y + offset[1]) * big[2]
                        + offset[0];
                    f(s, d, small[2]);
                }
            }
        }
    }
}

/// Convolution parameters: weights `(out, in, k, k, k)`, bias with `out`
/// elements, and stride. Padding is always "same" (output = `ceil(n / stride)`).
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let s = weight.shape();
        if s[2] != s[3] || s[3] != s[4] || s[2] % 2 == 0 {
            return Err(Error::invalid(format!("kernel must be cubic with odd size, got {s:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if bias.len() != s[0] && bias.len() != s[1] {
            return Err(Error::invalid(format!("bias has {} elements, weights are {s:?}", bias.len())));
        }
        Ok(Self { weight, bias, stride })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], batch: usize, plane: usize) {
    let c = bias.len();
    for n in 0..batch {
        for (ci, &b) in bias.iter().enumerate() {
            let start = (n * c + ci) * plane;
            out[start..start + plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

/// "Same"-padded strided 3-D cross-correlation.
pub fn conv3d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    if xs[1] != p.in_channels() {
        return Err(Error::invalid(format!(
            "conv3d: input has {} channels, weights expect {}",
            xs[1],
            p.in_channels()
        )));
    }
    if p.bias.len() != p.out_channels() {
        return Err(Error::invalid(format!("bias has {} elements, expected {}", p.bias.len(), p.out_channels())));
    }
    let geom = ConvGeom::new(xs[1], p.out_channels(), p.kernel(), p.stride, x.spatial());
    let os = [xs[0], geom.cout, geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]];
    let mut out = vec![0.0; numel(&os)];
    add_bias(&mut out, p.bias.value(), xs[0], geom.out_len());
    let in_len = xs[1] * geom.in_len();
    let out_len = geom.cout * geom.out_len();
    for n in 0..xs[0] {
        geom.forward(
            &x.value()[n * in_len..(n + 1) * in_len],
            p.weight.value(),
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    let rg = x.requires_grad() || p.weight.requires_grad() || p.bias.requires_grad();
    Ok(Tensor::from_parts(
        os,
        out,
        rg,
        Op::Conv { x: x.clone(), w: p.weight.clone(), b: p.bias.clone(), stride: p.stride },
    ))
}

/// Stride-2, kernel-3 transposed convolution doubling every spatial extent.
///
/// Weights are laid out `(in, out, k, k, k)`, i.e. exactly the weights of the
/// stride-2 [`conv3d`] mapping the output grid back to the input grid, whose
/// adjoint this is (plus bias).
pub fn conv_transpose3d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    if p.stride != 2 {
        return Err(Error::invalid(format!("conv_transpose3d supports stride 2 only, got {}", p.stride)));
    }
    if p.kernel() != 3 {
        return Err(Error::invalid(format!("conv_transpose3d supports kernel 3 only, got {}", p.kernel())));
    }
    let xs = x.shape();
    let ws = p.weight.shape();
    if xs[1] != ws[0] {
        return Err(Error::invalid(format!(
            "conv_transpose3d: input has {} channels, weights expect {}",
            xs[1], ws[0]
        )));
    }
    if p.bias.len() != ws[1] {
        return Err(Error::invalid(format!("bias has {} elements, expected {}", p.bias.len(), ws[1])));
    }
    let big_dims = x.spatial().map(|n| 2 * n);
    let geom = ConvGeom::new(ws[1], ws[0], 3, 2, big_dims);
    let os = [xs[0], ws[1], big_dims[0], big_dims[1], big_dims[2]];
    let mut out = vec![0.0; numel(&os)];
    add_bias(&mut out, p.bias.value(), xs[0], geom.in_len());
    let small = ws[0] * geom.out_len();
    let big = ws[1] * geom.in_len();
    for n in 0..xs[0] {
        geom.backward_data(
            &x.value()[n * small..(n + 1) * small],
            p.weight.value(),
            &mut out[n * big..(n + 1) * big],
        );
    }
    let rg = x.requires_grad() || p.weight.requires_grad() || p.bias.requires_grad();
    Ok(Tensor::from_parts(os, out, rg, Op::ConvTranspose { x: x.clone(), w: p.weight.clone(), b: p.bias.clone() }))
}

pub fn relu(x: &Tensor) -> Tensor {
    let v = x.value().iter().map(|&a| a.max(0.0)).collect();
    Tensor::from_parts(x.shape(), v, x.requires_grad(), Op::Relu { x: x.clone() })
}

/// Stack along the channel axis in argument order.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let s0 = first.shape();
    for t in xs {
        let s = t.shape();
        if s[0] != s0[0] || s[2..] != s0[2..] {
            return Err(Error::invalid(format!("concat: shape {s:?} incompatible with {s0:?}")));
        }
    }
    let channels: usize = xs.iter().map(|t| t.channels()).sum();
    let os = [s0[0], channels, s0[2], s0[3], s0[4]];
    let plane = s0[2] * s0[3] * s0[4];
    let mut out = Vec::with_capacity(numel(&os));
    for n in 0..s0[0] {
        for t in xs {
            let c = t.channels();
            out.extend_from_slice(&t.value()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    let rg = xs.iter().any(|t| t.requires_grad());
    Ok(Tensor::from_parts(os, out, rg, Op::Concat { xs: xs.to_vec() }))
}

fn same_shape(op: &str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(format!("{op}: shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    Ok(())
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("add", x, y)?;
    let v = x.value().iter().zip(y.value()).map(|(a, b)| a + b).collect();
    let rg = x.requires_grad() || y.requires_grad();
    Ok(Tensor::from_parts(x.shape(), v, rg, Op::Add { x: x.clone(), y: y.clone() }))
}

/// Elementwise product.
pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("mul", x, y)?;
    let v = x.value().iter().zip(y.value()).map(|(a, b)| a * b).collect();
    let rg = x.requires_grad() || y.requires_grad();
    Ok(Tensor::from_parts(x.shape(), v, rg, Op::Mul { x: x.clone(), y: y.clone() }))
}

/// Sum of all elements as a scalar.
pub fn sum(x: &Tensor) -> Tensor {
    let v = x.value().iter().sum();
    Tensor::from_parts([1; 5], vec![v], x.requires_grad(), Op::Sum { x: x.clone() })
}

/// `scale * x + shift`.
pub fn affine(x: &Tensor, scale: f64, shift: f64) -> Tensor {
    let v = x.value().iter().map(|a| scale * a + shift).collect();
    Tensor::from_parts(x.shape(), v, x.requires_grad(), Op::Affine { x: x.clone(), scale })
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise identity.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let scale = 1.0 / (1.0 - rate);
    let keep: Vec<f64> = (0..x.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale }).collect();
    let v = x.value().iter().zip(&keep).map(|(a, k)| a * k).collect();
    Ok(Tensor::from_parts(x.shape(), v, x.requires_grad(), Op::Dropout { x: x.clone(), keep }))
}

/// Per-voxel softmax across channels, stabilized by max subtraction.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s[1] < 2 {
        return Err(Error::invalid("channel_softmax needs at least two channels"));
    }
    let plane = s[2] * s[3] * s[4];
    let xv = x.value();
    let mut out = vec![0.0; x.len()];
    for n in 0..s[0] {
        let base = n * s[1] * plane;
        for v in 0..plane {
            let m = (0..s[1]).map(|c| xv[base + c * plane + v]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s[1] {
                let e = (xv[base + c * plane + v] - m).exp();
                out[base + c * plane + v] = e;
                z += e;
            }
            for c in 0..s[1] {
                out[base + c * plane + v] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(s, out, x.requires_grad(), Op::Softmax { x: x.clone() }))
}

/// Single channel `c` as a one-channel tensor.
pub fn select_channel(x: &Tensor, c: usize) -> Result<Tensor> {
    let s = x.shape();
    if c >= s[1] {
        return Err(Error::invalid(format!("channel {c} out of range for shape {s:?}")));
    }
    let plane = s[2] * s[3] * s[4];
    let mut out = Vec::with_capacity(s[0] * plane);
    for n in 0..s[0] {
        let start = (n * s[1] + c) * plane;
        out.extend_from_slice(&x.value()[start..start + plane]);
    }
    Ok(Tensor::from_parts([s[0], 1, s[2], s[3], s[4]], out, x.requires_grad(), Op::SelectChannel { x: x.clone(), c }))
}

/// Spatial sub-block of extent `dims` starting at `offset`.
pub fn crop(x: &Tensor, offset: [usize; 3], dims: [usize; 3]) -> Result<Tensor> {
    let s = x.shape();
    for a in 0..3 {
        if offset[a] + dims[a] > s[a + 2] || dims[a] == 0 {
            return Err(Error::invalid(format!("crop {offset:?}+{dims:?} outside spatial dims {:?}", x.spatial())));
        }
    }
    let os = [s[0], s[1], dims[0], dims[1], dims[2]];
    let mut out = vec![0.0; numel(&os)];
    let xv = x.value();
    crop_copy(os, s, offset, |src, dst, n| out[src..src + n].copy_from_slice(&xv[dst..dst + n]));
    Ok(Tensor::from_parts(os, out, x.requires_grad(), Op::Crop { x: x.clone(), offset }))
}

/// Soft Dice `(2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` as a scalar;
/// differentiable in `p` only.
pub fn soft_dice(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    if p.shape() != g.shape() {
        return Err(Error::invalid(format!("soft_dice: shapes {:?} and {:?} differ", p.shape(), g.shape())));
    }
    let sp: f64 = p.value().iter().sum();
    let sg: f64 = g.value().iter().sum();
    let spg: f64 = p.value().iter().zip(g.value()).map(|(a, b)| a * b).sum();
    let d = (2.0 * spg + DICE_EPS) / (sp + sg + DICE_EPS);
    Ok(Tensor::from_parts([1; 5], vec![d], p.requires_grad(), Op::SoftDice { p: p.clone(), g: g.clone(), sp, sg, spg }))
}
