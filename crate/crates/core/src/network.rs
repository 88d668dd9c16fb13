//! Contracting/expanding segmentation network parameterized by depth.
//!
//! Level `l` (0-based here) works at `ceil(n / 2^l)` voxels per axis with
//! `F * 2^l` features. Every level sees the raw input through its own
//! convolution (kernel `2l + 3`, stride `2^l`) and the residual output of every
//! finer level through a kernel-3 strided convolution; the streams are
//! concatenated and fused back to `F * 2^l` channels before a residual module.
//! The expanding path up-convolves, centre-crops to the skip's extent,
//! concatenates with the skip, fuses, and applies a residual module. A kernel-3
//! head with a two-channel softmax produces the foreground probability.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{
    self, add, channel_softmax, concat_channels, conv3d, conv_transpose3d, crop, dropout, relu,
    select_channel, ConvParams, NamedArray, Tensor,
};
use crate::error::{Error, Result};
use crate::volume::{Grid, ProbMap, Volume};

/// Input extent of both networks.
pub const DEFAULT_DIMS: [usize; 3] = [128, 128, 72];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkSpec {
    pub depth: usize,
    pub base_features: usize,
    pub dropout_rate: f64,
    pub in_dims: [usize; 3],
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { depth: 4, base_features: 16, dropout_rate: 0.15, in_dims: DEFAULT_DIMS }
    }
}

/// Whole-image localization network: depth 5.
pub fn global_spec() -> NetworkSpec {
    NetworkSpec { depth: 5, ..NetworkSpec::default() }
}

/// Volume-of-interest network: depth 3.
pub fn local_spec() -> NetworkSpec {
    NetworkSpec { depth: 3, ..NetworkSpec::default() }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid(format!("network depth must be >= 2, got {}", self.depth)));
        }
        if self.base_features == 0 {
            return Err(Error::invalid("base feature count must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.in_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("input dims must be >= 1, got {:?}", self.in_dims)));
        }
        Ok(())
    }

    /// Feature count at 0-based level `l`.
    pub fn features(&self, l: usize) -> usize {
        self.base_features << l
    }

    /// Kernel of the direct-from-input convolution at level `l`.
    pub fn input_kernel(&self, l: usize) -> usize {
        2 * l + 3
    }

    pub fn downsampling(&self, l: usize) -> usize {
        1 << l
    }

    pub fn level_dims(&self, l: usize) -> [usize; 3] {
        self.in_dims.map(|n| n.div_ceil(self.downsampling(l)))
    }
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    /// `(out, in, k, k, k)` for convolutions, `(in, out, k, k, k)` for up-convolutions.
    shape: [usize; 5],
    stride: usize,
    transposed: bool,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn fan_in(&self) -> usize {
        let k3 = self.shape[2] * self.shape[3] * self.shape[4];
        if self.transposed {
            self.shape[0] * k3
        } else {
            self.shape[1] * k3
        }
    }

    fn out_channels(&self) -> usize {
        if self.transposed {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }
}

/// Realized parameters of a [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Result of a differentiable forward pass.
pub struct ForwardPass {
    /// Foreground probability, shape `(1, 1, x, y, z)`.
    pub prob: Tensor,
    /// Background and foreground softmax channels, shape `(1, 2, x, y, z)`.
    pub softmax: Tensor,
    /// Parameter leaves in [`Network::param_names`] order (weight, bias per layer).
    pub params: Vec<Tensor>,
    /// Hash of every ReLU input's sign pattern, when requested.
    pub relu_signature: Option<u64>,
}

struct Ctx<'a, R: Rng + ?Sized> {
    training: bool,
    rate: f64,
    rng: &'a mut R,
    trace: Option<DefaultHasher>,
}

impl<R: Rng + ?Sized> Ctx<'_, R> {
    fn act(&mut self, t: &Tensor) -> Result<Tensor> {
        if let Some(h) = self.trace.as_mut() {
            let mut word = 0u64;
            for (i, &v) in t.value().iter().enumerate() {
                word = (word << 1) | u64::from(v > 0.0);
                if i % 64 == 63 {
                    h.write_u64(word);
                    word = 0;
                }
            }
            h.write_u64(word);
        }
        dropout(&relu(t), self.rate, self.training, self.rng)
    }
}

impl Network {
    /// He-initialized network (weights `N(0, 2 / fan_in)`, zero biases).
    pub fn build<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut push = |name: String, shape: [usize; 5], stride: usize, transposed: bool| {
            let mut l = Layer { name, shape, stride, transposed, weight: Vec::new(), bias: Vec::new() };
            let std = (2.0 / l.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            l.weight = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
            l.bias = vec![0.0; l.out_channels()];
            layers.push(l);
        };
        let d = spec.depth;
        for l in 0..d {
            let f = spec.features(l);
            let k = spec.input_kernel(l);
            push(format!("down{}.input", l + 1), [f, 1, k, k, k], spec.downsampling(l), false);
            for i in 0..l {
                push(format!("down{}.from{}", l + 1, i + 1), [f, spec.features(i), 3, 3, 3], 1 << (l - i), false);
            }
            push(format!("down{}.fuse", l + 1), [f, (l + 1) * f, 3, 3, 3], 1, false);
            push(format!("down{}.res1", l + 1), [f, f, 3, 3, 3], 1, false);
            push(format!("down{}.res2", l + 1), [f, f, 3, 3, 3], 1, false);
        }
        for l in (0..d - 1).rev() {
            let f = spec.features(l);
            push(format!("up{}.upconv", l + 1), [spec.features(l + 1), f, 3, 3, 3], 2, true);
            push(format!("up{}.fuse", l + 1), [f, 2 * f, 3, 3, 3], 1, false);
            push(format!("up{}.res1", l + 1), [f, f, 3, 3, 3], 1, false);
            push(format!("up{}.res2", l + 1), [f, f, 3, 3, 3], 1, false);
        }
        let f = spec.features(0);
        push("head".into(), [2, f, 3, 3, 3], 1, false);
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    /// `(out, in, k)` of a convolution or `(in, out, k)` of an up-convolution.
    pub fn layer_shape(&self, name: &str) -> Option<[usize; 5]> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.shape)
    }

    pub fn layer_stride(&self, name: &str) -> Option<usize> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.stride)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter array names, weight then bias per layer.
    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)]).collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Weight arrays as `(name, values, fan_in)`.
    pub fn weights(&self) -> impl Iterator<Item = (&str, &[f64], usize)> {
        self.layers.iter().map(|l| (l.name.as_str(), l.weight.as_slice(), l.fan_in()))
    }

    /// Differentiable forward pass on a `(1, 1, x, y, z)` tensor.
    pub fn forward_tensor<R: Rng + ?Sized>(
        &self,
        input: &Tensor,
        training: bool,
        track_grads: bool,
        trace_relus: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let s = input.shape();
        if s[0] != 1 || s[1] != 1 {
            return Err(Error::invalid(format!("network input must be (1, 1, x, y, z), got {s:?}")));
        }
        if input.spatial() != self.spec.in_dims {
            return Err(Error::invalid(format!(
                "network expects input dims {:?}, got {:?}",
                self.spec.in_dims,
                input.spatial()
            )));
        }
        let mut leaves = Vec::with_capacity(2 * self.layers.len());
        let mut convs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let bshape = [l.bias.len(), 1, 1, 1, 1];
            let (w, b) = if track_grads {
                (Tensor::param(l.shape, l.weight.clone())?, Tensor::param(bshape, l.bias.clone())?)
            } else {
                (Tensor::new(l.shape, l.weight.clone())?, Tensor::new(bshape, l.bias.clone())?)
            };
            leaves.push(w.clone());
            leaves.push(b.clone());
            convs.push(ConvParams::new(w, b, l.stride)?);
        }
        let mut next = convs.iter();
        let mut take = || next.next().expect("layer list matches architecture");
        let mut ctx = Ctx {
            training,
            rate: self.spec.dropout_rate,
            rng,
            trace: trace_relus.then(DefaultHasher::new),
        };

        let d = self.spec.depth;
        let mut down: Vec<Tensor> = Vec::with_capacity(d);
        for l in 0..d {
            let mut streams = vec![ctx.act(&conv3d(input, take())?)?];
            for prev in down.iter().take(l) {
                streams.push(ctx.act(&conv3d(prev, take())?)?);
            }
            let cat = concat_channels(&streams)?;
            drop(streams);
            let fused = ctx.act(&conv3d(&cat, take())?)?;
            down.push(residual(&mut ctx, &fused, take(), take())?);
        }
        let mut cur = down[d - 1].clone();
        for l in (0..d - 1).rev() {
            let up = ctx.act(&conv_transpose3d(&cur, take())?)?;
            let target = self.spec.level_dims(l);
            let have = up.spatial();
            let offset: [usize; 3] = std::array::from_fn(|a| (have[a] - target[a]) / 2);
            let up = if have == target { up } else { crop(&up, offset, target)? };
            let cat = concat_channels(&[down[l].clone(), up])?;
            let fused = ctx.act(&conv3d(&cat, take())?)?;
            cur = residual(&mut ctx, &fused, take(), take())?;
        }
        drop(down);
        let logits = conv3d(&cur, take())?;
        let softmax = channel_softmax(&logits)?;
        let prob = select_channel(&softmax, 1)?;
        Ok(ForwardPass { prob, softmax, params: leaves, relu_signature: ctx.trace.map(|h| h.finish()) })
    }

    /// Probability map for a volume of the network's input dims.
    pub fn forward<R: Rng + ?Sized>(&self, input: &Volume, training: bool, rng: &mut R) -> Result<ProbMap> {
        if input.dims() != self.spec.in_dims {
            return Err(Error::invalid(format!(
                "network expects input dims {:?}, got {:?}",
                self.spec.in_dims,
                input.dims()
            )));
        }
        let pass = self.forward_tensor(&Tensor::from_volume(input), training, false, false, rng)?;
        Ok(ProbMap::clamped(pass.prob.channel_volume(0, *input.grid())?))
    }

    /// Deterministic inference (no dropout).
    pub fn predict(&self, input: &Volume) -> Result<ProbMap> {
        // The rng is never consulted when training is off.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.forward(input, false, &mut rng)
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let s = &self.spec;
        let mut out = vec![NamedArray::vector(
            SPEC_ARRAY,
            vec![
                s.depth as f64,
                s.base_features as f64,
                s.dropout_rate,
                s.in_dims[0] as f64,
                s.in_dims[1] as f64,
                s.in_dims[2] as f64,
            ],
        )];
        for l in &self.layers {
            out.push(NamedArray { name: format!("{}.weight", l.name), shape: l.shape.to_vec(), data: l.weight.clone() });
            out.push(NamedArray::vector(format!("{}.bias", l.name), l.bias.clone()));
        }
        out
    }

    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let spec_arr = arrays
            .iter()
            .find(|a| a.name == SPEC_ARRAY)
            .ok_or_else(|| Error::invalid("checkpoint has no network spec"))?;
        let v = &spec_arr.data;
        if v.len() != 6 {
            return Err(Error::invalid("network spec array must hold 6 values"));
        }
        let spec = NetworkSpec {
            depth: v[0] as usize,
            base_features: v[1] as usize,
            dropout_rate: v[2],
            in_dims: [v[3] as usize, v[4] as usize, v[5] as usize],
        };
        // Shapes come from a deterministic build; values are overwritten below.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Network::build(spec, &mut rng)?;
        for l in &mut net.layers {
            let find = |n: String| {
                arrays.iter().find(|a| a.name == n).ok_or_else(|| Error::invalid(format!("checkpoint lacks {n}")))
            };
            let w = find(format!("{}.weight", l.name))?;
            let b = find(format!("{}.bias", l.name))?;
            if w.shape != l.shape.to_vec() || b.data.len() != l.bias.len() {
                return Err(Error::invalid(format!("checkpoint shape mismatch for layer {}", l.name)));
            }
            l.weight = w.data.clone();
            l.bias = b.data.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        autodiff::write_params(path, &self.to_arrays())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arrays(&autodiff::read_params(path)?)
    }

    /// Grid on which this network's output lives for a given input grid.
    pub fn output_grid(&self, input: &Grid) -> Grid {
        *input
    }
}

const SPEC_ARRAY: &str = "__spec__";

fn residual<R: Rng + ?Sized>(ctx: &mut Ctx<'_, R>, x: &Tensor, c1: &ConvParams, c2: &ConvParams) -> Result<Tensor> {
    let h = ctx.act(&conv3d(x, c1)?)?;
    let h = conv3d(&h, c2)?;
    ctx.act(&add(&h, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(depth: usize, f: usize, dims: [usize; 3]) -> NetworkSpec {
        NetworkSpec { depth, base_features: f, dropout_rate: 0.15, in_dims: dims }
    }

    #[test]
    fn depth_four_input_kernels() {
        let spec = NetworkSpec { depth: 4, ..NetworkSpec::default() };
        let ks: Vec<usize> = (0..4).map(|l| spec.input_kernel(l)).collect();
        assert_eq!(ks, vec![3, 5, 7, 9]);
        let net = Network::build(small(4, 1, [8, 8, 8]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (l, k) in [3, 5, 7, 9].iter().enumerate() {
            assert_eq!(net.layer_shape(&format!("down{}.input", l + 1)).unwrap()[2], *k);
            assert_eq!(net.layer_stride(&format!("down{}.input", l + 1)).unwrap(), 1 << l);
        }
    }

    #[test]
    fn depth_five_levels() {
        let spec = global_spec();
        let feats: Vec<usize> = (0..5).map(|l| spec.features(l)).collect();
        assert_eq!(feats, vec![16, 32, 64, 128, 256]);
        let dims: Vec<[usize; 3]> = (0..5).map(|l| spec.level_dims(l)).collect();
        assert_eq!(dims, vec![[128, 128, 72], [64, 64, 36], [32, 32, 18], [16, 16, 9], [8, 8, 5]]);
    }

    #[test]
    fn preset_specs() {
        assert_eq!(global_spec().depth, 5);
        assert_eq!(local_spec().depth, 3);
        assert_eq!(global_spec().dropout_rate, 0.15);
        assert_eq!(local_spec().dropout_rate, 0.15);
        assert_eq!(global_spec().base_features, 16);
    }

    #[test]
    fn parameter_count_depth_two() {
        let net = Network::build(small(2, 2, [8, 8, 8]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k * k + cout;
        let level1 = conv(2, 1, 3) + conv(2, 2, 3) + 2 * conv(2, 2, 3);
        let level2 = conv(4, 1, 5) + conv(4, 2, 3) + conv(4, 8, 3) + 2 * conv(4, 4, 3);
        let up1 = (4 * 2 * 27 + 2) + conv(2, 4, 3) + 2 * conv(2, 2, 3);
        let head = conv(2, 2, 3);
        assert_eq!(level1 + level2 + up1 + head, 3616);
        assert_eq!(net.num_params(), 3616);
    }

    #[test]
    fn rejects_depth_one_and_wrong_input() {
        assert!(Network::build(small(1, 2, [8, 8, 8]), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let net = Network::build(small(2, 2, [8, 8, 8]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let v = Volume::zeros(Grid::new([8, 8, 7], [1.0; 3], [0.0; 3]).unwrap());
        assert!(net.predict(&v).is_err());
    }

    #[test]
    fn output_shape_range_and_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for depth in 2..=4 {
            let dims = [13, 10, 9];
            let net = Network::build(small(depth, 2, dims), &mut rng).unwrap();
            let v = Volume::from_fn(Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap(), |_| rng.random_range(-1.0..1.0));
            let p = net.predict(&v).unwrap();
            assert_eq!(p.grid().dims, dims);
            assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            let t = net.forward(&v, true, &mut rng).unwrap();
            assert_eq!(t.grid().dims, dims);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [12, 12, 8];
        let net = Network::build(small(3, 2, dims), &mut rng).unwrap();
        let v = Volume::from_fn(Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap(), |_| rng.random_range(-1.0..1.0));
        assert_eq!(net.predict(&v).unwrap(), net.predict(&v).unwrap());
    }

    #[test]
    fn fresh_network_output_is_uncommitted() {
        let dims = [16, 16, 8];
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let net = Network::build(small(2, 4, dims), &mut rng).unwrap();
            let v = Volume::from_fn(Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap(), |_| rng.random_range(-1.0..1.0));
            let m = net.predict(&v).unwrap().as_volume().mean();
            assert!(m > 0.2 && m < 0.8, "seed {seed}: mean {m}");
        }
    }

    #[test]
    fn he_initialization_variance() {
        let net = Network::build(small(3, 8, [16, 16, 16]), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut checked = 0;
        for (name, w, fan_in) in net.weights() {
            if w.len() < 1000 {
                continue;
            }
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
            let target = 2.0 / fan_in as f64;
            assert!((var / target - 1.0).abs() < 0.2, "{name}: {var} vs {target}");
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = Network::build(small(2, 2, [8, 8, 4]), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.params(), net.params());
    }
}
