//! Radiance MLP with hand-written reverse mode.
//!
//! Trunk: `depth` ReLU layers of `width`; layer `skip` sees `[x_enc, h]`.
//! Heads: a linear density output, and a color branch
//! `feature(h) ++ d_enc -> ReLU(color_width) -> rgb`.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encode_batch, encoded_len};
use super::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::scalar::{s as sc, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityActivation {
    /// `softplus(raw + shift)`.
    Softplus { shift: f64 },
    /// `max(raw, 0)`, as in the original NeRF.
    Relu,
}

impl DensityActivation {
    #[inline]
    pub fn apply<T: Scalar>(self, raw: T) -> T {
        match self {
            DensityActivation::Softplus { shift } => softplus(raw + sc(shift)),
            DensityActivation::Relu => raw.max(T::zero()),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, raw: T) -> T {
        match self {
            DensityActivation::Softplus { shift } => sigmoid(raw + sc(shift)),
            DensityActivation::Relu => {
                if raw > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub depth: usize,
    pub width: usize,
    /// Trunk layer that also receives the encoded position; `None` disables it
    /// and is written as 0.
    #[serde(with = "skip_layer")]
    pub skip: Option<usize>,
    pub color_width: usize,
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub include_input: bool,
    pub density_activation: DensityActivation,
}

mod skip_layer {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let v = usize::deserialize(d)?;
        Ok((v != 0).then_some(v))
    }
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            skip: Some(4),
            color_width: 128,
            pos_levels: 10,
            dir_levels: 4,
            include_input: true,
            density_activation: DensityActivation::Softplus { shift: -1.0 },
        }
    }
}

impl MlpConfig {
    /// Small network with the skip at `depth / 2` and a half-width color layer.
    pub fn compact(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            skip: (depth >= 2).then_some(depth / 2),
            color_width: (width / 2).max(1),
            ..Self::default()
        }
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(self.pos_levels, self.include_input)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(self.dir_levels, self.include_input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::Config(format!("network dimensions must be positive: {self:?}")));
        }
        if let Some(k) = self.skip {
            if k == 0 || k >= self.depth {
                return Err(Error::Config(format!("skip layer {k} must lie in 1..{}", self.depth)));
            }
        }
        if self.pos_dim() == 0 || self.dir_dim() == 0 {
            return Err(Error::Config("encodings must produce at least one feature".into()));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 4);
        for i in 0..self.depth {
            let input = if i == 0 {
                self.pos_dim()
            } else if Some(i) == self.skip {
                self.pos_dim() + self.width
            } else {
                self.width
            };
            shapes.push((input, self.width));
        }
        shapes.push((self.width, 1));
        shapes.push((self.width, self.width));
        shapes.push((self.width + self.dir_dim(), self.color_width));
        shapes.push((self.color_width, 3));
        shapes
    }
}

/// Affine layer `y = x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((input, output)), bias: Array1::zeros(output) }
    }

    fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || sc(dist.sample(rng))),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: &ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients for upstream `dy` given the layer input.
    fn accumulate(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, grad: &mut Dense<T>) {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        grad.bias.zip_mut_with(&dy.sum_axis(Axis(0)), |g, &d| *g = *g + d);
    }
}

/// Network weights; the same shape doubles as a gradient or moment buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub config: MlpConfig,
    pub trunk: Vec<Dense<T>>,
    pub density: Dense<T>,
    pub feature: Dense<T>,
    pub color_hidden: Dense<T>,
    pub rgb: Dense<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    layer_inputs: Vec<Array2<T>>,
    layer_pre: Vec<Array2<T>>,
    trunk_out: Array2<T>,
    color_in: Array2<T>,
    color_pre: Array2<T>,
}

impl<T: Scalar> MlpParams<T> {
    /// Glorot-uniform weights and zero biases.
    pub fn init(config: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, |i, o| Dense::glorot(i, o, rng)))
    }

    pub fn zeros(config: MlpConfig) -> Self {
        Self::build(config, Dense::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    fn build(config: MlpConfig, mut make: impl FnMut(usize, usize) -> Dense<T>) -> Self {
        let shapes = config.layer_shapes();
        let mut layers: Vec<Dense<T>> = shapes.iter().map(|&(i, o)| make(i, o)).collect();
        let rgb = layers.pop().unwrap();
        let color_hidden = layers.pop().unwrap();
        let feature = layers.pop().unwrap();
        let density = layers.pop().unwrap();
        Self { config, trunk: layers, density, feature, color_hidden, rgb }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.trunk.iter().chain([&self.density, &self.feature, &self.color_hidden, &self.rgb])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.trunk
            .iter_mut()
            .chain([&mut self.density, &mut self.feature, &mut self.color_hidden, &mut self.rgb])
    }

    /// Parameter tensors in declaration order: each layer's weight then bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice().expect("standard layout"), l.bias.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .flat_map(|l| {
                [l.weight.as_slice_mut().expect("standard layout"), l.bias.as_slice_mut().expect("standard layout")]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    /// Raw head outputs for encoded inputs: `(sigma_raw, rgb_raw)`.
    pub fn forward(&self, x_enc: ArrayView2<T>, d_enc: ArrayView2<T>) -> Result<(Array1<T>, Array2<T>)> {
        let (sigma, rgb, _) = self.forward_cached(x_enc, d_enc)?;
        Ok((sigma, rgb))
    }

    pub fn forward_cached(
        &self,
        x_enc: ArrayView2<T>,
        d_enc: ArrayView2<T>,
    ) -> Result<(Array1<T>, Array2<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        if x_enc.ncols() != cfg.pos_dim() || d_enc.ncols() != cfg.dir_dim() || x_enc.nrows() != d_enc.nrows() {
            return Err(Error::Validation(format!(
                "encoded inputs {:?} / {:?} do not match network dims ({}, {})",
                x_enc.dim(),
                d_enc.dim(),
                cfg.pos_dim(),
                cfg.dir_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(cfg.depth);
        let mut layer_pre = Vec::with_capacity(cfg.depth);
        let mut h = x_enc.to_owned();
        for (i, layer) in self.trunk.iter().enumerate() {
            let input = if i > 0 && Some(i) == cfg.skip { concatenate![Axis(1), x_enc, h] } else { h };
            let pre = layer.apply(&input.view());
            h = pre.mapv(|v| v.max(T::zero()));
            layer_inputs.push(input);
            layer_pre.push(pre);
        }
        let sigma_raw = self.density.apply(&h.view()).remove_axis(Axis(1));
        let feat = self.feature.apply(&h.view());
        let color_in = concatenate![Axis(1), feat, d_enc];
        let color_pre = self.color_hidden.apply(&color_in.view());
        let rgb_raw = self.rgb.apply(&color_pre.mapv(|v| v.max(T::zero())).view());
        let cache = ForwardCache { layer_inputs, layer_pre, trunk_out: h, color_in, color_pre };
        Ok((sigma_raw, rgb_raw, cache))
    }

    /// Accumulates into `grads` the parameter gradients for upstream
    /// gradients on the raw head outputs.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_sigma_raw: ArrayView1<T>,
        d_rgb_raw: ArrayView2<T>,
        grads: &mut MlpParams<T>,
    ) {
        let width = self.config.width;
        let relu_grad = |d: &mut Array2<T>, pre: &Array2<T>| {
            d.zip_mut_with(pre, |g, &p| {
                if p <= T::zero() {
                    *g = T::zero();
                }
            })
        };

        let color_act = cache.color_pre.mapv(|v| v.max(T::zero()));
        self.rgb.accumulate(&color_act.view(), &d_rgb_raw, &mut grads.rgb);
        let mut d_color = d_rgb_raw.dot(&self.rgb.weight.t());
        relu_grad(&mut d_color, &cache.color_pre);
        self.color_hidden.accumulate(&cache.color_in.view(), &d_color.view(), &mut grads.color_hidden);
        let d_color_in = d_color.dot(&self.color_hidden.weight.t());
        let d_feat = d_color_in.slice(s![.., ..width]);

        let h = cache.trunk_out.view();
        self.feature.accumulate(&h, &d_feat, &mut grads.feature);
        let d_sigma = d_sigma_raw.insert_axis(Axis(1));
        self.density.accumulate(&h, &d_sigma, &mut grads.density);
        let mut dh = d_feat.dot(&self.feature.weight.t());
        general_mat_mul(T::one(), &d_sigma, &self.density.weight.t(), T::one(), &mut dh);

        let pos_dim = self.config.pos_dim();
        for i in (0..self.trunk.len()).rev() {
            relu_grad(&mut dh, &cache.layer_pre[i]);
            let layer = &self.trunk[i];
            layer.accumulate(&cache.layer_inputs[i].view(), &dh.view(), &mut grads.trunk[i]);
            if i == 0 {
                break;
            }
            let d_in = dh.dot(&layer.weight.t());
            dh = if Some(i) == self.config.skip { d_in.slice(s![.., pos_dim..]).to_owned() } else { d_in };
        }
    }

    /// Density and color for world points and unit view directions.
    pub fn evaluate(&self, points: &[[T; 3]], dirs: &[[T; 3]]) -> Result<(Vec<T>, Vec<[T; 3]>)> {
        let cfg = &self.config;
        let x = encode_batch(points, cfg.pos_levels, cfg.include_input);
        let d = encode_batch(dirs, cfg.dir_levels, cfg.include_input);
        let (sigma_raw, rgb_raw) = self.forward(x.view(), d.view())?;
        let act = cfg.density_activation;
        let sigma = sigma_raw.iter().map(|&r| act.apply(r)).collect();
        let rgb = rgb_raw.rows().into_iter().map(|r| [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])]).collect();
        Ok((sigma, rgb))
    }
}

/// Raw `(sigma, rgb)` head outputs for encoded positions and directions.
pub fn mlp_forward<T: Scalar>(
    params: &MlpParams<T>,
    x_enc: ArrayView2<T>,
    d_enc: ArrayView2<T>,
) -> Result<(Array1<T>, Array2<T>)> {
    params.forward(x_enc, d_enc)
}
