//! Trainable layers with explicit forward and backward passes.
//!
//! A [`Layer`] owns its parameters and, after [`Layer::forward`], a cache of
//! the input and output it saw. [`Layer::backward`] turns an upstream
//! gradient into the input gradient plus one gradient per parameter.
//! [`Layer::infer`] is the cache-free path used by frozen models.

use alloc::{vec, vec::Vec};

use crate::tensor::{
    conv::{channel_sum, correlate, correlate_kernel_grad},
    conv2d, conv2d_input_grad, conv2d_kernel_grad, conv2d_transpose, ConvGeometry, Padding,
};
use crate::{Error, Real, Result, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<T: Real>(self, x: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }

    /// Chain rule through the activation, given its output.
    fn backward<T: Real>(self, output: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
        let d = dout.data().iter().zip(output.data());
        let data = match self {
            Activation::Linear => return dout.clone(),
            Activation::Relu => d
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect(),
            Activation::Sigmoid => d.map(|(&g, &y)| g * y * (T::one() - y)).collect(),
        };
        Tensor::from_parts(dout.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    Reshape,
    Activation,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::ConvTranspose2d => "conv2d_transpose",
            LayerKind::Dense => "dense",
            LayerKind::Flatten => "flatten",
            LayerKind::Reshape => "reshape",
            LayerKind::Activation => "activation",
        }
    }
}

/// Architecture of one layer: everything except the parameter values.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LayerSpec {
    /// Kernel `[kh, kw, in, out]`, bias `[out]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    /// Kernel `[kh, kw, out, in]`, bias `[out]`.
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    /// Weight `[inputs, units]`, bias `[units]`.
    Dense {
        inputs: usize,
        units: usize,
        activation: Activation,
    },
    Flatten,
    /// Per-sample target shape; the batch dimension is kept.
    Reshape { shape: Vec<usize> },
    Activation { activation: Activation },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::ConvTranspose2d { .. } => LayerKind::ConvTranspose2d,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Reshape { .. } => LayerKind::Reshape,
            LayerSpec::Activation { .. } => LayerKind::Activation,
        }
    }

    /// Shapes of the trainable parameters, weight first.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => vec![vec![kh, kw, in_channels, out_channels], vec![out_channels]],
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => vec![vec![kh, kw, out_channels, in_channels], vec![out_channels]],
            LayerSpec::Dense { inputs, units, .. } => vec![vec![inputs, units], vec![units]],
            _ => Vec::new(),
        }
    }

    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Conv2d { activation, .. }
            | LayerSpec::ConvTranspose2d { activation, .. }
            | LayerSpec::Dense { activation, .. }
            | LayerSpec::Activation { activation } => activation,
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => Activation::Linear,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => *in_channels > 0 && *out_channels > 0 && kernel[0] > 0 && kernel[1] > 0 && *stride > 0,
            LayerSpec::Dense { inputs, units, .. } => *inputs > 0 && *units > 0,
            LayerSpec::Reshape { shape } => !shape.is_empty() && !shape.contains(&0),
            LayerSpec::Flatten | LayerSpec::Activation { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(alloc::format!("invalid layer spec {self:?}")))
        }
    }

    /// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))` for the weight.
    pub fn glorot_limit(&self) -> Option<f64> {
        let shapes = self.param_shapes();
        let w = shapes.first()?;
        let receptive: usize = w[..w.len() - 2].iter().product();
        let fan_in = w[w.len() - 2] * receptive;
        let fan_out = w[w.len() - 1] * receptive;
        Some(num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64))
    }
}

/// One gradient per trainable parameter, in parameter order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn new(grads: Vec<Tensor<T>>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Tensor<T>> {
        self.grads.iter()
    }

    pub fn as_slice(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn into_inner(self) -> Vec<Tensor<T>> {
        self.grads
    }

    pub fn append(&mut self, other: GradientSet<T>) {
        self.grads.extend(other.grads);
    }

    pub fn is_zero(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.data().iter().all(|&v| v == T::zero()))
    }
}

#[derive(Debug, Clone)]
struct Cache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Layer<T = f32> {
    spec: LayerSpec,
    params: Vec<Tensor<T>>,
    cache: Option<Cache<T>>,
}

impl<T: PartialEq> PartialEq for Layer<T> {
    /// Architecture and parameters; the forward cache is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl<T: Real> Layer<T> {
    /// Glorot-uniform weights and zero biases.
    pub fn new(spec: LayerSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let limit = spec.glorot_limit();
        let params = spec
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(i, shape)| match (i, limit) {
                (0, Some(limit)) => {
                    Tensor::from_fn(shape, |_| T::lit(rng.uniform_in(-limit, limit)))
                }
                _ => Ok(Tensor::zeros(shape)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            params,
            cache: None,
        })
    }

    /// Rebuilds a layer from stored parameters, checking their shapes.
    pub fn with_params(spec: LayerSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} expects {} parameter tensors, got {}",
                spec.kind().name(),
                shapes.len(),
                params.len()
            )));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: spec.kind().name(),
                    left: shape.clone(),
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            spec,
            params,
            cache: None,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn kind(&self) -> LayerKind {
        self.spec.kind()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> Result<Layer<U>> {
        Ok(Layer {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect::<Result<_>>()?,
            cache: None,
        })
    }

    fn shape_error(&self, x: &Tensor<T>, expected: Vec<usize>) -> Error {
        Error::Dimension {
            op: self.kind().name(),
            left: x.shape().to_vec(),
            right: expected,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let ok = match self.spec {
            LayerSpec::Conv2d { in_channels, .. } | LayerSpec::ConvTranspose2d { in_channels, .. } => {
                x.rank() == 4 && x.shape()[3] == in_channels
            }
            LayerSpec::Dense { inputs, .. } => x.rank() == 2 && x.shape()[1] == inputs,
            LayerSpec::Flatten => x.rank() >= 2,
            LayerSpec::Reshape { ref shape } => {
                x.len() / x.batch() == shape.iter().product::<usize>()
            }
            LayerSpec::Activation { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            let expected = match self.spec {
                LayerSpec::Conv2d { in_channels, .. }
                | LayerSpec::ConvTranspose2d { in_channels, .. } => vec![0, 0, 0, in_channels],
                LayerSpec::Dense { inputs, .. } => vec![0, inputs],
                LayerSpec::Reshape { ref shape } => {
                    let mut s = vec![0];
                    s.extend_from_slice(shape);
                    s
                }
                _ => Vec::new(),
            };
            Err(self.shape_error(x, expected))
        }
    }

    /// Pure forward pass; leaves the cache untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let pre = match self.spec {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => conv2d(x, &self.params[0], &self.params[1], stride, padding)?,
            LayerSpec::ConvTranspose2d {
                stride, padding, ..
            } => conv2d_transpose(x, &self.params[0], &self.params[1], stride, padding)?,
            LayerSpec::Dense { .. } => x.matmul(&self.params[0])?.add(&self.params[1])?,
            LayerSpec::Flatten => x.flatten()?,
            LayerSpec::Reshape { ref shape } => {
                let mut full = vec![x.batch()];
                full.extend_from_slice(shape);
                x.reshape(&full)?
            }
            LayerSpec::Activation { .. } => x.clone(),
        };
        self.spec.activation().apply(pre)
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let output = self.infer(x)?;
        self.cache = Some(Cache {
            input: x.clone(),
            output: output.clone(),
        });
        Ok(output)
    }

    /// Input gradient and parameter gradients for the last `forward`.
    pub fn backward(&self, dout: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache {
            layer: self.kind().name(),
        })?;
        if dout.shape() != cache.output.shape() {
            return Err(Error::Dimension {
                op: "backward",
                left: dout.shape().to_vec(),
                right: cache.output.shape().to_vec(),
            });
        }
        let x = &cache.input;
        let da = self.spec.activation().backward(&cache.output, dout);
        let (dx, grads) = match self.spec {
            LayerSpec::Conv2d {
                kernel: [kh, kw],
                stride,
                padding,
                out_channels,
                ..
            } => {
                let g = ConvGeometry::conv(x.shape()[1], x.shape()[2], kh, kw, stride, padding)?;
                let dw = conv2d_kernel_grad(x, &da, &g);
                let db = Tensor::from_parts(vec![out_channels], channel_sum(da.data(), out_channels));
                (conv2d_input_grad(&da, &self.params[0], &g), vec![dw, db])
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                stride,
                padding,
            ..
            } => {
                let batch = x.batch();
                let g = ConvGeometry::transpose(x.shape()[1], x.shape()[2], kh, kw, stride, padding)?;
                // The layer computes C^T x for the convolution C with this
                // kernel, so dx = C(da) and dK is C's kernel gradient with
                // the roles of input and upstream gradient swapped.
                let mut dx = vec![T::zero(); x.len()];
                correlate(da.data(), batch, out_channels, self.params[0].data(), in_channels, &g, &mut dx);
                let mut dw = vec![T::zero(); self.params[0].len()];
                correlate_kernel_grad(da.data(), x.data(), batch, out_channels, in_channels, &g, &mut dw);
                let db = channel_sum(da.data(), out_channels);
                (
                    Tensor::from_parts(x.shape().to_vec(), dx),
                    vec![
                        Tensor::from_parts(self.params[0].shape().to_vec(), dw),
                        Tensor::from_parts(vec![out_channels], db),
                    ],
                )
            }
            LayerSpec::Dense { units, .. } => {
                let dw = x.transpose()?.matmul(&da)?;
                let db = Tensor::from_parts(vec![units], channel_sum(da.data(), units));
                (da.matmul(&self.params[0].transpose()?)?, vec![dw, db])
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => (da.reshape(x.shape())?, Vec::new()),
            LayerSpec::Activation { .. } => (da, Vec::new()),
        };
        let dx = dx.finite("backward")?;
        let grads = grads
            .into_iter()
            .map(|g| g.finite("backward"))
            .collect::<Result<Vec<_>>>()?;
        Ok((dx, GradientSet::new(grads)))
    }
}

/// Feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T = f32> {
    layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut SeededRng) -> Result<Self> {
        specs
            .iter()
            .cloned()
            .map(|s| Layer::new(s, rng))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer<T>> {
        self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params().iter())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut())
    }

    pub fn cast<U: Real>(&self) -> Result<Sequential<U>> {
        Ok(Sequential::new(
            self.layers.iter().map(Layer::cast).collect::<Result<_>>()?,
        ))
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h).map_err(|e| e.in_layer(i))?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h).map_err(|e| e.in_layer(i))?;
        }
        Ok(h)
    }

    /// Gradients for every parameter of the stack, in layer order.
    pub fn backward(&self, dout: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        let mut grad = dout.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, g) = layer.backward(&grad).map_err(|e| e.in_layer(i))?;
            per_layer.push(g);
            grad = dx;
        }
        let mut all = GradientSet::default();
        for g in per_layer.into_iter().rev() {
            all.append(g);
        }
        Ok((grad, all))
    }
}
