//! The variational autoencoder: convolutional encoder with a Gaussian head,
//! the sampling step, the transposed-convolution decoder and the ELBO.
//!
//! The encoder emits a mean and a log-variance per latent axis. The standard
//! deviation is recovered as `exp(0.5 * logvar)`, which is positive for every
//! finite input, and a sample is drawn as `z = mu + sigma * eps` with
//! `eps ~ N(0, I)` so that gradients reach `mu` and `logvar` while the noise
//! stays outside the differentiated path.

use alloc::{vec, vec::Vec};


use crate::nn::{Activation, GradientSet, Layer, LayerKind, LayerSpec, Sequential};
use crate::optim::AdamState;
use crate::{Error, Padding, Real, Result, SeededRng, Tensor};

/// Width of the latent code. The latent space is drawn as a plane.
pub const LATENT_DIM: usize = 2;

/// Clamp applied to reconstructions before taking logs.
pub const BCE_EPSILON: f64 = 1e-7;

/// Sizes of the reference architecture; everything else is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VaeConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of the two strided convolutions.
    pub channels: [usize; 2],
    /// Units of the dense layer feeding the Gaussian heads.
    pub hidden: usize,
}

impl VaeConfig {
    /// 28x28 digits, 32/64 channels, 16 hidden units.
    pub const MNIST: Self = Self {
        height: 28,
        width: 28,
        channels: [32, 64],
        hidden: 16,
    };

    /// Small enough for finite-difference checks over every parameter.
    pub const TINY: Self = Self {
        height: 8,
        width: 8,
        channels: [2, 4],
        hidden: 4,
    };

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "image size {}x{} must be a positive multiple of 4",
                self.height,
                self.width
            )));
        }
        if self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::InvalidArgument("channel and hidden sizes must be >= 1".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> [usize; 3] {
        [self.height / 4, self.width / 4, self.channels[1]]
    }

    fn conv(in_channels: usize, out_channels: usize, stride: usize, activation: Activation) -> [LayerSpec; 2] {
        let conv = LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: [3, 3],
            stride,
            padding: Padding::Same,
            activation,
        };
        let deconv = LayerSpec::ConvTranspose2d {
            in_channels,
            out_channels,
            kernel: [3, 3],
            stride,
            padding: Padding::Same,
            activation,
        };
        [conv, deconv]
    }

    /// Shared trunk of the encoder, ending in the hidden dense layer.
    pub fn encoder_trunk(&self) -> Vec<LayerSpec> {
        let [c1, c2] = self.channels;
        let [bh, bw, bc] = self.bottleneck();
        let [conv1, _] = Self::conv(1, c1, 2, Activation::Relu);
        let [conv2, _] = Self::conv(c1, c2, 2, Activation::Relu);
        vec![
            conv1,
            conv2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: bh * bw * bc,
                units: self.hidden,
                activation: Activation::Relu,
            },
        ]
    }

    /// Linear head producing either `mu` or `logvar`.
    pub fn encoder_head(&self) -> LayerSpec {
        LayerSpec::Dense {
            inputs: self.hidden,
            units: LATENT_DIM,
            activation: Activation::Linear,
        }
    }

    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let [c1, c2] = self.channels;
        let [bh, bw, bc] = self.bottleneck();
        let [_, up1] = Self::conv(c2, c2, 2, Activation::Relu);
        let [_, up2] = Self::conv(c2, c1, 2, Activation::Relu);
        let [_, out] = Self::conv(c1, 1, 1, Activation::Sigmoid);
        vec![
            LayerSpec::Dense {
                inputs: LATENT_DIM,
                units: bh * bw * bc,
                activation: Activation::Relu,
            },
            LayerSpec::Reshape {
                shape: vec![bh, bw, bc],
            },
            up1,
            up2,
            out,
        ]
    }
}

/// Axis-aligned Gaussian over the latent plane: one mean and one
/// log-variance per axis, no covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution<T = f32> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Real> LatentDistribution<T> {
    pub fn new(mu: Tensor<T>, logvar: Tensor<T>) -> Result<Self> {
        if mu.rank() != 2 || mu.shape()[1] != LATENT_DIM || mu.shape() != logvar.shape() {
            return Err(Error::Dimension {
                op: "latent distribution",
                left: mu.shape().to_vec(),
                right: logvar.shape().to_vec(),
            });
        }
        Ok(Self { mu, logvar })
    }

    pub fn batch(&self) -> usize {
        self.mu.batch()
    }

    pub fn sigma(&self) -> Result<Tensor<T>> {
        sigma_from_logvar(&self.logvar)
    }
}

/// Noise and the resulting latent point.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample<T = f32> {
    pub eps: Tensor<T>,
    pub z: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reconstruction: f64, kl: f64) -> Self {
        Self {
            reconstruction,
            kl,
            total: reconstruction + kl,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.kl.is_finite() && self.total.is_finite()
    }
}

/// `sigma = exp(0.5 * logvar)`.
pub fn sigma_from_logvar<T: Real>(logvar: &Tensor<T>) -> Result<Tensor<T>> {
    logvar.map(|v| (T::lit(0.5) * v).exp()).finite("sigma_from_logvar")
}

/// Draws `eps ~ N(0, I)` and returns `z = mu + sigma * eps`.
pub fn reparameterize<T: Real>(
    dist: &LatentDistribution<T>,
    rng: &mut SeededRng,
) -> Result<LatentSample<T>> {
    let mut eps = vec![0.0; dist.mu.len()];
    rng.fill_normal(&mut eps);
    let eps = Tensor::new(dist.mu.shape(), eps.into_iter().map(T::lit).collect())?;
    reparameterize_with(dist, eps)
}

/// `z = mu + sigma * eps` for a given noise tensor.
pub fn reparameterize_with<T: Real>(
    dist: &LatentDistribution<T>,
    eps: Tensor<T>,
) -> Result<LatentSample<T>> {
    let z = dist.mu.add(&dist.sigma()?.mul(&eps)?)?;
    Ok(LatentSample { eps, z })
}

/// Gradients of the sampling step: `dmu = dz`,
/// `dlogvar = dz * eps * 0.5 * sigma`. The recorded `eps` is treated as a
/// constant; nothing upstream of it receives a gradient.
pub fn reparameterize_backward<T: Real>(
    dz: &Tensor<T>,
    dist: &LatentDistribution<T>,
    sample: &LatentSample<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if dz.shape() != dist.mu.shape() || sample.eps.shape() != dist.mu.shape() {
        return Err(Error::Dimension {
            op: "reparameterize_backward",
            left: dz.shape().to_vec(),
            right: dist.mu.shape().to_vec(),
        });
    }
    let half_sigma = dist.sigma()?.scale(T::lit(0.5))?;
    let dlogvar = dz.mul(&sample.eps)?.mul(&half_sigma)?;
    Ok((dz.clone(), dlogvar))
}

fn bce_bounds<T: Real>() -> (T, T) {
    (T::lit(BCE_EPSILON), T::one() - T::lit(BCE_EPSILON))
}

fn check_pair<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, dist: &LatentDistribution<T>) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Dimension {
            op: "elbo_loss",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    if x.batch() != dist.batch() {
        return Err(Error::Dimension {
            op: "elbo_loss",
            left: x.shape().to_vec(),
            right: dist.mu.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-image reconstruction BCE (summed over pixels) for every image.
pub fn bce_per_image<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Dimension {
            op: "bce",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    let (lo, hi) = bce_bounds::<T>();
    let pixels = x.len() / x.batch();
    Ok(x
        .data()
        .chunks_exact(pixels)
        .zip(x_hat.data().chunks_exact(pixels))
        .map(|(xs, ps)| {
            xs.iter().zip(ps).fold(0.0, |acc, (&t, &p)| {
                let p = p.max(lo).min(hi).as_f64();
                let t = t.as_f64();
                acc - (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
        })
        .collect())
}

/// `e^v - 1 - v`, which is >= 0 for every `v`.
fn kl_log_term(v: f64) -> f64 {
    (v.exp_m1() - v).max(0.0)
}

/// Reconstruction is binary cross-entropy summed over pixels and averaged
/// over the batch; KL is `-0.5 * sum(1 + logvar - mu^2 - exp(logvar))`
/// averaged over the batch. Reconstructions are clamped to
/// `[1e-7, 1 - 1e-7]` before taking logs.
pub fn elbo_loss<T: Real>(
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    dist: &LatentDistribution<T>,
) -> Result<LossBreakdown> {
    check_pair(x, x_hat, dist)?;
    let batch = x.batch() as f64;
    let recon = bce_per_image(x, x_hat)?.iter().sum::<f64>() / batch;
    let kl = dist
        .mu
        .data()
        .iter()
        .zip(dist.logvar.data())
        .fold(0.0, |acc, (&m, &lv)| {
            let m = m.as_f64();
            acc + 0.5 * (m * m + kl_log_term(lv.as_f64()))
        })
        / batch;
    Ok(LossBreakdown::new(recon, kl))
}

/// Gradients of [`elbo_loss`]: `(d/dx_hat, d/dmu, d/dlogvar)` of the KL and
/// reconstruction terms.
pub fn elbo_grads<T: Real>(
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    dist: &LatentDistribution<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_pair(x, x_hat, dist)?;
    let inv_batch = T::lit(1.0 / x.batch() as f64);
    let (lo, hi) = bce_bounds::<T>();
    let dx_hat: Vec<T> = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&t, &p)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                (p - t) / (p * (T::one() - p)) * inv_batch
            }
        })
        .collect();
    let dmu = dist.mu.scale(inv_batch)?;
    let half = T::lit(0.5);
    let dlogvar = dist.logvar.map(|v| half * v.exp_m1() * inv_batch);
    Ok((
        Tensor::new(x.shape(), dx_hat)?,
        dmu,
        dlogvar.finite("elbo_grads")?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T = f32> {
    trunk: Sequential<T>,
    mu_head: Layer<T>,
    logvar_head: Layer<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: &VaeConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            trunk: Sequential::from_specs(&config.encoder_trunk(), rng)?,
            mu_head: Layer::new(config.encoder_head(), rng)?,
            logvar_head: Layer::new(config.encoder_head(), rng)?,
        })
    }

    /// Trunk layers followed by the `mu` head and the `logvar` head.
    pub fn from_layers(mut layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.len() < 3 {
            return Err(Error::InvalidArgument(
                "encoder needs a trunk and two heads".into(),
            ));
        }
        let logvar_head = layers.pop().expect("len checked");
        let mu_head = layers.pop().expect("len checked");
        for head in [&mu_head, &logvar_head] {
            match head.spec() {
                LayerSpec::Dense { units, .. } if *units == LATENT_DIM => {}
                other => {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "encoder head must be a dense layer with {LATENT_DIM} units, found {other:?}"
                    )))
                }
            }
        }
        if mu_head.spec() != logvar_head.spec() {
            return Err(Error::InvalidArgument("encoder heads differ in shape".into()));
        }
        Ok(Self {
            trunk: Sequential::new(layers),
            mu_head,
            logvar_head,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.trunk
            .layers()
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
    }

    pub fn into_layers(self) -> Vec<Layer<T>> {
        let mut layers = self.trunk.into_layers();
        layers.push(self.mu_head);
        layers.push(self.logvar_head);
        layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers().flat_map(|l| l.params().iter())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.trunk.params_mut().chain(
            self.mu_head
                .params_mut()
                .iter_mut()
                .chain(self.logvar_head.params_mut().iter_mut()),
        )
    }

    pub fn cast<U: Real>(&self) -> Result<Encoder<U>> {
        Ok(Encoder {
            trunk: self.trunk.cast()?,
            mu_head: self.mu_head.cast()?,
            logvar_head: self.logvar_head.cast()?,
        })
    }

    fn heads_index(&self) -> usize {
        self.trunk.layers().len()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<LatentDistribution<T>> {
        let h = self.trunk.infer(x)?;
        let i = self.heads_index();
        let mu = self.mu_head.infer(&h).map_err(|e| e.in_layer(i))?;
        let logvar = self.logvar_head.infer(&h).map_err(|e| e.in_layer(i + 1))?;
        LatentDistribution::new(mu, logvar)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<LatentDistribution<T>> {
        let h = self.trunk.forward(x)?;
        let i = self.heads_index();
        let mu = self.mu_head.forward(&h).map_err(|e| e.in_layer(i))?;
        let logvar = self.logvar_head.forward(&h).map_err(|e| e.in_layer(i + 1))?;
        LatentDistribution::new(mu, logvar)
    }

    pub fn backward(
        &self,
        dmu: &Tensor<T>,
        dlogvar: &Tensor<T>,
    ) -> Result<(Tensor<T>, GradientSet<T>)> {
        let i = self.heads_index();
        let (dh_mu, g_mu) = self.mu_head.backward(dmu).map_err(|e| e.in_layer(i))?;
        let (dh_lv, g_lv) = self
            .logvar_head
            .backward(dlogvar)
            .map_err(|e| e.in_layer(i + 1))?;
        let (dx, mut grads) = self.trunk.backward(&dh_mu.add(&dh_lv)?)?;
        grads.append(g_mu);
        grads.append(g_lv);
        Ok((dx, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T = f32> {
    stack: Sequential<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(config: &VaeConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stack: Sequential::from_specs(&config.decoder_layers(), rng)?,
        })
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        match layers.first().map(|l| l.spec()) {
            Some(LayerSpec::Dense { inputs, .. }) if *inputs == LATENT_DIM => {}
            _ => {
                return Err(Error::InvalidArgument(alloc::format!(
                    "decoder must start with a dense layer taking {LATENT_DIM} inputs"
                )))
            }
        }
        if layers.last().map(|l| l.spec().activation()) != Some(Activation::Sigmoid) {
            return Err(Error::InvalidArgument(
                "decoder must end in a sigmoid layer".into(),
            ));
        }
        Ok(Self {
            stack: Sequential::new(layers),
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        self.stack.layers()
    }

    pub fn into_layers(self) -> Vec<Layer<T>> {
        self.stack.into_layers()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.stack.params()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.stack.params_mut()
    }

    pub fn cast<U: Real>(&self) -> Result<Decoder<U>> {
        Ok(Decoder {
            stack: self.stack.cast()?,
        })
    }

    fn check_z(z: &Tensor<T>) -> Result<()> {
        if z.rank() != 2 || z.shape()[1] != LATENT_DIM {
            return Err(Error::Dimension {
                op: "decode",
                left: z.shape().to_vec(),
                right: vec![z.batch(), LATENT_DIM],
            });
        }
        Ok(())
    }

    pub fn infer(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_z(z)?;
        self.stack.infer(z)
    }

    pub fn forward(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_z(z)?;
        self.stack.forward(z)
    }

    pub fn backward(&self, dout: &Tensor<T>) -> Result<(Tensor<T>, GradientSet<T>)> {
        self.stack.backward(dout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel<T = f32> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> VaeModel<T> {
    /// Fresh model with Glorot-uniform weights drawn from `seed`.
    pub fn new(config: &VaeConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        Ok(Self {
            encoder: Encoder::new(config, &mut rng)?,
            decoder: Decoder::new(config, &mut rng)?,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.encoder.params().chain(self.decoder.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.encoder.params_mut().chain(self.decoder.params_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Result<VaeModel<U>> {
        Ok(VaeModel {
            encoder: self.encoder.cast()?,
            decoder: self.decoder.cast()?,
        })
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentDistribution<T>> {
        if x.rank() != 4 || x.shape()[3] != 1 {
            return Err(Error::Dimension {
                op: "encode",
                left: x.shape().to_vec(),
                right: vec![x.batch(), 0, 0, 1],
            });
        }
        self.encoder.infer(x)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.infer(z)
    }

    /// Encode, sample with the given noise, decode and score.
    pub fn loss_with_eps(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<LossBreakdown> {
        let dist = self.encode(x)?;
        let sample = reparameterize_with(&dist, eps.clone())?;
        elbo_loss(x, &self.decode(&sample.z)?, &dist)
    }

    /// Full forward and backward pass with fixed noise. Returns the loss and
    /// one gradient per parameter in [`VaeModel::params`] order.
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor<T>,
        eps: Tensor<T>,
    ) -> Result<(LossBreakdown, GradientSet<T>)> {
        let dist = self.encoder.forward(x)?;
        let sample = reparameterize_with(&dist, eps)?;
        let x_hat = self.decoder.forward(&sample.z)?;
        let loss = elbo_loss(x, &x_hat, &dist)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(loss));
        }
        let (dx_hat, dmu_kl, dlogvar_kl) = elbo_grads(x, &x_hat, &dist)?;
        let (dz, decoder_grads) = self.decoder.backward(&dx_hat)?;
        let (dmu, dlogvar) = reparameterize_backward(&dz, &dist, &sample)?;
        let (_, mut grads) = self
            .encoder
            .backward(&dmu.add(&dmu_kl)?, &dlogvar.add(&dlogvar_kl)?)?;
        grads.append(decoder_grads);
        Ok((loss, grads))
    }

    pub fn clear_caches(&mut self) {
        self.encoder.trunk.clear_caches();
        self.encoder.mu_head.clear_cache();
        self.encoder.logvar_head.clear_cache();
        self.decoder.stack.clear_caches();
    }
}

/// One optimization step on `batch`: encode, sample, decode, score,
/// backpropagate and apply Adam. Returns the loss before the update.
pub fn train_step<T: Real>(
    model: &mut VaeModel<T>,
    batch: &Tensor<T>,
    optimizer: &mut AdamState<T>,
    rng: &mut SeededRng,
) -> Result<LossBreakdown> {
    let nan = LossBreakdown::new(f64::NAN, f64::NAN);
    let mut eps = vec![0.0; batch.batch() * LATENT_DIM];
    rng.fill_normal(&mut eps);
    let eps = Tensor::new([batch.batch(), LATENT_DIM], eps.into_iter().map(T::lit).collect())?;
    let (loss, grads) = match model.loss_and_grads(batch, eps) {
        Ok(r) => r,
        Err(Error::NonFinite { .. }) => return Err(Error::Divergence(nan)),
        Err(e) => return Err(e),
    };
    optimizer.apply(model.params_mut(), &grads)?;
    model.clear_caches();
    Ok(loss)
}

/// Kinds of the parameterized layers of a model, in order.
pub fn parameterized_kinds<T: Real>(model: &VaeModel<T>) -> Vec<LayerKind> {
    model
        .encoder
        .layers()
        .chain(model.decoder.layers())
        .filter(|l| !l.params().is_empty())
        .map(Layer::kind)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn dist(mu: [f64; 2], logvar: [f64; 2]) -> LatentDistribution<f64> {
        LatentDistribution::new(
            Tensor::new([1, 2], mu.to_vec()).unwrap(),
            Tensor::new([1, 2], logvar.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn sigma_examples() {
        let s = sigma_from_logvar(&Tensor::new([3], vec![0.0, 2.0 * 2f64.ln(), -2.0]).unwrap()).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!((s.data()[1] - 2.0).abs() < 1e-12);
        assert!((s.data()[2] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sigma_positive_across_f32_range() {
        let lv: Vec<f32> = (0..=1600).map(|i| -80.0 + i as f32 * 0.1).collect();
        let s = sigma_from_logvar(&Tensor::new([lv.len()], lv).unwrap()).unwrap();
        assert!(s.data().iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn sigma_overflow_is_an_error() {
        let lv = Tensor::new([1], vec![200.0f32]).unwrap();
        assert!(matches!(sigma_from_logvar(&lv), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reparameterize_identity() {
        let d = dist([0.3, -1.2], [0.5, -3.0]);
        let s = reparameterize(&d, &mut SeededRng::new(4)).unwrap();
        let sigma = d.sigma().unwrap();
        for i in 0..2 {
            let expect = d.mu.data()[i] + sigma.data()[i] * s.eps.data()[i];
            assert_eq!(s.z.data()[i], expect);
        }
    }

    #[test]
    fn zero_noise_returns_mean() {
        let d = dist([1.5, -2.0], [0.7, 0.1]);
        let s = reparameterize_with(&d, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(s.z, d.mu);
    }

    #[test]
    fn seeded_sampling_reproducible() {
        let d = dist([0.0, 0.0], [0.0, 0.0]);
        let a = reparameterize(&d, &mut SeededRng::new(9)).unwrap();
        let b = reparameterize(&d, &mut SeededRng::new(9)).unwrap();
        let c = reparameterize(&d, &mut SeededRng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z, c.z);
    }

    #[test]
    fn kl_closed_form_examples() {
        let x = Tensor::full(&[1, 2, 2, 1], 0.5);
        let kl = |mu, lv| elbo_loss(&x, &x, &dist(mu, lv)).unwrap().kl;
        assert_eq!(kl([0.0, 0.0], [0.0, 0.0]), 0.0);
        assert_eq!(kl([1.0, 0.0], [0.0, 0.0]), 0.5);
        // -0.5 (1 + lv - e^lv) summed over both axes at lv = 1
        let expect = -(1.0 + 1.0 - 1f64.exp());
        assert!((kl([0.0, 0.0], [1.0, 1.0]) - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_grid() {
        let x = Tensor::full(&[1, 1, 1, 1], 0.5);
        for i in 0..=20 {
            for j in 0..=20 {
                let mu = -5.0 + 0.5 * i as f64;
                let lv = -5.0 + 0.5 * j as f64;
                let kl = elbo_loss(&x, &x, &dist([mu, -mu], [lv, -lv])).unwrap().kl;
                assert!(kl >= 0.0, "mu={mu} lv={lv}: {kl}");
            }
        }
    }

    #[test]
    fn bce_at_half_is_784_ln2() {
        let x = Tensor::<f64>::full(&[2, 28, 28, 1], 0.5);
        let per = bce_per_image(&x, &x).unwrap();
        let direct: f64 = (0..784).map(|_| -(0.5 * 0.5f64.ln() + 0.5 * 0.5f64.ln())).sum();
        for p in per {
            assert!((p - direct).abs() < 1e-9);
            assert!((p - 784.0 * 2f64.ln()).abs() < 1e-9);
        }
        let loss = elbo_loss(&x, &x, &LatentDistribution::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])).unwrap()).unwrap();
        assert!((loss.reconstruction - 543.4273).abs() < 1e-3);
        assert_eq!(loss.total, loss.reconstruction + loss.kl);
    }

    #[test]
    fn bce_clamps_saturated_outputs() {
        let x = Tensor::new([1, 1, 2, 1], vec![1.0f64, 0.0]).unwrap();
        let x_hat = Tensor::new([1, 1, 2, 1], vec![0.0f64, 1.0]).unwrap();
        let b = bce_per_image(&x, &x_hat).unwrap()[0];
        assert!(b.is_finite());
        assert!((b + 2.0 * BCE_EPSILON.ln()).abs() < 1e-6);
    }

    #[test]
    fn loss_rejects_batch_mismatch() {
        let x = Tensor::<f64>::full(&[2, 1, 1, 1], 0.5);
        assert!(elbo_loss(&x, &x, &dist([0.0, 0.0], [0.0, 0.0])).is_err());
    }

    #[test]
    fn model_shapes_and_ranges() {
        let model = VaeModel::<f32>::new(&VaeConfig::MNIST, 0).unwrap();
        let mut rng = SeededRng::new(1);
        let x = Tensor::from_fn(&[3, 28, 28, 1], |_| rng.uniform() as f32).unwrap();
        let d = model.encode(&x).unwrap();
        assert_eq!(d.mu.shape(), &[3, 2]);
        assert!(d.sigma().unwrap().data().iter().all(|&s| s > 0.0));
        let x_hat = model.decode(&d.mu).unwrap();
        assert_eq!(x_hat.shape(), &[3, 28, 28, 1]);
        assert!(x_hat.data().iter().all(|&p| p > 0.0 && p < 1.0));

        let blank = model.encode(&Tensor::zeros(&[1, 28, 28, 1])).unwrap();
        assert!(blank.mu.data().iter().chain(blank.logvar.data()).all(|v| v.is_finite()));
    }

    #[test]
    fn encode_rejects_wrong_input() {
        let model = VaeModel::<f32>::new(&VaeConfig::TINY, 0).unwrap();
        assert!(model.encode(&Tensor::zeros(&[1, 8, 8, 3])).is_err());
        assert!(model.encode(&Tensor::zeros(&[1, 9, 9, 1])).is_err());
        assert!(model.decode(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn inference_is_pure() {
        let model = VaeModel::<f32>::new(&VaeConfig::TINY, 3).unwrap();
        let x = Tensor::full(&[2, 8, 8, 1], 0.25);
        let a = model.encode(&x).unwrap();
        let b = model.encode(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.decode(&a.mu).unwrap(), model.decode(&b.mu).unwrap());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = VaeModel::<f32>::new(&VaeConfig::MNIST, 5).unwrap();
        let b = VaeModel::<f32>::new(&VaeConfig::MNIST, 5).unwrap();
        let c = VaeModel::<f32>::new(&VaeConfig::MNIST, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn reference_architecture_layout() {
        let model = VaeModel::<f32>::new(&VaeConfig::MNIST, 0).unwrap();
        use LayerKind::*;
        assert_eq!(
            parameterized_kinds(&model),
            vec![Conv2d, Conv2d, Dense, Dense, Dense, Dense, ConvTranspose2d, ConvTranspose2d, ConvTranspose2d]
        );
        // conv 320 + 18496, dense 50192, heads 34 + 34, decoder dense 9408,
        // transposed convs 36928 + 18464 + 289
        assert_eq!(model.parameter_count(), 320 + 18_496 + 50_192 + 34 + 34 + 9_408 + 36_928 + 18_464 + 289);
    }

    #[test]
    fn train_steps_reduce_loss_on_fixed_batch() {
        let mut model = VaeModel::<f32>::new(&VaeConfig::TINY, 0).unwrap();
        let mut rng = SeededRng::new(2);
        let x = Tensor::from_fn(&[4, 8, 8, 1], |i| if i % 3 == 0 { 0.9 } else { 0.1 }).unwrap();
        let mut opt = AdamState::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, model.params());
        let eps = Tensor::zeros(&[4, 2]);
        let before = model.loss_with_eps(&x, &eps).unwrap().total;
        for _ in 0..50 {
            train_step(&mut model, &x, &mut opt, &mut rng).unwrap();
        }
        let after = model.loss_with_eps(&x, &eps).unwrap().total;
        assert!(after < before, "{before} -> {after}");
        assert_eq!(opt.step_count(), 50);
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut model = VaeModel::<f32>::new(&VaeConfig::TINY, 0).unwrap();
        let start = model.clone();
        let mut opt = AdamState::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, model.params());
        let x = Tensor::full(&[2, 8, 8, 1], 0.3);
        train_step(&mut model, &x, &mut opt, &mut SeededRng::new(0)).unwrap();
        assert_eq!(model, start);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut model = VaeModel::<f32>::new(&VaeConfig::TINY, 11).unwrap();
            let mut opt = AdamState::new(AdamConfig::default(), model.params());
            let mut rng = SeededRng::new(12);
            let x = Tensor::from_fn(&[3, 8, 8, 1], |i| (i % 7) as f32 / 7.0).unwrap();
            let losses: Vec<f64> = (0..5)
                .map(|_| train_step(&mut model, &x, &mut opt, &mut rng).unwrap().total)
                .collect();
            (model, losses)
        };
        assert_eq!(run(), run());
    }
}
