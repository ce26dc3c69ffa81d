//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check draws a small random instance in `f64`, compares the analytic
//! gradient against `(f(x + h) - f(x - h)) / 2h` for every input and
//! parameter entry, and reports the worst relative error. Instances whose
//! ReLU pre-activations sit within [`KINK_MARGIN`] of zero are redrawn, since
//! the difference quotient straddles the kink there.

use alloc::{string::String, vec, vec::Vec};


use crate::nn::{Activation, GradientSet, Layer, LayerKind, LayerSpec};
use crate::vae::{
    elbo_grads, elbo_loss, reparameterize_backward, reparameterize_with, LatentDistribution,
    VaeConfig, VaeModel, LATENT_DIM,
};
use crate::{Padding, Result, SeededRng, Tensor};

/// Difference step.
pub const STEP: f64 = 1e-4;
/// Largest acceptable relative error.
pub const THRESHOLD: f64 = 1e-3;
/// Denominator floor: entries whose true gradient is below this are compared
/// in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// What a check exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Layer(LayerKind),
    /// ReLU or sigmoid as a standalone layer.
    StandaloneActivation(Activation),
    /// `z = mu + exp(0.5 logvar) * eps` with frozen `eps`.
    SamplingHead,
    ElboLoss,
    /// Scalar ELBO of a whole tiny model against every parameter.
    EndToEnd,
}

impl Target {
    pub fn name(&self) -> String {
        match self {
            Target::Layer(kind) => kind.name().into(),
            Target::StandaloneActivation(a) => alloc::format!("activation:{a:?}").to_lowercase(),
            Target::SamplingHead => "sampling_head".into(),
            Target::ElboLoss => "elbo_loss".into(),
            Target::EndToEnd => "vae_end_to_end".into(),
        }
    }

    /// Every target the full suite covers.
    pub fn all() -> Vec<Target> {
        vec![
            Target::Layer(LayerKind::Conv2d),
            Target::Layer(LayerKind::ConvTranspose2d),
            Target::Layer(LayerKind::Dense),
            Target::Layer(LayerKind::Flatten),
            Target::Layer(LayerKind::Reshape),
            Target::StandaloneActivation(Activation::Relu),
            Target::StandaloneActivation(Activation::Sigmoid),
            Target::SamplingHead,
            Target::ElboLoss,
            Target::EndToEnd,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub target: Target,
    pub instances: usize,
    /// Number of gradient entries compared.
    pub entries: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(CheckResult::passed)
    }
}

/// Negative control: analytic gradients of `target` are scaled by this
/// factor before comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub target: Target,
    pub scale: f64,
}

#[derive(Default)]
struct Worst {
    entries: usize,
    max: f64,
}

impl Worst {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.entries += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max || e.is_nan() {
            self.max = if e.is_nan() { f64::INFINITY } else { e };
        }
    }

    fn compare(&mut self, analytic: &Tensor<f64>, numeric: &[f64]) {
        for (&a, &n) in analytic.data().iter().zip(numeric) {
            self.record(a, n);
        }
    }
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - STEP;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * STEP));
    }
    Ok(out)
}

fn random(shape: &[usize], rng: &mut SeededRng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi)).expect("non-empty shape")
}

fn pick(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + (rng.uniform() * (hi - lo + 1) as f64) as usize
}

fn pick_activation(rng: &mut SeededRng) -> Activation {
    [Activation::Linear, Activation::Relu, Activation::Sigmoid][pick(rng, 0, 2)]
}

fn random_instance(target: Target, rng: &mut SeededRng) -> (LayerSpec, Vec<usize>) {
    let batch = pick(rng, 1, 2);
    match target {
        Target::Layer(LayerKind::Conv2d) => {
            let (h, w) = (pick(rng, 3, 6), pick(rng, 3, 6));
            let (cin, cout) = (pick(rng, 1, 3), pick(rng, 1, 3));
            let k = pick(rng, 1, 3);
            let spec = LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: [k, pick(rng, 1, 3)],
                stride: pick(rng, 1, 2),
                padding: if rng.uniform() < 0.5 { Padding::Same } else { Padding::Valid },
                activation: pick_activation(rng),
            };
            (spec, vec![batch, h, w, cin])
        }
        Target::Layer(LayerKind::ConvTranspose2d) => {
            let (h, w) = (pick(rng, 1, 4), pick(rng, 1, 4));
            let (cin, cout) = (pick(rng, 1, 3), pick(rng, 1, 3));
            let spec = LayerSpec::ConvTranspose2d {
                in_channels: cin,
                out_channels: cout,
                kernel: [pick(rng, 1, 3), pick(rng, 1, 3)],
                stride: pick(rng, 1, 2),
                padding: if rng.uniform() < 0.5 { Padding::Same } else { Padding::Valid },
                activation: pick_activation(rng),
            };
            (spec, vec![batch, h, w, cin])
        }
        Target::Layer(LayerKind::Dense) => {
            let inputs = pick(rng, 1, 6);
            let spec = LayerSpec::Dense {
                inputs,
                units: pick(rng, 1, 5),
                activation: pick_activation(rng),
            };
            (spec, vec![batch, inputs])
        }
        Target::Layer(LayerKind::Flatten) => (
            LayerSpec::Flatten,
            vec![batch, pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3)],
        ),
        Target::Layer(LayerKind::Reshape) => {
            let (a, b) = (pick(rng, 1, 4), pick(rng, 1, 4));
            (LayerSpec::Reshape { shape: vec![a, b] }, vec![batch, a * b])
        }
        Target::Layer(LayerKind::Activation) | Target::StandaloneActivation(_) => {
            let activation = match target {
                Target::StandaloneActivation(a) => a,
                _ => pick_activation(rng),
            };
            (
                LayerSpec::Activation { activation },
                vec![batch, pick(rng, 1, 4), pick(rng, 1, 3)],
            )
        }
        _ => unreachable!("not a single-layer target"),
    }
}

fn linear(spec: &LayerSpec) -> LayerSpec {
    let mut spec = spec.clone();
    match &mut spec {
        LayerSpec::Conv2d { activation, .. }
        | LayerSpec::ConvTranspose2d { activation, .. }
        | LayerSpec::Dense { activation, .. }
        | LayerSpec::Activation { activation } => *activation = Activation::Linear,
        _ => {}
    }
    spec
}

/// Smallest |pre-activation| feeding a ReLU in `layer` for input `x`.
fn relu_margin(layer: &Layer<f64>, x: &Tensor<f64>) -> Result<f64> {
    if layer.spec().activation() != Activation::Relu {
        return Ok(f64::INFINITY);
    }
    let pre = Layer::with_params(linear(layer.spec()), layer.params().to_vec())?.infer(x)?;
    Ok(pre.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

fn fault_scale(fault: Option<Fault>, target: Target) -> f64 {
    match fault {
        Some(f) if f.target == target => f.scale,
        _ => 1.0,
    }
}

fn scaled(t: &Tensor<f64>, s: f64) -> Tensor<f64> {
    t.map(|v| v * s)
}

/// Checks input, weight and bias gradients of `instances` random layers.
pub fn check_layer(target: Target, instances: usize, seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let corrupt = fault_scale(fault, target);
    let mut worst = Worst::default();
    let mut done = 0;
    while done < instances {
        let (spec, shape) = random_instance(target, &mut rng);
        let mut layer = Layer::<f64>::new(spec, &mut rng)?;
        for p in layer.params_mut() {
            *p = random(p.shape(), &mut rng, -1.0, 1.0);
        }
        let x = random(&shape, &mut rng, -1.0, 1.0);
        if relu_margin(&layer, &x)? < KINK_MARGIN {
            continue;
        }
        let y = layer.forward(&x)?;
        let r = random(y.shape(), &mut rng, -1.0, 1.0);
        let (dx, grads) = layer.backward(&r)?;

        let numeric_x = numeric_grad(&x, |xp| layer.infer(xp)?.dot(&r))?;
        worst.compare(&scaled(&dx, corrupt), &numeric_x);
        for (i, g) in grads.iter().enumerate() {
            let numeric = numeric_grad(&layer.params()[i].clone(), |pp| {
                let mut params = layer.params().to_vec();
                params[i] = pp.clone();
                Layer::with_params(layer.spec().clone(), params)?.infer(&x)?.dot(&r)
            })?;
            worst.compare(&scaled(g, corrupt), &numeric);
        }
        done += 1;
    }
    Ok(CheckResult {
        target,
        instances,
        entries: worst.entries,
        max_rel_error: worst.max,
    })
}

fn random_dist(rng: &mut SeededRng, batch: usize) -> Result<LatentDistribution<f64>> {
    LatentDistribution::new(
        random(&[batch, LATENT_DIM], rng, -2.0, 2.0),
        random(&[batch, LATENT_DIM], rng, -3.0, 1.0),
    )
}

/// `sum(r * z)` against `mu` and `logvar` with `eps` held fixed.
pub fn check_sampling_head(instances: usize, seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let corrupt = fault_scale(fault, Target::SamplingHead);
    let mut worst = Worst::default();
    for _ in 0..instances {
        let batch = pick(&mut rng, 1, 3);
        let dist = random_dist(&mut rng, batch)?;
        let mut eps = vec![0.0; batch * LATENT_DIM];
        rng.fill_normal(&mut eps);
        let eps = Tensor::new([batch, LATENT_DIM], eps)?;
        let sample = reparameterize_with(&dist, eps.clone())?;
        let r = random(sample.z.shape(), &mut rng, -1.0, 1.0);
        let (dmu, dlogvar) = reparameterize_backward(&r, &dist, &sample)?;

        let num_mu = numeric_grad(&dist.mu, |mu| {
            let d = LatentDistribution::new(mu.clone(), dist.logvar.clone())?;
            reparameterize_with(&d, eps.clone())?.z.dot(&r)
        })?;
        let num_lv = numeric_grad(&dist.logvar, |lv| {
            let d = LatentDistribution::new(dist.mu.clone(), lv.clone())?;
            reparameterize_with(&d, eps.clone())?.z.dot(&r)
        })?;
        worst.compare(&scaled(&dmu, corrupt), &num_mu);
        worst.compare(&scaled(&dlogvar, corrupt), &num_lv);
    }
    Ok(CheckResult {
        target: Target::SamplingHead,
        instances,
        entries: worst.entries,
        max_rel_error: worst.max,
    })
}

/// Total ELBO against the reconstruction, `mu` and `logvar`.
pub fn check_elbo(instances: usize, seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    let mut rng = SeededRng::new(seed);
    let corrupt = fault_scale(fault, Target::ElboLoss);
    let mut worst = Worst::default();
    for _ in 0..instances {
        let batch = pick(&mut rng, 1, 3);
        let pixels = pick(&mut rng, 1, 6);
        let x = random(&[batch, pixels], &mut rng, 0.0, 1.0);
        let x_hat = random(&[batch, pixels], &mut rng, 0.05, 0.95);
        let dist = random_dist(&mut rng, batch)?;
        let (dx_hat, dmu, dlogvar) = elbo_grads(&x, &x_hat, &dist)?;
        let total = |xh: &Tensor<f64>, d: &LatentDistribution<f64>| Ok(elbo_loss(&x, xh, d)?.total);
        let num_xh = numeric_grad(&x_hat, |xh| total(xh, &dist))?;
        let num_mu = numeric_grad(&dist.mu, |mu| {
            total(&x_hat, &LatentDistribution::new(mu.clone(), dist.logvar.clone())?)
        })?;
        let num_lv = numeric_grad(&dist.logvar, |lv| {
            total(&x_hat, &LatentDistribution::new(dist.mu.clone(), lv.clone())?)
        })?;
        worst.compare(&scaled(&dx_hat, corrupt), &num_xh);
        worst.compare(&scaled(&dmu, corrupt), &num_mu);
        worst.compare(&scaled(&dlogvar, corrupt), &num_lv);
    }
    Ok(CheckResult {
        target: Target::ElboLoss,
        instances,
        entries: worst.entries,
        max_rel_error: worst.max,
    })
}

/// Smallest |pre-activation| at any ReLU of the model on `x` with noise `eps`.
fn model_relu_margin(model: &VaeModel<f64>, x: &Tensor<f64>, eps: &Tensor<f64>) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let layers: Vec<&Layer<f64>> = model.encoder.layers().collect();
    let (trunk, heads) = layers.split_at(layers.len() - 2);
    let mut h = x.clone();
    for layer in trunk {
        margin = margin.min(relu_margin(layer, &h)?);
        h = layer.infer(&h)?;
    }
    let dist = LatentDistribution::new(heads[0].infer(&h)?, heads[1].infer(&h)?)?;
    let mut h = reparameterize_with(&dist, eps.clone())?.z;
    for layer in model.decoder.layers() {
        margin = margin.min(relu_margin(layer, &h)?);
        h = layer.infer(&h)?;
    }
    Ok(margin)
}

/// Scalar ELBO of a [`VaeConfig::TINY`] model, batch of two, frozen noise,
/// against every parameter.
pub fn check_end_to_end(seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    let corrupt = fault_scale(fault, Target::EndToEnd);
    let cfg = VaeConfig::TINY;
    let mut attempt = seed;
    let (mut model, x, eps) = loop {
        let model = VaeModel::<f64>::new(&cfg, attempt)?;
        let mut rng = SeededRng::with_stream(attempt, 1);
        let x = random(&[2, cfg.height, cfg.width, 1], &mut rng, 0.0, 1.0);
        let mut eps = vec![0.0; 2 * LATENT_DIM];
        rng.fill_normal(&mut eps);
        let eps = Tensor::new([2, LATENT_DIM], eps)?;
        if model_relu_margin(&model, &x, &eps)? >= KINK_MARGIN * 0.1 {
            break (model, x, eps);
        }
        attempt = attempt.wrapping_add(1);
    };
    let (_, grads) = model.loss_and_grads(&x, eps.clone())?;
    model.clear_caches();
    let grads: GradientSet<f64> = grads;
    let mut worst = Worst::default();
    let params: Vec<Tensor<f64>> = model.params().cloned().collect();
    for (i, g) in grads.iter().enumerate() {
        let numeric = numeric_grad(&params[i], |pp| {
            let mut probe = model.clone();
            *probe.params_mut().nth(i).expect("index in range") = pp.clone();
            Ok(probe.loss_with_eps(&x, &eps)?.total)
        })?;
        worst.compare(&scaled(g, corrupt), &numeric);
    }
    Ok(CheckResult {
        target: Target::EndToEnd,
        instances: 1,
        entries: worst.entries,
        max_rel_error: worst.max,
    })
}

/// Runs every check with `instances` random instances per single-layer
/// target.
pub fn run_all(instances: usize, seed: u64, fault: Option<Fault>) -> Result<Report> {
    let mut results = Vec::new();
    for (i, target) in Target::all().into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64 * 1000);
        let result = match target {
            Target::SamplingHead => check_sampling_head(instances, s, fault)?,
            Target::ElboLoss => check_elbo(instances, s, fault)?,
            Target::EndToEnd => check_end_to_end(s, fault)?,
            t => check_layer(t, instances, s, fault)?,
        };
        results.push(result);
    }
    Ok(Report { results })
}
