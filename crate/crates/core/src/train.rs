//! Maximum-likelihood training with Adam and a warmup schedule.

use std::fmt;

use crate::dist::bits_per_dim;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::model::{Example, ImageTransformer};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{finite_diff_check_piecewise, CheckOptions, GradCheck};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup: usize,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            warmup: 4000,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
            grad_clip: Some(1.0),
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("warmup, batch_size and eval_interval must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::Config("lr_scale must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, d: usize, warmup: usize) -> Result<f64> {
    if step == 0 || warmup == 0 || d == 0 {
        return Err(invalid("lr_schedule needs step, d and warmup >= 1"));
    }
    let s = step as f64;
    Ok((d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    rate: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(invalid(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = params.get_mut(id);
        if grads[i].shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: grads[i].shape().to_vec(),
            });
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i].data()[j].to_f64_lossy();
            let mj = cfg.beta1 * m[j].to_f64_lossy() + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j].to_f64_lossy() + (1.0 - cfg.beta2) * g * g;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let update = rate * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *x = T::from_f64_lossy(x.to_f64_lossy() - update);
        }
    }
    Ok(())
}

/// An owned training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub class: Option<usize>,
    pub source: Option<Image>,
}

impl Sample {
    pub fn new(image: Image) -> Self {
        Self {
            image,
            class: None,
            source: None,
        }
    }

    pub fn as_example(&self) -> Example<'_> {
        Example {
            image: &self.image,
            class: self.class,
            source: self.source.as_ref(),
        }
    }
}

/// One metrics log entry; `nll_nats` is the mean per-image NLL of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub step: usize,
    pub nll_nats: f64,
    pub bits_per_dim: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} nll_nats={:.6} bits_per_dim={:.6}",
            self.step, self.nll_nats, self.bits_per_dim
        )
    }
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &ImageTransformer<T>,
    batch: &[Example],
    rng: &mut Rng,
    training: bool,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let loss = model.batch_loss(&mut g, &p, batch, rng, training)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let all = model
        .params()
        .entries()
        .iter()
        .zip(model.params().ids())
        .map(|(e, id)| grads.param(id).unwrap_or_else(|| Tensor::zeros(e.value.shape())))
        .collect();
    Ok((value, all))
}

fn clip<T: Scalar>(grads: &mut [Tensor<T>], limit: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = T::from_f64_lossy(limit / norm);
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Runs `cfg.steps` optimisation steps and returns the metrics log. Metrics
/// are recorded at step 1, every `eval_interval` steps and at the last step;
/// each entry is also passed to `on_metrics`.
pub fn train<T: Scalar>(
    model: &mut ImageTransformer<T>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&Metrics),
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let (h, w) = (model.config().height, model.config().width);
    let d = model.config().d;
    let root = Rng::new(cfg.seed);
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = Vec::new();
    let (mut cursor, mut epoch) = (0usize, 0u64);
    let mut log = Vec::new();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                root.split(epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            batch.push(data[order[cursor]].as_example());
            cursor += 1;
        }
        let mut drop_rng = root.split(u64::MAX - step as u64);
        let (loss, mut grads) = loss_and_grads(model, &batch, &mut drop_rng, true)?;
        if let Some(limit) = cfg.grad_clip {
            clip(&mut grads, limit);
        }
        let rate = cfg.lr_scale * lr_schedule(step, d, cfg.warmup)?;
        adam_step(model.params_mut(), &grads, &mut state, rate, cfg)?;
        if step == 1 || step % cfg.eval_interval == 0 || step == cfg.steps {
            let nll = loss / batch.len() as f64;
            let m = Metrics {
                step,
                nll_nats: nll,
                bits_per_dim: bits_per_dim(nll, h, w)?,
            };
            on_metrics(&m);
            log.push(m);
        }
    }
    Ok(log)
}

/// Mean teacher-forced bits/dim over `data` with dropout off.
pub fn evaluate<T: Scalar>(model: &ImageTransformer<T>, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    for s in data {
        let (nll, _) = model.forward_train(&[s.as_example()], &mut Rng::new(0), false)?;
        total += nll;
    }
    let (h, w) = (model.config().height, model.config().width);
    bits_per_dim(total / data.len() as f64, h, w)
}

/// Jittered points tried before giving up on reaching `min_coords`.
const GRADCHECK_ATTEMPTS: usize = 8;

/// Finite-difference check of the full training loss of a 64-bit model.
///
/// Every parameter gets N(0, 0.05) noise first so that zero-initialised
/// biases and unit gains are generic points. At least `min_coords`
/// coordinates are sampled, spread evenly so every tensor is covered.
/// Coordinates whose probes cross a ReLU or clamp kink are replaced; if a
/// point sits so close to a kink that too few coordinates survive, a fresh
/// jitter is drawn. Only kink crossings, never the analytic values, decide
/// which coordinates are compared.
pub fn check_model_gradients(
    model: &ImageTransformer<f64>,
    batch: &[Example],
    min_coords: usize,
    rng: &mut Rng,
) -> Result<(GradCheck, Vec<String>)> {
    let names: Vec<String> = model.params().entries().iter().map(|e| e.name.clone()).collect();
    let opts = CheckOptions {
        step: 2e-3,
        samples_per_tensor: min_coords.div_ceil(names.len()),
    };
    let mut best: Option<GradCheck> = None;
    for _ in 0..GRADCHECK_ATTEMPTS {
        let mut store = model.params().clone();
        for id in model.params().ids() {
            for v in store.get_mut(id).data_mut() {
                *v += 0.05 * rng.normal();
            }
        }
        let probe = model.with_params(store);
        let (_, analytic) = loss_and_grads(&probe, batch, &mut Rng::new(0), false)?;
        let params: Vec<Tensor<f64>> = probe.params().entries().iter().map(|e| e.value.clone()).collect();
        let template = probe.params();
        let loss = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
            let mut store = template.clone();
            for (id, v) in template.ids().zip(values) {
                *store.get_mut(id) = v.clone();
            }
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let loss = probe.batch_loss(&mut g, &p, batch, &mut Rng::new(0), false)?;
            Ok((g.value(loss).item(), g.piece_signature()))
        };
        let report = finite_diff_check_piecewise(loss, &params, &analytic, &opts, rng)?;
        if report.checks.len() >= min_coords {
            return Ok((report, names));
        }
        if best.as_ref().is_none_or(|b| report.checks.len() > b.checks.len()) {
            best = Some(report);
        }
    }
    Ok((best.expect("at least one attempt"), names))
}
