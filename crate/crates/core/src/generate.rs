//! Autoregressive sampling, completion, super-resolution and sequential
//! likelihood evaluation.

use crate::dist::{categorical_log_probs, categorical_sample, dmol_sample, DmolParams};
use crate::error::{invalid, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::model::{Example, Head, ImageTransformer, Mode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Temperatures that worked best at full scale.
pub const TUNED_TEMPERATURE: (f64, f64) = (0.8, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub seed: u64,
    /// Refuse models with more output positions than this.
    pub max_positions: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: TUNED_TEMPERATURE.1,
            seed: 0,
            max_positions: 1 << 16,
        }
    }
}

impl SamplerConfig {
    pub fn new(temperature: f64, seed: u64) -> Self {
        Self {
            temperature,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Image values making up output position `pos`: one channel for
/// categorical models, a whole pixel otherwise.
fn position_values<T: Scalar>(model: &ImageTransformer<T>, pos: usize) -> std::ops::Range<usize> {
    match model.head() {
        Head::Categorical(_) => pos..pos + 1,
        Head::Dmol(_) => pos * CHANNELS..(pos + 1) * CHANNELS,
    }
}

/// Log-probability of every output position of `image` under `outputs`.
pub fn position_log_probs<T: Scalar>(model: &ImageTransformer<T>, outputs: &Tensor<T>, image: &Image) -> Result<Vec<f64>> {
    match model.head() {
        Head::Categorical(_) => Ok(image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| categorical_log_probs(outputs.row(i))[v as usize])
            .collect()),
        Head::Dmol(h) => image
            .pixels()
            .into_iter()
            .enumerate()
            .map(|(i, px)| Ok(DmolParams::from_row(outputs.row(i), h.mixtures)?.log_prob(px)))
            .collect(),
    }
}

/// Teacher-forced NLL in nats of one example, accumulated in `f64` from the
/// per-position log-probabilities.
pub fn teacher_forced_nll<T: Scalar>(model: &ImageTransformer<T>, ex: &Example) -> Result<f64> {
    let (_, outs) = model.forward_train(std::slice::from_ref(ex), &mut Rng::new(0), false)?;
    Ok(-position_log_probs(model, &outs[0], ex.image)?.iter().sum::<f64>())
}

/// Evaluates the decoder on `image` and returns its outputs at one position.
struct Stepper<'m, T: Scalar> {
    model: &'m ImageTransformer<T>,
    class: Option<usize>,
    enc: Option<Tensor<T>>,
}

impl<'m, T: Scalar> Stepper<'m, T> {
    fn new(model: &'m ImageTransformer<T>, class: Option<usize>, source: Option<&Image>) -> Result<Self> {
        let c = model.config();
        match (c.mode, source) {
            (Mode::EncoderDecoder, None) => return Err(invalid("encoder-decoder model needs a source image")),
            (Mode::DecoderOnly, Some(_)) => return Err(invalid("decoder-only model takes no source image")),
            _ => {}
        }
        match (c.n_classes, class) {
            (Some(n), Some(k)) if k >= n => {
                return Err(Error::IndexOutOfRange {
                    what: "class id",
                    index: k,
                    limit: n,
                })
            }
            (Some(_), None) => return Err(invalid("class-conditional model needs a class id")),
            (None, Some(_)) => return Err(invalid("model has no class embeddings")),
            _ => {}
        }
        let enc = source.map(|s| model.encode(s)).transpose()?;
        Ok(Self { model, class, enc })
    }

    fn outputs(&self, image: &Image) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g);
        let enc = self.enc.as_ref().map(|e| g.constant(e.clone()));
        let out = self.model.decode(&mut g, &p, image, self.class, enc, &mut Rng::new(0), false)?;
        Ok(g.value(out).clone())
    }
}

fn check_dims<T: Scalar>(model: &ImageTransformer<T>, image: &Image) -> Result<()> {
    let c = model.config();
    if image.dims() != (c.height, c.width) {
        return Err(invalid(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            c.height,
            c.width
        )));
    }
    Ok(())
}

/// Sampling loop shared by the public entry points. Values at ranks not yet
/// generated are set to `placeholder`; the causal masks guarantee they are
/// never read.
#[allow(clippy::too_many_arguments)]
fn sample_from<T: Scalar>(
    model: &ImageTransformer<T>,
    partial: &Image,
    known_ranks: usize,
    cfg: &SamplerConfig,
    class: Option<usize>,
    source: Option<&Image>,
    placeholder: u8,
) -> Result<Image> {
    cfg.validate()?;
    check_dims(model, partial)?;
    let n = model.n_positions();
    if n > cfg.max_positions {
        return Err(invalid(format!("model has {n} positions, limit is {}", cfg.max_positions)));
    }
    if known_ranks > n {
        return Err(invalid(format!("prefix {known_ranks} exceeds {n} positions")));
    }
    let stepper = Stepper::new(model, class, source)?;
    let order = &model.plan().gen_order;
    let mut img = partial.clone();
    for &pos in &order[known_ranks..] {
        for i in position_values(model, pos) {
            img.data_mut()[i] = placeholder;
        }
    }
    let rng = Rng::new(cfg.seed);
    for (r, &pos) in order.iter().enumerate().skip(known_ranks) {
        let out = stepper.outputs(&img)?;
        let mut step_rng = rng.split(r as u64);
        match model.head() {
            Head::Categorical(_) => {
                img.data_mut()[pos] = categorical_sample(out.row(pos), cfg.temperature, &mut step_rng)?;
            }
            Head::Dmol(h) => {
                let params = DmolParams::from_row(out.row(pos), h.mixtures)?;
                let px = dmol_sample(&params, cfg.temperature, &mut step_rng)?;
                img.data_mut()[pos * CHANNELS..(pos + 1) * CHANNELS].copy_from_slice(&px);
            }
        }
    }
    Ok(img)
}

/// Samples a whole image in generation order.
pub fn generate<T: Scalar>(
    model: &ImageTransformer<T>,
    cfg: &SamplerConfig,
    class: Option<usize>,
    source: Option<&Image>,
) -> Result<Image> {
    let c = model.config();
    let blank = Image::filled(c.height, c.width, [0; 3]);
    sample_from(model, &blank, 0, cfg, class, source, 0)
}

/// Keeps the first `known_ranks` positions of `partial` (in generation
/// order) and samples the rest.
pub fn complete<T: Scalar>(
    model: &ImageTransformer<T>,
    partial: &Image,
    known_ranks: usize,
    cfg: &SamplerConfig,
    class: Option<usize>,
    source: Option<&Image>,
) -> Result<Image> {
    sample_from(model, partial, known_ranks, cfg, class, source, 0)
}

/// Samples a high-resolution image conditioned on `low`. The encoder runs
/// once per call.
pub fn superres<T: Scalar>(model: &ImageTransformer<T>, low: &Image, cfg: &SamplerConfig) -> Result<Image> {
    if model.config().mode != Mode::EncoderDecoder {
        return Err(invalid("super-resolution needs an encoder-decoder model"));
    }
    generate(model, cfg, None, Some(low))
}

/// NLL in nats of `image` accumulated one generation step at a time, each
/// step seeing only the values generated before it.
pub fn sequential_nll<T: Scalar>(
    model: &ImageTransformer<T>,
    image: &Image,
    class: Option<usize>,
    source: Option<&Image>,
) -> Result<f64> {
    check_dims(model, image)?;
    let stepper = Stepper::new(model, class, source)?;
    let order = &model.plan().gen_order;
    let mut known = image.clone();
    for &pos in order {
        for i in position_values(model, pos) {
            known.data_mut()[i] = 0;
        }
    }
    let mut total = 0.0;
    for &pos in order {
        let out = stepper.outputs(&known)?;
        let lp = match model.head() {
            Head::Categorical(_) => categorical_log_probs(out.row(pos))[image.data()[pos] as usize],
            Head::Dmol(h) => DmolParams::from_row(out.row(pos), h.mixtures)?.log_prob(image.pixel(pos / image.width(), pos % image.width())),
        };
        total -= lp;
        for i in position_values(model, pos) {
            known.data_mut()[i] = image.data()[i];
        }
    }
    Ok(total)
}

/// Mean squared difference, in `[0, 1]` intensity units, between `low` and
/// the 4×4 box-filtered `sample`.
pub fn consistency(low: &Image, sample: &Image) -> Result<f64> {
    const F: usize = 4;
    if sample.dims() != (low.height() * F, low.width() * F) {
        return Err(invalid(format!(
            "sample is {}x{}, expected 4x the {}x{} input",
            sample.height(),
            sample.width(),
            low.height(),
            low.width()
        )));
    }
    let mut sum = 0.0;
    for r in 0..low.height() {
        for c in 0..low.width() {
            for ch in 0..CHANNELS {
                let mut acc = 0.0;
                for dr in 0..F {
                    for dc in 0..F {
                        acc += sample.get(r * F + dr, c * F + dc, ch) as f64;
                    }
                }
                let diff = acc / (F * F) as f64 / 255.0 - low.get(r, c, ch) as f64 / 255.0;
                sum += diff * diff;
            }
        }
    }
    Ok(sum / low.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Scheme;
    use crate::dist::Distribution;
    use crate::model::{Model32, Model64, ModelConfig};
    use crate::tensor::Tensor;

    fn config(scheme: Scheme, distribution: Distribution, mode: Mode) -> ModelConfig {
        ModelConfig {
            layers: 2,
            encoder_layers: 1,
            d: 8,
            heads: 2,
            d_ff: 16,
            scheme,
            distribution,
            mode,
            height: 4,
            width: 4,
            source_height: 1,
            source_width: 1,
            ..ModelConfig::default()
        }
    }

    fn forced_head(model: &mut Model32, target: &Image) {
        // zero weights; the bias alone decides, so every position predicts the
        // same value: works when the target is constant
        let w = model.params().find("head.cat.w").unwrap();
        let b = model.params().find("head.cat.b").unwrap();
        let shape = model.params().get(w).shape().to_vec();
        *model.params_mut().get_mut(w) = Tensor::zeros(&shape);
        let mut bias = vec![0.0f32; 256];
        bias[target.data()[0] as usize] = 1e4;
        *model.params_mut().get_mut(b) = Tensor::new(vec![256], bias).unwrap();
    }

    #[test]
    fn forced_head_reproduces_image() {
        let mut m = Model32::build(config(Scheme::Local1d { l_q: 8, l_m: 8 }, Distribution::Categorical, Mode::DecoderOnly), &mut Rng::new(1)).unwrap();
        let target = Image::filled(4, 4, [77, 77, 77]);
        forced_head(&mut m, &target);
        assert_eq!(generate(&m, &SamplerConfig::new(1.0, 3), None, None).unwrap(), target);
        assert!(sequential_nll(&m, &target, None, None).unwrap() < 1e-6);
        assert!(teacher_forced_nll(&m, &Example::new(&target)).unwrap() < 1e-6);
    }

    #[test]
    fn uniform_head_costs_ln_256() {
        let mut m = Model64::build(config(Scheme::Full, Distribution::Categorical, Mode::DecoderOnly), &mut Rng::new(1)).unwrap();
        let w = m.params().find("head.cat.w").unwrap();
        *m.params_mut().get_mut(w) = Tensor::zeros(&[8, 256]);
        let img = Image::random(4, 4, &mut Rng::new(2));
        let nll = sequential_nll(&m, &img, None, None).unwrap();
        assert!((nll - 48.0 * 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn low_temperature_is_deterministic() {
        let mut m = Model32::build(config(Scheme::Local1d { l_q: 8, l_m: 8 }, Distribution::Categorical, Mode::DecoderOnly), &mut Rng::new(2)).unwrap();
        let cfg = SamplerConfig::new(0.01, 1);
        assert_eq!(generate(&m, &cfg, None, None).unwrap(), generate(&m, &cfg, None, None).unwrap());
        // sharpen the untrained head so logit gaps dwarf the temperature
        let w = m.params().find("head.cat.w").unwrap();
        *m.params_mut().get_mut(w) = m.params().get(w).map(|v| v * 100.0);
        let a = generate(&m, &cfg, None, None).unwrap();
        let b = generate(&m, &SamplerConfig::new(0.01, 2), None, None).unwrap();
        assert_eq!(a, b);
        assert!(generate(&m, &SamplerConfig::new(0.0, 1), None, None).is_err());
    }

    #[test]
    fn completion_prefix_rules() {
        let m = Model32::build(config(Scheme::Local2d { h_q: 2, w_q: 2, h_m: 1, w_m: 1 }, Distribution::Categorical, Mode::DecoderOnly), &mut Rng::new(3)).unwrap();
        let img = Image::random(4, 4, &mut Rng::new(4));
        let cfg = SamplerConfig::new(1.0, 9);
        assert_eq!(complete(&m, &img, 48, &cfg, None, None).unwrap(), img);
        assert_eq!(complete(&m, &img, 0, &cfg, None, None).unwrap(), generate(&m, &cfg, None, None).unwrap());
        assert!(complete(&m, &img, 49, &cfg, None, None).is_err());
        let order = &m.plan().gen_order;
        for seed in 0..5 {
            let out = complete(&m, &img, 24, &SamplerConfig::new(1.0, seed), None, None).unwrap();
            for &pos in &order[..24] {
                assert_eq!(out.data()[pos], img.data()[pos]);
            }
        }
    }

    #[test]
    fn unknown_values_are_never_read() {
        for dist in [Distribution::Categorical, Distribution::Dmol { mixtures: 2 }] {
            let m = Model32::build(config(Scheme::Local1d { l_q: 4, l_m: 4 }, dist, Mode::DecoderOnly), &mut Rng::new(5)).unwrap();
            let blank = Image::filled(4, 4, [0; 3]);
            let cfg = SamplerConfig::new(1.0, 4);
            let a = sample_from(&m, &blank, 0, &cfg, None, None, 0).unwrap();
            let b = sample_from(&m, &blank, 0, &cfg, None, None, 255).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sequential_matches_teacher_forced() {
        for scheme in [Scheme::Local1d { l_q: 8, l_m: 4 }, Scheme::Local2d { h_q: 2, w_q: 2, h_m: 1, w_m: 1 }] {
            for dist in [Distribution::Categorical, Distribution::Dmol { mixtures: 3 }] {
                for mode in [Mode::DecoderOnly, Mode::EncoderDecoder] {
                    let m = Model32::build(config(scheme, dist, mode), &mut Rng::new(6)).unwrap();
                    let img = Image::random(4, 4, &mut Rng::new(7));
                    let src = Image::random(1, 1, &mut Rng::new(8));
                    let source = (mode == Mode::EncoderDecoder).then_some(&src);
                    let ex = Example {
                        image: &img,
                        class: None,
                        source,
                    };
                    let tf = teacher_forced_nll(&m, &ex).unwrap();
                    let seq = sequential_nll(&m, &img, None, source).unwrap();
                    assert!((tf - seq).abs() < 1e-5, "{scheme:?} {dist:?} {mode:?}: {tf} vs {seq}");
                }
            }
        }
    }

    #[test]
    fn superres_encodes_once() {
        let mut c = config(Scheme::Local1d { l_q: 8, l_m: 8 }, Distribution::Categorical, Mode::EncoderDecoder);
        c.source_height = 2;
        c.source_width = 2;
        c.height = 8;
        c.width = 8;
        let m = Model32::build(c, &mut Rng::new(7)).unwrap();
        let low = Image::random(2, 2, &mut Rng::new(1));
        let before = m.encoder_calls();
        let a = superres(&m, &low, &SamplerConfig::new(1.0, 1)).unwrap();
        assert_eq!(m.encoder_calls(), before + 1);
        assert_eq!(a.dims(), (8, 8));
        let b = superres(&m, &low, &SamplerConfig::new(1.0, 2)).unwrap();
        let differ = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        assert!(differ * 100 >= a.len(), "{differ}");
        let dec = Model32::build(ModelConfig::default(), &mut Rng::new(7)).unwrap();
        assert!(superres(&dec, &low, &SamplerConfig::default()).is_err());
    }

    #[test]
    fn consistency_values() {
        let low = Image::random(2, 3, &mut Rng::new(1));
        assert_eq!(consistency(&low, &low.upscale_nearest(4).unwrap()).unwrap(), 0.0);
        let black = Image::filled(2, 2, [0; 3]);
        let white = Image::filled(8, 8, [255; 3]);
        assert_eq!(consistency(&black, &white).unwrap(), 1.0);
        assert!(consistency(&black, &Image::filled(4, 4, [0; 3])).is_err());
    }
}
