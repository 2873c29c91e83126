//! `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. `preset = <name>` is
//! applied first wherever it appears, then the remaining keys override it.
//! Unknown keys are rejected.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::blocks::Scheme;
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::repr::CoordKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

const MODEL_KEYS: &[&str] = &[
    "mode",
    "layers",
    "encoder_layers",
    "d",
    "heads",
    "d_ff",
    "dropout",
    "scheme",
    "l_q",
    "l_m",
    "h_q",
    "w_q",
    "h_m",
    "w_m",
    "distribution",
    "mixtures",
    "coords",
    "n_classes",
    "per_channel_head",
    "height",
    "width",
    "source_height",
    "source_width",
];

const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "warmup",
    "lr_scale",
    "beta1",
    "beta2",
    "eps",
    "grad_clip",
    "eval_interval",
    "seed",
];

fn lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

fn num<V: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value `{v}` for `{key}`")))
}

/// Scheme fields gathered separately so `scheme` and its extents can come
/// in any order.
struct SchemeFields {
    kind: &'static str,
    l_q: usize,
    l_m: usize,
    h_q: usize,
    w_q: usize,
    h_m: usize,
    w_m: usize,
}

impl SchemeFields {
    fn from(s: Scheme) -> Self {
        let mut f = Self {
            kind: "local1d",
            l_q: 16,
            l_m: 16,
            h_q: 2,
            w_q: 4,
            h_m: 2,
            w_m: 2,
        };
        match s {
            Scheme::Full => f.kind = "full",
            Scheme::Local1d { l_q, l_m } => (f.l_q, f.l_m) = (l_q, l_m),
            Scheme::Local2d { h_q, w_q, h_m, w_m } => {
                f.kind = "local2d";
                (f.h_q, f.w_q, f.h_m, f.w_m) = (h_q, w_q, h_m, w_m);
            }
        }
        f
    }

    fn scheme(&self) -> Scheme {
        match self.kind {
            "full" => Scheme::Full,
            "local2d" => Scheme::Local2d {
                h_q: self.h_q,
                w_q: self.w_q,
                h_m: self.h_m,
                w_m: self.w_m,
            },
            _ => Scheme::Local1d { l_q: self.l_q, l_m: self.l_m },
        }
    }
}

fn apply_model(cfg: &mut ModelConfig, sf: &mut SchemeFields, mixtures: &mut usize, dist: &mut &'static str, line: usize, k: &str, v: &str) -> Result<()> {
    match k {
        "mode" => {
            cfg.mode = match v {
                "decoder-only" => Mode::DecoderOnly,
                "encoder-decoder" => Mode::EncoderDecoder,
                _ => return Err(Error::Config(format!("line {line}: mode must be decoder-only or encoder-decoder"))),
            }
        }
        "layers" => cfg.layers = num(line, k, v)?,
        "encoder_layers" => cfg.encoder_layers = num(line, k, v)?,
        "d" => cfg.d = num(line, k, v)?,
        "heads" => cfg.heads = num(line, k, v)?,
        "d_ff" => cfg.d_ff = num(line, k, v)?,
        "dropout" => cfg.dropout = num(line, k, v)?,
        "scheme" => {
            sf.kind = match v {
                "full" => "full",
                "local1d" => "local1d",
                "local2d" => "local2d",
                _ => return Err(Error::Config(format!("line {line}: scheme must be full, local1d or local2d"))),
            }
        }
        "l_q" => sf.l_q = num(line, k, v)?,
        "l_m" => sf.l_m = num(line, k, v)?,
        "h_q" => sf.h_q = num(line, k, v)?,
        "w_q" => sf.w_q = num(line, k, v)?,
        "h_m" => sf.h_m = num(line, k, v)?,
        "w_m" => sf.w_m = num(line, k, v)?,
        "distribution" => {
            *dist = match v {
                "cat" => "cat",
                "dmol" => "dmol",
                _ => return Err(Error::Config(format!("line {line}: distribution must be cat or dmol"))),
            }
        }
        "mixtures" => *mixtures = num(line, k, v)?,
        "coords" => {
            cfg.coords = match v {
                "sinusoidal" => CoordKind::Sinusoidal,
                "learned" => CoordKind::Learned,
                _ => return Err(Error::Config(format!("line {line}: coords must be sinusoidal or learned"))),
            }
        }
        "n_classes" => cfg.n_classes = if v == "none" { None } else { Some(num(line, k, v)?) },
        "per_channel_head" => cfg.per_channel_head = num(line, k, v)?,
        "height" => cfg.height = num(line, k, v)?,
        "width" => cfg.width = num(line, k, v)?,
        "source_height" => cfg.source_height = num(line, k, v)?,
        "source_width" => cfg.source_width = num(line, k, v)?,
        _ => unreachable!("model key list and parser disagree on `{k}`"),
    }
    Ok(())
}

fn apply_train(cfg: &mut TrainConfig, line: usize, k: &str, v: &str) -> Result<()> {
    match k {
        "steps" => cfg.steps = num(line, k, v)?,
        "batch_size" => cfg.batch_size = num(line, k, v)?,
        "warmup" => cfg.warmup = num(line, k, v)?,
        "lr_scale" => cfg.lr_scale = num(line, k, v)?,
        "beta1" => cfg.beta1 = num(line, k, v)?,
        "beta2" => cfg.beta2 = num(line, k, v)?,
        "eps" => cfg.eps = num(line, k, v)?,
        "grad_clip" => {
            let c: f64 = num(line, k, v)?;
            cfg.grad_clip = (c > 0.0).then_some(c);
        }
        "eval_interval" => cfg.eval_interval = num(line, k, v)?,
        "seed" => cfg.seed = num(line, k, v)?,
        _ => unreachable!("train key list and parser disagree on `{k}`"),
    }
    Ok(())
}

fn parse(text: &str, allow_train: bool) -> Result<RunConfig> {
    let entries = lines(text)?;
    let mut run = RunConfig::default();
    if let Some((line, _, name)) = entries.iter().find(|(_, k, _)| k == "preset") {
        run.model = ModelConfig::preset(name).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
    }
    let mut sf = SchemeFields::from(run.model.scheme);
    let (mut dist, mut mixtures) = match run.model.distribution {
        Distribution::Categorical => ("cat", 10),
        Distribution::Dmol { mixtures } => ("dmol", mixtures),
    };
    for (line, k, v) in &entries {
        if k == "preset" {
            continue;
        }
        if MODEL_KEYS.contains(&k.as_str()) {
            apply_model(&mut run.model, &mut sf, &mut mixtures, &mut dist, *line, k, v)?;
        } else if allow_train && TRAIN_KEYS.contains(&k.as_str()) {
            apply_train(&mut run.train, *line, k, v)?;
        } else {
            return Err(Error::UnknownKey(k.clone()));
        }
    }
    run.model.scheme = sf.scheme();
    run.model.distribution = if dist == "cat" {
        Distribution::Categorical
    } else {
        Distribution::Dmol { mixtures }
    };
    run.model.validate()?;
    run.train.validate()?;
    Ok(run)
}

/// Parses a full run configuration (model and training keys).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse(text, true)
}

/// Parses model keys only, as stored in checkpoints.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    parse(text, false).map(|r| r.model)
}

/// Every model key written out explicitly; parses back to `cfg`.
pub fn render_model_config(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
    kv(
        "mode",
        match cfg.mode {
            Mode::DecoderOnly => "decoder-only",
            Mode::EncoderDecoder => "encoder-decoder",
        }
        .into(),
    );
    kv("layers", cfg.layers.to_string());
    kv("encoder_layers", cfg.encoder_layers.to_string());
    kv("d", cfg.d.to_string());
    kv("heads", cfg.heads.to_string());
    kv("d_ff", cfg.d_ff.to_string());
    kv("dropout", format!("{:?}", cfg.dropout));
    match cfg.scheme {
        Scheme::Full => kv("scheme", "full".into()),
        Scheme::Local1d { l_q, l_m } => {
            kv("scheme", "local1d".into());
            kv("l_q", l_q.to_string());
            kv("l_m", l_m.to_string());
        }
        Scheme::Local2d { h_q, w_q, h_m, w_m } => {
            kv("scheme", "local2d".into());
            kv("h_q", h_q.to_string());
            kv("w_q", w_q.to_string());
            kv("h_m", h_m.to_string());
            kv("w_m", w_m.to_string());
        }
    }
    match cfg.distribution {
        Distribution::Categorical => kv("distribution", "cat".into()),
        Distribution::Dmol { mixtures } => {
            kv("distribution", "dmol".into());
            kv("mixtures", mixtures.to_string());
        }
    }
    kv(
        "coords",
        match cfg.coords {
            CoordKind::Sinusoidal => "sinusoidal",
            CoordKind::Learned => "learned",
        }
        .into(),
    );
    kv("n_classes", cfg.n_classes.map_or("none".into(), |n| n.to_string()));
    kv("per_channel_head", cfg.per_channel_head.to_string());
    kv("height", cfg.height.to_string());
    kv("width", cfg.width.to_string());
    kv("source_height", cfg.source_height.to_string());
    kv("source_width", cfg.source_width.to_string());
    s
}
