//! Decoder-only and encoder-decoder image transformers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::attention::{cross_attn_sublayer, ffn_sublayer, self_attn_sublayer, LayerNormParams, LayerParams};
use crate::blocks::{build_mask, plan, validate_plan, BlockPlan, CausalMask, Grid, Scheme};
use crate::dist::{CategoricalHead, DmolHead, Distribution};
use crate::error::{invalid, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::params::{glorot, Bound, ParamStore};
use crate::repr::{add_class_embedding, embed_categorical, embed_ordinal, CoordKind, CoordinateEncoding, EmbeddingTables, Role};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub layers: usize,
    pub encoder_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub scheme: Scheme,
    pub distribution: Distribution,
    pub coords: CoordKind,
    pub n_classes: Option<usize>,
    /// Separate categorical projections per colour channel.
    pub per_channel_head: bool,
    pub height: usize,
    pub width: usize,
    pub source_height: usize,
    pub source_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DecoderOnly,
            layers: 2,
            encoder_layers: 0,
            d: 32,
            heads: 2,
            d_ff: 64,
            dropout: 0.0,
            scheme: Scheme::Local1d { l_q: 16, l_m: 16 },
            distribution: Distribution::Categorical,
            coords: CoordKind::Sinusoidal,
            n_classes: None,
            per_channel_head: false,
            height: 8,
            width: 8,
            source_height: 2,
            source_width: 2,
        }
    }
}

pub const PRESETS: [&str; 4] = ["cifar-cat", "cifar-dmol", "imagenet", "cifar-small"];

impl ModelConfig {
    /// Published 32×32 configurations.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            height: 32,
            width: 32,
            scheme: Scheme::Local1d { l_q: 256, l_m: 256 },
            source_height: 8,
            source_width: 8,
            ..Self::default()
        };
        let (layers, d, heads, d_ff, dropout) = match name {
            "cifar-cat" => (12, 512, 4, 2048, 0.3),
            "cifar-dmol" => (14, 256, 8, 512, 0.2),
            "imagenet" => (12, 512, 8, 2048, 0.1),
            "cifar-small" => (8, 512, 8, 1024, 0.1),
            _ => return Err(Error::Config(format!("unknown preset `{name}`"))),
        };
        let distribution = if name == "cifar-dmol" {
            Distribution::Dmol { mixtures: 10 }
        } else {
            Distribution::Categorical
        };
        Ok(Self {
            layers,
            d,
            heads,
            d_ff,
            dropout,
            distribution,
            ..base
        })
    }

    /// Positions per pixel: 3 for categorical models, 1 for mixture models
    /// whose positions are whole pixels.
    pub fn channels_per_position(&self) -> usize {
        match self.distribution {
            Distribution::Categorical => CHANNELS,
            Distribution::Dmol { .. } => 1,
        }
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.height, self.width, self.channels_per_position())
    }

    pub fn source_grid(&self) -> Grid {
        Grid::new(self.source_height, self.source_width, CHANNELS)
    }

    pub fn plan(&self) -> Result<BlockPlan> {
        plan(self.scheme, self.grid())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d == 0 || self.d_ff == 0 {
            return bad("layers, d and d_ff must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if let Distribution::Dmol { mixtures: 0 } = self.distribution {
            return bad("mixtures must be >= 1".into());
        }
        if self.n_classes == Some(0) {
            return bad("n_classes must be >= 1".into());
        }
        if self.mode == Mode::EncoderDecoder {
            if self.encoder_layers == 0 {
                return bad("encoder-decoder mode needs encoder_layers >= 1".into());
            }
            if self.source_height == 0 || self.source_width == 0 {
                return bad("source dimensions must be positive".into());
            }
        }
        self.scheme.validate()
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Categorical(CategoricalHead),
    Dmol(DmolHead),
}

/// Precomputed gather indices for one decoder layer's block attention.
#[derive(Clone, Debug)]
struct BlockLayout {
    blocks: usize,
    pad_q: usize,
    mem: usize,
    /// Row of `[start; x]` for each padded query slot.
    q_idx: Arc<Vec<Option<usize>>>,
    /// Row of `[start; x]` for each memory slot; slot 0 of every block is the
    /// start vector.
    m_idx: Arc<Vec<Option<usize>>>,
    /// `[blocks, pad_q, mem]`, true where attention is not allowed.
    blocked: Vec<bool>,
    /// Padded query slot holding each position.
    scatter: Arc<Vec<Option<usize>>>,
}

impl BlockLayout {
    fn new(plan: &BlockPlan, masks: &[CausalMask]) -> Self {
        let blocks = plan.blocks.len();
        let pad_q = plan.pad_to;
        let mem = 1 + plan.max_memory();
        let mut q_idx = vec![None; blocks * pad_q];
        let mut m_idx = vec![None; blocks * mem];
        let mut blocked = vec![true; blocks * pad_q * mem];
        let mut scatter = vec![None; plan.n_positions];
        for (b, (block, mask)) in plan.blocks.iter().zip(masks).enumerate() {
            for (i, &q) in block.query.iter().enumerate() {
                q_idx[b * pad_q + i] = Some(q + 1);
                scatter[q] = Some(b * pad_q + i);
            }
            m_idx[b * mem] = Some(0);
            for (j, &m) in block.memory.iter().enumerate() {
                m_idx[b * mem + 1 + j] = Some(m + 1);
            }
            for i in 0..pad_q {
                let row = (b * pad_q + i) * mem;
                blocked[row] = !mask.start[i];
                for j in 0..mask.cols {
                    blocked[row + 1 + j] = !mask.get(i, j);
                }
            }
        }
        Self {
            blocks,
            pad_q,
            mem,
            q_idx: Arc::new(q_idx),
            m_idx: Arc::new(m_idx),
            blocked,
            scatter: Arc::new(scatter),
        }
    }
}

/// One training or evaluation example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a Image,
    pub class: Option<usize>,
    pub source: Option<&'a Image>,
}

impl<'a> Example<'a> {
    pub fn new(image: &'a Image) -> Self {
        Self {
            image,
            class: None,
            source: None,
        }
    }
}

#[derive(Debug)]
pub struct ImageTransformer<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    tables: EmbeddingTables,
    conv: Option<(ParamId, ParamId)>,
    coords: CoordinateEncoding,
    source_coords: Option<CoordinateEncoding>,
    start: ParamId,
    encoder: Vec<LayerParams>,
    decoder: Vec<LayerParams>,
    final_ln: LayerNormParams,
    head: Head,
    plan: BlockPlan,
    masks: Vec<CausalMask>,
    layout: BlockLayout,
    encoder_calls: AtomicUsize,
}

pub type Model32 = ImageTransformer<f32>;
pub type Model64 = ImageTransformer<f64>;

impl<T: Scalar> Clone for ImageTransformer<T> {
    fn clone(&self) -> Self {
        self.with_params(self.params.clone())
    }
}

impl<T: Scalar> ImageTransformer<T> {
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, cfg) = (config.d, &config);
        let enc_dec = cfg.mode == Mode::EncoderDecoder;
        let categorical = cfg.distribution == Distribution::Categorical;
        let mut s = ParamStore::new();
        let tables = EmbeddingTables::new(&mut s, d, enc_dec, categorical, cfg.n_classes, rng);
        let conv = (!categorical).then(|| {
            (
                s.add("embed.conv.w", glorot(&[CHANNELS, d], CHANNELS, d, rng)),
                s.add("embed.conv.b", Tensor::zeros(&[d])),
            )
        });
        let coords = CoordinateEncoding::new(&mut s, "coords.decoder", cfg.coords, cfg.grid(), d, rng)?;
        let source_coords = if enc_dec {
            Some(CoordinateEncoding::new(&mut s, "coords.encoder", cfg.coords, cfg.source_grid(), d, rng)?)
        } else {
            None
        };
        let start = s.add("start", glorot(&[1, d], 1, d, rng));
        let encoder = if enc_dec {
            (0..cfg.encoder_layers)
                .map(|l| LayerParams::new(&mut s, &format!("enc.{l}"), d, cfg.heads, cfg.d_ff, cfg.dropout, false, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let decoder = (0..cfg.layers)
            .map(|l| LayerParams::new(&mut s, &format!("dec.{l}"), d, cfg.heads, cfg.d_ff, cfg.dropout, enc_dec, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNormParams::new(&mut s, "final_ln", d);
        let head = match cfg.distribution {
            Distribution::Categorical => Head::Categorical(CategoricalHead::new(&mut s, d, cfg.per_channel_head, rng)),
            Distribution::Dmol { mixtures } => Head::Dmol(DmolHead::new(&mut s, d, mixtures, rng)),
        };
        let plan = cfg.plan()?;
        validate_plan(&plan).map_err(|v| Error::Config(format!("invalid block plan: {v}")))?;
        let masks = (0..plan.blocks.len())
            .map(|b| build_mask(&plan, b, false))
            .collect::<Result<Vec<_>>>()?;
        let layout = BlockLayout::new(&plan, &masks);
        Ok(Self {
            config,
            params: s,
            tables,
            conv,
            coords,
            source_coords,
            start,
            encoder,
            decoder,
            final_ln,
            head,
            plan,
            masks,
            layout,
            encoder_calls: AtomicUsize::new(0),
        })
    }

    /// Same architecture with different parameter values of possibly
    /// different precision. Names and shapes must match.
    pub fn with_params<U: Scalar>(&self, params: ParamStore<U>) -> ImageTransformer<U> {
        assert_eq!(params.len(), self.params.len(), "parameter count mismatch");
        ImageTransformer {
            config: self.config.clone(),
            params,
            tables: self.tables.clone(),
            conv: self.conv,
            coords: self.coords.clone(),
            source_coords: self.source_coords.clone(),
            start: self.start,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            final_ln: self.final_ln.clone(),
            head: self.head.clone(),
            plan: self.plan.clone(),
            masks: self.masks.clone(),
            layout: self.layout.clone(),
            encoder_calls: AtomicUsize::new(0),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ImageTransformer<U> {
        self.with_params(self.params.cast())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn plan(&self) -> &BlockPlan {
        &self.plan
    }

    pub fn masks(&self) -> &[CausalMask] {
        &self.masks
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    /// Number of encoder evaluations since construction.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    /// Output positions: pixel-channels for categorical models, pixels for
    /// mixture models.
    pub fn n_positions(&self) -> usize {
        self.plan.n_positions
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        let c = &self.config;
        if ex.image.dims() != (c.height, c.width) {
            return Err(invalid(format!(
                "image is {}x{}, model expects {}x{}",
                ex.image.height(),
                ex.image.width(),
                c.height,
                c.width
            )));
        }
        match (c.mode, ex.source) {
            (Mode::EncoderDecoder, None) => Err(invalid("encoder-decoder model needs a source image")),
            (Mode::EncoderDecoder, Some(s)) if s.dims() != (c.source_height, c.source_width) => Err(invalid(format!(
                "source is {}x{}, model expects {}x{}",
                s.height(),
                s.width(),
                c.source_height,
                c.source_width
            ))),
            (Mode::DecoderOnly, Some(_)) => Err(invalid("decoder-only model takes no source image")),
            _ => Ok(()),
        }?;
        match (c.n_classes, ex.class) {
            (Some(_), None) => Err(invalid("class-conditional model needs a class id")),
            (None, Some(_)) => Err(invalid("model has no class embeddings")),
            _ => Ok(()),
        }
    }

    /// Encoder output `[h_s * w_s * 3, d]` inside `g`.
    pub fn encode_in(&self, g: &mut Graph<T>, p: &Bound, source: &Image, rng: &mut Rng, training: bool) -> Result<Var> {
        let coords = self.source_coords.as_ref().ok_or_else(|| invalid("decoder-only model has no encoder"))?;
        if source.dims() != (self.config.source_height, self.config.source_width) {
            return Err(invalid(format!(
                "source is {}x{}, model expects {}x{}",
                source.height(),
                source.width(),
                self.config.source_height,
                self.config.source_width
            )));
        }
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let (n, d) = (source.len(), self.config.d);
        let x = embed_categorical(g, p, &self.tables, source, Role::Source)?;
        let x = g.reshape(x, &[n, d])?;
        let c = coords.encode(g, p)?;
        let mut x = g.add(x, c)?;
        for layer in &self.encoder {
            let q = g.reshape(x, &[1, n, d])?;
            let y = self_attn_sublayer(g, p, layer, q, q, None, rng, training)?;
            let y = g.reshape(y, &[n, d])?;
            x = ffn_sublayer(g, p, layer, y, rng, training)?;
        }
        Ok(x)
    }

    /// Inference-mode encoder output.
    pub fn encode(&self, source: &Image) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = self.encode_in(&mut g, &p, source, &mut Rng::new(0), false)?;
        Ok(g.value(x).clone())
    }

    /// Head outputs for every position: logits `[n, 256]` or mixture
    /// parameters `[h * w, 10 K]`. Each row depends only on positions
    /// generated before it, the class and the encoder output.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Image,
        class: Option<usize>,
        enc: Option<Var>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let (n, d) = (self.n_positions(), self.config.d);
        let emb = match self.conv {
            None => embed_categorical(g, p, &self.tables, image, Role::DecoderInput)?,
            Some((w, b)) => embed_ordinal(g, p[w], p[b], image)?,
        };
        let emb = g.reshape(emb, &[n, d])?;
        let with_start = g.concat_rows(p[self.start], emb)?;
        let order = &self.plan.gen_order;
        let mut shifted = vec![Some(0); n];
        for r in 1..n {
            shifted[order[r]] = Some(order[r - 1] + 1);
        }
        let x = g.gather_rows(with_start, Arc::new(shifted))?;
        let c = self.coords.encode(g, p)?;
        let mut x = g.add(x, c)?;
        if let Some(class) = class {
            x = add_class_embedding(g, p, x, class, &self.tables)?;
        }
        let l = &self.layout;
        for layer in &self.decoder {
            let xs = g.concat_rows(p[self.start], x)?;
            let q = g.gather_rows(xs, l.q_idx.clone())?;
            let q = g.reshape(q, &[l.blocks, l.pad_q, d])?;
            let m = g.gather_rows(xs, l.m_idx.clone())?;
            let m = g.reshape(m, &[l.blocks, l.mem, d])?;
            let y = self_attn_sublayer(g, p, layer, q, m, Some(&l.blocked), rng, training)?;
            let y = g.reshape(y, &[l.blocks * l.pad_q, d])?;
            x = g.gather_rows(y, l.scatter.clone())?;
            if let Some(enc) = enc {
                x = cross_attn_sublayer(g, p, layer, x, enc, rng, training)?;
            }
            x = ffn_sublayer(g, p, layer, x, rng, training)?;
        }
        let x = self.final_ln.apply(g, p, x)?;
        match &self.head {
            Head::Categorical(h) => {
                let channels: Vec<usize> = (0..n).map(|i| i % CHANNELS).collect();
                h.logits(g, p, x, &channels)
            }
            Head::Dmol(h) => h.params(g, p, x),
        }
    }

    /// Summed NLL in nats of `image` under head outputs from [`Self::decode`].
    pub fn nll_of(&self, g: &mut Graph<T>, outputs: Var, image: &Image) -> Result<Var> {
        match &self.head {
            Head::Categorical(_) => g.categorical_nll(outputs, image.data()),
            Head::Dmol(h) => g.dmol_nll(outputs, &image.pixels(), h.mixtures),
        }
    }

    /// Teacher-forced summed NLL of one example, plus its head outputs.
    pub fn example_loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ex: &Example,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Var, Var)> {
        self.check_example(ex)?;
        let enc = match ex.source {
            Some(s) => Some(self.encode_in(g, p, s, rng, training)?),
            None => None,
        };
        let out = self.decode(g, p, ex.image, ex.class, enc, rng, training)?;
        Ok((self.nll_of(g, out, ex.image)?, out))
    }

    /// Summed NLL over a batch as a graph node.
    pub fn batch_loss(&self, g: &mut Graph<T>, p: &Bound, batch: &[Example], rng: &mut Rng, training: bool) -> Result<Var> {
        let mut total: Option<Var> = None;
        for ex in batch {
            let (nll, _) = self.example_loss(g, p, ex, rng, training)?;
            total = Some(match total {
                Some(t) => g.add(t, nll)?,
                None => nll,
            });
        }
        total.ok_or_else(|| invalid("empty batch"))
    }

    /// Teacher-forced NLL in nats summed over `batch`, and each example's
    /// head outputs.
    pub fn forward_train(&self, batch: &[Example], rng: &mut Rng, training: bool) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut total = 0.0;
        let mut outputs = Vec::with_capacity(batch.len());
        for ex in batch {
            let (nll, out) = self.example_loss(&mut g, &p, ex, rng, training)?;
            total += g.value(nll).item().to_f64_lossy();
            outputs.push(g.value(out).clone());
        }
        Ok((total, outputs))
    }

    /// Generation rank of each output position.
    pub fn ranks(&self) -> Vec<usize> {
        self.plan.ranks()
    }
}
