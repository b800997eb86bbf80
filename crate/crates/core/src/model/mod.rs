//! The captioning model: a ViT-style patch adaptor and Transformer encoder
//! over the image, and a causal Transformer decoder that writes the transcript.

mod decode;
mod recognizer;

pub use decode::{decode_beam, decode_greedy, Decoded, TokenScorer};
pub use recognizer::Recognizer;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{AttentionSpec, Gradients, Graph, Var};
use crate::image::{Image, CHANNELS};
use crate::params::{ParamId, ParamStore};
use crate::preprocess::interpolation_matrix;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    /// Longest decoder sequence, counting BOS on the input side (or EOS on the target side).
    pub max_target_len: usize,
    pub input_resolution: usize,
    /// Resolution the positional grid is stored at; interpolated when it differs.
    pub pretrain_resolution: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Full-scale geometry with a base-sized Transformer.
    fn default() -> Self {
        ModelConfig {
            patch_size: 16,
            d_model: 768,
            n_heads: 12,
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_ffn: 3072,
            vocab_size: 40,
            max_target_len: 64,
            input_resolution: 480,
            pretrain_resolution: 224,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model: 64×64 input, 8×8 patches, 128 wide, 3+3 layers.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            patch_size: 8,
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            d_ffn: 512,
            vocab_size,
            max_target_len: 12,
            input_resolution: 64,
            pretrain_resolution: 64,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        let dims = [
            self.patch_size,
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.vocab_size,
            self.max_target_len,
            self.input_resolution,
            self.pretrain_resolution,
        ];
        if dims.contains(&0) {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        for r in [self.input_resolution, self.pretrain_resolution] {
            if r % self.patch_size != 0 {
                return bad(format!("resolution {r} not divisible by patch size {}", self.patch_size));
            }
        }
        if self.pretrain_resolution != self.input_resolution && self.pretrain_grid() < 2 {
            return bad("stored positional grid must be at least 2×2 to interpolate".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_resolution / self.patch_size
    }

    pub fn pretrain_grid(&self) -> usize {
        self.pretrain_resolution / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let g = self.pretrain_grid();
        let encoder = self.patch_dim() * d + d + g * g * d + self.n_enc_layers * (2 * ln + attn + ffn) + ln;
        let decoder = v * d + self.max_target_len * d + self.n_dec_layers * (3 * ln + 2 * attn + ffn) + ln;
        encoder + decoder + d * v + v
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch: Linear,
    pos_grid: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    tok_embed: ParamId,
    pos_embed: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

/// Builds (or looks up) every parameter in a fixed order.
struct Builder<'s, R> {
    store: &'s mut ParamStore,
    rng: Option<&'s mut R>,
}

impl<R: Rng> Builder<'_, R> {
    fn tensor(&mut self, name: &str, shape: &[usize], std: f64, fill: f64, decay: bool) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let numel: usize = shape.iter().product();
                let data = if std > 0.0 {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..numel).map(|_| normal.sample(rng)).collect()
                } else {
                    vec![fill; numel]
                };
                Ok(self.store.push(name, Tensor::new(shape.to_vec(), data)?, decay))
            }
            None => {
                let id = self
                    .store
                    .find(name)
                    .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
                if self.store.get(id).shape() != shape {
                    return Err(Error::Shape {
                        op: "load parameter",
                        left: shape.to_vec(),
                        right: self.store.get(id).shape().to_vec(),
                    });
                }
                Ok(id)
            }
        }
    }

    /// Weights drawn with std `1/sqrt(fan_in)`, so every projection starts
    /// near unit gain.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            w: self.tensor(&format!("{name}.w"), &[fan_in, fan_out], std, 0.0, true)?,
            b: self.tensor(&format!("{name}.b"), &[1, fan_out], 0.0, 0.0, false)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.tensor(&format!("{name}.gain"), &[1, d], 0.0, 1.0, false)?,
            bias: self.tensor(&format!("{name}.bias"), &[1, d], 0.0, 0.0, false)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Result<Ffn> {
        Ok(Ffn {
            up: self.linear(&format!("{name}.up"), d, f)?,
            down: self.linear(&format!("{name}.down"), f, d)?,
        })
    }

    fn layout(&mut self, c: &ModelConfig) -> Result<Layout> {
        let d = c.d_model;
        let g = c.pretrain_grid();
        let patch = self.linear("enc.patch", c.patch_dim(), d)?;
        let pos_grid = self.tensor("enc.pos", &[g, g, d], POS_STD, 0.0, false)?;
        let encoder = (0..c.n_enc_layers)
            .map(|i| {
                Ok(EncoderLayer {
                    ln1: self.norm(&format!("enc.{i}.ln1"), d)?,
                    attn: self.attention(&format!("enc.{i}.attn"), d)?,
                    ln2: self.norm(&format!("enc.{i}.ln2"), d)?,
                    ffn: self.ffn(&format!("enc.{i}.ffn"), d, c.d_ffn)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = self.norm("enc.norm", d)?;
        let tok_embed = self.tensor("dec.tok", &[c.vocab_size, d], 1.0, 0.0, false)?;
        let pos_embed = self.tensor("dec.pos", &[c.max_target_len, d], POS_STD, 0.0, false)?;
        let decoder = (0..c.n_dec_layers)
            .map(|i| {
                Ok(DecoderLayer {
                    ln1: self.norm(&format!("dec.{i}.ln1"), d)?,
                    self_attn: self.attention(&format!("dec.{i}.self"), d)?,
                    ln2: self.norm(&format!("dec.{i}.ln2"), d)?,
                    cross_attn: self.attention(&format!("dec.{i}.cross"), d)?,
                    ln3: self.norm(&format!("dec.{i}.ln3"), d)?,
                    ffn: self.ffn(&format!("dec.{i}.ffn"), d, c.d_ffn)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = self.norm("dec.norm", d)?;
        let out = self.linear("out", d, c.vocab_size)?;
        Ok(Layout {
            patch,
            pos_grid,
            encoder,
            enc_norm,
            tok_embed,
            pos_embed,
            decoder,
            dec_norm,
            out,
        })
    }
}

/// Learned positions start small next to the content they are added to.
const POS_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Captioner {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    /// Stored-grid → input-grid resample, present when the resolutions differ.
    pos_resample: Option<Vec<f64>>,
}

/// Parameters bound as graph leaves for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Copies the gradient of every parameter into `params`.
    pub fn accumulate(&self, grads: &Gradients, params: &mut ParamStore) -> Result<()> {
        for (i, p) in params.iter_mut().enumerate() {
            grads.accumulate_into(self.vars[i], &mut p.tensor)?;
        }
        Ok(())
    }
}

/// Dropout masks for one training forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn rand::RngCore,
}

impl Captioner {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::stream(seed);
        let mut params = ParamStore::new();
        let layout = Builder {
            store: &mut params,
            rng: Some(&mut rng),
        }
        .layout(&config)?;
        Self::assemble(config, params, layout)
    }

    /// Wraps loaded parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Builder::<crate::RandomStream> {
            store: &mut params,
            rng: None,
        }
        .layout(&config)?;
        if params.len() != config_param_tensors(&config) {
            return Err(Error::Contract("checkpoint holds unexpected parameters".into()));
        }
        Self::assemble(config, params, layout)
    }

    fn assemble(config: ModelConfig, params: ParamStore, layout: Layout) -> Result<Self> {
        let pos_resample = if config.pretrain_resolution != config.input_resolution {
            let (s, t) = (config.pretrain_grid(), config.grid());
            Some(interpolation_matrix(s, s, t, t)?)
        } else {
            None
        };
        Ok(Captioner {
            config,
            params,
            layout,
            pos_resample,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Same weights served at a new input resolution; the positional grid is
    /// resampled on the fly from its stored size.
    pub fn with_input_resolution(&self, resolution: usize) -> Result<Self> {
        let config = ModelConfig {
            input_resolution: resolution,
            ..self.config.clone()
        };
        Captioner::from_params(config, self.params.clone())
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.leaf(&p.tensor)).collect(),
        }
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let r = self.config.input_resolution;
        if img.width() != r || img.height() != r {
            return Err(Error::Contract(format!(
                "model expects {r}x{r} input, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Flattens the image into `n_patches × patch_dim` rows, patches in raster
    /// order, pixels within a patch row-major with interleaved channels.
    /// Channel values are rescaled from [0, 1] to [-1, 1].
    pub fn patchify(&self, img: &Image) -> Result<Vec<f64>> {
        self.check_image(img)?;
        let (p, grid) = (self.config.patch_size, self.config.grid());
        let px = img.pixels();
        let w = img.width();
        let mut out = Vec::with_capacity(self.config.n_patches() * self.config.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                for y in gy * p..(gy + 1) * p {
                    let start = (y * w + gx * p) * CHANNELS;
                    out.extend(px[start..start + p * CHANNELS].iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
        Ok(out)
    }

    fn linear(&self, g: &mut Graph, b: &Bound, l: &Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.get(l.w))?;
        g.add_rows(y, b.get(l.b))
    }

    fn norm(&self, g: &mut Graph, b: &Bound, n: &Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, b.get(n.gain), b.get(n.bias))
    }

    fn dropout(&self, g: &mut Graph, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let Some(d) = drop.as_mut() else { return Ok(x) };
        if d.rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = g.dims(x);
        let keep = 1.0 / (1.0 - d.rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(r, c, mask)?;
        g.mul(x, m)
    }

    /// Patch embeddings plus positions for a stack of images: `(batch·n_patches) × d_model`.
    fn embed<'a>(&'a self, g: &mut Graph<'a>, b: &Bound, images: &[&Image]) -> Result<Var> {
        let mut rows = Vec::new();
        for img in images {
            rows.extend(self.patchify(img)?);
        }
        let x = g.constant(images.len() * self.config.n_patches(), self.config.patch_dim(), rows)?;
        let x = self.linear(g, b, &self.layout.patch, x)?;
        let grid = b.get(self.layout.pos_grid);
        let pos = match &self.pos_resample {
            Some(m) => {
                let s = self.config.pretrain_grid();
                let m = g.constant(self.config.n_patches(), s * s, m.clone())?;
                g.matmul(m, grid)?
            }
            None => grid,
        };
        g.add_rows(x, pos)
    }

    fn attention_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        a: &Attention,
        x: Var,
        kv: Option<(Var, Var)>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(g, b, &a.q, x)?;
        let (k, v) = match kv {
            Some(kv) => kv,
            None => (self.linear(g, b, &a.k, x)?, self.linear(g, b, &a.v, x)?),
        };
        let o = g.attention(q, k, v, spec)?;
        self.linear(g, b, &a.o, o)
    }

    fn ffn_block(&self, g: &mut Graph, b: &Bound, f: &Ffn, x: Var) -> Result<Var> {
        let h = self.linear(g, b, &f.up, x)?;
        let h = g.gelu(h);
        self.linear(g, b, &f.down, h)
    }

    fn run_encoder(&self, g: &mut Graph, b: &Bound, mut x: Var, batch: usize, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let spec = AttentionSpec {
            heads: self.config.n_heads,
            batch,
            causal: false,
        };
        for layer in &self.layout.encoder {
            let h = self.norm(g, b, &layer.ln1, x)?;
            let h = self.attention_block(g, b, &layer.attn, h, None, spec)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
            let h = self.norm(g, b, &layer.ln2, x)?;
            let h = self.ffn_block(g, b, &layer.ffn, h)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
        }
        self.norm(g, b, &self.layout.enc_norm, x)
    }

    /// Per-layer cross-attention keys and values over the encoder output.
    fn cross_kv(&self, g: &mut Graph, b: &Bound, memory: Var) -> Result<Vec<(Var, Var)>> {
        self.layout
            .decoder
            .iter()
            .map(|l| {
                Ok((
                    self.linear(g, b, &l.cross_attn.k, memory)?,
                    self.linear(g, b, &l.cross_attn.v, memory)?,
                ))
            })
            .collect()
    }

    /// Decoder over `batch` equal-length rows of input tokens; returns logits.
    fn run_decoder(
        &self,
        g: &mut Graph,
        b: &Bound,
        tokens: &[usize],
        batch: usize,
        cross: &[(Var, Var)],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let t = tokens.len() / batch;
        if t == 0 || t > self.config.max_target_len {
            return Err(Error::Contract(format!(
                "decoder input length {t} outside 1..={}",
                self.config.max_target_len
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % t).collect();
        let tok = g.gather_rows(b.get(self.layout.tok_embed), tokens)?;
        let pos = g.gather_rows(b.get(self.layout.pos_embed), &positions)?;
        let mut x = g.add(tok, pos)?;
        let self_spec = AttentionSpec {
            heads: self.config.n_heads,
            batch,
            causal: true,
        };
        let cross_spec = AttentionSpec {
            causal: false,
            ..self_spec
        };
        for (layer, &kv) in self.layout.decoder.iter().zip(cross) {
            let h = self.norm(g, b, &layer.ln1, x)?;
            let h = self.attention_block(g, b, &layer.self_attn, h, None, self_spec)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
            let h = self.norm(g, b, &layer.ln2, x)?;
            let h = self.attention_block(g, b, &layer.cross_attn, h, Some(kv), cross_spec)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
            let h = self.norm(g, b, &layer.ln3, x)?;
            let h = self.ffn_block(g, b, &layer.ffn, h)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
        }
        let x = self.norm(g, b, &self.layout.dec_norm, x)?;
        self.linear(g, b, &self.layout.out, x)
    }

    /// Encoder input rows (patch embedding plus positions) before any attention.
    pub fn embed_patches(&self, img: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = self.embed(&mut g, &b, &[img])?;
        Tensor::matrix(self.config.n_patches(), self.config.d_model, g.value(x).to_vec())
    }

    /// Encoder states, `n_patches × d_model`.
    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = self.embed(&mut g, &b, &[img])?;
        let m = self.run_encoder(&mut g, &b, x, 1, &mut None)?;
        Tensor::matrix(self.config.n_patches(), self.config.d_model, g.value(m).to_vec())
    }

    /// Encoder states for explicit pre-embedded rows (`n_patches × d_model`),
    /// bypassing the patch adaptor.
    pub fn encode_embedded(&self, rows: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.constant(self.config.n_patches(), self.config.d_model, rows.to_vec())?;
        let m = self.run_encoder(&mut g, &b, x, 1, &mut None)?;
        Tensor::matrix(self.config.n_patches(), self.config.d_model, g.value(m).to_vec())
    }

    /// Logits `T × vocab` for a decoder input that starts with BOS.
    pub fn forward_teacher_forced(&self, img: &Image, target: &[usize]) -> Result<Tensor> {
        if target.first() != Some(&BOS) {
            return Err(Error::Contract("decoder input must start with BOS".into()));
        }
        if target.len() > self.config.max_target_len {
            return Err(Error::Contract(format!(
                "target length {} exceeds max_target_len {}",
                target.len(),
                self.config.max_target_len
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let logits = self.logits(&mut g, &b, &[img], target, &mut None)?;
        Tensor::matrix(target.len(), self.config.vocab_size, g.value(logits).to_vec())
    }

    /// Logits for a stack of images and flattened equal-length decoder inputs.
    pub fn logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        b: &Bound,
        images: &[&Image],
        tokens: &[usize],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        if images.is_empty() || tokens.len() % images.len() != 0 {
            return Err(Error::Argument("every image needs an equal-length decoder input".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let x = self.embed(g, b, images)?;
        let memory = self.run_encoder(g, b, x, images.len(), drop)?;
        let cross = self.cross_kv(g, b, memory)?;
        self.run_decoder(g, b, tokens, images.len(), &cross, drop)
    }

    /// Mean token negative log-likelihood of a batch of full sequences
    /// (`BOS … EOS`), padded internally.
    pub fn batch_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        images: &[&Image],
        sequences: &[Vec<usize>],
        mut drop: Option<Dropout<'_>>,
    ) -> Result<(Var, Bound)> {
        if images.len() != sequences.len() || images.is_empty() {
            return Err(Error::Argument("batch needs one sequence per image".into()));
        }
        let t = sequences.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
        if sequences.iter().any(|s| s.len() < 2 || s[0] != BOS) {
            return Err(Error::Contract("sequences must be BOS … EOS".into()));
        }
        if t > self.config.max_target_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_target_len {}",
                t, self.config.max_target_len
            )));
        }
        let mut inputs = Vec::with_capacity(t * sequences.len());
        let mut targets = Vec::with_capacity(t * sequences.len());
        for s in sequences {
            let n = s.len() - 1;
            inputs.extend_from_slice(&s[..n]);
            inputs.extend(std::iter::repeat_n(PAD, t - n));
            targets.extend_from_slice(&s[1..]);
            targets.extend(std::iter::repeat_n(PAD, t - n));
        }
        let b = self.bind(g);
        let logits = self.logits(g, &b, images, &inputs, &mut drop)?;
        let loss = g.softmax_cross_entropy(logits, &targets, PAD)?;
        Ok((loss, b))
    }

    /// Runs the encoder once and keeps per-layer cross-attention keys/values
    /// for incremental decoding.
    pub fn prepare(&self, img: &Image) -> Result<EncodedImage<'_>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = self.embed(&mut g, &b, &[img])?;
        let memory = self.run_encoder(&mut g, &b, x, 1, &mut None)?;
        let cross = self
            .cross_kv(&mut g, &b, memory)?
            .into_iter()
            .map(|(k, v)| (g.value(k).to_vec(), g.value(v).to_vec()))
            .collect();
        Ok(EncodedImage { model: self, cross })
    }
}

fn config_param_tensors(c: &ModelConfig) -> usize {
    // patch(2) + pos(1) + enc layers(2+8+2+4) + enc norm(2) + tok/pos(2)
    // + dec layers(2+8+2+8+2+4) + dec norm(2) + out(2)
    2 + 1 + c.n_enc_layers * 16 + 2 + 2 + c.n_dec_layers * 26 + 2 + 2
}

/// An image run through the encoder, ready for token-by-token decoding.
pub struct EncodedImage<'m> {
    model: &'m Captioner,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
}

impl TokenScorer for EncodedImage<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_target_len(&self) -> usize {
        self.model.config.max_target_len
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let m = self.model;
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let rows = m.config.n_patches();
        let d = m.config.d_model;
        let cross = self
            .cross
            .iter()
            .map(|(k, v)| Ok((g.constant(rows, d, k.clone())?, g.constant(rows, d, v.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let logits = m.run_decoder(&mut g, &b, prefix, 1, &cross, &mut None)?;
        let vocab = m.config.vocab_size;
        let last = &g.value(logits)[(prefix.len() - 1) * vocab..];
        Ok(crate::graph::log_softmax(last))
    }
}
