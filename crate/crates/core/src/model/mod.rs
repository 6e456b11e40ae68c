//! Encoder-decoder assembly: per-modality encoders with an optional
//! cross-modal layer, decoders with sparse enc-dec attention and a
//! two-row hierarchical fusion, and the vocabulary head.

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, Variant};

use crate::attention::{
    paired_context_attention, sparse_multihead, xavier, AttentionMask, AttentionMode, HeadTrace,
    MultiheadParams,
};
use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub type TokenId = u32;
pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;

/// Token ids of one caption, starting with BOS.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens between BOS and the first EOS, without padding.
    pub fn words(&self) -> Vec<TokenId> {
        self.0
            .iter()
            .skip_while(|&&t| t == BOS)
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t != PAD)
            .copied()
            .collect()
    }
}

/// Encoder outputs of both streams, aligned step by step.
#[derive(Clone, Debug)]
pub struct EncodedFeatures<R> {
    pub image: Tensor<R>,
    pub motion: Tensor<R>,
}

impl<R: Real> EncodedFeatures<R> {
    pub fn new(image: Tensor<R>, motion: Tensor<R>) -> Result<Self> {
        if image.rows() != motion.rows() {
            return Err(Error::Alignment {
                image: image.rows(),
                motion: motion.rows(),
            });
        }
        Ok(EncodedFeatures { image, motion })
    }

    pub fn steps(&self) -> usize {
        self.image.rows()
    }
}

/// Overrides used by diagnostics and ablation checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every sparse selection by dense attention.
    pub dense_masks: bool,
    /// Skip the cross-modal sublayer even when the variant has one.
    pub bypass_cross_modal: bool,
}

/// Attention bookkeeping collected during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<R> {
    /// Image-stream self-attention heads, one entry per encoder block.
    pub image_self: Vec<Vec<HeadTrace<R>>>,
    /// Smallest top-n tie margin over every sparse site.
    pub min_selection_margin: f64,
}

impl<R> ForwardTrace<R> {
    pub fn new() -> Self {
        ForwardTrace {
            image_self: Vec::new(),
            min_selection_margin: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderStream {
    self_attn: MultiheadParams,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
    cross: Option<(MultiheadParams, Norm)>,
}

#[derive(Clone, Copy, Debug)]
struct EncoderBlock {
    image: EncoderStream,
    motion: EncoderStream,
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    self_attn: MultiheadParams,
    norm1: Norm,
    ctx_image: MultiheadParams,
    ctx_motion: MultiheadParams,
    fusion: MultiheadParams,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    input_image: Affine,
    input_motion: Affine,
    embed: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: Affine,
}

struct Builder<'a, R> {
    store: &'a mut ParamStore<R>,
    rng: ChaCha8Rng,
    d: usize,
    heads: usize,
    ffn: usize,
}

impl<R: Real> Builder<'_, R> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let value = xavier(rows, cols, &mut self.rng);
        self.store.add(name, value)
    }

    fn vector(&mut self, name: String, len: usize, fill: f64) -> ParamId {
        self.store.add(name, Tensor::filled(&[len], R::of(fill)))
    }

    fn attn(&mut self, prefix: String) -> Result<MultiheadParams> {
        MultiheadParams::new(self.store, &prefix, self.d, self.heads, &mut self.rng)
    }

    fn norm(&mut self, prefix: String) -> Norm {
        Norm {
            gain: self.vector(format!("{prefix}.gain"), self.d, 1.0),
            bias: self.vector(format!("{prefix}.bias"), self.d, 0.0),
        }
    }

    fn ffn(&mut self, prefix: String) -> Ffn {
        let (d, f) = (self.d, self.ffn);
        Ffn {
            w2: self.matrix(format!("{prefix}.w2"), d, f),
            b2: self.vector(format!("{prefix}.b2"), f, 0.0),
            w3: self.matrix(format!("{prefix}.w3"), f, d),
            b3: self.vector(format!("{prefix}.b3"), d, 0.0),
        }
    }

    fn affine(&mut self, prefix: &str, rows: usize, cols: usize) -> Affine {
        Affine {
            w: self.matrix(format!("{prefix}.w"), rows, cols),
            b: self.vector(format!("{prefix}.b"), cols, 0.0),
        }
    }

    fn stream(&mut self, prefix: String, cross_modal: bool) -> Result<EncoderStream> {
        Ok(EncoderStream {
            self_attn: self.attn(format!("{prefix}.self"))?,
            norm1: self.norm(format!("{prefix}.norm1")),
            ffn: self.ffn(format!("{prefix}.ffn")),
            norm2: self.norm(format!("{prefix}.norm2")),
            cross: if cross_modal {
                Some((self.attn(format!("{prefix}.cross"))?, self.norm(format!("{prefix}.norm3"))))
            } else {
                None
            },
        })
    }
}

/// Sinusoidal position table: `sin(p / 10000^(2i/d))` at even columns,
/// `cos` of the same angle at odd ones.
pub fn positional_encoding<R: Real>(t: usize, d: usize) -> Result<Tensor<R>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d}")));
    }
    let mut data = vec![R::zero(); t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = R::of(angle.sin());
            data[pos * d + 2 * i + 1] = R::of(angle.cos());
        }
    }
    Tensor::new(&[t, d], data)
}

/// Per-step probabilities of a teacher-forced pass and the matching targets.
pub struct TeacherForced {
    pub probs: Var,
    /// Gold token per row, `None` at padding.
    pub targets: Vec<Option<usize>>,
}

/// The full captioning network and its parameters.
#[derive(Clone, Debug)]
pub struct SbatModel<R> {
    cfg: ModelConfig,
    params: ParamStore<R>,
    layout: Layout,
    positions: Option<Tensor<R>>,
}

impl<R: Real> SbatModel<R> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            d: cfg.d_model,
            heads: cfg.heads,
            ffn: cfg.ffn_width(),
        };
        let d = cfg.d_model;
        let input_image = b.affine("input.image", cfg.d_feat, d);
        let input_motion = b.affine("input.motion", cfg.d_feat, d);
        let embed = b.matrix("embed".into(), cfg.vocab_size, d);
        let cm = cfg.variant.has_cross_modal();
        let mut encoder = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            encoder.push(EncoderBlock {
                image: b.stream(format!("enc.{i}.image"), cm)?,
                motion: b.stream(format!("enc.{i}.motion"), cm)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            decoder.push(DecoderBlock {
                self_attn: b.attn(format!("dec.{i}.self"))?,
                norm1: b.norm(format!("dec.{i}.norm1")),
                ctx_image: b.attn(format!("dec.{i}.ctx_image"))?,
                ctx_motion: b.attn(format!("dec.{i}.ctx_motion"))?,
                fusion: b.attn(format!("dec.{i}.fusion"))?,
                norm2: b.norm(format!("dec.{i}.norm2")),
                ffn: b.ffn(format!("dec.{i}.ffn")),
                norm3: b.norm(format!("dec.{i}.norm3")),
            });
        }
        let output = b.affine("output", d, cfg.vocab_size);
        let positions = if cfg.positional_encoding {
            Some(positional_encoding(cfg.max_src_len.max(cfg.max_tgt_len), d)?)
        } else {
            None
        };
        Ok(SbatModel {
            layout: Layout {
                input_image,
                input_motion,
                embed,
                encoder,
                decoder,
                output,
            },
            cfg,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    fn add_positions(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        let Some(table) = &self.positions else {
            return Ok(x);
        };
        let (t, d) = g.value(x).dims2();
        let rows = Tensor::new(&[t, d], table.data()[..t * d].to_vec())?;
        let pe = g.constant(rows);
        g.add(x, pe)
    }

    fn residual_norm(&self, g: &mut Graph<R>, x: Var, sub: Var, norm: Norm) -> Result<Var> {
        let sum = g.add(x, sub)?;
        let gain = g.param(&self.params, norm.gain);
        let bias = g.param(&self.params, norm.bias);
        g.layer_norm(sum, gain, bias)
    }

    /// `max(0, x W2 + b2) W3 + b3`
    fn ffn(&self, g: &mut Graph<R>, x: Var, f: Ffn) -> Result<Var> {
        let w2 = g.param(&self.params, f.w2);
        let b2 = g.param(&self.params, f.b2);
        let w3 = g.param(&self.params, f.w3);
        let b3 = g.param(&self.params, f.b3);
        let h = g.matmul(x, w2)?;
        let h = g.add_row(h, b2)?;
        let h = g.relu(h);
        let o = g.matmul(h, w3)?;
        g.add_row(o, b3)
    }

    fn affine(&self, g: &mut Graph<R>, x: Var, a: Affine) -> Result<Var> {
        let w = g.param(&self.params, a.w);
        let b = g.param(&self.params, a.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<R>,
        q: Var,
        kv: Var,
        params: &MultiheadParams,
        mode: AttentionMode,
        extra: Option<&AttentionMask>,
        trace: Option<&mut ForwardTrace<R>>,
        keep_heads: bool,
    ) -> Result<Var> {
        let mut heads = Vec::new();
        let want = trace.is_some();
        let out = sparse_multihead(
            g,
            &self.params,
            q,
            kv,
            kv,
            params,
            &mode,
            extra,
            want.then_some(&mut heads),
        )?;
        if let Some(t) = trace {
            for h in &heads {
                t.min_selection_margin = t.min_selection_margin.min(h.selection_margin);
            }
            if keep_heads {
                t.image_self.push(heads);
            }
        }
        Ok(out)
    }

    /// Projects raw features to `d_model` and adds positions.
    pub fn embed_features(&self, g: &mut Graph<R>, image: &Tensor<R>, motion: &Tensor<R>) -> Result<(Var, Var)> {
        if image.rows() != motion.rows() {
            return Err(Error::Alignment {
                image: image.rows(),
                motion: motion.rows(),
            });
        }
        let t = image.rows();
        if t == 0 || t > self.cfg.max_src_len {
            return Err(Error::Config(format!(
                "source length {t} outside 1..={}",
                self.cfg.max_src_len
            )));
        }
        for (name, x) in [("image", image), ("motion", motion)] {
            if x.cols() != self.cfg.d_feat {
                return Err(Error::dim(
                    "input_projection",
                    format!("{name} features have width {}, expected {}", x.cols(), self.cfg.d_feat),
                ));
            }
        }
        let iv = g.constant(image.clone());
        let mv = g.constant(motion.clone());
        let i = self.affine(g, iv, self.layout.input_image)?;
        let m = self.affine(g, mv, self.layout.input_motion)?;
        Ok((self.add_positions(g, i)?, self.add_positions(g, m)?))
    }

    /// One encoder block over both streams.
    pub fn encoder_block(
        &self,
        g: &mut Graph<R>,
        block: usize,
        image: Var,
        motion: Var,
        opts: ForwardOptions,
        mut trace: Option<&mut ForwardTrace<R>>,
    ) -> Result<(Var, Var)> {
        let (ti, tm) = (g.value(image).rows(), g.value(motion).rows());
        if ti != tm {
            return Err(Error::Alignment { image: ti, motion: tm });
        }
        let mode = if opts.dense_masks {
            AttentionMode::Vanilla
        } else {
            self.cfg.encoder_mode(ti)
        };
        let blk = self.layout.encoder[block];
        let stream = |g: &mut Graph<R>, x: Var, p: &EncoderStream, keep: bool, trace: Option<&mut ForwardTrace<R>>| -> Result<Var> {
            let a = self.attend(g, x, x, &p.self_attn, mode, None, trace, keep)?;
            let x1 = self.residual_norm(g, x, a, p.norm1)?;
            let f = self.ffn(g, x1, p.ffn)?;
            self.residual_norm(g, x1, f, p.norm2)
        };
        let i2 = stream(g, image, &blk.image, true, trace.as_deref_mut())?;
        let m2 = stream(g, motion, &blk.motion, false, trace.as_deref_mut())?;
        match (blk.image.cross, blk.motion.cross) {
            (Some((ci, ni)), Some((cm, nm))) if !opts.bypass_cross_modal => {
                let ai = self.attend(g, i2, m2, &ci, mode, None, trace.as_deref_mut(), false)?;
                let am = self.attend(g, m2, i2, &cm, mode, None, trace, false)?;
                Ok((self.residual_norm(g, i2, ai, ni)?, self.residual_norm(g, m2, am, nm)?))
            }
            _ => Ok((i2, m2)),
        }
    }

    /// Input projection followed by every encoder block.
    pub fn encode(
        &self,
        g: &mut Graph<R>,
        image: &Tensor<R>,
        motion: &Tensor<R>,
        opts: ForwardOptions,
        mut trace: Option<&mut ForwardTrace<R>>,
    ) -> Result<(Var, Var)> {
        let (mut i, mut m) = self.embed_features(g, image, motion)?;
        for b in 0..self.cfg.blocks {
            (i, m) = self.encoder_block(g, b, i, m, opts, trace.as_deref_mut())?;
        }
        Ok((i, m))
    }

    /// Word embeddings of a prefix plus positions.
    pub fn embed_tokens(&self, g: &mut Graph<R>, ids: &[TokenId]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Contract("decoder prefix is empty".into()));
        }
        if ids.len() > self.cfg.max_tgt_len {
            return Err(Error::Config(format!(
                "target length {} exceeds {}",
                ids.len(),
                self.cfg.max_tgt_len
            )));
        }
        let table = g.param(&self.params, self.layout.embed);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let e = g.gather_rows(table, &idx)?;
        self.add_positions(g, e)
    }

    /// One decoder block: causal self-attention, sparse enc-dec attention
    /// per modality, two-row fusion, feed-forward.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_block(
        &self,
        g: &mut Graph<R>,
        block: usize,
        x: Var,
        enc_image: Var,
        enc_motion: Var,
        opts: ForwardOptions,
        mut trace: Option<&mut ForwardTrace<R>>,
    ) -> Result<Var> {
        let t = g.value(x).rows();
        if t == 0 {
            return Err(Error::Contract("decoder prefix is empty".into()));
        }
        let t_k = g.value(enc_image).rows();
        if g.value(enc_motion).rows() != t_k {
            return Err(Error::Alignment {
                image: t_k,
                motion: g.value(enc_motion).rows(),
            });
        }
        let blk = self.layout.decoder[block];
        let causal = AttentionMask::causal(t);
        let s = self.attend(g, x, x, &blk.self_attn, AttentionMode::Vanilla, Some(&causal), None, false)?;
        let s = self.residual_norm(g, x, s, blk.norm1)?;
        let mode = if opts.dense_masks {
            AttentionMode::Vanilla
        } else {
            self.cfg.decoder_mode(t_k)
        };
        let ci = self.attend(g, s, enc_image, &blk.ctx_image, mode, None, trace.as_deref_mut(), false)?;
        let cm = self.attend(g, s, enc_motion, &blk.ctx_motion, mode, None, trace, false)?;
        let fused = paired_context_attention(g, &self.params, s, ci, cm, &blk.fusion)?;
        let f = self.residual_norm(g, s, fused, blk.norm2)?;
        let h = self.ffn(g, f, blk.ffn)?;
        self.residual_norm(g, f, h, blk.norm3)
    }

    /// Row-wise `softmax(x W_p + b_p)`.
    pub fn output_distribution(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        let logits = self.affine(g, x, self.layout.output)?;
        g.softmax_rows(logits)
    }

    /// Decoder stack over `prefix`, returning one distribution per prefix position.
    pub fn decode(
        &self,
        g: &mut Graph<R>,
        enc: (Var, Var),
        prefix: &[TokenId],
        opts: ForwardOptions,
        mut trace: Option<&mut ForwardTrace<R>>,
    ) -> Result<Var> {
        let mut x = self.embed_tokens(g, prefix)?;
        for b in 0..self.cfg.blocks {
            x = self.decoder_block(g, b, x, enc.0, enc.1, opts, trace.as_deref_mut())?;
        }
        self.output_distribution(g, x)
    }

    /// Encoder then decoder over the caption shifted right; row `t` of the
    /// result predicts `caption[t + 1]`.
    pub fn forward_teacher_forced(
        &self,
        g: &mut Graph<R>,
        image: &Tensor<R>,
        motion: &Tensor<R>,
        caption: &[TokenId],
        opts: ForwardOptions,
        mut trace: Option<&mut ForwardTrace<R>>,
    ) -> Result<TeacherForced> {
        if caption.first() != Some(&BOS) || caption.len() < 2 {
            return Err(Error::Contract("caption must start with BOS and hold a target".into()));
        }
        if caption.len() > self.cfg.max_tgt_len {
            return Err(Error::Config(format!(
                "caption length {} exceeds {}",
                caption.len(),
                self.cfg.max_tgt_len
            )));
        }
        if let Some(&bad) = caption.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Config(format!(
                "token {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let enc = self.encode(g, image, motion, opts, trace.as_deref_mut())?;
        let probs = self.decode(g, enc, &caption[..caption.len() - 1], opts, trace)?;
        let targets = caption[1..]
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        Ok(TeacherForced { probs, targets })
    }

    /// Encoder outputs as plain tensors.
    pub fn encode_values(&self, image: &Tensor<R>, motion: &Tensor<R>) -> Result<EncodedFeatures<R>> {
        let mut g = Graph::new();
        let (i, m) = self.encode(&mut g, image, motion, ForwardOptions::default(), None)?;
        EncodedFeatures::new(g.value(i).clone(), g.value(m).clone())
    }

    /// Distribution over the next token after `prefix`.
    pub fn next_token_probs(&self, enc: &EncodedFeatures<R>, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let i = g.constant(enc.image.clone());
        let m = g.constant(enc.motion.clone());
        let probs = self.decode(&mut g, (i, m), prefix, ForwardOptions::default(), None)?;
        let p = g.value(probs);
        Ok(p.row(p.rows() - 1).iter().map(|v| v.as_f64()).collect())
    }

    /// Copies every parameter whose name and shape match one in `other`;
    /// returns how many were copied.
    pub fn copy_matching(&mut self, other: &SbatModel<R>) -> usize {
        let mut copied = 0;
        for dst in self.params.iter_mut() {
            if let Some(id) = other.params.find(&dst.name) {
                let src = &other.params.get(id).value;
                if src.shape() == dst.value.shape() {
                    dst.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Converts the weights to another precision.
    pub fn cast<S: Real>(&self) -> SbatModel<S> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.add(p.name.clone(), p.value.cast());
        }
        SbatModel {
            cfg: self.cfg.clone(),
            params,
            layout: self.layout.clone(),
            positions: self.positions.as_ref().map(|t| t.cast()),
        }
    }
}
