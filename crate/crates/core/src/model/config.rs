use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::error::{Error, Result};

/// Architecture variants of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Dense attention everywhere, no cross-modal layer.
    Vanilla,
    /// Boundary-aware selection with local band and cross-modal layer.
    #[default]
    Sbat,
    /// Sbat without the cross-modal layer.
    SbatNoCm,
    /// Sbat without the local band.
    SbatNoLocal,
    /// Equidistant key sampling in place of boundary-aware selection.
    SbatSample,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vanilla,
        Variant::SbatNoCm,
        Variant::SbatNoLocal,
        Variant::SbatSample,
        Variant::Sbat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Sbat => "sbat",
            Variant::SbatNoCm => "sbat_no_cm",
            Variant::SbatNoLocal => "sbat_no_local",
            Variant::SbatSample => "sbat_sample",
        }
    }

    pub fn has_cross_modal(self) -> bool {
        !matches!(self, Variant::Vanilla | Variant::SbatNoCm)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Architecture, sparsity and ablation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub vocab_size: usize,
    /// Width of the raw image/motion feature vectors.
    pub d_feat: usize,
    /// Encoder top-n budget; `None` selects `ceil(T_k / 4)`.
    pub n_enc: Option<usize>,
    /// Decoder enc-dec top-n budget, shared by both modalities.
    pub n_dec: Option<usize>,
    /// Local band radius; `None` disables the band.
    #[serde(with = "crate::serde_opt")]
    pub r: Option<usize>,
    pub alpha_enc: f64,
    pub alpha_dec: f64,
    pub variant: Variant,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub positional_encoding: bool,
    /// Hidden width of the feed-forward layers as a multiple of `d_model`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            blocks: 4,
            vocab_size: 16,
            d_feat: 32,
            n_enc: None,
            n_dec: None,
            r: Some(2),
            alpha_enc: 0.8,
            alpha_dec: 0.0,
            variant: Variant::Sbat,
            max_src_len: 128,
            max_tgt_len: 32,
            positional_encoding: true,
            ffn_mult: 4,
        }
    }
}

fn auto_budget(t_k: usize) -> usize {
    t_k.div_ceil(4).max(1)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return fail("blocks must be at least 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.positional_encoding && !self.d_model.is_multiple_of(2) {
            return fail(format!("positional encoding needs an even d_model, got {}", self.d_model));
        }
        if self.vocab_size < 3 {
            return fail("vocabulary must hold at least the three reserved tokens".into());
        }
        if self.d_feat == 0 || self.ffn_mult == 0 {
            return fail("d_feat and ffn_mult must be positive".into());
        }
        for (name, a) in [("alpha_enc", self.alpha_enc), ("alpha_dec", self.alpha_dec)] {
            if !(0.0..=1.0).contains(&a) {
                return fail(format!("{name} {a} outside [0, 1]"));
            }
        }
        if self.variant != Variant::Vanilla && self.alpha_dec != 0.0 {
            return fail(format!("alpha_dec must be 0 for variant {}", self.variant));
        }
        if self.n_enc == Some(0) || self.n_dec == Some(0) {
            return fail("sparsity budgets must be at least 1".into());
        }
        if self.max_src_len == 0 || self.max_tgt_len < 2 {
            return fail("max_src_len must be positive and max_tgt_len at least 2".into());
        }
        Ok(())
    }

    /// Selection policy of encoder self- and cross-modal attention over
    /// `t_k` keys.
    pub fn encoder_mode(&self, t_k: usize) -> AttentionMode {
        let budget = self.n_enc.unwrap_or_else(|| auto_budget(t_k));
        match self.variant {
            Variant::Vanilla => AttentionMode::Vanilla,
            Variant::Sbat | Variant::SbatNoCm => AttentionMode::Boundary {
                budget,
                alpha: self.alpha_enc,
                radius: self.r,
            },
            Variant::SbatNoLocal => AttentionMode::Boundary {
                budget,
                alpha: self.alpha_enc,
                radius: None,
            },
            Variant::SbatSample => AttentionMode::Equidistant { budget },
        }
    }

    /// Selection policy of decoder enc-dec attention over `t_k` encoder steps.
    pub fn decoder_mode(&self, t_k: usize) -> AttentionMode {
        match self.variant {
            Variant::Vanilla => AttentionMode::Vanilla,
            _ => AttentionMode::Boundary {
                budget: self.n_dec.unwrap_or_else(|| auto_budget(t_k)),
                alpha: self.alpha_dec,
                radius: None,
            },
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Closed-form number of scalar weights.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let attn = 4 * d * d;
        let norm = 2 * d;
        let ffn = 2 * d * self.ffn_width() + self.ffn_width() + d;
        let cm = if self.variant.has_cross_modal() { attn + norm } else { 0 };
        let enc_stream = attn + norm + ffn + norm + cm;
        let dec_block = 4 * attn + 3 * norm + ffn;
        2 * (self.d_feat * d + d)
            + v * d
            + self.blocks * (2 * enc_stream + dec_block)
            + d * v
            + v
    }
}
