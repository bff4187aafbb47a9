use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::imaging::{NUM_PATCHES, PATCH_DIM};
use crate::tokenization::{MAX_ANSWER_LEN, MAX_QUESTION_LEN};

/// Where the decoder reads the question from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionRouting {
    /// Question tokens precede `<decode>` in the causal decoder context.
    #[default]
    Prefix,
    /// The decoder cross-attends to the fused question/image sequence instead
    /// of the raw image sequence.
    FusionOnly,
}

impl FromStr for QuestionRouting {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(Self::Prefix),
            "fusion_only" => Ok(Self::FusionOnly),
            other => Err(CoreError::UnknownVariant {
                kind: "question routing",
                value: other.to_string(),
            }),
        }
    }
}

/// Attention blocks that are active. A disabled block is replaced by the
/// identity on its residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocks {
    /// Bidirectional self-attention in the text and fusion encoders.
    pub self_attention: bool,
    /// Cross-attention to the image in the fusion encoder and decoder.
    pub cross_attention: bool,
    /// Causal self-attention in the decoder.
    pub causal_self_attention: bool,
}

impl Default for Blocks {
    fn default() -> Self {
        Blocks {
            self_attention: true,
            cross_attention: true,
            causal_self_attention: true,
        }
    }
}

/// The model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    None,
    NoItc,
    /// Without the image-text matching term.
    NoCtc,
    NoSa,
    NoCa,
    NoCsa,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoItc,
        Variant::NoCtc,
        Variant::NoSa,
        Variant::NoCa,
        Variant::NoCsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::NoItc => "no_itc",
            Variant::NoCtc => "no_ctc",
            Variant::NoSa => "no_sa",
            Variant::NoCa => "no_ca",
            Variant::NoCsa => "no_csa",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::None => "MVaEMa",
            Variant::NoItc => "MVaEMa w/o ITC",
            Variant::NoCtc => "MVaEMa w/o CTC",
            Variant::NoSa => "MVaEMa w/o SA",
            Variant::NoCa => "MVaEMa w/o CA",
            Variant::NoCsa => "MVaEMa w/o CSA",
        }
    }

    pub fn blocks(self) -> Blocks {
        let mut b = Blocks::default();
        match self {
            Variant::NoSa => b.self_attention = false,
            Variant::NoCa => b.cross_attention = false,
            Variant::NoCsa => b.causal_self_attention = false,
            _ => {}
        }
        b
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::None]
            .into_iter()
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::UnknownVariant {
                kind: "ablation variant",
                value: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    /// Transformer layers in each of the four sub-networks.
    pub layers: usize,
    pub ffn_mult: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub max_text_len: usize,
    pub max_answer_len: usize,
    pub vocab_size: usize,
    pub itc_proj_dim: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Fusion layers reuse the text encoder's self-attention and
    /// feed-forward weights.
    pub share_fusion_text: bool,
    pub question_routing: QuestionRouting,
    pub blocks: Blocks,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 64,
            heads: 4,
            layers: 4,
            ffn_mult: 4,
            num_patches: NUM_PATCHES,
            patch_dim: PATCH_DIM,
            max_text_len: MAX_QUESTION_LEN,
            max_answer_len: MAX_ANSWER_LEN,
            vocab_size,
            itc_proj_dim: 32,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 0.5,
            ln_eps: 1e-5,
            init_std: 0.02,
            share_fusion_text: false,
            question_routing: QuestionRouting::Prefix,
            blocks: Blocks::default(),
        }
    }

    /// Desk-scale configuration used by the acceptance runs.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 1,
            ..Self::new(vocab_size)
        }
    }

    /// One layer, width 8, two heads: used for gradient checks.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            itc_proj_dim: 4,
            ..Self::new(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_mult
    }

    /// Positions available to the decoder: question prefix plus answer.
    pub fn decoder_positions(&self) -> usize {
        self.max_text_len + self.max_answer_len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        let dims = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("num_patches", self.num_patches),
            ("patch_dim", self.patch_dim),
            ("max_text_len", self.max_text_len),
            ("max_answer_len", self.max_answer_len),
            ("itc_proj_dim", self.itc_proj_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(1..=8).contains(&self.layers) {
            return fail(format!("layers must be in 1..=8, got {}", self.layers));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.vocab_size <= crate::tokenization::UNK {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return fail("temperature bounds must satisfy 0 < min <= init <= max".into());
        }
        if !(self.ln_eps > 0.0 && self.init_std > 0.0) {
            return fail("ln_eps and init_std must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_widths() {
        let c = ModelConfig::new(100);
        assert_eq!(c.heads * c.head_dim(), c.embed_dim);
        assert_eq!((c.embed_dim, c.heads, c.head_dim()), (64, 4, 16));
        c.validate().unwrap();
        ModelConfig::micro(20).validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::new(100);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(100);
        c.layers = 9;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(3).validate().is_err());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ABLATIONS {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("no_ffn".parse::<Variant>().is_err());
        assert!(!Variant::NoCa.blocks().cross_attention);
        assert_eq!(Variant::NoItc.blocks(), Blocks::default());
    }
}
