use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder architecture. Layers are pre-norm (RMSNorm) with rotary position
/// encoding, causal multi-head attention and a gated SiLU feed-forward block;
/// the LM head is not tied to the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub feat_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_bos")]
    pub bos_token_id: u32,
    #[serde(default = "default_img")]
    pub img_token_id: u32,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_bos() -> u32 {
    1
}

fn default_img() -> u32 {
    4
}

/// Number of reserved tokens (PAD, BOS, EOS, UNK, IMG).
pub const N_SPECIALS: usize = 5;

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ModelConfig {
    /// Six layers of width 768, 30k vocabulary, 150-token context, 1024-dim image features.
    pub fn standard() -> Self {
        Self::new(6, 768, 12, 2048, 30_000, 150, 1024)
    }

    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_len: usize,
        feat_dim: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            vocab_size,
            max_len,
            feat_dim,
            seed: 0,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            bos_token_id: default_bos(),
            img_token_id: default_img(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("feat_dim", self.feat_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if self.vocab_size < N_SPECIALS {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the {N_SPECIALS} special tokens",
                self.vocab_size
            )));
        }
        for (name, id) in [("bos_token_id", self.bos_token_id), ("img_token_id", self.img_token_id)] {
            if id as usize >= self.vocab_size {
                return Err(Error::Config(format!("{name} {id} outside vocabulary")));
            }
        }
        if self.bos_token_id == self.img_token_id {
            return Err(Error::Config("bos and img token ids coincide".into()));
        }
        if !(self.rope_theta > 0.0 && self.norm_eps > 0.0) {
            return Err(Error::Config("rope_theta and norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Ordered tensor names and shapes. Weight matrices are stored `[in, out]`.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (d, ff, v, f) = (self.d_model, self.d_ff, self.vocab_size, self.feat_dim);
        let mut out = vec![
            ("embed.weight".to_string(), vec![v, d], Init::Normal),
            ("projector.w1".to_string(), vec![f, d], Init::Normal),
            ("projector.b1".to_string(), vec![d], Init::Zeros),
            ("projector.w2".to_string(), vec![d, d], Init::Normal),
            ("projector.b2".to_string(), vec![d], Init::Zeros),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("attn_norm"), vec![d], Init::Ones),
                (p("attn.wq"), vec![d, d], Init::Normal),
                (p("attn.wk"), vec![d, d], Init::Normal),
                (p("attn.wv"), vec![d, d], Init::Normal),
                (p("attn.wo"), vec![d, d], Init::Normal),
                (p("ffn_norm"), vec![d], Init::Ones),
                (p("ffn.w_gate"), vec![d, ff], Init::Normal),
                (p("ffn.w_up"), vec![d, ff], Init::Normal),
                (p("ffn.w_down"), vec![ff, d], Init::Normal),
            ]);
        }
        out.push(("final_norm".to_string(), vec![d], Init::Ones));
        out.push(("lm_head".to_string(), vec![d, v], Init::Normal));
        out
    }

    pub fn n_params(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

// Positions of tensors inside `layout()`.
pub(crate) const EMBED: usize = 0;
pub(crate) const PROJ_W1: usize = 1;
pub(crate) const PROJ_B1: usize = 2;
pub(crate) const PROJ_W2: usize = 3;
pub(crate) const PROJ_B2: usize = 4;
pub(crate) const LAYER_BASE: usize = 5;
pub(crate) const PER_LAYER: usize = 9;
pub(crate) const ATTN_NORM: usize = 0;
pub(crate) const WQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const WV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const FFN_NORM: usize = 5;
pub(crate) const W_GATE: usize = 6;
pub(crate) const W_UP: usize = 7;
pub(crate) const W_DOWN: usize = 8;

pub(crate) fn layer_index(layer: usize, slot: usize) -> usize {
    LAYER_BASE + layer * PER_LAYER + slot
}

pub(crate) fn final_norm_index(cfg: &ModelConfig) -> usize {
    LAYER_BASE + cfg.n_layers * PER_LAYER
}

pub(crate) fn lm_head_index(cfg: &ModelConfig) -> usize {
    final_norm_index(cfg) + 1
}
