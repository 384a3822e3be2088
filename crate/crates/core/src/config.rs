//! Flat TOML run configuration with validation and a stable content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionOrder;
use crate::objective::{CombineWeights, LossWeights};
use crate::optim::AdamWConfig;

/// Key/value source for the prior-knowledge cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorKv {
    /// The raw learnable prompt `X_LP`.
    #[default]
    Raw,
    /// The answer-conditioned prompt `X̂_LP`.
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub prompt_size: usize,
    pub fusion_order: FusionOrder,
    pub alpha: f64,
    pub theta: f64,
    pub beta: f64,
    pub eta: f64,
    pub gat_heads: usize,
    pub encoder_layers: usize,
    pub patch_size: usize,
    pub max_question_len: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Latent prompt generation from the answer bank.
    pub use_gm: bool,
    /// Consistency loss on the generated prompt.
    pub use_cs: bool,
    /// Latent prompt fusion inside each block.
    pub use_lf: bool,
    /// Prior knowledge fusion.
    pub use_pf: bool,
    pub prior_kv: PriorKv,
    /// Stop once validation accuracy reaches this percentage.
    pub target_val_acc: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            n_blocks: 2,
            prompt_size: 32,
            fusion_order: FusionOrder::default(),
            alpha: 1.0,
            theta: 0.1,
            beta: 0.1,
            eta: 0.1,
            gat_heads: 2,
            encoder_layers: 2,
            patch_size: 8,
            max_question_len: 16,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epochs: 200,
            batch_size: 32,
            seed: 7,
            use_gm: true,
            use_cs: true,
            use_lf: true,
            use_pf: true,
            prior_kv: PriorKv::Raw,
            target_val_acc: None,
        }
    }
}

impl ModelConfig {
    /// Full-width preset: d = 768, six blocks, small learning rate.
    pub fn large() -> Self {
        Self {
            d: 768,
            n_blocks: 6,
            gat_heads: 8,
            learning_rate: 5e-6,
            heads: 12,
            ..Self::default()
        }
    }

    /// Smallest configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            heads: 2,
            n_blocks: 1,
            prompt_size: 4,
            gat_heads: 2,
            encoder_layers: 1,
            patch_size: 4,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Whether the latent prompt exists at all.
    pub fn has_prompt(&self) -> bool {
        self.use_gm || self.use_lf || self.use_pf
    }

    pub fn combine_weights(&self) -> CombineWeights {
        CombineWeights {
            alpha: if self.has_prompt() { self.alpha } else { 0.0 },
            theta: self.theta,
            beta: self.beta,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { eta: self.eta }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("n_blocks", self.n_blocks),
            ("prompt_size", self.prompt_size),
            ("gat_heads", self.gat_heads),
            ("patch_size", self.patch_size),
            ("max_question_len", self.max_question_len),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.d < 2 {
            return fail(format!("d = {} is too narrow for layer normalization", self.d));
        }
        if self.d % self.heads != 0 {
            return fail(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.d % self.gat_heads != 0 {
            return fail(format!("d = {} is not divisible by gat_heads = {}", self.d, self.gat_heads));
        }
        self.combine_weights().validate()?;
        for (name, v) in [("eta", self.eta), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if self.use_cs && !self.use_gm {
            return fail("use_cs requires use_gm".into());
        }
        if self.prior_kv == PriorKv::Generated && !self.use_gm {
            return fail("prior_kv = \"generated\" requires use_gm".into());
        }
        if let Some(t) = self.target_val_acc {
            if !(0.0..=100.0).contains(&t) {
                return fail(format!("target_val_acc = {t} outside [0, 100]"));
            }
        }
        Ok(())
    }

    /// Image-dependent checks.
    pub fn validate_for_image(&self, height: usize, width: usize) -> Result<()> {
        if height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::config(format!(
                "patch_size {} does not divide {height}x{width} images",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
