use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and initialization settings of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Inner width of each feed-forward block.
    pub ffn: usize,
    /// Maximum framed sequence length (`[CLS]` and `[SEP]` included).
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Standard deviation of the normal weight initializer.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Default rescoring model: 2 layers, hidden 32.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn: 64,
            max_len: 24,
            vocab_size,
            seed: 0,
            init_std: default_init_std(),
        }
    }

    /// Larger model used as a PLL teacher: 4 layers, hidden 64.
    pub fn teacher(vocab_size: usize) -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 128,
            max_len: 24,
            vocab_size,
            seed: 0,
            init_std: default_init_std(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 {
            return fail("layers must be positive".into());
        }
        if self.hidden == 0 || self.heads == 0 {
            return fail("hidden and heads must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn == 0 {
            return fail("ffn must be positive".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len ({}) must be at least 3", self.max_len));
        }
        if self.vocab_size <= super::vocab::RESERVED.len() {
            return fail(format!(
                "vocab_size ({}) must exceed the {} reserved tokens",
                self.vocab_size,
                super::vocab::RESERVED.len()
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std ({}) must be positive", self.init_std));
        }
        Ok(())
    }
}
