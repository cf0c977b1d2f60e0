use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub enc_dim: usize,
    pub max_seq: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("enc_dim", self.enc_dim),
            ("max_seq", self.max_seq),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.ffn_mult
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig { layers: 1, width: 10, heads: 4, vocab: 5, enc_dim: 4, max_seq: 8, ffn_mult: 4 };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { heads: 5, ..c };
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 2);
    }

    #[test]
    fn zero_counts_are_rejected() {
        let c = ModelConfig { layers: 0, width: 8, heads: 2, vocab: 5, enc_dim: 4, max_seq: 8, ffn_mult: 4 };
        assert!(c.validate().is_err());
    }
}
