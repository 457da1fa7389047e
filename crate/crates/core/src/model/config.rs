use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyper-parameters of the toy decoder. Read from TOML with exactly these
/// keys; `vocab` and `init_std` may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f32,
}

/// 256 byte tokens plus BOS.
pub const DEFAULT_VOCAB: usize = 257;
pub const BOS: u32 = 256;

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}

fn default_init_std() -> f32 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 256,
            vocab: DEFAULT_VOCAB,
            max_seq: 256,
            seed: 0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab == 0 {
            return bad("d_model, n_heads, d_ff and vocab must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if self.max_seq < 2 {
            return bad(format!("max_seq must be at least 2, got {}", self.max_seq));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!(
                "init_std must be finite and nonnegative, got {}",
                self.init_std
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Raw bytes as token ids, preceded by BOS.
pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(bytes.iter().map(|&b| u32::from(b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults() {
        let c =
            ModelConfig::from_toml_str("d_model = 8\nn_heads = 2\nn_layers = 1\nd_ff = 16\nmax_seq = 32\nseed = 5\n")
                .unwrap();
        assert_eq!(c.vocab, 257);
        assert_eq!(c.init_std, 0.02);
        assert_eq!(ModelConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let base = "d_model = 8\nn_heads = 3\nn_layers = 1\nd_ff = 16\nmax_seq = 32\nseed = 5\n";
        assert!(ModelConfig::from_toml_str(base).is_err());
        let extra = base.replace("n_heads = 3", "n_heads = 2") + "dropout = 0.1\n";
        assert!(ModelConfig::from_toml_str(&extra).is_err());
        let short = base
            .replace("n_heads = 3", "n_heads = 2")
            .replace("max_seq = 32", "max_seq = 1");
        assert!(ModelConfig::from_toml_str(&short).is_err());
    }

    #[test]
    fn bytes_encode_after_bos() {
        assert_eq!(encode_bytes(b"Hi"), vec![256, 72, 105]);
    }
}
