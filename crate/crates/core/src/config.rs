//! Run configuration, read from a flat `key = value` TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CdapError, Result};

/// Distance used inside the prototype softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    SquaredEuclidean,
    Euclidean,
}

/// How prototypes aggregate their support rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Query-conditioned attention weights.
    Adaptive,
    /// Constant attention logits, i.e. the plain class mean.
    Mean,
}

/// Rule used to split non-entity spans into sub-classes. Only the boundary rule exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ODivision {
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// Seeded pseudo-random vector per token string.
    Hashed,
    /// `word v1 … v_d1` text file; unknown words fall back to the hashed vector.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub delta: f64,
    pub max_span_len: usize,
    pub train_max_span_len: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub d1: usize,
    pub d: usize,
    pub distance: Distance,
    pub attention: AttentionMode,
    pub cross_attention: bool,
    pub o_division: ODivision,
    pub encoder_adapter: bool,
    pub provider: ProviderKind,
    pub embedding_path: Option<String>,
    pub embedding_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta: 1.0,
            gamma: 0.05,
            temperature: 1.0,
            delta: 0.02,
            max_span_len: 8,
            train_max_span_len: 8,
            lr_encoder: 2e-5,
            lr_head: 5e-4,
            warmup_steps: 1000,
            max_steps: 2000,
            batch_size: 2,
            weight_decay: 0.01,
            seed: 42,
            d1: 64,
            d: 32,
            distance: Distance::SquaredEuclidean,
            attention: AttentionMode::Adaptive,
            cross_attention: true,
            o_division: ODivision::Boundary,
            encoder_adapter: false,
            provider: ProviderKind::Hashed,
            embedding_path: None,
            embedding_seed: 0,
        }
    }
}

/// Every configuration key with a one-line description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("lambda", "weight of the token-level loss (default 0.1)"),
    ("beta", "weight of the span-level loss (default 1)"),
    ("gamma", "weight of the consistency loss (default 0.05)"),
    ("temperature", "temperature T of the consistency loss (default 1)"),
    ("delta", "penalty per inconsistent token at decode time (default 0.02)"),
    ("max_span_len", "longest span enumerated at decode time, L (default 8)"),
    ("train_max_span_len", "longest span enumerated in training, 0 = unlimited (default 8)"),
    ("lr_encoder", "peak learning rate of the encoder group (default 2e-5)"),
    ("lr_head", "peak learning rate of all other parameters (default 5e-4)"),
    ("warmup_steps", "linear warmup steps before linear decay (default 1000)"),
    ("max_steps", "optimizer steps (default 2000)"),
    ("batch_size", "episodes per optimizer step (default 2)"),
    ("weight_decay", "decoupled AdamW weight decay (default 0.01)"),
    ("seed", "seed for initialization and batch sampling (default 42)"),
    ("d1", "embedding width (default 64)"),
    ("d", "projected width (default 32)"),
    ("distance", "squared-euclidean | euclidean (default squared-euclidean)"),
    ("attention", "adaptive | mean prototypes (default adaptive)"),
    ("cross_attention", "enable the support/query cross-attention block (default true)"),
    ("o_division", "boundary (only rule available)"),
    ("encoder_adapter", "train a d1×d1 adapter in the encoder group (default false)"),
    ("provider", "hashed | pretrained embeddings (default hashed)"),
    ("embedding_path", "text embedding file for the pretrained provider"),
    ("embedding_seed", "seed of the hashed embeddings (default 0)"),
];

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| CdapError::Parse {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_owned(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("temperature", self.temperature)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CdapError::validation(format!("`{name}` must be positive")));
            }
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("lr_encoder", self.lr_encoder),
            ("lr_head", self.lr_head),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CdapError::validation(format!("`{name}` must be non-negative")));
            }
        }
        if self.max_span_len == 0 {
            return Err(CdapError::validation("`max_span_len` must be at least 1"));
        }
        if self.d1 == 0 || self.d == 0 || self.batch_size == 0 {
            return Err(CdapError::validation("`d1`, `d` and `batch_size` must be positive"));
        }
        if self.warmup_steps > self.max_steps {
            return Err(CdapError::validation(format!(
                "`warmup_steps` ({}) exceeds `max_steps` ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        if self.provider == ProviderKind::Pretrained && self.embedding_path.is_none() {
            return Err(CdapError::validation("pretrained provider needs `embedding_path`"));
        }
        Ok(())
    }

    /// Training span cap with 0 meaning unlimited.
    pub fn train_span_cap(&self) -> usize {
        if self.train_max_span_len == 0 {
            usize::MAX
        } else {
            self.train_max_span_len
        }
    }

    /// Text listing all keys, for `--help`.
    pub fn keys_help() -> String {
        let mut out = String::from("Config keys (TOML `key = value`):\n");
        for (key, doc) in CONFIG_KEYS {
            out.push_str(&format!("  {key:<20} {doc}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = Config::default();
        assert_eq!((c.lambda, c.beta, c.gamma, c.delta), (0.1, 1.0, 0.05, 0.02));
        assert_eq!((c.max_span_len, c.warmup_steps), (8, 1000));
        assert_eq!(c.temperature, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn every_key_is_documented() {
        let table: toml::Table = toml::from_str(&Config::default().to_toml_string()).unwrap();
        let documented: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        for key in table.keys() {
            assert!(documented.contains(&key.as_str()), "undocumented key {key}");
        }
        // embedding_path is None by default and therefore absent from the table
        assert_eq!(documented.len(), table.len() + 1);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c = Config::from_toml_str("gamma = 0.2\ndistance = \"euclidean\"\nmax_steps = 10\nwarmup_steps = 5\n").unwrap();
        assert_eq!(c.gamma, 0.2);
        assert_eq!(c.distance, Distance::Euclidean);
        assert_eq!(c.lambda, 0.1);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Config::from_toml_str("unknown_key = 1").is_err());
        assert!(Config::from_toml_str("o_division = \"esd\"").is_err());
        assert!(matches!(
            Config::from_toml_str("warmup_steps = 10\nmax_steps = 5"),
            Err(CdapError::Validation(_))
        ));
        assert!(Config::from_toml_str("temperature = 0.0").is_err());
        assert!(Config::from_toml_str("provider = \"pretrained\"").is_err());
    }
}
