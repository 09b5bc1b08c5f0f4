use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveVariant {
    Ccrl,
    Infonce,
    None,
}

impl FromStr for ContrastiveVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccrl" => Ok(ContrastiveVariant::Ccrl),
            "infonce" => Ok(ContrastiveVariant::Infonce),
            "none" => Ok(ContrastiveVariant::None),
            other => Err(Error::Config(format!("unknown contrastive variant {other:?}"))),
        }
    }
}

impl fmt::Display for ContrastiveVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveVariant::Ccrl => "ccrl",
            ContrastiveVariant::Infonce => "infonce",
            ContrastiveVariant::None => "none",
        })
    }
}

/// Component removals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// No modality-level context generation; the modality-level block attends
    /// to the self-attended target instead.
    NoMmg,
    /// No sample-level context generation.
    NoSmg,
    /// No modality-level cross-augment blocks.
    NoMcae,
    /// No sample-level cross-augment blocks.
    NoScae,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoMmg, Ablation::NoSmg, Ablation::NoMcae, Ablation::NoScae];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoMmg => "no_mmg",
            Ablation::NoSmg => "no_smg",
            Ablation::NoMcae => "no_mcae",
            Ablation::NoScae => "no_scae",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation flag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Width of the shared retrieval space.
    pub d_shared: usize,
    pub prompt_len: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub contrastive_variant: ContrastiveVariant,
    pub infonce_temperature: f64,
    pub ablations: BTreeSet<Ablation>,
    pub seed: u64,
    pub ffn_mult: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            d_shared: 128,
            prompt_len: 128,
            gamma: 50.0,
            lambda: 0.001,
            batch_size: 8,
            learning_rate: 1e-5,
            epochs: 50,
            contrastive_variant: ContrastiveVariant::Ccrl,
            infonce_temperature: 0.07,
            ablations: BTreeSet::new(),
            seed: 0,
            ffn_mult: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_shared", self.d_shared),
            ("prompt_len", self.prompt_len),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let rates = [
            ("gamma", self.gamma),
            ("learning_rate", self.learning_rate),
            ("infonce_temperature", self.infonce_temperature),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("lambda", self.lambda),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// Returns `config` with the named component removals added.
pub fn ablate<S: AsRef<str>>(config: &ModelConfig, flags: &[S]) -> Result<ModelConfig> {
    let mut out = config.clone();
    for flag in flags {
        out.ablations.insert(flag.as_ref().trim().parse()?);
    }
    Ok(out)
}

/// Parses a comma-separated ablation list such as `no_mmg,no_scae`.
pub fn parse_ablations(list: &str) -> Result<BTreeSet<Ablation>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}
