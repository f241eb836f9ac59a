use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the model are trained and evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Encoder, both decoders, likelihood and unlikelihood objectives.
    #[default]
    Full,
    /// Drops the unlikelihood objective.
    NoUl,
    /// Drops the unlikelihood objective and the consistency decoder.
    ED1,
    /// Encoder only, trained as a masked-token predictor.
    EOnly,
}

impl Ablation {
    pub fn uses_d2(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoUl)
    }

    pub fn uses_unlikelihood(self) -> bool {
        self == Ablation::Full
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoUl => "no_ul",
            Ablation::ED1 => "e_d1",
            Ablation::EOnly => "e_only",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_ul" => Ok(Ablation::NoUl),
            "e_d1" => Ok(Ablation::ED1),
            "e_only" => Ok(Ablation::EOnly),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected full, no_ul, e_d1 or e_only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// Where the consistency decoder reads persona representations from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaSource {
    /// Embedding-layer output over the persona segment.
    #[default]
    Embeddings,
    /// Encoder output restricted to the persona positions.
    EncoderOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub ablation: Ablation,
    pub activation: Activation,
    /// Share the token embedding matrix as the output projection of both decoders.
    pub tie_embeddings: bool,
    /// Apply a left-to-right mask inside the consistency decoder.
    pub d2_causal: bool,
    pub persona_source: PersonaSource,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, hidden 64, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 128,
            vocab_size,
            max_len: 64,
            dropout: 0.1,
            ablation: Ablation::Full,
            activation: Activation::Relu,
            tie_embeddings: true,
            d2_causal: false,
            persona_source: PersonaSource::Embeddings,
        }
    }

    /// BERT-base sized preset (12 layers, hidden 768).
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            max_len: 512,
            ..Self::desk(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size <= crate::data::MASK {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk(100).validate().unwrap();
        let p = ModelConfig::paper(30000);
        p.validate().unwrap();
        assert_eq!((p.num_layers, p.hidden_size), (12, 768));
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut c = ModelConfig::desk(100);
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in [Ablation::Full, Ablation::NoUl, Ablation::ED1, Ablation::EOnly] {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
    }
}
