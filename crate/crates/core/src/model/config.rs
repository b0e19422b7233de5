use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Architecture of the toy unified model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub mlp_expansion: usize,
    pub n_layers_und: usize,
    pub n_layers_gen: usize,
    pub n_heads: usize,
    pub gen_output_dim: usize,
    /// Rows of a generated sample (`L_out`).
    pub gen_len: usize,
    /// Euler steps used by the sampler.
    pub gen_steps: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            mlp_expansion: 4,
            n_layers_und: 8,
            n_layers_gen: 8,
            n_heads: 4,
            gen_output_dim: 16,
            gen_len: 4,
            gen_steps: 8,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_expansion
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("mlp_expansion", self.mlp_expansion),
            ("n_layers_und", self.n_layers_und),
            ("n_layers_gen", self.n_layers_gen),
            ("n_heads", self.n_heads),
            ("gen_output_dim", self.gen_output_dim),
            ("gen_len", self.gen_len),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, v)) = counts.iter().find(|(_, v)| *v < 2) {
            return Err(config(format!("{name} must be at least 2, got {v}")));
        }
        if self.gen_steps == 0 {
            return Err(config("gen_steps must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self, component: Component) -> usize {
        match component {
            Component::Und => self.n_layers_und,
            Component::Gen => self.n_layers_gen,
        }
    }
}

/// The two stacks of the unified model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Und,
    Gen,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Und => "und",
            Component::Gen => "gen",
        }
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "und" | "understanding" => Ok(Component::Und),
            "gen" | "generation" => Ok(Component::Gen),
            other => Err(crate::error::input(format!("unknown component {other:?}"))),
        }
    }
}

/// Which residual branch a layer statistic or removal refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Block,
    Mlp,
    Attn,
}

impl std::str::FromStr for Granularity {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Granularity::Block),
            "mlp" => Ok(Granularity::Mlp),
            "attn" => Ok(Granularity::Attn),
            other => Err(crate::error::input(format!("unknown granularity {other:?}"))),
        }
    }
}

/// What the understanding stack is being run for. It only matters for MoE
/// layers that stay dense for understanding but route sparsely when they
/// produce generation conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    Understanding,
    Conditioning,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hidden(), 128);
        assert_eq!(c.head_dim(), 8);
    }

    #[test]
    fn rejects_indivisible_heads_and_tiny_counts() {
        let c = ModelConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            n_layers_gen: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
