use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Forecast,
    Classify,
}

fn default_ffn_mult() -> usize {
    4
}

/// Shape of the backbone and its front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub patch_size: usize,
    pub input_length: usize,
    /// Recorded for parity with published configurations; not consumed.
    #[serde(default)]
    pub label_length: usize,
    pub horizon: usize,
    pub n_vars: usize,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub n_classes: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Seed of the frozen weights, standing in for a fixed pretrained checkpoint.
    #[serde(default)]
    pub backbone_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 6 layers, 4 heads, D = 64, patch 16.
    pub fn desk(input_length: usize, horizon: usize, n_vars: usize) -> Self {
        ModelConfig {
            layers: 6,
            heads: 4,
            hidden_dim: 64,
            patch_size: 16,
            input_length,
            label_length: 0,
            horizon,
            n_vars,
            head: HeadKind::Forecast,
            n_classes: 0,
            ffn_mult: 4,
            backbone_seed: 0,
        }
    }

    /// ETTh1 lookback and horizon at desk width.
    pub fn etth1() -> Self {
        ModelConfig {
            label_length: 168,
            ..Self::desk(336, 96, 7)
        }
    }

    pub fn num_patches(&self) -> usize {
        if self.patch_size == 0 {
            0
        } else {
            self.input_length / self.patch_size
        }
    }

    /// Width of one flattened patch, `P·d`.
    pub fn patch_width(&self) -> usize {
        self.patch_size * self.n_vars
    }

    pub fn head_in(&self) -> usize {
        match self.head {
            HeadKind::Forecast => self.num_patches() * self.hidden_dim,
            HeadKind::Classify => self.hidden_dim,
        }
    }

    pub fn head_out(&self) -> usize {
        match self.head {
            HeadKind::Forecast => self.horizon * self.n_vars,
            HeadKind::Classify => self.n_classes,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.layers == 0 {
            p.push("layers must be positive".to_string());
        }
        if self.hidden_dim == 0 {
            p.push("hidden_dim must be positive".to_string());
        }
        if self.heads == 0 || self.hidden_dim % self.heads.max(1) != 0 {
            p.push(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.heads, self.hidden_dim
            ));
        }
        if self.patch_size == 0 || self.input_length % self.patch_size.max(1) != 0 {
            p.push(format!(
                "patch_size ({}) must divide input_length ({})",
                self.patch_size, self.input_length
            ));
        }
        if self.input_length < 2 {
            p.push("input_length must be at least 2".to_string());
        }
        if self.n_vars == 0 {
            p.push("n_vars must be positive".to_string());
        }
        if self.ffn_mult == 0 {
            p.push("ffn_mult must be positive".to_string());
        }
        match self.head {
            HeadKind::Forecast if self.horizon == 0 => {
                p.push("horizon must be at least 1 for a forecast head".to_string())
            }
            HeadKind::Classify if self.n_classes < 2 => {
                p.push("n_classes must be at least 2 for a classify head".to_string())
            }
            _ => {}
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn etth1_has_21_patches() {
        let c = ModelConfig::etth1();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 21);
        assert_eq!(c.head_out(), 96 * 7);
    }

    #[test]
    fn invalid_configs_are_reported() {
        let mut c = ModelConfig::desk(96, 96, 3);
        c.patch_size = 10;
        c.heads = 5;
        let p = c.problems();
        assert_eq!(p.len(), 2, "{p:?}");
    }
}
