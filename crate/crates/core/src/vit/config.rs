use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the transformer classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_units: usize,
    /// Width of the dense layer added on top of the encoder.
    pub head_units: usize,
    pub num_classes: usize,
    /// Keep probability of the head dropout.
    pub dropout_keep: f32,
}

impl ViTConfig {
    /// The large-16 encoder with the 4096-unit classification head.
    pub fn paper_large_16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 1,
            hidden_size: 1024,
            num_heads: 16,
            num_layers: 24,
            mlp_units: 4096,
            head_units: 4096,
            num_classes: 7,
            dropout_keep: 0.5,
        }
    }

    /// Desk-scale preset used for end-to-end training.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            hidden_size: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_units: 128,
            head_units: 64,
            num_classes: 7,
            dropout_keep: 0.5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-large-16" => Ok(Self::paper_large_16()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected \"tiny\" or \"paper-large-16\")"
            ))),
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("mlp_units", self.mlp_units),
            ("head_units", self.head_units),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout keep {} outside (0, 1]", self.dropout_keep)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Number of learnable parameters implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_size;
        let embed = self.patch_dim() * h + h + h + self.tokens() * h;
        let block = 2 * h + (h * 3 * h + 3 * h) + (h * h + h) + 2 * h + (h * self.mlp_units + self.mlp_units)
            + (self.mlp_units * h + h);
        let head = (h * self.head_units + self.head_units) + 2 * self.head_units
            + (self.head_units * self.num_classes + self.num_classes);
        embed + self.num_layers * block + 2 * h + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ViTConfig::tiny().validate().unwrap();
        ViTConfig::paper_large_16().validate().unwrap();
        assert_eq!(ViTConfig::paper_large_16().grid(), 14);
        assert_eq!(ViTConfig::tiny().tokens(), 65);
    }

    #[test]
    fn tiny_parameter_count_matches_hand_total() {
        // embed 4160 + cls 64 + pos 4160, 4 blocks of 33472, final norm 128,
        // head 4160 + 128 + 455.
        assert_eq!(ViTConfig::tiny().parameter_count(), 147_143);
    }

    #[test]
    fn rejects_indivisible_geometry() {
        let mut c = ViTConfig::tiny();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::tiny();
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::tiny();
        c.dropout_keep = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(ViTConfig::preset("huge").is_err());
    }
}
