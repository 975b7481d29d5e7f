use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and behavior of a [`VapaadModel`](super::VapaadModel).
///
/// Each block is `ConvLSTM → batch norm → self-attention`; `filters[i]` and
/// `kernels[i]` configure block `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VapaadConfig {
    /// `[H, W]`; frames must be square.
    pub frame_size: [usize; 2],
    pub blocks: usize,
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub max_rotation_deg: f64,
    /// Freeze the attention score path (`W_q`, `W_k`) in every block.
    pub stop_grad: bool,
    /// Also rotate the feature maps entering blocks after the first.
    pub interior_augmentation: bool,
    /// Disabling attention gives the ablation baseline.
    pub attention: bool,
}

impl Default for VapaadConfig {
    fn default() -> Self {
        Self {
            frame_size: [64, 64],
            blocks: 3,
            filters: vec![64, 64, 64],
            kernels: vec![5, 3, 1],
            max_rotation_deg: 15.0,
            stop_grad: false,
            interior_augmentation: false,
            attention: true,
        }
    }
}

impl VapaadConfig {
    /// 32×32 frames, eight filters per block.
    pub fn desk() -> Self {
        Self {
            frame_size: [32, 32],
            filters: vec![8, 8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.frame_size;
        if h != w || h == 0 {
            return Err(Error::Config(format!(
                "frames must be square and non-empty, got {h}x{w}"
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.filters.len() != self.blocks || self.kernels.len() != self.blocks {
            return Err(Error::Config(format!(
                "{} blocks need as many filters and kernels, got {} and {}",
                self.blocks,
                self.filters.len(),
                self.kernels.len()
            )));
        }
        if self.filters.contains(&0) {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} must be odd")));
        }
        if !(self.max_rotation_deg.is_finite() && self.max_rotation_deg >= 0.0) {
            return Err(Error::Config(format!(
                "max_rotation_deg must be finite and non-negative, got {}",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars a model built from this config has.
    pub fn param_count(&self) -> usize {
        let mut c_in = 1;
        let mut total = 0;
        for (&f, &k) in self.filters.iter().zip(&self.kernels) {
            total += 4 * f * c_in * k * k + 4 * f * f * k * k + 4 * f;
            total += 2 * f;
            if self.attention {
                total += 3 * f * f;
            }
            c_in = f;
        }
        total + 27 * c_in + 1
    }
}
