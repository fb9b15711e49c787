//! The denoiser contract the controller drives, plus its implementations.
//!
//! A backend holds one sampling session: two prompt branches (original and
//! edited) denoised from the same initial latent, each stepped
//! independently from `t = T` down to `t = 1`. Every step returns the
//! guided noise prediction, the cross-attention maps computed for the
//! conditional pass, and the visual (query) features of the layers closest
//! to 32×32. Maps passed in through `injected` replace the computed ones
//! before the attention-value product of the conditional pass.

pub mod loopback;
pub mod protocol;
pub mod remote;
pub mod sampler;
pub mod toy;

use image::RgbImage;

use crate::align::Vocabulary;
use crate::error::Result;
use crate::tensor::Matrix;

pub use remote::RemoteBackend;
pub use sampler::{cfg_combine, forward_noise, reverse_step, NoiseSchedule};
pub use toy::ToyBackend;

pub type LayerId = u16;

/// Side length of the grid FWT and DPS quantities live on.
pub const FEATURE_GRID: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerInfo {
    pub id: LayerId,
    pub height: u16,
    pub width: u16,
    pub heads: u16,
}

impl LayerInfo {
    pub fn pixels(&self) -> usize {
        usize::from(self.height) * usize::from(self.width)
    }

    pub fn grid(&self) -> (usize, usize) {
        (usize::from(self.height), usize::from(self.width))
    }
}

/// Layers whose pixel count is closest to the 32×32 feature grid.
pub fn nearest_feature_layers(layers: &[LayerInfo]) -> Vec<LayerInfo> {
    let target = FEATURE_GRID * FEATURE_GRID;
    let best = layers.iter().map(|l| l.pixels().abs_diff(target)).min();
    layers
        .iter()
        .filter(|l| Some(l.pixels().abs_diff(target)) == best)
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Original,
    Edit,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Original, Branch::Edit];

    pub fn code(self) -> u8 {
        match self {
            Branch::Original => 0,
            Branch::Edit => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Branch::Original),
            1 => Some(Branch::Edit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSpec {
    pub steps: usize,
    pub guidance: f32,
    pub seed: u64,
    pub prompt: String,
    pub edit: String,
    pub null_prompt: String,
}

/// Per-head attention maps of one layer, each `pixels × context` with rows
/// summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    pub layer: LayerId,
    pub heads: Vec<Matrix>,
}

impl LayerMaps {
    /// Head-averaged map.
    pub fn mean(&self) -> Matrix {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            for (a, &v) in acc.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *a += v;
            }
        }
        if self.heads.len() > 1 {
            let k = 1.0 / self.heads.len() as f32;
            acc.as_mut_slice().iter_mut().for_each(|v| *v *= k);
        }
        acc
    }
}

/// Query features of one layer, `pixels × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub layer: LayerId,
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub noise_pred: Matrix,
    pub maps: Vec<LayerMaps>,
    pub features: Vec<LayerFeatures>,
}

pub trait Backend: Send {
    fn vocabulary(&self) -> &dyn Vocabulary;

    /// Starts (or restarts) a session; returns the layer catalog.
    fn init(&mut self, spec: &SessionSpec) -> Result<Vec<LayerInfo>>;

    /// Runs denoising step `t` for `branch`, advancing its latent to `t - 1`.
    fn step(&mut self, t: usize, branch: Branch, injected: &[LayerMaps]) -> Result<StepOutput>;

    /// Decodes a branch whose latent has reached `t = 0`.
    fn decode(&mut self, branch: Branch) -> Result<RgbImage>;

    fn close(&mut self) -> Result<()>;
}
