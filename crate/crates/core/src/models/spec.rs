use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::features::{CONTEXT_FRAMES, N_BINS};

pub const NUM_TASKS: usize = 5;
pub const NUM_KEYS: usize = 88;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Onset,
    Intermediate,
    Offset,
    Velocity,
    Sustain,
}

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [
        Task::Onset,
        Task::Intermediate,
        Task::Offset,
        Task::Velocity,
        Task::Sustain,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Task::Onset => "on",
            Task::Intermediate => "int",
            Task::Offset => "off",
            Task::Velocity => "vel",
            Task::Sustain => "sus",
        }
    }

    /// Sigmoid-output classification task (as opposed to a regression).
    pub fn is_binary(self) -> bool {
        matches!(self, Task::Onset | Task::Intermediate | Task::Offset)
    }

    pub fn units(self) -> usize {
        if self == Task::Sustain {
            1
        } else {
            NUM_KEYS
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    HardSharing,
    CrossStitch,
}

/// How gradients pass through cross-stitch units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StitchMode {
    /// Gradients flow into every tower that contributed to a mix.
    Full,
    /// Cross-tower terms are detached; each tower only receives gradient
    /// through its own (diagonal) term. Alphas are trained in both modes.
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaInit {
    /// Every entry `1/M`.
    Balanced,
    /// `0.9` on the diagonal, `0.1` elsewhere.
    Imbalanced,
}

impl AlphaInit {
    pub fn matrix<T: Element>(self) -> Tensor<T> {
        let mut a = Vec::with_capacity(NUM_TASKS * NUM_TASKS);
        for m in 0..NUM_TASKS {
            for o in 0..NUM_TASKS {
                a.push(match self {
                    AlphaInit::Balanced => T::one() / T::from_usize(NUM_TASKS).unwrap(),
                    AlphaInit::Imbalanced if o == m => T::from_f64_lossy(0.9),
                    AlphaInit::Imbalanced => T::from_f64_lossy(0.1),
                });
            }
        }
        Tensor::new(vec![NUM_TASKS, NUM_TASKS], a).unwrap()
    }
}

/// Feature-map counts of the five conv blocks and the dense width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkLayout {
    pub conv_channels: [usize; 5],
    pub dense_units: usize,
}

impl TrunkLayout {
    pub const HARD_SHARING: TrunkLayout = TrunkLayout {
        conv_channels: [32, 32, 64, 96, 96],
        dense_units: 512,
    };

    pub const CROSS_STITCH_TOWER: TrunkLayout = TrunkLayout {
        conv_channels: [16, 16, 32, 48, 48],
        dense_units: 128,
    };

    /// (time, frequency) extent of the feature map entering block 4.
    pub fn extent_before_block4(&self) -> (usize, usize) {
        let t = CONTEXT_FRAMES - 2 * 3;
        let f = ((N_BINS - 4) / 2 - 2) / 2;
        (t, f)
    }
}

/// Architecture description; together with the seed it fully determines
/// the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Ignored for hard sharing.
    pub stitch_mode: StitchMode,
    /// Ignored for hard sharing.
    pub alpha_init: AlphaInit,
    pub trunk: TrunkLayout,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

    pub fn hard_sharing(seed: u64) -> Self {
        Self {
            architecture: Architecture::HardSharing,
            stitch_mode: StitchMode::Full,
            alpha_init: AlphaInit::Imbalanced,
            trunk: TrunkLayout::HARD_SHARING,
            noise_sigma: Self::DEFAULT_NOISE_SIGMA,
            seed,
        }
    }

    pub fn cross_stitch(mode: StitchMode, alpha_init: AlphaInit, seed: u64) -> Self {
        Self {
            architecture: Architecture::CrossStitch,
            stitch_mode: mode,
            alpha_init,
            trunk: TrunkLayout::CROSS_STITCH_TOWER,
            noise_sigma: Self::DEFAULT_NOISE_SIGMA,
            seed,
        }
    }

    pub fn layout(&self) -> TrunkLayout {
        self.trunk
    }

    pub fn with_trunk(mut self, trunk: TrunkLayout) -> Self {
        self.trunk = trunk;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }
}
