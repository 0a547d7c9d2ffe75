use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Error, Result};
use crate::metabolite::Metabolite;

/// Network variants compared in the multi-scale study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleScale,
    Unconditioned,
    AmLayer,
    Hypernet,
    FilterScaling,
    FilterScalingMet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SingleScale,
        Variant::Unconditioned,
        Variant::AmLayer,
        Variant::Hypernet,
        Variant::FilterScaling,
        Variant::FilterScalingMet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleScale => "single_scale",
            Variant::Unconditioned => "unconditioned",
            Variant::AmLayer => "am_layer",
            Variant::Hypernet => "hypernet",
            Variant::FilterScaling => "filter_scaling",
            Variant::FilterScalingMet => "filter_scaling_met",
        }
    }

    /// Whether the variant takes any condition at all.
    pub fn is_conditioned(self) -> bool {
        !matches!(self, Variant::SingleScale | Variant::Unconditioned)
    }

    pub fn is_metabolite_aware(self) -> bool {
        self == Variant::FilterScalingMet
    }

    pub fn uses_filter_scaling(self) -> bool {
        matches!(self, Variant::FilterScaling | Variant::FilterScalingMet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err(format!("unknown variant `{s}`")))
    }
}

/// Depth counts every fully-connected layer on the path from input to a head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub depth: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: Variant,
    /// Channels per feature level, finest first.
    pub channels: Vec<usize>,
    pub grid_size: usize,
    /// Scale MLP; resolution-only or metabolite-aware sizes depending on variant.
    pub scale_net: MlpShape,
    /// Normalization-modulation MLP fed by the adversarial weight.
    pub norm_net: MlpShape,
    /// Feature-modulation MLP of the AMLayer baseline and the weight generator
    /// of the hypernetwork baseline.
    pub baseline_net: MlpShape,
    pub embed_dim: usize,
    pub critic_channels: Vec<usize>,
    pub critic_hidden: usize,
}

pub const NUM_ENCODERS: usize = 3;
pub const NUM_LEVELS: usize = 5;

impl NetConfig {
    /// Channel schedule and conditioning sizes used for full-scale training.
    pub fn paper(variant: Variant) -> Self {
        let scale_net = if variant.is_metabolite_aware() {
            MlpShape { depth: 7, width: 64 }
        } else {
            MlpShape { depth: 5, width: 32 }
        };
        NetConfig {
            variant,
            channels: vec![8, 16, 32, 64, 128],
            grid_size: 64,
            scale_net,
            norm_net: MlpShape { depth: 5, width: 64 },
            baseline_net: MlpShape { depth: 5, width: 32 },
            embed_dim: 3,
            critic_channels: vec![32, 64, 128, 256],
            critic_hidden: 256,
        }
    }

    /// Reduced channel schedule for quick experiments.
    pub fn desk(variant: Variant) -> Self {
        NetConfig {
            channels: vec![4, 8, 16, 32, 64],
            critic_channels: vec![16, 32, 64, 128],
            critic_hidden: 128,
            ..Self::paper(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_LEVELS {
            return Err(config_err(format!("expected {NUM_LEVELS} channel levels, got {}", self.channels.len())));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(config_err("channels must be positive and strictly increasing"));
        }
        let stride = 1usize << (NUM_LEVELS - 1);
        if self.grid_size < stride || self.grid_size % stride != 0 {
            return Err(config_err(format!("grid size must be a multiple of {stride}")));
        }
        for s in [self.scale_net, self.norm_net, self.baseline_net] {
            if s.depth < 2 || s.width == 0 {
                return Err(config_err("conditioning MLPs need depth >= 2 and non-zero width"));
            }
        }
        if self.critic_channels.len() != 4 || self.grid_size % 16 != 0 {
            return Err(config_err("critic expects 4 stride-2 levels on a grid divisible by 16"));
        }
        if self.embed_dim == 0 {
            return Err(config_err("embedding dimension must be positive"));
        }
        Ok(())
    }
}

/// The triple that modulates the network: input resolution, metabolite and adversarial weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionTuple {
    pub n: usize,
    pub metabolite: Metabolite,
    pub lambda_adv: f64,
}

impl ConditionTuple {
    pub fn new(n: usize, metabolite: Metabolite, lambda_adv: f64) -> Self {
        ConditionTuple { n, metabolite, lambda_adv }
    }

    pub fn validate(&self, grid_size: usize) -> Result<()> {
        if self.n < 2 || self.n % 2 != 0 || self.n > grid_size {
            return Err(arg_err(format!("resolution must be an even integer in [2, {grid_size}], got {}", self.n)));
        }
        if !(self.lambda_adv >= 0.0) || !self.lambda_adv.is_finite() {
            return Err(arg_err(format!("adversarial weight must be finite and >= 0, got {}", self.lambda_adv)));
        }
        Ok(())
    }
}
