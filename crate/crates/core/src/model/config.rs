use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::vlm::ToyVlmConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaMode {
    /// Learned, starting from the given value.
    Trainable(f32),
    Fixed(f32),
}

impl GammaMode {
    pub fn value(self) -> f32 {
        match self {
            Self::Trainable(v) | Self::Fixed(v) => v,
        }
    }
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Trainable(_) => f.write_str("trainable"),
            Self::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for GammaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "trainable" {
            return Ok(Self::Trainable(0.1));
        }
        s.parse::<f32>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Self::Fixed)
            .ok_or_else(|| {
                Error::Config(format!("gamma must be `trainable` or a number, got {s:?}"))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    /// Concatenate the resized local similarity as an extra channel.
    Concat,
    /// Add it to every channel through a learned per-channel scale.
    Add,
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "cat",
            Self::Add => "add",
        })
    }
}

impl FromStr for MergeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cat" | "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            _ => Err(Error::Config(format!(
                "merge mode must be cat or add, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vlm: ToyVlmConfig,
    /// Number of P2Tformer layers (N).
    pub p2t_layers: usize,
    pub p2t_heads: usize,
    pub gamma: GammaMode,
    pub t2p_kernel: usize,
    /// Kernel size K of the local similarity.
    pub lcs_kernel: usize,
    pub kernel_norm: bool,
    /// Width d_f of the cost embedding.
    pub cost_dim: usize,
    pub agg_heads: usize,
    pub class_layers: usize,
    pub window: usize,
    /// Decoder upsampling stages (N_d).
    pub decoder_stages: usize,
    pub merge: MergeMode,
    pub aux_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vlm: ToyVlmConfig::default(),
            p2t_layers: 1,
            p2t_heads: 4,
            gamma: GammaMode::Trainable(0.1),
            t2p_kernel: 3,
            lcs_kernel: 3,
            kernel_norm: true,
            cost_dim: 16,
            agg_heads: 2,
            class_layers: 2,
            window: 4,
            decoder_stages: 3,
            merge: MergeMode::Concat,
            aux_hidden: 8,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the gradient suite.
    pub fn tiny() -> Self {
        Self {
            vlm: ToyVlmConfig {
                channels: 8,
                ..Default::default()
            },
            p2t_heads: 2,
            cost_dim: 8,
            decoder_stages: 2,
            aux_hidden: 4,
            window: 2,
            ..Default::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.vlm.channels
    }

    /// Output width of decoder stage `s` (1-based).
    pub fn decoder_width(&self, s: usize) -> usize {
        (self.cost_dim >> s).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        self.vlm.validate()?;
        let c = self.channels();
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(
            self.p2t_heads > 0 && c % self.p2t_heads == 0,
            format!("channels {c} not divisible by {} heads", self.p2t_heads),
        )?;
        check(
            self.agg_heads > 0 && self.cost_dim % self.agg_heads == 0,
            format!(
                "cost width {} not divisible by {} heads",
                self.cost_dim, self.agg_heads
            ),
        )?;
        check(
            self.t2p_kernel % 2 == 1,
            format!("T2P kernel size {} must be odd", self.t2p_kernel),
        )?;
        check(
            self.lcs_kernel % 2 == 1,
            format!("kernel size {} must be odd", self.lcs_kernel),
        )?;
        check(
            self.decoder_stages >= 1,
            "decoder needs at least one stage".into(),
        )?;
        check(self.window >= 1, "window must be positive".into())?;
        check(
            self.cost_dim >= 1 && self.aux_hidden >= 1,
            "widths must be positive".into(),
        )?;
        check(
            self.gamma.value().is_finite(),
            "gamma must be finite".into(),
        )
    }
}
