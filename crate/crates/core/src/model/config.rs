use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::ConvParams;

pub const KERNEL: usize = 3;

/// Architecture variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Coupled WarpRNN without the residual grid.
    #[serde(alias = "v1")]
    V1NoGrid,
    /// One WarpRNN on the grid-enhanced state.
    #[serde(alias = "v2")]
    V2SingleWarprnn,
    /// Coupled local/global WarpRNN with the residual grid.
    #[serde(alias = "v3")]
    V3Coupled,
}

impl Variant {
    pub fn is_coupled(self) -> bool {
        !matches!(self, Variant::V2SingleWarprnn)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::V1NoGrid => "v1",
            Variant::V2SingleWarprnn => "v2",
            Variant::V3Coupled => "v3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" | "v1_no_grid" => Ok(Variant::V1NoGrid),
            "v2" | "v2_single_warprnn" => Ok(Variant::V2SingleWarprnn),
            "v3" | "v3_coupled" => Ok(Variant::V3Coupled),
            other => Err(invalid(format!(
                "unknown variant {other:?} (expected v1, v2 or v3)"
            ))),
        }
    }
}

/// Temporal resolution and channel count of the residual grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub slots: usize,
    pub channels: usize,
}

/// Complete architecture description of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub frame_height: usize,
    pub frame_width: usize,
    pub num_frames: usize,
    pub hidden_channels: usize,
    /// Upsample factor of each decoder block, first block first.
    pub upsample_factors: Vec<usize>,
    /// Width after the spatial projection, then the output width of every block.
    pub decoder_channels: Vec<usize>,
    pub grid: Option<GridDims>,
    pub target_params: usize,
    pub grid_ratio: f64,
}

impl ModelConfig {
    pub fn total_upsample(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn hidden_height(&self) -> usize {
        self.frame_height / self.total_upsample().max(1)
    }

    pub fn hidden_width(&self) -> usize {
        self.frame_width / self.total_upsample().max(1)
    }

    pub fn hidden_shape(&self) -> [usize; 3] {
        [
            self.hidden_channels,
            self.hidden_height(),
            self.hidden_width(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let up = self.total_upsample();
        if self.upsample_factors.is_empty() || self.upsample_factors.contains(&0) {
            return Err(invalid("upsample factors must be non-empty and positive"));
        }
        if self.frame_height == 0
            || self.frame_width == 0
            || self.frame_height % up != 0
            || self.frame_width % up != 0
        {
            return Err(invalid(format!(
                "frame {}x{} is not divisible by the total upsample factor {up}",
                self.frame_height, self.frame_width
            )));
        }
        if self.num_frames == 0 {
            return Err(invalid("a video needs at least one frame"));
        }
        if self.hidden_channels == 0 {
            return Err(invalid("hidden_channels must be positive"));
        }
        if self.decoder_channels.len() != self.upsample_factors.len() + 1
            || self.decoder_channels.contains(&0)
        {
            return Err(invalid(format!(
                "decoder_channels needs {} positive entries, got {:?}",
                self.upsample_factors.len() + 1,
                self.decoder_channels
            )));
        }
        if !(0.0..1.0).contains(&self.grid_ratio) {
            return Err(invalid(format!(
                "grid_ratio {} outside [0, 1)",
                self.grid_ratio
            )));
        }
        match (self.variant, self.grid) {
            (Variant::V1NoGrid, Some(_)) => {
                return Err(invalid("variant v1 has no residual grid"));
            }
            (Variant::V1NoGrid, None) if self.grid_ratio != 0.0 => {
                return Err(invalid("variant v1 requires grid_ratio = 0"));
            }
            (_, Some(g)) if g.slots == 0 || g.channels == 0 || g.slots > self.num_frames => {
                return Err(invalid(format!(
                    "grid needs 1 <= L <= T ({}) and C_g >= 1, got {g:?}",
                    self.num_frames
                )));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn grid_params(&self) -> usize {
        self.grid.map_or(0, |g| {
            g.slots * g.channels * self.hidden_height() * self.hidden_width()
        })
    }

    /// Learnable element count implied by this configuration.
    pub fn param_count(&self) -> usize {
        let c = self.hidden_channels;
        let hw = self.hidden_height() * self.hidden_width();
        let coupled = self.variant.is_coupled();
        let cells = if coupled { 2 } else { 1 };
        let cell = ConvParams::numel(2 * c, 2 * c, KERNEL) + ConvParams::numel(2 * c, c, KERNEL);

        let mut n = cells * c * hw;
        if let Some(g) = self.grid {
            n += self.grid_params() + ConvParams::numel(g.channels, c, KERNEL);
        }
        if coupled {
            n += ConvParams::numel(c, 1, KERNEL);
        }
        n += ConvParams::numel(c, 2, KERNEL);
        n += cells * cell;
        n += ConvParams::numel(c, self.decoder_channels[0], KERNEL);
        for (i, s) in self.upsample_factors.iter().enumerate() {
            n += ConvParams::numel(
                self.decoder_channels[i],
                self.decoder_channels[i + 1] * s * s,
                KERNEL,
            );
        }
        n += ConvParams::numel(*self.decoder_channels.last().unwrap_or(&1), 3, KERNEL);
        n
    }
}
