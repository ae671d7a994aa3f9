//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cwrnn_core::data_io::{load_video, synth, CropMode, DatasetSpec, FrameSequence};
use cwrnn_core::model::{BudgetOptions, Variant};
use cwrnn_core::training::{FitSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSection {
    /// A frame directory, a raw clip, or `synth:<kind>:<T>x<H>x<W>`.
    pub source: Option<String>,
    pub crop: CropMode,
    pub target_dims: Option<(usize, usize)>,
    pub frame_range: Option<(usize, usize)>,
    pub stride: usize,
    pub synth_seed: u64,
}

impl Default for VideoSection {
    fn default() -> Self {
        Self {
            source: None,
            crop: CropMode::Center,
            target_dims: None,
            frame_range: None,
            stride: 1,
            synth_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub target_params: usize,
    pub grid_ratio: f64,
    pub budget: BudgetOptions,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::V3Coupled,
            target_params: 60_000,
            grid_ratio: 0.2,
            budget: BudgetOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub video: VideoSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bits: Option<u8>,
}

/// Values given on the command line; `None` keeps the file's value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub target_params: Option<usize>,
    pub grid_ratio: Option<f64>,
    pub bits: Option<u8>,
    pub group_len: Option<usize>,
    pub epochs: Option<usize>,
    pub video: Option<String>,
}

pub const DEFAULT_BITS: u8 = 8;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.variant {
            self.model.variant = v;
            if v == Variant::V1NoGrid {
                self.model.grid_ratio = 0.0;
            }
        }
        if let Some(v) = o.target_params {
            self.model.target_params = v;
        }
        if let Some(v) = o.grid_ratio {
            self.model.grid_ratio = v;
        }
        if let Some(v) = o.bits {
            self.bits = Some(v);
        }
        if let Some(v) = o.group_len {
            self.train.group_len = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = &o.video {
            self.video.source = Some(v.clone());
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits.unwrap_or(DEFAULT_BITS)
    }

    pub fn fit_spec(&self) -> FitSpec {
        FitSpec {
            variant: self.model.variant,
            target_params: self.model.target_params,
            grid_ratio: self.model.grid_ratio,
            budget: self.model.budget.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        if self.model.variant == Variant::V1NoGrid && self.model.grid_ratio > 0.0 {
            bail!(UsageError(
                "variant v1 has no grid; drop --grid-ratio".into()
            ));
        }
        Ok(())
    }

    /// Loads the configured video; a missing source is a usage error.
    pub fn load_video(&self) -> Result<FrameSequence> {
        let source =
            self.video.source.as_deref().ok_or_else(|| {
                UsageError("no video given; pass --video or set video.source".into())
            })?;
        load_source(
            source,
            &self.video,
            self.model.budget.upsample_factors.iter().product(),
        )
    }
}

/// Parses `synth:<kind>:<T>x<H>x<W>`.
pub fn parse_synth(source: &str) -> Result<Option<(String, usize, usize, usize)>> {
    let Some(rest) = source.strip_prefix("synth:") else {
        return Ok(None);
    };
    let (kind, dims) = rest
        .split_once(':')
        .ok_or_else(|| UsageError(format!("expected synth:<kind>:<T>x<H>x<W>, got {source}")))?;
    let nums: Vec<usize> = dims
        .split('x')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| UsageError(format!("bad synthetic dims {dims:?}")))?;
    match nums[..] {
        [t, h, w] => Ok(Some((kind.to_owned(), t, h, w))),
        _ => Err(UsageError(format!("bad synthetic dims {dims:?}")).into()),
    }
}

pub fn synth_clip(kind: &str, t: usize, h: usize, w: usize, seed: u64) -> Result<FrameSequence> {
    let make = match kind {
        "cartoon" => synth::cartoon,
        "blobs" => synth::blobs,
        "flower" => synth::flower,
        "portrait" => synth::portrait,
        _ => bail!(UsageError(format!(
            "unknown synthetic clip {kind:?} (cartoon, blobs, flower, portrait)"
        ))),
    };
    if t == 0 || h == 0 || w == 0 {
        bail!(UsageError("synthetic dims must be positive".into()));
    }
    Ok(make(t, h, w, seed))
}

pub fn load_source(source: &str, section: &VideoSection, divisor: usize) -> Result<FrameSequence> {
    if let Some((kind, t, h, w)) = parse_synth(source)? {
        return synth_clip(&kind, t, h, w, section.synth_seed);
    }
    let path = PathBuf::from(source);
    if !path.exists() {
        bail!(UsageError(format!(
            "video source {} does not exist",
            path.display()
        )));
    }
    let spec = DatasetSpec {
        source: path,
        crop: section.crop,
        target_dims: section.target_dims,
        frame_range: section.frame_range,
        stride: section.stride,
        divisor,
    };
    load_video(&spec).with_context(|| format!("loading {source}"))
}
