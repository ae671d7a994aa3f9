//! Allocation of a total parameter budget between the residual grid and the
//! network.

use serde::{Deserialize, Serialize};

use super::config::{GridDims, ModelConfig, Variant};
use crate::error::{invalid, Error, Result};

/// Relative tolerance on the realized parameter count.
pub const BUDGET_TOLERANCE: f64 = 0.02;

/// Shape knobs that stay fixed while the allocator scales widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetOptions {
    pub upsample_factors: Vec<usize>,
    /// Target `hidden_channels / decoder_base_width`.
    pub hidden_to_decoder: f64,
    /// Each decoder block divides the width by this factor.
    pub decoder_reduction: f64,
    pub min_decoder_width: usize,
    /// Preferred grid temporal resolution; `None` means `max(2, ceil(T / 4))`.
    pub preferred_slots: Option<usize>,
}

impl Default for BudgetOptions {
    fn default() -> Self {
        Self {
            upsample_factors: vec![4, 2, 2],
            hidden_to_decoder: 0.5,
            decoder_reduction: 2.0,
            min_decoder_width: 8,
            preferred_slots: None,
        }
    }
}

pub const MIN_HIDDEN_CHANNELS: usize = 2;

fn decoder_schedule(base: usize, opts: &BudgetOptions) -> Vec<usize> {
    let mut widths = vec![base];
    let mut w = base as f64;
    for _ in &opts.upsample_factors {
        w /= opts.decoder_reduction;
        widths.push((w.round() as usize).max(opts.min_decoder_width.min(base)));
    }
    widths
}

fn default_slots(num_frames: usize) -> usize {
    (num_frames.div_ceil(4)).max(2).min(num_frames)
}

/// Picks `(L, C_g)` so the grid holds about `target` elements, taking the slot
/// count closest to `preferred` whose grid lands within 1% of the target.
fn allocate_grid(
    target: f64,
    total: f64,
    slice: usize,
    num_frames: usize,
    preferred: usize,
) -> Result<(GridDims, f64)> {
    let candidate = |slots: usize| {
        let channels = ((target / (slots * slice) as f64).round() as usize).max(1);
        let err = ((slots * channels * slice) as f64 - target).abs() / target;
        (GridDims { slots, channels }, err)
    };
    let mut order: Vec<usize> = (1..=num_frames).collect();
    order.sort_by_key(|&s| (s.abs_diff(preferred), s));
    let chosen = order
        .iter()
        .map(|&s| candidate(s))
        .find(|&(_, err)| err <= BUDGET_TOLERANCE / 2.0)
        .unwrap_or_else(|| {
            order
                .iter()
                .map(|&s| candidate(s))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("num_frames >= 1")
        });
    // One grid slice may exceed 2% of a small grid; bound the shift of the
    // realized ratio instead.
    if chosen.1 > BUDGET_TOLERANCE && chosen.1 * target > 0.5 * BUDGET_TOLERANCE * total {
        return Err(Error::Infeasible {
            constraint: "grid granularity",
            detail: format!(
                "closest grid has {} elements for a target of {target:.0}",
                chosen.0.slots * chosen.0.channels * slice
            ),
        });
    }
    Ok(chosen)
}

/// Chooses grid dimensions and network widths so the model holds
/// `target_params` learnable elements (within 2%).
///
/// A zero `grid_ratio` with the coupled variant yields the no-grid ablation
/// (`v1`).
pub fn budget_model(
    target_params: usize,
    grid_ratio: f64,
    frame_dims: (usize, usize),
    num_frames: usize,
    variant: Variant,
    opts: &BudgetOptions,
) -> Result<ModelConfig> {
    if !(0.0..1.0).contains(&grid_ratio) {
        return Err(invalid(format!("grid_ratio {grid_ratio} outside [0, 1)")));
    }
    if variant == Variant::V1NoGrid && grid_ratio > 0.0 {
        return Err(invalid("variant v1 has no grid; use grid_ratio = 0"));
    }
    let variant = if grid_ratio == 0.0 && variant == Variant::V3Coupled {
        Variant::V1NoGrid
    } else {
        variant
    };

    let mut config = ModelConfig {
        variant,
        frame_height: frame_dims.0,
        frame_width: frame_dims.1,
        num_frames,
        hidden_channels: MIN_HIDDEN_CHANNELS,
        upsample_factors: opts.upsample_factors.clone(),
        decoder_channels: decoder_schedule(opts.min_decoder_width.max(1), opts),
        grid: None,
        target_params,
        grid_ratio,
    };
    config.validate()?;

    let slice = config.hidden_height() * config.hidden_width();
    if grid_ratio > 0.0 {
        let preferred = opts
            .preferred_slots
            .unwrap_or_else(|| default_slots(num_frames));
        let (dims, _) = allocate_grid(
            grid_ratio * target_params as f64,
            target_params as f64,
            slice,
            num_frames,
            preferred,
        )?;
        config.grid = Some(dims);
    }

    let floor = config.param_count();
    let target = target_params as f64;
    let network_floor = (floor - config.grid_params()) as f64;
    let network_share = (1.0 - grid_ratio) * target;
    if (floor as f64) > target * (1.0 + BUDGET_TOLERANCE)
        || network_floor > network_share * (1.0 + BUDGET_TOLERANCE)
    {
        return Err(Error::Infeasible {
            constraint: "network floor",
            detail: format!(
                "smallest network needs {network_floor} parameters, its share of {target_params} is {network_share:.0}"
            ),
        });
    }

    let mut best: Option<(usize, usize, f64, f64)> = None;
    let min_base = opts.min_decoder_width.max(1);
    let mut base = min_base;
    loop {
        let ideal = (base as f64 * opts.hidden_to_decoder).max(MIN_HIDDEN_CHANNELS as f64);
        let lo = ((ideal * 0.75).floor() as usize).max(MIN_HIDDEN_CHANNELS);
        let hi = (ideal * 1.25).ceil() as usize + 1;
        let mut smallest = usize::MAX;
        for hidden in lo..=hi {
            config.hidden_channels = hidden;
            config.decoder_channels = decoder_schedule(base, opts);
            let n = config.param_count();
            smallest = smallest.min(n);
            let err = (n as f64 - target).abs() / target;
            let skew = (hidden as f64 - ideal).abs() / ideal;
            let better = match best {
                None => true,
                Some((_, _, e, s)) => {
                    // Prefer balanced widths among allocations that fit the tolerance.
                    if err <= BUDGET_TOLERANCE / 2.0 && e <= BUDGET_TOLERANCE / 2.0 {
                        skew < s
                    } else {
                        err < e
                    }
                }
            };
            if better {
                best = Some((base, hidden, err, skew));
            }
        }
        if smallest as f64 > target * (1.0 + BUDGET_TOLERANCE) {
            break;
        }
        base += 1;
    }

    let (base, hidden, err, _) = best.expect("at least one candidate evaluated");
    config.hidden_channels = hidden;
    config.decoder_channels = decoder_schedule(base, opts);
    if err > BUDGET_TOLERANCE {
        return Err(Error::Infeasible {
            constraint: "width granularity",
            detail: format!(
                "closest network gives {} parameters for a budget of {target_params}",
                config.param_count()
            ),
        });
    }
    config.validate()?;
    Ok(config)
}
