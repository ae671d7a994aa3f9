//! The recurrent and decoding sub-operations, generic over [`Graph`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{ConvParams, Graph};
use crate::tensor::{Scalar, Tensor};

/// Gate and candidate convolutions of one ConvGRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGruCell {
    /// `[x, h] -> [z, r]`
    pub gates: ConvParams,
    /// `[x, r * h] -> candidate`
    pub candidate: ConvParams,
    pub channels: usize,
}

/// One ConvGRU update: `h' = (1 - z) * h + z * tanh(conv([x, r * h]))`.
pub fn convgru_step<S: Scalar, G: Graph<S>>(
    g: &mut G,
    cell: &ConvGruCell,
    x: &G::Var,
    h: &G::Var,
) -> Result<G::Var> {
    let xh = g.concat(x, h)?;
    let pre = g.conv(&cell.gates, &xh)?;
    let gates = g.sigmoid(&pre);
    let (z, r) = g.split(&gates, cell.channels)?;
    let rh = g.mul(&r, h)?;
    let xrh = g.concat(x, &rh)?;
    let pre_c = g.conv(&cell.candidate, &xrh)?;
    let cand = g.tanh(&pre_c);
    g.gru_update(&z, h, &cand)
}

/// Flow predicted from a hidden feature, in hidden-resolution pixels.
pub fn motion_project<S: Scalar, G: Graph<S>>(
    g: &mut G,
    motion: &ConvParams,
    feature: &G::Var,
) -> Result<G::Var> {
    g.conv(motion, feature)
}

/// Warps the previous state by the flow predicted from `x`, then runs the GRU.
pub fn warprnn_step<S: Scalar, G: Graph<S>>(
    g: &mut G,
    cell: &ConvGruCell,
    motion: &ConvParams,
    x: &G::Var,
    h_prev: &G::Var,
) -> Result<G::Var> {
    let flow = motion_project(g, motion, x)?;
    let aligned = g.warp(h_prev, &flow)?;
    convgru_step(g, cell, x, &aligned)
}

/// Interpolation support of frame `t` on an `slots`-long grid:
/// `(lo, hi, alpha)` with endpoint-aligned coordinate `t * (L - 1) / (T - 1)`.
pub fn temporal_support(t: usize, num_frames: usize, slots: usize) -> Result<(usize, usize, f64)> {
    if t >= num_frames {
        return Err(Error::Index {
            index: t,
            len: num_frames,
        });
    }
    if slots == 0 {
        return Err(shape_err("grid has no temporal slots"));
    }
    if num_frames == 1 || slots == 1 {
        return Ok((0, 0, 0.0));
    }
    let num = t * (slots - 1);
    let den = num_frames - 1;
    let lo = num / den;
    let rem = num % den;
    if rem == 0 {
        Ok((lo, lo, 0.0))
    } else {
        Ok((lo, lo + 1, rem as f64 / den as f64))
    }
}

pub fn sample_grid_graph<S: Scalar, G: Graph<S>>(
    g: &mut G,
    grid: &G::Var,
    t: usize,
    num_frames: usize,
) -> Result<G::Var> {
    let slots = g.value(grid).shape()[0];
    let (lo, hi, alpha) = temporal_support(t, num_frames, slots)?;
    g.temporal_lerp(grid, lo, hi, S::from_f64(alpha))
}

/// Temporal bilinear sample of a `[L, C, H, W]` grid at frame `t` of `num_frames`.
pub fn sample_grid<S: Scalar>(grid: &Tensor<S>, t: usize, num_frames: usize) -> Result<Tensor<S>> {
    if grid.shape().len() != 4 {
        return Err(shape_err(format!(
            "grid must be [L, C, H, W], got {:?}",
            grid.shape()
        )));
    }
    let (lo, hi, alpha) = temporal_support(t, num_frames, grid.shape()[0])?;
    crate::nn::lerp_slices(grid, lo, hi, S::from_f64(alpha))
}

/// `h + conv(residual)`.
pub fn inject_residual<S: Scalar, G: Graph<S>>(
    g: &mut G,
    h_global: &G::Var,
    residual: &G::Var,
    inject: &ConvParams,
) -> Result<G::Var> {
    let r = g.conv(inject, residual)?;
    g.add(h_global, &r)
}

/// Soft-mask split of the enhanced state into local and background parts.
pub struct LocalBackground<V> {
    pub local: V,
    pub background: V,
    pub mask: V,
}

pub fn split_local_background<S: Scalar, G: Graph<S>>(
    g: &mut G,
    h_enh: &G::Var,
    mask_conv: &ConvParams,
) -> Result<LocalBackground<G::Var>> {
    let logits = g.conv(mask_conv, h_enh)?;
    let mask = g.sigmoid(&logits);
    let local = g.mul_mask(h_enh, &mask)?;
    let inv = g.one_minus(&mask);
    let background = g.mul_mask(h_enh, &inv)?;
    Ok(LocalBackground {
        local,
        background,
        mask,
    })
}

/// Spatial projection followed by the NeRV-style upsampling blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub spatial_proj: ConvParams,
    pub blocks: Vec<(ConvParams, usize)>,
    pub head: ConvParams,
}

/// Decodes a global hidden state into an unclamped `[3, H, W]` frame.
pub fn decode_frame<S: Scalar, G: Graph<S>>(
    g: &mut G,
    decoder: &Decoder,
    h_global: &G::Var,
) -> Result<G::Var> {
    let mut x = g.conv(&decoder.spatial_proj, h_global)?;
    for (conv, factor) in &decoder.blocks {
        let y = g.conv(conv, &x)?;
        let up = g.pixel_shuffle(&y, *factor)?;
        x = g.gelu(&up);
    }
    g.conv(&decoder.head, &x)
}
