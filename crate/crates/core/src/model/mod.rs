//! The coupled WarpRNN video network.

mod budget;
pub mod checkpoint;
mod config;
pub mod layers;

pub use budget::{budget_model, BudgetOptions, BUDGET_TOLERANCE, MIN_HIDDEN_CHANNELS};
pub use config::{GridDims, ModelConfig, Variant, KERNEL};
pub use layers::{
    convgru_step, decode_frame, inject_residual, motion_project, sample_grid,
    split_local_background, temporal_support, warprnn_step, ConvGruCell, Decoder, LocalBackground,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{ConvInit, ConvParams, Eval, Graph, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Bound of the uniform initialization of the initial state and the grid.
pub const STATE_INIT_BOUND: f64 = 0.1;

/// Recurrent state carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStatePair<S = f32> {
    pub local: Tensor<S>,
    pub global: Tensor<S>,
}

/// Handles of every learnable tensor, by role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub h0_local: Option<ParamId>,
    pub h0_global: ParamId,
    pub grid: Option<ParamId>,
    pub inject: Option<ConvParams>,
    pub mask: Option<ConvParams>,
    pub motion: ConvParams,
    pub local_cell: Option<ConvGruCell>,
    pub global_cell: ConvGruCell,
    pub decoder: Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CwrnnModel<S = f32> {
    config: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

fn cell<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> ConvGruCell {
    let c = channels;
    ConvGruCell {
        gates: ConvParams::new(
            store,
            &format!("{name}.gates"),
            2 * c,
            2 * c,
            KERNEL,
            ConvInit::FanIn,
            rng,
        ),
        candidate: ConvParams::new(
            store,
            &format!("{name}.candidate"),
            2 * c,
            c,
            KERNEL,
            ConvInit::FanIn,
            rng,
        ),
        channels: c,
    }
}

impl<S: Scalar> CwrnnModel<S> {
    /// Builds a freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let [c, h, w] = config.hidden_shape();
        let coupled = config.variant.is_coupled();

        let h0_local = coupled.then(|| {
            store.push(
                "h0.local",
                Tensor::uniform(&[c, h, w], STATE_INIT_BOUND, rng),
            )
        });
        let h0_global = store.push(
            "h0.global",
            Tensor::uniform(&[c, h, w], STATE_INIT_BOUND, rng),
        );

        let (grid, inject) = match config.grid {
            Some(dims) => {
                let grid = store.push(
                    "grid",
                    Tensor::uniform(&[dims.slots, dims.channels, h, w], STATE_INIT_BOUND, rng),
                );
                let inject = ConvParams::new(
                    &mut store,
                    "inject",
                    dims.channels,
                    c,
                    KERNEL,
                    ConvInit::FanIn,
                    rng,
                );
                (Some(grid), Some(inject))
            }
            None => (None, None),
        };
        let mask = coupled
            .then(|| ConvParams::new(&mut store, "mask", c, 1, KERNEL, ConvInit::FanIn, rng));
        let motion = ConvParams::new(&mut store, "motion_proj", c, 2, KERNEL, ConvInit::Zero, rng);
        let local_cell = coupled.then(|| cell(&mut store, "local_cell", c, rng));
        let global_cell = cell(&mut store, "global_cell", c, rng);

        let widths = &config.decoder_channels;
        let spatial_proj = ConvParams::new(
            &mut store,
            "spatial_proj",
            c,
            widths[0],
            KERNEL,
            ConvInit::FanIn,
            rng,
        );
        let blocks = config
            .upsample_factors
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let conv = ConvParams::new(
                    &mut store,
                    &format!("decoder.block{i}"),
                    widths[i],
                    widths[i + 1] * s * s,
                    KERNEL,
                    ConvInit::FanIn,
                    rng,
                );
                (conv, s)
            })
            .collect();
        let head = ConvParams::new(
            &mut store,
            "decoder.head",
            *widths.last().expect("validated"),
            3,
            KERNEL,
            ConvInit::FanIn,
            rng,
        );

        let layout = Layout {
            h0_local,
            h0_global,
            grid,
            inject,
            mask,
            motion,
            local_cell,
            global_cell,
            decoder: Decoder {
                spatial_proj,
                blocks,
                head,
            },
        };
        debug_assert_eq!(store.numel(), config.param_count());
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    /// Number of learnable scalars, including the initial state and the grid.
    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<T: Scalar>(&self) -> CwrnnModel<T> {
        CwrnnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn initial_state(&self) -> HiddenStatePair<S> {
        HiddenStatePair {
            local: match self.layout.h0_local {
                Some(id) => self.params.get(id).clone(),
                None => Tensor::zeros(&self.config.hidden_shape()),
            },
            global: self.params.get(self.layout.h0_global).clone(),
        }
    }

    /// Learnable initial state as graph variables.
    pub fn initial_vars<G: Graph<S>>(&self, g: &mut G) -> (G::Var, G::Var) {
        let local = match self.layout.h0_local {
            Some(id) => g.param(id),
            None => g.constant(Tensor::zeros(&self.config.hidden_shape())),
        };
        (local, g.param(self.layout.h0_global))
    }

    /// Global state after residual injection (unchanged without a grid).
    pub fn enhanced_state<G: Graph<S>>(
        &self,
        g: &mut G,
        global: &G::Var,
        t: usize,
    ) -> Result<G::Var> {
        match (self.layout.grid, &self.layout.inject) {
            (Some(grid), Some(inject)) => {
                let grid = g.param(grid);
                let residual = layers::sample_grid_graph(g, &grid, t, self.config.num_frames)?;
                inject_residual(g, global, &residual, inject)
            }
            _ => Ok(global.clone()),
        }
    }

    /// One recurrence step on graph variables; returns `(local, global)`.
    pub fn step_vars<G: Graph<S>>(
        &self,
        g: &mut G,
        local: &G::Var,
        global: &G::Var,
        t: usize,
    ) -> Result<(G::Var, G::Var)> {
        let enhanced = self.enhanced_state(g, global, t)?;
        let l = &self.layout;
        match (&l.local_cell, &l.mask) {
            (Some(local_cell), Some(mask)) => {
                let parts = split_local_background(g, &enhanced, mask)?;
                let local_next = warprnn_step(g, local_cell, &l.motion, &parts.local, local)?;
                let x_global = g.add(&local_next, &parts.background)?;
                let global_next = warprnn_step(g, &l.global_cell, &l.motion, &x_global, global)?;
                Ok((local_next, global_next))
            }
            _ => {
                let global_next = warprnn_step(g, &l.global_cell, &l.motion, &enhanced, global)?;
                Ok((local.clone(), global_next))
            }
        }
    }

    pub fn decode_vars<G: Graph<S>>(&self, g: &mut G, global: &G::Var) -> Result<G::Var> {
        decode_frame(g, &self.layout.decoder, global)
    }

    fn check_state(&self, state: &HiddenStatePair<S>) -> Result<()> {
        let want = self.config.hidden_shape();
        if state.local.shape() != want || state.global.shape() != want {
            return Err(shape_err(format!(
                "hidden state must be {want:?}, got {:?} / {:?}",
                state.local.shape(),
                state.global.shape()
            )));
        }
        Ok(())
    }

    /// Advances the recurrence by one frame.
    pub fn coupled_step(&self, state: &HiddenStatePair<S>, t: usize) -> Result<HiddenStatePair<S>> {
        self.check_state(state)?;
        let mut g = Eval::new(&self.params);
        let local = g.constant(state.local.clone());
        let global = g.constant(state.global.clone());
        let (l, gl) = self.step_vars(&mut g, &local, &global, t)?;
        Ok(HiddenStatePair {
            local: (*l).clone(),
            global: (*gl).clone(),
        })
    }

    /// Unclamped `[3, H, W]` frame for a global hidden state.
    pub fn decode_frame(&self, h_global: &Tensor<S>) -> Result<Tensor<S>> {
        let want = self.config.hidden_shape();
        if h_global.shape() != want {
            return Err(shape_err(format!(
                "hidden state must be {want:?}, got {:?}",
                h_global.shape()
            )));
        }
        let mut g = Eval::new(&self.params);
        let h = g.constant(h_global.clone());
        let out = self.decode_vars(&mut g, &h)?;
        Ok((*out).clone())
    }

    /// Decodes frames `[t_begin, t_end)` starting from `state_in`, which must be
    /// the state reached after frame `t_begin - 1` (the initial state for 0).
    ///
    /// Returns unclamped frames `[n, 3, H, W]` and the state after `t_end - 1`.
    pub fn forward_sequence(
        &self,
        t_begin: usize,
        t_end: usize,
        state_in: &HiddenStatePair<S>,
    ) -> Result<(Tensor<S>, HiddenStatePair<S>)> {
        if t_begin >= t_end || t_end > self.config.num_frames {
            return Err(invalid(format!(
                "frame range {t_begin}..{t_end} invalid for {} frames",
                self.config.num_frames
            )));
        }
        self.check_state(state_in)?;
        let mut g = Eval::new(&self.params);
        let mut local = g.constant(state_in.local.clone());
        let mut global = g.constant(state_in.global.clone());
        let mut frames = Vec::with_capacity(t_end - t_begin);
        for t in t_begin..t_end {
            (local, global) = self.step_vars(&mut g, &local, &global, t)?;
            frames.push((*self.decode_vars(&mut g, &global)?).clone());
        }
        Ok((
            Tensor::stack(&frames)?,
            HiddenStatePair {
                local: (*local).clone(),
                global: (*global).clone(),
            },
        ))
    }

    /// Every frame of the video, unclamped.
    pub fn decode_video(&self) -> Result<Tensor<S>> {
        Ok(self
            .forward_sequence(0, self.config.num_frames, &self.initial_state())?
            .0)
    }
}
