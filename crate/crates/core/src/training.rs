//! Overfitting a model to one clip: grouped truncated BPTT with Adam and a
//! warmup-cosine schedule.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_io::FrameSequence;
use crate::error::{invalid, shape_err, Error, Result};
use crate::evaluation::sequence_psnr;
use crate::model::{budget_model, BudgetOptions, CwrnnModel, HiddenStatePair, Variant};
use crate::nn::{Grads, Graph, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub group_len: usize,
    pub seed: u64,
    /// Evaluate sequence PSNR every this many steps; 0 evaluates only after the
    /// last step.
    pub eval_every: usize,
    /// Restart each group from the learned initial state instead of carrying
    /// the detached state across group boundaries.
    pub reset_state_per_group: bool,
    /// Rescale the global gradient norm to at most this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            base_lr: 2e-3,
            warmup_ratio: 0.3,
            group_len: 5,
            seed: 0,
            eval_every: 0,
            reset_state_per_group: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.group_len == 0 {
            return Err(invalid("group_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(invalid(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(invalid(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn groups_per_epoch(&self, num_frames: usize) -> usize {
        num_frames.div_ceil(self.group_len)
    }

    pub fn total_steps(&self, num_frames: usize) -> usize {
        self.epochs * self.groups_per_epoch(num_frames)
    }
}

/// Linear warmup from 0 to `base_lr` over `floor(warmup_ratio * total)` steps,
/// then cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Index {
            index: step,
            len: total_steps + 1,
        });
    }
    let warmup = (cfg.warmup_ratio * total_steps as f64).floor() as usize;
    if step < warmup {
        return Ok(cfg.base_lr * step as f64 / warmup as f64);
    }
    let span = total_steps - warmup;
    if span == 0 {
        return Ok(cfg.base_lr);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Mean over frames of the per-frame MSE.
pub fn reconstruction_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    pred.same_shape(target)?;
    if pred.shape().len() != 4 || pred.shape()[0] == 0 {
        return Err(shape_err(format!(
            "expected [T, 3, H, W], got {:?}",
            pred.shape()
        )));
    }
    let t = pred.shape()[0];
    let mut total = 0.0;
    for f in 0..t {
        let p = pred.slice_outer(f)?;
        let q = target.slice_outer(f)?;
        total += crate::nn::mse_value(&p, &q)?.to_f64();
    }
    Ok(total / t as f64)
}

/// Loss and gradients of frames `[t_begin, t_end)`.
pub struct GroupPass<S> {
    pub loss: S,
    pub grads: Grads<S>,
    /// State after the last frame of the group, detached.
    pub state: HiddenStatePair<S>,
}

/// Runs frames `[t_begin, t_end)` on a tape and backpropagates their mean
/// loss. `carried = None` starts from the learnable initial state; otherwise
/// the given state enters as a constant, so no gradient reaches earlier
/// frames.
pub fn group_pass<S: Scalar>(
    model: &CwrnnModel<S>,
    frames: &Tensor<S>,
    t_begin: usize,
    t_end: usize,
    carried: Option<&HiddenStatePair<S>>,
) -> Result<GroupPass<S>> {
    if t_begin >= t_end || t_end > model.num_frames() || t_end > frames.shape()[0] {
        return Err(invalid(format!("group {t_begin}..{t_end} out of range")));
    }
    let mut tape = Tape::new(model.params());
    let (mut local, mut global) = match carried {
        None => model.initial_vars(&mut tape),
        Some(s) => (
            tape.constant(s.local.clone()),
            tape.constant(s.global.clone()),
        ),
    };
    let mut losses = Vec::with_capacity(t_end - t_begin);
    for t in t_begin..t_end {
        (local, global) = model.step_vars(&mut tape, &local, &global, t)?;
        let frame = model.decode_vars(&mut tape, &global)?;
        losses.push(tape.mse(&frame, &frames.slice_outer(t)?)?);
    }
    let loss = tape.mean(&losses)?;
    let state = HiddenStatePair {
        local: tape.value(&local).clone(),
        global: tape.value(&global).clone(),
    };
    let value = tape.value(&loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok(GroupPass {
        loss: value,
        grads,
        state,
    })
}

/// Adam with `beta = (0.9, 0.999)` and `eps = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &CwrnnModel<f32>) -> Self {
        let zeros: Vec<_> = model
            .params()
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update. Parameters without a gradient are treated as having
    /// a zero gradient.
    pub fn step(&mut self, model: &mut CwrnnModel<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ids: Vec<_> = model.params().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(k).and_then(Option::as_ref);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = model.params_mut().get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| f64::from(g.data()[i]));
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Sequence PSNR of the full decode, on evaluation steps only.
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<LogRow>,
    /// Mean group loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

impl MetricLog {
    pub fn final_psnr(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.psnr)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<LogRow>> {
        csv::Reader::from_reader(input)
            .deserialize()
            .map(|r| r.map_err(csv_err))
            .collect()
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Mutable state of a training run.
pub struct TrainState {
    pub step: usize,
    pub optimizer: Adam,
    pub carried: Option<HiddenStatePair<f32>>,
    pub log: MetricLog,
}

fn clip_gradients(grads: &mut [Option<Tensor<f32>>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(k);
        }
    }
}

/// Decodes the whole clip and returns its sequence PSNR on clamped frames.
pub fn evaluate(model: &CwrnnModel<f32>, video: &FrameSequence) -> Result<f64> {
    let decoded = model.decode_video()?.clamp(0.0, 1.0);
    sequence_psnr(&decoded, video.tensor())
}

/// Fits `model` to `video`. Each epoch visits groups of `group_len`
/// consecutive frames in order and takes one Adam step per group.
pub fn train(
    mut model: CwrnnModel<f32>,
    video: &FrameSequence,
    cfg: &TrainConfig,
) -> Result<(CwrnnModel<f32>, MetricLog)> {
    cfg.validate()?;
    let c = model.config();
    if video.num_frames() != c.num_frames
        || (video.height(), video.width()) != (c.frame_height, c.frame_width)
    {
        return Err(shape_err(format!(
            "model expects {} frames of {}x{}, video has {} of {}x{}",
            c.num_frames,
            c.frame_height,
            c.frame_width,
            video.num_frames(),
            video.height(),
            video.width()
        )));
    }
    let t_total = video.num_frames();
    let total = cfg.total_steps(t_total);
    let mut state = TrainState {
        step: 0,
        optimizer: Adam::new(&model),
        carried: None,
        log: MetricLog::default(),
    };
    for _ in 0..cfg.epochs {
        state.carried = None;
        let mut epoch_loss = 0.0;
        for t0 in (0..t_total).step_by(cfg.group_len) {
            let t1 = (t0 + cfg.group_len).min(t_total);
            let carried = if cfg.reset_state_per_group {
                None
            } else {
                state.carried.as_ref()
            };
            let pass = group_pass(&model, video.tensor(), t0, t1, carried)?;
            let loss = f64::from(pass.loss);
            if !loss.is_finite() {
                return Err(Error::NonFinite { step: state.step });
            }
            let mut grads = pass.grads.into_params();
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let lr = lr_schedule(state.step, total, cfg)?;
            state.optimizer.step(&mut model, &grads, lr);
            state.carried = Some(pass.state);
            state.step += 1;
            epoch_loss += loss;

            let evaluate_now =
                state.step == total || (cfg.eval_every > 0 && state.step % cfg.eval_every == 0);
            let psnr = if evaluate_now {
                Some(evaluate(&model, video)?)
            } else {
                None
            };
            state.log.rows.push(LogRow {
                step: state.step,
                lr,
                loss,
                psnr,
            });
        }
        state
            .log
            .epoch_loss
            .push(epoch_loss / cfg.groups_per_epoch(t_total) as f64);
    }
    Ok((model, state.log))
}

/// Everything needed to size, initialize and fit a model to a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub variant: Variant,
    pub target_params: usize,
    pub grid_ratio: f64,
    #[serde(default)]
    pub budget: BudgetOptions,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Allocates the budget for `video`, initializes with `spec.train.seed`, and
/// trains.
pub fn fit(video: &FrameSequence, spec: &FitSpec) -> Result<(CwrnnModel<f32>, MetricLog)> {
    let config = budget_model(
        spec.target_params,
        spec.grid_ratio,
        (video.height(), video.width()),
        video.num_frames(),
        spec.variant,
        &spec.budget,
    )?;
    let model = CwrnnModel::new(config, spec.train.seed)?;
    train(model, video, &spec.train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::synth;
    use crate::model::{GridDims, ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(variant: Variant, frames: usize, slots: usize) -> ModelConfig {
        ModelConfig {
            variant,
            frame_height: 16,
            frame_width: 16,
            num_frames: frames,
            hidden_channels: 4,
            upsample_factors: vec![2, 2],
            decoder_channels: vec![8, 8, 8],
            grid: (variant != Variant::V1NoGrid).then_some(GridDims { slots, channels: 2 }),
            target_params: 0,
            grid_ratio: 0.0,
        }
    }

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig::default();
        let total = 1000;
        assert_eq!(lr_schedule(0, total, &cfg).unwrap(), 0.0);
        assert!((lr_schedule(300, total, &cfg).unwrap() - 2e-3).abs() < 1e-15);
        assert!((lr_schedule(650, total, &cfg).unwrap() - 1e-3).abs() < 1e-12);
        assert!(lr_schedule(total, total, &cfg).unwrap().abs() < 1e-15);
        assert!(lr_schedule(total + 1, total, &cfg).is_err());
        // Continuity at the junction: the ramp approaches base_lr from below.
        let before = lr_schedule(299, total, &cfg).unwrap();
        assert!((before - 2e-3 * 299.0 / 300.0).abs() < 1e-15);
        let big = 1_000_000;
        let w = 300_000;
        let left = lr_schedule(w - 1, big, &cfg).unwrap();
        let right = lr_schedule(w + 1, big, &cfg).unwrap();
        assert!((left - 2e-3).abs() < 1e-8 && (right - 2e-3).abs() < 1e-8);
    }

    #[test]
    fn loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(&[3, 3, 4, 5], 1.0, &mut rng);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((reconstruction_loss(&b, &a).unwrap() - 0.01).abs() < 1e-12);
        let c = Tensor::<f64>::uniform(&[3, 3, 4, 5], 1.0, &mut rng);
        let mut want = 0.0;
        for f in 0..3 {
            let mut s = 0.0;
            for i in 0..60 {
                let d = a.data()[f * 60 + i] - c.data()[f * 60 + i];
                s += d * d;
            }
            want += s / 60.0;
        }
        assert!((reconstruction_loss(&a, &c).unwrap() - want / 3.0).abs() < 1e-14);
        assert!(reconstruction_loss(&a, &Tensor::zeros(&[3, 3, 4, 4])).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(
            (cfg.epochs, cfg.base_lr, cfg.warmup_ratio, cfg.group_len),
            (300, 2e-3, 0.3, 5)
        );
        assert!(TrainConfig {
            group_len: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            warmup_ratio: 1.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { epochs: 0, ..cfg }.validate().is_err());
        assert_eq!(TrainConfig::default().total_steps(12), 900);
    }

    #[test]
    fn identical_runs_give_identical_logs() {
        let video = synth::blobs(4, 16, 16, 3);
        let cfg = TrainConfig {
            epochs: 6,
            group_len: 4,
            eval_every: 2,
            ..Default::default()
        };
        let run = || {
            let model = CwrnnModel::new(small_config(Variant::V3Coupled, 4, 2), 7).unwrap();
            train(model, &video, &cfg).unwrap()
        };
        let (ma, la) = run();
        let (mb, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(ma, mb);
        let mut a = Vec::new();
        la.write_csv(&mut a).unwrap();
        let text = String::from_utf8(a.clone()).unwrap();
        assert!(text.starts_with("step,lr,loss,psnr\n"), "{text}");
        assert_eq!(MetricLog::read_csv(&a[..]).unwrap(), la.rows);
    }

    #[test]
    fn carried_state_severs_gradients() {
        let video = synth::blobs(3, 16, 16, 5);
        let model = CwrnnModel::<f32>::new(small_config(Variant::V3Coupled, 3, 2), 1).unwrap();
        let h0 = model.layout().h0_global;
        let first = group_pass(&model, video.tensor(), 0, 1, None).unwrap();
        assert!(first.grads.param(h0).is_some_and(|g| g.max_abs() > 0.0));

        // Step 1 from the carried state: the initial state gets no gradient, and
        // the result does not depend on frame 0's target.
        let second = group_pass(&model, video.tensor(), 1, 2, Some(&first.state)).unwrap();
        assert!(second.grads.param(h0).map_or(true, |g| g.max_abs() == 0.0));
        let mut altered = video.tensor().clone();
        for v in &mut altered.data_mut()[..3 * 256] {
            *v = 1.0 - *v;
        }
        let again = group_pass(&model, &altered, 1, 2, Some(&first.state)).unwrap();
        assert_eq!(again.loss, second.loss);
        let (a, b) = (second.grads.into_params(), again.grads.into_params());
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases() {
        let video = synth::cartoon(5, 16, 16, 2);
        let model = CwrnnModel::new(small_config(Variant::V3Coupled, 5, 2), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            ..Default::default()
        };
        let (_, log) = train(model, &video, &cfg).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
        assert_eq!(log.rows.len(), 40);
        assert!(log.final_psnr().is_some());
    }

    #[test]
    fn reset_mode_reaches_initial_state_every_group() {
        let video = synth::blobs(4, 16, 16, 9);
        let model =
            CwrnnModel::<f32>::new(small_config(Variant::V2SingleWarprnn, 4, 2), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            group_len: 2,
            reset_state_per_group: true,
            ..Default::default()
        };
        let (_, log) = train(model, &video, &cfg).unwrap();
        assert_eq!(log.rows.len(), 2);
    }

    #[test]
    fn mismatched_video_is_rejected() {
        let video = synth::blobs(4, 16, 16, 9);
        let model = CwrnnModel::<f32>::new(small_config(Variant::V1NoGrid, 5, 2), 1).unwrap();
        assert!(matches!(
            train(model, &video, &TrainConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut video = synth::blobs(2, 16, 16, 9).tensor().clone();
        video.data_mut()[0] = f32::NAN;
        let video = FrameSequence::new(video).unwrap();
        let model = CwrnnModel::<f32>::new(small_config(Variant::V1NoGrid, 2, 2), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        assert!(matches!(
            train(model, &video, &cfg),
            Err(Error::NonFinite { step: 0 })
        ));
    }

    #[test]
    fn grid_slot_of_an_outlier_frame_moves_most() {
        let base = synth::blobs(11, 16, 16, 4);
        let odd = synth::portrait(1, 16, 16, 4);
        let mut frames: Vec<_> = (0..11).map(|t| base.frame(t).unwrap()).collect();
        frames[6] = odd.frame(0).unwrap();
        let video = FrameSequence::from_frames(&frames).unwrap();
        // Frame 6 of 11 lands exactly on slot 3 of 6.
        let model = CwrnnModel::new(small_config(Variant::V3Coupled, 11, 6), 5).unwrap();
        let grid = model.layout().grid.unwrap();
        let before = model.params().get(grid).clone();
        let cfg = TrainConfig {
            epochs: 100,
            group_len: 11,
            ..Default::default()
        };
        let (trained, _) = train(model, &video, &cfg).unwrap();
        let delta = trained.params().get(grid).sub(&before).unwrap();
        let norms: Vec<f64> = (0..6)
            .map(|s| {
                let d = delta.slice_outer(s).unwrap();
                d.data()
                    .iter()
                    .map(|&v| f64::from(v).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut sorted = norms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = 0.5 * (sorted[2] + sorted[3]);
        assert!(norms[3] > median, "slot norms {norms:?}");
    }
}
