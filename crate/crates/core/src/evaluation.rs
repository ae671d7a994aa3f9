//! PSNR, Bjøntegaard delta rate, and decoding speed.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::CwrnnModel;
use crate::tensor::{Scalar, Tensor};
use crate::training::csv_err;

/// `10 log10(1 / MSE)` for signals in `[0, 1]`; `+inf` when identical.
pub fn psnr<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    pred.same_shape(target)?;
    if pred.is_empty() {
        return Err(shape_err("psnr of an empty tensor"));
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum();
    let mse = sse / pred.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Mean of per-frame PSNRs over `[T, 3, H, W]` clips.
pub fn sequence_psnr<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    Ok(frame_psnrs(pred, target)?.iter().sum::<f64>() / pred.shape()[0] as f64)
}

pub fn frame_psnrs<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Vec<f64>> {
    pred.same_shape(target)?;
    if pred.shape().len() != 4 || pred.shape()[0] == 0 {
        return Err(shape_err(format!(
            "expected [T, 3, H, W], got {:?}",
            pred.shape()
        )));
    }
    (0..pred.shape()[0])
        .map(|t| psnr(&pred.slice_outer(t)?, &target.slice_outer(t)?))
        .collect()
}

/// Bits per pixel of a payload spread over `frames` frames of `h x w`.
pub fn bits_per_pixel(total_bits: u64, frames: usize, h: usize, w: usize) -> f64 {
    total_bits as f64 / (frames * h * w) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Rate-distortion samples sorted by strictly increasing bpp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

pub const MIN_RD_POINTS: usize = 4;

impl RdCurve {
    pub fn new(points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < MIN_RD_POINTS {
            return Err(invalid(format!(
                "an RD curve needs at least {MIN_RD_POINTS} points, got {}",
                points.len()
            )));
        }
        for p in &points {
            if !(p.bpp > 0.0 && p.bpp.is_finite()) || !p.psnr.is_finite() {
                return Err(invalid(format!("bad RD point {p:?}")));
            }
        }
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(invalid("RD points must have strictly increasing bpp"));
        }
        Ok(Self { points })
    }

    /// Sorts by bpp before validating.
    pub fn from_unsorted(mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        Self::new(points)
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let points = csv::Reader::from_reader(input)
            .deserialize()
            .map(|r| r.map_err(csv_err))
            .collect::<Result<Vec<RdPoint>>>()?;
        Self::from_unsorted(points)
    }
}

/// Shape-preserving piecewise cubic Hermite interpolant (Fritsch-Carlson
/// slopes, three-point endpoints).
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        for k in 1..n - 1 {
            if delta[k - 1] * delta[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
            }
        }
        let end = |h0: f64, h1: f64, m0: f64, m1: f64| {
            let s = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
            if s.signum() != m0.signum() || m0 == 0.0 {
                0.0
            } else if m0.signum() != m1.signum() && s.abs() > 3.0 * m0.abs() {
                3.0 * m0
            } else {
                s
            }
        };
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            d[0] = end(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { x, y, d }
    }

    fn eval_in(&self, k: usize, x: f64) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let s = (x - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }

    /// Exact integral over `[a, b]` within the knot range (two-point
    /// Gauss-Legendre is exact for cubics).
    fn integrate(&self, a: f64, b: f64) -> f64 {
        let g = 0.5 / 3f64.sqrt();
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let lo = a.max(self.x[k]);
            let hi = b.min(self.x[k + 1]);
            if hi <= lo {
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let half = hi - lo;
            total +=
                0.5 * half * (self.eval_in(k, mid - g * half) + self.eval_in(k, mid + g * half));
        }
        total
    }
}

fn log_rate_interp(curve: &RdCurve) -> Result<Pchip> {
    let mut pts = curve.points.clone();
    pts.sort_by(|a, b| a.psnr.total_cmp(&b.psnr));
    if pts.windows(2).any(|w| w[1].psnr <= w[0].psnr) {
        return Err(invalid("BD-rate needs PSNR strictly increasing with rate"));
    }
    Ok(Pchip::new(
        pts.iter().map(|p| p.psnr).collect(),
        pts.iter().map(|p| p.bpp.ln()).collect(),
    ))
}

/// Average rate difference (percent) of `test` against `anchor` at equal PSNR;
/// negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let a = log_rate_interp(anchor)?;
    let t = log_rate_interp(test)?;
    let lo = a.x[0].max(t.x[0]);
    let hi = a.x[a.x.len() - 1].min(t.x[t.x.len() - 1]);
    if hi <= lo {
        return Err(Error::NoOverlap(format!("[{lo:.3}, {hi:.3}] dB is empty")));
    }
    let avg = (t.integrate(lo, hi) - a.integrate(lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

/// Frames per second of a timed span.
pub fn fps(frames: usize, elapsed: Duration) -> f64 {
    frames as f64 / elapsed.as_secs_f64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub fps: f64,
    pub frames_timed: usize,
    pub warmup_frames: usize,
    pub seconds: f64,
    pub hardware: String,
    pub frame_height: usize,
    pub frame_width: usize,
    pub parameters: usize,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CPU model and logical core count, from `/proc/cpuinfo` when available.
pub fn hardware_descriptor() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_owned())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_owned());
    format!("{model} ({cores} logical cores, 1 thread used)")
}

/// Decodes the first `frames` frames; the first `warmup` are not timed.
pub fn decode_benchmark(
    model: &CwrnnModel<f32>,
    frames: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if frames <= warmup {
        return Err(invalid(format!(
            "benchmark needs more frames ({frames}) than warmup frames ({warmup})"
        )));
    }
    if frames > model.num_frames() {
        return Err(invalid(format!(
            "model represents {} frames, {frames} requested",
            model.num_frames()
        )));
    }
    let mut state = model.initial_state();
    let mut start = Instant::now();
    for t in 0..frames {
        if t == warmup {
            start = Instant::now();
        }
        state = model.coupled_step(&state, t)?;
        std::hint::black_box(model.decode_frame(&state.global)?);
    }
    let elapsed = start.elapsed();
    let c = model.config();
    Ok(BenchReport {
        fps: fps(frames - warmup, elapsed),
        frames_timed: frames - warmup,
        warmup_frames: warmup,
        seconds: elapsed.as_secs_f64(),
        hardware: hardware_descriptor(),
        frame_height: c.frame_height,
        frame_width: c.frame_width,
        parameters: model.count_parameters(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(
            points
                .iter()
                .map(|&(bpp, psnr)| RdPoint { bpp, psnr })
                .collect(),
        )
        .unwrap()
    }

    fn smooth(scale: f64) -> RdCurve {
        curve(&[0.02, 0.04, 0.08, 0.16, 0.32].map(|b: f64| {
            (
                b * scale,
                30.0 + 3.0 * (b * scale / 0.02).log2().max(0.0) + 2.0 * b,
            )
        }))
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::<f64>::from_fn(&[3, 4, 4], |i| i as f64 / 48.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f32>::uniform(&[3, 9, 7], 0.5, &mut rng).map(|v| v + 0.5);
        let b = Tensor::<f32>::uniform(&[3, 9, 7], 0.5, &mut rng).map(|v| v + 0.5);
        let mut sse = 0.0f64;
        for i in 0..a.len() {
            let d = f64::from(a.data()[i]) - f64::from(b.data()[i]);
            sse += d * d;
        }
        let want = 10.0 * (1.0 / (sse / a.len() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn sequence_psnr_is_mean_of_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::uniform(&[2, 3, 4, 4], 0.5, &mut rng);
        let b = Tensor::<f64>::uniform(&[2, 3, 4, 4], 0.5, &mut rng);
        let per = frame_psnrs(&a, &b).unwrap();
        let want = 0.5 * (per[0] + per[1]);
        assert_eq!(sequence_psnr(&a, &b).unwrap(), want);
    }

    #[test]
    fn bpp_arithmetic() {
        let bpp = bits_per_pixel(3_000_000 * 8, 600, 960, 1920);
        assert!((bpp - 0.0217).abs() < 5e-5, "{bpp}");
    }

    #[test]
    fn bd_rate_identity_and_half_rate() {
        let a = smooth(1.0);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-12);
        let half = curve(
            &a.points()
                .iter()
                .map(|p| (p.bpp / 2.0, p.psnr))
                .collect::<Vec<_>>(),
        );
        assert!((bd_rate(&a, &half).unwrap() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn bd_rate_no_overlap_and_bad_curves() {
        let a = curve(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]);
        let b = curve(&[(0.1, 40.0), (0.2, 41.0), (0.3, 42.0), (0.4, 43.0)]);
        assert!(matches!(bd_rate(&a, &b), Err(Error::NoOverlap(_))));
        assert!(RdCurve::new(a.points()[..3].to_vec()).is_err());
        let flat = curve(&[(0.1, 30.0), (0.2, 30.0), (0.3, 32.0), (0.4, 33.0)]);
        assert!(bd_rate(&a, &flat).is_err());
    }

    #[test]
    fn pchip_reproduces_lines_and_integrates_them() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]);
        assert!((p.eval_in(1, 2.0) - 5.0).abs() < 1e-12);
        // integral of 2x + 1 over [0.5, 3.5]
        assert!((p.integrate(0.5, 3.5) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn rd_csv_round_trip() {
        let a = smooth(1.0);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("bpp,psnr\n"));
        assert_eq!(RdCurve::read_csv(&buf[..]).unwrap(), a);
    }

    #[test]
    fn fps_definition() {
        assert_eq!(fps(600, Duration::from_secs(10)), 60.0);
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::uniform(&[3, 5, 5], 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[3, 5, 5], 1.0, &mut rng);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn bd_rate_is_nearly_antisymmetric(shift in -0.03f64..0.03, gain in -0.1f64..0.1) {
            let a = smooth(1.0);
            let b = curve(
                &a.points().iter().map(|p| (p.bpp * (1.0 + shift), p.psnr + gain)).collect::<Vec<_>>(),
            );
            let ab = bd_rate(&a, &b).unwrap();
            let ba = bd_rate(&b, &a).unwrap();
            prop_assert!((ab + ba).abs() < 0.5, "{} vs {}", ab, ba);
        }
    }
}
