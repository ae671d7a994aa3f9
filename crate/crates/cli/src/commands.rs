use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use clap::Args;
use cwrnn_core::compression::{
    dequantize_model, quantize_model, rd_sweep as run_rd_sweep, CodeCoding, QuantizedModel,
};
use cwrnn_core::data_io::{make_spliced_video, save_frames, FrameSequence};
use cwrnn_core::evaluation::{
    bd_rate as compute_bd_rate, decode_benchmark, sequence_psnr, RdCurve, RdPoint,
};
use cwrnn_core::model::{checkpoint, CwrnnModel, Variant};
use cwrnn_core::training::{evaluate, fit, FitSpec};
use serde::Serialize;

use crate::config::{load_source, RunConfig};
use crate::manifest::ExperimentManifest;
use crate::plot::{line_chart, Series};
use crate::{GlobalArgs, UsageError};

pub const DEFAULT_OUT: &str = "cwrnn-out";

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(global: &GlobalArgs, overrides: crate::config::Overrides) -> Result<Self> {
        let mut config = RunConfig::load(global.config.as_deref())?;
        config.apply(&overrides);
        config.validate()?;
        let out = global
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self { config, out })
    }

    fn manifest<A: Serialize>(&self, command: &str, args: &A, artifacts: &[&str]) -> Result<()> {
        ExperimentManifest {
            command: command.to_owned(),
            config: serde_json::json!({ "run": self.config, "args": args }),
            seed: self.config.train.seed,
            out_dir: self.out.clone(),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        }
        .write()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn load_model(path: &Path) -> Result<CwrnnModel<f32>> {
    if path.is_dir() {
        return checkpoint::load(path)
            .with_context(|| format!("loading checkpoint {}", path.display()));
    }
    let file =
        File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    let q = QuantizedModel::read(std::io::BufReader::new(file))
        .with_context(|| format!("reading bitstream {}", path.display()))?;
    Ok(dequantize_model(&q)?)
}

fn decoded_frames(model: &CwrnnModel<f32>) -> Result<FrameSequence> {
    Ok(FrameSequence::new(model.decode_video()?.clamp(0.0, 1.0))?)
}

pub fn train(ctx: &Context) -> Result<()> {
    let video = ctx.config.load_video()?;
    ctx.manifest("train", &(), &["checkpoint", "metrics.csv"])?;
    let (model, log) = fit(&video, &ctx.config.fit_spec())?;
    checkpoint::save(&model, &ctx.path("checkpoint"))?;
    log.write_csv(create(&ctx.path("metrics.csv"))?)?;
    println!(
        "trained {} parameters, PSNR {:.3} dB",
        model.count_parameters(),
        log.final_psnr().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SweepRatioArgs {
    /// Comma-separated grid ratios in [0, 1).
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.8")]
    ratios: Vec<f64>,
    /// Points trained concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

pub fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.len() < 3 {
        return Err(usage(format!(
            "a ratio sweep needs at least 3 ratios, got {}",
            ratios.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for &r in ratios {
        if !(0.0..1.0).contains(&r) {
            return Err(usage(format!("grid ratio {r} is outside [0, 1)")));
        }
        if !seen.insert(r.to_bits()) {
            return Err(usage(format!("duplicate grid ratio {r}")));
        }
    }
    Ok(())
}

pub fn sweep_ratio(ctx: &Context, args: &SweepRatioArgs) -> Result<()> {
    validate_ratios(&args.ratios)?;
    if ctx.config.model.variant == Variant::V1NoGrid {
        return Err(usage("a ratio sweep needs a grid variant"));
    }
    let video = ctx.config.load_video()?;
    ctx.manifest("sweep-ratio", args, &["sweep_ratio.csv", "sweep_ratio.svg"])?;
    let results = parallel_map(&args.ratios, args.workers, |&ratio| {
        let spec = FitSpec {
            grid_ratio: ratio,
            ..ctx.config.fit_spec()
        };
        fit(&video, &spec)
            .map(|(m, log)| (m.count_parameters(), log.final_psnr().unwrap_or(f64::NAN)))
    });
    let mut out = csv_writer(&ctx.path("sweep_ratio.csv"))?;
    out.write_record(["ratio", "params", "psnr", "error"])?;
    let mut points = Vec::new();
    for (&ratio, r) in args.ratios.iter().zip(results) {
        match r {
            Ok((params, p)) => {
                println!("ratio {ratio}: {params} parameters, PSNR {p:.3} dB");
                out.write_record([
                    ratio.to_string(),
                    params.to_string(),
                    p.to_string(),
                    String::new(),
                ])?;
                points.push((ratio, p));
            }
            Err(e) => {
                eprintln!("ratio {ratio}: {e}");
                out.write_record([
                    ratio.to_string(),
                    String::new(),
                    String::new(),
                    e.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let svg = line_chart(
        "PSNR at fixed total budget",
        "grid share of parameters",
        "PSNR (dB)",
        &[Series {
            label: "psnr",
            points: &points,
        }],
    );
    std::fs::write(ctx.path("sweep_ratio.svg"), svg)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

#[derive(Args, Debug, Serialize)]
pub struct SpliceArgs {
    /// Clip whose frames are inserted; same forms as --video.
    #[arg(long)]
    insert: String,
    /// Inserted frame count.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Base frames kept around the insertion (even).
    #[arg(long, default_value_t = 8)]
    two_n: usize,
}

/// PSNR over frames `range` of a decoded clip.
pub fn range_psnr(
    decoded: &FrameSequence,
    target: &FrameSequence,
    range: std::ops::Range<usize>,
) -> Result<f64> {
    let a = decoded.slice(range.clone())?;
    let b = target.slice(range)?;
    Ok(sequence_psnr(a.tensor(), b.tensor())?)
}

pub fn splice_probe(ctx: &Context, args: &SpliceArgs) -> Result<()> {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if args.two_n == 0 || args.two_n % 2 != 0 {
        return Err(usage("--two-n must be a positive even number"));
    }
    let base = ctx.config.load_video()?;
    let divisor = ctx.config.model.budget.upsample_factors.iter().product();
    let insert = load_source(&args.insert, &ctx.config.video, divisor)?;
    let video = make_spliced_video(&base, &insert, args.n, args.two_n)?;
    ctx.manifest(
        "splice-probe",
        args,
        &["splice.csv", "frames_v1", "frames_v3"],
    )?;
    let inserted = args.two_n / 2..args.two_n / 2 + args.n;
    let mut out = csv_writer(&ctx.path("splice.csv"))?;
    out.write_record(["variant", "params", "psnr_all", "psnr_inserted"])?;
    let ratio = if ctx.config.model.grid_ratio > 0.0 {
        ctx.config.model.grid_ratio
    } else {
        0.2
    };
    for (variant, grid_ratio) in [(Variant::V1NoGrid, 0.0), (Variant::V3Coupled, ratio)] {
        let spec = FitSpec {
            variant,
            grid_ratio,
            ..ctx.config.fit_spec()
        };
        let (model, _) = fit(&video, &spec)?;
        let decoded = decoded_frames(&model)?;
        let all = sequence_psnr(decoded.tensor(), video.tensor())?;
        let ins = range_psnr(&decoded, &video, inserted.clone())?;
        let name = variant.short_name();
        println!("{name}: PSNR {all:.3} dB overall, {ins:.3} dB on inserted frames");
        out.write_record([
            name.to_owned(),
            model.count_parameters().to_string(),
            all.to_string(),
            ins.to_string(),
        ])?;
        save_frames(
            &decoded.slice(inserted.clone())?,
            &ctx.path(&format!("frames_{name}")),
            "inserted",
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct CompressArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Append `bpp,psnr` for this model to an RD CSV (needs --video).
    #[arg(long)]
    append_rd: Option<PathBuf>,
    /// Zlib-compress the packed codes; counted into bpp.
    #[arg(long)]
    deflate: bool,
}

pub fn compress(ctx: &Context, args: &CompressArgs) -> Result<()> {
    if !args.checkpoint.is_dir() {
        return Err(usage(format!(
            "checkpoint {} not found",
            args.checkpoint.display()
        )));
    }
    let video = match &args.append_rd {
        Some(_) => Some(ctx.config.load_video()?),
        None => None,
    };
    ctx.manifest("compress", args, &["model.cwrn"])?;
    let model = checkpoint::load(&args.checkpoint)?;
    let coding = if args.deflate {
        CodeCoding::Deflate
    } else {
        CodeCoding::Raw
    };
    let q = quantize_model(&model, ctx.config.bits())?.with_coding(coding);
    q.write(create(&ctx.path("model.cwrn"))?)?;
    println!("{} payload bits, {:.6} bpp", q.payload_bits(), q.bpp());
    if let (Some(path), Some(video)) = (&args.append_rd, video) {
        let p = evaluate(&dequantize_model(&q)?, &video)?;
        append_rd_point(
            path,
            RdPoint {
                bpp: q.bpp(),
                psnr: p,
            },
        )?;
        println!("quantized PSNR {p:.3} dB");
    }
    Ok(())
}

/// Appends one point, writing the header when the file is new.
pub fn append_rd_point(path: &Path, point: RdPoint) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    w.serialize(point)?;
    w.flush()?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeArgs {
    /// Bitstream file or checkpoint directory.
    #[arg(long)]
    input: PathBuf,
}

pub fn decode(ctx: &Context, args: &DecodeArgs) -> Result<()> {
    if !args.input.exists() {
        return Err(usage(format!("{} not found", args.input.display())));
    }
    ctx.manifest("decode", args, &["frames"])?;
    let model = load_model(&args.input)?;
    let frames = decoded_frames(&model)?;
    let written = save_frames(&frames, &ctx.path("frames"), "frame")?;
    println!("wrote {} frames", written.len());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Bitstream file or checkpoint directory.
    #[arg(long)]
    input: PathBuf,
    /// Frames decoded, warmup included; defaults to the whole clip.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
}

pub fn bench(ctx: &Context, args: &BenchArgs) -> Result<()> {
    if !args.input.exists() {
        return Err(usage(format!("{} not found", args.input.display())));
    }
    ctx.manifest("bench", args, &["bench.json"])?;
    let model = load_model(&args.input)?;
    let frames = args.frames.unwrap_or(model.num_frames());
    let report = decode_benchmark(&model, frames, args.warmup)?;
    let json = report.to_json()?;
    std::fs::write(ctx.path("bench.json"), &json)?;
    println!("{json}");
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct RdSweepArgs {
    /// Comma-separated parameter budgets, at least four.
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<usize>,
}

pub fn rd_sweep(ctx: &Context, args: &RdSweepArgs) -> Result<()> {
    if args.budgets.len() < 4 {
        return Err(usage("an RD sweep needs at least 4 budgets"));
    }
    let video = ctx.config.load_video()?;
    ctx.manifest("rd-sweep", args, &["rd.csv", "rd_points.csv", "rd.svg"])?;
    let (curve, points) = run_rd_sweep(
        &video,
        &args.budgets,
        &ctx.config.fit_spec(),
        ctx.config.bits(),
    )?;
    curve.write_csv(create(&ctx.path("rd.csv"))?)?;
    let mut w = csv_writer(&ctx.path("rd_points.csv"))?;
    for p in &points {
        w.serialize(p)?;
    }
    w.flush()?;
    let xy: Vec<(f64, f64)> = curve.points().iter().map(|p| (p.bpp, p.psnr)).collect();
    let svg = line_chart(
        "Rate-distortion",
        "bits per pixel",
        "PSNR (dB)",
        &[Series {
            label: ctx.config.model.variant.short_name(),
            points: &xy,
        }],
    );
    std::fs::write(ctx.path("rd.svg"), svg)?;
    for p in &points {
        println!(
            "{} parameters: {:.6} bpp, {:.3} dB",
            p.params, p.bpp, p.psnr
        );
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BdRateArgs {
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

fn read_curve(path: &Path) -> Result<RdCurve> {
    let file =
        File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    let points: Vec<RdPoint> = csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(RdCurve::from_unsorted(points)?)
}

pub fn bd_rate(_ctx: &Context, args: &BdRateArgs) -> Result<()> {
    let anchor = read_curve(&args.anchor)?;
    let test = read_curve(&args.test)?;
    println!("BD-rate {:.4} %", compute_bd_rate(&anchor, &test)?);
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// cartoon, blobs, flower or portrait.
    #[arg(long, default_value = "cartoon")]
    kind: String,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 192)]
    width: usize,
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<()> {
    let clip = crate::config::synth_clip(
        &args.kind,
        args.frames,
        args.height,
        args.width,
        ctx.config.video.synth_seed,
    )?;
    ctx.manifest("synth", args, &["frames"])?;
    let written = save_frames(&clip, &ctx.path("frames"), "frame")?;
    println!("wrote {} frames", written.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_lists_are_checked() {
        assert!(validate_ratios(&[0.2, 0.5, 0.8]).is_ok());
        assert!(validate_ratios(&[0.2, 0.8]).is_err());
        assert!(validate_ratios(&[0.2, 0.2, 0.8]).is_err());
        assert!(validate_ratios(&[0.2, 0.5, 1.0]).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..7).collect();
        assert_eq!(
            parallel_map(&items, 3, |x| x * 2),
            (0..7).map(|x| x * 2).collect::<Vec<_>>()
        );
        assert_eq!(parallel_map(&items, 1, |x| x + 1)[6], 7);
    }

    #[test]
    fn rd_points_append_into_a_readable_curve() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.csv");
        for (bpp, p) in [(0.1, 30.0), (0.2, 32.0), (0.4, 34.0), (0.8, 35.5)] {
            append_rd_point(&path, RdPoint { bpp, psnr: p }).unwrap();
        }
        let curve = read_curve(&path).unwrap();
        assert_eq!(curve.points().len(), 4);
        assert_eq!(compute_bd_rate(&curve, &curve).unwrap(), 0.0);
    }
}
