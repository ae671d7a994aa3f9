//! Per-tensor min/max weight quantization, the bitstream container, and
//! rate-distortion sweeps.
//!
//! Bitstream layout:
//!
//! ```text
//! "CWRN" | version: u8 | manifest_len: u32 LE | manifest (JSON) | codes
//! ```
//!
//! Codes are bit-packed MSB-first, tensor after tensor in manifest order.
//! With [`CodeCoding::Deflate`] the packed code bytes are zlib-compressed and
//! the compressed size is what [`QuantizedModel::payload_bits`] counts.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use serde::{Deserialize, Serialize};

use crate::data_io::FrameSequence;
use crate::error::{invalid, Error, Result};
use crate::evaluation::{bits_per_pixel, RdCurve, RdPoint, MIN_RD_POINTS};
use crate::model::{CwrnnModel, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{evaluate, fit, FitSpec};

pub const MAGIC: &[u8; 4] = b"CWRN";
pub const BITSTREAM_VERSION: u8 = 1;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;
/// Side information per tensor: `min` and `max` as 32-bit floats.
pub const TENSOR_OVERHEAD_BITS: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub min: f32,
    pub max: f32,
    pub bits: u8,
}

impl TensorHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Lossless stage applied to the packed codes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeCoding {
    #[default]
    Raw,
    Deflate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorHeader>,
    #[serde(default)]
    pub coding: CodeCoding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub manifest: QuantManifest,
    pub codes: Vec<Vec<u16>>,
}

fn levels(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

fn quantize_tensor(name: &str, t: &Tensor<f32>, bits: u8) -> (TensorHeader, Vec<u16>) {
    let (min, max) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let header = TensorHeader {
        name: name.to_owned(),
        shape: t.shape().to_vec(),
        min,
        max,
        bits,
    };
    // A constant tensor still spends `bits` per element (all zero codes) so
    // the payload is always params * bits plus side information.
    let span = f64::from(max) - f64::from(min);
    let (lo, n) = (f64::from(min), levels(bits));
    let codes = t
        .data()
        .iter()
        .map(|&v| {
            if span == 0.0 {
                0
            } else {
                ((f64::from(v) - lo) / span * n).round().clamp(0.0, n) as u16
            }
        })
        .collect();
    (header, codes)
}

fn dequantize_tensor(h: &TensorHeader, codes: &[u16]) -> Result<Tensor<f32>> {
    if codes.len() != h.numel() {
        return Err(Error::Format(format!(
            "tensor {} has {} codes, shape needs {}",
            h.name,
            codes.len(),
            h.numel()
        )));
    }
    let (lo, hi, n) = (f64::from(h.min), f64::from(h.max), levels(h.bits));
    let data = codes
        .iter()
        .map(|&c| {
            let f = f64::from(c) / n;
            ((lo * (1.0 - f) + hi * f) as f32).clamp(h.min, h.max)
        })
        .collect();
    Tensor::from_vec(&h.shape, data)
}

/// Uniform min/max quantization of every learnable tensor at `bits` bits.
pub fn quantize_model(model: &CwrnnModel<f32>, bits: u8) -> Result<QuantizedModel> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(invalid(format!(
            "bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )));
    }
    let (tensors, codes) = model
        .params()
        .iter()
        .map(|(_, name, t)| quantize_tensor(name, t, bits))
        .unzip();
    Ok(QuantizedModel {
        manifest: QuantManifest {
            config: model.config().clone(),
            tensors,
            coding: CodeCoding::Raw,
        },
        codes,
    })
}

pub fn dequantize_model(q: &QuantizedModel) -> Result<CwrnnModel<f32>> {
    let mut model = CwrnnModel::<f32>::new(q.manifest.config.clone(), 0)?;
    let ids: Vec<_> = model.params().ids().collect();
    if ids.len() != q.manifest.tensors.len() || q.codes.len() != ids.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors with {} code arrays, config implies {}",
            q.manifest.tensors.len(),
            q.codes.len(),
            ids.len()
        )));
    }
    for ((id, h), codes) in ids.into_iter().zip(&q.manifest.tensors).zip(&q.codes) {
        if model.params().name(id) != h.name {
            return Err(Error::Format(format!(
                "tensor {} found where {} was expected",
                h.name,
                model.params().name(id)
            )));
        }
        model.params_mut().set(id, dequantize_tensor(h, codes)?)?;
    }
    Ok(model)
}

impl QuantizedModel {
    /// Code bits plus per-tensor side information; the container header is
    /// not counted.
    pub fn payload_bits(&self) -> u64 {
        let side = self.manifest.tensors.len() as u64 * TENSOR_OVERHEAD_BITS;
        match self.manifest.coding {
            CodeCoding::Raw => {
                side + self
                    .manifest
                    .tensors
                    .iter()
                    .map(|h| h.numel() as u64 * u64::from(h.bits))
                    .sum::<u64>()
            }
            CodeCoding::Deflate => side + self.code_bytes().len() as u64 * 8,
        }
    }

    pub fn with_coding(mut self, coding: CodeCoding) -> Self {
        self.manifest.coding = coding;
        self
    }

    /// Packed codes after the lossless stage, as stored in the bitstream.
    fn code_bytes(&self) -> Vec<u8> {
        let mut packer = BitWriter::default();
        for (h, codes) in self.manifest.tensors.iter().zip(&self.codes) {
            for &c in codes {
                packer.push(c, h.bits);
            }
        }
        let packed = packer.finish();
        match self.manifest.coding {
            CodeCoding::Raw => packed,
            CodeCoding::Deflate => {
                let mut z = ZlibEncoder::new(Vec::new(), flate2::Compression::best());
                z.write_all(&packed).expect("writing to memory");
                z.finish().expect("writing to memory")
            }
        }
    }

    pub fn bpp(&self) -> f64 {
        let c = &self.manifest.config;
        bits_per_pixel(
            self.payload_bits(),
            c.num_frames,
            c.frame_height,
            c.frame_width,
        )
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let len = u32::try_from(manifest.len()).map_err(|_| invalid("manifest too large"))?;
        out.write_all(MAGIC)?;
        out.write_all(&[BITSTREAM_VERSION])?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&manifest)?;
        out.write_all(&self.code_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut head = [0u8; 9];
        input.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("missing CWRN magic".into()));
        }
        if head[4] != BITSTREAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported bitstream version {}",
                head[4]
            )));
        }
        let len = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
        let mut manifest = vec![0u8; len];
        input.read_exact(&mut manifest)?;
        let manifest: QuantManifest = serde_json::from_slice(&manifest)?;
        let mut packed = Vec::new();
        input.read_to_end(&mut packed)?;
        if manifest.coding == CodeCoding::Deflate {
            let mut raw = Vec::new();
            ZlibDecoder::new(packed.as_slice())
                .read_to_end(&mut raw)
                .map_err(|e| Error::Format(format!("corrupt deflated codes: {e}")))?;
            packed = raw;
        }
        let mut reader = BitReader::new(&packed);
        let mut codes = Vec::with_capacity(manifest.tensors.len());
        for h in &manifest.tensors {
            if !(MIN_BITS..=MAX_BITS).contains(&h.bits) {
                return Err(Error::Format(format!(
                    "tensor {} has {} bits",
                    h.name, h.bits
                )));
            }
            codes.push(
                (0..h.numel())
                    .map(|_| reader.pull(h.bits))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        if reader.remaining_bytes() > 0 {
            return Err(Error::Format("trailing bytes after packed codes".into()));
        }
        Ok(Self { manifest, codes })
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    acc: u32,
    filled: u8,
}

impl BitWriter {
    fn push(&mut self, code: u16, bits: u8) {
        for i in (0..bits).rev() {
            self.acc = (self.acc << 1) | u32::from((code >> i) & 1);
            self.filled += 1;
            if self.filled == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.filled = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn pull(&mut self, bits: u8) -> Result<u16> {
        let mut v = 0u16;
        for _ in 0..bits {
            let byte = *self
                .bytes
                .get(self.pos / 8)
                .ok_or_else(|| Error::Format("packed codes end early".into()))?;
            v = (v << 1) | u16::from((byte >> (7 - self.pos % 8)) & 1);
            self.pos += 1;
        }
        Ok(v)
    }

    fn remaining_bytes(&self) -> usize {
        self.bytes.len() - self.pos.div_ceil(8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub target_params: usize,
    pub params: usize,
    pub payload_bits: u64,
    pub bpp: f64,
    /// PSNR of the unquantized model.
    pub psnr_float: f64,
    /// PSNR after quantization, the value used on the curve.
    pub psnr: f64,
}

/// Trains one model per budget, quantizes it, and returns the curve.
pub fn rd_sweep(
    video: &FrameSequence,
    budgets: &[usize],
    spec: &FitSpec,
    bits: u8,
) -> Result<(RdCurve, Vec<SweepPoint>)> {
    if budgets.len() < MIN_RD_POINTS {
        return Err(invalid(format!(
            "an RD sweep needs at least {MIN_RD_POINTS} budgets, got {}",
            budgets.len()
        )));
    }
    let mut points = Vec::with_capacity(budgets.len());
    for &target in budgets {
        let spec = FitSpec {
            target_params: target,
            ..spec.clone()
        };
        let (model, _) = fit(video, &spec)?;
        let psnr_float = evaluate(&model, video)?;
        let q = quantize_model(&model, bits)?;
        let psnr = evaluate(&dequantize_model(&q)?, video)?;
        points.push(SweepPoint {
            target_params: target,
            params: model.count_parameters(),
            payload_bits: q.payload_bits(),
            bpp: q.bpp(),
            psnr_float,
            psnr,
        });
    }
    points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    let curve = RdCurve::new(
        points
            .iter()
            .map(|p| RdPoint {
                bpp: p.bpp,
                psnr: p.psnr,
            })
            .collect(),
    )?;
    Ok((curve, points))
}
