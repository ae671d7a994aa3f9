//! Frame loading, cropping, PNG dumps, and synthetic test clips.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// A clip of RGB frames in `[0, 1]`, stored as `[T, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Tensor<f32>,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        match frames.shape() {
            [t, 3, h, w] if *t > 0 && *h > 0 && *w > 0 => Ok(Self { frames }),
            s => Err(shape_err(format!(
                "video must be [T>0, 3, H, W], got {s:?}"
            ))),
        }
    }

    pub fn from_frames(frames: &[Tensor<f32>]) -> Result<Self> {
        Self::new(Tensor::stack(frames)?)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> Result<Tensor<f32>> {
        self.frames.slice_outer(t)
    }

    /// Frames `range` as a new sequence.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.num_frames() {
            return Err(invalid(format!(
                "frame range {range:?} invalid for {} frames",
                self.num_frames()
            )));
        }
        let frames: Vec<_> = range.map(|t| self.frame(t)).collect::<Result<_>>()?;
        Self::from_frames(&frames)
    }

    /// Concatenates along time.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let mut frames = Vec::new();
        for part in parts {
            for t in 0..part.num_frames() {
                frames.push(part.frame(t)?);
            }
        }
        Self::from_frames(&frames)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    #[default]
    Center,
    TopLeft,
    None,
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Self::Center),
            "top-left" | "top_left" => Ok(Self::TopLeft),
            "none" => Ok(Self::None),
            _ => Err(invalid(format!("unknown crop mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// A directory of PNG frames, or a raw planar RGB file with a `.dims` sidecar.
    pub source: PathBuf,
    #[serde(default)]
    pub crop: CropMode,
    /// `(H, W)` after cropping; `None` keeps the source size.
    #[serde(default)]
    pub target_dims: Option<(usize, usize)>,
    /// Half-open range of source frame indices.
    #[serde(default)]
    pub frame_range: Option<(usize, usize)>,
    #[serde(default = "one")]
    pub stride: usize,
    /// Cropped dims must be multiples of this (the decoder's total upsampling).
    #[serde(default = "sixteen")]
    pub divisor: usize,
}

fn one() -> usize {
    1
}

fn sixteen() -> usize {
    16
}

impl DatasetSpec {
    pub fn new(source: impl Into<PathBuf>) -> Self {
        Self {
            source: source.into(),
            crop: CropMode::Center,
            target_dims: None,
            frame_range: None,
            stride: 1,
            divisor: 16,
        }
    }

    fn output_dims(&self, src: (usize, usize)) -> Result<(usize, usize, usize, usize)> {
        let (h, w) = match (self.crop, self.target_dims) {
            (_, None) => src,
            (CropMode::None, Some(t)) if t != src => {
                return Err(invalid(format!(
                    "crop mode none needs target dims equal to the source {src:?}, got {t:?}"
                )))
            }
            (_, Some(t)) => t,
        };
        if h > src.0 || w > src.1 {
            return Err(invalid(format!("cannot crop {src:?} frames to {h}x{w}")));
        }
        let d = self.divisor.max(1);
        if h % d != 0 || w % d != 0 {
            return Err(invalid(format!(
                "frame dims {h}x{w} are not divisible by {d}"
            )));
        }
        let (y0, x0) = match self.crop {
            CropMode::Center => ((src.0 - h) / 2, (src.1 - w) / 2),
            CropMode::TopLeft | CropMode::None => (0, 0),
        };
        Ok((y0, x0, h, w))
    }

    fn select<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        if self.stride == 0 {
            return Err(invalid("stride must be at least 1"));
        }
        let (start, end) = self.frame_range.unwrap_or((0, items.len()));
        if start >= end || end > items.len() {
            return Err(invalid(format!(
                "frame range {start}..{end} invalid for {} source frames",
                items.len()
            )));
        }
        Ok(items[start..end]
            .iter()
            .step_by(self.stride)
            .cloned()
            .collect())
    }
}

/// Crops an interleaved 8-bit RGB buffer into a `[3, h, w]` tensor in `[0, 1]`.
fn crop_interleaved(
    rgb: &[u8],
    src_w: usize,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        f32::from(rgb[((y0 + y) * src_w + x0 + x) * 3 + c]) / 255.0
    })
}

/// Reads the sidecar of a raw clip: `frames height width`, whitespace separated.
pub fn read_dims_sidecar(raw: &Path) -> Result<(usize, usize, usize)> {
    let path = sidecar_path(raw);
    let text = fs::read_to_string(&path)?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match nums[..] {
        [t, h, w] if t > 0 && h > 0 && w > 0 => Ok((t, h, w)),
        _ => Err(Error::Format(format!(
            "{} must hold three positive integers: frames height width",
            path.display()
        ))),
    }
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut name = raw.as_os_str().to_owned();
    name.push(".dims");
    PathBuf::from(name)
}

/// PNG files of a directory in filename order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no PNG frames in {}", dir.display())));
    }
    Ok(files)
}

pub fn load_video(spec: &DatasetSpec) -> Result<FrameSequence> {
    if spec.source.is_dir() {
        load_png_dir(spec)
    } else if spec.source.is_file() {
        load_raw(spec)
    } else {
        Err(invalid(format!(
            "video source {} does not exist",
            spec.source.display()
        )))
    }
}

fn load_png_dir(spec: &DatasetSpec) -> Result<FrameSequence> {
    let files = spec.select(&list_frames(&spec.source)?)?;
    let mut frames = Vec::with_capacity(files.len());
    let mut dims = None;
    for path in &files {
        let img = image::open(path)
            .map_err(|source| Error::Frame {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let src = (img.height() as usize, img.width() as usize);
        if *dims.get_or_insert(src) != src {
            return Err(shape_err(format!(
                "{} is {}x{}, earlier frames are {:?}",
                path.display(),
                src.0,
                src.1,
                dims.unwrap()
            )));
        }
        let (y0, x0, h, w) = spec.output_dims(src)?;
        frames.push(crop_interleaved(img.as_raw(), src.1, y0, x0, h, w));
    }
    FrameSequence::from_frames(&frames)
}

fn load_raw(spec: &DatasetSpec) -> Result<FrameSequence> {
    let (t, sh, sw) = read_dims_sidecar(&spec.source)?;
    let bytes = fs::read(&spec.source)?;
    let plane = sh * sw;
    if bytes.len() != t * 3 * plane {
        return Err(Error::Format(format!(
            "{} holds {} bytes, sidecar implies {}",
            spec.source.display(),
            bytes.len(),
            t * 3 * plane
        )));
    }
    let (y0, x0, h, w) = spec.output_dims((sh, sw))?;
    let indices: Vec<usize> = (0..t).collect();
    let frames: Vec<_> = spec
        .select(&indices)?
        .into_iter()
        .map(|f| {
            let base = f * 3 * plane;
            Tensor::from_fn(&[3, h, w], |i| {
                let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                f32::from(bytes[base + c * plane + (y0 + y) * sw + x0 + x]) / 255.0
            })
        })
        .collect();
    FrameSequence::from_frames(&frames)
}

/// Writes a clip as planar 8-bit RGB plus its `.dims` sidecar.
pub fn save_raw(video: &FrameSequence, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = video.tensor().data().iter().map(|&v| to_u8(v)).collect();
    fs::write(path, bytes)?;
    fs::write(
        sidecar_path(path),
        format!(
            "{} {} {}\n",
            video.num_frames(),
            video.height(),
            video.width()
        ),
    )?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn frame_to_image(frame: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = frame.chw()?;
    if c != 3 {
        return Err(shape_err(format!(
            "expected an RGB frame, got {c} channels"
        )));
    }
    let d = frame.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    }))
}

/// Dumps every frame as `<dir>/<prefix>_00000.png`, ...; returns the paths.
pub fn save_frames(video: &FrameSequence, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..video.num_frames())
        .map(|t| {
            let path = dir.join(format!("{prefix}_{t:05}.png"));
            frame_to_image(&video.frame(t)?)?.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// `base[..N] ++ insert[..n] ++ base[N..2N]` with `two_n = 2N`.
pub fn make_spliced_video(
    base: &FrameSequence,
    insert: &FrameSequence,
    n: usize,
    two_n: usize,
) -> Result<FrameSequence> {
    if n == 0 {
        return Err(invalid("at least one frame must be inserted"));
    }
    if two_n == 0 || two_n % 2 != 0 {
        return Err(invalid(format!(
            "2N must be a positive even number, got {two_n}"
        )));
    }
    if base.num_frames() < two_n || insert.num_frames() < n {
        return Err(Error::Index {
            index: two_n.max(n),
            len: base.num_frames().min(insert.num_frames()),
        });
    }
    if (base.height(), base.width()) != (insert.height(), insert.width()) {
        return Err(shape_err("base and inserted clips differ in frame size"));
    }
    let half = two_n / 2;
    FrameSequence::concat(&[
        &base.slice(0..half)?,
        &insert.slice(0..n)?,
        &base.slice(half..two_n)?,
    ])
}

/// Procedural clips for tests and desk-scale experiments.
pub mod synth {
    use super::*;

    fn smoothstep(edge: f32, softness: f32, d: f32) -> f32 {
        (0.5 - (d - edge) / softness).clamp(0.0, 1.0)
    }

    fn sequence(
        t: usize,
        h: usize,
        w: usize,
        mut pixel: impl FnMut(usize, f32, f32) -> [f32; 3],
    ) -> FrameSequence {
        let frames: Vec<_> = (0..t)
            .map(|f| {
                let mut frame = Tensor::zeros(&[3, h, w]);
                let d = frame.data_mut();
                for y in 0..h {
                    for x in 0..w {
                        let rgb = pixel(f, y as f32 / h as f32, x as f32 / w as f32);
                        for c in 0..3 {
                            d[(c * h + y) * w + x] = rgb[c].clamp(0.0, 1.0);
                        }
                    }
                }
                frame
            })
            .collect();
        FrameSequence::from_frames(&frames).expect("non-empty clip")
    }

    /// Cartoon scene: sky, rolling hills under a slow camera pan, a hopping
    /// round character and a drifting sun.
    pub fn cartoon(t: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f32 = rng.gen_range(0.0..6.28);
        let pan: f32 = rng.gen_range(0.004..0.008);
        let hop: f32 = rng.gen_range(0.35..0.5);
        let aspect = w as f32 / h as f32;
        sequence(t, h, w, |f, v, u| {
            let ft = f as f32;
            let world_u = u + pan * ft;
            let hill = 0.62 + 0.08 * (world_u * 9.0 + phase).sin() + 0.04 * (world_u * 23.0).cos();
            let mut rgb = if v < hill {
                [0.45 + 0.3 * v, 0.65 + 0.25 * v, 0.95]
            } else {
                let stripe = ((world_u * 40.0).sin() * 0.5 + 0.5) * 0.08;
                [0.25 + stripe, 0.6 + 0.1 * (v - hill), 0.2]
            };
            let sun = (((u - 0.8 + 0.002 * ft) * aspect).powi(2) + (v - 0.15).powi(2)).sqrt();
            let s = smoothstep(0.08, 0.02, sun);
            for (c, col) in rgb.iter_mut().zip([1.0, 0.85, 0.3]) {
                *c = *c * (1.0 - s) + col * s;
            }
            let cx = 0.2 + 0.6 * (ft / t.max(2) as f32);
            let cy = 0.62 - hop * 0.3 * (ft * 0.9).sin().abs();
            let body = (((u - cx) * aspect).powi(2) + ((v - cy) * 1.2).powi(2)).sqrt();
            let b = smoothstep(0.11, 0.03, body);
            let eye = (((u - cx - 0.03) * aspect).powi(2) + (v - cy + 0.03).powi(2)).sqrt();
            let e = smoothstep(0.015, 0.01, eye);
            for (c, col) in rgb.iter_mut().zip([0.85, 0.82, 0.78]) {
                *c = *c * (1.0 - b) + col * b;
            }
            for c in rgb.iter_mut() {
                *c *= 1.0 - e;
            }
            rgb
        })
    }

    /// Smooth colored Gaussian blobs drifting on a gradient.
    pub fn blobs(t: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<([f32; 2], [f32; 2], [f32; 3], f32)> = (0..4)
            .map(|_| {
                (
                    [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)],
                    [rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)],
                    [rng.gen(), rng.gen(), rng.gen()],
                    rng.gen_range(0.08..0.2),
                )
            })
            .collect();
        sequence(t, h, w, |f, v, u| {
            let mut rgb = [0.2 + 0.3 * u, 0.3, 0.2 + 0.3 * v];
            for (pos, vel, col, r) in &blobs {
                let cy = pos[0] + vel[0] * f as f32;
                let cx = pos[1] + vel[1] * f as f32;
                let a = (-((v - cy).powi(2) + (u - cx).powi(2)) / (2.0 * r * r)).exp();
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - a) + col[c] * a;
                }
            }
            rgb
        })
    }

    /// Slowly opening radial flower on a dark background.
    pub fn flower(t: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let petals = rng.gen_range(5..8) as f32;
        let spin: f32 = rng.gen_range(0.005..0.015);
        let aspect = w as f32 / h as f32;
        sequence(t, h, w, |f, v, u| {
            let open = 0.15 + 0.2 * f as f32 / t.max(2) as f32;
            let dx = (u - 0.5) * aspect;
            let dy = v - 0.5;
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx) + spin * f as f32;
            let edge = open * (0.7 + 0.3 * (petals * theta).cos());
            let p = smoothstep(edge, 0.03, r);
            let core = smoothstep(0.05, 0.02, r);
            let bg = [0.05, 0.15 + 0.1 * v, 0.08];
            let petal = [0.95, 0.9 - r, 0.95];
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = bg[c] * (1.0 - p) + petal[c] * p;
                rgb[c] = rgb[c] * (1.0 - core) + [0.95, 0.8, 0.1][c] * core;
            }
            rgb
        })
    }

    /// Warm portrait-like clip with a face oval and diagonal stripes; visually
    /// unrelated to [`flower`].
    pub fn portrait(t: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tilt: f32 = rng.gen_range(-0.3..0.3);
        let aspect = w as f32 / h as f32;
        sequence(t, h, w, |f, v, u| {
            let stripes =
                ((u * 30.0 + v * 30.0 * tilt.cos() + f as f32 * 0.3).sin() * 0.5 + 0.5) * 0.5;
            let mut rgb = [0.3 + stripes, 0.1 + 0.5 * stripes, 0.5 - 0.4 * stripes];
            let face = ((((u - 0.45) * aspect) / 0.6).powi(2) + ((v - 0.5) / 0.38).powi(2)).sqrt();
            let m = smoothstep(1.0, 0.1, face);
            for (c, col) in rgb.iter_mut().zip([0.93, 0.72, 0.6]) {
                *c = *c * (1.0 - m) + col * m;
            }
            rgb
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_video(t: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::from_fn(&[t, 3, h, w], |_| f32::from(rng.gen::<u8>()) / 255.0);
        FrameSequence::new(frames).unwrap()
    }

    #[test]
    fn png_round_trip_is_exact_at_eight_bits() {
        let video = random_video(3, 16, 32, 1);
        let dir = tempfile::tempdir().unwrap();
        save_frames(&video, dir.path(), "f").unwrap();
        let back = load_video(&DatasetSpec::new(dir.path())).unwrap();
        assert_eq!(back, video);
    }

    #[test]
    fn normalization_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(16, 16);
        img.put_pixel(0, 0, Rgb([255, 0, 255]));
        img.save(dir.path().join("0.png")).unwrap();
        let v = load_video(&DatasetSpec::new(dir.path())).unwrap();
        let f = v.frame(0).unwrap();
        assert_eq!(f.data()[0], 1.0);
        assert_eq!(f.data()[256], 0.0);
        assert_eq!(f.data()[512], 1.0);
    }

    #[test]
    fn center_crop_drops_equal_margins() {
        let spec = DatasetSpec {
            target_dims: Some((960, 1920)),
            ..DatasetSpec::new("x")
        };
        assert_eq!(spec.output_dims((1080, 1920)).unwrap(), (60, 0, 960, 1920));
        let top = DatasetSpec {
            crop: CropMode::TopLeft,
            ..spec.clone()
        };
        assert_eq!(top.output_dims((1080, 1920)).unwrap(), (0, 0, 960, 1920));
        let odd = DatasetSpec {
            target_dims: Some((1000, 1920)),
            ..spec
        };
        let err = odd.output_dims((1080, 1920)).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn raw_clip_with_crop_range_and_stride() {
        let video = random_video(6, 32, 48, 2);
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("clip.rgb");
        save_raw(&video, &raw).unwrap();
        assert_eq!(load_video(&DatasetSpec::new(&raw)).unwrap(), video);

        let spec = DatasetSpec {
            target_dims: Some((16, 32)),
            frame_range: Some((1, 6)),
            stride: 2,
            ..DatasetSpec::new(&raw)
        };
        let got = load_video(&spec).unwrap();
        assert_eq!(got.num_frames(), 3);
        for (k, src) in [1, 3, 5].into_iter().enumerate() {
            let a = got.frame(k).unwrap();
            let b = video.frame(src).unwrap();
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..32 {
                        assert_eq!(
                            a.data()[(c * 16 + y) * 32 + x],
                            b.data()[(c * 32 + y + 8) * 48 + x + 8]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unreadable_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("000.png"), b"not a png").unwrap();
        let err = load_video(&DatasetSpec::new(dir.path())).unwrap_err();
        assert!(err.to_string().contains("000.png"), "{err}");
    }

    #[test]
    fn loading_is_order_stable() {
        let video = random_video(12, 16, 16, 3);
        let dir = tempfile::tempdir().unwrap();
        save_frames(&video, dir.path(), "frame").unwrap();
        let spec = DatasetSpec::new(dir.path());
        assert_eq!(load_video(&spec).unwrap(), load_video(&spec).unwrap());
        assert_eq!(load_video(&spec).unwrap(), video);
    }

    #[test]
    fn splice_layout() {
        let base = random_video(20, 4, 4, 4);
        let insert = random_video(10, 4, 4, 5);
        let s = make_spliced_video(&base, &insert, 1, 20).unwrap();
        assert_eq!(s.num_frames(), 21);
        assert_eq!(s.frame(10).unwrap(), insert.frame(0).unwrap());
        let mut kept: Vec<_> = (0..10).map(|t| s.frame(t).unwrap()).collect();
        kept.extend((11..21).map(|t| s.frame(t).unwrap()));
        assert_eq!(FrameSequence::from_frames(&kept).unwrap(), base);

        let ten = make_spliced_video(&base, &insert, 10, 20).unwrap();
        assert_eq!(ten.num_frames(), 30);
        assert!(make_spliced_video(&base, &insert, 0, 20).is_err());
        assert!(make_spliced_video(&base, &insert, 1, 19).is_err());
        assert!(matches!(
            make_spliced_video(&base, &insert, 11, 20),
            Err(Error::Index { .. })
        ));
        assert!(make_spliced_video(&base, &insert, 1, 22).is_err());
    }

    #[test]
    fn synthetic_clips_are_deterministic_and_in_range() {
        for make in [synth::cartoon, synth::blobs, synth::flower, synth::portrait] {
            let a = make(3, 16, 32, 7);
            assert_eq!(a, make(3, 16, 32, 7));
            assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(a.frame(0).unwrap(), a.frame(2).unwrap());
        }
    }
}
