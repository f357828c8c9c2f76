//! Sample ingestion, patch augmentation, and synthetic scenes.
//!
//! Images travel as single-channel luminance grids in [0,1] with dims
//! divisible by 4, so every sample lines up with the quarter-scale
//! density grid. On-disk formats are binary PGM/PPM for pixels and
//! `x,y`-per-line CSV for annotations and ROI polygons.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::density::{read_pmap, write_pmap, DensityError, HeadAnnotations, PerspectiveMap, RoiMask};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid sample: {0}")]
    BadSample(String),
    #[error("{what} must be a multiple of 4, got {value}")]
    Misaligned { what: &'static str, value: usize },
    #[error("crop window {crop_h}x{crop_w}+{y0}+{x0} exceeds {height}x{width} image")]
    CropOutOfBounds { height: usize, width: usize, crop_h: usize, crop_w: usize, y0: usize, x0: usize },
    #[error("placed {placed} of {requested} heads before running out of room")]
    Placement { placed: usize, requested: usize },
    #[error(transparent)]
    Density(#[from] DensityError),
}

fn io_e(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source }
}

fn fmt_e(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// One annotated image plus optional perspective map and ROI.
#[derive(Clone)]
pub struct Sample<T: Scalar> {
    pub id: String,
    image: Vec<T>,
    height: usize,
    width: usize,
    pub annotations: HeadAnnotations<T>,
    pub perspective: Option<PerspectiveMap<T>>,
    pub roi: Option<RoiMask<T>>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(
        id: impl Into<String>,
        image: Vec<T>,
        height: usize,
        width: usize,
        annotations: HeadAnnotations<T>,
        perspective: Option<PerspectiveMap<T>>,
        roi: Option<RoiMask<T>>,
    ) -> Result<Self, DataError> {
        if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
            return Err(DataError::Misaligned { what: "image dims", value: height.max(width) });
        }
        if image.len() != height * width {
            return Err(DataError::BadSample(format!(
                "{} pixels for a {height}x{width} image",
                image.len()
            )));
        }
        if image.iter().any(|v| !v.is_finite() || *v < T::zero() || *v > T::one()) {
            return Err(DataError::BadSample("pixel outside [0,1]".into()));
        }
        if annotations.height() != height || annotations.width() != width {
            return Err(DataError::BadSample("annotation dims differ from image".into()));
        }
        if let Some(p) = &perspective {
            if p.height() != height || p.width() != width {
                return Err(DataError::BadSample("perspective dims differ from image".into()));
            }
        }
        if let Some(r) = &roi {
            if r.height() != height || r.width() != width {
                return Err(DataError::BadSample("roi dims differ from image".into()));
            }
        }
        Ok(Sample { id: id.into(), image, height, width, annotations, perspective, roi })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image(&self) -> &[T] {
        &self.image
    }

    /// The image as a `[1, H, W]` tensor, ready for the model.
    pub fn image_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.height, self.width], self.image.clone()).unwrap()
    }

    /// Mirror everything about the vertical axis. An involution.
    pub fn hflip(&self) -> Self {
        let mut image = self.image.clone();
        for row in image.chunks_mut(self.width) {
            row.reverse();
        }
        Sample {
            id: format!("{}~f", self.id),
            image,
            height: self.height,
            width: self.width,
            annotations: self.annotations.hflip(),
            perspective: self.perspective.as_ref().map(|p| p.hflip()),
            roi: self.roi.as_ref().map(|r| r.hflip()),
        }
    }

    /// Window starting at (x0, y0); all four numbers must be multiples
    /// of 4 so patches stay aligned with the quarter-scale grid.
    pub fn crop(&self, x0: usize, y0: usize, height: usize, width: usize) -> Result<Self, DataError> {
        for (what, v) in [("crop x0", x0), ("crop y0", y0), ("crop height", height), ("crop width", width)] {
            if v % 4 != 0 {
                return Err(DataError::Misaligned { what, value: v });
            }
        }
        if height == 0 || width == 0 || y0 + height > self.height || x0 + width > self.width {
            return Err(DataError::CropOutOfBounds {
                height: self.height,
                width: self.width,
                crop_h: height,
                crop_w: width,
                y0,
                x0,
            });
        }
        let mut image = Vec::with_capacity(height * width);
        for y in y0..y0 + height {
            image.extend_from_slice(&self.image[y * self.width + x0..y * self.width + x0 + width]);
        }
        let perspective = match &self.perspective {
            Some(p) => {
                let mut data = Vec::with_capacity(height * width);
                for y in y0..y0 + height {
                    data.extend_from_slice(&p.data()[y * self.width + x0..y * self.width + x0 + width]);
                }
                Some(PerspectiveMap::new(data, height, width)?)
            }
            None => None,
        };
        let roi = match &self.roi {
            Some(r) => Some(r.crop(x0, y0, height, width)?),
            None => None,
        };
        Ok(Sample {
            id: format!("{}@{}x{}", self.id, x0, y0),
            image,
            height,
            width,
            annotations: self.annotations.crop(x0, y0, height, width),
            perspective,
            roi,
        })
    }
}

impl<T: Scalar> fmt::Debug for Sample<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Sample({} {}x{}, {} heads)",
            self.id,
            self.height,
            self.width,
            self.annotations.len()
        )
    }
}

/// Patch extraction parameters. Patches are always quarter-area
/// (half of each side, rounded down to the 4-grid); `flip` doubles the
/// set by mirroring every crop.
#[derive(Debug, Clone, Copy)]
pub struct AugmentSpec {
    pub crop_count: usize,
    pub flip: bool,
}

/// Half of each side, rounded down to a multiple of 4 (min 4).
pub fn patch_dims(height: usize, width: usize) -> (usize, usize) {
    let snap = |d: usize| (d / 2 / 4 * 4).max(4);
    (snap(height), snap(width))
}

/// `crop_count` quarter-area patches at uniform random offsets on the
/// 4-grid. Deterministic for a fixed rng state.
pub fn random_crop<T: Scalar>(
    sample: &Sample<T>,
    crop_count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample<T>> {
    let (ph, pw) = patch_dims(sample.height(), sample.width());
    (0..crop_count)
        .map(|_| {
            let y0 = 4 * rng.random_range(0..=(sample.height() - ph) / 4);
            let x0 = 4 * rng.random_range(0..=(sample.width() - pw) / 4);
            sample.crop(x0, y0, ph, pw).expect("aligned window")
        })
        .collect()
}

/// Crops, interleaved with their mirrors when `flip` is set, so the
/// output has `crop_count` or `2 * crop_count` patches.
pub fn augment<T: Scalar>(
    sample: &Sample<T>,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample<T>> {
    let crops = random_crop(sample, spec.crop_count, rng);
    if !spec.flip {
        return crops;
    }
    let mut out = Vec::with_capacity(crops.len() * 2);
    for c in crops {
        let f = c.hflip();
        out.push(c);
        out.push(f);
    }
    out
}

/// Stable per-sample stream seed: FNV-1a over the id folded into the
/// global seed. Must not change between releases, so it is pinned by a
/// test rather than delegated to `DefaultHasher`.
pub fn sample_rng_seed(global_seed: u64, id: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ global_seed;
    h = h.wrapping_mul(0x100000001b3);
    for &b in id.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// --- pixel IO ---------------------------------------------------------

struct PnmHeader {
    rgb: bool,
    width: usize,
    height: usize,
    maxval: u32,
    data_at: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader, DataError> {
    let rgb = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P6") => true,
        _ => return Err(fmt_e(path, "not a binary PGM/PPM (magic must be P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // Whitespace and '#'-to-end-of-line comments separate fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(fmt_e(path, "truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fmt_e(path, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fmt_e(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(fmt_e(path, format!("bad dimensions {width}x{height} maxval {maxval}")));
    }
    Ok(PnmHeader { rgb, width: width as usize, height: height as usize, maxval, data_at: pos })
}

/// Binary PGM (P5) or PPM (P6) to luminance in [0,1]. RGB collapses
/// via integer-weighted (299 R + 587 G + 114 B) / 1000, which maps
/// pure white to exactly 1.0.
pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<T>, usize, usize), DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_e(path, e))?;
    let hdr = parse_pnm_header(&bytes, path)?;
    let channels = if hdr.rgb { 3 } else { 1 };
    let wide = hdr.maxval > 255;
    let need = hdr.height * hdr.width * channels * if wide { 2 } else { 1 };
    let data = &bytes[hdr.data_at..];
    if data.len() < need {
        return Err(fmt_e(path, format!("expected {need} raster bytes, found {}", data.len())));
    }
    let sample_at = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as f64
        } else {
            data[i] as f64
        }
    };
    let maxval = hdr.maxval as f64;
    let mut out = Vec::with_capacity(hdr.height * hdr.width);
    for i in 0..hdr.height * hdr.width {
        let v = if hdr.rgb {
            let (r, g, b) = (sample_at(3 * i), sample_at(3 * i + 1), sample_at(3 * i + 2));
            (299.0 * r + 587.0 * g + 114.0 * b) / (1000.0 * maxval)
        } else {
            sample_at(i) / maxval
        };
        out.push(sc::<T>(v));
    }
    Ok((out, hdr.height, hdr.width))
}

/// Grid in [0,1] to 8-bit binary PGM.
pub fn write_pgm<T: Scalar>(
    path: impl AsRef<Path>,
    data: &[T],
    height: usize,
    width: usize,
) -> Result<(), DataError> {
    let path = path.as_ref();
    assert_eq!(data.len(), height * width, "grid size");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|v| {
        (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    fs::write(path, bytes).map_err(|e| io_e(path, e))
}

// --- point-list IO ----------------------------------------------------

/// `x,y` per line. Blank lines are allowed; anything else that does
/// not parse as two finite floats is an error naming the line.
pub fn read_points_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(T, T)>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_e(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || fmt_e(path, format!("line {}: expected `x,y`, got `{line}`", i + 1));
        let (xs, ys) = line.split_once(',').ok_or_else(bad)?;
        let x: f64 = xs.trim().parse().map_err(|_| bad())?;
        let y: f64 = ys.trim().parse().map_err(|_| bad())?;
        if !x.is_finite() || !y.is_finite() {
            return Err(bad());
        }
        points.push((sc::<T>(x), sc::<T>(y)));
    }
    Ok(points)
}

pub fn write_points_csv<T: Scalar>(
    path: impl AsRef<Path>,
    points: &[(T, T)],
) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = String::new();
    for &(x, y) in points {
        out.push_str(&format!(
            "{},{}\n",
            x.to_f64().unwrap_or(f64::NAN),
            y.to_f64().unwrap_or(f64::NAN)
        ));
    }
    fs::write(path, out).map_err(|e| io_e(path, e))
}

// --- sample loading ---------------------------------------------------

pub struct LoadOutcome<T: Scalar> {
    pub sample: Sample<T>,
    /// Heads outside the (possibly cropped) image, dropped with a
    /// warning rather than an error.
    pub dropped_annotations: usize,
}

/// Reads an image and its annotations, cropping dims down to the
/// nearest multiple of 4 (top-left anchored) and dropping heads that
/// fall outside.
pub fn load_sample<T: Scalar>(
    image_path: impl AsRef<Path>,
    annotation_path: impl AsRef<Path>,
    perspective_path: Option<&Path>,
    roi_path: Option<&Path>,
) -> Result<LoadOutcome<T>, DataError> {
    let image_path = image_path.as_ref();
    let (raw, h, w) = read_image::<T>(image_path)?;
    let (h4, w4) = (h - h % 4, w - w % 4);
    if h4 == 0 || w4 == 0 {
        return Err(fmt_e(image_path, format!("{h}x{w} image is too small, need 4x4")));
    }
    let mut image = Vec::with_capacity(h4 * w4);
    for y in 0..h4 {
        image.extend_from_slice(&raw[y * w..y * w + w4]);
    }

    let points = read_points_csv::<T>(annotation_path.as_ref())?;
    let (annotations, dropped) = HeadAnnotations::new_dropping(points, h4, w4);

    let perspective = match perspective_path {
        Some(p) => {
            let full = read_pmap::<T>(p)?;
            if (full.height(), full.width()) != (h, w) && (full.height(), full.width()) != (h4, w4)
            {
                return Err(fmt_e(
                    p,
                    format!(
                        "perspective map is {}x{} but the image is {h}x{w}",
                        full.height(),
                        full.width()
                    ),
                ));
            }
            let mut data = Vec::with_capacity(h4 * w4);
            for y in 0..h4 {
                data.extend_from_slice(&full.data()[y * full.width()..y * full.width() + w4]);
            }
            Some(PerspectiveMap::new(data, h4, w4)?)
        }
        None => None,
    };
    let roi = match roi_path {
        Some(p) => Some(RoiMask::from_polygon(read_points_csv::<T>(p)?, h4, w4)?),
        None => None,
    };

    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let sample = Sample::new(id, image, h4, w4, annotations, perspective, roi)?;
    Ok(LoadOutcome { sample, dropped_annotations: dropped })
}

/// Loads every `<stem>.pgm`/`<stem>.ppm` in a directory (sorted by
/// name) with its required `<stem>.csv` annotations and optional
/// `<stem>.pmap` / `<stem>.roi` sidecars. Returns the samples and the
/// total count of dropped out-of-bounds heads.
pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Vec<Sample<T>>, usize), DataError> {
    let dir = dir.as_ref();
    let mut image_paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_e(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(fmt_e(dir, "no .pgm or .ppm images found"));
    }
    let mut samples = Vec::with_capacity(image_paths.len());
    let mut dropped = 0;
    for image_path in image_paths {
        let ann = image_path.with_extension("csv");
        if !ann.exists() {
            return Err(fmt_e(&ann, "missing annotation file for image"));
        }
        let pmap = image_path.with_extension("pmap");
        let roi = image_path.with_extension("roi");
        let outcome = load_sample::<T>(
            &image_path,
            &ann,
            pmap.exists().then_some(pmap.as_path()),
            roi.exists().then_some(roi.as_path()),
        )?;
        dropped += outcome.dropped_annotations;
        samples.push(outcome.sample);
    }
    Ok((samples, dropped))
}

/// Writes `<id>.pgm` + `<id>.csv` (and `.pmap` / `.roi` sidecars when
/// present) into `dir`; returns the image path.
pub fn write_sample<T: Scalar>(sample: &Sample<T>, dir: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    let dir = dir.as_ref();
    let image_path = dir.join(format!("{}.pgm", sample.id));
    write_pgm(&image_path, sample.image(), sample.height(), sample.width())?;
    write_points_csv(dir.join(format!("{}.csv", sample.id)), sample.annotations.points())?;
    if let Some(p) = &sample.perspective {
        write_pmap(p, dir.join(format!("{}.pmap", sample.id)))?;
    }
    if let Some(r) = &sample.roi {
        write_points_csv(dir.join(format!("{}.roi", sample.id)), r.vertices())?;
    }
    Ok(image_path)
}

// --- synthetic scenes -------------------------------------------------

/// Desk-scale scene generator: dark disks with bright rims scattered
/// over a textured background.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Square image side, divisible by 4.
    pub size: usize,
    /// Inclusive head-count range.
    pub count_min: usize,
    pub count_max: usize,
    /// Head disk radius range in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Amplitude of uniform per-pixel background noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 128,
            count_min: 5,
            count_max: 20,
            radius_min: 3.0,
            radius_max: 6.0,
            noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.size % 4 != 0 {
            return Err(DataError::Misaligned { what: "synth size", value: self.size });
        }
        if self.size < 16
            || self.count_min > self.count_max
            || self.radius_min < 1.0
            || self.radius_min > self.radius_max
            || !(0.0..1.0).contains(&self.noise)
        {
            return Err(DataError::BadSample(format!("synth config out of range: {self:?}")));
        }
        Ok(())
    }
}

const DISK_VALUE: f64 = 0.10;
const RIM_VALUE: f64 = 0.95;
const BG_LEVEL: f64 = 0.55;

fn rim_width(radius: f64) -> f64 {
    (radius * 0.4).max(1.5)
}

/// Renders a scene with exact head annotations. Deterministic per
/// (config, seed). Fails if the requested count cannot be placed
/// without overlap after bounded retries.
pub fn synth_scene<T: Scalar>(
    cfg: &SynthConfig,
    seed: u64,
    id: impl Into<String>,
) -> Result<Sample<T>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.size;
    let sf = s as f64;

    let (p1, p2) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    let mut img = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            img[y * s + x] =
                BG_LEVEL + 0.08 * (x as f64 / 9.7 + p1).sin() * (y as f64 / 7.3 + p2).sin();
        }
    }
    if cfg.noise > 0.0 {
        for v in img.iter_mut() {
            *v += rng.random_range(-cfg.noise..cfg.noise);
        }
    }

    let count = rng.random_range(cfg.count_min..=cfg.count_max);
    let mut heads: Vec<(f64, f64, f64)> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while heads.len() < count {
        attempts += 1;
        if attempts > 200 * count + 200 {
            return Err(DataError::Placement { placed: heads.len(), requested: count });
        }
        let r = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let margin = r + rim_width(r) + 1.0;
        if sf - 1.0 - margin <= margin {
            continue;
        }
        let x = rng.random_range(margin..sf - 1.0 - margin);
        let y = rng.random_range(margin..sf - 1.0 - margin);
        let clear = heads.iter().all(|&(hx, hy, hr)| {
            let d2 = (hx - x).powi(2) + (hy - y).powi(2);
            let min = r + rim_width(r) + hr + rim_width(hr) + 2.0;
            d2 > min * min
        });
        if clear {
            heads.push((x, y, r));
        }
    }

    for &(cx, cy, r) in &heads {
        let outer = r + rim_width(r);
        let y_lo = (cy - outer - 1.0).floor().max(0.0) as usize;
        let y_hi = ((cy + outer + 1.0).ceil() as usize).min(s - 1);
        let x_lo = (cx - outer - 1.0).floor().max(0.0) as usize;
        let x_hi = ((cx + outer + 1.0).ceil() as usize).min(s - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                // 1-px soft edges; w_outer covers the whole head,
                // w_disk the dark core, so the ring between them is rim.
                let w_outer = (outer + 0.5 - d).clamp(0.0, 1.0);
                let w_disk = (r + 0.5 - d).clamp(0.0, 1.0);
                let v = &mut img[y * s + x];
                *v = *v * (1.0 - w_outer) + RIM_VALUE * (w_outer - w_disk) + DISK_VALUE * w_disk;
            }
        }
    }

    let image: Vec<T> = img.into_iter().map(|v| sc::<T>(v.clamp(0.0, 1.0))).collect();
    let points: Vec<(T, T)> = heads.iter().map(|&(x, y, _)| (sc::<T>(x), sc::<T>(y))).collect();
    let annotations = HeadAnnotations::new(points, s, s)?;
    Sample::new(id, image, s, s, annotations, None, None)
}

/// `n` scenes with ids `synth-0000` onward and per-scene seeds derived
/// from the base seed.
pub fn synth_dataset<T: Scalar>(
    cfg: &SynthConfig,
    n: usize,
    base_seed: u64,
) -> Result<Vec<Sample<T>>, DataError> {
    (0..n)
        .map(|i| {
            let id = format!("synth-{i:04}");
            synth_scene(cfg, sample_rng_seed(base_seed, &id), id)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{splat_density, RoiMask};
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn flat_sample(h: usize, w: usize, points: Vec<(f64, f64)>) -> Sample<f64> {
        let ann = HeadAnnotations::new(points, h, w).unwrap();
        Sample::new("t", vec![0.5; h * w], h, w, ann, None, None).unwrap()
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let vals: Vec<f64> = (0..6).map(|k| k as f64 * 51.0 / 255.0).collect();
        write_pgm(&path, &vals, 2, 3).unwrap();
        let (back, h, w) = read_image::<f64>(&path).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(back, vals);
    }

    #[test]
    fn pure_white_ppm_reads_as_exact_ones() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        fs::write(&path, bytes).unwrap();
        let (img, _, _) = read_image::<f64>(&path).unwrap();
        assert_eq!(img, vec![1.0; 4]);
    }

    #[test]
    fn pnm_header_comments_and_16bit_are_handled() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5 # comment\n# another\n2 1\n65535\n".to_vec();
        bytes.extend(1000u16.to_be_bytes());
        bytes.extend(65535u16.to_be_bytes());
        fs::write(&path, bytes).unwrap();
        let (img, _, _) = read_image::<f64>(&path).unwrap();
        assert_eq!(img, vec![1000.0 / 65535.0, 1.0]);
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        let err = read_image::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("raster"), "{err}");
    }

    #[test]
    fn annotation_csv_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let ann = HeadAnnotations::<f64>::new(
            vec![(1.25, 2.0), (63.0009765625, 0.0)],
            64,
            64,
        )
        .unwrap();
        write_points_csv(&path, ann.points()).unwrap();
        let back = read_points_csv::<f64>(&path).unwrap();
        assert_eq!(back, ann.points());
    }

    #[test]
    fn malformed_annotation_names_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "1.0,2.0\n3.0;4.0\n").unwrap();
        let err = read_points_csv::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("a.csv"), "{err}");
    }

    #[test]
    fn empty_annotation_file_is_empty_set() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "\n\n").unwrap();
        assert!(read_points_csv::<f64>(&path).unwrap().is_empty());
    }

    #[test]
    fn load_crops_65x67_to_64x64_and_drops_far_heads() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("s.pgm");
        // 67 wide, 65 high.
        let mut bytes = b"P5\n67 65\n255\n".to_vec();
        bytes.extend(vec![128u8; 67 * 65]);
        fs::write(&img, bytes).unwrap();
        let ann = dir.path().join("s.csv");
        fs::write(&ann, "10.0,10.0\n66.5,10.0\n10.0,64.5\n63.9,63.9\n").unwrap();
        let out = load_sample::<f64>(&img, &ann, None, None).unwrap();
        assert_eq!((out.sample.height(), out.sample.width()), (64, 64));
        assert_eq!(out.sample.annotations.len(), 2);
        assert_eq!(out.dropped_annotations, 2);
        assert_eq!(out.sample.id, "s");
    }

    #[test]
    fn random_crop_yields_half_size_aligned_patches() {
        let sample = flat_sample(64, 64, vec![(10.0, 20.0), (50.0, 50.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let patches = random_crop(&sample, 9, &mut rng);
        assert_eq!(patches.len(), 9);
        for p in &patches {
            assert_eq!((p.height(), p.width()), (32, 32));
            for &(x, y) in p.annotations.points() {
                assert!(x >= 0.0 && x < 32.0 && y >= 0.0 && y < 32.0);
            }
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let again = random_crop(&sample, 9, &mut rng2);
        for (a, b) in patches.iter().zip(&again) {
            assert_eq!(a.image(), b.image());
            assert_eq!(a.annotations.points(), b.annotations.points());
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn crop_translates_interior_heads() {
        let sample = flat_sample(8, 8, vec![(5.0, 6.0)]);
        let patch = sample.crop(4, 4, 4, 4).unwrap();
        assert_eq!(patch.annotations.points(), &[(1.0, 2.0)]);
        assert_eq!(patch.id, "t@4x4");
    }

    #[test]
    fn crop_rejects_misaligned_and_oversized_windows() {
        let sample = flat_sample(8, 8, vec![]);
        assert!(matches!(sample.crop(2, 0, 4, 4), Err(DataError::Misaligned { .. })));
        assert!(matches!(sample.crop(0, 0, 12, 4), Err(DataError::CropOutOfBounds { .. })));
    }

    #[test]
    fn tiling_crops_conserve_annotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<(f64, f64)> =
            (0..30).map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect();
        let sample = flat_sample(64, 64, points);
        let total: usize = [(0, 0), (32, 0), (0, 32), (32, 32)]
            .iter()
            .map(|&(x0, y0)| sample.crop(x0, y0, 32, 32).unwrap().annotations.len())
            .sum();
        assert_eq!(total, 30);
    }

    #[test]
    fn augment_interleaves_flips() {
        let sample = flat_sample(64, 64, vec![(3.0, 3.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = augment(&sample, &AugmentSpec { crop_count: 5, flip: true }, &mut rng);
        assert_eq!(patches.len(), 10);
        for pair in patches.chunks(2) {
            let reflipped = pair[1].hflip();
            assert_eq!(pair[0].image(), reflipped.image());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plain = augment(&sample, &AugmentSpec { crop_count: 5, flip: false }, &mut rng);
        assert_eq!(plain.len(), 5);
    }

    #[test]
    fn hflip_is_involution_with_sidecars() {
        let ann = HeadAnnotations::new(vec![(0.0, 1.0), (6.5, 3.25)], 8, 8).unwrap();
        let pmap = PerspectiveMap::new((1..=64).map(|v| v as f64).collect(), 8, 8).unwrap();
        let roi =
            RoiMask::from_polygon(vec![(1.0, 1.0), (6.0, 1.0), (6.0, 6.0), (1.0, 6.0)], 8, 8)
                .unwrap();
        let image: Vec<f64> = (0..64).map(|v| v as f64 / 63.0).collect();
        let sample = Sample::new("t", image, 8, 8, ann, Some(pmap), Some(roi)).unwrap();
        let back = sample.hflip().hflip();
        assert_eq!(back.image(), sample.image());
        assert_eq!(back.annotations.points(), sample.annotations.points());
        assert_eq!(
            back.perspective.as_ref().unwrap().data(),
            sample.perspective.as_ref().unwrap().data()
        );
        assert_eq!(
            back.roi.as_ref().unwrap().mask_at(1).unwrap(),
            sample.roi.as_ref().unwrap().mask_at(1).unwrap()
        );
    }

    #[test]
    fn flipped_head_lands_on_mirror_column() {
        let sample = flat_sample(8, 64, vec![(0.0, 2.0)]);
        assert_eq!(sample.hflip().annotations.points(), &[(63.0, 2.0)]);
    }

    #[test]
    fn flipped_sample_density_is_flipped_density() {
        let sample = flat_sample(16, 16, vec![(3.5, 4.0), (10.0, 12.25)]);
        let sigmas = vec![1.5, 2.0];
        let direct = splat_density(&sample.hflip().annotations, &[1.5, 2.0]).unwrap();
        let flipped = splat_density(&sample.annotations, &sigmas).unwrap().hflip();
        assert_eq!(direct.data(), flipped.data());
    }

    #[test]
    fn roi_crop_matches_full_rasterization_window() {
        let roi = RoiMask::<f64>::from_polygon(
            vec![(2.0, 3.0), (14.0, 2.0), (13.0, 13.0), (3.0, 12.0)],
            16,
            16,
        )
        .unwrap();
        let cropped = roi.crop(4, 4, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(
                    cropped.mask_at(1).unwrap()[y * 8 + x],
                    roi.mask_at(1).unwrap()[(y + 4) * 16 + x + 4]
                );
            }
        }
        for by in 0..2 {
            for bx in 0..2 {
                assert_eq!(
                    cropped.mask_at(4).unwrap()[by * 2 + bx],
                    roi.mask_at(4).unwrap()[(by + 1) * 4 + bx + 1]
                );
            }
        }
        assert!(roi.contains(8.0, 8.0) == cropped.contains(4.0, 4.0));
    }

    #[test]
    fn synth_count_range_is_inclusive_and_exact() {
        let cfg = SynthConfig { count_min: 5, count_max: 5, ..SynthConfig::default() };
        let s = synth_scene::<f64>(&cfg, 3, "x").unwrap();
        assert_eq!(s.annotations.len(), 5);
        assert_eq!((s.height(), s.width()), (128, 128));
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let cfg = SynthConfig { noise: 0.0, ..SynthConfig::default() };
        let a = synth_scene::<f64>(&cfg, 42, "x").unwrap();
        let b = synth_scene::<f64>(&cfg, 42, "x").unwrap();
        assert_eq!(a.image(), b.image());
        assert_eq!(a.annotations.points(), b.annotations.points());
        let c = synth_scene::<f64>(&cfg, 43, "x").unwrap();
        assert_ne!(a.image(), c.image());
    }

    /// Independent centroid oracle: threshold dark pixels, group them
    /// by flood fill, and compare component centroids to annotations.
    #[test]
    fn synth_disk_centroids_match_annotations() {
        let cfg = SynthConfig {
            count_min: 6,
            count_max: 6,
            radius_min: 4.0,
            radius_max: 6.0,
            noise: 0.0,
            size: 128,
        };
        let s = synth_scene::<f64>(&cfg, 9, "x").unwrap();
        let (h, w) = (s.height(), s.width());
        let dark: Vec<bool> = s.image().iter().map(|&v| v < 0.35).collect();
        let mut seen = vec![false; h * w];
        let mut centroids = Vec::new();
        for start in 0..h * w {
            if !dark[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let (mut sx, mut sy, mut mass) = (0.0f64, 0.0f64, 0.0f64);
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let weight = 0.45 - s.image()[i];
                sx += x as f64 * weight;
                sy += y as f64 * weight;
                mass += weight;
                let mut push = |j: usize| {
                    if dark[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            centroids.push((sx / mass, sy / mass));
        }
        assert_eq!(centroids.len(), 6);
        for &(ax, ay) in s.annotations.points() {
            let best = centroids
                .iter()
                .map(|&(cx, cy)| ((cx - ax).powi(2) + (cy - ay).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 0.5, "centroid {best} px from annotation");
        }
    }

    #[test]
    fn synth_rejects_impossible_placement() {
        let cfg = SynthConfig {
            size: 16,
            count_min: 3,
            count_max: 3,
            radius_min: 6.0,
            radius_max: 6.0,
            noise: 0.0,
        };
        assert!(matches!(
            synth_scene::<f64>(&cfg, 1, "x"),
            Err(DataError::Placement { placed: 0, requested: 3 })
        ));
    }

    #[test]
    fn dataset_round_trip_through_directory() {
        let dir = tempdir().unwrap();
        let scenes = synth_dataset::<f64>(&SynthConfig::default(), 3, 5).unwrap();
        for s in &scenes {
            write_sample(s, dir.path()).unwrap();
        }
        let (back, dropped) = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(dropped, 0);
        for (orig, loaded) in scenes.iter().zip(&back) {
            assert_eq!(orig.id, loaded.id);
            assert_eq!(orig.annotations.points(), loaded.annotations.points());
            assert_eq!((orig.height(), orig.width()), (loaded.height(), loaded.width()));
        }
    }

    #[test]
    fn dataset_missing_annotations_is_an_error() {
        let dir = tempdir().unwrap();
        write_pgm(dir.path().join("a.pgm"), &vec![0.5f64; 16], 4, 4).unwrap();
        let err = load_dataset::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("a.csv"), "{err}");
    }

    #[test]
    fn sample_seed_is_pinned_and_id_sensitive() {
        assert_ne!(sample_rng_seed(1, "a"), sample_rng_seed(1, "b"));
        assert_ne!(sample_rng_seed(1, "a"), sample_rng_seed(2, "a"));
        // Frozen value: the on-disk shuffle order of past runs depends
        // on this exact hash.
        assert_eq!(sample_rng_seed(0, ""), 0xcbf29ce484222325u64.wrapping_mul(0x100000001b3));
    }

    #[test]
    fn patch_dims_snap_to_grid() {
        assert_eq!(patch_dims(64, 64), (32, 32));
        assert_eq!(patch_dims(68, 64), (32, 32));
        assert_eq!(patch_dims(4, 8), (4, 4));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_double_flip_restores_sample(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (16, 24);
            let image: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect();
            let points: Vec<(f64, f64)> = (0..5)
                .map(|_| (rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..h as f64)))
                .collect();
            let ann = HeadAnnotations::new(points, h, w).unwrap();
            let sample = Sample::new("p", image, h, w, ann, None, None).unwrap();
            let back = sample.hflip().hflip();
            prop_assert_eq!(back.image(), sample.image());
            prop_assert_eq!(back.annotations.points(), sample.annotations.points());
        }

        #[test]
        fn prop_patches_stay_aligned_and_in_bounds(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<(f64, f64)> = (0..8)
                .map(|_| (rng.random_range(0.0..48.0), rng.random_range(0.0..32.0)))
                .collect();
            let ann = HeadAnnotations::new(points, 32, 48).unwrap();
            let sample = Sample::new("p", vec![0.25; 32 * 48], 32, 48, ann, None, None).unwrap();
            for p in random_crop(&sample, 6, &mut rng) {
                prop_assert_eq!((p.height(), p.width()), (16, 24));
                prop_assert_eq!(p.height() % 4, 0);
                for &(x, y) in p.annotations.points() {
                    prop_assert!(x >= 0.0 && x < 24.0 && y >= 0.0 && y < 16.0);
                }
            }
        }
    }
}
