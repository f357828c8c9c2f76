//! Ground-truth density maps from head annotations.
//!
//! Heads are splatted as truncated, per-head-renormalized Gaussians so
//! the map integrates to the head count exactly (up to rounding), then
//! sum-pooled to the network's quarter-scale output grid, which keeps
//! that integral. Three σ policies cover the dataset conventions:
//! KNN distance based, perspective-map based, and fixed.
//!
//! Coordinates are snapped to a 1/1024-pixel grid on construction.
//! On that grid `x`, `dim − 1 − x` and pixel-center differences are
//! all exact in both `f32` and `f64`, which is what makes horizontal
//! flip equivariance of splatting a bitwise identity rather than an
//! approximation.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::{compensated_sum, sc, Scalar};

/// Fallback σ in pixels when a policy cannot be evaluated.
pub const DEFAULT_FIXED_SIGMA: f64 = 4.0;

const QUANT: f64 = 1024.0;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("head {index} at ({x}, {y}) lies outside a {width}x{height} image")]
    PointOutOfBounds { index: usize, x: f64, y: f64, height: usize, width: usize },
    #[error("knn sigmas need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("sigma for head {index} must be positive, got {sigma}")]
    NonPositiveSigma { index: usize, sigma: f64 },
    #[error("{len} sigmas for {points} points")]
    SigmaCountMismatch { points: usize, len: usize },
    #[error("{what}: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    DimsMismatch { what: &'static str, expected_h: usize, expected_w: usize, got_h: usize, got_w: usize },
    #[error("{h}x{w} map is not divisible by pooling factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("map at scale {map} cannot take a mask at scale {mask}")]
    ScaleMismatch { map: u32, mask: u32 },
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("roi polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
    #[error("invalid sigma policy: {0}")]
    BadPolicy(String),
    #[error("perspective policy requested but no perspective map supplied")]
    MissingPerspective,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DensityError {
    DensityError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DensityError {
    DensityError::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Snap to the 1/1024-pixel grid; exact for coordinates below 2^14.
fn quantize<T: Scalar>(v: T) -> T {
    (v * sc::<T>(QUANT)).round() / sc::<T>(QUANT)
}

/// Sub-pixel head centers inside an H×W image.
pub struct HeadAnnotations<T: Scalar> {
    points: Vec<(T, T)>,
    height: usize,
    width: usize,
}

impl<T: Scalar> Clone for HeadAnnotations<T> {
    fn clone(&self) -> Self {
        HeadAnnotations { points: self.points.clone(), height: self.height, width: self.width }
    }
}

impl<T: Scalar> HeadAnnotations<T> {
    /// Quantizes every point; rejects the first out-of-bounds one.
    pub fn new(points: Vec<(T, T)>, height: usize, width: usize) -> Result<Self, DensityError> {
        assert!(height > 0 && width > 0, "empty image");
        for (i, &(x, y)) in points.iter().enumerate() {
            if !Self::in_bounds(x, y, height, width) {
                return Err(DensityError::PointOutOfBounds {
                    index: i,
                    x: x.to_f64().unwrap_or(f64::NAN),
                    y: y.to_f64().unwrap_or(f64::NAN),
                    height,
                    width,
                });
            }
        }
        Ok(Self::snapped(points, height, width))
    }

    /// Like [`new`](Self::new) but drops out-of-bounds points, returning
    /// how many were dropped.
    pub fn new_dropping(points: Vec<(T, T)>, height: usize, width: usize) -> (Self, usize) {
        assert!(height > 0 && width > 0, "empty image");
        let n = points.len();
        let kept: Vec<_> =
            points.into_iter().filter(|&(x, y)| Self::in_bounds(x, y, height, width)).collect();
        let dropped = n - kept.len();
        (Self::snapped(kept, height, width), dropped)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::snapped(Vec::new(), height, width)
    }

    fn in_bounds(x: T, y: T, height: usize, width: usize) -> bool {
        x >= T::zero() && y >= T::zero() && x < sc(width as f64) && y < sc(height as f64) && x.is_finite() && y.is_finite()
    }

    fn snapped(points: Vec<(T, T)>, height: usize, width: usize) -> Self {
        let step = T::one() / sc::<T>(QUANT);
        let (xmax, ymax) = (sc::<T>(width as f64) - step, sc::<T>(height as f64) - step);
        let points = points
            .into_iter()
            .map(|(x, y)| (quantize(x).min(xmax), quantize(y).min(ymax)))
            .collect();
        HeadAnnotations { points, height, width }
    }

    pub fn points(&self) -> &[(T, T)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Mirror about the vertical image axis: x → W−1−x. Points past
    /// the last pixel center (x > W−1) clamp to 0.
    pub fn hflip(&self) -> Self {
        let last = sc::<T>((self.width - 1) as f64);
        let points =
            self.points.iter().map(|&(x, y)| ((last - x).max(T::zero()), y)).collect();
        HeadAnnotations { points, height: self.height, width: self.width }
    }

    /// Points inside the window translated to window coordinates.
    /// The window is closed on its low edge and open on its high edge.
    pub fn crop(&self, x0: usize, y0: usize, height: usize, width: usize) -> Self {
        let (fx0, fy0) = (sc::<T>(x0 as f64), sc::<T>(y0 as f64));
        let (fx1, fy1) = (sc::<T>((x0 + width) as f64), sc::<T>((y0 + height) as f64));
        let points = self
            .points
            .iter()
            .filter(|&&(x, y)| x >= fx0 && x < fx1 && y >= fy0 && y < fy1)
            .map(|&(x, y)| (x - fx0, y - fy0))
            .collect();
        HeadAnnotations { points, height, width }
    }
}

/// Persons-per-pixel grid at an integer downsampling scale.
pub struct DensityMap<T: Scalar> {
    grid: Vec<T>,
    height: usize,
    width: usize,
    scale: u32,
}

impl<T: Scalar> Clone for DensityMap<T> {
    fn clone(&self) -> Self {
        DensityMap { grid: self.grid.clone(), height: self.height, width: self.width, scale: self.scale }
    }
}

impl<T: Scalar> DensityMap<T> {
    /// Row-major grid; entries must be finite and non-negative.
    pub fn from_grid(grid: Vec<T>, height: usize, width: usize, scale: u32) -> Result<Self, DensityError> {
        if grid.len() != height * width {
            return Err(DensityError::BadGrid(format!(
                "{} values for a {height}x{width} grid",
                grid.len()
            )));
        }
        if let Some(v) = grid.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(DensityError::BadGrid(format!("entry {v} is negative or not finite")));
        }
        Ok(DensityMap { grid, height, width, scale })
    }

    pub fn zeros(height: usize, width: usize, scale: u32) -> Self {
        DensityMap { grid: vec![T::zero(); height * width], height, width, scale }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn data(&self) -> &[T] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.grid[y * self.width + x]
    }

    /// Total represented count (compensated summation).
    pub fn sum(&self) -> T {
        compensated_sum(self.grid.iter().copied())
    }

    /// Mirror left-right.
    pub fn hflip(&self) -> Self {
        let mut grid = self.grid.clone();
        for row in grid.chunks_mut(self.width) {
            row.reverse();
        }
        DensityMap { grid, height: self.height, width: self.width, scale: self.scale }
    }
}

/// How per-head Gaussian widths are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPolicy<T: Scalar> {
    /// σ_i = beta · mean distance to the 2 nearest other heads.
    Knn { beta: T },
    /// σ_i = 0.2 · P at the head's nearest pixel.
    Perspective,
    /// One σ for every head.
    Fixed { sigma: T },
}

impl<T: Scalar> fmt::Display for SigmaPolicy<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaPolicy::Knn { beta } => write!(f, "knn:{beta}"),
            SigmaPolicy::Perspective => write!(f, "persp"),
            SigmaPolicy::Fixed { sigma } => write!(f, "fixed:{sigma}"),
        }
    }
}

impl<T: Scalar> FromStr for SigmaPolicy<T> {
    type Err = DensityError;

    /// Grammar: `knn:<beta>` | `persp` | `fixed:<sigma>`.
    fn from_str(s: &str) -> Result<Self, DensityError> {
        let bad = || DensityError::BadPolicy(format!("{s} (expected knn:<beta>, persp or fixed:<sigma>)"));
        if s == "persp" || s == "perspective" {
            return Ok(SigmaPolicy::Perspective);
        }
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.parse().map_err(|_| bad())?;
        if !value.is_finite() || value <= 0.0 {
            return Err(bad());
        }
        match kind {
            "knn" => Ok(SigmaPolicy::Knn { beta: sc(value) }),
            "fixed" => Ok(SigmaPolicy::Fixed { sigma: sc(value) }),
            _ => Err(bad()),
        }
    }
}

/// Per-pixel scene scale (P map); strictly positive everywhere.
pub struct PerspectiveMap<T: Scalar> {
    data: Vec<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> Clone for PerspectiveMap<T> {
    fn clone(&self) -> Self {
        PerspectiveMap { data: self.data.clone(), height: self.height, width: self.width }
    }
}

impl<T: Scalar> PerspectiveMap<T> {
    pub fn new(data: Vec<T>, height: usize, width: usize) -> Result<Self, DensityError> {
        if data.len() != height * width {
            return Err(DensityError::BadGrid(format!(
                "{} values for a {height}x{width} perspective map",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v <= T::zero()) {
            return Err(DensityError::BadGrid(format!(
                "perspective entry {v} is not strictly positive"
            )));
        }
        Ok(PerspectiveMap { data, height, width })
    }

    pub fn constant(value: T, height: usize, width: usize) -> Result<Self, DensityError> {
        Self::new(vec![value; height * width], height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn hflip(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        PerspectiveMap { data, height: self.height, width: self.width }
    }
}

/// σ_i = beta · mean(distance to 2 nearest other points).
///
/// Duplicate points contribute distance 0. σ is floored at one
/// quantization step so it stays positive even for triple duplicates.
pub fn knn_sigmas<T: Scalar>(ann: &HeadAnnotations<T>, beta: T) -> Result<Vec<T>, DensityError> {
    if !(beta > T::zero()) {
        return Err(DensityError::BadPolicy(format!("knn beta must be positive, got {beta}")));
    }
    let pts = ann.points();
    if pts.len() < 3 {
        return Err(DensityError::TooFewPoints(pts.len()));
    }
    let floor = T::one() / sc::<T>(QUANT);
    let half = sc::<T>(0.5);
    let mut out = Vec::with_capacity(pts.len());
    for (i, &(xi, yi)) in pts.iter().enumerate() {
        // Track the two smallest squared distances; ties don't matter
        // because only the values enter the mean.
        let (mut d1, mut d2) = (T::infinity(), T::infinity());
        for (j, &(xj, yj)) in pts.iter().enumerate() {
            if i == j {
                continue;
            }
            let (dx, dy) = (xi - xj, yi - yj);
            let d = dx * dx + dy * dy;
            if d < d1 {
                d2 = d1;
                d1 = d;
            } else if d < d2 {
                d2 = d;
            }
        }
        let mean = (d1.sqrt() + d2.sqrt()) * half;
        out.push((beta * mean).max(floor));
    }
    Ok(out)
}

/// σ_i = 0.2 · P at each head's nearest pixel.
pub fn perspective_sigmas<T: Scalar>(
    ann: &HeadAnnotations<T>,
    p: &PerspectiveMap<T>,
) -> Result<Vec<T>, DensityError> {
    if p.height != ann.height() || p.width != ann.width() {
        return Err(DensityError::DimsMismatch {
            what: "perspective map",
            expected_h: ann.height(),
            expected_w: ann.width(),
            got_h: p.height,
            got_w: p.width,
        });
    }
    let fifth = sc::<T>(0.2);
    Ok(ann
        .points()
        .iter()
        .map(|&(x, y)| {
            let px = (x.round().to_usize().unwrap()).min(p.width - 1);
            let py = (y.round().to_usize().unwrap()).min(p.height - 1);
            fifth * p.get(py, px)
        })
        .collect())
}

/// Evaluated σ list plus whether the fixed-σ fallback kicked in.
pub struct SigmaResolution<T: Scalar> {
    pub sigmas: Vec<T>,
    pub fell_back: bool,
}

/// Applies `policy`, falling back to σ = 4 when KNN has fewer than 3
/// points to work with. The fallback is reported, never silent.
pub fn resolve_sigmas<T: Scalar>(
    ann: &HeadAnnotations<T>,
    policy: SigmaPolicy<T>,
    perspective: Option<&PerspectiveMap<T>>,
) -> Result<SigmaResolution<T>, DensityError> {
    match policy {
        SigmaPolicy::Knn { beta } => match knn_sigmas(ann, beta) {
            Ok(sigmas) => Ok(SigmaResolution { sigmas, fell_back: false }),
            Err(DensityError::TooFewPoints(_)) => Ok(SigmaResolution {
                sigmas: vec![sc(DEFAULT_FIXED_SIGMA); ann.len()],
                fell_back: true,
            }),
            Err(e) => Err(e),
        },
        SigmaPolicy::Perspective => {
            let p = perspective.ok_or(DensityError::MissingPerspective)?;
            Ok(SigmaResolution { sigmas: perspective_sigmas(ann, p)?, fell_back: false })
        }
        SigmaPolicy::Fixed { sigma } => {
            if !(sigma > T::zero()) {
                return Err(DensityError::BadPolicy(format!(
                    "fixed sigma must be positive, got {sigma}"
                )));
            }
            Ok(SigmaResolution { sigmas: vec![sigma; ann.len()], fell_back: false })
        }
    }
}

/// Full-resolution density map: one isotropic Gaussian per head,
/// truncated at radius 4σ and renormalized to unit in-bounds mass, so
/// the map sums to the head count.
///
/// The normalizer is a compensated sum over sorted weights; with the
/// quantized coordinate grid this makes splatting exactly equivariant
/// under horizontal flips. σ below a quarter pixel is widened to 0.25
/// (narrower kernels are sub-resolution and would splat nothing).
pub fn splat_density<T: Scalar>(
    ann: &HeadAnnotations<T>,
    sigmas: &[T],
) -> Result<DensityMap<T>, DensityError> {
    let (h, w) = (ann.height(), ann.width());
    if sigmas.len() != ann.len() {
        return Err(DensityError::SigmaCountMismatch { points: ann.len(), len: sigmas.len() });
    }
    if let Some((index, &sigma)) = sigmas.iter().enumerate().find(|(_, s)| !(**s > T::zero())) {
        return Err(DensityError::NonPositiveSigma {
            index,
            sigma: sigma.to_f64().unwrap_or(f64::NAN),
        });
    }
    let mut grid = vec![T::zero(); h * w];
    let mut weights: Vec<(usize, T)> = Vec::new();
    let mut values: Vec<T> = Vec::new();
    for (&(xc, yc), &sigma) in ann.points().iter().zip(sigmas) {
        let sigma = sigma.max(sc(0.25));
        let r = sc::<T>(4.0) * sigma;
        let r2 = r * r;
        let inv = (sc::<T>(2.0) * sigma * sigma).recip();
        let x0 = (xc - r).ceil().max(T::zero()).to_usize().unwrap();
        let x1 = (xc + r).floor().min(sc((w - 1) as f64)).to_usize().unwrap();
        let y0 = (yc - r).ceil().max(T::zero()).to_usize().unwrap();
        let y1 = (yc + r).floor().min(sc((h - 1) as f64)).to_usize().unwrap();
        weights.clear();
        for py in y0..=y1 {
            let dy = sc::<T>(py as f64) - yc;
            let dy2 = dy * dy;
            for px in x0..=x1 {
                let dx = sc::<T>(px as f64) - xc;
                let d2 = dx * dx + dy2;
                if d2 <= r2 {
                    weights.push((py * w + px, (-(d2 * inv)).exp()));
                }
            }
        }
        values.clear();
        values.extend(weights.iter().map(|&(_, v)| v));
        // Sorting fixes the summation order regardless of window
        // clipping, so mirrored heads normalize identically.
        values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let z = compensated_sum(values.iter().copied());
        debug_assert!(z > T::zero());
        for &(idx, v) in &weights {
            grid[idx] += v / z;
        }
    }
    Ok(DensityMap { grid, height: h, width: w, scale: 1 })
}

/// Block-sum pooling; output scale multiplies by `factor` and the
/// total sum is preserved.
pub fn sum_pool_downsample<T: Scalar>(
    map: &DensityMap<T>,
    factor: usize,
) -> Result<DensityMap<T>, DensityError> {
    assert!(factor >= 1);
    let (h, w) = (map.height, map.width);
    if h % factor != 0 || w % factor != 0 {
        return Err(DensityError::NotDivisible { h, w, factor });
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut grid = vec![T::zero(); oh * ow];
    for by in 0..oh {
        for bx in 0..ow {
            grid[by * ow + bx] = compensated_sum(
                (0..factor).flat_map(|dy| {
                    (0..factor).map(move |dx| map.grid[(by * factor + dy) * w + bx * factor + dx])
                }),
            );
        }
    }
    Ok(DensityMap { grid, height: oh, width: ow, scale: map.scale * factor as u32 })
}

/// Polygonal region of interest with rasterized masks at scales 1 and 4.
pub struct RoiMask<T: Scalar> {
    vertices: Vec<(T, T)>,
    height: usize,
    width: usize,
    mask1: Vec<u8>,
    mask4: Vec<u8>,
}

impl<T: Scalar> Clone for RoiMask<T> {
    fn clone(&self) -> Self {
        RoiMask {
            vertices: self.vertices.clone(),
            height: self.height,
            width: self.width,
            mask1: self.mask1.clone(),
            mask4: self.mask4.clone(),
        }
    }
}

impl<T: Scalar> RoiMask<T> {
    /// Rasterizes by the even-odd rule at integer pixel centers; the
    /// scale-4 mask marks blocks with a majority (≥ 8 of 16) of inside
    /// pixels. Image dims must be divisible by 4.
    pub fn from_polygon(
        vertices: Vec<(T, T)>,
        height: usize,
        width: usize,
    ) -> Result<Self, DensityError> {
        if vertices.len() < 3 {
            return Err(DensityError::DegeneratePolygon(vertices.len()));
        }
        if height % 4 != 0 || width % 4 != 0 {
            return Err(DensityError::NotDivisible { h: height, w: width, factor: 4 });
        }
        let mut mask1 = vec![0u8; height * width];
        for py in 0..height {
            for px in 0..width {
                let inside =
                    point_in_polygon(sc::<T>(px as f64), sc::<T>(py as f64), &vertices);
                mask1[py * width + px] = inside as u8;
            }
        }
        let mask4 = majority_downsample(&mask1, height, width);
        Ok(RoiMask { vertices, height, width, mask1, mask4 })
    }

    pub fn vertices(&self) -> &[(T, T)] {
        &self.vertices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Binary mask at scale 1 or 4.
    pub fn mask_at(&self, scale: u32) -> Option<&[u8]> {
        match scale {
            1 => Some(&self.mask1),
            4 => Some(&self.mask4),
            _ => None,
        }
    }

    /// Mirrors the stored masks directly (and the vertex list), so a
    /// flipped mask is bitwise the mirror of the original, independent
    /// of rasterization edge cases.
    pub fn hflip(&self) -> Self {
        let last = sc::<T>((self.width - 1) as f64);
        let vertices = self.vertices.iter().map(|&(x, y)| (last - x, y)).collect();
        let mut mask1 = self.mask1.clone();
        for row in mask1.chunks_mut(self.width) {
            row.reverse();
        }
        let mut mask4 = self.mask4.clone();
        for row in mask4.chunks_mut(self.width / 4) {
            row.reverse();
        }
        RoiMask { vertices, height: self.height, width: self.width, mask1, mask4 }
    }

    /// Window onto the stored masks. Offsets and dims must be
    /// multiples of 4 so the scale-4 mask slices along block borders;
    /// vertices translate without clipping, which keeps `contains`
    /// consistent with the sliced bitmaps.
    pub fn crop(
        &self,
        x0: usize,
        y0: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, DensityError> {
        if x0 % 4 != 0 || y0 % 4 != 0 || height % 4 != 0 || width % 4 != 0 {
            return Err(DensityError::NotDivisible {
                h: height.max(y0),
                w: width.max(x0),
                factor: 4,
            });
        }
        if y0 + height > self.height || x0 + width > self.width {
            return Err(DensityError::DimsMismatch {
                what: "roi crop window",
                expected_h: self.height,
                expected_w: self.width,
                got_h: y0 + height,
                got_w: x0 + width,
            });
        }
        let (fx0, fy0) = (sc::<T>(x0 as f64), sc::<T>(y0 as f64));
        let vertices = self.vertices.iter().map(|&(x, y)| (x - fx0, y - fy0)).collect();
        let mut mask1 = Vec::with_capacity(height * width);
        for py in y0..y0 + height {
            mask1.extend_from_slice(&self.mask1[py * self.width + x0..py * self.width + x0 + width]);
        }
        let (ow, oh) = (self.width / 4, height / 4);
        let (cx0, cy0, cw) = (x0 / 4, y0 / 4, width / 4);
        let mut mask4 = Vec::with_capacity(oh * cw);
        for by in cy0..cy0 + oh {
            mask4.extend_from_slice(&self.mask4[by * ow + cx0..by * ow + cx0 + cw]);
        }
        Ok(RoiMask { vertices, height, width, mask1, mask4 })
    }

    /// True when the point's pixel is inside the ROI at scale 1.
    pub fn contains(&self, x: T, y: T) -> bool {
        let px = x.round().to_usize().unwrap().min(self.width - 1);
        let py = y.round().to_usize().unwrap().min(self.height - 1);
        self.mask1[py * self.width + px] == 1
    }
}

fn point_in_polygon<T: Scalar>(px: T, py: T, vertices: &[(T, T)]) -> bool {
    let mut inside = false;
    let n = vertices.len();
    for i in 0..n {
        let (x1, y1) = vertices[i];
        let (x2, y2) = vertices[(i + 1) % n];
        if (y1 > py) != (y2 > py) {
            let xi = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
            if px < xi {
                inside = !inside;
            }
        }
    }
    inside
}

fn majority_downsample(mask: &[u8], height: usize, width: usize) -> Vec<u8> {
    let (oh, ow) = (height / 4, width / 4);
    let mut out = vec![0u8; oh * ow];
    for by in 0..oh {
        for bx in 0..ow {
            let mut inside = 0u32;
            for dy in 0..4 {
                for dx in 0..4 {
                    inside += mask[(by * 4 + dy) * width + bx * 4 + dx] as u32;
                }
            }
            out[by * ow + bx] = (inside >= 8) as u8;
        }
    }
    out
}

/// Zeroes map entries outside the ROI; the mask must exist at the
/// map's scale and match its dims.
pub fn apply_roi_mask<T: Scalar>(
    map: &DensityMap<T>,
    roi: &RoiMask<T>,
) -> Result<DensityMap<T>, DensityError> {
    let mask = roi
        .mask_at(map.scale)
        .ok_or(DensityError::ScaleMismatch { map: map.scale, mask: map.scale })?;
    let factor = map.scale as usize;
    let (mh, mw) = (roi.height / factor, roi.width / factor);
    if (mh, mw) != (map.height, map.width) {
        return Err(DensityError::DimsMismatch {
            what: "roi mask",
            expected_h: map.height,
            expected_w: map.width,
            got_h: mh,
            got_w: mw,
        });
    }
    let grid = map
        .grid
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m == 1 { v } else { T::zero() })
        .collect();
    Ok(DensityMap { grid, height: map.height, width: map.width, scale: map.scale })
}

/// Writes `DMAP v1 <H> <W> <scale>` plus row-major little-endian f64.
pub fn write_dmap<T: Scalar>(map: &DensityMap<T>, path: impl AsRef<Path>) -> Result<(), DensityError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let header = format!("DMAP v1 {} {} {}\n", map.height, map.width, map.scale);
    write_f64_block(&mut out, &header, &map.grid).map_err(|e| io_err(path, e))
}

pub fn read_dmap<T: Scalar>(path: impl AsRef<Path>) -> Result<DensityMap<T>, DensityError> {
    let path = path.as_ref();
    let mut input = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let header = read_header_line(&mut input).map_err(|e| io_err(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "DMAP" || fields[1] != "v1" {
        return Err(format_err(path, format!("bad DMAP header `{header}`")));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| format_err(path, format!("bad {what} `{s}`")))
    };
    let h = parse(fields[2], "height")?;
    let w = parse(fields[3], "width")?;
    let scale = parse(fields[4], "scale")? as u32;
    let grid = read_f64_block(&mut input, h * w).map_err(|e| io_err(path, e))?;
    let grid = grid
        .into_iter()
        .map(|v| T::from_f64(v).ok_or_else(|| format_err(path, format!("unrepresentable value {v}"))))
        .collect::<Result<Vec<T>, _>>()?;
    DensityMap::from_grid(grid, h, w, scale).map_err(|e| format_err(path, e.to_string()))
}

/// Writes `PMAP v1 <H> <W>` plus row-major little-endian f64.
pub fn write_pmap<T: Scalar>(map: &PerspectiveMap<T>, path: impl AsRef<Path>) -> Result<(), DensityError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let header = format!("PMAP v1 {} {}\n", map.height, map.width);
    write_f64_block(&mut out, &header, &map.data).map_err(|e| io_err(path, e))
}

pub fn read_pmap<T: Scalar>(path: impl AsRef<Path>) -> Result<PerspectiveMap<T>, DensityError> {
    let path = path.as_ref();
    let mut input = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let header = read_header_line(&mut input).map_err(|e| io_err(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "PMAP" || fields[1] != "v1" {
        return Err(format_err(path, format!("bad PMAP header `{header}`")));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| format_err(path, format!("bad {what} `{s}`")))
    };
    let h = parse(fields[2], "height")?;
    let w = parse(fields[3], "width")?;
    let data = read_f64_block(&mut input, h * w).map_err(|e| io_err(path, e))?;
    let data = data
        .into_iter()
        .map(|v| T::from_f64(v).ok_or_else(|| format_err(path, format!("unrepresentable value {v}"))))
        .collect::<Result<Vec<T>, _>>()?;
    PerspectiveMap::new(data, h, w).map_err(|e| format_err(path, e.to_string()))
}

fn write_f64_block<T: Scalar>(
    out: &mut impl Write,
    header: &str,
    values: &[T],
) -> std::io::Result<()> {
    out.write_all(header.as_bytes())?;
    for v in values {
        out.write_all(&v.to_f64().unwrap().to_le_bytes())?;
    }
    out.flush()
}

fn read_header_line(input: &mut impl Read) -> std::io::Result<String> {
    // Single-byte reads are fine: callers hand us a BufReader and the
    // header is one short line.
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        input.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 256 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "unterminated header line",
            ));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "non-utf8 header"))
}

fn read_f64_block(input: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "trailing bytes after data block",
        ));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
