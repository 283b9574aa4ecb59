//! Normal-map decoding, curvature estimation and curvature-band hint sampling.
//!
//! Coordinates: `x` grows to the right, `y` grows *up* and `z` points at the
//! viewer, so a normal `(nx, ny, nz)` is stored in pixel `(col, row)` with
//! `ny > 0` meaning "tilted towards the top of the image".

use std::path::Path;

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::seed;

/// Per-component tolerance separating foreground from the flat sentinel.
pub const SENTINEL_TOLERANCE: f64 = 2.0 / 255.0;
/// The background ("flat") normal.
pub const SENTINEL: [f64; 3] = [0.0, 0.0, 1.0];
pub const DEFAULT_T_HI: u8 = 127;
pub const DEFAULT_T_LO: u8 = 126;
pub const DEFAULT_KEEP_PROB: f64 = 0.05;

pub fn encode_component(c: f64) -> u8 {
    (((c.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn decode_component(b: u8) -> f64 {
    2.0 * (b as f64 / 255.0) - 1.0
}

/// Whether a decoded vector is distinguishable from the flat sentinel.
pub fn is_foreground(v: [f64; 3]) -> bool {
    v.iter()
        .zip(SENTINEL)
        .any(|(c, s)| (c - s).abs() > SENTINEL_TOLERANCE)
}

/// An RGB byte image whose channels encode unit normals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormalMapImage(RgbImage);

impl NormalMapImage {
    pub fn new(image: RgbImage) -> Self {
        Self(image)
    }

    /// Builds an image from interleaved bytes, rejecting anything but 3 channels.
    pub fn from_raw(width: u32, height: u32, channels: usize, bytes: Vec<u8>) -> Result<Self> {
        if channels != 3 {
            return Err(Error::MalformedImage(format!(
                "normal map needs 3 channels, got {channels}"
            )));
        }
        if bytes.len() != width as usize * height as usize * 3 {
            return Err(Error::MalformedImage(format!(
                "{} bytes for a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        Ok(Self(RgbImage::from_raw(width, height, bytes).expect("length checked")))
    }

    pub fn from_dynamic(image: DynamicImage) -> Result<Self> {
        match image {
            DynamicImage::ImageRgb8(rgb) => Ok(Self(rgb)),
            other => Err(Error::MalformedImage(format!(
                "normal map must be 8-bit RGB, got {:?}",
                other.color()
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Self::from_dynamic(img).map_err(|e| Error::MalformedImage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.0.save(path).map_err(|e| Error::image(path, e))
    }

    /// An image filled with the encoded sentinel.
    pub fn flat(width: u32, height: u32) -> Self {
        let px = SENTINEL.map(encode_component);
        Self(RgbImage::from_pixel(width, height, Rgb(px)))
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.0.get_pixel(x, y).0
    }

    pub fn as_rgb(&self) -> &RgbImage {
        &self.0
    }

    pub fn into_rgb(self) -> RgbImage {
        self.0
    }

    /// Mirrors left-right and negates `nx` (exact on bytes: `b ↦ 255 − b`).
    pub fn flip_horizontal(&self) -> Self {
        let mut out = image::imageops::flip_horizontal(&self.0);
        for px in out.pixels_mut() {
            px.0[0] = 255 - px.0[0];
        }
        Self(out)
    }
}

/// Decoded per-pixel normals plus the foreground flag.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 3]>,
    pub foreground: Vec<bool>,
}

impl NormalField {
    /// Builds a field from a closure returning `Some(normal)` on foreground.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Option<[f64; 3]>) -> Self {
        let mut vectors = Vec::with_capacity(width * height);
        let mut foreground = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                match f(col, row) {
                    Some(v) => {
                        vectors.push(v);
                        foreground.push(true);
                    }
                    None => {
                        vectors.push(SENTINEL);
                        foreground.push(false);
                    }
                }
            }
        }
        Self {
            width,
            height,
            vectors,
            foreground,
        }
    }

    pub fn at(&self, col: usize, row: usize) -> [f64; 3] {
        self.vectors[row * self.width + col]
    }

    pub fn is_fg(&self, col: usize, row: usize) -> bool {
        self.foreground[row * self.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }

    /// Quantizes the stored vectors back to bytes.
    pub fn encode(&self) -> NormalMapImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (px, v) in img.pixels_mut().zip(&self.vectors) {
            *px = Rgb(v.map(encode_component));
        }
        NormalMapImage(img)
    }
}

/// Decodes bytes with `c ↦ 2·c/255 − 1`.
///
/// Vectors are kept exactly as decoded (background pixels included), which
/// makes `encode(decode(img)) == img` for every byte image.
pub fn decode_normals(image: &NormalMapImage) -> NormalField {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut vectors = Vec::with_capacity(w * h);
    let mut foreground = Vec::with_capacity(w * h);
    for px in image.0.pixels() {
        let v = px.0.map(decode_component);
        foreground.push(is_foreground(v));
        vectors.push(v);
    }
    NormalField {
        width: w,
        height: h,
        vectors,
        foreground,
    }
}

/// A grayscale curvature image, 0 on background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurvatureMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl CurvatureMap {
    pub fn at(&self, col: usize, row: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.values.clone())
            .expect("dimensions match")
    }
}

/// Derivative along one axis; `None` if the stencil touches background.
fn axis_derivative(
    field: &NormalField,
    col: usize,
    row: usize,
    horizontal: bool,
    component: usize,
) -> Option<f64> {
    let (pos, len) = if horizontal {
        (col, field.width)
    } else {
        (row, field.height)
    };
    let sample = |p: usize| -> Option<f64> {
        let (c, r) = if horizontal { (p, row) } else { (col, p) };
        field.is_fg(c, r).then(|| field.at(c, r)[component])
    };
    let (lo, hi, span) = if pos == 0 {
        (0, 1, 1.0)
    } else if pos == len - 1 {
        (len - 2, len - 1, 1.0)
    } else {
        (pos - 1, pos + 1, 2.0)
    };
    Some((sample(hi)? - sample(lo)?) / span)
}

/// Std-dev (pixels) of the Gaussian applied to normals before differencing.
pub const CURVATURE_SMOOTHING_SIGMA: f64 = 1.0;
const SMOOTHING_RADIUS: usize = 2;

/// Gaussian-smooths the field over a 5×5 window.
///
/// Pixels whose window is not entirely foreground are dropped from the
/// foreground of the result. Byte-quantized normals otherwise produce a
/// curvature proxy with too few distinct levels for a one-grey-level band.
pub fn smooth_field(field: &NormalField, sigma: f64) -> NormalField {
    let r = SMOOTHING_RADIUS as isize;
    let weights: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()))
        .collect();
    let total: f64 = weights.iter().sum();
    let (w, h) = (field.width as isize, field.height as isize);
    let mut out = field.clone();
    for row in 0..h {
        for col in 0..w {
            let i = (row * w + col) as usize;
            if !field.foreground[i] {
                continue;
            }
            let mut acc = [0.0; 3];
            let mut complete = true;
            'window: for dy in -r..=r {
                for dx in -r..=r {
                    let (c, rr) = (col + dx, row + dy);
                    if c < 0 || rr < 0 || c >= w || rr >= h || !field.foreground[(rr * w + c) as usize] {
                        complete = false;
                        break 'window;
                    }
                    let wt = weights[((dy + r) * (2 * r + 1) + dx + r) as usize];
                    let v = field.vectors[(rr * w + c) as usize];
                    for k in 0..3 {
                        acc[k] += wt * v[k];
                    }
                }
            }
            if complete {
                out.vectors[i] = acc.map(|a| a / total);
            } else {
                out.foreground[i] = false;
            }
        }
    }
    out
}

/// The real-valued curvature proxy `½·|∂nx/∂x + ∂ny/∂y|` per pixel.
///
/// Normals are first smoothed with [`smooth_field`]; derivatives are central
/// differences inside the image and one-sided at its border. The proxy is
/// zero on background and wherever the smoothing window or the difference
/// stencil leaves the foreground.
pub fn curvature_proxy(field: &NormalField) -> Result<Vec<f64>> {
    if field.width < 3 || field.height < 3 {
        return Err(Error::MalformedImage(format!(
            "curvature needs at least 3x3 pixels, got {}x{}",
            field.width, field.height
        )));
    }
    let smooth = smooth_field(field, CURVATURE_SMOOTHING_SIGMA);
    let mut out = vec![0.0; field.width * field.height];
    for row in 0..field.height {
        for col in 0..field.width {
            if !smooth.is_fg(col, row) {
                continue;
            }
            let dx = axis_derivative(&smooth, col, row, true, 0);
            // Rows grow downwards while y grows up.
            let dy = axis_derivative(&smooth, col, row, false, 1).map(|d| -d);
            if let (Some(dx), Some(dy)) = (dx, dy) {
                out[row * field.width + col] = 0.5 * (dx + dy).abs();
            }
        }
    }
    Ok(out)
}

/// Curvature proxy rescaled so the foreground maximum maps to 255.
pub fn estimate_curvature(field: &NormalField) -> Result<CurvatureMap> {
    let kappa = curvature_proxy(field)?;
    if field.foreground_count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let max = kappa.iter().copied().fold(0.0, f64::max);
    let values = kappa
        .iter()
        .zip(&field.foreground)
        .map(|(&k, &fg)| {
            if !fg || max <= 0.0 {
                0
            } else {
                (255.0 * k / max).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Ok(CurvatureMap {
        width: field.width,
        height: field.height,
        values,
    })
}

/// A per-pixel binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn at(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// 8-bit grayscale with set bits = 255.
    pub fn to_image(&self) -> GrayImage {
        let bytes = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("dimensions match")
    }

    /// Any nonzero gray value counts as set.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            bits: img.pixels().map(|p| p.0[0] > 0).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut bits = self.bits.clone();
        for row in bits.chunks_mut(self.width) {
            row.reverse();
        }
        Self { bits, ..*self }
    }
}

/// Isolates the band `t_lo ≤ v < t_hi` as the XOR of two `≥` binarizations.
pub fn threshold_band(cmap: &CurvatureMap, t_hi: u8, t_lo: u8) -> Result<BinaryMask> {
    if t_hi <= t_lo {
        return Err(Error::InvalidThreshold { t_hi, t_lo });
    }
    let bits = cmap
        .values
        .iter()
        .map(|&v| (v >= t_hi) ^ (v >= t_lo))
        .collect();
    Ok(BinaryMask {
        width: cmap.width,
        height: cmap.height,
        bits,
    })
}

/// Sampled hint points plus the parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PointHintMask {
    pub mask: BinaryMask,
    pub seed: u64,
    pub keep_prob: f64,
    pub t_hi: u8,
    pub t_lo: u8,
}

impl PointHintMask {
    pub fn count(&self) -> usize {
        self.mask.count()
    }

    /// Path of the key/value sidecar stored next to a mask PNG.
    pub fn sidecar_path(mask_png: &Path) -> std::path::PathBuf {
        mask_png.with_extension("txt")
    }

    pub fn sidecar(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.push("seed", self.seed);
        kv.push("keep_prob", self.keep_prob);
        kv.push("t_hi", self.t_hi);
        kv.push("t_lo", self.t_lo);
        kv.push("hints", self.count());
        kv
    }

    /// Writes the PNG and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.mask.to_image().save(path).map_err(|e| Error::image(path, e))?;
        self.sidecar().write(&Self::sidecar_path(path))
    }

    /// Reads a mask PNG; the sidecar is used when present.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let gray = match img {
            DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::MalformedImage(format!(
                    "{}: mask must be 8-bit grayscale, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let mask = BinaryMask::from_image(&gray);
        let side = Self::sidecar_path(path);
        let mut out = Self {
            mask,
            seed: 0,
            keep_prob: DEFAULT_KEEP_PROB,
            t_hi: DEFAULT_T_HI,
            t_lo: DEFAULT_T_LO,
        };
        if side.exists() {
            let kv = KvFile::read(&side)?;
            out.seed = kv.parsed("seed", &side)?.unwrap_or(0);
            out.keep_prob = kv.parsed("keep_prob", &side)?.unwrap_or(DEFAULT_KEEP_PROB);
            out.t_hi = kv.parsed("t_hi", &side)?.unwrap_or(DEFAULT_T_HI);
            out.t_lo = kv.parsed("t_lo", &side)?.unwrap_or(DEFAULT_T_LO);
        }
        Ok(out)
    }
}

/// Keeps each set bit independently with probability `keep_prob`.
///
/// Uses one ChaCha8 draw per set bit in row-major order, so the result is a
/// pure function of `(raw, keep_prob, seed)`.
pub fn dropout_mask(raw: &BinaryMask, keep_prob: f64, seed: u64) -> Result<PointHintMask> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidProbability(keep_prob));
    }
    let mut rng = seed::rng_for(seed, &[]);
    let bits = raw
        .bits
        .iter()
        .map(|&b| b && rng.gen::<f64>() < keep_prob)
        .collect();
    Ok(PointHintMask {
        mask: BinaryMask { bits, ..*raw },
        seed,
        keep_prob,
        t_hi: DEFAULT_T_HI,
        t_lo: DEFAULT_T_LO,
    })
}

/// Full hint pipeline: decode, curvature, band, dropout.
pub fn sample_hints(nmap: &NormalMapImage, keep_prob: f64, seed: u64) -> Result<PointHintMask> {
    sample_hints_with(nmap, keep_prob, seed, DEFAULT_T_HI, DEFAULT_T_LO)
}

pub fn sample_hints_with(
    nmap: &NormalMapImage,
    keep_prob: f64,
    seed: u64,
    t_hi: u8,
    t_lo: u8,
) -> Result<PointHintMask> {
    let field = decode_normals(nmap);
    let raw = match estimate_curvature(&field) {
        Ok(cmap) => threshold_band(&cmap, t_hi, t_lo)?,
        // A map without foreground has nothing to sample.
        Err(Error::EmptyForeground) if t_hi > t_lo => BinaryMask::empty(field.width, field.height),
        Err(e) => return Err(e),
    };
    let mut hints = dropout_mask(&raw, keep_prob, seed)?;
    hints.t_hi = t_hi;
    hints.t_lo = t_lo;
    Ok(hints)
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    match image::open(path).map_err(|e| Error::image(path, e))? {
        DynamicImage::ImageLuma8(g) => Ok(g),
        other => Ok(other.to_luma8()),
    }
}

pub fn gray_pixel(v: u8) -> Luma<u8> {
    Luma([v])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sphere_field(size: usize, cx: f64, cy: f64, r: f64) -> NormalField {
        NormalField::from_fn(size, size, |col, row| {
            let dx = col as f64 - cx;
            let dy = cy - row as f64;
            let d2 = dx * dx + dy * dy;
            (d2 < r * r).then(|| [dx / r, dy / r, (1.0 - d2 / (r * r)).sqrt()])
        })
    }

    fn torus_image() -> NormalMapImage {
        let (big_r, a, c) = (18.0, 9.0, 32.0);
        NormalField::from_fn(64, 64, |col, row| {
            let dx = col as f64 - c;
            let dy = c - row as f64;
            let rho = (dx * dx + dy * dy).sqrt();
            let t = (rho - big_r) / a;
            (t.abs() < 1.0).then(|| [t * dx / rho, t * dy / rho, (1.0 - t * t).sqrt()])
        })
        .encode()
    }

    #[test]
    fn decode_maps_byte_endpoints() {
        let img = NormalMapImage::from_raw(2, 1, 3, vec![128, 128, 255, 255, 128, 128]).unwrap();
        let f = decode_normals(&img);
        let a = f.at(0, 0);
        assert!((a[0] - 1.0 / 255.0).abs() < 1e-12 && (a[2] - 1.0).abs() < 1e-12);
        assert!(!f.is_fg(0, 0));
        let b = f.at(1, 0);
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 1.0 / 255.0).abs() < 1e-12);
        assert!(f.is_fg(1, 0));
    }

    #[test]
    fn wrong_channel_count_is_malformed() {
        assert!(matches!(
            NormalMapImage::from_raw(1, 1, 4, vec![0; 4]),
            Err(Error::MalformedImage(_))
        ));
        let gray = DynamicImage::ImageLuma8(GrayImage::new(2, 2));
        assert!(NormalMapImage::from_dynamic(gray).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_byte_identity(bytes in proptest::collection::vec(any::<u8>(), 4 * 3 * 3)) {
            let img = NormalMapImage::from_raw(4, 3, 3, bytes).unwrap();
            prop_assert_eq!(decode_normals(&img).encode(), img);
        }
    }

    #[test]
    fn flat_field_has_zero_curvature() {
        let f = NormalField::from_fn(8, 8, |_, _| Some([0.0, 0.0, 1.0]));
        let cmap = estimate_curvature(&f).unwrap();
        assert!(cmap.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn all_background_is_an_error() {
        let f = decode_normals(&NormalMapImage::flat(8, 8));
        assert!(matches!(estimate_curvature(&f), Err(Error::EmptyForeground)));
    }

    #[test]
    fn tiny_field_is_rejected() {
        let f = NormalField::from_fn(2, 5, |_, _| Some([0.0, 0.0, 1.0]));
        assert!(estimate_curvature(&f).is_err());
    }

    #[test]
    fn sphere_curvature_is_uniform_in_the_interior() {
        // Analytic oracle: nx = dx/r and ny = dy/r are linear, so
        // ½(∂nx/∂x + ∂ny/∂y) = 1/r exactly wherever the stencil is inside.
        let r = 50.0;
        let field = sphere_field(128, 64.0, 64.0, r);
        let kappa = curvature_proxy(&field).unwrap();
        let cmap = estimate_curvature(&field).unwrap();
        for row in 0..128 {
            for col in 0..128 {
                let d = ((col as f64 - 64.0).powi(2) + (row as f64 - 64.0).powi(2)).sqrt();
                if d < r - 4.0 {
                    assert!((kappa[row * 128 + col] - 1.0 / r).abs() < 1e-12);
                    assert!(cmap.at(col, row) >= 254, "({col},{row}) = {}", cmap.at(col, row));
                }
                if d > r + 1.0 {
                    assert_eq!(cmap.at(col, row), 0);
                }
            }
        }
    }

    #[test]
    fn curvature_vanishes_near_the_silhouette() {
        // Smoothing window (radius 2) plus difference stencil (radius 1).
        let field = sphere_field(32, 16.0, 16.0, 10.0);
        let kappa = curvature_proxy(&field).unwrap();
        for row in 3..29 {
            for col in 3..29 {
                let near_bg = (col - 3..=col + 3).any(|c| (row - 3..=row + 3).any(|r| !field.is_fg(c, r)));
                let within_3 = (col as isize - 3..=col as isize + 3).any(|c| {
                    (row as isize - 3..=row as isize + 3).any(|r| {
                        let (dc, dr) = ((c - col as isize).abs(), (r - row as isize).abs());
                        (dc <= 2 && dr <= 3 || dc <= 3 && dr <= 2) && !field.is_fg(c as usize, r as usize)
                    })
                });
                if within_3 {
                    assert_eq!(kappa[row * 32 + col], 0.0, "({col},{row})");
                }
                if !near_bg {
                    assert!(kappa[row * 32 + col] > 0.0);
                }
            }
        }
    }

    #[test]
    fn torus_curvature_follows_closed_form() {
        // Torus seen along its axis: at planar radius ρ the projected normal is
        // ((ρ−R)/a)·ê_ρ, whose divergence is (2ρ−R)/(aρ). A thin hole makes
        // the inner rim bend fastest even after the rim pixels are trimmed.
        let (big_r, a, c) = (40.0, 33.0, 80.0);
        let size = 160;
        let field = NormalField::from_fn(size, size, |col, row| {
            let dx = col as f64 - c;
            let dy = c - row as f64;
            let rho = (dx * dx + dy * dy).sqrt();
            let t = (rho - big_r) / a;
            (t.abs() < 1.0 && rho > 0.0).then(|| [t * dx / rho, t * dy / rho, (1.0 - t * t).sqrt()])
        });
        let kappa = curvature_proxy(&field).unwrap();
        let oracle = |rho: f64| 0.5 * ((2.0 * rho - big_r) / (a * rho)).abs();
        let mut inner_max: f64 = 0.0;
        let mut outer_max: f64 = 0.0;
        for row in 0..size {
            for col in 0..size {
                let k = kappa[row * size + col];
                if k == 0.0 {
                    continue;
                }
                let rho = ((col as f64 - c).powi(2) + (row as f64 - c).powi(2)).sqrt();
                // Smoothing plus central differences: O(h²) error relative
                // to the peak value of the closed form.
                assert!((k - oracle(rho)).abs() < 0.03 * oracle(big_r - a + 1.0), "ρ={rho}: {k} vs {}", oracle(rho));
                if rho < big_r {
                    inner_max = inner_max.max(k);
                } else {
                    outer_max = outer_max.max(k);
                }
            }
        }
        assert!(inner_max > outer_max);
        // Band structure: quantized values are constant on rings.
        let cmap = estimate_curvature(&field).unwrap();
        let peak = (0..size * size).max_by_key(|&i| cmap.values[i]).unwrap();
        let rho_peak = (((peak % size) as f64 - c).powi(2) + (((peak / size) as f64) - c).powi(2)).sqrt();
        assert!(rho_peak < big_r - a + 4.5, "peak at ρ = {rho_peak}");
    }

    #[test]
    fn curvature_is_translation_invariant() {
        let a = estimate_curvature(&sphere_field(48, 20.0, 22.0, 9.0)).unwrap();
        let b = estimate_curvature(&sphere_field(48, 27.0, 25.0, 9.0)).unwrap();
        for row in 0..40 {
            for col in 0..40 {
                assert_eq!(a.at(col, row), b.at(col + 7, row + 3));
            }
        }
    }

    #[test]
    fn threshold_band_xor_semantics() {
        let cmap = CurvatureMap {
            width: 4,
            height: 1,
            values: vec![125, 126, 127, 128],
        };
        let band = threshold_band(&cmap, 127, 126).unwrap();
        assert_eq!(band.bits, vec![false, true, false, false]);
        let zero = CurvatureMap {
            width: 3,
            height: 3,
            values: vec![0; 9],
        };
        assert_eq!(threshold_band(&zero, 127, 126).unwrap().count(), 0);
        assert!(matches!(
            threshold_band(&cmap, 126, 126),
            Err(Error::InvalidThreshold { .. })
        ));
    }

    #[test]
    fn band_equals_interior_when_interior_is_126() {
        let field = sphere_field(64, 32.0, 32.0, 20.0);
        let kappa = curvature_proxy(&field).unwrap();
        let cmap = CurvatureMap {
            width: 64,
            height: 64,
            values: kappa.iter().map(|&k| if k > 0.0 { 126 } else { 0 }).collect(),
        };
        let band = threshold_band(&cmap, 127, 126).unwrap();
        for (i, &k) in kappa.iter().enumerate() {
            assert_eq!(band.bits[i], k > 0.0);
        }
    }

    #[test]
    fn dropout_identity_and_determinism() {
        let raw = BinaryMask {
            width: 10,
            height: 10,
            bits: (0..100).map(|i| i % 3 == 0).collect(),
        };
        assert_eq!(dropout_mask(&raw, 1.0, 4).unwrap().mask, raw);
        let a = dropout_mask(&raw, 0.3, 11).unwrap();
        let b = dropout_mask(&raw, 0.3, 11).unwrap();
        assert_eq!(a, b);
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(dropout_mask(&raw, p, 0), Err(Error::InvalidProbability(_))));
        }
    }

    #[test]
    fn dropout_keep_count_within_binomial_bound() {
        // 10 000 trials at p = 0.05: mean 500, σ = √(10000·0.05·0.95) ≈ 21.8,
        // so ±4σ ⊂ [400, 600].
        let raw = BinaryMask {
            width: 100,
            height: 100,
            bits: vec![true; 10_000],
        };
        for seed in 0..20 {
            let kept = dropout_mask(&raw, 0.05, seed).unwrap().count();
            assert!((400..=600).contains(&kept), "seed {seed}: {kept}");
        }
    }

    proptest! {
        #[test]
        fn dropout_is_subset_of_raw(bits in proptest::collection::vec(any::<bool>(), 64), seed: u64, p in 0.01f64..1.0) {
            let raw = BinaryMask { width: 8, height: 8, bits };
            let kept = dropout_mask(&raw, p, seed).unwrap();
            prop_assert!(kept.mask.is_subset_of(&raw));
        }
    }

    #[test]
    fn flat_map_yields_no_hints_and_sphere_hints_sit_on_126() {
        let tilted = NormalField::from_fn(16, 16, |_, _| Some([0.0, 0.6, 0.8])).encode();
        assert_eq!(sample_hints(&tilted, 1.0, 0).unwrap().count(), 0);
        assert_eq!(sample_hints(&NormalMapImage::flat(16, 16), 1.0, 0).unwrap().count(), 0);

        for img in [sphere_field(64, 32.3, 31.6, 25.0).encode(), torus_image()] {
            let hints = sample_hints(&img, 1.0, 5).unwrap();
            // Oracle: explicit composition of the stages.
            let cmap = estimate_curvature(&decode_normals(&img)).unwrap();
            let band = threshold_band(&cmap, 127, 126).unwrap();
            assert_eq!(hints.mask, band);
            for (i, &b) in hints.mask.bits.iter().enumerate() {
                if b {
                    assert_eq!(cmap.values[i], 126);
                }
            }
            assert_eq!(sample_hints(&img, 0.2, 9).unwrap(), sample_hints(&img, 0.2, 9).unwrap());
        }
        assert!(sample_hints(&torus_image(), 1.0, 5).unwrap().count() > 0);
    }

    #[test]
    fn mask_png_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = BinaryMask {
            width: 5,
            height: 4,
            bits: (0..20).map(|i| i % 4 == 1).collect(),
        };
        let hints = dropout_mask(&raw, 0.5, 42).unwrap();
        let path = dir.path().join("m.png");
        hints.save(&path).unwrap();
        let side = std::fs::read_to_string(dir.path().join("m.txt")).unwrap();
        assert!(side.contains("seed = 42") && side.contains("t_hi = 127"));
        assert_eq!(PointHintMask::load(&path).unwrap(), hints);
    }
}
