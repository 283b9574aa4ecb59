//! Angular, L1 and L2 errors over the ground-truth foreground, error maps and
//! side-by-side method reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::geometry::{decode_normals, BinaryMask, NormalField, NormalMapImage};

pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_TABLE: &str = "report.txt";
/// Angular error at which the error-map ramp saturates.
pub const RAMP_SATURATION_DEG: f64 = 90.0;

/// Per-pair scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub id: String,
    pub angular_deg: f64,
    pub l1: f64,
    pub l2: f64,
    pub foreground_pixels: usize,
}

/// Foreground of a ground-truth normal map, per the sentinel rule.
pub fn foreground_mask(y: &NormalMapImage) -> BinaryMask {
    let field = decode_normals(y);
    BinaryMask {
        width: field.width,
        height: field.height,
        bits: field.foreground,
    }
}

fn check(y: &NormalField, y_gen: &NormalField, fg: &BinaryMask) -> Result<()> {
    if (y.width, y.height) != (y_gen.width, y_gen.height) || (fg.width, fg.height) != (y.width, y.height) {
        return Err(Error::ShapeMismatch(format!(
            "ground truth {}x{}, generated {}x{}, mask {}x{}",
            y.width, y.height, y_gen.width, y_gen.height, fg.width, fg.height
        )));
    }
    if fg.count() == 0 {
        return Err(Error::UndefinedMetric("the foreground is empty".into()));
    }
    Ok(())
}

/// Angle in degrees between two vectors after renormalization; a zero
/// vector counts as orthogonal to everything.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    if a == [0.0; 3] || b == [0.0; 3] {
        return 90.0;
    }
    // atan2 stays accurate near 0° and 180° where acos does not.
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    sin.atan2(cos).to_degrees()
}

fn mean_over(fg: &BinaryMask, mut f: impl FnMut(usize) -> f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in fg.bits.iter().enumerate().filter(|(_, &b)| b) {
        sum += f(i);
        n += 1;
    }
    sum / n as f64
}

/// Mean angle between ground-truth and generated normals over `fg`.
pub fn angular_error(y: &NormalField, y_gen: &NormalField, fg: &BinaryMask) -> Result<f64> {
    check(y, y_gen, fg)?;
    Ok(mean_over(fg, |i| angle_deg(y.vectors[i], y_gen.vectors[i])))
}

/// Mean over `fg` of `Σ_c |Δc|`.
pub fn l1_metric(y: &NormalField, y_gen: &NormalField, fg: &BinaryMask) -> Result<f64> {
    check(y, y_gen, fg)?;
    Ok(mean_over(fg, |i| {
        (0..3).map(|c| (y.vectors[i][c] - y_gen.vectors[i][c]).abs()).sum()
    }))
}

/// Mean over `fg` of `√(Σ_c Δc²)`.
pub fn l2_metric(y: &NormalField, y_gen: &NormalField, fg: &BinaryMask) -> Result<f64> {
    check(y, y_gen, fg)?;
    Ok(mean_over(fg, |i| {
        (0..3)
            .map(|c| (y.vectors[i][c] - y_gen.vectors[i][c]).powi(2))
            .sum::<f64>()
            .sqrt()
    }))
}

/// Colour for an angular error: dark blue at 0°, through red, to yellow at
/// 90° and beyond. With `t = min(θ/90°, 1)`:
/// `R = 255·min(1, 2t)`, `G = 255·max(0, 2t − 1)`, `B = 64·(1 − t)`.
pub fn ramp(theta_deg: f64) -> Rgb<u8> {
    let t = (theta_deg / RAMP_SATURATION_DEG).clamp(0.0, 1.0);
    let r = 255.0 * (2.0 * t).min(1.0);
    let g = 255.0 * (2.0 * t - 1.0).max(0.0);
    let b = 64.0 * (1.0 - t);
    Rgb([r.round() as u8, g.round() as u8, b.round() as u8])
}

/// Rec. 601 luma, the intensity the ramp increases in.
pub fn ramp_intensity(px: Rgb<u8>) -> f64 {
    0.299 * px.0[0] as f64 + 0.587 * px.0[1] as f64 + 0.114 * px.0[2] as f64
}

/// Per-pixel angular error through [`ramp`]; background is black.
pub fn error_map(y: &NormalField, y_gen: &NormalField, fg: &BinaryMask) -> Result<RgbImage> {
    check(y, y_gen, fg)?;
    let mut img = RgbImage::new(y.width as u32, y.height as u32);
    for (i, _) in fg.bits.iter().enumerate().filter(|(_, &b)| b) {
        let px = ramp(angle_deg(y.vectors[i], y_gen.vectors[i]));
        img.put_pixel((i % y.width) as u32, (i / y.width) as u32, px);
    }
    Ok(img)
}

/// Scores one generated map against its ground truth.
pub fn evaluate_pair(id: &str, truth: &NormalMapImage, generated: &NormalMapImage) -> Result<MetricsRecord> {
    let fg = foreground_mask(truth);
    let (y, g) = (decode_normals(truth), decode_normals(generated));
    Ok(MetricsRecord {
        id: id.to_string(),
        angular_deg: angular_error(&y, &g, &fg)?,
        l1: l1_metric(&y, &g, &fg)?,
        l2: l2_metric(&y, &g, &fg)?,
        foreground_pixels: fg.count(),
    })
}

/// One row of the comparison table plus its per-pair records.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub records: Vec<MetricsRecord>,
}

impl MethodReport {
    /// Means of the per-pair metrics: (angular, l1, l2).
    pub fn means(&self) -> (f64, f64, f64) {
        let n = self.records.len() as f64;
        let sum = |f: fn(&MetricsRecord) -> f64| self.records.iter().map(f).sum::<f64>() / n;
        (sum(|r| r.angular_deg), sum(|r| r.l1), sum(|r| r.l2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    /// Per-pair rows followed by one `MEAN` row per method.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tid\tangular_deg\tl1\tl2\tforeground_pixels\n");
        for m in &self.methods {
            for r in &m.records {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                    m.method, r.id, r.angular_deg, r.l1, r.l2, r.foreground_pixels
                );
            }
        }
        for m in &self.methods {
            let (a, l1, l2) = m.means();
            let px: usize = m.records.iter().map(|r| r.foreground_pixels).sum();
            let _ = writeln!(s, "{}\tMEAN\t{a:.6}\t{l1:.6}\t{l2:.6}\t{px}", m.method);
        }
        s
    }

    /// Aligned plain-text table with one row per method.
    pub fn to_table(&self) -> String {
        let width = self.methods.iter().map(|m| m.method.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<width$}  {:>10}  {:>8}  {:>8}\n", "Method", "Angular", "L1", "L2");
        for m in &self.methods {
            let (a, l1, l2) = m.means();
            let angle = format!("{a:.3}°");
            let _ = writeln!(s, "{:<width$}  {angle:>10}  {l1:>8.3}  {l2:>8.3}", m.method);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [(REPORT_TSV, self.to_tsv()), (REPORT_TABLE, self.to_table())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// A method name and the directory holding its `<id>.png` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodDir {
    pub name: String,
    pub dir: PathBuf,
}

/// Scores every method on the same pairs of `split` (all pairs for `None`).
/// With `error_maps`, writes `<error_maps>/<method>/<id>.png`.
pub fn evaluate_run(
    manifest: &DatasetManifest,
    methods: &[MethodDir],
    split: Option<Split>,
    error_maps: Option<&Path>,
) -> Result<EvalReport> {
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::Config("no pairs to evaluate in the requested split".into()));
    }
    for m in methods {
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| !m.dir.join(format!("{id}.png")).is_file())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGenerated {
                method: m.name.clone(),
                ids: missing,
            });
        }
    }
    let mut truths = Vec::with_capacity(ids.len());
    for id in &ids {
        let entry = manifest.entry(id).expect("id from manifest");
        let truth = NormalMapImage::load(&manifest.resolve(&entry.normal)).map_err(|e| Error::Load {
            id: id.clone(),
            reason: e.to_string(),
        })?;
        truths.push(truth);
    }
    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        let map_dir = error_maps.map(|d| d.join(&m.name));
        if let Some(d) = &map_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut records = Vec::with_capacity(ids.len());
        for (id, truth) in ids.iter().zip(&truths) {
            let generated = NormalMapImage::load(&m.dir.join(format!("{id}.png")))?;
            records.push(evaluate_pair(id, truth, &generated)?);
            if let Some(d) = &map_dir {
                let fg = foreground_mask(truth);
                let img = error_map(&decode_normals(truth), &decode_normals(&generated), &fg)?;
                let path = d.join(format!("{id}.png"));
                img.save(&path).map_err(|e| Error::image(&path, e))?;
            }
        }
        reports.push(MethodReport {
            method: m.name.clone(),
            records,
        });
    }
    Ok(EvalReport { methods: reports })
}
