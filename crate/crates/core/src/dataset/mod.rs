//! Paired sketch / normal-map / hint-mask datasets built from analytic shapes.

pub mod shapes;
pub mod sketch;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{decode_component, encode_component, sample_hints, BinaryMask, NormalMapImage, PointHintMask};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub use shapes::{parse_specs, random_specs, read_specs, render_primitive, PrimitiveFamily, ShapeKind, ShapeSpec};
pub use sketch::{extract_contours, SketchImage};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tsketch\tnormal\tmask\tseed\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths are relative to the manifest directory.
    pub sketch: PathBuf,
    pub normal: PathBuf,
    pub mask: PathBuf,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub global_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self, split: Option<Split>) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| split.map_or(true, |s| e.split == s))
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn render(&self) -> String {
        let mut out = format!("# normgen manifest v1 global_seed={}\n{MANIFEST_HEADER}\n", self.global_seed);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.sketch.display(),
                e.normal.display(),
                e.mask.display(),
                e.seed,
                e.split
            ));
        }
        out
    }

    pub fn write(&self) -> Result<()> {
        let path = self.path();
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }

    /// Reads `manifest.tsv`; `path` may be the file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: file.clone(),
            line,
            reason,
        };
        let mut global_seed = 0;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.split_whitespace().find_map(|w| w.strip_prefix("global_seed=")) {
                    global_seed = v.parse().map_err(|e| parse_err(i + 1, format!("global_seed: {e}")))?;
                }
                continue;
            }
            if line.trim().is_empty() || line == MANIFEST_HEADER {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(parse_err(i + 1, format!("expected 6 columns, got {}", cols.len())));
            }
            let entry = ManifestEntry {
                id: cols[0].to_string(),
                sketch: cols[1].into(),
                normal: cols[2].into(),
                mask: cols[3].into(),
                seed: cols[4].parse().map_err(|e| parse_err(i + 1, format!("seed: {e}")))?,
                split: cols[5].parse().map_err(|e| parse_err(i + 1, e))?,
            };
            if entries.iter().any(|e| e.id == entry.id) {
                return Err(parse_err(i + 1, format!("duplicate pair id `{}`", entry.id)));
            }
            entries.push(entry);
        }
        Ok(Self {
            root,
            global_seed,
            entries,
        })
    }

    /// Checks that every referenced file exists and all images share one size.
    pub fn validate(&self) -> Result<(u32, u32)> {
        let mut dims: Option<(u32, u32)> = None;
        for e in &self.entries {
            for rel in [&e.sketch, &e.normal, &e.mask] {
                let path = self.resolve(rel);
                let d = image::image_dimensions(&path).map_err(|err| Error::Load {
                    id: e.id.clone(),
                    reason: format!("{}: {err}", path.display()),
                })?;
                match dims {
                    None => dims = Some(d),
                    Some(expected) if expected != d => {
                        return Err(Error::Load {
                            id: e.id.clone(),
                            reason: format!("{} is {}x{}, expected {}x{}", path.display(), d.0, d.1, expected.0, expected.1),
                        })
                    }
                    _ => {}
                }
            }
        }
        dims.ok_or_else(|| Error::Config("manifest has no entries".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub seed: u64,
    pub keep_prob: f64,
    /// Every `validation_every`-th pair goes to validation; 0 puts all in train.
    pub validation_every: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            keep_prob: crate::geometry::DEFAULT_KEEP_PROB,
            validation_every: 4,
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders every spec, extracts its sketch and samples its hint mask, then
/// writes `normals/`, `sketches/`, `masks/` and `manifest.tsv` under `out_dir`.
pub fn build_dataset(specs: &[ShapeSpec], out_dir: &Path, opts: &BuildOptions) -> Result<DatasetManifest> {
    if specs.is_empty() {
        return Err(Error::EmptySpecList);
    }
    for sub in ["normals", "sketches", "masks"] {
        create_dir(&out_dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("pair_{i:04}");
        let pair_seed = seed::derive_seed(opts.seed, &[i as u64]);
        let normal = render_primitive(spec)?;
        let sketch = extract_contours(&normal)?;
        let hints = sample_hints(&normal, opts.keep_prob, pair_seed)?;
        let entry = ManifestEntry {
            sketch: PathBuf::from(format!("sketches/{id}.png")),
            normal: PathBuf::from(format!("normals/{id}.png")),
            mask: PathBuf::from(format!("masks/{id}.png")),
            seed: pair_seed,
            split: if opts.validation_every > 0 && (i + 1) % opts.validation_every == 0 {
                Split::Validation
            } else {
                Split::Train
            },
            id,
        };
        normal.save(&out_dir.join(&entry.normal))?;
        let sketch_path = out_dir.join(&entry.sketch);
        sketch.0.save(&sketch_path).map_err(|e| Error::image(&sketch_path, e))?;
        hints.save(&out_dir.join(&entry.mask))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        global_seed: opts.seed,
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

/// One loaded training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub sketch: SketchImage,
    pub normal: NormalMapImage,
    pub mask: BinaryMask,
}

impl Pair {
    pub fn load(manifest: &DatasetManifest, id: &str) -> Result<Self> {
        let entry = manifest.entry(id).ok_or_else(|| Error::Load {
            id: id.to_string(),
            reason: "not in manifest".into(),
        })?;
        let wrap = |e: Error| Error::Load {
            id: id.to_string(),
            reason: e.to_string(),
        };
        let normal = NormalMapImage::load(&manifest.resolve(&entry.normal)).map_err(wrap)?;
        let sketch = crate::geometry::load_gray(&manifest.resolve(&entry.sketch)).map_err(wrap)?;
        let mask = PointHintMask::load(&manifest.resolve(&entry.mask)).map_err(wrap)?.mask;
        let (w, h) = (normal.width(), normal.height());
        if sketch.dimensions() != (w, h) || (mask.width, mask.height) != (w as usize, h as usize) {
            return Err(Error::Load {
                id: id.to_string(),
                reason: "sketch, normal map and mask sizes differ".into(),
            });
        }
        Ok(Self {
            id: id.to_string(),
            sketch: SketchImage(sketch),
            normal,
            mask,
        })
    }

    /// Mirrors all three images; `nx` changes sign.
    pub fn flipped(&self) -> Self {
        Self {
            id: self.id.clone(),
            sketch: self.sketch.flip_horizontal(),
            normal: self.normal.flip_horizontal(),
            mask: self.mask.flip_horizontal(),
        }
    }
}

/// Network-ready tensors for a list of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `[n, 4, h, w]`: sketch in channels 0–2, hint mask in channel 3.
    pub input: Tensor<T>,
    /// `[n, 3, h, w]` decoded ground-truth normals in [−1, 1].
    pub target: Tensor<T>,
    /// `[n, 1, h, w]` with hint pixels = 1.
    pub mask: Tensor<T>,
}

/// Sketch bytes map linearly to [−1, 1]: stroke → −1, blank → 1.
pub fn generator_input<T: Real>(sketch: &GrayImage, mask: Option<&BinaryMask>) -> Result<Tensor<T>> {
    let (w, h) = (sketch.width() as usize, sketch.height() as usize);
    if let Some(m) = mask {
        if (m.width, m.height) != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs sketch {w}x{h}",
                m.width, m.height
            )));
        }
    }
    let mut t = Tensor::zeros([1, 4, h, w]);
    let plane = w * h;
    let data = t.data_mut();
    for (i, px) in sketch.pixels().enumerate() {
        let v = T::lit(decode_component(px.0[0]));
        data[i] = v;
        data[plane + i] = v;
        data[2 * plane + i] = v;
        if mask.is_some_and(|m| m.bits[i]) {
            data[3 * plane + i] = T::one();
        }
    }
    Ok(t)
}

pub fn normal_tensor<T: Real>(nmap: &NormalMapImage) -> Tensor<T> {
    let (w, h) = (nmap.width() as usize, nmap.height() as usize);
    let plane = w * h;
    let mut t = Tensor::zeros([1, 3, h, w]);
    let data = t.data_mut();
    for (i, px) in nmap.as_rgb().pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::lit(decode_component(px.0[c]));
        }
    }
    t
}

pub fn mask_tensor<T: Real>(mask: &BinaryMask) -> Tensor<T> {
    let data = mask.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    Tensor::from_vec([1, 1, mask.height, mask.width], data).expect("mask length")
}

/// Encodes sample `n` of a `[_, 3, h, w]` tensor as a normal map.
pub fn tensor_to_normal_map<T: Real>(t: &Tensor<T>, n: usize) -> NormalMapImage {
    let (h, w) = (t.height(), t.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let px = [0, 1, 2].map(|c| encode_component(t.get(n, c, row, col).to_f64().unwrap_or(0.0)));
            img.put_pixel(col as u32, row as u32, Rgb(px));
        }
    }
    NormalMapImage::new(img)
}

impl<T: Real> Batch<T> {
    pub fn from_pairs(pairs: &[&Pair]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        let mut masks = Vec::with_capacity(pairs.len());
        for p in pairs {
            inputs.push(generator_input::<T>(&p.sketch.0, Some(&p.mask))?);
            targets.push(normal_tensor::<T>(&p.normal));
            masks.push(mask_tensor::<T>(&p.mask));
        }
        Ok(Self {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            input: stack(&inputs)?,
            target: stack(&targets)?,
            mask: stack(&masks)?,
        })
    }
}

/// Concatenates single-sample tensors along the batch axis.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let [_, c, h, w] = first.shape();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.shape()[1..] != first.shape()[1..] {
            return Err(Error::ShapeMismatch(format!("stack: {:?} vs {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let n = data.len() / (c * h * w);
    Tensor::from_vec([n, c, h, w], data)
}

/// Loads the listed pairs as one batch, optionally mirrored.
pub fn load_batch<T: Real>(manifest: &DatasetManifest, ids: &[String], flip: bool) -> Result<Batch<T>> {
    let pairs = ids
        .iter()
        .map(|id| Pair::load(manifest, id).map(|p| if flip { p.flipped() } else { p }))
        .collect::<Result<Vec<_>>>()?;
    Batch::from_pairs(&pairs.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_layout_has_sketch_copies_and_unit_hints() {
        let mut sketch = GrayImage::from_pixel(4, 3, image::Luma([255]));
        sketch.put_pixel(1, 1, image::Luma([0]));
        let mut mask = BinaryMask::empty(4, 3);
        mask.bits[6] = true;
        let t: Tensor<f32> = generator_input(&sketch, Some(&mask)).unwrap();
        assert_eq!(t.shape(), [1, 4, 3, 4]);
        for c in 0..3 {
            assert_eq!(t.get(0, c, 1, 1), -1.0);
            assert_eq!(t.get(0, c, 0, 0), 1.0);
        }
        for i in 0..12 {
            assert_eq!(t.data()[36 + i], if i == 6 { 1.0 } else { 0.0 });
        }
        let bare: Tensor<f32> = generator_input(&sketch, None).unwrap();
        assert!(bare.channel_range(3, 4).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manifest_text_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            root: dir.path().to_path_buf(),
            global_seed: 99,
            entries: vec![ManifestEntry {
                id: "pair_0000".into(),
                sketch: "sketches/pair_0000.png".into(),
                normal: "normals/pair_0000.png".into(),
                mask: "masks/pair_0000.png".into(),
                seed: 12345,
                split: Split::Validation,
            }],
        };
        m.write().unwrap();
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn empty_spec_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(&[], dir.path(), &BuildOptions::default()),
            Err(Error::EmptySpecList)
        ));
    }
}
