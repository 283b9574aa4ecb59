//! Synthetic line drawings: silhouettes plus occluding contours.

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::geometry::{decode_normals, NormalMapImage};

pub const STROKE: u8 = 0;
pub const BLANK: u8 = 255;
/// Foreground pixels with decoded `nz` below this are drawn as contour.
pub const DEFAULT_GRAZING_NZ: f64 = 0.15;

/// A binary sketch: 0 = stroke, 255 = blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SketchImage(pub GrayImage);

impl SketchImage {
    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn is_stroke(&self, col: u32, row: u32) -> bool {
        self.0.get_pixel(col, row).0[0] < 128
    }

    pub fn stroke_count(&self) -> usize {
        self.0.pixels().filter(|p| p.0[0] < 128).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self(image::imageops::flip_horizontal(&self.0))
    }
}

pub fn extract_contours(nmap: &NormalMapImage) -> Result<SketchImage> {
    extract_contours_with(nmap, DEFAULT_GRAZING_NZ)
}

/// Strokes = inner silhouette boundary ∪ `{nz < grazing_nz}`, thinned.
pub fn extract_contours_with(nmap: &NormalMapImage, grazing_nz: f64) -> Result<SketchImage> {
    let field = decode_normals(nmap);
    let (w, h) = (field.width, field.height);
    if field.foreground_count() == 0 {
        return Err(Error::EmptySketch);
    }
    let mut strokes = vec![false; w * h];
    for row in 0..h {
        for col in 0..w {
            if !field.is_fg(col, row) {
                continue;
            }
            let on_edge = col == 0 || row == 0 || col == w - 1 || row == h - 1;
            let silhouette = on_edge
                || !field.is_fg(col - 1, row)
                || !field.is_fg(col + 1, row)
                || !field.is_fg(col, row - 1)
                || !field.is_fg(col, row + 1);
            strokes[row * w + col] = silhouette || field.at(col, row)[2] < grazing_nz;
        }
    }
    zhang_suen_thin(&mut strokes, w, h);
    let mut img = GrayImage::from_pixel(w as u32, h as u32, Luma([BLANK]));
    for (i, &s) in strokes.iter().enumerate() {
        if s {
            img.put_pixel((i % w) as u32, (i / w) as u32, Luma([STROKE]));
        }
    }
    Ok(SketchImage(img))
}

/// Zhang–Suen thinning of a binary image in place.
fn zhang_suen_thin(bits: &mut [bool], w: usize, h: usize) {
    let at = |bits: &[bool], c: isize, r: isize| -> bool {
        c >= 0 && r >= 0 && (c as usize) < w && (r as usize) < h && bits[r as usize * w + c as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for r in 0..h as isize {
                for c in 0..w as isize {
                    if !at(bits, c, r) {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(bits, c, r - 1),
                        at(bits, c + 1, r - 1),
                        at(bits, c + 1, r),
                        at(bits, c + 1, r + 1),
                        at(bits, c, r + 1),
                        at(bits, c - 1, r + 1),
                        at(bits, c - 1, r),
                        at(bits, c - 1, r - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (n, e, s, wv) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(n && e && s) && !(e && s && wv)
                    } else {
                        !(n && e && wv) && !(n && s && wv)
                    };
                    if ok {
                        remove.push(r as usize * w + c as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                bits[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

/// 8-connected components of stroke pixels.
pub fn stroke_components(sketch: &SketchImage) -> usize {
    let (w, h) = (sketch.width() as usize, sketch.height() as usize);
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] || !sketch.is_stroke((start % w) as u32, (start / w) as u32) {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (c, r) = ((i % w) as isize, (i / w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nc, nr) = (c + dc, r + dr);
                    if nc < 0 || nr < 0 || nc >= w as isize || nr >= h as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && sketch.is_stroke(nc as u32, nr as u32) {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::shapes::{render_primitive, ShapeSpec};

    fn points(sketch: &SketchImage) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for r in 0..sketch.height() {
            for c in 0..sketch.width() {
                if sketch.is_stroke(c, r) {
                    out.push((c as f64, r as f64));
                }
            }
        }
        out
    }

    fn hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
        let directed = |x: &[(f64, f64)], y: &[(f64, f64)]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        directed(a, b).max(directed(b, a))
    }

    #[test]
    fn sphere_sketch_is_its_silhouette_circle() {
        let (c, r) = (32.0, 22.0);
        let img = render_primitive(&ShapeSpec::sphere(64, [c, c], r)).unwrap();
        let sketch = extract_contours(&img).unwrap();
        assert_eq!(stroke_components(&sketch), 1);
        // Oracle: raster circle, pixels whose centre lies within ½ px of radius r.
        let mut circle = Vec::new();
        for row in 0..64 {
            for col in 0..64 {
                let d = ((col as f64 - c).powi(2) + (row as f64 - c).powi(2)).sqrt();
                if (d - r).abs() <= 0.5 {
                    circle.push((col as f64, row as f64));
                }
            }
        }
        let hd = hausdorff(&points(&sketch), &circle);
        assert!(hd <= 1.5, "Hausdorff distance {hd}");
    }

    #[test]
    fn torus_sketch_has_two_closed_contours() {
        let img = render_primitive(&ShapeSpec::torus(64, [32.0, 32.0], 16.0, 7.0, [0.0, 0.0, 1.0])).unwrap();
        let sketch = extract_contours(&img).unwrap();
        assert_eq!(stroke_components(&sketch), 2);
    }

    #[test]
    fn background_only_image_has_no_sketch() {
        assert!(matches!(
            extract_contours(&NormalMapImage::flat(64, 64)),
            Err(Error::EmptySketch)
        ));
    }

    #[test]
    fn strokes_align_with_boundary_or_grazing_pixels() {
        let img = render_primitive(&ShapeSpec::capsule(64, [32.0, 32.0], 14.0, 9.0, [0.6, 0.8, 0.3])).unwrap();
        let field = decode_normals(&img);
        let sketch = extract_contours(&img).unwrap();
        let special = |c: usize, r: usize| {
            field.is_fg(c, r)
                && (field.at(c, r)[2] < DEFAULT_GRAZING_NZ
                    || [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dc, dr)| {
                        !field.is_fg((c as isize + dc) as usize, (r as isize + dr) as usize)
                    }))
        };
        for (c, r) in points(&sketch) {
            let (c, r) = (c as usize, r as usize);
            let near = (c - 1..=c + 1).any(|cc| (r - 1..=r + 1).any(|rr| special(cc, rr)));
            assert!(near, "stroke at ({c},{r})");
        }
    }

    #[test]
    fn strokes_are_thin() {
        let img = render_primitive(&ShapeSpec::torus(96, [48.0, 48.0], 26.0, 12.0, [0.3, 0.0, 1.0])).unwrap();
        let sketch = extract_contours(&img).unwrap();
        // A solid 3×3 block would mean a stroke thicker than 2 px.
        for r in 1..95 {
            for c in 1..95 {
                let solid = (c - 1..=c + 1).all(|cc| (r - 1..=r + 1).all(|rr| sketch.is_stroke(cc, rr)));
                assert!(!solid, "thick stroke around ({c},{r})");
            }
        }
    }
}
