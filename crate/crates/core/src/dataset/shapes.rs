//! Analytic primitives rendered as orthographic normal maps.

use std::fmt;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{decode_component, encode_component, is_foreground, NormalMapImage};
use crate::seed;

pub const MIN_IMAGE_SIZE: u32 = 64;
pub const FRAME_MARGIN: u32 = 2;

/// A ball in pixel space: `(col, row, depth)` centre plus radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ball {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShapeKind {
    Sphere { radius: f64 },
    /// `axis` is the unit symmetry axis; `(0, 0, 1)` looks straight down the hole.
    Torus { major: f64, minor: f64, axis: [f64; 3] },
    Capsule { half_length: f64, radius: f64, axis: [f64; 3] },
    /// Balls carry absolute pixel positions; `center` of the spec is ignored.
    SphereUnion { balls: Vec<Ball> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// `(col, row)` of the shape centre.
    pub center: [f64; 2],
    pub size: u32,
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    scale3(v, 1.0 / norm3(v))
}

/// Pixel `(col, row, depth)` to the y-up world frame.
fn world(p: [f64; 3]) -> [f64; 3] {
    [p[0], -p[1], p[2]]
}

/// Frontmost hit of a ray along −z through `(x, y)` on a ball.
fn ball_hit(center: [f64; 3], radius: f64, x: f64, y: f64) -> Option<(f64, [f64; 3])> {
    let (dx, dy) = (x - center[0], y - center[1]);
    let rem = radius * radius - dx * dx - dy * dy;
    if rem < 0.0 {
        return None;
    }
    let dz = rem.sqrt();
    Some((center[2] + dz, [dx / radius, dy / radius, dz / radius]))
}

impl ShapeSpec {
    pub fn sphere(size: u32, center: [f64; 2], radius: f64) -> Self {
        Self {
            kind: ShapeKind::Sphere { radius },
            center,
            size,
        }
    }

    pub fn torus(size: u32, center: [f64; 2], major: f64, minor: f64, axis: [f64; 3]) -> Self {
        Self {
            kind: ShapeKind::Torus { major, minor, axis },
            center,
            size,
        }
    }

    pub fn capsule(size: u32, center: [f64; 2], half_length: f64, radius: f64, axis: [f64; 3]) -> Self {
        Self {
            kind: ShapeKind::Capsule {
                half_length,
                radius,
                axis,
            },
            center,
            size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_IMAGE_SIZE {
            return Err(Error::InvalidShape(format!(
                "image size {} is below the minimum of {MIN_IMAGE_SIZE}",
                self.size
            )));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidShape(format!("{name} must be positive, got {v}")))
            }
        };
        let axis_ok = |a: [f64; 3]| {
            let n = norm3(a);
            if n.is_finite() && n > 1e-9 {
                Ok(())
            } else {
                Err(Error::InvalidShape("axis must be a nonzero vector".into()))
            }
        };
        match &self.kind {
            ShapeKind::Sphere { radius } => positive("radius", *radius),
            ShapeKind::Torus { major, minor, axis } => {
                positive("major radius", *major)?;
                positive("minor radius", *minor)?;
                axis_ok(*axis)
            }
            ShapeKind::Capsule {
                half_length,
                radius,
                axis,
            } => {
                positive("half length", *half_length)?;
                positive("radius", *radius)?;
                axis_ok(*axis)
            }
            ShapeKind::SphereUnion { balls } => {
                if balls.is_empty() {
                    return Err(Error::InvalidShape("union needs at least one ball".into()));
                }
                balls.iter().try_for_each(|b| positive("ball radius", b.radius))
            }
        }
    }

    /// Frontmost surface depth and unit normal at world `(x, y)`.
    pub fn hit(&self, x: f64, y: f64) -> Option<(f64, [f64; 3])> {
        let c = world([self.center[0], self.center[1], 0.0]);
        match &self.kind {
            ShapeKind::Sphere { radius } => ball_hit(c, *radius, x, y),
            ShapeKind::SphereUnion { balls } => balls
                .iter()
                .filter_map(|b| ball_hit(world(b.center), b.radius, x, y))
                .max_by(|a, b| a.0.total_cmp(&b.0)),
            ShapeKind::Capsule {
                half_length,
                radius,
                axis,
            } => capsule_hit(c, *half_length, *radius, world(unit(*axis)), x, y),
            ShapeKind::Torus { major, minor, axis } => {
                torus_hit(c, *major, *minor, world(unit(*axis)), x, y)
            }
        }
    }
}

fn capsule_hit(c: [f64; 3], half: f64, r: f64, u: [f64; 3], x: f64, y: f64) -> Option<(f64, [f64; 3])> {
    let mut best = [
        ball_hit([c[0] + u[0] * half, c[1] + u[1] * half, c[2] + u[2] * half], r, x, y),
        ball_hit([c[0] - u[0] * half, c[1] - u[1] * half, c[2] - u[2] * half], r, x, y),
    ]
    .into_iter()
    .flatten()
    .max_by(|a, b| a.0.total_cmp(&b.0));

    // Body: |perp(q0 + z·ẑ)|² = r², a quadratic in z.
    let q0 = [x - c[0], y - c[1], -c[2]];
    let b0 = sub3(q0, scale3(u, dot3(q0, u)));
    let a = sub3([0.0, 0.0, 1.0], scale3(u, u[2]));
    let qa = dot3(a, a);
    if qa > 1e-12 {
        let qb = 2.0 * dot3(b0, a);
        let qc = dot3(b0, b0) - r * r;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let z = (-qb + disc.sqrt()) / (2.0 * qa);
            let q = [q0[0], q0[1], q0[2] + z];
            let t = dot3(q, u);
            if t.abs() <= half && best.map_or(true, |(bz, _)| z > bz) {
                let perp = sub3(q, scale3(u, t));
                best = Some((z, unit(perp)));
            }
        }
    }
    best
}

fn torus_hit(c: [f64; 3], big_r: f64, a: f64, u: [f64; 3], x: f64, y: f64) -> Option<(f64, [f64; 3])> {
    let implicit = |z: f64| {
        let q = [x - c[0], y - c[1], z - c[2]];
        let h = dot3(q, u);
        let radial = sub3(q, scale3(u, h));
        let rho = norm3(radial);
        (rho - big_r).powi(2) + h * h - a * a
    };
    let reach = big_r + a + 1.0;
    // Quick reject on the bounding sphere.
    if (x - c[0]).powi(2) + (y - c[1]).powi(2) > reach * reach {
        return None;
    }
    let step = a / 64.0;
    let mut z_prev = c[2] + reach;
    let mut f_prev = implicit(z_prev);
    let mut z = z_prev;
    while z > c[2] - reach {
        z -= step;
        let f = implicit(z);
        if f <= 0.0 && f_prev > 0.0 {
            let (mut hi, mut lo) = (z_prev, z);
            for _ in 0..60 {
                let mid = 0.5 * (hi + lo);
                if implicit(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let zh = 0.5 * (hi + lo);
            let q = [x - c[0], y - c[1], zh - c[2]];
            let h = dot3(q, u);
            let radial = sub3(q, scale3(u, h));
            let rho = norm3(radial);
            let ring = if rho > 1e-12 {
                scale3(radial, big_r / rho)
            } else {
                [0.0; 3]
            };
            return Some((zh, unit(sub3(q, ring))));
        }
        z_prev = z;
        f_prev = f;
    }
    None
}

/// Encodes a foreground normal, keeping it distinguishable from background.
///
/// Normals within byte tolerance of `(0, 0, 1)` would decode as background;
/// their dominant tangential byte is moved to the nearest value outside the
/// tolerance (129 or 126).
pub fn encode_foreground(n: [f64; 3]) -> [u8; 3] {
    let mut bytes = n.map(encode_component);
    if !is_foreground(bytes.map(decode_component)) {
        let i = if n[1].abs() > n[0].abs() { 1 } else { 0 };
        bytes[i] = if n[i] >= 0.0 { 129 } else { 126 };
    }
    bytes
}

/// Renders the spec as a byte normal map; background is the encoded sentinel.
pub fn render_primitive(spec: &ShapeSpec) -> Result<NormalMapImage> {
    spec.validate()?;
    let size = spec.size;
    let mut img = NormalMapImage::flat(size, size).into_rgb();
    let mut any = false;
    for row in 0..size {
        for col in 0..size {
            let Some((_, n)) = spec.hit(col as f64, -(row as f64)) else {
                continue;
            };
            let inside = |v: u32| (FRAME_MARGIN..size - FRAME_MARGIN).contains(&v);
            if !inside(col) || !inside(row) {
                return Err(Error::OutOfFrame { size });
            }
            any = true;
            img.put_pixel(col, row, Rgb(encode_foreground(n)));
        }
    }
    if !any {
        return Err(Error::InvalidShape("shape covers no pixel centre".into()));
    }
    Ok(NormalMapImage::new(img))
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [cx, cy] = self.center;
        match &self.kind {
            ShapeKind::Sphere { radius } => {
                write!(f, "sphere size={} cx={cx} cy={cy} r={radius}", self.size)
            }
            ShapeKind::Torus { major, minor, axis } => write!(
                f,
                "torus size={} cx={cx} cy={cy} major={major} minor={minor} axis={}",
                self.size,
                fmt_vec(axis)
            ),
            ShapeKind::Capsule {
                half_length,
                radius,
                axis,
            } => write!(
                f,
                "capsule size={} cx={cx} cy={cy} half={half_length} r={radius} axis={}",
                self.size,
                fmt_vec(axis)
            ),
            ShapeKind::SphereUnion { balls } => {
                let list: Vec<String> = balls
                    .iter()
                    .map(|b| fmt_vec(&[b.center[0], b.center[1], b.center[2], b.radius]))
                    .collect();
                write!(f, "union size={} cx={cx} cy={cy} balls={}", self.size, list.join(";"))
            }
        }
    }
}

fn parse_floats(v: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let parts: std::result::Result<Vec<f64>, _> = v.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let parts = parts.map_err(|e| format!("`{v}`: {e}"))?;
    if parts.len() != n {
        return Err(format!("`{v}`: expected {n} comma-separated numbers"));
    }
    Ok(parts)
}

fn parse_line(line: &str, default_size: u32) -> std::result::Result<ShapeSpec, String> {
    let mut words = line.split_whitespace();
    let kind = words.next().ok_or("empty line")?;
    let mut fields = std::collections::BTreeMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| format!("expected key=value, got `{w}`"))?;
        fields.insert(k, v);
    }
    let num = |k: &str| -> std::result::Result<f64, String> {
        fields
            .get(k)
            .ok_or_else(|| format!("missing `{k}`"))?
            .parse::<f64>()
            .map_err(|e| format!("`{k}`: {e}"))
    };
    let axis = |default: [f64; 3]| -> std::result::Result<[f64; 3], String> {
        match fields.get("axis") {
            None => Ok(default),
            Some(v) => {
                let p = parse_floats(v, 3)?;
                Ok([p[0], p[1], p[2]])
            }
        }
    };
    let size = match fields.get("size") {
        Some(v) => v.parse::<u32>().map_err(|e| format!("`size`: {e}"))?,
        None => default_size,
    };
    let center = || -> std::result::Result<[f64; 2], String> { Ok([num("cx")?, num("cy")?]) };
    let kind = match kind {
        "sphere" => ShapeKind::Sphere { radius: num("r")? },
        "torus" => ShapeKind::Torus {
            major: num("major")?,
            minor: num("minor")?,
            axis: axis([0.0, 0.0, 1.0])?,
        },
        "capsule" => ShapeKind::Capsule {
            half_length: num("half")?,
            radius: num("r")?,
            axis: axis([1.0, 0.0, 0.0])?,
        },
        "union" => {
            let list = fields.get("balls").ok_or("missing `balls`")?;
            let balls = list
                .split(';')
                .map(|b| {
                    let p = parse_floats(b, 4)?;
                    Ok(Ball {
                        center: [p[0], p[1], p[2]],
                        radius: p[3],
                    })
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            let center = match (fields.get("cx"), fields.get("cy")) {
                (None, None) => [size as f64 / 2.0; 2],
                _ => center()?,
            };
            return Ok(ShapeSpec {
                kind: ShapeKind::SphereUnion { balls },
                center,
                size,
            });
        }
        other => return Err(format!("unknown shape kind `{other}`")),
    };
    Ok(ShapeSpec {
        kind,
        center: center()?,
        size,
    })
}

/// Parses one shape per line (`#` comments allowed), e.g.
/// `torus cx=32 cy=32 major=16 minor=7 axis=0,0,1`.
pub fn parse_specs(text: &str, default_size: u32, origin: &Path) -> Result<Vec<ShapeSpec>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let spec = parse_line(line, default_size).map_err(|reason| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason,
        })?;
        out.push(spec);
    }
    Ok(out)
}

pub fn read_specs(path: &Path, default_size: u32) -> Result<Vec<ShapeSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_specs(&text, default_size, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveFamily {
    Sphere,
    Torus,
    Capsule,
    SphereUnion,
}

impl PrimitiveFamily {
    pub const ALL: [PrimitiveFamily; 4] = [
        PrimitiveFamily::Sphere,
        PrimitiveFamily::Torus,
        PrimitiveFamily::Capsule,
        PrimitiveFamily::SphereUnion,
    ];
}

/// Draws `count` specs cycling through `families`, all fitting the frame.
pub fn random_specs(count: usize, size: u32, seed: u64, families: &[PrimitiveFamily]) -> Vec<ShapeSpec> {
    assert!(!families.is_empty());
    let s = size as f64;
    (0..count)
        .map(|i| {
            let mut rng = seed::rng_for(seed, &[0x5EED, i as u64]);
            let family = families[i % families.len()];
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng| s / 2.0 + rng.gen_range(-0.06..0.06) * s;
            let center = [jitter(&mut rng), jitter(&mut rng)];
            match family {
                PrimitiveFamily::Sphere => ShapeSpec::sphere(size, center, rng.gen_range(0.2..0.36) * s),
                PrimitiveFamily::Torus => {
                    let major = rng.gen_range(0.2..0.24) * s;
                    let minor = rng.gen_range(0.09..0.13) * s;
                    let tilt: f64 = rng.gen_range(-0.35..0.35);
                    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let axis = [tilt.sin() * phi.cos(), tilt.sin() * phi.sin(), tilt.cos()];
                    ShapeSpec::torus(size, center, major, minor, axis)
                }
                PrimitiveFamily::Capsule => {
                    let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                    let lift: f64 = rng.gen_range(-0.4..0.4);
                    let axis = [phi.cos() * lift.cos(), phi.sin() * lift.cos(), lift.sin()];
                    ShapeSpec::capsule(size, center, rng.gen_range(0.12..0.2) * s, rng.gen_range(0.1..0.16) * s, axis)
                }
                PrimitiveFamily::SphereUnion => {
                    let n = rng.gen_range(2..=3);
                    let balls = (0..n)
                        .map(|_| Ball {
                            center: [
                                center[0] + rng.gen_range(-0.15..0.15) * s,
                                center[1] + rng.gen_range(-0.15..0.15) * s,
                                rng.gen_range(-0.1..0.1) * s,
                            ],
                            radius: rng.gen_range(0.12..0.2) * s,
                        })
                        .collect();
                    ShapeSpec {
                        kind: ShapeKind::SphereUnion { balls },
                        center,
                        size,
                    }
                }
            }
        })
        .collect()
}

/// Raw RGB access for callers that want to post-process renders.
pub fn render_rgb(spec: &ShapeSpec) -> Result<RgbImage> {
    render_primitive(spec).map(NormalMapImage::into_rgb)
}
