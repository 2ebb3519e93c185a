//! Procedural face-like images with exact ground-truth masks.
//!
//! Geometry lives in normalized canvas coordinates: `x` runs left to right and
//! `y` top to bottom over `[0, 1]`, and pixel `(row, col)` of an `n × n`
//! raster has its center at `((col + 0.5) / n, (row + 0.5) / n)`. The face is
//! a rotated ellipse; eyes and mouth are drawn in the ellipse's own frame.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{FaceMask, ImageTensor};

/// Smallest raster side `render` accepts.
pub const MIN_RESOLUTION: usize = 16;

/// Margin kept between the face and the canvas border, in normalized units.
/// Two pixels at the minimum resolution, hence at least two at any larger one.
pub const MARGIN: f64 = 2.0 / MIN_RESOLUTION as f64;

/// Bumped whenever the same seed would render different pixels.
pub const GENERATOR_VERSION: u32 = 1;

const MAX_TILT_DEG: f64 = 25.0;
const SUPERSAMPLE: usize = 4;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Semi-axis across the face, before rotation.
    pub half_width: f64,
    /// Semi-axis along the face, before rotation.
    pub half_height: f64,
    /// Clockwise tilt in radians.
    pub rotation: f64,
}

impl Ellipse {
    /// Maps a canvas point into the face frame `(u, v)`, where `u` points to
    /// the face's right and `v` toward its chin.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = libm::sincos(self.rotation);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.to_local(x, y);
        let (p, q) = (u / self.half_width, v / self.half_height);
        p * p + q * q <= 1.0
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn extents(&self) -> (f64, f64) {
        let (s, c) = libm::sincos(self.rotation);
        let (a, b) = (self.half_width, self.half_height);
        (libm::sqrt(a * a * c * c + b * b * s * s), libm::sqrt(a * a * s * s + b * b * c * c))
    }

    pub fn area(&self) -> f64 {
        core::f64::consts::PI * self.half_width * self.half_height
    }
}

/// A disc in the face frame; coordinates are fractions of the face semi-axes
/// and the radius is a fraction of the half width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eye {
    pub u: f64,
    pub v: f64,
    pub radius: f64,
}

/// A parabolic stroke in the face frame, in fractions of the semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mouth {
    pub v: f64,
    pub half_width: f64,
    /// Downward bow at the middle relative to the corners; negative frowns.
    pub smile: f64,
    pub thickness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Solid(Rgb),
    Gradient {
        from: Rgb,
        to: Rgb,
        angle: f64,
    },
    /// Smooth value noise around `base` plus random clutter shapes, all
    /// derived from `seed`.
    Textured {
        base: Rgb,
        amplitude: f64,
        cells: usize,
        clutter: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSpec {
    pub skin: Rgb,
    pub face: Ellipse,
    pub eyes: [Eye; 2],
    pub eye_color: Rgb,
    pub mouth: Mouth,
    pub mouth_color: Rgb,
    pub background: Background,
    pub seed: u64,
}

impl FaceSpec {
    pub fn face_colors(&self) -> [Rgb; 3] {
        [self.skin, self.eye_color, self.mouth_color]
    }

    fn feature_color(&self, x: f64, y: f64) -> Option<Rgb> {
        let f = &self.face;
        if !f.contains(x, y) {
            return None;
        }
        let (u, v) = f.to_local(x, y);
        let (p, q) = (u / f.half_width, v / f.half_height);
        for eye in &self.eyes {
            let (du, dv) = ((u - eye.u * f.half_width), (v - eye.v * f.half_height));
            let r = eye.radius * f.half_width;
            if du * du + dv * dv <= r * r {
                return Some(self.eye_color);
            }
        }
        let m = &self.mouth;
        if libm::fabs(p) <= m.half_width {
            let t = p / m.half_width;
            let centre = m.v + m.smile * (1.0 - t * t);
            if libm::fabs(q - centre) <= 0.5 * m.thickness {
                return Some(self.mouth_color);
            }
        }
        Some(self.skin)
    }
}

/// Draws a face description from `seed`.
pub fn sample_spec(seed: u64) -> FaceSpec {
    dataset_spec(seed, 0)
}

/// The description of image `index` in a dataset generated from `seed`. Each
/// index reads its own ChaCha stream, so images are independent of `n`.
pub fn dataset_spec(seed: u64, index: u64) -> FaceSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    sample_from(&mut rng)
}

fn sample_from(rng: &mut ChaCha8Rng) -> FaceSpec {
    let half_height = rng.gen_range(0.28..0.36);
    let half_width = half_height * rng.gen_range(0.75..0.92);
    let rotation = rng.gen_range(-MAX_TILT_DEG..=MAX_TILT_DEG).to_radians();
    let mut face = Ellipse { center: [0.5, 0.5], half_width, half_height, rotation };
    let (ex, ey) = face.extents();
    let center = |rng: &mut ChaCha8Rng, e: f64| {
        let (lo, hi) = (MARGIN + e, 1.0 - MARGIN - e);
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            0.5
        }
    };
    face.center = [center(rng, ex), center(rng, ey)];

    let tone: f64 = rng.gen();
    let skin = jitter(rng, lerp([0.36, 0.23, 0.16], [0.96, 0.83, 0.71], tone), 0.04);
    let eye_u = rng.gen_range(0.30..0.45);
    let eye_v = -rng.gen_range(0.15..0.35);
    let eye_r = rng.gen_range(0.08..0.14);
    let eye_tilt = rng.gen_range(-0.03..0.03);
    let eyes =
        [Eye { u: -eye_u, v: eye_v + eye_tilt, radius: eye_r }, Eye { u: eye_u, v: eye_v - eye_tilt, radius: eye_r }];
    let eye_color = random_color(rng, 0.0, 0.35);
    let mouth = Mouth {
        v: rng.gen_range(0.35..0.55),
        half_width: rng.gen_range(0.25..0.45),
        smile: rng.gen_range(-0.15..0.15),
        thickness: rng.gen_range(0.05..0.09),
    };
    let mouth_color = jitter(rng, [0.62, 0.16, 0.20], 0.08);

    let mut spec = FaceSpec {
        skin,
        face,
        eyes,
        eye_color,
        mouth,
        mouth_color,
        background: Background::Solid([0.0; 3]),
        seed: rng.gen(),
    };
    spec.background = match rng.gen_range(0..3) {
        0 => {
            // Keep solid backgrounds visibly apart from every face color.
            let mut color = random_color(rng, 0.0, 1.0);
            while spec.face_colors().iter().any(|c| chebyshev(*c, color) < 0.2) {
                color = random_color(rng, 0.0, 1.0);
            }
            Background::Solid(color)
        }
        1 => Background::Gradient {
            from: random_color(rng, 0.0, 1.0),
            to: random_color(rng, 0.0, 1.0),
            angle: rng.gen_range(0.0..core::f64::consts::TAU),
        },
        _ => Background::Textured {
            base: random_color(rng, 0.15, 0.85),
            amplitude: rng.gen_range(0.15..0.35),
            cells: rng.gen_range(3..=8),
            clutter: rng.gen_range(3..=8),
            seed: rng.gen(),
        },
    };
    spec
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    core::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

fn jitter(rng: &mut ChaCha8Rng, c: Rgb, amount: f64) -> Rgb {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Rgb {
    core::array::from_fn(|_| rng.gen_range(lo..=hi))
}

fn chebyshev(a: Rgb, b: Rgb) -> f64 {
    (0..3).map(|i| libm::fabs(a[i] - b[i])).fold(0.0, f64::max)
}

enum Clutter {
    Disc { x: f64, y: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

/// Per-pixel background color, constant over each pixel's footprint.
struct BackgroundRaster {
    data: Vec<Rgb>,
    n: usize,
}

impl BackgroundRaster {
    fn new(bg: &Background, n: usize) -> Self {
        let centre = |i: usize| (i as f64 + 0.5) / n as f64;
        let mut data = Vec::with_capacity(n * n);
        match *bg {
            Background::Solid(c) => data.resize(n * n, c),
            Background::Gradient { from, to, angle } => {
                let (s, c) = libm::sincos(angle);
                // Project onto the direction and rescale so the canvas spans [0, 1].
                let span = libm::fabs(c) + libm::fabs(s);
                for r in 0..n {
                    for col in 0..n {
                        let t = ((centre(col) - 0.5) * c + (centre(r) - 0.5) * s) / span + 0.5;
                        data.push(lerp(from, to, t));
                    }
                }
            }
            Background::Textured { base, amplitude, cells, clutter, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = cells + 1;
                let grid: Vec<Rgb> = (0..g * g).map(|_| random_color(&mut rng, -1.0, 1.0)).collect();
                let shapes: Vec<(Clutter, Rgb)> = (0..clutter)
                    .map(|_| {
                        let x = rng.gen_range(0.0..1.0);
                        let y = rng.gen_range(0.0..1.0);
                        let shape = if rng.gen_bool(0.5) {
                            Clutter::Disc { x, y, r: rng.gen_range(0.03..0.12) }
                        } else {
                            let (w, h) = (rng.gen_range(0.04..0.25), rng.gen_range(0.04..0.25));
                            Clutter::Rect { x0: x, y0: y, x1: x + w, y1: y + h }
                        };
                        (shape, random_color(&mut rng, 0.0, 1.0))
                    })
                    .collect();
                for r in 0..n {
                    for col in 0..n {
                        let (x, y) = (centre(col), centre(r));
                        let noise = value_noise(&grid, cells, x, y);
                        let mut px = core::array::from_fn(|i| base[i] + amplitude * noise[i]);
                        for (shape, color) in &shapes {
                            let hit = match *shape {
                                Clutter::Disc { x: cx, y: cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
                                Clutter::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
                            };
                            if hit {
                                px = *color;
                            }
                        }
                        data.push(px);
                    }
                }
            }
        }
        for px in &mut data {
            *px = px.map(|v| v.clamp(0.0, 1.0));
        }
        Self { data, n }
    }

    fn at(&self, r: usize, c: usize) -> Rgb {
        self.data[r * self.n + c]
    }
}

/// Bilinear value noise on a `cells × cells` lattice with smoothstep easing.
fn value_noise(grid: &[Rgb], cells: usize, x: f64, y: f64) -> Rgb {
    let (gx, gy) = (x * cells as f64, y * cells as f64);
    let (ix, iy) = ((gx as usize).min(cells - 1), (gy as usize).min(cells - 1));
    let ease = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (ease(gx - ix as f64), ease(gy - iy as f64));
    let g = cells + 1;
    let at = |i: usize, j: usize| grid[j * g + i];
    let top = lerp(at(ix, iy), at(ix + 1, iy), tx);
    let bottom = lerp(at(ix, iy + 1), at(ix + 1, iy + 1), tx);
    lerp(top, bottom, ty)
}

/// Rasterizes `spec` at `resolution × resolution`.
///
/// The mask is 1 exactly where the face ellipse covers the pixel center. Face
/// pixels are anti-aliased with a 4×4 supersample against the background;
/// pixels outside the mask carry the pure background, so compositing any
/// prediction with this image and mask restores the background exactly.
pub fn render(spec: &FaceSpec, resolution: usize) -> Result<(ImageTensor<f64>, FaceMask<f64>)> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::ImageTooSmall { context: "synthface::render", min: MIN_RESOLUTION, found: resolution });
    }
    let n = resolution as f64;
    let bg = BackgroundRaster::new(&spec.background, resolution);
    let mask = FaceMask::from_fn(resolution, resolution, |r, c| {
        spec.face.contains((c as f64 + 0.5) / n, (r as f64 + 0.5) / n)
    });
    let mut image = ImageTensor::zeros(resolution, resolution, 3);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for r in 0..resolution {
        for c in 0..resolution {
            let back = bg.at(r, c);
            let px = if mask.at(r, c) {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / n;
                        let y = (r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / n;
                        let color = spec.feature_color(x, y).unwrap_or(back);
                        for i in 0..3 {
                            acc[i] += color[i];
                        }
                    }
                }
                acc.map(|v| (v * inv).clamp(0.0, 1.0))
            } else {
                back
            };
            for (ch, v) in px.into_iter().enumerate() {
                image.set(r, c, ch, v);
            }
        }
    }
    Ok((image, mask))
}

/// Splits `n` items into consecutive train/validation/test blocks whose sizes
/// follow `fractions` (largest-remainder rounding, ties to the earlier split).
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || libm::fabs(total - 1.0) > 1e-6 {
        return Err(Error::InvalidArgument(alloc::format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| libm::floor(e + 1e-9) as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut left = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}
