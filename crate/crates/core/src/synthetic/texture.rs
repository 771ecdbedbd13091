//! Procedural seabed texture: a sum of compactly supported smooth bumps on a
//! jittered grid, plus colored circular markers.

use nalgebra::Vector3;

/// Fine and coarse bump octaves: (cell size multiplier, amplitude).
const OCTAVES: [(f64, f64); 2] = [(1.0, 70.0), (3.0, 40.0)];
const BASE_GRAY: f64 = 128.0;
/// Bump support radius relative to the cell size (must stay <= 1).
const SUPPORT: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub seed: u64,
    /// Fine-octave bumps per square meter.
    pub blob_density: f64,
    /// Per-channel multiplier applied to the gray level.
    pub tint: [f64; 3],
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            blob_density: 1600.0,
            tint: [0.86, 0.97, 1.0],
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    amplitude: f64,
}

/// Deterministic, unbounded gray-level field over surface coordinates
/// (meters).
#[derive(Debug, Clone)]
pub struct TextureField {
    spec: TextureSpec,
    cell: f64,
}

impl TextureField {
    pub fn new(spec: TextureSpec) -> Self {
        let density = spec.blob_density.max(1e-6);
        Self {
            spec,
            cell: 1.0 / density.sqrt(),
        }
    }

    pub fn spec(&self) -> &TextureSpec {
        &self.spec
    }

    fn blob(&self, octave: usize, i: i64, j: i64) -> Blob {
        let (mult, amp) = OCTAVES[octave];
        let s = self.cell * mult;
        let mut h = splitmix(self.spec.seed ^ (octave as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        h = splitmix(h ^ (i as u64));
        h = splitmix(h ^ (j as u64).rotate_left(32));
        let jx = unit(h);
        let jy = unit(splitmix(h ^ 1));
        let a = unit(splitmix(h ^ 2)) * 2.0 - 1.0;
        Blob {
            x: (i as f64 + jx) * s,
            y: (j as f64 + jy) * s,
            amplitude: a * amp,
        }
    }

    /// Gray level in `[0, 255]` (unquantized).
    pub fn gray(&self, x: f64, y: f64) -> f64 {
        let mut value = BASE_GRAY;
        for octave in 0..OCTAVES.len() {
            let s = self.cell * OCTAVES[octave].0;
            let r = SUPPORT * s;
            let inv_r2 = 1.0 / (r * r);
            let ci = (x / s).floor() as i64;
            let cj = (y / s).floor() as i64;
            for i in ci - 1..=ci + 1 {
                for j in cj - 1..=cj + 1 {
                    let b = self.blob(octave, i, j);
                    value += bump(x - b.x, y - b.y, inv_r2) * b.amplitude;
                }
            }
        }
        value.clamp(0.0, 255.0)
    }

    /// Precomputes the bumps touching `[x0, x1] x [y0, y1]` for fast
    /// repeated evaluation.
    pub fn cache(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> TextureCache<'_> {
        let octaves = (0..OCTAVES.len())
            .map(|o| {
                let s = self.cell * OCTAVES[o].0;
                let i0 = (x0 / s).floor() as i64 - 1;
                let j0 = (y0 / s).floor() as i64 - 1;
                let ni = ((x1 / s).floor() as i64 + 1 - i0 + 1).max(1) as usize;
                let nj = ((y1 / s).floor() as i64 + 1 - j0 + 1).max(1) as usize;
                let mut blobs = Vec::with_capacity(ni * nj);
                for a in 0..nj {
                    for b in 0..ni {
                        blobs.push(self.blob(o, i0 + b as i64, j0 + a as i64));
                    }
                }
                OctaveCache {
                    cell: s,
                    inv_r2: 1.0 / (SUPPORT * s * SUPPORT * s),
                    i0,
                    j0,
                    ni,
                    nj,
                    blobs,
                }
            })
            .collect();
        TextureCache {
            field: self,
            octaves,
        }
    }

    pub fn color(&self, gray: f64) -> [f64; 3] {
        let t = self.spec.tint;
        [gray * t[0], gray * t[1], gray * t[2]]
    }
}

#[inline]
fn bump(dx: f64, dy: f64, inv_r2: f64) -> f64 {
    let q = (dx * dx + dy * dy) * inv_r2;
    if q >= 1.0 {
        0.0
    } else {
        let w = 1.0 - q;
        w * w * w
    }
}

struct OctaveCache {
    cell: f64,
    inv_r2: f64,
    i0: i64,
    j0: i64,
    ni: usize,
    nj: usize,
    blobs: Vec<Blob>,
}

pub struct TextureCache<'a> {
    field: &'a TextureField,
    octaves: Vec<OctaveCache>,
}

impl TextureCache<'_> {
    pub fn gray(&self, x: f64, y: f64) -> f64 {
        let mut value = BASE_GRAY;
        for (o, oc) in self.octaves.iter().enumerate() {
            let ci = (x / oc.cell).floor() as i64 - oc.i0;
            let cj = (y / oc.cell).floor() as i64 - oc.j0;
            if ci < 1 || cj < 1 || ci + 1 >= oc.ni as i64 || cj + 1 >= oc.nj as i64 {
                return self.slow(o, value, x, y);
            }
            for j in cj - 1..=cj + 1 {
                let row = j as usize * oc.ni;
                for i in ci - 1..=ci + 1 {
                    let b = oc.blobs[row + i as usize];
                    value += bump(x - b.x, y - b.y, oc.inv_r2) * b.amplitude;
                }
            }
        }
        value.clamp(0.0, 255.0)
    }

    /// Finishes the evaluation from `octave` onward without the cache.
    fn slow(&self, octave: usize, partial: f64, x: f64, y: f64) -> f64 {
        let f = self.field;
        let mut value = partial;
        for o in octave..OCTAVES.len() {
            let s = f.cell * OCTAVES[o].0;
            let r = SUPPORT * s;
            let inv_r2 = 1.0 / (r * r);
            let ci = (x / s).floor() as i64;
            let cj = (y / s).floor() as i64;
            for i in ci - 1..=ci + 1 {
                for j in cj - 1..=cj + 1 {
                    let b = f.blob(o, i, j);
                    value += bump(x - b.x, y - b.y, inv_r2) * b.amplitude;
                }
            }
        }
        value.clamp(0.0, 255.0)
    }
}

/// Number of distinct marker hues.
pub const MARKER_HUES: usize = 12;

/// Colored disc painted on the terrain; identified by its hue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub id: usize,
    /// World position of the disc center (on the terrain surface).
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl Marker {
    pub fn hue_degrees(&self) -> f64 {
        (self.id % MARKER_HUES) as f64 * (360.0 / MARKER_HUES as f64)
    }

    pub fn color(&self) -> [f64; 3] {
        hsv_to_rgb(self.hue_degrees(), 1.0, 230.0)
    }

    /// Opacity at surface coordinates `(x, y)`, with a soft rim.
    pub fn coverage(&self, x: f64, y: f64) -> f64 {
        let r = ((x - self.center.x).powi(2) + (y - self.center.y).powi(2)).sqrt();
        let rim = 0.15 * self.radius;
        ((self.radius - r) / rim + 0.5).clamp(0.0, 1.0)
    }
}

pub fn hsv_to_rgb(hue: f64, saturation: f64, value: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = value * saturation;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = value - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Hue index of a saturated marker color, `None` for (tinted) gray texture.
pub fn classify_marker_hue(rgb: [u8; 3]) -> Option<usize> {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma < 90.0 {
        return None;
    }
    let h = if max == r {
        60.0 * ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / chroma + 2.0)
    } else {
        60.0 * ((r - g) / chroma + 4.0)
    };
    let step = 360.0 / MARKER_HUES as f64;
    let idx = (h / step).round() as usize % MARKER_HUES;
    let diff = (h - idx as f64 * step).abs();
    let diff = diff.min(360.0 - diff);
    (diff < step * 0.4).then_some(idx)
}
