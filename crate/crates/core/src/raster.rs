//! Raster helpers: float luminance images, bilinear resampling and box
//! downscaling of RGB frames.

use image::RgbImage;

use crate::camera::PixelCoord;

/// Single-channel `f32` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Rec. 601 luma of an RGB frame.
    pub fn from_rgb(image: &RgbImage) -> Self {
        let (w, h) = image.dimensions();
        let data = image
            .pixels()
            .map(|p| 0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]))
            .collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Bilinear interpolation; `None` outside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let (x0, y0, fx, fy) = bilinear_support(self.width, self.height, u, v)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let a = f64::from(self.get(x0, y0));
        let b = f64::from(self.get(x1, y0));
        let c = f64::from(self.get(x0, y1));
        let d = f64::from(self.get(x1, y1));
        Some((a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy)
    }

    /// Catmull-Rom bicubic interpolation; needs a one pixel margin beyond the
    /// bilinear support.
    pub fn sample_bicubic(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 1.0 && v >= 1.0 && u < (self.width as f64) - 2.0 && v < (self.height as f64) - 2.0)
        {
            return None;
        }
        let xf = u.floor();
        let yf = v.floor();
        let (tx, ty) = (u - xf, v - yf);
        let (xi, yi) = (xf as usize, yf as usize);
        let wx = catmull_rom_weights(tx);
        let wy = catmull_rom_weights(ty);
        let mut acc = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let row = (yi + j - 1) * self.width;
            let mut r = 0.0;
            for (i, wxi) in wx.iter().enumerate() {
                r += wxi * f64::from(self.data[row + xi + i - 1]);
            }
            acc += wyj * r;
        }
        Some(acc)
    }

    /// Separable box blur with the given radius (edge-clamped).
    pub fn box_blur(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let norm = 1.0 / (2 * radius + 1) as f32;
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for x in 0..w {
                let mut s = 0.0;
                for k in 0..=2 * radius {
                    let xx = (x + k).saturating_sub(radius).min(w - 1);
                    s += row[xx];
                }
                tmp[y * w + x] = s * norm;
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for k in 0..=2 * radius {
                    let yy = (y + k).saturating_sub(radius).min(h - 1);
                    s += tmp[yy * w + x];
                }
                out[y * w + x] = s * norm;
            }
        }
        Self {
            width: w,
            height: h,
            data: out,
        }
    }
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

#[inline]
fn bilinear_support(width: usize, height: usize, u: f64, v: f64) -> Option<(usize, usize, f64, f64)> {
    if width == 0 || height == 0 {
        return None;
    }
    let max_u = (width - 1) as f64;
    let max_v = (height - 1) as f64;
    if !(u >= 0.0 && v >= 0.0 && u <= max_u && v <= max_v) {
        return None;
    }
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    Some((x0, y0, u - x0 as f64, v - y0 as f64))
}

/// Bilinear RGB sample at a raster coordinate; `None` when the 2x2 support
/// leaves the image.
pub fn sample_bilinear(image: &RgbImage, pixel: PixelCoord<f64>) -> Option<[f64; 3]> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (x0, y0, fx, fy) = bilinear_support(w, h, pixel.u, pixel.v)?;
    let x1 = (x0 + 1).min(w - 1) as u32;
    let y1 = (y0 + 1).min(h - 1) as u32;
    let (x0, y0) = (x0 as u32, y0 as u32);
    let a = image.get_pixel(x0, y0);
    let b = image.get_pixel(x1, y0);
    let c = image.get_pixel(x0, y1);
    let d = image.get_pixel(x1, y1);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let top = f64::from(a[k]) * (1.0 - fx) + f64::from(b[k]) * fx;
        let bottom = f64::from(c[k]) * (1.0 - fx) + f64::from(d[k]) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

pub fn to_rgb8(color: [f64; 3]) -> [u8; 3] {
    color.map(|c| c.round().clamp(0.0, 255.0) as u8)
}

/// Box-filter average over `divisor x divisor` blocks; dimensions are
/// floor-divided.
pub fn downscale(image: &RgbImage, divisor: u32) -> RgbImage {
    assert!(divisor >= 1, "divisor must be positive");
    if divisor == 1 {
        return image.clone();
    }
    let (w, h) = (image.width() / divisor, image.height() / divisor);
    let area = divisor * divisor;
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0u32; 3];
        for dy in 0..divisor {
            for dx in 0..divisor {
                let p = image.get_pixel(x * divisor + dx, y * divisor + dy);
                for k in 0..3 {
                    acc[k] += u32::from(p[k]);
                }
            }
        }
        image::Rgb(acc.map(|s| ((s + area / 2) / area) as u8))
    })
}
