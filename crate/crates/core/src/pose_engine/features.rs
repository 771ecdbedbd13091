//! Corner detection, patch matching and subpixel refinement.

use crate::raster::GrayImage;
use crate::PixelCoord;

use super::PoseError;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Maximum number of corners kept per image.
    pub max_corners: usize,
    /// Side of the square matching patch (odd).
    pub patch_size: usize,
    pub min_matches: usize,
    /// Minimum distance between retained corners, pixels.
    pub min_corner_distance: f64,
    /// Corners weaker than this fraction of the strongest in their bucket
    /// are dropped.
    pub quality_level: f64,
    /// Columns and rows of the bucket grid that spreads the corner budget
    /// over the image.
    pub buckets: [usize; 2],
    /// Minimum normalized cross-correlation for a match.
    pub min_score: f64,
    /// Search radius as a fraction of the larger image side.
    pub search_radius_fraction: f64,
    /// Subpixel refinement of matched positions.
    pub refine: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            max_corners: 800,
            patch_size: 11,
            min_matches: 30,
            min_corner_distance: 8.0,
            quality_level: 0.01,
            buckets: [8, 6],
            min_score: 0.8,
            search_radius_fraction: 0.4,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub response: f32,
}

impl Corner {
    pub fn pixel(&self) -> PixelCoord {
        PixelCoord::new(self.x as f64, self.y as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMatch {
    pub pixel_a: PixelCoord,
    pub pixel_b: PixelCoord,
    /// Normalized cross-correlation clamped to `[0, 1]`.
    pub score: f64,
    /// Corner indices in the two detections.
    pub index_a: usize,
    pub index_b: usize,
}

/// Minimum eigenvalue of the structure tensor over a 5x5 window.
pub fn corner_response(image: &GrayImage) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let mut ixx = GrayImage::new(w, h);
    let mut iyy = GrayImage::new(w, h);
    let mut ixy = GrayImage::new(w, h);
    if w < 3 || h < 3 {
        return ixx;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = 0.5 * (image.get(x + 1, y) - image.get(x - 1, y));
            let gy = 0.5 * (image.get(x, y + 1) - image.get(x, y - 1));
            ixx.set(x, y, gx * gx);
            iyy.set(x, y, gy * gy);
            ixy.set(x, y, gx * gy);
        }
    }
    let (sxx, syy, sxy) = (ixx.box_blur(2), iyy.box_blur(2), ixy.box_blur(2));
    GrayImage::from_fn(w, h, |x, y| {
        let a = sxx.get(x, y);
        let c = syy.get(x, y);
        let b = sxy.get(x, y);
        let tr = 0.5 * (a + c);
        let det = a * c - b * b;
        (tr - (tr * tr - det).max(0.0).sqrt()).max(0.0)
    })
}

/// Strongest well-separated local maxima of the corner response, away from
/// the border by `margin` pixels.
pub fn detect_corners(image: &GrayImage, config: &FeatureConfig, margin: usize) -> Vec<Corner> {
    let (w, h) = (image.width(), image.height());
    if w <= 2 * margin + 2 || h <= 2 * margin + 2 {
        return Vec::new();
    }
    let resp = corner_response(image);
    let max = resp.data().iter().copied().fold(0.0f32, f32::max);
    if !(max > 1e-6) {
        return Vec::new();
    }
    let [bx, by] = [config.buckets[0].max(1), config.buckets[1].max(1)];
    let bucket = |x: usize, y: usize| (y * by / h).min(by - 1) * bx + (x * bx / w).min(bx - 1);
    let mut bucket_max = vec![0.0f32; bx * by];
    for y in 0..h {
        for x in 0..w {
            let b = &mut bucket_max[bucket(x, y)];
            *b = b.max(resp.get(x, y));
        }
    }
    // Weak buckets still need some texture to contribute.
    let global_floor = max * (config.quality_level * config.quality_level) as f32;
    let floor: Vec<f32> = bucket_max
        .iter()
        .map(|m| (m * config.quality_level as f32).max(global_floor))
        .collect();
    let mut candidates = Vec::new();
    for y in margin.max(1)..h - margin.max(1) {
        for x in margin.max(1)..w - margin.max(1) {
            let r = resp.get(x, y);
            if r <= floor[bucket(x, y)] {
                continue;
            }
            let mut is_max = true;
            'n: for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = resp.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                    // Ties resolve toward the earlier raster position.
                    if n > r || (n == r && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                candidates.push(Corner { x, y, response: r });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    let cell = config.min_corner_distance.max(1.0);
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<(usize, usize)>> = vec![Vec::new(); gw * gh];
    let mut out = Vec::new();
    let d2 = config.min_corner_distance * config.min_corner_distance;
    let quota = config.max_corners.div_ceil(bx * by);
    let mut per_bucket = vec![0usize; bx * by];
    let mut taken = vec![false; candidates.len()];
    // First pass honors the per-bucket quota, the second spends what is left.
    for pass in 0..2 {
        for (k, c) in candidates.iter().enumerate() {
            if out.len() >= config.max_corners {
                break;
            }
            let b = bucket(c.x, c.y);
            if taken[k] || (pass == 0 && per_bucket[b] >= quota) {
                continue;
            }
            let gx = (c.x as f64 / cell) as usize;
            let gy = (c.y as f64 / cell) as usize;
            let mut free = true;
            'g: for yy in gy.saturating_sub(1)..=(gy + 1).min(gh - 1) {
                for xx in gx.saturating_sub(1)..=(gx + 1).min(gw - 1) {
                    for &(px, py) in &grid[yy * gw + xx] {
                        let dx = px as f64 - c.x as f64;
                        let dy = py as f64 - c.y as f64;
                        if dx * dx + dy * dy < d2 {
                            free = false;
                            break 'g;
                        }
                    }
                }
            }
            if free {
                grid[gy * gw + gx].push((c.x, c.y));
                per_bucket[b] += 1;
                taken[k] = true;
                out.push(*c);
            }
        }
    }
    out
}

/// Zero-mean, unit-norm patch, or `None` for flat patches.
fn normalized_patch(image: &GrayImage, x: usize, y: usize, half: usize) -> Option<Vec<f32>> {
    let mut p = Vec::with_capacity((2 * half + 1).pow(2));
    for yy in y - half..=y + half {
        for xx in x - half..=x + half {
            p.push(image.get(xx, yy));
        }
    }
    let mean = p.iter().sum::<f32>() / p.len() as f32;
    let mut norm = 0.0;
    for v in p.iter_mut() {
        *v -= mean;
        norm += *v * *v;
    }
    if norm < 1e-3 * p.len() as f32 {
        return None;
    }
    let inv = 1.0 / norm.sqrt();
    p.iter_mut().for_each(|v| *v *= inv);
    Some(p)
}

/// Detected corners of one image with their matching descriptors.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub corners: Vec<Corner>,
    patches: Vec<Option<Vec<f32>>>,
}

impl FeatureSet {
    pub fn detect(image: &GrayImage, config: &FeatureConfig) -> Self {
        let half = config.patch_size / 2;
        // Room for the patch plus the refinement window and bicubic support.
        let margin = half + 3;
        let corners = detect_corners(image, config, margin);
        let patches = corners
            .iter()
            .map(|c| normalized_patch(image, c.x, c.y, half))
            .collect();
        Self { corners, patches }
    }

    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }
}

fn best_matches(from: &FeatureSet, to: &FeatureSet, radius: f64) -> Vec<Option<(usize, f32)>> {
    let r2 = radius * radius;
    from.corners
        .iter()
        .zip(&from.patches)
        .map(|(ca, pa)| {
            let pa = pa.as_ref()?;
            let mut best: Option<(usize, f32)> = None;
            for (j, (cb, pb)) in to.corners.iter().zip(&to.patches).enumerate() {
                let dx = ca.x as f64 - cb.x as f64;
                let dy = ca.y as f64 - cb.y as f64;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let Some(pb) = pb else { continue };
                let s: f32 = pa.iter().zip(pb).map(|(a, b)| a * b).sum();
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((j, s));
                }
            }
            best
        })
        .collect()
}

/// Mutual-best NCC matching between two feature sets, sorted by descending
/// score. Positions are corner pixels (no refinement).
pub fn match_features(a: &FeatureSet, b: &FeatureSet, config: &FeatureConfig, image_size: (usize, usize)) -> Vec<FeatureMatch> {
    let radius = config.search_radius_fraction * image_size.0.max(image_size.1) as f64;
    let fwd = best_matches(a, b, radius);
    let bwd = best_matches(b, a, radius);
    let mut out: Vec<FeatureMatch> = fwd
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let (j, s) = (*m)?;
            let (back, _) = bwd[j]?;
            (back == i && f64::from(s) >= config.min_score).then(|| FeatureMatch {
                pixel_a: a.corners[i].pixel(),
                pixel_b: b.corners[j].pixel(),
                score: f64::from(s).clamp(0.0, 1.0),
                index_a: i,
                index_b: j,
            })
        })
        .collect();
    out.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then(x.index_a.cmp(&y.index_a))
    });
    out
}

/// Translation-only inverse-compositional Lucas-Kanade: finds the position in
/// `target` whose neighborhood matches the neighborhood of `template_center`
/// in `source`, starting from `initial`.
pub fn refine_translation(
    source: &GrayImage,
    template_center: PixelCoord,
    target: &GrayImage,
    initial: PixelCoord,
    half: usize,
) -> Option<PixelCoord> {
    let n = 2 * half + 1;
    let mut tmpl = Vec::with_capacity(n * n);
    let mut grad = Vec::with_capacity(n * n);
    let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            let x = template_center.u + i as f64 - half as f64;
            let y = template_center.v + j as f64 - half as f64;
            let t = source.sample_bicubic(x, y)?;
            let gx = 0.5 * (source.sample_bicubic(x + 1.0, y)? - source.sample_bicubic(x - 1.0, y)?);
            let gy = 0.5 * (source.sample_bicubic(x, y + 1.0)? - source.sample_bicubic(x, y - 1.0)?);
            tmpl.push(t);
            grad.push((gx, gy));
            h00 += gx * gx;
            h01 += gx * gy;
            h11 += gy * gy;
        }
    }
    let det = h00 * h11 - h01 * h01;
    if !(det > 1e-9 * (h00 + h11).powi(2)) || !(det > 0.0) {
        return None;
    }
    let (mut u, mut v) = (initial.u, initial.v);
    for _ in 0..30 {
        let (mut b0, mut b1) = (0.0, 0.0);
        for j in 0..n {
            for i in 0..n {
                let k = j * n + i;
                let x = u + i as f64 - half as f64;
                let y = v + j as f64 - half as f64;
                let e = target.sample_bicubic(x, y)? - tmpl[k];
                b0 += grad[k].0 * e;
                b1 += grad[k].1 * e;
            }
        }
        let du = (h11 * b0 - h01 * b1) / det;
        let dv = (h00 * b1 - h01 * b0) / det;
        u -= du;
        v -= dv;
        if (u - initial.u).abs() > 3.0 || (v - initial.v).abs() > 3.0 {
            return None;
        }
        if du * du + dv * dv < 1e-10 {
            break;
        }
    }
    Some(PixelCoord::new(u, v))
}

/// Detects, matches and (optionally) refines correspondences between two
/// images.
pub fn detect_and_match(a: &GrayImage, b: &GrayImage, config: &FeatureConfig) -> Result<Vec<FeatureMatch>, PoseError> {
    if a.is_empty() || b.is_empty() {
        return Err(PoseError::InvalidInput("empty image".into()));
    }
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(PoseError::InvalidInput("image sizes differ".into()));
    }
    let fa = FeatureSet::detect(a, config);
    let fb = FeatureSet::detect(b, config);
    let mut matches = match_features(&fa, &fb, config, (a.width(), a.height()));
    if config.refine {
        let half = config.patch_size / 2;
        matches.retain_mut(|m| match refine_translation(a, m.pixel_a, b, m.pixel_b, half) {
            Some(p) => {
                m.pixel_b = p;
                true
            }
            None => false,
        });
    }
    if matches.len() < config.min_matches {
        return Err(PoseError::TooFewMatches {
            found: matches.len(),
            required: config.min_matches,
        });
    }
    Ok(matches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(w: usize, h: usize, shift: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let xf = x as f64 + shift;
            let yf = y as f64;
            let v = 120.0
                + 50.0 * (xf * 0.21).sin() * (yf * 0.17).cos()
                + 35.0 * (xf * 0.07 + yf * 0.11).sin()
                + 20.0 * (xf * 0.37 - yf * 0.29).cos();
            v as f32
        })
    }

    #[test]
    fn identical_images_match_in_place() {
        let img = blobs(160, 120, 0.0);
        let m = detect_and_match(&img, &img, &FeatureConfig::default()).unwrap();
        assert!(m.len() >= 30);
        for x in &m {
            assert!(x.pixel_a.distance(&x.pixel_b) < 1e-6);
            assert!((x.score - 1.0).abs() < 1e-4);
        }
        assert!(m.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn subpixel_shift_is_recovered() {
        let a = blobs(200, 150, 0.0);
        let b = blobs(200, 150, -7.3);
        let m = detect_and_match(&a, &b, &FeatureConfig::default()).unwrap();
        let mut d: Vec<f64> = m.iter().map(|x| x.pixel_b.u - x.pixel_a.u).collect();
        d.sort_by(f64::total_cmp);
        let median = d[d.len() / 2];
        assert!((median - 7.3).abs() < 0.05, "{median}");
    }

    #[test]
    fn uniform_images_have_too_few_matches() {
        let img = GrayImage::from_fn(100, 80, |_, _| 90.0);
        assert!(matches!(
            detect_and_match(&img, &img, &FeatureConfig::default()),
            Err(PoseError::TooFewMatches { found: 0, .. })
        ));
    }

    #[test]
    fn corners_respect_spacing_and_budget() {
        let img = blobs(200, 150, 0.0);
        let cfg = FeatureConfig {
            max_corners: 40,
            ..FeatureConfig::default()
        };
        let c = detect_corners(&img, &cfg, 8);
        assert!(c.len() <= 40 && !c.is_empty());
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                let d = ((a.x as f64 - b.x as f64).powi(2) + (a.y as f64 - b.y as f64).powi(2)).sqrt();
                assert!(d >= cfg.min_corner_distance);
            }
        }
    }
}
