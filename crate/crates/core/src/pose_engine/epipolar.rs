//! Calibrated two-view geometry: minimal five-point essential matrix solver,
//! robust estimation and decomposition into a relative pose.
//!
//! Convention: `x2 = R * x1 + t` for the same point in the two camera frames,
//! so `E = [t]x R` and `x2^T E x1 = 0` for normalized homogeneous rays.

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::skew;

type Poly = [f64; 20];

/// Exponents `(x, y, z)` of the monomials: cubics, quadratics, linears, 1.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (2, 1, 0),
    (2, 0, 1),
    (1, 2, 0),
    (1, 1, 1),
    (1, 0, 2),
    (0, 3, 0),
    (0, 2, 1),
    (0, 1, 2),
    (0, 0, 3),
    (2, 0, 0),
    (1, 1, 0),
    (1, 0, 1),
    (0, 2, 0),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

fn monomial_index(e: (u8, u8, u8)) -> usize {
    MONOMIALS
        .iter()
        .position(|m| *m == e)
        .expect("degree at most three")
}

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = [0.0; 20];
    for (i, &ca) in a.iter().enumerate() {
        if ca == 0.0 {
            continue;
        }
        for (j, &cb) in b.iter().enumerate() {
            if cb == 0.0 {
                continue;
            }
            let (ea, eb) = (MONOMIALS[i], MONOMIALS[j]);
            out[monomial_index((ea.0 + eb.0, ea.1 + eb.1, ea.2 + eb.2))] += ca * cb;
        }
    }
    out
}

fn poly_add(a: &Poly, b: &Poly) -> Poly {
    std::array::from_fn(|i| a[i] + b[i])
}

fn poly_scale(a: &Poly, s: f64) -> Poly {
    a.map(|v| v * s)
}

/// Essential matrices consistent with five correspondences (up to ten).
pub fn five_point(x1: &[Vector3<f64>; 5], x2: &[Vector3<f64>; 5]) -> Vec<Matrix3<f64>> {
    // Epipolar constraint rows, E flattened row-major.
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for k in 0..5 {
        for i in 0..3 {
            for j in 0..3 {
                a[(k, 3 * i + j)] = x2[k][i] * x1[k][j];
            }
        }
    }
    let svd = a.svd(false, true);
    let Some(vt) = svd.v_t else { return Vec::new() };
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&p, &q| svd.singular_values[p].total_cmp(&svd.singular_values[q]));
    // Null space basis X, Y, Z, W (E = x X + y Y + z Z + W).
    let basis: Vec<SVector<f64, 9>> = order[..4].iter().map(|&r| vt.row(r).transpose()).collect();

    let mut e: [[Poly; 3]; 3] = [[[0.0; 20]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k = 3 * i + j;
            let mut p = [0.0; 20];
            p[monomial_index((1, 0, 0))] = basis[0][k];
            p[monomial_index((0, 1, 0))] = basis[1][k];
            p[monomial_index((0, 0, 1))] = basis[2][k];
            p[monomial_index((0, 0, 0))] = basis[3][k];
            e[i][j] = p;
        }
    }
    let mut eet: [[Poly; 3]; 3] = [[[0.0; 20]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = [0.0; 20];
            for k in 0..3 {
                acc = poly_add(&acc, &poly_mul(&e[i][k], &e[j][k]));
            }
            eet[i][j] = acc;
        }
    }
    let trace = poly_add(&poly_add(&eet[0][0], &eet[1][1]), &eet[2][2]);
    let mut rows: Vec<Poly> = Vec::with_capacity(10);
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = [0.0; 20];
            for k in 0..3 {
                acc = poly_add(&acc, &poly_mul(&eet[i][k], &e[k][j]));
            }
            rows.push(poly_add(&poly_scale(&acc, 2.0), &poly_scale(&poly_mul(&trace, &e[i][j]), -1.0)));
        }
    }
    let minor = |r1: usize, r2: usize, c1: usize, c2: usize| {
        poly_add(
            &poly_mul(&e[r1][c1], &e[r2][c2]),
            &poly_scale(&poly_mul(&e[r1][c2], &e[r2][c1]), -1.0),
        )
    };
    let det = poly_add(
        &poly_add(
            &poly_mul(&e[0][0], &minor(1, 2, 1, 2)),
            &poly_scale(&poly_mul(&e[0][1], &minor(1, 2, 0, 2)), -1.0),
        ),
        &poly_mul(&e[0][2], &minor(1, 2, 0, 1)),
    );
    rows.push(det);

    // Gauss-Jordan elimination of the ten cubic monomials.
    let mut m = SMatrix::<f64, 10, 20>::zeros();
    for (r, p) in rows.iter().enumerate() {
        for c in 0..20 {
            m[(r, c)] = p[c];
        }
    }
    for col in 0..10 {
        let (piv, val) = (col..10)
            .map(|r| (r, m[(r, col)].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("rows");
        if val < 1e-12 {
            return Vec::new();
        }
        m.swap_rows(col, piv);
        let p = m[(col, col)];
        for c in 0..20 {
            m[(col, c)] /= p;
        }
        for r in 0..10 {
            if r != col {
                let f = m[(r, col)];
                if f != 0.0 {
                    for c in 0..20 {
                        m[(r, c)] -= f * m[(col, c)];
                    }
                }
            }
        }
    }
    // Action matrix of multiplication by x on [x2, xy, xz, y2, yz, z2, x, y, z, 1].
    let mut action = SMatrix::<f64, 10, 10>::zeros();
    for r in 0..6 {
        for c in 0..10 {
            action[(r, c)] = -m[(r, 10 + c)];
        }
    }
    action[(6, 0)] = 1.0;
    action[(7, 1)] = 1.0;
    action[(8, 2)] = 1.0;
    action[(9, 6)] = 1.0;

    let mut out = Vec::new();
    for lambda in action.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-8 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let shifted = action - SMatrix::<f64, 10, 10>::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let Some(vt) = svd.v_t else { continue };
        let (imin, _) = svd.singular_values.argmin();
        let v = vt.row(imin);
        if v[9].abs() < 1e-12 {
            continue;
        }
        let (x, y, z) = (v[6] / v[9], v[7] / v[9], v[8] / v[9]);
        let flat = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
        let em = Matrix3::from_row_slice(flat.as_slice());
        let n = em.norm();
        if n > 0.0 && n.is_finite() {
            out.push(em / n);
        }
    }
    out
}

/// First-order geometric error of a correspondence, squared (normalized
/// image units).
pub fn sampson_error(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

pub fn essential_from_pose(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix3<f64> {
    skew(translation) * rotation
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialRansacConfig {
    /// Inlier threshold in normalized image units.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativePose {
    pub essential: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    /// Unit translation.
    pub translation: Vector3<f64>,
    pub inliers: Vec<usize>,
}

fn adaptive_iterations(inlier_ratio: f64, sample_size: i32, confidence: f64, cap: usize) -> usize {
    let w = inlier_ratio.powi(sample_size);
    if w >= 1.0 - 1e-12 {
        return 1;
    }
    if w <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w).ln();
    (n.ceil().max(1.0) as usize).min(cap)
}

/// Robust essential matrix from normalized rays (`z = 1`).
pub fn estimate_essential(
    x1: &[Vector3<f64>],
    x2: &[Vector3<f64>],
    config: &EssentialRansacConfig,
) -> Option<RelativePose> {
    let n = x1.len();
    if n < 5 || n != x2.len() {
        return None;
    }
    let thr2 = config.threshold * config.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, f64, Matrix3<f64>)> = None;
    let mut needed = config.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(&mut rng, n, 5);
        let s1: [Vector3<f64>; 5] = std::array::from_fn(|k| x1[idx.index(k)]);
        let s2: [Vector3<f64>; 5] = std::array::from_fn(|k| x2[idx.index(k)]);
        for e in five_point(&s1, &s2) {
            let mut count = 0;
            let mut err = 0.0;
            for k in 0..n {
                let d = sampson_error(&e, &x1[k], &x2[k]);
                if d < thr2 {
                    count += 1;
                    err += d;
                }
            }
            if best.as_ref().is_none_or(|(c, be, _)| count > *c || (count == *c && err < *be)) {
                best = Some((count, err, e));
                needed = adaptive_iterations(count as f64 / n as f64, 5, config.confidence, config.max_iterations);
            }
        }
    }
    let (_, _, e) = best?;
    let inliers: Vec<usize> = (0..n)
        .filter(|&k| sampson_error(&e, &x1[k], &x2[k]) < thr2)
        .collect();
    let (rotation, translation) = decompose_essential(&e, x1, x2, &inliers)?;
    Some(RelativePose {
        essential: e,
        rotation,
        translation,
        inliers,
    })
}

/// Two-view linear triangulation in the first camera frame.
pub fn triangulate_two_view(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    x1: &Vector3<f64>,
    x2: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let mut a = nalgebra::Matrix4::<f64>::zeros();
    let p1 = nalgebra::Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let mut p2 = nalgebra::Matrix3x4::zeros();
    p2.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    p2.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    let rows = [
        p1.row(2) * x1.x / x1.z - p1.row(0),
        p1.row(2) * x1.y / x1.z - p1.row(1),
        p2.row(2) * x2.x / x2.z - p2.row(0),
        p2.row(2) * x2.y / x2.z - p2.row(1),
    ];
    for (i, r) in rows.iter().enumerate() {
        a.set_row(i, r);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd.singular_values.argmin();
    let h = vt.row(imin);
    if h[3].abs() < 1e-15 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Picks the decomposition of `e` that places the most inliers in front of
/// both cameras.
pub fn decompose_essential(
    e: &Matrix3<f64>,
    x1: &[Vector3<f64>],
    x2: &[Vector3<f64>],
    inliers: &[usize],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let ra = u * w * vt;
    let rb = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for (r, t) in [(ra, t), (ra, -t), (rb, t), (rb, -t)] {
        let mut good = 0;
        for &k in inliers {
            if let Some(p) = triangulate_two_view(&r, &t, &x1[k], &x2[k]) {
                let q = r * p + t;
                if p.z > 0.0 && q.z > 0.0 {
                    good += 1;
                }
            }
        }
        if best.as_ref().is_none_or(|(g, _, _)| good > *g) {
            best = Some((good, r, t));
        }
    }
    let (good, r, t) = best?;
    (good > 0).then_some((r, t))
}

/// Linear homography `x2 ~ H x1` from normalized rays (least squares over all
/// correspondences), scaled so that its middle singular value is one.
pub fn homography_dlt(x1: &[Vector3<f64>], x2: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    if x1.len() < 4 || x1.len() != x2.len() {
        return None;
    }
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in x1.iter().zip(x2) {
        let (a, b) = (a / a.z, b / b.z);
        let r1 = SVector::<f64, 9>::from_row_slice(&[0.0, 0.0, 0.0, -a.x, -a.y, -1.0, b.y * a.x, b.y * a.y, b.y]);
        let r2 = SVector::<f64, 9>::from_row_slice(&[a.x, a.y, 1.0, 0.0, 0.0, 0.0, -b.x * a.x, -b.x * a.y, -b.x]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig.eigenvalues.argmin();
    let h = eig.eigenvectors.column(imin);
    let mut h = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    // Points in front of both cameras map with positive depth ratio.
    let positive = x1.iter().filter(|a| (h * *a).z / a.z > 0.0).count();
    if 2 * positive < x1.len() {
        h = -h;
    }
    let sv = h.singular_values();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(f64::total_cmp);
    (sorted[1] > 0.0).then(|| h / sorted[1])
}

/// Transfer error `|x2 - H x1|` in normalized units.
pub fn homography_error(h: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let p = h * x1;
    ((p / p.z) - (x2 / x2.z)).norm()
}

/// Motions `(R, t, n)` with `H ~ R + t n^T` consistent with a homography
/// between normalized rays: `n` is the unit plane normal in the first camera
/// (oriented with `n.z > 0`) and `t` the translation divided by the plane
/// distance. Up to four candidates.
pub fn decompose_homography(h: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>, Vector3<f64>)> {
    let svd = h.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else { return Vec::new() };
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let d: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v = vt.transpose();
    let v = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);
    let s = u.determinant() * v.determinant();
    let (d1, d2, d3) = (d[0], d[1], d[2]);
    let mut out = Vec::new();
    if d1 - d3 < 1e-12 * d1 {
        // No translation: pure rotation.
        return out;
    }
    let x1 = ((d1 * d1 - d2 * d2) / (d1 * d1 - d3 * d3)).max(0.0).sqrt();
    let x3 = ((d2 * d2 - d3 * d3) / (d1 * d1 - d3 * d3)).max(0.0).sqrt();
    let sigma = diag(d1, d2, d3);
    for e1 in [1.0, -1.0] {
        for e3 in [1.0, -1.0] {
            for sign in [1.0, -1.0] {
                let sin = sign * ((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)).max(0.0).sqrt() / ((d1 + d3) * d2);
                let cos = (d2 * d2 + d1 * d3) / ((d1 + d3) * d2);
                let rp = Matrix3::new(cos, 0.0, -sin, 0.0, 1.0, 0.0, sin, 0.0, cos);
                let np = Vector3::new(e1 * x1, 0.0, e3 * x3);
                let tp = Vector3::new(e1 * x1, 0.0, -e3 * x3) * (d1 - d3);
                // Keep only the sign choices that reproduce the singular values.
                if (rp * d2 + tp * np.transpose() - sigma).norm() > 1e-8 * d1 {
                    continue;
                }
                let r = u * rp * v.transpose() * s;
                // H = s U (d2 R' + t' n'^T) V^T: dividing by d2 gives the unit-plane form.
                let t = u * tp / d2;
                let n = v * np * s;
                let (t, n) = if n.z < 0.0 { (-t, -n) } else { (t, n) };
                if !out.iter().any(|(r2, t2, _): &(Matrix3<f64>, Vector3<f64>, Vector3<f64>)| {
                    (r2 - r).norm() < 1e-9 && (t2 - t).norm() < 1e-9
                }) {
                    out.push((r, t, n));
                }
            }
        }
    }
    out
}

fn diag(a: f64, b: f64, c: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(a, b, c))
}

/// Normalized ray `(x, y, 1)` of an image point in normalized coordinates.
pub fn ray(n: Vector2<f64>) -> Vector3<f64> {
    Vector3::new(n.x, n.y, 1.0)
}
