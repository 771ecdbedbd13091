//! Multi-view point triangulation from known poses.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use super::bundle::project_ideal;
use crate::{CameraModel, Pose};

/// Linear (DLT) triangulation from undistorted pixels, followed by
/// Gauss-Newton refinement of the reprojection error.
pub fn triangulate(views: &[(Pose, Vector2<f64>)], camera: &CameraModel) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    // Work relative to the mean camera center for conditioning.
    let origin = views.iter().map(|(p, _)| *p.center()).sum::<Vector3<f64>>() / views.len() as f64;
    let mut a = Matrix4::<f64>::zeros();
    for (pose, px) in views {
        let n = camera.pixel_to_normalized(crate::PixelCoord::new(px.x, px.y));
        let rt = pose.rotation().transpose();
        let t = -rt * (pose.center() - origin);
        let row = |k: usize| nalgebra::RowVector4::new(rt[(k, 0)], rt[(k, 1)], rt[(k, 2)], t[k]);
        for r in [row(2) * n.x - row(0), row(2) * n.y - row(1)] {
            a += r.transpose() * r;
        }
    }
    let eig = a.symmetric_eigen();
    let (imin, _) = eig.eigenvalues.argmin();
    let h = eig.eigenvectors.column(imin);
    if h[3].abs() < 1e-14 {
        return None;
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]) + origin;
    refine_point(views, camera, x, 10)
}

/// Gauss-Newton on the point position with the poses held fixed.
pub fn refine_point(
    views: &[(Pose, Vector2<f64>)],
    camera: &CameraModel,
    mut x: Vector3<f64>,
    iterations: usize,
) -> Option<Vector3<f64>> {
    for _ in 0..iterations {
        let mut h = Matrix3::<f64>::zeros();
        let mut g = Vector3::<f64>::zeros();
        for (pose, px) in views {
            let (proj, _, j) = super::bundle::observation_jacobian(pose, &x, camera)?;
            let r = proj - px;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let step = h.try_inverse()? * g;
        x -= step;
        if step.norm() <= 1e-12 * (1.0 + x.norm()) {
            break;
        }
    }
    views
        .iter()
        .all(|(p, _)| p.world_to_camera(&x).z > 0.0)
        .then_some(x)
}

/// Largest angle (radians) between the viewing rays of `x` from the given
/// camera centers.
pub fn max_parallax(x: &Vector3<f64>, centers: &[Vector3<f64>]) -> f64 {
    let dirs: Vec<Vector3<f64>> = centers.iter().map(|c| (x - c).normalize()).collect();
    let mut best: f64 = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            best = best.max(dirs[i].dot(&dirs[j]).clamp(-1.0, 1.0).acos());
        }
    }
    best
}

/// Largest reprojection error (pixels) of `x` over the views.
pub fn max_reprojection_error(x: &Vector3<f64>, views: &[(Pose, Vector2<f64>)], camera: &CameraModel) -> f64 {
    views
        .iter()
        .map(|(p, px)| project_ideal(p, x, camera).map_or(f64::INFINITY, |q| (q - px).norm()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::nadir_rotation;

    #[test]
    fn exact_views_recover_point() {
        let cam = CameraModel::pinhole(800.0, 968, 728).unwrap();
        let x = Vector3::new(12.3, -0.4, 0.05);
        let views: Vec<(Pose, Vector2<f64>)> = (0..4)
            .map(|i| {
                let p = Pose::from_rotation_nearest(nadir_rotation(), Vector3::new(11.5 + 0.25 * i as f64, 0.0, 2.0));
                let px = project_ideal(&p, &x, &cam).unwrap();
                (p, px)
            })
            .collect();
        let t = triangulate(&views, &cam).unwrap();
        assert!((t - x).norm() < 1e-10);
        assert!(max_reprojection_error(&t, &views, &cam) < 1e-9);
        let centers: Vec<_> = views.iter().map(|(p, _)| *p.center()).collect();
        assert!(max_parallax(&t, &centers) > 0.3);
    }

    #[test]
    fn single_view_is_rejected() {
        let cam = CameraModel::pinhole(800.0, 968, 728).unwrap();
        let views = vec![(Pose::identity(), Vector2::new(100.0, 100.0))];
        assert!(triangulate(&views, &cam).is_none());
    }
}
