use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

/// Least-squares similarity (or rigid) transform `gt ≈ s·R·est + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub aligned: Vec<Vector3<f64>>,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Closed-form alignment of `est` onto `gt` (Umeyama 1991). With
/// `with_scale = false` the scale is fixed at 1.
///
/// Collinear inputs are accepted: the rotation about the common line is then
/// arbitrary, but the aligned points are still optimal.
pub fn umeyama_align(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment, GeometryError> {
    if est.len() != gt.len() {
        return Err(GeometryError::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 3 {
        return Err(GeometryError::TooFewPoints(est.len()));
    }
    let n = est.len() as f64;
    let mean_e = est.iter().sum::<Vector3<f64>>() / n;
    let mean_g = gt.iter().sum::<Vector3<f64>>() / n;
    let var_e = est.iter().map(|p| (p - mean_e).norm_squared()).sum::<f64>() / n;
    if var_e <= f64::EPSILON * mean_e.norm_squared().max(1.0) {
        return Err(GeometryError::Degenerate("estimated points coincide"));
    }
    let mut cov = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        cov += (g - mean_g) * (e - mean_e).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_e
    } else {
        1.0
    };
    let translation = mean_g - scale * (rotation * mean_e);
    let aligned = est.iter().map(|p| scale * (rotation * p) + translation).collect();
    Ok(Alignment {
        scale,
        rotation,
        translation,
        aligned,
    })
}
