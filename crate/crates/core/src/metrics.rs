//! Pose-evaluation metrics: rotation/translation errors, the 5cm-5deg
//! accuracy, and median summaries.

use nalgebra::Matrix3;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty error list")]
    Empty,
    #[error("matrix is not a rotation (orthonormality/determinant off by {0:.3e})")]
    NotARotation(f64),
}

/// Translation error in meters and rotation error in degrees for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError<T> {
    pub translation_m: T,
    pub rotation_deg: T,
}

pub(crate) fn rotation_defect<T: Scalar>(r: &Matrix3<T>) -> T {
    let eye = Matrix3::identity();
    let ortho = (r.transpose() * r - eye).norm();
    let det = (r.determinant() - T::one()).abs();
    ortho.max(det)
}

/// Geodesic angle between two rotations, in degrees:
/// `acos(clamp((trace(Ra^T Rb) - 1) / 2, -1, 1))`.
///
/// Both inputs must be orthonormal with determinant +1 to within `1e-6`.
pub fn rotation_error_deg<T: Scalar>(r_est: &Matrix3<T>, r_gt: &Matrix3<T>) -> Result<T, MetricsError> {
    for r in [r_est, r_gt] {
        let defect = rotation_defect(r);
        if defect > T::of(1e-6) {
            return Err(MetricsError::NotARotation(defect.to_f64c()));
        }
    }
    let cos = ((r_est.transpose() * r_gt).trace() - T::one()) / T::of(2.0);
    let cos = cos.clamp(-T::one(), T::one());
    Ok(cos.acos() * T::of(180.0) / T::pi())
}

/// Percentage of frames with translation error strictly below 5 cm and
/// rotation error strictly below 5 degrees.
pub fn accuracy_5cm5deg<T: Scalar>(errors: &[PoseError<T>]) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = errors
        .iter()
        .filter(|e| e.translation_m < T::of(0.05) && e.rotation_deg < T::of(5.0))
        .count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

fn median_of<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / T::of(2.0)
    }
}

/// Component-wise medians `(median translation, median rotation)`; an
/// even-length list takes the midpoint of the two central order statistics.
pub fn median_errors<T: Scalar>(errors: &[PoseError<T>]) -> Result<(T, T), MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut trans: Vec<T> = errors.iter().map(|e| e.translation_m).collect();
    let mut rot: Vec<T> = errors.iter().map(|e| e.rotation_deg).collect();
    Ok((median_of(&mut trans), median_of(&mut rot)))
}

/// One line of the per-scene metrics CSV.
#[derive(Debug, Clone)]
pub struct SceneMetrics {
    pub scene: String,
    pub median_trans_m: f64,
    pub median_rot_deg: f64,
    pub acc_5cm5deg: f64,
    pub n_frames: usize,
}

pub const METRICS_CSV_HEADER: &str = "scene,median_trans_m,median_rot_deg,acc_5cm5deg,n_frames";

impl SceneMetrics {
    pub fn from_errors<T: Scalar>(scene: &str, errors: &[PoseError<T>]) -> Result<Self, MetricsError> {
        let (mt, mr) = median_errors(errors)?;
        Ok(Self {
            scene: scene.to_string(),
            median_trans_m: mt.to_f64c(),
            median_rot_deg: mr.to_f64c(),
            acc_5cm5deg: accuracy_5cm5deg(errors)?,
            n_frames: errors.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.2},{}",
            self.scene, self.median_trans_m, self.median_rot_deg, self.acc_5cm5deg, self.n_frames
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit, Vector3};

    fn rot_z(deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::z()), deg.to_radians()).into_inner()
    }

    fn rot_x(rad: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::x()), rad).into_inner()
    }

    #[test]
    fn rotation_error_identity_is_zero() {
        let r = Matrix3::<f64>::identity();
        assert_eq!(rotation_error_deg(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn rotation_error_ninety_about_z() {
        let err = rotation_error_deg(&rot_z(90.0), &Matrix3::identity()).unwrap();
        assert!((err - 90.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_error_half_turn_exercises_clamp() {
        let err = rotation_error_deg(&rot_z(180.0), &Matrix3::identity()).unwrap();
        assert!((err - 180.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_error_is_symmetric() {
        let a = rot_z(37.0);
        let b = rot_z(-12.0) * rot_x(0.4);
        let ab = rotation_error_deg(&a, &b).unwrap();
        let ba = rotation_error_deg(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn rotation_error_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0);
        assert!(rotation_error_deg(&m, &Matrix3::identity()).is_err());
    }

    fn pe(t: f64, r: f64) -> PoseError<f64> {
        PoseError { translation_m: t, rotation_deg: r }
    }

    #[test]
    fn accuracy_four_element_example() {
        let errs = [pe(0.03, 2.0), pe(0.06, 1.0), pe(0.04, 6.0), pe(0.02, 3.0)];
        assert_eq!(accuracy_5cm5deg(&errs).unwrap(), 50.0);
    }

    #[test]
    fn accuracy_perfect_and_boundary() {
        let zeros = [pe(0.0, 0.0); 3];
        assert_eq!(accuracy_5cm5deg(&zeros).unwrap(), 100.0);
        // Strict inequality on both thresholds.
        let boundary = [pe(0.05, 4.0)];
        assert_eq!(accuracy_5cm5deg(&boundary).unwrap(), 0.0);
        let boundary_rot = [pe(0.04, 5.0)];
        assert_eq!(accuracy_5cm5deg(&boundary_rot).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_rejects_empty() {
        assert!(accuracy_5cm5deg::<f64>(&[]).is_err());
    }

    #[test]
    fn median_odd_and_even() {
        let odd = [pe(1.0, 0.0), pe(2.0, 0.0), pe(3.0, 0.0)];
        assert_eq!(median_errors(&odd).unwrap().0, 2.0);
        let even = [pe(1.0, 0.0), pe(2.0, 0.0), pe(3.0, 0.0), pe(4.0, 0.0)];
        assert_eq!(median_errors(&even).unwrap().0, 2.5);
    }

    #[test]
    fn medians_are_component_independent() {
        // Rotation and translation medians come from independent sorts,
        // not from a single "median frame".
        let errs = [pe(1.0, 30.0), pe(2.0, 10.0), pe(3.0, 20.0)];
        let (mt, mr) = median_errors(&errs).unwrap();
        assert_eq!((mt, mr), (2.0, 20.0));

        // Brute-force check on a pseudo-random list.
        let list: Vec<PoseError<f64>> = (0..11)
            .map(|i| pe(((i * 7) % 11) as f64, ((i * 3) % 11) as f64))
            .collect();
        let mut ts: Vec<f64> = list.iter().map(|e| e.translation_m).collect();
        let mut rs: Vec<f64> = list.iter().map(|e| e.rotation_deg).collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (mt, mr) = median_errors(&list).unwrap();
        assert_eq!(mt, ts[5]);
        assert_eq!(mr, rs[5]);
    }
}
