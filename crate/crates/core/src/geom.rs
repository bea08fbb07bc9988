//! Camera model, projection, PnP refinement, and the RANSAC wrapper that
//! recovers a pose from predicted 2D-3D correspondences.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::metrics::rotation_defect;
use crate::model::CoordPrediction;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("need at least {need} correspondences, got {got}")]
    NotEnoughPoints { need: usize, got: usize },
    #[error("degenerate configuration")]
    Degenerate,
    #[error("no consensus: zero inliers at the threshold")]
    NoConsensus,
    #[error("matrix is not a rotation (defect {0:.3e})")]
    NotARotation(f64),
    #[error("linear solve failed")]
    SolveFailed,
    #[error("too few cells survive uncertainty filtering ({kept} < {need})")]
    TooFewCells { kept: usize, need: usize },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Self {
        Self { fx, fy, cx, cy }
    }
}

/// Minimum camera-frame depth for a point to count as visible.
pub const Z_MIN: f64 = 1e-6;

/// Rigid transform from camera to world coordinates, `p_world = R p_cam + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose<T: Scalar> {
    pub r: Matrix3<T>,
    pub t: Vector3<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Validates the rotation invariant (orthonormal, det +1, to 1e-9).
    pub fn new(r: Matrix3<T>, t: Vector3<T>) -> Result<Self, GeomError> {
        let defect = rotation_defect(&r);
        if defect > T::of(1e-9) {
            return Err(GeomError::NotARotation(defect.to_f64c()));
        }
        Ok(Self { r, t })
    }

    pub fn camera_center(&self) -> Vector3<T> {
        self.t
    }

    /// World point expressed in the camera frame.
    pub fn world_to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.r.transpose() * (p - self.t)
    }

    pub fn camera_to_world(&self, p: &Vector3<T>) -> Vector3<T> {
        self.r * p + self.t
    }

    /// Composition `self ∘ other` as transforms.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }
}

/// Projects world points through the inverse pose and the pinhole model.
/// Points at or behind the camera plane (`z <= Z_MIN`) are flagged invisible
/// with a zeroed pixel.
pub fn project<T: Scalar>(
    pose: &Pose<T>,
    k: &CameraIntrinsics<T>,
    points_world: &[Vector3<T>],
) -> Vec<(Vector2<T>, bool)> {
    let z_min = T::of(Z_MIN);
    points_world
        .iter()
        .map(|p| {
            let pc = pose.world_to_camera(p);
            if pc.z > z_min {
                let u = k.fx * pc.x / pc.z + k.cx;
                let v = k.fy * pc.y / pc.z + k.cy;
                (Vector2::new(u, v), true)
            } else {
                (Vector2::zeros(), false)
            }
        })
        .collect()
}

/// One 2D-3D correspondence in pixel / world-meter units.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence<T> {
    pub pixel: Vector2<T>,
    pub world: Vector3<T>,
}

/// RANSAC-PnP configuration.
#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_sample_size: usize,
    pub confidence: f64,
    pub refine_iterations: usize,
    /// Cells with uncertainty above this percentile are dropped before
    /// RANSAC; `None` disables the filter.
    pub uncertainty_percentile: Option<f64>,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 256,
            inlier_threshold_px: 8.0,
            // The DLT hypothesis solver needs 6 points to be determinate.
            min_sample_size: 6,
            confidence: 0.999,
            refine_iterations: 50,
            uncertainty_percentile: Some(80.0),
        }
    }
}

fn are_points_collinear<T: Scalar>(points: &[Vector3<T>]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let n = T::of(points.len() as f64);
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += p;
    }
    centroid /= n;
    let mut scatter = Matrix3::zeros();
    let mut scale = T::zero();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
        scale += d.norm_squared();
    }
    if scale == T::zero() {
        return true;
    }
    let eig = (scatter / scale).symmetric_eigenvalues();
    let mut vals: Vec<T> = eig.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    // Collinear points put all scatter on one axis.
    vals[1] < T::of(1e-9)
}

/// Pose from 6+ correspondences via a normalized direct linear transform,
/// projecting the linear estimate onto SO(3).
pub fn dlt_pose<T: Scalar>(
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
) -> Result<Pose<T>, GeomError> {
    let n = corrs.len();
    if n < 6 {
        return Err(GeomError::NotEnoughPoints { need: 6, got: n });
    }

    // Normalize world points: centroid to origin, mean distance sqrt(3).
    let nf = T::of(n as f64);
    let mut centroid = Vector3::zeros();
    for c in corrs {
        centroid += c.world;
    }
    centroid /= nf;
    let mut mean_dist = T::zero();
    for c in corrs {
        mean_dist += (c.world - centroid).norm();
    }
    mean_dist /= nf;
    if mean_dist <= T::of(1e-12) {
        return Err(GeomError::Degenerate);
    }
    let scale = T::of(3.0).sqrt() / mean_dist;

    // Build the 2n x 12 system in normalized image coordinates.
    let mut a = DMatrix::<T>::zeros(2 * n, 12);
    for (i, c) in corrs.iter().enumerate() {
        let pw = (c.world - centroid) * scale;
        let u = (c.pixel.x - k.cx) / k.fx;
        let v = (c.pixel.y - k.cy) / k.fy;
        let (r0, r1) = (2 * i, 2 * i + 1);
        for (col, val) in [(0, pw.x), (1, pw.y), (2, pw.z), (3, T::one())] {
            a[(r0, col)] = val;
            a[(r1, col + 4)] = val;
            a[(r0, col + 8)] = -u * val;
            a[(r1, col + 8)] = -v * val;
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeomError::SolveFailed)?;
    let p_vec = v_t.row(v_t.nrows() - 1);

    let mut m = Matrix3::zeros();
    let mut p4 = Vector3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = p_vec[4 * r + c];
        }
        p4[r] = p_vec[4 * r + 3];
    }

    // Fix scale by the mean row norm; the determinant picks the sign, which
    // also resolves the cheirality of the null vector.
    let mut s = (m.row(0).norm() + m.row(1).norm() + m.row(2).norm()) / T::of(3.0);
    if m.determinant() < T::zero() {
        s = -s;
    }
    if s.abs() <= T::of(1e-12) {
        return Err(GeomError::Degenerate);
    }
    let m = m / s;
    let p4 = p4 / s;

    // Project onto SO(3).
    let r_wc = orthonormalize(&m);

    // The solved system is x_hat ~ M s(X - c) + p4 with rotation M/sigma, so
    // with p4 already divided by sigma the world-to-camera translation is
    // t = p4/scale - R c.
    let t_wc = p4 / scale - r_wc * centroid;

    // Recover camera-to-world.
    let r_cw = r_wc.transpose();
    let t_cw = -(r_cw * t_wc);
    Pose::new(r_cw, t_cw)
}

/// Nearest rotation matrix (polar factor) of `m`.
fn orthonormalize<T: Scalar>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("3x3 svd"), svd.v_t.expect("3x3 svd"));
    let mut r = u * vt;
    if r.determinant() < T::zero() {
        let mut uf = u;
        uf.column_mut(2).neg_mut();
        r = uf * vt;
    }
    r
}

fn reprojection_residual<T: Scalar>(
    pose: &Pose<T>,
    k: &CameraIntrinsics<T>,
    c: &Correspondence<T>,
) -> T {
    let pc = pose.world_to_camera(&c.world);
    if pc.z <= T::of(Z_MIN) {
        return T::of(f64::INFINITY);
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    ((u - c.pixel.x) * (u - c.pixel.x) + (v - c.pixel.y) * (v - c.pixel.y)).sqrt()
}

fn total_cost<T: Scalar>(pose: &Pose<T>, k: &CameraIntrinsics<T>, corrs: &[Correspondence<T>]) -> T {
    corrs
        .iter()
        .map(|c| {
            let r = reprojection_residual(pose, k, c);
            r * r
        })
        .fold(T::zero(), |a, b| a + b)
}

fn skew<T: Scalar>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(), -v.z, v.y,
        v.z, T::zero(), -v.x,
        -v.y, v.x, T::zero(),
    )
}

fn rotation_exp<T: Scalar>(w: &Vector3<T>) -> Matrix3<T> {
    let theta = w.norm();
    if theta < T::of(1e-12) {
        return Matrix3::identity() + skew(w);
    }
    let k = skew(&(w / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (T::one() - theta.cos())
}

/// Gauss-Newton refinement of the summed squared pixel reprojection error
/// over a 6-dim local parameterization (3 rotation tangent + 3 translation)
/// of the world-to-camera transform, with an additive damping fallback when
/// a step fails to reduce the cost. Terminates when the step norm drops
/// below 1e-10 or after `max_iterations`.
pub fn pnp_refine<T: Scalar>(
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    initial: &Pose<T>,
    max_iterations: usize,
) -> Result<Pose<T>, GeomError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeomError::NotEnoughPoints { need: 4, got: n });
    }
    let world: Vec<Vector3<T>> = corrs.iter().map(|c| c.world).collect();
    if are_points_collinear(&world) {
        return Err(GeomError::Degenerate);
    }

    // Optimize world-to-camera internally.
    let mut r_wc = initial.r.transpose();
    let mut t_wc = -r_wc * initial.t;
    let mut cost = {
        let pose = Pose { r: r_wc.transpose(), t: -(r_wc.transpose() * t_wc) };
        total_cost(&pose, k, corrs)
    };

    for iter in 0..max_iterations {
        let mut jtj = Matrix6::<T>::zeros();
        let mut jtr = Vector6::<T>::zeros();
        for c in corrs {
            let pc = r_wc * c.world + t_wc;
            if pc.z <= T::of(Z_MIN) {
                continue;
            }
            let iz = T::one() / pc.z;
            let iz2 = iz * iz;
            // d(pixel)/d(p_cam)
            let j_proj = nalgebra::Matrix2x3::new(
                k.fx * iz, T::zero(), -k.fx * pc.x * iz2,
                T::zero(), k.fy * iz, -k.fy * pc.y * iz2,
            );
            // p_cam = exp(dw) R X + t + dt  =>  dp/ddw = -[p_cam - t]x, dp/ddt = I
            let j_rot = -skew(&(pc - t_wc));
            let mut j = nalgebra::Matrix2x6::<T>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(j_proj * j_rot));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_proj);

            let u = k.fx * pc.x * iz + k.cx;
            let v = k.fy * pc.y * iz + k.cy;
            let r = Vector2::new(u - c.pixel.x, v - c.pixel.y);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }

        // On the first iteration a structurally rank-deficient system means
        // the configuration is unobservable (damping would only mask it).
        if iter == 0 {
            let eig = jtj.symmetric_eigenvalues();
            let max_e = eig.iter().fold(T::zero(), |a, b| a.max(b.abs()));
            let min_e = eig.iter().fold(T::of(f64::INFINITY), |a, b| a.min(b.abs()));
            if max_e <= T::zero() || min_e / max_e < T::of(1e-14) {
                return Err(GeomError::Degenerate);
            }
        }

        let mut damping = T::zero();
        let mut stepped = false;
        for _ in 0..8 {
            let lhs = jtj + Matrix6::identity() * damping;
            let Some(chol) = lhs.cholesky() else {
                damping = if damping == T::zero() { T::of(1e-8) } else { damping * T::of(10.0) };
                continue;
            };
            let delta = chol.solve(&(-jtr));
            let dw = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let r_new = rotation_exp(&dw) * r_wc;
            let t_new = t_wc + dt;
            let pose_new = Pose {
                r: r_new.transpose(),
                t: -(r_new.transpose() * t_new),
            };
            let new_cost = total_cost(&pose_new, k, corrs);
            if new_cost <= cost || delta.norm() < T::of(1e-10) {
                r_wc = orthonormalize(&r_new);
                t_wc = t_new;
                cost = new_cost;
                stepped = true;
                if delta.norm() < T::of(1e-10) {
                    let r_cw = r_wc.transpose();
                    return Pose::new(r_cw, -(r_cw * t_wc));
                }
                break;
            }
            damping = if damping == T::zero() { T::of(1e-6) } else { damping * T::of(10.0) };
        }
        if !stepped {
            break;
        }
    }
    let r_cw = orthonormalize(&r_wc.transpose());
    Pose::new(r_cw, -(r_cw * t_wc))
}

/// Result of [`ransac_pnp`]: the refined pose and the inlier mask.
#[derive(Debug, Clone)]
pub struct RansacResult<T: Scalar> {
    pub pose: Pose<T>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
}

/// RANSAC over minimal DLT hypotheses, scored by inlier count with ties
/// broken by lower inlier RMS residual, followed by refinement on the
/// winning consensus set. Deterministic for a fixed seed.
pub fn ransac_pnp<T: Scalar>(
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    config: &RansacConfig,
    seed: u64,
) -> Result<RansacResult<T>, GeomError> {
    let n = corrs.len();
    let sample_size = config.min_sample_size.max(6);
    if n < sample_size {
        return Err(GeomError::NotEnoughPoints { need: sample_size, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threshold = T::of(config.inlier_threshold_px);

    let mut best: Option<(usize, T, Pose<T>)> = None;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut needed = config.max_iterations;

    for iter in 0..config.max_iterations {
        if iter >= needed {
            break;
        }
        indices.shuffle(&mut rng);
        let sample: Vec<Correspondence<T>> = indices[..sample_size].iter().map(|i| corrs[*i]).collect();
        let Ok(init) = dlt_pose(&sample, k) else { continue };
        let Ok(hyp) = pnp_refine(&sample, k, &init, config.refine_iterations) else { continue };

        let mut count = 0usize;
        let mut sq_sum = T::zero();
        for c in corrs {
            let r = reprojection_residual(&hyp, k, c);
            if r < threshold {
                count += 1;
                sq_sum += r * r;
            }
        }
        if count == 0 {
            continue;
        }
        let rms = (sq_sum / T::of(count as f64)).sqrt();
        let better = match &best {
            None => true,
            Some((bc, brms, _)) => count > *bc || (count == *bc && rms < *brms),
        };
        if better {
            best = Some((count, rms, hyp));
            // Early exit once enough iterations ran for the observed ratio.
            let w = count as f64 / n as f64;
            let p_all = w.powi(sample_size as i32).clamp(1e-12, 1.0 - 1e-12);
            let k_needed = ((1.0 - config.confidence).ln() / (1.0 - p_all).ln()).ceil();
            needed = needed.min((k_needed.max(1.0)) as usize + iter + 1);
        }
    }

    let Some((_, _, pose)) = best else {
        return Err(GeomError::NoConsensus);
    };

    // Final refinement on all inliers of the best hypothesis.
    let inlier_set: Vec<Correspondence<T>> = corrs
        .iter()
        .filter(|c| reprojection_residual(&pose, k, c) < threshold)
        .copied()
        .collect();
    let pose = if inlier_set.len() >= 4 {
        pnp_refine(&inlier_set, k, &pose, config.refine_iterations).unwrap_or(pose)
    } else {
        pose
    };

    let inliers: Vec<bool> = corrs
        .iter()
        .map(|c| reprojection_residual(&pose, k, c) < threshold)
        .collect();
    let inlier_count = inliers.iter().filter(|b| **b).count();
    if inlier_count == 0 {
        return Err(GeomError::NoConsensus);
    }
    Ok(RansacResult { pose, inliers, inlier_count })
}

/// Diagnostics of [`pose_from_prediction`].
#[derive(Debug, Clone, Copy)]
pub struct PoseDiagnostics {
    pub inlier_count: usize,
    pub dropped_cells: usize,
}

/// Builds correspondences from a dense prediction's pixel anchors, drops the
/// most uncertain cells (those above the configured uncertainty percentile,
/// ties broken by cell index), and runs RANSAC-PnP on the survivors.
pub fn pose_from_prediction<T: Scalar>(
    pred: &CoordPrediction<T>,
    k: &CameraIntrinsics<T>,
    config: &RansacConfig,
    seed: u64,
) -> Result<(Pose<T>, PoseDiagnostics), GeomError> {
    let q = pred.len();
    let sample_size = config.min_sample_size.max(6);
    if q < sample_size {
        return Err(GeomError::NotEnoughPoints { need: sample_size, got: q });
    }

    let keep: Vec<usize> = match config.uncertainty_percentile {
        None => (0..q).collect(),
        Some(p) => {
            let drop = ((1.0 - p / 100.0) * q as f64).ceil() as usize;
            let mut order: Vec<usize> = (0..q).collect();
            // Ascending by uncertainty, then by cell index; the tail is dropped.
            order.sort_by(|a, b| {
                pred.uncert[*a]
                    .partial_cmp(&pred.uncert[*b])
                    .expect("finite uncertainty")
                    .then(a.cmp(b))
            });
            let mut kept: Vec<usize> = order[..q - drop.min(q)].to_vec();
            kept.sort_unstable();
            kept
        }
    };
    let dropped = q - keep.len();
    if keep.len() < sample_size {
        return Err(GeomError::TooFewCells { kept: keep.len(), need: sample_size });
    }

    let corrs: Vec<Correspondence<T>> = keep
        .iter()
        .map(|&i| Correspondence {
            pixel: Vector2::new(pred.anchors[i][0], pred.anchors[i][1]),
            world: Vector3::new(pred.coords[i][0], pred.coords[i][1], pred.coords[i][2]),
        })
        .collect();
    let res = ransac_pnp(&corrs, k, config, seed)?;
    Ok((
        res.pose,
        PoseDiagnostics {
            inlier_count: res.inlier_count,
            dropped_cells: dropped,
        },
    ))
}

/// Correspondence dump for debugging: one CSV row per cell.
pub fn correspondence_csv<T: Scalar>(
    pred: &CoordPrediction<T>,
    inliers: Option<&[bool]>,
) -> String {
    let mut out = String::from("u,v,x,y,z,uncertainty,inlier_flag\n");
    for i in 0..pred.len() {
        let flag = inliers.map(|m| usize::from(m.get(i).copied().unwrap_or(false))).unwrap_or(0);
        out.push_str(&format!(
            "{:.3},{:.3},{:.6},{:.6},{:.6},{:.6},{}\n",
            pred.anchors[i][0].to_f64c(),
            pred.anchors[i][1].to_f64c(),
            pred.coords[i][0].to_f64c(),
            pred.coords[i][1].to_f64c(),
            pred.coords[i][2].to_f64c(),
            pred.uncert[i].to_f64c(),
            flag
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rotation_error_deg;
    use rand::Rng;

    fn default_k() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let angle = (rng.random::<f64>() - 0.5) * 1.6;
        let r = rotation_exp(&(axis.normalize() * angle));
        let t = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 0.5,
        );
        Pose::new(r, t).unwrap()
    }

    /// Points in front of the camera for a camera-to-world pose.
    fn points_seen_by(pose: &Pose<f64>, rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                let pc = Vector3::new(
                    (rng.random::<f64>() - 0.5) * 1.2,
                    (rng.random::<f64>() - 0.5) * 1.2,
                    1.0 + rng.random::<f64>() * 2.0,
                );
                pose.camera_to_world(&pc)
            })
            .collect()
    }

    fn corrs_for(pose: &Pose<f64>, k: &CameraIntrinsics<f64>, pts: &[Vector3<f64>]) -> Vec<Correspondence<f64>> {
        project(pose, k, pts)
            .into_iter()
            .zip(pts)
            .map(|((px, vis), w)| {
                assert!(vis);
                Correspondence { pixel: px, world: *w }
            })
            .collect()
    }

    fn pose_errors(a: &Pose<f64>, b: &Pose<f64>) -> (f64, f64) {
        let dt = (a.t - b.t).norm();
        let dr = rotation_error_deg(&a.r, &b.r).unwrap();
        (dt, dr)
    }

    #[test]
    fn project_principal_point_and_offsets() {
        let k = default_k();
        let pose = Pose::identity();
        let out = project(&pose, &k, &[Vector3::new(0.0, 0.0, 1.0)]);
        assert_eq!(out[0].0, Vector2::new(50.0, 50.0));
        assert!(out[0].1);

        let out = project(&pose, &k, &[Vector3::new(0.5, 0.0, 1.0)]);
        assert_eq!(out[0].0, Vector2::new(100.0, 50.0));

        let out = project(&pose, &k, &[Vector3::new(0.0, 0.0, -1.0)]);
        assert!(!out[0].1, "point behind the camera is invisible");
    }

    #[test]
    fn dlt_recovers_pose_on_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let pts = points_seen_by(&pose, &mut rng, 12);
            let corrs = corrs_for(&pose, &default_k(), &pts);
            let est = dlt_pose(&corrs, &default_k()).unwrap();
            let (dt, dr) = pose_errors(&est, &pose);
            assert!(dt < 1e-6 && dr < 1e-5, "dt {dt}, dr {dr}");
        }
    }

    #[test]
    fn refine_from_perturbed_start_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = default_k();
        for _ in 0..10 {
            let pose = random_pose(&mut rng);
            let pts = points_seen_by(&pose, &mut rng, 10);
            let corrs = corrs_for(&pose, &k, &pts);
            // Perturb about 5 degrees / 5 cm.
            let drot = rotation_exp(&(Vector3::new(0.05, -0.04, 0.06)));
            let start = Pose::new(drot * pose.r, pose.t + Vector3::new(0.03, -0.03, 0.02)).unwrap();
            let refined = pnp_refine(&corrs, &k, &start, 50).unwrap();
            let (dt, dr) = pose_errors(&refined, &pose);
            assert!(dt < 1e-6 && dr < 1e-5, "dt {dt}, dr {dr}");
        }
    }

    #[test]
    fn refine_at_ground_truth_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = random_pose(&mut rng);
        let pts = points_seen_by(&pose, &mut rng, 8);
        let corrs = corrs_for(&pose, &default_k(), &pts);
        let refined = pnp_refine(&corrs, &default_k(), &pose, 50).unwrap();
        let (dt, dr) = pose_errors(&refined, &pose);
        assert!(dt < 1e-10 && dr < 1e-9, "dt {dt}, dr {dr}");
        let cost = total_cost(&refined, &default_k(), &corrs);
        assert!(cost < 1e-18, "cost {cost}");
    }

    #[test]
    fn refine_rejects_collinear_points() {
        let k = default_k();
        let pose = Pose::identity();
        let pts: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(0.1 * i as f64, 0.2 * i as f64, 2.0 + 0.3 * i as f64))
            .collect();
        let corrs = corrs_for(&pose, &k, &pts);
        assert!(matches!(
            pnp_refine(&corrs, &k, &pose, 50),
            Err(GeomError::Degenerate)
        ));
    }

    #[test]
    fn ransac_clean_data_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = default_k();
        let pose = random_pose(&mut rng);
        let pts = points_seen_by(&pose, &mut rng, 100);
        let corrs = corrs_for(&pose, &k, &pts);
        let res = ransac_pnp(&corrs, &k, &RansacConfig::default(), 77).unwrap();
        assert_eq!(res.inlier_count, 100);
        assert!(res.inliers.iter().all(|b| *b));
        let (dt, dr) = pose_errors(&res.pose, &pose);
        assert!(dt < 1e-6, "dt {dt} dr {dr}");
    }

    #[test]
    fn ransac_survives_thirty_percent_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = default_k();
        let pose = random_pose(&mut rng);
        let pts = points_seen_by(&pose, &mut rng, 70);
        let mut corrs = corrs_for(&pose, &k, &pts);
        for _ in 0..30 {
            corrs.push(Correspondence {
                pixel: Vector2::new(rng.random::<f64>() * 100.0, rng.random::<f64>() * 100.0),
                world: Vector3::new(
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * 4.0,
                ),
            });
        }
        let res = ransac_pnp(&corrs, &k, &RansacConfig::default(), 123).unwrap();
        assert!(res.inlier_count >= 70, "inliers {}", res.inlier_count);
        let (dt, dr) = pose_errors(&res.pose, &pose);
        assert!(dt < 0.01 && dr < 0.1, "dt {dt}, dr {dr}");
    }

    #[test]
    fn ransac_same_seed_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let k = default_k();
        let pose = random_pose(&mut rng);
        let pts = points_seen_by(&pose, &mut rng, 40);
        let corrs = corrs_for(&pose, &k, &pts);
        let a = ransac_pnp(&corrs, &k, &RansacConfig::default(), 5).unwrap();
        let b = ransac_pnp(&corrs, &k, &RansacConfig::default(), 5).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.pose.t, b.pose.t);
        assert_eq!(a.pose.r, b.pose.r);
    }

    #[test]
    fn ransac_inlier_count_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let k = default_k();
        let pose = random_pose(&mut rng);
        let pts = points_seen_by(&pose, &mut rng, 50);
        let mut corrs = corrs_for(&pose, &k, &pts);
        // Perturb pixels a little so thresholds matter.
        for (i, c) in corrs.iter_mut().enumerate() {
            c.pixel.x += ((i % 7) as f64 - 3.0) * 0.8;
            c.pixel.y += ((i % 5) as f64 - 2.0) * 0.8;
        }
        let mut last = 0usize;
        for thr in [1.0, 2.0, 4.0, 8.0] {
            let cfg = RansacConfig { inlier_threshold_px: thr, ..RansacConfig::default() };
            let res = ransac_pnp(&corrs, &k, &cfg, 9).unwrap();
            assert!(res.inlier_count >= last, "count dropped at {thr}");
            last = res.inlier_count;
        }
    }

    #[test]
    fn recovered_rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let k = default_k();
        for _ in 0..10 {
            let pose = random_pose(&mut rng);
            let pts = points_seen_by(&pose, &mut rng, 30);
            let corrs = corrs_for(&pose, &k, &pts);
            let res = ransac_pnp(&corrs, &k, &RansacConfig::default(), 3).unwrap();
            assert!(rotation_defect(&res.pose.r) < 1e-9);
        }
    }

    #[test]
    fn rigid_perturbation_of_world_shifts_pose_equivariantly() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let k = default_k();
        let pose = random_pose(&mut rng);
        let pts = points_seen_by(&pose, &mut rng, 20);
        let corrs = corrs_for(&pose, &k, &pts);

        let shift = random_pose(&mut rng);
        let moved: Vec<Correspondence<f64>> = corrs
            .iter()
            .map(|c| Correspondence {
                pixel: c.pixel,
                world: shift.camera_to_world(&c.world),
            })
            .collect();

        let est = dlt_pose(&corrs, &k).unwrap();
        let est_moved = dlt_pose(&moved, &k).unwrap();
        let expected = shift.compose(&est);
        let (dt, dr) = pose_errors(&est_moved, &expected);
        assert!(dt < 1e-6 && dr < 1e-5, "dt {dt}, dr {dr}");
    }

    #[test]
    fn pose_from_prediction_percentile_drop_counts() {
        // Uniform uncertainties: exactly ceil(0.2 * Q) cells dropped.
        let q = 16usize;
        let pose = Pose::identity();
        let k = default_k();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let pts = points_seen_by(&pose, &mut rng, q);
        let pixels = project(&pose, &k, &pts);
        let pred = CoordPrediction {
            coords: pts.iter().map(|p| [p.x, p.y, p.z]).collect(),
            uncert: vec![0.5; q],
            anchors: pixels.iter().map(|(px, _)| [px.x, px.y]).collect(),
            cells_h: 4,
            cells_w: 4,
        };
        let (est, diag) = pose_from_prediction(&pred, &k, &RansacConfig::default(), 1).unwrap();
        assert_eq!(diag.dropped_cells, (0.2f64 * q as f64).ceil() as usize);
        let (dt, _) = pose_errors(&est, &pose);
        assert!(dt < 1e-4);
    }

    #[test]
    fn pose_from_prediction_too_few_cells() {
        let pred = CoordPrediction::<f64> {
            coords: vec![[0.0; 3]; 3],
            uncert: vec![1.0; 3],
            anchors: vec![[0.0; 2]; 3],
            cells_h: 1,
            cells_w: 3,
        };
        assert!(matches!(
            pose_from_prediction(&pred, &default_k(), &RansacConfig::default(), 0),
            Err(GeomError::NotEnoughPoints { .. })
        ));
    }

    #[test]
    fn correspondence_csv_shape() {
        let pred = CoordPrediction::<f64> {
            coords: vec![[1.0, 2.0, 3.0]; 2],
            uncert: vec![0.1, 0.2],
            anchors: vec![[4.0, 4.0], [12.0, 4.0]],
            cells_h: 1,
            cells_w: 2,
        };
        let csv = correspondence_csv(&pred, Some(&[true, false]));
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "u,v,x,y,z,uncertainty,inlier_flag");
        assert!(lines[1].ends_with(",1"));
        assert!(lines[2].ends_with(",0"));
    }
}
