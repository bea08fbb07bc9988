//! Scene-coordinate likelihood loss and the total per-scene loss.

use crate::graph::{GraphBuilder, GraphError, NodeId};
use crate::model::CoordPrediction;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("no valid cells in the batch")]
    NoValidCells,
    #[error("prediction and ground truth disagree: {0}")]
    Mismatch(String),
    #[error("non-positive uncertainty {0}")]
    NonPositiveUncertainty(f64),
}

/// Appends the negative-log-likelihood coordinate loss to a graph:
/// `(1/Qv) * sum_valid(3*log(u) + ||d - d_hat||^2 / (2 u^2))`.
///
/// `coords` is `(N,3,h,w)`, `uncert` `(N,1,h,w)`, `gt` `(N,3,h,w)`, `mask`
/// `(N,1,h,w)` with 0/1 entries, and `valid_count` the number of valid
/// cells summed over the batch.
pub fn append_scene_coord_loss<T: Scalar>(
    g: &mut GraphBuilder<T>,
    coords: NodeId,
    uncert: NodeId,
    gt: NodeId,
    mask: NodeId,
    valid_count: f64,
) -> Result<NodeId, GraphError> {
    let resid = g.sub(coords, gt)?;
    let sq = g.square(resid);
    let ssq = g.chan_sum(sq)?;
    let u2 = g.square(uncert);
    let two_u2 = g.mul_const(u2, T::of(2.0));
    let ratio = g.div(ssq, two_u2)?;
    let logu = g.log(uncert);
    let logu3 = g.mul_const(logu, T::of(3.0));
    let cell = g.add(logu3, ratio)?;
    let masked = g.mul(cell, mask)?;
    let total = g.sum_all(masked);
    Ok(g.mul_const(total, T::of(1.0 / valid_count)))
}

/// Direct evaluation of the coordinate loss for a single prediction.
pub fn scene_coord_loss<T: Scalar>(
    pred: &CoordPrediction<T>,
    gt_coords: &[[T; 3]],
    valid: &[bool],
) -> Result<T, LossError> {
    if gt_coords.len() != pred.len() || valid.len() != pred.len() {
        return Err(LossError::Mismatch(format!(
            "pred {} cells, gt {}, mask {}",
            pred.len(),
            gt_coords.len(),
            valid.len()
        )));
    }
    let qv = valid.iter().filter(|v| **v).count();
    if qv == 0 {
        return Err(LossError::NoValidCells);
    }
    let mut total = T::zero();
    for q in 0..pred.len() {
        if !valid[q] {
            continue;
        }
        let u = pred.uncert[q];
        if u <= T::zero() {
            return Err(LossError::NonPositiveUncertainty(u.to_f64c()));
        }
        let mut r2 = T::zero();
        for a in 0..3 {
            let d = gt_coords[q][a] - pred.coords[q][a];
            r2 += d * d;
        }
        total += T::of(3.0) * u.ln() + r2 / (T::of(2.0) * u * u);
    }
    Ok(total / T::of(qv as f64))
}

/// Total per-scene loss: coordinate loss plus `beta` times the penalty.
pub fn total_loss<T: Scalar>(sc_loss: T, penalty: T, beta: T) -> T {
    sc_loss + beta * penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{finite_diff_check, GraphBuilder};
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn pred_of(coords: Vec<[f64; 3]>, uncert: Vec<f64>) -> CoordPrediction<f64> {
        let n = coords.len();
        CoordPrediction {
            coords,
            uncert,
            anchors: vec![[0.0, 0.0]; n],
            cells_h: 1,
            cells_w: n,
        }
    }

    #[test]
    fn exact_prediction_unit_uncertainty_is_zero() {
        let pred = pred_of(vec![[1.0, 2.0, 3.0]], vec![1.0]);
        let loss = scene_coord_loss(&pred, &[[1.0, 2.0, 3.0]], &[true]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn unit_uncertainty_squared_residual_two_gives_one() {
        // ||d - d_hat||^2 = 2 with u = 1: 3*log(1) + 2/2 = 1.
        let pred = pred_of(vec![[1.0, 0.0, 0.0]], vec![1.0]);
        let loss = scene_coord_loss(&pred, &[[0.0, 1.0, 0.0]], &[true]).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_minimizer_is_residual_over_sqrt3() {
        // For fixed residual r, d/du [3 log u + r^2/(2u^2)] = 3/u - r^2/u^3,
        // zero at u* = r/sqrt(3). Check the gradient vanishes there.
        let r: f64 = 0.9;
        let u_star = r / 3.0f64.sqrt();
        let term = |u: f64| 3.0 * u.ln() + r * r / (2.0 * u * u);
        let h = 1e-6;
        let grad = (term(u_star + h) - term(u_star - h)) / (2.0 * h);
        assert!(grad.abs() < 1e-6, "grad at u* = {grad}");
        // And it is a minimum: nearby values are larger.
        assert!(term(u_star * 1.1) > term(u_star));
        assert!(term(u_star * 0.9) > term(u_star));
    }

    #[test]
    fn all_invalid_cells_is_an_error() {
        let pred = pred_of(vec![[0.0; 3]; 2], vec![1.0, 1.0]);
        let err = scene_coord_loss(&pred, &[[0.0; 3]; 2], &[false, false]).unwrap_err();
        assert!(matches!(err, LossError::NoValidCells));
    }

    #[test]
    fn non_positive_uncertainty_is_an_error() {
        let pred = pred_of(vec![[0.0; 3]], vec![0.0]);
        let err = scene_coord_loss(&pred, &[[0.0; 3]], &[true]).unwrap_err();
        assert!(matches!(err, LossError::NonPositiveUncertainty(_)));
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0f64, 0.4, 0.25) - 1.1).abs() < 1e-15);
        assert_eq!(total_loss(0.7f64, 0.4, 0.0), 0.7);
        assert_eq!(total_loss(0.7f64, 0.0, 0.25), 0.7);
    }

    #[test]
    fn graph_loss_matches_direct_evaluation_and_finite_diff() {
        // 1x3x1x2 prediction with one masked cell.
        let mut g = GraphBuilder::<f64>::new();
        let coords = g.input("coords", &[1, 3, 1, 2], true).unwrap();
        let uncert = g.input("uncert", &[1, 1, 1, 2], true).unwrap();
        let gt = g.input("gt", &[1, 3, 1, 2], false).unwrap();
        let mask = g.input("mask", &[1, 1, 1, 2], false).unwrap();
        let loss = append_scene_coord_loss(&mut g, coords, uncert, gt, mask, 1.0).unwrap();
        let g = g.finish();

        // Channel-major layout: coords[c][cell].
        let coords_t = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.5, 0.0, -0.3, 0.2, 0.9])
            .unwrap()
            .with_grad(true);
        let uncert_t = Tensor::new(vec![1, 1, 1, 2], vec![0.8, 1.3]).unwrap().with_grad(true);
        let gt_t = Tensor::new(vec![1, 3, 1, 2], vec![0.9, 0.0, 0.2, 0.0, 0.1, 0.0]).unwrap();
        let mask_t = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();

        let mut bmap = BTreeMap::new();
        bmap.insert("coords".to_string(), coords_t.clone());
        bmap.insert("uncert".to_string(), uncert_t.clone());
        bmap.insert("gt".to_string(), gt_t.clone());
        bmap.insert("mask".to_string(), mask_t.clone());

        let mut b = crate::graph::Bindings::new();
        b.bind("coords", &coords_t);
        b.bind("uncert", &uncert_t);
        b.bind("gt", &gt_t);
        b.bind("mask", &mask_t);
        let eval = g.evaluate(&b).unwrap();
        let got = eval.value(loss).item().unwrap();

        // Direct arithmetic over the single valid cell (cell 0).
        let r2 = (1.0f64 - 0.9).powi(2) + (0.0f64 - 0.2).powi(2) + (0.2f64 - 0.1).powi(2);
        let want = 3.0 * 0.8f64.ln() + r2 / (2.0 * 0.8 * 0.8);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");

        let err = finite_diff_check(&g, &bmap, loss, 1e-5).unwrap();
        assert!(err <= 1e-5, "finite-diff error {err}");
    }
}
