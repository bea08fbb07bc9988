//! Layer-adaptive sharing policy.
//!
//! Every gated layer holds a task-shared weight `w`, lazily materialized
//! per-task weights `w~`, and a single task-shared score `s`. An indicator
//! on the score picks the branch used this iteration: `s >= lambda` selects
//! the task-specific branch, otherwise the shared one. Only the selected
//! branch receives task-loss gradients; the score itself learns through a
//! straight-through surrogate plus a mean-absolute penalty that pulls
//! layers toward the shared state.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SharingError {
    #[error("gate score is not finite")]
    NonFiniteScore,
    #[error("penalty loss over an empty score set")]
    EmptyScores,
}

/// Indicator on the score: 0 selects the task-specific branch, 1 the shared
/// one. The inequality is inclusive, so a score exactly at the threshold
/// resolves to task-specific.
pub fn gate<T: Scalar>(score: T, lambda: T) -> Result<u8, SharingError> {
    if !score.is_finite() {
        return Err(SharingError::NonFiniteScore);
    }
    Ok(if score >= lambda { 0 } else { 1 })
}

/// Mean absolute value over all layer scores; identical from every task's
/// view because the scores are task-shared.
pub fn penalty_loss<T: Scalar>(scores: &[T]) -> Result<T, SharingError> {
    if scores.is_empty() {
        return Err(SharingError::EmptyScores);
    }
    let sum = scores.iter().fold(T::zero(), |acc, s| acc + s.abs());
    Ok(sum / T::of(scores.len() as f64))
}

/// Straight-through surrogate gradient of the task loss with respect to a
/// layer score.
///
/// The indicator's surrogate derivative is `-1` inside the band
/// `|s - lambda| <= band` and zero outside, which yields
/// `grad_s = -1[band] * <upstream_grad, w - w_specific>` accumulated over
/// the weight and bias. When the task never materialized a specific branch
/// there is no alternative to compare against and the term is zero.
pub fn score_straight_through<T: Scalar>(
    score: T,
    lambda: T,
    band: T,
    upstream: &[(&Tensor<T>, &Tensor<T>, Option<&Tensor<T>>)],
) -> T {
    if (score - lambda).abs() > band {
        return T::zero();
    }
    let mut inner = T::zero();
    for (grad, shared, specific) in upstream {
        let Some(specific) = specific else { continue };
        for ((g, w), wt) in grad.iter().zip(shared.iter()).zip(specific.iter()) {
            inner += *g * (*w - *wt);
        }
    }
    -inner
}

/// Per-layer entry of a [`SharingReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerShare {
    pub name: String,
    pub score: f64,
    pub shared: bool,
}

/// Parameter accounting for one model bundle.
///
/// `shared_params` counts each task-shared tensor once (gated shared
/// branches and scores); `specific_params` counts, per task, the parameters
/// only that task deploys: specific branches of currently task-specific
/// layers, normalization, attention gates, and the regression head. Stale
/// specific branches of layers that returned to the shared state are kept
/// in memory during training but are not deployable storage and are not
/// counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharingReport {
    pub layers: Vec<LayerShare>,
    pub shared_params: usize,
    pub specific_params: std::collections::BTreeMap<String, usize>,
}

impl SharingReport {
    pub fn total_params(&self) -> usize {
        self.shared_params + self.specific_params.values().sum::<usize>()
    }

    pub fn shared_layer_fraction(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        let shared = self.layers.iter().filter(|l| l.shared).count();
        shared as f64 / self.layers.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}
