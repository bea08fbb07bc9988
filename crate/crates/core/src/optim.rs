//! Gradient-magnitude normalization across tasks and the AdamW update.
//!
//! Each task's shared-parameter gradient is treated as one concatenated
//! vector. Per iteration the tasks' gradient norms are combined into a
//! common scale `D` weighted by each task's relative convergence (current
//! norm over previous norm); every task's shared gradient is rescaled to
//! norm `D` and the rescaled gradients are averaged in task order.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite loss on batch {batch}")]
    NonFiniteLoss { batch: String },
    #[error("non-finite update for `{key}`; parameters left unmodified")]
    NonFiniteUpdate { key: String },
    #[error("degenerate iteration: all task gradient ratios are zero")]
    AllRatiosZero,
    #[error("task gradient maps disagree on `{key}`")]
    GradKeyMismatch { key: String },
    #[error("batch of {batch} does not split into {workers} equal worker shards")]
    BatchNotDivisible { batch: usize, workers: usize },
    #[error("batch {batch} has no valid cells")]
    NoValidCells { batch: String },
}

/// Gradient tensors keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// L2 norm of a gradient map viewed as one concatenated vector, in key
/// order.
pub fn grad_map_norm<T: Scalar>(map: &GradMap<T>) -> T {
    map.values()
        .flat_map(|t| t.iter())
        .map(|v| *v * *v)
        .fold(T::zero(), |a, b| a + b)
        .sqrt()
}

/// Optimizer settings for one run.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Loss weight reconciling the coordinate loss and the penalty.
    pub beta: f64,
    pub seed: u64,
    /// `None` uses the raw previous-iteration norm in the relative weights
    /// (the default); `Some(f)` smooths it with an exponential moving
    /// average of factor `f`.
    pub grad_ema: Option<f64>,
    /// Data-parallel workers per task; their gradients are averaged before
    /// the cross-task normalization.
    pub workers_per_task: usize,
    /// Disables the norm rescaling (plain averaging) for the ablation.
    pub grad_norm: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            iterations: 10_000,
            batch_size: 4,
            beta: 0.25,
            seed: 7,
            grad_ema: None,
            workers_per_task: 1,
            grad_norm: true,
        }
    }
}

/// Per-task state carried across iterations for the relative weights.
#[derive(Debug, Clone, Default)]
pub struct TaskGradState<T> {
    /// Previous shared-gradient norm; `None` makes the next ratio 1 (first
    /// iteration, or recovery after a zero-norm iteration).
    pub prev_shared_norm: Option<T>,
}

/// Relative convergence weights: `W_n = r_n / sum_j r_j` with
/// `r_n = |G_n| / |G_(n,prev)|`, where an undefined previous norm gives
/// ratio 1 and a zero current norm gives ratio 0.
pub fn relative_weights<T: Scalar>(
    current_norms: &[T],
    prev_norms: &[Option<T>],
) -> Result<Vec<T>, OptimError> {
    let ratios: Vec<T> = current_norms
        .iter()
        .zip(prev_norms)
        .map(|(curr, prev)| {
            if *curr == T::zero() {
                T::zero()
            } else {
                match prev {
                    Some(p) if *p > T::zero() => *curr / *p,
                    _ => T::one(),
                }
            }
        })
        .collect();
    let total: T = ratios.iter().copied().fold(T::zero(), |a, b| a + b);
    if total == T::zero() {
        return Err(OptimError::AllRatiosZero);
    }
    Ok(ratios.into_iter().map(|r| r / total).collect())
}

/// Common gradient scale `D = sum_n W_n * |G_n|`.
pub fn common_scale<T: Scalar>(current_norms: &[T], weights: &[T]) -> T {
    current_norms
        .iter()
        .zip(weights)
        .map(|(n, w)| *n * *w)
        .fold(T::zero(), |a, b| a + b)
}

/// Rescales a task's shared gradient to norm `D`, preserving direction. A
/// zero-norm gradient stays zero.
pub fn normalize_shared<T: Scalar>(grads: &mut GradMap<T>, norm: T, scale: T) {
    if norm == T::zero() {
        return;
    }
    let factor = scale / norm;
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= factor;
        }
    }
}

/// Averages the tasks' (rescaled) shared gradients in task order.
pub fn aggregate_shared<T: Scalar>(maps: &[GradMap<T>]) -> Result<GradMap<T>, OptimError> {
    let first = &maps[0];
    let inv_n = T::one() / T::of(maps.len() as f64);
    let mut out: GradMap<T> = first
        .iter()
        .map(|(k, v)| {
            let data = v.iter().map(|x| *x * inv_n).collect();
            (
                k.clone(),
                Tensor::new(v.shape().to_vec(), data).expect("aggregate shape"),
            )
        })
        .collect();
    for map in &maps[1..] {
        for (k, v) in map {
            let acc = out.get_mut(k).ok_or_else(|| OptimError::GradKeyMismatch { key: k.clone() })?;
            if acc.shape() != v.shape() {
                return Err(OptimError::GradKeyMismatch { key: k.clone() });
            }
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += *b * inv_n;
            }
        }
        if map.len() != out.len() {
            let missing = out.keys().find(|k| !map.contains_key(*k)).cloned().unwrap_or_default();
            return Err(OptimError::GradKeyMismatch { key: missing });
        }
    }
    Ok(out)
}

/// Cosine-annealed learning rate over `total` iterations.
pub fn cosine_lr(base: f64, iteration: usize, total: usize) -> f64 {
    let t = (iteration as f64 / total.max(1) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: usize,
}

/// Adam with decoupled weight decay. Decay applies only to weight matrices
/// and kernels (keys ending in `.w`); biases, normalization parameters, and
/// gate scores are exempt.
#[derive(Debug, Clone, Default)]
pub struct AdamW<T> {
    state: BTreeMap<String, Moments<T>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        Self { state: BTreeMap::new() }
    }

    /// Computes the update (without applying it) for one parameter.
    /// Advances the moment state.
    pub fn delta(&mut self, key: &str, param: &Tensor<T>, grad: &Tensor<T>, lr: f64, weight_decay: f64) -> Vec<T> {
        let n = param.numel();
        let st = self.state.entry(key.to_string()).or_insert_with(|| Moments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        });
        st.step += 1;
        let b1 = T::of(ADAM_BETA1);
        let b2 = T::of(ADAM_BETA2);
        let eps = T::of(ADAM_EPS);
        let bc1 = T::one() - T::of(ADAM_BETA1.powi(st.step as i32));
        let bc2 = T::one() - T::of(ADAM_BETA2.powi(st.step as i32));
        let lr_t = T::of(lr);
        let wd = if key.ends_with(".w") { T::of(weight_decay) } else { T::zero() };
        let mut delta = vec![T::zero(); n];
        for i in 0..n {
            let g = grad.data()[i];
            st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
            st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            delta[i] = -lr_t * (mhat / (vhat.sqrt() + eps) + wd * param.data()[i]);
        }
        delta
    }
}
