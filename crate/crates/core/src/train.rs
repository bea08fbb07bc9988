//! Multi-task training loop: one worker per task computes its loss and
//! gradients concurrently, a barrier collects the shared-gradient norms,
//! the cross-task normalization runs once globally, and a single writer
//! applies the updates. Task ordering is fixed in every reduction so runs
//! are bit-reproducible.

use rayon::prelude::*;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::{pose_from_prediction, RansacConfig};
use crate::metrics::{rotation_error_deg, PoseError};
use crate::model::{LossSpec, Mode, ModelBundle, ModelError};
use crate::optim::{
    aggregate_shared, common_scale, cosine_lr, grad_map_norm, normalize_shared, relative_weights,
    AdamW, GradMap, OptimError, OptimizerConfig,
};
use crate::scalar::Scalar;
use crate::sharing::score_straight_through;
use crate::sim::RenderedView;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error("pose estimation failed on frame {frame}: {source}")]
    Pose {
        frame: usize,
        source: crate::geom::GeomError,
    },
}

/// One task's training batch: stacked images, ground-truth coordinate maps,
/// validity mask, and a human-readable id for error reports.
#[derive(Debug, Clone)]
pub struct TaskBatch<T> {
    pub x: Tensor<T>,
    pub gt: Tensor<T>,
    pub mask: Tensor<T>,
    pub valid_count: f64,
    pub id: String,
}

impl<T: Scalar> TaskBatch<T> {
    /// Splits along the batch axis into equal worker shards.
    pub fn split(&self, workers: usize) -> Result<Vec<TaskBatch<T>>, OptimError> {
        let n = self.x.shape()[0];
        if workers <= 1 {
            return Ok(vec![self.clone()]);
        }
        if n % workers != 0 {
            return Err(OptimError::BatchNotDivisible { batch: n, workers });
        }
        let per = n / workers;
        let slice4 = |t: &Tensor<T>, from: usize, count: usize| {
            let stride: usize = t.shape()[1..].iter().product();
            let data = t.data()[from * stride..(from + count) * stride].to_vec();
            let mut shape = t.shape().to_vec();
            shape[0] = count;
            Tensor::new(shape, data).expect("shard shape")
        };
        Ok((0..workers)
            .map(|wi| {
                let x = slice4(&self.x, wi * per, per);
                let gt = slice4(&self.gt, wi * per, per);
                let mask = slice4(&self.mask, wi * per, per);
                let valid_count = mask.iter().map(|v| v.to_f64c()).sum();
                TaskBatch {
                    x,
                    gt,
                    mask,
                    valid_count,
                    id: format!("{}/shard{wi}", self.id),
                }
            })
            .collect())
    }
}

/// Stacks dataset views into a [`TaskBatch`].
pub fn assemble_batch<T: Scalar>(
    views: &[RenderedView<T>],
    indices: &[usize],
    id: String,
) -> Result<TaskBatch<T>, OptimError> {
    let n = indices.len();
    let (c, h, w) = {
        let s = views[indices[0]].image.shape();
        (s[0], s[1], s[2])
    };
    let q = views[indices[0]].cells();
    let mut x = vec![T::zero(); n * c * h * w];
    let mut gt = vec![T::zero(); n * 3 * q];
    let mut mask = vec![T::zero(); n * q];
    let mut valid_count = 0usize;
    for (bi, &vi) in indices.iter().enumerate() {
        let view = &views[vi];
        x[bi * c * h * w..(bi + 1) * c * h * w].copy_from_slice(view.image.data());
        for cell in 0..q {
            for a in 0..3 {
                gt[(bi * 3 + a) * q + cell] = view.gt_coords[cell][a];
            }
            if view.valid[cell] {
                mask[bi * q + cell] = T::one();
                valid_count += 1;
            }
        }
    }
    if valid_count == 0 {
        return Err(OptimError::NoValidCells { batch: id });
    }
    let (hc, wc) = (h / crate::model::DOWNSAMPLE, w / crate::model::DOWNSAMPLE);
    Ok(TaskBatch {
        x: Tensor::new(vec![n, c, h, w], x).expect("batch image"),
        gt: Tensor::new(vec![n, 3, hc, wc], gt).expect("batch gt"),
        mask: Tensor::new(vec![n, 1, hc, wc], mask).expect("batch mask"),
        valid_count: valid_count as f64,
        id,
    })
}

/// One task's gradients and diagnostics for one iteration.
#[derive(Debug)]
pub struct TaskComputation<T> {
    pub loss: f64,
    pub sc_loss: f64,
    pub penalty: f64,
    /// Shared-side gradients (`sh.` keys, scores included).
    pub shared_grads: GradMap<T>,
    /// Task-side gradients (`sp.` keys).
    pub specific_grads: GradMap<T>,
    pub norm_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

/// Forward/backward for one task on one batch, with the data-parallel
/// sub-reduction across `workers_per_task` shards and the straight-through
/// score gradients folded into the shared side.
pub fn compute_task_gradients<T: Scalar>(
    bundle: &ModelBundle<T>,
    task: usize,
    batch: &TaskBatch<T>,
    beta: f64,
    workers_per_task: usize,
) -> Result<TaskComputation<T>, TrainError> {
    let shards = batch.split(workers_per_task)?;
    let inv = 1.0 / shards.len() as f64;
    let mut agg: Option<TaskComputation<T>> = None;

    for shard in &shards {
        let shape = shard.x.shape();
        let tg = bundle.build_graph(
            task,
            shape[0],
            shape[2],
            shape[3],
            Mode::Train,
            Some(LossSpec {
                beta,
                valid_count: shard.valid_count,
            }),
        )?;
        let mut b = crate::graph::Bindings::new();
        bundle.bind_params(task, &mut b);
        b.bind("x", &shard.x);
        b.bind("gt", &shard.gt);
        b.bind("mask", &shard.mask);
        let eval = tg.graph.evaluate(&b)?;

        let loss_node = tg.loss.expect("loss graph requested");
        let loss = eval.value(loss_node).item().expect("scalar loss").to_f64c();
        if !loss.is_finite() {
            return Err(OptimError::NonFiniteLoss { batch: shard.id.clone() }.into());
        }
        let sc_loss = tg
            .sc_loss
            .map(|n| eval.value(n).item().expect("scalar").to_f64c())
            .unwrap_or(loss);
        let penalty = tg
            .penalty
            .map(|n| eval.value(n).item().expect("scalar").to_f64c())
            .unwrap_or(0.0);

        let mut grads = tg.graph.backward(&eval, loss_node, None)?;

        // Straight-through score gradients from the selected branches.
        let cfg = bundle.config();
        for gu in &tg.gate_uses {
            let score_key = format!("sh.score/{}", gu.layer);
            if !grads.contains_key(&score_key) {
                continue; // scores frozen or not declared
            }
            let s = bundle.score(&gu.layer).expect("gated layer score");
            let mut pairs = Vec::new();
            for (sel, shared_key, spec_key) in &gu.params {
                let Some(g) = grads.get(sel) else { continue };
                let shared = &bundle.shared_params()[shared_key];
                let spec = bundle.task_params(task).get(spec_key);
                pairs.push((g, shared, spec));
            }
            let st = score_straight_through(s, T::of(cfg.lambda), T::of(cfg.st_band), &pairs);
            drop(pairs);
            if let Some(t) = grads.get_mut(&score_key) {
                t.data_mut()[0] += st;
            }
        }

        // Collect batch-normalization statistics for the running buffers.
        let mut norm_stats = Vec::new();
        for (prefix, node) in &tg.norm_nodes {
            let st = eval.batch_stats(*node).expect("train-mode norm node");
            norm_stats.push((prefix.clone(), st.mean.clone(), st.var.clone()));
        }

        let mut shared_grads = GradMap::new();
        let mut specific_grads = GradMap::new();
        for (k, v) in grads {
            if k.starts_with("sh.") {
                shared_grads.insert(k, v);
            } else if k.starts_with("sp.") {
                specific_grads.insert(k, v);
            }
        }

        let shard_comp = TaskComputation {
            loss,
            sc_loss,
            penalty,
            shared_grads,
            specific_grads,
            norm_stats,
        };
        agg = Some(match agg.take() {
            None => shard_comp,
            Some(mut acc) => {
                acc.loss += shard_comp.loss;
                acc.sc_loss += shard_comp.sc_loss;
                acc.penalty += shard_comp.penalty;
                for (k, v) in shard_comp.shared_grads {
                    let t = acc.shared_grads.get_mut(&k).expect("same key set per shard");
                    for (a, b) in t.data_mut().iter_mut().zip(v.data()) {
                        *a += *b;
                    }
                }
                for (k, v) in shard_comp.specific_grads {
                    let t = acc.specific_grads.get_mut(&k).expect("same key set per shard");
                    for (a, b) in t.data_mut().iter_mut().zip(v.data()) {
                        *a += *b;
                    }
                }
                for (s, o) in acc.norm_stats.iter_mut().zip(shard_comp.norm_stats) {
                    for (a, b) in s.1.iter_mut().zip(o.1) {
                        *a += b;
                    }
                    for (a, b) in s.2.iter_mut().zip(o.2) {
                        *a += b;
                    }
                }
                acc
            }
        });
    }

    let mut comp = agg.expect("at least one shard");
    if shards.len() > 1 {
        let inv_t = T::of(inv);
        comp.loss *= inv;
        comp.sc_loss *= inv;
        comp.penalty *= inv;
        for t in comp.shared_grads.values_mut().chain(comp.specific_grads.values_mut()) {
            for v in t.data_mut() {
                *v *= inv_t;
            }
        }
        for (_, mean, var) in &mut comp.norm_stats {
            for v in mean.iter_mut().chain(var.iter_mut()) {
                *v *= inv_t;
            }
        }
    }
    Ok(comp)
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub lr: f64,
    pub common_scale: f64,
    pub per_task: Vec<TaskLogEntry>,
}

#[derive(Debug, Clone)]
pub struct TaskLogEntry {
    pub loss: f64,
    pub shared_norm: f64,
    pub weight: f64,
}

pub fn train_log_header(task_names: &[String]) -> String {
    let mut cols = vec!["iteration".to_string(), "lr".to_string(), "d".to_string()];
    for name in task_names {
        cols.push(format!("loss_{name}"));
        cols.push(format!("gsh_norm_{name}"));
        cols.push(format!("w_{name}"));
    }
    cols.join(",")
}

impl TrainLogRow {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.iteration.to_string(),
            format!("{:.8e}", self.lr),
            format!("{:.8e}", self.common_scale),
        ];
        for t in &self.per_task {
            cols.push(format!("{:.8e}", t.loss));
            cols.push(format!("{:.8e}", t.shared_norm));
            cols.push(format!("{:.6}", t.weight));
        }
        cols.join(",")
    }
}

/// Multi-task trainer state: AdamW moments per parameter scope and the
/// previous shared-gradient norms for the relative weights. Steps may
/// cover a subset of the bundle's tasks (the generalization recipe trains
/// only the added task); state is keyed by bundle task index.
pub struct Trainer<T: Scalar> {
    pub config: OptimizerConfig,
    adam_shared: AdamW<T>,
    adam_task: Vec<AdamW<T>>,
    prev_norms: Vec<Option<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: OptimizerConfig, n_tasks: usize) -> Self {
        Self {
            config,
            adam_shared: AdamW::new(),
            adam_task: (0..n_tasks).map(|_| AdamW::new()).collect(),
            prev_norms: vec![None; n_tasks],
        }
    }

    /// Runs one synchronized iteration over `(task index, batch)` pairs.
    pub fn step(
        &mut self,
        bundle: &mut ModelBundle<T>,
        batches: &[(usize, TaskBatch<T>)],
        iteration: usize,
    ) -> Result<TrainLogRow, TrainError> {
        let lr = cosine_lr(self.config.learning_rate, iteration, self.config.iterations);

        // Materialization is exclusive; do it before the parallel section.
        for (task, _) in batches {
            bundle.materialize_specific(*task)?;
        }

        // One worker per task.
        let beta = self.config.beta;
        let wpt = self.config.workers_per_task.max(1);
        let shared_view: &ModelBundle<T> = bundle;
        let comps: Vec<TaskComputation<T>> = batches
            .par_iter()
            .map(|(task, batch)| compute_task_gradients(shared_view, *task, batch, beta, wpt))
            .collect::<Result<Vec<_>, _>>()?;
        let n_tasks = batches.len();

        // Cross-task gradient normalization over the shared parameters. An
        // iteration where every task's shared gradient is exactly zero has
        // nothing to normalize or update (for example beta = 0 right after
        // materialization, when only zero straight-through terms remain).
        let mut comps = comps;
        let norms: Vec<T> = comps.iter().map(|c| grad_map_norm(&c.shared_grads)).collect();
        let has_shared = !bundle.frozen_shared()
            && comps.iter().any(|c| !c.shared_grads.is_empty())
            && norms.iter().any(|n| *n > T::zero());

        let prev: Vec<Option<T>> = batches.iter().map(|(t, _)| self.prev_norms[*t]).collect();
        let (weights, scale) = if has_shared {
            if self.config.grad_norm {
                let w = relative_weights(&norms, &prev)?;
                let d = common_scale(&norms, &w);
                for (comp, norm) in comps.iter_mut().zip(&norms) {
                    normalize_shared(&mut comp.shared_grads, *norm, d);
                }
                (w, d)
            } else {
                // Ablation: plain averaging, no rescale.
                let w = vec![T::one() / T::of(n_tasks as f64); n_tasks];
                let d = norms.iter().copied().fold(T::zero(), |a, b| a + b) / T::of(n_tasks as f64);
                (w, d)
            }
        } else {
            (vec![T::zero(); n_tasks], T::zero())
        };

        // Compute all updates before touching the bundle.
        let mut shared_updates: Vec<(String, Vec<T>)> = Vec::new();
        if has_shared {
            let aggregated = aggregate_shared(&comps.iter().map(|c| c.shared_grads.clone()).collect::<Vec<_>>())?;
            for (key, grad) in &aggregated {
                let store_key = key.trim_start_matches("sh.").to_string();
                let param = &bundle.shared_params()[&store_key];
                let delta = self.adam_shared.delta(&store_key, param, grad, lr, self.config.weight_decay);
                if delta.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteUpdate { key: store_key }.into());
                }
                shared_updates.push((store_key, delta));
            }
        }
        let mut task_updates: Vec<Vec<(String, Vec<T>)>> = Vec::with_capacity(n_tasks);
        for ((task, _), comp) in batches.iter().zip(&comps) {
            let mut ups = Vec::new();
            for (key, grad) in &comp.specific_grads {
                let store_key = key.trim_start_matches("sp.").to_string();
                let param = &bundle.task_params(*task)[&store_key];
                let delta = self.adam_task[*task].delta(&store_key, param, grad, lr, self.config.weight_decay);
                if delta.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteUpdate { key: store_key }.into());
                }
                ups.push((store_key, delta));
            }
            task_updates.push(ups);
        }

        // Single writer applies everything.
        for (key, delta) in &shared_updates {
            let param = bundle.shared_params_mut().get_mut(key).expect("shared key");
            for (p, d) in param.data_mut().iter_mut().zip(delta) {
                *p += *d;
            }
        }
        for (((task, _), ups), comp) in batches.iter().zip(&task_updates).zip(&comps) {
            for (key, delta) in ups {
                let param = bundle.task_params_mut(*task).get_mut(key).expect("task key");
                for (p, d) in param.data_mut().iter_mut().zip(delta) {
                    *p += *d;
                }
            }
            bundle.update_norm_stats(*task, &comp.norm_stats);
        }

        // Roll the previous norms forward (raw mode reproduces the
        // per-iteration ratio; EMA mode smooths it).
        for ((task, _), norm) in batches.iter().zip(&norms) {
            let slot = &mut self.prev_norms[*task];
            if *norm == T::zero() {
                *slot = None;
            } else {
                *slot = Some(match (self.config.grad_ema, *slot) {
                    (Some(f), Some(prev)) => {
                        let f = T::of(f);
                        f * prev + (T::one() - f) * *norm
                    }
                    _ => *norm,
                });
            }
        }

        Ok(TrainLogRow {
            iteration,
            lr,
            common_scale: scale.to_f64c(),
            per_task: comps
                .iter()
                .zip(&norms)
                .zip(&weights)
                .map(|((c, n), w)| TaskLogEntry {
                    loss: c.loss,
                    shared_norm: n.to_f64c(),
                    weight: w.to_f64c(),
                })
                .collect(),
        })
    }
}

/// Deterministic per-task batch index streams.
pub struct BatchSampler {
    rngs: Vec<ChaCha8Rng>,
    batch_size: usize,
}

impl BatchSampler {
    /// One stream per bundle task, derived from the run seed and the task
    /// index (so a task's stream does not depend on which tasks train).
    pub fn new(seed: u64, n_tasks: usize, batch_size: usize) -> Self {
        Self {
            rngs: (0..n_tasks)
                .map(|t| ChaCha8Rng::seed_from_u64(seed ^ (0xB47C4 + t as u64)))
                .collect(),
            batch_size,
        }
    }

    pub fn sample<T: Scalar>(
        &mut self,
        task: usize,
        views: &[RenderedView<T>],
        iteration: usize,
    ) -> Result<TaskBatch<T>, OptimError> {
        let indices: Vec<usize> = (0..self.batch_size)
            .map(|_| self.rngs[task].random_range(0..views.len()))
            .collect();
        let id = format!("iter{iteration}/task{task}/{indices:?}");
        assemble_batch(views, &indices, id)
    }
}

/// Trains a bundle on `(task index, views)` pairs for `config.iterations`
/// steps, sampling `batch_size` views per task per iteration. Returns the
/// training log.
pub fn train_tasks<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    datasets: &[(usize, &[RenderedView<T>])],
    config: &OptimizerConfig,
) -> Result<Vec<TrainLogRow>, TrainError> {
    let mut trainer = Trainer::new(config.clone(), bundle.tasks().len());
    let mut sampler = BatchSampler::new(config.seed, bundle.tasks().len(), config.batch_size);
    let mut log = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let mut batches = Vec::with_capacity(datasets.len());
        for (task, views) in datasets {
            batches.push((*task, sampler.sample(*task, views, iter)?));
        }
        log.push(trainer.step(bundle, &batches, iter)?);
    }
    Ok(log)
}

/// [`train_tasks`] over all tasks in order.
pub fn train<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    datasets: &[Vec<RenderedView<T>>],
    config: &OptimizerConfig,
) -> Result<Vec<TrainLogRow>, TrainError> {
    let pairs: Vec<(usize, &[RenderedView<T>])> = datasets
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.as_slice()))
        .collect();
    train_tasks(bundle, &pairs, config)
}

/// Per-frame evaluation outcome. Frames with no RANSAC consensus are
/// reported unsolved with the sentinel error below (a miss for every
/// accuracy threshold, and safely serializable).
#[derive(Debug, Clone)]
pub struct FrameEval {
    pub error: PoseError<f64>,
    pub inliers: usize,
    pub dropped: usize,
    pub solved: bool,
}

/// Translation error in meters assigned to unsolved frames.
pub const UNSOLVED_TRANSLATION_M: f64 = 1e6;

/// Runs the full two-stage pipeline (dense prediction then RANSAC-PnP) on
/// every view and reports per-frame pose errors. Frames where no pose
/// reaches consensus count as misses with infinite translation error.
pub fn evaluate_task<T: Scalar>(
    bundle: &ModelBundle<T>,
    task_name: &str,
    views: &[RenderedView<T>],
    ransac: &RansacConfig,
    seed: u64,
) -> Result<Vec<FrameEval>, TrainError> {
    views
        .par_iter()
        .enumerate()
        .map(|(idx, view)| {
            let shape = view.image.shape();
            let mut data = Vec::with_capacity(view.image.numel());
            data.extend_from_slice(view.image.data());
            let image = Tensor::new(vec![1, shape[0], shape[1], shape[2]], data).expect("image batch");
            let pred = bundle.forward(task_name, &image)?;
            let k = view.intrinsics;
            match pose_from_prediction(&pred, &k, ransac, seed ^ (idx as u64).wrapping_mul(0x9E37)) {
                Ok((pose, diag)) => {
                    let rot = rotation_error_deg(&pose.r, &view.gt_pose.r)
                        .map(|v| v.to_f64c())
                        .unwrap_or(180.0);
                    let trans = (pose.t - view.gt_pose.t).norm().to_f64c();
                    Ok(FrameEval {
                        error: PoseError {
                            translation_m: trans,
                            rotation_deg: rot,
                        },
                        inliers: diag.inlier_count,
                        dropped: diag.dropped_cells,
                        solved: true,
                    })
                }
                Err(_) => Ok(FrameEval {
                    error: PoseError {
                        translation_m: UNSOLVED_TRANSLATION_M,
                        rotation_deg: 180.0,
                    },
                    inliers: 0,
                    dropped: 0,
                    solved: false,
                }),
            }
        })
        .collect()
}
