//! The multi-scene coordinate-regression network.
//!
//! A small convolutional backbone downsamples the input by a factor of 8
//! (stride-2 pre-layer, four two-conv blocks with strides 1,1,2,2). Backbone
//! convolutions are gated between task-shared and task-specific weights by
//! learnable scores; normalization layers and channel-attention gates are
//! task-specific; every task owns its regression head, which emits three
//! coordinate channels plus one uncertainty channel per stride-8 cell.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Bindings, Graph, GraphBuilder, GraphError, NodeId};
use crate::scalar::Scalar;
use crate::sharing::{gate, LayerShare, SharingError, SharingReport};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("duplicate task `{0}`")]
    DuplicateTask(String),
    #[error("image size {h}x{w} is not divisible by 8")]
    BadImageSize { h: usize, w: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
}

/// Which active layers are gated by scores, per the sharing-strategy
/// ablation: everything shared, everything gated, or convolutions gated
/// with normalization pinned task-specific.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingStrategy {
    AllShared,
    GatedAll,
    GatedConvSpecificNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub pre_width: usize,
    pub widths: [usize; 4],
    pub strides: [usize; 4],
    pub attention: bool,
    pub se_reduction: usize,
    pub head_hidden: usize,
    pub lambda: f64,
    pub score_init: f64,
    pub uncert_floor: f64,
    pub strategy: SharingStrategy,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub st_band: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            pre_width: 16,
            widths: [16, 16, 32, 32],
            strides: [1, 1, 2, 2],
            attention: true,
            se_reduction: 4,
            head_hidden: 64,
            lambda: 0.5,
            score_init: 0.5,
            uncert_floor: 1e-3,
            strategy: SharingStrategy::GatedConvSpecificNorm,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            st_band: 0.5,
        }
    }
}

/// Total downsampling factor of the backbone.
pub const DOWNSAMPLE: usize = 8;

/// Where an active layer's parameters live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Shared,
    Specific,
    Gated,
}

#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Norm {
        c: usize,
    },
}

/// One active layer of the backbone (convolution or normalization).
#[derive(Debug, Clone)]
pub struct ActiveLayer {
    pub name: String,
    pub kind: LayerKind,
    pub placement: Placement,
}

impl ActiveLayer {
    pub fn param_count(&self) -> usize {
        match &self.kind {
            LayerKind::Conv { c_in, c_out, k, .. } => c_out * c_in * k * k + c_out,
            LayerKind::Norm { c } => 2 * c,
        }
    }
}

/// Registration data for one task: its name and the world-frame coordinate
/// bias used to initialize the head (typically the scene center).
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub coord_bias: [f64; 3],
}

/// Dense per-cell coordinate/uncertainty prediction for one image.
///
/// `coords[q]` is the predicted world point for cell `q`, `uncert[q]` its
/// strictly positive 1-D uncertainty, and `anchors[q]` the pixel-space
/// center of the stride-8 cell, `(8j + 4, 8i + 4)` for cell row `i`,
/// column `j`.
#[derive(Debug, Clone)]
pub struct CoordPrediction<T> {
    pub coords: Vec<[T; 3]>,
    pub uncert: Vec<T>,
    pub anchors: Vec<[T; 2]>,
    pub cells_h: usize,
    pub cells_w: usize,
}

impl<T: Scalar> CoordPrediction<T> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// A gated layer's branch selection inside one built graph, kept so the
/// trainer can route straight-through score gradients after backward.
#[derive(Debug, Clone)]
pub struct GateUse {
    pub layer: String,
    pub theta: u8,
    /// `(selected graph input, shared store key, specific store key)` per
    /// parameter tensor of the layer.
    pub params: Vec<(String, String, String)>,
}

/// Loss construction parameters for a training graph.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub beta: f64,
    /// Number of valid cells the masked sum is divided by.
    pub valid_count: f64,
}

/// A built forward (and optionally loss) graph for one task.
pub struct TaskGraph<T> {
    pub graph: Graph<T>,
    pub coords: NodeId,
    pub uncert: NodeId,
    pub features: NodeId,
    pub loss: Option<NodeId>,
    pub sc_loss: Option<NodeId>,
    pub penalty: Option<NodeId>,
    /// Train-mode normalization nodes, `(buffer key prefix, node)`.
    pub norm_nodes: Vec<(String, NodeId)>,
    pub gate_uses: Vec<GateUse>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// All parameters of the multi-scene model, split into task-shared and
/// per-task stores. The unit of checkpointing.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    config: ModelConfig,
    tasks: Vec<String>,
    shared: BTreeMap<String, Tensor<T>>,
    specific: Vec<BTreeMap<String, Tensor<T>>>,
    buffers: Vec<BTreeMap<String, Tensor<T>>>,
    frozen_shared: bool,
    init_seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn_tensor<T: Scalar>(seed: u64, key: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(gauss(&mut rng) * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("randn shape").with_grad(true)
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(config: ModelConfig, tasks: &[TaskSpec], seed: u64) -> Result<Self, ModelError> {
        let mut bundle = Self {
            config,
            tasks: Vec::new(),
            shared: BTreeMap::new(),
            specific: Vec::new(),
            buffers: Vec::new(),
            frozen_shared: false,
            init_seed: seed,
        };
        bundle.init_shared();
        for t in tasks {
            bundle.add_task(t, false)?;
        }
        Ok(bundle)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn frozen_shared(&self) -> bool {
        self.frozen_shared
    }

    pub fn task_index(&self, name: &str) -> Result<usize, ModelError> {
        self.tasks
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| ModelError::UnknownTask(name.to_string()))
    }

    /// The backbone's active layers in forward order.
    pub fn active_layers(&self) -> Vec<ActiveLayer> {
        let c = &self.config;
        let (conv_place, norm_place) = match c.strategy {
            SharingStrategy::AllShared => (Placement::Shared, Placement::Shared),
            SharingStrategy::GatedAll => (Placement::Gated, Placement::Gated),
            SharingStrategy::GatedConvSpecificNorm => (Placement::Gated, Placement::Specific),
        };
        let mut layers = Vec::new();
        let mut push_pair = |name: &str, c_in: usize, c_out: usize, stride: usize| {
            layers.push(ActiveLayer {
                name: name.to_string(),
                kind: LayerKind::Conv { c_in, c_out, k: 3, stride, pad: 1 },
                placement: conv_place,
            });
            layers.push(ActiveLayer {
                name: format!("{name}.n"),
                kind: LayerKind::Norm { c: c_out },
                placement: norm_place,
            });
        };
        push_pair("pre", c.in_channels, c.pre_width, 2);
        let mut prev = c.pre_width;
        for (i, (&width, &stride)) in c.widths.iter().zip(&c.strides).enumerate() {
            let b = i + 1;
            push_pair(&format!("b{b}c1"), prev, width, stride);
            push_pair(&format!("b{b}c2"), width, width, 1);
            prev = width;
        }
        layers
    }

    /// Names of the gated layers, in forward order.
    pub fn gated_layers(&self) -> Vec<ActiveLayer> {
        self.active_layers()
            .into_iter()
            .filter(|l| l.placement == Placement::Gated)
            .collect()
    }

    fn init_shared(&mut self) {
        let seed = self.init_seed;
        for layer in self.active_layers() {
            match (&layer.kind, layer.placement) {
                (LayerKind::Conv { c_in, c_out, k, .. }, Placement::Shared | Placement::Gated) => {
                    let fan_in = c_in * k * k;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let wkey = format!("conv/{}.w", layer.name);
                    self.shared
                        .insert(wkey.clone(), randn_tensor(seed, &wkey, &[*c_out, *c_in, *k, *k], std));
                    self.shared.insert(
                        format!("conv/{}.b", layer.name),
                        Tensor::zeros(&[*c_out]).with_grad(true),
                    );
                }
                (LayerKind::Norm { c }, Placement::Shared | Placement::Gated) => {
                    self.shared.insert(
                        format!("norm/{}.g", layer.name),
                        Tensor::full(&[*c], T::one()).with_grad(true),
                    );
                    self.shared.insert(
                        format!("norm/{}.b", layer.name),
                        Tensor::zeros(&[*c]).with_grad(true),
                    );
                }
                _ => {}
            }
            if layer.placement == Placement::Gated {
                self.shared.insert(
                    format!("score/{}", layer.name),
                    Tensor::scalar(T::of(self.config.score_init)).with_grad(true),
                );
            }
        }
    }

    /// Register a new task with fresh normalization, attention, and head
    /// parameters. Gated branches follow the current scores: layers that are
    /// currently task-specific get a fresh specific branch copied from the
    /// shared weights. With `freeze_shared`, shared parameters and scores
    /// stop receiving gradients.
    pub fn add_task(&mut self, task: &TaskSpec, freeze_shared: bool) -> Result<(), ModelError> {
        if self.tasks.iter().any(|t| *t == task.name) {
            return Err(ModelError::DuplicateTask(task.name.clone()));
        }
        let seed = self.init_seed ^ fnv1a(&task.name);
        let c = self.config.clone();
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();

        for layer in self.active_layers() {
            if let LayerKind::Norm { c: ch } = layer.kind {
                if layer.placement == Placement::Specific {
                    params.insert(
                        format!("norm/{}.g", layer.name),
                        Tensor::full(&[ch], T::one()).with_grad(true),
                    );
                    params.insert(
                        format!("norm/{}.b", layer.name),
                        Tensor::zeros(&[ch]).with_grad(true),
                    );
                }
                buffers.insert(format!("norm/{}.mean", layer.name), Tensor::zeros(&[ch]));
                buffers.insert(format!("norm/{}.var", layer.name), Tensor::full(&[ch], T::one()));
            }
        }

        if c.attention {
            for (i, &width) in c.widths.iter().enumerate() {
                let b = i + 1;
                let cr = (width / c.se_reduction).max(2);
                let std1 = (1.0 / width as f64).sqrt();
                let std2 = (1.0 / cr as f64).sqrt();
                let k1 = format!("attn/b{b}.fc1.w");
                let k2 = format!("attn/b{b}.fc2.w");
                params.insert(k1.clone(), randn_tensor(seed, &k1, &[width, cr], std1));
                params.insert(format!("attn/b{b}.fc1.b"), Tensor::zeros(&[cr]).with_grad(true));
                params.insert(k2.clone(), randn_tensor(seed, &k2, &[cr, width], std2));
                params.insert(format!("attn/b{b}.fc2.b"), Tensor::zeros(&[width]).with_grad(true));
            }
        }

        let cw = *c.widths.last().expect("four blocks");
        let h1 = format!("head/c1.w");
        params.insert(h1.clone(), randn_tensor(seed, &h1, &[c.head_hidden, cw, 1, 1], (2.0 / cw as f64).sqrt()));
        params.insert("head/c1.b".to_string(), Tensor::zeros(&[c.head_hidden]).with_grad(true));
        let h2 = format!("head/c2.w");
        params.insert(h2.clone(), randn_tensor(seed, &h2, &[4, c.head_hidden, 1, 1], 1e-2));
        let head_bias = Tensor::new(
            vec![4],
            vec![
                T::of(task.coord_bias[0]),
                T::of(task.coord_bias[1]),
                T::of(task.coord_bias[2]),
                T::one(),
            ],
        )
        .expect("head bias")
        .with_grad(true);
        params.insert("head/c2.b".to_string(), head_bias);

        self.tasks.push(task.name.clone());
        self.specific.push(params);
        self.buffers.push(buffers);

        // Specific branches follow the current gate pattern.
        let idx = self.tasks.len() - 1;
        self.materialize_specific(idx)?;

        if freeze_shared {
            self.frozen_shared = true;
        }
        Ok(())
    }

    /// The weight/bias pair a task uses for a gated layer this iteration:
    /// the shared branch when the gate is 1, the task's specific branch
    /// when it is 0 (materializing it on first touch).
    pub fn select_weights(&mut self, layer: &str, task: usize) -> Result<(&Tensor<T>, &Tensor<T>), ModelError> {
        if task >= self.tasks.len() {
            return Err(ModelError::UnknownTask(format!("#{task}")));
        }
        let def = self
            .gated_layers()
            .into_iter()
            .find(|l| l.name == layer)
            .ok_or_else(|| ModelError::UnknownTask(format!("gated layer `{layer}`")))?;
        let s = self.score(layer).expect("gated layer has a score");
        let theta = gate(s, T::of(self.config.lambda))?;
        let keys = Self::branch_keys(&def);
        if theta == 1 {
            Ok((&self.shared[&keys[0].0], &self.shared[&keys[1].0]))
        } else {
            for (skey, dkey) in &keys {
                if !self.specific[task].contains_key(dkey) {
                    let copy = self.shared[skey].clone();
                    self.specific[task].insert(dkey.clone(), copy);
                }
            }
            Ok((&self.specific[task][&keys[0].1], &self.specific[task][&keys[1].1]))
        }
    }

    /// Current gate per gated layer (identical for every task because the
    /// scores are task-shared).
    pub fn gate_pattern(&self) -> Result<BTreeMap<String, u8>, ModelError> {
        let lambda = T::of(self.config.lambda);
        let mut out = BTreeMap::new();
        for layer in self.gated_layers() {
            let s = self.shared[&format!("score/{}", layer.name)]
                .item()
                .expect("score is scalar");
            out.insert(layer.name.clone(), gate(s, lambda)?);
        }
        Ok(out)
    }

    pub fn score(&self, layer: &str) -> Option<T> {
        self.shared.get(&format!("score/{layer}")).and_then(|t| t.item())
    }

    pub fn set_score(&mut self, layer: &str, value: T) {
        if let Some(t) = self.shared.get_mut(&format!("score/{layer}")) {
            t.data_mut()[0] = value;
        }
    }

    /// Create the task's specific branch for every gated layer whose gate
    /// currently selects the specific side, copying the shared weights.
    /// Exclusive with respect to other bundle mutation.
    pub fn materialize_specific(&mut self, task: usize) -> Result<(), ModelError> {
        let pattern = self.gate_pattern()?;
        for layer in self.gated_layers() {
            if pattern[&layer.name] != 0 {
                continue;
            }
            for (skey, dkey) in Self::branch_keys(&layer) {
                if !self.specific[task].contains_key(&dkey) {
                    let copy = self.shared[&skey].clone();
                    self.specific[task].insert(dkey, copy);
                }
            }
        }
        Ok(())
    }

    /// `(shared store key, specific store key)` pairs for one gated layer.
    fn branch_keys(layer: &ActiveLayer) -> Vec<(String, String)> {
        match layer.kind {
            LayerKind::Conv { .. } => vec![
                (format!("conv/{}.w", layer.name), format!("spec/{}.w", layer.name)),
                (format!("conv/{}.b", layer.name), format!("spec/{}.b", layer.name)),
            ],
            LayerKind::Norm { .. } => vec![
                (format!("norm/{}.g", layer.name), format!("spec/{}.g", layer.name)),
                (format!("norm/{}.b", layer.name), format!("spec/{}.b", layer.name)),
            ],
        }
    }

    pub fn shared_params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.shared
    }

    pub fn shared_params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.shared
    }

    pub fn task_params(&self, task: usize) -> &BTreeMap<String, Tensor<T>> {
        &self.specific[task]
    }

    pub fn task_params_mut(&mut self, task: usize) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.specific[task]
    }

    pub fn task_buffers(&self, task: usize) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers[task]
    }

    pub fn task_buffers_mut(&mut self, task: usize) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.buffers[task]
    }

    /// Drops every materialized specific branch of a task (checkpoint
    /// loading repopulates them from the file).
    pub fn clear_specific_branches(&mut self, task: usize) {
        self.specific[task].retain(|k, _| !k.starts_with("spec/"));
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen_shared = frozen;
    }

    /// Bind every parameter and buffer visible to `task` under the graph
    /// namespace (`sh.` shared, `sp.` task-specific, `bf.` buffers).
    pub fn bind_params<'a>(&'a self, task: usize, b: &mut Bindings<'a, T>) {
        for (k, v) in &self.shared {
            b.bind(format!("sh.{k}"), v);
        }
        for (k, v) in &self.specific[task] {
            b.bind(format!("sp.{k}"), v);
        }
        for (k, v) in &self.buffers[task] {
            b.bind(format!("bf.{k}"), v);
        }
    }

    /// Active parameter partition for one task under the current gates:
    /// `(task-shared keys, task-specific keys)`, using the graph namespace.
    /// Scores belong to the shared side. Disjoint and exhaustive over the
    /// parameters the task's forward pass can read.
    pub fn param_partition(&self, task: usize) -> Result<(Vec<String>, Vec<String>), ModelError> {
        let pattern = self.gate_pattern()?;
        let mut sh = Vec::new();
        let mut sp = Vec::new();
        for layer in self.active_layers() {
            match layer.placement {
                Placement::Shared => {
                    for (skey, _) in Self::branch_keys(&layer) {
                        sh.push(format!("sh.{skey}"));
                    }
                }
                Placement::Specific => {
                    if let LayerKind::Norm { .. } = layer.kind {
                        sp.push(format!("sp.norm/{}.g", layer.name));
                        sp.push(format!("sp.norm/{}.b", layer.name));
                    }
                }
                Placement::Gated => {
                    sh.push(format!("sh.score/{}", layer.name));
                    if pattern[&layer.name] == 1 {
                        for (skey, _) in Self::branch_keys(&layer) {
                            sh.push(format!("sh.{skey}"));
                        }
                    } else {
                        for (_, dkey) in Self::branch_keys(&layer) {
                            sp.push(format!("sp.{dkey}"));
                        }
                    }
                }
            }
        }
        for k in self.specific[task].keys() {
            if k.starts_with("attn/") || k.starts_with("head/") {
                sp.push(format!("sp.{k}"));
            }
        }
        sh.sort();
        sp.sort();
        Ok((sh, sp))
    }

    /// Parameter accounting; see [`SharingReport`] for the counting rules.
    pub fn sharing_report(&self) -> Result<SharingReport, ModelError> {
        let pattern = self.gate_pattern()?;
        let mut layers = Vec::new();
        for layer in self.gated_layers() {
            let score = self.score(&layer.name).expect("gated layer has score").to_f64c();
            layers.push(LayerShare {
                name: layer.name.clone(),
                score,
                shared: pattern[&layer.name] == 1,
            });
        }
        let shared_params: usize = self.shared.values().map(|t| t.numel()).sum();
        let mut specific_params = BTreeMap::new();
        for (idx, name) in self.tasks.iter().enumerate() {
            specific_params.insert(name.clone(), self.deployed_specific_keys(idx, &pattern).1);
        }
        Ok(SharingReport {
            layers,
            shared_params,
            specific_params,
        })
    }

    /// Keys (and their total element count) of the task parameters that are
    /// actually deployed under `pattern`: always-specific layers plus
    /// specific branches of currently task-specific gated layers. Stale
    /// branches of re-shared layers are excluded.
    pub fn deployed_specific_keys(
        &self,
        task: usize,
        pattern: &BTreeMap<String, u8>,
    ) -> (Vec<String>, usize) {
        let mut keys = Vec::new();
        let mut count = 0usize;
        for (k, v) in &self.specific[task] {
            if let Some(layer) = k.strip_prefix("spec/") {
                let layer = layer.rsplit_once('.').map(|(l, _)| l).unwrap_or(layer);
                if pattern.get(layer).copied() != Some(0) {
                    continue;
                }
            }
            keys.push(k.clone());
            count += v.numel();
        }
        (keys, count)
    }

    pub fn head_param_count(&self, task: usize) -> usize {
        self.specific[task]
            .iter()
            .filter(|(k, _)| k.starts_with("head/"))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Builds the forward (and optional loss) graph for one task.
    pub fn build_graph(
        &self,
        task: usize,
        batch: usize,
        h: usize,
        w: usize,
        mode: Mode,
        loss: Option<LossSpec>,
    ) -> Result<TaskGraph<T>, ModelError> {
        if task >= self.tasks.len() {
            return Err(ModelError::UnknownTask(format!("#{task}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(ModelError::BadImageSize { h, w });
        }
        let pattern = self.gate_pattern()?;
        let c = &self.config;
        let shared_grad = !self.frozen_shared;
        let mut g = GraphBuilder::<T>::new();
        let mut norm_nodes = Vec::new();
        let mut gate_uses = Vec::new();

        let x = g.input("x", &[batch, c.in_channels, h, w], false)?;

        let layers = self.active_layers();
        let mut layer_iter = layers.iter();

        // Emits a conv followed by its normalization; returns the activation
        // before any nonlinearity.
        let emit_conv_norm = |g: &mut GraphBuilder<T>,
                                  input: NodeId,
                                  conv: &ActiveLayer,
                                  norm: &ActiveLayer,
                                  gate_uses: &mut Vec<GateUse>,
                                  norm_nodes: &mut Vec<(String, NodeId)>|
         -> Result<NodeId, ModelError> {
            let LayerKind::Conv { stride, pad, .. } = conv.kind else {
                unreachable!("layer walk alternates conv/norm")
            };
            let (wname, bname) = match conv.placement {
                Placement::Shared => (
                    format!("sh.conv/{}.w", conv.name),
                    format!("sh.conv/{}.b", conv.name),
                ),
                Placement::Gated => {
                    let theta = pattern[&conv.name];
                    let (wname, bname) = if theta == 1 {
                        (format!("sh.conv/{}.w", conv.name), format!("sh.conv/{}.b", conv.name))
                    } else {
                        (format!("sp.spec/{}.w", conv.name), format!("sp.spec/{}.b", conv.name))
                    };
                    gate_uses.push(GateUse {
                        layer: conv.name.clone(),
                        theta,
                        params: vec![
                            (wname.clone(), format!("conv/{}.w", conv.name), format!("spec/{}.w", conv.name)),
                            (bname.clone(), format!("conv/{}.b", conv.name), format!("spec/{}.b", conv.name)),
                        ],
                    });
                    (wname, bname)
                }
                Placement::Specific => unreachable!("convolutions are never pinned specific"),
            };
            let grad_w = if wname.starts_with("sh.") { shared_grad } else { true };
            let (wshape, bshape) = {
                let store_key = wname.trim_start_matches("sh.").trim_start_matches("sp.");
                let store = if wname.starts_with("sh.") { &self.shared } else { &self.specific[task] };
                let ws = store[store_key].shape().to_vec();
                (ws, vec![store[&bname[3..].to_string()].shape()[0]])
            };
            let wn = g.input(&wname, &wshape, grad_w)?;
            let bn = g.input(&bname, &bshape, grad_w)?;
            let conv_out = g.conv2d(input, wn, stride, pad)?;
            let conv_out = g.add_bias(conv_out, bn)?;

            // Normalization layer.
            let ch = g.node_shape(conv_out)[1];
            let (gname, bname2) = match norm.placement {
                Placement::Shared => (
                    format!("sh.norm/{}.g", norm.name),
                    format!("sh.norm/{}.b", norm.name),
                ),
                Placement::Specific => (
                    format!("sp.norm/{}.g", norm.name),
                    format!("sp.norm/{}.b", norm.name),
                ),
                Placement::Gated => {
                    let theta = pattern[&norm.name];
                    let (gn, bn) = if theta == 1 {
                        (format!("sh.norm/{}.g", norm.name), format!("sh.norm/{}.b", norm.name))
                    } else {
                        (format!("sp.spec/{}.g", norm.name), format!("sp.spec/{}.b", norm.name))
                    };
                    gate_uses.push(GateUse {
                        layer: norm.name.clone(),
                        theta,
                        params: vec![
                            (gn.clone(), format!("norm/{}.g", norm.name), format!("spec/{}.g", norm.name)),
                            (bn.clone(), format!("norm/{}.b", norm.name), format!("spec/{}.b", norm.name)),
                        ],
                    });
                    (gn, bn)
                }
            };
            let grad_n = if gname.starts_with("sh.") { shared_grad } else { true };
            let gn = g.input(&gname, &[ch], grad_n)?;
            let bn2 = g.input(&bname2, &[ch], grad_n)?;
            let eps = T::of(c.norm_eps);
            let normed = match mode {
                Mode::Train => {
                    let node = g.batch_norm(conv_out, gn, bn2, eps)?;
                    norm_nodes.push((format!("norm/{}", norm.name), node));
                    node
                }
                Mode::Eval => {
                    let mean = g.input(&format!("bf.norm/{}.mean", norm.name), &[ch], false)?;
                    let var = g.input(&format!("bf.norm/{}.var", norm.name), &[ch], false)?;
                    g.norm_stats(conv_out, gn, bn2, mean, var, eps)?
                }
            };
            Ok(normed)
        };

        // Pre-layer.
        let pre_conv = layer_iter.next().expect("pre conv");
        let pre_norm = layer_iter.next().expect("pre norm");
        let mut cur = emit_conv_norm(&mut g, x, pre_conv, pre_norm, &mut gate_uses, &mut norm_nodes)?;
        cur = g.relu(cur);

        // Four blocks of two convs; identity skip when shapes match.
        for (i, (&width, &stride)) in c.widths.iter().zip(&c.strides).enumerate() {
            let b = i + 1;
            let block_in = cur;
            let in_ch = g.node_shape(block_in)[1];
            let c1 = layer_iter.next().expect("block conv1");
            let n1 = layer_iter.next().expect("block norm1");
            let c2 = layer_iter.next().expect("block conv2");
            let n2 = layer_iter.next().expect("block norm2");
            cur = emit_conv_norm(&mut g, cur, c1, n1, &mut gate_uses, &mut norm_nodes)?;
            cur = g.relu(cur);
            cur = emit_conv_norm(&mut g, cur, c2, n2, &mut gate_uses, &mut norm_nodes)?;
            if stride == 1 && in_ch == width {
                cur = g.add(cur, block_in)?;
            }
            cur = g.relu(cur);

            if c.attention {
                let cr = (width / c.se_reduction).max(2);
                let w1 = g.input(&format!("sp.attn/b{b}.fc1.w"), &[width, cr], true)?;
                let b1 = g.input(&format!("sp.attn/b{b}.fc1.b"), &[cr], true)?;
                let w2 = g.input(&format!("sp.attn/b{b}.fc2.w"), &[cr, width], true)?;
                let b2 = g.input(&format!("sp.attn/b{b}.fc2.b"), &[width], true)?;
                let pooled = g.global_avg_pool(cur)?;
                let f1 = g.matmul(pooled, w1)?;
                let f1 = g.add_bias(f1, b1)?;
                let f1 = g.relu(f1);
                let f2 = g.matmul(f1, w2)?;
                let f2 = g.add_bias(f2, b2)?;
                let gate_v = g.sigmoid(f2);
                cur = g.channel_mul(cur, gate_v)?;
            }
        }

        let features = cur;
        g.mark_output("features", features);

        // Regression head: two task-specific 1x1 convolutions.
        let cw = *c.widths.last().expect("four blocks");
        let h1w = g.input("sp.head/c1.w", &[c.head_hidden, cw, 1, 1], true)?;
        let h1b = g.input("sp.head/c1.b", &[c.head_hidden], true)?;
        let h2w = g.input("sp.head/c2.w", &[4, c.head_hidden, 1, 1], true)?;
        let h2b = g.input("sp.head/c2.b", &[4], true)?;
        let hh = g.conv2d(features, h1w, 1, 0)?;
        let hh = g.add_bias(hh, h1b)?;
        let hh = g.relu(hh);
        let out = g.conv2d(hh, h2w, 1, 0)?;
        let out = g.add_bias(out, h2b)?;

        let coords = g.slice_chan(out, 0, 3)?;
        let pre_u = g.slice_chan(out, 3, 4)?;
        let sp = g.softplus(pre_u);
        let uncert = g.add_const(sp, T::of(c.uncert_floor));
        g.mark_output("coords", coords);
        g.mark_output("uncert", uncert);

        let (mut loss_node, mut sc_node, mut pen_node) = (None, None, None);
        if let Some(spec) = loss {
            let (hc, wc) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
            let gt = g.input("gt", &[batch, 3, hc, wc], false)?;
            let mask = g.input("mask", &[batch, 1, hc, wc], false)?;
            let sc = crate::loss::append_scene_coord_loss(&mut g, coords, uncert, gt, mask, spec.valid_count)?;
            g.mark_output("sc_loss", sc);
            sc_node = Some(sc);

            // Scores enter the loss graph whenever gated layers exist so the
            // shared gradient vector has a stable key set; the penalty term
            // is added only for beta > 0.
            let gated = self.gated_layers();
            if !gated.is_empty() && shared_grad {
                let mut score_nodes = Vec::new();
                for layer in &gated {
                    let sid = g.input(&format!("sh.score/{}", layer.name), &[1], true)?;
                    score_nodes.push(sid);
                }
                if spec.beta > 0.0 {
                    let mut acc = g.abs(score_nodes[0]);
                    for s in &score_nodes[1..] {
                        let a = g.abs(*s);
                        acc = g.add(acc, a)?;
                    }
                    let pen = g.mul_const(acc, T::of(1.0 / gated.len() as f64));
                    g.mark_output("penalty", pen);
                    let weighted = g.mul_const(pen, T::of(spec.beta));
                    let total = g.add(sc, weighted)?;
                    g.mark_output("loss", total);
                    pen_node = Some(pen);
                    loss_node = Some(total);
                } else {
                    g.mark_output("loss", sc);
                    loss_node = Some(sc);
                }
            } else {
                g.mark_output("loss", sc);
                loss_node = Some(sc);
            }
        }

        Ok(TaskGraph {
            graph: g.finish(),
            coords,
            uncert,
            features,
            loss: loss_node,
            sc_loss: sc_node,
            penalty: pen_node,
            norm_nodes,
            gate_uses,
        })
    }

    /// Dense prediction for one image, using running statistics.
    pub fn forward(&self, task_name: &str, image: &Tensor<T>) -> Result<CoordPrediction<T>, ModelError> {
        let task = self.task_index(task_name)?;
        let shape = image.shape();
        let (h, w) = (shape[2], shape[3]);
        let tg = self.build_graph(task, shape[0], h, w, Mode::Eval, None)?;
        let mut b = Bindings::new();
        self.bind_params(task, &mut b);
        b.bind("x", image);
        let eval = tg.graph.evaluate(&b)?;
        let coords_t = eval.value(tg.coords);
        let uncert_t = eval.value(tg.uncert);
        let (hc, wc) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let q = hc * wc;
        let mut coords = Vec::with_capacity(q);
        let mut uncert = Vec::with_capacity(q);
        let mut anchors = Vec::with_capacity(q);
        for i in 0..hc {
            for j in 0..wc {
                let cell = i * wc + j;
                coords.push([
                    coords_t.data()[cell],
                    coords_t.data()[q + cell],
                    coords_t.data()[2 * q + cell],
                ]);
                uncert.push(uncert_t.data()[cell]);
                anchors.push([
                    T::of((DOWNSAMPLE * j + DOWNSAMPLE / 2) as f64),
                    T::of((DOWNSAMPLE * i + DOWNSAMPLE / 2) as f64),
                ]);
            }
        }
        Ok(CoordPrediction {
            coords,
            uncert,
            anchors,
            cells_h: hc,
            cells_w: wc,
        })
    }

    /// Update per-task normalization running statistics from one train-mode
    /// evaluation's batch statistics.
    pub fn update_norm_stats(&mut self, task: usize, updates: &[(String, Vec<T>, Vec<T>)]) {
        let m = T::of(self.config.norm_momentum);
        let one_m = T::one() - m;
        for (prefix, mean, var) in updates {
            if let Some(t) = self.buffers[task].get_mut(&format!("{prefix}.mean")) {
                for (r, b) in t.data_mut().iter_mut().zip(mean) {
                    *r = one_m * *r + m * *b;
                }
            }
            if let Some(t) = self.buffers[task].get_mut(&format!("{prefix}.var")) {
                for (r, b) in t.data_mut().iter_mut().zip(var) {
                    *r = one_m * *r + m * *b;
                }
            }
        }
    }
}
