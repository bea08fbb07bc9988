//! Cross-module integration tests: model structure, gate routing, gradient
//! flow, training determinism, and checkpoint round trips.

use std::collections::BTreeSet;

use msloc_core::checkpoint;
use msloc_core::graph::Bindings;
use msloc_core::model::{Mode, ModelBundle, ModelConfig, SharingStrategy, TaskSpec};
use msloc_core::optim::OptimizerConfig;
use msloc_core::sim::{generate_scene, make_dataset, SceneDataset};
use msloc_core::tensor::Tensor;
use msloc_core::train::{assemble_batch, compute_task_gradients, train, TaskBatch};
use msloc_core::geom::CameraIntrinsics;

fn small_config() -> ModelConfig {
    ModelConfig {
        pre_width: 4,
        widths: [4, 4, 6, 6],
        head_hidden: 6,
        ..ModelConfig::default()
    }
}

fn tasks(n: usize) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| TaskSpec {
            name: format!("scene{i}"),
            coord_bias: [2.0, 2.0, 0.0],
        })
        .collect()
}

fn tiny_dataset(seed: u64, n_train: usize, n_test: usize) -> SceneDataset<f64> {
    let scene = generate_scene(seed, [4.0, 4.0], 3, 0.01, None);
    let k = CameraIntrinsics::new(32.0, 32.0, 16.0, 16.0);
    make_dataset(&scene, n_train, n_test, seed ^ 0x55, &k, 32, 32).unwrap()
}

fn batch_for(ds: &SceneDataset<f64>, n: usize, id: &str) -> TaskBatch<f64> {
    let indices: Vec<usize> = (0..n).map(|i| i % ds.train.len()).collect();
    assemble_batch(&ds.train, &indices, id.to_string()).unwrap()
}

#[test]
fn forward_shapes_and_uncertainty_floor() {
    let bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 3).unwrap();
    let image = Tensor::zeros(&[1, 3, 32, 32]);
    let pred = bundle.forward("scene0", &image).unwrap();
    assert_eq!(pred.len(), 16, "32/8 = 4 cells per side");
    assert_eq!(pred.cells_h, 4);
    assert_eq!(pred.cells_w, 4);
    assert!(pred.uncert.iter().all(|u| *u >= 1e-3), "uncertainty floor");
    assert_eq!(pred.anchors[0], [4.0, 4.0]);
    assert_eq!(pred.anchors[1], [12.0, 4.0]);
    assert_eq!(pred.anchors[4], [4.0, 12.0]);
}

#[test]
fn non_divisible_image_is_rejected() {
    let bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 3).unwrap();
    let image = Tensor::zeros(&[1, 3, 30, 32]);
    assert!(bundle.forward("scene0", &image).is_err());
    assert!(bundle.forward("missing", &Tensor::zeros(&[1, 3, 32, 32])).is_err());
}

#[test]
fn shared_backbone_gives_identical_features_across_tasks() {
    // Force every gate to the shared branch and copy task 0's specific
    // parameters into task 1: the pre-head representation must match
    // bit-for-bit, while head outputs may differ through theta_n.
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 5).unwrap();
    for layer in bundle.gated_layers() {
        bundle.set_score(&layer.name, 0.0);
    }
    let copy_keys: Vec<String> = bundle
        .task_params(0)
        .keys()
        .filter(|k| k.starts_with("norm/") || k.starts_with("attn/"))
        .cloned()
        .collect();
    for k in &copy_keys {
        let v = bundle.task_params(0)[k].clone();
        bundle.task_params_mut(1).insert(k.clone(), v);
    }

    let image = {
        let data: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        Tensor::new(vec![1, 3, 32, 32], data).unwrap()
    };
    let mut features = Vec::new();
    let mut heads = Vec::new();
    for task in 0..2 {
        let tg = bundle.build_graph(task, 1, 32, 32, Mode::Eval, None).unwrap();
        let mut b = Bindings::new();
        bundle.bind_params(task, &mut b);
        b.bind("x", &image);
        let eval = tg.graph.evaluate(&b).unwrap();
        features.push(eval.value(tg.features).data().to_vec());
        heads.push(eval.value(tg.coords).data().to_vec());
    }
    assert_eq!(features[0], features[1], "pre-head representation identical");
    assert_ne!(heads[0], heads[1], "heads differ per task");
}

#[test]
fn task_isolation_under_perturbation() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 7).unwrap();
    let image = Tensor::zeros(&[1, 3, 32, 32]);
    let before = bundle.forward("scene0", &image).unwrap();
    // Perturb every parameter of task 1.
    let keys: Vec<String> = bundle.task_params(1).keys().cloned().collect();
    for k in keys {
        for v in bundle.task_params_mut(1).get_mut(&k).unwrap().data_mut() {
            *v += 0.37;
        }
    }
    let after = bundle.forward("scene0", &image).unwrap();
    for (a, b) in before.coords.iter().zip(&after.coords) {
        assert_eq!(a, b, "task 0 forward unchanged");
    }
}

#[test]
fn zeroed_attention_maps_gate_to_exactly_half() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 9).unwrap();
    let keys: Vec<String> = bundle
        .task_params(0)
        .keys()
        .filter(|k| k.starts_with("attn/"))
        .cloned()
        .collect();
    for k in keys {
        for v in bundle.task_params_mut(0).get_mut(&k).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    // With the gate multiplier pinned at sigmoid(0) = 0.5 the features are
    // exactly halved relative to a gate-free forward; verify via two
    // configs sharing all weights.
    let image = Tensor::full(&[1, 3, 32, 32], 0.3);
    let tg = bundle.build_graph(0, 1, 32, 32, Mode::Eval, None).unwrap();
    let mut b = Bindings::new();
    bundle.bind_params(0, &mut b);
    b.bind("x", &image);
    let eval = tg.graph.evaluate(&b).unwrap();
    let gated = eval.value(tg.features).data().to_vec();

    let mut cfg_plain = small_config();
    cfg_plain.attention = false;
    let mut plain = ModelBundle::<f64>::new(cfg_plain, &tasks(1), 9).unwrap();
    // Copy backbone + norm params so the only difference is the gate.
    let shared: Vec<(String, _)> = bundle.shared_params().clone().into_iter().collect();
    for (k, v) in shared {
        if let Some(slot) = plain.shared_params_mut().get_mut(&k) {
            *slot = v;
        }
    }
    let spec: Vec<(String, _)> = bundle.task_params(0).clone().into_iter().collect();
    for (k, v) in spec {
        if plain.task_params(0).contains_key(&k) {
            plain.task_params_mut(0).insert(k, v);
        }
    }
    let tg2 = plain.build_graph(0, 1, 32, 32, Mode::Eval, None).unwrap();
    let mut b2 = Bindings::new();
    plain.bind_params(0, &mut b2);
    b2.bind("x", &image);
    let eval2 = tg2.graph.evaluate(&b2).unwrap();
    let ungated = eval2.value(tg2.features).data().to_vec();

    // Attention applies per block; with all four gates at 0.5 and two
    // stride-1 blocks whose skip adds pre-gate input... the exact factor is
    // structural, so just check every gated activation is strictly inside
    // (0, 1) times the ungated one where the ungated is nonzero.
    let mut checked = 0;
    for (g, u) in gated.iter().zip(&ungated) {
        if u.abs() > 1e-9 {
            let ratio = g / u;
            assert!(ratio > 0.0 && ratio < 1.0, "ratio {ratio}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn gate_routing_controls_gradient_flow() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 11).unwrap();
    let ds = tiny_dataset(1, 4, 1);
    let batch = batch_for(&ds, 2, "flow");

    // All shared: gradients land on sh.conv/*, none on sp.spec/*.
    for layer in bundle.gated_layers() {
        bundle.set_score(&layer.name, 0.0);
    }
    let comp = compute_task_gradients(&bundle, 0, &batch, 0.25, 1).unwrap();
    assert!(comp.shared_grads.keys().any(|k| k.starts_with("sh.conv/")));
    assert!(!comp.specific_grads.keys().any(|k| k.starts_with("sp.spec/")));

    // All specific: conv gradients land on sp.spec/*, shared side keeps
    // only the scores.
    for layer in bundle.gated_layers() {
        bundle.set_score(&layer.name, 1.0);
    }
    bundle.materialize_specific(0).unwrap();
    let comp = compute_task_gradients(&bundle, 0, &batch, 0.25, 1).unwrap();
    assert!(comp.specific_grads.keys().any(|k| k.starts_with("sp.spec/")));
    assert!(!comp.shared_grads.keys().any(|k| k.starts_with("sh.conv/")));
    assert!(comp.shared_grads.keys().all(|k| k.starts_with("sh.score/")));
}

#[test]
fn first_touch_copies_then_diverges() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 13).unwrap();
    // Scores start at the threshold: every gated layer is task-specific and
    // materialized as a copy of the shared weights.
    bundle.materialize_specific(0).unwrap();
    let shared_w = bundle.shared_params()["conv/pre.w"].clone();
    let spec_w = bundle.task_params(0)["spec/pre.w"].clone();
    assert_eq!(shared_w.data(), spec_w.data(), "first touch copies w");

    // Train with the penalty disabled so the layers stay task-specific:
    // the specific weights move, the shared ones stay.
    let ds0 = tiny_dataset(2, 4, 1);
    let ds1 = tiny_dataset(3, 4, 1);
    let cfg = OptimizerConfig {
        iterations: 3,
        batch_size: 2,
        beta: 0.0,
        ..OptimizerConfig::default()
    };
    train(&mut bundle, &[ds0.train.clone(), ds1.train.clone()], &cfg).unwrap();
    let shared_after = bundle.shared_params()["conv/pre.w"].clone();
    let spec_after = bundle.task_params(0)["spec/pre.w"].clone();
    assert_eq!(shared_w.data(), shared_after.data(), "shared branch untouched while specific is selected");
    assert_ne!(spec_after.data(), shared_after.data(), "specific branch trained away from the copy");
    let spec1_after = bundle.task_params(1)["spec/pre.w"].clone();
    assert_ne!(spec_after.data(), spec1_after.data(), "tasks specialize independently");
}

#[test]
fn param_partition_is_disjoint_and_exhaustive() {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 17).unwrap();
    for _ in 0..100 {
        let layers = bundle.gated_layers();
        for layer in &layers {
            bundle.set_score(&layer.name, rng.random::<f64>() * 1.4 - 0.2);
        }
        bundle.materialize_specific(0).unwrap();
        let (sh, sp) = bundle.param_partition(0).unwrap();
        let sh_set: BTreeSet<&String> = sh.iter().collect();
        let sp_set: BTreeSet<&String> = sp.iter().collect();
        assert!(sh_set.is_disjoint(&sp_set));

        // Exhaustive over the parameters the forward graph reads.
        let tg = bundle.build_graph(0, 1, 32, 32, Mode::Train, Some(msloc_core::model::LossSpec { beta: 0.25, valid_count: 16.0 })).unwrap();
        for (name, _) in tg.graph.input_names() {
            if name.starts_with("sh.") || name.starts_with("sp.") {
                assert!(
                    sh_set.contains(&name.to_string()) || sp_set.contains(&name.to_string()),
                    "partition misses `{name}`"
                );
            }
        }
        // Scores always on the shared side.
        for layer in &layers {
            assert!(sh_set.contains(&format!("sh.score/{}", layer.name)));
        }
    }
}

#[test]
fn sharing_report_counts_close() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 19).unwrap();
    // Fresh model at score_init = 1.0: every gated layer reports specific.
    let report = bundle.sharing_report().unwrap();
    assert!(report.layers.iter().all(|l| !l.shared));

    // All scores forced low: only normalization, attention, and head are
    // task-specific.
    for layer in bundle.gated_layers() {
        bundle.set_score(&layer.name, 0.0);
    }
    let report = bundle.sharing_report().unwrap();
    assert!(report.layers.iter().all(|l| l.shared));
    for (_, count) in &report.specific_params {
        let norm_attn_head: usize = bundle
            .task_params(0)
            .iter()
            .filter(|(k, _)| !k.starts_with("spec/"))
            .map(|(_, v)| v.numel())
            .sum();
        assert_eq!(*count, norm_attn_head);
    }

    // All scores high after materialization: per-task specific counts
    // exceed the shared backbone conv element count.
    for layer in bundle.gated_layers() {
        bundle.set_score(&layer.name, 1.0);
    }
    bundle.materialize_specific(0).unwrap();
    bundle.materialize_specific(1).unwrap();
    let report = bundle.sharing_report().unwrap();
    let conv_count: usize = bundle
        .shared_params()
        .iter()
        .filter(|(k, _)| k.starts_with("conv/"))
        .map(|(_, v)| v.numel())
        .sum();
    for (_, count) in &report.specific_params {
        assert!(*count >= conv_count);
    }
    // Accounting closes against the JSON round trip too.
    let json = report.to_json();
    let back = msloc_core::sharing::SharingReport::from_json(&json).unwrap();
    assert_eq!(back.total_params(), report.total_params());
}

#[test]
fn materialized_branches_bounded_by_tasks_that_went_specific() {
    // Start with every layer shared so construction materializes nothing.
    let cfg = ModelConfig {
        score_init: 0.0,
        ..small_config()
    };
    let mut bundle = ModelBundle::<f64>::new(cfg, &tasks(3), 23).unwrap();
    for t in 0..3 {
        assert_eq!(
            bundle.task_params(t).keys().filter(|k| k.starts_with("spec/")).count(),
            0
        );
    }
    // Flip to specific; only tasks 0 and 2 ever see the specific side.
    for layer in bundle.gated_layers() {
        bundle.set_score(&layer.name, 1.0);
    }
    bundle.materialize_specific(0).unwrap();
    bundle.materialize_specific(2).unwrap();
    let spec_counts: Vec<usize> = (0..3)
        .map(|t| bundle.task_params(t).keys().filter(|k| k.starts_with("spec/")).count())
        .collect();
    assert!(spec_counts[0] > 0);
    assert_eq!(spec_counts[1], 0, "task 1 never went specific");
    assert!(spec_counts[2] > 0);
}

#[test]
fn add_task_preserves_old_forward_bitwise() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 29).unwrap();
    let image = Tensor::full(&[1, 3, 32, 32], 0.2);
    let before = bundle.forward("scene0", &image).unwrap();
    bundle
        .add_task(
            &TaskSpec {
                name: "late".into(),
                coord_bias: [1.0, 1.0, 0.0],
            },
            false,
        )
        .unwrap();
    assert_eq!(bundle.tasks().len(), 3);
    let after = bundle.forward("scene0", &image).unwrap();
    assert_eq!(before.coords, after.coords);
    assert_eq!(before.uncert, after.uncert);

    // Duplicate registration is rejected.
    assert!(bundle
        .add_task(
            &TaskSpec {
                name: "late".into(),
                coord_bias: [0.0; 3],
            },
            false
        )
        .is_err());
}

#[test]
fn frozen_shared_parameters_do_not_move() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 31).unwrap();
    let ds0 = tiny_dataset(4, 4, 1);
    let cfg = OptimizerConfig {
        iterations: 5,
        batch_size: 2,
        ..OptimizerConfig::default()
    };
    train(&mut bundle, &[ds0.train.clone()], &cfg).unwrap();

    bundle
        .add_task(
            &TaskSpec {
                name: "new".into(),
                coord_bias: [2.0, 2.0, 0.0],
            },
            true,
        )
        .unwrap();
    let hash_before = checkpoint::shared_param_hash(&bundle);
    let ds1 = tiny_dataset(5, 4, 1);
    // Train only the new task (single-task dataset list keyed by index 1
    // is not expressible here, so train the full bundle with the new task
    // last; frozen shared parameters must still not move).
    let mut trainer = msloc_core::train::Trainer::new(cfg.clone(), 2);
    for iter in 0..5 {
        let b0 = batch_for(&ds0, 2, "old");
        let b1 = batch_for(&ds1, 2, "new");
        trainer.step(&mut bundle, &[(0, b0), (1, b1)], iter).unwrap();
    }
    assert_eq!(checkpoint::shared_param_hash(&bundle), hash_before);
}

#[test]
fn training_is_bit_deterministic() {
    let run = || {
        let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 37).unwrap();
        let ds0 = tiny_dataset(6, 4, 1);
        let ds1 = tiny_dataset(7, 4, 1);
        let cfg = OptimizerConfig {
            iterations: 4,
            batch_size: 2,
            ..OptimizerConfig::default()
        };
        let log = train(&mut bundle, &[ds0.train, ds1.train], &cfg).unwrap();
        let mut bits = Vec::new();
        for (_, v) in bundle.shared_params() {
            for x in v.data() {
                bits.push(x.to_bits());
            }
        }
        for t in 0..2 {
            for (_, v) in bundle.task_params(t) {
                for x in v.data() {
                    bits.push(x.to_bits());
                }
            }
        }
        let losses: Vec<u64> = log.iter().flat_map(|r| r.per_task.iter().map(|t| t.loss.to_bits())).collect();
        (bits, losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn single_task_normalization_is_plain_descent() {
    // With one task, the rescale-and-average collapses to the identity on
    // the gradient, so enabled/disabled normalization trajectories match
    // bit-for-bit.
    let run = |grad_norm: bool| {
        let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 41).unwrap();
        let ds = tiny_dataset(8, 4, 1);
        let cfg = OptimizerConfig {
            iterations: 4,
            batch_size: 2,
            grad_norm,
            ..OptimizerConfig::default()
        };
        train(&mut bundle, &[ds.train], &cfg).unwrap();
        let mut bits = Vec::new();
        for (_, v) in bundle.shared_params() {
            for x in v.data() {
                bits.push(x.to_bits());
            }
        }
        bits
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn worker_sharding_matches_single_worker_loss() {
    let bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 43).unwrap();
    let ds = tiny_dataset(9, 4, 1);
    let batch = batch_for(&ds, 4, "shard-test");
    let single = compute_task_gradients(&bundle, 0, &batch, 0.25, 1).unwrap();
    let sharded = compute_task_gradients(&bundle, 0, &batch, 0.25, 2).unwrap();
    // Shards normalize with their own batch statistics (as per-device
    // normalization does), so agreement is close but not bitwise.
    assert!(
        (single.loss - sharded.loss).abs() / single.loss.abs().max(1.0) < 1e-3,
        "single {} vs sharded {}",
        single.loss,
        sharded.loss
    );
    let single_keys: Vec<&String> = single.shared_grads.keys().collect();
    let sharded_keys: Vec<&String> = sharded.shared_grads.keys().collect();
    assert_eq!(single_keys, sharded_keys);
    assert_eq!(
        single.specific_grads.keys().collect::<Vec<_>>(),
        sharded.specific_grads.keys().collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(2), 47).unwrap();
    let ds0 = tiny_dataset(10, 4, 1);
    let ds1 = tiny_dataset(11, 4, 1);
    let cfg = OptimizerConfig {
        iterations: 3,
        batch_size: 2,
        ..OptimizerConfig::default()
    };
    train(&mut bundle, &[ds0.train, ds1.train.clone()], &cfg).unwrap();

    let path = dir.path().join("ckpt.bin");
    checkpoint::save(&bundle, &path, "cafebabe").unwrap();
    let (loaded, header) = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(header.config_hash, "cafebabe");
    assert_eq!(header.tasks, bundle.tasks());

    // Evaluation after the round trip matches in-memory bit-for-bit.
    let image = {
        let v = &ds1.train[0];
        let mut data = Vec::new();
        data.extend_from_slice(v.image.data());
        Tensor::new(vec![1, 3, 32, 32], data).unwrap()
    };
    let a = bundle.forward("scene1", &image).unwrap();
    let b = loaded.forward("scene1", &image).unwrap();
    for (x, y) in a.coords.iter().zip(&b.coords) {
        for c in 0..3 {
            assert_eq!(x[c].to_bits(), y[c].to_bits());
        }
    }
    for (x, y) in a.uncert.iter().zip(&b.uncert) {
        assert_eq!(x.to_bits(), y.to_bits());
    }

    // Parameter accounting closes: on-disk parameter elements equal the
    // sharing-report totals.
    let report = bundle.sharing_report().unwrap();
    let pattern = bundle.gate_pattern().unwrap();
    let mut disk_elems: usize = bundle.shared_params().values().map(|t| t.numel()).sum();
    for t in 0..2 {
        disk_elems += bundle.deployed_specific_keys(t, &pattern).1;
    }
    assert_eq!(disk_elems, report.total_params());
}

#[test]
fn strategies_change_gating_surface() {
    let all_shared = ModelBundle::<f64>::new(
        ModelConfig {
            strategy: SharingStrategy::AllShared,
            ..small_config()
        },
        &tasks(1),
        51,
    )
    .unwrap();
    assert!(all_shared.gated_layers().is_empty());
    assert!(all_shared.shared_params().keys().any(|k| k.starts_with("norm/")));

    let gated_all = ModelBundle::<f64>::new(
        ModelConfig {
            strategy: SharingStrategy::GatedAll,
            ..small_config()
        },
        &tasks(1),
        51,
    )
    .unwrap();
    let gated = gated_all.gated_layers();
    assert!(gated.iter().any(|l| l.name.ends_with(".n")), "norm layers gated");
    assert!(gated.iter().any(|l| !l.name.ends_with(".n")), "conv layers gated");

    let conv_only = ModelBundle::<f64>::new(small_config(), &tasks(1), 51).unwrap();
    assert!(conv_only.gated_layers().iter().all(|l| !l.name.ends_with(".n")));
}

#[test]
fn select_weights_routes_branches_bitwise() {
    let mut bundle = ModelBundle::<f64>::new(small_config(), &tasks(1), 61).unwrap();
    let layer = bundle.gated_layers()[0].name.clone();
    let shared_w = bundle.shared_params()[&format!("conv/{layer}.w")].clone();

    // Shared branch selected: exactly the shared tensor.
    bundle.set_score(&layer, 0.2);
    let (w, _b) = bundle.select_weights(&layer, 0).unwrap();
    assert_eq!(w.data(), shared_w.data());

    // Specific branch selected: first touch copies, then the stored branch
    // is returned verbatim.
    bundle.set_score(&layer, 0.9);
    {
        let (w, _b) = bundle.select_weights(&layer, 0).unwrap();
        assert_eq!(w.data(), shared_w.data(), "first touch copies the shared weights");
    }
    let key = format!("spec/{layer}.w");
    bundle.task_params_mut(0).get_mut(&key).unwrap().data_mut()[0] += 1.5;
    let expect = bundle.task_params(0)[&key].clone();
    let (w, _b) = bundle.select_weights(&layer, 0).unwrap();
    assert_eq!(w.data(), expect.data(), "materialized branch returned bit-identically");

    // Unregistered task is an error.
    assert!(bundle.select_weights(&layer, 5).is_err());
}

#[test]
fn f32_instantiation_works_end_to_end() {
    // The core is generic over the scalar; exercise the f32 path through
    // model construction, forward, and a projection round trip.
    let cfg = ModelConfig {
        pre_width: 4,
        widths: [4, 4, 6, 6],
        head_hidden: 6,
        ..ModelConfig::default()
    };
    let t = [TaskSpec {
        name: "s".into(),
        coord_bias: [1.0, 1.0, 0.0],
    }];
    let bundle = ModelBundle::<f32>::new(cfg, &t, 3).unwrap();
    let image = msloc_core::tensor::Tensor::<f32>::full(&[1, 3, 32, 32], 0.25);
    let pred = bundle.forward("s", &image).unwrap();
    assert_eq!(pred.len(), 16);
    assert!(pred.uncert.iter().all(|u| *u >= 1e-3));

    let pose = msloc_core::geom::Pose::<f32>::identity();
    let k = CameraIntrinsics::<f32>::new(100.0, 100.0, 50.0, 50.0);
    let out = msloc_core::geom::project(&pose, &k, &[nalgebra::Vector3::new(0.0f32, 0.0, 1.0)]);
    assert_eq!(out[0].0, nalgebra::Vector2::new(50.0f32, 50.0));
}
