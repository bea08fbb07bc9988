//! Manual probe: joint 3-scene accuracy vs iteration count.
//! `cargo test --release -p msloc-core --test convergence_probe -- --ignored --nocapture`

use msloc_core::geom::CameraIntrinsics;
use msloc_core::metrics::{accuracy_5cm5deg, median_errors};
use msloc_core::model::{ModelBundle, ModelConfig, TaskSpec};
use msloc_core::optim::OptimizerConfig;
use msloc_core::sim::{generate_scene, make_dataset};
use msloc_core::train::{evaluate_task, BatchSampler, Trainer};

#[test]
#[ignore]
fn joint_three_scenes() {
    let img = 64usize;
    let k = CameraIntrinsics::new(img as f64, img as f64, 32.0, 32.0);
    let scenes: Vec<_> = [101u64, 202, 303]
        .iter()
        .map(|s| generate_scene(*s, [4.0, 4.0], 3, 0.01, Some(900)))
        .collect();
    let datasets: Vec<_> = scenes
        .iter()
        .map(|s| make_dataset::<f64>(s, 120, 20, 7, &k, img, img).unwrap())
        .collect();

    let tasks: Vec<TaskSpec> = (0..3)
        .map(|i| TaskSpec { name: format!("s{i}"), coord_bias: [2.0, 2.0, 0.0] })
        .collect();
    let mcfg = ModelConfig { head_hidden: 64, ..ModelConfig::default() };
    let mut bundle = ModelBundle::<f64>::new(mcfg, &tasks, 7).unwrap();
    let total = 5000usize;
    let cfg = OptimizerConfig {
        learning_rate: 3e-3,
        iterations: total,
        ..OptimizerConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), 3);
    let mut sampler = BatchSampler::new(cfg.seed, 3, cfg.batch_size);
    let t0 = std::time::Instant::now();
    for iter in 0..total {
        let mut batches = Vec::new();
        for t in 0..3 {
            batches.push((t, sampler.sample(t, &datasets[t].train, iter).unwrap()));
        }
        trainer.step(&mut bundle, &batches, iter).unwrap();
        if (iter + 1) % 1000 == 0 {
            for t in 0..3 {
                let evals = evaluate_task(&bundle, &format!("s{t}"), &datasets[t].test, &Default::default(), 3).unwrap();
                let errs: Vec<_> = evals.iter().map(|e| e.error).collect();
                let (mt, mr) = median_errors(&errs).unwrap();
                let acc = accuracy_5cm5deg(&errs).unwrap();
                println!(
                    "iter {:>5} scene{t}: median {mt:.3} m / {mr:.2} deg, acc {acc:.0}% | {:.0}s",
                    iter + 1,
                    t0.elapsed().as_secs_f64()
                );
            }
            let report = bundle.sharing_report().unwrap();
            println!(
                "  shared layers {}/{}, scores {:?}",
                report.layers.iter().filter(|l| l.shared).count(),
                report.layers.len(),
                report.layers.iter().map(|l| (l.score * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
}
