//! Experiment recipes: joint training, per-scene separate training,
//! generalization to a new scene with frozen shared parameters, checkpoint
//! evaluation, and the module ablations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use msloc_core::checkpoint::{self, CheckpointError};
use msloc_core::geom::CameraIntrinsics;
use msloc_core::metrics::{SceneMetrics, METRICS_CSV_HEADER};
use msloc_core::model::{ModelBundle, TaskSpec};
use msloc_core::sim::{self, generate_scene, make_dataset, RenderedView, SceneDataset, SceneSpec};
use msloc_core::train::{
    evaluate_task, train_log_header, BatchSampler, FrameEval, Trainer, TrainLogRow,
};

use crate::config::{Config, SceneCfg};
use crate::error::CliError;
use crate::record::{GeneralizeRecord, ParamsRecord, RunRecord, SceneMetricsRecord};

/// A parsed config plus its canonical hash and resolved output directory.
pub struct RunContext {
    pub cfg: Config,
    pub hash: String,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(cfg: Config) -> Self {
        let hash = cfg.hash();
        let out = cfg.experiment.out_dir.clone();
        Self { cfg, hash, out }
    }

    fn intrinsics(&self) -> CameraIntrinsics<f64> {
        let f = self.cfg.focal();
        let c = self.cfg.sim.image_size as f64 / 2.0;
        CameraIntrinsics::new(f, f, c, c)
    }

    fn scene_spec(&self, scene: &SceneCfg) -> SceneSpec {
        generate_scene(
            scene.seed,
            scene.extent,
            self.cfg.sim.channels,
            self.cfg.sim.noise_sigma,
            scene.height_seed,
        )
    }

    fn task_spec(&self, scene: &SceneCfg) -> TaskSpec {
        TaskSpec {
            name: scene.name.clone(),
            coord_bias: [scene.extent[0] / 2.0, scene.extent[1] / 2.0, 0.0],
        }
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    /// Renders (or loads, when `gen-data` already wrote them with a
    /// matching config hash) the datasets for the given scenes.
    fn datasets(&self, scenes: &[SceneCfg], force: bool) -> Result<Vec<SceneDataset<f64>>, CliError> {
        let img = self.cfg.sim.image_size;
        let k = self.intrinsics();
        scenes
            .iter()
            .map(|scene| {
                let dir = self.data_dir();
                if dir.join(&scene.name).join("manifest.json").is_file() {
                    let manifest = sim::io::read_manifest(&dir, &scene.name)?;
                    if manifest.config_hash != self.hash && !force {
                        return Err(CliError::Checkpoint(CheckpointError::Corrupt(format!(
                            "dataset `{}` was generated from config {} but this run is {} (use --force to override)",
                            scene.name, manifest.config_hash, self.hash
                        ))));
                    }
                    return Ok(sim::io::read_dataset::<f64>(&dir, &scene.name)?);
                }
                let spec = self.scene_spec(scene);
                Ok(make_dataset::<f64>(
                    &spec,
                    self.cfg.sim.train_views,
                    self.cfg.sim.test_views,
                    self.cfg.experiment.seed,
                    &k,
                    img,
                    img,
                )?)
            })
            .collect()
    }

    fn write_with_hash(&self, path: &Path, body: &str) -> Result<(), CliError> {
        std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(path, format!("# config_hash={}\n{}", self.hash, body))?;
        Ok(())
    }
}

/// Renders every scene's dataset and writes it under `<out>/data`.
pub fn gen_data(ctx: &RunContext) -> Result<(), CliError> {
    let img = self_img(ctx);
    let k = ctx.intrinsics();
    std::fs::create_dir_all(ctx.data_dir())?;
    for scene in &ctx.cfg.scenes {
        let spec = ctx.scene_spec(scene);
        let ds = make_dataset::<f64>(
            &spec,
            ctx.cfg.sim.train_views,
            ctx.cfg.sim.test_views,
            ctx.cfg.experiment.seed,
            &k,
            img,
            img,
        )?;
        sim::io::write_dataset(&ctx.data_dir(), &scene.name, &spec, &ds, &ctx.hash)?;
        println!(
            "wrote {} train + {} test views for `{}`",
            ds.train.len(),
            ds.test.len(),
            scene.name
        );
    }
    Ok(())
}

struct TrainedRun {
    bundle: ModelBundle<f64>,
    log: Vec<TrainLogRow>,
    metrics: Vec<SceneMetrics>,
    evals: Vec<(String, Vec<FrameEval>)>,
}

/// Trains a fresh bundle over the given scene subset and evaluates every
/// scene's test split. A checkpoint is written periodically so an aborted
/// run keeps its last good state.
fn train_and_eval(
    ctx: &RunContext,
    scenes: &[SceneCfg],
    datasets: &[SceneDataset<f64>],
    ckpt_path: &Path,
) -> Result<TrainedRun, CliError> {
    if let Some(parent) = ckpt_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tasks: Vec<TaskSpec> = scenes.iter().map(|s| ctx.task_spec(s)).collect();
    let mut bundle = ModelBundle::<f64>::new(ctx.cfg.model_config(), &tasks, ctx.cfg.experiment.seed)?;
    let optim = ctx.cfg.optimizer_config();

    let mut trainer = Trainer::new(optim.clone(), tasks.len());
    let mut sampler = BatchSampler::new(optim.seed, tasks.len(), optim.batch_size);
    let checkpoint_every = (optim.iterations / 8).max(500);
    let mut log = Vec::with_capacity(optim.iterations);
    for iter in 0..optim.iterations {
        let mut batches = Vec::with_capacity(datasets.len());
        for (task, ds) in datasets.iter().enumerate() {
            batches.push((task, sampler.sample(task, &ds.train, iter).map_err(msloc_core::train::TrainError::from)?));
        }
        log.push(trainer.step(&mut bundle, &batches, iter)?);
        if (iter + 1) % checkpoint_every == 0 {
            checkpoint::save(&bundle, ckpt_path, &ctx.hash)?;
        }
    }
    checkpoint::save(&bundle, ckpt_path, &ctx.hash)?;

    let ransac = ctx.cfg.ransac_config();
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    for (scene, ds) in scenes.iter().zip(datasets) {
        let frame_evals = evaluate_task(&bundle, &scene.name, &ds.test, &ransac, ctx.cfg.experiment.seed)?;
        let errs: Vec<_> = frame_evals.iter().map(|e| e.error).collect();
        metrics.push(SceneMetrics::from_errors(&scene.name, &errs)?);
        evals.push((scene.name.clone(), frame_evals));
    }
    Ok(TrainedRun {
        bundle,
        log,
        metrics,
        evals,
    })
}

fn self_img(ctx: &RunContext) -> usize {
    ctx.cfg.sim.image_size
}

fn metrics_csv(metrics: &[SceneMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

fn training_log_csv(task_names: &[String], log: &[TrainLogRow]) -> String {
    let mut s = train_log_header(task_names);
    s.push('\n');
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

fn frame_csv(evals: &[FrameEval]) -> String {
    let mut s = String::from("frame,trans_err_m,rot_err_deg,inliers,dropped\n");
    for (i, e) in evals.iter().enumerate() {
        s.push_str(&format!(
            "{i},{:.6},{:.6},{},{}\n",
            e.error.translation_m, e.error.rotation_deg, e.inliers, e.dropped
        ));
    }
    let errs: Vec<_> = evals.iter().map(|e| e.error).collect();
    if let (Ok((mt, mr)), Ok(acc)) = (
        msloc_core::metrics::median_errors(&errs),
        msloc_core::metrics::accuracy_5cm5deg(&errs),
    ) {
        s.push_str(&format!("summary,{mt:.6},{mr:.6},{acc:.2},{}\n", evals.len()));
    }
    s
}

/// Sharing report JSON with the config hash attached.
fn sharing_report_json(bundle: &ModelBundle<f64>, hash: &str) -> Result<String, CliError> {
    let report = bundle.sharing_report()?;
    let mut value: serde_json::Value = serde_json::from_str(&report.to_json()).expect("report json");
    value["config_hash"] = serde_json::Value::String(hash.to_string());
    Ok(serde_json::to_string_pretty(&value).expect("report json"))
}

fn params_record(bundle: &ModelBundle<f64>) -> Result<ParamsRecord, CliError> {
    let report = bundle.sharing_report()?;
    let mut specific = std::collections::BTreeMap::new();
    let mut heads = std::collections::BTreeMap::new();
    for (i, name) in bundle.tasks().iter().enumerate() {
        let head = bundle.head_param_count(i);
        let spec_total = report.specific_params[name];
        specific.insert(name.clone(), spec_total - head);
        heads.insert(name.clone(), head);
    }
    let total = report.total_params();
    let rec = ParamsRecord {
        shared: report.shared_params,
        specific,
        heads,
        total,
    };
    debug_assert!(rec.closes());
    Ok(rec)
}

fn write_standard_outputs(ctx: &RunContext, run: &TrainedRun, record: &RunRecord) -> Result<(), CliError> {
    std::fs::create_dir_all(&ctx.out)?;
    ctx.write_with_hash(&ctx.out.join("metrics.csv"), &metrics_csv(&run.metrics))?;
    ctx.write_with_hash(
        &ctx.out.join("training_log.csv"),
        &training_log_csv(run.bundle.tasks(), &run.log),
    )?;
    std::fs::write(&ctx.out.join("sharing_report.json"), sharing_report_json(&run.bundle, &ctx.hash)?)?;
    for (scene, evals) in &run.evals {
        ctx.write_with_hash(&ctx.out.join(format!("eval_{scene}_test.csv")), &frame_csv(evals))?;
    }
    std::fs::write(ctx.out.join("run_record.json"), record.to_json())?;
    Ok(())
}

fn base_record(ctx: &RunContext, verb: &str, bundle: &ModelBundle<f64>, metrics: &[SceneMetrics], wall: f64) -> Result<RunRecord, CliError> {
    Ok(RunRecord {
        verb: verb.to_string(),
        config_hash: ctx.hash.clone(),
        strategy: format!("{:?}", ctx.cfg.experiment.strategy),
        beta: ctx.cfg.experiment.beta,
        lambda: ctx.cfg.experiment.lambda,
        seed: ctx.cfg.experiment.seed,
        scenes: metrics.iter().map(SceneMetricsRecord::from).collect(),
        params: params_record(bundle)?,
        wall_clock_s: wall,
        generalize: None,
    })
}

/// Trains one bundle over all scenes jointly and evaluates every test
/// split.
pub fn run_joint(ctx: &RunContext, force: bool) -> Result<RunRecord, CliError> {
    let t0 = Instant::now();
    let datasets = ctx.datasets(&ctx.cfg.scenes, force)?;
    let run = train_and_eval(ctx, &ctx.cfg.scenes, &datasets, &ctx.out.join("checkpoint.ckpt"))?;
    let record = base_record(ctx, "train-joint", &run.bundle, &run.metrics, t0.elapsed().as_secs_f64())?;
    write_standard_outputs(ctx, &run, &record)?;
    Ok(record)
}

/// Trains one single-task bundle per scene; parameter totals sum over the
/// independent models.
pub fn run_separate(ctx: &RunContext, force: bool) -> Result<RunRecord, CliError> {
    let t0 = Instant::now();
    let datasets = ctx.datasets(&ctx.cfg.scenes, force)?;
    std::fs::create_dir_all(&ctx.out)?;

    let mut all_metrics = Vec::new();
    let mut shared_total = 0usize;
    let mut specific = std::collections::BTreeMap::new();
    let mut heads = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for (scene, ds) in ctx.cfg.scenes.iter().zip(&datasets) {
        let subset = [scene.clone()];
        let sub_ds = [ds.clone()];
        let ckpt = ctx.out.join(format!("checkpoint_{}.ckpt", scene.name));
        let run = train_and_eval(ctx, &subset, &sub_ds, &ckpt)?;
        let params = params_record(&run.bundle)?;
        shared_total += params.shared;
        specific.insert(scene.name.clone(), params.specific[&scene.name]);
        heads.insert(scene.name.clone(), params.heads[&scene.name]);
        total += params.total;
        all_metrics.extend(run.metrics.clone());
        ctx.write_with_hash(
            &ctx.out.join(format!("training_log_{}.csv", scene.name)),
            &training_log_csv(run.bundle.tasks(), &run.log),
        )?;
        std::fs::write(
            ctx.out.join(format!("sharing_report_{}.json", scene.name)),
            sharing_report_json(&run.bundle, &ctx.hash)?,
        )?;
        for (name, evals) in &run.evals {
            ctx.write_with_hash(&ctx.out.join(format!("eval_{name}_test.csv")), &frame_csv(evals))?;
        }
    }

    let record = RunRecord {
        verb: "train-separate".to_string(),
        config_hash: ctx.hash.clone(),
        strategy: format!("{:?}", ctx.cfg.experiment.strategy),
        beta: ctx.cfg.experiment.beta,
        lambda: ctx.cfg.experiment.lambda,
        seed: ctx.cfg.experiment.seed,
        scenes: all_metrics.iter().map(SceneMetricsRecord::from).collect(),
        params: ParamsRecord {
            shared: shared_total,
            specific,
            heads,
            total,
        },
        wall_clock_s: t0.elapsed().as_secs_f64(),
        generalize: None,
    };
    ctx.write_with_hash(&ctx.out.join("metrics.csv"), &metrics_csv(&all_metrics))?;
    std::fs::write(ctx.out.join("run_record.json"), record.to_json())?;
    Ok(record)
}

/// Loads a base checkpoint, adds the configured new scene with frozen
/// shared parameters, trains only the new task, and verifies the freeze
/// and no-forgetting contracts.
pub fn run_generalize(ctx: &RunContext, force: bool) -> Result<RunRecord, CliError> {
    let t0 = Instant::now();
    let gcfg = ctx
        .cfg
        .generalize
        .clone()
        .ok_or_else(|| CliError::Usage("generalize requires a [generalize] config section".into()))?;

    let (mut bundle, header) = checkpoint::load::<f64>(&gcfg.base_checkpoint)?;
    if header.tasks.iter().any(|t| *t == gcfg.scene) {
        return Err(CliError::Usage(format!(
            "scene `{}` already exists in the base checkpoint",
            gcfg.scene
        )));
    }
    for base_task in &header.tasks {
        if !ctx.cfg.scenes.iter().any(|s| s.name == *base_task) {
            return Err(CliError::Usage(format!(
                "base checkpoint task `{base_task}` has no [[scene]] definition in this config"
            )));
        }
    }

    // Datasets: base scenes for the no-forgetting check, plus the new one.
    let base_scenes: Vec<SceneCfg> = header
        .tasks
        .iter()
        .map(|t| ctx.cfg.scenes.iter().find(|s| s.name == *t).cloned().expect("checked above"))
        .collect();
    let new_scene = ctx
        .cfg
        .scenes
        .iter()
        .find(|s| s.name == gcfg.scene)
        .cloned()
        .expect("validated by config");
    let base_datasets = ctx.datasets(&base_scenes, force)?;
    let new_dataset = ctx.datasets(std::slice::from_ref(&new_scene), force)?.remove(0);

    let ransac = ctx.cfg.ransac_config();
    let seed = ctx.cfg.experiment.seed;
    let mut pre_metrics = Vec::new();
    for (scene, ds) in base_scenes.iter().zip(&base_datasets) {
        let evals = evaluate_task(&bundle, &scene.name, &ds.test, &ransac, seed)?;
        let errs: Vec<_> = evals.iter().map(|e| e.error).collect();
        pre_metrics.push(SceneMetrics::from_errors(&scene.name, &errs)?);
    }

    let params_before = params_record(&bundle)?;
    bundle.add_task(&ctx.task_spec(&new_scene), true)?;
    let frozen_before = checkpoint::shared_param_hash(&bundle);

    // Train only the new task.
    let optim = ctx.cfg.optimizer_config();
    let new_idx = bundle.task_index(&gcfg.scene)?;
    let mut trainer = Trainer::new(optim.clone(), bundle.tasks().len());
    let mut sampler = BatchSampler::new(optim.seed, bundle.tasks().len(), optim.batch_size);
    let ckpt_path = ctx.out.join("generalized.ckpt");
    std::fs::create_dir_all(&ctx.out)?;
    let mut log = Vec::new();
    let checkpoint_every = (optim.iterations / 8).max(500);
    for iter in 0..optim.iterations {
        let batch = sampler
            .sample(new_idx, &new_dataset.train, iter)
            .map_err(msloc_core::train::TrainError::from)?;
        log.push(trainer.step(&mut bundle, &[(new_idx, batch)], iter)?);
        if (iter + 1) % checkpoint_every == 0 {
            checkpoint::save(&bundle, &ckpt_path, &ctx.hash)?;
        }
    }
    checkpoint::save(&bundle, &ckpt_path, &ctx.hash)?;

    let frozen_after = checkpoint::shared_param_hash(&bundle);

    // Post metrics: old scenes must be unchanged, the new one is appended.
    let mut post_metrics = Vec::new();
    let mut evals_out = Vec::new();
    for (scene, ds) in base_scenes.iter().zip(&base_datasets) {
        let evals = evaluate_task(&bundle, &scene.name, &ds.test, &ransac, seed)?;
        let errs: Vec<_> = evals.iter().map(|e| e.error).collect();
        post_metrics.push(SceneMetrics::from_errors(&scene.name, &errs)?);
        evals_out.push((scene.name.clone(), evals));
    }
    let old_scenes_unchanged = pre_metrics
        .iter()
        .zip(&post_metrics)
        .all(|(a, b)| {
            a.median_trans_m == b.median_trans_m
                && a.median_rot_deg == b.median_rot_deg
                && a.acc_5cm5deg == b.acc_5cm5deg
        });
    let new_evals = evaluate_task(&bundle, &gcfg.scene, &new_dataset.test, &ransac, seed)?;
    let errs: Vec<_> = new_evals.iter().map(|e| e.error).collect();
    post_metrics.push(SceneMetrics::from_errors(&gcfg.scene, &errs)?);
    evals_out.push((gcfg.scene.clone(), new_evals));

    let params_after = params_record(&bundle)?;
    let increased = params_after.total - params_before.total;

    let mut record = base_record(ctx, "generalize", &bundle, &post_metrics, t0.elapsed().as_secs_f64())?;
    record.generalize = Some(GeneralizeRecord {
        base_checkpoint: gcfg.base_checkpoint.display().to_string(),
        new_scene: gcfg.scene.clone(),
        frozen_shared_hash_equal: frozen_before == frozen_after,
        increased_params: increased,
        old_scenes_unchanged,
    });

    ctx.write_with_hash(&ctx.out.join("metrics.csv"), &metrics_csv(&post_metrics))?;
    ctx.write_with_hash(
        &ctx.out.join("training_log.csv"),
        &training_log_csv(bundle.tasks(), &log),
    )?;
    std::fs::write(ctx.out.join("sharing_report.json"), sharing_report_json(&bundle, &ctx.hash)?)?;
    for (scene, evals) in &evals_out {
        ctx.write_with_hash(&ctx.out.join(format!("eval_{scene}_test.csv")), &frame_csv(evals))?;
    }
    std::fs::write(ctx.out.join("run_record.json"), record.to_json())?;
    Ok(record)
}

/// Evaluates a checkpoint on one scene's split, writing the per-frame CSV
/// with a trailing summary row.
pub fn evaluate(ctx: &RunContext, force: bool) -> Result<PathBuf, CliError> {
    let ecfg = ctx
        .cfg
        .evaluate
        .clone()
        .ok_or_else(|| CliError::Usage("evaluate requires an [evaluate] config section".into()))?;
    let (bundle, header) = checkpoint::load::<f64>(&ecfg.checkpoint)?;
    if header.config_hash != ctx.hash && !force {
        return Err(CliError::Checkpoint(CheckpointError::Corrupt(format!(
            "checkpoint was trained with config {} but this config hashes to {} (use --force to override)",
            header.config_hash, ctx.hash
        ))));
    }
    if !header.tasks.iter().any(|t| *t == ecfg.scene) {
        return Err(CliError::Usage(format!(
            "scene `{}` is not a task of the checkpoint",
            ecfg.scene
        )));
    }
    let scene = ctx
        .cfg
        .scenes
        .iter()
        .find(|s| s.name == ecfg.scene)
        .cloned()
        .expect("validated by config");
    let ds = ctx.datasets(std::slice::from_ref(&scene), force)?.remove(0);
    let views: &[RenderedView<f64>] = match ecfg.split.as_str() {
        "train" => &ds.train,
        _ => &ds.test,
    };
    if views.is_empty() {
        return Err(CliError::Usage(format!("split `{}` of `{}` is empty", ecfg.split, ecfg.scene)));
    }
    let evals = evaluate_task(&bundle, &ecfg.scene, views, &ctx.cfg.ransac_config(), ctx.cfg.experiment.seed)?;
    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join(format!("eval_{}_{}.csv", ecfg.scene, ecfg.split));
    ctx.write_with_hash(&path, &frame_csv(&evals))?;
    Ok(path)
}

/// Named ablation variants of the joint run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoAttention,
    NoGradNorm,
    NoPenalty,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no-attention" => Ok(Variant::NoAttention),
            "no-gradnorm" => Ok(Variant::NoGradNorm),
            "no-penalty" => Ok(Variant::NoPenalty),
            other => Err(format!(
                "unknown variant `{other}` (expected full, no-attention, no-gradnorm, no-penalty)"
            )),
        }
    }
}

/// Runs the joint recipe with one component disabled. The variant changes
/// the effective config, so it changes the config hash too.
pub fn ablate(mut cfg: Config, variant: Variant, force: bool) -> Result<RunRecord, CliError> {
    match variant {
        Variant::Full => {}
        Variant::NoAttention => cfg.model.attention = false,
        Variant::NoGradNorm => cfg.optim.grad_norm = false,
        Variant::NoPenalty => cfg.experiment.beta = 0.0,
    }
    let ctx = RunContext::new(cfg);
    let mut record = run_joint(&ctx, force)?;
    record.verb = format!("ablate:{variant:?}");
    std::fs::write(ctx.out.join("run_record.json"), record.to_json())?;
    Ok(record)
}

/// Prints a summary of a finished run directory.
pub fn report(out: &Path) -> Result<String, CliError> {
    let record_path = out.join("run_record.json");
    let text = std::fs::read_to_string(&record_path)?;
    let record = RunRecord::from_json(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", record_path.display())))?;
    let mut s = String::new();
    s.push_str(&format!(
        "run: {} (config {})\nstrategy {}, beta {}, lambda {}, seed {}\n",
        record.verb, &record.config_hash[..12.min(record.config_hash.len())], record.strategy, record.beta, record.lambda, record.seed
    ));
    s.push_str(&format!(
        "params: shared {}, specific {}, heads {}, total {}\n",
        record.params.shared,
        record.params.specific.values().sum::<usize>(),
        record.params.heads.values().sum::<usize>(),
        record.params.total
    ));
    s.push_str("scene              med_trans_m  med_rot_deg  acc_5cm5deg  frames\n");
    for m in &record.scenes {
        s.push_str(&format!(
            "{:<18} {:>11.4} {:>12.3} {:>12.1} {:>7}\n",
            m.scene, m.median_trans_m, m.median_rot_deg, m.acc_5cm5deg, m.n_frames
        ));
    }
    s.push_str(&format!("mean accuracy: {:.2}%\n", record.mean_accuracy()));
    if let Some(g) = &record.generalize {
        s.push_str(&format!(
            "generalize: new scene `{}`, frozen hash equal {}, +{} params, old scenes unchanged {}\n",
            g.new_scene, g.frozen_shared_hash_equal, g.increased_params, g.old_scenes_unchanged
        ));
    }
    s.push_str(&format!("wall clock: {:.1}s\n", record.wall_clock_s));
    Ok(s)
}
