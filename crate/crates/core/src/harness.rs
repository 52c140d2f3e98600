//! Commands behind the CLI: generate, train, detect, eval and ablation.
//! Each one reads and writes plain files so runs can be chained or resumed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::config::ExperimentConfig;
use crate::detect::{finalize, run_iterations, trajectory_records, write_trajectories, Classifier, DetectConfig, DetectionResult, Regressor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, image_gts, mean_ap, read_detections, write_detections, Detection, ImageGt, MetricsReport};
use crate::features::{Backbone, FeatureConfig};
use crate::gridgen::{generate_grid, GridSpec};
use crate::model::checkpoint::Checkpoint;
use crate::model::train::{assemble_log, train_classifier, train_regressor, PreparedData};
use crate::model::{train_stepwise, TrainLog, TrainMode};
use crate::synth::{generate_range, load_dataset, write_image_dump, DatasetManifest, Scene, TEST_SCENE_ID_OFFSET};

pub const TRAIN_LOG_FORMAT: &str = "gcnn-train-log";
pub const ABLATION_FORMAT: &str = "gcnn-ablation";
pub const FORMAT_VERSION: u32 = 1;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct GeneratedPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Write train and test manifests (and optional image dumps) to `out_dir`.
pub fn cmd_generate(config: &ExperimentConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<GeneratedPaths> {
    config.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig("n_train and n_test must be >= 1".into()));
    }
    create_dir(out_dir)?;
    let mut paths = Vec::new();
    for (split, first, n) in [("train", 0, n_train), ("test", TEST_SCENE_ID_OFFSET, n_test)] {
        let scenes = generate_range(&config.synth, first, n)?;
        let dump = if config.dump_images {
            let name = format!("{split}_images.bin");
            write_image_dump(&out_dir.join(&name), &scenes)?;
            Some(name)
        } else {
            None
        };
        let path = out_dir.join(format!("{split}_manifest.json"));
        DatasetManifest::from_scenes(split, &config.synth, &scenes, dump).write(&path)?;
        info!("wrote {} {split} scenes to {}", scenes.len(), path.display());
        paths.push(path);
    }
    let test_manifest = paths.pop().unwrap();
    Ok(GeneratedPaths { train_manifest: paths.pop().unwrap(), test_manifest })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainLogHeader {
    format: String,
    version: u32,
    mode: TrainMode,
    seed: u64,
    total_iterations: usize,
    stage_boundaries: Vec<usize>,
}

pub fn write_train_log(path: &Path, log: &TrainLog, seed: u64) -> Result<()> {
    let mut out = create_file(path)?;
    let header = TrainLogHeader {
        format: TRAIN_LOG_FORMAT.into(),
        version: FORMAT_VERSION,
        mode: log.mode,
        seed,
        total_iterations: log.iterations.len(),
        stage_boundaries: log.stage_boundaries.clone(),
    };
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for r in &log.iterations {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Train in `config.mode` on the scenes of a manifest.
pub fn cmd_train(config: &ExperimentConfig, train_manifest: &Path, out_dir: &Path) -> Result<TrainOutput> {
    config.validate()?;
    let (manifest, scenes) = load_dataset(train_manifest)?;
    if manifest.config.num_classes as usize != config.train.num_classes {
        return Err(Error::ModelMismatch(format!(
            "dataset has {} classes, config trains {}",
            manifest.config.num_classes, config.train.num_classes
        )));
    }
    create_dir(out_dir)?;
    info!("training {} on {} scenes", config.mode, scenes.len());
    let trained = train_stepwise(&scenes, &config.grid_train, &config.train, config.mode)?;
    let checkpoint = out_dir.join(format!("checkpoint_{}.json", config.mode));
    Checkpoint::new(config.mode, &config.train, &config.grid_train, &trained.regressor, &trained.classifier).write(&checkpoint)?;
    let log = out_dir.join(format!("train_log_{}.jsonl", config.mode));
    write_train_log(&log, &trained.log, config.train.seed)?;
    Ok(TrainOutput { checkpoint, log })
}

/// Detections of every scene after each requested number of iterations.
pub struct SceneDetections {
    pub scene_id: u64,
    /// Keyed by iteration count.
    pub by_steps: BTreeMap<usize, Vec<DetectionResult>>,
}

/// Run detection once per scene with `max(steps)` iterations and read off
/// the result after each requested count.
#[allow(clippy::too_many_arguments)]
pub fn detect_scenes(
    scenes: &[Scene],
    grid_spec: &GridSpec,
    backbone: &Backbone,
    features: &FeatureConfig,
    regressor: &dyn Regressor,
    classifier: &dyn Classifier,
    detect: &DetectConfig,
    steps: &[usize],
) -> Result<Vec<SceneDetections>> {
    let max_steps = steps.iter().copied().max().unwrap_or(detect.s_test);
    let run_cfg = DetectConfig { s_test: max_steps, ..detect.clone() };
    let mut grid_cache: Option<((usize, usize), Vec<BBox>)> = None;
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let size = (scene.image.width(), scene.image.height());
        if grid_cache.as_ref().is_none_or(|(s, _)| *s != size) {
            grid_cache = Some((size, generate_grid(grid_spec, size.0 as f64, size.1 as f64)?));
        }
        let grid = &grid_cache.as_ref().unwrap().1;
        let traj = run_iterations(&scene.image, grid, backbone, features, regressor, classifier, &run_cfg)?;
        let by_steps = steps.iter().map(|&k| Ok((k, finalize(&traj, k, &run_cfg)?))).collect::<Result<_>>()?;
        out.push(SceneDetections { scene_id: scene.scene_id, by_steps });
    }
    Ok(out)
}

pub fn flatten_detections(per_scene: &[SceneDetections], steps: usize) -> Vec<Detection> {
    per_scene
        .iter()
        .flat_map(|s| {
            s.by_steps[&steps].iter().map(move |d| Detection {
                image_id: s.scene_id,
                class_label: d.class_label,
                score: d.score,
                bbox: d.final_box,
            })
        })
        .collect()
}

fn scene_gts(scenes: &[Scene]) -> Vec<ImageGt> {
    image_gts(scenes.iter().map(|s| (s.scene_id, s.gts.as_slice())))
}

#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub detections: PathBuf,
    pub trajectories: PathBuf,
    pub global_feature_calls: usize,
    pub scenes: usize,
}

/// Detect on every scene of a manifest with the checkpoint's networks.
pub fn cmd_detect(config: &ExperimentConfig, checkpoint: &Path, test_manifest: &Path, out_dir: &Path) -> Result<DetectOutput> {
    config.validate()?;
    let ck = Checkpoint::read(checkpoint)?;
    let (regressor, classifier) = (ck.regressor()?, ck.classifier()?);
    let (_, scenes) = load_dataset(test_manifest)?;
    create_dir(out_dir)?;
    let features = &ck.train.features;
    let backbone = Backbone::new(features.extractor.clone());
    let detect = config.detect_config();
    let per_scene = detect_scenes(&scenes, &config.grid_test, &backbone, features, &regressor, &classifier, &detect, &[detect.s_test])?;

    let stem = format!("{}_s{}", ck.mode, detect.s_test);
    let detections = out_dir.join(format!("detections_{stem}.jsonl"));
    let mut f = create_file(&detections)?;
    write_detections(&mut f, &flatten_detections(&per_scene, detect.s_test))?;
    f.flush().map_err(|e| Error::io(&detections, e))?;

    let trajectories = out_dir.join(format!("trajectories_{stem}.jsonl"));
    let records: Vec<_> = per_scene.iter().flat_map(|s| trajectory_records(s.scene_id, &s.by_steps[&detect.s_test])).collect();
    let mut f = create_file(&trajectories)?;
    write_trajectories(&mut f, &records)?;
    f.flush().map_err(|e| Error::io(&trajectories, e))?;

    Ok(DetectOutput { detections, trajectories, global_feature_calls: backbone.invocations(), scenes: scenes.len() })
}

/// Evaluate a detection dump against the ground truth of a manifest.
pub fn cmd_eval(config: &ExperimentConfig, dump: &Path, test_manifest: &Path, out: &Path) -> Result<MetricsReport> {
    config.validate()?;
    let file = fs::File::open(dump).map_err(|e| Error::io(dump, e))?;
    let dets = read_detections(BufReader::new(file))?;
    let manifest = DatasetManifest::read(test_manifest)?;
    let gts = image_gts(manifest.scenes.iter().map(|s| (s.scene_id, s.gts.as_slice())));
    let report = evaluate(
        &dets,
        &gts,
        &manifest.config.similarity_groups,
        manifest.config.num_classes,
        &config.eval.fp_ranks,
        config.thresholds.iou_match,
        config.eval.protocol,
    )?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: TrainMode,
    pub s_test: usize,
    pub seed: u64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMean {
    pub method: TrainMode,
    pub s_test: usize,
    pub mean_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub format: String,
    pub version: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub means: Vec<AblationMean>,
}

impl AblationTable {
    pub fn map(&self, method: TrainMode, s_test: usize, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.s_test == s_test && r.seed == seed).map(|r| r.map)
    }

    pub fn mean(&self, method: TrainMode, s_test: usize) -> Option<f64> {
        self.means.iter().find(|m| m.method == method && m.s_test == s_test).map(|m| m.mean_map)
    }

    /// Plain-text table: one row per method and step count, one column per
    /// seed plus the mean.
    pub fn render(&self) -> String {
        let mut s = format!("{:<8} {:>6}", "method", "s_test");
        for seed in &self.seeds {
            s.push_str(&format!(" {:>8}", format!("seed{seed}")));
        }
        s.push_str(&format!(" {:>8}\n", "mean"));
        for m in &self.means {
            s.push_str(&format!("{:<8} {:>6}", m.method.as_str(), m.s_test));
            for &seed in &self.seeds {
                s.push_str(&format!(" {:>8.4}", self.map(m.method, m.s_test, seed).unwrap_or(f64::NAN)));
            }
            s.push_str(&format!(" {:>8.4}\n", m.mean_map));
        }
        s
    }
}

/// For each seed: generate data, train all three methods with equal compute
/// and a shared classifier, and evaluate each at `1..=s_test` iterations.
/// Detection dumps go to `out_dir/seed<N>/<method>_s<k>.jsonl`.
pub fn cmd_ablation(config: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<AblationTable> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    if config.s_test == 0 {
        return Err(Error::InvalidConfig("ablation needs s_test >= 1".into()));
    }
    create_dir(out_dir)?;
    let steps: Vec<usize> = (1..=config.s_test).collect();
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = config.clone().with_seed(seed);
        let train = generate_range(&cfg.synth, 0, cfg.n_train)?;
        let test = generate_range(&cfg.synth, TEST_SCENE_ID_OFFSET, cfg.n_test)?;
        let gts = scene_gts(&test);
        let data = PreparedData::new(&train, &cfg.grid_train, &cfg.train)?;
        let (classifier, closs) = train_classifier(&data, &cfg.train)?;
        let seed_dir = out_dir.join(format!("seed{seed}"));
        create_dir(&seed_dir)?;
        for mode in TrainMode::ALL {
            let (regressor, records) = train_regressor(&data, &cfg.train, mode)?;
            let log = assemble_log(mode, &cfg.train, records, &closs);
            write_train_log(&seed_dir.join(format!("train_log_{mode}.jsonl")), &log, seed)?;
            Checkpoint::new(mode, &cfg.train, &cfg.grid_train, &regressor, &classifier).write(&seed_dir.join(format!("checkpoint_{mode}.json")))?;
            let backbone = Backbone::new(cfg.train.features.extractor.clone());
            let per_scene = detect_scenes(&test, &cfg.grid_test, &backbone, &cfg.train.features, &regressor, &classifier, &cfg.detect_config(), &steps)?;
            for &k in &steps {
                let dets = flatten_detections(&per_scene, k);
                let path = seed_dir.join(format!("{mode}_s{k}.jsonl"));
                let mut f = create_file(&path)?;
                write_detections(&mut f, &dets)?;
                f.flush().map_err(|e| Error::io(&path, e))?;
                let map = mean_ap(&dets, &gts, cfg.thresholds.iou_match, cfg.eval.protocol);
                info!("seed {seed} {mode} s_test={k}: mAP {map:.4}");
                rows.push(AblationRow { method: mode, s_test: k, seed, map });
            }
        }
    }
    let means = TrainMode::ALL
        .iter()
        .flat_map(|&method| steps.iter().map(move |&s_test| (method, s_test)))
        .map(|(method, s_test)| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.s_test == s_test).map(|r| r.map).collect();
            AblationMean { method, s_test, mean_map: v.iter().sum::<f64>() / v.len() as f64 }
        })
        .collect();
    let table = AblationTable { format: ABLATION_FORMAT.into(), version: FORMAT_VERSION, seeds: seeds.to_vec(), rows, means };
    write_json(&out_dir.join("ablation.json"), &table)?;
    fs::write(out_dir.join("ablation.txt"), table.render()).map_err(|e| Error::io(out_dir.join("ablation.txt"), e))?;
    Ok(table)
}

/// Ground truth of the test split that `cmd_ablation` generates for a seed.
pub fn ablation_test_gts(config: &ExperimentConfig, seed: u64) -> Result<Vec<ImageGt>> {
    let cfg = config.clone().with_seed(seed);
    Ok(scene_gts(&generate_range(&cfg.synth, TEST_SCENE_ID_OFFSET, cfg.n_test)?))
}
