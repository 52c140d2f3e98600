//! Stage-wise regressor training and the jointly trained classifier.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{assign_grid, build_direct_tuples, build_train_tuples, TrainTuple, DEFAULT_BG_THRESHOLD};
use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::features::{compute_global_features, FeatureConfig, FeatureMap};
use crate::gridgen::{generate_grid, GridSpec};
use crate::synth::{derive_seed, Scene};

use super::loss::{classifier_loss, regression_loss};
use super::mlp::{Activation, Sgd};
use super::{ClassifierModel, RegressorModel, TrainMode};

// labels for the independent random streams derived from the seed
const STREAM_REGRESSOR_INIT: u64 = 1;
const STREAM_REGRESSOR_BATCH: u64 = 2;
const STREAM_CLASSIFIER_INIT: u64 = 3;
const STREAM_CLASSIFIER_BATCH: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub s_train: usize,
    pub n_iter_per_stage: usize,
    pub images_per_batch: usize,
    pub samples_per_image_per_step: usize,
    pub learning_rate: f64,
    pub classifier_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate multiplier applied once per `n_iter_per_stage`
    /// iterations, identically in every mode.
    pub lr_decay_per_stage: f64,
    pub seed: u64,
    /// Foreground to background ratio in classifier minibatches.
    pub fg_bg_ratio: f64,
    pub bg_threshold: f64,
    /// Minimum initial IoU for a box to become a direct-target tuple.
    pub ifrcnn_min_iou: f64,
    pub num_classes: usize,
    pub hidden_sizes: Vec<usize>,
    pub classifier_hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            s_train: 3,
            n_iter_per_stage: 2000,
            images_per_batch: 2,
            samples_per_image_per_step: 64,
            learning_rate: 0.01,
            classifier_learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_per_stage: 0.3,
            seed: 0,
            fg_bg_ratio: 1.0 / 3.0,
            bg_threshold: DEFAULT_BG_THRESHOLD,
            ifrcnn_min_iou: 0.5,
            num_classes: 4,
            hidden_sizes: vec![128, 128],
            classifier_hidden_sizes: vec![128, 128],
            activation: Activation::Relu,
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train: {m}")));
        if self.s_train == 0 || self.n_iter_per_stage == 0 || self.images_per_batch == 0 || self.samples_per_image_per_step == 0 {
            return bad("s_train, n_iter_per_stage, images_per_batch and samples_per_image_per_step must be >= 1");
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("classifier_learning_rate", self.classifier_learning_rate),
            ("lr_decay_per_stage", self.lr_decay_per_stage),
            ("fg_bg_ratio", self.fg_bg_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.bg_threshold) || !(0.0..=1.0).contains(&self.ifrcnn_min_iou) {
            return bad("bg_threshold must lie in [0, 1) and ifrcnn_min_iou in [0, 1]");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1");
        }
        if self.hidden_sizes.contains(&0) || self.classifier_hidden_sizes.contains(&0) {
            return bad("hidden layer sizes must be >= 1");
        }
        self.features.validate()
    }

    pub fn total_iterations(&self) -> usize {
        self.s_train * self.n_iter_per_stage
    }

    /// Learning rate at a global iteration; depends on nothing else, so all
    /// modes follow the same schedule.
    pub fn lr_at(&self, base: f64, iteration: usize) -> f64 {
        base * self.lr_decay_per_stage.powi((iteration / self.n_iter_per_stage) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Schedule stage, 1-based. Only meaningful as a curriculum stage in
    /// GCNN mode.
    pub stage: usize,
    pub regression_loss: f64,
    pub classifier_loss: f64,
    pub fg_samples: usize,
    /// No foreground tuple was drawn, so the regressor was not updated.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: TrainMode,
    /// First iteration of each training phase.
    pub stage_boundaries: Vec<usize>,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub regressor: RegressorModel,
    pub classifier: ClassifierModel,
    pub log: TrainLog,
}

/// Per-scene training material, computed once.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub features: FeatureMap,
    /// Cumulative tuples up to `s_train`; the stage-`c` pool is the prefix
    /// `..stage_len[c - 1]`.
    pub tuples: Vec<TrainTuple>,
    pub stage_len: Vec<usize>,
    pub step1_fg: Vec<usize>,
    pub step1_bg: Vec<usize>,
    pub direct: Vec<TrainTuple>,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scenes: Vec<PreparedScene>,
    pub input_dim: usize,
}

impl PreparedData {
    pub fn new(scenes: &[Scene], grid_spec: &GridSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let mut prepared = Vec::with_capacity(scenes.len());
        let mut grid_cache: Option<((usize, usize), Vec<BBox>)> = None;
        for scene in scenes {
            let size = (scene.image.width(), scene.image.height());
            if grid_cache.as_ref().is_none_or(|(s, _)| *s != size) {
                grid_cache = Some((size, generate_grid(grid_spec, size.0 as f64, size.1 as f64)?));
            }
            let grid = &grid_cache.as_ref().unwrap().1;
            if let Some(g) = scene.gts.iter().find(|g| g.class_label.index() > config.num_classes) {
                return Err(Error::ModelMismatch(format!("scene {} has class {} > {}", scene.scene_id, g.class_label, config.num_classes)));
            }
            let assignments = assign_grid(grid, &scene.gts, config.bg_threshold);
            let tuples = build_train_tuples(grid, &assignments, config.s_train, config.s_train)?;
            let n_fg = assignments.iter().filter(|a| !a.is_background()).count();
            let stage_len = (1..=config.s_train).map(|c| grid.len() + n_fg * (c - 1)).collect();
            let (step1_fg, step1_bg) = (0..grid.len()).partition(|&i| !tuples[i].is_background());
            prepared.push(PreparedScene {
                features: compute_global_features(&scene.image, &config.features.extractor),
                direct: build_direct_tuples(grid, &assignments, config.ifrcnn_min_iou),
                tuples,
                stage_len,
                step1_fg,
                step1_bg,
            });
        }
        Ok(Self { scenes: prepared, input_dim: config.features.input_dim() })
    }
}

fn inputs_for(config: &FeatureConfig, fm: &FeatureMap, batch: &[TrainTuple]) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|t| config.box_input(fm, &t.box_state)).collect()
}

fn pick_images<R: Rng>(rng: &mut R, n_scenes: usize, per_batch: usize) -> Vec<usize> {
    sample_indices(rng, n_scenes, per_batch.min(n_scenes)).into_vec()
}

/// Train the box regressor in the given mode. Returns the model and one
/// record per SGD iteration (classifier loss left at 0).
pub fn train_regressor(data: &PreparedData, config: &TrainConfig, mode: TrainMode) -> Result<(RegressorModel, Vec<IterationRecord>)> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_REGRESSOR_INIT));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_REGRESSOR_BATCH));
    let mut model = RegressorModel::new(data.input_dim, &config.hidden_sizes, config.num_classes, config.activation, &mut init_rng)?;
    let mut opt = Sgd::new(model.mlp.num_params(), config.momentum, config.weight_decay);
    let mut records = Vec::with_capacity(config.total_iterations());

    for it in 0..config.total_iterations() {
        let stage = it / config.n_iter_per_stage + 1;
        let mut batch = Vec::new();
        let mut inputs = Vec::new();
        for si in pick_images(&mut rng, data.scenes.len(), config.images_per_batch) {
            let scene = &data.scenes[si];
            let pool: &[TrainTuple] = match mode {
                TrainMode::Gcnn => &scene.tuples[..scene.stage_len[stage - 1]],
                TrainMode::OneStepGrid => &scene.tuples[..scene.stage_len[config.s_train - 1]],
                TrainMode::IfRcnn => &scene.direct,
            };
            if pool.is_empty() {
                continue;
            }
            let start = batch.len();
            for _ in 0..config.samples_per_image_per_step {
                batch.push(pool[rng.random_range(0..pool.len())]);
            }
            inputs.extend(inputs_for(&config.features, &scene.features, &batch[start..])?);
        }
        let (loss, fg, skipped) = if batch.is_empty() {
            (0.0, 0, true)
        } else {
            let out = regression_loss(&model, &batch, &inputs)?;
            if !out.all_background {
                opt.step(model.mlp.params_mut(), &out.grads, config.lr_at(config.learning_rate, it));
            }
            (out.loss, out.contributing, out.all_background)
        };
        records.push(IterationRecord { iteration: it, stage, regression_loss: loss, classifier_loss: 0.0, fg_samples: fg, skipped });
    }
    if model.mlp.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidConfig("regressor diverged (non-finite parameters); lower the learning rate".into()));
    }
    Ok((model, records))
}

/// Train the classifier on step-1 tuples with a fixed foreground fraction.
/// Uses its own random streams, so the result does not depend on the
/// regressor's mode.
pub fn train_classifier(data: &PreparedData, config: &TrainConfig) -> Result<(ClassifierModel, Vec<f64>)> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_CLASSIFIER_INIT));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_CLASSIFIER_BATCH));
    let mut model =
        ClassifierModel::new(data.input_dim, &config.classifier_hidden_sizes, config.num_classes, config.activation, &mut init_rng)?;
    let mut opt = Sgd::new(model.mlp.num_params(), config.momentum, config.weight_decay);
    let fg_fraction = config.fg_bg_ratio / (1.0 + config.fg_bg_ratio);
    let n = config.samples_per_image_per_step;
    let n_fg_wanted = ((n as f64) * fg_fraction).round() as usize;
    let mut losses = Vec::with_capacity(config.total_iterations());

    for it in 0..config.total_iterations() {
        let mut batch = Vec::with_capacity(n * config.images_per_batch);
        let mut inputs = Vec::with_capacity(n * config.images_per_batch);
        for si in pick_images(&mut rng, data.scenes.len(), config.images_per_batch) {
            let scene = &data.scenes[si];
            let start = batch.len();
            for j in 0..n {
                let want_fg = j < n_fg_wanted;
                let list = match (want_fg, scene.step1_fg.is_empty(), scene.step1_bg.is_empty()) {
                    (true, false, _) | (false, false, true) => &scene.step1_fg,
                    _ => &scene.step1_bg,
                };
                batch.push(scene.tuples[list[rng.random_range(0..list.len())]]);
            }
            inputs.extend(inputs_for(&config.features, &scene.features, &batch[start..])?);
        }
        let out = classifier_loss(&model, &batch, &inputs)?;
        opt.step(model.mlp.params_mut(), &out.grads, config.lr_at(config.classifier_learning_rate, it));
        losses.push(out.loss);
    }
    if model.mlp.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidConfig("classifier diverged (non-finite parameters); lower the learning rate".into()));
    }
    Ok((model, losses))
}

pub fn stage_boundaries(config: &TrainConfig, mode: TrainMode) -> Vec<usize> {
    match mode {
        TrainMode::Gcnn => (0..config.s_train).map(|c| c * config.n_iter_per_stage).collect(),
        TrainMode::OneStepGrid | TrainMode::IfRcnn => vec![0],
    }
}

/// Merge regressor and classifier records into one log.
pub fn assemble_log(mode: TrainMode, config: &TrainConfig, mut records: Vec<IterationRecord>, classifier_losses: &[f64]) -> TrainLog {
    for (r, &c) in records.iter_mut().zip(classifier_losses) {
        r.classifier_loss = c;
    }
    TrainLog { mode, stage_boundaries: stage_boundaries(config, mode), iterations: records }
}

/// Train regressor and classifier. In GCNN mode the regressor goes through
/// stages `1..=s_train`, each adding the next step's tuples to the pool.
/// The other modes spend the same number of iterations in one phase.
pub fn train_stepwise(scenes: &[Scene], grid_spec: &GridSpec, config: &TrainConfig, mode: TrainMode) -> Result<TrainedModels> {
    let data = PreparedData::new(scenes, grid_spec, config)?;
    let (regressor, records) = train_regressor(&data, config, mode)?;
    let (classifier, closs) = train_classifier(&data, config)?;
    Ok(TrainedModels { regressor, classifier, log: assemble_log(mode, config, records, &closs) })
}
