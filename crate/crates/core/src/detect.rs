//! Iterative detection: classify every box, move it by the delta of its
//! class, repeat. Image features are computed once; every iteration only
//! pools from them and runs the per-box networks.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::assign::ClassId;
use crate::boxgeom::{apply_delta, clip_to_image, iou, BBox, DeltaParams};
use crate::error::{Error, Result};
use crate::features::{pool_with_mode, Backbone, FeatureConfig, FeatureMap, GrayImage, PoolMode, PoolingIndex};
use crate::model::{predict, ClassifierModel, RegressorModel};

/// `ln(1000 / 16)`: the largest log-scale change applied in one iteration.
pub const DEFAULT_SCALE_CLAMP: f64 = 4.135_166_556_742_356;

/// What a regressor or classifier sees for one box in one iteration.
#[derive(Debug, Clone, Copy)]
pub struct BoxQuery<'a> {
    pub grid_index: usize,
    /// 1-based iteration the box is being evaluated in.
    pub step: usize,
    pub bbox: &'a BBox,
    pub input: &'a [f64],
}

pub trait Regressor {
    fn num_classes(&self) -> usize;
    /// One delta per foreground class, class 1 first.
    fn regress(&self, query: &BoxQuery<'_>) -> Result<Vec<DeltaParams>>;
}

pub trait Classifier {
    fn num_classes(&self) -> usize;
    /// `num_classes + 1` probabilities, background first.
    fn probabilities(&self, query: &BoxQuery<'_>) -> Result<Vec<f64>>;
}

impl Regressor for RegressorModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn regress(&self, query: &BoxQuery<'_>) -> Result<Vec<DeltaParams>> {
        predict(self, query.input)
    }
}

impl Classifier for ClassifierModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probabilities(&self, query: &BoxQuery<'_>) -> Result<Vec<f64>> {
        ClassifierModel::probabilities(self, query.input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub s_test: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub min_side: f64,
    pub scale_clamp: f64,
    /// Clip boxes to the image after every update. When off, an update that
    /// would leave the image entirely is dropped and the box stays put.
    pub clip: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { s_test: 5, score_threshold: 0.05, nms_iou: 0.3, min_side: 1.0, scale_clamp: DEFAULT_SCALE_CLAMP, clip: true }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidConfig("score_threshold and nms_iou must lie in [0, 1]".into()));
        }
        if !(self.min_side > 0.0 && self.min_side.is_finite() && self.scale_clamp > 0.0) {
            return Err(Error::InvalidConfig("min_side and scale_clamp must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub final_box: BBox,
    pub class_label: ClassId,
    pub score: f64,
    /// `s_test + 1` boxes, from the grid box to the final box.
    pub trajectory: Vec<BBox>,
    /// Argmax class and its probability for each trajectory entry.
    pub step_classes: Vec<(ClassId, f64)>,
    pub grid_index: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DetectStats {
    pub global_time: Duration,
    /// Wall time of each regression iteration (pooling, classification and
    /// box update for all boxes).
    pub iteration_times: Vec<Duration>,
    pub boxes: usize,
}

/// Every box state and class distribution of one run.
#[derive(Debug, Clone)]
pub struct Trajectories {
    /// `states[s][i]`: box `i` before iteration `s + 1`.
    pub states: Vec<Vec<BBox>>,
    /// `probs[s][i]`: class probabilities of `states[s][i]`.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub stats: DetectStats,
}

impl Trajectories {
    pub fn max_steps(&self) -> usize {
        self.states.len() - 1
    }
}

fn overlaps_image(b: &BBox, width: f64, height: f64) -> bool {
    let (x1, y1, x2, y2) = b.corners();
    x1 < width && y1 < height && x2 > 0.0 && y2 > 0.0
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

enum Pooler<'a> {
    Index(PoolingIndex),
    Direct(&'a FeatureMap),
}

/// Run `s_test` iterations from `grid`, keeping every intermediate state.
#[allow(clippy::too_many_arguments)]
pub fn run_iterations(
    image: &GrayImage,
    grid: &[BBox],
    backbone: &Backbone,
    features: &FeatureConfig,
    regressor: &dyn Regressor,
    classifier: &dyn Classifier,
    config: &DetectConfig,
) -> Result<Trajectories> {
    config.validate()?;
    if regressor.num_classes() != classifier.num_classes() {
        return Err(Error::ModelMismatch(format!(
            "regressor has {} classes, classifier {}",
            regressor.num_classes(),
            classifier.num_classes()
        )));
    }
    if backbone.config() != &features.extractor {
        return Err(Error::ModelMismatch("backbone channels differ from the feature configuration".into()));
    }
    let k = regressor.num_classes();
    let (w, h) = (image.width(), image.height());

    let t0 = Instant::now();
    let fm = backbone.compute_global_features(image);
    let pooler = match features.pool_mode {
        PoolMode::Max => Pooler::Index(PoolingIndex::build(&fm)),
        PoolMode::Average => Pooler::Direct(&fm),
    };
    let mut stats = DetectStats { global_time: t0.elapsed(), iteration_times: Vec::new(), boxes: grid.len() };

    let input_of = |b: &BBox| -> Result<Vec<f64>> {
        features.assemble_input(b, w, h, |r| match &pooler {
            Pooler::Index(ix) => Ok(ix.roi_pool(r, features.pool_h, features.pool_w)?.values),
            Pooler::Direct(fm) => Ok(pool_with_mode(fm, r, features.pool_h, features.pool_w, features.pool_mode)?.values),
        })
    };
    let classify = |i: usize, step: usize, b: &BBox, input: &[f64]| -> Result<Vec<f64>> {
        let p = classifier.probabilities(&BoxQuery { grid_index: i, step, bbox: b, input })?;
        if p.len() != k + 1 {
            return Err(Error::ModelMismatch(format!("classifier returned {} scores, expected {}", p.len(), k + 1)));
        }
        Ok(p)
    };

    let mut states = vec![grid.to_vec()];
    let mut probs = Vec::with_capacity(config.s_test + 1);
    for s in 1..=config.s_test {
        let t = Instant::now();
        let cur = &states[s - 1];
        let mut next = Vec::with_capacity(cur.len());
        let mut step_probs = Vec::with_capacity(cur.len());
        for (i, b) in cur.iter().enumerate() {
            let input = input_of(b)?;
            let p = classify(i, s, b, &input)?;
            let l = argmax(&p);
            let moved = if l == 0 {
                *b
            } else {
                let deltas = regressor.regress(&BoxQuery { grid_index: i, step: s, bbox: b, input: &input })?;
                if deltas.len() != k {
                    return Err(Error::ModelMismatch(format!("regressor returned {} heads, expected {k}", deltas.len())));
                }
                let d = deltas[l - 1].clamp_scale(config.scale_clamp);
                let target = apply_delta(b, &d);
                if !d.is_finite() {
                    *b
                } else if config.clip {
                    clip_to_image(&target, w as f64, h as f64, config.min_side)
                } else if overlaps_image(&target, w as f64, h as f64) {
                    target
                } else {
                    *b
                }
            };
            next.push(moved);
            step_probs.push(p);
        }
        stats.iteration_times.push(t.elapsed());
        probs.push(step_probs);
        states.push(next);
    }
    let last = states.last().unwrap();
    let final_probs = last
        .iter()
        .enumerate()
        .map(|(i, b)| classify(i, config.s_test + 1, b, &input_of(b)?))
        .collect::<Result<Vec<_>>>()?;
    probs.push(final_probs);
    Ok(Trajectories { states, probs, stats })
}

/// Detections after `steps` iterations (at most the number that was run):
/// score, threshold, then per-class NMS.
pub fn finalize(traj: &Trajectories, steps: usize, config: &DetectConfig) -> Result<Vec<DetectionResult>> {
    if steps > traj.max_steps() {
        return Err(Error::InvalidConfig(format!("{steps} steps requested but only {} were run", traj.max_steps())));
    }
    let mut candidates = Vec::new();
    for (i, p) in traj.probs[steps].iter().enumerate() {
        let l = argmax(p);
        if l == 0 || p[l] < config.score_threshold {
            continue;
        }
        candidates.push(DetectionResult {
            final_box: traj.states[steps][i],
            class_label: ClassId(l as u32),
            score: p[l],
            trajectory: (0..=steps).map(|s| traj.states[s][i]).collect(),
            step_classes: (0..=steps)
                .map(|s| {
                    let q = &traj.probs[s][i];
                    let c = argmax(q);
                    (ClassId(c as u32), q[c])
                })
                .collect(),
            grid_index: i,
        });
    }
    let num_classes = traj.probs[steps].first().map_or(0, |p| p.len() - 1);
    let mut out = Vec::new();
    for c in 1..=num_classes as u32 {
        let of_class: Vec<&DetectionResult> = candidates.iter().filter(|d| d.class_label.0 == c).collect();
        let scored: Vec<(BBox, f64)> = of_class.iter().map(|d| (d.final_box, d.score)).collect();
        out.extend(nms_indices(&scored, config.nms_iou).into_iter().map(|j| of_class[j].clone()));
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.grid_index.cmp(&b.grid_index)));
    Ok(out)
}

/// Full detection of one image with `config.s_test` iterations.
#[allow(clippy::too_many_arguments)]
pub fn detect(
    image: &GrayImage,
    grid: &[BBox],
    backbone: &Backbone,
    features: &FeatureConfig,
    regressor: &dyn Regressor,
    classifier: &dyn Classifier,
    config: &DetectConfig,
) -> Result<(Vec<DetectionResult>, DetectStats)> {
    let traj = run_iterations(image, grid, backbone, features, regressor, classifier, config)?;
    let dets = finalize(&traj, config.s_test, config)?;
    Ok((dets, traj.stats))
}

/// Indices kept by greedy NMS, in descending score order. Equal scores keep
/// input order. A box survives iff its IoU with every kept box is at most
/// `iou_threshold`.
pub fn nms_indices(dets: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&j| iou(&dets[i].0, &dets[j].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    nms_indices(dets, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

/// One line of the trajectory export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub image_id: u64,
    pub grid_index: usize,
    pub step: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_label: ClassId,
    pub score: f64,
}

pub fn trajectory_records(image_id: u64, dets: &[DetectionResult]) -> Vec<TrajectoryRecord> {
    dets.iter()
        .flat_map(|d| {
            d.trajectory.iter().zip(&d.step_classes).enumerate().map(move |(step, (b, &(c, p)))| TrajectoryRecord {
                image_id,
                grid_index: d.grid_index,
                step,
                cx: b.cx(),
                cy: b.cy(),
                w: b.w(),
                h: b.h(),
                class_label: c,
                score: p,
            })
        })
        .collect()
}

pub const TRAJECTORY_FORMAT: &str = "gcnn-trajectories";
pub const TRAJECTORY_VERSION: u32 = 1;

/// JSON Lines: a header object, then one record per line.
pub fn write_trajectories<W: Write>(mut out: W, records: &[TrajectoryRecord]) -> Result<()> {
    let header = serde_json::json!({ "format": TRAJECTORY_FORMAT, "version": TRAJECTORY_VERSION });
    let io = |e| Error::io("<trajectory export>", e);
    writeln!(out, "{header}").map_err(io)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    Ok(())
}
