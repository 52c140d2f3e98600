//! Average precision, mean AP and the false-positive breakdown.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::assign::{ClassId, GroundTruth};
use crate::boxgeom::{iou, BBox};
use crate::error::{Error, Result};
use crate::synth::validate_groups;

pub const DEFAULT_IOU_MATCH: f64 = 0.5;
/// Below this IoU with every ground truth a false positive counts as background.
pub const FP_MIN_OVERLAP: f64 = 0.1;
pub const DUMP_FORMAT: &str = "gcnn-detections";
pub const DUMP_VERSION: u32 = 1;
pub const REPORT_FORMAT: &str = "gcnn-metrics";
pub const REPORT_VERSION: u32 = 1;

/// A scored detection of a known class on a given image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_label: ClassId,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// A ground-truth box tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGt {
    pub image_id: u64,
    #[serde(flatten)]
    pub gt: GroundTruth,
}

pub fn image_gts<'a>(scenes: impl IntoIterator<Item = (u64, &'a [GroundTruth])>) -> Vec<ImageGt> {
    scenes
        .into_iter()
        .flat_map(|(image_id, gts)| gts.iter().map(move |&gt| ImageGt { image_id, gt }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
    pub score_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApProtocol {
    /// Area under the precision envelope.
    #[default]
    Continuous,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Score descending; equal scores ordered by image, then box, then input
/// position, so permuting tied detections cannot change the outcome.
fn ranking(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then_with(|| {
            a.bbox
                .as_array()
                .iter()
                .zip(b.bbox.as_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

pub fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| ranking(&dets[i], &dets[j]).then(i.cmp(&j)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive { gt: usize },
    /// Best same-class overlap reached the match threshold but every such
    /// ground truth was already taken.
    Duplicate,
    FalsePositive,
}

/// Greedy matching of one class in rank order. Returns `(rank order,
/// outcome per ranked detection)`; `gt` indexes into `gts`.
pub fn match_class(dets: &[Detection], gts: &[ImageGt], iou_match: f64) -> (Vec<usize>, Vec<MatchOutcome>) {
    let order = rank_order(dets);
    let mut taken = vec![false; gts.len()];
    let outcomes = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            let mut overlaps_taken = false;
            for (k, g) in gts.iter().enumerate() {
                if g.image_id != d.image_id {
                    continue;
                }
                let v = iou(&d.bbox, &g.gt.bbox);
                if v < iou_match {
                    continue;
                }
                if taken[k] {
                    overlaps_taken = true;
                } else if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => {
                    taken[k] = true;
                    MatchOutcome::TruePositive { gt: k }
                }
                None if overlaps_taken => MatchOutcome::Duplicate,
                None => MatchOutcome::FalsePositive,
            }
        })
        .collect();
    (order, outcomes)
}

fn tp_flags(dets: &[Detection], gts: &[ImageGt], iou_match: f64) -> (Vec<usize>, Vec<bool>) {
    let (order, outcomes) = match_class(dets, gts, iou_match);
    (order, outcomes.iter().map(|o| matches!(o, MatchOutcome::TruePositive { .. })).collect())
}

/// Precision/recall after each ranked detection.
pub fn pr_curve(dets: &[Detection], gts: &[ImageGt], iou_match: f64) -> Vec<PRPoint> {
    let (order, tp) = tp_flags(dets, gts, iou_match);
    let npos = gts.len();
    let mut cum = 0usize;
    tp.iter()
        .zip(&order)
        .enumerate()
        .map(|(k, (&t, &i))| {
            cum += t as usize;
            PRPoint {
                recall: if npos == 0 { 0.0 } else { cum as f64 / npos as f64 },
                precision: cum as f64 / (k + 1) as f64,
                score_threshold: dets[i].score,
            }
        })
        .collect()
}

/// Average precision of one class. Detections of other classes must be
/// filtered out by the caller. With no ground truth the AP is 0.
pub fn average_precision(dets: &[Detection], gts: &[ImageGt], iou_match: f64) -> f64 {
    average_precision_with(dets, gts, iou_match, ApProtocol::Continuous)
}

pub fn average_precision_with(dets: &[Detection], gts: &[ImageGt], iou_match: f64, protocol: ApProtocol) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let (_, tp) = tp_flags(dets, gts, iou_match);
    let npos = gts.len() as f64;
    let mut cum = 0usize;
    let precision: Vec<f64> = tp
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            cum += t as usize;
            cum as f64 / (k + 1) as f64
        })
        .collect();
    // envelope: best precision at this rank or any later one
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    match protocol {
        ApProtocol::Continuous => {
            // each true positive adds 1/npos of recall at its envelope precision
            let sum = tp.iter().zip(&envelope).filter(|(&t, _)| t).fold(0.0, |acc, (_, &p)| acc + p);
            sum / npos
        }
        ApProtocol::ElevenPoint => {
            let mut recall = Vec::with_capacity(tp.len());
            let mut c = 0usize;
            for &t in &tp {
                c += t as usize;
                recall.push(c as f64 / npos);
            }
            (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&envelope)
                        .filter(|(&r, _)| r >= t)
                        .map(|(_, &p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_label: ClassId,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

fn split_by_class(dets: &[Detection], gts: &[ImageGt]) -> BTreeMap<ClassId, (Vec<Detection>, Vec<ImageGt>)> {
    let mut by: BTreeMap<ClassId, (Vec<Detection>, Vec<ImageGt>)> = BTreeMap::new();
    for d in dets {
        by.entry(d.class_label).or_default().0.push(*d);
    }
    for g in gts {
        by.entry(g.gt.class_label).or_default().1.push(*g);
    }
    by
}

/// AP for every class that has a detection or a ground truth.
pub fn per_class_ap(dets: &[Detection], gts: &[ImageGt], iou_match: f64, protocol: ApProtocol) -> Vec<ClassAp> {
    split_by_class(dets, gts)
        .into_iter()
        .map(|(class_label, (d, g))| ClassAp {
            class_label,
            ap: average_precision_with(&d, &g, iou_match, protocol),
            n_gt: g.len(),
            n_det: d.len(),
        })
        .collect()
}

/// Unweighted mean of per-class AP over classes with at least one ground
/// truth; 0 when there are none.
pub fn mean_ap(dets: &[Detection], gts: &[ImageGt], iou_match: f64, protocol: ApProtocol) -> f64 {
    mean_of(&per_class_ap(dets, gts, iou_match, protocol))
}

pub fn mean_of(per_class: &[ClassAp]) -> f64 {
    let counted: Vec<f64> = per_class.iter().filter(|c| c.n_gt > 0).map(|c| c.ap).collect();
    if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FpCategory {
    Loc,
    Sim,
    Oth,
    #[serde(rename = "BG")]
    Bg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpBreakdown {
    pub ranks: Vec<usize>,
    /// Cumulative counts among the top `ranks[i]` false positives.
    pub loc: Vec<usize>,
    pub sim: Vec<usize>,
    pub oth: Vec<usize>,
    pub bg: Vec<usize>,
    pub total_fp: usize,
    /// Category of every false positive in descending score order.
    pub categories: Vec<FpCategory>,
}

pub fn default_rank_grid() -> Vec<usize> {
    vec![25, 50, 100, 200, 400, 800, 1600, 3200]
}

/// Classify every false positive (over all classes) by its most likely cause
/// with precedence Loc > Sim > Oth > BG:
/// - Loc: same-class IoU in `[0.1, iou_match)`, or a duplicate;
/// - Sim: IoU >= 0.1 with a different class of the same similarity group;
/// - Oth: IoU >= 0.1 with a class of another group;
/// - BG: IoU < 0.1 with every ground truth.
pub fn fp_breakdown(
    dets: &[Detection],
    gts: &[ImageGt],
    similarity_groups: &[Vec<u32>],
    num_classes: u32,
    ranks: &[usize],
    iou_match: f64,
) -> Result<FpBreakdown> {
    validate_groups(similarity_groups, num_classes)?;
    let mut group_of = vec![usize::MAX; num_classes as usize + 1];
    for (g, members) in similarity_groups.iter().enumerate() {
        for &c in members {
            group_of[c as usize] = g;
        }
    }
    let mut fps: Vec<(Detection, FpCategory)> = Vec::new();
    for (class, (cd, cg)) in split_by_class(dets, gts) {
        if class.index() == 0 || class.index() > num_classes as usize {
            return Err(Error::InvalidSimilarityGroups(format!("class {class} is not covered by the groups")));
        }
        let (order, outcomes) = match_class(&cd, &cg, iou_match);
        for (&i, outcome) in order.iter().zip(&outcomes) {
            if matches!(outcome, MatchOutcome::TruePositive { .. }) {
                continue;
            }
            let d = cd[i];
            let mut same = 0.0f64;
            let mut sim = 0.0f64;
            let mut oth = 0.0f64;
            for g in gts.iter().filter(|g| g.image_id == d.image_id) {
                let v = iou(&d.bbox, &g.gt.bbox);
                let gc = g.gt.class_label;
                if gc == class {
                    same = same.max(v);
                } else if group_of.get(gc.index()) == Some(&group_of[class.index()]) {
                    sim = sim.max(v);
                } else {
                    oth = oth.max(v);
                }
            }
            let category = if *outcome == MatchOutcome::Duplicate || same >= FP_MIN_OVERLAP {
                FpCategory::Loc
            } else if sim >= FP_MIN_OVERLAP {
                FpCategory::Sim
            } else if oth >= FP_MIN_OVERLAP {
                FpCategory::Oth
            } else {
                FpCategory::Bg
            };
            fps.push((d, category));
        }
    }
    fps.sort_by(|a, b| ranking(&a.0, &b.0).then(a.1.cmp(&b.1)));
    let categories: Vec<FpCategory> = fps.iter().map(|f| f.1).collect();
    let count = |cat: FpCategory, r: usize| categories.iter().take(r).filter(|&&c| c == cat).count();
    Ok(FpBreakdown {
        ranks: ranks.to_vec(),
        loc: ranks.iter().map(|&r| count(FpCategory::Loc, r)).collect(),
        sim: ranks.iter().map(|&r| count(FpCategory::Sim, r)).collect(),
        oth: ranks.iter().map(|&r| count(FpCategory::Oth, r)).collect(),
        bg: ranks.iter().map(|&r| count(FpCategory::Bg, r)).collect(),
        total_fp: categories.len(),
        categories,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DumpHeader {
    format: String,
    version: u32,
}

/// Detection dump: a JSON header line, then one detection per line.
pub fn write_detections<W: Write>(mut out: W, dets: &[Detection]) -> Result<()> {
    let io = |e| Error::io("<detection dump>", e);
    let header = DumpHeader { format: DUMP_FORMAT.into(), version: DUMP_VERSION };
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for d in dets {
        writeln!(out, "{}", serde_json::to_string(d)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<Detection>> {
    let malformed = |line: usize, reason: String| Error::Malformed { what: "detection dump", line, reason };
    let mut lines = input.lines().enumerate();
    let header: DumpHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io("<detection dump>", e))?;
            serde_json::from_str(&line).map_err(|e| malformed(1, e.to_string()))?
        }
        None => return Err(malformed(1, "missing header".into())),
    };
    if header.format != DUMP_FORMAT {
        return Err(malformed(1, format!("format {:?}", header.format)));
    }
    if header.version != DUMP_VERSION {
        return Err(Error::UnsupportedVersion { what: "detection dump", found: header.version, expected: DUMP_VERSION });
    }
    let mut dets = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("<detection dump>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
        if !d.score.is_finite() || d.class_label.is_background() {
            return Err(malformed(i + 1, "score must be finite and class non-background".into()));
        }
        dets.push(d);
    }
    Ok(dets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub protocol: ApProtocol,
    pub iou_match: f64,
    pub map: f64,
    pub per_class: Vec<ClassAp>,
    pub fp_breakdown: FpBreakdown,
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[ImageGt],
    similarity_groups: &[Vec<u32>],
    num_classes: u32,
    ranks: &[usize],
    iou_match: f64,
    protocol: ApProtocol,
) -> Result<MetricsReport> {
    let per_class = per_class_ap(dets, gts, iou_match, protocol);
    Ok(MetricsReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        protocol,
        iou_match,
        map: mean_of(&per_class),
        per_class,
        fp_breakdown: fp_breakdown(dets, gts, similarity_groups, num_classes, ranks, iou_match)?,
    })
}
