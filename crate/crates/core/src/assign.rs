//! Ground-truth assignment, the per-step target schedule and training-tuple
//! generation.
//!
//! Each grid box is assigned once, from its initial position, to the ground
//! truth of highest IoU; boxes at or under the background threshold stay
//! background for the whole run. At step `s` of `S` the target is
//! `B + (G - B) / (S - s + 1)`: the remaining path split evenly over the
//! remaining steps.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{delta, iou, BBox, DeltaParams};
use crate::error::{Error, Result};

pub const DEFAULT_BG_THRESHOLD: f64 = 0.2;

/// Class identifier. `0` is background; object classes start at `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_label: ClassId,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_label: ClassId) -> Result<Self> {
        if class_label.is_background() {
            return Err(Error::InvalidConfig("ground truth class must be >= 1".into()));
        }
        Ok(Self { bbox, class_label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub grid_index: usize,
    /// `None` for background boxes.
    pub target: Option<GroundTruth>,
    pub iou_at_assignment: f64,
}

impl Assignment {
    pub fn is_background(&self) -> bool {
        self.target.is_none()
    }

    pub fn class_label(&self) -> ClassId {
        self.target.map_or(ClassId::BACKGROUND, |g| g.class_label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainTuple {
    pub grid_index: usize,
    pub box_state: BBox,
    pub step: usize,
    pub class_label: ClassId,
    /// Absent for background tuples, which never enter the regression loss.
    pub delta_target: Option<DeltaParams>,
}

impl TrainTuple {
    pub fn is_background(&self) -> bool {
        self.delta_target.is_none()
    }
}

/// Assign every grid box to its best-overlapping ground truth. Ties go to the
/// lowest ground-truth index.
pub fn assign_grid(grid: &[BBox], gts: &[GroundTruth], bg_threshold: f64) -> Vec<Assignment> {
    grid.iter()
        .enumerate()
        .map(|(grid_index, b)| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts.iter().enumerate() {
                let v = iou(b, &g.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, v)) if v > bg_threshold => Assignment {
                    grid_index,
                    target: Some(gts[k]),
                    iou_at_assignment: v,
                },
                Some((_, v)) => Assignment { grid_index, target: None, iou_at_assignment: v },
                None => Assignment { grid_index, target: None, iou_at_assignment: 0.0 },
            }
        })
        .collect()
}

/// Target for step `s`: one unit along the remaining path from `b` to `g`.
pub fn target_step(b: &BBox, g: &BBox, s: usize, s_train: usize) -> Result<BBox> {
    if s == 0 || s > s_train {
        return Err(Error::StepOutOfRange { step: s, s_train });
    }
    if s == s_train {
        return Ok(*g);
    }
    let remaining = (s_train - s + 1) as f64;
    let lerp = |from: f64, to: f64| from + (to - from) / remaining;
    BBox::new(
        lerp(b.cx(), g.cx()),
        lerp(b.cy(), g.cy()),
        lerp(b.w(), g.w()),
        lerp(b.h(), g.h()),
    )
}

/// Cumulative training tuples for steps `1..=current_stage`.
///
/// Output order: all step-1 tuples in grid order (foreground and
/// background), then the foreground tuples of step 2, step 3, ... Each later
/// box state is the previous step's target, i.e. the regressor for the
/// previous step is assumed perfect.
pub fn build_train_tuples(
    grid: &[BBox],
    assignments: &[Assignment],
    s_train: usize,
    current_stage: usize,
) -> Result<Vec<TrainTuple>> {
    if current_stage == 0 || current_stage > s_train {
        return Err(Error::StepOutOfRange { step: current_stage, s_train });
    }
    if grid.len() != assignments.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), actual: assignments.len() });
    }
    let mut tuples = Vec::with_capacity(grid.len() * current_stage);
    let mut states: Vec<(usize, BBox, GroundTruth)> = Vec::new();
    for a in assignments {
        let b1 = grid[a.grid_index];
        match a.target {
            None => tuples.push(TrainTuple {
                grid_index: a.grid_index,
                box_state: b1,
                step: 1,
                class_label: ClassId::BACKGROUND,
                delta_target: None,
            }),
            Some(gt) => {
                let t1 = target_step(&b1, &gt.bbox, 1, s_train)?;
                tuples.push(TrainTuple {
                    grid_index: a.grid_index,
                    box_state: b1,
                    step: 1,
                    class_label: gt.class_label,
                    delta_target: Some(delta(&b1, &t1)),
                });
                states.push((a.grid_index, t1, gt));
            }
        }
    }
    for s in 2..=current_stage {
        for (grid_index, state, gt) in states.iter_mut() {
            let target = target_step(state, &gt.bbox, s, s_train)?;
            tuples.push(TrainTuple {
                grid_index: *grid_index,
                box_state: *state,
                step: s,
                class_label: gt.class_label,
                delta_target: Some(delta(state, &target)),
            });
            *state = target;
        }
    }
    Ok(tuples)
}

/// Single-step tuples regressing initial boxes straight onto their ground
/// truth, restricted to boxes whose initial IoU is at least `min_iou`.
/// Used by the iterative single-step baseline.
pub fn build_direct_tuples(grid: &[BBox], assignments: &[Assignment], min_iou: f64) -> Vec<TrainTuple> {
    assignments
        .iter()
        .filter_map(|a| {
            let gt = a.target?;
            if a.iou_at_assignment < min_iou {
                return None;
            }
            let b1 = grid[a.grid_index];
            Some(TrainTuple {
                grid_index: a.grid_index,
                box_state: b1,
                step: 1,
                class_label: gt.class_label,
                delta_target: Some(delta(&b1, &gt.bbox)),
            })
        })
        .collect()
}
