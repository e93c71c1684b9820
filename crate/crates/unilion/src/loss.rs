//! Dynamic multi-task loss balancing and the toy heads that exercise it.
//!
//! Each auxiliary task's loss is rescaled so its weighted value aligns with
//! the detection loss:
//!
//! ```text
//! w_task = l_det / (l_task + 1e-5)
//! L = l1*l_det + l2*w_map*l_map + l3*w_occ*l_occ + l4*l_mot + l5*l_plan
//! ```
//!
//! Motion and planning enter unweighted. The weight is carried as a
//! numerator/denominator pair and its products evaluate as num * (x / den);
//! this keeps the defining identity w * (l_task + 1e-5) == l_det exact in
//! IEEE arithmetic (a plain rounded quotient fails the round trip for ~8% of
//! random pairs, e.g. (1/49)*49 != 1). The scalar value is num/den as usual.
//! Weights are detached: no gradient flows through the balancing ratio.

use crate::autodiff::{Tape, ValId};
use crate::backbone::DenseBev;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::HeadParams;

/// Epsilon in the dynamic-weight denominator.
pub const LOSS_EPS: f64 = 1e-5;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Per-task loss values; absent tasks carry None.
#[derive(Debug, Clone, Default)]
pub struct TaskLosses {
    pub det: Option<f64>,
    pub map: Option<f64>,
    pub occ: Option<f64>,
    pub mot: Option<f64>,
    pub plan: Option<f64>,
}

/// lambda_1 .. lambda_5 for det, map, occ, mot, plan.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([1.0, 0.5, 1.0, 1.0, 1.0])
    }
}

/// A dynamic task weight held in ratio form; detached for gradients.
#[derive(Debug, Clone, Copy)]
pub struct DynWeight {
    pub num: f64,
    pub den: f64,
}

impl DynWeight {
    pub fn value(&self) -> f64 {
        self.num / self.den
    }

    /// w * x evaluated as num * (x / den), so mul(den) == num exactly.
    pub fn mul(&self, x: f64) -> f64 {
        self.num * (x / self.den)
    }
}

/// w_task aligning l_task with l_det.
pub fn dynamic_weight(l_det: f64, l_task: f64) -> DynWeight {
    DynWeight {
        num: l_det,
        den: l_task + LOSS_EPS,
    }
}

/// Weighted total per the printed equation; absent tasks contribute zero.
pub fn total_loss(losses: &TaskLosses, weights: &LossWeights) -> Result<f64> {
    let l = weights.0;
    let weighted_present = losses.map.is_some() || losses.occ.is_some();
    let det = match losses.det {
        Some(d) => d,
        None if weighted_present => return Err(Error::MissingDetectionLoss),
        None => 0.0,
    };
    let mut total = if losses.det.is_some() { l[0] * det } else { 0.0 };
    if let Some(map) = losses.map {
        total += l[1] * dynamic_weight(det, map).mul(map);
    }
    if let Some(occ) = losses.occ {
        total += l[2] * dynamic_weight(det, occ).mul(occ);
    }
    if let Some(mot) = losses.mot {
        total += l[3] * mot;
    }
    if let Some(plan) = losses.plan {
        total += l[4] * plan;
    }
    Ok(total)
}

/// Which heads run and their targets. BEV-shaped targets are (H*W) x 1 or
/// (H*W) x 2; map labels one class id per cell.
#[derive(Debug, Clone)]
pub struct HeadTargets {
    pub det_heatmap: Option<Mat>,
    pub occupancy: Option<Mat>,
    pub map_labels: Option<Vec<usize>>,
    pub motion: Option<Mat>,
    pub plan: Option<Mat>,
}

impl HeadTargets {
    pub fn none() -> Self {
        HeadTargets {
            det_heatmap: None,
            occupancy: None,
            map_labels: None,
            motion: None,
            plan: None,
        }
    }
}

/// Tape handles of the per-task scalar losses.
#[derive(Debug, Clone, Default)]
pub struct TaskLossIds {
    pub det: Option<ValId>,
    pub map: Option<ValId>,
    pub occ: Option<ValId>,
    pub mot: Option<ValId>,
    pub plan: Option<ValId>,
}

/// Builds every enabled head on the shared BEV: detection = 1x1 affine to a
/// centerness heatmap with focal loss; occupancy and map = 1x1 affines with
/// cross-entropy; motion = per-cell 2D smooth-L1; planning = smooth-L1 on a
/// mean-pooled 2D offset.
pub fn heads_t(
    tape: &mut Tape,
    bev: ValId,
    p: &HeadParams<ValId>,
    targets: &HeadTargets,
) -> Result<TaskLossIds> {
    let mut out = TaskLossIds::default();
    if let Some(t) = &targets.det_heatmap {
        let logits = tape.affine(bev, p.det_w, p.det_b)?;
        out.det = Some(tape.focal_loss(logits, t.clone(), FOCAL_ALPHA, FOCAL_GAMMA));
    }
    if let Some(t) = &targets.occupancy {
        let logits = tape.affine(bev, p.occ_w, p.occ_b)?;
        out.occ = Some(tape.bce_loss(logits, t.clone()));
    }
    if let Some(labels) = &targets.map_labels {
        let logits = tape.affine(bev, p.map_w, p.map_b)?;
        out.map = Some(tape.softmax_ce(logits, labels.clone()));
    }
    if let Some(t) = &targets.motion {
        let pred = tape.affine(bev, p.mot_w, p.mot_b)?;
        out.mot = Some(tape.smooth_l1(pred, t.clone()));
    }
    if let Some(t) = &targets.plan {
        let pooled = tape.mean_rows(bev);
        let pred = tape.affine(pooled, p.plan_w, p.plan_b)?;
        out.plan = Some(tape.smooth_l1(pred, t.clone()));
    }
    Ok(out)
}

impl TaskLossIds {
    pub fn values(&self, tape: &Tape) -> TaskLosses {
        let v = |id: &Option<ValId>| id.map(|i| tape.value(i).data[0]);
        TaskLosses {
            det: v(&self.det),
            map: v(&self.map),
            occ: v(&self.occ),
            mot: v(&self.mot),
            plan: v(&self.plan),
        }
    }

    /// Weighted total as a tape node. Dynamic weights are computed from the
    /// current loss values and entered as detached coefficients.
    pub fn total_t(&self, tape: &mut Tape, weights: &LossWeights) -> Result<ValId> {
        let losses = self.values(tape);
        let weighted_present = losses.map.is_some() || losses.occ.is_some();
        if weighted_present && losses.det.is_none() {
            return Err(Error::MissingDetectionLoss);
        }
        let det = losses.det.unwrap_or(0.0);
        let l = weights.0;
        let mut terms: Vec<(ValId, f64)> = Vec::new();
        if let Some(id) = self.det {
            terms.push((id, l[0]));
        }
        if let (Some(id), Some(map)) = (self.map, losses.map) {
            terms.push((id, l[1] * dynamic_weight(det, map).value()));
        }
        if let (Some(id), Some(occ)) = (self.occ, losses.occ) {
            terms.push((id, l[2] * dynamic_weight(det, occ).value()));
        }
        if let Some(id) = self.mot {
            terms.push((id, l[3]));
        }
        if let Some(id) = self.plan {
            terms.push((id, l[4]));
        }
        Ok(tape.weighted_sum(&terms))
    }
}

/// Pure toy-head evaluation over a BEV.
pub fn toy_heads(
    bev: &DenseBev,
    p: &HeadParams<Mat>,
    targets: &HeadTargets,
) -> Result<TaskLosses> {
    let mut tape = Tape::new();
    let b = tape.constant(bev.mat.clone());
    let bound = HeadParams {
        det_w: tape.constant(p.det_w.clone()),
        det_b: tape.constant(p.det_b.clone()),
        occ_w: tape.constant(p.occ_w.clone()),
        occ_b: tape.constant(p.occ_b.clone()),
        map_w: tape.constant(p.map_w.clone()),
        map_b: tape.constant(p.map_b.clone()),
        mot_w: tape.constant(p.mot_w.clone()),
        mot_b: tape.constant(p.mot_b.clone()),
        plan_w: tape.constant(p.plan_w.clone()),
        plan_b: tape.constant(p.plan_b.clone()),
    };
    let ids = heads_t(&mut tape, b, &bound, targets)?;
    Ok(ids.values(&tape))
}
