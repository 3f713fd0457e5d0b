//! Box regression losses on the tape, and the staged training objectives.
//!
//! The corner head emits box corners as tape nodes; these losses keep the
//! whole objective differentiable back to the parameters. Plain-value
//! counterparts live in `boxes`.

use fusetrack_tensor::{Graph, Tensor, Var};

use crate::boxes::BoundingBox;
use crate::mdgf::HeadOutput;
use crate::{Result, TrackError};

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// GIoU weight in the box loss.
    pub lambda1: f64,
    /// L1 weight in the box loss.
    pub lambda2: f64,
    /// Diffusion loss weight in the stage-2 total.
    pub lambda_dm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 2.0, lambda2: 5.0, lambda_dm: 5.0 }
    }
}

/// Box corners as scalar tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct TapeBox {
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
}

impl TapeBox {
    pub fn from_head(h: &HeadOutput) -> Self {
        Self { x1: h.x1, y1: h.y1, x2: h.x2, y2: h.y2 }
    }

    /// Enter a box as constant leaves.
    pub fn constant(g: &mut Graph, b: &BoundingBox) -> Self {
        let (x1, y1, x2, y2) = b.corners();
        Self {
            x1: g.leaf(Tensor::new(&[1, 1], vec![x1])),
            y1: g.leaf(Tensor::new(&[1, 1], vec![y1])),
            x2: g.leaf(Tensor::new(&[1, 1], vec![x2])),
            y2: g.leaf(Tensor::new(&[1, 1], vec![y2])),
        }
    }

    /// Enter a box as gradient-carrying leaves (for tests and checks).
    pub fn variable(g: &mut Graph, b: &BoundingBox) -> Self {
        let (x1, y1, x2, y2) = b.corners();
        Self {
            x1: g.leaf_grad(Tensor::new(&[1, 1], vec![x1])),
            y1: g.leaf_grad(Tensor::new(&[1, 1], vec![y1])),
            x2: g.leaf_grad(Tensor::new(&[1, 1], vec![x2])),
            y2: g.leaf_grad(Tensor::new(&[1, 1], vec![y2])),
        }
    }

    pub fn value(&self, g: &Graph) -> BoundingBox {
        BoundingBox::from_corners(
            g.value(self.x1).item(),
            g.value(self.y1).item(),
            g.value(self.x2).item(),
            g.value(self.y2).item(),
        )
    }

    fn width(&self, g: &mut Graph) -> Var {
        g.sub(self.x2, self.x1)
    }

    fn height(&self, g: &mut Graph) -> Var {
        g.sub(self.y2, self.y1)
    }
}

/// 1 - GIoU on the tape. Errors on degenerate current values; the corner
/// head's 1 px floor keeps live predictions clear of this.
pub fn giou_loss_tape(g: &mut Graph, a: &TapeBox, b: &TapeBox) -> Result<Var> {
    for bx in [a, b] {
        let v = bx.value(g);
        if v.w <= 0.0 || v.h <= 0.0 {
            return Err(TrackError::DegenerateBox { w: v.w, h: v.h });
        }
    }
    let aw = a.width(g);
    let ah = a.height(g);
    let bw = b.width(g);
    let bh = b.height(g);
    let area_a = g.mul(aw, ah);
    let area_b = g.mul(bw, bh);

    let ix1 = g.max(a.x1, b.x1);
    let iy1 = g.max(a.y1, b.y1);
    let ix2 = g.min(a.x2, b.x2);
    let iy2 = g.min(a.y2, b.y2);
    let iw_raw = g.sub(ix2, ix1);
    let ih_raw = g.sub(iy2, iy1);
    let iw = g.relu(iw_raw);
    let ih = g.relu(ih_raw);
    let inter = g.mul(iw, ih);

    let sum_areas = g.add(area_a, area_b);
    let union = g.sub(sum_areas, inter);

    let hx1 = g.min(a.x1, b.x1);
    let hy1 = g.min(a.y1, b.y1);
    let hx2 = g.max(a.x2, b.x2);
    let hy2 = g.max(a.y2, b.y2);
    let hw = g.sub(hx2, hx1);
    let hh = g.sub(hy2, hy1);
    let hull = g.mul(hw, hh);

    let iou = g.div(inter, union);
    let slack = g.sub(hull, union);
    let penalty = g.div(slack, hull);
    let giou = g.sub(iou, penalty);
    let loss = g.affine(giou, -1.0, 1.0);
    Ok(g.reshape(loss, &[1]))
}

/// Mean absolute corner difference, normalized by the crop side.
pub fn l1_box_loss_tape(g: &mut Graph, a: &TapeBox, b: &TapeBox, norm: f64) -> Var {
    let pairs = [(a.x1, b.x1), (a.y1, b.y1), (a.x2, b.x2), (a.y2, b.y2)];
    let mut total = None;
    for (av, bv) in pairs {
        let d = g.sub(av, bv);
        let d = g.abs(d);
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d),
        });
    }
    let scaled = g.affine(total.unwrap(), 1.0 / (4.0 * norm), 0.0);
    g.reshape(scaled, &[1])
}

#[derive(Debug, Clone, Copy)]
pub struct BoxLossParts {
    pub total: Var,
    pub giou: Var,
    pub l1: Var,
    /// True when the zero-confidence skip rule fired.
    pub skipped: bool,
}

/// lambda1 * (1 - GIoU) + lambda2 * L1 against a pseudo-label; frames with
/// confidence 0 contribute a constant 0.
pub fn stage1_loss_tape(
    g: &mut Graph,
    pred: &TapeBox,
    label: &BoundingBox,
    confidence: f64,
    weights: &LossWeights,
    norm: f64,
) -> Result<BoxLossParts> {
    if confidence <= 0.0 {
        let zero = g.leaf(Tensor::scalar(0.0));
        return Ok(BoxLossParts { total: zero, giou: zero, l1: zero, skipped: true });
    }
    let target = TapeBox::constant(g, label);
    let giou = giou_loss_tape(g, pred, &target)?;
    let l1 = l1_box_loss_tape(g, pred, &target, norm);
    let a = g.affine(giou, weights.lambda1, 0.0);
    let b = g.affine(l1, weights.lambda2, 0.0);
    let total = g.add(a, b);
    Ok(BoxLossParts { total, giou, l1, skipped: false })
}

/// Stage-2 composition: L_S2 + L_S1->S2 + lambda * L_DM.
pub fn combine_stage2(g: &mut Graph, l_s2: Var, l_s1_s2: Var, l_dm: Var, lambda_dm: f64) -> Var {
    let sum = g.add(l_s2, l_s1_s2);
    let dm = g.affine(l_dm, lambda_dm, 0.0);
    g.add(sum, dm)
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Parts {
    pub total: Var,
    pub vs_label: BoxLossParts,
    pub vs_stage1: BoxLossParts,
    pub l_dm: Var,
}

/// Full stage-2 objective: the diffusion head's box against the
/// pseudo-label, the same box against the first-stage prediction treated
/// as a constant target, and the weighted noise loss.
pub fn stage2_loss_tape(
    g: &mut Graph,
    pred_s2: &TapeBox,
    label: &BoundingBox,
    confidence: f64,
    stage1_box: &BoundingBox,
    l_dm: Var,
    weights: &LossWeights,
    norm: f64,
) -> Result<Stage2Parts> {
    let vs_label = stage1_loss_tape(g, pred_s2, label, confidence, weights, norm)?;
    // The stage-1 prediction enters as a plain value: a constant target.
    let vs_stage1 = stage1_loss_tape(g, pred_s2, stage1_box, 1.0, weights, norm)?;
    let total = combine_stage2(g, vs_label.total, vs_stage1.total, l_dm, weights.lambda_dm);
    Ok(Stage2Parts { total, vs_label, vs_stage1, l_dm })
}
