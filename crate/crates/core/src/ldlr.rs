//! Lesion-aware dynamic loss refinement: per-match quality vector, linear
//! hardness weights, and the weighted Focal/L1/GIoU training objective.
//!
//! Weights are computed from detached prediction values and enter the graph
//! as constants; gradients flow through the loss terms only, never through
//! the weights, so lowering its own quality never pays off for the model.

use crate::autograd::{sigmoid_scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::matcher::MatchResult;

/// Axis-aligned box as normalized center/size, all coordinates in `[0, 1]`
/// for on-image boxes (the plain geometry below works on any scale).
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_xyxy(c: [f64; 4]) -> Self {
        BBox {
            cx: 0.5 * (c[0] + c[2]),
            cy: 0.5 * (c[1] + c[3]),
            w: c[2] - c[0],
            h: c[3] - c[1],
        }
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection-over-union of two boxes; 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (pa, pb) = (a.to_xyxy(), b.to_xyxy());
    let iw = (pa[2].min(pb[2]) - pa[0].max(pb[0])).max(0.0);
    let ih = (pa[3].min(pb[3]) - pa[1].max(pb[1])).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `(-1, 1]`: IoU minus the fraction of the smallest
/// enclosing box not covered by the union. Degenerate zero-area pairs give 0.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (pa, pb) = (a.to_xyxy(), b.to_xyxy());
    let iw = (pa[2].min(pb[2]) - pa[0].max(pb[0])).max(0.0);
    let ih = (pa[3].min(pb[3]) - pa[1].max(pb[1])).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let iou_term = if union <= 0.0 { 0.0 } else { inter / union };
    let cw = pa[2].max(pb[2]) - pa[0].min(pb[0]);
    let ch = pa[3].max(pb[3]) - pa[1].min(pb[1]);
    let c_area = cw * ch;
    if c_area <= 0.0 {
        return iou_term;
    }
    iou_term - (c_area - union) / c_area
}

/// Sum of absolute differences of the four cxcywh coordinates.
pub fn l1_box_loss(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Per-match prediction quality, all components in `[0, 1]`.
#[derive(Copy, Clone, Debug)]
pub struct QualityVector {
    pub q_cls: f64,
    pub q_bbox: f64,
    pub q_iou: f64,
}

/// `q_cls` is the predicted probability of the target class, `q_bbox` maps
/// the L1 distance through `exp(-d)`, and `q_iou` is the plain IoU.
pub fn quality_vector(p_target: f64, pred: &BBox, gt: &BBox) -> QualityVector {
    QualityVector {
        q_cls: p_target.clamp(0.0, 1.0),
        q_bbox: (-l1_box_loss(pred, gt)).exp().clamp(0.0, 1.0),
        q_iou: iou(pred, gt).clamp(0.0, 1.0),
    }
}

/// Sensitivity coefficients for the three quality channels.
#[derive(Copy, Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SensitivityConfig {
    pub eta_cls: f64,
    pub eta_bbox: f64,
    pub eta_iou: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            eta_cls: 1.0,
            eta_bbox: 1.0,
            eta_iou: 1.0,
        }
    }
}

impl SensitivityConfig {
    pub fn zero() -> Self {
        SensitivityConfig {
            eta_cls: 0.0,
            eta_bbox: 0.0,
            eta_iou: 0.0,
        }
    }
}

/// Linear hardness penalty `w = 1 + eta * (1 - q)`, mapping quality in
/// `[0, 1]` to a weight in `[1, 1 + eta]`. Out-of-range quality is clamped;
/// the second return value reports whether clamping happened.
pub fn hardness_weight(q: f64, eta: f64) -> (f64, bool) {
    let clamped = !(0.0..=1.0).contains(&q);
    let qc = q.clamp(0.0, 1.0);
    (1.0 + eta * (1.0 - qc), clamped)
}

/// Focal loss parameters (per-class sigmoid formulation).
#[derive(Copy, Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Per-row focal loss over `logits: [N, C]`. `targets[i]` is the positive
/// class of row `i`, or `None` for a background row where every class is a
/// negative. Output has shape `[N, 1]` (sum over classes per row).
///
/// The log terms are evaluated through softplus for stability at saturated
/// logits.
pub fn focal_loss_rows(
    tape: &mut Tape,
    logits: Var,
    targets: &[Option<usize>],
    focal: &FocalConfig,
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::invalid(format!(
            "focal_loss_rows: logits {:?} vs {} targets",
            shape,
            targets.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut onehot = Tensor::zeros(&[n, c]);
    for (i, t) in targets.iter().enumerate() {
        if let Some(y) = *t {
            if y >= c {
                return Err(Error::invalid(format!(
                    "focal_loss_rows: class {y} out of range for {c} classes"
                )));
            }
            onehot.data_mut()[i * c + y] = 1.0;
        }
    }
    let inv_onehot = onehot.map(|v| 1.0 - v);
    let alpha_t = onehot.map(|v| v * focal.alpha + (1.0 - v) * (1.0 - focal.alpha));

    let t = tape.leaf(onehot);
    let t_inv = tape.leaf(inv_onehot);
    let a_t = tape.leaf(alpha_t);

    let p = tape.sigmoid(logits);
    // 1 - p_t = t*(1-p) + (1-t)*p
    let tp = tape.mul(t, p)?;
    let sum_tp = tape.add(t, p)?;
    let m2tp = tape.mul_scalar(tp, -2.0);
    let one_minus_pt = tape.add(sum_tp, m2tp)?;
    // -log(p_t) = t*softplus(-x) + (1-t)*softplus(x)
    let neg_x = tape.neg(logits);
    let sp_neg = tape.softplus(neg_x);
    let sp_pos = tape.softplus(logits);
    let pos_part = tape.mul(t, sp_neg)?;
    let neg_part = tape.mul(t_inv, sp_pos)?;
    let neg_log_pt = tape.add(pos_part, neg_part)?;

    let focal_factor = tape.pow_scalar(one_minus_pt, focal.gamma);
    let weighted = tape.mul(a_t, focal_factor)?;
    let elems = tape.mul(weighted, neg_log_pt)?;
    tape.sum_axis(elems, 1)
}

/// Focal loss of a single prediction: `logits: [C]`, positive class `y`.
pub fn focal_loss(tape: &mut Tape, logits: Var, y: usize, focal: &FocalConfig) -> Result<Var> {
    let c = tape.value(logits).numel();
    let row = tape.reshape(logits, &[1, c])?;
    let per_row = focal_loss_rows(tape, row, &[Some(y)], focal)?;
    Ok(tape.sum(per_row))
}

/// Per-row `|pred - gt|` summed over the four coordinates: `[M, 4] -> [M, 1]`.
pub fn l1_rows(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    tape.sum_axis(a, 1)
}

/// Differentiable GIoU per row for `[M, 4]` cxcywh boxes.
///
/// Predictions must have strictly positive area (guaranteed by the
/// sigmoid box decoding); degenerate handling lives in the plain [`giou`].
pub fn giou_rows(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let corner = |tape: &mut Tape, b: Var| -> Result<(Var, Var, Var, Var, Var)> {
        let cx = tape.slice_cols(b, 0, 1)?;
        let cy = tape.slice_cols(b, 1, 1)?;
        let w = tape.slice_cols(b, 2, 1)?;
        let h = tape.slice_cols(b, 3, 1)?;
        let hw = tape.mul_scalar(w, 0.5);
        let hh = tape.mul_scalar(h, 0.5);
        let x1 = tape.sub(cx, hw)?;
        let x2 = tape.add(cx, hw)?;
        let y1 = tape.sub(cy, hh)?;
        let y2 = tape.add(cy, hh)?;
        let area = tape.mul(w, h)?;
        Ok((x1, y1, x2, y2, area))
    };
    let (px1, py1, px2, py2, pa) = corner(tape, pred)?;
    let (gx1, gy1, gx2, gy2, ga) = corner(tape, gt)?;

    let ix1 = tape.maximum(px1, gx1)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw_raw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let areas = tape.add(pa, ga)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let cx1 = tape.minimum(px1, gx1)?;
    let cy1 = tape.minimum(py1, gy1)?;
    let cx2 = tape.maximum(px2, gx2)?;
    let cy2 = tape.maximum(py2, gy2)?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let c_area = tape.mul(cw, ch)?;
    let hole = tape.sub(c_area, union)?;
    let penalty = tape.div(hole, c_area)?;
    tape.sub(iou, penalty)
}

/// Per-term totals and weight statistics of one [`total_loss`] evaluation.
#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
    pub background: f64,
    pub mean_w_cls: f64,
    pub mean_w_bbox: f64,
    pub mean_w_iou: f64,
    pub matched: usize,
    pub clamped_quality: usize,
}

impl LossBreakdown {
    pub fn merge(&mut self, other: &LossBreakdown) {
        let (n0, n1) = (self.matched as f64, other.matched as f64);
        if n0 + n1 > 0.0 {
            self.mean_w_cls = (self.mean_w_cls * n0 + other.mean_w_cls * n1) / (n0 + n1);
            self.mean_w_bbox = (self.mean_w_bbox * n0 + other.mean_w_bbox * n1) / (n0 + n1);
            self.mean_w_iou = (self.mean_w_iou * n0 + other.mean_w_iou * n1) / (n0 + n1);
        }
        self.total += other.total;
        self.cls += other.cls;
        self.bbox += other.bbox;
        self.giou += other.giou;
        self.background += other.background;
        self.matched += other.matched;
        self.clamped_quality += other.clamped_quality;
    }
}

/// Dynamically weighted detection loss over one image.
///
/// Matched pairs contribute `w_cls*Focal + w_bbox*L1 + w_iou*(1 - GIoU)`
/// with weights from the hardness penalty on the detached quality vector;
/// unmatched queries contribute a weight-1 focal background term. With all
/// sensitivities at 0 every weight is exactly 1 (the unweighted baseline).
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    matches: &MatchResult,
    gts: &[(BBox, usize)],
    sens: &SensitivityConfig,
    focal: &FocalConfig,
) -> Result<(Var, LossBreakdown)> {
    let k = tape.value(logits).shape()[0];
    let num_classes = tape.value(logits).shape()[1];
    let logit_vals = tape.value(logits).clone();
    let box_vals = tape.value(boxes).clone();

    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<Var> = Vec::new();

    if !matches.pairs.is_empty() {
        let m = matches.pairs.len();
        let mut q_idx = Vec::with_capacity(m);
        let mut cls_targets = Vec::with_capacity(m);
        let mut gt_box_data = Vec::with_capacity(4 * m);
        let mut w_cls = Vec::with_capacity(m);
        let mut w_bbox = Vec::with_capacity(m);
        let mut w_iou = Vec::with_capacity(m);
        for &(q, g) in &matches.pairs {
            if q >= k || g >= gts.len() {
                return Err(Error::invalid(format!(
                    "total_loss: match ({q}, {g}) out of range"
                )));
            }
            let (gt_box, gt_class) = gts[g];
            if gt_class >= num_classes {
                return Err(Error::invalid(format!(
                    "total_loss: gt class {gt_class} out of range"
                )));
            }
            q_idx.push(q);
            cls_targets.push(Some(gt_class));
            gt_box_data.extend_from_slice(&[gt_box.cx, gt_box.cy, gt_box.w, gt_box.h]);

            // quality from detached values; weights are constants in the graph
            let p_target = sigmoid_scalar(logit_vals.data()[q * num_classes + gt_class]);
            let pred_box = BBox::new(
                box_vals.data()[q * 4],
                box_vals.data()[q * 4 + 1],
                box_vals.data()[q * 4 + 2],
                box_vals.data()[q * 4 + 3],
            );
            let quality = quality_vector(p_target, &pred_box, &gt_box);
            let (wc, c1) = hardness_weight(quality.q_cls, sens.eta_cls);
            let (wb, c2) = hardness_weight(quality.q_bbox, sens.eta_bbox);
            let (wi, c3) = hardness_weight(quality.q_iou, sens.eta_iou);
            breakdown.clamped_quality += usize::from(c1) + usize::from(c2) + usize::from(c3);
            assert!(
                (1.0..=1.0 + sens.eta_cls).contains(&wc)
                    && (1.0..=1.0 + sens.eta_bbox).contains(&wb)
                    && (1.0..=1.0 + sens.eta_iou).contains(&wi),
                "hardness weight out of [1, 1+eta]"
            );
            w_cls.push(wc);
            w_bbox.push(wb);
            w_iou.push(wi);
        }
        if breakdown.clamped_quality > 0 {
            log::warn!(
                "total_loss: clamped {} out-of-range quality values",
                breakdown.clamped_quality
            );
        }
        breakdown.matched = m;
        breakdown.mean_w_cls = w_cls.iter().sum::<f64>() / m as f64;
        breakdown.mean_w_bbox = w_bbox.iter().sum::<f64>() / m as f64;
        breakdown.mean_w_iou = w_iou.iter().sum::<f64>() / m as f64;

        let matched_logits = tape.gather0(logits, &q_idx)?;
        let matched_boxes = tape.gather0(boxes, &q_idx)?;
        let gt_boxes = tape.leaf(Tensor::new(vec![m, 4], gt_box_data)?);

        let focal_rows = focal_loss_rows(tape, matched_logits, &cls_targets, focal)?;
        let wc_leaf = tape.leaf(Tensor::new(vec![m, 1], w_cls)?);
        let cls_weighted = tape.mul(focal_rows, wc_leaf)?;
        let cls_term = tape.sum(cls_weighted);

        let l1 = l1_rows(tape, matched_boxes, gt_boxes)?;
        let wb_leaf = tape.leaf(Tensor::new(vec![m, 1], w_bbox)?);
        let bbox_weighted = tape.mul(l1, wb_leaf)?;
        let bbox_term = tape.sum(bbox_weighted);

        let g = giou_rows(tape, matched_boxes, gt_boxes)?;
        let neg_g = tape.neg(g);
        let giou_loss = tape.add_scalar(neg_g, 1.0);
        let wi_leaf = tape.leaf(Tensor::new(vec![m, 1], w_iou)?);
        let giou_weighted = tape.mul(giou_loss, wi_leaf)?;
        let giou_term = tape.sum(giou_weighted);

        breakdown.cls = tape.value(cls_term).item()?;
        breakdown.bbox = tape.value(bbox_term).item()?;
        breakdown.giou = tape.value(giou_term).item()?;
        terms.extend([cls_term, bbox_term, giou_term]);
    } else {
        // neutral weight statistics when nothing is matched
        breakdown.mean_w_cls = 1.0;
        breakdown.mean_w_bbox = 1.0;
        breakdown.mean_w_iou = 1.0;
    }

    if !matches.unmatched.is_empty() {
        let bg_logits = tape.gather0(logits, &matches.unmatched)?;
        let bg_targets = vec![None; matches.unmatched.len()];
        let bg_rows = focal_loss_rows(tape, bg_logits, &bg_targets, focal)?;
        let bg_term = tape.sum(bg_rows);
        breakdown.background = tape.value(bg_term).item()?;
        terms.push(bg_term);
    }

    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t)?;
    }
    breakdown.total = tape.value(total).item()?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hardness_weight_endpoints_and_midpoint() {
        assert_eq!(hardness_weight(1.0, 3.7).0, 1.0);
        assert_eq!(hardness_weight(0.0, 2.0).0, 3.0);
        assert_eq!(hardness_weight(0.5, 1.0).0, 1.5);
        let (w, clamped) = hardness_weight(1.2, 2.0);
        assert_eq!(w, 1.0);
        assert!(clamped);
    }

    #[test]
    fn giou_hand_values() {
        let a = BBox::from_xyxy([0.0, 0.0, 2.0, 2.0]);
        let b = BBox::from_xyxy([1.0, 1.0, 3.0, 3.0]);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        assert!((giou(&a, &b) - (-5.0 / 63.0)).abs() < 1e-9);

        let c = BBox::from_xyxy([0.0, 0.0, 1.0, 1.0]);
        let d = BBox::from_xyxy([2.0, 0.0, 3.0, 1.0]);
        assert!((giou(&c, &d) - (-1.0 / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn l1_loss_basics() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(l1_box_loss(&a, &a), 0.0);
        let b = BBox::new(0.6, 0.5, 0.2, 0.2);
        assert!((l1_box_loss(&a, &b) - 0.1).abs() < 1e-12);
        assert_eq!(l1_box_loss(&a, &b), l1_box_loss(&b, &a));
    }

    #[test]
    fn quality_vector_perfect_prediction() {
        let b = BBox::new(0.4, 0.4, 0.2, 0.3);
        let q = quality_vector(0.87, &b, &b);
        assert_eq!(q.q_cls, 0.87);
        assert_eq!(q.q_bbox, 1.0);
        assert_eq!(q.q_iou, 1.0);
    }

    #[test]
    fn quality_iou_hand_value() {
        let a = BBox::from_xyxy([0.0, 0.0, 2.0, 2.0]);
        let b = BBox::from_xyxy([1.0, 1.0, 3.0, 3.0]);
        let q = quality_vector(0.5, &a, &b);
        assert!((q.q_iou - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn focal_hand_value() {
        // single class, p = 0.9: 0.25 * 0.1^2 * (-ln 0.9)
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(vec![(9.0f64).ln()]));
        let loss = focal_loss(
            &mut tape,
            logits,
            0,
            &FocalConfig {
                alpha: 0.25,
                gamma: 2.0,
            },
        )
        .unwrap();
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!(
            (tape.value(loss).data()[0] - expected).abs() < 1e-9,
            "got {}",
            tape.value(loss).data()[0]
        );
    }

    #[test]
    fn focal_gamma_zero_is_half_bce() {
        // gamma = 0, alpha = 0.5 -> 0.5 * binary cross-entropy summed over classes
        let logits_vals = [0.7, -1.3, 2.2];
        let target = 1usize;
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(logits_vals.to_vec()));
        let loss = focal_loss(
            &mut tape,
            logits,
            target,
            &FocalConfig {
                alpha: 0.5,
                gamma: 0.0,
            },
        )
        .unwrap();
        let mut bce = 0.0;
        for (c, &x) in logits_vals.iter().enumerate() {
            let p = sigmoid_scalar(x);
            bce += if c == target { -p.ln() } else { -(1.0 - p).ln() };
        }
        assert!((tape.value(loss).data()[0] - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn giou_rows_matches_plain_giou() {
        let pred = vec![
            BBox::new(0.4, 0.42, 0.2, 0.25),
            BBox::new(0.7, 0.3, 0.1, 0.1),
        ];
        let gt = vec![BBox::new(0.45, 0.45, 0.22, 0.2), BBox::new(0.2, 0.8, 0.3, 0.2)];
        let mut tape = Tape::new();
        let p = tape.leaf(
            Tensor::new(
                vec![2, 4],
                pred.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect(),
            )
            .unwrap(),
        );
        let g = tape.leaf(
            Tensor::new(
                vec![2, 4],
                gt.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect(),
            )
            .unwrap(),
        );
        let rows = giou_rows(&mut tape, p, g).unwrap();
        for i in 0..2 {
            let expected = giou(&pred[i], &gt[i]);
            assert!((tape.value(rows).data()[i] - expected).abs() < 1e-12);
        }
    }
}
