//! Per-class average precision and mAP over IoU thresholds 0.50:0.05:0.95,
//! following the COCO conventions: greedy highest-IoU matching per image and
//! 101-point interpolated precision/recall area.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ldlr::BBox;
use crate::par::par_map;

/// One scored detection, normalized cxcywh coordinates.
#[derive(Clone, Debug)]
pub struct Detection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// One annotated object.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
}

/// Intersection-over-union of two corner-form boxes; 0 when the union has
/// zero area.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The ten COCO IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (10..20).map(|i| i as f64 / 20.0).collect()
}

/// Average precision of one class at one IoU threshold.
///
/// Detections are ranked by score (ties by insertion order) and greedily
/// matched, each to the highest-IoU still-unmatched ground truth of its
/// image at or above the threshold. AP is the mean of the interpolated
/// precision envelope sampled at recalls 0.00, 0.01, ..., 1.00.
///
/// Returns `None` when the class has neither ground truths nor detections
/// (undefined, excluded from means); a class with detections but no ground
/// truth scores 0.
pub fn ap_per_class(dets: &[&Detection], gts: &[&GroundTruth], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    if dets.is_empty() {
        return Some(0.0);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .expect("finite scores")
            .then(i.cmp(&j))
    });
    let mut gt_matched = vec![false; gts.len()];
    let mut tp = vec![false; order.len()];
    for (rank, &di) in order.iter().enumerate() {
        let det = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] || gt.image_id != det.image_id {
                continue;
            }
            let ov = iou_xyxy(det.bbox.to_xyxy(), gt.bbox.to_xyxy());
            if ov >= iou_thr {
                match best {
                    Some((_, b)) if ov <= b => {}
                    _ => best = Some((gi, ov)),
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            tp[rank] = true;
        }
    }
    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tps = 0usize;
    for (rank, &hit) in tp.iter().enumerate() {
        if hit {
            tps += 1;
        }
        precision.push(tps as f64 / (rank + 1) as f64);
        recall.push(tps as f64 / n_gt);
    }
    // precision envelope: running max from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = recall
            .iter()
            .position(|&rc| rc >= r)
            .map_or(0.0, |idx| precision[idx]);
        ap += p;
    }
    Some(ap / 101.0)
}

/// Evaluation summary for one class.
#[derive(Clone, Debug, Serialize)]
pub struct ClassEval {
    pub class: usize,
    pub name: String,
    pub num_gt: usize,
    /// AP at each threshold of [`iou_thresholds`]; `None` if undefined.
    pub ap_by_threshold: Vec<Option<f64>>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

/// Full evaluation result; overall metrics average the per-class values
/// over classes with at least one ground truth.
#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassEval>,
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
}

impl EvalResult {
    pub fn report_json(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .per_class
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    serde_json::json!({
                        "ap": c.ap,
                        "ap50": c.ap50,
                        "ap75": c.ap75,
                        "num_gt": c.num_gt,
                    }),
                )
            })
            .collect();
        serde_json::json!({
            "per_class": per_class,
            "map": self.map,
            "map50": self.map50,
            "map75": self.map75,
        })
    }

    /// Plain-text table for terminal output.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>6} {:>8} {:>8} {:>8}\n",
            "class", "gts", "AP", "AP50", "AP75"
        ));
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<16} {:>6} {:>8} {:>8} {:>8}\n",
                c.name,
                c.num_gt,
                fmt(c.ap),
                fmt(c.ap50),
                fmt(c.ap75)
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>6} {:>8.4} {:>8.4} {:>8.4}\n",
            "mAP", "", self.map, self.map50, self.map75
        ));
        out
    }
}

/// Evaluate detections against ground truths for `class_names.len()` classes.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_names: &[String],
) -> Result<EvalResult> {
    let num_classes = class_names.len();
    for d in dets {
        if d.class >= num_classes {
            return Err(Error::invalid(format!(
                "detection class {} out of range for {} classes",
                d.class, num_classes
            )));
        }
    }
    for g in gts {
        if g.class >= num_classes {
            return Err(Error::invalid(format!(
                "ground-truth class {} out of range for {} classes",
                g.class, num_classes
            )));
        }
    }
    let thresholds = iou_thresholds();
    // (class, threshold) tasks are independent
    let tasks: Vec<(usize, f64)> = (0..num_classes)
        .flat_map(|c| thresholds.iter().map(move |&t| (c, t)))
        .collect();
    let aps = par_map(&tasks, |&(class, thr)| {
        let class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
        ap_per_class(&class_dets, &class_gts, thr)
    });

    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let ap_by_threshold: Vec<Option<f64>> =
            aps[class * thresholds.len()..(class + 1) * thresholds.len()].to_vec();
        let num_gt = gts.iter().filter(|g| g.class == class).count();
        let defined: Vec<f64> = ap_by_threshold.iter().flatten().copied().collect();
        let ap = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        per_class.push(ClassEval {
            class,
            name: class_names[class].clone(),
            num_gt,
            ap50: ap_by_threshold[0],
            ap75: ap_by_threshold[5],
            ap_by_threshold,
            ap,
        });
    }
    let with_gt: Vec<&ClassEval> = per_class.iter().filter(|c| c.num_gt > 0).collect();
    let mean_of = |f: &dyn Fn(&ClassEval) -> Option<f64>| -> f64 {
        if with_gt.is_empty() {
            return 0.0;
        }
        with_gt.iter().filter_map(|c| f(c)).sum::<f64>() / with_gt.len() as f64
    };
    Ok(EvalResult {
        map: mean_of(&|c| c.ap),
        map50: mean_of(&|c| c.ap50),
        map75: mean_of(&|c| c.ap75),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: u64, class: usize, bbox: BBox, score: f64) -> Detection {
        Detection {
            image_id,
            class,
            bbox,
            score,
        }
    }

    fn gt(image_id: u64, class: usize, bbox: BBox) -> GroundTruth {
        GroundTruth {
            image_id,
            class,
            bbox,
        }
    }

    #[test]
    fn iou_hand_values() {
        assert_eq!(iou_xyxy([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(iou_xyxy([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
        let v = iou_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_above_and_below_threshold() {
        let b = BBox::new(0.5, 0.5, 0.4, 0.4);
        let shifted = BBox::new(0.5, 0.5, 0.4, 0.24); // IoU = 0.6
        let dets = [det(0, 0, shifted, 0.9)];
        let gts = [gt(0, 0, b)];
        let dref: Vec<&Detection> = dets.iter().collect();
        let gref: Vec<&GroundTruth> = gts.iter().collect();
        assert_eq!(ap_per_class(&dref, &gref, 0.5), Some(1.0));
        assert_eq!(ap_per_class(&dref, &gref, 0.75), Some(0.0));
    }

    #[test]
    fn two_gts_one_perfect_det_caps_recall() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BBox::new(0.7, 0.7, 0.2, 0.2);
        let dets = [det(0, 0, b1, 0.9)];
        let gts = [gt(0, 0, b1), gt(0, 0, b2)];
        let dref: Vec<&Detection> = dets.iter().collect();
        let gref: Vec<&GroundTruth> = gts.iter().collect();
        let ap = ap_per_class(&dref, &gref, 0.5).unwrap();
        // 51 of 101 recall points see precision 1 (recall caps at 0.5)
        assert!((ap - 51.0 / 101.0).abs() < 1e-12, "ap = {ap}");
        assert!((ap - 0.5).abs() <= 1.0 / 101.0);
    }

    #[test]
    fn exact_detections_score_map_one() {
        let names = vec!["a".to_string(), "b".to_string()];
        let boxes = [
            BBox::new(0.3, 0.3, 0.2, 0.2),
            BBox::new(0.6, 0.6, 0.3, 0.2),
            BBox::new(0.5, 0.2, 0.2, 0.15),
        ];
        let gts: Vec<GroundTruth> = boxes
            .iter()
            .enumerate()
            .map(|(i, &b)| gt(i as u64 % 2, i % 2, b))
            .collect();
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(g.image_id, g.class, g.bbox, 0.8))
            .collect();
        let res = evaluate(&dets, &gts, &names).unwrap();
        assert_eq!(res.map, 1.0);
        assert_eq!(res.map50, 1.0);
        assert_eq!(res.map75, 1.0);
    }

    #[test]
    fn iou_point_six_single_pair_class_map() {
        // gt spans the full unit square, det covers the lower 0.6 exactly:
        // IoU passes thresholds 0.50, 0.55, 0.60 -> class mAP 0.3
        let names = vec!["x".to_string()];
        let g1 = gt(0, 0, BBox::new(0.5, 0.5, 1.0, 1.0));
        let d1 = det(0, 0, BBox::new(0.5, 0.3, 1.0, 0.6), 0.7);
        let res = evaluate(&[d1], &[g1], &names).unwrap();
        assert!((res.map - 0.3).abs() < 1e-12, "map = {}", res.map);
        assert_eq!(res.map50, 1.0);
        assert_eq!(res.map75, 0.0);
    }

    #[test]
    fn score_scale_invariance() {
        let names = vec!["x".to_string()];
        let gts = vec![
            gt(0, 0, BBox::new(0.3, 0.3, 0.2, 0.2)),
            gt(1, 0, BBox::new(0.6, 0.6, 0.2, 0.2)),
        ];
        let dets = vec![
            det(0, 0, BBox::new(0.31, 0.3, 0.2, 0.2), 0.9),
            det(1, 0, BBox::new(0.7, 0.7, 0.2, 0.2), 0.4),
            det(0, 0, BBox::new(0.8, 0.2, 0.1, 0.1), 0.6),
        ];
        let base = evaluate(&dets, &gts, &names).unwrap();
        let scaled: Vec<Detection> = dets
            .iter()
            .map(|d| det(d.image_id, d.class, d.bbox, d.score * 0.137))
            .collect();
        let res = evaluate(&scaled, &gts, &names).unwrap();
        assert_eq!(base.map, res.map);
        assert_eq!(base.map50, res.map50);
    }

    #[test]
    fn class_without_gts_excluded_from_mean() {
        let names = vec!["hit".to_string(), "ghost".to_string()];
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let gts = vec![gt(0, 0, b)];
        let dets = vec![det(0, 0, b, 0.9), det(0, 1, b, 0.8)];
        let res = evaluate(&dets, &gts, &names).unwrap();
        assert_eq!(res.map, 1.0);
        assert_eq!(res.per_class[1].num_gt, 0);
        assert_eq!(res.per_class[1].ap, Some(0.0));
    }
}
