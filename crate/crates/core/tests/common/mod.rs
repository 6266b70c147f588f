//! Independent reference implementations used only by tests. They are kept
//! deliberately naive (plain nested loops, exhaustive enumeration) and do
//! not share code with the library paths they check.

use carident::autograd::Tensor;
use carident::eval::{Detection, GroundTruth};
use carident::ldlr::BBox;

/// Direct cross-correlation with explicit bounds handling.
/// `mode`: false = zero padding, true = replicate.
pub fn brute_conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    replicate: bool,
) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let fetch = |ci: usize, y: isize, xx: isize| -> f64 {
        if replicate {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xc = xx.clamp(0, wd as isize - 1) as usize;
            x.data()[(ci * h + yy) * wd + xc]
        } else if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[(ci * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            acc += fetch(ci, iy, ix)
                                * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

/// Nested-loop Scharr magnitude with replicate borders, written against the
/// kernel tables directly.
pub fn brute_scharr(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let kx: [[f64; 3]; 3] = [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]];
    let ky: [[f64; 3]; 3] = [[-3.0, -10.0, -3.0], [0.0, 0.0, 0.0], [3.0, 10.0, 3.0]];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (dy, row) in kx.iter().enumerate() {
                for (dx, &kv) in row.iter().enumerate() {
                    let yy = (y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                    gx += values[yy * w + xx] * kv;
                    gy += values[yy * w + xx] * ky[dy][dx];
                }
            }
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Exhaustive minimum-cost injection of `gts` columns into `queries` rows.
/// Every candidate total is folded in ascending gt order, the canonical
/// order the library also uses, so equal assignments compare bit-exactly.
pub fn exhaustive_min_assignment(cost: &[Vec<f64>], gts: usize) -> f64 {
    let queries = cost.len();
    assert!(gts <= queries);
    fn rec(
        cost: &[Vec<f64>],
        g: usize,
        gts: usize,
        used: &mut Vec<bool>,
        pick: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if g == gts {
            let total = pick
                .iter()
                .enumerate()
                .fold(0.0, |acc, (gg, &q)| acc + cost[q][gg]);
            if total < *best {
                *best = total;
            }
            return;
        }
        for q in 0..cost.len() {
            if used[q] {
                continue;
            }
            used[q] = true;
            pick.push(q);
            rec(cost, g + 1, gts, used, pick, best);
            pick.pop();
            used[q] = false;
        }
    }
    let mut best = f64::INFINITY;
    rec(
        cost,
        0,
        gts,
        &mut vec![false; queries],
        &mut Vec::new(),
        &mut best,
    );
    best
}

fn iou_of(a: &BBox, b: &BBox) -> f64 {
    let pa = a.to_xyxy();
    let pb = b.to_xyxy();
    let x1 = if pa[0] > pb[0] { pa[0] } else { pb[0] };
    let y1 = if pa[1] > pb[1] { pa[1] } else { pb[1] };
    let x2 = if pa[2] < pb[2] { pa[2] } else { pb[2] };
    let y2 = if pa[3] < pb[3] { pa[3] } else { pb[3] };
    let iw = if x2 > x1 { x2 - x1 } else { 0.0 };
    let ih = if y2 > y1 { y2 - y1 } else { 0.0 };
    let inter = iw * ih;
    let ua = (pa[2] - pa[0]) * (pa[3] - pa[1]) + (pb[2] - pb[0]) * (pb[3] - pb[1]) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Reference AP for one class at one threshold: sort, greedily match within
/// each image to the best-overlap free ground truth, then integrate the
/// precision envelope at the 101 COCO recall points.
pub fn brute_ap(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
    let class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if class_gts.is_empty() {
        return if class_dets.is_empty() { None } else { Some(0.0) };
    }
    if class_dets.is_empty() {
        return Some(0.0);
    }
    let mut idx: Vec<usize> = (0..class_dets.len()).collect();
    idx.sort_by(|&a, &b| {
        class_dets[b]
            .score
            .partial_cmp(&class_dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; class_gts.len()];
    let mut hits: Vec<bool> = Vec::new();
    for &di in &idx {
        let d = class_dets[di];
        let mut best_gi: Option<usize> = None;
        let mut best_ov = -1.0;
        for (gi, g) in class_gts.iter().enumerate() {
            if taken[gi] || g.image_id != d.image_id {
                continue;
            }
            let ov = iou_of(&d.bbox, &g.bbox);
            if ov >= thr && ov > best_ov {
                best_ov = ov;
                best_gi = Some(gi);
            }
        }
        match best_gi {
            Some(gi) => {
                taken[gi] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    let total_gt = class_gts.len() as f64;
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        // max precision over all prefixes whose recall reaches r
        let mut best_p = 0.0;
        let mut tp = 0.0;
        for (rank, &hit) in hits.iter().enumerate() {
            if hit {
                tp += 1.0;
            }
            let recall = tp / total_gt;
            let precision = tp / (rank as f64 + 1.0);
            if recall >= r && precision > best_p {
                best_p = precision;
            }
        }
        sum += best_p;
    }
    Some(sum / 101.0)
}

/// Reference mAP: mean of per-class (mean over thresholds) APs over classes
/// with at least one ground truth.
pub fn brute_map(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut class_means = Vec::new();
    for c in 0..num_classes {
        if !gts.iter().any(|g| g.class == c) {
            continue;
        }
        let aps: Vec<f64> = thresholds
            .iter()
            .filter_map(|&t| brute_ap(dets, gts, c, t))
            .collect();
        class_means.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    if class_means.is_empty() {
        0.0
    } else {
        class_means.iter().sum::<f64>() / class_means.len() as f64
    }
}
