//! Bipartite assignment between queries and ground-truth objects.
//!
//! Costs follow the detection-transformer convention
//! `2*(-p_target) + 5*L1 + 2*(1 - GIoU)`; the assignment minimizes total
//! cost over all injections of ground truths into queries.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::ldlr::{giou, l1_box_loss, BBox};

/// Rectangular cost matrix: rows are queries, columns are ground truths.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    queries: usize,
    gts: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, gts: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != queries * gts {
            return Err(Error::invalid(format!(
                "cost matrix data length {} != {}x{}",
                data.len(),
                queries,
                gts
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(CostMatrix {
            queries,
            gts,
            data,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn gts(&self) -> usize {
        self.gts
    }

    pub fn at(&self, query: usize, gt: usize) -> f64 {
        self.data[query * self.gts + gt]
    }
}

/// Assignment result: `pairs` lists `(query, gt)` sorted by gt index, with
/// every ground truth matched exactly once; `unmatched` holds the remaining
/// query indices in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

/// Matching cost between per-query class probabilities/boxes and ground
/// truths: `2*(-p_target) + 5*L1 + 2*(1 - GIoU)` per pair.
pub fn match_cost(
    class_probs: &Tensor,
    boxes: &[BBox],
    gts: &[(BBox, usize)],
) -> Result<CostMatrix> {
    let shape = class_probs.shape();
    if shape.len() != 2 || shape[0] != boxes.len() {
        return Err(Error::invalid(format!(
            "match_cost: probs {:?} vs {} boxes",
            shape,
            boxes.len()
        )));
    }
    let (k, c) = (shape[0], shape[1]);
    let mut data = Vec::with_capacity(k * gts.len());
    for q in 0..k {
        for &(gt_box, gt_class) in gts {
            if gt_class >= c {
                return Err(Error::invalid(format!(
                    "match_cost: gt class {gt_class} out of range for {c} classes"
                )));
            }
            let p = class_probs.data()[q * c + gt_class];
            let cost = 2.0 * (-p)
                + 5.0 * l1_box_loss(&boxes[q], &gt_box)
                + 2.0 * (1.0 - giou(&boxes[q], &gt_box));
            data.push(cost);
        }
    }
    CostMatrix::new(k, gts.len(), data)
}

/// Jonker-Volgenant shortest augmenting path assignment.
///
/// Assigns each of `n_gts` ground truths (rows of the reduced problem) to a
/// distinct entry of `queries`; returns the chosen position in `queries`
/// per ground truth, in `gt_order` order.
fn jv_assign(cost: &CostMatrix, gt_order: &[usize], queries: &[usize]) -> Vec<usize> {
    let n = gt_order.len();
    let m = queries.len();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost.at(queries[j - 1], gt_order[i0 - 1]) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = queries[j - 1];
        }
    }
    assignment
}

/// Total cost of an assignment, folded in ascending gt order so equal
/// assignments always produce bit-identical sums.
fn canonical_total(cost: &CostMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .fold(0.0, |acc, (g, &q)| acc + cost.at(q, g))
}

/// Minimum-cost assignment covering every ground truth.
///
/// Among equal-cost optima the lexicographically smallest pair list wins:
/// ground truths are processed in ascending order and each takes the
/// smallest query index that still permits an optimal completion.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    let (k, m) = (cost.queries(), cost.gts());
    if m == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched: (0..k).collect(),
            total_cost: 0.0,
        });
    }
    if m > k {
        return Err(Error::invalid(format!(
            "hungarian: {m} ground truths exceed {k} queries"
        )));
    }
    let mut chosen = vec![usize::MAX; m];
    let mut used = vec![false; k];
    for g in 0..m {
        let remaining_gts: Vec<usize> = (g + 1..m).collect();
        let mut pick: Option<(usize, f64)> = None;
        for q in 0..k {
            if used[q] {
                continue;
            }
            let remaining_queries: Vec<usize> =
                (0..k).filter(|&qq| !used[qq] && qq != q).collect();
            if remaining_queries.len() < remaining_gts.len() {
                continue;
            }
            let completion = jv_assign(cost, &remaining_gts, &remaining_queries);
            let mut full = chosen[..g].to_vec();
            full.push(q);
            full.extend_from_slice(&completion);
            let total = canonical_total(cost, &full);
            match pick {
                Some((_, t)) if total >= t => {}
                _ => pick = Some((q, total)),
            }
        }
        let (q, _) = pick.expect("at least one feasible query");
        chosen[g] = q;
        used[q] = true;
    }

    let pairs: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(g, &q)| (q, g)).collect();
    let unmatched: Vec<usize> = (0..k).filter(|&q| !used[q]).collect();
    let total_cost = canonical_total(cost, &chosen);
    Ok(MatchResult {
        pairs,
        unmatched,
        total_cost,
    })
}
