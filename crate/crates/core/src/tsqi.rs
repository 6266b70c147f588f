//! Tooth-structure-aware query initialization: hybrid semantic/structural
//! score map, top-K anchor selection, and confidence-embedded positional
//! queries.

use std::f64::consts::TAU;

use crate::autograd::{topk_indices, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ldlr::BBox;
use crate::nn::{ConvLayer, Linear};
use crate::spb::SpbNet;

/// Structural saliency `sigmoid(spb(features))` as a `[h, w]` map.
pub fn compute_saliency(
    tape: &mut Tape,
    params: &ParamSet,
    spb: &SpbNet,
    feat: Var,
    trainable: bool,
) -> Result<Var> {
    let raw = spb.forward(tape, params, feat, trainable)?;
    let sal = tape.sigmoid(raw);
    let (h, w) = {
        let s = tape.value(sal).shape();
        (s[1], s[2])
    };
    tape.reshape(sal, &[h, w])
}

/// Semantic score map: per-location max over classes of the sigmoid of a
/// 1x1 classification head, `[h, w]`.
pub fn semantic_scores(
    tape: &mut Tape,
    params: &ParamSet,
    cls_head: &ConvLayer,
    feat: Var,
    trainable: bool,
) -> Result<Var> {
    let logits = cls_head.forward(tape, params, feat, trainable)?;
    let probs = tape.sigmoid(logits);
    tape.max_axis(probs, 0)
}

/// Hybrid attention score `S_sem * (1 + lambda * P_str)`, differentiable in
/// both maps and in the scalar `lambda`.
pub fn hybrid_scores(tape: &mut Tape, sem: Var, sal: Var, lambda: Var) -> Result<Var> {
    if tape.value(sem).shape() != tape.value(sal).shape() {
        return Err(Error::ShapeMismatch {
            op: "hybrid_scores",
            left: tape.value(sem).shape().to_vec(),
            right: tape.value(sal).shape().to_vec(),
        });
    }
    let scaled = tape.mul(sal, lambda)?;
    let boost = tape.add_scalar(scaled, 1.0);
    tape.mul(sem, boost)
}

/// One selected anchor: grid cell, normalized center, and its score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub gx: usize,
    pub gy: usize,
    pub cx: f64,
    pub cy: f64,
    pub score: f64,
}

/// Top-K anchors sorted by score descending (ties by row-major cell index).
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub flat_indices: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Select the `k` highest-scoring grid cells of a `[h, w]` score map.
pub fn select_topk(scores: &Tensor, k: usize) -> Result<AnchorSet> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "select_topk expects a [h, w] map, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let flat_indices = topk_indices(scores, k)?;
    let anchors = flat_indices
        .iter()
        .map(|&i| {
            let gy = i / w;
            let gx = i % w;
            Anchor {
                gx,
                gy,
                cx: (gx as f64 + 0.5) / w as f64,
                cy: (gy as f64 + 0.5) / h as f64,
                score: scores.data()[i],
            }
        })
        .collect();
    Ok(AnchorSet {
        anchors,
        flat_indices,
        grid_h: h,
        grid_w: w,
    })
}

/// Sinusoidal 2-D positional encoding of a normalized coordinate pair:
/// `d_pe / 2` dims per axis, interleaved sin/cos over geometric frequencies,
/// coordinates scaled by 2*pi. The L2 norm is `sqrt(d_pe / 2)` everywhere.
pub fn positional_encoding(cx: f64, cy: f64, d_pe: usize) -> Result<Vec<f64>> {
    if d_pe == 0 || d_pe % 4 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding width {d_pe} must be a positive multiple of 4"
        )));
    }
    let per_axis = d_pe / 2;
    let pairs = per_axis / 2;
    let mut out = Vec::with_capacity(d_pe);
    for &coord in &[cx, cy] {
        for k in 0..pairs {
            let freq = 10000f64.powf(2.0 * k as f64 / per_axis as f64);
            let angle = TAU * coord / freq;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

/// Confidence-embedded positional queries plus their reference boxes.
#[derive(Debug)]
pub struct QuerySet {
    /// `[K, d_model]` query embeddings on the tape.
    pub queries: Var,
    /// Reference boxes `(cx, cy, w0, h0)` per query, normalized.
    pub ref_boxes: Vec<BBox>,
}

/// Build queries `psi(concat(PE(anchor), v))` from anchors and their
/// (differentiable) scores `v: [K]`; reference boxes get the anchor center
/// and an initial `box_init` by `box_init` extent.
pub fn build_queries(
    tape: &mut Tape,
    params: &ParamSet,
    anchors: &AnchorSet,
    v: Var,
    psi: &Linear,
    d_pe: usize,
    box_init: f64,
    trainable: bool,
) -> Result<QuerySet> {
    let k = anchors.anchors.len();
    if k == 0 {
        return Err(Error::invalid("build_queries needs at least one anchor"));
    }
    if tape.value(v).numel() != k {
        return Err(Error::ShapeMismatch {
            op: "build_queries",
            left: tape.value(v).shape().to_vec(),
            right: vec![k],
        });
    }
    let expected_in = d_pe + 1;
    let psi_in = params.value(psi.weight).shape()[0];
    if psi_in != expected_in {
        return Err(Error::ShapeMismatch {
            op: "build_queries",
            left: vec![psi_in],
            right: vec![expected_in],
        });
    }
    let mut pe_data = Vec::with_capacity(k * d_pe);
    for a in &anchors.anchors {
        pe_data.extend(positional_encoding(a.cx, a.cy, d_pe)?);
    }
    let pe = tape.leaf(Tensor::new(vec![k, d_pe], pe_data)?);
    let v_col = tape.reshape(v, &[k, 1])?;
    let qin = tape.concat_cols(pe, v_col)?;
    let queries = psi.forward(tape, params, qin, trainable)?;
    let ref_boxes = anchors
        .anchors
        .iter()
        .map(|a| BBox::new(a.cx, a.cy, box_init, box_init))
        .collect();
    Ok(QuerySet { queries, ref_boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hybrid_at_lambda_zero_is_semantic_bitwise() {
        let mut tape = Tape::new();
        let sem = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.1, 0.9]).unwrap());
        let sal = tape.leaf(Tensor::new(vec![2, 2], vec![0.5, 0.6, 0.7, 0.8]).unwrap());
        let lambda = tape.leaf(Tensor::scalar(0.0));
        let hybrid = hybrid_scores(&mut tape, sem, sal, lambda).unwrap();
        assert_eq!(tape.value(hybrid).data(), tape.value(sem).data());
    }

    #[test]
    fn hybrid_formula_value() {
        let mut tape = Tape::new();
        let sem = tape.leaf(Tensor::scalar(0.5));
        let sal = tape.leaf(Tensor::scalar(0.8));
        let lambda = tape.leaf(Tensor::scalar(1.0));
        let hybrid = hybrid_scores(&mut tape, sem, sal, lambda).unwrap();
        assert!((tape.value(hybrid).data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn hybrid_lambda_gradient_is_sem_times_sal() {
        let mut tape = Tape::new();
        let sem = tape.leaf(Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap());
        let sal = tape.leaf(Tensor::new(vec![1, 3], vec![0.4, 0.6, 0.1]).unwrap());
        let lambda = tape.leaf_grad(Tensor::scalar(0.7));
        let hybrid = hybrid_scores(&mut tape, sem, sal, lambda).unwrap();
        let s = tape.sum(hybrid);
        let grads = tape.backward(s).unwrap();
        let expected: f64 = 0.2 * 0.4 + 0.5 * 0.6 + 0.9 * 0.1;
        assert!((grads.get(lambda).unwrap().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn hybrid_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let sem = tape.leaf(Tensor::zeros(&[2, 2]));
        let sal = tape.leaf(Tensor::zeros(&[2, 3]));
        let lambda = tape.leaf(Tensor::scalar(1.0));
        assert!(hybrid_scores(&mut tape, sem, sal, lambda).is_err());
    }

    #[test]
    fn topk_full_map_and_single_peak() {
        let mut data = vec![0.1; 12];
        data[2 * 4 + 3] = 0.9; // row 2, col 3
        let map = Tensor::new(vec![3, 4], data).unwrap();
        let set = select_topk(&map, 1).unwrap();
        assert_eq!(set.anchors[0].gy, 2);
        assert_eq!(set.anchors[0].gx, 3);
        assert!((set.anchors[0].cx - 3.5 / 4.0).abs() < 1e-12);
        assert!((set.anchors[0].cy - 2.5 / 3.0).abs() < 1e-12);

        let all = select_topk(&map, 12).unwrap();
        assert_eq!(all.anchors.len(), 12);
        for pair in all.anchors.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn topk_plateau_prefers_row_major_order() {
        let map = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let set = select_topk(&map, 4).unwrap();
        assert_eq!(set.flat_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn positional_encoding_contract() {
        let pe = positional_encoding(0.0, 0.0, 16).unwrap();
        for (i, v) in pe.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0, "sin term {i}");
            } else {
                assert_eq!(*v, 1.0, "cos term {i}");
            }
        }
        let a = positional_encoding(0.25, 0.5, 16).unwrap();
        let b = positional_encoding(0.5, 0.25, 16).unwrap();
        assert_ne!(a, b);
        for probe in [(0.0, 0.0), (0.3, 0.9), (1.0, 0.5)] {
            let pe = positional_encoding(probe.0, probe.1, 16).unwrap();
            let norm: f64 = pe.iter().map(|v| v * v).sum::<f64>();
            assert!((norm.sqrt() - (8.0f64).sqrt()).abs() < 1e-12);
        }
        assert!(positional_encoding(0.5, 0.5, 10).is_err());
    }

    #[test]
    fn zero_projection_gives_zero_queries() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let psi = Linear::new(&mut params, "psi", 9, 4, &mut rng).unwrap();
        *params.value_mut(psi.weight) = Tensor::zeros(&[9, 4]);
        let map = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.4, 0.2]).unwrap();
        let anchors = select_topk(&map, 2).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(vec![0.9, 0.4]));
        let qs = build_queries(&mut tape, &params, &anchors, v, &psi, 8, 0.1, false).unwrap();
        assert!(tape.value(qs.queries).data().iter().all(|&x| x == 0.0));
        assert_eq!(qs.ref_boxes.len(), 2);
        assert!(qs.ref_boxes.iter().all(|b| b.w == 0.1 && b.h == 0.1));
    }

    #[test]
    fn queries_differ_linearly_in_score() {
        // two anchors at the same location differing only in v: the query
        // difference is (v1 - v0) times the last row of psi's weight
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = Linear::new(&mut params, "psi", 9, 4, &mut rng).unwrap();
        let anchors = AnchorSet {
            anchors: vec![
                Anchor { gx: 1, gy: 1, cx: 0.5, cy: 0.5, score: 0.8 },
                Anchor { gx: 1, gy: 1, cx: 0.5, cy: 0.5, score: 0.3 },
            ],
            flat_indices: vec![0, 0],
            grid_h: 2,
            grid_w: 2,
        };
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(vec![0.8, 0.3]));
        let qs = build_queries(&mut tape, &params, &anchors, v, &psi, 8, 0.1, false).unwrap();
        let q = tape.value(qs.queries);
        let w = params.value(psi.weight);
        for j in 0..4 {
            let diff = q.data()[j] - q.data()[4 + j];
            let expected = (0.8 - 0.3) * w.data()[8 * 4 + j];
            assert!((diff - expected).abs() < 1e-12);
        }
    }
}
