//! Set-based training objective: Hungarian bipartite matching, the
//! classification / L1 / generalized-IoU loss combination with auxiliary
//! fan-out over decoder layers, and token-matching distillation.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tape, TensorError, TensorId};

pub const GIOU_EPS: f64 = 1e-7;

/// Loss combination coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub cl: f64,
    pub l1: f64,
    pub iou: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cl: 1.0,
            l1: 5.0,
            iou: 2.0,
            dis: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// softmax over `classes + 1` with an explicit background class
    CrossEntropy,
    /// sigmoid focal loss over `classes`, unmatched predictions all-negative
    Focal,
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Normalized boxes as (cx, cy, w, h) plus class labels.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<f64>,
    pub labels: Vec<usize>,
}

impl BoxSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() * 4 {
            return Err(TensorError::Contract(format!(
                "box set holds {} coords for {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        for b in self.boxes.chunks(4) {
            let ok = b.iter().all(|v| (0.0..=1.0).contains(v)) && b[2] >= 0.0 && b[3] >= 0.0;
            if !ok {
                return Err(TensorError::Contract(format!("invalid normalized box {b:?}")));
            }
        }
        Ok(())
    }

    pub fn corners(&self, i: usize) -> [f64; 4] {
        cxcywh_to_corners(&self.boxes[i * 4..(i + 1) * 4])
    }
}

pub fn cxcywh_to_corners(b: &[f64]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Plain intersection-over-union on corner-form boxes. Denominators are
/// floored at [`GIOU_EPS`] so degenerate zero-area boxes stay finite.
pub fn iou_corner(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter).max(GIOU_EPS)
}

/// Generalized IoU on corner-form boxes: IoU minus the fraction of the
/// smallest enclosing box not covered by the union. Range `[-1, 1]`.
pub fn giou_corner(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ew * eh;
    inter / union.max(GIOU_EPS) - (enclose - union) / enclose.max(GIOU_EPS)
}

/// Differentiable `1 - GIoU` per row for predicted boxes in (cx, cy, w, h)
/// form against constant ground-truth corner boxes. Returns `[n, 1]`.
pub fn giou_loss_rows(tape: &mut Tape, pred_cxcywh: TensorId, gt_corners: &[f64]) -> Result<TensorId> {
    let n = tape.shape(pred_cxcywh)[0];
    if gt_corners.len() != n * 4 {
        return Err(TensorError::Contract(format!(
            "giou_loss_rows got {} gt corners for {} predictions",
            gt_corners.len() / 4,
            n
        )));
    }
    let cx = tape.narrow_lastdim(pred_cxcywh, 0, 1)?;
    let cy = tape.narrow_lastdim(pred_cxcywh, 1, 1)?;
    let w = tape.narrow_lastdim(pred_cxcywh, 2, 1)?;
    let h = tape.narrow_lastdim(pred_cxcywh, 3, 1)?;
    let wh = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let px1 = tape.sub(cx, wh)?;
    let px2 = tape.add(cx, wh)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;

    let col = |tape: &mut Tape, k: usize| -> Result<TensorId> {
        let v: Vec<f64> = (0..n).map(|i| gt_corners[i * 4 + k]).collect();
        tape.constant(v, &[n, 1])
    };
    let gx1 = col(tape, 0)?;
    let gy1 = col(tape, 1)?;
    let gx2 = col(tape, 2)?;
    let gy2 = col(tape, 3)?;

    let ix1 = tape.max_elem(px1, gx1)?;
    let iy1 = tape.max_elem(py1, gy1)?;
    let ix2 = tape.min_elem(px2, gx2)?;
    let iy2 = tape.min_elem(py2, gy2)?;
    let iw_raw = tape.sub(ix2, ix1)?;
    let ih_raw = tape.sub(iy2, iy1)?;
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px2, px1)?;
    let ph = tape.sub(py2, py1)?;
    let area_p = tape.mul(pw, ph)?;
    let area_g: Vec<f64> = (0..n)
        .map(|i| {
            let g = &gt_corners[i * 4..(i + 1) * 4];
            (g[2] - g[0]) * (g[3] - g[1])
        })
        .collect();
    let area_g = tape.constant(area_g, &[n, 1])?;
    let sum_areas = tape.add(area_p, area_g)?;
    let union = tape.sub(sum_areas, inter)?;

    let eps_col = tape.constant(vec![GIOU_EPS; n], &[n, 1])?;
    let union_floored = tape.max_elem(union, eps_col)?;
    let iou = tape.div(inter, union_floored)?;

    let ex1 = tape.min_elem(px1, gx1)?;
    let ey1 = tape.min_elem(py1, gy1)?;
    let ex2 = tape.max_elem(px2, gx2)?;
    let ey2 = tape.max_elem(py2, gy2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclose = tape.mul(ew, eh)?;
    let hole = tape.sub(enclose, union)?;
    let enclose_floored = tape.max_elem(enclose, eps_col)?;
    let penalty = tape.div(hole, enclose_floored)?;
    let giou = tape.sub(iou, penalty)?;
    let neg = tape.neg(giou);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Injective minimum-cost assignment of ground truths to predictions.
#[derive(Debug, Clone, Default)]
pub struct MatchAssignment {
    /// `(gt_index, pred_index)` pairs, one per ground truth
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Jonker-Volgenant shortest augmenting path over a dense `n_gt x n_pred`
/// cost matrix. Ties break toward the lowest prediction index.
pub fn hungarian_match(cost: &[f64], n_gt: usize, n_pred: usize) -> Result<MatchAssignment> {
    if cost.len() != n_gt * n_pred {
        return Err(TensorError::Contract(format!(
            "cost matrix has {} entries for {n_gt}x{n_pred}",
            cost.len()
        )));
    }
    if n_gt > n_pred {
        return Err(TensorError::Contract(format!(
            "cannot match {n_gt} ground truths onto {n_pred} predictions"
        )));
    }
    let mut ys = vec![0.0; n_gt];
    let mut yt = vec![0.0; n_pred + 1];
    let mut job: Vec<Option<usize>> = vec![None; n_pred + 1];
    for row in 0..n_gt {
        let mut w_cur = n_pred;
        job[w_cur] = Some(row);
        let mut min_to = vec![f64::INFINITY; n_pred];
        let mut prv = vec![usize::MAX; n_pred];
        let mut in_z = vec![false; n_pred + 1];
        while let Some(j) = job[w_cur] {
            in_z[w_cur] = true;
            let mut delta = f64::INFINITY;
            let mut w_next = n_pred;
            for w in 0..n_pred {
                if in_z[w] {
                    continue;
                }
                let reduced = cost[j * n_pred + w] - ys[j] - yt[w];
                if reduced < min_to[w] {
                    min_to[w] = reduced;
                    prv[w] = w_cur;
                }
                if min_to[w] < delta {
                    delta = min_to[w];
                    w_next = w;
                }
            }
            debug_assert!(w_next < n_pred);
            for w in 0..=n_pred {
                if in_z[w] {
                    if let Some(jj) = job[w] {
                        ys[jj] += delta;
                    }
                    yt[w] -= delta;
                } else if w < n_pred {
                    min_to[w] -= delta;
                }
            }
            w_cur = w_next;
        }
        while w_cur != n_pred {
            let w_prev = prv[w_cur];
            job[w_cur] = job[w_prev];
            w_cur = w_prev;
        }
    }
    let mut pairs = vec![(0usize, 0usize); n_gt];
    let mut total = 0.0;
    for (w, slot) in job.iter().enumerate().take(n_pred) {
        if let Some(r) = slot {
            pairs[*r] = (*r, w);
            total += cost[r * n_pred + w];
        }
    }
    Ok(MatchAssignment {
        pairs,
        total_cost: total,
    })
}

/// DETR-style matching cost: `cl * (-p_j[c_i]) + l1 * |B_i - B_j|_1 +
/// iou * (1 - GIoU)`, row-major `[n_gt, n_pred]`. `probs` holds per-class
/// probabilities (softmax or sigmoid per classification mode).
pub fn matching_cost(
    probs: &[f64],
    pred_boxes: &[f64],
    n_pred: usize,
    classes: usize,
    gt: &BoxSet,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    let n_gt = gt.len();
    if let Some(&bad) = gt.labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Contract(format!(
            "ground-truth label {bad} out of range for {classes} classes"
        )));
    }
    let mut cost = vec![0.0; n_gt * n_pred];
    for i in 0..n_gt {
        let gt_box = &gt.boxes[i * 4..(i + 1) * 4];
        let gt_c = cxcywh_to_corners(gt_box);
        let label = gt.labels[i];
        for j in 0..n_pred {
            let pb = &pred_boxes[j * 4..(j + 1) * 4];
            let l1: f64 = gt_box.iter().zip(pb).map(|(a, b)| (a - b).abs()).sum();
            let g = giou_corner(&cxcywh_to_corners(pb), &gt_c);
            cost[i * n_pred + j] =
                w.cl * (-probs[j * classes + label]) + w.l1 * l1 + w.iou * (1.0 - g);
        }
    }
    Ok(cost)
}

/// One decoder layer's predictions living on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrediction {
    /// `[n_pred, 4]` normalized (cx, cy, w, h)
    pub boxes: TensorId,
    /// `[n_pred, classes]` (focal) or `[n_pred, classes + 1]` (cross-entropy)
    pub logits: TensorId,
}

fn probs_for_matching(tape: &Tape, logits: TensorId, classes: usize, mode: ClsMode) -> Vec<f64> {
    let data = tape.data(logits);
    let width = tape.shape(logits)[1];
    let n = tape.shape(logits)[0];
    let mut probs = vec![0.0; n * classes];
    match mode {
        ClsMode::Focal => {
            for (i, row) in data.chunks(width).enumerate() {
                for c in 0..classes {
                    probs[i * classes + c] = 1.0 / (1.0 + (-row[c]).exp());
                }
            }
        }
        ClsMode::CrossEntropy => {
            for (i, row) in data.chunks(width).enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..classes {
                    probs[i * classes + c] = exps[c] / sum;
                }
            }
        }
    }
    probs
}

/// Compute per-layer Hungarian assignments on detached values.
pub fn match_layers(
    tape: &Tape,
    layers: &[LayerPrediction],
    gt: &BoxSet,
    w: &LossWeights,
    mode: ClsMode,
    classes: usize,
) -> Result<Vec<MatchAssignment>> {
    layers
        .iter()
        .map(|layer| {
            if gt.is_empty() {
                return Ok(MatchAssignment::default());
            }
            let n_pred = tape.shape(layer.boxes)[0];
            let probs = probs_for_matching(tape, layer.logits, classes, mode);
            let cost = matching_cost(&probs, tape.data(layer.boxes), n_pred, classes, gt, w)?;
            hungarian_match(&cost, gt.len(), n_pred)
        })
        .collect()
}

/// Sigmoid focal loss summed over all logits, positives marked by `pos`.
fn focal_loss_sum(tape: &mut Tape, logits: TensorId, pos_mask: Vec<f64>) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    let mask = tape.constant(pos_mask, &shape)?;
    let p = tape.sigmoid(logits);
    let neg_p = tape.neg(p);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let neg_logits = tape.neg(logits);
    let sp_pos = tape.softplus(neg_logits); // -ln sigmoid(x)
    let sp_neg = tape.softplus(logits); // -ln (1 - sigmoid(x))
    let omp_sq = tape.mul(one_minus_p, one_minus_p)?;
    let pos_term = tape.mul(omp_sq, sp_pos)?;
    let pos_term = tape.scale(pos_term, FOCAL_ALPHA);
    let p_sq = tape.mul(p, p)?;
    let neg_term = tape.mul(p_sq, sp_neg)?;
    let neg_term = tape.scale(neg_term, 1.0 - FOCAL_ALPHA);
    let pos_sel = tape.mul(pos_term, mask)?;
    let neg_mask = tape.neg(mask);
    let neg_mask = tape.add_scalar(neg_mask, 1.0);
    let neg_sel = tape.mul(neg_term, neg_mask)?;
    let both = tape.add(pos_sel, neg_sel)?;
    Ok(tape.sum_all(both))
}

/// Weighted per-layer loss with the assignments held fixed. Exposed so
/// gradient checks can freeze the matching across perturbations.
pub fn detection_loss_with_assignments(
    tape: &mut Tape,
    layers: &[LayerPrediction],
    assignments: &[MatchAssignment],
    gt: &BoxSet,
    w: &LossWeights,
    mode: ClsMode,
    classes: usize,
) -> Result<TensorId> {
    if layers.is_empty() {
        return Err(TensorError::Contract("detection loss over zero layers".to_string()));
    }
    if layers.len() != assignments.len() {
        return Err(TensorError::Contract(format!(
            "{} layers vs {} assignments",
            layers.len(),
            assignments.len()
        )));
    }
    let n_gt = gt.len();
    let mut total: Option<TensorId> = None;
    for (layer, assign) in layers.iter().zip(assignments) {
        let n_pred = tape.shape(layer.boxes)[0];
        let width = tape.shape(layer.logits)[1];
        let expected = match mode {
            ClsMode::Focal => classes,
            ClsMode::CrossEntropy => classes + 1,
        };
        if width != expected {
            return Err(TensorError::Contract(format!(
                "logit width {width} does not match mode (expected {expected})"
            )));
        }

        let cls_term = match mode {
            ClsMode::CrossEntropy => {
                let mut targets = vec![classes; n_pred]; // background
                for &(gi, pj) in &assign.pairs {
                    targets[pj] = gt.labels[gi];
                }
                let ce = tape.cross_entropy_mean(layer.logits, Rc::new(targets))?;
                tape.scale(ce, w.cl)
            }
            ClsMode::Focal => {
                let mut pos = vec![0.0; n_pred * classes];
                for &(gi, pj) in &assign.pairs {
                    pos[pj * classes + gt.labels[gi]] = 1.0;
                }
                let fsum = focal_loss_sum(tape, layer.logits, pos)?;
                tape.scale(fsum, w.cl / n_gt.max(1) as f64)
            }
        };
        let mut layer_total = cls_term;

        if n_gt > 0 {
            let pred_idx: Vec<usize> = {
                let mut by_gt = assign.pairs.clone();
                by_gt.sort_by_key(|&(gi, _)| gi);
                by_gt.iter().map(|&(_, pj)| pj).collect()
            };
            let sel = tape.gather_rows(layer.boxes, Rc::new(pred_idx))?;
            let gt_boxes = tape.constant(gt.boxes.clone(), &[n_gt, 4])?;
            let diff = tape.sub(sel, gt_boxes)?;
            let l1 = tape.abs(diff);
            let l1_sum = tape.sum_all(l1);
            let l1_term = tape.scale(l1_sum, w.l1 / n_gt as f64);

            let gt_corners: Vec<f64> = (0..n_gt).flat_map(|i| gt.corners(i)).collect();
            let giou_rows = giou_loss_rows(tape, sel, &gt_corners)?;
            let giou_sum = tape.sum_all(giou_rows);
            let giou_term = tape.scale(giou_sum, w.iou / n_gt as f64);

            layer_total = tape.add(layer_total, l1_term)?;
            layer_total = tape.add(layer_total, giou_term)?;
        }

        total = Some(match total {
            None => layer_total,
            Some(t) => tape.add(t, layer_total)?,
        });
    }
    Ok(total.unwrap())
}

/// Full set-matching loss: Hungarian assignment per layer on detached
/// values, then the weighted classification / L1 / GIoU combination summed
/// over layers with equal importance.
pub fn detection_loss(
    tape: &mut Tape,
    layers: &[LayerPrediction],
    gt: &BoxSet,
    w: &LossWeights,
    mode: ClsMode,
    classes: usize,
) -> Result<TensorId> {
    let assignments = match_layers(tape, layers, gt, w, mode, classes)?;
    detection_loss_with_assignments(tape, layers, &assignments, gt, w, mode, classes)
}

/// Token-matching distillation: the mean L2 distance between student and
/// teacher tokens over the patch set and the detection set, scaled by
/// `lambda`. Teacher tokens are plain data, never on the tape.
pub fn distillation_loss(
    tape: &mut Tape,
    patch_student: TensorId,
    det_student: TensorId,
    patch_teacher: &[f64],
    det_teacher: &[f64],
    lambda: f64,
    squared: bool,
) -> Result<TensorId> {
    let term = |tape: &mut Tape, s: TensorId, t: &[f64], what: &str| -> Result<TensorId> {
        let shape = tape.shape(s).to_vec();
        if t.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Contract(format!(
                "student {what} tokens {:?} vs teacher length {} ({} values): incompatible configurations",
                shape,
                t.len() / shape.last().copied().unwrap_or(1),
                t.len()
            )));
        }
        let t_c = tape.constant(t.to_vec(), &shape)?;
        let diff = tape.sub(s, t_c)?;
        let sq = tape.mul(diff, diff)?;
        let sums = tape.sum_axis(sq, shape.len() - 1)?;
        let per_token = if squared { sums } else { tape.sqrt(sums) };
        Ok(tape.mean_all(per_token))
    };
    let p_term = term(tape, patch_student, patch_teacher, "patch")?;
    let d_term = term(tape, det_student, det_teacher, "det")?;
    let sum = tape.add(p_term, d_term)?;
    Ok(tape.scale(sum, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    /// Exhaustive injective assignment minimum, the factorial oracle.
    fn brute_force_min(cost: &[f64], n_gt: usize, n_pred: usize) -> f64 {
        fn rec(cost: &[f64], n_pred: usize, row: usize, n_gt: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n_gt {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for j in 0..n_pred {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n_pred, row + 1, n_gt, used, acc + cost[row * n_pred + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; n_pred];
        rec(cost, n_pred, 0, n_gt, &mut used, 0.0, &mut best);
        best
    }

    #[test]
    fn giou_identical_boxes() {
        let b = [0.2, 0.2, 0.6, 0.8];
        assert!((giou_corner(&b, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn giou_corner_touching_case() {
        // hand evaluation: IoU 0, union 2, enclosing box 4 -> GIoU -0.5
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [1.0, 1.0, 2.0, 2.0];
        let g = giou_corner(&a, &b);
        assert!((g + 0.5).abs() < 1e-6, "expected -0.5, got {g}");
        assert!((1.0 - g - 1.5).abs() < 1e-6);
    }

    #[test]
    fn giou_is_symmetric_and_bounded() {
        let mut r = rng(1);
        for _ in 0..1000 {
            let mut mk = || -> [f64; 4] {
                let x1: f64 = r.gen_range(0.0..0.8);
                let y1: f64 = r.gen_range(0.0..0.8);
                [x1, y1, x1 + r.gen_range(0.01..0.2), y1 + r.gen_range(0.01..0.2)]
            };
            let (a, b) = (mk(), mk());
            let g1 = giou_corner(&a, &b);
            let g2 = giou_corner(&b, &a);
            assert!((g1 - g2).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&g1));
            let loss = 1.0 - g1;
            assert!((0.0..=2.0).contains(&loss));
        }
    }

    #[test]
    fn giou_loss_monotone_under_separation() {
        // congruent boxes slid apart along x never decrease the loss
        let base = [0.0, 0.0, 0.2, 0.2];
        let mut prev = 0.0;
        for step in 0..20 {
            let dx = step as f64 * 0.05;
            let moved = [base[0] + dx, base[1], base[2] + dx, base[3]];
            let loss = 1.0 - giou_corner(&base, &moved);
            assert!(loss >= prev - 1e-12, "step {step}: {loss} < {prev}");
            prev = loss;
        }
    }

    #[test]
    fn giou_handles_degenerate_zero_area() {
        let a = [0.5, 0.5, 0.5, 0.5];
        let g = giou_corner(&a, &a);
        assert!(g.is_finite());
    }

    #[test]
    fn tape_giou_matches_scalar_oracle() {
        let mut r = rng(2);
        for _ in 0..100 {
            let pred = [
                r.gen_range(0.2..0.8),
                r.gen_range(0.2..0.8),
                r.gen_range(0.05..0.3),
                r.gen_range(0.05..0.3),
            ];
            let gt_c = [
                r.gen_range(0.0..0.4),
                r.gen_range(0.0..0.4),
                r.gen_range(0.5..0.9),
                r.gen_range(0.5..0.9),
            ];
            let mut t = Tape::new();
            let p = t.constant(pred.to_vec(), &[1, 4]).unwrap();
            let rows = giou_loss_rows(&mut t, p, &gt_c).unwrap();
            let expect = 1.0 - giou_corner(&cxcywh_to_corners(&pred), &gt_c);
            assert!((t.data(rows)[0] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_single_cell() {
        let m = hungarian_match(&[5.0], 1, 1).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!((m.total_cost - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_two_by_two() {
        let m = hungarian_match(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        let mut pairs = m.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert!((m.total_cost - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_rejects_overfull() {
        assert!(hungarian_match(&[1.0, 2.0], 2, 1).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut r = rng(3);
        for trial in 0..500 {
            let n_gt = r.gen_range(1..=7);
            let n_pred = r.gen_range(n_gt..=9);
            let cost: Vec<f64> = (0..n_gt * n_pred).map(|_| r.gen_range(-5.0..5.0)).collect();
            let m = hungarian_match(&cost, n_gt, n_pred).unwrap();
            let oracle = brute_force_min(&cost, n_gt, n_pred);
            assert!(
                (m.total_cost - oracle).abs() < 1e-9,
                "trial {trial}: jv {} vs brute {oracle}",
                m.total_cost
            );
            // injectivity
            let mut seen = vec![false; n_pred];
            for &(_, j) in &m.pairs {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn matching_cost_perfect_prediction() {
        let gt = BoxSet {
            boxes: vec![0.5, 0.5, 0.2, 0.2],
            labels: vec![1],
        };
        let probs = vec![0.0, 1.0, 0.0];
        let pred_boxes = vec![0.5, 0.5, 0.2, 0.2];
        let w = LossWeights::default();
        let cost = matching_cost(&probs, &pred_boxes, 1, 3, &gt, &w).unwrap();
        assert!((cost[0] + 1.0).abs() < 1e-9, "expected -1, got {}", cost[0]);
    }

    #[test]
    fn matching_cost_shape_and_scale_invariance() {
        let mut r = rng(4);
        let gt = BoxSet {
            boxes: vec![0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.1, 0.3],
            labels: vec![0, 2],
        };
        let n_pred = 5;
        let probs: Vec<f64> = (0..n_pred * 3).map(|_| r.gen_range(0.0..1.0)).collect();
        let boxes: Vec<f64> = (0..n_pred * 4).map(|_| r.gen_range(0.1..0.9)).collect();
        let w = LossWeights::default();
        let cost = matching_cost(&probs, &boxes, n_pred, 3, &gt, &w).unwrap();
        assert_eq!(cost.len(), 2 * n_pred);

        let t = 3.7;
        let w_scaled = LossWeights {
            cl: w.cl * t,
            l1: w.l1 * t,
            iou: w.iou * t,
            dis: w.dis,
        };
        let cost_scaled = matching_cost(&probs, &boxes, n_pred, 3, &gt, &w_scaled).unwrap();
        for (a, b) in cost.iter().zip(&cost_scaled) {
            assert!((a * t - b).abs() < 1e-9);
        }
        let m1 = hungarian_match(&cost, 2, n_pred).unwrap();
        let m2 = hungarian_match(&cost_scaled, 2, n_pred).unwrap();
        assert_eq!(m1.pairs, m2.pairs);
    }

    #[test]
    fn matching_cost_rejects_unknown_label() {
        let gt = BoxSet {
            boxes: vec![0.5, 0.5, 0.2, 0.2],
            labels: vec![7],
        };
        let w = LossWeights::default();
        assert!(matching_cost(&[0.5, 0.5, 0.5], &[0.5, 0.5, 0.2, 0.2], 1, 3, &gt, &w).is_err());
    }

    fn perfect_layer(tape: &mut Tape, gt: &BoxSet, classes: usize) -> LayerPrediction {
        let n = 4;
        let mut boxes = vec![0.5; n * 4];
        let mut logits = vec![0.0; n * (classes + 1)];
        for (i, _) in gt.labels.iter().enumerate() {
            boxes[i * 4..(i + 1) * 4].copy_from_slice(&gt.boxes[i * 4..(i + 1) * 4]);
            // strongly peaked logits on the true class
            for c in 0..=classes {
                logits[i * (classes + 1) + c] = if c == gt.labels[i] { 30.0 } else { 0.0 };
            }
        }
        for j in gt.len()..n {
            logits[j * (classes + 1) + classes] = 30.0; // background
        }
        let b = tape.constant(boxes, &[n, 4]).unwrap();
        let l = tape.constant(logits, &[n, classes + 1]).unwrap();
        LayerPrediction { boxes: b, logits: l }
    }

    #[test]
    fn perfect_prediction_leaves_only_classification_term() {
        let gt = BoxSet {
            boxes: vec![0.3, 0.3, 0.2, 0.2, 0.7, 0.6, 0.2, 0.4],
            labels: vec![0, 2],
        };
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let layer = perfect_layer(&mut tape, &gt, 3);
        let loss = detection_loss(&mut tape, &[layer], &gt, &w, ClsMode::CrossEntropy, 3).unwrap();
        // box terms vanish; CE of near-one-hot logits is tiny but nonzero
        assert!(tape.data(loss)[0] < 1e-8);
    }

    #[test]
    fn doubling_layers_doubles_loss() {
        let mut r = rng(5);
        let gt = BoxSet {
            boxes: vec![0.4, 0.4, 0.3, 0.2],
            labels: vec![1],
        };
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let boxes: Vec<f64> = (0..16 * 4).map(|_| r.gen_range(0.2..0.8)).collect();
        let logits: Vec<f64> = (0..16 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b = tape.constant(boxes, &[16, 4]).unwrap();
        let l = tape.constant(logits, &[16, 3]).unwrap();
        let layer = LayerPrediction { boxes: b, logits: l };
        let single = detection_loss(&mut tape, &[layer], &gt, &w, ClsMode::Focal, 3).unwrap();
        let double = detection_loss(&mut tape, &[layer, layer], &gt, &w, ClsMode::Focal, 3).unwrap();
        let (s, d) = (tape.data(single)[0], tape.data(double)[0]);
        assert!((d - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_gives_classification_only_loss() {
        let gt = BoxSet::default();
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let b = tape.constant(vec![0.5; 8 * 4], &[8, 4]).unwrap();
        let l = tape.constant(vec![0.3; 8 * 3], &[8, 3]).unwrap();
        let layer = LayerPrediction { boxes: b, logits: l };
        let loss = detection_loss(&mut tape, &[layer], &gt, &w, ClsMode::Focal, 3).unwrap();
        assert!(tape.data(loss)[0] > 0.0);
    }

    #[test]
    fn detection_loss_gradient_matches_fd_with_frozen_matching() {
        let mut r = rng(6);
        let gt = BoxSet {
            boxes: vec![0.35, 0.4, 0.25, 0.3, 0.7, 0.65, 0.2, 0.2],
            labels: vec![0, 2],
        };
        let w = LossWeights::default();
        let classes = 3;
        let box_data: Vec<f64> = (0..6 * 4).map(|_| r.gen_range(0.2..0.8)).collect();
        let logit_data: Vec<f64> = (0..6 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();

        let run = |bd: &[f64], ld: &[f64], track: bool| -> (Tape, TensorId, TensorId, TensorId) {
            let mut tape = Tape::new();
            let b = tape.leaf(bd.to_vec(), &[6, 4], track).unwrap();
            let l = tape.leaf(ld.to_vec(), &[6, 3], track).unwrap();
            let layer = LayerPrediction { boxes: b, logits: l };
            let assigns = match_layers(&tape, &[layer], &gt, &w, ClsMode::Focal, classes).unwrap();
            let loss =
                detection_loss_with_assignments(&mut tape, &[layer], &assigns, &gt, &w, ClsMode::Focal, classes)
                    .unwrap();
            (tape, loss, b, l)
        };
        // analytic: matching computed once on the unperturbed values
        let (mut tape, loss, b, l) = run(&box_data, &logit_data, true);
        tape.backward(loss).unwrap();
        let gb = tape.grad(b).unwrap().to_vec();
        let gl = tape.grad(l).unwrap().to_vec();

        let base_assign = {
            let (tape, _, _, _) = run(&box_data, &logit_data, false);
            drop(tape);
        };
        let _ = base_assign;

        let h = 1e-5;
        // frozen-assignment FD: reuse assignments from the base run
        let frozen = {
            let mut tape = Tape::new();
            let bb = tape.constant(box_data.clone(), &[6, 4]).unwrap();
            let ll = tape.constant(logit_data.clone(), &[6, 3]).unwrap();
            let layer = LayerPrediction { boxes: bb, logits: ll };
            match_layers(&tape, &[layer], &gt, &w, ClsMode::Focal, classes).unwrap()
        };
        let eval = |bd: &[f64], ld: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let bb = tape.constant(bd.to_vec(), &[6, 4]).unwrap();
            let ll = tape.constant(ld.to_vec(), &[6, 3]).unwrap();
            let layer = LayerPrediction { boxes: bb, logits: ll };
            let loss = detection_loss_with_assignments(
                &mut tape,
                &[layer],
                &frozen,
                &gt,
                &w,
                ClsMode::Focal,
                classes,
            )
            .unwrap();
            tape.data(loss)[0]
        };
        for j in 0..box_data.len() {
            let mut plus = box_data.clone();
            plus[j] += h;
            let mut minus = box_data.clone();
            minus[j] -= h;
            let num = (eval(&plus, &logit_data) - eval(&minus, &logit_data)) / (2.0 * h);
            let denom = gb[j].abs().max(num.abs()).max(1e-6);
            assert!((gb[j] - num).abs() / denom < 1e-4, "box[{j}]: {} vs {num}", gb[j]);
        }
        for j in 0..logit_data.len() {
            let mut plus = logit_data.clone();
            plus[j] += h;
            let mut minus = logit_data.clone();
            minus[j] -= h;
            let num = (eval(&box_data, &plus) - eval(&box_data, &minus)) / (2.0 * h);
            let denom = gl[j].abs().max(num.abs()).max(1e-6);
            assert!((gl[j] - num).abs() / denom < 1e-4, "logit[{j}]: {} vs {num}", gl[j]);
        }
    }

    #[test]
    fn distillation_zero_when_student_equals_teacher() {
        let mut tape = Tape::new();
        let tokens: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let p = tape.constant(tokens.clone(), &[3, 4]).unwrap();
        let d = tape.constant(tokens.clone(), &[3, 4]).unwrap();
        let loss = distillation_loss(&mut tape, p, d, &tokens, &tokens, 4.0, false).unwrap();
        assert_eq!(tape.data(loss)[0], 0.0);
    }

    #[test]
    fn distillation_hand_computed_value() {
        // 1 patch + 1 det token, 4-dim, student zeros, teacher ones:
        // each norm is 2, so 4 * (2 + 2) = 16
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.0; 4], &[1, 4]).unwrap();
        let d = tape.constant(vec![0.0; 4], &[1, 4]).unwrap();
        let ones = vec![1.0; 4];
        let loss = distillation_loss(&mut tape, p, d, &ones, &ones, 4.0, false).unwrap();
        assert!((tape.data(loss)[0] - 16.0).abs() < 1e-9);
    }

    #[test]
    fn distillation_scales_linearly_in_lambda() {
        let mut r = rng(7);
        let s: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let p = tape.constant(s.clone(), &[2, 4]).unwrap();
        let d = tape.constant(s, &[2, 4]).unwrap();
        let l1 = distillation_loss(&mut tape, p, d, &t, &t, 1.0, false).unwrap();
        let l3 = distillation_loss(&mut tape, p, d, &t, &t, 3.0, false).unwrap();
        assert!((3.0 * tape.data(l1)[0] - tape.data(l3)[0]).abs() < 1e-12);
    }

    #[test]
    fn distillation_rejects_cardinality_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.0; 8], &[2, 4]).unwrap();
        let d = tape.constant(vec![0.0; 4], &[1, 4]).unwrap();
        let teacher = vec![0.0; 12];
        let err = distillation_loss(&mut tape, p, d, &teacher, &teacher, 4.0, false).unwrap_err();
        assert!(err.to_string().contains("incompatible"));
    }
}
