//! Anchor matching and the multibox training losses.
//!
//! Localization is the smooth-L1 distance between predicted offsets and
//! the encoded ground truth over matched anchors; classification is the
//! softmax cross-entropy over matched anchors plus a mined set of hard
//! background anchors. Both are normalized by the matched count N and
//! defined as 0 when N = 0.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, smooth_l1, smooth_l1_grad, BoxCoder, BoxCorner, OffsetVector};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NEG_POS_RATIO: f64 = 3.0;
pub const DEFAULT_WEIGHT_DECAY: f64 = 4e-4;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: Vec<BoxCorner>,
    /// Class ids in `1..=num_classes`; 0 is reserved for background.
    pub class_ids: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BoxCorner>, class_ids: Vec<usize>, num_classes: usize) -> Result<Self> {
        let gt = GroundTruth { boxes, class_ids };
        gt.validate(num_classes)?;
        Ok(gt)
    }

    pub fn empty() -> Self {
        GroundTruth::default()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} boxes but {} class ids",
                self.boxes.len(),
                self.class_ids.len()
            )));
        }
        for (b, &c) in self.boxes.iter().zip(&self.class_ids) {
            if c == 0 || c > num_classes {
                return Err(Error::InvalidInput(format!(
                    "class id {c} outside 1..={num_classes}"
                )));
            }
            if !b.is_valid() || b.xmax <= b.xmin || b.ymax <= b.ymin {
                return Err(Error::DegenerateBox(format!("ground truth {b:?}")));
            }
        }
        Ok(())
    }

    /// Indices of the boxes in canonical (coordinate, class) order.
    fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            let ka = self.boxes[a].as_array();
            let kb = self.boxes[b].as_array();
            ka.iter()
                .zip(&kb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
                .then(self.class_ids[a].cmp(&self.class_ids[b]))
                .then(a.cmp(&b))
        });
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Background,
    Matched(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignments: Vec<Assignment>,
    pub num_matched: usize,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignments.iter().enumerate().filter_map(|(i, a)| match a {
            Assignment::Matched(j) => Some((i, *j)),
            Assignment::Background => None,
        })
    }

    pub fn negative_candidates(&self) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Assignment::Background)
            .map(|(i, _)| i)
    }
}

/// Matches anchors to ground truth.
///
/// Every ground-truth box first claims its best anchor (greedy bipartite on
/// descending IoU, ties to the lowest anchor index), then each remaining
/// anchor is assigned to its best box if that IoU reaches `iou_threshold`.
/// Boxes are visited in canonical order, so the result does not depend on
/// the order of `gt` beyond the returned indices.
pub fn match_anchors(anchors: &AnchorSet, gt: &GroundTruth, iou_threshold: f64) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("empty anchor set".into()));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "iou threshold {iou_threshold} not in (0,1)"
        )));
    }
    let n_anchors = anchors.len();
    let mut assignments = vec![Assignment::Background; n_anchors];
    if gt.is_empty() {
        return Ok(MatchResult {
            assignments,
            num_matched: 0,
        });
    }

    let order = gt.canonical_order();
    // overlaps[k][i]: IoU of canonical gt k with anchor i
    let overlaps: Vec<Vec<f64>> = order
        .iter()
        .map(|&j| anchors.corners().iter().map(|a| iou(a, &gt.boxes[j])).collect())
        .collect();

    let mut gt_done = vec![false; order.len()];
    let mut anchor_used = vec![false; n_anchors];
    for _ in 0..order.len().min(n_anchors) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (k, row) in overlaps.iter().enumerate() {
            if gt_done[k] {
                continue;
            }
            for (i, &v) in row.iter().enumerate() {
                if anchor_used[i] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bv, bk, bi)) => v > bv || (v == bv && (i < bi || (i == bi && k < bk))),
                };
                if better {
                    best = Some((v, k, i));
                }
            }
        }
        let (_, k, i) = best.expect("unmatched gt and free anchor exist");
        gt_done[k] = true;
        anchor_used[i] = true;
        assignments[i] = Assignment::Matched(order[k]);
    }

    for i in 0..n_anchors {
        if anchor_used[i] {
            continue;
        }
        let mut best_k = 0;
        for k in 1..order.len() {
            if overlaps[k][i] > overlaps[best_k][i] {
                best_k = k;
            }
        }
        if overlaps[best_k][i] >= iou_threshold {
            assignments[i] = Assignment::Matched(order[best_k]);
        }
    }

    let num_matched = assignments
        .iter()
        .filter(|a| matches!(a, Assignment::Matched(_)))
        .count();
    Ok(MatchResult {
        assignments,
        num_matched,
    })
}

/// Per-anchor network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub loc: Vec<OffsetVector>,
    /// Row-major `[anchors, num_classes + 1]`, column 0 is background.
    pub logits: Vec<f64>,
    pub num_logits: usize,
}

impl Predictions {
    pub fn new(loc: Vec<OffsetVector>, logits: Vec<f64>, num_logits: usize) -> Result<Self> {
        if num_logits < 2 || logits.len() != loc.len() * num_logits {
            return Err(Error::ShapeError(format!(
                "{} loc rows, {} logits, {} per row",
                loc.len(),
                logits.len(),
                num_logits
            )));
        }
        Ok(Predictions {
            loc,
            logits,
            num_logits,
        })
    }

    pub fn zeros(anchors: usize, num_logits: usize) -> Self {
        Predictions {
            loc: vec![OffsetVector::default(); anchors],
            logits: vec![0.0; anchors * num_logits],
            num_logits,
        }
    }

    pub fn len(&self) -> usize {
        self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc.is_empty()
    }

    pub fn logit_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_logits..(i + 1) * self.num_logits]
    }

    pub fn num_classes(&self) -> usize {
        self.num_logits - 1
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.logits.iter().all(|v| v.is_finite())
            && self
                .loc
                .iter()
                .all(|o| o.as_array().iter().all(|v| v.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::NonFiniteResult("non-finite prediction".into()))
        }
    }
}

/// Gradient of a loss with respect to [`Predictions`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrads {
    pub loc: Vec<[f64; 4]>,
    pub logits: Vec<f64>,
}

impl PredictionGrads {
    pub fn zeros(anchors: usize, num_logits: usize) -> Self {
        PredictionGrads {
            loc: vec![[0.0; 4]; anchors],
            logits: vec![0.0; anchors * num_logits],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.loc.iter_mut().flatten().for_each(|v| *v *= s);
        self.logits.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification_loss: f64,
    pub localization_loss: f64,
    pub regularization_loss: f64,
    pub total_loss: f64,
    pub learning_rate: f64,
}

pub fn softmax_scores(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&c| (c - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&c| (c - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&c| c - lse).collect()
}

fn check_shapes(match_: &MatchResult, preds: &Predictions, gt: &GroundTruth) -> Result<()> {
    if match_.assignments.len() != preds.len() {
        return Err(Error::ShapeError(format!(
            "{} assignments for {} predictions",
            match_.assignments.len(),
            preds.len()
        )));
    }
    if let Some((_, j)) = match_.positives().find(|(_, j)| *j >= gt.len()) {
        return Err(Error::ShapeError(format!(
            "assignment to gt {j} but only {} boxes",
            gt.len()
        )));
    }
    if let Some(&c) = gt.class_ids.iter().find(|&&c| c == 0 || c >= preds.num_logits) {
        return Err(Error::ShapeError(format!(
            "class id {c} outside 1..{}",
            preds.num_logits
        )));
    }
    Ok(())
}

fn localization_terms(
    match_: &MatchResult,
    preds: &Predictions,
    gt: &GroundTruth,
    anchors: &AnchorSet,
    coder: &BoxCoder,
    mut grads: Option<&mut PredictionGrads>,
) -> Result<f64> {
    check_shapes(match_, preds, gt)?;
    if anchors.len() != preds.len() {
        return Err(Error::ShapeError(format!(
            "{} anchors for {} predictions",
            anchors.len(),
            preds.len()
        )));
    }
    preds.check_finite()?;
    if match_.num_matched == 0 {
        return Ok(0.0);
    }
    let n = match_.num_matched as f64;
    let mut sum = 0.0;
    for (i, j) in match_.positives() {
        let target = coder.encode(gt.boxes[j].to_center()?, anchors.get(i))?;
        let pred = preds.loc[i].as_array();
        for (m, (p, t)) in pred.iter().zip(target.as_array()).enumerate() {
            let r = p - t;
            sum += smooth_l1(r);
            if let Some(g) = grads.as_deref_mut() {
                g.loc[i][m] += smooth_l1_grad(r) / n;
            }
        }
    }
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteResult("localization loss".into()));
    }
    Ok(loss)
}

pub fn localization_loss(
    match_: &MatchResult,
    preds: &Predictions,
    gt: &GroundTruth,
    anchors: &AnchorSet,
) -> Result<f64> {
    localization_terms(match_, preds, gt, anchors, &BoxCoder::default(), None)
}

/// Unmatched anchors chosen as negatives: the `⌊ratio·N⌋` with the largest
/// background negative log-likelihood, ties to the lower index.
pub fn mine_hard_negatives(match_: &MatchResult, preds: &Predictions, neg_pos_ratio: f64) -> Vec<usize> {
    let k = (neg_pos_ratio * match_.num_matched as f64).floor() as usize;
    if k == 0 {
        return Vec::new();
    }
    let mut cands: Vec<(f64, usize)> = match_
        .negative_candidates()
        .map(|i| (-log_softmax(preds.logit_row(i))[0], i))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cands.truncate(k);
    cands.into_iter().map(|(_, i)| i).collect()
}

fn classification_terms(
    match_: &MatchResult,
    preds: &Predictions,
    gt: &GroundTruth,
    neg_pos_ratio: f64,
    mut grads: Option<&mut PredictionGrads>,
) -> Result<f64> {
    check_shapes(match_, preds, gt)?;
    if !(neg_pos_ratio > 0.0) {
        return Err(Error::InvalidInput(format!(
            "neg:pos ratio {neg_pos_ratio} must be positive"
        )));
    }
    preds.check_finite()?;
    if match_.num_matched == 0 {
        return Ok(0.0);
    }
    let n = match_.num_matched as f64;
    let k = preds.num_logits;
    let mut sum = 0.0;
    let mut add_term = |i: usize, class: usize, sum: &mut f64| {
        let logp = log_softmax(preds.logit_row(i));
        *sum -= logp[class];
        if let Some(g) = grads.as_deref_mut() {
            let row = &mut g.logits[i * k..(i + 1) * k];
            for (c, (gv, lp)) in row.iter_mut().zip(&logp).enumerate() {
                let onehot = if c == class { 1.0 } else { 0.0 };
                *gv += (lp.exp() - onehot) / n;
            }
        }
    };
    for (i, j) in match_.positives() {
        add_term(i, gt.class_ids[j], &mut sum);
    }
    for i in mine_hard_negatives(match_, preds, neg_pos_ratio) {
        add_term(i, 0, &mut sum);
    }
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteResult("classification loss".into()));
    }
    Ok(loss)
}

pub fn classification_loss(
    match_: &MatchResult,
    preds: &Predictions,
    gt: &GroundTruth,
    neg_pos_ratio: f64,
) -> Result<f64> {
    classification_terms(match_, preds, gt, neg_pos_ratio, None)
}

/// `weight_decay · Σ w²/2` over the given weight tensors (callers pass
/// weights only, never biases).
pub fn regularization_loss<T: Copy + Into<f64>>(weights: &[&[T]], weight_decay: f64) -> f64 {
    if weight_decay == 0.0 {
        return 0.0;
    }
    let sq: f64 = weights
        .iter()
        .flat_map(|t| t.iter())
        .map(|&w| {
            let w: f64 = w.into();
            w * w
        })
        .sum();
    weight_decay * sq / 2.0
}

pub fn total_loss(cls: f64, loc: f64, reg: f64, learning_rate: f64) -> Result<LossBreakdown> {
    for (name, v) in [("classification", cls), ("localization", loc), ("regularization", reg)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFiniteResult(format!("{name} loss {v}")));
        }
    }
    Ok(LossBreakdown {
        classification_loss: cls,
        localization_loss: loc,
        regularization_loss: reg,
        total_loss: cls + loc + reg,
        learning_rate,
    })
}

/// Matching and loss settings used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiboxConfig {
    pub iou_threshold: f64,
    pub neg_pos_ratio: f64,
    pub coder: BoxCoder,
}

impl Default for MultiboxConfig {
    fn default() -> Self {
        MultiboxConfig {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            neg_pos_ratio: DEFAULT_NEG_POS_RATIO,
            coder: BoxCoder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    pub classification: f64,
    pub localization: f64,
    pub num_matched: usize,
    pub grads: PredictionGrads,
}

/// Matches, evaluates both data losses for one image, and returns their
/// gradient with respect to the predictions.
pub fn multibox_loss(
    anchors: &AnchorSet,
    preds: &Predictions,
    gt: &GroundTruth,
    cfg: &MultiboxConfig,
) -> Result<ImageLoss> {
    let m = match_anchors(anchors, gt, cfg.iou_threshold)?;
    let mut grads = PredictionGrads::zeros(preds.len(), preds.num_logits);
    let localization = localization_terms(&m, preds, gt, anchors, &cfg.coder, Some(&mut grads))?;
    let classification = classification_terms(&m, preds, gt, cfg.neg_pos_ratio, Some(&mut grads))?;
    Ok(ImageLoss {
        classification,
        localization,
        num_matched: m.num_matched,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{encode_box, BoxCenter};

    fn anchors(boxes: &[BoxCenter]) -> AnchorSet {
        AnchorSet::from_boxes(boxes.to_vec()).unwrap()
    }

    #[test]
    fn self_match() {
        let a = anchors(&[BoxCenter::new(0.5, 0.5, 0.4, 0.4)]);
        let gt = GroundTruth::new(vec![BoxCorner::new(0.3, 0.3, 0.7, 0.7)], vec![1], 26).unwrap();
        let m = match_anchors(&a, &gt, 0.5).unwrap();
        assert_eq!(m.assignments, vec![Assignment::Matched(0)]);
        assert_eq!(m.num_matched, 1);
    }

    #[test]
    fn forced_match_below_threshold() {
        let a = anchors(&[BoxCenter::new(0.5, 0.5, 0.2, 0.2), BoxCenter::new(0.1, 0.1, 0.1, 0.1)]);
        let g = BoxCorner::new(0.45, 0.45, 0.75, 0.75);
        let best = iou(&a.corners()[0], &g);
        assert!(best < 0.5, "{best}");
        let gt = GroundTruth::new(vec![g], vec![3], 26).unwrap();
        let m = match_anchors(&a, &gt, 0.5).unwrap();
        assert_eq!(m.num_matched, 1);
        assert_eq!(m.assignments[0], Assignment::Matched(0));
    }

    #[test]
    fn empty_gt_all_background() {
        let a = anchors(&[BoxCenter::new(0.5, 0.5, 0.2, 0.2); 3]);
        let m = match_anchors(&a, &GroundTruth::empty(), 0.5).unwrap();
        assert_eq!(m.num_matched, 0);
        assert!(m.assignments.iter().all(|x| *x == Assignment::Background));
    }

    #[test]
    fn empty_anchor_set_rejected() {
        let a = AnchorSet::from_boxes(vec![]).unwrap();
        assert!(matches!(
            match_anchors(&a, &GroundTruth::empty(), 0.5),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn every_gt_gets_a_distinct_anchor() {
        // both gts prefer anchor 0; the weaker one falls back to anchor 1
        let a = anchors(&[BoxCenter::new(0.5, 0.5, 0.4, 0.4), BoxCenter::new(0.9, 0.9, 0.1, 0.1)]);
        let gt = GroundTruth::new(
            vec![BoxCorner::new(0.3, 0.3, 0.7, 0.7), BoxCorner::new(0.35, 0.35, 0.7, 0.7)],
            vec![1, 2],
            26,
        )
        .unwrap();
        let m = match_anchors(&a, &gt, 0.5).unwrap();
        assert_eq!(m.assignments, vec![Assignment::Matched(0), Assignment::Matched(1)]);
    }

    #[test]
    fn localization_examples() {
        let d = BoxCenter::new(0.5, 0.5, 0.4, 0.4);
        let a = anchors(&[d]);
        let gbox = BoxCorner::new(0.35, 0.3, 0.75, 0.7);
        let gt = GroundTruth::new(vec![gbox], vec![1], 2).unwrap();
        let m = match_anchors(&a, &gt, 0.5).unwrap();
        let target = encode_box(gbox.to_center().unwrap(), d).unwrap();
        let mut p = Predictions::zeros(1, 3);
        p.loc[0] = target;
        assert_eq!(localization_loss(&m, &p, &gt, &a).unwrap(), 0.0);
        p.loc[0].t_cx += 0.5;
        assert!((localization_loss(&m, &p, &gt, &a).unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn nan_prediction_is_rejected() {
        let a = anchors(&[BoxCenter::new(0.5, 0.5, 0.4, 0.4)]);
        let gt = GroundTruth::new(vec![BoxCorner::new(0.3, 0.3, 0.7, 0.7)], vec![1], 2).unwrap();
        let m = match_anchors(&a, &gt, 0.5).unwrap();
        let mut p = Predictions::zeros(1, 3);
        p.logits[1] = f64::NAN;
        assert!(matches!(
            classification_loss(&m, &p, &gt, 3.0),
            Err(Error::NonFiniteResult(_))
        ));
        assert!(matches!(
            localization_loss(&m, &p, &gt, &a),
            Err(Error::NonFiniteResult(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_scores(&[0.7; 27]);
        assert!(s.iter().all(|p| (p - 1.0 / 27.0).abs() < 1e-15));
        let s = softmax_scores(&[1000.0, 1000.5]);
        assert!((s[0] - 0.3775).abs() < 1e-4 && (s[1] - 0.6225).abs() < 1e-4);
        let c = [0.3, -1.2, 4.0, 2.5];
        let shifted: Vec<f64> = c.iter().map(|v| v + 123.0).collect();
        for (a, b) in softmax_scores(&c).iter().zip(softmax_scores(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((softmax_scores(&c).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classification_uniform_single_positive() {
        let a = anchors(&[BoxCenter::new(0.5, 0.5, 0.4, 0.4)]);
        let gt = GroundTruth::new(vec![BoxCorner::new(0.3, 0.3, 0.7, 0.7)], vec![5], 26).unwrap();
        let m = match_anchors(&a, &gt, 0.5).unwrap();
        let p = Predictions::zeros(1, 27);
        let l = classification_loss(&m, &p, &gt, 3.0).unwrap();
        assert!((l - 27f64.ln()).abs() < 1e-12);
        assert!((l - 3.29584).abs() < 1e-5);
    }

    #[test]
    fn classification_confident_correct() {
        let a = anchors(&[BoxCenter::new(0.5, 0.5, 0.4, 0.4)]);
        let gt = GroundTruth::new(vec![BoxCorner::new(0.3, 0.3, 0.7, 0.7)], vec![2], 3).unwrap();
        let m = match_anchors(&a, &gt, 0.5).unwrap();
        let mut p = Predictions::zeros(1, 4);
        p.logits[2] = 30.0;
        assert!(classification_loss(&m, &p, &gt, 3.0).unwrap() < 1e-6);
    }

    #[test]
    fn regularization_examples() {
        assert_eq!(regularization_loss::<f64>(&[&[3.0, -4.0]], 0.0), 0.0);
        assert!((regularization_loss::<f64>(&[&[3.0, -4.0]], 0.1) - 1.25).abs() < 1e-12);
        let w = [0.3f64, -0.7, 1.1];
        let w2: Vec<f64> = w.iter().map(|v| v * 2.0).collect();
        let a = regularization_loss::<f64>(&[&w], 0.01);
        let b = regularization_loss::<f64>(&[&w2], 0.01);
        assert!((b - 4.0 * a).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let b = total_loss(0.12946561, 0.01821224, 0.1009706, 0.07352352).unwrap();
        assert!((b.total_loss - 0.24864845).abs() < 1e-7);
        let b = total_loss(0.05087668, 0.014473952, 0.10147699, 0.073662736).unwrap();
        assert!((b.total_loss - 0.16682762).abs() < 1e-7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.1).unwrap().total_loss, 0.0);
        assert!(total_loss(-1.0, 0.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let a = anchors(&[
            BoxCenter::new(0.5, 0.5, 0.4, 0.4),
            BoxCenter::new(0.2, 0.2, 0.3, 0.3),
            BoxCenter::new(0.8, 0.3, 0.3, 0.5),
            BoxCenter::new(0.6, 0.8, 0.2, 0.2),
        ]);
        let gt = GroundTruth::new(vec![BoxCorner::new(0.3, 0.25, 0.72, 0.7)], vec![2], 3).unwrap();
        let mut p = Predictions::zeros(4, 4);
        for (k, v) in p.logits.iter_mut().enumerate() {
            *v = ((k * 7919) % 13) as f64 / 5.0 - 1.0;
        }
        p.loc[0] = OffsetVector::new(0.1, -0.2, 0.05, 0.3);
        let cfg = MultiboxConfig::default();
        let base = multibox_loss(&a, &p, &gt, &cfg).unwrap();
        let f = |p: &Predictions| {
            let l = multibox_loss(&a, p, &gt, &cfg).unwrap();
            l.classification + l.localization
        };
        let eps = 1e-6;
        for k in 0..p.logits.len() {
            let mut hi = p.clone();
            hi.logits[k] += eps;
            let mut lo = p.clone();
            lo.logits[k] -= eps;
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((fd - base.grads.logits[k]).abs() < 1e-6, "logit {k}: {fd} vs {}", base.grads.logits[k]);
        }
        for m in 0..4 {
            let mut hi = p.clone();
            let mut arr = hi.loc[0].as_array();
            arr[m] += eps;
            hi.loc[0] = OffsetVector::from_array(arr);
            let mut lo = p.clone();
            let mut arr = lo.loc[0].as_array();
            arr[m] -= eps;
            lo.loc[0] = OffsetVector::from_array(arr);
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((fd - base.grads.loc[0][m]).abs() < 1e-6);
        }
    }
}
