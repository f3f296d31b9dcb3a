//! Inference post-processing, evaluation, the real-time loop and training logs.

mod eval;
mod log_format;
mod realtime;

pub use eval::{
    aggregate_rates, evaluate_confidence, Detector, EvalReport, ModelDetector, ValidationItem,
};
pub use log_format::{format_log_value, format_training_log, parse_training_log, ParsedLogEvent};
pub use realtime::{run_realtime, FrameDetections, NamedDetection};

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCoder, BoxCorner};
use crate::loss::{softmax_scores, Predictions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxCorner,
    /// 1-based class id.
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub coder: BoxCoder,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_threshold: 0.5,
            nms_iou: 0.6,
            max_detections: 100,
            coder: BoxCoder::default(),
        }
    }
}

/// Greedy non-maximum suppression. Returns kept indices in selection order.
pub fn nms(boxes: &[BoxCorner], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("NMS threshold {iou_threshold} outside (0,1]")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn postprocess(preds: &Predictions, anchors: &AnchorSet, cfg: &PostprocessConfig) -> Result<Vec<Detection>> {
    if preds.len() != anchors.len() {
        return Err(Error::ShapeError(format!(
            "{} predictions for {} anchors",
            preds.len(),
            anchors.len()
        )));
    }
    let probs: Vec<Vec<f64>> = (0..preds.len()).map(|i| softmax_scores(preds.logit_row(i))).collect();
    let mut decoded: Vec<Option<BoxCorner>> = vec![None; preds.len()];
    let mut out = Vec::new();
    for class in 1..preds.num_logits {
        let mut cand = Vec::new();
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, p) in probs.iter().enumerate() {
            if p[class] < cfg.score_threshold {
                continue;
            }
            let b = match decoded[i] {
                Some(b) => b,
                None => {
                    let b = cfg.coder.decode_clipped(preds.loc[i], anchors.get(i))?;
                    decoded[i] = Some(b);
                    b
                }
            };
            cand.push(i);
            boxes.push(b);
            scores.push(p[class]);
        }
        for k in nms(&boxes, &scores, cfg.nms_iou, cfg.max_detections)? {
            if boxes[k].is_valid() {
                out.push(Detection {
                    bbox: boxes[k],
                    class_id: class,
                    score: scores[k],
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    Ok(out)
}
