//! Dense-output decoding and class-wise greedy NMS.

use serde::{Deserialize, Serialize};

use super::RawPredictions;
use crate::boxes::{iou, Detection};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

fn by_score_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy per-category suppression: a detection is dropped when its IoU with
/// an already kept, higher-scoring detection of the same category exceeds
/// `iou_thr`. Output is sorted by descending score.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| by_score_desc(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.category == d.category && iou(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

/// Turns raw head outputs into scored boxes clipped to the image.
pub fn decode<T: Scalar>(
    raw: &RawPredictions<T>,
    image_size: (usize, usize),
    cfg: &DecodeConfig,
) -> Vec<Detection> {
    let k = raw.num_categories();
    let cells = raw.logits.shape()[1];
    let z = raw.logits.data();
    let o = raw.offsets.data();
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut cands = Vec::new();
    for c in 0..cells {
        let (mut best, mut cat) = (f64::NEG_INFINITY, 0);
        for j in 0..k {
            let v = z[j * cells + c].to_f64_lossy();
            if v > best {
                best = v;
                cat = j;
            }
        }
        let score = 1.0 / (1.0 + (-best).exp());
        if !(score >= cfg.score_threshold) {
            continue;
        }
        let (cx, cy) = raw.cell_center(c);
        let side = |s: usize| o[s * cells + c].to_f64_lossy();
        let bbox = [
            (cx - side(0)).clamp(0.0, w),
            (cy - side(1)).clamp(0.0, h),
            (cx + side(2)).clamp(0.0, w),
            (cy + side(3)).clamp(0.0, h),
        ];
        if bbox[0] < bbox[2] && bbox[1] < bbox[3] {
            cands.push(Detection {
                bbox,
                category: cat,
                score,
            });
        }
    }
    let mut out = nms(&cands, cfg.nms_iou);
    out.truncate(cfg.max_detections);
    out
}
