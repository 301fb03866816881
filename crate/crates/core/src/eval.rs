//! COCO-style average precision and zero-shot retention audits.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use crate::boxes::iou;
use crate::boxes::{BBox, Detection};
use crate::data::Sample;
use crate::detector::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{Adapter, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::RESIDUAL_KEY;

/// 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetMatch {
    pub score: f64,
    pub category: usize,
    pub tp: bool,
    pub gt: Option<usize>,
}

/// Detections of one image in descending score order with their flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<DetMatch>,
    pub num_gt: usize,
}

/// Descending score; ties are broken on the box and category so the order
/// never depends on the input order.
fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.category.cmp(&b.category))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Greedy per-category matching: each detection, in score order, takes the
/// unmatched gt of its category with the highest IoU ≥ `iou_thr`, lower gt
/// index on ties.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thr: f64) -> MatchResult {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));
    let mut taken = vec![false; gts.len()];
    let matches = sorted
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.category != d.category {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            DetMatch {
                score: d.score,
                category: d.category,
                tp: best.is_some(),
                gt: best.map(|(j, _)| j),
            }
        })
        .collect();
    MatchResult {
        matches,
        num_gt: gts.len(),
    }
}

/// Cumulative precision and recall of `flags` (descending score order).
pub fn precision_recall(flags: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    (precision, recall)
}

/// Right-to-left running maximum of `precision`.
pub fn precision_envelope(precision: &[f64]) -> Vec<f64> {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

/// 101-point interpolated AP; `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let (precision, recall) = precision_recall(flags, num_gt);
    let env = precision_envelope(&precision);
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&x| x < r);
        if i < env.len() {
            sum += env[i];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApReport {
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    /// Categories present in the ground truth only.
    pub per_category: BTreeMap<String, CategoryAp>,
    pub num_detections: usize,
    pub num_gt: usize,
    pub images: usize,
}

/// One evaluated image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// Flags of one category across the dataset at one threshold, in global
/// descending score order (ties: earlier image first, then per-image rank).
pub fn category_flags(matched: &[MatchResult], category: usize) -> Vec<bool> {
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, m) in matched.iter().enumerate() {
        for (rank, d) in m.matches.iter().enumerate().filter(|(_, d)| d.category == category) {
            all.push((d.score, img, rank, d.tp));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().map(|t| t.3).collect()
}

pub fn evaluate_results(results: &[ImageResult], vocab: &[String]) -> Result<ApReport> {
    if results.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let thresholds = iou_thresholds();
    let matched: Vec<Vec<MatchResult>> = thresholds
        .iter()
        .map(|&t| results.iter().map(|r| match_detections(&r.detections, &r.gts, t)).collect())
        .collect();
    let mut report = ApReport {
        images: results.len(),
        num_detections: results.iter().map(|r| r.detections.len()).sum(),
        num_gt: results.iter().map(|r| r.gts.len()).sum(),
        ..ApReport::default()
    };
    for (c, name) in vocab.iter().enumerate() {
        let num_gt = results.iter().flat_map(|r| &r.gts).filter(|g| g.category == c).count();
        if num_gt == 0 {
            continue;
        }
        let aps: Vec<f64> = matched
            .iter()
            .map(|m| average_precision(&category_flags(m, c), num_gt).unwrap_or(0.0))
            .collect();
        report.per_category.insert(
            name.clone(),
            CategoryAp {
                ap50: aps[0],
                ap75: aps[5],
                ap: aps.iter().sum::<f64>() / aps.len() as f64,
                num_gt,
                num_detections: results.iter().flat_map(|r| &r.detections).filter(|d| d.category == c).count(),
            },
        );
    }
    let n = report.per_category.len();
    if n > 0 {
        let mean = |f: fn(&CategoryAp) -> f64| report.per_category.values().map(f).sum::<f64>() / n as f64;
        report.ap50 = mean(|c| c.ap50);
        report.ap75 = mean(|c| c.ap75);
        report.ap = mean(|c| c.ap);
    }
    Ok(report)
}

pub fn gt_boxes(sample: &Sample, vocab: &[String]) -> Result<Vec<GtBox>> {
    let cats = sample.gt.category_indices(vocab)?;
    Ok(sample
        .gt
        .boxes
        .iter()
        .zip(cats)
        .map(|(&bbox, category)| GtBox { bbox, category })
        .collect())
}

/// Runs `model` on every sample and pairs the detections with the ground truth.
pub fn collect_results<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    cfg: &DecodeConfig,
    use_adapter: bool,
) -> Result<Vec<ImageResult>> {
    samples
        .iter()
        .map(|s| {
            Ok(ImageResult {
                detections: model.detect(&s.image, cfg, use_adapter)?,
                gts: gt_boxes(s, &model.vocab)?,
            })
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], cfg: &DecodeConfig) -> Result<ApReport> {
    let results = collect_results(model, samples, cfg, true)?;
    evaluate_results(&results, &model.vocab)
}

impl ApReport {
    /// Flat record with keys `ap50`, `per_category.<name>.ap50`, ….
    pub fn to_flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("ap50".into(), self.ap50);
        m.insert("ap75".into(), self.ap75);
        m.insert("ap".into(), self.ap);
        m.insert("images".into(), self.images as f64);
        m.insert("num_detections".into(), self.num_detections as f64);
        m.insert("num_gt".into(), self.num_gt as f64);
        for (name, c) in &self.per_category {
            let p = format!("per_category.{name}");
            m.insert(format!("{p}.ap50"), c.ap50);
            m.insert(format!("{p}.ap75"), c.ap75);
            m.insert(format!("{p}.ap"), c.ap);
            m.insert(format!("{p}.num_gt"), c.num_gt as f64);
            m.insert(format!("{p}.num_detections"), c.num_detections as f64);
        }
        m
    }

    pub fn from_flat(m: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("AP record lacks {k:?}")))
        };
        let mut r = ApReport {
            ap50: get("ap50")?,
            ap75: get("ap75")?,
            ap: get("ap")?,
            images: get("images")? as usize,
            num_detections: get("num_detections")? as usize,
            num_gt: get("num_gt")? as usize,
            per_category: BTreeMap::new(),
        };
        for key in m.keys() {
            let Some(rest) = key.strip_prefix("per_category.") else {
                if !["ap50", "ap75", "ap", "images", "num_detections", "num_gt"].contains(&key.as_str()) {
                    return Err(Error::Invalid(format!("unexpected AP record key {key:?}")));
                }
                continue;
            };
            let Some((name, _)) = rest.rsplit_once('.') else {
                return Err(Error::Invalid(format!("malformed AP record key {key:?}")));
            };
            if r.per_category.contains_key(name) {
                continue;
            }
            let p = format!("per_category.{name}");
            r.per_category.insert(
                name.to_string(),
                CategoryAp {
                    ap50: get(&format!("{p}.ap50"))?,
                    ap75: get(&format!("{p}.ap75"))?,
                    ap: get(&format!("{p}.ap"))?,
                    num_gt: get(&format!("{p}.num_gt"))? as usize,
                    num_detections: get(&format!("{p}.num_detections"))? as usize,
                },
            );
        }
        Ok(r)
    }

    pub fn headline(&self) -> [f64; 3] {
        [self.ap50, self.ap75, self.ap]
    }
}

impl Serialize for ApReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ApReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = BTreeMap::<String, f64>::deserialize(d)?;
        ApReport::from_flat(&m).map_err(serde::de::Error::custom)
    }
}

/// `adapted - reference` on the headline fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApDelta {
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
}

impl ApDelta {
    pub fn between(adapted: &ApReport, reference: &ApReport) -> Self {
        ApDelta {
            ap50: adapted.ap50 - reference.ap50,
            ap75: adapted.ap75 - reference.ap75,
            ap: adapted.ap - reference.ap,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.ap50 == 0.0 && self.ap75 == 0.0 && self.ap == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub zero_shot: ApReport,
    /// With the adapter and residuals applied.
    pub adapted: ApReport,
    /// With the adapter disabled and residuals removed.
    pub stripped: ApReport,
    pub adapted_delta: ApDelta,
    pub stripped_delta: ApDelta,
    /// Whether `stripped` equals `zero_shot` field for field.
    pub stripped_matches_zero_shot: bool,
}

/// `model` without its adapter and with zero task residuals.
pub fn strip_adaptation<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    let mut m = model.clone().with_adapter(Adapter::None, Default::default());
    let shape = m.params.get(RESIDUAL_KEY)?.shape().to_vec();
    *m.params.get_mut(RESIDUAL_KEY)? = Tensor::zeros(&shape);
    Ok(m)
}

/// Evaluates the adapted and the stripped configurations against zero-shot
/// on the source modality.
pub fn retention<T: Scalar>(
    adapted: &Model<T>,
    zero_shot: &Model<T>,
    source: &[Sample],
    cfg: &DecodeConfig,
) -> Result<RetentionReport> {
    let zs = evaluate(zero_shot, source, cfg)?;
    retention_against(adapted, zs, source, cfg)
}

/// [`retention`] with a precomputed zero-shot report.
pub fn retention_against<T: Scalar>(
    adapted: &Model<T>,
    zero_shot: ApReport,
    source: &[Sample],
    cfg: &DecodeConfig,
) -> Result<RetentionReport> {
    let ad = evaluate(adapted, source, cfg)?;
    let st = evaluate(&strip_adaptation(adapted)?, source, cfg)?;
    Ok(RetentionReport {
        adapted_delta: ApDelta::between(&ad, &zero_shot),
        stripped_delta: ApDelta::between(&st, &zero_shot),
        stripped_matches_zero_shot: st == zero_shot,
        zero_shot,
        adapted: ad,
        stripped: st,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            category: 0,
            score,
        }
    }

    #[test]
    fn iou_of_offset_squares() {
        assert!((iou(&[0.0, 0.0, 10.0, 10.0], &[5.0, 5.0, 15.0, 15.0]) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_match_rule() {
        let g = [GtBox {
            bbox: [0.0, 0.0, 10.0, 10.0],
            category: 0,
        }];
        let m = match_detections(&[det([0.0, 0.0, 10.0, 10.0], 0.4), det([0.0, 0.0, 10.0, 10.0], 0.9)], &g, 0.5);
        assert_eq!(m.matches.iter().map(|d| (d.score, d.tp)).collect::<Vec<_>>(), vec![(0.9, true), (0.4, false)]);
    }

    #[test]
    fn category_must_agree() {
        let g = [GtBox {
            bbox: [0.0, 0.0, 10.0, 10.0],
            category: 1,
        }];
        assert!(!match_detections(&[det([0.0, 0.0, 10.0, 10.0], 0.9)], &g, 0.5).matches[0].tp);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, false], 1), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        let want = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((average_precision(&[true, false, true], 2).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn flat_round_trip() {
        let vocab = vec!["a".to_string(), "b".to_string()];
        let r = evaluate_results(
            &[ImageResult {
                detections: vec![det([0.0, 0.0, 10.0, 10.0], 0.7)],
                gts: vec![GtBox {
                    bbox: [1.0, 0.0, 10.0, 10.0],
                    category: 0,
                }],
            }],
            &vocab,
        )
        .unwrap();
        assert_eq!(r.per_category.len(), 1);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"per_category.a.ap50\""));
        let back: ApReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        assert!(evaluate_results(&[], &vocab).is_err());
    }
}
