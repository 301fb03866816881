#![allow(dead_code)]

use modprompt::boxes::Detection;
use modprompt::data::{default_vocab, generate_scene, render_modality, GroundTruth, Modality, Sample, SceneLimits};
use modprompt::detector::DetectorConfig;
use modprompt::eval::GtBox;
use modprompt::model::Model;
use modprompt::params::ParamStore;
use modprompt::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn vocab() -> Vec<String> {
    default_vocab()
}

pub fn sample(modality: Modality, seed: u64) -> Sample {
    let spec = generate_scene(seed, &vocab(), &SceneLimits::default()).unwrap();
    Sample {
        id: format!("{seed:06}"),
        image: render_modality(&spec, modality),
        gt: GroundTruth::from_scene(&spec),
    }
}

pub fn fresh_model<T: Scalar>(seed: u64) -> Model<T> {
    Model::init(DetectorConfig::default(), &vocab(), seed).unwrap()
}

/// Adds uniform noise in `[-scale, scale]` to every tensor whose key starts
/// with `prefix`.
pub fn perturb<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<String> = store.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    for k in keys {
        for v in store.get_mut(&k).unwrap().data_mut() {
            *v = T::lit(v.to_f64_lossy() + rng.gen_range(-scale..=scale));
        }
    }
}

/// Brute-force evaluator written independently of the library: per-image
/// greedy matching, a global ranking per category, and AP as the mean over
/// recall points of the best precision reached at or beyond that recall.
pub mod oracle {
    use super::*;

    fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
        let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = w * h;
        let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn before(a: &Detection, b: &Detection) -> bool {
        if a.score != b.score {
            return a.score > b.score;
        }
        if a.category != b.category {
            return a.category < b.category;
        }
        for i in 0..4 {
            if a.bbox[i] != b.bbox[i] {
                return a.bbox[i] < b.bbox[i];
            }
        }
        false
    }

    /// Insertion sort on the tie-broken order.
    fn ranked(dets: &[Detection]) -> Vec<Detection> {
        let mut out: Vec<Detection> = Vec::new();
        for d in dets {
            let pos = out.iter().position(|o| before(d, o)).unwrap_or(out.len());
            out.insert(pos, d.clone());
        }
        out
    }

    /// `(score, image, rank, tp)` of every detection of `category`.
    fn entries(images: &[(Vec<GtBox>, Vec<Detection>)], category: usize, thr: f64) -> Vec<(f64, usize, usize, bool)> {
        let mut all = Vec::new();
        for (img, (gts, dets)) in images.iter().enumerate() {
            let mut used = vec![false; gts.len()];
            for (rank, d) in ranked(dets).iter().enumerate() {
                if d.category != category {
                    continue;
                }
                let mut pick: Option<usize> = None;
                for j in 0..gts.len() {
                    if used[j] || gts[j].category != category {
                        continue;
                    }
                    let v = iou(&d.bbox, &gts[j].bbox);
                    if v < thr {
                        continue;
                    }
                    match pick {
                        Some(p) if iou(&d.bbox, &gts[p].bbox) >= v => {}
                        _ => pick = Some(j),
                    }
                }
                if let Some(p) = pick {
                    used[p] = true;
                }
                all.push((d.score, img, rank, pick.is_some()));
            }
        }
        all
    }

    fn ap(mut all: Vec<(f64, usize, usize, bool)>, num_gt: usize) -> f64 {
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut points = Vec::new();
        let mut tp = 0;
        for (i, e) in all.iter().enumerate() {
            if e.3 {
                tp += 1;
            }
            points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
        }
        let mut total = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let best = points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            total += best;
        }
        total / 101.0
    }

    /// `(ap50, ap75, ap)` over categories that have ground truth, or `None`
    /// if no category does.
    pub fn evaluate(images: &[(Vec<GtBox>, Vec<Detection>)], num_categories: usize) -> Option<(f64, f64, f64)> {
        let mut per_cat = Vec::new();
        for c in 0..num_categories {
            let num_gt = images.iter().flat_map(|(g, _)| g).filter(|g| g.category == c).count();
            if num_gt == 0 {
                continue;
            }
            let aps: Vec<f64> = (0..10)
                .map(|t| ap(entries(images, c, (50 + 5 * t) as f64 / 100.0), num_gt))
                .collect();
            per_cat.push((aps[0], aps[5], aps.iter().sum::<f64>() / 10.0));
        }
        if per_cat.is_empty() {
            return None;
        }
        let n = per_cat.len() as f64;
        Some((
            per_cat.iter().map(|p| p.0).sum::<f64>() / n,
            per_cat.iter().map(|p| p.1).sum::<f64>() / n,
            per_cat.iter().map(|p| p.2).sum::<f64>() / n,
        ))
    }
}

/// A random small image: up to 4 ground-truth boxes on an integer grid and up
/// to 8 detections, most of them near a ground-truth box.
pub fn random_image(rng: &mut impl Rng, num_categories: usize) -> (Vec<GtBox>, Vec<Detection>) {
    let n_gt = rng.gen_range(0..=4);
    let gts: Vec<GtBox> = (0..n_gt)
        .map(|_| {
            let (x, y) = (rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64);
            let (w, h) = (rng.gen_range(2..10) as f64, rng.gen_range(2..10) as f64);
            GtBox {
                bbox: [x, y, x + w, y + h],
                category: rng.gen_range(0..num_categories),
            }
        })
        .collect();
    let n_det = rng.gen_range(0..=8);
    let dets = (0..n_det)
        .map(|_| {
            let mut category = rng.gen_range(0..num_categories);
            let bbox = match gts.get(rng.gen_range(0..gts.len() + 2)) {
                Some(g) => {
                    if rng.gen_bool(0.8) {
                        category = g.category;
                    }
                    let mut b = g.bbox;
                    for v in &mut b {
                        *v += rng.gen_range(-1..=1) as f64;
                    }
                    if b[2] <= b[0] {
                        b[2] = b[0] + 1.0;
                    }
                    if b[3] <= b[1] {
                        b[3] = b[1] + 1.0;
                    }
                    b
                }
                None => {
                    let (x, y) = (rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64);
                    [x, y, x + rng.gen_range(2..10) as f64, y + rng.gen_range(2..10) as f64]
                }
            };
            Detection {
                bbox,
                category,
                // a coarse score grid so ties occur
                score: rng.gen_range(1..=10) as f64 / 10.0,
            }
        })
        .collect();
    (gts, dets)
}

/// Finite-difference probes of the detection loss on one image whose pixels
/// are squeezed into [0.1, 0.9], away from the prompt clamp.
pub mod grads {
    use std::collections::{BTreeMap, BTreeSet};

    use modprompt::data::{Modality, Sample};
    use modprompt::model::{Adapter, Model, PassOptions};
    use modprompt::params::ParamStore;
    use modprompt::prompts::{init_prompt, init_translator, PromptKind, TranslatorVariant};
    use modprompt::train::{gradient_check, GradCheck};
    use modprompt::{Result, Tensor};

    pub const PARAM_EPS: f64 = 1e-4;
    pub const INPUT_EPS: f64 = 1e-3;
    pub const INPUT_KEY: &str = "input";

    pub fn probe_sample(seed: u64) -> Sample {
        let mut s = super::sample(Modality::PseudoIr, seed);
        for v in s.image.pixels.data_mut() {
            *v = 0.1 + 0.8 * *v;
        }
        s
    }

    pub fn keys(model: &Model<f64>, prefix: &str) -> Vec<String> {
        model.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    /// A fresh detector carrying a static prompt with small nonzero values.
    pub fn prompted(kind: PromptKind) -> Model<f64> {
        let (p, store) = init_prompt::<f64>(kind, 16, (96, 96), 3).unwrap();
        let mut m = super::fresh_model::<f64>(1).with_adapter(Adapter::Static(p), store);
        super::perturb(&mut m.params, "prompt.", 0.05, 11);
        m
    }

    /// A fresh detector with a translator whose output layer is nonzero, so
    /// every translator weight receives gradient.
    pub fn translated(variant: TranslatorVariant) -> Model<f64> {
        let (t, store) = init_translator::<f64>(variant, 3).unwrap();
        let mut m = super::fresh_model::<f64>(1).with_adapter(Adapter::Translator(t), store);
        super::perturb(&mut m.params, "translator.out", 0.002, 12);
        m
    }

    /// A fresh detector with small nonzero task residuals.
    pub fn with_residual() -> Model<f64> {
        let mut m = super::fresh_model::<f64>(1);
        super::perturb(&mut m.params, "embed.residual", 0.05, 13);
        m
    }

    /// Probes `n` scalars drawn from `keys` of `model`.
    pub fn params(model: &Model<f64>, sample: &Sample, keys: &[String], opts: PassOptions, n: usize, seed: u64) -> GradCheck {
        let trainable: BTreeSet<String> = keys.iter().cloned().collect();
        let loss = |store: &ParamStore<f64>| -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
            let m = Model {
                params: store.clone(),
                ..model.clone()
            };
            let (b, g) = m.loss_and_grads(sample, &trainable, opts)?;
            Ok((b.total, g))
        };
        gradient_check(loss, &model.params, keys, n, PARAM_EPS, seed).unwrap()
    }

    /// Probes `n` input pixels.
    pub fn pixels(model: &Model<f64>, sample: &Sample, n: usize, seed: u64) -> GradCheck {
        let cats = model.gt_indices(sample).unwrap();
        let none = BTreeSet::new();
        let opts = PassOptions {
            image_grad: true,
            ..PassOptions::default()
        };
        let loss = |store: &ParamStore<f64>| -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
            let x = store.get(INPUT_KEY)?.clone();
            let (b, _, g) = model.loss_and_grads_with_input(x, &sample.gt.boxes, &cats, &none, opts)?;
            Ok((b.total, BTreeMap::from([(INPUT_KEY.to_string(), g.expect("input gradient requested"))])))
        };
        let mut store = ParamStore::new();
        store.insert(INPUT_KEY, Model::<f64>::image_tensor(&sample.image));
        gradient_check(loss, &store, &[INPUT_KEY.to_string()], n, INPUT_EPS, seed).unwrap()
    }
}
