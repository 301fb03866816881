use std::path::Path;

use modprompt::boxes::Detection;
use modprompt::data::{Image, Modality};
use modprompt::eval::{average_precision, ApDelta, ApReport, RetentionReport};
use modprompt::experiment::{
    emit_report, format_cell, overlay_detections, plot_pr, ExperimentConfig, ExperimentRecord, FrozenAudit, DET_COLOR,
    GT_COLOR,
};
use modprompt::train::StrategyKind;

const CONFIG: &str = r#"
[data]
root = "data"
modality = "pseudo_depth"

[strategy]
kind = ["zs", "ft", "vp-wm"]
with_task_residuals = [false]
patch_size = 16

[optim]
lr = 1e-3
weight_decay = 0.01
epochs = 20
batch_size = 8
seed = [0, 1, 2]

[eval]
score_threshold = 0.05
nms_iou = 0.5
"#;

fn ap(v: f64) -> ApReport {
    ApReport {
        ap50: v,
        ap75: v / 2.0,
        ap: v / 3.0,
        images: 10,
        ..ApReport::default()
    }
}

fn record(cfg: &ExperimentConfig, kind: &str, seed: u64, v: f64) -> ExperimentRecord {
    let zs = ap(0.4);
    let adapted = ap(v);
    ExperimentRecord {
        config: cfg.clone(),
        code_version: "test".into(),
        kind: kind.parse().unwrap(),
        with_task_residuals: false,
        seed,
        checkpoint_digest: String::new(),
        target: ap(v),
        retention: RetentionReport {
            adapted_delta: ApDelta::between(&adapted, &zs),
            stripped_delta: ApDelta::between(&zs, &zs),
            stripped_matches_zero_shot: true,
            zero_shot: zs.clone(),
            adapted,
            stripped: zs,
        },
        frozen: FrozenAudit {
            detector_before: "a".into(),
            detector_after: "a".into(),
            base_embeddings_before: "b".into(),
            base_embeddings_after: "b".into(),
        },
        loss_trend: None,
        train_seconds: seed as f64,
    }
}

fn records() -> Vec<ExperimentRecord> {
    let cfg = ExperimentConfig::parse(CONFIG, Path::new("."), None).unwrap();
    vec![
        record(&cfg, "vp-wm", 2, 0.7),
        record(&cfg, "zs", 0, 0.81),
        record(&cfg, "vp-wm", 0, 0.5),
        record(&cfg, "ft", 0, 0.9),
        record(&cfg, "vp-wm", 1, 0.6),
    ]
}

#[test]
fn cells_render_percent_mean_and_sample_std() {
    assert_eq!(format_cell(&[1.0]).unwrap(), "100.00 ± 0.00");
    assert_eq!(format_cell(&[0.50, 0.60, 0.70]).unwrap(), "60.00 ± 10.00");
    assert_eq!(format_cell(&[0.81, 0.81, 0.81]).unwrap(), "81.00 ± 0.00");
}

#[test]
fn table_rows_follow_the_method_ladder() {
    let (md, csv) = emit_report(&records()).unwrap();
    let zs = md.find("| zs |").unwrap();
    let ft = md.find("| ft (upper bound) |").unwrap();
    let wm = md.find("| vp-wm |").unwrap();
    assert!(zs < ft && ft < wm);
    assert!(md.contains("| vp-wm | 3 | 60.00 ± 10.00 | 30.00 ± 5.00 | 20.00 ± 3.33 |"), "{md}");
    assert!(md.contains("| zs | 1 | 81.00 ± 0.00 |"));
    let row = csv.lines().find(|l| l.starts_with("vp-wm,")).unwrap();
    assert!(row.starts_with("vp-wm,vp-wm,false,0 1 2,"), "{row}");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn report_is_a_pure_function_of_the_records() {
    let recs = records();
    let a = emit_report(&recs).unwrap();
    let mut reversed = recs.clone();
    reversed.reverse();
    assert_eq!(a, emit_report(&reversed).unwrap());
    // records survive a JSON round trip unchanged, so `report` can rebuild tables
    let back: Vec<ExperimentRecord> = recs
        .iter()
        .map(|r| serde_json::from_str(&serde_json::to_string(r).unwrap()).unwrap())
        .collect();
    assert_eq!(back, recs);
    assert_eq!(a, emit_report(&back).unwrap());
}

#[test]
fn mixed_configurations_are_refused() {
    let mut recs = records();
    recs[1].config.optim.epochs = 5;
    assert!(emit_report(&recs).is_err());
    let mut recs = records();
    recs[0].seed = 0;
    assert!(emit_report(&recs).is_err());
    assert!(emit_report(&[]).is_err());
}

#[test]
fn ladder_order_covers_every_strategy() {
    let labels: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.as_str()).collect();
    assert_eq!(labels.len(), 10);
    assert_eq!(labels[0], "zs");
}

#[test]
fn single_true_positive_curve() {
    let dir = tempfile::tempdir().unwrap();
    let c = plot_pr(&[true], 1, &dir.path().join("pr.png")).unwrap();
    assert_eq!((c.recall.clone(), c.precision.clone(), c.envelope.clone()), (vec![1.0], vec![1.0], vec![1.0]));
    assert!((c.envelope_area() - 1.0).abs() < 1e-15);
}

#[test]
fn plotted_envelope_integrates_to_the_evaluator_ap() {
    let dir = tempfile::tempdir().unwrap();
    let flags = [true, false, true];
    let c = plot_pr(&flags, 2, &dir.path().join("pr.png")).unwrap();
    // 51 recall points at precision 1 and 50 at 2/3
    let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    assert!((c.envelope_area() - expected).abs() < 1e-12);
    assert!((expected - 0.834983).abs() < 1e-6);
    assert!((c.envelope_area() - average_precision(&flags, 2).unwrap()).abs() < 1e-12);
    let img = image::open(dir.path().join("pr.png")).unwrap().to_rgb8();
    assert!(img.pixels().any(|p| *p == DET_COLOR));
}

fn grey(h: usize, w: usize) -> Image {
    let mut img = Image::blank(h, w, Modality::PseudoIr);
    for v in img.pixels.data_mut() {
        *v = 0.5;
    }
    img
}

#[test]
fn overlay_without_detections_has_only_yellow_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("o.png");
    overlay_detections(&grey(32, 32), &[], &[[4.0, 4.0, 20.0, 12.0]], &p).unwrap();
    let img = image::open(&p).unwrap().to_rgb8();
    assert!(img.pixels().any(|px| *px == GT_COLOR));
    assert!(!img.pixels().any(|px| *px == DET_COLOR));
}

#[test]
fn overlay_draws_detections_in_red() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("o.png");
    let det = Detection {
        bbox: [2.0, 2.0, 30.0, 30.0],
        category: 0,
        score: 0.87,
    };
    overlay_detections(&grey(32, 32), &[det], &[], &p).unwrap();
    let img = image::open(&p).unwrap().to_rgb8();
    assert!(img.pixels().any(|px| *px == DET_COLOR));
    assert!(!img.pixels().any(|px| *px == GT_COLOR));
}

#[test]
fn unwritable_paths_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("missing").join("x.png");
    assert!(plot_pr(&[true], 1, &bad).is_err());
    assert!(overlay_detections(&grey(8, 8), &[], &[], &bad).is_err());
}
