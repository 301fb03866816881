//! End-to-end acceptance checks, one verdict line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when the
//! output is not captured by a failing test. Exits non-zero if any criterion
//! fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use common::{grads, oracle, random_image};
use modprompt::checkpoint::load_model;
use modprompt::data::{load_split, synthesize_split, Modality, SceneLimits};
use modprompt::eval::{evaluate, evaluate_results, ImageResult};
use modprompt::experiment::{
    adapt_phase, evaluate_phase, format_cell, generate_data, pretrain_phase, report_phase, source_root, target_root,
    ExperimentConfig, ExperimentRecord, PretrainSummary, TEST_SPLIT,
};
use modprompt::model::PassOptions;
use modprompt::params::Group;
use modprompt::prompts::{PromptKind, TranslatorVariant};
use modprompt::train::{attach_adapter, StrategyKind, StrategySpec};
use modprompt::Model32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Evaluator agreement with the brute-force oracle.
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_SCENES: usize = 100;
const ORACLE_SECONDS: f64 = 10.0;
/// Finite-difference agreement, relative.
const GRAD_TOL: f64 = 1e-3;
const GRAD_PROBES: usize = 20;
const GRAD_SECONDS: f64 = 60.0;
/// Pretrained source quality and the minimum zero-shot drop, in AP50.
const SOURCE_AP50_MIN: f64 = 0.80;
const SHIFT_DROP_MIN: f64 = 0.20;
/// CPU budgets.
const PRETRAIN_SECONDS: f64 = 300.0;
/// Full fine-tuning may trail the translator by at most this much AP50.
const FT_SLACK: f64 = 0.02;
const LADDER_SECONDS: f64 = 600.0;
/// Prompt strategies that must not lose AP50 from task residuals.
const RESIDUAL_WINS_MIN: usize = 2;
/// Images per split used for the step-0 identity check.
const IDENTITY_IMAGES: usize = 32;

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// A repository config with its data root moved under `root`.
fn config(name: &str, root: &Path) -> ExperimentConfig {
    let text = fs::read_to_string(repo_config(name)).unwrap();
    let text = text.replace("root = \"../data\"", &format!("root = {:?}", root.join("data").display().to_string()));
    ExperimentConfig::parse(&text, root, None).unwrap()
}

/// User plus system CPU seconds consumed by this process so far.
fn cpu_seconds() -> f64 {
    let mut u: libc::rusage = unsafe { std::mem::zeroed() };
    unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut u) };
    let t = |v: libc::timeval| v.tv_sec as f64 + v.tv_usec as f64 * 1e-6;
    t(u.ru_utime) + t(u.ru_stime)
}

struct Run {
    dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    out: PathBuf,
    records: Vec<ExperimentRecord>,
    pretrain_cpu: f64,
    cpu: f64,
}

impl Run {
    fn summary(&self) -> PretrainSummary {
        serde_json::from_slice(&fs::read(self.out.join("pretrain/summary.json")).unwrap()).unwrap()
    }

    fn base(&self) -> Model32 {
        load_model::<f32>(&self.out.join("pretrain/checkpoint")).unwrap().0
    }

    /// Mean target AP50 of one table row.
    fn mean_ap50(&self, kind: StrategyKind, tr: bool) -> f64 {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.kind == kind && r.with_task_residuals == tr)
            .map(|r| r.target.ap50)
            .collect();
        assert!(!v.is_empty(), "no records for {kind}");
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs every phase of a repository config. With `reuse`, data and the
/// pretrained detector come from an earlier run instead.
fn ladder(name: &str, reuse: Option<&Run>) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(name, reuse.map_or(dir.path(), |r| r.dir.path()));
    let out = dir.path().join("out");
    if let Some(r) = reuse {
        let to = out.join("pretrain");
        fs::create_dir_all(&to).unwrap();
        for f in ["checkpoint", "summary.json"] {
            fs::copy(r.out.join("pretrain").join(f), to.join(f)).unwrap();
        }
    }
    let t0 = cpu_seconds();
    generate_data(&cfg).unwrap();
    let base = pretrain_phase::<f32>(&cfg, &out).unwrap();
    let pretrain_cpu = cpu_seconds() - t0;
    adapt_phase(&cfg, &out, &base).unwrap();
    let records = evaluate_phase::<f32>(&cfg, &out).unwrap();
    report_phase(&cfg, &out).unwrap();
    Run {
        pretrain_cpu,
        cpu: cpu_seconds() - t0,
        dir,
        cfg,
        out,
        records,
    }
}

fn ir_ladder() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| ladder("pseudo_ir_ladder.toml", None))
}

fn depth_trio() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| ladder("pseudo_depth_residuals.toml", Some(ir_ladder())))
}

type Verdict = (bool, String);

fn c1_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let scenes: Vec<_> = (0..ORACLE_SCENES).map(|_| random_image(&mut rng, 3)).collect();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    // each scene on its own, then all of them as one dataset
    let mut sets: Vec<Vec<_>> = scenes.iter().map(|s| vec![s.clone()]).collect();
    sets.push(scenes.clone());
    for set in &sets {
        let results: Vec<ImageResult> = set
            .iter()
            .map(|(g, d)| ImageResult {
                detections: d.clone(),
                gts: g.clone(),
            })
            .collect();
        let r = evaluate_results(&results, &names).unwrap();
        match oracle::evaluate(set, 3) {
            Some((a50, a75, a)) => {
                worst = worst.max((r.ap50 - a50).abs()).max((r.ap75 - a75).abs()).max((r.ap - a).abs());
                compared += 1;
            }
            None => worst = worst.max(r.ap50.abs() + r.ap75.abs() + r.ap.abs()),
        }
    }
    let all = evaluate_results(
        &scenes
            .iter()
            .map(|(g, d)| ImageResult {
                detections: d.clone(),
                gts: g.clone(),
            })
            .collect::<Vec<_>>(),
        &names,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    (
        worst <= ORACLE_TOL && secs < ORACLE_SECONDS && compared > ORACLE_SCENES / 2,
        format!(
            "max |diff| {worst:.1e} over {compared} non-empty sets (pooled AP50 {:.3}, AP {:.3}), {secs:.2}s",
            all.ap50, all.ap
        ),
    )
}

fn c2_gradients() -> Verdict {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    let plain = common::fresh_model::<f64>(1);
    let s = grads::probe_sample(5);
    let c = grads::pixels(&plain, &s, GRAD_PROBES, 2);
    worst = worst.max(c.max_rel_error);
    parts.push(format!("pixels {:.1e}", c.max_rel_error));
    for kind in PromptKind::ALL {
        let m = grads::prompted(kind);
        let origin = if kind == PromptKind::Random { (5, 7) } else { (0, 0) };
        let opts = PassOptions {
            origin,
            ..PassOptions::default()
        };
        let c = grads::params(&m, &s, &grads::keys(&m, "prompt."), opts, GRAD_PROBES, 3);
        worst = worst.max(c.max_rel_error);
        parts.push(format!("{} {:.1e}", kind.as_str(), c.max_rel_error));
    }
    let m = grads::with_residual();
    let c = grads::params(&m, &s, &["embed.residual".to_string()], PassOptions::default(), GRAD_PROBES, 4);
    worst = worst.max(c.max_rel_error);
    parts.push(format!("residual {:.1e}", c.max_rel_error));
    for v in [TranslatorVariant::Mb, TranslatorVariant::Res] {
        let m = grads::translated(v);
        let c = grads::params(&m, &s, &grads::keys(&m, "translator."), PassOptions::default(), GRAD_PROBES, 5);
        worst = worst.max(c.max_rel_error);
        parts.push(format!("translator-{} {:.1e}", v.as_str(), c.max_rel_error));
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst < GRAD_TOL && secs < GRAD_SECONDS,
        format!("max rel error {worst:.1e} ({}), {secs:.1}s", parts.join(", ")),
    )
}

fn c3_identity() -> Verdict {
    let run = ir_ladder();
    let base = run.base();
    let limits = SceneLimits::default();
    let mut splits = vec![
        load_split(&source_root(&run.cfg), TEST_SPLIT).unwrap(),
        load_split(&target_root(&run.cfg), TEST_SPLIT).unwrap(),
        synthesize_split(Modality::PseudoDepth, &base.vocab, &limits, 7, "identity", IDENTITY_IMAGES).unwrap(),
    ];
    for s in &mut splits {
        s.truncate(IDENTITY_IMAGES);
    }
    let zero_shot: Vec<_> = splits.iter().map(|s| evaluate(&base, s, &run.cfg.eval).unwrap()).collect();
    let mut checked = 0;
    let mut differing = Vec::new();
    for kind in StrategyKind::ALL.into_iter().filter(|k| k.is_prompt()) {
        for tr in [false, true] {
            let step0 = attach_adapter(&base, &StrategySpec::new(kind, tr, 0)).unwrap();
            for (s, zs) in splits.iter().zip(&zero_shot) {
                let r = evaluate(&step0, s, &run.cfg.eval).unwrap();
                let (a, b) = (r.to_flat(), zs.to_flat());
                let same = a.len() == b.len()
                    && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits())
                    && r == *zs;
                if !same {
                    differing.push(format!("{kind}{}", if tr { "+tr" } else { "" }));
                }
                checked += 1;
            }
        }
    }
    (
        differing.is_empty() && checked == 42,
        format!("{checked} strategy/split evaluations at step 0, {} differ from zero-shot {differing:?}", differing.len()),
    )
}

fn frozen_runs(run: &Run) -> (usize, Vec<String>) {
    let base = run.base();
    let detector = |k: &str| matches!(Group::of(k), Some(Group::Backbone | Group::Head));
    let embeds = |k: &str| Group::of(k) == Some(Group::EmbedBase);
    let (det0, emb0) = (base.params.digest(detector), base.params.digest(embeds));
    let mut bad = Vec::new();
    let mut n = 0;
    for r in &run.records {
        if matches!(r.kind, StrategyKind::HeadFinetune | StrategyKind::FullFinetune) {
            continue;
        }
        let path = run.out.join(r.label()).join(r.seed.to_string()).join("checkpoint");
        let m = load_model::<f32>(&path).unwrap().0;
        let ok = m.params.digest(detector) == det0
            && m.params.digest(embeds) == emb0
            && r.frozen.detector_unchanged()
            && r.frozen.base_embeddings_unchanged();
        if !ok {
            bad.push(format!("{} seed {}", r.label(), r.seed));
        }
        n += 1;
    }
    (n, bad)
}

fn c4_frozen() -> Verdict {
    let (a, mut bad) = frozen_runs(ir_ladder());
    let (b, bad2) = frozen_runs(depth_trio());
    bad.extend(bad2);
    (
        bad.is_empty() && a + b > 0,
        format!("{} prompt/residual runs hashed against the pretrained checkpoint, mismatches {bad:?}", a + b),
    )
}

fn c5_shift() -> Verdict {
    let ir = ir_ladder();
    let summary = ir.summary();
    // the depth run shares the pretrained detector, so its zero-shot score is measured here
    let depth = depth_trio();
    let depth_test = load_split(&target_root(&depth.cfg), TEST_SPLIT).unwrap();
    let depth_zs = evaluate(&depth.base(), &depth_test, &depth.cfg.eval).unwrap().ap50;
    let source = summary.source.ap50;
    let ok = source >= SOURCE_AP50_MIN
        && source - summary.target.ap50 >= SHIFT_DROP_MIN
        && source - depth_zs >= SHIFT_DROP_MIN
        && ir.pretrain_cpu <= PRETRAIN_SECONDS;
    (
        ok,
        format!(
            "rgb AP50 {source:.3}, zero-shot pseudo-IR {:.3}, pseudo-depth {depth_zs:.3}, pretraining {:.0}s CPU",
            summary.target.ap50, ir.pretrain_cpu
        ),
    )
}

fn c6_ordering() -> Verdict {
    let run = ir_ladder();
    let res = run.mean_ap50(StrategyKind::ModPrompt(TranslatorVariant::Res), false);
    let zs = run.mean_ap50(StrategyKind::ZeroShot, false);
    let ft = run.mean_ap50(StrategyKind::FullFinetune, false);
    let (best_kind, best) = PromptKind::ALL
        .iter()
        .map(|&k| (k, run.mean_ap50(StrategyKind::Visual(k), false)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let seeds = run.cfg.optim.seed.len();
    let ok = seeds == 3 && run.cfg.optim.epochs == 20 && res > best && best > zs && ft >= res - FT_SLACK
        && run.cpu <= LADDER_SECONDS;
    (
        ok,
        format!(
            "AP50 modprompt-res {res:.4} > vp-{} {best:.4} > zs {zs:.4}; ft {ft:.4} vs floor {:.4}; {seeds} seeds, ladder {:.0}s CPU",
            StrategyKind::Visual(best_kind).as_str().trim_start_matches("vp-"),
            res - FT_SLACK,
            run.cpu
        ),
    )
}

fn c7_residuals() -> Verdict {
    let run = depth_trio();
    let mut wins = 0;
    let mut parts = Vec::new();
    let kinds: Vec<StrategyKind> = run.cfg.strategy.kind.clone();
    for &k in &kinds {
        let (off, on) = (run.mean_ap50(k, false), run.mean_ap50(k, true));
        wins += (on >= off) as usize;
        parts.push(format!("{k} {off:.4} -> {on:.4}"));
    }
    let frozen = run.records.iter().all(|r| r.frozen.base_embeddings_unchanged());
    (
        kinds.len() == 3 && wins >= RESIDUAL_WINS_MIN && frozen && run.cfg.data.modality == Modality::PseudoDepth,
        format!("{wins}/3 not worse with residuals ({}); base embeddings frozen in all runs: {frozen}", parts.join(", ")),
    )
}

fn c8_retention() -> Verdict {
    let mut exact = 0;
    let mut broken = Vec::new();
    let mut ft_deltas = Vec::new();
    for run in [ir_ladder(), depth_trio()] {
        for r in &run.records {
            if r.kind.is_prompt() {
                if r.retention.stripped_matches_zero_shot && r.retention.stripped_delta.is_zero() {
                    exact += 1;
                } else {
                    broken.push(format!("{} seed {}", r.label(), r.seed));
                }
            }
            if r.kind == StrategyKind::FullFinetune {
                ft_deltas.push(r.retention.stripped_delta.clone());
            }
        }
    }
    let ft_ok = !ft_deltas.is_empty() && ft_deltas.iter().all(|d| !d.is_zero());
    (
        broken.is_empty() && exact > 0 && ft_ok,
        format!(
            "{exact} prompt runs reproduce zero-shot with the prompt removed, failures {broken:?}; ft source AP50 delta {}",
            ft_deltas.iter().map(|d| format!("{:+.4}", d.ap50)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn c9_determinism() -> Verdict {
    let a = ir_ladder();
    let b = ladder("pseudo_ir_ladder.toml", None);
    let ca = fs::read(a.out.join("report.csv")).unwrap();
    let cb = fs::read(b.out.join("report.csv")).unwrap();
    let ckpts: BTreeMap<String, bool> = a
        .records
        .iter()
        .map(|r| {
            let rel = Path::new(&r.label()).join(r.seed.to_string()).join("checkpoint");
            let same = fs::read(a.out.join(&rel)).unwrap() == fs::read(b.out.join(&rel)).unwrap();
            (format!("{} {}", r.label(), r.seed), same)
        })
        .collect();
    let differing: Vec<&String> = ckpts.iter().filter(|(_, s)| !**s).map(|(k, _)| k).collect();
    (
        ca == cb && differing.is_empty(),
        format!(
            "report.csv {} bytes, identical: {}; {} checkpoints, differing {differing:?}; second run {:.0}s CPU",
            ca.len(),
            ca == cb,
            ckpts.len(),
            b.cpu
        ),
    )
}

fn c10_format() -> Verdict {
    let cell = format_cell(&[0.81, 0.81, 0.81]).unwrap();
    (cell == "81.00 ± 0.00", format!("(0.81, 0.81, 0.81) renders {cell:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("evaluator oracle equivalence", c1_oracle),
        ("gradient correctness", c2_gradients),
        ("identity at initialization", c3_identity),
        ("frozen-weight preservation", c4_frozen),
        ("modality-shift premise", c5_shift),
        ("method ordering on pseudo-IR", c6_ordering),
        ("task-residual benefit on pseudo-depth", c7_residuals),
        ("zero-shot retention", c8_retention),
        ("determinism", c9_determinism),
        ("report formatting fidelity", c10_format),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += !pass as usize;
        println!(
            "criterion {n:>2} {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
