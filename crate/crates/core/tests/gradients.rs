mod common;

use common::grads::{self, probe_sample};
use modprompt::model::PassOptions;
use modprompt::params::Group;
use modprompt::prompts::{PromptKind, TranslatorVariant};
use modprompt::train::GradCheck;

const TOL: f64 = 1e-3;

/// The checks are only meaningful where the prompt clamp is inactive.
fn assert_unsaturated(m: &modprompt::model::Model<f64>, s: &modprompt::data::Sample) {
    let img = m.adapted_image(&s.image).unwrap();
    let (lo, hi) = img.pixels.data().iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    assert!(lo > 1e-3 && hi < 1.0 - 1e-3, "adapted image spans [{lo}, {hi}]");
}

fn report(name: &str, c: &GradCheck) {
    let worst = c.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    println!(
        "{name}: max rel error {:.2e} at {}[{}] ({:.6e} vs {:.6e})",
        c.max_rel_error, worst.key, worst.index, worst.analytic, worst.numeric
    );
    assert!(c.max_rel_error < TOL, "{name}: {:.3e}", c.max_rel_error);
}

#[test]
fn detector_parameters() {
    let m = common::fresh_model::<f64>(1);
    let keys: Vec<String> = m
        .params
        .keys()
        .filter(|k| matches!(Group::of(k), Some(Group::Backbone | Group::Head)))
        .cloned()
        .collect();
    let c = grads::params(&m, &probe_sample(5), &keys, PassOptions::default(), 20, 1);
    report("detector", &c);
}

#[test]
fn input_pixels() {
    let m = common::fresh_model::<f64>(1);
    report("pixels", &grads::pixels(&m, &probe_sample(5), 20, 2));
}

#[test]
fn every_static_prompt() {
    let s = probe_sample(6);
    for kind in PromptKind::ALL {
        let m = grads::prompted(kind);
        assert_unsaturated(&m, &s);
        let origin = if kind == PromptKind::Random { (5, 7) } else { (0, 0) };
        let opts = PassOptions {
            origin,
            ..PassOptions::default()
        };
        let c = grads::params(&m, &s, &grads::keys(&m, "prompt."), opts, 20, 3);
        report(kind.as_str(), &c);
    }
}

#[test]
fn task_residuals() {
    let m = grads::with_residual();
    let c = grads::params(&m, &probe_sample(7), &["embed.residual".to_string()], PassOptions::default(), 20, 4);
    report("residual", &c);
}

#[test]
fn both_translators() {
    let s = probe_sample(8);
    for v in [TranslatorVariant::Mb, TranslatorVariant::Res] {
        let m = grads::translated(v);
        assert_unsaturated(&m, &s);
        let c = grads::params(&m, &s, &grads::keys(&m, "translator."), PassOptions::default(), 20, 5);
        report(v.as_str(), &c);
    }
}
