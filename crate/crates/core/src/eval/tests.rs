use proptest::prelude::*;

use super::*;
use crate::data::write_synth;
use crate::model::{ComponentRegistry, ModelSpec};

#[test]
fn normalization_examples() {
    assert_eq!(normalize_answer(" Red."), "red");
    assert_eq!(normalize_answer("yes"), "yes");
    assert_eq!(normalize_answer("A  big\tsquare "), "a big square");
    assert_eq!(normalize_answer("No!?"), "no");
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,24}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }
}

struct Echo<'a>(&'a Benchmark);

impl Answerer for Echo<'_> {
    fn answer(&self, prompt: &Conversation, _: Option<&Path>, _: usize) -> Result<String> {
        let s = self.0.samples.iter().find(|s| s.prompt == *prompt).unwrap();
        Ok(format!(" {}.", s.gold.to_uppercase()))
    }
    fn config_hash(&self) -> String {
        "echo".into()
    }
}

struct Constant(&'static str);

impl Answerer for Constant {
    fn answer(&self, _: &Conversation, _: Option<&Path>, _: usize) -> Result<String> {
        Ok(self.0.into())
    }
    fn config_hash(&self) -> String {
        "constant".into()
    }
}

fn bench(n: usize) -> (tempfile::TempDir, Benchmark) {
    let tmp = tempfile::tempdir().unwrap();
    let files = write_synth(tmp.path(), 1, n, 11).unwrap();
    let b = Benchmark::load(&files.heldout_benchmark).unwrap();
    (tmp, b)
}

#[test]
fn oracle_scores_one() {
    let (_tmp, b) = bench(30);
    assert_eq!(b.name, "heldout_bench");
    let r = evaluate(&Echo(&b), &b, DEFAULT_MAX_NEW_TOKENS).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.samples, 30);
    let e = r.existence.unwrap();
    assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
}

#[test]
fn constant_yes_on_existence() {
    let (_tmp, b) = bench(120);
    let existence = Benchmark {
        name: "existence".into(),
        samples: b.samples.into_iter().filter(|s| s.category == Category::Existence).collect(),
    };
    let r = evaluate(&Constant("yes"), &existence, 8).unwrap();
    assert_eq!(r.existence.unwrap().yes_ratio, 1.0);
    assert!((r.accuracy - 0.5).abs() <= 0.05, "{}", r.accuracy);
}

#[test]
fn confusion_rates_match_formula_oracle() {
    let (_tmp, b) = bench(60);
    let r = evaluate(&Constant("no"), &b, 8).unwrap();
    let e = r.existence.unwrap();
    // Independent recomputation from the per-sample results.
    let ex: Vec<_> = r.results.iter().filter(|s| s.category == Category::Existence).collect();
    let yes = |s: &str| s.trim().eq_ignore_ascii_case("yes");
    let tp = ex.iter().filter(|s| yes(&s.prediction) && yes(&s.gold)).count() as f64;
    let fp = ex.iter().filter(|s| yes(&s.prediction) && !yes(&s.gold)).count() as f64;
    let fn_ = ex.iter().filter(|s| !yes(&s.prediction) && yes(&s.gold)).count() as f64;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rc = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
    assert_eq!((e.precision, e.recall, e.f1), (p, rc, f1));
    let from_counts = ExistenceStats::from_counts(3, 1, 4, 2);
    assert_eq!(from_counts.precision, 0.75);
    assert_eq!(from_counts.recall, 0.6);
    assert!((from_counts.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
    assert_eq!(from_counts.yes_ratio, 0.4);
}

#[test]
fn overall_accuracy_is_mean_of_correctness() {
    let (_tmp, b) = bench(30);
    let r = evaluate(&Constant("red"), &b, 8).unwrap();
    let mean = r.results.iter().filter(|s| s.correct).count() as f64 / r.results.len() as f64;
    assert_eq!(r.accuracy, mean);
}

#[test]
fn compare_examples() {
    let (_tmp, b) = bench(30);
    let a = evaluate(&Echo(&b), &b, 8).unwrap();
    let c = evaluate(&Constant("red"), &b, 8).unwrap();
    let same = compare_reports(&a, &a).unwrap();
    assert_eq!(same.accuracy, 0.0);
    assert!(same.per_category.values().all(|&d| d == 0.0));
    let d1 = compare_reports(&a, &c).unwrap();
    let d2 = compare_reports(&c, &a).unwrap();
    assert_eq!(d1.accuracy, -d2.accuracy);
    for (k, v) in &d1.per_category {
        assert_eq!(*v, -d2.per_category[k]);
    }
    let mut fake = a.clone();
    fake.accuracy = 0.8;
    let mut other = a.clone();
    other.accuracy = 0.6;
    assert!((compare_reports(&fake, &other).unwrap().accuracy - 0.2).abs() < 1e-12);
    other.benchmark = "x".into();
    assert!(compare_reports(&fake, &other).is_err());
}

#[test]
fn missing_image_counts_as_errored() {
    let (tmp, b) = bench(6);
    std::fs::remove_file(b.samples[0].image.as_ref().unwrap()).unwrap();
    let model = crate::model::MultimodalModel::<f32>::build(
        &ComponentRegistry::with_builtins(),
        &ModelSpec::tiny("mlp", false),
        0,
    )
    .unwrap();
    let r = evaluate(&model, &b, 2).unwrap();
    assert_eq!((r.samples, r.errored), (5, 1));
    drop(tmp);
}

#[test]
fn untrained_model_is_near_chance_on_color() {
    let (_tmp, b) = bench(600);
    let colors = Benchmark {
        name: "color".into(),
        samples: b.samples.into_iter().filter(|s| s.category == Category::Color).collect(),
    };
    assert_eq!(colors.samples.len(), 200);
    let model = crate::model::MultimodalModel::<f32>::build(
        &ComponentRegistry::with_builtins(),
        &ModelSpec::tiny("mlp", false),
        0,
    )
    .unwrap();
    let hash = crate::model::Component::ALL.map(|c| model.store.component_hash(c));
    let r = evaluate(&model, &colors, DEFAULT_MAX_NEW_TOKENS).unwrap();
    assert!(r.accuracy < 0.35, "{}", r.accuracy);
    assert_eq!(crate::model::Component::ALL.map(|c| model.store.component_hash(c)), hash);
    let again = evaluate(&model, &colors, DEFAULT_MAX_NEW_TOKENS).unwrap();
    assert_eq!(r, again);
}

#[test]
fn report_written_under_eval_dir() {
    let (tmp, b) = bench(3);
    let r = evaluate(&Echo(&b), &b, 8).unwrap();
    let path = write_report(&r, tmp.path()).unwrap();
    assert_eq!(path, tmp.path().join("eval").join("heldout_bench.json"));
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(back, r);
}
