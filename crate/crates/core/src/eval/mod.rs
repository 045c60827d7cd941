//! Exact-match VQA evaluation with a balanced yes/no existence probe.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::conversation::read_records;
use crate::data::{load_image, Category, Conversation};
use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::numerics::Scalar;

/// Longest synthetic answer is one word.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 8;

/// Lowercase, trim, drop trailing punctuation, collapse inner whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSample {
    pub id: String,
    /// The question, without the gold answer.
    pub prompt: Conversation,
    pub image: Option<PathBuf>,
    pub gold: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub samples: Vec<BenchmarkSample>,
}

impl Benchmark {
    /// Reads a benchmark file: dataset records plus `gold` and `category`.
    /// The benchmark is named after the file stem; image paths resolve
    /// relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let records = read_records(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let samples = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let ctx = |e: Error| Error::Validation(format!("benchmark record {i} (`{}`): {e}", r.id));
                let conv = r.to_conversation().map_err(ctx)?;
                let gold = r
                    .gold
                    .clone()
                    .ok_or_else(|| ctx(Error::Validation("missing `gold`".into())))?;
                let category = Category::parse(
                    r.category
                        .as_deref()
                        .ok_or_else(|| ctx(Error::Validation("missing `category`".into())))?,
                )
                .map_err(ctx)?;
                Ok(BenchmarkSample {
                    id: r.id.clone(),
                    prompt: conv.without_final_answer(),
                    image: conv.image_path.as_ref().map(|p| root.join(p)),
                    gold,
                    category,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "benchmark".into());
        Ok(Self { name, samples })
    }
}

/// Anything that answers a benchmark question.
pub trait Answerer {
    fn answer(&self, prompt: &Conversation, image: Option<&Path>, max_new_tokens: usize) -> Result<String>;
    /// Identifies the answering configuration in reports.
    fn config_hash(&self) -> String;
}

impl<S: Scalar> Answerer for MultimodalModel<S> {
    fn answer(&self, prompt: &Conversation, image: Option<&Path>, max_new_tokens: usize) -> Result<String> {
        let raw = image.map(load_image::<S>).transpose()?;
        self.generate(prompt, raw.as_ref(), max_new_tokens)
    }

    fn config_hash(&self) -> String {
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        hex::encode(Sha256::digest(spec))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Confusion counts and derived rates for yes/no questions; "yes" is the
/// positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExistenceStats {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Fraction of "yes" predictions.
    pub yes_ratio: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ExistenceStats {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            yes_ratio: ratio(tp + fp, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub category: Category,
    pub gold: String,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    /// Samples scored (errored samples excluded).
    pub samples: usize,
    pub errored: usize,
    pub accuracy: f64,
    pub per_category: BTreeMap<Category, CategoryStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub existence: Option<ExistenceStats>,
    pub model_hash: String,
    pub results: Vec<SampleResult>,
}

/// Greedy answers for every sample, scored by normalized exact match.
pub fn evaluate(model: &dyn Answerer, bench: &Benchmark, max_new_tokens: usize) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(bench.samples.len());
    let mut errored = 0;
    for s in &bench.samples {
        let prediction = match model.answer(&s.prompt, s.image.as_deref(), max_new_tokens) {
            Ok(p) => p,
            Err(e @ (Error::Io { .. } | Error::Format(_))) => {
                log::warn!("sample `{}` skipped: {e}", s.id);
                errored += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let correct = normalize_answer(&prediction) == normalize_answer(&s.gold);
        results.push(SampleResult {
            id: s.id.clone(),
            category: s.category,
            gold: s.gold.clone(),
            prediction,
            correct,
        });
    }
    Ok(report_from_results(&bench.name, results, errored, model.config_hash()))
}

/// Aggregates per-sample outcomes.
pub fn report_from_results(benchmark: &str, results: Vec<SampleResult>, errored: usize, model_hash: String) -> EvalReport {
    let mut per_category: BTreeMap<Category, CategoryStats> = BTreeMap::new();
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for r in &results {
        let stats = per_category.entry(r.category).or_default();
        stats.total += 1;
        stats.correct += r.correct as usize;
        if r.category == Category::Existence {
            let predicted_yes = normalize_answer(&r.prediction) == "yes";
            let gold_yes = normalize_answer(&r.gold) == "yes";
            match (predicted_yes, gold_yes) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    for s in per_category.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    let correct = results.iter().filter(|r| r.correct).count();
    EvalReport {
        benchmark: benchmark.to_string(),
        samples: results.len(),
        errored,
        accuracy: if results.is_empty() { 0.0 } else { correct as f64 / results.len() as f64 },
        existence: per_category
            .contains_key(&Category::Existence)
            .then(|| ExistenceStats::from_counts(tp, fp, tn, fn_)),
        per_category,
        model_hash,
        results,
    }
}

/// Signed differences `a − b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub benchmark: String,
    pub accuracy: f64,
    pub per_category: BTreeMap<Category, f64>,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportDelta> {
    if a.benchmark != b.benchmark || a.samples != b.samples {
        return Err(Error::Validation(format!(
            "cannot compare `{}` ({} samples) with `{}` ({} samples)",
            a.benchmark, a.samples, b.benchmark, b.samples
        )));
    }
    let cats: std::collections::BTreeSet<Category> =
        a.per_category.keys().chain(b.per_category.keys()).copied().collect();
    let acc = |r: &EvalReport, c| r.per_category.get(&c).map_or(0.0, |s| s.accuracy);
    Ok(ReportDelta {
        benchmark: a.benchmark.clone(),
        accuracy: a.accuracy - b.accuracy,
        per_category: cats.into_iter().map(|c| (c, acc(a, c) - acc(b, c))).collect(),
    })
}

/// Writes `workdir/eval/<benchmark>.json` and returns its path.
pub fn write_report(report: &EvalReport, workdir: &Path) -> Result<PathBuf> {
    let dir = workdir.join("eval");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}.json", report.benchmark));
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests;
