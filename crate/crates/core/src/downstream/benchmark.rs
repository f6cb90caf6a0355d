use std::collections::HashMap;
use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::classifier::{train_linear_classifier, train_recurrent_classifier, LinearHyper, RecurrentHyper};
use super::folds::{stratified_group_holdout, stratified_group_kfold, FoldPlan, FoldScheme, GroupedLabel};
use super::metrics::{auc, f1_score};
use super::{aggregate_mean, DownstreamError, EmbeddedSample};
use crate::data::{artifact_header, read_artifact, DataError};
use crate::rng;
use crate::tensor::Tensor;

/// Scores are thresholded here for F1.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassifierKind {
    /// Logistic regression on mean-pooled features.
    Linear(LinearHyper),
    /// Gated recurrent classifier on the sequence.
    Recurrent(RecurrentHyper),
}

impl ClassifierKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear(_) => "linear",
            Self::Recurrent(_) => "recurrent",
        }
    }
}

/// One representation of the same stays (raw features, embeddings, …).
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub samples: Vec<EmbeddedSample>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkTask {
    pub task: String,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSpec {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    /// When set, each repeat is a single subject-disjoint split holding out
    /// this fraction instead of a k-fold partition.
    pub holdout_fraction: Option<f64>,
}

impl Default for FoldSpec {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 10,
            seed: 0,
            holdout_fraction: None,
        }
    }
}

pub fn build_plan(items: &[GroupedLabel], spec: &FoldSpec) -> Result<FoldPlan, DownstreamError> {
    match spec.holdout_fraction {
        Some(f) => stratified_group_holdout(items, f, spec.repeats, spec.seed),
        None => stratified_group_kfold(items, spec.folds, spec.repeats, spec.seed),
    }
}

/// Test labels, readable only by scoring.
pub struct SealedLabels(Vec<u8>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub f1: f64,
    pub auc: f64,
}

impl SealedLabels {
    pub fn new(labels: Vec<u8>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn score(self, scores: &[f64]) -> Result<RunMetrics, DownstreamError> {
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= DECISION_THRESHOLD)).collect();
        Ok(RunMetrics {
            f1: f1_score(&pred, &self.0)?,
            auc: auc(scores, &self.0)?,
        })
    }
}

fn fit_and_score(
    clf: &ClassifierKind,
    train: &[&EmbeddedSample],
    test: &[&Tensor],
    seed: u64,
) -> Result<Vec<f64>, DownstreamError> {
    let y: Vec<u8> = train.iter().map(|s| s.label).collect();
    match clf {
        ClassifierKind::Linear(h) => {
            let x: Vec<Vec<f64>> = train.iter().map(|s| aggregate_mean(&s.features)).collect();
            let model = train_linear_classifier(&x, &y, h)?;
            let xt: Vec<Vec<f64>> = test.iter().map(|t| aggregate_mean(t)).collect();
            Ok(model.predict_proba(&xt))
        }
        ClassifierKind::Recurrent(h) => {
            let x: Vec<Tensor> = train.iter().map(|s| s.features.clone()).collect();
            let model = train_recurrent_classifier(&x, &y, h, seed)?;
            let xt: Vec<Tensor> = test.iter().map(|t| (*t).clone()).collect();
            model.predict_proba(&xt)
        }
    }
}

/// One (task, pipeline, classifier) result over all runs of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub task: String,
    pub pipeline: String,
    pub classifier: String,
    pub f1_mean: f64,
    pub f1_se: f64,
    pub auc_mean: f64,
    pub auc_se: f64,
    pub runs: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

impl ReportRow {
    pub fn from_runs(task: &str, pipeline: &str, classifier: &str, runs: &[RunMetrics]) -> Self {
        let f1: Vec<f64> = runs.iter().map(|r| r.f1).collect();
        let au: Vec<f64> = runs.iter().map(|r| r.auc).collect();
        let (f1_mean, f1_se) = mean_se(&f1);
        let (auc_mean, auc_se) = mean_se(&au);
        Self {
            task: task.into(),
            pipeline: pipeline.into(),
            classifier: classifier.into(),
            f1_mean,
            f1_se,
            auc_mean,
            auc_se,
            runs: runs.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

const REPORT_KIND: &str = "report";
const COLUMNS: [&str; 8] = ["task", "pipeline", "classifier", "f1_mean", "f1_se", "auc_mean", "auc_se", "runs"];

impl EvalReport {
    pub fn row(&self, task: &str, pipeline: &str, classifier: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.pipeline == pipeline && r.classifier == classifier)
    }

    pub fn to_csv(&self) -> String {
        let mut out = artifact_header(REPORT_KIND, &[]);
        out.push('\n');
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.task, r.pipeline, r.classifier, r.f1_mean, r.f1_se, r.auc_mean, r.auc_se, r.runs
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let (_, body) = read_artifact(text, REPORT_KIND)?;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64, DataError> {
                rec[c].parse().map_err(|_| DataError::Parse {
                    line: i + 3,
                    column: COLUMNS[c].into(),
                    value: rec[c].into(),
                })
            };
            rows.push(ReportRow {
                task: rec[0].into(),
                pipeline: rec[1].into(),
                classifier: rec[2].into(),
                f1_mean: num(3)?,
                f1_se: num(4)?,
                auc_mean: num(5)?,
                auc_se: num(6)?,
                runs: num(7)? as usize,
            });
        }
        Ok(Self { rows })
    }

    /// Aligned text table with `mean ± se` cells.
    pub fn to_table(&self) -> String {
        let header = ["task", "pipeline", "classifier", "F1", "AUC", "runs"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.task.clone(),
                    r.pipeline.clone(),
                    r.classifier.clone(),
                    format!("{:.3} ± {:.3}", r.f1_mean, r.f1_se),
                    format!("{:.3} ± {:.3}", r.auc_mean, r.auc_se),
                    r.runs.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(header.to_vec());
        out.push('\n');
        out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}

fn check_variants(task: &BenchmarkTask) -> Result<Vec<GroupedLabel>, DownstreamError> {
    let first = task
        .variants
        .first()
        .ok_or_else(|| DownstreamError::Invalid(format!("task {} has no pipelines", task.task)))?;
    let items: Vec<GroupedLabel> = first.samples.iter().map(EmbeddedSample::grouped_label).collect();
    for v in &task.variants[1..] {
        let other: Vec<GroupedLabel> = v.samples.iter().map(EmbeddedSample::grouped_label).collect();
        if other != items {
            return Err(DownstreamError::Invalid(format!(
                "pipeline {} does not share stays and labels with {}",
                v.name, first.name
            )));
        }
    }
    Ok(items)
}

/// Trains and tests every classifier on every pipeline of every task over
/// the runs of a fold plan built from the task's labels. Each run uses the
/// same classifier seed for every pipeline.
pub fn run_benchmark(
    tasks: &[BenchmarkTask],
    classifiers: &[ClassifierKind],
    spec: &FoldSpec,
) -> Result<EvalReport, DownstreamError> {
    let mut report = EvalReport::default();
    for task in tasks {
        let items = check_variants(task)?;
        let plan = build_plan(&items, spec)?;
        for v in &task.variants {
            let by_id: HashMap<&str, &EmbeddedSample> = v.samples.iter().map(|s| (s.stay_id.as_str(), s)).collect();
            for clf in classifiers {
                let mut runs = Vec::with_capacity(plan.runs.len());
                for (i, run) in plan.runs.iter().enumerate() {
                    let train: Vec<&EmbeddedSample> = run.train.iter().map(|id| by_id[id.as_str()]).collect();
                    let test_inputs: Vec<&Tensor> = run.test.iter().map(|id| &by_id[id.as_str()].features).collect();
                    let sealed = SealedLabels::new(run.test.iter().map(|id| by_id[id.as_str()].label).collect());
                    let scores = fit_and_score(clf, &train, &test_inputs, rng::derive_seed(spec.seed, 10_000 + i as u64))?;
                    runs.push(sealed.score(&scores)?);
                }
                let row = ReportRow::from_runs(&task.task, &v.name, clf.name(), &runs);
                info!(
                    "{} / {} / {}: AUC {:.3} ± {:.3}",
                    row.task, row.pipeline, row.classifier, row.auc_mean, row.auc_se
                );
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

impl FoldSpec {
    pub fn scheme(&self) -> FoldScheme {
        match self.holdout_fraction {
            Some(test_fraction) => FoldScheme::Holdout { test_fraction },
            None => FoldScheme::KFold { k: self.folds },
        }
    }
}
