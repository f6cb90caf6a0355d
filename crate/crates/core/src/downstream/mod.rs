//! Embedding extraction, downstream classifiers, metrics and the repeated
//! stratified group k-fold benchmark.

mod benchmark;
mod classifier;
mod folds;
mod metrics;

pub use benchmark::{
    build_plan, run_benchmark, BenchmarkTask, ClassifierKind, EvalReport, FoldSpec, ReportRow, RunMetrics,
    SealedLabels, Variant,
};
pub use classifier::{
    train_linear_classifier, train_recurrent_classifier, LinearClassifier, LinearHyper, RecurrentClassifier,
    RecurrentHyper, Standardizer,
};
pub use folds::{
    stratified_group_holdout, stratified_group_kfold, FoldPlan, FoldRun, FoldScheme, GroupedLabel,
    STRATIFICATION_TOLERANCE,
};
pub use metrics::{auc, f1_score};

use std::path::Path;

use crate::data::{artifact_header, read_artifact, DataError, LabeledSample};
use crate::model::{encode, EncoderView, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DownstreamError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("labels must be 0 or 1")]
    NonBinary,
    #[error("only one class present")]
    SingleClass,
    #[error("infeasible fold plan: {0}")]
    Infeasible(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

/// A stay's per-time-point representation (embedding or raw features)
/// with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSample {
    pub stay_id: String,
    pub subject_id: String,
    pub features: Tensor,
    pub label: u8,
}

impl EmbeddedSample {
    pub fn grouped_label(&self) -> GroupedLabel {
        GroupedLabel {
            stay_id: self.stay_id.clone(),
            subject_id: self.subject_id.clone(),
            label: self.label,
        }
    }
}

/// Runs the encoder over every sample.
pub fn extract_embeddings(
    samples: &[LabeledSample],
    encoder: EncoderView<'_>,
) -> Result<Vec<EmbeddedSample>, DownstreamError> {
    let (f1, f2) = (encoder.config.f1, encoder.config.f2);
    samples
        .iter()
        .map(|s| {
            let x = &s.features;
            if x.m1.cols() != f1 || x.m2.cols() != f2 {
                return Err(ModelError::Config(format!(
                    "stay {} has widths ({}, {}) but the checkpoint expects ({f1}, {f2})",
                    x.stay_id,
                    x.m1.cols(),
                    x.m2.cols()
                ))
                .into());
            }
            let e = encode(&x.m1, &x.m2, encoder)?;
            if !e.tensor().is_finite() {
                return Err(DownstreamError::NonFinite(format!("embedding of stay {}", x.stay_id)));
            }
            Ok(EmbeddedSample {
                stay_id: x.stay_id.clone(),
                subject_id: x.subject_id.clone(),
                features: e.into_tensor(),
                label: s.label,
            })
        })
        .collect()
}

/// The preprocessed features themselves, modality 1 then modality 2.
pub fn raw_sequences(samples: &[LabeledSample]) -> Vec<EmbeddedSample> {
    samples
        .iter()
        .map(|s| EmbeddedSample {
            stay_id: s.features.stay_id.clone(),
            subject_id: s.features.subject_id.clone(),
            features: s.features.joint(),
            label: s.label,
        })
        .collect()
}

/// Column means over time points.
pub fn aggregate_mean(x: &Tensor) -> Vec<f64> {
    x.mean_rows().into_data()
}

const EMBEDDINGS_KIND: &str = "embeddings";

/// One row per time point: `stay_id,subject_id,time_index,label,e0,…`.
pub fn write_embeddings(samples: &[EmbeddedSample]) -> String {
    let width = samples.first().map_or(0, |s| s.features.cols());
    let mut out = artifact_header(EMBEDDINGS_KIND, &[("width", width.to_string())]);
    out.push_str("\nstay_id,subject_id,time_index,label");
    for j in 0..width {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for s in samples {
        for r in 0..s.features.rows() {
            let mut rec = vec![s.stay_id.clone(), s.subject_id.clone(), r.to_string(), s.label.to_string()];
            rec.extend(s.features.row(r).iter().map(|v| format!("{v}")));
            w.write_record(&rec).expect("in-memory write");
        }
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
    out
}

pub fn read_embeddings(text: &str) -> Result<Vec<EmbeddedSample>, DownstreamError> {
    let (attrs, body) = read_artifact(text, EMBEDDINGS_KIND)?;
    let width: usize = attrs
        .get("width")
        .and_then(|w| w.parse().ok())
        .ok_or_else(|| DataError::Format("embeddings header lacks width=".into()))?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut out: Vec<(EmbeddedSample, Vec<f64>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(DataError::from)?;
        let line = i + 3;
        if rec.len() != 4 + width {
            return Err(DataError::Format(format!("line {line}: expected {} fields", 4 + width)).into());
        }
        let parse_err = |column: &str, value: &str| DataError::Parse {
            line,
            column: column.into(),
            value: value.into(),
        };
        let idx: usize = rec[2].parse().map_err(|_| parse_err("time_index", &rec[2]))?;
        let label: u8 = match &rec[3] {
            "0" => 0,
            "1" => 1,
            v => return Err(parse_err("label", v).into()),
        };
        let mut row = Vec::with_capacity(width);
        for j in 0..width {
            let v: f64 = rec[4 + j].parse().map_err(|_| parse_err(&format!("e{j}"), &rec[4 + j]))?;
            row.push(v);
        }
        let fresh = idx == 0;
        if fresh {
            out.push((
                EmbeddedSample {
                    stay_id: rec[0].into(),
                    subject_id: rec[1].into(),
                    features: Tensor::zeros(&[0, width]),
                    label,
                },
                Vec::new(),
            ));
        }
        match out.last_mut() {
            Some((s, buf)) if s.stay_id == rec[0] && buf.len() == idx * width => buf.extend(row),
            _ => return Err(DataError::Format(format!("line {line}: rows of a stay must be contiguous and ordered")).into()),
        }
    }
    out.into_iter()
        .map(|(mut s, buf)| {
            let t = buf.len() / width.max(1);
            s.features = Tensor::new(&[t, width], buf)?;
            Ok(s)
        })
        .collect()
}

pub fn save_embeddings(samples: &[EmbeddedSample], path: &Path) -> Result<(), DownstreamError> {
    std::fs::write(path, write_embeddings(samples)).map_err(DataError::from)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddedSample>, DownstreamError> {
    read_embeddings(&std::fs::read_to_string(path).map_err(DataError::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_pooling() {
        let x = Tensor::from_rows(&[[1.0, 3.0], [3.0, 5.0]]).unwrap();
        assert_eq!(aggregate_mean(&x), vec![2.0, 4.0]);
        let one = Tensor::from_rows(&[[7.0, -1.0]]).unwrap();
        assert_eq!(aggregate_mean(&one), vec![7.0, -1.0]);
    }

    #[test]
    fn embeddings_file_round_trip() {
        let s = vec![
            EmbeddedSample {
                stay_id: "a".into(),
                subject_id: "p".into(),
                features: Tensor::from_rows(&[[0.1, -2.5], [1e-17, 3.0]]).unwrap(),
                label: 1,
            },
            EmbeddedSample {
                stay_id: "b".into(),
                subject_id: "q".into(),
                features: Tensor::from_rows(&[[4.0, 5.0]]).unwrap(),
                label: 0,
            },
        ];
        assert_eq!(read_embeddings(&write_embeddings(&s)).unwrap(), s);
    }
}
