//! Schema, CSV ingestion, preprocessing, leakage-safe splits, downstream
//! labels and a synthetic multimodal generator.

mod csv_io;
mod labels;
mod preprocess;
mod sample;
mod schema;
mod split;
mod synth;

pub use csv_io::{
    artifact_header, ingest_csv, load_processed, read_artifact, read_processed, read_raw_csv,
    write_processed, write_raw_csv, ARTIFACT_VERSION,
};
pub use labels::{binarize_length_of_stay, make_downstream_sample, LabeledSample, Task, LOS_THRESHOLD_DAYS};
pub use preprocess::{
    exclude_invalid, fit_apply_znorm, impute_knn, impute_knn_rows, impute_locf, one_hot_encode,
    run_pipeline, trim_to_recent, Dropped, ExclusionReason, NormStat, NormStats, PipelineOutput,
    ZNORM_EPS,
};
pub use sample::{Dataset, EhrSample};
pub use schema::{
    DatasetSchema, EncodedColumn, FeatureKind, FeatureSpec, Imputation, NormalValue, Slot,
};
pub use split::{split_by_subject, SplitEntry, SplitManifest, DOWNSTREAM_SET, EMBEDDING_SET};
pub use synth::{generate_synthetic, SynthConfig};


use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("schema: {0}")]
    Schema(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}, column `{column}`: cannot parse `{value}`")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },
    #[error("stay {stay_id}: duplicate time {time} (line {line})")]
    DuplicateTime { stay_id: String, time: f64, line: usize },
    #[error("stay {stay_id} belongs to subject {first} but a row names {other}")]
    SubjectMismatch {
        stay_id: String,
        first: String,
        other: String,
    },
    #[error("feature `{feature}` needs a normal value (stay {stay_id})")]
    MissingNormal { feature: String, stay_id: String },
    #[error("feature `{feature}` value {value} outside its domain at time index {time_index}")]
    OutOfDomain {
        feature: String,
        value: f64,
        time_index: usize,
    },
    #[error("feature `{0}` is observed nowhere in the dataset")]
    FeatureNeverObserved(String),
    #[error("stay {stay_id} has {time_points} time points, need at least {required}")]
    TooShort {
        stay_id: String,
        time_points: usize,
        required: usize,
    },
    #[error("stay {stay_id} has no {what}")]
    MissingLabel { stay_id: String, what: &'static str },
    #[error("negative stay length {0}")]
    NegativeDays(f64),
    #[error("split: {0}")]
    Split(String),
    #[error("{0}")]
    Invalid(String),
}
