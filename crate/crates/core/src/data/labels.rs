use std::fmt;
use std::str::FromStr;

use super::{DataError, EhrSample};

/// Stays of at most this many days are short (label 0).
pub const LOS_THRESHOLD_DAYS: f64 = 7.0;

pub fn binarize_length_of_stay(days: f64) -> Result<u8, DataError> {
    if days.is_nan() || days < 0.0 {
        return Err(DataError::NegativeDays(days));
    }
    Ok(u8::from(days > LOS_THRESHOLD_DAYS))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Mortality,
    LengthOfStay,
    /// Diagnosis at the last visit, predicted from the visits before it.
    Diagnosis,
    /// Label of the synthetic generator, full sequence as input.
    Synthetic,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Mortality, Task::LengthOfStay, Task::Diagnosis, Task::Synthetic];

    pub fn label(self) -> &'static str {
        match self {
            Task::Mortality => "mortality",
            Task::LengthOfStay => "los",
            Task::Diagnosis => "diagnosis",
            Task::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mortality" => Ok(Task::Mortality),
            "los" | "length_of_stay" => Ok(Task::LengthOfStay),
            "diagnosis" | "last_visit_diagnosis" => Ok(Task::Diagnosis),
            "synthetic" => Ok(Task::Synthetic),
            _ => Err(DataError::Invalid(format!(
                "unknown task `{s}` (expected mortality, los, diagnosis or synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub features: EhrSample,
    pub label: u8,
}

pub fn make_downstream_sample(sample: &EhrSample, task: Task) -> Result<LabeledSample, DataError> {
    let missing = |what| DataError::MissingLabel {
        stay_id: sample.stay_id.clone(),
        what,
    };
    match task {
        Task::Mortality | Task::Synthetic => Ok(LabeledSample {
            features: sample.clone(),
            label: sample.label.ok_or_else(|| missing("label"))?,
        }),
        Task::LengthOfStay => {
            let days = sample.los_days.ok_or_else(|| missing("los_days"))?;
            Ok(LabeledSample {
                features: sample.clone(),
                label: binarize_length_of_stay(days)?,
            })
        }
        Task::Diagnosis => {
            let t = sample.time_points();
            if t < 2 {
                return Err(DataError::TooShort {
                    stay_id: sample.stay_id.clone(),
                    time_points: t,
                    required: 2,
                });
            }
            Ok(LabeledSample {
                features: sample.slice_time(0, t - 1),
                label: sample.label.ok_or_else(|| missing("label"))?,
            })
        }
    }
}
