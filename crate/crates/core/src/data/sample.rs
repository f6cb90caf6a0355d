use crate::tensor::Tensor;

/// One stay (or visit sequence) of one subject.
///
/// `m1`/`m2` hold modality-1 and modality-2 values as `[T × F]` matrices.
/// Missing entries are `NaN` with the matching `observed` flag cleared.
/// Before one-hot expansion categorical columns hold the domain index.
#[derive(Clone, Debug, PartialEq)]
pub struct EhrSample {
    pub subject_id: String,
    pub stay_id: String,
    pub times: Vec<f64>,
    pub m1: Tensor,
    pub m2: Tensor,
    pub observed1: Vec<bool>,
    pub observed2: Vec<bool>,
    pub label: Option<u8>,
    pub los_days: Option<f64>,
}

impl EhrSample {
    /// A fully observed sample.
    pub fn dense(subject_id: &str, stay_id: &str, times: Vec<f64>, m1: Tensor, m2: Tensor) -> Self {
        let (o1, o2) = (vec![true; m1.numel()], vec![true; m2.numel()]);
        Self {
            subject_id: subject_id.into(),
            stay_id: stay_id.into(),
            times,
            m1,
            m2,
            observed1: o1,
            observed2: o2,
            label: None,
            los_days: None,
        }
    }

    pub fn time_points(&self) -> usize {
        self.times.len()
    }

    pub fn modality(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.m1
        } else {
            &self.m2
        }
    }

    pub fn modality_mut(&mut self, i: usize) -> (&mut Tensor, &mut Vec<bool>) {
        if i == 0 {
            (&mut self.m1, &mut self.observed1)
        } else {
            (&mut self.m2, &mut self.observed2)
        }
    }

    pub fn observed(&self, i: usize) -> &[bool] {
        if i == 0 {
            &self.observed1
        } else {
            &self.observed2
        }
    }

    pub fn missing_count(&self) -> usize {
        self.m1
            .data()
            .iter()
            .chain(self.m2.data())
            .filter(|v| v.is_nan())
            .count()
    }

    /// Rows `start..end` of every per-time-point field.
    pub fn slice_time(&self, start: usize, end: usize) -> EhrSample {
        let (c1, c2) = (self.m1.cols(), self.m2.cols());
        EhrSample {
            subject_id: self.subject_id.clone(),
            stay_id: self.stay_id.clone(),
            times: self.times[start..end].to_vec(),
            m1: self.m1.slice_rows(start, end),
            m2: self.m2.slice_rows(start, end),
            observed1: self.observed1[start * c1..end * c1].to_vec(),
            observed2: self.observed2[start * c2..end * c2].to_vec(),
            label: self.label,
            los_days: self.los_days,
        }
    }

    /// `[T × (F1+F2)]`: modality-1 columns then modality-2 columns.
    pub fn joint(&self) -> Tensor {
        self.m1.hcat(&self.m2).expect("modalities share the time axis")
    }
}

/// Samples plus the column names of each modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub columns: [Vec<String>; 2],
    pub samples: Vec<EhrSample>,
}

impl Dataset {
    pub fn new(columns: [Vec<String>; 2], samples: Vec<EhrSample>) -> Self {
        Self { columns, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.columns[0].len(), self.columns[1].len())
    }

    /// Samples whose stay id is in `ids`, in dataset order.
    pub fn subset(&self, ids: &std::collections::HashSet<&str>) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(s.stay_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn missing_count(&self) -> usize {
        self.samples.iter().map(EhrSample::missing_count).sum()
    }
}
