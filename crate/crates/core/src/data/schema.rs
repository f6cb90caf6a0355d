use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

/// Clinical default used when no earlier measurement exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NormalValue {
    Number(f64),
    Label(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// 1 or 2. Defaults to 1 for continuous and 2 for categorical features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domain: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<NormalValue>,
}

impl FeatureSpec {
    pub fn continuous(name: &str, modality: u8, normal: f64) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            modality: Some(modality),
            domain: Vec::new(),
            normal: Some(NormalValue::Number(normal)),
        }
    }

    pub fn categorical(name: &str, domain: &[&str], normal: &str) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            modality: Some(2),
            domain: domain.iter().map(|s| s.to_string()).collect(),
            normal: Some(NormalValue::Label(normal.into())),
        }
    }

    pub fn modality(&self) -> u8 {
        self.modality.unwrap_or(match self.kind {
            FeatureKind::Continuous => 1,
            FeatureKind::Categorical => 2,
        })
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }

    /// Domain index of a categorical label.
    pub fn level_of(&self, label: &str) -> Option<usize> {
        self.domain.iter().position(|d| d == label)
    }

    /// Normal value in the internal representation (domain index for
    /// categorical features).
    pub fn normal_internal(&self) -> Option<f64> {
        match (&self.normal, self.kind) {
            (Some(NormalValue::Number(v)), FeatureKind::Continuous) => Some(*v),
            (Some(NormalValue::Label(l)), FeatureKind::Categorical) => {
                self.level_of(l).map(|i| i as f64)
            }
            (Some(NormalValue::Number(v)), FeatureKind::Categorical) => {
                let l = format_number(*v);
                self.level_of(&l).map(|i| i as f64)
            }
            (Some(NormalValue::Label(l)), FeatureKind::Continuous) => l.parse().ok(),
            (None, _) => None,
        }
    }
}

pub(crate) fn format_number(v: f64) -> String {
    format!("{v}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    /// Last observation carried forward, normal value before the first one.
    #[default]
    Locf,
    /// k-nearest-neighbour imputation of continuous features over visits
    /// pooled across stays; categorical features still use LOCF.
    Knn,
}

fn default_trim() -> usize {
    200
}

fn default_min_t() -> usize {
    3
}

fn default_k() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    #[serde(default = "default_trim")]
    pub trim_length: usize,
    #[serde(default = "default_min_t")]
    pub min_time_points: usize,
    #[serde(default)]
    pub imputation: Imputation,
    #[serde(default = "default_k")]
    pub knn_k: usize,
    pub features: Vec<FeatureSpec>,
}

/// Where a raw feature lives in the modality matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    /// 0 for modality 1, 1 for modality 2.
    pub modality: usize,
    pub column: usize,
}

impl DatasetSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Self {
        Self {
            trim_length: default_trim(),
            min_time_points: default_min_t(),
            imputation: Imputation::Locf,
            knn_k: default_k(),
            features,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let s: Self = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Schema(m));
        if self.features.is_empty() {
            return err("schema lists no features".into());
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return err(format!("duplicate feature `{}`", f.name));
            }
            if ["subject_id", "stay_id", "time", "label", "los_days"].contains(&f.name.as_str()) {
                return err(format!("feature name `{}` is reserved", f.name));
            }
            if !(1..=2).contains(&f.modality()) {
                return err(format!("feature `{}` has modality {}", f.name, f.modality()));
            }
            if f.is_categorical() {
                if f.domain.is_empty() {
                    return err(format!("categorical feature `{}` has an empty domain", f.name));
                }
                if f.normal.is_some() && f.normal_internal().is_none() {
                    return err(format!("normal value of `{}` is outside its domain", f.name));
                }
            }
        }
        for m in 1..=2u8 {
            if !self.features.iter().any(|f| f.modality() == m) {
                return err(format!("modality {m} has no features"));
            }
        }
        if self.trim_length < 3 {
            return err(format!("trim_length {} is below 3", self.trim_length));
        }
        if self.knn_k == 0 {
            return err("knn_k must be at least 1".into());
        }
        Ok(())
    }

    /// Raw-layout slot of every feature, in schema order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut next = [0usize; 2];
        self.features
            .iter()
            .map(|f| {
                let m = f.modality() as usize - 1;
                let s = Slot {
                    modality: m,
                    column: next[m],
                };
                next[m] += 1;
                s
            })
            .collect()
    }

    /// Column names before one-hot expansion.
    pub fn raw_columns(&self) -> [Vec<String>; 2] {
        let mut cols: [Vec<String>; 2] = Default::default();
        for f in &self.features {
            cols[f.modality() as usize - 1].push(f.name.clone());
        }
        cols
    }

    /// Column names and continuity after one-hot expansion. Categorical
    /// features become `name=level` columns in domain order.
    pub fn encoded_columns(&self) -> [Vec<EncodedColumn>; 2] {
        let mut cols: [Vec<EncodedColumn>; 2] = Default::default();
        for f in &self.features {
            let m = f.modality() as usize - 1;
            if f.is_categorical() {
                for level in &f.domain {
                    cols[m].push(EncodedColumn {
                        name: format!("{}={level}", f.name),
                        continuous: false,
                    });
                }
            } else {
                cols[m].push(EncodedColumn {
                    name: f.name.clone(),
                    continuous: true,
                });
            }
        }
        cols
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedColumn {
    pub name: String,
    pub continuous: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
trim_length = 200
imputation = "locf"

[[features]]
name = "heart_rate"
kind = "continuous"
normal = 86.0

[[features]]
name = "gcs_eye"
kind = "categorical"
domain = ["1", "2", "3", "4"]
normal = "4"
"#;

    #[test]
    fn parses_and_lays_out() {
        let s = DatasetSchema::from_toml(TEXT).unwrap();
        assert_eq!(s.min_time_points, 3);
        assert_eq!(s.features[1].modality(), 2);
        assert_eq!(s.features[1].normal_internal(), Some(3.0));
        let enc = s.encoded_columns();
        assert_eq!(enc[0].len(), 1);
        assert_eq!(enc[1].len(), 4);
        assert_eq!(enc[1][2].name, "gcs_eye=3");
    }

    #[test]
    fn rejects_bad_categoricals() {
        let mut s = DatasetSchema::from_toml(TEXT).unwrap();
        s.features[1].normal = Some(NormalValue::Label("9".into()));
        assert!(s.validate().is_err());
        s.features[1].domain.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_missing_modality_and_duplicates() {
        let s = DatasetSchema::new(vec![FeatureSpec::continuous("a", 1, 0.0)]);
        assert!(s.validate().is_err());
        let s = DatasetSchema::new(vec![
            FeatureSpec::continuous("a", 1, 0.0),
            FeatureSpec::continuous("a", 2, 0.0),
        ]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let s = DatasetSchema::from_toml(TEXT).unwrap();
        assert_eq!(DatasetSchema::from_toml(&s.to_toml()).unwrap(), s);
    }
}
