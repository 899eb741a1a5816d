//! Samples, cohorts and subgroup partitions.
//!
//! A cohort serializes as one JSON document:
//!
//! ```text
//! {attribute_name, group_labels, height, width,
//!  samples: [{sample_id, group, hard_flag, image, mask}]}
//! ```
//!
//! with `image` and `mask` stored row-major. The subgroup attribute is required
//! on every sample; a sample without `group` fails to deserialize.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a subgroup in its cohort's `group_labels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubgroupId(pub usize);

impl SubgroupId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for SubgroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub sample_id: u64,
    pub group: SubgroupId,
    /// Provenance marker set by the synthetic generator. Only evaluation reads it.
    pub hard_flag: bool,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    /// Row-major binary mask (exactly 0.0 or 1.0).
    pub mask: Vec<f64>,
}

impl Sample {
    pub fn mask_bits(&self) -> Vec<bool> {
        self.mask.iter().map(|&v| v > 0.5).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cohort {
    pub attribute_name: String,
    pub group_labels: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn group_label(&self, g: SubgroupId) -> &str {
        self.group_labels.get(g.0).map(String::as_str).unwrap_or("?")
    }

    /// Sub-cohort of the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Cohort {
        Cohort {
            attribute_name: self.attribute_name.clone(),
            group_labels: self.group_labels.clone(),
            height: self.height,
            width: self.width,
            samples: positions.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Subgroup index sets `I_g`, sizes `n_g` and frequencies `p_g = n_g / n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupPartition {
    pub index_sets: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    pub frequencies: Vec<f64>,
}

impl GroupPartition {
    /// Partition positions `0..groups.len()` by group id. Groups may be empty
    /// here (minibatches); [`build_partition`] is the cohort-level entry point.
    pub fn from_groups(groups: &[SubgroupId], num_groups: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let mut index_sets = vec![Vec::new(); num_groups];
        for (pos, g) in groups.iter().enumerate() {
            if g.0 >= num_groups {
                return Err(Error::GroupOutOfRange {
                    sample_id: pos as u64,
                    group: g.0,
                    num_groups,
                });
            }
            index_sets[g.0].push(pos);
        }
        let n = groups.len() as f64;
        let sizes: Vec<usize> = index_sets.iter().map(Vec::len).collect();
        let frequencies = sizes.iter().map(|&s| s as f64 / n).collect();
        Ok(Self {
            index_sets,
            sizes,
            frequencies,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.index_sets.len()
    }

    pub fn num_samples(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Group of every position.
    pub fn group_of(&self) -> Vec<SubgroupId> {
        let mut out = vec![SubgroupId(0); self.num_samples()];
        for (g, set) in self.index_sets.iter().enumerate() {
            for &i in set {
                out[i] = SubgroupId(g);
            }
        }
        out
    }

    /// Groups with at least one member.
    pub fn present_groups(&self) -> impl Iterator<Item = SubgroupId> + '_ {
        self.sizes
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0)
            .map(|(g, _)| SubgroupId(g))
    }
}

pub fn build_partition(cohort: &Cohort) -> Result<GroupPartition> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let num_groups = cohort.num_groups();
    if let Some(s) = cohort.samples.iter().find(|s| s.group.0 >= num_groups) {
        return Err(Error::GroupOutOfRange {
            sample_id: s.sample_id,
            group: s.group.0,
            num_groups,
        });
    }
    let groups: Vec<SubgroupId> = cohort.samples.iter().map(|s| s.group).collect();
    GroupPartition::from_groups(&groups, num_groups)
}

/// Per-sample losses aligned with cohort order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::NonFinite(format!(
                "loss at position {i} is {v}; losses must be finite and non-negative"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Losses of the given positions, in order.
    pub fn gather(&self, positions: &[usize]) -> Vec<f64> {
        positions.iter().map(|&i| self.0[i]).collect()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    ImageShape,
    MaskShape,
    MaskNotBinary,
    ImageOutOfRange,
    DuplicateSampleId,
    GroupOutOfRange,
    DuplicateGroupLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub sample_id: Option<u64>,
    pub rule: Rule,
    pub detail: String,
}

/// Every invariant violation in the cohort; empty iff the cohort is valid.
pub fn validate_cohort(cohort: &Cohort) -> Vec<Violation> {
    let mut out = Vec::new();
    let pixels = cohort.pixels();

    let mut labels = HashSet::new();
    for label in &cohort.group_labels {
        if !labels.insert(label.as_str()) {
            out.push(Violation {
                sample_id: None,
                rule: Rule::DuplicateGroupLabel,
                detail: format!("group label {label:?} appears more than once"),
            });
        }
    }

    let mut ids = HashSet::new();
    for s in &cohort.samples {
        let id = Some(s.sample_id);
        if s.image.len() != pixels {
            out.push(Violation {
                sample_id: id,
                rule: Rule::ImageShape,
                detail: format!(
                    "sample {}: image has {} values, expected {}x{}",
                    s.sample_id,
                    s.image.len(),
                    cohort.height,
                    cohort.width
                ),
            });
        }
        if s.mask.len() != pixels {
            out.push(Violation {
                sample_id: id,
                rule: Rule::MaskShape,
                detail: format!(
                    "sample {}: mask has {} values, expected {}x{}",
                    s.sample_id,
                    s.mask.len(),
                    cohort.height,
                    cohort.width
                ),
            });
        }
        if let Some(v) = s.mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            out.push(Violation {
                sample_id: id,
                rule: Rule::MaskNotBinary,
                detail: format!("sample {}: mask value {v} is not 0 or 1", s.sample_id),
            });
        }
        if let Some(v) = s
            .image
            .iter()
            .find(|&&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            out.push(Violation {
                sample_id: id,
                rule: Rule::ImageOutOfRange,
                detail: format!("sample {}: intensity {v} outside [0, 1]", s.sample_id),
            });
        }
        if s.group.0 >= cohort.num_groups() {
            out.push(Violation {
                sample_id: id,
                rule: Rule::GroupOutOfRange,
                detail: format!(
                    "sample {}: group {} but only {} groups declared",
                    s.sample_id,
                    s.group.0,
                    cohort.num_groups()
                ),
            });
        }
        if !ids.insert(s.sample_id) {
            out.push(Violation {
                sample_id: id,
                rule: Rule::DuplicateSampleId,
                detail: format!("sample_id {} is not unique", s.sample_id),
            });
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_cohort(groups: &[usize], num_groups: usize) -> Cohort {
        Cohort {
            attribute_name: "stage".into(),
            group_labels: (0..num_groups).map(|g| format!("T{}", g + 1)).collect(),
            height: 2,
            width: 2,
            samples: groups
                .iter()
                .enumerate()
                .map(|(i, &g)| Sample {
                    sample_id: i as u64,
                    group: SubgroupId(g),
                    hard_flag: false,
                    image: vec![0.1, 0.9, 0.2, 0.8],
                    mask: vec![0.0, 1.0, 0.0, 1.0],
                })
                .collect(),
        }
    }

    #[test]
    fn partition_two_groups() {
        let p = build_partition(&tiny_cohort(&[0, 0, 1, 1], 2)).unwrap();
        assert_eq!(p.index_sets, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(p.frequencies, vec![0.5, 0.5]);
        assert_eq!(p.sizes, vec![2, 2]);
    }

    #[test]
    fn partition_single_group() {
        let p = build_partition(&tiny_cohort(&[0, 0, 0], 1)).unwrap();
        assert_eq!(p.index_sets, vec![vec![0, 1, 2]]);
        assert_eq!(p.frequencies, vec![1.0]);
    }

    #[test]
    fn partition_rejects_out_of_range_group() {
        let mut c = tiny_cohort(&[0, 1], 2);
        c.samples[1].group = SubgroupId(5);
        c.samples[1].sample_id = 41;
        match build_partition(&c) {
            Err(Error::GroupOutOfRange { sample_id, group, .. }) => {
                assert_eq!((sample_id, group), (41, 5));
            }
            other => panic!("expected group error, got {other:?}"),
        }
    }

    #[test]
    fn partition_rejects_empty() {
        let c = tiny_cohort(&[], 2);
        assert!(matches!(build_partition(&c), Err(Error::EmptyCohort)));
    }

    #[test]
    fn validation_reports_each_violation() {
        assert!(validate_cohort(&tiny_cohort(&[0, 1], 2)).is_empty());

        let mut c = tiny_cohort(&[0, 1], 2);
        c.samples[0].mask[2] = 0.5;
        let v = validate_cohort(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::MaskNotBinary);
        assert_eq!(v[0].sample_id, Some(0));

        let mut c = tiny_cohort(&[0, 1], 2);
        c.samples[1].sample_id = 0;
        let v = validate_cohort(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DuplicateSampleId);
    }

    #[test]
    fn missing_group_attribute_fails_to_parse() {
        let text = r#"{"attribute_name":"a","group_labels":["x"],"height":1,"width":1,
            "samples":[{"sample_id":0,"hard_flag":false,"image":[0.5],"mask":[1]}]}"#;
        assert!(Cohort::from_json(text).is_err());
    }

    #[test]
    fn json_field_names_are_exact() {
        let c = tiny_cohort(&[1], 2);
        let v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        for key in ["attribute_name", "group_labels", "height", "width", "samples"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let s = &v["samples"][0];
        for key in ["sample_id", "group", "hard_flag", "image", "mask"] {
            assert!(s.get(key).is_some(), "{key}");
        }
        assert_eq!(s["group"], 1);
        assert_eq!(Cohort::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}
