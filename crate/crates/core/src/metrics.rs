//! Segmentation overlap metrics, equity scaling and bootstrap intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, SubgroupId};
use crate::error::{Error, Result};
use crate::model::PredictionMap;
use crate::par::{self, Execution};
use crate::rng;

/// Dice and IoU of two binary masks. Two empty masks score `(1, 1)`.
pub fn dice_iou(pred: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((
        2.0 * inter as f64 / (p + g) as f64,
        inter as f64 / union as f64,
    ))
}

/// `population / (1 + Σ_a |population - subgroup_a|)`.
pub fn equity_scaled(population: f64, subgroups: &[f64]) -> f64 {
    let deviation: f64 = subgroups.iter().map(|s| (population - s).abs()).sum();
    population / (1.0 + deviation)
}

/// Lowest-valued group; ties go to the lower id.
pub fn worst_group(per_group: &[(SubgroupId, f64)]) -> Option<(SubgroupId, f64)> {
    per_group.iter().copied().fold(None, |best, (g, v)| match best {
        Some((bg, bv)) if v > bv || (v == bv && bg < g) => best,
        _ => Some((g, v)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resamples == 0 {
            return Err(Error::InvalidConfig("bootstrap: resamples must be >= 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bootstrap: level {} outside (0, 1)",
                self.level
            )));
        }
        Ok(())
    }
}

/// Statistic recomputed on every resample.
#[derive(Debug, Clone, Copy)]
pub enum Statistic<'a> {
    Mean,
    /// Equity-scaled mean: population and subgroup means are recomputed from the
    /// resample; groups missing from a resample contribute no deviation.
    EquityScaled {
        groups: &'a [SubgroupId],
        num_groups: usize,
    },
}

impl Statistic<'_> {
    fn evaluate(&self, values: &[f64], idx: &[usize]) -> f64 {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| values[i]).sum::<f64>() / n;
        match *self {
            Statistic::Mean => mean,
            Statistic::EquityScaled { groups, num_groups } => {
                let mut sums = vec![0.0; num_groups];
                let mut counts = vec![0usize; num_groups];
                for &i in idx {
                    sums[groups[i].0] += values[i];
                    counts[groups[i].0] += 1;
                }
                let subs: Vec<f64> = sums
                    .iter()
                    .zip(&counts)
                    .filter(|(_, &c)| c > 0)
                    .map(|(s, &c)| s / c as f64)
                    .collect();
                equity_scaled(mean, &subs)
            }
        }
    }
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn bootstrap_ci(values: &[f64], statistic: Statistic, config: &BootstrapConfig) -> Result<(f64, f64)> {
    bootstrap_ci_with(values, statistic, config, Execution::default())
}

/// Percentile bootstrap interval. Resample `r` draws its indices from ChaCha
/// substream `r` of `config.seed`.
pub fn bootstrap_ci_with(
    values: &[f64],
    statistic: Statistic,
    config: &BootstrapConfig,
    exec: Execution,
) -> Result<(f64, f64)> {
    config.validate()?;
    if values.is_empty() {
        return Err(Error::InvalidArgument("bootstrap of an empty sample".into()));
    }
    if let Statistic::EquityScaled { groups, num_groups } = statistic {
        if groups.len() != values.len() || groups.iter().any(|g| g.0 >= num_groups) {
            return Err(Error::ShapeMismatch("group labels do not match values".into()));
        }
    }
    let n = values.len();
    let mut stats = par::map_indexed(exec, config.resamples, |r| {
        let mut stream = rng::substream(config.seed, r as u64);
        let idx: Vec<usize> = (0..n).map(|_| stream.gen_range(0..n)).collect();
        statistic.evaluate(values, &idx)
    });
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: u64,
    pub group: SubgroupId,
    pub hard_flag: bool,
    pub dice: f64,
    pub iou: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: SubgroupId,
    pub label: String,
    pub dice: f64,
    pub iou: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstGroup {
    pub group: SubgroupId,
    pub label: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub dice: f64,
    pub iou: f64,
    pub n: usize,
}

/// Means over the planted hard subset and over the remaining samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardStratified {
    pub hard: Option<Stratum>,
    pub easy: Option<Stratum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default)]
    pub method: Option<String>,
    pub attribute_name: String,
    pub group_labels: Vec<String>,
    pub per_sample: Vec<SampleMetrics>,
    /// Groups with at least one evaluated sample, by id.
    pub per_group: Vec<GroupMetrics>,
    pub population: Overlap,
    pub es: Overlap,
    pub worst_group: WorstGroup,
    pub hard_stratified: HardStratified,
    pub cis: Option<BTreeMap<String, (f64, f64)>>,
}

fn stratum<'a>(rows: impl Iterator<Item = &'a SampleMetrics>) -> Option<Stratum> {
    let (mut d, mut i, mut n) = (0.0, 0.0, 0usize);
    for r in rows {
        d += r.dice;
        i += r.iou;
        n += 1;
    }
    (n > 0).then(|| Stratum {
        dice: d / n as f64,
        iou: i / n as f64,
        n,
    })
}

impl MetricsReport {
    /// Assemble the report from per-sample predictions (aligned with the cohort)
    /// and losses, binarizing predictions at 0.5.
    pub fn build(
        cohort: &Cohort,
        preds: &[PredictionMap],
        losses: &[f64],
        bootstrap: Option<&BootstrapConfig>,
    ) -> Result<Self> {
        if cohort.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if preds.len() != cohort.len() || losses.len() != cohort.len() {
            return Err(Error::ShapeMismatch(
                "predictions and losses must align with the cohort".into(),
            ));
        }
        let mut per_sample = Vec::with_capacity(cohort.len());
        for ((s, pred), &loss) in cohort.samples.iter().zip(preds).zip(losses) {
            let (dice, iou) = dice_iou(&pred.binarize(), &s.mask_bits())?;
            per_sample.push(SampleMetrics {
                sample_id: s.sample_id,
                group: s.group,
                hard_flag: s.hard_flag,
                dice,
                iou,
                loss,
            });
        }

        let per_group: Vec<GroupMetrics> = (0..cohort.num_groups())
            .filter_map(|g| {
                let st = stratum(per_sample.iter().filter(|r| r.group.0 == g))?;
                Some(GroupMetrics {
                    group: SubgroupId(g),
                    label: cohort.group_labels[g].clone(),
                    dice: st.dice,
                    iou: st.iou,
                    n: st.n,
                })
            })
            .collect();
        let all = stratum(per_sample.iter()).expect("non-empty cohort");
        let population = Overlap {
            dice: all.dice,
            iou: all.iou,
        };
        let es = Overlap {
            dice: equity_scaled(
                population.dice,
                &per_group.iter().map(|g| g.dice).collect::<Vec<_>>(),
            ),
            iou: equity_scaled(
                population.iou,
                &per_group.iter().map(|g| g.iou).collect::<Vec<_>>(),
            ),
        };
        let (wg, _) = worst_group(
            &per_group
                .iter()
                .map(|g| (g.group, g.dice))
                .collect::<Vec<_>>(),
        )
        .expect("at least one group");
        let w = per_group.iter().find(|g| g.group == wg).expect("listed group");
        let worst_group = WorstGroup {
            group: wg,
            label: w.label.clone(),
            dice: w.dice,
            iou: w.iou,
        };
        let hard_stratified = HardStratified {
            hard: stratum(per_sample.iter().filter(|r| r.hard_flag)),
            easy: stratum(per_sample.iter().filter(|r| !r.hard_flag)),
        };

        let cis = match bootstrap {
            None => None,
            Some(cfg) => {
                let dice: Vec<f64> = per_sample.iter().map(|r| r.dice).collect();
                let iou: Vec<f64> = per_sample.iter().map(|r| r.iou).collect();
                let groups: Vec<SubgroupId> = per_sample.iter().map(|r| r.group).collect();
                let es_stat = Statistic::EquityScaled {
                    groups: &groups,
                    num_groups: cohort.num_groups(),
                };
                let mut m = BTreeMap::new();
                m.insert("dice".to_string(), bootstrap_ci(&dice, Statistic::Mean, cfg)?);
                m.insert("iou".to_string(), bootstrap_ci(&iou, Statistic::Mean, cfg)?);
                m.insert("es_dice".to_string(), bootstrap_ci(&dice, es_stat, cfg)?);
                m.insert("es_iou".to_string(), bootstrap_ci(&iou, es_stat, cfg)?);
                Some(m)
            }
        };

        Ok(Self {
            method: None,
            attribute_name: cohort.attribute_name.clone(),
            group_labels: cohort.group_labels.clone(),
            per_sample,
            per_group,
            population,
            es,
            worst_group,
            hard_stratified,
            cis,
        })
    }

    /// Largest disagreement between the stored ES values and ES recomputed from
    /// the stored population and per-group means.
    pub fn es_inconsistency(&self) -> f64 {
        let dice = equity_scaled(
            self.population.dice,
            &self.per_group.iter().map(|g| g.dice).collect::<Vec<_>>(),
        );
        let iou = equity_scaled(
            self.population.iou,
            &self.per_group.iter().map(|g| g.iou).collect::<Vec<_>>(),
        );
        (dice - self.es.dice).abs().max((iou - self.es.iou).abs())
    }

    /// `sample_id,group,hard_flag,dice,iou,loss`
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample_id,group,hard_flag,dice,iou,loss\n");
        for r in &self.per_sample {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.sample_id, r.group.0, r.hard_flag, r.dice, r.iou, r.loss
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
