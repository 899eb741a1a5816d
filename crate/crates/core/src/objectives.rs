//! Loss aggregation rules and their per-sample gradient weights.
//!
//! Every objective is evaluated together with composite sample weights `c_i` such
//! that `Σ_i c_i ∇ℓ_i` is its (sub)gradient. For the robust objectives these are
//! the worst-case weights held fixed at the optimum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{GroupPartition, LossVector, SubgroupId};
use crate::error::{Error, Result};
use crate::model::SampleGradients;
use crate::robust::{solve_robust_risk, RobustRiskSolution, RobustnessConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "erm")]
    Erm,
    #[serde(rename = "fairdro")]
    FairDro,
    #[serde(rename = "groupdro")]
    GroupDro,
    #[serde(rename = "fairdro-penalty")]
    FairDroPenalty,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "erm",
            Variant::FairDro => "fairdro",
            Variant::GroupDro => "groupdro",
            Variant::FairDroPenalty => "fairdro-penalty",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Variant::Erm),
            "fairdro" => Ok(Variant::FairDro),
            "groupdro" => Ok(Variant::GroupDro),
            "fairdro-penalty" => Ok(Variant::FairDroPenalty),
            other => Err(Error::InvalidConfig(format!("unknown objective variant {other:?}"))),
        }
    }
}

/// How subgroup risks are weighted in the robust aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeights {
    /// `w_g = 1/|G|`.
    #[default]
    Uniform,
    /// `w_g = p_g`, the group frequencies of the evaluated batch.
    Frequency,
    Explicit(Vec<f64>),
}

impl AggregationWeights {
    /// Concrete weights over the groups present in `partition`, renormalised to
    /// sum to one; absent groups get zero.
    pub fn resolve(&self, partition: &GroupPartition) -> Result<Vec<f64>> {
        let g = partition.num_groups();
        let raw: Vec<f64> = match self {
            AggregationWeights::Uniform => vec![1.0 / g as f64; g],
            AggregationWeights::Frequency => partition.frequencies.clone(),
            AggregationWeights::Explicit(w) => {
                if w.len() != g {
                    return Err(Error::InvalidConfig(format!(
                        "{} aggregation weights for {g} groups",
                        w.len()
                    )));
                }
                w.clone()
            }
        };
        let masked: Vec<f64> = raw
            .iter()
            .zip(&partition.sizes)
            .map(|(w, &n)| if n > 0 { *w } else { 0.0 })
            .collect();
        let total: f64 = masked.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::Simplex("aggregation weights vanish on the present groups".into()));
        }
        if masked.len() == raw.len() && partition.sizes.iter().all(|&n| n > 0) {
            Ok(masked)
        } else {
            Ok(masked.into_iter().map(|w| w / total).collect())
        }
    }

    pub fn validate(&self, num_groups: usize) -> Result<()> {
        if let AggregationWeights::Explicit(w) = self {
            if w.len() != num_groups {
                return Err(Error::InvalidConfig(format!(
                    "{} aggregation weights for {num_groups} groups",
                    w.len()
                )));
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "aggregation weights must be non-negative and sum to 1 (sum {total})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    #[serde(rename = "rho")]
    pub robustness: RobustnessConfig,
    pub lambda_rob: f64,
    pub aggregation: AggregationWeights,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FairDro,
            robustness: RobustnessConfig::default(),
            lambda_rob: 1.0,
            aggregation: AggregationWeights::Uniform,
        }
    }
}

impl ObjectiveConfig {
    pub fn erm() -> Self {
        Self {
            variant: Variant::Erm,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_groups: usize) -> Result<()> {
        self.robustness.validate(num_groups)?;
        self.aggregation.validate(num_groups)?;
        if !(self.lambda_rob >= 0.0 && self.lambda_rob.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_rob must be finite and >= 0, got {}",
                self.lambda_rob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupEvaluation {
    /// Mean loss of the group.
    pub risk: f64,
    pub robust: Option<RobustRiskSolution>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveEvaluation {
    pub value: f64,
    pub per_sample_weights: Vec<f64>,
    /// `None` for groups without members in the batch.
    pub per_group: Vec<Option<GroupEvaluation>>,
}

/// Mean loss per group.
pub fn subgroup_risks(losses: &LossVector, partition: &GroupPartition) -> Result<Vec<f64>> {
    check_alignment(losses, partition)?;
    partition
        .index_sets
        .iter()
        .enumerate()
        .map(|(g, set)| {
            if set.is_empty() {
                Err(Error::InvalidArgument(format!("group {g} has no samples")))
            } else {
                Ok(set.iter().map(|&i| losses.values()[i]).sum::<f64>() / set.len() as f64)
            }
        })
        .collect()
}

fn check_alignment(losses: &LossVector, partition: &GroupPartition) -> Result<()> {
    if losses.len() != partition.num_samples() {
        return Err(Error::ShapeMismatch(format!(
            "{} losses for a partition of {} samples",
            losses.len(),
            partition.num_samples()
        )));
    }
    Ok(())
}

fn group_mean(losses: &LossVector, set: &[usize]) -> f64 {
    set.iter().map(|&i| losses.values()[i]).sum::<f64>() / set.len() as f64
}

/// Lowest-id group attaining the maximum of `value`.
fn arg_max(values: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    values.fold(None, |best, (g, v)| match best {
        Some((_, b)) if v <= b => best,
        _ => Some((g, v)),
    })
}

pub fn aggregate_objective(
    losses: &LossVector,
    partition: &GroupPartition,
    config: &ObjectiveConfig,
) -> Result<ObjectiveEvaluation> {
    check_alignment(losses, partition)?;
    let n = losses.len();
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    let nf = n as f64;
    let mut c = vec![0.0; n];
    let mut per_group: Vec<Option<GroupEvaluation>> = partition
        .index_sets
        .iter()
        .map(|set| {
            (!set.is_empty()).then(|| GroupEvaluation {
                risk: group_mean(losses, set),
                robust: None,
            })
        })
        .collect();

    let solve_robust = |per_group: &mut Vec<Option<GroupEvaluation>>| -> Result<()> {
        for (g, set) in partition.index_sets.iter().enumerate() {
            if let Some(eval) = per_group[g].as_mut() {
                let sol = solve_robust_risk(&losses.gather(set), config.robustness.rho(g))?;
                eval.robust = Some(sol);
            }
        }
        Ok(())
    };

    let value = match config.variant {
        Variant::Erm => {
            c.fill(1.0 / nf);
            per_group
                .iter()
                .zip(&partition.frequencies)
                .filter_map(|(e, p)| e.as_ref().map(|e| p * e.risk))
                .sum()
        }
        Variant::FairDro => {
            solve_robust(&mut per_group)?;
            let w = config.aggregation.resolve(partition)?;
            let mut value = 0.0;
            for (g, set) in partition.index_sets.iter().enumerate() {
                let Some(eval) = &per_group[g] else { continue };
                let sol = eval.robust.as_ref().expect("solved above");
                value += w[g] * sol.value;
                for (&i, q) in set.iter().zip(&sol.weights) {
                    c[i] = w[g] * q;
                }
            }
            value
        }
        Variant::GroupDro => {
            let (g_star, worst) = arg_max(
                per_group
                    .iter()
                    .enumerate()
                    .filter_map(|(g, e)| e.as_ref().map(|e| (g, e.risk))),
            )
            .expect("non-empty batch has a group");
            let set = &partition.index_sets[g_star];
            for &i in set {
                c[i] = 1.0 / set.len() as f64;
            }
            worst
        }
        Variant::FairDroPenalty => {
            solve_robust(&mut per_group)?;
            let (g_star, worst) = arg_max(per_group.iter().enumerate().filter_map(|(g, e)| {
                e.as_ref()
                    .map(|e| (g, e.robust.as_ref().expect("solved above").value))
            }))
            .expect("non-empty batch has a group");
            c.fill(1.0 / nf);
            let sol = per_group[g_star]
                .as_ref()
                .and_then(|e| e.robust.as_ref())
                .expect("solved above");
            for (&i, q) in partition.index_sets[g_star].iter().zip(&sol.weights) {
                c[i] += config.lambda_rob * q;
            }
            losses.mean() + config.lambda_rob * worst
        }
    };

    Ok(ObjectiveEvaluation {
        value,
        per_sample_weights: c,
        per_group,
    })
}

/// Subgroup weights `α_g` and within-group weights `β^(g)` (aligned with the
/// partition's index sets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
}

fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    let total: f64 = w.iter().sum();
    if w.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::Simplex(format!("{what} sums to {total}")));
    }
    Ok(())
}

impl TwoLevelWeights {
    pub fn validate(&self, partition: &GroupPartition) -> Result<()> {
        if self.alpha.len() != partition.num_groups() || self.beta.len() != partition.num_groups() {
            return Err(Error::Simplex("one alpha and one beta per group required".into()));
        }
        check_simplex(&self.alpha, "alpha")?;
        for (g, (b, set)) in self.beta.iter().zip(&partition.index_sets).enumerate() {
            if b.len() != set.len() {
                return Err(Error::Simplex(format!(
                    "beta for group {g} has {} entries for {} samples",
                    b.len(),
                    set.len()
                )));
            }
            if !set.is_empty() {
                check_simplex(b, &format!("beta for group {g}"))?;
            }
        }
        Ok(())
    }

    /// `Σ_g α_g Σ_{i∈I_g} β_i^(g) ℓ_i`, evaluated group by group.
    pub fn objective(&self, losses: &LossVector, partition: &GroupPartition) -> Result<f64> {
        self.validate(partition)?;
        check_alignment(losses, partition)?;
        Ok(partition
            .index_sets
            .iter()
            .enumerate()
            .map(|(g, set)| {
                let inner: f64 = set
                    .iter()
                    .zip(&self.beta[g])
                    .map(|(&i, b)| b * losses.values()[i])
                    .sum();
                self.alpha[g] * inner
            })
            .sum())
    }
}

/// `c_i = α_{g(i)} β_i^{(g(i))}`.
pub fn composite_sample_weights(
    two_level: &TwoLevelWeights,
    partition: &GroupPartition,
) -> Result<Vec<f64>> {
    two_level.validate(partition)?;
    let mut c = vec![0.0; partition.num_samples()];
    for (g, set) in partition.index_sets.iter().enumerate() {
        for (&i, b) in set.iter().zip(&two_level.beta[g]) {
            c[i] = two_level.alpha[g] * b;
        }
    }
    Ok(c)
}

/// `Σ_i c_i ∇ℓ_i` with the evaluation's composite weights.
pub fn objective_gradient(
    evaluation: &ObjectiveEvaluation,
    grads: &SampleGradients,
) -> Result<Vec<f64>> {
    if evaluation.per_sample_weights.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "evaluation covers {} samples, gradients {}",
            evaluation.per_sample_weights.len(),
            grads.len()
        )));
    }
    grads.weighted_sum(&evaluation.per_sample_weights)
}

/// Group ids in the order the partition lists them.
pub fn group_ids(partition: &GroupPartition) -> Vec<SubgroupId> {
    (0..partition.num_groups()).map(SubgroupId).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn partition(groups: &[usize], g: usize) -> GroupPartition {
        let ids: Vec<SubgroupId> = groups.iter().map(|&x| SubgroupId(x)).collect();
        GroupPartition::from_groups(&ids, g).unwrap()
    }

    fn lv(v: &[f64]) -> LossVector {
        LossVector::new(v.to_vec()).unwrap()
    }

    fn config(variant: Variant, rho: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            variant,
            robustness: RobustnessConfig::Scalar(rho),
            ..ObjectiveConfig::default()
        }
    }

    #[test]
    fn subgroup_risk_examples() {
        let p = partition(&[0, 0, 1], 2);
        let r = subgroup_risks(&lv(&[0.2, 0.4, 0.6]), &p).unwrap();
        assert!((r[0] - 0.3).abs() < 1e-15 && (r[1] - 0.6).abs() < 1e-15);

        let p = partition(&[0, 0, 0], 1);
        let r = subgroup_risks(&lv(&[0.1, 0.2, 0.6]), &p).unwrap();
        assert!((r[0] - 0.3).abs() < 1e-15);

        let p = partition(&[0, 1, 1], 2);
        assert_eq!(subgroup_risks(&lv(&[0.0; 3]), &p).unwrap(), vec![0.0, 0.0]);

        let p = partition(&[0, 0], 2);
        assert!(subgroup_risks(&lv(&[0.1, 0.2]), &p).is_err());
    }

    #[test]
    fn erm_is_the_mean() {
        let p = partition(&[0, 1, 1, 0, 1], 2);
        let l = lv(&[0.1, 0.5, 0.2, 0.9, 0.4]);
        let e = aggregate_objective(&l, &p, &config(Variant::Erm, 0.3)).unwrap();
        assert!((e.value - l.mean()).abs() < 1e-15);
        assert!(e.per_sample_weights.iter().all(|&c| c == 0.2));
    }

    #[test]
    fn fairdro_rho_zero_with_frequency_weights_is_erm() {
        let p = partition(&[0, 1, 1, 0, 1, 2], 3);
        let l = lv(&[0.1, 0.5, 0.2, 0.9, 0.4, 0.3]);
        let erm = aggregate_objective(&l, &p, &ObjectiveConfig::erm()).unwrap();
        let cfg = ObjectiveConfig {
            aggregation: AggregationWeights::Frequency,
            ..config(Variant::FairDro, 0.0)
        };
        let dro = aggregate_objective(&l, &p, &cfg).unwrap();
        assert!((dro.value - erm.value).abs() < 1e-12);
        // with uniform weights it is the plain average of group means
        let uni = aggregate_objective(&l, &p, &config(Variant::FairDro, 0.0)).unwrap();
        let r = subgroup_risks(&l, &p).unwrap();
        assert!((uni.value - r.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn groupdro_takes_worst_group() {
        let p = partition(&[0, 0, 1], 2);
        let e = aggregate_objective(&lv(&[0.2, 0.4, 0.6]), &p, &config(Variant::GroupDro, 0.3)).unwrap();
        assert!((e.value - 0.6).abs() < 1e-15);
        assert_eq!(e.per_sample_weights, vec![0.0, 0.0, 1.0]);

        // tie goes to the lower group id
        let e = aggregate_objective(&lv(&[0.5, 0.5]), &partition(&[1, 0], 2), &config(Variant::GroupDro, 0.0))
            .unwrap();
        assert_eq!(e.per_sample_weights, vec![0.0, 1.0]);
    }

    #[test]
    fn penalty_off_is_erm() {
        let p = partition(&[0, 1, 1, 0], 2);
        let l = lv(&[0.1, 0.5, 0.2, 0.9]);
        let cfg = ObjectiveConfig {
            lambda_rob: 0.0,
            ..config(Variant::FairDroPenalty, 0.3)
        };
        let e = aggregate_objective(&l, &p, &cfg).unwrap();
        assert_eq!(e.value, l.mean());
        assert!(e.per_sample_weights.iter().all(|&c| c == 0.25));
    }

    #[test]
    fn penalty_weights() {
        let p = partition(&[0, 0, 1], 2);
        let l = lv(&[0.2, 0.8, 0.1]);
        let cfg = ObjectiveConfig {
            lambda_rob: 2.0,
            ..config(Variant::FairDroPenalty, 0.0)
        };
        let e = aggregate_objective(&l, &p, &cfg).unwrap();
        assert!((e.value - (l.mean() + 2.0 * 0.5)).abs() < 1e-15);
        let third = 1.0 / 3.0;
        let expect = [third + 1.0, third + 1.0, third];
        for (a, b) in e.per_sample_weights.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fairdro_composed_example() {
        // 0.5 * 0.63187677569685 + 0.5 * 0.5 (group values from the 200-digit oracle)
        let p = partition(&[0, 0, 1], 2);
        let e = aggregate_objective(&lv(&[0.2, 0.8, 0.5]), &p, &config(Variant::FairDro, 0.1)).unwrap();
        assert!((e.value - 0.565938387848423).abs() < 1e-9, "{}", e.value);
        let total: f64 = e.per_sample_weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn composite_weight_examples() {
        let p = partition(&[0, 0, 1, 1], 2);
        let tw = TwoLevelWeights {
            alpha: vec![0.5, 0.5],
            beta: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        assert_eq!(composite_sample_weights(&tw, &p).unwrap(), vec![0.25; 4]);

        let tw = TwoLevelWeights {
            alpha: vec![1.0, 0.0],
            beta: vec![vec![0.3, 0.7], vec![0.5, 0.5]],
        };
        assert_eq!(composite_sample_weights(&tw, &p).unwrap(), vec![0.3, 0.7, 0.0, 0.0]);

        let p = partition(&[0, 0, 1], 2);
        let tw = TwoLevelWeights {
            alpha: vec![0.6, 0.4],
            beta: vec![vec![0.5, 0.5], vec![1.0]],
        };
        assert_eq!(composite_sample_weights(&tw, &p).unwrap(), vec![0.3, 0.3, 0.4]);

        let bad = TwoLevelWeights {
            alpha: vec![0.6, 0.6],
            beta: vec![vec![0.5, 0.5], vec![1.0]],
        };
        assert!(composite_sample_weights(&bad, &p).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Erm, Variant::FairDro, Variant::GroupDro, Variant::FairDroPenalty] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("cvar".parse::<Variant>().is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        (2usize..20).prop_flat_map(|n| {
            (
                prop::collection::vec(0usize..3, n),
                prop::collection::vec(0.0f64..2.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn groupdro_dominates_erm((groups, losses) in instance()) {
            let p = partition(&groups, 3);
            let l = lv(&losses);
            let erm = aggregate_objective(&l, &p, &ObjectiveConfig::erm()).unwrap().value;
            let gdro = aggregate_objective(&l, &p, &config(Variant::GroupDro, 0.0)).unwrap().value;
            prop_assert!(gdro >= erm - 1e-12);
        }

        #[test]
        fn fairdro_monotone_and_normalised((groups, losses) in instance(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let p = partition(&groups, 3);
            let l = lv(&losses);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let e_lo = aggregate_objective(&l, &p, &config(Variant::FairDro, lo)).unwrap();
            let e_hi = aggregate_objective(&l, &p, &config(Variant::FairDro, hi)).unwrap();
            prop_assert!(e_lo.value <= e_hi.value + 1e-10);
            prop_assert!(e_hi.per_sample_weights.iter().all(|&c| c >= 0.0));
            let total: f64 = e_hi.per_sample_weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }

        #[test]
        fn two_level_collapse((groups, losses) in instance(), seed in 0u64..1000) {
            use rand::Rng;
            let p = partition(&groups, 3);
            let l = lv(&losses);
            let mut r = crate::rng::substream(seed, 0);
            let mut simplex = |k: usize| {
                let raw: Vec<f64> = (0..k).map(|_| r.gen::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let alpha_raw = simplex(3);
            let alpha: Vec<f64> = alpha_raw.iter().zip(&p.sizes)
                .map(|(a, &n)| if n > 0 { *a } else { 0.0 }).collect();
            let s: f64 = alpha.iter().sum();
            let alpha: Vec<f64> = alpha.into_iter().map(|a| a / s).collect();
            let beta: Vec<Vec<f64>> = p.sizes.iter().map(|&n| if n > 0 { simplex(n) } else { vec![] }).collect();
            let tw = TwoLevelWeights { alpha, beta };
            if tw.validate(&p).is_err() {
                return Ok(());
            }
            let c = composite_sample_weights(&tw, &p).unwrap();
            let collapsed: f64 = c.iter().zip(l.values()).map(|(a, b)| a * b).sum();
            prop_assert!((collapsed - tw.objective(&l, &p).unwrap()).abs() <= 1e-12);
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
