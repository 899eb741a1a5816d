//! Seed-pinned comparison of plain ERM, the two single-axis ablations and the
//! full method on synthetic cohorts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::held_out_seed;
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveConfig, Variant};
use crate::par::Execution;
use crate::synth::{generate_cohort_with, SynthConfig};
use crate::trainer::{evaluate_with, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// No expert layer, mean loss.
    Erm,
    /// Expert layer, mean loss.
    DmoeErm,
    /// No expert layer, per-group robust loss.
    SgDro,
    /// Expert layer and per-group robust loss.
    FairDro,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Erm, Arm::DmoeErm, Arm::SgDro, Arm::FairDro];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Erm => "erm",
            Arm::DmoeErm => "dmoe-erm",
            Arm::SgDro => "sg-dro",
            Arm::FairDro => "fairdro",
        }
    }

    pub fn uses_dmoe(self) -> bool {
        matches!(self, Arm::DmoeErm | Arm::FairDro)
    }

    pub fn is_robust(self) -> bool {
        matches!(self, Arm::SgDro | Arm::FairDro)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Objective of the robust arms; the ERM arms use the plain mean.
    pub robust_objective: ObjectiveConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            robust_objective: ObjectiveConfig {
                variant: Variant::FairDro,
                ..ObjectiveConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub mean_dice: f64,
    pub worst_group_dice: f64,
    pub hard_dice: f64,
    pub es_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub arms: Vec<ArmOutcome>,
}

impl SeedOutcome {
    pub fn arm(&self, arm: Arm) -> &ArmOutcome {
        self.arms
            .iter()
            .find(|a| a.arm == arm)
            .expect("every arm is run")
    }
}

/// Train on the cohort drawn with `seed`, evaluate on its held-out twin.
pub fn run_arm(config: &StudyConfig, seed: u64, arm: Arm, exec: Execution) -> Result<ArmOutcome> {
    let synth = SynthConfig {
        seed,
        ..config.synth.clone()
    };
    let train_cohort = generate_cohort_with(&synth, exec)?;
    let test_cohort = generate_cohort_with(
        &SynthConfig {
            seed: held_out_seed(seed),
            ..synth
        },
        exec,
    )?;
    let model = ModelConfig {
        use_dmoe: arm.uses_dmoe(),
        ..config.model.clone()
    };
    let objective = if arm.is_robust() {
        config.robust_objective.clone()
    } else {
        ObjectiveConfig::erm()
    };
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let mut trainer = Trainer::new(&train_cohort, &model, &objective, &train)?.execution(exec);
    for _ in 0..train.epochs {
        trainer.run_epoch()?;
    }
    let report = evaluate_with(&test_cohort, trainer.params(), &model, None, exec)?;
    let hard = report
        .hard_stratified
        .hard
        .ok_or_else(|| Error::InvalidConfig("study cohort has no hard subset".into()))?;
    Ok(ArmOutcome {
        arm,
        mean_dice: report.population.dice,
        worst_group_dice: report.worst_group.dice,
        hard_dice: hard.dice,
        es_dice: report.es.dice,
    })
}

pub fn run_seed(config: &StudyConfig, seed: u64, exec: Execution) -> Result<SeedOutcome> {
    let arms = Arm::ALL
        .iter()
        .map(|&arm| run_arm(config, seed, arm, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedOutcome { seed, arms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyVerdict {
    pub seeds: usize,
    /// Mean over seeds of FairDRO worst-group Dice minus ERM worst-group Dice.
    pub mean_worst_group_gain: f64,
    /// Seeds where FairDRO beats ERM on the hard subset.
    pub hard_subset_wins: usize,
    /// Seeds where FairDRO is at least as good as both ablations on
    /// worst-group Dice.
    pub ablation_wins: usize,
}

impl StudyVerdict {
    pub fn from_outcomes(outcomes: &[SeedOutcome]) -> Self {
        let n = outcomes.len();
        let gain = outcomes
            .iter()
            .map(|o| o.arm(Arm::FairDro).worst_group_dice - o.arm(Arm::Erm).worst_group_dice)
            .sum::<f64>()
            / n.max(1) as f64;
        let hard = outcomes
            .iter()
            .filter(|o| o.arm(Arm::FairDro).hard_dice > o.arm(Arm::Erm).hard_dice)
            .count();
        let ablation = outcomes
            .iter()
            .filter(|o| {
                let f = o.arm(Arm::FairDro).worst_group_dice;
                f >= o.arm(Arm::DmoeErm).worst_group_dice && f >= o.arm(Arm::SgDro).worst_group_dice
            })
            .count();
        Self {
            seeds: n,
            mean_worst_group_gain: gain,
            hard_subset_wins: hard,
            ablation_wins: ablation,
        }
    }
}

pub fn run_study(config: &StudyConfig, exec: Execution) -> Result<(Vec<SeedOutcome>, StudyVerdict)> {
    let outcomes = config
        .seeds
        .iter()
        .map(|&s| run_seed(config, s, exec))
        .collect::<Result<Vec<_>>>()?;
    let verdict = StudyVerdict::from_outcomes(&outcomes);
    Ok((outcomes, verdict))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(seed: u64, rows: [(f64, f64); 4]) -> SeedOutcome {
        SeedOutcome {
            seed,
            arms: Arm::ALL
                .iter()
                .zip(rows)
                .map(|(&arm, (w, h))| ArmOutcome {
                    arm,
                    mean_dice: 0.5,
                    worst_group_dice: w,
                    hard_dice: h,
                    es_dice: 0.4,
                })
                .collect(),
        }
    }

    #[test]
    fn verdict_counts() {
        let v = StudyVerdict::from_outcomes(&[
            outcome(0, [(0.5, 0.4), (0.55, 0.4), (0.52, 0.4), (0.56, 0.5)]),
            outcome(1, [(0.5, 0.4), (0.60, 0.4), (0.52, 0.4), (0.54, 0.3)]),
        ]);
        assert_eq!(v.hard_subset_wins, 1);
        assert_eq!(v.ablation_wins, 1);
        assert!((v.mean_worst_group_gain - 0.05).abs() < 1e-12);
    }

    #[test]
    fn arm_axes() {
        assert!(!Arm::Erm.uses_dmoe() && !Arm::Erm.is_robust());
        assert!(Arm::DmoeErm.uses_dmoe() && !Arm::DmoeErm.is_robust());
        assert!(!Arm::SgDro.uses_dmoe() && Arm::SgDro.is_robust());
        assert!(Arm::FairDro.uses_dmoe() && Arm::FairDro.is_robust());
    }

    #[test]
    fn tiny_study_runs() {
        let config = StudyConfig {
            seeds: vec![1],
            synth: SynthConfig {
                samples_per_group: vec![4, 6, 10, 4],
                ..SynthConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            ..StudyConfig::default()
        };
        let (outcomes, verdict) = run_study(&config, Execution::default()).unwrap();
        assert_eq!(outcomes[0].arms.len(), 4);
        assert_eq!(verdict.seeds, 1);
    }
}
