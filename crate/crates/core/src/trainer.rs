//! Deterministic momentum gradient descent on any aggregation objective.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{build_partition, Cohort, GroupPartition, Sample, SubgroupId};
use crate::error::{Error, Result};
use crate::metrics::{BootstrapConfig, MetricsReport};
use crate::model::{self, ModelConfig, ModelParams};
use crate::objectives::{aggregate_objective, objective_gradient, ObjectiveConfig};
use crate::par::{self, Execution};
use crate::rng;
use crate::robust::{solve_robust_risk, RobustnessConfig};

/// Groups with fewer batch members than this fall back to their mean in
/// minibatch mode.
pub const MIN_TILT_GROUP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Full,
    Minibatch(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_mode: BatchMode,
    pub seed: u64,
    /// Attach a metrics report to every `eval_every`-th epoch record; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_mode: BatchMode::Full,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("train: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_mode == BatchMode::Minibatch(0) {
            return bad("minibatch size must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective on the full cohort at the parameters the epoch starts from.
    pub objective: f64,
    pub group_risks: Vec<Option<f64>>,
    pub robust_risks: Vec<Option<f64>>,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub final_params: ModelParams,
}

impl TrainLog {
    /// One JSON record per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            let _ = writeln!(out, "{}", serde_json::to_string(r)?);
        }
        Ok(out)
    }
}

/// Stepwise trainer; [`train`] runs it to completion.
pub struct Trainer<'a> {
    cohort: &'a Cohort,
    partition: GroupPartition,
    model_config: ModelConfig,
    objective: ObjectiveConfig,
    config: TrainConfig,
    exec: Execution,
    params: ModelParams,
    velocity: Vec<f64>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cohort: &'a Cohort,
        model_config: &ModelConfig,
        objective: &ObjectiveConfig,
        config: &TrainConfig,
    ) -> Result<Self> {
        let params = ModelParams::init(model_config, config.seed);
        Self::with_params(cohort, model_config, objective, config, params)
    }

    pub fn with_params(
        cohort: &'a Cohort,
        model_config: &ModelConfig,
        objective: &ObjectiveConfig,
        config: &TrainConfig,
        params: ModelParams,
    ) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        objective.validate(cohort.num_groups())?;
        let violations = crate::cohort::validate_cohort(cohort);
        if let Some(v) = violations.first() {
            return Err(Error::InvalidArgument(format!("invalid cohort: {}", v.detail)));
        }
        if model_config.num_groups != cohort.num_groups()
            || model_config.height != cohort.height
            || model_config.width != cohort.width
        {
            return Err(Error::InvalidConfig(format!(
                "model expects {} groups on {}x{}, cohort has {} groups on {}x{}",
                model_config.num_groups,
                model_config.height,
                model_config.width,
                cohort.num_groups(),
                cohort.height,
                cohort.width
            )));
        }
        params.check(model_config)?;
        let partition = build_partition(cohort)?;
        let velocity = vec![0.0; params.len()];
        Ok(Self {
            cohort,
            partition,
            model_config: model_config.clone(),
            objective: objective.clone(),
            config: config.clone(),
            exec: Execution::default(),
            params,
            velocity,
            epoch: 0,
        })
    }

    pub fn execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn apply(&mut self, grad: &[f64]) {
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        for ((p, v), g) in self.params.flat.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = mu * *v + g;
            *p -= lr * (mu * *v + g);
        }
    }

    fn record(&self, eval: &crate::objectives::ObjectiveEvaluation, losses: &crate::LossVector) -> Result<EpochRecord> {
        let robust = robust_risks(losses, &self.partition, &self.objective.robustness)?;
        Ok(EpochRecord {
            epoch: self.epoch,
            objective: eval.value,
            group_risks: eval.per_group.iter().map(|g| g.as_ref().map(|g| g.risk)).collect(),
            robust_risks: robust,
            mean_loss: losses.mean(),
            metrics: None,
        })
    }

    /// One pass over the cohort. Returns the record for the parameters the
    /// epoch started from.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut record = match self.config.batch_mode {
            BatchMode::Full => {
                let (losses, grads) =
                    model::loss_and_grad_with(&self.cohort.samples, &self.params, &self.model_config, self.exec)?;
                let eval = aggregate_objective(&losses, &self.partition, &self.objective)?;
                if !eval.value.is_finite() {
                    return Err(self.diverged(0, "objective"));
                }
                let grad = objective_gradient(&eval, &grads)?;
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(self.diverged(0, "gradient"));
                }
                let record = self.record(&eval, &losses)?;
                self.apply(&grad);
                record
            }
            BatchMode::Minibatch(size) => {
                let losses = model::losses_with(&self.cohort.samples, &self.params, &self.model_config, self.exec)?;
                let eval = aggregate_objective(&losses, &self.partition, &self.objective)?;
                let record = self.record(&eval, &losses)?;
                let mut order: Vec<usize> = (0..self.cohort.len()).collect();
                let mut stream = rng::substream(self.config.seed ^ 0x5eed_ba7c, self.epoch as u64);
                order.shuffle(&mut stream);
                for (step, chunk) in order.chunks(size).enumerate() {
                    let mut positions = chunk.to_vec();
                    // gradient accumulation follows sample order
                    positions.sort_unstable_by_key(|&i| self.cohort.samples[i].sample_id);
                    let batch: Vec<Sample> = positions.iter().map(|&i| self.cohort.samples[i].clone()).collect();
                    let groups: Vec<SubgroupId> = batch.iter().map(|s| s.group).collect();
                    let part = GroupPartition::from_groups(&groups, self.cohort.num_groups())?;
                    let objective = batch_objective(&self.objective, &part);
                    let (losses, grads) =
                        model::loss_and_grad_with(&batch, &self.params, &self.model_config, self.exec)?;
                    let eval = aggregate_objective(&losses, &part, &objective)?;
                    if !eval.value.is_finite() {
                        return Err(self.diverged(step, "objective"));
                    }
                    let grad = objective_gradient(&eval, &grads)?;
                    if grad.iter().any(|g| !g.is_finite()) {
                        return Err(self.diverged(step, "gradient"));
                    }
                    self.apply(&grad);
                }
                record
            }
        };
        if !record.objective.is_finite() {
            return Err(self.diverged(0, "objective"));
        }
        let every = self.config.eval_every;
        if every > 0 && (self.epoch + 1).is_multiple_of(every) {
            record.metrics = Some(evaluate_with(self.cohort, &self.params, &self.model_config, None, self.exec)?);
        }
        self.epoch += 1;
        Ok(record)
    }

    fn diverged(&self, step: usize, what: &str) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            step,
            reason: format!("non-finite {what}"),
        }
    }

    pub fn finish(self) -> ModelParams {
        self.params
    }
}

/// Minibatch robustness: groups with fewer than [`MIN_TILT_GROUP`] members use
/// their plain mean (ρ = 0) for this step.
fn batch_objective(base: &ObjectiveConfig, part: &GroupPartition) -> ObjectiveConfig {
    let rho: Vec<f64> = (0..part.num_groups())
        .map(|g| {
            if part.sizes[g] < MIN_TILT_GROUP {
                0.0
            } else {
                base.robustness.rho(g)
            }
        })
        .collect();
    ObjectiveConfig {
        robustness: RobustnessConfig::PerGroup(rho),
        ..base.clone()
    }
}

fn robust_risks(
    losses: &crate::LossVector,
    partition: &GroupPartition,
    robustness: &RobustnessConfig,
) -> Result<Vec<Option<f64>>> {
    partition
        .index_sets
        .iter()
        .enumerate()
        .map(|(g, set)| {
            if set.is_empty() {
                Ok(None)
            } else {
                solve_robust_risk(&losses.gather(set), robustness.rho(g)).map(|s| Some(s.value))
            }
        })
        .collect()
}

pub fn train(
    cohort: &Cohort,
    model_config: &ModelConfig,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(cohort, model_config, objective, config)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        epochs.push(trainer.run_epoch()?);
    }
    let params = trainer.finish();
    Ok((
        params.clone(),
        TrainLog {
            epochs,
            final_params: params,
        },
    ))
}

pub fn evaluate(
    cohort: &Cohort,
    params: &ModelParams,
    model_config: &ModelConfig,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<MetricsReport> {
    evaluate_with(cohort, params, model_config, bootstrap, Execution::default())
}

/// Forward every sample, then assemble Dice/IoU, equity-scaled, worst-group and
/// stratified metrics (with bootstrap intervals when configured).
pub fn evaluate_with(
    cohort: &Cohort,
    params: &ModelParams,
    model_config: &ModelConfig,
    bootstrap: Option<&BootstrapConfig>,
    exec: Execution,
) -> Result<MetricsReport> {
    params.check(model_config)?;
    let outputs = par::try_map_indexed(exec, cohort.len(), |i| {
        let s = &cohort.samples[i];
        let pred = model::forward(s, params, model_config)?;
        let loss = model::per_sample_loss(&pred, &s.mask)?;
        Ok::<_, Error>((pred, loss))
    })?;
    let (preds, losses): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    MetricsReport::build(cohort, &preds, &losses, bootstrap)
}
