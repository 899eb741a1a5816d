//! Verification sweeps: the KL-DRO dual solver against the brute-force primal,
//! and the objective gradient against central finite differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{build_partition, Cohort};
use crate::error::Result;
use crate::model::{self, ModelConfig, ModelParams};
use crate::objectives::{aggregate_objective, objective_gradient, ObjectiveConfig, Variant};
use crate::par::{self, Execution};
use crate::rng;
use crate::robust::{brute_force_primal, solve_robust_risk, DualVariable};
use crate::synth::{generate_cohort, SynthConfig};

pub const RHO_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.3, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            seed: 0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPrimalCase {
    pub index: usize,
    pub losses: Vec<f64>,
    pub rho: f64,
    pub dual: f64,
    pub primal: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPrimalSummary {
    pub instances: usize,
    pub agreements: usize,
    pub tolerance: f64,
    pub max_abs_diff: f64,
    pub failures: Vec<DualPrimalCase>,
}

/// The `index`-th random instance: n in 2..=6, losses uniform on [0, 1], ρ from
/// [`RHO_GRID`].
pub fn sweep_instance(seed: u64, index: usize) -> (Vec<f64>, f64) {
    let mut r = rng::substream(seed, index as u64);
    let n = r.gen_range(2..=6);
    let losses = (0..n).map(|_| r.gen::<f64>()).collect();
    let rho = RHO_GRID[r.gen_range(0..RHO_GRID.len())];
    (losses, rho)
}

pub fn dual_primal_sweep(config: &SweepConfig, exec: Execution) -> Result<DualPrimalSummary> {
    let cases = par::try_map_indexed(exec, config.instances, |i| {
        let (losses, rho) = sweep_instance(config.seed, i);
        let dual = solve_robust_risk(&losses, rho)?.value;
        let primal = brute_force_primal(&losses, rho)?.value;
        Ok::<_, crate::Error>(DualPrimalCase {
            index: i,
            losses,
            rho,
            dual,
            primal,
            abs_diff: (dual - primal).abs(),
        })
    })?;
    let max_abs_diff = cases.iter().map(|c| c.abs_diff).fold(0.0, f64::max);
    let failures: Vec<_> = cases
        .into_iter()
        .filter(|c| c.abs_diff.is_nan() || c.abs_diff > config.tolerance)
        .collect();
    Ok(DualPrimalSummary {
        instances: config.instances,
        agreements: config.instances - failures.len(),
        tolerance: config.tolerance,
        max_abs_diff,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckConfig {
    pub points: usize,
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        Self {
            points: 3,
            coordinates: 20,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            objective: ObjectiveConfig {
                variant: Variant::FairDro,
                ..ObjectiveConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCase {
    pub point: usize,
    pub coordinate: usize,
    pub block: String,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    pub num_params: usize,
    pub points: usize,
    pub checked: usize,
    pub passed: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Candidate points rejected for sitting near a routing tie, the logit
    /// clip, or a degenerate robust solution.
    pub rejected_points: usize,
    pub failures: Vec<GradientCase>,
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Small cohort used for the gradient check: three samples per group.
pub fn gradient_cohort(seed: u64) -> Result<Cohort> {
    generate_cohort(&SynthConfig {
        samples_per_group: vec![3, 3, 3, 3],
        seed,
        ..SynthConfig::default()
    })
}

/// Every parameter uniform in `[-scale, scale]`, so encoder, gates and
/// experts are all active.
pub fn random_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(cfg);
    let mut r = rng::substream(seed, 0x6772_6164);
    for v in &mut p.flat {
        *v = scale * (2.0 * r.gen::<f64>() - 1.0);
    }
    p
}

/// True when a step of size `step` cannot change top-K routing or cross the
/// logit clip, and every group's worst-case weights are interior and unique.
fn is_interior(
    cohort: &Cohort,
    params: &ModelParams,
    cfg: &ModelConfig,
    objective: &ObjectiveConfig,
    step: f64,
) -> Result<bool> {
    let (gate_gap, clip_gap) = model::routing_margins(&cohort.samples, params, cfg)?;
    if gate_gap < 1e3 * step || clip_gap < 1e3 * step {
        return Ok(false);
    }
    let losses = model::losses_with(&cohort.samples, params, cfg, Execution::default())?;
    let partition = build_partition(cohort)?;
    let eval = aggregate_objective(&losses, &partition, objective)?;
    Ok(eval.per_group.iter().flatten().all(|g| match &g.robust {
        Some(sol) => matches!(sol.eta_star, DualVariable::Interior(_)),
        None => true,
    }))
}

pub fn gradient_check(config: &GradientCheckConfig, exec: Execution) -> Result<GradientSummary> {
    let cfg = ModelConfig::default();
    let cohort = gradient_cohort(config.seed)?;
    let partition = build_partition(&cohort)?;
    let objective_at = |p: &ModelParams| -> Result<f64> {
        let losses = model::losses_with(&cohort.samples, p, &cfg, exec)?;
        Ok(aggregate_objective(&losses, &partition, &config.objective)?.value)
    };
    let mut cases = Vec::new();
    let mut rejected = 0;
    let mut candidate = 0u64;
    let mut accepted = 0;
    while accepted < config.points {
        let params = random_params(&cfg, config.seed.wrapping_add(candidate), 0.5);
        candidate += 1;
        if !is_interior(&cohort, &params, &cfg, &config.objective, config.step)? {
            rejected += 1;
            if rejected > 1000 {
                return Err(crate::Error::InvalidArgument(
                    "no interior parameter point found".into(),
                ));
            }
            continue;
        }
        let (losses, grads) = model::loss_and_grad_with(&cohort.samples, &params, &cfg, exec)?;
        let eval = aggregate_objective(&losses, &partition, &config.objective)?;
        let grad = objective_gradient(&eval, &grads)?;
        let mut r = rng::substream(config.seed, 0x6664_0000 + accepted as u64);
        for _ in 0..config.coordinates {
            let k = r.gen_range(0..params.len());
            let mut plus = params.clone();
            plus.flat[k] += config.step;
            let mut minus = params.clone();
            minus.flat[k] -= config.step;
            let fd = (objective_at(&plus)? - objective_at(&minus)?) / (2.0 * config.step);
            let block = params
                .layout
                .iter()
                .find(|b| b.range().contains(&k))
                .map(|b| b.name.clone())
                .unwrap_or_default();
            cases.push(GradientCase {
                point: accepted,
                coordinate: k,
                block,
                analytic: grad[k],
                finite_difference: fd,
                rel_error: relative_error(grad[k], fd),
            });
        }
        accepted += 1;
    }
    let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let checked = cases.len();
    let failures: Vec<_> = cases
        .into_iter()
        .filter(|c| c.rel_error.is_nan() || c.rel_error > config.tolerance)
        .collect();
    Ok(GradientSummary {
        num_params: cfg.num_params(),
        points: config.points,
        checked,
        passed: checked - failures.len(),
        tolerance: config.tolerance,
        max_rel_error,
        rejected_points: rejected,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub passed: bool,
    pub dual_primal: DualPrimalSummary,
    pub gradient: GradientSummary,
}

pub fn run_oracles(sweep: &SweepConfig, gradient: &GradientCheckConfig, exec: Execution) -> Result<OracleReport> {
    let dual_primal = dual_primal_sweep(sweep, exec)?;
    let gradient = gradient_check(gradient, exec)?;
    Ok(OracleReport {
        passed: dual_primal.failures.is_empty() && gradient.failures.is_empty(),
        dual_primal,
        gradient,
    })
}
