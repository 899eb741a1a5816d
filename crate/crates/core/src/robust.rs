//! Worst-case risk over a KL ball around the uniform empirical distribution.
//!
//! For losses `ℓ_1..ℓ_n` and radius `ρ`:
//!
//! ```text
//! primal:  max_q Σ q_i ℓ_i   s.t.  q ∈ simplex,  Σ q_i log(n q_i) ≤ ρ
//! dual:    inf_{η>0}  ηρ + η log((1/n) Σ exp(ℓ_i / η))
//! tilt:    q_i(η) ∝ exp(ℓ_i / η)
//! ```
//!
//! The dual derivative in `η` is `ρ - KL(q(η))`, and `KL(q(η))` decreases in `η`
//! from `log(n/m)` (m = multiplicity of the maximum loss) towards 0. Hence:
//! `ρ = 0` gives the mean with uniform weights, `ρ ≥ log(n/m)` gives the maximum
//! with weights uniform over the maximisers, and anything in between has a unique
//! interior `η*` with `KL(q(η*)) = ρ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Losses within this distance of the maximum count as maximal.
pub const MAX_TIE_TOL: f64 = 1e-12;
/// Post-search sweep size checking that no bracket point beats the golden-section result.
const SWEEP_POINTS: usize = 32;
const DENSE_SWEEP_POINTS: usize = 1024;
const GOLDEN_REL_TOL: f64 = 1e-10;

/// Per-group radii `ρ_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RobustnessConfig {
    /// One radius for every group.
    Scalar(f64),
    PerGroup(Vec<f64>),
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig::Scalar(0.3)
    }
}

impl RobustnessConfig {
    pub fn rho(&self, group: usize) -> f64 {
        match self {
            RobustnessConfig::Scalar(r) => *r,
            RobustnessConfig::PerGroup(v) => v.get(group).copied().unwrap_or(f64::NAN),
        }
    }

    pub fn validate(&self, num_groups: usize) -> Result<()> {
        if let RobustnessConfig::PerGroup(v) = self {
            if v.len() != num_groups {
                return Err(Error::InvalidConfig(format!(
                    "rho lists {} radii for {num_groups} groups",
                    v.len()
                )));
            }
        }
        for g in 0..num_groups {
            let r = self.rho(g);
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "rho for group {g} must be finite and >= 0, got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Where the dual optimum sits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualVariable {
    Interior(f64),
    /// `ρ = 0`: the optimum is the `η → ∞` limit (plain mean).
    Infinite,
    /// `ρ ≥ log(n/m)`: the optimum is the `η → 0` limit (maximum loss).
    Boundary,
}

impl DualVariable {
    pub fn interior(self) -> Option<f64> {
        match self {
            DualVariable::Interior(eta) => Some(eta),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustRiskSolution {
    pub value: f64,
    pub eta_star: DualVariable,
    pub weights: Vec<f64>,
    /// `|dual value - Σ q_i ℓ_i|`.
    pub dual_gap_bound: f64,
}

fn check_losses(losses: &[f64]) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty loss slice".into()));
    }
    if let Some(v) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss {v}")));
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be finite and > 0, got {eta}")));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho must be finite and >= 0, got {rho}")));
    }
    Ok(())
}

fn max_of(losses: &[f64]) -> f64 {
    losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(losses: &[f64]) -> f64 {
    losses.iter().copied().fold(f64::INFINITY, f64::min)
}

fn mean_of(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// `Σ q_i log(n q_i)` with `0 log 0 = 0`.
pub fn kl_divergence(q: &[f64], n: usize) -> Result<f64> {
    if q.len() != n || n == 0 {
        return Err(Error::Simplex(format!("{} weights for n = {n}", q.len())));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-10 || q.iter().any(|&v| v < -1e-10 || !v.is_finite()) {
        return Err(Error::Simplex(format!("weights sum to {total}")));
    }
    let nf = n as f64;
    Ok(q
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * (nf * v).ln())
        .sum::<f64>()
        .max(0.0))
}

/// `log((1/n) Σ exp((ℓ_i - max)/η))`, the shifted log-mean-exp.
fn shifted_log_mean_exp(losses: &[f64], max: f64, eta: f64) -> f64 {
    let s: f64 = losses.iter().map(|&l| ((l - max) / eta).exp()).sum();
    (s / losses.len() as f64).ln()
}

/// `ηρ + η log((1/n) Σ exp(ℓ_i/η))`, evaluated as
/// `max ℓ + η log((1/n) Σ exp((ℓ_i - max ℓ)/η)) + ηρ`.
pub fn dual_objective(eta: f64, losses: &[f64], rho: f64) -> Result<f64> {
    check_eta(eta)?;
    check_losses(losses)?;
    Ok(dual_unchecked(eta, losses, rho))
}

fn dual_unchecked(eta: f64, losses: &[f64], rho: f64) -> f64 {
    let max = max_of(losses);
    max + eta * shifted_log_mean_exp(losses, max, eta) + eta * rho
}

/// Exponentially tilted weights `q_i ∝ exp(ℓ_i/η)`.
pub fn tilted_weights(losses: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_eta(eta)?;
    check_losses(losses)?;
    Ok(tilt_unchecked(losses, eta))
}

fn tilt_unchecked(losses: &[f64], eta: f64) -> Vec<f64> {
    let max = max_of(losses);
    let e: Vec<f64> = losses.iter().map(|&l| ((l - max) / eta).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// KL of the tilted weights and their loss variance, both at `η`.
fn tilt_kl_and_variance(losses: &[f64], eta: f64) -> (f64, f64) {
    let max = max_of(losses);
    let q = tilt_unchecked(losses, eta);
    let lme = shifted_log_mean_exp(losses, max, eta);
    // log(n q_i) = (ℓ_i - max)/η - lme
    let kl: f64 = q
        .iter()
        .zip(losses)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, l)| qi * ((l - max) / eta - lme))
        .sum();
    let mean: f64 = q.iter().zip(losses).map(|(a, b)| a * b).sum();
    let var: f64 = q.iter().zip(losses).map(|(a, b)| a * (b - mean).powi(2)).sum();
    (kl.max(0.0), var)
}

/// Golden-section minimisation of `f` on `[lo, hi]` until the bracket is
/// narrower than `tol`. Returns the best abscissa seen.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..400 {
        if hi - lo <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// Worst-case risk over the KL ball of radius `rho` around the uniform weights.
///
/// Interior cases minimise the dual over `log η` by golden section on
/// `[1e-6 · spread, 1e3 · spread]`, confirm the result against a 32-point sweep of
/// the bracket, then polish `η*` with safeguarded Newton steps on the
/// stationarity condition `KL(q(η)) = ρ`.
pub fn solve_robust_risk(losses: &[f64], rho: f64) -> Result<RobustRiskSolution> {
    check_losses(losses)?;
    check_rho(rho)?;
    let n = losses.len();
    let mean = mean_of(losses);
    let max = max_of(losses);

    if rho == 0.0 {
        let weights = vec![1.0 / n as f64; n];
        let expectation: f64 = weights.iter().zip(losses).map(|(a, b)| a * b).sum();
        return Ok(RobustRiskSolution {
            value: mean,
            eta_star: DualVariable::Infinite,
            weights,
            dual_gap_bound: (mean - expectation).abs(),
        });
    }

    let maximal: Vec<bool> = losses.iter().map(|&l| l >= max - MAX_TIE_TOL).collect();
    let m = maximal.iter().filter(|&&b| b).count();
    if rho >= (n as f64 / m as f64).ln() {
        let weights: Vec<f64> = maximal
            .iter()
            .map(|&b| if b { 1.0 / m as f64 } else { 0.0 })
            .collect();
        let expectation: f64 = weights.iter().zip(losses).map(|(a, b)| a * b).sum();
        return Ok(RobustRiskSolution {
            value: max,
            eta_star: DualVariable::Boundary,
            weights,
            dual_gap_bound: (max - expectation).abs(),
        });
    }

    let spread = max - min_of(losses);
    let (t_lo, t_hi) = ((1e-6 * spread).ln(), (1e3 * spread).ln());
    let dual_t = |t: f64| dual_unchecked(t.exp(), losses, rho);

    let mut t_best = golden_section(dual_t, t_lo, t_hi, GOLDEN_REL_TOL);
    let mut f_best = dual_t(t_best);

    let sweep_min = (0..SWEEP_POINTS)
        .map(|i| t_lo + (t_hi - t_lo) * i as f64 / (SWEEP_POINTS - 1) as f64)
        .map(|t| (t, dual_t(t)))
        .fold((t_best, f_best), |a, b| if b.1 < a.1 { b } else { a });
    if sweep_min.1 < f_best - 1e-9 {
        // Not unimodal after all: dense sweep, then refine between the neighbours
        // of the best grid point.
        let step = (t_hi - t_lo) / (DENSE_SWEEP_POINTS - 1) as f64;
        let (i_best, _) = (0..DENSE_SWEEP_POINTS)
            .map(|i| (i, dual_t(t_lo + step * i as f64)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let lo = t_lo + step * i_best.saturating_sub(1) as f64;
        let hi = (t_lo + step * (i_best + 1) as f64).min(t_hi);
        t_best = golden_section(dual_t, lo, hi, GOLDEN_REL_TOL);
        f_best = dual_t(t_best);
    }

    // Newton polish on g(t) = KL(q(e^t)) - ρ, which decreases in t with
    // g'(t) = -Var_q(ℓ)/η².
    let (mut lo, mut hi) = (t_lo, t_hi);
    let g_lo = tilt_kl_and_variance(losses, lo.exp()).0 - rho;
    let g_hi = tilt_kl_and_variance(losses, hi.exp()).0 - rho;
    if g_lo > 0.0 && g_hi < 0.0 {
        let mut t = t_best;
        for _ in 0..200 {
            let eta = t.exp();
            let (kl, var) = tilt_kl_and_variance(losses, eta);
            let g = kl - rho;
            if g == 0.0 {
                break;
            }
            if g > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let newton = if var > 0.0 { t + g * eta * eta / var } else { f64::NAN };
            let next = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - t).abs() <= 1e-15 * t.abs().max(1.0) || hi - lo <= 1e-15 * t.abs().max(1.0) {
                t = next;
                break;
            }
            t = next;
        }
        let f_polished = dual_t(t);
        if f_polished <= f_best + 1e-12 {
            t_best = t;
            f_best = f_polished;
        }
    }

    let eta = t_best.exp();
    let weights = tilt_unchecked(losses, eta);
    let expectation: f64 = weights.iter().zip(losses).map(|(a, b)| a * b).sum();
    Ok(RobustRiskSolution {
        value: f_best,
        eta_star: DualVariable::Interior(eta),
        weights,
        dual_gap_bound: (f_best - expectation).abs(),
    })
}

/// Result of the primal brute-force search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalSolution {
    pub value: f64,
    pub weights: Vec<f64>,
}

const ORACLE_MAX_N: usize = 6;
/// Barrier weight schedule: start, growth factor and final value.
const BARRIER_START: f64 = 1.0;
const BARRIER_GROWTH: f64 = 10.0;
const BARRIER_END: f64 = 1e13;

/// Primal search over the simplex, independent of the dual and of tilting.
///
/// Log-barrier path following: for increasing `t` it maximizes
/// `t Σ q_i ℓ_i + log(ρ - KL(q)) + Σ log q_i` subject to `Σ q_i = 1` by damped
/// Newton steps, starting from the uniform point. The last barrier weight leaves
/// an optimality gap of at most `(n + 1) / t`.
pub fn brute_force_primal(losses: &[f64], rho: f64) -> Result<PrimalSolution> {
    check_losses(losses)?;
    check_rho(rho)?;
    let n = losses.len();
    if n > ORACLE_MAX_N {
        return Err(Error::OracleScale(n));
    }
    if n == 1 || rho == 0.0 {
        return Ok(PrimalSolution {
            value: mean_of(losses),
            weights: vec![1.0 / n as f64; n],
        });
    }
    let mut q = vec![1.0 / n as f64; n];
    let mut t = BARRIER_START;
    loop {
        centering(losses, rho, t, &mut q);
        if t >= BARRIER_END {
            break;
        }
        t *= BARRIER_GROWTH;
    }
    let value = q.iter().zip(losses).map(|(a, b)| a * b).sum();
    Ok(PrimalSolution { value, weights: q })
}

fn kl_raw(q: &[f64]) -> f64 {
    let nf = q.len() as f64;
    q.iter().filter(|&&v| v > 0.0).map(|&v| v * (nf * v).ln()).sum()
}

/// Barrier objective, or `None` outside the strict interior.
fn barrier(losses: &[f64], rho: f64, t: f64, q: &[f64]) -> Option<f64> {
    if q.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let slack = rho - kl_raw(q);
    if slack <= 0.0 {
        return None;
    }
    let linear: f64 = q.iter().zip(losses).map(|(a, b)| a * b).sum();
    Some(t * linear + slack.ln() + q.iter().map(|v| v.ln()).sum::<f64>())
}

/// Newton iterations on the equality-constrained barrier problem.
///
/// The negated Hessian is `D + a aᵀ` with `D = diag(1/(s q_i) + 1/q_i²)` and
/// `a = ∇KL / s`, so it is inverted with the Sherman–Morrison formula.
fn centering(losses: &[f64], rho: f64, t: f64, q: &mut [f64]) {
    let n = q.len();
    let nf = n as f64;
    for _ in 0..100 {
        let slack = rho - kl_raw(q);
        let a: Vec<f64> = q.iter().map(|&v| ((nf * v).ln() + 1.0) / slack).collect();
        let g: Vec<f64> = (0..n).map(|i| t * losses[i] - a[i] + 1.0 / q[i]).collect();
        let d: Vec<f64> = q.iter().map(|&v| 1.0 / (slack * v) + 1.0 / (v * v)).collect();
        let a_d_a: f64 = (0..n).map(|i| a[i] * a[i] / d[i]).sum();
        let solve = |v: &[f64]| -> Vec<f64> {
            let a_d_v: f64 = (0..n).map(|i| a[i] * v[i] / d[i]).sum();
            let c = a_d_v / (1.0 + a_d_a);
            (0..n).map(|i| (v[i] - a[i] * c) / d[i]).collect()
        };
        let m_g = solve(&g);
        let m_1 = solve(&vec![1.0; n]);
        let nu = -m_g.iter().sum::<f64>() / m_1.iter().sum::<f64>();
        let step: Vec<f64> = (0..n).map(|i| m_g[i] + nu * m_1[i]).collect();
        let decrement: f64 = step.iter().zip(&g).map(|(s, gi)| s * gi).sum();
        if decrement.is_nan() || decrement <= 1e-20 {
            return;
        }
        let current = barrier(losses, rho, t, q).expect("iterate stays interior");
        let mut size = 1.0;
        let mut accepted = false;
        while size > 1e-20 {
            let trial: Vec<f64> = q.iter().zip(&step).map(|(v, s)| v + size * s).collect();
            if let Some(value) = barrier(losses, rho, t, &trial) {
                if value >= current + 0.25 * size * decrement {
                    q.copy_from_slice(&trial);
                    accepted = true;
                    break;
                }
            }
            size *= 0.5;
        }
        if !accepted {
            return;
        }
    }
}
