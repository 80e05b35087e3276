//! Closed-form transition kernel of the forward-only diffusion
//!
//! ```text
//! dx = theta_t (mu - x) dt + sigma_t (x - mu) dw
//! ```
//!
//! and the quantities derived from it. The flow `mu - x_t` is a geometric
//! Brownian motion, so every transition is a multiplicative log-normal factor
//! on the current flow. Randomness always enters through an explicit `eps`
//! argument.

use crate::error::{FodError, Result};
use crate::schedules::ScheduleTable;

/// Log-space statistics of one transition: `ln|mu - x_t| - ln|mu - x_s|`
/// is normal with this mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogStats {
    pub mean_shift: f64,
    pub variance: f64,
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(FodError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Samples `x_t` given `x_s` by the exact solution of the SDE.
///
/// Components with `x_s == mu` stay at `mu`: zero flow is absorbing.
pub fn transition_sample(
    x_s: &[f64],
    mu: &[f64],
    s: usize,
    t: usize,
    eps: &[f64],
    tab: &ScheduleTable,
) -> Result<Vec<f64>> {
    check_dim(x_s.len(), mu.len())?;
    check_dim(x_s.len(), eps.len())?;
    let shift = tab.mbar_between(s, t)?;
    let scale = tab.sigbar_between(s, t)?;
    Ok(scaled_flow_step(x_s, mu, shift, scale, eps))
}

/// `(x - centre) * exp(shift + scale * eps) + centre`, componentwise, with
/// exact zero flow preserved.
pub(crate) fn scaled_flow_step(x: &[f64], centre: &[f64], shift: f64, scale: f64, eps: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(centre)
        .zip(eps)
        .map(|((&x, &c), &e)| {
            if x == c {
                c
            } else {
                (x - c) * (shift + scale * e).exp() + c
            }
        })
        .collect()
}

pub fn transition_logstats(s: usize, t: usize, tab: &ScheduleTable) -> Result<LogStats> {
    let mean_shift = tab.mbar_between(s, t)?;
    let variance = tab.sigbar_between(s, t)?.powi(2);
    Ok(LogStats { mean_shift, variance })
}

/// Euler–Maruyama increment over `[t, t+1)` for a flow estimate `flow ≈ mu - x_t`.
///
/// The diffusion factor of the SDE is `x_t - mu = -flow`, hence the minus
/// sign on the noise term.
pub fn euler_increment(
    x_t: &[f64],
    flow: &[f64],
    t: usize,
    eps: &[f64],
    tab: &ScheduleTable,
) -> Result<Vec<f64>> {
    check_dim(x_t.len(), flow.len())?;
    check_dim(x_t.len(), eps.len())?;
    tab.check_rate_step(t)?;
    let drift = tab.theta()[t] * tab.dt();
    let diffusion = (tab.sigma2()[t] * tab.dt()).sqrt();
    Ok(flow
        .iter()
        .zip(eps)
        .map(|(&f, &e)| drift * f - diffusion * f * e)
        .collect())
}

/// Target estimate `mu_hat = x_t + flow`.
pub fn mu_estimate(x_t: &[f64], flow: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_t.len(), flow.len())?;
    Ok(x_t.iter().zip(flow).map(|(x, f)| x + f).collect())
}

/// KL divergence between two scalar log-normals given their log-space
/// means and variances. Sum over dimensions for the vector case.
pub fn lognormal_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> Result<f64> {
    for v in [v1, v2] {
        if !(v > 0.0) {
            return Err(FodError::NonPositiveVariance(v));
        }
    }
    let d = m1 - m2;
    Ok(d * d / (2.0 * v2) + v1 / (2.0 * v2) + 0.5 * (v2 / v1).ln() - 0.5)
}

/// Mode of the one-step log-normal transition density of the flow:
/// `(mu - x_t) * exp(-(theta + sigma2/2) dt - sigma2 dt)` with the rates of
/// the step `t -> t+1`.
pub fn optimal_next_flow(mu: &[f64], x_t: &[f64], t: usize, tab: &ScheduleTable) -> Result<Vec<f64>> {
    check_dim(mu.len(), x_t.len())?;
    tab.check_rate_step(t)?;
    let a = tab.theta()[t] * tab.dt();
    let b = tab.sigma2()[t] * tab.dt();
    let factor = (-(a + 0.5 * b) - b).exp();
    Ok(mu.iter().zip(x_t).map(|(m, x)| (m - x) * factor).collect())
}

/// State of the noise-free path at step `t`: `alpha_t x_0 + (1 - alpha_t) mu`.
pub fn ode_state(x_0: &[f64], mu: &[f64], t: usize, tab: &ScheduleTable) -> Result<Vec<f64>> {
    check_dim(x_0.len(), mu.len())?;
    let alpha = tab.alpha(t)?;
    Ok(x_0
        .iter()
        .zip(mu)
        .map(|(&x, &m)| alpha * x + (1.0 - alpha) * m)
        .collect())
}

/// Sign and log-magnitude of the flow `mu - x`, per component.
/// A zero flow is reported as `(0.0, -inf)`.
pub fn signed_log_flow(mu: &[f64], x: &[f64]) -> Vec<(f64, f64)> {
    mu.iter()
        .zip(x)
        .map(|(&m, &x)| {
            let f = m - x;
            if f == 0.0 {
                (0.0, f64::NEG_INFINITY)
            } else {
                (f.signum(), f.abs().ln())
            }
        })
        .collect()
}
