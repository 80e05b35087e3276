//! Discrete-time schedule tables.
//!
//! A table holds per-step rates `theta[t]` and `sigma2[t]` for the interval
//! `[t, t+1)`, the uniform increment `dt`, and the cumulative integrals
//!
//! ```text
//! mbar[t]     = -sum_{z<t} (theta[z] + sigma2[z] / 2) * dt
//! sigbar2[t]  =  sum_{z<t} sigma2[z] * dt
//! thetabar[t] =  sum_{z<t} theta[z] * dt
//! ```
//!
//! `build_schedule` picks `dt` and the noise scale so that
//! `exp(mbar[T]) = delta` and, when noise is present, `sigbar2[T] = 1`.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaKind {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    Linear,
    Constant,
    /// Noise-free table; the SDE degenerates to the mean-reverting ODE.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Number of discrete steps `T`.
    pub steps: usize,
    pub theta_kind: ThetaKind,
    pub sigma_kind: SigmaKind,
    /// Deterministic contraction `exp(mbar[T])` reached at the last step.
    pub delta: f64,
    /// Multiplies the θ shape. The normalisation of the table absorbs it.
    pub theta_scale: f64,
    /// Multiplies the σ² shape. The normalisation of the table absorbs it.
    pub sigma_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            theta_kind: ThetaKind::Cosine,
            sigma_kind: SigmaKind::Linear,
            delta: 0.001,
            theta_scale: 1.0,
            sigma_scale: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(FodError::InvalidSchedule("T must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(FodError::InvalidSchedule(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.theta_scale > 0.0 && self.theta_scale.is_finite()) {
            return Err(FodError::InvalidSchedule(format!(
                "theta_scale must be positive, got {}",
                self.theta_scale
            )));
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return Err(FodError::InvalidSchedule(format!(
                "sigma_scale must be positive, got {}",
                self.sigma_scale
            )));
        }
        Ok(())
    }

    pub fn is_noise_free(&self) -> bool {
        self.sigma_kind == SigmaKind::Zero
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    theta: Vec<f64>,
    sigma2: Vec<f64>,
    dt: f64,
    mbar: Vec<f64>,
    sigbar2: Vec<f64>,
    thetabar: Vec<f64>,
}

fn theta_shape(kind: ThetaKind, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|t| match kind {
            ThetaKind::Cosine => 1.0 - (PI * (t as f64 + 0.5) / steps as f64).cos(),
            ThetaKind::Constant => 1.0,
        })
        .collect()
}

fn sigma2_shape(kind: SigmaKind, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|t| match kind {
            SigmaKind::Linear => (t as f64 + 0.5) / steps as f64,
            SigmaKind::Constant => 1.0,
            SigmaKind::Zero => 0.0,
        })
        .collect()
}

/// Builds the table for `cfg`; see the module docs for the constraints it meets.
pub fn build_schedule(cfg: &ScheduleConfig) -> Result<ScheduleTable> {
    cfg.validate()?;
    let steps = cfg.steps;
    let log_delta = cfg.delta.ln();

    let theta: Vec<f64> = theta_shape(cfg.theta_kind, steps)
        .into_iter()
        .map(|v| v * cfg.theta_scale)
        .collect();
    let theta_sum: f64 = theta.iter().sum();
    if !(theta_sum > 0.0) || theta.iter().any(|&v| v <= 0.0) {
        return Err(FodError::InvalidSchedule("theta shape must be strictly positive".into()));
    }

    let shape2: Vec<f64> = sigma2_shape(cfg.sigma_kind, steps)
        .into_iter()
        .map(|v| v * cfg.sigma_scale * cfg.sigma_scale)
        .collect();

    let (dt, sigma2) = if cfg.is_noise_free() {
        (-log_delta / theta_sum, shape2)
    } else {
        // Two linear constraints in (dt, noise scale):
        //   c * sum(shape2) * dt = 1
        //   dt * (sum(theta) + c * sum(shape2) / 2) = -ln(delta)
        // so dt * sum(theta) = -ln(delta) - 1/2.
        let budget = -log_delta - 0.5;
        if budget <= 0.0 {
            return Err(FodError::InvalidSchedule(format!(
                "delta = {} leaves no room for unit total noise variance (need delta < e^-0.5)",
                cfg.delta
            )));
        }
        let dt = budget / theta_sum;
        let shape_sum: f64 = shape2.iter().sum();
        let scale = 1.0 / (shape_sum * dt);
        (dt, shape2.into_iter().map(|v| v * scale).collect())
    };

    ScheduleTable::from_rates(theta, sigma2, dt)
}

impl ScheduleTable {
    /// Builds a table from explicit per-step rates without enforcing the
    /// terminal constraints of [`build_schedule`].
    pub fn from_rates(theta: Vec<f64>, sigma2: Vec<f64>, dt: f64) -> Result<Self> {
        if theta.is_empty() {
            return Err(FodError::InvalidSchedule("T must be at least 1".into()));
        }
        if theta.len() != sigma2.len() {
            return Err(FodError::DimensionMismatch { expected: theta.len(), got: sigma2.len() });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FodError::InvalidSchedule(format!("dt must be positive, got {dt}")));
        }
        if theta.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(FodError::InvalidSchedule("theta rates must be positive and finite".into()));
        }
        if sigma2.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(FodError::InvalidSchedule("sigma2 rates must be non-negative and finite".into()));
        }

        let steps = theta.len();
        let mut mbar = Vec::with_capacity(steps + 1);
        let mut sigbar2 = Vec::with_capacity(steps + 1);
        let mut thetabar = Vec::with_capacity(steps + 1);
        let (mut m, mut s, mut th) = (0.0f64, 0.0f64, 0.0f64);
        mbar.push(m);
        sigbar2.push(s);
        thetabar.push(th);
        for (&a, &b) in theta.iter().zip(&sigma2) {
            m -= (a + 0.5 * b) * dt;
            s += b * dt;
            th += a * dt;
            mbar.push(m);
            sigbar2.push(s);
            thetabar.push(th);
        }

        Ok(Self { theta, sigma2, dt, mbar, sigbar2, thetabar })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.theta.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn mbar(&self) -> &[f64] {
        &self.mbar
    }

    pub fn sigbar2(&self) -> &[f64] {
        &self.sigbar2
    }

    pub fn thetabar(&self) -> &[f64] {
        &self.thetabar
    }

    pub fn is_noise_free(&self) -> bool {
        self.sigma2.iter().all(|&v| v == 0.0)
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(FodError::StepOutOfRange { index: t, steps: self.steps() });
        }
        Ok(())
    }

    pub(crate) fn check_rate_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(FodError::StepOutOfRange { index: t, steps: self.steps() });
        }
        Ok(())
    }

    fn check_interval(&self, s: usize, t: usize) -> Result<()> {
        self.check_step(s)?;
        self.check_step(t)?;
        if s > t {
            return Err(FodError::ReversedInterval { start: s, end: t });
        }
        Ok(())
    }

    /// `mbar[t] - mbar[s]`, the deterministic log-contraction over `[s, t]`.
    pub fn mbar_between(&self, s: usize, t: usize) -> Result<f64> {
        self.check_interval(s, t)?;
        Ok(self.mbar[t] - self.mbar[s])
    }

    /// `sqrt(sigbar2[t] - sigbar2[s])`, the log-space noise scale over `[s, t]`.
    pub fn sigbar_between(&self, s: usize, t: usize) -> Result<f64> {
        self.check_interval(s, t)?;
        // Guard against a -0.0ulp difference producing NaN.
        Ok((self.sigbar2[t] - self.sigbar2[s]).max(0.0).sqrt())
    }

    /// `exp(-thetabar[t])`, the ODE interpolation weight on the source point.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok((-self.thetabar[t]).exp())
    }

    /// Writes the table as CSV: `T + 1` rows, with the rate columns empty on
    /// the terminal row since rates live on intervals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,theta,sigma2,mbar,sigbar2,thetabar,alpha")?;
        for t in 0..=self.steps() {
            let alpha = (-self.thetabar[t]).exp();
            if t < self.steps() {
                writeln!(
                    w,
                    "{t},{},{},{},{},{},{alpha}",
                    self.theta[t], self.sigma2[t], self.mbar[t], self.sigbar2[t], self.thetabar[t]
                )?;
            } else {
                writeln!(w, "{t},,,{},{},{},{alpha}", self.mbar[t], self.sigbar2[t], self.thetabar[t])?;
            }
        }
        Ok(())
    }
}
