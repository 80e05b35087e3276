//! Generation procedures.
//!
//! * [`sample_euler`]: Euler–Maruyama on the native grid.
//! * [`sample_markov`]: hops of size `k`, each restarting the exact
//!   transition from the current state around the current estimate `mu_hat`.
//! * [`sample_nonmarkov`]: hops of size `k`, each re-drawing the exact
//!   transition from the initial state `x_0`.
//! * [`sample_ode`]: deterministic integration of the noise-free drift.
//!
//! Noise for hop `h` of chain `c` is drawn from the stream keyed by
//! `(seed, c, h)`, so a chain's output does not depend on how many other
//! chains run or in which order.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::kernel::{check_dim, euler_increment, mu_estimate, scaled_flow_step};
use crate::noise::{keyed_rng, normal_vec, Domain};
use crate::schedules::ScheduleTable;

/// Anything that predicts the flow `mu - x_t` at a state and step.
pub trait FlowField {
    fn dim(&self) -> usize;

    fn flow(&self, x: &[f64], t: usize, steps: usize) -> Result<Vec<f64>>;
}

/// The exact flow `mu - x` towards a known target.
#[derive(Debug, Clone)]
pub struct OracleFlow {
    pub mu: Vec<f64>,
}

impl OracleFlow {
    pub fn new(mu: &[f64]) -> Self {
        Self { mu: mu.to_vec() }
    }
}

impl FlowField for OracleFlow {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn flow(&self, x: &[f64], _t: usize, _steps: usize) -> Result<Vec<f64>> {
        check_dim(self.mu.len(), x.len())?;
        Ok(self.mu.iter().zip(x).map(|(m, x)| m - x).collect())
    }
}

/// Predicts zero flow everywhere; every state is a fixed point.
#[derive(Debug, Clone, Copy)]
pub struct ZeroFlow(pub usize);

impl FlowField for ZeroFlow {
    fn dim(&self) -> usize {
        self.0
    }

    fn flow(&self, x: &[f64], _t: usize, _steps: usize) -> Result<Vec<f64>> {
        check_dim(self.0, x.len())?;
        Ok(vec![0.0; x.len()])
    }
}

impl<F: FlowField + ?Sized> FlowField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn flow(&self, x: &[f64], t: usize, steps: usize) -> Result<Vec<f64>> {
        (**self).flow(x, t, steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    /// State at each visited step.
    pub trajectory: Vec<Vec<f64>>,
    /// Visited steps, strictly increasing from 0 to T.
    pub visited: Vec<usize>,
    pub terminal: Vec<f64>,
    pub seed: u64,
}

impl SampleRun {
    fn new(x0: &[f64], seed: u64, capacity: usize) -> Self {
        let mut trajectory = Vec::with_capacity(capacity);
        trajectory.push(x0.to_vec());
        Self { trajectory, visited: vec![0], terminal: x0.to_vec(), seed }
    }

    fn push(&mut self, step: usize, x: Vec<f64>) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FodError::NonFiniteState { step });
        }
        self.visited.push(step);
        self.terminal.clone_from(&x);
        self.trajectory.push(x);
        Ok(())
    }
}

/// Hop grid `0, k, 2k, ..., T` with the last hop clamped onto `T`.
pub fn hop_grid(steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(FodError::InvalidArgument("step size k must be at least 1".into()));
    }
    if k > steps {
        return Err(FodError::InvalidArgument(format!("step size k = {k} exceeds T = {steps}")));
    }
    let mut grid: Vec<usize> = (0..steps).step_by(k).collect();
    grid.push(steps);
    Ok(grid)
}

/// `count` hops spread as evenly as integer steps allow.
pub fn even_grid(steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > steps {
        return Err(FodError::InvalidArgument(format!(
            "number of steps must lie in 1..={steps}, got {count}"
        )));
    }
    Ok((0..=count).map(|i| i * steps / count).collect())
}

fn hop_noise(seed: u64, chain: u64, hop: usize, dim: usize) -> Vec<f64> {
    let mut rng = keyed_rng(seed, Domain::Sampler, chain, hop as u64);
    normal_vec(&mut rng, dim)
}

fn check_model<F: FlowField>(model: &F, x0: &[f64]) -> Result<()> {
    check_dim(model.dim(), x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(FodError::NonFiniteState { step: 0 });
    }
    Ok(())
}

pub fn sample_euler<F: FlowField>(model: &F, x0: &[f64], tab: &ScheduleTable, seed: u64) -> Result<SampleRun> {
    sample_euler_chain(model, x0, tab, seed, 0)
}

pub fn sample_euler_chain<F: FlowField>(
    model: &F,
    x0: &[f64],
    tab: &ScheduleTable,
    seed: u64,
    chain: u64,
) -> Result<SampleRun> {
    check_model(model, x0)?;
    let steps = tab.steps();
    let mut run = SampleRun::new(x0, seed, steps + 1);
    let mut x = x0.to_vec();
    for t in 0..steps {
        let eps = hop_noise(seed, chain, t, x.len());
        let flow = model.flow(&x, t, steps)?;
        let dx = euler_increment(&x, &flow, t, &eps, tab)?;
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        run.push(t + 1, x.clone())?;
    }
    Ok(run)
}

pub fn sample_markov<F: FlowField>(
    model: &F,
    x0: &[f64],
    k: usize,
    tab: &ScheduleTable,
    seed: u64,
) -> Result<SampleRun> {
    sample_markov_chain(model, x0, k, tab, seed, 0)
}

pub fn sample_markov_chain<F: FlowField>(
    model: &F,
    x0: &[f64],
    k: usize,
    tab: &ScheduleTable,
    seed: u64,
    chain: u64,
) -> Result<SampleRun> {
    check_model(model, x0)?;
    let steps = tab.steps();
    let grid = hop_grid(steps, k)?;
    let mut run = SampleRun::new(x0, seed, grid.len());
    let mut x = x0.to_vec();
    for (hop, w) in grid.windows(2).enumerate() {
        let (t, next) = (w[0], w[1]);
        let eps = hop_noise(seed, chain, hop, x.len());
        let mu_hat = mu_estimate(&x, &model.flow(&x, t, steps)?)?;
        x = scaled_flow_step(&x, &mu_hat, tab.mbar_between(t, next)?, tab.sigbar_between(t, next)?, &eps);
        run.push(next, x.clone())?;
    }
    Ok(run)
}

pub fn sample_nonmarkov<F: FlowField>(
    model: &F,
    x0: &[f64],
    k: usize,
    tab: &ScheduleTable,
    seed: u64,
) -> Result<SampleRun> {
    sample_nonmarkov_chain(model, x0, k, tab, seed, 0)
}

pub fn sample_nonmarkov_chain<F: FlowField>(
    model: &F,
    x0: &[f64],
    k: usize,
    tab: &ScheduleTable,
    seed: u64,
    chain: u64,
) -> Result<SampleRun> {
    check_model(model, x0)?;
    let steps = tab.steps();
    let grid = hop_grid(steps, k)?;
    let mut run = SampleRun::new(x0, seed, grid.len());
    let mut x = x0.to_vec();
    for (hop, w) in grid.windows(2).enumerate() {
        let (t, next) = (w[0], w[1]);
        let eps = hop_noise(seed, chain, hop, x.len());
        let mu_hat = mu_estimate(&x, &model.flow(&x, t, steps)?)?;
        x = scaled_flow_step(x0, &mu_hat, tab.mbar()[next], tab.sigbar_between(0, next)?, &eps);
        run.push(next, x.clone())?;
    }
    Ok(run)
}

/// How [`sample_ode_with`] advances the state across one hop `[t, t']`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeUpdate {
    /// `x += (thetabar[t'] - thetabar[t]) * flow`
    Euler,
    /// `x += (1 - exp(-(thetabar[t'] - thetabar[t]))) * flow`, exact for a
    /// flow that is exactly `mu - x`.
    Exponential,
}

pub fn sample_ode<F: FlowField>(model: &F, x0: &[f64], steps: usize, tab: &ScheduleTable) -> Result<SampleRun> {
    sample_ode_with(model, x0, steps, tab, OdeUpdate::Euler)
}

pub fn sample_ode_with<F: FlowField>(
    model: &F,
    x0: &[f64],
    steps: usize,
    tab: &ScheduleTable,
    update: OdeUpdate,
) -> Result<SampleRun> {
    check_model(model, x0)?;
    let grid = even_grid(tab.steps(), steps)?;
    let mut run = SampleRun::new(x0, 0, grid.len());
    let mut x = x0.to_vec();
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let rate = tab.thetabar()[next] - tab.thetabar()[t];
        let gain = match update {
            OdeUpdate::Euler => rate,
            OdeUpdate::Exponential => -(-rate).exp_m1(),
        };
        let flow = model.flow(&x, t, tab.steps())?;
        for (xi, f) in x.iter_mut().zip(&flow) {
            *xi += gain * f;
        }
        run.push(next, x.clone())?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Euler,
    Markov,
    Nonmarkov,
    Ode,
}

impl std::str::FromStr for SamplerKind {
    type Err = FodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "markov" => Ok(Self::Markov),
            "nonmarkov" => Ok(Self::Nonmarkov),
            "ode" => Ok(Self::Ode),
            other => Err(FodError::InvalidArgument(format!("unknown sampler '{other}'"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Markov => "markov",
            Self::Nonmarkov => "nonmarkov",
            Self::Ode => "ode",
        })
    }
}

/// A sampler together with its step setting. `k` is the hop size for the
/// fast samplers; for the ODE sampler the step count is `ceil(T / k)`.
/// Euler ignores `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub k: usize,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, k: usize) -> Self {
        Self { kind, k }
    }

    pub fn run_chain<F: FlowField>(
        &self,
        model: &F,
        x0: &[f64],
        tab: &ScheduleTable,
        seed: u64,
        chain: u64,
    ) -> Result<SampleRun> {
        match self.kind {
            SamplerKind::Euler => sample_euler_chain(model, x0, tab, seed, chain),
            SamplerKind::Markov => sample_markov_chain(model, x0, self.k, tab, seed, chain),
            SamplerKind::Nonmarkov => sample_nonmarkov_chain(model, x0, self.k, tab, seed, chain),
            SamplerKind::Ode => {
                if self.k == 0 {
                    return Err(FodError::InvalidArgument("step size k must be at least 1".into()));
                }
                let count = tab.steps().div_ceil(self.k);
                let mut run = sample_ode(model, x0, count, tab)?;
                run.seed = seed;
                Ok(run)
            }
        }
    }

    /// Runs one chain per row of `x0s`; chain ids are row indices.
    pub fn run_batch<F: FlowField>(
        &self,
        model: &F,
        x0s: ArrayView2<f64>,
        tab: &ScheduleTable,
        seed: u64,
    ) -> Result<Vec<SampleRun>> {
        x0s.rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| self.run_chain(model, &row.to_vec(), tab, seed, i as u64))
            .collect()
    }

    /// Terminal states of [`run_batch`](Self::run_batch) stacked as rows.
    pub fn terminals<F: FlowField>(
        &self,
        model: &F,
        x0s: ArrayView2<f64>,
        tab: &ScheduleTable,
        seed: u64,
    ) -> Result<Array2<f64>> {
        let runs = self.run_batch(model, x0s, tab, seed)?;
        let mut out = Array2::zeros(x0s.raw_dim());
        for (mut row, run) in out.rows_mut().into_iter().zip(&runs) {
            row.assign(&ndarray::ArrayView1::from(&run.terminal));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ode_state, transition_sample};
    use crate::schedules::{build_schedule, ScheduleConfig, SigmaKind};

    fn default_tab() -> ScheduleTable {
        build_schedule(&ScheduleConfig::default()).unwrap()
    }

    fn ode_tab(steps: usize) -> ScheduleTable {
        build_schedule(&ScheduleConfig { steps, sigma_kind: SigmaKind::Zero, ..Default::default() }).unwrap()
    }

    #[test]
    fn grids() {
        assert_eq!(hop_grid(10, 3).unwrap(), vec![0, 3, 6, 9, 10]);
        assert_eq!(hop_grid(10, 5).unwrap(), vec![0, 5, 10]);
        assert_eq!(hop_grid(10, 10).unwrap(), vec![0, 10]);
        assert!(hop_grid(10, 11).is_err());
        assert!(hop_grid(10, 0).is_err());
        assert_eq!(even_grid(10, 4).unwrap(), vec![0, 2, 5, 7, 10]);
        assert!(even_grid(10, 11).is_err());
    }

    #[test]
    fn zero_flow_is_fixed_point() {
        let tab = default_tab();
        let x0 = [0.7, -1.3];
        let zero = ZeroFlow(2);
        for run in [
            sample_euler(&zero, &x0, &tab, 3).unwrap(),
            sample_markov(&zero, &x0, 7, &tab, 3).unwrap(),
            sample_nonmarkov(&zero, &x0, 7, &tab, 3).unwrap(),
            sample_ode(&zero, &x0, 100, &tab).unwrap(),
        ] {
            assert_eq!(run.terminal, x0.to_vec());
            assert_eq!(*run.visited.last().unwrap(), 100);
            assert_eq!(run.visited[0], 0);
            assert_eq!(run.trajectory.len(), run.visited.len());
        }
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let tab = default_tab();
        let oracle = OracleFlow::new(&[1.0, -2.0]);
        let x0 = [0.1, 0.2];
        assert_eq!(sample_euler(&oracle, &x0, &tab, 9).unwrap(), sample_euler(&oracle, &x0, &tab, 9).unwrap());
        assert_eq!(
            sample_markov(&oracle, &x0, 10, &tab, 9).unwrap(),
            sample_markov(&oracle, &x0, 10, &tab, 9).unwrap()
        );
        assert_ne!(sample_euler(&oracle, &x0, &tab, 9).unwrap(), sample_euler(&oracle, &x0, &tab, 10).unwrap());
    }

    #[test]
    fn single_hop_reduces_to_exact_transition() {
        let tab = default_tab();
        let mu = [1.0, -2.0];
        let x0 = [0.1, 0.2];
        let oracle = OracleFlow::new(&mu);
        let markov = sample_markov(&oracle, &x0, 100, &tab, 5).unwrap();
        let nonmarkov = sample_nonmarkov(&oracle, &x0, 100, &tab, 5).unwrap();
        let eps = hop_noise(5, 0, 0, 2);
        let exact = transition_sample(&x0, &mu, 0, 100, &eps, &tab).unwrap();
        assert_eq!(markov.terminal, exact);
        assert_eq!(nonmarkov.terminal, exact);
        assert_eq!(markov.visited, vec![0, 100]);
    }

    #[test]
    fn first_hop_identity() {
        let tab = default_tab();
        let model = OracleFlow::new(&[0.4, 0.9]);
        let x0 = [-1.0, 2.5];
        for k in [1, 5, 10, 33] {
            let a = sample_markov(&model, &x0, k, &tab, 21).unwrap();
            let b = sample_nonmarkov(&model, &x0, k, &tab, 21).unwrap();
            assert_eq!(a.trajectory[1], b.trajectory[1]);
            assert_eq!(a.visited[1], k);
        }
    }

    #[test]
    fn noise_free_fast_samplers_telescope() {
        let tab = ode_tab(100);
        let mu = [0.5, -1.5];
        let x0 = [2.0, 1.0];
        let oracle = OracleFlow::new(&mu);
        let want = ode_state(&x0, &mu, 100, &tab).unwrap();
        for k in [1, 3, 7, 10, 100] {
            for run in [
                sample_markov(&oracle, &x0, k, &tab, 1).unwrap(),
                sample_nonmarkov(&oracle, &x0, k, &tab, 1).unwrap(),
            ] {
                for i in 0..2 {
                    assert!(((run.terminal[i] - want[i]) / want[i]).abs() < 1e-9);
                    assert!((run.terminal[i] - (mu[i] + 0.001 * (x0[i] - mu[i]))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exponential_ode_update_reproduces_closed_form() {
        let tab = ode_tab(100);
        let mu = [0.5, -1.5];
        let x0 = [2.0, 1.0];
        let run = sample_ode_with(&OracleFlow::new(&mu), &x0, 20, &tab, OdeUpdate::Exponential).unwrap();
        for (step, x) in run.visited.iter().zip(&run.trajectory) {
            let want = ode_state(&x0, &mu, *step, &tab).unwrap();
            for i in 0..2 {
                assert!((x[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ode_euler_is_first_order() {
        let mu = [0.0];
        let x0 = [1.0];
        let err = |steps: usize| {
            let tab = ode_tab(steps);
            let run = sample_ode(&OracleFlow::new(&mu), &x0, steps, &tab).unwrap();
            let want = ode_state(&x0, &mu, steps, &tab).unwrap();
            (run.terminal[0] - want[0]).abs()
        };
        let ratio = err(100) / err(200);
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn oracle_euler_noise_free_terminal() {
        let tab = ode_tab(100);
        let mu = [1.0, -2.0];
        let x0 = [3.0, 0.5];
        let run = sample_euler(&OracleFlow::new(&mu), &x0, &tab, 0).unwrap();
        let want = ode_state(&x0, &mu, 100, &tab).unwrap();
        for i in 0..2 {
            assert!((run.terminal[i] - mu[i]).abs() <= 0.001 * (x0[i] - mu[i]).abs());
            assert!(((run.terminal[i] - want[i]) / want[i]).abs() < 0.02);
        }
    }

    #[test]
    fn oracle_sign_pattern_is_preserved() {
        let tab = default_tab();
        let mu = [0.0, 1.0, -1.0];
        let x0 = [1.0, 0.0, -1.0];
        let oracle = OracleFlow::new(&mu);
        for seed in 0..20 {
            for run in [
                sample_markov(&oracle, &x0, 10, &tab, seed).unwrap(),
                sample_nonmarkov(&oracle, &x0, 10, &tab, seed).unwrap(),
            ] {
                for i in 0..3 {
                    assert_eq!((mu[i] - run.terminal[i]).signum(), (mu[i] - x0[i]).signum());
                }
                assert_eq!(run.terminal[2], -1.0);
            }
        }
    }

    #[test]
    fn errors() {
        let tab = default_tab();
        let oracle = OracleFlow::new(&[0.0]);
        assert!(sample_markov(&oracle, &[1.0], 101, &tab, 0).is_err());
        assert!(sample_nonmarkov(&oracle, &[1.0], 0, &tab, 0).is_err());
        assert!(matches!(sample_euler(&oracle, &[1.0, 2.0], &tab, 0), Err(FodError::DimensionMismatch { .. })));
        assert!(matches!(sample_euler(&oracle, &[f64::NAN], &tab, 0), Err(FodError::NonFiniteState { step: 0 })));
    }

    struct Exploding;

    impl FlowField for Exploding {
        fn dim(&self) -> usize {
            1
        }
        fn flow(&self, x: &[f64], _t: usize, _steps: usize) -> Result<Vec<f64>> {
            Ok(vec![x[0] * 1e300 + 1e300])
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let tab = default_tab();
        let err = sample_ode(&Exploding, &[1.0], 100, &tab).unwrap_err();
        assert!(matches!(err, FodError::NonFiniteState { step } if step > 0));
    }
}
