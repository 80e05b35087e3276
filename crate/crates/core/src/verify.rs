//! Monte-Carlo and brute-force oracles for the closed-form claims.
//!
//! A [`VerifyReport`] compares one statistic against its expected value.
//! Monte-Carlo checks pass within four standard errors; deterministic
//! checks carry an explicit tolerance and a zero standard error.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mmd, sample_pair, DatasetName, PairedDataset};
use crate::error::{FodError, Result};
use crate::kernel::{lognormal_kl, ode_state, optimal_next_flow, transition_logstats, transition_sample};
use crate::model::{FlowModel, ModelConfig};
use crate::noise::{derive_seed, keyed_rng, normal_vec, Domain};
use crate::samplers::{
    sample_euler, sample_markov, sample_markov_chain, sample_nonmarkov, sample_nonmarkov_chain, sample_ode_with,
    OdeUpdate, OracleFlow,
};
use crate::schedules::{build_schedule, ScheduleConfig, ScheduleTable, SigmaKind};
use crate::training::{cfm_batch, ml_batch, regression_loss, sfm_batch, taylor_gap};

/// Standard errors allowed for a Monte-Carlo check.
pub const Z_THRESHOLD: f64 = 4.0;
/// Relative slack added to every tolerance to absorb floating-point rounding.
pub const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub check_name: String,
    pub statistic: f64,
    pub expected: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub n: u64,
    pub pass: bool,
}

impl VerifyReport {
    fn build(name: &str, statistic: f64, expected: f64, stderr: f64, tolerance: f64, n: u64) -> Self {
        let tolerance = tolerance + ROUNDING_SLACK * expected.abs().max(1.0);
        let mut report = Self { check_name: name.to_string(), statistic, expected, stderr, tolerance, n, pass: false };
        report.pass = report.recompute_pass();
        report
    }

    /// Passes when `|statistic - expected| <= 4 stderr`.
    pub fn monte_carlo(name: &str, statistic: f64, expected: f64, stderr: f64, n: u64) -> Self {
        Self::build(name, statistic, expected, stderr, Z_THRESHOLD * stderr, n)
    }

    /// Passes when `|statistic - expected| <= tolerance`.
    pub fn exact(name: &str, statistic: f64, expected: f64, tolerance: f64, n: u64) -> Self {
        Self::build(name, statistic, expected, 0.0, tolerance, n)
    }

    pub fn recompute_pass(&self) -> bool {
        (self.statistic - self.expected).abs() <= self.tolerance
    }
}

/// Sample mean, variance and their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

pub fn moments(values: &[f64]) -> Moments {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in values {
        let d2 = (v - mean) * (v - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    let variance = m2 / n;
    let m4 = m4 / n;
    Moments {
        mean,
        variance,
        se_mean: (variance / n).sqrt(),
        se_variance: ((m4 - variance * variance).max(0.0) / n).sqrt(),
    }
}

fn mean_and_variance_reports(prefix: &str, values: &[f64], s: usize, t: usize, tab: &ScheduleTable) -> Result<(VerifyReport, VerifyReport)> {
    let stats = transition_logstats(s, t, tab)?;
    let m = moments(values);
    let n = values.len() as u64;
    Ok((
        VerifyReport::monte_carlo(&format!("{prefix}.mean"), m.mean, stats.mean_shift, m.se_mean, n),
        VerifyReport::monte_carlo(&format!("{prefix}.variance"), m.variance, stats.variance, m.se_variance, n),
    ))
}

/// Log flow ratios `ln|mu - x_t| - ln|mu - x_s|` of `n` exact transitions
/// from `x_s = 2` towards `mu = 0`.
pub fn transition_log_ratios(tab: &ScheduleTable, s: usize, t: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    if s >= t {
        return Err(FodError::ReversedInterval { start: s, end: t });
    }
    tab.check_step(t)?;
    let (x_s, mu) = ([2.0], [0.0]);
    let mut rng = keyed_rng(seed, Domain::Verify, s as u64, t as u64);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let eps = normal_vec(&mut rng, 1);
        let x_t = transition_sample(&x_s, &mu, s, t, &eps, tab)?;
        out.push((mu[0] - x_t[0]).abs().ln() - (mu[0] - x_s[0]).abs().ln());
    }
    Ok(out)
}

pub const MIN_TRANSITION_SAMPLES: usize = 10_000;

/// Mean and variance checks of the log flow ratio over `[s, t]`.
pub fn verify_transition(tab: &ScheduleTable, s: usize, t: usize, n: usize, seed: u64) -> Result<(VerifyReport, VerifyReport)> {
    if n < MIN_TRANSITION_SAMPLES {
        return Err(FodError::InvalidArgument(format!(
            "verify_transition needs at least {MIN_TRANSITION_SAMPLES} samples, got {n}"
        )));
    }
    let values = transition_log_ratios(tab, s, t, n, seed)?;
    mean_and_variance_reports(&format!("transition[{s},{t}]"), &values, s, t, tab)
}

/// True iff every component of `mu - x` keeps its sign along the trajectory.
pub fn verify_sign_consistency(traj: &[Vec<f64>], mu: &[f64]) -> bool {
    let Some(first) = traj.first() else { return true };
    let signs: Vec<f64> = mu.iter().zip(first).map(|(m, x)| sign(m - x)).collect();
    traj.iter()
        .all(|x| x.len() == mu.len() && mu.iter().zip(x).zip(&signs).all(|((m, x), s)| sign(m - x) == *s))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Negative log-density (up to a constant) of the next flow `y` given the
/// current flow `f` under one log-normal step with log-mean shift
/// `-(a + b/2)` and log-variance `b`.
pub fn next_flow_nll(y: f64, f: f64, a: f64, b: f64) -> f64 {
    let z = (y / f).ln() + a + 0.5 * b;
    y.abs().ln() + z * z / (2.0 * b)
}

/// Brute-force minimiser of [`next_flow_nll`] over `|y| = spacing, 2 spacing, ..., |f|`.
pub fn grid_argmin_next_flow(f: f64, a: f64, b: f64, spacing: f64) -> f64 {
    let mag = f.abs();
    let count = (mag / spacing).floor() as usize;
    let mut best = (f64::INFINITY, spacing);
    for i in 1..=count {
        let y = i as f64 * spacing;
        let v = next_flow_nll(y, mag, a, b);
        if v < best.0 {
            best = (v, y);
        }
    }
    best.1 * f.signum()
}

pub const GRID_SPACING: f64 = 1e-5;

/// Largest gap between the closed-form mode and the grid argmin over
/// `triples` random `(theta dt, sigma2 dt, flow)` draws.
pub fn optimal_flow_grid_gap(triples: usize, seed: u64) -> Result<f64> {
    let mut rng = keyed_rng(seed, Domain::Verify, 0xB0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..triples {
        let a = rng.random_range(0.001..0.2);
        let b = rng.random_range(0.001..0.05);
        let f = rng.random_range(0.1..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let tab = ScheduleTable::from_rates(vec![a], vec![b], 1.0)?;
        let closed = optimal_next_flow(&[f], &[0.0], 0, &tab)?[0];
        worst = worst.max((closed - grid_argmin_next_flow(f, a, b, GRID_SPACING)).abs());
    }
    Ok(worst)
}

/// Error of the log/linear loss ratio against `1 / f^2` for a symmetric
/// relative perturbation `(f (1 + h), f (1 - h))`.
pub fn taylor_ratio_error(f: f64, h: f64) -> Result<f64> {
    let (log_loss, linear) = taylor_gap(&[f, f], &[f * (1.0 + h), f * (1.0 - h)])?;
    Ok((log_loss / linear - 1.0 / (f * f)).abs())
}

/// Smallest observed convergence order over consecutive perturbation sizes.
pub fn taylor_observed_order(f: f64, hs: &[f64]) -> Result<f64> {
    let errs: Vec<f64> = hs.iter().map(|&h| taylor_ratio_error(f, h)).collect::<Result<_>>()?;
    Ok(errs
        .windows(2)
        .zip(hs.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .fold(f64::INFINITY, f64::min))
}

pub const EULER_X0: [f64; 2] = [2.0, -1.0];
pub const EULER_MU: [f64; 2] = [0.5, 1.5];

/// Relative error of the Euler–Maruyama terminal state under the oracle
/// flow on a noise-free table, against the closed-form path.
pub fn euler_terminal_error(tab: &ScheduleTable) -> Result<f64> {
    let run = sample_euler(&OracleFlow::new(&EULER_MU), &EULER_X0, tab, 0)?;
    let exact = ode_state(&EULER_X0, &EULER_MU, tab.steps(), tab)?;
    Ok(rel_error(&run.terminal, &exact))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_error(got: &[f64], want: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(want).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(want)
}

/// Model with every parameter drawn uniformly from `[-0.7, 0.7]`.
pub fn randomized_model(cfg: &ModelConfig, seed: u64) -> Result<FlowModel> {
    let mut model = FlowModel::zeros(cfg)?;
    let mut rng = keyed_rng(seed, Domain::Init, 0xAD, 0);
    for layer in model.layers_mut() {
        for part in layer.slices_mut() {
            for p in part {
                *p = rng.random_range(-0.7..0.7);
            }
        }
    }
    Ok(model)
}

/// Largest relative error between analytic gradients of the SFM loss and
/// central finite differences over `probes` randomly chosen parameters.
pub fn sfm_gradient_check(tab: &ScheduleTable, probes: usize, seed: u64) -> Result<f64> {
    let cfg = ModelConfig { dim: 2, hidden: vec![8, 8], embed_dim: 4 };
    let mut model = randomized_model(&cfg, seed)?;
    let ds = PairedDataset::with_default_mode(DatasetName::ContractNoise);
    let (x0, mu) = sample_pair(&ds, 16, derive_seed(seed, 1))?;
    let batch = sfm_batch(x0.view(), mu.view(), tab, derive_seed(seed, 2))?;
    let (_, grads) = regression_loss(&model, &batch)?;
    let analytic: Vec<f64> = grads.iter_values().collect();

    let h = 1e-5;
    let mut rng = keyed_rng(seed, Domain::Verify, 0x6C, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let idx = rng.random_range(0..analytic.len());
        let original = param(&mut model, idx, None);
        param(&mut model, idx, Some(original + h));
        let up = regression_loss(&model, &batch)?.0;
        param(&mut model, idx, Some(original - h));
        let down = regression_loss(&model, &batch)?.0;
        param(&mut model, idx, Some(original));
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[idx].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[idx] - numeric).abs() / scale);
    }
    Ok(worst)
}

/// Reads parameter `idx` (in [`Gradients::iter_values`](crate::model::Gradients::iter_values) order),
/// optionally overwriting it.
fn param(model: &mut FlowModel, mut idx: usize, set: Option<f64>) -> f64 {
    for layer in model.layers_mut() {
        for part in layer.slices_mut() {
            if idx < part.len() {
                let old = part[idx];
                if let Some(v) = set {
                    part[idx] = v;
                }
                return old;
            }
            idx -= part.len();
        }
    }
    panic!("parameter index out of range")
}

/// Size and seed of the registered oracle suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub samples: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { samples: 100_000, chains: 20_000, seed: 0 }
    }
}

/// Runs every registered oracle check against the schedule built from `cfg`.
pub fn run_suite(cfg: &ScheduleConfig, opts: &SuiteOptions) -> Result<Vec<VerifyReport>> {
    let tab = build_schedule(cfg)?;
    let steps = tab.steps();
    let seed = opts.seed;
    let n = opts.samples;
    let mut out = Vec::new();

    // schedule
    let ln_delta = cfg.delta.ln();
    out.push(VerifyReport::exact("schedule.mbar_terminal", tab.mbar()[steps], ln_delta, 1e-9 * ln_delta.abs(), 1));
    let sigbar_target = if tab.is_noise_free() { 0.0 } else { 1.0 };
    out.push(VerifyReport::exact("schedule.sigbar2_terminal", tab.sigbar2()[steps], sigbar_target, 1e-9, 1));
    out.push(VerifyReport::exact(
        "schedule.alpha_terminal",
        tab.alpha(steps)?,
        (tab.mbar()[steps] + 0.5 * tab.sigbar2()[steps]).exp(),
        1e-12,
        1,
    ));
    let mut additivity: f64 = 0.0;
    for (s, u, t) in [(0, steps / 3, steps), (steps / 4, steps / 2, 3 * steps / 4), (1, 2, steps)] {
        let whole = tab.mbar_between(s, t)?;
        let split = tab.mbar_between(s, u)? + tab.mbar_between(u, t)?;
        let var_whole = tab.sigbar_between(s, t)?.powi(2);
        let var_split = tab.sigbar_between(s, u)?.powi(2) + tab.sigbar_between(u, t)?.powi(2);
        additivity = additivity.max((whole - split).abs()).max((var_whole - var_split).abs());
    }
    out.push(VerifyReport::exact("schedule.additivity", additivity, 0.0, 1e-12, 3));

    // exact transition
    for (s, t) in [(0, steps), (0, steps / 2), (steps / 2, steps), (steps / 10, 9 * steps / 10)] {
        let (mean, var) = verify_transition(&tab, s, t, n.max(MIN_TRANSITION_SAMPLES), seed)?;
        out.push(mean);
        out.push(var);
    }

    let u = steps / 2;
    let mut rng = keyed_rng(seed, Domain::Verify, 0x5E, 0);
    let mut composed = Vec::with_capacity(n);
    for _ in 0..n {
        let mid = transition_sample(&[2.0], &[0.0], 0, u, &normal_vec(&mut rng, 1), &tab)?;
        let end = transition_sample(&mid, &[0.0], u, steps, &normal_vec(&mut rng, 1), &tab)?;
        composed.push(end[0].abs().ln() - 2f64.ln());
    }
    let (a, b) = mean_and_variance_reports("transition.semigroup", &composed, 0, steps, &tab)?;
    out.push(a);
    out.push(b);

    let mut ratios: Vec<f64> = transition_log_ratios(&tab, 0, steps, n, derive_seed(seed, 3))?
        .into_iter()
        .map(f64::exp)
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    let expected = tab.mbar()[steps].exp();
    let se = expected * (std::f64::consts::FRAC_PI_2 / n as f64).sqrt() * tab.sigbar_between(0, steps)?;
    out.push(VerifyReport::monte_carlo("transition.median_contraction", median, expected, se, n as u64));

    // samplers under the oracle flow
    let oracle = OracleFlow::new(&[0.0]);
    let k = (steps / 10).max(1);
    for (label, markov) in [("markov", true), ("nonmarkov", false)] {
        let mut values = Vec::with_capacity(opts.chains);
        for chain in 0..opts.chains as u64 {
            let run = if markov {
                sample_markov_chain(&oracle, &[2.0], k, &tab, seed, chain)?
            } else {
                sample_nonmarkov_chain(&oracle, &[2.0], k, &tab, seed, chain)?
            };
            values.push(run.terminal[0].abs().ln() - 2f64.ln());
        }
        let (a, b) = mean_and_variance_reports(&format!("sampler.{label}_terminal"), &values, 0, steps, &tab)?;
        out.push(a);
        out.push(b);
    }

    let mut consistent = 0usize;
    let sign_chains = 1000;
    let mu2 = [0.5, -1.0];
    let sign_flow = OracleFlow::new(&mu2);
    for chain in 0..sign_chains {
        let run = sample_markov(&sign_flow, &[2.0, -3.0], 1, &tab, derive_seed(seed, chain))?;
        consistent += verify_sign_consistency(&run.trajectory, &mu2) as usize;
    }
    out.push(VerifyReport::exact("sampler.sign_consistency", consistent as f64 / sign_chains as f64, 1.0, 0.0, sign_chains));

    // noise-free equivalences
    let free_cfg = ScheduleConfig { sigma_kind: SigmaKind::Zero, ..cfg.clone() };
    let free = build_schedule(&free_cfg)?;
    let field = OracleFlow::new(&EULER_MU);
    let exact = ode_state(&EULER_X0, &EULER_MU, steps, &free)?;
    let mut worst: f64 = 0.0;
    for k in [1, 5, 10, steps] {
        if k > steps {
            continue;
        }
        worst = worst.max(rel_error(&sample_markov(&field, &EULER_X0, k, &free, seed)?.terminal, &exact));
        worst = worst.max(rel_error(&sample_nonmarkov(&field, &EULER_X0, k, &free, seed)?.terminal, &exact));
    }
    out.push(VerifyReport::exact("noise_free.fast_samplers_match_ode_state", worst, 0.0, 1e-9, 8));
    let exp_ode = sample_ode_with(&field, &EULER_X0, steps.div_ceil(10), &free, OdeUpdate::Exponential)?;
    out.push(VerifyReport::exact(
        "noise_free.exponential_ode_matches_ode_state",
        rel_error(&exp_ode.terminal, &exact),
        0.0,
        1e-9,
        1,
    ));
    let fine = build_schedule(&ScheduleConfig { steps: 2 * steps, ..free_cfg })?;
    let ratio = euler_terminal_error(&free)? / euler_terminal_error(&fine)?;
    out.push(VerifyReport::exact("noise_free.euler_first_order_ratio", ratio, 2.0, 0.2, 2));

    // kernel closed forms
    let gap = optimal_flow_grid_gap(20, seed)?;
    out.push(VerifyReport::exact("kernel.optimal_flow_grid", gap, 0.0, GRID_SPACING, 20));
    out.push(VerifyReport::exact("kernel.kl_self_zero", lognormal_kl(-1.3, 0.4, -1.3, 0.4)?, 0.0, 1e-15, 1));
    let (m1, v1, m2, v2): (f64, f64, f64, f64) = (-0.5, 0.3, 0.2, 0.8);
    let mut rng = keyed_rng(seed, Domain::Verify, 0x4B, 0);
    let log_density = |z: f64, m: f64, v: f64| -0.5 * (z - m) * (z - m) / v - 0.5 * v.ln();
    let kl_terms: Vec<f64> = (0..n)
        .map(|_| {
            let z = m1 + v1.sqrt() * normal_vec(&mut rng, 1)[0];
            log_density(z, m1, v1) - log_density(z, m2, v2)
        })
        .collect();
    let km = moments(&kl_terms);
    out.push(VerifyReport::monte_carlo("kernel.kl_monte_carlo", km.mean, lognormal_kl(m1, v1, m2, v2)?, km.se_mean, n as u64));
    out.push(VerifyReport::exact("kernel.taylor_order", taylor_observed_order(1.7, &[1e-1, 1e-2, 1e-3])?, 2.0, 0.1, 3));

    // objectives
    let ds = PairedDataset::with_default_mode(DatasetName::ContractNoise);
    let (x0, mu) = sample_pair(&ds, 256, derive_seed(seed, 4))?;
    if !tab.is_noise_free() {
        let batch = sfm_batch(x0.view(), mu.view(), &tab, seed)?;
        let oracle_preds = &mu - &batch.xt;
        out.push(VerifyReport::exact("objective.sfm_oracle_loss", batch.loss_of(oracle_preds.view()), 0.0, 1e-24, 256));

        let batch = ml_batch(x0.view(), mu.view(), &tab, seed)?;
        let oracle_preds = &mu - &batch.xt;
        let mut closed = 0.0;
        for (i, &t) in batch.t.iter().enumerate() {
            let (a, b) = (tab.theta()[t] * tab.dt(), tab.sigma2()[t] * tab.dt());
            for j in 0..mu.ncols() {
                let r = oracle_preds[[i, j]] * ((-a - 1.5 * b).exp() - (-a).exp());
                closed += r * r;
            }
        }
        closed /= batch.target.len() as f64;
        out.push(VerifyReport::exact("objective.ml_oracle_residual", batch.loss_of(oracle_preds.view()), closed, 1e-9 * closed, 256));
        out.push(VerifyReport::exact("objective.sfm_gradient_check", sfm_gradient_check(&tab, 100, seed)?, 0.0, 1e-4, 100));
    }
    let batch = cfm_batch(x0.view(), mu.view(), &free, seed)?;
    let identity = (&mu - &batch.xt - &batch.target).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.push(VerifyReport::exact("objective.cfm_target_identity", identity, 0.0, 1e-12, 256));

    // data
    let (x0, mu) = sample_pair(&ds, n, derive_seed(seed, 5))?;
    let (slope, se) = regression_slope(&mu, &x0);
    out.push(VerifyReport::monte_carlo("data.conditional_slope", slope, crate::data::CONTRACTION, se, n as u64));
    let head = mu.slice(ndarray::s![..500, ..]);
    out.push(VerifyReport::exact("data.mmd_self_zero", mmd(head, head, 1.0)?, 0.0, 0.0, 500));

    Ok(out)
}

/// Pooled least-squares slope of `y` on `x` across both coordinates, with
/// its standard error.
fn regression_slope(x: &Array2<f64>, y: &Array2<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y.iter()).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (slope, (rss / (n - 2.0) / sxx).sqrt())
}
