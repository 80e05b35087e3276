//! Learning objectives and the training loop.
//!
//! Each objective first draws a [`RegressionBatch`]: noisy states `x_t`,
//! their steps, a regression target and a per-sample gain. The model is
//! fitted by minimising `mean((gain * f(x_t, t) - target)^2)`.
//!
//! * stochastic flow matching: `x_t` from the exact log-normal transition,
//!   target `mu - x_t`, gain 1.
//! * conditional flow matching: `x_t` on the noise-free interpolation path,
//!   target `alpha_t (mu - x_0)`, gain 1.
//! * maximum likelihood: target is the mode of the next flow, predicted by
//!   the drift-only expectation `x_t + f (1 - exp(-theta dt))`.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{median_heuristic, mmd, sample_pair, sample_source, sample_target, PairedDataset};
use crate::error::{FodError, Result};
use crate::kernel::{optimal_next_flow, scaled_flow_step};
use crate::model::{adamw_step, AdamWConfig, FlowModel, Gradients, ModelConfig, OptimizerState};
use crate::noise::{derive_seed, keyed_rng, normal_vec, Domain};
use crate::samplers::{FlowField, SamplerKind, SamplerSpec};
use crate::schedules::{build_schedule, ScheduleConfig, ScheduleTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Sfm,
    Cfm,
    Ml,
}

impl std::str::FromStr for Objective {
    type Err = FodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfm" => Ok(Self::Sfm),
            "cfm" => Ok(Self::Cfm),
            "ml" => Ok(Self::Ml),
            other => Err(FodError::InvalidArgument(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub dataset: PairedDataset,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub eval_every: usize,
    pub eval_n: usize,
    pub eval_sampler: SamplerSpec,
    /// When false, `wall_ms` is reported as 0 so metric streams are reproducible.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(objective: Objective, dataset: PairedDataset, schedule: ScheduleConfig) -> Self {
        let eval_sampler = SamplerSpec::new(SamplerKind::Nonmarkov, (schedule.steps / 10).max(1));
        Self {
            objective,
            iterations: 20_000,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            seed: 0,
            dataset,
            schedule,
            model: ModelConfig::default(),
            eval_every: 1000,
            eval_n: 1000,
            eval_sampler,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let noise_free = self.schedule.is_noise_free();
        match self.objective {
            Objective::Cfm if !noise_free => {
                return Err(FodError::Config("objective cfm requires sigma_kind = zero".into()))
            }
            Objective::Sfm | Objective::Ml if noise_free => {
                return Err(FodError::Config("objectives sfm and ml require a noisy schedule".into()))
            }
            _ => {}
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(FodError::Config("batch_size and eval_every must be positive".into()));
        }
        if self.eval_n < 2 {
            return Err(FodError::Config("eval_n must be at least 2".into()));
        }
        if self.model.dim != self.dataset.dim() {
            return Err(FodError::Config(format!(
                "model dim {} does not match dataset dim {}",
                self.model.dim,
                self.dataset.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iteration: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub mmd_to_target: f64,
    pub wall_ms: u64,
}

/// Inputs and targets of one regression step.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBatch {
    pub xt: Array2<f64>,
    pub t: Vec<usize>,
    pub target: Array2<f64>,
    pub gain: Vec<f64>,
    pub steps: usize,
}

impl RegressionBatch {
    fn with_capacity(n: usize, d: usize, steps: usize) -> Self {
        Self {
            xt: Array2::zeros((n, d)),
            t: Vec::with_capacity(n),
            target: Array2::zeros((n, d)),
            gain: Vec::with_capacity(n),
            steps,
        }
    }

    /// Loss of the given flow predictions, one row per sample.
    pub fn loss_of(&self, preds: ArrayView2<f64>) -> f64 {
        let mut acc = 0.0;
        for ((p, y), g) in preds.rows().into_iter().zip(self.target.rows()).zip(&self.gain) {
            for (p, y) in p.iter().zip(y.iter()) {
                let r = g * p - y;
                acc += r * r;
            }
        }
        acc / self.target.len() as f64
    }

    /// Loss when predictions come from an arbitrary flow field.
    pub fn loss_of_field<F: FlowField>(&self, field: &F) -> Result<f64> {
        let mut preds = Array2::zeros(self.target.raw_dim());
        for ((mut row, x), &t) in preds.rows_mut().into_iter().zip(self.xt.rows()).zip(&self.t) {
            let f = field.flow(&x.to_vec(), t, self.steps)?;
            row.assign(&ndarray::ArrayView1::from(&f));
        }
        Ok(self.loss_of(preds.view()))
    }
}

fn check_batch(x0: ArrayView2<f64>, mu: ArrayView2<f64>) -> Result<()> {
    if x0.dim() != mu.dim() {
        return Err(FodError::DimensionMismatch { expected: x0.len(), got: mu.len() });
    }
    if x0.nrows() == 0 {
        return Err(FodError::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

fn require_noise(tab: &ScheduleTable, what: &str) -> Result<()> {
    if tab.is_noise_free() {
        return Err(FodError::InvalidArgument(format!("{what} needs a schedule with noise")));
    }
    Ok(())
}

/// `x_t = (x0 - mu) exp(mbar[t] + sigbar_{0:t} eps) + mu` for a uniformly drawn `t`.
fn noisy_state<R: Rng>(rng: &mut R, x0: &[f64], mu: &[f64], t_range: std::ops::RangeInclusive<usize>, tab: &ScheduleTable) -> Result<(usize, Vec<f64>)> {
    let t = rng.random_range(t_range);
    let eps = normal_vec(rng, x0.len());
    let xt = scaled_flow_step(x0, mu, tab.mbar()[t], tab.sigbar_between(0, t)?, &eps);
    Ok((t, xt))
}

pub fn sfm_batch(x0: ArrayView2<f64>, mu: ArrayView2<f64>, tab: &ScheduleTable, seed: u64) -> Result<RegressionBatch> {
    check_batch(x0, mu)?;
    require_noise(tab, "stochastic flow matching")?;
    let steps = tab.steps();
    let mut batch = RegressionBatch::with_capacity(x0.nrows(), x0.ncols(), steps);
    for i in 0..x0.nrows() {
        let mut rng = keyed_rng(seed, Domain::Loss, i as u64, 0);
        let (x, m) = (x0.row(i).to_vec(), mu.row(i).to_vec());
        let (t, xt) = noisy_state(&mut rng, &x, &m, 1..=steps, tab)?;
        for j in 0..x.len() {
            batch.xt[[i, j]] = xt[j];
            batch.target[[i, j]] = m[j] - xt[j];
        }
        batch.t.push(t);
        batch.gain.push(1.0);
    }
    Ok(batch)
}

pub fn cfm_batch(x0: ArrayView2<f64>, mu: ArrayView2<f64>, tab: &ScheduleTable, seed: u64) -> Result<RegressionBatch> {
    check_batch(x0, mu)?;
    if !tab.is_noise_free() {
        return Err(FodError::InvalidArgument("conditional flow matching needs a noise-free schedule".into()));
    }
    let steps = tab.steps();
    let mut batch = RegressionBatch::with_capacity(x0.nrows(), x0.ncols(), steps);
    for i in 0..x0.nrows() {
        let mut rng = keyed_rng(seed, Domain::Loss, i as u64, 0);
        let t = rng.random_range(1..=steps);
        let alpha = tab.alpha(t)?;
        for j in 0..x0.ncols() {
            let (x, m) = (x0[[i, j]], mu[[i, j]]);
            batch.xt[[i, j]] = alpha * x + (1.0 - alpha) * m;
            batch.target[[i, j]] = alpha * (m - x);
        }
        batch.t.push(t);
        batch.gain.push(1.0);
    }
    Ok(batch)
}

/// Steps are drawn from `0..T` so that the transition `t -> t+1` exists.
pub fn ml_batch(x0: ArrayView2<f64>, mu: ArrayView2<f64>, tab: &ScheduleTable, seed: u64) -> Result<RegressionBatch> {
    check_batch(x0, mu)?;
    require_noise(tab, "the maximum-likelihood objective")?;
    let steps = tab.steps();
    let mut batch = RegressionBatch::with_capacity(x0.nrows(), x0.ncols(), steps);
    for i in 0..x0.nrows() {
        let mut rng = keyed_rng(seed, Domain::Loss, i as u64, 0);
        let (x, m) = (x0.row(i).to_vec(), mu.row(i).to_vec());
        let (t, xt) = noisy_state(&mut rng, &x, &m, 0..=steps - 1, tab)?;
        // x*_{t+1} - x_t = (mu - x_t) - (mu - x_{t+1})*
        let next_flow = optimal_next_flow(&m, &xt, t, tab)?;
        for j in 0..x.len() {
            batch.xt[[i, j]] = xt[j];
            batch.target[[i, j]] = (m[j] - xt[j]) - next_flow[j];
        }
        batch.t.push(t);
        batch.gain.push(-(-tab.theta()[t] * tab.dt()).exp_m1());
    }
    Ok(batch)
}

/// Loss and parameter gradients of `mean((gain * f(x_t, t) - target)^2)`.
pub fn regression_loss(model: &FlowModel, batch: &RegressionBatch) -> Result<(f64, Gradients)> {
    let input = model.build_input(batch.xt.view(), &batch.t, batch.steps)?;
    let (preds, cache) = model.forward_batch(input)?;
    let loss = batch.loss_of(preds.view());
    if loss.is_nan() {
        let row = preds
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| v.is_nan()))
            .unwrap_or(0);
        return Err(FodError::NanLoss { t: batch.t[row] });
    }
    let scale = 2.0 / batch.target.len() as f64;
    let mut grad_out = preds;
    for ((mut g, y), &gain) in grad_out.rows_mut().into_iter().zip(batch.target.rows()).zip(&batch.gain) {
        for (p, y) in g.iter_mut().zip(y.iter()) {
            *p = scale * gain * (gain * *p - y);
        }
    }
    let grads = model.backward_batch(&cache, grad_out.view())?;
    Ok((loss, grads))
}

pub fn sfm_loss(x0: ArrayView2<f64>, mu: ArrayView2<f64>, model: &FlowModel, tab: &ScheduleTable, seed: u64) -> Result<(f64, Gradients)> {
    regression_loss(model, &sfm_batch(x0, mu, tab, seed)?)
}

pub fn cfm_loss(x0: ArrayView2<f64>, mu: ArrayView2<f64>, model: &FlowModel, tab: &ScheduleTable, seed: u64) -> Result<(f64, Gradients)> {
    regression_loss(model, &cfm_batch(x0, mu, tab, seed)?)
}

pub fn ml_loss(x0: ArrayView2<f64>, mu: ArrayView2<f64>, model: &FlowModel, tab: &ScheduleTable, seed: u64) -> Result<(f64, Gradients)> {
    regression_loss(model, &ml_batch(x0, mu, tab, seed)?)
}

pub fn objective_batch(
    objective: Objective,
    x0: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    tab: &ScheduleTable,
    seed: u64,
) -> Result<RegressionBatch> {
    match objective {
        Objective::Sfm => sfm_batch(x0, mu, tab, seed),
        Objective::Cfm => cfm_batch(x0, mu, tab, seed),
        Objective::Ml => ml_batch(x0, mu, tab, seed),
    }
}

/// Squared log-space error and squared linear error between two flows.
/// Their ratio tends to `1 / flow_true^2` as the prediction approaches the truth.
pub fn taylor_gap(flow_true: &[f64], flow_pred: &[f64]) -> Result<(f64, f64)> {
    if flow_true.len() != flow_pred.len() {
        return Err(FodError::DimensionMismatch { expected: flow_true.len(), got: flow_pred.len() });
    }
    if flow_true.contains(&0.0) {
        return Err(FodError::InvalidArgument("flow_true has a zero component".into()));
    }
    let mut log_loss = 0.0;
    let mut linear_loss = 0.0;
    for (&a, &b) in flow_true.iter().zip(flow_pred) {
        let l = b.abs().ln() - a.abs().ln();
        log_loss += l * l;
        linear_loss += (b - a) * (b - a);
    }
    Ok((log_loss, linear_loss))
}

/// Fixed evaluation set: source points, an independent target sample and a
/// kernel bandwidth from the median heuristic on the target sample.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub source: Array2<f64>,
    pub target: Array2<f64>,
    pub bandwidth: f64,
    pub noise_seed: u64,
}

const TAG_EVAL_SOURCE: u64 = 0xE5;
const TAG_EVAL_TARGET: u64 = 0xE7;
const TAG_EVAL_NOISE: u64 = 0xE9;
const TAG_BATCH: u64 = 0xB1;
const TAG_LOSS: u64 = 0x15;

impl Evaluator {
    pub fn new(ds: &PairedDataset, n: usize, seed: u64) -> Result<Self> {
        let source = sample_source(ds, n, derive_seed(seed, TAG_EVAL_SOURCE))?;
        let target = sample_target(ds, n, derive_seed(seed, TAG_EVAL_TARGET))?;
        let bandwidth = median_heuristic(target.view())?;
        Ok(Self { source, target, bandwidth, noise_seed: derive_seed(seed, TAG_EVAL_NOISE) })
    }

    /// MMD of the untransported source against the target.
    pub fn baseline(&self) -> Result<f64> {
        mmd(self.source.view(), self.target.view(), self.bandwidth)
    }

    pub fn samples<F: FlowField>(&self, model: &F, sampler: SamplerSpec, tab: &ScheduleTable) -> Result<Array2<f64>> {
        sampler.terminals(model, self.source.view(), tab, self.noise_seed)
    }

    pub fn score<F: FlowField>(&self, model: &F, sampler: SamplerSpec, tab: &ScheduleTable) -> Result<f64> {
        let samples = self.samples(model, sampler, tab)?;
        mmd(samples.view(), self.target.view(), self.bandwidth)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub optimizer: OptimizerState,
    pub metrics: Vec<TrainMetrics>,
    /// Training loss at every iteration.
    pub losses: Vec<f64>,
}

const DIVERGENCE_LOSS: f64 = 1e6;

pub fn train_loop(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_with(cfg, |_| {})
}

/// As [`train_loop`], calling `on_metrics` after each evaluation.
pub fn train_loop_with(cfg: &TrainConfig, mut on_metrics: impl FnMut(&TrainMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tab = build_schedule(&cfg.schedule)?;
    let mut model = FlowModel::init(&cfg.model, cfg.seed)?;
    let mut opt = OptimizerState::new(&model, cfg.optimizer)?;
    let evaluator = if cfg.iterations > 0 { Some(Evaluator::new(&cfg.dataset, cfg.eval_n, cfg.seed)?) } else { None };
    let batch_seed = derive_seed(cfg.seed, TAG_BATCH);
    let loss_seed = derive_seed(cfg.seed, TAG_LOSS);
    let start = Instant::now();

    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut window = 0.0;
    let mut window_len = 0usize;
    for it in 0..cfg.iterations {
        let (x0, mu) = sample_pair(&cfg.dataset, cfg.batch_size, derive_seed(batch_seed, it as u64))?;
        let batch = objective_batch(cfg.objective, x0.view(), mu.view(), &tab, derive_seed(loss_seed, it as u64))?;
        let (loss, grads) = match regression_loss(&model, &batch) {
            Ok(v) => v,
            Err(FodError::NanLoss { .. }) => return Err(FodError::Diverged { iteration: it, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !(loss <= DIVERGENCE_LOSS) || !grads.is_finite() {
            return Err(FodError::Diverged { iteration: it, loss });
        }
        adamw_step(&mut model, &grads, &mut opt)?;
        losses.push(loss);
        window += loss;
        window_len += 1;

        let done = it + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let evaluator = evaluator.as_ref().expect("evaluator exists when iterating");
            let score = evaluator.score(&model, cfg.eval_sampler, &tab)?;
            let wall_ms = if cfg.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
            let m = TrainMetrics { iteration: done, loss: window / window_len as f64, mmd_to_target: score, wall_ms };
            on_metrics(&m);
            metrics.push(m);
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome { model, optimizer: opt, metrics, losses })
}
