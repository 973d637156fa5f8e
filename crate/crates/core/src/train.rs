//! Offline minibatch training and the online forecast-then-adapt protocol.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{window_batch, ModelConfig, TotModel};
use crate::objective::{evaluate, Draws, LossBreakdown, LossWeights};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::{self, Rng, RngState};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Adam steps after each arrival in the online protocol.
    pub online_steps_per_arrival: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            grad_clip: Some(5.0),
            online_steps_per_arrival: 1,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.grad_clip must be positive, got {c}")));
            }
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Everything needed to resume training bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
    pub step: u64,
}

/// A model with its optimizer state and training-noise stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TotModel,
    pub adam: AdamState,
    rng: Rng,
    step: u64,
    order_epoch: Option<u64>,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(model: TotModel, seed: u64) -> Self {
        let adam = AdamState::new(&model.params);
        Self {
            model,
            adam,
            rng: rng::substream(seed, "train-noise"),
            step: 0,
            order_epoch: None,
            order: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_config: self.model.config().clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
        }
    }

    /// Restores a trainer. When `expected` is given the stored model
    /// configuration must match it.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if let Some(e) = expected {
            if e != &ckpt.model_config {
                return Err(Error::Config("checkpoint model configuration does not match the requested one".into()));
            }
        }
        let model = TotModel::from_params(ckpt.model_config.clone(), ckpt.params.clone())?;
        if ckpt.adam.m.len() != model.params.len()
            || ckpt.adam.m.iter().zip(model.params.tensors()).any(|(m, t)| m.len() != t.len())
            || ckpt.adam.v.iter().zip(&ckpt.adam.m).any(|(v, m)| v.len() != m.len())
        {
            return Err(Error::Config("optimizer state does not match the parameter table".into()));
        }
        Ok(Self {
            model,
            adam: ckpt.adam.clone(),
            rng: ckpt.rng.restore(),
            step: ckpt.step,
            order_epoch: None,
            order: Vec::new(),
        })
    }

    /// One Adam step on `batch` (`B x (T n)` windows).
    pub fn step_on_batch(&mut self, batch: &Tensor, cfg: &TrainConfig) -> Result<LossBreakdown> {
        let draws = Draws::sample(&self.model, batch.rows(), &mut self.rng);
        let mut ev = evaluate(&self.model, batch, &draws, &cfg.loss, self.step)?;
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut ev.grads, c);
        }
        adam_step(&mut self.model.params, &ev.grads, &mut self.adam, &cfg.adam())?;
        if !self.model.params.tensors().iter().all(Tensor::all_finite) {
            return Err(Error::NonFiniteLoss { term: "parameters", step: self.step });
        }
        self.step += 1;
        Ok(ev.breakdown)
    }

    fn epoch_order(&mut self, epoch: u64, windows: usize, seed: u64) -> &[usize] {
        if self.order_epoch != Some(epoch) || self.order.len() != windows {
            let mut order: Vec<usize> = (0..windows).collect();
            let mut r = rng::indexed_substream(seed, "epoch", epoch);
            rng::shuffle(&mut r, &mut order);
            self.order = order;
            self.order_epoch = Some(epoch);
        }
        &self.order
    }

    /// Runs `count` further minibatch steps over the windows of `x`. The
    /// schedule (epoch, batch position) is a function of the global step, so
    /// an interrupted and resumed run takes the same steps.
    pub fn train_steps(&mut self, x: &Tensor, cfg: &TrainConfig, count: u64) -> Result<Vec<LossBreakdown>> {
        let t = self.model.config().window();
        let windows = windows_in(x.rows(), t)?;
        let per_epoch = windows.div_ceil(cfg.batch_size) as u64;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let epoch = self.step / per_epoch;
            let pos = (self.step % per_epoch) as usize * cfg.batch_size;
            let order = self.epoch_order(epoch, windows, cfg.seed);
            let starts: Vec<usize> = order[pos..(pos + cfg.batch_size).min(windows)].to_vec();
            let batch = window_batch(x, &starts, t)?;
            out.push(self.step_on_batch(&batch, cfg)?);
        }
        Ok(out)
    }
}

fn windows_in(rows: usize, t: usize) -> Result<usize> {
    if rows < t {
        return Err(Error::Config(format!("series of {rows} steps is shorter than one window of {t}")));
    }
    Ok(rows - t + 1)
}

/// Mean of a list of breakdowns.
pub fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let k = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.l_y += b.l_y / k;
        m.l_r += b.l_r / k;
        m.l_kl_z += b.l_kl_z / k;
        m.l_kl_o += b.l_kl_o / k;
        m.l_s += b.l_s / k;
        m.total += b.total / k;
    }
    m
}

/// Trains for `cfg.epochs` full passes over the windows of `x`; returns the
/// mean loss of every epoch.
pub fn train_offline(trainer: &mut Trainer, x: &Tensor, cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    let windows = windows_in(x.rows(), trainer.model.config().window())?;
    let per_epoch = windows.div_ceil(cfg.batch_size) as u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let steps = trainer.train_steps(x, cfg, per_epoch)?;
        history.push(mean_breakdown(&steps));
    }
    Ok(history)
}

/// One arrival of the online protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRecord {
    /// Index of the last observed step when the forecast was made.
    pub t: usize,
    pub mse: f64,
    pub mae: f64,
    pub cum_mse: f64,
    pub cum_mae: f64,
    /// Mean loss of the adaptation steps taken at this arrival (zero if none).
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineTrace {
    pub records: Vec<OnlineRecord>,
    /// `horizon x n` forecast per arrival, in order.
    pub forecasts: Vec<Tensor>,
}

impl OnlineTrace {
    /// Mean forecast MSE over arrivals with `t >= from`.
    pub fn mean_mse_from(&self, from: usize) -> f64 {
        let sel: Vec<f64> = self.records.iter().filter(|r| r.t >= from).map(|r| r.mse).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

/// Number of leading steps without a forecast: the first forecast needs a
/// full history and its target must lie inside the stream.
pub fn online_warmup(config: &ModelConfig) -> usize {
    config.window() - 1
}

/// Streams `x` through the model. At each arrival `t` the forecast for
/// `t+1..=t+horizon` uses only rows `<= t`; afterwards `k_steps` Adam steps are
/// taken on the full window ending at `t`.
pub fn online_run(trainer: &mut Trainer, x: &Tensor, cfg: &TrainConfig, k_steps: usize) -> Result<OnlineTrace> {
    let c = trainer.model.config().clone();
    let (n, t_in, h, w) = (c.n, c.t_in, c.horizon, c.window());
    if x.cols() != n {
        return Err(crate::error::dim_err("online_run", format!("{n} columns"), format!("{}", x.cols())));
    }
    windows_in(x.rows(), w)?;
    let mut records = Vec::new();
    let mut forecasts = Vec::new();
    let (mut sum_mse, mut sum_mae) = (0.0, 0.0);
    for t in (t_in - 1)..(x.rows() - h) {
        let hist = window_batch(x, &[t + 1 - t_in], t_in)?;
        let pred = trainer.model.predict_batch(&hist)?;
        let truth = &x.data()[(t + 1) * n..(t + 1 + h) * n];
        let (mut se, mut ae) = (0.0, 0.0);
        for (p, y) in pred.data().iter().zip(truth) {
            se += (p - y) * (p - y);
            ae += (p - y).abs();
        }
        let mse = se / (h * n) as f64;
        let mae = ae / (h * n) as f64;
        sum_mse += mse;
        sum_mae += mae;
        let k = records.len() as f64 + 1.0;

        let mut losses = Vec::with_capacity(k_steps);
        if k_steps > 0 && t + 1 >= w {
            let batch = window_batch(x, &[t + 1 - w], w)?;
            for _ in 0..k_steps {
                losses.push(trainer.step_on_batch(&batch, cfg)?);
            }
        }
        records.push(OnlineRecord {
            t,
            mse,
            mae,
            cum_mse: sum_mse / k,
            cum_mae: sum_mae / k,
            loss: mean_breakdown(&losses),
        });
        forecasts.push(pred.reshaped(h, n)?);
    }
    Ok(OnlineTrace { records, forecasts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_model() -> TotModel {
        TotModel::new(ModelConfig {
            n: 2,
            t_in: 3,
            horizon: 2,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            reducer_hidden: vec![8],
            forecaster_hidden: vec![8],
            noise_hidden: vec![4],
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn series(len: usize) -> Tensor {
        Tensor::raw(len, 2, (0..2 * len).map(|i| ((i as f64) * 0.31).sin()).collect())
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn online_warmup_and_row_count() {
        let mut tr = Trainer::new(tiny_model(), 0);
        let x = series(30);
        let cfg = TrainConfig::default();
        let trace = online_run(&mut tr, &x, &cfg, 0).unwrap();
        assert_eq!(trace.records.len(), 30 - online_warmup(tr.model.config()));
        assert_eq!(trace.records[0].t, 2);
    }
}
