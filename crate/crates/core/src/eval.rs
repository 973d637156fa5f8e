//! Identifiability and forecasting metrics, and the three-input forecaster
//! comparison.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::assignment::max_score_assignment;
use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::mlp::{Mlp, MlpSpec};
use crate::model::{window_batch, TotModel};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccReport {
    /// Row-major `n x n` absolute Pearson correlations, `[true i][estimated j]`.
    pub corr: Vec<f64>,
    /// `assignment[i]` is the estimated column matched to true column `i`.
    pub assignment: Vec<usize>,
    pub score: f64,
}

/// Absolute Pearson correlation; 0 when either column is constant.
pub fn abs_pearson(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len() as f64;
    let ma = a.iter().sum::<f64>() / k;
    let mb = b.iter().sum::<f64>() / k;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / math::sqrt(saa * sbb)).abs().min(1.0)
}

/// Mean correlation coefficient between `z_true` and `z_est` (both `N x n`).
pub fn mcc(z_true: &Tensor, z_est: &Tensor) -> Result<MccReport> {
    if z_true.shape() != z_est.shape() {
        return Err(dim_err("mcc", format!("{:?}", z_true.shape()), format!("{:?}", z_est.shape())));
    }
    if z_true.rows() < 3 {
        return Err(Error::Evaluation(format!("mcc needs at least 3 rows, got {}", z_true.rows())));
    }
    let n = z_true.cols();
    let cols_t: Vec<Vec<f64>> = (0..n).map(|i| z_true.column(i)).collect();
    let cols_e: Vec<Vec<f64>> = (0..n).map(|j| z_est.column(j)).collect();
    let mut corr = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            corr[i * n + j] = abs_pearson(&cols_t[i], &cols_e[j]);
        }
    }
    let assignment = max_score_assignment(&corr, n);
    let score = assignment.iter().enumerate().map(|(i, &j)| corr[i * n + j]).sum::<f64>() / n.max(1) as f64;
    Ok(MccReport { corr, assignment, score })
}

/// `(MSE, MAE)` over all entries.
pub fn forecast_metrics(pred: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(dim_err("forecast_metrics", format!("{:?}", truth.shape()), format!("{:?}", pred.shape())));
    }
    let k = pred.len().max(1) as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, y) in pred.data().iter().zip(truth.data()) {
        se += (p - y) * (p - y);
        ae += (p - y).abs();
    }
    Ok((se / k, ae / k))
}

/// Window starts `s` inside `range` such that `s..s + len` fits.
pub fn window_starts(range: core::ops::Range<usize>, len: usize) -> Vec<usize> {
    if range.end < range.start + len {
        return Vec::new();
    }
    (range.start..=range.end - len).collect()
}

/// Latent estimates for every window start: encoder mean at the last history
/// step, aligned with the true latent at `start + t_in - 1`.
pub fn latent_estimates(model: &TotModel, x: &Tensor, starts: &[usize]) -> Result<Tensor> {
    let c = model.config();
    let (n, t_in) = (c.n, c.t_in);
    let mut out = Vec::with_capacity(starts.len() * n);
    for chunk in starts.chunks(512) {
        let hist = window_batch(x, chunk, t_in)?;
        let mean = model.posterior_mean_batch(&hist)?;
        for r in 0..mean.rows() {
            out.extend_from_slice(&mean.row(r)[(t_in - 1) * n..t_in * n]);
        }
    }
    Ok(Tensor::raw(starts.len(), n, out))
}

/// Rows `start + offset` of `z` for each start.
pub fn aligned_rows(z: &Tensor, starts: &[usize], offset: usize) -> Tensor {
    let n = z.cols();
    let mut out = Vec::with_capacity(starts.len() * n);
    for &s in starts {
        out.extend_from_slice(z.row(s + offset));
    }
    Tensor::raw(starts.len(), n, out)
}

/// MCC of the model's latent estimates over the windows of `range`.
pub fn model_mcc(model: &TotModel, x: &Tensor, z: &Tensor, range: core::ops::Range<usize>) -> Result<MccReport> {
    let t_in = model.config().t_in;
    let starts = window_starts(range, t_in);
    let est = latent_estimates(model, x, &starts)?;
    let truth = aligned_rows(z, &starts, t_in - 1);
    mcc(&truth, &est)
}

/// Forecast MSE/MAE of the model over every full window inside `range`.
pub fn model_forecast_metrics(model: &TotModel, x: &Tensor, range: core::ops::Range<usize>) -> Result<(f64, f64)> {
    let c = model.config();
    let (n, t_in, h) = (c.n, c.t_in, c.horizon);
    let starts = window_starts(range, c.window());
    if starts.is_empty() {
        return Err(Error::Evaluation("no full window inside the evaluation range".into()));
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for chunk in starts.chunks(512) {
        let full = window_batch(x, chunk, t_in + h)?;
        let hist = window_batch(x, chunk, t_in)?;
        let pred = model.predict_batch(&hist)?;
        for r in 0..full.rows() {
            let truth = &full.row(r)[t_in * n..];
            for (p, y) in pred.row(r).iter().zip(truth) {
                se += (p - y) * (p - y);
                ae += (p - y).abs();
                count += 1;
            }
        }
    }
    Ok((se / count as f64, ae / count as f64))
}

/// Mean absolute decoder Jacobian over the rows of `z` (`N x n`), `[i][j] =
/// mean |d x_hat_i / d z_j|`.
pub fn mean_abs_decoder_jacobian(model: &TotModel, z: &Tensor) -> Result<Tensor> {
    let n = model.config().n;
    let mut acc = Tensor::zeros(vec![n, n]);
    for chunk in 0..z.rows().div_ceil(512) {
        let start = chunk * 512;
        let rows = z.slice_rows(start, (z.rows() - start).min(512));
        let mut tape = Tape::new(&model.params);
        let zv = tape.constant(rows);
        let cols = model.decoder_jacobian_graph(&mut tape, zv)?;
        for (j, c) in cols.iter().enumerate() {
            let v = tape.value(*c);
            for r in 0..v.rows() {
                for i in 0..n {
                    let cur = acc.get(i, j);
                    acc.set(i, j, cur + v.get(r, i).abs());
                }
            }
        }
    }
    let k = z.rows().max(1) as f64;
    for v in acc.data_mut() {
        *v /= k;
    }
    Ok(acc)
}

/// Precision, recall and F1 of a predicted support against the truth.
pub fn support_f1(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Estimated mixing support `[true latent i][observed j]`: the mean absolute
/// decoder Jacobian, with estimated latents relabeled through the MCC
/// assignment, thresholded at `rel_threshold` times its maximum.
pub fn estimated_mixing_support(jac: &Tensor, assignment: &[usize], rel_threshold: f64) -> Vec<bool> {
    let n = jac.rows();
    let max = jac.data().iter().fold(0.0f64, |a, b| a.max(*b));
    let mut out = vec![false; n * n];
    for i in 0..n {
        let est = assignment[i];
        for j in 0..n {
            out[i * n + j] = jac.get(j, est) > rel_threshold * max;
        }
    }
    out
}

/// Estimated mixing support of `model` over the windows of `range`, with the
/// decoder Jacobian taken at the model's own latent estimates.
pub fn model_mixing_support(model: &TotModel, x: &Tensor, range: core::ops::Range<usize>, assignment: &[usize], rel_threshold: f64) -> Result<Vec<bool>> {
    let starts = window_starts(range, model.config().t_in);
    let est = latent_estimates(model, x, &starts)?;
    let jac = mean_abs_decoder_jacobian(model, &est)?;
    Ok(estimated_mixing_support(&jac, assignment, rel_threshold))
}

// ---- forecaster comparison ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub baseline_mse: f64,
    pub oracle_mse: f64,
    pub tot_mse: f64,
}

impl BaselineReport {
    /// `(baseline - tot) / (baseline - oracle)`.
    pub fn gap_fraction(&self) -> f64 {
        (self.baseline_mse - self.tot_mse) / (self.baseline_mse - self.oracle_mse)
    }
}

/// Inputs and targets for the comparison forecasters: each row is the
/// flattened history, optionally followed by that window's row of `latents`.
pub fn comparison_inputs(x: &Tensor, latents: Option<&Tensor>, starts: &[usize], t_in: usize, horizon: usize) -> Result<(Tensor, Tensor)> {
    let n = x.cols();
    let lat_w = latents.map_or(0, Tensor::cols);
    if let Some(l) = latents {
        if l.rows() != starts.len() {
            return Err(dim_err("comparison_inputs", format!("{} latent rows", starts.len()), format!("{}", l.rows())));
        }
    }
    let width = t_in * n + lat_w;
    let mut inp = Vec::with_capacity(starts.len() * width);
    let mut out = Vec::with_capacity(starts.len() * horizon * n);
    for (k, &s) in starts.iter().enumerate() {
        if s + t_in + horizon > x.rows() {
            return Err(dim_err("comparison_inputs", "windows inside the series", format!("start {s}")));
        }
        inp.extend_from_slice(&x.data()[s * n..(s + t_in) * n]);
        if let Some(l) = latents {
            inp.extend_from_slice(l.row(k));
        }
        out.extend_from_slice(&x.data()[(s + t_in) * n..(s + t_in + horizon) * n]);
    }
    Ok((Tensor::raw(starts.len(), width, inp), Tensor::raw(starts.len(), horizon * n, out)))
}

/// True latents over the forecast horizon of each window, `B x (h n)`.
pub fn horizon_latents(z: &Tensor, starts: &[usize], t_in: usize, horizon: usize) -> Result<Tensor> {
    let n = z.cols();
    let mut out = Vec::with_capacity(starts.len() * horizon * n);
    for &s in starts {
        if s + t_in + horizon > z.rows() {
            return Err(dim_err("horizon_latents", "windows inside the series", format!("start {s}")));
        }
        out.extend_from_slice(&z.data()[(s + t_in) * n..(s + t_in + horizon) * n]);
    }
    Ok(Tensor::raw(starts.len(), horizon * n, out))
}

/// The model's posterior-mean latents over the forecast horizon, inferred
/// from each window's history only, `B x (h n)`.
pub fn estimated_horizon_latents(model: &TotModel, x: &Tensor, starts: &[usize]) -> Result<Tensor> {
    let c = model.config();
    let (n, t_in, h) = (c.n, c.t_in, c.horizon);
    let mut out = Vec::with_capacity(starts.len() * h * n);
    for chunk in starts.chunks(512) {
        let mean = model.posterior_mean_batch(&window_batch(x, chunk, t_in)?)?;
        for r in 0..mean.rows() {
            out.extend_from_slice(&mean.row(r)[t_in * n..]);
        }
    }
    Ok(Tensor::raw(starts.len(), h * n, out))
}

/// Trains an MLP forecaster by minibatch MSE and returns its MSE on the
/// validation inputs.
pub fn fit_forecaster(hidden: &[usize], train: (&Tensor, &Tensor), valid: (&Tensor, &Tensor), cfg: &TrainConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let spec = MlpSpec::leaky(train.0.cols(), hidden, train.1.cols(), 0.2, seed);
    let mut params = ParamStore::new();
    let net = Mlp::register(&mut params, "forecaster", spec)?;
    let mut adam = AdamState::new(&params);
    let rows = train.0.rows();
    let mut order: Vec<usize> = (0..rows).collect();
    for epoch in 0..cfg.epochs {
        let mut r = rng::indexed_substream(seed, "baseline-epoch", epoch as u64);
        rng::shuffle(&mut r, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = gather_rows(train.0, chunk);
            let yb = gather_rows(train.1, chunk);
            let mut grads = {
                let mut tape = Tape::new(&params);
                let xv = tape.constant(xb);
                let yv = tape.constant(yb);
                let pred = net.forward(&mut tape, xv)?;
                let d = tape.sub(pred, yv)?;
                let sq = tape.square(d);
                let loss = tape.mean(sq);
                if !tape.scalar(loss).is_finite() {
                    return Err(Error::NonFiniteLoss { term: "l_y", step: epoch as u64 });
                }
                tape.backward_scalar(loss)?
            };
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut adam, &cfg.adam())?;
        }
    }
    let pred = crate::mlp::mlp_forward(&net, &params, valid.0)?;
    Ok(forecast_metrics(&pred, valid.1)?.0)
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::raw(rows.len(), c, data)
}

/// Trains three forecasters of identical hidden widths that differ only in
/// their inputs: history only, history plus the true latents over the
/// forecast horizon, history plus the model's estimates of those latents
/// (inferred from the history alone). Returns validation MSEs.
pub fn baseline_suite(
    model: &TotModel,
    x: &Tensor,
    z: Option<&Tensor>,
    train_range: core::ops::Range<usize>,
    valid_range: core::ops::Range<usize>,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<BaselineReport> {
    let z = z.ok_or_else(|| Error::Config("baseline suite needs ground-truth latents".into()))?;
    let c = model.config();
    let (t_in, h) = (c.t_in, c.horizon);
    let train_starts = window_starts(train_range, t_in + h);
    let valid_starts = window_starts(valid_range, t_in + h);
    if train_starts.is_empty() || valid_starts.is_empty() {
        return Err(Error::Config("train and validation ranges must each hold a full window".into()));
    }
    // the three forecasters share one seed, so only their inputs differ
    let run = |lat: Option<(Tensor, Tensor)>| -> Result<f64> {
        let (lt, lv) = match &lat {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let tr = comparison_inputs(x, lt, &train_starts, t_in, h)?;
        let va = comparison_inputs(x, lv, &valid_starts, t_in, h)?;
        fit_forecaster(hidden, (&tr.0, &tr.1), (&va.0, &va.1), cfg, cfg.seed)
    };
    let truth = (horizon_latents(z, &train_starts, t_in, h)?, horizon_latents(z, &valid_starts, t_in, h)?);
    let est = (
        estimated_horizon_latents(model, x, &train_starts)?,
        estimated_horizon_latents(model, x, &valid_starts)?,
    );
    let baseline_mse = run(None)?;
    let oracle_mse = run(Some(truth))?;
    let tot_mse = run(Some(est))?;
    Ok(BaselineReport {
        baseline_mse,
        oracle_mse,
        tot_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcc_self_and_permuted() {
        let mut r = rng::substream(9, "m");
        let z = Tensor::raw(200, 3, (0..600).map(|_| rng::normal(&mut r)).collect());
        assert!((mcc(&z, &z).unwrap().score - 1.0).abs() < 1e-12);
        let mut p = Tensor::zeros(vec![200, 3]);
        for t in 0..200 {
            p.set(t, 0, -z.get(t, 2));
            p.set(t, 1, 3.0 * z.get(t, 0) + 1.0);
            p.set(t, 2, z.get(t, 1));
        }
        let rep = mcc(&z, &p).unwrap();
        assert!((rep.score - 1.0).abs() < 1e-12);
        assert_eq!(rep.assignment, vec![1, 2, 0]);
    }

    #[test]
    fn constant_column_has_zero_correlation() {
        assert_eq!(abs_pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn metric_examples() {
        let a = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(forecast_metrics(&a, &b).unwrap(), (5.0, 2.0));
        assert_eq!(forecast_metrics(&b, &b).unwrap(), (0.0, 0.0));
        let c = Tensor::matrix(1, 2, vec![3.0, 5.0]).unwrap();
        assert_eq!(forecast_metrics(&c, &b).unwrap(), (4.0, 2.0));
    }

    #[test]
    fn f1_counts() {
        let (p, r, f) = support_f1(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!((p, r, f), (0.5, 0.5, 0.5));
    }
}
