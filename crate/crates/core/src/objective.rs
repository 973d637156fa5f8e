//! Loss terms and the weighted training objective.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::math::{self, LN_2PI};
use crate::model::{EncoderOutput, TotModel};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Most decoder rows used for the sparsity penalty per batch.
pub const SPARSITY_ROWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// `l_y + a l_r - b (kl_z - kl_o) + g l_s`, signs as printed.
    Verbatim,
    /// `l_y + a l_r + b (kl_z + kl_o) + g l_s`.
    PenalizeBoth,
}

impl SignMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "verbatim" => Some(SignMode::Verbatim),
            "penalize-both" | "penalize_both" => Some(SignMode::PenalizeBoth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sign_mode: SignMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            gamma: 0.01,
            sign_mode: SignMode::PenalizeBoth,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_y: f64,
    pub l_r: f64,
    pub l_kl_z: f64,
    pub l_kl_o: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Names and values of the five terms, in objective order.
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l_y", self.l_y),
            ("l_r", self.l_r),
            ("l_kl_z", self.l_kl_z),
            ("l_kl_o", self.l_kl_o),
            ("l_s", self.l_s),
        ]
    }
}

/// Weighted combination of the five terms.
pub fn total_loss(l_y: f64, l_r: f64, l_kl_z: f64, l_kl_o: f64, l_s: f64, w: &LossWeights) -> LossBreakdown {
    let kl = match w.sign_mode {
        SignMode::Verbatim => -w.beta * (l_kl_z - l_kl_o),
        SignMode::PenalizeBoth => w.beta * (l_kl_z + l_kl_o),
    };
    LossBreakdown {
        l_y,
        l_r,
        l_kl_z,
        l_kl_o,
        l_s,
        total: l_y + w.alpha * l_r + kl + w.gamma * l_s,
    }
}

fn mse(op: &'static str, pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(dim_err(op, format!("{:?}", truth.shape()), format!("{:?}", pred.shape())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Mean squared forecast error over `horizon x n` entries.
pub fn loss_forecast(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    mse("loss_forecast", pred, truth)
}

/// Mean squared reconstruction error over the history window.
pub fn loss_reconstruction(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    mse("loss_reconstruction", pred, truth)
}

/// Randomness consumed by one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    /// Reparameterization noise, `B x (T n)`.
    pub noise: Tensor,
    /// Decoder rows (indices into the `B * t_in` history steps) used by the
    /// sparsity penalty.
    pub sparsity_rows: Vec<usize>,
}

impl Draws {
    pub fn sample(model: &TotModel, batch: usize, rng: &mut Rng) -> Self {
        let c = model.config();
        let tn = c.window() * c.n;
        let noise = (0..batch * tn).map(|_| rng::normal(rng)).collect();
        let total = batch * c.t_in;
        let mut rows: Vec<usize> = (0..total).collect();
        rng::shuffle(rng, &mut rows);
        rows.truncate(SPARSITY_ROWS.min(total));
        rows.sort_unstable();
        Self {
            noise: Tensor::raw(batch, tn, noise),
            sparsity_rows: rows,
        }
    }

    /// Zero noise and the first few rows: the deterministic evaluation draw.
    pub fn zero(model: &TotModel, batch: usize) -> Self {
        let c = model.config();
        let total = batch * c.t_in;
        Self {
            noise: Tensor::zeros(alloc::vec![batch, c.window() * c.n]),
            sparsity_rows: (0..SPARSITY_ROWS.min(total)).collect(),
        }
    }
}

/// Tape nodes of every term (each `1 x 1`).
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_y: Var,
    pub l_r: Var,
    pub l_kl_z: Var,
    pub l_kl_o: Var,
    pub l_s: Var,
    pub total: Var,
}

impl LossVars {
    pub fn get(&self, term: Term) -> Var {
        match term {
            Term::Forecast => self.l_y,
            Term::Reconstruction => self.l_r,
            Term::KlLatent => self.l_kl_z,
            Term::KlObs => self.l_kl_o,
            Term::Sparsity => self.l_s,
            Term::Total => self.total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Forecast,
    Reconstruction,
    KlLatent,
    KlObs,
    Sparsity,
    Total,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Forecast,
        Term::Reconstruction,
        Term::KlLatent,
        Term::KlObs,
        Term::Sparsity,
        Term::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Forecast => "l_y",
            Term::Reconstruction => "l_r",
            Term::KlLatent => "l_kl_z",
            Term::KlObs => "l_kl_o",
            Term::Sparsity => "l_s",
            Term::Total => "total",
        }
    }
}

fn sum_sq(tape: &mut Tape, v: Var) -> Var {
    let sq = tape.square(v);
    tape.sum(sq)
}

fn mse_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Sum of standard-normal log densities of every entry of `v`.
fn std_normal_logpdf_sum(tape: &mut Tape, v: Var) -> Var {
    let count = tape.value(v).len() as f64;
    let ss = sum_sq(tape, v);
    let half = tape.scale(ss, -0.5);
    tape.add_scalar(half, -0.5 * LN_2PI * count)
}

/// Records every term for a batch `B x (T n)` of full windows.
pub fn build_loss(tape: &mut Tape, model: &TotModel, batch: &Tensor, draws: &Draws, weights: &LossWeights) -> Result<LossVars> {
    let c = model.config();
    let (n, t_in, h, t) = (c.n, c.t_in, c.horizon, c.window());
    if batch.cols() != t * n {
        return Err(dim_err("build_loss", format!("{} columns", t * n), format!("{}", batch.cols())));
    }
    let b = batch.rows();
    if draws.noise.rows() != b || draws.noise.cols() != t * n {
        return Err(dim_err("build_loss", format!("{b}x{} noise", t * n), format!("{}x{}", draws.noise.rows(), draws.noise.cols())));
    }
    let x = tape.constant(batch.clone());
    let x_hist = tape.slice_cols(x, 0, t_in * n)?;
    let x_future = tape.slice_cols(x, t_in * n, h * n)?;
    let enc = model.encode_graph(tape, x_hist, Some(&draws.noise))?;
    let z_hist = tape.slice_cols(enc.sample, 0, t_in * n)?;
    let z_future = tape.slice_cols(enc.sample, t_in * n, h * n)?;

    let x_rec = model.decode_graph(tape, z_hist)?;
    let l_r = mse_var(tape, x_rec, x_hist)?;
    let x_pred = model.forecast_graph(tape, z_future, x_hist)?;
    let l_y = mse_var(tape, x_pred, x_future)?;

    // log q at the drawn sample: the standardized residual is the noise itself.
    let entries = (b * t * n) as f64;
    let lv_sum = tape.sum(enc.log_var);
    let noise_sq: f64 = draws.noise.data().iter().map(|e| e * e).sum();
    let log_q = tape.scale(lv_sum, -0.5);
    let log_q = tape.add_scalar(log_q, -0.5 * noise_sq - 0.5 * LN_2PI * entries);

    let z_first = tape.slice_cols(enc.sample, 0, n)?;
    let log_p_first = std_normal_logpdf_sum(tape, z_first);
    let flow = model.latent_flow_graph(tape, enc.sample)?;
    let log_p_eps = std_normal_logpdf_sum(tape, flow.eps);
    let log_det = tape.sum(flow.log_diag);
    let log_p = tape.add(log_p_first, log_p_eps)?;
    let log_p = tape.add(log_p, log_det)?;
    let kl = tape.sub(log_q, log_p)?;
    let l_kl_z = tape.scale(kl, 1.0 / entries);

    let oflow = model.obs_flow_graph(tape, enc.sample, x)?;
    let o_entries = tape.value(oflow.eps).len() as f64;
    let o_logp = std_normal_logpdf_sum(tape, oflow.eps);
    let o_det = tape.sum(oflow.log_diag);
    let o_ll = tape.add(o_logp, o_det)?;
    let l_kl_o = tape.scale(o_ll, -1.0 / o_entries);

    let l_s = if draws.sparsity_rows.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let rows = tape.reshape(z_hist, b * t_in, n)?;
        let picked = tape.select_rows(rows, &draws.sparsity_rows)?;
        let cols = model.decoder_jacobian_graph(tape, picked)?;
        let mut acc: Option<Var> = None;
        for col in cols {
            let a = tape.abs(col);
            let s = tape.sum(a);
            acc = Some(match acc {
                None => s,
                Some(p) => tape.add(p, s)?,
            });
        }
        let s = acc.expect("n >= 1");
        tape.scale(s, 1.0 / draws.sparsity_rows.len() as f64)
    };

    let kl_block = match weights.sign_mode {
        SignMode::Verbatim => {
            let d = tape.sub(l_kl_z, l_kl_o)?;
            tape.scale(d, -weights.beta)
        }
        SignMode::PenalizeBoth => {
            let s = tape.add(l_kl_z, l_kl_o)?;
            tape.scale(s, weights.beta)
        }
    };
    let wr = tape.scale(l_r, weights.alpha);
    let ws = tape.scale(l_s, weights.gamma);
    let total = tape.add(l_y, wr)?;
    let total = tape.add(total, kl_block)?;
    let total = tape.add(total, ws)?;
    Ok(LossVars {
        l_y,
        l_r,
        l_kl_z,
        l_kl_o,
        l_s,
        total,
    })
}

fn breakdown(tape: &Tape, v: &LossVars) -> LossBreakdown {
    LossBreakdown {
        l_y: tape.scalar(v.l_y),
        l_r: tape.scalar(v.l_r),
        l_kl_z: tape.scalar(v.l_kl_z),
        l_kl_o: tape.scalar(v.l_kl_o),
        l_s: tape.scalar(v.l_s),
        total: tape.scalar(v.total),
    }
}

fn check_finite(b: &LossBreakdown, step: u64) -> Result<()> {
    for (name, v) in b.terms() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name, step });
        }
    }
    if !b.total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total", step });
    }
    Ok(())
}

/// Loss values, gradient of the total and the number of guarded log-partials.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub grads: ParamStore,
    pub guard_hits: usize,
}

/// Values only.
pub fn evaluate_loss(model: &TotModel, batch: &Tensor, draws: &Draws, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut tape = Tape::new(&model.params);
    let vars = build_loss(&mut tape, model, batch, draws, weights)?;
    Ok(breakdown(&tape, &vars))
}

/// Values plus the gradient of the total. `step` labels non-finite errors.
pub fn evaluate(model: &TotModel, batch: &Tensor, draws: &Draws, weights: &LossWeights, step: u64) -> Result<Evaluation> {
    let mut tape = Tape::new(&model.params);
    let vars = build_loss(&mut tape, model, batch, draws, weights)?;
    let b = breakdown(&tape, &vars);
    check_finite(&b, step)?;
    let grads = tape.backward_scalar(vars.total)?;
    Ok(Evaluation {
        breakdown: b,
        grads,
        guard_hits: tape.guard_hits(),
    })
}

/// Value of a single term evaluated at `params` instead of the model's own.
pub fn term_value(model: &TotModel, params: &ParamStore, batch: &Tensor, draws: &Draws, weights: &LossWeights, term: Term) -> Result<f64> {
    let mut tape = Tape::new(params);
    let vars = build_loss(&mut tape, model, batch, draws, weights)?;
    Ok(tape.scalar(vars.get(term)))
}

/// Value and parameter gradient of a single term.
pub fn term_gradient(model: &TotModel, batch: &Tensor, draws: &Draws, weights: &LossWeights, term: Term) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new(&model.params);
    let vars = build_loss(&mut tape, model, batch, draws, weights)?;
    let v = vars.get(term);
    Ok((tape.scalar(v), tape.backward_scalar(v)?))
}

// ---- single-window helpers ----

/// `log p(z_1..z_T)` under the learned latent prior for a `T x n` window.
pub fn latent_prior_logprob(model: &TotModel, z: &Tensor) -> Result<f64> {
    let n = model.config().n;
    if z.cols() != n || z.rows() < 2 {
        return Err(dim_err("latent_prior_logprob", format!("T x {n} with T >= 2"), format!("{}x{}", z.rows(), z.cols())));
    }
    let mut tape = Tape::new(&model.params);
    let zv = tape.constant(z.reshaped(1, z.len())?);
    let first = tape.slice_cols(zv, 0, n)?;
    let lp1 = std_normal_logpdf_sum(&mut tape, first);
    let flow = model.latent_flow_graph(&mut tape, zv)?;
    let lpe = std_normal_logpdf_sum(&mut tape, flow.eps);
    let det = tape.sum(flow.log_diag);
    Ok(tape.scalar(lp1) + tape.scalar(lpe) + tape.scalar(det))
}

/// Log density of `z` under independent Gaussians `N(mean, exp(log_var))`.
pub fn diag_gaussian_logpdf(mean: &Tensor, log_var: &Tensor, z: &Tensor) -> f64 {
    mean.data()
        .iter()
        .zip(log_var.data())
        .zip(z.data())
        .map(|((m, lv), v)| {
            let e = (v - m) / math::exp(0.5 * lv);
            -0.5 * LN_2PI - 0.5 * lv - 0.5 * e * e
        })
        .sum()
}

/// Single-sample `log q - log p`, per latent entry.
pub fn kl_latent(enc: &EncoderOutput, model: &TotModel) -> Result<f64> {
    let log_q = diag_gaussian_logpdf(&enc.mean, &enc.log_var, &enc.sample);
    let log_p = latent_prior_logprob(model, &enc.sample)?;
    Ok((log_q - log_p) / enc.sample.len() as f64)
}

/// Negative mean log-likelihood of the observation noise estimates over
/// steps `2..=T` of aligned `T x n` windows.
pub fn kl_obs(x: &Tensor, z: &Tensor, model: &TotModel) -> Result<f64> {
    let n = model.config().n;
    if x.shape() != z.shape() || x.cols() != n || x.rows() < 2 {
        return Err(dim_err("kl_obs", format!("aligned T x {n} windows, T >= 2"), format!("{:?} / {:?}", x.shape(), z.shape())));
    }
    let mut tape = Tape::new(&model.params);
    let xv = tape.constant(x.reshaped(1, x.len())?);
    let zv = tape.constant(z.reshaped(1, z.len())?);
    let f = model.obs_flow_graph(&mut tape, zv, xv)?;
    let count = tape.value(f.eps).len() as f64;
    let lp = std_normal_logpdf_sum(&mut tape, f.eps);
    let det = tape.sum(f.log_diag);
    Ok(-(tape.scalar(lp) + tape.scalar(det)) / count)
}

/// Mean over rows of `z` (`S x n`) of the summed absolute decoder Jacobian.
pub fn loss_sparsity(model: &TotModel, z: &Tensor) -> Result<f64> {
    let n = model.config().n;
    if z.cols() != n || z.rows() == 0 {
        return Err(dim_err("loss_sparsity", format!("S x {n} with S >= 1"), format!("{}x{}", z.rows(), z.cols())));
    }
    let mut tape = Tape::new(&model.params);
    let zv = tape.constant(z.clone());
    let cols = model.decoder_jacobian_graph(&mut tape, zv)?;
    let s: f64 = cols.iter().flat_map(|c| tape.value(*c).data().iter()).map(|v| v.abs()).sum();
    Ok(s / z.rows() as f64)
}
