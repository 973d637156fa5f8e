//! Sequential VAE with flow-based noise estimators and a residual forecaster.
//!
//! Windows are batched as rows: a batch of `B` windows of `T` steps is a
//! `B x (T * n)` matrix whose row holds steps in time order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::mlp::{Activation, Mlp, MlpSpec};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower bound applied to `|d r / d input|` before taking logs.
pub const DIAG_GUARD: f64 = 1e-12;

/// How each per-dimension noise estimator `r_i` is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowKind {
    /// `r_i(u, c) = (u - mu_i(c)) * exp(-s_i(c))`: monotone in `u`, so the
    /// implied conditional density is always normalized.
    ConditionalAffine,
    /// `r_i(u, c)` is a plain MLP of `[u, c]`; the diagonal partial comes from
    /// forward-mode differentiation.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub reducer_hidden: Vec<usize>,
    pub forecaster_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
    pub slope: f64,
    pub flow: FlowKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 5,
            t_in: 4,
            horizon: 2,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            reducer_hidden: vec![64],
            forecaster_hidden: vec![64, 64],
            noise_hidden: vec![32],
            slope: 0.2,
            flow: FlowKind::ConditionalAffine,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full window length `t_in + horizon`.
    pub fn window(&self) -> usize {
        self.t_in + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_in == 0 || self.horizon == 0 {
            return Err(Error::Config(format!(
                "model.n, model.t_in and model.horizon must be at least 1 (got {}, {}, {})",
                self.n, self.t_in, self.horizon
            )));
        }
        if !(self.slope > 0.0 && self.slope <= 1.0) {
            return Err(Error::Config(format!("model.slope must lie in (0, 1], got {}", self.slope)));
        }
        let widths = [
            ("encoder_hidden", &self.encoder_hidden),
            ("decoder_hidden", &self.decoder_hidden),
            ("reducer_hidden", &self.reducer_hidden),
            ("forecaster_hidden", &self.forecaster_hidden),
            ("noise_hidden", &self.noise_hidden),
        ];
        for (name, w) in widths {
            if w.iter().any(|&v| v == 0) {
                return Err(Error::Config(format!("model.{name} contains a zero width")));
            }
        }
        Ok(())
    }

    fn net_seed(&self, k: u64) -> u64 {
        self.seed.wrapping_add((k + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Mean, log-variance and one reparameterized draw, each `T x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub sample: Tensor,
    /// Standard-normal draw used for `sample`.
    pub noise: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotModel {
    config: ModelConfig,
    pub params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    reducer: Mlp,
    forecaster: Mlp,
    latent_nets: Vec<Mlp>,
    obs_nets: Vec<Mlp>,
}

/// Symbolic outputs of [`TotModel::encode_graph`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub mean: Var,
    pub log_var: Var,
    pub sample: Var,
}

/// Per-entry noise estimates and log-diagonal partials, both `R x n`.
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub eps: Var,
    pub log_diag: Var,
    pub diag: Var,
}

impl TotModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let specs = Self::specs(&config);
        let encoder = Mlp::register(&mut params, "encoder", specs.encoder)?;
        let decoder = Mlp::register(&mut params, "decoder", specs.decoder)?;
        let reducer = Mlp::register(&mut params, "reducer", specs.reducer)?;
        let forecaster = Mlp::register(&mut params, "forecaster", specs.forecaster)?;
        let mut latent_nets = Vec::with_capacity(config.n);
        for (i, s) in specs.latent.into_iter().enumerate() {
            latent_nets.push(Mlp::register(&mut params, &format!("r_z{i}"), s)?);
        }
        let mut obs_nets = Vec::with_capacity(config.n);
        for (i, s) in specs.obs.into_iter().enumerate() {
            obs_nets.push(Mlp::register(&mut params, &format!("r_o{i}"), s)?);
        }
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            reducer,
            forecaster,
            latent_nets,
            obs_nets,
        })
    }

    /// Rebinds a model to previously saved parameters.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::Config("parameter table does not match the model configuration".into()));
        }
        Ok(Self { params, ..fresh })
    }

    fn specs(c: &ModelConfig) -> Specs {
        let n = c.n;
        let t = c.window();
        let flow_out = match c.flow {
            FlowKind::ConditionalAffine => 2,
            FlowKind::Mlp => 1,
        };
        let flow_in = |cond: usize| match c.flow {
            FlowKind::ConditionalAffine => cond,
            FlowKind::Mlp => cond + 1,
        };
        Specs {
            encoder: MlpSpec::leaky(c.t_in * n, &c.encoder_hidden, 2 * t * n, c.slope, c.net_seed(0)),
            decoder: MlpSpec::leaky(n, &c.decoder_hidden, n, c.slope, c.net_seed(1)),
            reducer: MlpSpec::leaky(c.t_in * n, &c.reducer_hidden, n, c.slope, c.net_seed(2)),
            forecaster: MlpSpec::leaky(2 * n, &c.forecaster_hidden, n, c.slope, c.net_seed(3)),
            latent: (0..n)
                .map(|i| MlpSpec::leaky(flow_in(n), &c.noise_hidden, flow_out, c.slope, c.net_seed(10 + i as u64)))
                .collect(),
            obs: (0..n)
                .map(|i| MlpSpec::leaky(flow_in(2 * n), &c.noise_hidden, flow_out, c.slope, c.net_seed(10_000 + i as u64)))
                .collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn reducer(&self) -> &Mlp {
        &self.reducer
    }

    pub fn forecaster(&self) -> &Mlp {
        &self.forecaster
    }

    pub fn latent_nets(&self) -> &[Mlp] {
        &self.latent_nets
    }

    pub fn obs_nets(&self) -> &[Mlp] {
        &self.obs_nets
    }

    fn check_cols(&self, op: &'static str, tape: &Tape, v: Var, steps: usize) -> Result<usize> {
        let (r, c) = tape.dims(v);
        if c != steps * self.config.n {
            return Err(dim_err(op, format!("{} columns", steps * self.config.n), format!("{c}")));
        }
        Ok(r)
    }

    // ---- graph builders (batched) ----

    /// `x_hist` is `B x (t_in n)`; `noise` is `B x (T n)` (zero when `None`).
    pub fn encode_graph(&self, tape: &mut Tape, x_hist: Var, noise: Option<&Tensor>) -> Result<EncoderVars> {
        let b = self.check_cols("encode", tape, x_hist, self.config.t_in)?;
        let tn = self.config.window() * self.config.n;
        let out = self.encoder.forward(tape, x_hist)?;
        let mean = tape.slice_cols(out, 0, tn)?;
        let log_var = tape.slice_cols(out, tn, tn)?;
        let sample = match noise {
            None => mean,
            Some(e) => {
                if e.rows() != b || e.cols() != tn {
                    return Err(dim_err("encode", format!("{b}x{tn} noise"), format!("{}x{}", e.rows(), e.cols())));
                }
                let half = tape.scale(log_var, 0.5);
                let std = tape.exp(half);
                let e = tape.constant(e.clone());
                let spread = tape.mul(std, e)?;
                tape.add(mean, spread)?
            }
        };
        Ok(EncoderVars { mean, log_var, sample })
    }

    /// Per-step decoder applied to `z` of shape `B x (steps n)`.
    pub fn decode_graph(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let n = self.config.n;
        let (b, c) = tape.dims(z);
        if c % n != 0 {
            return Err(dim_err("decode", format!("a multiple of {n} columns"), format!("{c}")));
        }
        let steps = c / n;
        let rows = tape.reshape(z, b * steps, n)?;
        let out = self.decoder.forward(tape, rows)?;
        tape.reshape(out, b, steps * n)
    }

    /// `z_future` is `B x (horizon n)`, `x_hist` is `B x (t_in n)`.
    pub fn forecast_graph(&self, tape: &mut Tape, z_future: Var, x_hist: Var) -> Result<Var> {
        let n = self.config.n;
        let h = self.config.horizon;
        let b = self.check_cols("forecast", tape, z_future, h)?;
        let bx = self.check_cols("forecast", tape, x_hist, self.config.t_in)?;
        if b != bx {
            return Err(dim_err("forecast", format!("{b} history rows"), format!("{bx}")));
        }
        let context = self.reducer.forward(tape, x_hist)?;
        let context = tape.repeat_rows(context, h);
        let z_rows = tape.reshape(z_future, b * h, n)?;
        let input = tape.concat_cols(&[z_rows, context])?;
        let out = self.forecaster.forward(tape, input)?;
        tape.reshape(out, b, h * n)
    }

    fn flow(&self, tape: &mut Tape, net: &Mlp, target: Var, cond: Var) -> Result<(Var, Var, Var)> {
        match self.config.flow {
            FlowKind::ConditionalAffine => {
                let out = net.forward(tape, cond)?;
                let mu = tape.slice_cols(out, 0, 1)?;
                let s = tape.slice_cols(out, 1, 1)?;
                let centered = tape.sub(target, mu)?;
                let neg_s = tape.scale(s, -1.0);
                let diag = tape.exp(neg_s);
                let eps = tape.mul(centered, diag)?;
                Ok((eps, neg_s, diag))
            }
            FlowKind::Mlp => {
                let input = tape.concat_cols(&[target, cond])?;
                let (eps, diag) = net.forward_with_unit_tangent(tape, input, 0)?;
                let log_diag = tape.ln_abs(diag, DIAG_GUARD);
                Ok((eps, log_diag, diag))
            }
        }
    }

    /// Consecutive-step pairs of a `B x (steps n)` window as `(prev, curr)`,
    /// each `B (steps - 1) x n`.
    fn step_pairs(&self, tape: &mut Tape, w: Var) -> Result<(Var, Var)> {
        let n = self.config.n;
        let (b, c) = tape.dims(w);
        let steps = c / n;
        if steps < 2 || c % n != 0 {
            return Err(dim_err("step_pairs", "at least two steps", format!("{c} columns")));
        }
        let prev = tape.slice_cols(w, 0, (steps - 1) * n)?;
        let prev = tape.reshape(prev, b * (steps - 1), n)?;
        let curr = tape.slice_cols(w, n, (steps - 1) * n)?;
        let curr = tape.reshape(curr, b * (steps - 1), n)?;
        Ok((prev, curr))
    }

    /// Latent noise estimates for steps `2..=steps` of `z` (`B x (steps n)`).
    pub fn latent_flow_graph(&self, tape: &mut Tape, z: Var) -> Result<FlowVars> {
        let (prev, curr) = self.step_pairs(tape, z)?;
        self.latent_flow_pairs(tape, prev, curr)
    }

    /// Latent noise estimates on explicit `(prev, curr)` rows, each `R x n`.
    pub fn latent_flow_pairs(&self, tape: &mut Tape, prev: Var, curr: Var) -> Result<FlowVars> {
        let mut eps = Vec::with_capacity(self.config.n);
        let mut logs = Vec::with_capacity(self.config.n);
        let mut diags = Vec::with_capacity(self.config.n);
        for (i, net) in self.latent_nets.iter().enumerate() {
            let target = tape.slice_cols(curr, i, 1)?;
            let (e, l, d) = self.flow(tape, net, target, prev)?;
            eps.push(e);
            logs.push(l);
            diags.push(d);
        }
        Ok(FlowVars {
            eps: tape.concat_cols(&eps)?,
            log_diag: tape.concat_cols(&logs)?,
            diag: tape.concat_cols(&diags)?,
        })
    }

    /// Observation noise estimates for steps `2..=steps`; `z` and `x` are
    /// aligned `B x (steps n)` windows.
    pub fn obs_flow_graph(&self, tape: &mut Tape, z: Var, x: Var) -> Result<FlowVars> {
        let n = self.config.n;
        if tape.dims(z) != tape.dims(x) {
            return Err(dim_err("obs_noise", "aligned z and x windows", "mismatched shapes"));
        }
        let (b, c) = tape.dims(z);
        let steps = c / n;
        let (x_prev, x_curr) = self.step_pairs(tape, x)?;
        let z_curr = tape.slice_cols(z, n, (steps - 1) * n)?;
        let z_curr = tape.reshape(z_curr, b * (steps - 1), n)?;
        self.obs_flow_rows(tape, z_curr, x_prev, x_curr)
    }

    pub fn obs_flow_rows(&self, tape: &mut Tape, z_curr: Var, x_prev: Var, x_curr: Var) -> Result<FlowVars> {
        let cond = tape.concat_cols(&[z_curr, x_prev])?;
        let mut eps = Vec::with_capacity(self.config.n);
        let mut logs = Vec::with_capacity(self.config.n);
        let mut diags = Vec::with_capacity(self.config.n);
        for (i, net) in self.obs_nets.iter().enumerate() {
            let target = tape.slice_cols(x_curr, i, 1)?;
            let (e, l, d) = self.flow(tape, net, target, cond)?;
            eps.push(e);
            logs.push(l);
            diags.push(d);
        }
        Ok(FlowVars {
            eps: tape.concat_cols(&eps)?,
            log_diag: tape.concat_cols(&logs)?,
            diag: tape.concat_cols(&diags)?,
        })
    }

    /// Columns of the decoder Jacobian at each row of `z_rows` (`S x n`):
    /// entry `j` is `S x n` with `[s, i] = d x_hat_i / d z_j`.
    pub fn decoder_jacobian_graph(&self, tape: &mut Tape, z_rows: Var) -> Result<Vec<Var>> {
        (0..self.config.n)
            .map(|j| self.decoder.forward_with_unit_tangent(tape, z_rows, j).map(|(_, t)| t))
            .collect()
    }

    // ---- single-window evaluation ----

    fn check_matrix(&self, op: &'static str, t: &Tensor, rows: usize) -> Result<()> {
        if t.rows() != rows || t.cols() != self.config.n {
            return Err(dim_err(op, format!("{rows}x{}", self.config.n), format!("{}x{}", t.rows(), t.cols())));
        }
        Ok(())
    }

    fn check_vector(&self, op: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.config.n {
            return Err(dim_err(op, format!("length {}", self.config.n), format!("{}", v.len())));
        }
        Ok(())
    }

    /// Encodes one `t_in x n` history into `T x n` posteriors, drawing the
    /// reparameterization noise from `rng`.
    pub fn encode(&self, x_hist: &Tensor, rng: &mut Rng) -> Result<EncoderOutput> {
        let tn = self.config.window() * self.config.n;
        let noise: Vec<f64> = (0..tn).map(|_| rng::normal(rng)).collect();
        self.encode_with_noise(x_hist, &Tensor::raw(self.config.window(), self.config.n, noise))
    }

    /// [`TotModel::encode`] with an explicit `T x n` noise draw.
    pub fn encode_with_noise(&self, x_hist: &Tensor, noise: &Tensor) -> Result<EncoderOutput> {
        self.check_matrix("encode", x_hist, self.config.t_in)?;
        self.check_matrix("encode", noise, self.config.window())?;
        let (t, n) = (self.config.window(), self.config.n);
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(x_hist.reshaped(1, self.config.t_in * n)?);
        let flat_noise = noise.reshaped(1, t * n)?;
        let vars = self.encode_graph(&mut tape, x, Some(&flat_noise))?;
        let grab = |v: Var| tape.value(v).reshaped(t, n);
        Ok(EncoderOutput {
            mean: grab(vars.mean)?,
            log_var: grab(vars.log_var)?,
            sample: grab(vars.sample)?,
            noise: noise.clone(),
        })
    }

    /// Decodes `steps x n` latents step by step.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.config.n {
            return Err(dim_err("decode", format!("{} columns", self.config.n), format!("{}", z.cols())));
        }
        let mut tape = Tape::new(&self.params);
        let zv = tape.constant(z.clone());
        let out = self.decoder.forward(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// `(eps_hat, diagonal partials)` of the latent estimators.
    pub fn latent_noise(&self, z_prev: &[f64], z_curr: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_vector("latent_noise", z_prev)?;
        self.check_vector("latent_noise", z_curr)?;
        let n = self.config.n;
        let mut tape = Tape::new(&self.params);
        let prev = tape.constant(Tensor::raw(1, n, z_prev.to_vec()));
        let curr = tape.constant(Tensor::raw(1, n, z_curr.to_vec()));
        let f = self.latent_flow_pairs(&mut tape, prev, curr)?;
        Ok((tape.value(f.eps).data().to_vec(), tape.value(f.diag).data().to_vec()))
    }

    pub fn obs_noise(&self, z_curr: &[f64], x_prev: &[f64], x_curr: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_vector("obs_noise", z_curr)?;
        self.check_vector("obs_noise", x_prev)?;
        self.check_vector("obs_noise", x_curr)?;
        let n = self.config.n;
        let mut tape = Tape::new(&self.params);
        let z = tape.constant(Tensor::raw(1, n, z_curr.to_vec()));
        let xp = tape.constant(Tensor::raw(1, n, x_prev.to_vec()));
        let xc = tape.constant(Tensor::raw(1, n, x_curr.to_vec()));
        let f = self.obs_flow_rows(&mut tape, z, xp, xc)?;
        Ok((tape.value(f.eps).data().to_vec(), tape.value(f.diag).data().to_vec()))
    }

    /// Forecast `horizon x n` from future latents and the raw history.
    pub fn forecast(&self, z_future: &Tensor, x_hist: &Tensor) -> Result<Tensor> {
        self.check_matrix("forecast", z_future, self.config.horizon)?;
        self.check_matrix("forecast", x_hist, self.config.t_in)?;
        let n = self.config.n;
        let mut tape = Tape::new(&self.params);
        let z = tape.constant(z_future.reshaped(1, self.config.horizon * n)?);
        let x = tape.constant(x_hist.reshaped(1, self.config.t_in * n)?);
        let out = self.forecast_graph(&mut tape, z, x)?;
        tape.value(out).reshaped(self.config.horizon, n)
    }

    /// Exact `n x n` Jacobian `[i][j] = d x_hat_i / d z_j` at one step.
    pub fn decoder_jacobian(&self, z: &[f64]) -> Result<Tensor> {
        self.check_vector("decoder_jacobian", z)?;
        let n = self.config.n;
        let mut tape = Tape::new(&self.params);
        let zv = tape.constant(Tensor::raw(1, n, z.to_vec()));
        let cols = self.decoder_jacobian_graph(&mut tape, zv)?;
        let mut jac = Tensor::zeros(vec![n, n]);
        for (j, c) in cols.iter().enumerate() {
            for i in 0..n {
                jac.set(i, j, tape.value(*c).data()[i]);
            }
        }
        Ok(jac)
    }

    /// Deterministic forecast for a batch of histories (`B x (t_in n)`),
    /// using the posterior mean of the future latents.
    pub fn predict_batch(&self, x_hist: &Tensor) -> Result<Tensor> {
        let n = self.config.n;
        let (t_in, h) = (self.config.t_in, self.config.horizon);
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(x_hist.clone());
        let enc = self.encode_graph(&mut tape, x, None)?;
        let z_future = tape.slice_cols(enc.mean, t_in * n, h * n)?;
        let out = self.forecast_graph(&mut tape, z_future, x)?;
        Ok(tape.value(out).clone())
    }

    /// Posterior means for a batch of histories, `B x (T n)`.
    pub fn posterior_mean_batch(&self, x_hist: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(x_hist.clone());
        let enc = self.encode_graph(&mut tape, x, None)?;
        Ok(tape.value(enc.mean).clone())
    }
}

struct Specs {
    encoder: MlpSpec,
    decoder: MlpSpec,
    reducer: MlpSpec,
    forecaster: MlpSpec,
    latent: Vec<MlpSpec>,
    obs: Vec<MlpSpec>,
}

/// Stacks windows `x[s..s + len]` for each start into a `B x (len n)` batch.
pub fn window_batch(x: &Tensor, starts: &[usize], len: usize) -> Result<Tensor> {
    let n = x.cols();
    if let Some(&bad) = starts.iter().find(|&&s| s + len > x.rows()) {
        return Err(dim_err("window_batch", format!("windows inside {} rows", x.rows()), format!("start {bad} + {len}")));
    }
    let mut data = Vec::with_capacity(starts.len() * len * n);
    for &s in starts {
        data.extend_from_slice(&x.data()[s * n..(s + len) * n]);
    }
    Ok(Tensor::raw(starts.len(), len * n, data))
}

/// Overwrites the weights of a single identity-activation layer, e.g. to
/// build analytic fixtures. `weights` is row-major `in x out`.
pub fn set_linear(params: &mut ParamStore, net: &Mlp, weights: &[f64], bias: &[f64]) -> Result<()> {
    if net.spec().activations.len() != 1 || net.spec().activations[0] != Activation::Identity {
        return Err(Error::Config("set_linear needs a single identity layer".into()));
    }
    let w = params.get_mut(net.weight_ids()[0]);
    if w.len() != weights.len() {
        return Err(dim_err("set_linear", format!("{} weights", w.len()), format!("{}", weights.len())));
    }
    w.data_mut().copy_from_slice(weights);
    let b = params.get_mut(net.bias_ids()[0]);
    if b.len() != bias.len() {
        return Err(dim_err("set_linear", format!("{} biases", b.len()), format!("{}", bias.len())));
    }
    b.data_mut().copy_from_slice(bias);
    Ok(())
}
