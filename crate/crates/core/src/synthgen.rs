//! Synthetic latent-driven time series with ground-truth latents.
//!
//! Latents follow a leaky-ReLU transition with multiplicative and additive
//! Gaussian noise; observations mix the current latents (optionally together
//! with the previous observation) through two leaky-ReLU layers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::check_sparse_mixing_assumption;
use crate::math::leaky_relu;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const SLOPE: f64 = 0.2;
pub const BURN_IN: usize = 100;
/// Trajectories whose magnitude exceeds this are treated as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixingKind {
    /// Every `W_m` entry is drawn.
    Dense,
    /// Banded random support checked against the sparse-mixing assumption.
    SparseBanded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Preset::A),
            "B" | "b" => Some(Preset::B),
            "C" | "c" => Some(Preset::C),
            "D" | "d" => Some(Preset::D),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::A => "A",
            Preset::B => "B",
            Preset::C => "C",
            Preset::D => "D",
        }
    }

    pub fn config(self, seed: u64) -> GenConfig {
        let (n, lag, obs_edges) = match self {
            Preset::A => (5, 1, true),
            Preset::B => (5, 1, false),
            Preset::C => (5, 2, true),
            Preset::D => (10, 1, true),
        };
        GenConfig {
            n,
            lag,
            obs_edges,
            seed,
            ..GenConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n: usize,
    pub lag: usize,
    pub obs_edges: bool,
    pub total_steps: usize,
    pub validation_size: usize,
    pub seed: u64,
    pub noise_std_z: f64,
    pub noise_std_o: f64,
    pub mixing: MixingKind,
    /// Step at which `W_m` is redrawn (distribution shift), if any.
    pub drift_at: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 5,
            lag: 1,
            obs_edges: true,
            total_steps: 20_000,
            validation_size: 1024,
            seed: 0,
            noise_std_z: 1.0,
            noise_std_o: 0.1,
            mixing: MixingKind::Dense,
            drift_at: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("gen.n must be at least 1".into()));
        }
        if self.lag == 0 {
            return Err(Error::Config("gen.lag must be at least 1".into()));
        }
        if self.validation_size >= self.total_steps {
            return Err(Error::Config(format!(
                "gen.validation_size ({}) must be smaller than gen.total_steps ({})",
                self.validation_size, self.total_steps
            )));
        }
        if !(self.noise_std_z >= 0.0 && self.noise_std_z.is_finite()) {
            return Err(Error::Config("gen.noise_std_z must be finite and non-negative".into()));
        }
        if !(self.noise_std_o >= 0.0 && self.noise_std_o.is_finite()) {
            return Err(Error::Config("gen.noise_std_o must be finite and non-negative".into()));
        }
        if let Some(d) = self.drift_at {
            if d >= self.total_steps {
                return Err(Error::Config(format!("gen.drift_at ({d}) must be below gen.total_steps")));
            }
        }
        Ok(())
    }
}

/// Time-delayed weights `W` (one n x n matrix per lag, lag 1 first) and the
/// strictly lower-triangular instantaneous matrix `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentProcessParams {
    pub w: Vec<Tensor>,
    pub v: Tensor,
}

impl LatentProcessParams {
    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn lag(&self) -> usize {
        self.w.len()
    }

    pub fn sample(n: usize, lag: usize, rng: &mut Rng) -> Self {
        let w = (0..lag).map(|_| uniform_matrix(n, rng)).collect();
        let mut v = uniform_matrix(n, rng);
        for i in 0..n {
            for j in i..n {
                v.set(i, j, 0.0);
            }
        }
        Self { w, v }
    }
}

/// `W_x` acts on the previous observation, `W_m` mixes latents into
/// observations. `mask[i * n + j]` marks the edge `z_i -> x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingParams {
    pub w_x: Tensor,
    pub w_m: Tensor,
    pub mask: Option<Vec<bool>>,
}

impl MixingParams {
    pub fn n(&self) -> usize {
        self.w_m.rows()
    }

    pub fn sample(n: usize, kind: MixingKind, obs_edges: bool, rng: &mut Rng) -> Self {
        let w_x = uniform_matrix(n, rng);
        let mut w_m = uniform_matrix(n, rng);
        let mask = match kind {
            MixingKind::Dense => None,
            MixingKind::SparseBanded => {
                let mask = sample_sparse_mask(n, obs_edges, rng);
                for (k, keep) in mask.iter().enumerate() {
                    if !keep {
                        w_m.data_mut()[k] = 0.0;
                    } else {
                        // keep edges clearly away from zero so the support is detectable
                        let v = w_m.data()[k];
                        w_m.data_mut()[k] = if v >= 0.0 { 0.25 + v } else { v - 0.25 };
                    }
                }
                Some(mask)
            }
        };
        Self { w_x, w_m, mask }
    }

    /// Support of `W_m` (explicit mask if present, else nonzero entries).
    pub fn support(&self) -> Vec<bool> {
        match &self.mask {
            Some(m) => m.clone(),
            None => self.w_m.data().iter().map(|v| *v != 0.0).collect(),
        }
    }
}

fn uniform_matrix(n: usize, rng: &mut Rng) -> Tensor {
    let data = (0..n * n).map(|_| rng::uniform(rng, -0.5, 0.5)).collect();
    Tensor::raw(n, n, data)
}

/// Random banded support: row `i` covers `i, i+1, ..` (cyclically) with a
/// random width in `1..=ceil(n/2)`. Redrawn until the sparse-mixing check
/// passes; falls back to the diagonal, which always passes for n >= 2.
fn sample_sparse_mask(n: usize, obs_edges: bool, rng: &mut Rng) -> Vec<bool> {
    let max_width = n.div_ceil(2).max(1);
    for _ in 0..1000 {
        let mut mask = vec![false; n * n];
        for i in 0..n {
            let width = 1 + rng::below(rng, max_width);
            for o in 0..width {
                mask[i * n + (i + o) % n] = true;
            }
        }
        if check_sparse_mixing_assumption(&mask, n, obs_edges).map(|r| r.holds).unwrap_or(false) {
            return mask;
        }
    }
    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
    }
    mask
}

/// Draws of the two latent noise streams for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    /// Multiplicative `epsilon_{t,i}`.
    pub mult: Vec<f64>,
    /// Additive `epsilon^z_{t,i}`, already scaled.
    pub add: Vec<f64>,
}

/// One latent step from explicit noise. `z_hist` holds `lag` rows, oldest first.
pub fn latent_step_with_noise(params: &LatentProcessParams, z_hist: &[Vec<f64>], noise: &LatentNoise) -> Result<Vec<f64>> {
    let n = params.n();
    if z_hist.len() != params.lag() || z_hist.iter().any(|r| r.len() != n) {
        return Err(dim_err("gen_latent_step", format!("{} rows of {n}", params.lag()), format!("{} rows", z_hist.len())));
    }
    if noise.mult.len() != n || noise.add.len() != n {
        return Err(dim_err("gen_latent_step", format!("{n} noise values"), format!("{}", noise.mult.len())));
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut pre = 0.0;
        for (l, w) in params.w.iter().enumerate() {
            let prev = &z_hist[z_hist.len() - 1 - l];
            pre += w.row(i).iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
        }
        let inst: f64 = (0..i).map(|j| params.v.get(i, j) * z[j]).sum();
        z[i] = (leaky_relu(pre, SLOPE) + inst) * noise.mult[i] + noise.add[i];
    }
    Ok(z)
}

/// One latent step drawing both noise streams from `rng`.
pub fn gen_latent_step(params: &LatentProcessParams, z_hist: &[Vec<f64>], noise_std_z: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let n = params.n();
    let mut mult = Vec::with_capacity(n);
    let mut add = Vec::with_capacity(n);
    for _ in 0..n {
        mult.push(rng::normal(rng));
        add.push(noise_std_z * rng::normal(rng));
    }
    latent_step_with_noise(params, z_hist, &LatentNoise { mult, add })
}

/// Observation step from explicit (already scaled) noise `eps_o`.
pub fn obs_step_with_noise(params: &MixingParams, x_prev: &[f64], z: &[f64], eps_o: &[f64], obs_edges: bool) -> Result<Vec<f64>> {
    let n = params.n();
    if x_prev.len() != n || z.len() != n || eps_o.len() != n {
        return Err(dim_err("gen_obs_step", format!("vectors of length {n}"), format!("{}/{}/{}", x_prev.len(), z.len(), eps_o.len())));
    }
    let mut h = vec![0.0; n];
    for i in 0..n {
        let ar = if obs_edges {
            let s: f64 = (0..n).map(|k| x_prev[k] * params.w_x.get(k, i)).sum();
            SLOPE * leaky_relu(s, SLOPE)
        } else {
            0.0
        };
        h[i] = leaky_relu(ar + z[i] + eps_o[i], SLOPE);
    }
    let x = (0..n)
        .map(|j| {
            let s: f64 = (0..n).map(|i| h[i] * params.w_m.get(i, j)).sum();
            leaky_relu(s, SLOPE)
        })
        .collect();
    Ok(x)
}

pub fn gen_obs_step(params: &MixingParams, x_prev: &[f64], z: &[f64], noise_std_o: f64, obs_edges: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..params.n()).map(|_| noise_std_o * rng::normal(rng)).collect();
    obs_step_with_noise(params, x_prev, z, &eps, obs_edges)
}

/// Observed and latent sequences plus the weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub latent: LatentProcessParams,
    pub mixing: MixingParams,
    /// Mixing used from `config.drift_at` onwards.
    pub drift_mixing: Option<MixingParams>,
    /// `total_steps x n`.
    pub x: Tensor,
    /// `total_steps x n`; `None` when ground truth is unavailable.
    pub z: Option<Tensor>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.len() - self.config.validation_size
    }

    pub fn validation_range(&self) -> Range<usize> {
        self.len() - self.config.validation_size..self.len()
    }

    /// Rows `range` of `x` as a new dataset sharing the same weights.
    pub fn slice(&self, range: Range<usize>) -> Dataset {
        let count = range.end - range.start;
        let mut config = self.config.clone();
        config.total_steps = count;
        config.validation_size = config.validation_size.min(count.saturating_sub(1));
        Dataset {
            config,
            latent: self.latent.clone(),
            mixing: self.mixing.clone(),
            drift_mixing: self.drift_mixing.clone(),
            x: self.x.slice_rows(range.start, count),
            z: self.z.as_ref().map(|z| z.slice_rows(range.start, count)),
        }
    }
}

/// Weight matrices implied by a configuration (drawn from its seed).
pub fn sample_weights(config: &GenConfig) -> (LatentProcessParams, MixingParams, Option<MixingParams>) {
    let mut wrng = rng::substream(config.seed, "gen-weights");
    let latent = LatentProcessParams::sample(config.n, config.lag, &mut wrng);
    let mixing = MixingParams::sample(config.n, config.mixing, config.obs_edges, &mut wrng);
    let drift = config.drift_at.map(|_| {
        let mut drng = rng::substream(config.seed, "gen-drift");
        MixingParams::sample(config.n, config.mixing, config.obs_edges, &mut drng)
    });
    (latent, mixing, drift)
}

pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let (latent, mixing, drift_mixing) = sample_weights(config);
    let n = config.n;
    let mut nrng = rng::substream(config.seed, "gen-noise");
    let mut z_hist: Vec<Vec<f64>> = vec![vec![0.0; n]; config.lag];
    let mut x_prev = vec![0.0; n];
    let mut xs = Vec::with_capacity(config.total_steps * n);
    let mut zs = Vec::with_capacity(config.total_steps * n);
    for step in 0..BURN_IN + config.total_steps {
        let t = step as isize - BURN_IN as isize;
        let mix = match (config.drift_at, &drift_mixing) {
            (Some(d), Some(m)) if t >= d as isize => m,
            _ => &mixing,
        };
        let z = gen_latent_step(&latent, &z_hist, config.noise_std_z, &mut nrng)?;
        let x = gen_obs_step(mix, &x_prev, &z, config.noise_std_o, config.obs_edges, &mut nrng)?;
        if z.iter().chain(&x).any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence { step });
        }
        if t >= 0 {
            xs.extend_from_slice(&x);
            zs.extend_from_slice(&z);
        }
        z_hist.remove(0);
        z_hist.push(z);
        x_prev = x;
    }
    Ok(Dataset {
        config: config.clone(),
        latent,
        mixing,
        drift_mixing,
        x: Tensor::raw(config.total_steps, n, xs),
        z: Some(Tensor::raw(config.total_steps, n, zs)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_latent(n: usize) -> LatentProcessParams {
        LatentProcessParams {
            w: vec![Tensor::zeros(vec![n, n])],
            v: Tensor::zeros(vec![n, n]),
        }
    }

    #[test]
    fn zero_weights_leave_additive_noise() {
        let p = zero_latent(3);
        let noise = LatentNoise {
            mult: vec![1.3, -0.4, 2.0],
            add: vec![0.1, 0.2, -0.3],
        };
        let z = latent_step_with_noise(&p, &[vec![1.0, 2.0, 3.0]], &noise).unwrap();
        assert_eq!(z, vec![0.1, 0.2, -0.3]);
    }

    #[test]
    fn scalar_hand_example() {
        let p = LatentProcessParams {
            w: vec![Tensor::scalar(1.0)],
            v: Tensor::zeros(vec![1, 1]),
        };
        let noise = LatentNoise { mult: vec![1.0], add: vec![0.0] };
        assert_eq!(latent_step_with_noise(&p, &[vec![2.0]], &noise).unwrap(), vec![2.0]);
        let noise = LatentNoise { mult: vec![0.0], add: vec![0.5] };
        assert_eq!(latent_step_with_noise(&p, &[vec![-7.0]], &noise).unwrap(), vec![0.5]);
    }

    #[test]
    fn instantaneous_parents_are_used_in_order() {
        let mut p = zero_latent(2);
        p.v.set(1, 0, 0.5);
        let noise = LatentNoise { mult: vec![1.0, 1.0], add: vec![2.0, 0.0] };
        let z = latent_step_with_noise(&p, &[vec![0.0, 0.0]], &noise).unwrap();
        assert_eq!(z, vec![2.0, 1.0]);
    }

    #[test]
    fn identity_mixing_composes_two_leaky_layers() {
        let n = 3;
        let mut w_m = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            w_m.set(i, i, 1.0);
        }
        let m = MixingParams {
            w_x: Tensor::zeros(vec![n, n]),
            w_m,
            mask: None,
        };
        let z = [-1.0, 0.5, 2.0];
        let x = obs_step_with_noise(&m, &[0.0; 3], &z, &[0.0; 3], true).unwrap();
        let expected: Vec<f64> = z.iter().map(|&v| leaky_relu(leaky_relu(v, 0.2), 0.2)).collect();
        assert_eq!(x, expected);
        assert!((x[0] + 0.04).abs() < 1e-15);
    }

    #[test]
    fn zero_inputs_give_zero_observation() {
        let mut r = rng::substream(1, "t");
        let m = MixingParams::sample(4, MixingKind::Dense, true, &mut r);
        let x = obs_step_with_noise(&m, &[0.0; 4], &[0.0; 4], &[0.0; 4], true).unwrap();
        assert_eq!(x, vec![0.0; 4]);
    }

    #[test]
    fn without_obs_edges_previous_observation_is_ignored() {
        let mut r = rng::substream(2, "t");
        let m = MixingParams::sample(4, MixingKind::Dense, false, &mut r);
        let z = [0.3, -0.2, 1.0, 0.7];
        let a = obs_step_with_noise(&m, &[0.0; 4], &z, &[0.0; 4], false).unwrap();
        let b = obs_step_with_noise(&m, &[5.0, -3.0, 1.0, 2.0], &z, &[0.0; 4], false).unwrap();
        assert_eq!(a, b);
        let c = obs_step_with_noise(&m, &[5.0, -3.0, 1.0, 2.0], &z, &[0.0; 4], true).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_v_is_strictly_lower() {
        let mut r = rng::substream(3, "t");
        let p = LatentProcessParams::sample(5, 2, &mut r);
        for i in 0..5 {
            for j in i..5 {
                assert_eq!(p.v.get(i, j), 0.0);
            }
        }
        assert!(p.w.iter().flat_map(|w| w.data()).all(|v| (-0.5..0.5).contains(v)));
    }

    #[test]
    fn presets_match_table() {
        let a = Preset::A.config(0);
        assert_eq!((a.n, a.lag, a.obs_edges), (5, 1, true));
        let b = Preset::B.config(0);
        assert_eq!((b.n, b.lag, b.obs_edges), (5, 1, false));
        let c = Preset::C.config(0);
        assert_eq!((c.n, c.lag, c.obs_edges), (5, 2, true));
        let d = Preset::D.config(0);
        assert_eq!((d.n, d.lag, d.obs_edges), (10, 1, true));
    }

    #[test]
    fn config_validation() {
        let mut c = GenConfig::default();
        c.validation_size = c.total_steps;
        assert!(c.validate().is_err());
        let mut c = GenConfig::default();
        c.lag = 0;
        assert!(c.validate().is_err());
    }
}
