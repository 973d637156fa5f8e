//! Finite-state latent chain: `z_t ~ P_z(z_{t-1}, .)`, `x_t ~ P_x(x_{t-1}, ., z_t)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLatentChain {
    pub k: usize,
    pub m: usize,
    /// `k x k` row-major, `p_z[a * k + b] = p(z_t = b | z_{t-1} = a)`.
    #[serde(rename = "P_z")]
    pub p_z: Vec<f64>,
    /// One `m x m` row-major slice per latent state,
    /// `p_x[z][a * m + b] = p(x_t = b | x_{t-1} = a, z_t = z)`.
    #[serde(rename = "P_x")]
    pub p_x: Vec<Vec<f64>>,
}

fn check_stochastic(name: &str, data: &[f64], rows: usize, cols: usize) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Config(format!("{name} must have {} entries, found {}", rows * cols, data.len())));
    }
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config(format!("{name} row {r} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Config(format!("{name} row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

fn random_row(rng: &mut Rng, len: usize, floor: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| floor + <Exp1 as Distribution<f64>>::sample(&Exp1, rng)).collect();
    let s: f64 = row.iter().sum();
    for p in &mut row {
        *p /= s;
    }
    row
}

impl DiscreteLatentChain {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("chain needs k >= 1 and m >= 1".into()));
        }
        check_stochastic("P_z", &self.p_z, self.k, self.k)?;
        if self.p_x.len() != self.k {
            return Err(Error::Config(format!("P_x must have {} slices, found {}", self.k, self.p_x.len())));
        }
        for (z, s) in self.p_x.iter().enumerate() {
            check_stochastic(&format!("P_x[{z}]"), s, self.m, self.m)?;
        }
        Ok(())
    }

    /// Strictly positive chain with Dirichlet(1)-like rows (plus `floor`
    /// before normalization).
    pub fn random(k: usize, m: usize, rng: &mut Rng) -> Self {
        Self::random_with_floor(k, m, 0.05, rng)
    }

    pub fn random_with_floor(k: usize, m: usize, floor: f64, rng: &mut Rng) -> Self {
        let mut p_z = Vec::with_capacity(k * k);
        for _ in 0..k {
            p_z.extend(random_row(rng, k, floor));
        }
        let p_x = (0..k)
            .map(|_| {
                let mut s = Vec::with_capacity(m * m);
                for _ in 0..m {
                    s.extend(random_row(rng, m, floor));
                }
                s
            })
            .collect();
        Self { k, m, p_z, p_x }
    }

    /// Random chain from a seed.
    pub fn from_seed(k: usize, m: usize, seed: u64) -> Self {
        Self::random(k, m, &mut rng::substream(seed, "chain"))
    }

    #[inline]
    pub fn pz(&self, from: usize, to: usize) -> f64 {
        self.p_z[from * self.k + to]
    }

    /// `p(x_t = to | x_{t-1} = from, z_t = z)`.
    #[inline]
    pub fn px(&self, z: usize, from: usize, to: usize) -> f64 {
        self.p_x[z][from * self.m + to]
    }

    /// `p(x_{t+1} = to | x_t = from, z_t = z)`, marginalizing `z_{t+1}`.
    pub fn next_obs(&self, z: usize, from: usize, to: usize) -> f64 {
        (0..self.k).map(|z2| self.pz(z, z2) * self.px(z2, from, to)).sum()
    }

    /// Transition matrix of the joint `(z, x)` chain, state index `z * m + x`.
    pub fn joint_transition(&self) -> DMatrix<f64> {
        let (k, m) = (self.k, self.m);
        DMatrix::from_fn(k * m, k * m, |r, c| {
            let (z, x) = (r / m, r % m);
            let (z2, x2) = (c / m, c % m);
            self.pz(z, z2) * self.px(z2, x, x2)
        })
    }

    /// Unique stationary distribution of the joint chain, indexed `z * m + x`.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let p = self.joint_transition();
        let s = p.nrows();
        let a = p.transpose() - DMatrix::identity(s, s);
        let sv = a.clone().svd(false, false).singular_values;
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap_or(core::cmp::Ordering::Equal));
        if s > 1 && sorted[1] < 1e-10 {
            return Err(Error::NonErgodic(format!(
                "stationary distribution is not unique (second smallest singular value {:.3e})",
                sorted[1]
            )));
        }
        // replace one balance equation with the normalization constraint
        let mut sys = a;
        for c in 0..s {
            sys[(s - 1, c)] = 1.0;
        }
        let mut rhs = nalgebra::DVector::zeros(s);
        rhs[s - 1] = 1.0;
        let sol = sys
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NonErgodic("stationary system is singular".into()))?;
        let mut pi: Vec<f64> = sol.iter().copied().collect();
        if pi.iter().any(|p| *p < -1e-9 || !p.is_finite()) {
            return Err(Error::NonErgodic("stationary solution has negative mass".into()));
        }
        for p in &mut pi {
            *p = p.max(0.0);
        }
        let total: f64 = pi.iter().sum();
        for p in &mut pi {
            *p /= total;
        }
        Ok(pi)
    }

    /// True when some pair of latent states has different observation slices.
    pub fn latent_affects_obs(&self) -> bool {
        self.p_x.iter().skip(1).any(|s| s != &self.p_x[0])
    }

    /// Smallest transition probability over both mechanisms.
    pub fn min_probability(&self) -> f64 {
        self.p_z.iter().chain(self.p_x.iter().flatten()).fold(f64::INFINITY, |a, b| a.min(*b))
    }
}

/// `k x k` row-stochastic matrix with every entry `1/k`.
pub(crate) fn uniform_rows(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k * k]
}
