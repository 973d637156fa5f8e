//! Exact Bayes risks of one-step forecasts on a finite latent chain, with the
//! observed history `(x_{t-1}, x_t)`, optionally joined by `z_t` or by a noisy
//! copy of it. Observed state `j` takes the numeric value `j`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chain::{uniform_rows, DiscreteLatentChain};
use crate::error::{Error, Result};

/// How the estimated latent is derived from the true one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Identity,
    /// Cyclic relabeling `z -> z + 1 mod k`.
    Bijection,
    /// Keeps `z` with probability `1 - p_flip`, otherwise moves uniformly to
    /// another state.
    Noisy { p_flip: f64 },
    /// Uniform over all states regardless of `z`.
    Independent,
}

impl Channel {
    /// Parses `identity`, `bijection`, `independent`, `noisy` (p_flip 0.2) or
    /// `noisy:<p>`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Self::Identity),
            "bijection" => Some(Self::Bijection),
            "independent" => Some(Self::Independent),
            "noisy" => Some(Self::Noisy { p_flip: 0.2 }),
            _ => {
                let p: f64 = s.strip_prefix("noisy:")?.parse().ok()?;
                (0.0..=1.0).contains(&p).then_some(Self::Noisy { p_flip: p })
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::Bijection => "bijection".into(),
            Self::Noisy { p_flip } => format!("noisy:{p_flip}"),
            Self::Independent => "independent".into(),
        }
    }

    /// Row-stochastic `k x k` matrix `C[z][zhat] = p(zhat | z)`.
    pub fn matrix(&self, k: usize) -> Result<Vec<f64>> {
        let mut c = vec![0.0; k * k];
        match *self {
            Self::Identity => (0..k).for_each(|z| c[z * k + z] = 1.0),
            Self::Bijection => (0..k).for_each(|z| c[z * k + (z + 1) % k] = 1.0),
            Self::Noisy { p_flip } => {
                if !(0.0..=1.0).contains(&p_flip) {
                    return Err(Error::Config(format!("p_flip must lie in [0, 1], got {p_flip}")));
                }
                if k == 1 {
                    c[0] = 1.0;
                } else {
                    for z in 0..k {
                        for zh in 0..k {
                            c[z * k + zh] = if z == zh { 1.0 - p_flip } else { p_flip / (k - 1) as f64 };
                        }
                    }
                }
            }
            Self::Independent => c = uniform_rows(k),
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub channel: String,
    pub r_o: f64,
    pub r_z: f64,
    pub r_zhat: f64,
    /// `E[Var_{z | x}(E[x_{t+1} | x, z])]`.
    pub cross_term: f64,
    /// `|r_o - r_z - cross_term|`.
    pub decomposition_residual: f64,
}

pub const MAX_STATES: usize = 16;

/// Exact risks by enumerating the stationary joint of
/// `(x_{t-1}, x_t, z_t, x_{t+1})`.
pub fn risk_lab(chain: &DiscreteLatentChain, channel: Channel) -> Result<RiskReport> {
    let (k, m) = (chain.k, chain.m);
    if k > MAX_STATES || m > MAX_STATES {
        return Err(Error::Config(format!("risk lab enumerates at most {MAX_STATES} states per variable")));
    }
    let pi = chain.stationary()?;
    let cmat = channel.matrix(k)?;

    // p(x_{t-1} = a, x_t = b, z_t = z)
    let mut joint = vec![0.0; m * m * k];
    for zp in 0..k {
        for a in 0..m {
            let w = pi[zp * m + a];
            for z in 0..k {
                let wz = w * chain.pz(zp, z);
                for b in 0..m {
                    joint[(a * m + b) * k + z] += wz * chain.px(z, a, b);
                }
            }
        }
    }
    // first and second moments of x_{t+1} given (x_t = b, z_t = z)
    let mut mu = vec![0.0; m * k];
    let mut s2 = vec![0.0; m * k];
    for b in 0..m {
        for z in 0..k {
            for c in 0..m {
                let p = chain.next_obs(z, b, c);
                let v = c as f64;
                mu[b * k + z] += p * v;
                s2[b * k + z] += p * v * v;
            }
        }
    }

    let (mut r_o, mut r_z, mut r_zhat, mut cross) = (0.0, 0.0, 0.0, 0.0);
    for a in 0..m {
        for b in 0..m {
            let row = &joint[(a * m + b) * k..(a * m + b + 1) * k];
            let p_ab: f64 = row.iter().sum();
            if p_ab <= 0.0 {
                continue;
            }
            let mut e1 = 0.0;
            let mut e2 = 0.0;
            for z in 0..k {
                let w = row[z];
                let (m1, m2) = (mu[b * k + z], s2[b * k + z]);
                r_z += w * (m2 - m1 * m1);
                e1 += w * m1;
                e2 += w * m2;
            }
            let (e1, e2) = (e1 / p_ab, e2 / p_ab);
            r_o += p_ab * (e2 - e1 * e1);
            cross += row.iter().enumerate().map(|(z, w)| w * (mu[b * k + z] - e1) * (mu[b * k + z] - e1)).sum::<f64>();
            for zh in 0..k {
                let mut w = 0.0;
                let mut f1 = 0.0;
                let mut f2 = 0.0;
                for z in 0..k {
                    let wz = row[z] * cmat[z * k + zh];
                    w += wz;
                    f1 += wz * mu[b * k + z];
                    f2 += wz * s2[b * k + z];
                }
                if w > 0.0 {
                    let (f1, f2) = (f1 / w, f2 / w);
                    r_zhat += w * (f2 - f1 * f1);
                }
            }
        }
    }
    Ok(RiskReport {
        channel: channel.name(),
        r_o,
        r_z,
        r_zhat,
        cross_term: cross,
        decomposition_residual: (r_o - r_z - cross).abs(),
    })
}
