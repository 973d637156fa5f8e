//! Finite-state check of identification from four adjacent observations.
//!
//! For fixed `(x_t, x_{t-1})` the joint of `(x_{t+1}, x_t, x_{t-1}, x_{t-2})`
//! is an `m x m` matrix `M(x_t, x_{t-1})[x_{t+1}][x_{t-2}]` that factors as
//! `L(x_t) D(x_t, x_{t-1}) R(x_{t-1})` with `L(x_t)[:, z] = p(x_{t+1} | x_t, z)`.
//! Combining four such slices gives `AB = L D L^-1`, so the kernel columns are
//! the eigenvectors of `AB`, normalized to sum to one.
//!
//! The joint and `AB` are accumulated in double-double arithmetic: the slices
//! are inverted with condition numbers around 1e4, which would otherwise cost
//! four digits of the final result.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Schur};
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::assignment::min_cost_assignment;
use crate::chain::DiscreteLatentChain;
use crate::error::{Error, Result};
use crate::rng;

pub const INJECTIVITY_LIMIT: f64 = 1e10;
pub const MIN_EIGEN_GAP: f64 = 1e-8;
pub const MAX_IMAG: f64 = 1e-10;

/// `p(x_{t-2}, x_{t-1}, x_t, x_{t+1})` at stationarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTensor4 {
    pub m: usize,
    /// Index `((a m + b) m + c) m + d` for `(x_{t-2}, x_{t-1}, x_t, x_{t+1}) = (a, b, c, d)`.
    pub data: Vec<f64>,
    /// Low words of the double-double entries (empty when only `data` is known).
    #[serde(skip)]
    pub lo: Vec<f64>,
}

impl JointTensor4 {
    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let m = self.m;
        self.data[((a * m + b) * m + c) * m + d]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `M[x_{t+1}][x_{t-2}]` at fixed `x_t`, `x_{t-1}`.
    pub fn slice(&self, x_t: usize, x_tm1: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |d, a| self.get(a, x_tm1, x_t, d))
    }

    fn slice_dd(&self, x_t: usize, x_tm1: usize) -> Vec<TwoFloat> {
        let m = self.m;
        let mut out = Vec::with_capacity(m * m);
        for d in 0..m {
            for a in 0..m {
                let i = ((a * m + x_tm1) * m + x_t) * m + d;
                let lo = self.lo.get(i).copied().unwrap_or(0.0);
                out.push(TwoFloat::from(self.data[i]) + TwoFloat::from(lo));
            }
        }
        out
    }
}

fn dd(v: f64) -> TwoFloat {
    TwoFloat::from(v)
}

/// Double-double quotient by long division (`TwoFloat`'s own division keeps
/// only the high word here).
fn div_dd(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

/// Row-major `n x n` product.
fn matmul_dd(a: &[TwoFloat], b: &[TwoFloat], n: usize) -> Vec<TwoFloat> {
    let mut out = vec![dd(0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = dd(0.0);
            for l in 0..n {
                s += a[i * n + l] * b[l * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting.
fn inverse_dd(a: &[TwoFloat], n: usize) -> Option<Vec<TwoFloat>> {
    let mut w = a.to_vec();
    let mut inv = vec![dd(0.0); n * n];
    for i in 0..n {
        inv[i * n + i] = dd(1.0);
    }
    for col in 0..n {
        let piv = (col..n).max_by(|x, y| {
            let (a, b) = (w[x * n + col].abs(), w[y * n + col].abs());
            a.partial_cmp(&b).unwrap_or(core::cmp::Ordering::Equal)
        })?;
        if w[piv * n + col] == dd(0.0) {
            return None;
        }
        if piv != col {
            for j in 0..n {
                w.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let p = w[col * n + col];
        for j in 0..n {
            w[col * n + j] = div_dd(w[col * n + j], p);
            inv[col * n + j] = div_dd(inv[col * n + j], p);
        }
        for r in (0..n).filter(|r| *r != col) {
            let f = w[r * n + col];
            if f == dd(0.0) {
                continue;
            }
            for j in 0..n {
                let (wc, ic) = (w[col * n + j], inv[col * n + j]);
                w[r * n + j] -= f * wc;
                inv[r * n + j] -= f * ic;
            }
        }
    }
    Some(inv)
}

/// Exact four-step joint, marginalizing the latent path.
pub fn build_joint4(chain: &DiscreteLatentChain) -> Result<JointTensor4> {
    let (k, m) = (chain.k, chain.m);
    let pi = chain.stationary()?;
    // p(z_{t-1}, x_{t-2}, x_{t-1})
    let mut alpha = vec![dd(0.0); k * m * m];
    for z0 in 0..k {
        for a in 0..m {
            let w = dd(pi[z0 * m + a]);
            for z1 in 0..k {
                let w1 = w * chain.pz(z0, z1);
                for b in 0..m {
                    alpha[(z1 * m + a) * m + b] += w1 * chain.px(z1, a, b);
                }
            }
        }
    }
    // p(z_t, x_{t-2}, x_{t-1})
    let mut beta = vec![dd(0.0); k * m * m];
    for z1 in 0..k {
        for z2 in 0..k {
            let p = chain.pz(z1, z2);
            for ab in 0..m * m {
                beta[z2 * m * m + ab] += alpha[z1 * m * m + ab] * p;
            }
        }
    }
    // p(x_{t+1} | x_t, z_t)
    let mut next = vec![dd(0.0); k * m * m];
    for z in 0..k {
        for z2 in 0..k {
            for c in 0..m {
                for d in 0..m {
                    next[(z * m + c) * m + d] += TwoFloat::new_mul(chain.pz(z, z2), chain.px(z2, c, d));
                }
            }
        }
    }
    let mut acc = vec![dd(0.0); m * m * m * m];
    for z in 0..k {
        for a in 0..m {
            for b in 0..m {
                let w = beta[(z * m + a) * m + b];
                for c in 0..m {
                    let wc = w * chain.px(z, b, c);
                    for d in 0..m {
                        acc[((a * m + b) * m + c) * m + d] += wc * next[(z * m + c) * m + d];
                    }
                }
            }
        }
    }
    Ok(JointTensor4 {
        m,
        data: acc.iter().map(|v| v.hi()).collect(),
        lo: acc.iter().map(|v| v.lo()).collect(),
    })
}

/// Singular-value condition number (infinite for singular matrices).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0f64, |x, y| x.max(*y));
    let min = sv.iter().fold(f64::INFINITY, |x, y| x.min(*y));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// The four observed values used to form `AB`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub x_t: usize,
    pub x_t_bar: usize,
    pub x_tm1: usize,
    pub x_tm1_bar: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbMatrix {
    pub ab: DMatrix<f64>,
    /// Low words of `ab` in double-double.
    pub ab_lo: DMatrix<f64>,
    /// Condition numbers of the two inverted slices, by name.
    pub conditions: Vec<(String, f64)>,
}

fn invert_checked(joint: &JointTensor4, x_t: usize, x_tm1: usize, conditions: &mut Vec<(String, f64)>) -> Result<Vec<TwoFloat>> {
    let name = format!("M(x_t={x_t}, x_t-1={x_tm1})");
    let cond = condition_number(&joint.slice(x_t, x_tm1));
    conditions.push((name.clone(), cond));
    if !(cond <= INJECTIVITY_LIMIT) {
        return Err(Error::Injectivity { slice: name, condition: cond });
    }
    inverse_dd(&joint.slice_dd(x_t, x_tm1), joint.m).ok_or(Error::Injectivity { slice: name, condition: cond })
}

/// `[M(x_t, x_{t-1}) M(x̄_t, x_{t-1})^-1] [M(x̄_t, x̄_{t-1}) M(x_t, x̄_{t-1})^-1]`.
pub fn build_ab(joint: &JointTensor4, probe: Probe) -> Result<AbMatrix> {
    let m = joint.m;
    let Probe { x_t, x_t_bar, x_tm1, x_tm1_bar } = probe;
    if [x_t, x_t_bar, x_tm1, x_tm1_bar].iter().any(|v| *v >= m) {
        return Err(Error::Config(format!("probe values must be below m = {m}")));
    }
    if x_t == x_t_bar || x_tm1 == x_tm1_bar {
        return Err(Error::Config("probe needs x_t != x̄_t and x_{t-1} != x̄_{t-1}".into()));
    }
    let mut conditions = Vec::new();
    let a_inv = invert_checked(joint, x_t_bar, x_tm1, &mut conditions)?;
    let b_inv = invert_checked(joint, x_t, x_tm1_bar, &mut conditions)?;
    let a = matmul_dd(&joint.slice_dd(x_t, x_tm1), &a_inv, m);
    let b = matmul_dd(&joint.slice_dd(x_t_bar, x_tm1_bar), &b_inv, m);
    let ab = matmul_dd(&a, &b, m);
    Ok(AbMatrix {
        ab: DMatrix::from_fn(m, m, |i, j| ab[i * m + j].hi()),
        ab_lo: DMatrix::from_fn(m, m, |i, j| ab[i * m + j].lo()),
        conditions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigensystem {
    /// Ascending real eigenvalues.
    pub values: Vec<f64>,
    /// Column `j` is the eigenvector of `values[j]`, scaled to sum to one.
    pub vectors: DMatrix<f64>,
    pub min_gap: f64,
}

/// Eigen-decomposition of `AB` with distinct real eigenvalues.
pub fn spectral_identify(ab: &DMatrix<f64>) -> Result<Eigensystem> {
    let n = ab.nrows();
    if n == 0 || ab.ncols() != n {
        return Err(Error::Config("AB must be a non-empty square matrix".into()));
    }
    let schur = Schur::try_new(ab.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Uniqueness("Schur iteration did not converge".into()))?;
    let eig = schur.complex_eigenvalues();
    if let Some(c) = eig.iter().find(|c| c.im.abs() > MAX_IMAG) {
        return Err(Error::Uniqueness(format!("complex eigenvalue {:.6}{:+.6}i", c.re, c.im)));
    }
    let mut values: Vec<f64> = eig.iter().map(|c| c.re).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let min_gap = values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if n > 1 && min_gap < MIN_EIGEN_GAP {
        return Err(Error::Uniqueness(format!("eigen-gap {min_gap:.3e} below {MIN_EIGEN_GAP:.0e}")));
    }
    let mut vectors = DMatrix::zeros(n, n);
    for (j, &lam) in values.iter().enumerate() {
        let shifted = ab - DMatrix::identity(n, n) * lam;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Evaluation("SVD did not return singular vectors".into()))?;
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
        let v: Vec<f64> = v_t.row(imin).iter().copied().collect();
        let s: f64 = v.iter().sum();
        if s.abs() < 1e-12 {
            return Err(Error::Uniqueness(format!("eigenvector of {lam:.6} cannot be normalized to a distribution")));
        }
        for i in 0..n {
            vectors[(i, j)] = v[i] / s;
        }
    }
    Ok(Eigensystem { values, vectors, min_gap })
}

/// `L(x_t)[:, z] = p(x_{t+1} | x_t, z)`.
pub fn true_kernel(chain: &DiscreteLatentChain, x_t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(chain.m, chain.k, |d, z| chain.next_obs(z, x_t, d))
}

/// Eigenvalue function `k(x_t, x̄_t, x_{t-1}, x̄_{t-1}, z)`.
pub fn k_ratio(chain: &DiscreteLatentChain, p: Probe, z: usize) -> f64 {
    chain.px(z, p.x_tm1, p.x_t) * chain.px(z, p.x_tm1_bar, p.x_t_bar) / (chain.px(z, p.x_tm1, p.x_t_bar) * chain.px(z, p.x_tm1_bar, p.x_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDiagnostics {
    pub probe: Probe,
    /// True `k(..., z)` per latent state.
    pub k_values: Vec<f64>,
    /// Smallest pairwise distance of `k_values` (infinite when `k = 1`).
    pub k_gap: f64,
    /// Condition numbers of the four joint slices.
    pub slice_conditions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub min_probability: f64,
    pub positivity_holds: bool,
    /// Condition number of `L(x_t)` per observed value (`m == k` only).
    pub kernel_conditions: Vec<f64>,
    pub injectivity_holds: bool,
    pub probes: Vec<ProbeDiagnostics>,
    pub distinct_eigenvalues_holds: bool,
    /// Set when `k = 1`: the distinctness check has nothing to compare.
    pub distinctness_vacuous: bool,
    pub max_condition: f64,
    pub min_k_gap: f64,
}

impl AssumptionReport {
    pub fn passes(&self) -> bool {
        self.positivity_holds && self.injectivity_holds && self.distinct_eigenvalues_holds
    }

    /// Passing with margins: eigen-gap at least `gap` and every condition
    /// number at most `cond`.
    pub fn passes_with_margin(&self, gap: f64, cond: f64) -> bool {
        self.passes() && self.min_k_gap >= gap && self.max_condition <= cond
    }
}

/// Diagnostics of positivity, injectivity and eigenvalue distinctness.
pub fn check_assumptions(chain: &DiscreteLatentChain, probes: &[Probe]) -> Result<AssumptionReport> {
    chain.validate()?;
    let min_probability = chain.min_probability();
    let square = chain.m == chain.k;
    let kernel_conditions: Vec<f64> = if square {
        (0..chain.m).map(|c| condition_number(&true_kernel(chain, c))).collect()
    } else {
        Vec::new()
    };
    let joint = build_joint4(chain)?;
    let mut diags = Vec::with_capacity(probes.len());
    for &p in probes {
        let k_values: Vec<f64> = (0..chain.k).map(|z| k_ratio(chain, p, z)).collect();
        let mut k_gap = f64::INFINITY;
        for i in 0..k_values.len() {
            for j in i + 1..k_values.len() {
                k_gap = k_gap.min((k_values[i] - k_values[j]).abs());
            }
        }
        let slice_conditions = [(p.x_t, p.x_tm1), (p.x_t_bar, p.x_tm1), (p.x_t_bar, p.x_tm1_bar), (p.x_t, p.x_tm1_bar)]
            .iter()
            .map(|(c, b)| condition_number(&joint.slice(*c, *b)))
            .collect();
        diags.push(ProbeDiagnostics {
            probe: p,
            k_values,
            k_gap,
            slice_conditions,
        });
    }
    let max_condition = kernel_conditions
        .iter()
        .chain(diags.iter().flat_map(|d| d.slice_conditions.iter()))
        .fold(0.0f64, |a, b| a.max(*b));
    let min_k_gap = diags.iter().map(|d| d.k_gap).fold(f64::INFINITY, f64::min);
    let vacuous = chain.k == 1;
    Ok(AssumptionReport {
        min_probability,
        positivity_holds: min_probability > 0.0,
        kernel_conditions,
        injectivity_holds: square && max_condition <= INJECTIVITY_LIMIT,
        probes: diags,
        distinct_eigenvalues_holds: vacuous || min_k_gap >= MIN_EIGEN_GAP,
        distinctness_vacuous: vacuous,
        max_condition,
        min_k_gap,
    })
}

/// Searches `(x̄_t, x_{t-1}, x̄_{t-1})` for fixed `x_t` using observables only:
/// the candidate whose `AB` has a real spectrum with the widest eigen-gap.
pub fn find_probe(joint: &JointTensor4, x_t: usize) -> Result<Probe> {
    let m = joint.m;
    let mut best: Option<(f64, Probe)> = None;
    let mut last_err = Error::Uniqueness(format!("no probe pair available for x_t = {x_t}"));
    for x_t_bar in (0..m).filter(|v| *v != x_t) {
        for x_tm1 in 0..m {
            for x_tm1_bar in (0..m).filter(|v| *v != x_tm1) {
                let probe = Probe { x_t, x_t_bar, x_tm1, x_tm1_bar };
                match build_ab(joint, probe).and_then(|ab| spectral_identify(&ab.ab)) {
                    Ok(e) => {
                        if best.as_ref().is_none_or(|(g, _)| e.min_gap > *g) {
                            best = Some((e.min_gap, probe));
                        }
                    }
                    Err(e) => last_err = e,
                }
            }
        }
    }
    best.map(|(_, p)| p).ok_or(last_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecovery {
    pub probe: Probe,
    /// `kernel[z][x_{t+1}]`: recovered `p(x_{t+1} | x_t, z)` for recovered state `z`.
    pub kernel: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `alignment[z]` is the true latent matched to recovered state `z`.
    pub alignment: Vec<usize>,
    pub kernel_error: f64,
    pub eigenvalue_error: f64,
    /// `max |AB L - L D|` with the true kernel and eigenvalues.
    pub similarity_residual: f64,
    pub eigen_gap: f64,
    pub conditions: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    pub k: usize,
    pub m: usize,
    /// Set for `k = 1`, where there is nothing to separate.
    pub trivial: bool,
    /// One entry per value of `x_t`.
    pub recoveries: Vec<KernelRecovery>,
    pub max_kernel_error: f64,
    pub max_eigenvalue_error: f64,
    pub max_similarity_residual: f64,
    pub assumptions: Option<AssumptionReport>,
}

/// Recovers `p(x_{t+1} | x_t, z)` for every `x_t` and compares with the truth.
pub fn operator_lab(chain: &DiscreteLatentChain) -> Result<SpectralResult> {
    chain.validate()?;
    if chain.k == 1 {
        chain.stationary()?;
        return Ok(SpectralResult {
            k: 1,
            m: chain.m,
            trivial: true,
            recoveries: Vec::new(),
            max_kernel_error: 0.0,
            max_eigenvalue_error: 0.0,
            max_similarity_residual: 0.0,
            assumptions: None,
        });
    }
    if chain.m != chain.k {
        return Err(Error::Config(format!("operator lab needs m == k, got m = {} and k = {}", chain.m, chain.k)));
    }
    let joint = build_joint4(chain)?;
    let mut recoveries = Vec::with_capacity(chain.m);
    let mut probes = Vec::with_capacity(chain.m);
    for x_t in 0..chain.m {
        let probe = find_probe(&joint, x_t)?;
        probes.push(probe);
        recoveries.push(recover(chain, &joint, probe)?);
    }
    let assumptions = check_assumptions(chain, &probes)?;
    let fold = |f: fn(&KernelRecovery) -> f64| recoveries.iter().map(f).fold(0.0f64, f64::max);
    Ok(SpectralResult {
        k: chain.k,
        m: chain.m,
        trivial: false,
        max_kernel_error: fold(|r| r.kernel_error),
        max_eigenvalue_error: fold(|r| r.eigenvalue_error),
        max_similarity_residual: fold(|r| r.similarity_residual),
        recoveries,
        assumptions: Some(assumptions),
    })
}

/// Identification at one probe, aligned to the true kernel by the assignment
/// minimizing the summed absolute column error.
pub fn recover(chain: &DiscreteLatentChain, joint: &JointTensor4, probe: Probe) -> Result<KernelRecovery> {
    let ab = build_ab(joint, probe)?;
    let eig = spectral_identify(&ab.ab)?;
    let truth = true_kernel(chain, probe.x_t);
    let k = chain.k;
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cost[i * k + j] = (0..chain.m).map(|d| (eig.vectors[(d, i)] - truth[(d, j)]).abs()).sum();
        }
    }
    let alignment = min_cost_assignment(&cost, k);
    let mut kernel_error = 0.0f64;
    let mut eigenvalue_error = 0.0f64;
    for (i, &j) in alignment.iter().enumerate() {
        for d in 0..chain.m {
            kernel_error = kernel_error.max((eig.vectors[(d, i)] - truth[(d, j)]).abs());
        }
        eigenvalue_error = eigenvalue_error.max((eig.values[i] - k_ratio(chain, probe, j)).abs());
    }
    let similarity_residual = similarity_residual(chain, &ab, probe);
    Ok(KernelRecovery {
        probe,
        kernel: (0..k).map(|i| eig.vectors.column(i).iter().copied().collect()).collect(),
        eigenvalues: eig.values,
        alignment,
        kernel_error,
        eigenvalue_error,
        similarity_residual,
        eigen_gap: eig.min_gap,
        conditions: ab.conditions,
    })
}

/// `max |AB L - L D|` for the true kernel and eigenvalues, evaluated in
/// double-double so the check is not limited by rounding of `AB`.
pub fn similarity_residual(chain: &DiscreteLatentChain, ab: &AbMatrix, probe: Probe) -> f64 {
    let (k, m) = (chain.k, chain.m);
    let l = |d: usize, z: usize| -> TwoFloat {
        let mut s = dd(0.0);
        for z2 in 0..k {
            s += TwoFloat::new_mul(chain.pz(z, z2), chain.px(z2, probe.x_t, d));
        }
        s
    };
    let kr = |z: usize| -> TwoFloat {
        div_dd(
            TwoFloat::new_mul(chain.px(z, probe.x_tm1, probe.x_t), chain.px(z, probe.x_tm1_bar, probe.x_t_bar)),
            TwoFloat::new_mul(chain.px(z, probe.x_tm1, probe.x_t_bar), chain.px(z, probe.x_tm1_bar, probe.x_t)),
        )
    };
    let mut worst = 0.0f64;
    for i in 0..m {
        for z in 0..k {
            let mut s = dd(0.0);
            for j in 0..m {
                s += (dd(ab.ab[(i, j)]) + dd(ab.ab_lo[(i, j)])) * l(j, z);
            }
            s -= l(i, z) * kr(z);
            worst = worst.max(f64::from(s).abs());
        }
    }
    worst
}

/// Chain whose second observation slice is the first one reweighted by a
/// per-target factor and renormalized. The eigenvalue function only sees
/// cross ratios, which that reweighting preserves, so the two states share
/// an eigenvalue at every probe while the kernel stays invertible.
pub fn degenerate_chain(k: usize, seed: u64) -> DiscreteLatentChain {
    let mut r = rng::substream(seed, "degenerate-chain");
    let mut chain = DiscreteLatentChain::random(k, k, &mut r);
    if k < 2 {
        return chain;
    }
    let m = chain.m;
    let scale: Vec<f64> = (0..m).map(|_| rng::uniform(&mut r, 0.2, 3.0)).collect();
    let base = chain.p_x[0].clone();
    let mut slice = vec![0.0; m * m];
    for a in 0..m {
        let row: Vec<f64> = (0..m).map(|b| base[a * m + b] * scale[b]).collect();
        let s: f64 = row.iter().sum();
        for b in 0..m {
            slice[a * m + b] = row[b] / s;
        }
    }
    chain.p_x[1] = slice;
    chain
}
