use std::collections::BTreeSet;

use tot_core::graph::check_sparse_mixing_assumption;
use tot_core::synthgen::*;
use tot_core::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum B {
    Zp,
    Xp,
    Zc,
    Xc,
}

/// Parent relation of the generation graph, stated directly from the
/// generating equations.
fn is_parent(p: (B, usize), c: (B, usize), mask: &[bool], n: usize, obs: bool) -> bool {
    match (p.0, c.0) {
        // dense time-delayed latent effects
        (B::Zp, B::Zc) => true,
        // instantaneous effects follow index order inside each latent slice
        (B::Zc, B::Zc) | (B::Zp, B::Zp) => p.1 < c.1,
        (B::Zc, B::Xc) | (B::Zp, B::Xp) => mask[p.1 * n + c.1],
        (B::Xp, B::Xc) => obs,
        _ => false,
    }
}

fn brute_force_holds(mask: &[bool], n: usize, obs: bool) -> bool {
    let nodes: Vec<(B, usize)> = [B::Zp, B::Xp, B::Zc, B::Xc].iter().flat_map(|&b| (0..n).map(move |i| (b, i))).collect();
    let parent = |a, b| is_parent(a, b, mask, n, obs);
    let adjacent = |a: (B, usize), b: (B, usize)| {
        a != b && (parent(a, b) || parent(b, a) || nodes.iter().any(|&c| parent(a, c) && parent(b, c)))
    };
    (0..n).all(|i| {
        let v = (B::Zc, i);
        let nbrs: BTreeSet<usize> = (0..nodes.len()).filter(|&k| adjacent(v, nodes[k])).collect();
        !nbrs.iter().any(|&j| nbrs.iter().all(|&w| w == j || adjacent(nodes[j], nodes[w])))
    })
}

#[test]
fn sparse_mixing_checker_matches_brute_force_for_all_small_masks() {
    for n in 2..=4usize {
        for bits in 0u32..(1 << (n * n)) {
            let mask: Vec<bool> = (0..n * n).map(|k| bits >> k & 1 == 1).collect();
            for obs in [false, true] {
                let fast = check_sparse_mixing_assumption(&mask, n, obs).unwrap().holds;
                assert_eq!(fast, brute_force_holds(&mask, n, obs), "n {n} mask {bits:#b} obs {obs}");
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_dataset() {
    let mut c = Preset::A.config(4);
    c.total_steps = 500;
    c.validation_size = 100;
    assert_eq!(generate_dataset(&c).unwrap(), generate_dataset(&c).unwrap());
    let mut c2 = c.clone();
    c2.seed = 5;
    assert_ne!(generate_dataset(&c).unwrap().x, generate_dataset(&c2).unwrap().x);
}

#[test]
fn zero_noise_from_zero_state_stays_zero() {
    let c = Preset::C.config(1);
    let (lat, mix, _) = sample_weights(&c);
    let n = c.n;
    let mut hist = vec![vec![0.0; n]; c.lag];
    let mut x = vec![0.0; n];
    let noise = LatentNoise {
        mult: vec![0.0; n],
        add: vec![0.0; n],
    };
    for _ in 0..200 {
        let z = latent_step_with_noise(&lat, &hist, &noise).unwrap();
        x = obs_step_with_noise(&mix, &x, &z, &vec![0.0; n], c.obs_edges).unwrap();
        assert!(z.iter().chain(&x).all(|v| *v == 0.0));
        hist.remove(0);
        hist.push(z);
    }
}

fn col_stats(t: &Tensor, from: usize) -> Vec<(f64, f64)> {
    (0..t.cols())
        .map(|c| {
            let col: Vec<f64> = t.column(c)[from..].to_vec();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn longer_burn_in_leaves_marginal_statistics_unchanged() {
    let mut c = Preset::A.config(2);
    c.total_steps = 20_000;
    c.validation_size = 100;
    let a = generate_dataset(&c).unwrap();
    let extra = 2_000;
    let mut c2 = c.clone();
    c2.total_steps += extra;
    let b = generate_dataset(&c2).unwrap();
    // a conservative effective sample size absorbs the serial dependence
    let ess = c.total_steps as f64 / 20.0;
    for ((ma, va), (mb, vb)) in col_stats(&a.x, 0).into_iter().zip(col_stats(&b.x, extra)) {
        let se = (va.max(vb) / ess).sqrt();
        assert!((ma - mb).abs() <= 3.0 * se * 2f64.sqrt(), "means {ma} vs {mb}");
    }
}

#[test]
fn without_obs_edges_the_previous_observation_has_no_linear_effect() {
    // with z and the noise fixed, perturbing x_{t-1} must leave x_t untouched
    let c = Preset::B.config(0);
    let (_, mix, _) = sample_weights(&c);
    let z = vec![0.3, 0.1, 0.2, 0.4, 0.5];
    let base = obs_step_with_noise(&mix, &[0.0; 5], &z, &[0.0; 5], false).unwrap();
    for k in 0..5 {
        let mut xp = vec![0.0; 5];
        xp[k] = 1e-3;
        let x = obs_step_with_noise(&mix, &xp, &z, &[0.0; 5], false).unwrap();
        assert_eq!(x, base);
    }
}

#[test]
fn sparse_variant_has_valid_masked_support() {
    for seed in 0..5 {
        let mut c = Preset::A.config(seed);
        c.mixing = MixingKind::SparseBanded;
        let (_, mix, _) = sample_weights(&c);
        let mask = mix.mask.clone().unwrap();
        let n = c.n;
        assert!(check_sparse_mixing_assumption(&mask, n, c.obs_edges).unwrap().holds);
        for i in 0..n {
            let row = (0..n).filter(|&j| mask[i * n + j]).count();
            assert!(row >= 1 && row <= n.div_ceil(2));
            for j in 0..n {
                assert_eq!(mix.w_m.get(i, j) != 0.0, mask[i * n + j]);
            }
        }
    }
}

#[test]
fn divergence_is_reported_with_step() {
    let mut c = Preset::A.config(0);
    c.noise_std_z = 1e200;
    c.total_steps = 50;
    c.validation_size = 10;
    assert!(matches!(generate_dataset(&c), Err(tot_core::Error::Divergence { .. })));
}
