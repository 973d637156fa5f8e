use proptest::prelude::*;
use tot_core::fd::{fd_gradient, relative_error};
use tot_core::mlp::{mlp_forward, Mlp, MlpSpec};
use tot_core::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use tot_core::rng;
use tot_core::{ParamStore, Tape, Tensor};

fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::substream(seed, "input");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

/// Sum of squares of a two-layer MLP's output; small enough for coordinate-wise
/// finite differences.
fn setup(seed: u64, d_in: usize, hidden: usize, d_out: usize) -> (ParamStore, Mlp, Tensor) {
    let mut params = ParamStore::new();
    let net = Mlp::register(&mut params, "net", MlpSpec::leaky(d_in, &[hidden], d_out, 0.2, seed)).unwrap();
    (params, net, random_input(5, d_in, seed))
}

fn loss_at(net: &Mlp, params: &ParamStore, x: &Tensor) -> f64 {
    mlp_forward(net, params, x).unwrap().data().iter().map(|v| v * v).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_matches_central_differences(seed in 0u64..10_000, d_in in 1usize..5, hidden in 1usize..9, d_out in 1usize..4) {
        let (params, net, x) = setup(seed, d_in, hidden, d_out);
        let grads = {
            let mut tape = Tape::new(&params);
            let xv = tape.constant(x.clone());
            let y = net.forward(&mut tape, xv).unwrap();
            let sq = tape.square(y);
            let s = tape.sum(sq);
            tape.backward_scalar(s).unwrap()
        };
        let fd = fd_gradient(|p| Ok(loss_at(&net, p, &x)), &params, 1e-5).unwrap();
        let err = relative_error(&grads, &fd);
        prop_assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..10_000) {
        let (params, net, x) = setup(seed, 3, 4, 2);
        let a = mlp_forward(&net, &params, &x).unwrap();
        let b = mlp_forward(&net, &params, &x).unwrap();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn clipping_never_increases_norm(vals in proptest::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..50.0) {
        let mut g = ParamStore::new();
        g.insert("g", Tensor::matrix(1, vals.len(), vals).unwrap()).unwrap();
        let before = g.global_norm();
        clip_grad_norm(&mut g, max);
        prop_assert!(g.global_norm() <= before + 1e-12);
        prop_assert!(g.global_norm() <= max * (1.0 + 1e-12) || before <= max);
    }
}

#[test]
fn leaky_activation_hand_example() {
    let mut params = ParamStore::new();
    let spec = MlpSpec {
        layer_sizes: vec![2, 2],
        activations: vec![tot_core::mlp::Activation::LeakyRelu(0.2)],
        seed: 0,
    };
    let net = Mlp::register(&mut params, "n", spec).unwrap();
    params.get_mut(net.weight_ids()[0]).data_mut().copy_from_slice(&[2.0, 0.0, 0.0, 3.0]);
    params.get_mut(net.bias_ids()[0]).data_mut().copy_from_slice(&[1.0, 1.0]);
    let y = mlp_forward(&net, &params, &Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap()).unwrap();
    assert!((y.data()[0] + 0.2).abs() < 1e-15);
    assert!((y.data()[1] - 4.0).abs() < 1e-15);
}

#[test]
fn adam_runs_are_reproducible_and_descend() {
    let (p0, net, x) = setup(3, 3, 6, 2);
    let run = || {
        let mut p = p0.clone();
        let mut st = AdamState::new(&p);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let g = {
                let mut tape = Tape::new(&p);
                let xv = tape.constant(x.clone());
                let y = net.forward(&mut tape, xv).unwrap();
                let sq = tape.square(y);
                let s = tape.sum(sq);
                losses.push(tape.scalar(s));
                tape.backward_scalar(s).unwrap()
            };
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        (p, losses)
    };
    let (a, la) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert!(la.last().unwrap() < la.first().unwrap());
}
