mod common;

use common::*;
use dlgn::gates::GateKind;
use dlgn::heads::{Codebook, GroupSumHead};
use dlgn::network::LogicNetwork;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_network(seed: u64, widths: &[usize], input_dim: usize, batch: usize, probes: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = LogicNetwork::build(input_dim, widths, seed).unwrap();
    let x = random_matrix(&mut rng, input_dim, batch, 0.0, 1.0);
    let r = random_matrix(&mut rng, net.output_width(), batch, -1.0, 1.0);
    let trace = net.forward_relaxed(&x).unwrap();
    let grads = net.backward(&x, &trace, &r).unwrap();
    for _ in 0..probes {
        let layer = rng.random_range(0..widths.len());
        let neuron = rng.random_range(0..widths[layer]);
        let gate = rng.random_range(0..16);
        let fd = logit_fd(&net, &x, &r, layer, neuron, gate, 1e-3);
        let an = grads.logits[layer][neuron][gate];
        assert!(rel_err(an, fd, 1e-6) <= 1e-4, "logit {layer}/{neuron}/{gate}: {an} vs {fd}");
    }
    for _ in 0..probes {
        let (row, col) = (rng.random_range(0..input_dim), rng.random_range(0..batch));
        let fd = input_fd(&net, &x, &r, row, col, 1e-6);
        let an = grads.input.get(row, col);
        assert!(rel_err(an, fd, 1e-6) <= 1e-4, "input {row}/{col}: {an} vs {fd}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn network_backward_matches_finite_differences(
        seed in any::<u64>(),
        depth in 1usize..=3,
        width in 2usize..=32,
        input_dim in 2usize..=24,
        batch in 1usize..=6,
    ) {
        let widths = vec![width; depth];
        check_network(seed, &widths, input_dim, batch, 12);
    }

    #[test]
    fn gate_gradients_match_finite_differences(id in 0u8..16, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let g = GateKind::from_id(id).unwrap();
        let (da, db) = g.real_grad(a, b);
        let h = 1e-6;
        let na = (g.real_eval(a + h, b) - g.real_eval(a - h, b)) / (2.0 * h);
        let nb = (g.real_eval(a, b + h) - g.real_eval(a, b - h)) / (2.0 * h);
        prop_assert!(rel_err(da, na, 1e-6) <= 1e-4);
        prop_assert!(rel_err(db, nb, 1e-6) <= 1e-4);
    }

    #[test]
    fn group_sum_gradient(seed in any::<u64>(), k in 2usize..=6, g in 1usize..=5, tau in 0.3f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = GroupSumHead::new(k * g, k, tau).unwrap();
        let out: Vec<f64> = (0..k * g).map(|_| rng.random()).collect();
        let label = rng.random_range(0..k);
        let (_, grad) = head.loss_and_grad(&out, label).unwrap();
        for i in 0..out.len() {
            let fd = vec_fd(|o| head.loss_and_grad(o, label).unwrap().0, &out, i, 1e-6);
            prop_assert!(rel_err(grad[i], fd, 1e-6) <= 1e-5, "{} vs {}", grad[i], fd);
        }
    }

    #[test]
    fn binary_logit_gradient(seed in any::<u64>(), k in 2usize..=6, g in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = GroupSumHead::new(k * g, k, 1.0).unwrap();
        let out: Vec<f64> = (0..k * g).map(|_| rng.random_range(0.05..0.95)).collect();
        let label = rng.random_range(0..k);
        let (_, grad) = head.binary_logit_loss(&out, label).unwrap();
        for i in 0..out.len() {
            let fd = vec_fd(|o| head.binary_logit_loss(o, label).unwrap().0, &out, i, 1e-6);
            prop_assert!(rel_err(grad[i], fd, 1e-6) <= 1e-5, "{} vs {}", grad[i], fd);
        }
    }

    #[test]
    fn codebook_gradient(seed in any::<u64>(), k in 2usize..=8, o in 3usize..=10, group in 1usize..=3, tau in 0.3f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::generate(k, o, seed).unwrap();
        let cb = if group > 1 { cb.with_group_reduction(o * group).unwrap() } else { cb };
        let out: Vec<f64> = (0..cb.input_width()).map(|_| rng.random_range(0.05..0.95)).collect();
        let class = rng.random_range(0..k);
        let (_, grad) = cb.train_loss(&out, class, tau).unwrap();
        for i in 0..out.len() {
            let fd = vec_fd(|v| cb.train_loss(v, class, tau).unwrap().0, &out, i, 1e-6);
            prop_assert!(rel_err(grad[i], fd, 1e-6) <= 1e-5, "{} vs {}", grad[i], fd);
        }
    }
}

#[test]
fn deep_narrow_and_wide_shallow() {
    check_network(1, &[4, 4, 4], 3, 2, 30);
    check_network(2, &[32, 32, 32], 40, 4, 30);
}
