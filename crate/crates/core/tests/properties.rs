use dissipnet_core::certkit::{
    build_ml, build_pl, build_st, lemma1_quadratic, slope_quadratic, supply_rate, verify, QsrSpec,
    SearchConfig,
};
use dissipnet_core::matkit::{min_eig, sym_eig};
use dissipnet_core::neuralfield::rollout;
use dissipnet_core::{Activation, DenseMatrix, Mlp, Multipliers, PBlocks, QsrFamily};
use proptest::prelude::*;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Relu),
        (0.01f64..1.0).prop_map(|a| Activation::LeakyRelu { a }),
        Just(Activation::Tanh),
        Just(Activation::Sigmoid),
        Just(Activation::Identity),
    ]
}

fn symmetric(n: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| {
        DenseMatrix::from_row_major(n, n, v).unwrap().symmetrized()
    })
}

/// Random net with `n_0 = n_l` and up to three layers.
fn net() -> impl Strategy<Value = Mlp> {
    (
        1usize..5,
        prop::collection::vec(1usize..7, 0..3),
        activation(),
        any::<u64>(),
        0.2f64..3.0,
    )
        .prop_map(|(n0, hidden, act, seed, scale)| {
            let mut dims = vec![n0];
            dims.extend(hidden);
            dims.push(n0);
            let net = Mlp::random(&dims, act, seed).unwrap();
            let w = net.weights().map(|w| w.scale(scale)).collect();
            net.with_weights(w).unwrap()
        })
}

fn pblocks(n0: usize, q: f64, p22: f64) -> PBlocks {
    let ny = n0.div_ceil(2);
    let p11 = DenseMatrix::from_fn(n0, n0, |i, j| {
        if i != j {
            0.0
        } else if i < ny {
            q
        } else {
            -q
        }
    });
    PBlocks::new(
        p11,
        DenseMatrix::zeros(n0, n0),
        DenseMatrix::zeros(n0, n0),
        DenseMatrix::scaled_identity(n0, -p22),
    )
    .unwrap()
}

fn multipliers(layers: usize, seed: u64) -> Multipliers {
    Multipliers::new((0..layers).map(|i| 0.1 + ((seed >> (i * 8)) & 0xff) as f64 / 32.0).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigen_decomposition_reconstructs(a in (1usize..9).prop_flat_map(symmetric)) {
        let e = sym_eig(&a).unwrap();
        let scale = a.frobenius_norm().max(1.0);
        prop_assert!(e.reconstruct().max_abs_diff(&a) <= 1e-11 * scale);
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let n = a.rows();
        for i in 0..n {
            for j in 0..n {
                let d: f64 = e.vector(i).iter().zip(e.vector(j)).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn min_eig_bounds_rayleigh_quotient(
        a in (1usize..8).prop_flat_map(|n| (symmetric(n), prop::collection::vec(-1.0f64..1.0, n)))
    ) {
        let (a, x) = a;
        let nx: f64 = x.iter().map(|v| v * v).sum();
        prop_assume!(nx > 1e-6);
        let lo = min_eig(&a).unwrap();
        prop_assert!(a.quad_form(&x) / nx >= lo - 1e-10 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn certificate_is_sum_of_its_parts(net in net(), seed in any::<u64>(), q in -1.0f64..1.0) {
        let n0 = net.input_dim();
        let pb = pblocks(n0, q, 0.01);
        let mult = multipliers(net.num_layers(), seed);
        let ml = build_ml(&net, &pb, &mult).unwrap();
        let sum = build_pl(&pb, &net.layer_dims()).unwrap().add(&build_st(&net, &mult).unwrap()).unwrap();
        prop_assert!(ml.max_abs_diff(&sum) <= 1e-14);
        prop_assert!(ml.is_symmetric(0.0));
    }

    #[test]
    fn certificate_ignores_biases(net in net(), seed in any::<u64>(), shift in -10.0f64..10.0) {
        let pb = pblocks(net.input_dim(), 0.3, 0.01);
        let mult = multipliers(net.num_layers(), seed);
        let biases = net.layers().iter().map(|l| l.bias.iter().map(|b| b + shift).collect()).collect();
        let moved = net.with_biases(biases).unwrap();
        prop_assert_eq!(build_ml(&net, &pb, &mult).unwrap(), build_ml(&moved, &pb, &mult).unwrap());
    }

    #[test]
    fn slope_constraint_is_sound(
        act in activation(),
        pairs in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..20)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(slope_quadratic(&a, &b, &act).unwrap() <= 1e-12);
    }

    #[test]
    fn layer_terms_scale_with_multipliers(net in net(), seed in any::<u64>(), c in 0.0f64..50.0) {
        let mult = multipliers(net.num_layers(), seed);
        let scaled = Multipliers::new(mult.lambdas.iter().map(|l| l * c).collect());
        let a = build_st(&net, &mult).unwrap().scale(c);
        let b = build_st(&net, &scaled).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn supply_rate_is_even(dy in prop::collection::vec(-3.0f64..3.0, 2), du in prop::collection::vec(-3.0f64..3.0, 2)) {
        let qsr = QsrSpec::new(
            DenseMatrix::scaled_identity(2, -0.3),
            DenseMatrix::rect_identity(2, 2, 0.5),
            DenseMatrix::scaled_identity(2, -0.1),
        ).unwrap();
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let a = supply_rate(&dy, &du, &qsr).unwrap();
        let b = supply_rate(&neg(&dy), &neg(&du), &qsr).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn model_file_round_trip_is_exact(net in net()) {
        let text = serde_json::to_string(&net.to_model_file(None)).unwrap();
        let back = Mlp::from_model_file(&serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn rollouts_are_deterministic(net in net(), z in prop::collection::vec(-1.0f64..1.0, 4)) {
        let z0 = &z[..net.input_dim()];
        let a = rollout(&net, z0, 20, 0.01);
        let b = rollout(&net, z0, 20, 0.01);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "rollout outcome differs between runs"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// A certified `M_L >= 0` implies the input-output quadratic inequality
    /// on arbitrary input pairs.
    #[test]
    fn certified_nets_satisfy_the_pair_inequality(
        seed in any::<u64>(),
        pairs in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 4), prop::collection::vec(-3.0f64..3.0, 4)), 20)
    ) {
        let net = Mlp::random(&[4, 6, 4], Activation::Tanh, seed).unwrap();
        let q = 0.5;
        let qsr = QsrSpec::new(
            DenseMatrix::scaled_identity(2, q),
            DenseMatrix::zeros(2, 2),
            DenseMatrix::scaled_identity(2, q),
        ).unwrap();
        let p22 = DenseMatrix::scaled_identity(4, -0.01);
        let cert = verify(&net, &QsrFamily::Fixed { qsr: qsr.clone() }, &p22, &SearchConfig::default()).unwrap();
        prop_assume!(cert.feasible);
        let pb = PBlocks::dissipativity(&qsr, &p22).unwrap();
        for (a, b) in &pairs {
            prop_assert!(lemma1_quadratic(&net, a, b, &pb).unwrap() >= -1e-8);
        }
    }
}
