use capspoe_core::activations::dropout_mask;
use capspoe_core::autoencoder::{capsulize, decapsulize};
use capspoe_core::conv::{conv2d_forward, conv_transpose2d_forward};
use capspoe_core::energy::{p_hidden_given_visible, p_visible_given_hidden, total_energy, EnergyModel};
use capspoe_core::routing::{
    route_forward, route_forward_observed, route_reverse_observed, squash, CapsuleActivations,
    CapsuleLayerSpec, PredictionMaps,
};
use capspoe_core::{SeededRng, Tensor};
use proptest::prelude::*;

fn maps(ni: usize, m: usize, nj: usize, n: usize, seed: u64) -> PredictionMaps {
    let lo = CapsuleLayerSpec::new(ni, m).unwrap();
    let up = CapsuleLayerSpec::new(nj, n).unwrap();
    PredictionMaps::gaussian(lo, up, 1.0, &mut SeededRng::new(seed)).unwrap()
}

fn acts(layer: CapsuleLayerSpec, seed: u64) -> CapsuleActivations {
    let mut rng = SeededRng::new(seed);
    CapsuleActivations::from_flat(layer, (0..layer.width()).map(|_| rng.next_f64()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coefficients_sum_to_one_every_iteration(
        ni in 1usize..8, m in 1usize..5, nj in 1usize..6, n in 1usize..5,
        iters in 1usize..6, seed in any::<u64>(),
    ) {
        let w = maps(ni, m, nj, n, seed);
        let x = acts(w.lower(), seed ^ 1);
        let mut worst = 0.0f64;
        let mut seen = 0;
        route_forward_observed(&w, &x, iters, &mut |s| {
            seen += 1;
            for j in 0..nj {
                let total: f64 = (0..ni).map(|i| s.coefficient(i, j)).sum();
                worst = worst.max((total - 1.0).abs());
                for i in 0..ni {
                    assert!(s.coefficient(i, j) >= 0.0);
                }
            }
        }).unwrap();
        prop_assert_eq!(seen, iters);
        prop_assert!(worst <= 1e-12);

        let h = acts(w.upper(), seed ^ 2);
        route_reverse_observed(&w, &h, iters, &mut |s| {
            for j in 0..nj {
                let total: f64 = (0..ni).map(|i| s.coefficient(i, j)).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }).unwrap();
    }

    #[test]
    fn squash_shrinks_and_keeps_direction(z in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let s = squash(&z);
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((0.0..1.0).contains(&sn));
        if zn > 1e-9 {
            let cos = z.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / (zn * sn);
            prop_assert!((cos - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(sn < 1e-9);
        }
    }

    #[test]
    fn routing_is_exactly_permutation_equivariant(
        ni in 2usize..9, m in 1usize..4, nj in 1usize..5, n in 1usize..4,
        seed in any::<u64>(),
    ) {
        let w = maps(ni, m, nj, n, seed);
        let x = acts(w.lower(), seed ^ 3);
        let mut perm: Vec<usize> = (0..ni).collect();
        SeededRng::new(seed ^ 4).shuffle(&mut perm);

        let mut pw = PredictionMaps::zeros(w.lower(), w.upper());
        let mut px = CapsuleActivations::zeros(w.lower());
        for (dst, &src) in perm.iter().enumerate() {
            px.capsule_mut(dst).copy_from_slice(x.capsule(src));
            for j in 0..nj {
                pw.matrix_mut(dst, j).copy_from_slice(w.matrix(src, j));
            }
        }
        let a = route_forward(&w, &x, 3).unwrap();
        let b = route_forward(&pw, &px, 3).unwrap();
        prop_assert_eq!(a.z_out.data(), b.z_out.data());
        prop_assert_eq!(&a.activations, &b.activations);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..nj {
                prop_assert_eq!(a.state.coefficient(src, j).to_bits(), b.state.coefficient(dst, j).to_bits());
            }
        }
    }

    #[test]
    fn conditionals_are_probabilities(
        ni in 1usize..5, m in 1usize..4, nj in 1usize..5, n in 1usize..4, seed in any::<u64>(),
    ) {
        let model = EnergyModel::new(maps(ni, m, nj, n, seed));
        let x = acts(model.lower(), seed ^ 5);
        let h = acts(model.upper(), seed ^ 6);
        let c = route_forward(model.maps(), &x, 3).unwrap().state;
        let ph = p_hidden_given_visible(&model, &x, &c).unwrap();
        let pv = p_visible_given_hidden(&model, &h, &c).unwrap();
        prop_assert!(ph.data().iter().chain(pv.data()).all(|&p| p > 0.0 && p < 1.0));
        // Zero hidden state has zero energy.
        let zero = CapsuleActivations::zeros(model.upper());
        prop_assert_eq!(total_energy(&model, &x, &zero, &c).unwrap(), 0.0);
    }

    #[test]
    fn capsulize_round_trips(h in 1usize..5, w in 1usize..5, groups in 1usize..4, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let shape = [h, w, 8 * groups];
        let f = Tensor::from_vec(&shape, (0..h * w * 8 * groups).map(|_| rng.next_f64()).collect()).unwrap();
        let caps = capsulize(&f).unwrap();
        prop_assert_eq!(caps.layer().count, h * w * groups);
        prop_assert_eq!(decapsulize(&caps, shape).unwrap(), f);
    }

    #[test]
    fn transposed_conv_is_the_adjoint(
        h in 3usize..9, w in 3usize..9, cin in 1usize..3, cout in 1usize..3,
        k in 1usize..4, stride in 1usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(stride <= k && k <= h && k <= w);
        let mut rng = SeededRng::new(seed);
        let mut rand = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.next_f64() - 0.5).collect()).unwrap()
        };
        let x = rand(&[h, w, cin]);
        let f = rand(&[k, k, cin, cout]);
        let y_shape = conv2d_forward(&x, &f, stride).unwrap().shape().to_vec();
        let y = rand(&y_shape);
        let lhs = conv2d_forward(&x, &f, stride).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv_transpose2d_forward(&y, &f, stride, (h, w)).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn zero_rate_dropout_is_identity(len in 1usize..50, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let before = rng.clone();
        let mask = dropout_mask(&[len], 0.0, &mut rng).unwrap();
        prop_assert!(mask.data().iter().all(|&v| v == 1.0));
        prop_assert_eq!(rng, before);
    }

    #[test]
    fn dropout_mask_values(len in 1usize..200, rate in 0.01f64..0.99, seed in any::<u64>()) {
        let mask = dropout_mask(&[len], rate, &mut SeededRng::new(seed)).unwrap();
        let keep = 1.0 / (1.0 - rate);
        prop_assert!(mask.data().iter().all(|&v| v == 0.0 || v == keep));
    }

    #[test]
    fn generator_is_a_pure_function_of_its_state(seed in any::<u64>(), skip in 0usize..20) {
        let mut a = SeededRng::new(seed);
        for _ in 0..skip {
            a.next_u64();
        }
        let mut b = SeededRng::from_state(a.state());
        for _ in 0..10 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
