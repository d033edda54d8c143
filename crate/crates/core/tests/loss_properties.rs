mod common;

use cafegan::autograd::Var;
use cafegan::losses::*;
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;

fn var(a: ArrayD<f64>) -> Var<f64> {
    Var::constant(a)
}

#[test]
fn bce_fixture() {
    let p = var(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.5, 0.5]).unwrap());
    let t = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap();
    let l = binary_cross_entropy(&p, &t).unwrap().item();
    assert!((l - 1.386294).abs() < 1e-6);
    assert!((l + 2.0 * 0.5f64.ln()).abs() < 1e-15);
}

#[test]
fn bce_extreme_probabilities_stay_finite() {
    let p = var(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.0, 1.0]).unwrap());
    let t = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap();
    let l = binary_cross_entropy(&p, &t).unwrap().item();
    assert!(l.is_finite() && l > 30.0);
}

#[test]
fn reconstruction_constant_offset() {
    let x = var(ArrayD::zeros(IxDyn(&[2, 3, 4, 4])));
    let y = var(ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 0.5));
    assert_eq!(loss_reconstruction(&x, &y).unwrap().item(), 0.5);
}

#[test]
fn totals_zero_and_fixtures() {
    let w = LossWeights::default();
    assert_eq!(total_loss_d(&DiscriminatorLossParts { adv: -4.0, att: 1.0, cls: 2.0 }, &w), 7.0);
    let g = total_loss_g(&GeneratorLossParts { adv: -2.0, cm: 0.1, cls: 0.3, rec: 0.01 }, &w);
    assert!((g - 2.1).abs() < 1e-12);
    let no_cm = LossWeights { cm: 0.0, ..w };
    let g0 = total_loss_g(&GeneratorLossParts { adv: -2.0, cm: 123.0, cls: 0.3, rec: 0.01 }, &no_cm);
    assert!((g0 - 2.0).abs() < 1e-12);
}

#[test]
fn adversarial_signs() {
    let real = var(ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, 1.0]).unwrap());
    let fake = var(ArrayD::from_shape_vec(IxDyn(&[2]), vec![-1.0, 0.0]).unwrap());
    let gp = Var::scalar_const(0.25);
    assert_eq!(loss_adv_d(&real, &fake, &gp, 10.0).unwrap().item(), 2.0 + 0.5 - 2.5);
    assert_eq!(loss_adv_g(&fake).unwrap().item(), -0.5);
}

fn probs(n: usize, k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(0.001f64..0.999, n * k), prop::collection::vec(0u8..2, n * k))
        .prop_map(|(p, t)| (p, t.into_iter().map(f64::from).collect()))
}

proptest! {
    #[test]
    fn bce_matches_oracle_and_is_nonnegative((p, t) in probs(3, 4)) {
        let pa = Array2::from_shape_vec((3, 4), p).unwrap();
        let ta = Array2::from_shape_vec((3, 4), t).unwrap();
        let got = binary_cross_entropy(&var(pa.clone().into_dyn()), &ta.clone().into_dyn()).unwrap().item();
        prop_assert!(got >= 0.0);
        prop_assert!((got - common::bce_oracle(&pa, &ta)).abs() < 1e-9);
        let logits = pa.mapv(|v| (v / (1.0 - v)).ln());
        let via_logits = binary_cross_entropy_with_logits(&var(logits.into_dyn()), &ta.into_dyn()).unwrap().item();
        prop_assert!((got - via_logits).abs() < 1e-8);
    }

    #[test]
    fn attention_losses_use_complemented_targets((p, t) in probs(2, 3)) {
        let pa = Array2::from_shape_vec((2, 3), p).unwrap().into_dyn();
        let ta = Array2::from_shape_vec((2, 3), t).unwrap().into_dyn();
        let cab = loss_attention_cab(&var(pa.clone()), &ta).unwrap().item();
        let direct = binary_cross_entropy(&var(pa.clone()), &ta.mapv(|v| 1.0 - v)).unwrap().item();
        prop_assert_eq!(cab, direct);
        let ab = loss_attention_ab(&var(pa.clone()), &ta).unwrap().item();
        prop_assert_eq!(ab, binary_cross_entropy(&var(pa), &ta).unwrap().item());
    }

    #[test]
    fn cm_matches_oracle(seed in 0u64..1000, n in 1usize..3, k in 1usize..4, h in 1usize..4) {
        let shape = [n, k, h, h];
        let arrays: Vec<ArrayD<f64>> = (0..4).map(|i| common::uniform(&shape, 0.0, 1.0, seed * 4 + i)).collect();
        let mut r = common::rng(seed);
        let v_d = Array2::from_shape_fn((n, k), |_| f64::from(rand::Rng::random_range(&mut r, -1i32..=1)));
        let got = loss_complementary_matching(
            &var(arrays[0].clone()), &var(arrays[1].clone()), &var(arrays[2].clone()), &var(arrays[3].clone()), &v_d,
        ).unwrap().item();
        prop_assert!(got >= 0.0);
        let expect = common::cm_oracle(&arrays[0], &arrays[1], &arrays[2], &arrays[3], &v_d);
        prop_assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_elementwise_mean(seed in 0u64..1000) {
        let a = common::uniform(&[2, 3, 3, 3], -1.0, 1.0, seed);
        let b = common::uniform(&[2, 3, 3, 3], -1.0, 1.0, seed + 7);
        let expect = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let got = loss_reconstruction(&var(a), &var(b)).unwrap().item();
        prop_assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn penalty_of_linear_critic_is_closed_form(c in -3.0f64..3.0, seed in 0u64..100) {
        let (n, d) = (2, 4);
        let x = var(common::uniform(&[n, d], -1.0, 1.0, seed));
        let y = var(common::uniform(&[n, d], -1.0, 1.0, seed + 1));
        let gp = gradient_penalty_at(|z| Ok(z.sum_to(&[n, 1]).reshape(&[n]).scale(c)), &x, &y, &[0.3, 0.7]).unwrap().item();
        let g = c.abs() * (d as f64).sqrt();
        prop_assert!(gp >= 0.0);
        prop_assert!((gp - (g - 1.0).powi(2)).abs() < 1e-6);
    }

    #[test]
    fn totals_are_linear_in_each_weight(a in -5.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0, lam in 0.0f64..20.0) {
        let base = LossWeights::default();
        let parts = DiscriminatorLossParts { adv: a, att: b, cls: c };
        let l0 = total_loss_d(&parts, &LossWeights { att: 0.0, ..base });
        let l1 = total_loss_d(&parts, &LossWeights { att: lam, ..base });
        prop_assert!((l1 - l0 - lam * b).abs() < 1e-9);
        let gp = GeneratorLossParts { adv: a, cm: b, cls: c, rec: b };
        let g0 = total_loss_g(&gp, &LossWeights { rec: 0.0, ..base });
        let g1 = total_loss_g(&gp, &LossWeights { rec: lam, ..base });
        prop_assert!((g1 - g0 - lam * b).abs() < 1e-9);
    }
}
