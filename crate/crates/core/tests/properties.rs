//! Invariants checked on random inputs.

use nalgebra::DMatrix;
use proptest::prelude::*;

use ldpnn::gauss_expect::{kappa, kappa_relu_scalar, y_of_q, ExpectSpec};
use ldpnn::psd::min_norm_preimage;
use ldpnn::rates::chain::half_space_md_rate;
use ldpnn::rates::{conditional_rate_j, kappa_star_relu_scalar, legendre, md_rate};
use ldpnn::rng;
use ldpnn::simulator::{fit_slope, Scaling, TailEstimate};
use ldpnn::{Activation, CovMatrix, NetworkConfig, SymMatrix};

fn bounded() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::HardClip), Just(Activation::Tanh)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kappa_star_is_nonnegative_and_vanishes_at_the_mean(
        act in bounded(), q in 0.05f64..4.0, shift in -0.2f64..0.2,
    ) {
        let spec = ExpectSpec::default();
        let q = CovMatrix::scalar(q, 0.0).unwrap();
        let y0 = y_of_q(&q, &act, &spec).unwrap();
        let at_mean = legendre(&y0, &q, &act, &spec).unwrap().value.value();
        prop_assert!(at_mean <= 1e-8, "kappa*(y(q)) = {at_mean}");
        let y = SymMatrix::scalar((y0.get(0, 0) + shift).clamp(1e-3, 0.99));
        let v = legendre(&y, &q, &act, &spec).unwrap().value.value();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn kappa_is_convex_in_eta(act in bounded(), q in 0.1f64..3.0,
                              a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let spec = ExpectSpec::default();
        let q = CovMatrix::scalar(q, 0.0).unwrap();
        let k = |e: f64| kappa(&SymMatrix::scalar(e), &q, &act, &spec).unwrap();
        prop_assert!(k(0.5 * (a + b)) <= 0.5 * (k(a) + k(b)) + 1e-10);
    }

    #[test]
    fn relu_closed_forms_are_consistent(q in 0.05f64..5.0, y1 in 0.0f64..5.0, y2 in 0.0f64..5.0) {
        let f = |y: f64| kappa_star_relu_scalar(y * q, q).value();
        prop_assert!(f(0.5 * (y1 + y2)) <= 0.5 * (f(y1) + f(y2)) + 1e-9);
        prop_assert!(f(0.5) <= 1e-9);
        prop_assert!(kappa_relu_scalar(0.0, q).abs() < 1e-15);
        prop_assert!(kappa_relu_scalar(0.51 / q, q).is_infinite());
    }

    #[test]
    fn conditional_rate_is_nonnegative(
        act in bounded(), cb in 0.0f64..0.5, cw in 0.5f64..2.0,
        prev in 0.1f64..2.0, frac in 0.01f64..0.99, gamma in 1.0f64..4.0,
    ) {
        let model = NetworkConfig::new(1, 1, 1, cb, cw, act);
        let spec = ExpectSpec::default();
        let g_prev = CovMatrix::scalar(cb + prev, cb).unwrap();
        let g_next = CovMatrix::scalar(cb + cw * frac, cb).unwrap();
        let j = conditional_rate_j(&g_next, &g_prev, gamma, &model, &spec).unwrap();
        prop_assert!(j.value() >= 0.0);
        let inf = conditional_rate_j(&g_next, &g_prev, f64::INFINITY, &model, &spec).unwrap();
        prop_assert!(inf.value() >= j.value());
    }
}

proptest! {
    #[test]
    fn md_rate_is_a_quadratic_form(g in 0.01f64..10.0, t in -5.0f64..5.0, c in -3.0f64..3.0) {
        let cov = CovMatrix::scalar(g, 0.0).unwrap();
        let z = DMatrix::from_element(1, 1, t);
        let v = md_rate(&z, &cov).unwrap().value();
        prop_assert!((v - t * t / (2.0 * g)).abs() <= 1e-12 * (1.0 + v));
        prop_assert!((half_space_md_rate(t.abs(), &cov, 0).value() - v).abs() <= 1e-12 * (1.0 + v));
        let (vc, _) = min_norm_preimage(&cov, &(z * c)).unwrap();
        prop_assert!((vc.value() - c * c * v).abs() <= 1e-9 * (1.0 + vc.value()));
    }

    #[test]
    fn streams_are_reproducible_and_distinct(seed in any::<u64>(), dom in 1u64..9, block in 0u64..1000) {
        let draw = |s, d, b| {
            let mut g = rng::stream(s, d, b);
            let mut v = [0.0; 4];
            rng::fill_normal(&mut g, &mut v);
            v
        };
        let a = draw(seed, dom, block);
        prop_assert_eq!(a, draw(seed, dom, block));
        prop_assert_ne!(a, draw(seed, dom, block + 1));
        prop_assert_ne!(a, draw(seed, dom % 8 + 1, block));
        prop_assert_ne!(a, draw(seed.wrapping_add(1), dom, block));
    }

    #[test]
    fn slope_fit_is_exact_on_lines(slope in 0.01f64..2.0, icpt in -1.0f64..1.0, rho in 0.1f64..0.9) {
        let scaling = Scaling::Md { rho };
        let est: Vec<TailEstimate> = [64usize, 128, 256, 512]
            .iter()
            .map(|&n| {
                let lp = -(slope * scaling.speed(n) + icpt);
                let mut e = TailEstimate::from_counts(n, 1.0, 1000, 100_000);
                e.log_prob = lp;
                e
            })
            .collect();
        let fit = fit_slope(&est, scaling).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
        prop_assert!((fit.intercept - icpt).abs() < 1e-8);
        prop_assert!(fit.lower <= fit.slope && fit.slope <= fit.upper);
    }

    #[test]
    fn output_scale_inverts_the_speed(n in 1usize..100_000, rho in 0.01f64..0.99) {
        for s in [Scaling::Ld, Scaling::Md { rho }] {
            prop_assert!((s.output_scale(n) * s.speed(n).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}
