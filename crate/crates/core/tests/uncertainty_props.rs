mod common;

use common::*;
use mellow_core::regularizers::{omega_gm, GmParams};
use mellow_core::uncertainty::*;
use proptest::prelude::*;
use rand::Rng;

fn spec_strategy() -> impl Strategy<Value = UncertaintySetSpec> {
    (0.0..=1.0f64, 0.2..5.0f64, 0.05..0.95f64).prop_map(|(q, w, d0)| UncertaintySetSpec::gm(q, w, vec![d0, 1.0 - d0]))
}

proptest! {
    #[test]
    fn set_is_convex(spec in spec_strategy(), a in prop::array::uniform2(-3.0..3.0f64), b in prop::array::uniform2(-3.0..3.0f64), lambda in 0.0..=1.0f64) {
        // Push both points into the set along the all-ones direction.
        let lift = |p: [f64; 2]| {
            let mut p = p;
            while membership(&spec, &p).unwrap().margin > 0.0 {
                p[0] += 0.25;
                p[1] += 0.25;
            }
            p
        };
        let (a, b) = (lift(a), lift(b));
        let mid = [lambda * a[0] + (1.0 - lambda) * b[0], lambda * a[1] + (1.0 - lambda) * b[1]];
        prop_assert!(membership(&spec, &mid).unwrap().margin <= 1e-9);
    }

    #[test]
    fn margin_is_monotone(spec in spec_strategy(), p in prop::array::uniform2(-3.0..3.0f64), bump in 0.0..2.0f64, axis in 0usize..2) {
        let before = membership(&spec, &p).unwrap().margin;
        let mut q = p;
        q[axis] += bump;
        prop_assert!(membership(&spec, &q).unwrap().margin <= before);
    }

    #[test]
    fn minkowski_sum_is_scaled_single_step(spec in spec_strategy(), p in prop::array::uniform2(-10.0..10.0f64), k in 1usize..=10) {
        let direct = minkowski_membership(&spec, k, &p).unwrap();
        let kf = k as f64;
        let scaled = membership(&spec, &[p[0] / kf, p[1] / kf]).unwrap();
        prop_assert_eq!(direct, scaled);
    }
}

#[test]
fn support_function_is_the_regularizer() {
    let mut rng = rng(31);
    for _ in 0..10 {
        let q = rng.random_range(0.0..=1.0);
        let omega = rng.random_range(0.5..3.0);
        let d0: f64 = rng.random_range(0.1..0.9);
        let d = [d0, 1.0 - d0];
        let p0: f64 = rng.random_range(0.05..0.95);
        let pi = [p0, 1.0 - p0];
        let spec = UncertaintySetSpec::gm(q, omega, d.to_vec());
        let w = [d[0].powf(q), d[1].powf(q)];

        // Walk the boundary: pick delta1, solve the boundary equation for delta2.
        let lo = w[0].ln() / omega + 1e-9;
        let n = 200_000;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            let delta1 = lo + 20.0 * i as f64 / n as f64;
            let rest = 1.0 - w[0] * (-omega * delta1).exp();
            let delta2 = -(rest / w[1]).ln() / omega;
            let m = membership(&spec, &[delta1, delta2]).unwrap();
            assert_eq!(m.region, Region::Boundary);
            best = best.max(-(pi[0] * delta1 + pi[1] * delta2));
        }
        let params = GmParams::new(q, 0.0, omega, 1.0).unwrap();
        let omega_pi = omega_gm(&pi, &d, &params).unwrap();
        assert!((best - omega_pi).abs() <= 1e-3, "support {best} vs regularizer {omega_pi}");
    }
}

#[test]
fn origin_membership_by_family() {
    let mut rng = rng(32);
    for _ in 0..50 {
        let n = rng.random_range(2..6);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let d: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let omega = rng.random_range(0.1..10.0);
        let zero = vec![0.0; n];
        let kl = membership(&UncertaintySetSpec::gm(1.0, omega, d.clone()), &zero).unwrap();
        assert_eq!(kl.region, Region::Boundary);
        let ent = membership(&UncertaintySetSpec::gm(0.0, omega, d), &zero).unwrap();
        assert_eq!(ent.region, Region::Outside);
    }
}

#[test]
fn trace_with_steps_matches_scaled_grid() {
    let spec = UncertaintySetSpec::neg_shannon(1.0, 2);
    let n = 11;
    let multi = boundary_trace_2d(&spec, n, -6.0, 6.0, 3).unwrap();
    let single = boundary_trace_2d(&spec, n, -2.0, 2.0, 1).unwrap();
    for (a, b) in multi.iter().zip(&single) {
        assert!((a.margin - b.margin).abs() <= 1e-12 * a.margin.abs().max(1.0));
    }
}
