#![allow(dead_code)]

use mellow_core::regularizers::GmParams;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params<R: Rng>(rng: &mut R) -> GmParams {
    GmParams::new(
        rng.random_range(0.0..=1.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(0.2..5.0),
        1.0,
    )
    .unwrap()
}

/// Independent evaluation of the GM regularizer on a two-action policy
/// `(p, 1 - p)` with reference `d`, written term by term.
pub fn omega_two_actions(p: f64, d: [f64; 2], params: &GmParams) -> f64 {
    let pi = [p, 1.0 - p];
    let mut neg_h = 0.0;
    let mut kl = 0.0;
    for a in 0..2 {
        if pi[a] > 0.0 {
            neg_h += pi[a] * pi[a].ln();
            kl += pi[a] * (pi[a] / d[a]).ln();
        }
    }
    (params.q * kl + (1.0 - params.q) * neg_h) / params.omega
}

/// Softmax of a two-vector at inverse temperature `tau`, in plain arithmetic.
pub fn softmax2(q: [f64; 2], tau: f64) -> [f64; 2] {
    let a = (tau * q[0]).exp();
    let b = (tau * q[1]).exp();
    [a / (a + b), b / (a + b)]
}

/// Grid maximisation of `<pi, Q> - Omega(pi; softmax_alpha(Q))` over the
/// two-action simplex. Returns `(max value, argmax p)`.
pub fn grid_backup(q: [f64; 2], params: &GmParams, step: f64) -> (f64, f64) {
    let d = softmax2(q, params.alpha);
    let n = (1.0 / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=n {
        let p = i as f64 / n as f64;
        let val = p * q[0] + (1.0 - p) * q[1] - omega_two_actions(p, d, params);
        if val > best.0 {
            best = (val, p);
        }
    }
    best
}

/// Golden-section refinement of the grid argmax; the objective is strictly
/// concave in `p`.
pub fn refine_backup(q: [f64; 2], params: &GmParams, bracket: (f64, f64)) -> (f64, f64) {
    let d = softmax2(q, params.alpha);
    let f = |p: f64| p * q[0] + (1.0 - p) * q[1] - omega_two_actions(p, d, params);
    let (mut lo, mut hi) = bracket;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let p = 0.5 * (lo + hi);
    (f(p), p)
}

use mellow_core::space::{FnReward, SequenceSpace, Token};

/// A random enumerable space with a random reward table attached.
pub struct RandomInstance {
    pub space: SequenceSpace,
    pub reward: FnReward<Box<dyn Fn(&[Token]) -> f64 + Send + Sync>>,
    pub scores: std::collections::HashMap<Vec<Token>, f64>,
}

pub fn random_instance<R: Rng>(rng: &mut R, max_b: usize, max_len: usize, beta: f64) -> RandomInstance {
    let b = rng.random_range(2..=max_b);
    let hi = rng.random_range(1..=max_len);
    let variable = rng.random_bool(0.5);
    let lo = if variable { rng.random_range(1..=hi) } else { hi };
    let space = SequenceSpace::with_digits(b, lo, hi, variable).unwrap();
    let scores: std::collections::HashMap<Vec<Token>, f64> = space
        .enumerate_terminals()
        .unwrap()
        .map(|x| (x, rng.random_range(-1.0..1.0)))
        .collect();
    let table = scores.clone();
    let reward = FnReward::new(beta, Box::new(move |x: &[Token]| table[x]) as Box<dyn Fn(&[Token]) -> f64 + Send + Sync>);
    RandomInstance { space, reward, scores }
}

/// `exp(beta * phi(x)) / Z` by direct normalisation over the enumerated terminals.
pub fn boltzmann(scores: &std::collections::HashMap<Vec<Token>, f64>, beta: f64) -> std::collections::HashMap<Vec<Token>, f64> {
    let m = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.values().map(|s| (beta * (s - m)).exp()).sum();
    scores.iter().map(|(k, s)| (k.clone(), (beta * (s - m)).exp() / z)).collect()
}
