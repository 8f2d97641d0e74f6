mod common;

use std::collections::HashMap;

use mellow_core::space::*;
use proptest::prelude::*;

fn count_paths(space: &SequenceSpace, state: &State, target: &[Token]) -> usize {
    if state.terminal {
        return usize::from(state.prefix == target);
    }
    space
        .children(state)
        .unwrap()
        .iter()
        .map(|(_, child)| count_paths(space, child, target))
        .sum()
}

#[test]
fn every_terminal_has_exactly_one_trajectory() {
    for (b, lo, hi, var) in [(2, 1, 3, true), (3, 2, 2, false), (2, 2, 4, true), (1, 1, 3, true)] {
        let space = SequenceSpace::with_digits(b, lo, hi, var).unwrap();
        for x in space.enumerate_terminals().unwrap() {
            assert_eq!(count_paths(&space, &State::root(), &x), 1, "{x:?} in {space:?}");
        }
    }
}

proptest! {
    #[test]
    fn terminal_count_matches_enumeration(b in 1usize..5, lo in 1usize..4, extra in 0usize..3, var in any::<bool>()) {
        let hi = lo + extra;
        let lo = if var { lo } else { hi };
        let space = SequenceSpace::with_digits(b, lo, hi, var).unwrap();
        let all: Vec<_> = space.enumerate_terminals().unwrap().collect();
        let expected: usize = (lo..=hi).map(|l| b.pow(l as u32)).sum();
        prop_assert_eq!(all.len(), expected);
        prop_assert_eq!(space.terminal_count(), expected as u128);
        prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(all.iter().all(|x| space.is_terminal_object(x)));
    }

    #[test]
    fn rollout_trajectories_are_well_formed(b in 1usize..4, lo in 1usize..4, extra in 0usize..3, seed in any::<u64>()) {
        let space = SequenceSpace::with_digits(b, lo, lo + extra, true).unwrap();
        let reward = FnReward::new(1.5, |x: &[Token]| x.len() as f64);
        let t = rollout(&space, &reward, &UniformPolicy, seed).unwrap();
        let mut state = State::root();
        for (s, a) in &t.steps {
            prop_assert_eq!(s, &state);
            state = space.step(s, *a).unwrap();
        }
        prop_assert!(state.terminal);
        prop_assert_eq!(&state.prefix, &t.terminal_object);
        prop_assert_eq!(t.reward, reward.reward(&t.terminal_object).unwrap());
        let again = rollout(&space, &reward, &UniformPolicy, seed).unwrap();
        prop_assert_eq!(t, again);
    }
}

#[test]
fn uniform_rollouts_match_uniform_leaves() {
    let space = SequenceSpace::with_digits(3, 2, 2, false).unwrap();
    let reward = FnReward::new(1.0, |_: &[Token]| 0.0);
    let n = 100_000;
    let batch = rollout_batch(&space, &reward, &UniformPolicy, 5, 0, n).unwrap();
    let mut counts: HashMap<Vec<Token>, usize> = HashMap::new();
    for t in &batch {
        *counts.entry(t.terminal_object.clone()).or_default() += 1;
    }
    let leaves: Vec<_> = space.enumerate_terminals().unwrap().collect();
    let p = 1.0 / leaves.len() as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for x in &leaves {
        let freq = counts.get(x).copied().unwrap_or(0) as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * se, "{x:?}: {freq} vs {p} (se {se})");
    }
}

#[test]
fn full_support_policy_reaches_every_terminal() {
    struct Skewed;
    impl Policy for Skewed {
        fn action_probs(&self, space: &SequenceSpace, prefix: &[Token]) -> mellow_core::Result<Vec<f64>> {
            let n = space.num_actions(prefix.len());
            let w: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let s: f64 = w.iter().sum();
            Ok(w.into_iter().map(|x| x / s).collect())
        }
    }
    let space = SequenceSpace::with_digits(2, 1, 3, true).unwrap();
    let reward = FnReward::new(1.0, |_: &[Token]| 0.0);
    let batch = rollout_batch(&space, &reward, &Skewed, 9, 0, 20_000).unwrap();
    let seen: std::collections::HashSet<_> = batch.into_iter().map(|t| t.terminal_object).collect();
    for x in space.enumerate_terminals().unwrap() {
        assert!(seen.contains(&x), "{x:?} never reached");
    }
}

#[test]
fn batch_order_follows_streams() {
    let space = SequenceSpace::with_digits(4, 1, 5, true).unwrap();
    let reward = FnReward::new(1.0, |x: &[Token]| x.len() as f64);
    let batch = rollout_batch(&space, &reward, &UniformPolicy, 3, 10, 32).unwrap();
    for (i, t) in batch.iter().enumerate() {
        let single = rollout_with(&space, &reward, &UniformPolicy, &mut stream_rng(3, 10 + i as u64)).unwrap();
        assert_eq!(t, &single);
    }
}
