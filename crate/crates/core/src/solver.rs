//! Exact solving by backward recursion over an enumerable tree space.
//!
//! States of the same prefix length have no dependencies on each other, so the
//! recursion walks lengths from `max_len` down to the root and may evaluate a
//! whole level in parallel. Tables are stored per level, indexed by the base-`B`
//! number spelled by the prefix.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::output::fmt_float;
use crate::regularizers::{gm_backup, gm_consistency_term, gm_optimal_policy, GmParams};
use crate::space::{validate_distribution, Policy, RewardModel, SequenceSpace, State, Token};

/// Tabular state-action values over the canonical legal-action lists.
pub trait QValues: Sync {
    fn q_values(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>>;
}

impl<Q: QValues + ?Sized> QValues for &Q {
    fn q_values(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        (**self).q_values(space, prefix)
    }
}

/// Dense per-level storage of a fixed-width row for every non-terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTable {
    alphabet_size: usize,
    widths: Vec<usize>,
    levels: Vec<Vec<f64>>,
}

impl LevelTable {
    fn index(&self, prefix: &[Token]) -> Option<usize> {
        let mut idx = 0usize;
        for &t in prefix {
            if t as usize >= self.alphabet_size {
                return None;
            }
            idx = idx * self.alphabet_size + t as usize;
        }
        Some(idx)
    }

    pub fn row(&self, prefix: &[Token]) -> Option<&[f64]> {
        let level = self.levels.get(prefix.len())?;
        let width = self.widths[prefix.len()];
        let i = self.index(prefix)?;
        level.get(i * width..(i + 1) * width)
    }

    pub fn row_mut(&mut self, prefix: &[Token]) -> Option<&mut [f64]> {
        let width = *self.widths.get(prefix.len())?;
        let i = self.index(prefix)?;
        self.levels.get_mut(prefix.len())?.get_mut(i * width..(i + 1) * width)
    }

    /// Every `(prefix, row)` pair, level by level in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (Vec<Token>, &[f64])> + '_ {
        self.levels.iter().enumerate().flat_map(move |(len, level)| {
            let width = self.widths[len];
            let count = if width == 0 { 0 } else { level.len() / width };
            (0..count).map(move |i| (decode(i, len, self.alphabet_size), &level[i * width..(i + 1) * width]))
        })
    }
}

fn decode(mut idx: usize, len: usize, base: usize) -> Vec<Token> {
    let mut prefix = vec![0 as Token; len];
    for slot in prefix.iter_mut().rev() {
        *slot = (idx % base) as Token;
        idx /= base;
    }
    prefix
}

/// Optimal state values; terminal states are pinned to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable(LevelTable);

impl ValueTable {
    pub fn value(&self, state: &State) -> Option<f64> {
        if state.terminal {
            return self.0.row(&state.prefix).map(|_| 0.0);
        }
        self.0.row(&state.prefix).map(|r| r[0])
    }

    pub fn root(&self) -> f64 {
        self.0.levels[0][0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<Token>, f64)> + '_ {
        self.0.iter().map(|(p, r)| (p, r[0]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable(LevelTable);

impl PolicyTable {
    pub fn get(&self, prefix: &[Token]) -> Option<&[f64]> {
        self.0.row(prefix)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<Token>, &[f64])> + '_ {
        self.0.iter()
    }
}

impl Policy for PolicyTable {
    fn action_probs(&self, _space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        self.0.row(prefix).map(<[f64]>::to_vec).ok_or_else(|| Error::MissingPolicy(prefix.to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable(LevelTable);

impl QTable {
    pub fn get(&self, prefix: &[Token]) -> Option<&[f64]> {
        self.0.row(prefix)
    }

    pub fn get_mut(&mut self, prefix: &[Token]) -> Option<&mut [f64]> {
        self.0.row_mut(prefix)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<Token>, &[f64])> + '_ {
        self.0.iter()
    }
}

impl QValues for QTable {
    fn q_values(&self, _space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        self.0.row(prefix).map(<[f64]>::to_vec).ok_or_else(|| Error::MissingPolicy(prefix.to_vec()))
    }
}

/// Explicit per-state distributions; states without an entry are an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapPolicy(pub BTreeMap<Vec<Token>, Vec<f64>>);

impl Policy for MapPolicy {
    fn action_probs(&self, _space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        self.0.get(prefix).cloned().ok_or_else(|| Error::MissingPolicy(prefix.to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: ValueTable,
    pub policy: PolicyTable,
    pub q: QTable,
}

struct StateSolution {
    value: f64,
    q: Vec<f64>,
    policy: Vec<f64>,
}

pub fn solve_backward<M: RewardModel + ?Sized>(
    space: &SequenceSpace,
    reward: &M,
    params: &GmParams,
) -> Result<Solution> {
    params.validate()?;
    space.check_enumerable()?;
    let b = space.alphabet_size();
    let depth = space.max_len();
    let widths: Vec<usize> = (0..=depth).map(|l| space.num_actions(l)).collect();

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    let mut qs: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    let mut policies: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];

    for len in (0..=depth).rev() {
        let count = b.pow(len as u32);
        let next: &[f64] = if len < depth { &values[len + 1] } else { &[] };
        let solved: Vec<StateSolution> = (0..count)
            .into_par_iter()
            .map(|idx| {
                let mut q = Vec::with_capacity(widths[len]);
                if space.can_extend(len) {
                    q.extend_from_slice(&next[idx * b..(idx + 1) * b]);
                }
                if space.can_stop(len) {
                    q.push(reward.reward(&decode(idx, len, b))?);
                }
                let value = gm_backup(&q, params)?;
                let policy = gm_optimal_policy(&q, params)?;
                Ok(StateSolution { value, q, policy })
            })
            .collect::<Result<_>>()?;
        values[len] = solved.iter().map(|s| s.value).collect();
        qs[len] = solved.iter().flat_map(|s| s.q.iter().copied()).collect();
        policies[len] = solved.into_iter().flat_map(|s| s.policy).collect();
    }

    let table = |levels| LevelTable { alphabet_size: b, widths: widths.clone(), levels };
    Ok(Solution {
        values: ValueTable(LevelTable { alphabet_size: b, widths: vec![1; depth + 1], levels: values }),
        policy: PolicyTable(table(policies)),
        q: QTable(table(qs)),
    })
}

/// Probability of every terminal object, in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDistribution {
    pub entries: Vec<(Vec<Token>, f64)>,
}

impl TerminalDistribution {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn probability(&self, x: &[Token]) -> Option<f64> {
        self.entries
            .binary_search_by(|(y, _)| y.as_slice().cmp(x))
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// `E[f(x)]` under the distribution.
    pub fn expectation<F: FnMut(&[Token]) -> Result<f64>>(&self, mut f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (x, p) in &self.entries {
            acc += p * f(x)?;
        }
        Ok(acc)
    }
}

pub fn terminal_distribution<P: Policy + ?Sized>(
    space: &SequenceSpace,
    policy: &P,
) -> Result<TerminalDistribution> {
    fn visit<P: Policy + ?Sized>(
        space: &SequenceSpace,
        policy: &P,
        prefix: &mut Vec<Token>,
        mass: f64,
        out: &mut Vec<(Vec<Token>, f64)>,
    ) -> Result<()> {
        let len = prefix.len();
        let probs = policy.action_probs(space, prefix)?;
        validate_distribution(&probs, space.num_actions(len))?;
        // A prefix sorts before its extensions, so STOP is emitted first.
        if space.can_stop(len) {
            out.push((prefix.clone(), mass * probs[probs.len() - 1]));
        }
        if space.can_extend(len) {
            for t in 0..space.alphabet_size() {
                prefix.push(t as Token);
                visit(space, policy, prefix, mass * probs[t], out)?;
                prefix.pop();
            }
        }
        Ok(())
    }

    space.check_enumerable()?;
    let mut out = Vec::new();
    visit(space, policy, &mut Vec::new(), 1.0, &mut out)?;
    Ok(TerminalDistribution { entries: out })
}

/// Largest `|v0 + sum_i g(Q_{s_i}, a_i) - r(x)|` over all full trajectories,
/// for a given root value `v0`.
pub fn consistency_residual<M, Q>(
    space: &SequenceSpace,
    reward: &M,
    params: &GmParams,
    q: &Q,
    root_value: f64,
) -> Result<f64>
where
    M: RewardModel + ?Sized,
    Q: QValues + ?Sized,
{
    fn visit<M: RewardModel + ?Sized, Q: QValues + ?Sized>(
        space: &SequenceSpace,
        reward: &M,
        params: &GmParams,
        q: &Q,
        prefix: &mut Vec<Token>,
        acc: f64,
        worst: &mut f64,
    ) -> Result<()> {
        let len = prefix.len();
        let qv = q.q_values(space, prefix)?;
        if qv.len() != space.num_actions(len) {
            return Err(Error::ActionOutOfRange { index: qv.len(), arity: space.num_actions(len) });
        }
        if space.can_stop(len) {
            let g = gm_consistency_term(&qv, qv.len() - 1, params)?;
            let r = reward.reward(prefix)?;
            *worst = worst.max((acc + g - r).abs());
        }
        if space.can_extend(len) {
            for t in 0..space.alphabet_size() {
                let g = gm_consistency_term(&qv, t, params)?;
                prefix.push(t as Token);
                visit(space, reward, params, q, prefix, acc + g, worst)?;
                prefix.pop();
            }
        }
        Ok(())
    }

    space.check_enumerable()?;
    let mut worst = 0.0f64;
    visit(space, reward, params, q, &mut Vec::new(), root_value, &mut worst)?;
    Ok(worst)
}

/// Trajectory-consistency check against the exact optimal root value.
pub fn check_trajectory_consistency<M, Q>(
    space: &SequenceSpace,
    reward: &M,
    params: &GmParams,
    q: &Q,
) -> Result<f64>
where
    M: RewardModel + ?Sized,
    Q: QValues + ?Sized,
{
    let solution = solve_backward(space, reward, params)?;
    consistency_residual(space, reward, params, q, solution.values.root())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileMass {
    pub quantile_lo: f64,
    pub quantile_hi: f64,
    pub mass: f64,
}

/// Probability mass per reward-quantile bucket. A terminal falls in bucket
/// `floor(F * buckets)`, where `F` is the fraction of terminals with strictly
/// smaller reward, so tied rewards share a bucket.
pub fn quantile_mass_report<M, P>(
    space: &SequenceSpace,
    reward: &M,
    policy: &P,
    buckets: usize,
) -> Result<Vec<QuantileMass>>
where
    M: RewardModel + ?Sized,
    P: Policy + ?Sized,
{
    if buckets == 0 {
        return Err(Error::InvalidParameter("need at least one quantile bucket".into()));
    }
    let dist = terminal_distribution(space, policy)?;
    let rewards: Vec<f64> = dist.entries.iter().map(|(x, _)| reward.reward(x)).collect::<Result<_>>()?;
    quantile_mass_from(&rewards, &dist.entries.iter().map(|(_, p)| *p).collect::<Vec<_>>(), buckets)
}

pub(crate) fn quantile_mass_from(rewards: &[f64], probs: &[f64], buckets: usize) -> Result<Vec<QuantileMass>> {
    let n = rewards.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]));
    let mut mass = vec![0.0; buckets];
    let mut first_of_tie = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && rewards[i] != rewards[order[rank - 1]] {
            first_of_tie = rank;
        }
        let bucket = ((first_of_tie * buckets) / n).min(buckets - 1);
        mass[bucket] += probs[i];
    }
    Ok(mass
        .into_iter()
        .enumerate()
        .map(|(b, m)| QuantileMass {
            quantile_lo: b as f64 / buckets as f64,
            quantile_hi: (b + 1) as f64 / buckets as f64,
            mass: m,
        })
        .collect())
}

pub fn write_quantiles_csv<W: Write>(rows: &[QuantileMass], mut w: W) -> std::io::Result<()> {
    writeln!(w, "quantile_lo,quantile_hi,mass")?;
    for r in rows {
        writeln!(w, "{},{},{}", fmt_float(r.quantile_lo), fmt_float(r.quantile_hi), fmt_float(r.mass))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{FnReward, UniformPolicy};

    fn two_terminal() -> (SequenceSpace, FnReward<impl Fn(&[Token]) -> f64 + Send + Sync>) {
        let space = SequenceSpace::with_digits(2, 1, 1, false).unwrap();
        let reward = FnReward::new(1.0, |x: &[Token]| if x[0] == 0 { 0.0 } else { std::f64::consts::LN_2 });
        (space, reward)
    }

    #[test]
    fn depth_one_logsumexp() {
        let (space, reward) = two_terminal();
        let sol = solve_backward(&space, &reward, &GmParams::gfn(1.0)).unwrap();
        assert!((sol.values.root() - 3f64.ln()).abs() < 1e-14);
        let dist = terminal_distribution(&space, &sol.policy).unwrap();
        assert!((dist.entries[0].1 - 1.0 / 3.0).abs() < 1e-14);
        assert!((dist.entries[1].1 - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn constant_rewards_count_paths() {
        let c = 0.7;
        for len in 1..=5 {
            let space = SequenceSpace::with_digits(2, len, len, false).unwrap();
            let reward = FnReward::new(1.0, move |_: &[Token]| c);
            let sol = solve_backward(&space, &reward, &GmParams::gfn(1.0)).unwrap();
            let expected = c + len as f64 * std::f64::consts::LN_2;
            assert!((sol.values.root() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn terminal_values_are_zero() {
        let space = SequenceSpace::with_digits(3, 1, 3, true).unwrap();
        let reward = FnReward::new(2.0, |x: &[Token]| x.iter().map(|&t| t as f64).sum());
        let sol = solve_backward(&space, &reward, &GmParams::new(0.5, 1.0, 2.0, 2.0).unwrap()).unwrap();
        for x in space.enumerate_terminals().unwrap() {
            assert_eq!(sol.values.value(&State { prefix: x, terminal: true }), Some(0.0));
        }
    }

    #[test]
    fn non_finite_reward_is_rejected() {
        let space = SequenceSpace::with_digits(2, 2, 2, false).unwrap();
        let reward = FnReward::new(1.0, |x: &[Token]| if x == [1, 1] { f64::INFINITY } else { 0.0 });
        assert!(matches!(
            solve_backward(&space, &reward, &GmParams::gfn(1.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn too_large_space_is_rejected() {
        let space = SequenceSpace::with_digits(4, 9, 9, false).unwrap().with_enumeration_cap(1 << 16);
        let reward = FnReward::new(1.0, |_: &[Token]| 0.0);
        assert!(matches!(
            solve_backward(&space, &reward, &GmParams::gfn(1.0)),
            Err(Error::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn uniform_and_deterministic_distributions() {
        let space = SequenceSpace::with_digits(2, 2, 2, false).unwrap();
        let dist = terminal_distribution(&space, &UniformPolicy).unwrap();
        assert_eq!(dist.entries.len(), 4);
        assert!(dist.entries.iter().all(|(_, p)| (*p - 0.25).abs() < 1e-15));

        let mut map = BTreeMap::new();
        map.insert(vec![], vec![0.0, 1.0]);
        map.insert(vec![0], vec![0.5, 0.5]);
        map.insert(vec![1], vec![1.0, 0.0]);
        for p in [vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]] {
            map.insert(p, vec![1.0]);
        }
        let dist = terminal_distribution(&space, &MapPolicy(map.clone())).unwrap();
        assert_eq!(dist.probability(&[1, 0]), Some(1.0));
        assert_eq!(dist.total(), 1.0);

        map.remove(&vec![1, 0]);
        assert!(matches!(
            terminal_distribution(&space, &MapPolicy(map)),
            Err(Error::MissingPolicy(p)) if p == vec![1, 0]
        ));
    }

    #[test]
    fn exact_q_has_zero_residual() {
        let space = SequenceSpace::with_digits(3, 1, 3, true).unwrap();
        let reward = FnReward::new(1.5, |x: &[Token]| (x.len() as f64).sin() + x[0] as f64 * 0.3);
        let params = GmParams::new(0.7, 2.0, 1.5, 1.5).unwrap();
        let sol = solve_backward(&space, &reward, &params).unwrap();
        let res = check_trajectory_consistency(&space, &reward, &params, &sol.q).unwrap();
        assert!(res <= 1e-8, "residual {res}");
    }

    #[test]
    fn single_action_space_is_trivially_consistent() {
        let space = SequenceSpace::with_digits(1, 3, 3, false).unwrap();
        let reward = FnReward::new(1.0, |_: &[Token]| 2.5);
        let params = GmParams::new(0.5, 1.0, 2.0, 1.0).unwrap();
        let mut q = solve_backward(&space, &reward, &params).unwrap().q;
        for p in [vec![], vec![0], vec![0, 0], vec![0, 0, 0]] {
            q.get_mut(&p).unwrap()[0] = -17.0 + p.len() as f64;
        }
        let res = check_trajectory_consistency(&space, &reward, &params, &q).unwrap();
        assert_eq!(res, 0.0);
    }

    #[test]
    fn quantiles_under_uniform_policy_match_counts() {
        let space = SequenceSpace::with_digits(2, 4, 4, false).unwrap();
        let reward = FnReward::new(1.0, |x: &[Token]| x.iter().enumerate().map(|(i, &t)| (t as f64) * (1 << i) as f64).sum());
        let rows = quantile_mass_report(&space, &reward, &UniformPolicy, 4).unwrap();
        for r in rows {
            assert!((r.mass - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_ties_share_bucket() {
        let rows = quantile_mass_from(&[1.0, 1.0, 1.0, 2.0], &[0.25; 4], 4).unwrap();
        assert_eq!(rows[0].mass, 0.75);
        assert_eq!(rows[3].mass, 0.25);
    }

    #[test]
    fn level_table_iterates_lexicographically() {
        let space = SequenceSpace::with_digits(2, 2, 2, false).unwrap();
        let reward = FnReward::new(1.0, |_: &[Token]| 0.0);
        let sol = solve_backward(&space, &reward, &GmParams::gfn(1.0)).unwrap();
        let keys: Vec<Vec<Token>> = sol.values.iter().map(|(p, _)| p).collect();
        assert_eq!(keys, vec![vec![], vec![0], vec![1], vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }
}
