//! Tree-structured generation environments over token sequences.
//!
//! A state is identified by the prefix built so far. Every non-terminal state
//! either appends one token or, when allowed, takes the `STOP` action which
//! produces the terminal copy of the same prefix. Rewards are attached only to
//! the terminating transition.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u16;

/// Default cap on the number of terminal objects an exact enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 24;

/// Tolerance on the total mass of a policy distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpace {
    alphabet: Vec<String>,
    min_len: usize,
    max_len: usize,
    variable_length: bool,
    enumeration_cap: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    pub prefix: Vec<Token>,
    pub terminal: bool,
}

impl State {
    pub fn root() -> Self {
        State { prefix: Vec::new(), terminal: false }
    }

    pub fn len(&self) -> usize {
        self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty()
    }
}

impl SequenceSpace {
    pub fn new(
        alphabet: Vec<String>,
        min_len: usize,
        max_len: usize,
        variable_length: bool,
    ) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::InvalidParameter("alphabet must not be empty".into()));
        }
        if alphabet.len() > Token::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "alphabet of {} tokens is too large",
                alphabet.len()
            )));
        }
        if min_len < 1 || min_len > max_len {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= min_len <= max_len, got min_len={min_len}, max_len={max_len}"
            )));
        }
        let mut seen = alphabet.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != alphabet.len() {
            return Err(Error::InvalidParameter("alphabet tokens must be distinct".into()));
        }
        Ok(SequenceSpace {
            alphabet,
            min_len,
            max_len,
            variable_length,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    /// Fixed-length space whose tokens are the decimal digits `0..size`.
    pub fn with_digits(size: usize, min_len: usize, max_len: usize, variable: bool) -> Result<Self> {
        Self::new((0..size).map(|i| i.to_string()).collect(), min_len, max_len, variable)
    }

    pub fn with_enumeration_cap(mut self, cap: u64) -> Self {
        self.enumeration_cap = cap;
        self
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn variable_length(&self) -> bool {
        self.variable_length
    }

    pub fn enumeration_cap(&self) -> u64 {
        self.enumeration_cap
    }

    /// The reserved index of the terminating action.
    pub fn stop_action(&self) -> usize {
        self.alphabet.len()
    }

    pub fn can_stop(&self, len: usize) -> bool {
        len == self.max_len || (self.variable_length && len >= self.min_len)
    }

    pub fn can_extend(&self, len: usize) -> bool {
        len < self.max_len
    }

    /// Number of legal actions at a non-terminal state of the given length.
    pub fn num_actions(&self, len: usize) -> usize {
        let extend = if self.can_extend(len) { self.alphabet.len() } else { 0 };
        extend + usize::from(self.can_stop(len))
    }

    /// Legal action indices in canonical order: tokens first, `STOP` last.
    pub fn legal_actions(&self, len: usize) -> Vec<usize> {
        let mut actions: Vec<usize> = if self.can_extend(len) {
            (0..self.alphabet.len()).collect()
        } else {
            Vec::new()
        };
        if self.can_stop(len) {
            actions.push(self.stop_action());
        }
        actions
    }

    /// Position of `action` within the canonical legal-action list at `len`.
    pub fn action_position(&self, len: usize, action: usize) -> Result<usize> {
        let arity = self.num_actions(len);
        if action == self.stop_action() && self.can_stop(len) {
            Ok(arity - 1)
        } else if action < self.alphabet.len() && self.can_extend(len) {
            Ok(action)
        } else {
            Err(Error::ActionOutOfRange { index: action, arity })
        }
    }

    /// Action index held at `position` in the canonical list at `len`.
    pub fn action_at(&self, len: usize, position: usize) -> Result<usize> {
        let arity = self.num_actions(len);
        if position >= arity {
            return Err(Error::ActionOutOfRange { index: position, arity });
        }
        if self.can_stop(len) && position == arity - 1 {
            Ok(self.stop_action())
        } else {
            Ok(position)
        }
    }

    pub fn children(&self, s: &State) -> Result<Vec<(usize, State)>> {
        if s.terminal {
            return Err(Error::TerminalState);
        }
        let len = s.len();
        let mut out = Vec::with_capacity(self.num_actions(len));
        if self.can_extend(len) {
            for t in 0..self.alphabet.len() {
                let mut prefix = s.prefix.clone();
                prefix.push(t as Token);
                out.push((t, State { prefix, terminal: false }));
            }
        }
        if self.can_stop(len) {
            out.push((self.stop_action(), State { prefix: s.prefix.clone(), terminal: true }));
        }
        Ok(out)
    }

    /// Applies an action index to a non-terminal state.
    pub fn step(&self, s: &State, action: usize) -> Result<State> {
        if s.terminal {
            return Err(Error::TerminalState);
        }
        self.action_position(s.len(), action)?;
        if action == self.stop_action() {
            Ok(State { prefix: s.prefix.clone(), terminal: true })
        } else {
            let mut prefix = s.prefix.clone();
            prefix.push(action as Token);
            Ok(State { prefix, terminal: false })
        }
    }

    /// Number of terminal objects.
    pub fn terminal_count(&self) -> u128 {
        let b = self.alphabet.len() as u128;
        let lo = if self.variable_length { self.min_len } else { self.max_len };
        (lo..=self.max_len)
            .map(|l| b.checked_pow(l as u32).unwrap_or(u128::MAX))
            .fold(0u128, |acc, c| acc.saturating_add(c))
    }

    pub fn check_enumerable(&self) -> Result<()> {
        let count = self.terminal_count();
        if count > self.enumeration_cap as u128 {
            Err(Error::SpaceTooLarge { count, cap: self.enumeration_cap })
        } else {
            Ok(())
        }
    }

    /// All terminal objects in lexicographic order.
    pub fn enumerate_terminals(&self) -> Result<TerminalIter<'_>> {
        self.check_enumerable()?;
        Ok(TerminalIter { space: self, current: Vec::new(), started: false, done: false })
    }

    pub fn render(&self, x: &[Token]) -> String {
        x.iter().map(|&t| self.alphabet[t as usize].as_str()).collect()
    }

    /// Splits a rendered sequence back into tokens. Requires every token of the
    /// alphabet to have the same width.
    pub fn parse(&self, s: &str) -> Result<Vec<Token>> {
        let width = self.alphabet[0].len();
        if width == 0 || self.alphabet.iter().any(|t| t.len() != width) {
            return Err(Error::Parse("parsing requires equal-width, non-empty tokens".into()));
        }
        if s.len() % width != 0 || !s.is_char_boundary(0) {
            return Err(Error::Parse(format!("sequence {s:?} is not a whole number of tokens")));
        }
        let mut out = Vec::with_capacity(s.len() / width);
        let mut i = 0;
        while i < s.len() {
            let piece = s.get(i..i + width).ok_or_else(|| Error::Parse(format!("bad sequence {s:?}")))?;
            let t = self
                .alphabet
                .iter()
                .position(|a| a == piece)
                .ok_or_else(|| Error::Parse(format!("unknown token {piece:?} in {s:?}")))?;
            out.push(t as Token);
            i += width;
        }
        Ok(out)
    }

    /// True when `x` is a terminal object of this space.
    pub fn is_terminal_object(&self, x: &[Token]) -> bool {
        let len = x.len();
        self.can_stop(len)
            && len >= self.min_len
            && len <= self.max_len
            && x.iter().all(|&t| (t as usize) < self.alphabet.len())
    }
}

/// Lexicographic iterator over terminal objects.
pub struct TerminalIter<'a> {
    space: &'a SequenceSpace,
    current: Vec<Token>,
    started: bool,
    done: bool,
}

impl TerminalIter<'_> {
    /// Advances `current` to the next prefix in depth-first preorder.
    fn advance(&mut self) -> bool {
        let b = self.space.alphabet_size() as Token;
        if self.space.can_extend(self.current.len()) {
            self.current.push(0);
            return true;
        }
        while let Some(last) = self.current.pop() {
            if last + 1 < b {
                self.current.push(last + 1);
                return true;
            }
        }
        false
    }
}

impl Iterator for TerminalIter<'_> {
    type Item = Vec<Token>;

    fn next(&mut self) -> Option<Vec<Token>> {
        if self.done {
            return None;
        }
        loop {
            if self.started && !self.advance() {
                self.done = true;
                return None;
            }
            self.started = true;
            if self.space.can_stop(self.current.len()) {
                return Some(self.current.clone());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(state, action)` pairs from the root; the last action is `STOP`.
    pub steps: Vec<(State, usize)>,
    pub terminal_object: Vec<Token>,
    pub reward: f64,
}

/// Terminal reward interface. Solvers see `beta * score(x)`.
pub trait RewardModel: Send + Sync {
    /// The (normalized) score of a completed object.
    fn score(&self, x: &[Token]) -> Result<f64>;

    fn beta(&self) -> f64;

    fn reward(&self, x: &[Token]) -> Result<f64> {
        let r = self.beta() * self.score(x)?;
        if r.is_finite() {
            Ok(r)
        } else {
            Err(Error::NonFinite(format!("reward {r} for sequence {x:?}")))
        }
    }
}

/// A reward model backed by a closure, handy for synthetic spaces.
pub struct FnReward<F> {
    f: F,
    beta: f64,
}

impl<F> FnReward<F>
where
    F: Fn(&[Token]) -> f64 + Send + Sync,
{
    pub fn new(beta: f64, f: F) -> Self {
        FnReward { f, beta }
    }
}

impl<F> RewardModel for FnReward<F>
where
    F: Fn(&[Token]) -> f64 + Send + Sync,
{
    fn score(&self, x: &[Token]) -> Result<f64> {
        Ok((self.f)(x))
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

/// Per-state action distributions over the canonical legal-action list.
pub trait Policy: Sync {
    fn action_probs(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn action_probs(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        (**self).action_probs(space, prefix)
    }
}

pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn action_probs(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        let n = space.num_actions(prefix.len());
        Ok(vec![1.0 / n as f64; n])
    }
}

pub fn validate_distribution(probs: &[f64], arity: usize) -> Result<()> {
    if probs.len() != arity {
        return Err(Error::InvalidDistribution(format!(
            "expected {arity} probabilities, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(format!("negative or non-finite entry in {probs:?}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Samples a position from a validated distribution.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc && p > 0.0 {
            return i;
        }
    }
    last_positive
}

/// Independent, reproducible random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn rollout_with<R, P, M>(space: &SequenceSpace, reward: &M, policy: &P, rng: &mut R) -> Result<Trajectory>
where
    R: Rng + ?Sized,
    P: Policy + ?Sized,
    M: RewardModel + ?Sized,
{
    let mut state = State::root();
    let mut steps = Vec::with_capacity(space.max_len() + 1);
    loop {
        let arity = space.num_actions(state.len());
        let probs = policy.action_probs(space, &state.prefix)?;
        validate_distribution(&probs, arity)?;
        let action = space.action_at(state.len(), sample_index(&probs, rng))?;
        let next = space.step(&state, action)?;
        steps.push((state, action));
        if next.terminal {
            let r = reward.reward(&next.prefix)?;
            return Ok(Trajectory { steps, terminal_object: next.prefix, reward: r });
        }
        state = next;
    }
}

/// Samples one trajectory, deterministic in `seed`.
pub fn rollout<P, M>(space: &SequenceSpace, reward: &M, policy: &P, seed: u64) -> Result<Trajectory>
where
    P: Policy + ?Sized,
    M: RewardModel + ?Sized,
{
    rollout_with(space, reward, policy, &mut stream_rng(seed, 0))
}

/// Samples `count` trajectories on streams `first_stream..first_stream + count`.
/// Runs on the current rayon pool; output order follows stream order.
pub fn rollout_batch<P, M>(
    space: &SequenceSpace,
    reward: &M,
    policy: &P,
    seed: u64,
    first_stream: u64,
    count: usize,
) -> Result<Vec<Trajectory>>
where
    P: Policy + ?Sized,
    M: RewardModel + ?Sized,
{
    (0..count as u64)
        .into_par_iter()
        .map(|i| rollout_with(space, reward, policy, &mut stream_rng(seed, first_stream + i)))
        .collect()
}
