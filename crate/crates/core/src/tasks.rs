//! Benchmark reward models and diversity-aware evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::QValues;
use crate::regularizers::GmParams;
use crate::space::{rollout_batch, stream_rng, RewardModel, SequenceSpace, Token};
use crate::train::policy_from_q;

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(x: &[T], y: &[T]) -> usize {
    if x.is_empty() {
        return y.len();
    }
    let mut row: Vec<usize> = (0..=y.len()).collect();
    for (i, a) in x.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, b) in y.iter().enumerate() {
            let next = (diag + usize::from(a != b)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[y.len()]
}

/// Bit strings of length `n` built `k` bits at a time, rewarded by closeness
/// to a set of mode strings: `1 - min_mode lev(x, mode) / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitSequenceTask {
    pub n: usize,
    pub k: usize,
    pub modes: Vec<Vec<u8>>,
    pub beta: f64,
}

impl BitSequenceTask {
    pub fn new(n: usize, k: usize, modes: Vec<Vec<u8>>, beta: f64) -> Result<Self> {
        if k == 0 || n == 0 || n % k != 0 {
            return Err(Error::InvalidParameter(format!("word size {k} must divide length {n}")));
        }
        if k > 15 {
            return Err(Error::InvalidParameter(format!("word size {k} is too large")));
        }
        if modes.is_empty() {
            return Err(Error::InvalidParameter("need at least one mode".into()));
        }
        for m in &modes {
            if m.len() != n || m.iter().any(|&b| b > 1) {
                return Err(Error::InvalidParameter(format!("mode is not a {n}-bit string")));
            }
        }
        let mut sorted = modes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != modes.len() {
            return Err(Error::InvalidParameter("modes must be distinct".into()));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
        }
        Ok(BitSequenceTask { n, k, modes, beta })
    }

    /// `m` distinct uniformly random `n`-bit modes.
    pub fn random_modes(n: usize, m: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
        if n < 64 && (m as u128) > (1u128 << n) {
            return Err(Error::InvalidParameter(format!("cannot draw {m} distinct {n}-bit modes")));
        }
        let mut rng = stream_rng(seed, 0);
        let mut modes: Vec<Vec<u8>> = Vec::with_capacity(m);
        while modes.len() < m {
            let cand: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            if !modes.contains(&cand) {
                modes.push(cand);
            }
        }
        Ok(modes)
    }

    pub fn vocabulary(&self) -> Vec<String> {
        (0..1usize << self.k).map(|w| format!("{w:0width$b}", width = self.k)).collect()
    }

    /// Fixed-length space of `n / k` words.
    pub fn space(&self) -> Result<SequenceSpace> {
        let len = self.n / self.k;
        SequenceSpace::new(self.vocabulary(), len, len, false)
    }

    pub fn bits(&self, x: &[Token]) -> Vec<u8> {
        x.iter()
            .flat_map(|&w| (0..self.k).rev().map(move |i| ((w >> i) & 1) as u8))
            .collect()
    }

    pub fn bitseq_reward(&self, x: &[Token]) -> Result<f64> {
        let bits = self.bits(x);
        if bits.len() != self.n {
            return Err(Error::WrongLength { expected: self.n, got: bits.len() });
        }
        let best = self.modes.iter().map(|m| levenshtein(&bits, m)).min().unwrap_or(self.n);
        Ok(1.0 - best as f64 / self.n as f64)
    }

    pub fn parse_modes(text: &str) -> Result<Vec<Vec<u8>>> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.bytes()
                    .map(|c| match c {
                        b'0' => Ok(0),
                        b'1' => Ok(1),
                        _ => Err(Error::Parse(format!("mode {l:?} is not a bit string"))),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn format_modes(modes: &[Vec<u8>]) -> String {
        let mut out = String::new();
        for m in modes {
            out.extend(m.iter().map(|&b| if b == 1 { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

impl RewardModel for BitSequenceTask {
    fn score(&self, x: &[Token]) -> Result<f64> {
        self.bitseq_reward(x)
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Tabulated raw scores with standardisation `beta (phi - mu) / sigma`.
#[derive(Debug, Clone)]
pub struct RewardTable {
    scores: HashMap<Vec<Token>, f64>,
    pub stats: NormalizationStats,
    pub beta: f64,
}

impl RewardTable {
    pub fn new(scores: HashMap<Vec<Token>, f64>, stats: NormalizationStats, beta: f64) -> Result<Self> {
        if !(stats.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {}", stats.sigma)));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
        }
        Ok(RewardTable { scores, stats, beta })
    }

    /// Reads `SEQUENCE<TAB>SCORE` records; lines starting with `#` are skipped.
    pub fn parse_tsv(space: &SequenceSpace, text: &str) -> Result<HashMap<Vec<Token>, f64>> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(false)
            .from_reader(text.as_bytes());
        let mut scores = HashMap::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Parse(format!("expected 2 columns, got {}", record.len())));
            }
            let seq = space.parse(&record[0])?;
            let score: f64 = record[1]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad score {:?} for {}", &record[1], &record[0])))?;
            if scores.insert(seq, score).is_some() {
                return Err(Error::Parse(format!("duplicate sequence {}", &record[0])));
            }
        }
        Ok(scores)
    }

    pub fn from_files(
        space: &SequenceSpace,
        table: &Path,
        stats: Option<&Path>,
        beta: f64,
    ) -> Result<Self> {
        let scores = Self::parse_tsv(space, &std::fs::read_to_string(table)?)?;
        let stats = match stats {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => Self::population_stats(scores.values().copied())?,
        };
        Self::new(scores, stats, beta)
    }

    /// Mean and population standard deviation of raw scores. The scores are
    /// summed in sorted order so the result does not depend on input order.
    pub fn population_stats<I: IntoIterator<Item = f64>>(scores: I) -> Result<NormalizationStats> {
        let mut v: Vec<f64> = scores.into_iter().collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            return Err(Error::InvalidParameter("empty reward table".into()));
        }
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        let sigma = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        Ok(NormalizationStats { mu, sigma })
    }

    pub fn raw(&self, x: &[Token]) -> Result<f64> {
        self.scores.get(x).copied().ok_or_else(|| Error::MissingSequence(format!("{x:?}")))
    }

    /// `beta (phi(x) - mu) / sigma`.
    pub fn normalize_reward(&self, x: &[Token]) -> Result<f64> {
        Ok(self.beta * self.standardized(x)?)
    }

    fn standardized(&self, x: &[Token]) -> Result<f64> {
        Ok((self.raw(x)? - self.stats.mu) / self.stats.sigma)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Fails with the first terminal of `space` missing from the table.
    pub fn check_covers(&self, space: &SequenceSpace) -> Result<()> {
        for x in space.enumerate_terminals()? {
            if !self.scores.contains_key(&x) {
                return Err(Error::MissingSequence(space.render(&x)));
            }
        }
        Ok(())
    }
}

impl RewardModel for RewardTable {
    fn score(&self, x: &[Token]) -> Result<f64> {
        self.standardized(x)
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

/// Greedy selection of up to `k` candidates, highest reward first (ties by
/// object order), keeping a candidate only if it is farther than `delta` from
/// every one already kept. Identical objects are collapsed first.
pub fn greedy_diverse_topk<T, F>(candidates: &[(T, f64)], k: usize, delta: f64, metric: F) -> Vec<(T, f64)>
where
    T: Ord + Clone,
    F: Fn(&T, &T) -> f64,
{
    let mut unique: BTreeMap<&T, f64> = BTreeMap::new();
    for (x, r) in candidates {
        unique.entry(x).and_modify(|v| *v = v.max(*r)).or_insert(*r);
    }
    let mut order: Vec<(&T, f64)> = unique.into_iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut selected: Vec<(T, f64)> = Vec::new();
    for (x, r) in order {
        if selected.len() >= k {
            break;
        }
        if selected.iter().all(|(s, _)| metric(s, x) > delta) {
            selected.push((x.clone(), r));
        }
    }
    selected
}

/// Default found-radius for modes.
pub const DEFAULT_FOUND_RADIUS: usize = 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub modes_found: usize,
    pub avg_min_distance: f64,
    pub min_distances: Vec<usize>,
}

/// Per-mode closest-sample distance (in bits). With no samples every distance
/// is `n`.
pub fn mode_metrics(task: &BitSequenceTask, samples: &[Vec<Token>], found_radius: usize) -> ModeMetrics {
    let sample_bits: Vec<Vec<u8>> = samples.iter().map(|s| task.bits(s)).collect();
    mode_metrics_bits(task, &sample_bits, found_radius)
}

pub fn mode_metrics_bits(task: &BitSequenceTask, samples: &[Vec<u8>], found_radius: usize) -> ModeMetrics {
    let min_distances: Vec<usize> = task
        .modes
        .iter()
        .map(|m| samples.iter().map(|s| levenshtein(s, m)).min().unwrap_or(task.n))
        .collect();
    let modes_found = min_distances.iter().filter(|&&d| d <= found_radius).count();
    let avg = min_distances.iter().sum::<usize>() as f64 / min_distances.len() as f64;
    ModeMetrics { modes_found, avg_min_distance: avg, min_distances }
}

/// Running per-mode minimum distance over a stream of samples.
#[derive(Debug, Clone)]
pub struct ModeTracker {
    min_distances: Vec<usize>,
}

impl ModeTracker {
    pub fn new(task: &BitSequenceTask) -> Self {
        ModeTracker { min_distances: vec![task.n; task.modes.len()] }
    }

    pub fn observe(&mut self, task: &BitSequenceTask, x: &[Token]) {
        let bits = task.bits(x);
        for (best, m) in self.min_distances.iter_mut().zip(&task.modes) {
            if *best > 0 {
                *best = (*best).min(levenshtein(&bits, m));
            }
        }
    }

    pub fn metrics(&self, found_radius: usize) -> ModeMetrics {
        let modes_found = self.min_distances.iter().filter(|&&d| d <= found_radius).count();
        let avg = self.min_distances.iter().sum::<usize>() as f64 / self.min_distances.len() as f64;
        ModeMetrics { modes_found, avg_min_distance: avg, min_distances: self.min_distances.clone() }
    }
}

pub const DEFAULT_TEMPERATURES: [f64; 10] = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub temperatures: Vec<f64>,
    pub samples_per_temperature: usize,
    pub top_k: usize,
    /// Separation radius; `None` uses `0.25 * (min_len + max_len) / 2`.
    pub delta: Option<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            samples_per_temperature: 512,
            top_k: 100,
            delta: None,
        }
    }
}

impl EvalProtocol {
    pub fn delta_rule(min_len: usize, max_len: usize) -> f64 {
        0.25 * (min_len + max_len) as f64 / 2.0
    }

    pub fn resolved_delta(&self, min_len: usize, max_len: usize) -> f64 {
        self.delta.unwrap_or_else(|| Self::delta_rule(min_len, max_len))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedObject {
    pub seq: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSummary {
    pub temperature: f64,
    pub samples: usize,
    pub mean_reward: f64,
    pub max_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_mode_reward: f64,
    pub k_selected: usize,
    pub objects: Vec<SelectedObject>,
    #[serde(skip)]
    pub selected: Vec<Vec<Token>>,
    #[serde(skip)]
    pub pool: Vec<Vec<Token>>,
    #[serde(skip)]
    pub per_temperature: Vec<TemperatureSummary>,
}

/// Samples from `softmax_{(q alpha + omega) t}(Q)` for every `t` in the
/// protocol, pools the samples and keeps the greedy diverse top-k. Rewards
/// reported are the model's scores (before `beta` scaling). `metric` measures
/// distance between terminal objects.
pub fn evaluate_sampler<M, Q, F>(
    space: &SequenceSpace,
    reward: &M,
    q: &Q,
    params: &GmParams,
    protocol: &EvalProtocol,
    delta: f64,
    metric: F,
    seed: u64,
) -> Result<EvalReport>
where
    M: RewardModel + ?Sized,
    Q: QValues,
    F: Fn(&Vec<Token>, &Vec<Token>) -> f64,
{
    let mut pool: Vec<(Vec<Token>, f64)> = Vec::new();
    let mut per_temperature = Vec::with_capacity(protocol.temperatures.len());
    let mut first_stream = 0u64;
    for &t in &protocol.temperatures {
        let policy = policy_from_q(q, params, t)?;
        let batch = rollout_batch(space, reward, &policy, seed, first_stream, protocol.samples_per_temperature)?;
        first_stream += protocol.samples_per_temperature as u64;
        let scores: Vec<f64> = batch.iter().map(|tr| reward.score(&tr.terminal_object)).collect::<Result<_>>()?;
        per_temperature.push(TemperatureSummary {
            temperature: t,
            samples: batch.len(),
            mean_reward: if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 },
            max_reward: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        pool.extend(batch.into_iter().map(|tr| tr.terminal_object).zip(scores));
    }
    let selected = greedy_diverse_topk(&pool, protocol.top_k, delta, metric);
    let mean_mode_reward = if selected.is_empty() {
        0.0
    } else {
        selected.iter().map(|(_, r)| r).sum::<f64>() / selected.len() as f64
    };
    Ok(EvalReport {
        mean_mode_reward,
        k_selected: selected.len(),
        objects: selected
            .iter()
            .map(|(x, r)| SelectedObject { seq: space.render(x), reward: *r })
            .collect(),
        selected: selected.into_iter().map(|(x, _)| x).collect(),
        pool: pool.into_iter().map(|(x, _)| x).collect(),
        per_temperature,
    })
}
