//! Trajectory training of a tabular Q-function with the variance (VarGrad)
//! form of the trajectory-consistency constraint.
//!
//! For each sampled trajectory the statistic `sum_i g(Q_{s_i}, a_i) - r(x)`
//! is computed; the loss is its population variance over the batch. The
//! unknown root value cancels in the variance, so it is never learned.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::output::fmt_float;
use crate::regularizers::{accumulate_consistency_gradient, gm_consistency_term, softmax, GmParams};
use crate::solver::QValues;
use crate::space::{rollout_batch, Policy, RewardModel, SequenceSpace, Token, Trajectory};

/// Lazily initialised table of learnable Q-values. Rows keep a stable id in
/// insertion order.
#[derive(Debug, Clone)]
pub struct QFunction {
    pub init_value: f64,
    index: HashMap<Vec<Token>, usize>,
    rows: Vec<(Vec<Token>, Vec<f64>)>,
}

impl Default for QFunction {
    fn default() -> Self {
        QFunction::new(0.0)
    }
}

impl PartialEq for QFunction {
    fn eq(&self, other: &Self) -> bool {
        self.init_value == other.init_value && self.sorted_rows() == other.sorted_rows()
    }
}

impl QFunction {
    pub fn new(init_value: f64) -> Self {
        QFunction { init_value, index: HashMap::new(), rows: Vec::new() }
    }

    pub fn get(&self, prefix: &[Token]) -> Option<&[f64]> {
        self.index.get(prefix).map(|&i| self.rows[i].1.as_slice())
    }

    fn entry_id(&mut self, prefix: &[Token], arity: usize) -> usize {
        if let Some(&i) = self.index.get(prefix) {
            return i;
        }
        let i = self.rows.len();
        self.rows.push((prefix.to_vec(), vec![self.init_value; arity]));
        self.index.insert(prefix.to_vec(), i);
        i
    }

    /// Mutable row for `prefix`, created at `init_value` if missing.
    pub fn entry(&mut self, prefix: &[Token], arity: usize) -> &mut Vec<f64> {
        let i = self.entry_id(prefix, arity);
        &mut self.rows[i].1
    }

    pub fn set(&mut self, prefix: Vec<Token>, values: Vec<f64>) {
        let i = self.entry_id(&prefix, values.len());
        self.rows[i].1 = values;
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows ordered by prefix.
    pub fn sorted_rows(&self) -> Vec<(&Vec<Token>, &Vec<f64>)> {
        let mut out: Vec<_> = self.rows.iter().map(|(k, v)| (k, v)).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Snapshot as `state<TAB>action<TAB>value` rows, states rendered with the
    /// space's alphabet and actions as canonical indices (`STOP` = alphabet size).
    pub fn write_tsv<W: Write>(&self, space: &SequenceSpace, mut w: W) -> Result<()> {
        writeln!(w, "# state\taction\tvalue")?;
        for (prefix, row) in self.sorted_rows() {
            for (pos, v) in row.iter().enumerate() {
                let action = space.action_at(prefix.len(), pos)?;
                writeln!(w, "{}\t{}\t{}", space.render(prefix), action, fmt_float(*v))?;
            }
        }
        Ok(())
    }

    pub fn read_tsv(space: &SequenceSpace, text: &str) -> Result<Self> {
        let mut q = QFunction::new(0.0);
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("malformed snapshot line {}: {line:?}", lineno + 1));
            let mut parts = line.split('\t');
            let (state, action, value) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(a), Some(v), None) => (s, a, v),
                _ => return Err(bad()),
            };
            let prefix = if state.is_empty() { Vec::new() } else { space.parse(state)? };
            let action: usize = action.parse().map_err(|_| bad())?;
            let value: f64 = value.parse().map_err(|_| bad())?;
            let arity = space.num_actions(prefix.len());
            let pos = space.action_position(prefix.len(), action)?;
            q.entry(&prefix, arity)[pos] = value;
        }
        Ok(q)
    }
}

impl QValues for QFunction {
    fn q_values(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        let arity = space.num_actions(prefix.len());
        match self.get(prefix) {
            Some(row) if row.len() == arity => Ok(row.to_vec()),
            Some(row) => Err(Error::ActionOutOfRange { index: row.len(), arity }),
            None => Ok(vec![self.init_value; arity]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub params: GmParams,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub explore_eps: f64,
    pub grad_clip: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            params: GmParams::gfn(1.0),
            batch_size: 16,
            learning_rate: 1e-2,
            steps: 1000,
            explore_eps: 0.01,
            grad_clip: 10.0,
            adam_eps: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "batch_size must be >= 2 for a variance, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.explore_eps) {
            return Err(Error::InvalidParameter(format!("explore_eps must lie in [0, 1), got {}", self.explore_eps)));
        }
        if !(self.grad_clip > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidParameter("grad_clip and adam_eps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,mean_reward,samples")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.step, fmt_float(r.loss), fmt_float(r.mean_reward), r.samples)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarGradLoss {
    pub loss: f64,
    /// `sum_i g(Q_{s_i}, a_i) - r(x)` per trajectory, in batch order.
    pub statistics: Vec<f64>,
}

/// Partial derivatives per state, over its canonical legal-action list.
pub type Gradient = BTreeMap<Vec<Token>, Vec<f64>>;

fn trajectory_statistic<Q: QValues + ?Sized>(
    space: &SequenceSpace,
    traj: &Trajectory,
    q: &Q,
    params: &GmParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (state, action) in &traj.steps {
        let len = state.len();
        let pos = space.action_position(len, *action)?;
        if space.num_actions(len) > 1 {
            total += gm_consistency_term(&q.q_values(space, &state.prefix)?, pos, params)?;
        }
    }
    Ok(total - traj.reward)
}

pub fn vargrad_loss<Q: QValues + ?Sized>(
    space: &SequenceSpace,
    batch: &[Trajectory],
    q: &Q,
    params: &GmParams,
) -> Result<VarGradLoss> {
    if batch.len() < 2 {
        return Err(Error::VarianceUndefined(batch.len()));
    }
    let statistics: Vec<f64> = batch
        .iter()
        .map(|t| trajectory_statistic(space, t, q, params))
        .collect::<Result<_>>()?;
    let n = statistics.len() as f64;
    let mean = statistics.iter().sum::<f64>() / n;
    let loss = statistics.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(VarGradLoss { loss, statistics })
}

/// Exact gradient of [`vargrad_loss`] with respect to the Q entries touched by
/// the batch. Single-action states carry no gradient and are omitted.
pub fn vargrad_gradient<Q: QValues + ?Sized>(
    space: &SequenceSpace,
    batch: &[Trajectory],
    q: &Q,
    params: &GmParams,
) -> Result<Gradient> {
    let loss = vargrad_loss(space, batch, q, params)?;
    gradient_from_statistics(space, batch, q, params, &loss.statistics)
}

fn gradient_from_statistics<Q: QValues + ?Sized>(
    space: &SequenceSpace,
    batch: &[Trajectory],
    q: &Q,
    params: &GmParams,
    statistics: &[f64],
) -> Result<Gradient> {
    let n = statistics.len() as f64;
    let mean = statistics.iter().sum::<f64>() / n;
    let mut grad = Gradient::new();
    for (traj, &stat) in batch.iter().zip(statistics) {
        let weight = 2.0 * (stat - mean) / n;
        for (state, action) in &traj.steps {
            let len = state.len();
            let arity = space.num_actions(len);
            if arity < 2 {
                continue;
            }
            let pos = space.action_position(len, *action)?;
            let qv = q.q_values(space, &state.prefix)?;
            let row = grad.entry(state.prefix.clone()).or_insert_with(|| vec![0.0; arity]);
            accumulate_consistency_gradient(&qv, pos, params, weight, row)?;
        }
    }
    Ok(grad)
}

/// Samples from `softmax_{tau}(Q_s)`.
pub struct SoftmaxPolicy<Q> {
    q: Q,
    tau: f64,
}

impl<Q: QValues> Policy for SoftmaxPolicy<Q> {
    fn action_probs(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        softmax(&self.q.q_values(space, prefix)?, self.tau)
    }
}

impl<Q> SoftmaxPolicy<Q> {
    pub fn temperature(&self) -> f64 {
        self.tau
    }
}

/// The optimal-policy form `softmax_{(q alpha + omega) t}(Q_s)`; `t = 1` is the
/// training policy without exploration.
pub fn policy_from_q<Q: QValues>(q: Q, params: &GmParams, t: f64) -> Result<SoftmaxPolicy<Q>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature modifier must be > 0, got {t}")));
    }
    Ok(SoftmaxPolicy { q, tau: params.policy_temperature() * t })
}

/// `(1 - eps) * inner + eps * uniform`.
pub struct ExplorationPolicy<P> {
    inner: P,
    eps: f64,
}

impl<P> ExplorationPolicy<P> {
    pub fn new(inner: P, eps: f64) -> Self {
        ExplorationPolicy { inner, eps }
    }
}

impl<P: Policy> Policy for ExplorationPolicy<P> {
    fn action_probs(&self, space: &SequenceSpace, prefix: &[Token]) -> Result<Vec<f64>> {
        let mut p = self.inner.action_probs(space, prefix)?;
        let u = self.eps / p.len() as f64;
        for x in p.iter_mut() {
            *x = (1.0 - self.eps) * *x + u;
        }
        Ok(p)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;

#[derive(Default)]
struct Adam {
    step: i32,
    /// Row ids of every parameter row seen so far, in first-seen order.
    active: Vec<usize>,
    /// First and second moments, indexed by Q row id.
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    /// One update over every parameter seen so far; parameters missing from
    /// `grad` get a zero gradient, as a dense optimiser would.
    fn update(&mut self, q: &mut QFunction, grad: &Gradient, lr: f64, eps: f64) {
        self.step += 1;
        let mut current: HashMap<usize, &[f64]> = HashMap::with_capacity(grad.len());
        for (prefix, g) in grad {
            let id = q.entry_id(prefix, g.len());
            if id >= self.moments.len() {
                self.moments.resize(id + 1, None);
            }
            if self.moments[id].is_none() {
                self.moments[id] = Some((vec![0.0; g.len()], vec![0.0; g.len()]));
                self.active.push(id);
            }
            current.insert(id, g);
        }
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for &id in &self.active {
            let (m, v) = self.moments[id].as_mut().expect("active rows have moments");
            let g = current.get(&id);
            let row = &mut q.rows[id].1;
            for i in 0..m.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                row[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

fn clip_global_norm(grad: &mut Gradient, max_norm: f64) {
    let norm = grad.values().flat_map(|r| r.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for x in grad.values_mut().flat_map(|r| r.iter_mut()) {
            *x *= scale;
        }
    }
}

pub fn train<M: RewardModel + ?Sized>(
    space: &SequenceSpace,
    reward: &M,
    config: &TrainConfig,
) -> Result<(QFunction, TrainLog)> {
    train_with_observer(space, reward, config, |_, _| {})
}

/// Like [`train`], calling `observe(step, batch)` on every sampled batch.
pub fn train_with_observer<M, F>(
    space: &SequenceSpace,
    reward: &M,
    config: &TrainConfig,
    mut observe: F,
) -> Result<(QFunction, TrainLog)>
where
    M: RewardModel + ?Sized,
    F: FnMut(usize, &[Trajectory]),
{
    config.validate()?;
    let params = &config.params;
    let mut q = QFunction::new(0.0);
    let mut adam = Adam::default();
    let mut log = TrainLog::default();

    for step in 0..config.steps {
        let batch = {
            let behaviour = ExplorationPolicy::new(policy_from_q(&q, params, 1.0)?, config.explore_eps);
            let first = (step * config.batch_size) as u64;
            rollout_batch(space, reward, &behaviour, config.seed, first, config.batch_size)?
        };
        observe(step, &batch);

        let loss = vargrad_loss(space, &batch, &q, params)?;
        if !loss.loss.is_finite() {
            let (i, _) = loss
                .statistics
                .iter()
                .enumerate()
                .find(|(_, s)| !s.is_finite())
                .unwrap_or((0, &f64::NAN));
            let t = &batch[i];
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {} on trajectory to {:?} with reward {}",
                    loss.loss,
                    space.render(&t.terminal_object),
                    t.reward
                ),
            });
        }
        let mut grad = gradient_from_statistics(space, &batch, &q, params, &loss.statistics)?;
        clip_global_norm(&mut grad, config.grad_clip);
        adam.update(&mut q, &grad, config.learning_rate, config.adam_eps);

        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
        log.records.push(TrainRecord {
            step,
            loss: loss.loss,
            mean_reward,
            samples: (step + 1) * config.batch_size,
        });
    }
    Ok((q, log))
}
