//! Reward-uncertainty sets dual to the regularizers.
//!
//! For a regularizer with conjugate `(1/omega) WLSE_{d^q}(omega .)`, the set of
//! admissible reward perturbations is `r0 + {delta : sum_a d(a)^q exp(-omega delta(a)) <= 1}`.
//! Negative Shannon entropy is the `q = 0` member (no reference needed) and
//! the KL divergence the `q = 1` member.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::output::fmt_float;
use crate::regularizers::RegularizerKind;

/// Margin tolerance separating `Inside`/`Outside` from `Boundary`.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySetSpec {
    pub kind: RegularizerKind,
    /// Reference distribution; ignored for `NegShannon`.
    pub d: Vec<f64>,
    /// Interpolation weight; only read for `Gm`.
    pub q: f64,
    pub omega: f64,
    /// Base reward, zero when empty.
    pub r0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Inside,
    Boundary,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub region: Region,
    /// `sum d^q exp(-omega delta) - 1`; non-positive inside the set.
    pub margin: f64,
}

impl Membership {
    fn from_margin(margin: f64) -> Self {
        let region = if margin.abs() <= BOUNDARY_TOL {
            Region::Boundary
        } else if margin < 0.0 {
            Region::Inside
        } else {
            Region::Outside
        };
        Membership { region, margin }
    }
}

impl UncertaintySetSpec {
    pub fn neg_shannon(omega: f64, actions: usize) -> Self {
        UncertaintySetSpec {
            kind: RegularizerKind::NegShannon,
            d: vec![1.0 / actions as f64; actions],
            q: 0.0,
            omega,
            r0: Vec::new(),
        }
    }

    pub fn gm(q: f64, omega: f64, d: Vec<f64>) -> Self {
        UncertaintySetSpec { kind: RegularizerKind::Gm, d, q, omega, r0: Vec::new() }
    }

    pub fn kl(omega: f64, d: Vec<f64>) -> Self {
        UncertaintySetSpec { kind: RegularizerKind::Kl, d, q: 1.0, omega, r0: Vec::new() }
    }

    pub fn with_base_reward(mut self, r0: Vec<f64>) -> Self {
        self.r0 = r0;
        self
    }

    pub fn effective_q(&self) -> f64 {
        match self.kind {
            RegularizerKind::NegShannon => 0.0,
            RegularizerKind::Kl => 1.0,
            RegularizerKind::Gm => self.q,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidParameter(format!("omega must be > 0, got {}", self.omega)));
        }
        if self.d.is_empty() {
            return Err(Error::InvalidParameter("the set needs at least one action".into()));
        }
        if self.kind == RegularizerKind::Gm && !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidParameter(format!("q must lie in [0, 1], got {}", self.q)));
        }
        if self.kind != RegularizerKind::NegShannon {
            let total: f64 = self.d.iter().sum();
            if self.d.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("d is not a distribution: {:?}", self.d)));
            }
        }
        if !self.r0.is_empty() && self.r0.len() != self.d.len() {
            return Err(Error::InvalidParameter(format!(
                "r0 has {} entries but the set has {} actions",
                self.r0.len(),
                self.d.len()
            )));
        }
        Ok(())
    }

    fn weight(&self, a: usize) -> f64 {
        let q = self.effective_q();
        if q == 0.0 {
            1.0
        } else {
            self.d[a].powf(q)
        }
    }

    fn base(&self, a: usize) -> f64 {
        self.r0.get(a).copied().unwrap_or(0.0)
    }

    /// Membership of the perturbation `delta` (relative to `r0`).
    pub fn membership_of_delta(&self, delta: &[f64]) -> Result<Membership> {
        self.validate()?;
        if delta.iter().any(|x| x.is_nan()) {
            return Err(Error::NaN);
        }
        if delta.len() != self.num_actions() {
            return Err(Error::InvalidParameter(format!(
                "perturbation has {} entries but the set has {} actions",
                delta.len(),
                self.num_actions()
            )));
        }
        let m: f64 = delta
            .iter()
            .enumerate()
            .map(|(a, &x)| {
                let w = self.weight(a);
                if w == 0.0 {
                    0.0
                } else {
                    w * (-self.omega * x).exp()
                }
            })
            .sum();
        Ok(Membership::from_margin(m - 1.0))
    }
}

pub fn membership(spec: &UncertaintySetSpec, r: &[f64]) -> Result<Membership> {
    let delta: Vec<f64> = r.iter().enumerate().map(|(a, &x)| x - spec.base(a)).collect();
    spec.membership_of_delta(&delta)
}

/// Membership in the `k`-fold Minkowski sum of the per-step set: `r` belongs
/// iff `(r - k r0) / k` is an admissible single-step perturbation.
pub fn minkowski_membership(spec: &UncertaintySetSpec, k: usize, r: &[f64]) -> Result<Membership> {
    if k < 1 {
        return Err(Error::InvalidParameter("Minkowski sum needs k >= 1".into()));
    }
    let kf = k as f64;
    let delta: Vec<f64> = r.iter().enumerate().map(|(a, &x)| (x - kf * spec.base(a)) / kf).collect();
    spec.membership_of_delta(&delta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub delta1: f64,
    pub delta2: f64,
    pub margin: f64,
}

/// Evenly spaced grid of `resolution` points per axis over `[lo, hi]`,
/// row-major in `delta1`. With `steps = k > 1` the margin is that of the
/// `k`-fold Minkowski sum at total perturbation `(delta1, delta2)`.
pub fn boundary_trace_2d(
    spec: &UncertaintySetSpec,
    resolution: usize,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<TraceRow>> {
    if spec.num_actions() != 2 {
        return Err(Error::TraceArity(spec.num_actions()));
    }
    if resolution < 2 || !(hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "need resolution >= 2 and lo < hi, got {resolution} over [{lo}, {hi}]"
        )));
    }
    let axis: Vec<f64> = (0..resolution)
        .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
        .collect();
    let k = steps as f64;
    let mut rows = Vec::with_capacity(resolution * resolution);
    for &d1 in &axis {
        for &d2 in &axis {
            let total = [d1 + k * spec.base(0), d2 + k * spec.base(1)];
            let m = minkowski_membership(spec, steps, &total)?;
            rows.push(TraceRow { delta1: d1, delta2: d2, margin: m.margin });
        }
    }
    Ok(rows)
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "delta1,delta2,margin")?;
    for r in rows {
        writeln!(w, "{},{},{}", fmt_float(r.delta1), fmt_float(r.delta2), fmt_float(r.margin))?;
    }
    Ok(())
}
