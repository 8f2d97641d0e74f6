//! General mellowmax regularizer, its convex conjugates and the closed-form
//! Bellman backup and policy it induces.
//!
//! With `d = softmax_alpha(Q)` the backup is
//! `(1/omega) * log sum_a d(a)^q exp(omega * Q(a))`, evaluated here as
//! `(LSE(tau*Q) - q*LSE(alpha*Q)) / omega` with `tau = q*alpha + omega`.
//! The optimal policy is `softmax_tau(Q)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmParams {
    pub q: f64,
    pub alpha: f64,
    pub omega: f64,
    pub beta: f64,
}

impl GmParams {
    pub fn new(q: f64, alpha: f64, omega: f64, beta: f64) -> Result<Self> {
        let p = GmParams { q, alpha, omega, beta };
        p.validate()?;
        Ok(p)
    }

    /// Shannon-entropy (soft Bellman) setting whose optimal sampler is
    /// proportional to `exp(beta * score)`.
    pub fn gfn(beta: f64) -> Self {
        GmParams { q: 0.0, alpha: 0.0, omega: 1.0, beta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidParameter(format!("q must lie in [0, 1], got {}", self.q)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be finite, got {}", self.alpha)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidParameter(format!("omega must be > 0, got {}", self.omega)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Inverse temperature of the optimal policy, `q*alpha + omega`.
    pub fn policy_temperature(&self) -> f64 {
        self.q * self.alpha + self.omega
    }

    pub fn is_gfn(&self) -> bool {
        self.q == 0.0 && self.omega == 1.0
    }
}

fn check_nan(v: &[f64]) -> Result<()> {
    if v.iter().any(|x| x.is_nan()) {
        Err(Error::NaN)
    } else {
        Ok(())
    }
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `LSE(tau * v)`.
pub fn scaled_logsumexp(v: &[f64], tau: f64) -> f64 {
    let scaled: Vec<f64> = v.iter().map(|x| tau * x).collect();
    logsumexp(&scaled)
}

pub fn softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_nan(v)?;
    if tau.is_nan() {
        return Err(Error::NaN);
    }
    let scaled: Vec<f64> = v.iter().map(|x| tau * x).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// `log softmax_tau(v)[a]`, computed without forming the softmax.
pub fn log_softmax_at(v: &[f64], tau: f64, a: usize) -> f64 {
    if tau == 0.0 {
        return -(v.len() as f64).ln();
    }
    tau * v[a] - scaled_logsumexp(v, tau)
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// `(1/omega) [q KL(pi, d) - (1 - q) H(pi)]`, with `0 log 0 = 0`.
pub fn omega_gm(pi: &[f64], d: &[f64], params: &GmParams) -> Result<f64> {
    check_nan(pi)?;
    check_nan(d)?;
    if pi.len() != d.len() {
        return Err(Error::InvalidParameter(format!(
            "policy has {} entries but reference has {}",
            pi.len(),
            d.len()
        )));
    }
    let mut neg_entropy = 0.0;
    let mut kl = 0.0;
    for (a, (&p, &r)) in pi.iter().zip(d).enumerate() {
        neg_entropy += xlogy(p, p);
        if params.q > 0.0 && p > 0.0 {
            if r <= 0.0 {
                return Err(Error::KlUndefined { action: a });
            }
            kl += p * (p / r).ln();
        }
    }
    Ok((params.q * kl + (1.0 - params.q) * neg_entropy) / params.omega)
}

/// Split of the regularizer into a KL to the tilted reference and its log
/// normaliser: `omega_gm = (kl_term - log_zq) / omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedDecomposition {
    pub kl_term: f64,
    pub log_zq: f64,
}

impl TiltedDecomposition {
    pub fn combine(&self, omega: f64) -> f64 {
        (self.kl_term - self.log_zq) / omega
    }
}

/// `d(a)^q` with `0^0 = 1`.
fn tilt(d: f64, q: f64) -> f64 {
    if q == 0.0 {
        1.0
    } else {
        d.powf(q)
    }
}

pub fn tilted_decomposition(pi: &[f64], d: &[f64], params: &GmParams) -> Result<TiltedDecomposition> {
    // Surfaces the same domain errors as omega_gm.
    omega_gm(pi, d, params)?;
    let weights: Vec<f64> = d.iter().map(|&x| tilt(x, params.q)).collect();
    let zq: f64 = weights.iter().sum();
    let mut kl_term = 0.0;
    for (a, (&p, &w)) in pi.iter().zip(&weights).enumerate() {
        if p > 0.0 {
            if w <= 0.0 {
                return Err(Error::KlUndefined { action: a });
            }
            kl_term += p * (p * zq / w).ln();
        }
    }
    Ok(TiltedDecomposition { kl_term, log_zq: zq.ln() })
}

/// Regularized optimal value `g*(Q)` with `d = softmax_alpha(Q)`.
pub fn gm_backup(q_values: &[f64], params: &GmParams) -> Result<f64> {
    check_nan(q_values)?;
    let tau = params.policy_temperature();
    let mut lse = scaled_logsumexp(q_values, tau);
    if params.q != 0.0 {
        lse -= params.q * scaled_logsumexp(q_values, params.alpha);
    }
    Ok(lse / params.omega)
}

pub fn gm_optimal_policy(q_values: &[f64], params: &GmParams) -> Result<Vec<f64>> {
    softmax(q_values, params.policy_temperature())
}

/// Per-transition consistency term
/// `g(Q, a) = (1/omega)[log softmax_tau(Q)[a] - q log softmax_alpha(Q)[a]]`,
/// equal to `Q[a] - g*(Q)`.
pub fn gm_consistency_term(q_values: &[f64], a: usize, params: &GmParams) -> Result<f64> {
    if a >= q_values.len() {
        return Err(Error::ActionOutOfRange { index: a, arity: q_values.len() });
    }
    check_nan(q_values)?;
    let tau = params.policy_temperature();
    let mut g = log_softmax_at(q_values, tau, a);
    if params.q != 0.0 {
        g -= params.q * log_softmax_at(q_values, params.alpha, a);
    }
    Ok(g / params.omega)
}

/// Gradient of `gm_consistency_term(Q, a)` with respect to `Q`, accumulated
/// into `out` with weight `scale`.
pub fn accumulate_consistency_gradient(
    q_values: &[f64],
    a: usize,
    params: &GmParams,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    let tau = params.policy_temperature();
    let pi_tau = softmax(q_values, tau)?;
    let pi_alpha = if params.q != 0.0 { Some(softmax(q_values, params.alpha)?) } else { None };
    for b in 0..q_values.len() {
        let hit = if a == b { 1.0 } else { 0.0 };
        let mut d = tau * (hit - pi_tau[b]);
        if let Some(pa) = &pi_alpha {
            d -= params.q * params.alpha * (hit - pa[b]);
        }
        out[b] += scale * d / params.omega;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    NegShannon,
    Kl,
    Gm,
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg-shannon" => Ok(RegularizerKind::NegShannon),
            "kl" => Ok(RegularizerKind::Kl),
            "gm" => Ok(RegularizerKind::Gm),
            other => Err(Error::InvalidParameter(format!("unknown regularizer kind {other:?}"))),
        }
    }
}

/// Convex conjugates of the supported regularizers at `arg`:
/// `LSE(arg)`, `log sum d e^arg`, and `(1/omega) log sum d^q e^(omega arg)`.
pub fn conjugate(kind: RegularizerKind, arg: &[f64], d: &[f64], params: &GmParams) -> Result<f64> {
    check_nan(arg)?;
    match kind {
        RegularizerKind::NegShannon => Ok(logsumexp(arg)),
        RegularizerKind::Kl => weighted_logsumexp(arg, d, 1.0, 1.0),
        RegularizerKind::Gm => Ok(weighted_logsumexp(arg, d, params.q, params.omega)? / params.omega),
    }
}

/// `log sum_a d(a)^q exp(scale * arg(a))`.
pub fn weighted_logsumexp(arg: &[f64], d: &[f64], q: f64, scale: f64) -> Result<f64> {
    check_nan(d)?;
    if arg.len() != d.len() {
        return Err(Error::InvalidParameter(format!(
            "argument has {} entries but reference has {}",
            arg.len(),
            d.len()
        )));
    }
    let terms: Vec<f64> = arg
        .iter()
        .zip(d)
        .map(|(&x, &w)| {
            let t = tilt(w, q);
            if t > 0.0 {
                scale * x + t.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(logsumexp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(q: f64, alpha: f64, omega: f64) -> GmParams {
        GmParams::new(q, alpha, omega, 1.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1.0, 0.0], 2.0).unwrap();
        assert!(close(s[0], 0.880_797_077_977_882_4, 1e-12));
        assert!(close(s[1], 0.119_202_922_022_117_56, 1e-12));
        let s = softmax(&[1000.0, 999.0], 1.0).unwrap();
        assert!(close(s[0], 0.731_058_578_630_004_9, 1e-12));
        assert!(close(s[1], 0.268_941_421_369_995_1, 1e-12));
        assert_eq!(softmax(&[3.0, -2.0, 7.0], 0.0).unwrap(), vec![1.0 / 3.0; 3]);
        assert!(matches!(softmax(&[f64::NAN, 0.0], 1.0), Err(Error::NaN)));
    }

    #[test]
    fn omega_gm_examples() {
        let u = [0.5, 0.5];
        assert_eq!(omega_gm(&u, &u, &p(1.0, 0.0, 1.0)).unwrap(), 0.0);
        let v = omega_gm(&u, &[0.9, 0.1], &p(0.0, 0.0, 1.0)).unwrap();
        assert!(close(v, -std::f64::consts::LN_2, 1e-15));
        let v = omega_gm(&[1.0, 0.0], &u, &p(0.5, 0.0, 2.0)).unwrap();
        assert!(close(v, 0.173_286_795_139_986_33, 1e-15));
    }

    #[test]
    fn kl_undefined_on_missing_support() {
        let err = omega_gm(&[0.5, 0.5], &[1.0, 0.0], &p(0.3, 0.0, 1.0)).unwrap_err();
        assert!(err.to_string().starts_with("KL undefined"));
        // Pure entropy never looks at d.
        assert!(omega_gm(&[0.5, 0.5], &[1.0, 0.0], &p(0.0, 0.0, 1.0)).is_ok());
    }

    #[test]
    fn tilted_decomposition_examples() {
        let u = [0.5, 0.5];
        let t = tilted_decomposition(&[0.2, 0.8], &u, &p(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(t.log_zq, 0.0);
        let t = tilted_decomposition(&[0.2, 0.8], &u, &p(0.0, 0.0, 1.0)).unwrap();
        assert!(close(t.log_zq, std::f64::consts::LN_2, 1e-15));
        let params = p(0.4, 0.0, 3.0);
        let t = tilted_decomposition(&[0.2, 0.8], &[0.7, 0.3], &params).unwrap();
        let direct = omega_gm(&[0.2, 0.8], &[0.7, 0.3], &params).unwrap();
        assert!(close(t.combine(params.omega), direct, 1e-12));
    }

    #[test]
    fn backup_examples() {
        assert_eq!(gm_backup(&[0.0, 0.0], &p(1.0, 0.0, 5.0)).unwrap(), 0.0);
        let v = gm_backup(&[1.0, 0.0], &p(0.0, 0.0, 1.0)).unwrap();
        assert!(close(v, 1.313_261_687_518_222_8, 1e-12));
        // log(e^2 + 1) - log(e + 1)
        let v = gm_backup(&[1.0, 0.0], &p(1.0, 1.0, 1.0)).unwrap();
        assert!(close(v, 0.813_666_323_524_749_7, 1e-12));
    }

    #[test]
    fn optimal_policy_examples() {
        let pi = gm_optimal_policy(&[4.2, 4.2], &p(0.6, 1.5, 2.0)).unwrap();
        assert_eq!(pi, vec![0.5, 0.5]);
        let pi = gm_optimal_policy(&[1.0, 0.0], &p(0.0, 0.0, 1.0)).unwrap();
        assert!(close(pi[0], 0.731_058_578_630_004_9, 1e-12));
        let pi = gm_optimal_policy(&[1.0, 0.0], &p(1.0, 1.0, 1.0)).unwrap();
        assert!(close(pi[0], 0.880_797_077_977_882_4, 1e-12));
    }

    #[test]
    fn consistency_examples() {
        let g = gm_consistency_term(&[0.0, 0.0], 0, &p(0.0, 0.0, 1.0)).unwrap();
        assert!(close(g, -std::f64::consts::LN_2, 1e-15));
        let g = gm_consistency_term(&[1.0, 0.0], 0, &p(1.0, 1.0, 1.0)).unwrap();
        assert!(close(g, 0.186_333_676_475_250_34, 1e-12));
        assert!(matches!(
            gm_consistency_term(&[1.0, 0.0], 2, &p(1.0, 1.0, 1.0)),
            Err(Error::ActionOutOfRange { index: 2, arity: 2 })
        ));
    }

    #[test]
    fn conjugate_examples() {
        let params = p(0.0, 0.0, 1.0);
        let u = [0.5, 0.5];
        let v = conjugate(RegularizerKind::NegShannon, &[0.0, 0.0], &u, &params).unwrap();
        assert!(close(v, std::f64::consts::LN_2, 1e-15));
        assert_eq!(conjugate(RegularizerKind::Kl, &[0.0, 0.0], &u, &params).unwrap(), 0.0);
        let arg = [0.3, -1.2, 2.5];
        let d = [0.2, 0.3, 0.5];
        let gm = conjugate(RegularizerKind::Gm, &arg, &d, &params).unwrap();
        let ns = conjugate(RegularizerKind::NegShannon, &arg, &d, &params).unwrap();
        assert!(close(gm, ns, 1e-12));
    }

    #[test]
    fn special_case_reductions() {
        let q = [0.4, -1.3, 2.2, 0.0];
        let omega = 3.0;
        let soft = gm_backup(&q, &p(0.0, 7.0, omega)).unwrap();
        assert!(close(soft, scaled_logsumexp(&q, omega) / omega, 1e-12));
        let mellow = gm_backup(&q, &p(1.0, 0.0, omega)).unwrap();
        let mean_exp: f64 = q.iter().map(|x| (omega * x).exp()).sum::<f64>() / q.len() as f64;
        assert!(close(mellow, mean_exp.ln() / omega, 1e-12));
    }

    #[test]
    fn large_values_stay_finite() {
        let params = p(0.7, 2.0, 4.0);
        let q = [800.0, 799.0, -5.0];
        assert!(gm_backup(&q, &params).unwrap().is_finite());
        let g = gm_consistency_term(&q, 2, &params).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn params_validation() {
        assert!(GmParams::new(1.1, 0.0, 1.0, 1.0).is_err());
        assert!(GmParams::new(0.5, 0.0, 0.0, 1.0).is_err());
        assert!(GmParams::new(0.5, 0.0, 1.0, -1.0).is_err());
        assert!(GmParams::gfn(2.0).is_gfn());
    }
}
