//! Numerical verification that softmax-of-negative-risk weighting never
//! does worse than uniform averaging over a prompt bank.
//!
//! For risks R_1..R_K and step scale η, the idealized one-step weights
//! are w_k = exp(-η R_k) / Σ_j exp(-η R_j) (a uniform offset inside the
//! softmax cancels). The claim is Σ_k w_k R_k ≤ (1/K) Σ_k R_k, strict as
//! soon as two risks differ. Its algebraic core is the Chebyshev-style
//! inequality Σ_k (exp(-η R_k) - mean_j exp(-η R_j)) R_k ≤ 0, which this
//! module evaluates directly; the Monte-Carlo sweep is the oracle for
//! both forms.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seeding::substream;

/// Equality decisions at f64.
pub const TOLERANCE: f64 = 1e-12;

/// Non-negative error risks of the K prompts plus the descent step scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskVector {
    pub risks: Vec<f64>,
    pub eta: f64,
}

impl RiskVector {
    pub fn new(risks: Vec<f64>, eta: f64) -> Result<Self> {
        if risks.len() < 2 {
            return Err(Error::invalid(format!("need K >= 2 risks, got {}", risks.len())));
        }
        if risks.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid(format!("risks must be finite and >= 0: {risks:?}")));
        }
        if !(eta > 0.0) {
            return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
        }
        Ok(RiskVector { risks, eta })
    }

    fn exp_terms(&self) -> Vec<f64> {
        // max-subtracted for stability; the shift cancels in every use
        let lo = self.risks.iter().cloned().fold(f64::INFINITY, f64::min);
        self.risks.iter().map(|r| (-self.eta * (r - lo)).exp()).collect()
    }
}

/// The idealized routed weights w_k = softmax(-η R)_k; sum to one.
pub fn routed_weights(rv: &RiskVector) -> Vec<f64> {
    let terms = rv.exp_terms();
    let sum: f64 = terms.iter().sum();
    terms.into_iter().map(|t| t / sum).collect()
}

/// Outcome of one inequality check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremCheck {
    /// Σ_k w_k R_k under the routed weights
    pub weighted: f64,
    /// (1/K) Σ_k R_k
    pub uniform: f64,
    /// weighted <= uniform + tolerance
    pub holds: bool,
    /// weighted < uniform - tolerance
    pub strict: bool,
}

/// Compare the routed weighted risk against the uniform average.
pub fn verify_theorem1(rv: &RiskVector) -> TheoremCheck {
    let weights = routed_weights(rv);
    let weighted: f64 = weights.iter().zip(&rv.risks).map(|(w, r)| w * r).sum();
    let uniform: f64 = rv.risks.iter().sum::<f64>() / rv.risks.len() as f64;
    TheoremCheck {
        weighted,
        uniform,
        holds: weighted <= uniform + TOLERANCE,
        strict: weighted < uniform - TOLERANCE,
    }
}

/// Evaluate the key inequality Σ_k (exp(-η R_k) - mean_j exp(-η R_j)) R_k
/// on the risks arranged as in the induction (minimum first, remainder
/// ascending). Returns the literal left side and whether it is ≤
/// tolerance.
pub fn verify_key_lemma(rv: &RiskVector) -> (f64, bool) {
    let mut risks = rv.risks.clone();
    risks.sort_by(|a, b| a.partial_cmp(b).expect("risks are finite"));
    let terms: Vec<f64> = risks.iter().map(|r| (-rv.eta * r).exp()).collect();
    let mean: f64 = terms.iter().sum::<f64>() / terms.len() as f64;
    let left: f64 = terms.iter().zip(&risks).map(|(t, r)| (t - mean) * r).sum();
    (left, left <= TOLERANCE)
}

/// Monte-Carlo verification report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepReport {
    pub draws: usize,
    /// cases where the inequality failed
    pub violations: usize,
    /// cases with max-min risk > 1e-9 that were not strict
    pub strictness_failures: usize,
    /// cases where the lemma sign disagreed with the theorem check
    pub lemma_disagreements: usize,
    /// largest weighted - uniform margin seen (≤ 0 when all hold)
    pub worst_margin: f64,
}

impl SweepReport {
    pub fn all_clear(&self) -> bool {
        self.violations == 0 && self.strictness_failures == 0 && self.lemma_disagreements == 0
    }
}

/// Draw random risk vectors with K in `k_range`, risks uniform in [0,1]
/// and η uniform in (eta_range.0, eta_range.1], and check every one.
pub fn monte_carlo(
    draws: usize,
    k_range: (usize, usize),
    eta_range: (f64, f64),
    seed: u64,
) -> Result<SweepReport> {
    if k_range.0 < 2 || k_range.1 < k_range.0 {
        return Err(Error::invalid(format!("bad K range {k_range:?}")));
    }
    if !(eta_range.1 > eta_range.0) || eta_range.0 < 0.0 {
        return Err(Error::invalid(format!("bad eta range {eta_range:?}")));
    }
    let mut rng = substream(seed, 0);
    let mut report = SweepReport {
        draws,
        violations: 0,
        strictness_failures: 0,
        lemma_disagreements: 0,
        worst_margin: f64::NEG_INFINITY,
    };
    for _ in 0..draws {
        let k = rng.gen_range(k_range.0..=k_range.1);
        let risks: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        // (lo, hi]: complement of the half-open gen() interval
        let eta = eta_range.1 - rng.gen::<f64>() * (eta_range.1 - eta_range.0);
        let rv = RiskVector::new(risks, eta)?;

        let check = verify_theorem1(&rv);
        let (_, lemma_ok) = verify_key_lemma(&rv);
        let spread = rv.risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - rv.risks.iter().cloned().fold(f64::INFINITY, f64::min);

        if !check.holds {
            report.violations += 1;
        }
        if spread > 1e-9 && !check.strict {
            report.strictness_failures += 1;
        }
        if check.holds != lemma_ok {
            report.lemma_disagreements += 1;
        }
        report.worst_margin = report.worst_margin.max(check.weighted - check.uniform);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_risks_route_uniformly() {
        let rv = RiskVector::new(vec![0.4; 5], 1.3).unwrap();
        for w in routed_weights(&rv) {
            assert!((w - 0.2).abs() < 1e-15);
        }
        let check = verify_theorem1(&rv);
        assert!(check.holds && !check.strict);
        assert!((check.weighted - 0.4).abs() < 1e-15);
    }

    #[test]
    fn two_prompt_reference_values() {
        // independently evaluated: w = (0.645656, 0.354344),
        // weighted = 0.4126062, lemma left = -0.1108205
        let rv = RiskVector::new(vec![0.2, 0.8], 1.0).unwrap();
        let w = routed_weights(&rv);
        assert!((w[0] - 0.64566).abs() < 1e-5, "{w:?}");
        assert!((w[1] - 0.35434).abs() < 1e-5, "{w:?}");
        let check = verify_theorem1(&rv);
        assert!((check.weighted - 0.4126062162645227).abs() < 1e-12);
        assert!((check.uniform - 0.5).abs() < 1e-15);
        assert!(check.holds && check.strict);
        let (left, ok) = verify_key_lemma(&rv);
        assert!(ok);
        assert!((left - (-0.11082053668822808)).abs() < 1e-12);
    }

    #[test]
    fn vanishing_eta_degenerates_to_uniform() {
        let rv = RiskVector::new(vec![0.1, 0.5, 0.9], 1e-12).unwrap();
        for w in routed_weights(&rv) {
            assert!((w - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_are_monotone_in_risk() {
        let rv = RiskVector::new(vec![0.9, 0.1, 0.5, 0.100001], 0.8).unwrap();
        let w = routed_weights(&rv);
        for i in 0..4 {
            for j in 0..4 {
                if rv.risks[i] < rv.risks[j] {
                    assert!(w[i] > w[j], "risks {:?} weights {w:?}", rv.risks);
                }
            }
        }
    }

    #[test]
    fn weights_invariant_under_risk_scaling_with_eta_compensation() {
        let base = RiskVector::new(vec![0.3, 0.7, 0.05], 1.1).unwrap();
        let c = 3.7;
        let scaled = RiskVector::new(
            base.risks.iter().map(|r| c * r).collect(),
            base.eta / c,
        )
        .unwrap();
        for (a, b) in routed_weights(&base).iter().zip(routed_weights(&scaled)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_risks_zero_lemma() {
        let rv = RiskVector::new(vec![0.25; 4], 0.9).unwrap();
        let (left, ok) = verify_key_lemma(&rv);
        assert!(ok);
        assert!(left.abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(RiskVector::new(vec![0.5], 1.0).is_err());
        assert!(RiskVector::new(vec![0.5, -0.1], 1.0).is_err());
        assert!(RiskVector::new(vec![0.5, 0.1], 0.0).is_err());
        assert!(RiskVector::new(vec![0.5, f64::NAN], 1.0).is_err());
    }

    #[test]
    fn small_monte_carlo_is_clear() {
        let report = monte_carlo(2000, (2, 10), (0.0, 2.0), 11).unwrap();
        assert!(report.all_clear(), "{report:?}");
        assert!(report.worst_margin <= TOLERANCE);
    }
}
