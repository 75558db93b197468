//! Token, prefix, and minimum-prefix importance ratios, plus the clipping
//! primitives shared by every objective.
//!
//! For a rollout with per-token log-probabilities under the current and the
//! behavior policy:
//!
//! * token ratio `ρ_t = π(o_t|·) / π_old(o_t|·)`
//! * prefix ratio `ρ_{1:t} = ρ_1 ⋯ ρ_t`, accumulated in log space
//! * minimum prefix ratio `ρ̲_t = min_{i<t} ρ_i`, with `ρ̲_1 = 1`

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RatioTrace {
    pub token_ratio: Vec<f64>,
    pub prefix_ratio: Vec<f64>,
    pub min_prefix: Vec<f64>,
    pub log_token_ratio: Vec<f64>,
    /// Running sum of `log_token_ratio`; ranks prefixes even when
    /// `prefix_ratio` has saturated.
    pub log_prefix_ratio: Vec<f64>,
    /// Set when some `prefix_ratio` entry saturated to `+inf` or `0`.
    pub overflow: bool,
}

impl RatioTrace {
    pub fn len(&self) -> usize {
        self.token_ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ratio.is_empty()
    }

    /// `ρ̲_t · ρ_t`, the MinPRO stand-in for `ρ_{1:t}`. Formed in log space so
    /// `0 · inf` never arises.
    pub fn min_prefix_effective(&self, t: usize) -> f64 {
        (self.min_prefix[t].ln() + self.log_token_ratio[t]).exp()
    }
}

pub fn compute_trace(logp_new: &[f64], logp_old: &[f64]) -> Result<RatioTrace> {
    if logp_new.len() != logp_old.len() {
        return input(format!(
            "log-prob length mismatch: {} vs {}",
            logp_new.len(),
            logp_old.len()
        ));
    }
    if logp_new.is_empty() {
        return input("ratio trace needs at least one token");
    }
    if logp_new.iter().chain(logp_old).any(|x| !x.is_finite()) {
        return input("non-finite log-probability");
    }

    let n = logp_new.len();
    let log_token_ratio: Vec<f64> = logp_new.iter().zip(logp_old).map(|(a, b)| a - b).collect();
    let token_ratio: Vec<f64> = log_token_ratio.iter().map(|l| l.exp()).collect();

    let mut log_prefix_ratio = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &l in &log_token_ratio {
        acc += l;
        log_prefix_ratio.push(acc);
    }
    let prefix_ratio: Vec<f64> = log_prefix_ratio.iter().map(|l| l.exp()).collect();
    let overflow = prefix_ratio.iter().any(|&r| r == 0.0 || r.is_infinite());

    let mut min_prefix = Vec::with_capacity(n);
    min_prefix.push(1.0);
    let mut running = f64::INFINITY;
    for &r in &token_ratio[..n - 1] {
        running = running.min(r);
        min_prefix.push(running);
    }

    Ok(RatioTrace {
        token_ratio,
        prefix_ratio,
        min_prefix,
        log_token_ratio,
        log_prefix_ratio,
        overflow,
    })
}

/// Trust-region bounds `[1 - eps_low, 1 + eps_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl ClipRange {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        if !(eps_low.is_finite() && eps_high.is_finite()) || eps_low < 0.0 || eps_high < 0.0 {
            return input("clip epsilons must be finite and non-negative");
        }
        if eps_low > 1.0 {
            return input("eps_low above 1 makes the lower bound negative");
        }
        Ok(Self { eps_low, eps_high })
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower() && x <= self.upper()
    }
}

/// `clip(x, 1-eps_low, 1+eps_high)`, used as a stop-gradient coefficient.
pub fn soft_clip_coeff(x: f64, r: ClipRange) -> f64 {
    x.max(r.lower()).min(r.upper())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Active,
    Clipped,
}

/// Whether `min(ρÂ, clip(ρ)Â)` selects the constant clipped branch.
pub fn hard_clip_gate(rho: f64, adv: f64, r: ClipRange) -> Gate {
    if (adv > 0.0 && rho > r.upper()) || (adv < 0.0 && rho < r.lower()) {
        Gate::Clipped
    } else {
        Gate::Active
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn on_policy_trace_is_all_ones() {
        let lp = [-0.3, -2.1, -0.01, -5.0];
        let t = compute_trace(&lp, &lp).unwrap();
        assert!(t.token_ratio.iter().all(|&x| x == 1.0));
        assert!(t.prefix_ratio.iter().all(|&x| x == 1.0));
        assert!(t.min_prefix.iter().all(|&x| x == 1.0));
        assert!(!t.overflow);
    }

    #[test]
    fn forced_example() {
        let old = [0.0, 0.0, 0.0].map(|x: f64| x - 1.0);
        let new = [2f64.ln() - 1.0, -1.0, 0.5f64.ln() - 1.0];
        let t = compute_trace(&new, &old).unwrap();
        let expect_tok = [2.0, 1.0, 0.5];
        let expect_prefix = [2.0, 2.0, 1.0];
        let expect_min = [1.0, 2.0, 1.0];
        for i in 0..3 {
            assert!(close(t.token_ratio[i], expect_tok[i], 1e-14));
            assert!(close(t.prefix_ratio[i], expect_prefix[i], 1e-14));
            assert!(close(t.min_prefix[i], expect_min[i], 1e-14));
        }
        let eff: Vec<f64> = (0..3).map(|i| t.min_prefix_effective(i)).collect();
        for (a, b) in eff.iter().zip([2.0, 2.0, 0.5]) {
            assert!(close(*a, b, 1e-14));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_trace(&[0.0], &[0.0, 1.0]).is_err());
        assert!(compute_trace(&[], &[]).is_err());
        assert!(compute_trace(&[f64::NAN], &[0.0]).is_err());
        assert!(compute_trace(&[0.0], &[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn prefix_overflow_is_flagged() {
        let new = vec![0.0; 4];
        let old = vec![-300.0; 4];
        let t = compute_trace(&new, &old).unwrap();
        assert!(t.overflow);
        assert!(t.prefix_ratio[3].is_infinite());
        assert_eq!(t.log_prefix_ratio[3], 1200.0);
    }

    #[test]
    fn soft_clip_examples() {
        let cispo = ClipRange::new(1.0, 4.0).unwrap();
        assert_eq!(soft_clip_coeff(5.5, cispo), 5.0);
        assert_eq!(soft_clip_coeff(7.0, cispo), 5.0);
        assert_eq!(soft_clip_coeff(f64::INFINITY, cispo), 5.0);
        let grpo = ClipRange::new(0.2, 0.28).unwrap();
        assert!((soft_clip_coeff(0.7, grpo) - 0.8).abs() < 1e-15);
        assert_eq!(soft_clip_coeff(1.0, grpo), 1.0);
    }

    #[test]
    fn gate_examples() {
        let r = ClipRange::new(0.2, 0.28).unwrap();
        assert_eq!(hard_clip_gate(1.4, 1.0, r), Gate::Clipped);
        assert_eq!(hard_clip_gate(1.4, -1.0, r), Gate::Active);
        assert_eq!(hard_clip_gate(0.5, -1.0, r), Gate::Clipped);
        assert_eq!(hard_clip_gate(0.5, 1.0, r), Gate::Active);
        assert_eq!(hard_clip_gate(3.0, 0.0, r), Gate::Active);
        for adv in [-2.0, -0.1, 0.0, 0.1, 2.0] {
            assert_eq!(hard_clip_gate(1.0, adv, r), Gate::Active);
        }
    }

    #[test]
    fn clip_range_validation() {
        assert!(ClipRange::new(-0.1, 0.2).is_err());
        assert!(ClipRange::new(1.5, 0.2).is_err());
        assert!(ClipRange::new(1.0, 4.0).is_ok());
        assert!(ClipRange::new(0.2, f64::NAN).is_err());
    }

    /// Scalar surrogate `min(ρ(x)Â, clip(ρ(x))Â)` with `ρ(x) = ρ₀·e^x`.
    fn surrogate(x: f64, rho0: f64, adv: f64, r: ClipRange) -> f64 {
        let rho = rho0 * x.exp();
        (rho * adv).min(soft_clip_coeff(rho, r) * adv)
    }

    proptest! {
        #[test]
        fn trace_invariants(pairs in prop::collection::vec((-3.0f64..0.0, -3.0f64..0.0), 1..60)) {
            let (new, old): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let t = compute_trace(&new, &old).unwrap();
            let n = t.len();
            prop_assert_eq!(t.min_prefix[0], 1.0);
            for i in 0..n {
                prop_assert!(t.token_ratio[i] > 0.0);
                if i > 0 {
                    prop_assert!(close(t.prefix_ratio[i], t.prefix_ratio[i - 1] * t.token_ratio[i], 1e-10));
                    let expect = t.token_ratio[..i].iter().copied().fold(f64::INFINITY, f64::min);
                    prop_assert_eq!(t.min_prefix[i], expect);
                }
                if i > 1 {
                    prop_assert!(t.min_prefix[i] <= t.min_prefix[i - 1]);
                }
            }
        }

        #[test]
        fn prefix_product_two_routes(pairs in prop::collection::vec((-8.0f64..0.0, -8.0f64..0.0), 50)) {
            let (new, old): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let t = compute_trace(&new, &old).unwrap();
            let direct: f64 = new.iter().sum::<f64>() - old.iter().sum::<f64>();
            prop_assert!(close(t.prefix_ratio[49], direct.exp(), 1e-10));
            let product: f64 = t.token_ratio.iter().product();
            prop_assert!(close(t.prefix_ratio[49], product, 1e-10));
        }

        #[test]
        fn soft_clip_idempotent(x in -10.0f64..10.0, lo in 0.0f64..=1.0, hi in 0.0f64..5.0) {
            let r = ClipRange::new(lo, hi).unwrap();
            let once = soft_clip_coeff(x, r);
            prop_assert_eq!(soft_clip_coeff(once, r), once);
            prop_assert!(r.contains(once));
        }
    }

    /// The gate must match the sign of d/dx of the scalar surrogate: clipped
    /// exactly where the surrogate is locally flat.
    #[test]
    fn gate_matches_finite_difference_of_surrogate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let h = 1e-7;
        let mut checked = 0;
        while checked < 10_000 {
            let rho = (rng.random::<f64>() * 4.0 - 2.0).exp();
            let adv = rng.random::<f64>() * 4.0 - 2.0;
            let r = ClipRange::new(rng.random::<f64>(), rng.random::<f64>() * 2.0).unwrap();
            if (rho - r.lower()).abs() < 1e-4 || (rho - r.upper()).abs() < 1e-4 || adv.abs() < 1e-6 {
                continue;
            }
            let d = (surrogate(h, rho, adv, r) - surrogate(-h, rho, adv, r)) / (2.0 * h);
            let flat = d.abs() < 1e-9;
            assert_eq!(flat, hard_clip_gate(rho, adv, r) == Gate::Clipped, "rho={rho} adv={adv} r={r:?}");
            if !flat {
                assert!(((d - rho * adv) / (rho * adv)).abs() < 1e-5);
            }
            checked += 1;
        }
    }
}
