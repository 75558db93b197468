//! The oracle-backed verification suite behind `minpro-lab verify`.
//!
//! Each check compares an implementation against exact enumeration (or a
//! finite-difference probe) on small random instances and reports the worst
//! error it saw next to the threshold it must beat.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::advantage::{verify_reward, Rollout, RolloutGroup};
use crate::envs::Environment;
use crate::error::Result;
use crate::objectives::{
    accumulate, boundary_margin, surrogate_objective, token_coefficients, Accumulation, ObjectiveKind, ObjectiveSpec,
};
use crate::oracle::{
    advantage_form_grad_with, analytic_score, baseline_invariance_check, estimator_expectation_with,
    exact_grad_j_with, expected_reward, finite_diff, Problem, ScoreFn, Weighting,
};
use crate::policy::{Context, Gradient, PolicyTable, Token};
use crate::seed;

/// Central-difference step used throughout the suite.
pub const FD_STEP: f64 = 1e-5;
/// Minimum distance from a clip boundary for an objective FD probe.
pub const FD_MIN_MARGIN: f64 = 1e-4;

pub const TOL_EXACT_FORMS: f64 = 1e-10;
pub const TOL_LEMMA1_FD: f64 = 1e-6;
pub const TOL_THEOREM1: f64 = 1e-8;
pub const MIN_TOKEN_BIAS: f64 = 1e-3;
pub const TOL_ON_POLICY_BIAS: f64 = 1e-10;
pub const TOL_BASELINE: f64 = 1e-10;
pub const MIN_BASELINE_CONTROL: f64 = 1e-3;
pub const TOL_COLLAPSE: f64 = 1e-12;
pub const TOL_OBJECTIVE_FD: f64 = 1e-5;

/// Logit shift applied to `p_new` in the token-relaxation bias instance.
pub const BIAS_SHIFT: f64 = 2.0;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Replace the score function with a broken one (negative control).
    pub corrupt_score: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 20240601,
            corrupt_score: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub measured: f64,
    /// `measured < threshold` passes, or `measured > threshold` for lower
    /// bounds (see `lower_bound`).
    pub threshold: f64,
    pub lower_bound: bool,
    pub detail: String,
}

impl CheckResult {
    fn upper(name: &'static str, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed: measured < threshold,
            measured,
            threshold,
            lower_bound: false,
            detail,
        }
    }

    fn lower(name: &'static str, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed: measured > threshold,
            measured,
            threshold,
            lower_bound: true,
            detail,
        }
    }

    fn failed(name: &'static str, err: crate::Error) -> Self {
        Self {
            name,
            passed: false,
            measured: f64::NAN,
            threshold: f64::NAN,
            lower_bound: false,
            detail: format!("error: {err}"),
        }
    }
}

/// The score function with the `-π` term dropped.
pub fn corrupted_score(p: &PolicyTable, _ctx: &Context, token: Token) -> Vec<f64> {
    let mut row = vec![0.0; p.vocab_size()];
    row[token as usize] = 1.0;
    row
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-12)`.
pub fn symmetric_rel_error(a: &Gradient, b: &Gradient) -> f64 {
    a.diff_norm_l2(b) / a.norm_l2().max(b.norm_l2()).max(1e-12)
}

/// A policy with every context row drawn uniformly from `[-scale, scale]`.
///
/// Rows are materialized for every history token and for the pad-only
/// context, so any prompt/response over the vocabulary is covered when
/// `context_len == 1`.
pub fn random_policy(vocab_size: usize, context_len: usize, scale: f64, rng: &mut impl Rng) -> Result<PolicyTable> {
    let mut p = PolicyTable::new(vocab_size, context_len)?;
    let mut contexts: Vec<Context> = (0..vocab_size as Token).map(|v| p.context(&[v])).collect();
    contexts.push(p.context(&[]));
    for ctx in contexts {
        let row = (0..vocab_size).map(|_| rng.random_range(-scale..=scale)).collect();
        p.set_logits(ctx, row)?;
    }
    Ok(p)
}

/// `p` with every stored logit moved by an independent `U[-scale, scale]`.
pub fn perturbed(p: &PolicyTable, scale: f64, rng: &mut impl Rng) -> PolicyTable {
    let mut q = p.clone();
    let contexts: Vec<Context> = p.entries().map(|(c, _)| c.clone()).collect();
    for ctx in contexts {
        for x in q.logits_mut(&ctx) {
            *x += rng.random_range(-scale..=scale);
        }
    }
    q
}

/// `groups × group_size` rollouts sampled from `behavior` on consecutive
/// dataset prompts.
pub fn sample_batch(
    env: &Environment,
    behavior: &PolicyTable,
    groups: usize,
    group_size: usize,
    t_max: usize,
    batch_seed: u64,
) -> Result<Vec<RolloutGroup>> {
    (0..groups)
        .map(|g| {
            let prompt = env.gen_prompt(seed::mix(&[batch_seed, g as u64]));
            let rollouts = (0..group_size)
                .map(|j| {
                    let s = seed::mix(&[batch_seed, g as u64, j as u64]);
                    let resp = behavior.sample_rollout(&prompt.tokens, t_max, s);
                    let reward = verify_reward(env, &prompt.tokens, &resp.tokens)?;
                    Rollout::new(
                        prompt.tokens.clone(),
                        resp.tokens,
                        resp.logprobs,
                        reward,
                        behavior.version(),
                        s,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            RolloutGroup::new(rollouts)
        })
        .collect()
}

/// The constructed instance for the token-relaxation bias: EchoEnv(V=3),
/// prompt `[0]`, `t_max = 3`, uniform `p_old`, and `p_new` equal to `p_old`
/// except that the prompt context's logit for token 0 is raised by
/// [`BIAS_SHIFT`].
pub fn bias_instance() -> Result<(Environment, PolicyTable, PolicyTable)> {
    let env = Environment::echo(3, 0)?;
    let p_old = PolicyTable::new(3, 1)?;
    let mut p_new = p_old.clone();
    let ctx = p_new.context(&[0]);
    p_new.logits_mut(&ctx)[0] += BIAS_SHIFT;
    Ok((env, p_new, p_old))
}

/// Relative error of `weighting` against the exact gradient of `p_new`.
pub fn estimator_bias(
    weighting: Weighting,
    p_new: &PolicyTable,
    p_old: &PolicyTable,
    problem: &Problem,
    score: ScoreFn,
) -> Result<f64> {
    let est = estimator_expectation_with(weighting, p_new, p_old, problem, score)?;
    let exact = exact_grad_j_with(p_new, problem, score)?;
    Ok(est.diff_norm_l2(&exact) / exact.norm_l2().max(1e-300))
}

type CheckFn = dyn Fn(u64, ScoreFn) -> Result<Vec<CheckResult>>;

/// Runs every check.
pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let score: ScoreFn = if opts.corrupt_score {
        corrupted_score
    } else {
        analytic_score
    };
    let mut out = Vec::new();
    let checks: [(&'static str, &CheckFn); 6] = [
        ("score_identity", &score_identity_checks),
        ("prefix_unbiased", &prefix_unbiased_check),
        ("token_relaxation_bias", &token_bias_checks),
        ("baseline_invariance", &baseline_checks),
        ("on_policy_collapse", &|s, _| collapse_check(s).map(|c| vec![c])),
        ("objective_finite_diff", &|s, _| objective_fd_check(s).map(|c| vec![c])),
    ];
    for (name, check) in checks {
        match check(seed::mix(&[opts.seed, name.len() as u64]), score) {
            Ok(results) => out.extend(results),
            Err(e) => out.push(CheckResult::failed(name, e)),
        }
    }
    out
}

fn score_identity_checks(seed: u64, score: ScoreFn) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact_worst = 0.0f64;
    let mut fd_worst = 0.0f64;
    for trial in 0..50u64 {
        let v = rng.random_range(2..=3usize);
        let t_max = rng.random_range(1..=3usize);
        let env = Environment::echo(v, trial)?;
        let p = random_policy(v, 1, 1.5, &mut rng)?;
        let prompt = env.gen_prompt(trial);
        let problem = Problem::from_env(&env, &prompt.tokens, t_max)?;
        let direct = exact_grad_j_with(&p, &problem, score)?;
        let adv = advantage_form_grad_with(&p, &problem, score)?;
        exact_worst = exact_worst.max(symmetric_rel_error(&direct, &adv));
        let loss = |q: &PolicyTable| expected_reward(q, &problem).unwrap_or(f64::NAN);
        for g in [&direct, &adv] {
            let fd = finite_diff(g, &loss, &p, FD_STEP).max_rel_error;
            fd_worst = fd_worst.max(if fd.is_nan() { f64::INFINITY } else { fd });
        }
    }
    Ok(vec![
        CheckResult::upper(
            "score_identity_direct_vs_advantage",
            exact_worst,
            TOL_EXACT_FORMS,
            "50 random EchoEnv policies, V<=3, k=1, t_max<=3".into(),
        ),
        CheckResult::upper(
            "score_identity_vs_finite_diff",
            fd_worst,
            TOL_LEMMA1_FD,
            "central differences of J, h=1e-5".into(),
        ),
    ])
}

fn prefix_unbiased_check(seed: u64, score: ScoreFn) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let v = rng.random_range(2..=3usize);
        let t_max = rng.random_range(1..=3usize);
        let env = Environment::echo(v, trial)?;
        let p_new = random_policy(v, 1, 1.5, &mut rng)?;
        let p_old = random_policy(v, 1, 1.5, &mut rng)?;
        let prompt = env.gen_prompt(trial);
        let problem = Problem::from_env(&env, &prompt.tokens, t_max)?;
        let est = estimator_expectation_with(Weighting::PrefixExact, &p_new, &p_old, &problem, score)?;
        let exact = exact_grad_j_with(&p_new, &problem, score)?;
        worst = worst.max(symmetric_rel_error(&est, &exact));
    }
    Ok(vec![CheckResult::upper(
        "prefix_estimator_unbiased",
        worst,
        TOL_THEOREM1,
        "50 random (p_new, p_old) pairs".into(),
    )])
}

fn token_bias_checks(_seed: u64, score: ScoreFn) -> Result<Vec<CheckResult>> {
    let (env, p_new, p_old) = bias_instance()?;
    let problem = Problem::from_env(&env, &[0], 3)?;
    let bias = estimator_bias(Weighting::TokenRelaxed, &p_new, &p_old, &problem, score)?;
    let on_policy = estimator_bias(Weighting::TokenRelaxed, &p_new, &p_new, &problem, score)?;
    Ok(vec![
        CheckResult::lower(
            "token_relaxation_bias",
            bias,
            MIN_TOKEN_BIAS,
            format!("measured relative bias {bias:.6e} (V=3, t_max=3, shift {BIAS_SHIFT})"),
        ),
        CheckResult::upper(
            "token_relaxation_on_policy",
            on_policy,
            TOL_ON_POLICY_BIAS,
            "p_old = p_new".into(),
        ),
    ])
}

fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn prefix_hash(trial: u64, prefix: &[Token]) -> u64 {
    let mut words = vec![trial, prefix.len() as u64];
    words.extend(prefix.iter().map(|&t| t as u64));
    seed::mix(&words)
}

fn baseline_checks(seed: u64, _score: ScoreFn) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = Environment::echo(3, 0)?;
    let p = random_policy(3, 1, 1.5, &mut rng)?;
    let problem = Problem::from_env(&env, &[1], 3)?;

    let mut worst = baseline_invariance_check(&p, &problem, &|_, _| 1.0)?;
    for trial in 0..20u64 {
        let salt = seed::mix(&[seed, trial]);
        let b = move |prefix: &[Token], _tok: Token| 4.0 * unit_interval(prefix_hash(salt, prefix)) - 2.0;
        worst = worst.max(baseline_invariance_check(&p, &problem, &b)?);
    }
    let control = baseline_invariance_check(&p, &problem, &|_, tok| if tok == 0 { 1.0 } else { 0.0 })?;
    Ok(vec![
        CheckResult::upper(
            "baseline_invariance",
            worst,
            TOL_BASELINE,
            "b = 1 and 20 random prefix-only baselines".into(),
        ),
        CheckResult::lower(
            "baseline_token_dependent_control",
            control,
            MIN_BASELINE_CONTROL,
            "b = 1{o_t = 0} must break invariance".into(),
        ),
    ])
}

fn sumlike_env(rng: &mut impl Rng, trial: u64) -> Result<(Environment, usize)> {
    if rng.random_bool(0.5) {
        Ok((Environment::echo(rng.random_range(2..=4), trial)?, 1))
    } else {
        Ok((Environment::sum_mod(3, 2, 2, trial)?, 2))
    }
}

fn collapse_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let (env, k) = sumlike_env(&mut rng, trial)?;
        let p = random_policy(env.vocab_size(), k, 1.0, &mut rng)?;
        let batch = sample_batch(&env, &p, 4, 4, 5, seed::mix(&[seed, trial]))?;
        let reference = accumulate(
            &token_coefficients(&ObjectiveSpec::default_for(ObjectiveKind::Reinforce), &batch, &p)?,
            &p,
            Accumulation::Sequential,
        )
        .grad;
        let scale = reference.max_abs().max(1.0);
        for kind in [
            ObjectiveKind::Grpo,
            ObjectiveKind::Cispo,
            ObjectiveKind::MinPro,
            ObjectiveKind::PrefixDirect,
        ] {
            let spec = ObjectiveSpec::default_for(kind);
            let g = accumulate(&token_coefficients(&spec, &batch, &p)?, &p, Accumulation::Sequential).grad;
            worst = worst.max(g.max_abs_diff(&reference) / scale);
        }
    }
    Ok(CheckResult::upper(
        "on_policy_collapse",
        worst,
        TOL_COLLAPSE,
        "GRPO/CISPO/MinPRO/PrefixDirect vs REINFORCE, 20 batches".into(),
    ))
}

fn objective_fd_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_kind = ObjectiveKind::Reinforce;
    let mut probes = 0usize;
    for kind in ObjectiveKind::ALL {
        let spec = ObjectiveSpec::default_for(kind);
        let mut accepted = 0;
        let mut attempt = 0u64;
        while accepted < 20 {
            attempt += 1;
            if attempt > 2000 {
                return Err(crate::Error::Input(format!("{kind}: no batch away from the clip boundary")));
            }
            let (env, k) = sumlike_env(&mut rng, attempt)?;
            let behavior = random_policy(env.vocab_size(), k, 1.0, &mut rng)?;
            let current = perturbed(&behavior, 0.15, &mut rng);
            let batch = sample_batch(&env, &behavior, 3, 4, 5, seed::mix(&[seed, kind as u64, attempt]))?;
            let plan = token_coefficients(&spec, &batch, &current)?;
            if boundary_margin(&plan) < FD_MIN_MARGIN {
                continue;
            }
            let analytic = accumulate(&plan, &current, Accumulation::Sequential).grad;
            let loss = |q: &PolicyTable| surrogate_objective(&plan, &batch, q).unwrap_or(f64::NAN);
            let err = finite_diff(&analytic, &loss, &current, FD_STEP).max_rel_error;
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > worst {
                worst = err;
                worst_kind = kind;
            }
            accepted += 1;
            probes += 1;
        }
    }
    Ok(CheckResult::upper(
        "objective_finite_diff",
        worst,
        TOL_OBJECTIVE_FD,
        format!("{probes} surrogate probes over every objective; worst: {worst_kind}"),
    ))
}

/// Renders a fixed-width pass/fail table.
pub fn render_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<34} {:<6} {:>13} {:>12}  detail", "check", "result", "measured", "bound");
    for r in results {
        let bound = if r.threshold.is_nan() {
            "-".to_string()
        } else if r.lower_bound {
            format!("> {:.0e}", r.threshold)
        } else {
            format!("< {:.0e}", r.threshold)
        };
        let _ = writeln!(
            s,
            "{:<34} {:<6} {:>13.4e} {:>12}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.measured,
            bound,
            r.detail
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_instance_shape() {
        let (env, p_new, p_old) = bias_instance().unwrap();
        assert_eq!(env.vocab_size(), 3);
        let ctx = p_old.context(&[0]);
        assert_eq!(p_old.logits(&ctx), vec![0.0; 3]);
        assert_eq!(p_new.logits(&ctx), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn random_policy_covers_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_policy(3, 1, 1.0, &mut rng).unwrap();
        assert_eq!(p.entries().count(), 4);
    }

    #[test]
    fn table_lists_every_result() {
        let rows = vec![
            CheckResult::upper("a", 1e-12, 1e-10, String::new()),
            CheckResult::lower("b", 1e-4, 1e-3, String::new()),
        ];
        let t = render_table(&rows);
        assert!(t.contains("a ") && t.contains("PASS"));
        assert!(t.contains("FAIL"));
        assert_eq!(t.lines().count(), 3);
    }
}
