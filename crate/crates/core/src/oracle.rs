//! Exact ground truth by enumerating every response of a small policy.
//!
//! Rewards are terminal: a response earns `R(o)` once it ends (EOS or
//! `t_max` tokens) and nothing before, so `Q(o_{<t}, o_t) = E[R | o_{≤t}]`.

use std::collections::BTreeMap;

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::policy::{Context, Gradient, PolicyTable, Token};

/// Leaf budget for exhaustive enumeration.
pub const MAX_LEAVES: usize = 1_000_000;

/// `(policy, context, token) -> ∇ log π(token | context)` over the context's
/// logit row. The oracle takes it as a parameter so the verification suite
/// can swap in a corrupted implementation as a negative control.
pub type ScoreFn = fn(&PolicyTable, &Context, Token) -> Vec<f64>;

pub fn analytic_score(p: &PolicyTable, ctx: &Context, token: Token) -> Vec<f64> {
    p.score_row(ctx, token)
}

/// Terminal reward of a complete response.
pub type RewardFn<'a> = Box<dyn Fn(&[Token]) -> f64 + Send + Sync + 'a>;

/// A prompt, a length cap, and a terminal reward.
pub struct Problem<'a> {
    pub prompt: Vec<Token>,
    pub t_max: usize,
    pub reward: RewardFn<'a>,
}

impl<'a> Problem<'a> {
    pub fn from_env(env: &'a Environment, prompt: &[Token], t_max: usize) -> Result<Self> {
        let answer = env.answer_for(prompt)?;
        Ok(Self {
            prompt: prompt.to_vec(),
            t_max,
            reward: Box::new(move |resp| env.answer_predicate(resp, answer)),
        })
    }

    pub fn with_reward(prompt: &[Token], t_max: usize, reward: impl Fn(&[Token]) -> f64 + Send + Sync + 'a) -> Self {
        Self {
            prompt: prompt.to_vec(),
            t_max,
            reward: Box::new(reward),
        }
    }

    fn history(&self, prefix: &[Token]) -> Vec<Token> {
        let mut h = self.prompt.clone();
        h.extend_from_slice(prefix);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutcome {
    pub response: Vec<Token>,
    pub probability: f64,
    pub reward: f64,
}

fn guard(p: &PolicyTable, t_max: usize) -> Result<()> {
    let needed = (p.vocab_size() as f64).powi(t_max as i32);
    if t_max == 0 || needed > MAX_LEAVES as f64 {
        return Err(Error::Capacity {
            needed,
            limit: MAX_LEAVES,
        });
    }
    Ok(())
}

fn is_terminal(p: &PolicyTable, prefix: &[Token], t_max: usize) -> bool {
    prefix.len() >= t_max || prefix.last() == Some(&p.eos())
}

/// Every complete response in depth-first token order.
pub fn enumerate_sequences(p: &PolicyTable, problem: &Problem) -> Result<Vec<SequenceOutcome>> {
    guard(p, problem.t_max)?;
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    enumerate_rec(p, problem, &mut prefix, 0.0, &mut out);
    Ok(out)
}

fn enumerate_rec(
    p: &PolicyTable,
    problem: &Problem,
    prefix: &mut Vec<Token>,
    logp: f64,
    out: &mut Vec<SequenceOutcome>,
) {
    let ctx = p.context(&problem.history(prefix));
    let logd = p.token_log_distribution(&ctx);
    for v in 0..p.vocab_size() as Token {
        prefix.push(v);
        let lp = logp + logd[v as usize];
        if is_terminal(p, prefix, problem.t_max) {
            out.push(SequenceOutcome {
                response: prefix.clone(),
                probability: lp.exp(),
                reward: (problem.reward)(prefix),
            });
        } else {
            enumerate_rec(p, problem, prefix, lp, out);
        }
        prefix.pop();
    }
}

pub fn expected_reward(p: &PolicyTable, problem: &Problem) -> Result<f64> {
    Ok(enumerate_sequences(p, problem)?
        .iter()
        .map(|s| s.probability * s.reward)
        .sum())
}

/// `∇J = Σ_o p(o) R(o) ∇log p(o)`.
pub fn exact_grad_j(p: &PolicyTable, problem: &Problem) -> Result<Gradient> {
    exact_grad_j_with(p, problem, analytic_score)
}

pub fn exact_grad_j_with(p: &PolicyTable, problem: &Problem, score: ScoreFn) -> Result<Gradient> {
    let mut grad = Gradient::new();
    for seq in enumerate_sequences(p, problem)? {
        let weight = seq.probability * seq.reward;
        if weight == 0.0 {
            continue;
        }
        for (ctx, &tok) in p.response_contexts(&problem.prompt, &seq.response).iter().zip(&seq.response) {
            grad.add_row(ctx, &score(p, ctx, tok), weight);
        }
    }
    Ok(grad)
}

/// Exact state and action values of a policy on one problem.
#[derive(Debug, Clone, Default)]
pub struct ExactCritic {
    /// `V(o_{<t})` for every non-terminal prefix, including the empty one.
    pub value: BTreeMap<Vec<Token>, f64>,
    /// `Q(o_{<t}, v)` for every non-terminal prefix and next token.
    pub qvalue: BTreeMap<(Vec<Token>, Token), f64>,
}

impl ExactCritic {
    pub fn advantage(&self, prefix: &[Token], token: Token) -> f64 {
        self.qvalue[&(prefix.to_vec(), token)] - self.value[prefix]
    }
}

/// Backward induction over the response tree.
pub fn exact_critic(p: &PolicyTable, problem: &Problem) -> Result<ExactCritic> {
    guard(p, problem.t_max)?;
    let mut critic = ExactCritic::default();
    let mut prefix = Vec::new();
    critic_rec(p, problem, &mut prefix, &mut critic);
    Ok(critic)
}

fn critic_rec(p: &PolicyTable, problem: &Problem, prefix: &mut Vec<Token>, critic: &mut ExactCritic) -> f64 {
    let ctx = p.context(&problem.history(prefix));
    let dist = p.token_distribution(&ctx);
    let mut value = 0.0;
    for v in 0..p.vocab_size() as Token {
        prefix.push(v);
        let q = if is_terminal(p, prefix, problem.t_max) {
            (problem.reward)(prefix)
        } else {
            critic_rec(p, problem, prefix, critic)
        };
        prefix.pop();
        critic.qvalue.insert((prefix.clone(), v), q);
        value += dist[v as usize] * q;
    }
    critic.value.insert(prefix.clone(), value);
    value
}

/// Probability of reaching each non-terminal prefix.
fn prefix_probabilities(p: &PolicyTable, problem: &Problem) -> BTreeMap<Vec<Token>, f64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![(Vec::new(), 1.0)];
    while let Some((prefix, prob)) = stack.pop() {
        let dist = p.token_distribution(&p.context(&problem.history(&prefix)));
        for v in 0..p.vocab_size() as Token {
            let mut child = prefix.clone();
            child.push(v);
            if !is_terminal(p, &child, problem.t_max) {
                stack.push((child, prob * dist[v as usize]));
            }
        }
        out.insert(prefix, prob);
    }
    out
}

/// `Σ_t E_{o≤t}[∇log π(o_t|o_<t) · A(o_<t, o_t)]`, the advantage form of ∇J.
pub fn advantage_form_grad(p: &PolicyTable, problem: &Problem) -> Result<Gradient> {
    advantage_form_grad_with(p, problem, analytic_score)
}

pub fn advantage_form_grad_with(p: &PolicyTable, problem: &Problem, score: ScoreFn) -> Result<Gradient> {
    let critic = exact_critic(p, problem)?;
    let mut grad = Gradient::new();
    for (prefix, prob) in prefix_probabilities(p, problem) {
        let ctx = p.context(&problem.history(&prefix));
        let dist = p.token_distribution(&ctx);
        for v in 0..p.vocab_size() as Token {
            let w = prob * dist[v as usize] * critic.advantage(&prefix, v);
            grad.add_row(&ctx, &score(p, &ctx, v), w);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `c_t = ρ_{1:t}`
    PrefixExact,
    /// `c_t = ρ_t`
    TokenRelaxed,
    /// `c_t = 1`
    None,
}

/// `E_{o ~ p_old}[Σ_t c_t · ∇log π_new(o_t|·) · A_new(o_<t, o_t)]`, exactly.
pub fn estimator_expectation(
    weighting: Weighting,
    p_new: &PolicyTable,
    p_old: &PolicyTable,
    problem: &Problem,
) -> Result<Gradient> {
    estimator_expectation_with(weighting, p_new, p_old, problem, analytic_score)
}

pub fn estimator_expectation_with(
    weighting: Weighting,
    p_new: &PolicyTable,
    p_old: &PolicyTable,
    problem: &Problem,
    score: ScoreFn,
) -> Result<Gradient> {
    let critic = exact_critic(p_new, problem)?;
    let mut grad = Gradient::new();
    for seq in enumerate_sequences(p_old, problem)? {
        let contexts = p_new.response_contexts(&problem.prompt, &seq.response);
        let mut log_prefix = 0.0;
        for (t, (ctx, &tok)) in contexts.iter().zip(&seq.response).enumerate() {
            let log_rho = p_new.log_prob(ctx, tok) - p_old.log_prob(ctx, tok);
            log_prefix += log_rho;
            let c = match weighting {
                Weighting::PrefixExact => log_prefix.exp(),
                Weighting::TokenRelaxed => log_rho.exp(),
                Weighting::None => 1.0,
            };
            let a = critic.advantage(&seq.response[..t], tok);
            grad.add_row(ctx, &score(p_new, ctx, tok), seq.probability * c * a);
        }
    }
    Ok(grad)
}

/// `max_t ‖E_{o≤t ~ p}[∇log π(o_t|o_<t) · b(o_<t, o_t)]‖₂`.
///
/// For any `b` that ignores its second argument this is zero up to rounding.
pub fn baseline_invariance_check(
    p: &PolicyTable,
    problem: &Problem,
    baseline: &dyn Fn(&[Token], Token) -> f64,
) -> Result<f64> {
    guard(p, problem.t_max)?;
    let mut per_step: BTreeMap<usize, Gradient> = BTreeMap::new();
    for (prefix, prob) in prefix_probabilities(p, problem) {
        let ctx = p.context(&problem.history(&prefix));
        let dist = p.token_distribution(&ctx);
        let g = per_step.entry(prefix.len()).or_default();
        for v in 0..p.vocab_size() as Token {
            let w = prob * dist[v as usize] * baseline(&prefix, v);
            p.accumulate_score(g, &ctx, v, w);
        }
    }
    Ok(per_step.values().map(Gradient::norm_l2).fold(0.0, f64::max))
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// `max_i |g_i - fd_i| / max(‖g‖∞, ‖fd‖∞, 1e-8)`.
    pub max_rel_error: f64,
    pub worst: Option<(Context, Token)>,
    pub numeric: Gradient,
}

/// Central differences of `loss` over every logit that `analytic` touches or
/// that `p` stores.
pub fn finite_diff(
    analytic: &Gradient,
    loss: &dyn Fn(&PolicyTable) -> f64,
    p: &PolicyTable,
    h: f64,
) -> FiniteDiffReport {
    let mut contexts: Vec<Context> = analytic.iter().map(|(c, _)| c.clone()).collect();
    contexts.extend(p.entries().map(|(c, _)| c.clone()));
    contexts.sort();
    contexts.dedup();

    let mut numeric = Gradient::new();
    let mut probe = p.clone();
    for ctx in &contexts {
        for v in 0..p.vocab_size() {
            let base = probe.logits(ctx)[v];
            probe.logits_mut(ctx)[v] = base + h;
            let up = loss(&probe);
            probe.logits_mut(ctx)[v] = base - h;
            let down = loss(&probe);
            probe.logits_mut(ctx)[v] = base;
            numeric.add_entry(ctx, v as Token, p.vocab_size(), (up - down) / (2.0 * h));
        }
    }

    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    let mut worst = None;
    let mut worst_err = 0.0;
    for ctx in &contexts {
        for v in 0..p.vocab_size() as Token {
            let err = (analytic.get(ctx, v) - numeric.get(ctx, v)).abs();
            if err > worst_err || worst.is_none() {
                worst_err = err;
                worst = Some((ctx.clone(), v));
            }
        }
    }
    FiniteDiffReport {
        max_rel_error: worst_err / scale,
        worst,
        numeric,
    }
}

/// Relative distance `‖a - b‖₂ / max(‖b‖₂, 1e-300)`.
pub fn relative_error(a: &Gradient, b: &Gradient) -> f64 {
    a.diff_norm_l2(b) / b.norm_l2().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo_problem(env: &Environment, t_max: usize) -> Problem<'_> {
        Problem::from_env(env, &[0], t_max).unwrap()
    }

    #[test]
    fn tiny_enumeration() {
        let env = Environment::echo(2, 0).unwrap();
        let p = PolicyTable::new(2, 1).unwrap();
        let seqs = enumerate_sequences(&p, &echo_problem(&env, 1)).unwrap();
        let responses: Vec<_> = seqs.iter().map(|s| s.response.clone()).collect();
        assert_eq!(responses, vec![vec![0], vec![1]]);
        let mass: f64 = seqs.iter().map(|s| s.probability).sum();
        assert!((mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn enumeration_guard() {
        let env = Environment::sum_mod(9, 1, 99, 0).unwrap();
        let p = PolicyTable::new(10, 1).unwrap();
        let prob = Problem::from_env(&env, &[3], 7).unwrap();
        assert!(matches!(enumerate_sequences(&p, &prob), Err(Error::Capacity { .. })));
        let prob = Problem::from_env(&env, &[3], 6).unwrap();
        assert!(enumerate_sequences(&p, &prob).is_ok());
    }

    #[test]
    fn constant_reward_has_zero_advantage() {
        let mut p = PolicyTable::new(3, 1).unwrap();
        p.logits_mut(&p.context(&[0])).copy_from_slice(&[0.4, -0.3, 0.1]);
        let prob = Problem::with_reward(&[0], 3, |_| 1.0);
        let c = exact_critic(&p, &prob).unwrap();
        assert!(c.value.values().all(|v| (v - 1.0).abs() < 1e-12));
        for (prefix, v) in c.qvalue.keys() {
            assert!(c.advantage(prefix, *v).abs() < 1e-12);
        }
        assert!(exact_grad_j(&p, &prob).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_reward_zero_gradient() {
        let p = PolicyTable::new(3, 1).unwrap();
        let prob = Problem::with_reward(&[0], 3, |_| 0.0);
        assert_eq!(exact_grad_j(&p, &prob).unwrap().max_abs(), 0.0);
    }
}
