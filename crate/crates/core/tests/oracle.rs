//! Oracle checks against a second, deliberately naive implementation that
//! shares no code with the library beyond the public types.

use minpro_lab::envs::Environment;
use minpro_lab::oracle::{
    enumerate_sequences, estimator_expectation, exact_critic, exact_grad_j, expected_reward, Problem, Weighting,
    MAX_LEAVES,
};
use minpro_lab::policy::PolicyTable;
use minpro_lab::verify::{bias_instance, random_policy, symmetric_rel_error};
use minpro_lab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative bias of the token-relaxed estimator on the constructed pair,
/// measured once with the naive oracle below and frozen.
const FROZEN_TOKEN_BIAS: f64 = 0.458_709_4;

/// Naive model of the bias instance: V=3 (EOS=2), k=1, prompt [0],
/// t_max=3, reward 1 iff the last token before EOS (or the last token) is 0.
struct Naive {
    /// logits[c][v]: context token c in 0..3.
    logits: [[f64; 3]; 3],
}

impl Naive {
    fn pi(&self, c: usize) -> [f64; 3] {
        let z: f64 = self.logits[c].iter().map(|x| x.exp()).sum();
        self.logits[c].map(|x| x.exp() / z)
    }

    fn ctx(prefix: &[usize]) -> usize {
        *prefix.last().unwrap_or(&0)
    }

    fn terminal(prefix: &[usize]) -> bool {
        prefix.len() == 3 || prefix.last() == Some(&2)
    }

    fn reward(resp: &[usize]) -> f64 {
        let body: Vec<usize> = resp.iter().copied().take_while(|&t| t != 2).collect();
        if body.last() == Some(&0) {
            1.0
        } else {
            0.0
        }
    }

    fn sequences(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = vec![];
        let mut stack = vec![(vec![], 1.0)];
        while let Some((prefix, prob)) = stack.pop() {
            let pi = self.pi(Self::ctx(&prefix));
            for (v, pv) in pi.iter().enumerate() {
                let mut next: Vec<usize> = prefix.clone();
                next.push(v);
                if Self::terminal(&next) {
                    out.push((next, prob * pv));
                } else {
                    stack.push((next, prob * pv));
                }
            }
        }
        out
    }

    fn q(&self, prefix: &[usize], v: usize) -> f64 {
        let mut next = prefix.to_vec();
        next.push(v);
        if Self::terminal(&next) {
            return Self::reward(&next);
        }
        let pi = self.pi(Self::ctx(&next));
        (0..3).map(|w| pi[w] * self.q(&next, w)).sum()
    }

    fn value(&self, prefix: &[usize]) -> f64 {
        let pi = self.pi(Self::ctx(prefix));
        (0..3).map(|v| pi[v] * self.q(prefix, v)).sum()
    }

    fn add_score(&self, g: &mut [[f64; 3]; 3], c: usize, v: usize, w: f64) {
        let pi = self.pi(c);
        for u in 0..3 {
            g[c][u] += w * ((u == v) as u8 as f64 - pi[u]);
        }
    }

    fn exact_grad(&self) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for (resp, prob) in self.sequences() {
            let r = Self::reward(&resp);
            for t in 0..resp.len() {
                self.add_score(&mut g, Self::ctx(&resp[..t]), resp[t], prob * r);
            }
        }
        g
    }

    fn token_relaxed(&self, old: &Naive) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for (resp, prob_old) in old.sequences() {
            for t in 0..resp.len() {
                let c = Self::ctx(&resp[..t]);
                let rho = self.pi(c)[resp[t]] / old.pi(c)[resp[t]];
                let adv = self.q(&resp[..t], resp[t]) - self.value(&resp[..t]);
                self.add_score(&mut g, c, resp[t], prob_old * rho * adv);
            }
        }
        g
    }
}

fn norm(g: &[[f64; 3]; 3]) -> f64 {
    g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn token_relaxation_bias_matches_naive_oracle_and_frozen_value() {
    let old = Naive { logits: [[0.0; 3]; 3] };
    let mut new = Naive { logits: [[0.0; 3]; 3] };
    new.logits[0][0] = 2.0;
    let exact = new.exact_grad();
    let est = new.token_relaxed(&old);
    let mut diff = [[0.0; 3]; 3];
    for c in 0..3 {
        for v in 0..3 {
            diff[c][v] = est[c][v] - exact[c][v];
        }
    }
    let naive_bias = norm(&diff) / norm(&exact);

    let (env, p_new, p_old) = bias_instance().unwrap();
    let problem = Problem::from_env(&env, &[0], 3).unwrap();
    let lib_exact = exact_grad_j(&p_new, &problem).unwrap();
    let lib_est = estimator_expectation(Weighting::TokenRelaxed, &p_new, &p_old, &problem).unwrap();
    let lib_bias = lib_est.diff_norm_l2(&lib_exact) / lib_exact.norm_l2();

    assert!((naive_bias - lib_bias).abs() < 1e-12, "{naive_bias} vs {lib_bias}");
    assert!((lib_bias - FROZEN_TOKEN_BIAS).abs() < 1e-6, "{lib_bias:.10}");
    assert!(lib_bias > 1e-3);

    // per-entry agreement of the exact gradient with the naive one
    for c in 0..3u32 {
        let ctx = p_new.context(&[c]);
        for v in 0..3u32 {
            assert!((lib_exact.get(&ctx, v) - exact[c as usize][v as usize]).abs() < 1e-14);
        }
    }
}

#[test]
fn uniform_echo_expected_reward_closed_form() {
    // V=3, t_max=3 uniform: reward iff last body token is the answer 0.
    // Naive count over the 3-ary tree.
    let naive = Naive { logits: [[0.0; 3]; 3] };
    let j_naive: f64 = naive.sequences().iter().map(|(r, p)| p * Naive::reward(r)).sum();
    // Closed form: P = 1/9 (0,EOS) + 1/27 ((0|1),0,EOS) + 1/27 (x,y,0) for x,y non-EOS
    // = 1/9 + 2/27 + 4/27 = 9/27.
    assert!((j_naive - 1.0 / 3.0).abs() < 1e-15);
    let env = Environment::echo(3, 0).unwrap();
    let p = PolicyTable::new(3, 1).unwrap();
    let problem = Problem::from_env(&env, &[0], 3).unwrap();
    assert!((expected_reward(&p, &problem).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn probability_mass_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t_max in 1..=4 {
        for v in 2..=4 {
            let env = Environment::echo(v, 0).unwrap();
            let p = random_policy(v, 1, 3.0, &mut rng).unwrap();
            let problem = Problem::from_env(&env, &[0], t_max).unwrap();
            let mass: f64 = enumerate_sequences(&p, &problem).unwrap().iter().map(|s| s.probability).sum();
            assert!((mass - 1.0).abs() < 1e-10, "V={v} t_max={t_max}: {mass}");
        }
    }
}

#[test]
fn critic_satisfies_bellman_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let env = Environment::echo(3, 0).unwrap();
    let p = random_policy(3, 1, 1.0, &mut rng).unwrap();
    let problem = Problem::from_env(&env, &[1], 3).unwrap();
    let critic = exact_critic(&p, &problem).unwrap();
    assert!((critic.value[&vec![]] - expected_reward(&p, &problem).unwrap()).abs() < 1e-14);
    for (prefix, v) in &critic.value {
        let dist = p.token_distribution(&p.context(&[&[1][..], prefix].concat()));
        let mean_adv: f64 = (0..3).map(|t| dist[t as usize] * critic.advantage(prefix, t)).sum();
        assert!(mean_adv.abs() < 1e-14, "{prefix:?} V={v}");
    }
}

#[test]
fn prefix_estimator_unbiased_on_sum_mod() {
    // k=2 contexts on a two-digit SumMod task: broader than the k=1 suite.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let env = Environment::sum_mod(2, 2, 1, 0).unwrap();
    for i in 0..10 {
        let prompt = env.gen_prompt(i);
        let mut p_new = PolicyTable::new(3, 2).unwrap();
        let mut p_old = PolicyTable::new(3, 2).unwrap();
        for a in 0..4u32 {
            for b in 0..4u32 {
                let ctx = p_new.context(&[a, b]);
                if ctx.tokens().iter().all(|&t| t <= 3) {
                    let r1 = random_policy(3, 1, 1.0, &mut rng).unwrap();
                    let r2 = random_policy(3, 1, 1.0, &mut rng).unwrap();
                    let c1 = r1.context(&[0]);
                    p_new.set_logits(ctx.clone(), r1.logits(&c1)).unwrap();
                    p_old.set_logits(ctx, r2.logits(&c1)).unwrap();
                }
            }
        }
        let problem = Problem::from_env(&env, &prompt.tokens, 3).unwrap();
        let est = estimator_expectation(Weighting::PrefixExact, &p_new, &p_old, &problem).unwrap();
        let exact = exact_grad_j(&p_new, &problem).unwrap();
        assert!(symmetric_rel_error(&est, &exact) < 1e-8);
        let none = estimator_expectation(Weighting::None, &p_new, &p_new, &problem).unwrap();
        assert!(symmetric_rel_error(&none, &exact) < 1e-8);
    }
}

#[test]
fn enumeration_guard_rejects_large_trees() {
    let env = Environment::echo(11, 0).unwrap();
    let p = PolicyTable::new(11, 1).unwrap();
    let problem = Problem::from_env(&env, &[0], 6).unwrap();
    match enumerate_sequences(&p, &problem) {
        Err(Error::Capacity { limit, needed }) => {
            assert_eq!(limit, MAX_LEAVES);
            assert!(needed > MAX_LEAVES as f64);
        }
        other => panic!("expected capacity error, got {other:?}"),
    }
}
