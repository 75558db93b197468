//! Rollouts, rollout groups, and group-relative advantages.

use crate::envs::Environment;
use crate::error::{input, Result};
use crate::policy::Token;

/// Groups whose reward standard deviation falls below this get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// One sampled response together with what the behavior policy assigned it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// log π_old(o_t | ·) recorded at sampling time.
    pub behavior_logp: Vec<f64>,
    pub reward: f64,
    pub behavior_version: u64,
    pub seed: u64,
}

impl Rollout {
    pub fn new(
        prompt: Vec<Token>,
        response: Vec<Token>,
        behavior_logp: Vec<f64>,
        reward: f64,
        behavior_version: u64,
        seed: u64,
    ) -> Result<Self> {
        if response.is_empty() {
            return input("rollout response is empty");
        }
        if behavior_logp.len() != response.len() {
            return input("behavior_logp length differs from response length");
        }
        Ok(Self {
            prompt,
            response,
            behavior_logp,
            reward,
            behavior_version,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// G rollouts of one prompt with their sequence-level advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    rollouts: Vec<Rollout>,
    advantages: Vec<f64>,
    degenerate: bool,
}

impl RolloutGroup {
    /// Builds the group and computes `(R - mean) / std` advantages.
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards)?;
        let degenerate = population_std(&rewards) < DEGENERATE_STD;
        Self::with_advantages(rollouts, advantages).map(|mut g| {
            g.degenerate = degenerate;
            g
        })
    }

    /// Builds the group with externally supplied per-sequence advantages.
    pub fn with_advantages(rollouts: Vec<Rollout>, advantages: Vec<f64>) -> Result<Self> {
        if rollouts.is_empty() {
            return input("rollout group is empty");
        }
        if advantages.len() != rollouts.len() {
            return input("one advantage per rollout is required");
        }
        if rollouts.iter().any(|r| r.prompt != rollouts[0].prompt) {
            return input("rollouts in a group must share one prompt");
        }
        if advantages.iter().any(|a| !a.is_finite()) {
            return input("advantages must be finite");
        }
        Ok(Self {
            rollouts,
            advantages,
            degenerate: false,
        })
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    /// Advantage carried by every token of rollout `i`.
    pub fn token_advantage(&self, i: usize, _t: usize) -> f64 {
        self.advantages[i]
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn mean_reward(&self) -> f64 {
        self.rollouts.iter().map(|r| r.reward).sum::<f64>() / self.rollouts.len() as f64
    }

    pub fn token_count(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// `(R_i - mean(R)) / std(R)` with the population standard deviation; all
/// zeros when the group is degenerate.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return input("group advantages need at least two rewards");
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return input("rewards must be finite");
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = population_std(rewards);
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn verify_reward(env: &Environment, prompt: &[Token], response: &[Token]) -> Result<f64> {
    let answer = env.answer_for(prompt)?;
    Ok(env.answer_predicate(response, answer))
}
