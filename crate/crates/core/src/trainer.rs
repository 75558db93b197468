//! Off-policy training loop with a staleness buffer.
//!
//! Each global step samples one batch of `N` prompts × `G` responses from the
//! current policy and pushes it into a FIFO buffer; the batch popped for
//! training is the one generated `n` global steps earlier. The popped batch
//! is split into `M` mini-batches and each drives one optimizer update, so
//! `U = M` updates happen per global step and the version lag of every
//! update lies in `[U·n, U·(n+1) - 1]`.
//!
//! Before the first update the buffer is filled with `n` batches from the
//! initial policy while the learner idles; each idle global step advances
//! the version counter by `U` without touching parameters.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{Rollout, RolloutGroup};
use crate::envs::Environment;
use crate::error::{input, Error, Result};
use crate::objectives::{accumulate, token_coefficients, Accumulation, ObjectiveSpec};
use crate::policy::{Context, Gradient, PolicyTable};
use crate::seed;

/// Env var capping the rayon worker count.
pub const THREADS_ENV: &str = "MINPRO_LAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments plus the update counter that drives warmup.
#[derive(Debug, Clone)]
pub struct OptState {
    kind: OptimizerKind,
    warmup_steps: usize,
    step: u64,
    first: BTreeMap<Context, Vec<f64>>,
    second: BTreeMap<Context, Vec<f64>>,
}

impl OptState {
    pub fn new(kind: OptimizerKind, warmup_steps: usize) -> Self {
        Self {
            kind,
            warmup_steps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate for the next update: linear ramp over `warmup_steps`.
    pub fn scheduled_lr(&self, lr: f64) -> f64 {
        if self.warmup_steps == 0 {
            lr
        } else {
            lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One gradient-ascent step; bumps `p.version` by exactly one.
pub fn apply_update(p: &mut PolicyTable, g: &Gradient, opt: &mut OptState, lr: f64) -> Result<()> {
    if !g.all_finite() {
        return Err(Error::Numeric {
            what: "non-finite gradient".into(),
            group: 0,
            rollout: 0,
            position: 0,
        });
    }
    let lr_t = opt.scheduled_lr(lr);
    opt.step += 1;
    match opt.kind {
        OptimizerKind::Sgd => {
            for (ctx, row) in g.iter() {
                if row.iter().all(|&x| x == 0.0) {
                    continue;
                }
                for (w, &d) in p.logits_mut(ctx).iter_mut().zip(row) {
                    *w += lr_t * d;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = opt.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let v = p.vocab_size();
            // every parameter with moment history decays, even without a fresh gradient
            let mut contexts: Vec<Context> = opt.first.keys().cloned().collect();
            contexts.extend(g.iter().map(|(c, _)| c.clone()));
            contexts.sort();
            contexts.dedup();
            for ctx in contexts {
                let grad_row = g.row(&ctx);
                let m = opt.first.entry(ctx.clone()).or_insert_with(|| vec![0.0; v]);
                let s = opt.second.entry(ctx.clone()).or_insert_with(|| vec![0.0; v]);
                let mut delta = vec![0.0; v];
                for i in 0..v {
                    let gi = grad_row.map_or(0.0, |r| r[i]);
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    s[i] = beta2 * s[i] + (1.0 - beta2) * gi * gi;
                    delta[i] = lr_t * (m[i] / c1) / ((s[i] / c2).sqrt() + eps);
                }
                if delta.iter().any(|&d| d != 0.0) {
                    for (w, d) in p.logits_mut(&ctx).iter_mut().zip(&delta) {
                        *w += d;
                    }
                }
            }
        }
    }
    p.bump_version(1);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub env: Environment,
    pub context_len: usize,
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub minibatch_count: usize,
    pub staleness: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub warmup_steps: usize,
    pub global_steps: usize,
    pub seed: u64,
    pub t_max: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: SumMod(B=4, d=3), N=64, G=8, M=16, t_max=16.
    pub fn desk_default(objective: ObjectiveSpec) -> Self {
        Self {
            objective,
            env: Environment::sum_mod(4, 3, 8, 0).expect("valid default env"),
            context_len: 3,
            prompts_per_batch: 64,
            group_size: 8,
            minibatch_count: 16,
            staleness: 0,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            warmup_steps: 10,
            global_steps: 60,
            seed: 1,
            t_max: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        let positive = [
            ("context_len", self.context_len),
            ("prompts_per_batch", self.prompts_per_batch),
            ("minibatch_count", self.minibatch_count),
            ("global_steps", self.global_steps),
            ("t_max", self.t_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !self.prompts_per_batch.is_multiple_of(self.minibatch_count) {
            return Err(Error::Config(
                "prompts_per_batch must be divisible by minibatch_count".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                return Err(Error::Config("adam needs beta1, beta2 in [0,1) and eps > 0".into()));
            }
        }
        Ok(())
    }

    /// Updates per global step.
    pub fn updates_per_step(&self) -> usize {
        self.minibatch_count
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub global_step: usize,
    pub update_index: usize,
    pub policy_version: u64,
    pub behavior_version: u64,
    pub mean_reward: f64,
    pub mean_token_entropy: f64,
    pub clip_fraction: f64,
    pub mask_fraction: f64,
    pub degenerate_group_fraction: f64,
    pub mean_abs_log_ratio: f64,
    pub max_abs_log_ratio: f64,
    pub grad_norm: f64,
}

impl TrainRecord {
    pub const HEADER: [&'static str; 12] = [
        "global_step",
        "update_index",
        "policy_version",
        "behavior_version",
        "mean_reward",
        "mean_token_entropy",
        "clip_fraction",
        "mask_fraction",
        "degenerate_group_fraction",
        "mean_abs_log_ratio",
        "max_abs_log_ratio",
        "grad_norm",
    ];

    /// `(name, value)` for every numeric metric column after the two indices.
    pub fn metrics(&self) -> [(&'static str, f64); 10] {
        [
            ("policy_version", self.policy_version as f64),
            ("behavior_version", self.behavior_version as f64),
            ("mean_reward", self.mean_reward),
            ("mean_token_entropy", self.mean_token_entropy),
            ("clip_fraction", self.clip_fraction),
            ("mask_fraction", self.mask_fraction),
            ("degenerate_group_fraction", self.degenerate_group_fraction),
            ("mean_abs_log_ratio", self.mean_abs_log_ratio),
            ("max_abs_log_ratio", self.max_abs_log_ratio),
            ("grad_norm", self.grad_norm),
        ]
    }
}

/// A batch waiting in the staleness buffer.
#[derive(Debug, Clone)]
pub struct BufferedBatch {
    pub generated_at: i64,
    pub behavior_version: u64,
    pub groups: Vec<RolloutGroup>,
}

/// FIFO of sampled batches trained `delay` global steps after generation.
#[derive(Debug, Clone)]
pub struct StalenessBuffer {
    delay: usize,
    queue: VecDeque<BufferedBatch>,
}

impl StalenessBuffer {
    pub fn new(delay: usize) -> Self {
        Self {
            delay,
            queue: VecDeque::with_capacity(delay + 1),
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn push(&mut self, batch: BufferedBatch) {
        self.queue.push_back(batch);
    }

    /// Pops the oldest batch once `delay + 1` batches are queued.
    pub fn pop_ready(&mut self) -> Option<BufferedBatch> {
        if self.queue.len() > self.delay {
            self.queue.pop_front()
        } else {
            None
        }
    }
}

/// Checks `current - behavior ∈ [U·n, U·(n+1) - 1]`.
pub fn check_lag(current: u64, behavior: u64, updates_per_step: usize, delay: usize) -> Result<()> {
    let u = updates_per_step as u64;
    let n = delay as u64;
    let lag = current.checked_sub(behavior);
    match lag {
        Some(l) if l >= u * n && l < u * (n + 1) => Ok(()),
        _ => Err(Error::Input(format!(
            "staleness invariant violated: policy v{current}, behavior v{behavior}, U={u}, n={n}"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub policy: PolicyTable,
}

/// Builds a rayon pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be a positive integer")));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Seed of rollout `(prompt_index, sample_index)` in batch `generation_step`.
pub fn rollout_seed(run_seed: u64, generation_step: u64, prompt_index: u64, sample_index: u64) -> u64 {
    seed::mix(&[run_seed, generation_step, prompt_index, sample_index])
}

/// Samples one batch of `N × G` rollouts from `policy`.
pub fn generate_batch(
    cfg: &TrainConfig,
    policy: &PolicyTable,
    generation_step: u64,
    mode: Accumulation,
) -> Result<Vec<RolloutGroup>> {
    let n = cfg.prompts_per_batch as u64;
    let one_group = |i: u64| -> Result<RolloutGroup> {
        let prompt = cfg.env.gen_prompt(generation_step * n + i);
        let rollouts = (0..cfg.group_size as u64)
            .map(|j| {
                let seed = rollout_seed(cfg.seed, generation_step, i, j);
                let s = policy.sample_rollout(&prompt.tokens, cfg.t_max, seed);
                let reward = cfg.env.answer_predicate(&s.tokens, prompt.answer);
                Rollout::new(prompt.tokens.clone(), s.tokens, s.logprobs, reward, policy.version(), seed)
            })
            .collect::<Result<Vec<_>>>()?;
        RolloutGroup::new(rollouts)
    };
    match mode {
        Accumulation::Sequential => (0..n).map(one_group).collect(),
        Accumulation::Parallel => (0..n).into_par_iter().map(one_group).collect(),
    }
}

fn mean_token_entropy(policy: &PolicyTable, groups: &[RolloutGroup]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for g in groups {
        for r in g.rollouts() {
            for ctx in policy.response_contexts(&r.prompt, &r.response) {
                sum += policy.token_entropy(&ctx);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Runs the full loop. `Accumulation::Sequential` is the bitwise-reproducible
/// mode; `Parallel` samples and accumulates on the rayon pool.
pub fn run_training(cfg: &TrainConfig, mode: Accumulation) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.env.vocab_size() < 2 {
        return input("environment vocabulary too small");
    }
    match mode {
        Accumulation::Sequential => run_training_inner(cfg, mode),
        Accumulation::Parallel => thread_pool()?.install(|| run_training_inner(cfg, mode)),
    }
}

fn run_training_inner(cfg: &TrainConfig, mode: Accumulation) -> Result<TrainOutcome> {
    let u = cfg.updates_per_step();
    let mut policy = PolicyTable::new(cfg.env.vocab_size(), cfg.context_len)?;
    let mut opt = OptState::new(cfg.optimizer, cfg.warmup_steps);
    let mut buffer = StalenessBuffer::new(cfg.staleness);
    let mut records = Vec::with_capacity(cfg.global_steps * u);

    for k in 0..cfg.staleness {
        let groups = generate_batch(cfg, &policy, k as u64, mode)?;
        buffer.push(BufferedBatch {
            generated_at: k as i64 - cfg.staleness as i64,
            behavior_version: policy.version(),
            groups,
        });
        policy.bump_version(u as u64);
    }

    let per_mini = cfg.prompts_per_batch / cfg.minibatch_count;
    for step in 0..cfg.global_steps {
        let gen_index = (cfg.staleness + step) as u64;
        let groups = generate_batch(cfg, &policy, gen_index, mode)?;
        buffer.push(BufferedBatch {
            generated_at: step as i64,
            behavior_version: policy.version(),
            groups,
        });
        let batch = buffer
            .pop_ready()
            .expect("buffer holds delay + 1 batches after push");
        let batch_reward =
            batch.groups.iter().map(RolloutGroup::mean_reward).sum::<f64>() / batch.groups.len() as f64;

        for (j, mini) in batch.groups.chunks(per_mini).enumerate() {
            let update_index = step * u + j;
            let abort = |e: Error| Error::Training {
                step,
                update: update_index,
                source: Box::new(e),
            };
            check_lag(policy.version(), batch.behavior_version, u, cfg.staleness).map_err(abort)?;

            let plan = token_coefficients(&cfg.objective, mini, &policy).map_err(abort)?;
            let acc = accumulate(&plan, &policy, mode);
            let total = acc.total_token_count as f64;
            let degenerate = mini.iter().filter(|g| g.is_degenerate()).count() as f64 / mini.len() as f64;
            records.push(TrainRecord {
                global_step: step,
                update_index,
                policy_version: policy.version(),
                behavior_version: batch.behavior_version,
                mean_reward: batch_reward,
                mean_token_entropy: mean_token_entropy(&policy, mini),
                clip_fraction: acc.clipped_token_count as f64 / total,
                mask_fraction: acc.masked_token_count as f64 / total,
                degenerate_group_fraction: degenerate,
                mean_abs_log_ratio: acc.mean_abs_log_ratio,
                max_abs_log_ratio: acc.max_abs_log_ratio,
                grad_norm: acc.grad.norm_l2(),
            });
            apply_update(&mut policy, &acc.grad, &mut opt, cfg.learning_rate).map_err(abort)?;
        }
    }
    Ok(TrainOutcome { records, policy })
}

/// Runs independent configs on the pool, each in sequential mode, so every
/// outcome is identical to a standalone deterministic run.
pub fn run_many(cfgs: &[TrainConfig]) -> Result<Vec<Result<TrainOutcome>>> {
    let pool = thread_pool()?;
    Ok(pool.install(|| {
        cfgs.par_iter()
            .map(|c| run_training(c, Accumulation::Sequential))
            .collect()
    }))
}

/// Fraction of prompts solved by at least one of `k` attempts. Attempt `j` of
/// prompt `i` always uses the same seed, so larger `k` reuses smaller-`k` draws.
pub fn evaluate_pass_at_k(
    p: &PolicyTable,
    env: &Environment,
    k: usize,
    prompt_indices: &[u64],
    seed: u64,
    t_max: usize,
) -> Result<f64> {
    if k == 0 || prompt_indices.is_empty() {
        return input("pass@k needs k >= 1 and at least one prompt");
    }
    let solved = prompt_indices
        .iter()
        .filter(|&&idx| {
            let prompt = env.gen_prompt(idx);
            (0..k as u64).any(|j| {
                let s = p.sample_rollout(&prompt.tokens, t_max, seed::mix(&[seed, idx, j]));
                env.answer_predicate(&s.tokens, prompt.answer) == 1.0
            })
        })
        .count();
    Ok(solved as f64 / prompt_indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveKind;

    #[test]
    fn sgd_step() {
        let mut p = PolicyTable::new(3, 1).unwrap();
        let ctx = p.context(&[]);
        let mut g = Gradient::new();
        g.add_entry(&ctx, 1, 3, 1.0);
        let mut opt = OptState::new(OptimizerKind::Sgd, 0);
        apply_update(&mut p, &g, &mut opt, 0.1).unwrap();
        assert_eq!(p.logits(&ctx), vec![0.0, 0.1, 0.0]);
        assert_eq!(p.version(), 1);
    }

    #[test]
    fn zero_gradient_still_bumps_version() {
        let mut p = PolicyTable::new(3, 1).unwrap();
        p.logits_mut(&p.context(&[0])).copy_from_slice(&[0.2, 0.0, -0.1]);
        let before = p.clone();
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam_default()] {
            let mut q = before.clone();
            let mut opt = OptState::new(kind, 0);
            apply_update(&mut q, &Gradient::new(), &mut opt, 0.5).unwrap();
            assert!(q.same_parameters(&before));
            assert_eq!(q.version(), 1);
        }
    }

    #[test]
    fn adam_step_converges_to_lr() {
        let mut p = PolicyTable::new(2, 1).unwrap();
        let ctx = p.context(&[]);
        let mut g = Gradient::new();
        g.add_entry(&ctx, 0, 2, 0.3);
        let mut opt = OptState::new(OptimizerKind::adam_default(), 0);
        let lr = 0.01;
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p.logits(&ctx)[0];
            apply_update(&mut p, &g, &mut opt, lr).unwrap();
            last = p.logits(&ctx)[0] - before;
        }
        assert!((last - lr).abs() / lr < 0.01, "step {last}");
        assert_eq!(p.version(), 1000);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut opt = OptState::new(OptimizerKind::Sgd, 4);
        let lrs: Vec<f64> = (0..6)
            .map(|_| {
                let lr = opt.scheduled_lr(1.0);
                opt.step += 1;
                lr
            })
            .collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = PolicyTable::new(2, 1).unwrap();
        let mut g = Gradient::new();
        g.add_entry(&p.context(&[]), 0, 2, f64::NAN);
        let mut opt = OptState::new(OptimizerKind::Sgd, 0);
        assert!(apply_update(&mut p, &g, &mut opt, 0.1).is_err());
        assert_eq!(p.version(), 0);
    }

    #[test]
    fn buffer_is_fifo_with_delay() {
        let mut b = StalenessBuffer::new(2);
        let mk = |i: i64| BufferedBatch {
            generated_at: i,
            behavior_version: i as u64,
            groups: vec![],
        };
        b.push(mk(0));
        assert!(b.pop_ready().is_none());
        b.push(mk(1));
        assert!(b.pop_ready().is_none());
        b.push(mk(2));
        assert_eq!(b.pop_ready().unwrap().generated_at, 0);
        b.push(mk(3));
        assert_eq!(b.pop_ready().unwrap().generated_at, 1);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn lag_bounds() {
        assert!(check_lag(32, 0, 16, 2).is_ok());
        assert!(check_lag(47, 0, 16, 2).is_ok());
        assert!(check_lag(48, 0, 16, 2).is_err());
        assert!(check_lag(31, 0, 16, 2).is_err());
        assert!(check_lag(0, 5, 16, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::desk_default(ObjectiveSpec::default_for(ObjectiveKind::MinPro));
        cfg.validate().unwrap();
        cfg.minibatch_count = 7;
        assert!(cfg.validate().is_err());
        cfg.minibatch_count = 16;
        cfg.group_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pass_at_k_certain_policy() {
        let env = Environment::echo(3, 0).unwrap();
        let mut p = PolicyTable::new(3, 1).unwrap();
        for v in 0..2u32 {
            p.logits_mut(&p.context(&[v])).copy_from_slice(&[0.0, 0.0, 0.0]);
            p.logits_mut(&p.context(&[v]))[v as usize] = 1e6;
        }
        let prompts: Vec<u64> = (0..20).collect();
        for k in [1, 2, 5] {
            assert_eq!(evaluate_pass_at_k(&p, &env, k, &prompts, 3, 4).unwrap(), 1.0);
        }
    }

    #[test]
    fn pass_at_k_monotone_in_k() {
        let env = Environment::echo(4, 0).unwrap();
        let p = PolicyTable::new(4, 1).unwrap();
        let prompts: Vec<u64> = (0..100).collect();
        let vals: Vec<f64> = (1..6)
            .map(|k| evaluate_pass_at_k(&p, &env, k, &prompts, 9, 3).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{vals:?}");
    }
}
