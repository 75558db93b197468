//! Gradient estimators for off-policy sequence objectives.
//!
//! Every objective follows the same pipeline over a mini-batch of rollout
//! groups:
//!
//! 1. recompute per-token log-probabilities under the current policy,
//! 2. build a [`RatioTrace`] against the stored behavior log-probabilities,
//! 3. turn the trace into one coefficient `c_t` per token (zero for tokens
//!    that are hard-clipped, masked, or filtered),
//! 4. accumulate `w · c_t · Â · ∇log π(o_t | ·)` where `w` is the
//!    aggregation weight (`1/Σ|o|` for token-mean, `1/(N·|o_i|)` for seq-mean).
//!
//! Coefficients are computed once from frozen ratios and multiply the
//! analytic score, which is exactly the stop-gradient semantics of the
//! soft-clipped objectives. For hard-clipped objectives the same product is
//! the derivative of `min(ρÂ, clip(ρ)Â)` away from the clip boundary.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{Rollout, RolloutGroup};
use crate::error::{input, Error, Result};
use crate::policy::{Context, Gradient, PolicyTable, Token};
use crate::ratios::{compute_trace, hard_clip_gate, soft_clip_coeff, ClipRange, Gate, RatioTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Reinforce,
    Grpo,
    Gspo,
    Cispo,
    M2po,
    #[serde(rename = "minpro")]
    MinPro,
    PrefixDirect,
    PrefixFilter,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 8] = [
        ObjectiveKind::Reinforce,
        ObjectiveKind::Grpo,
        ObjectiveKind::Gspo,
        ObjectiveKind::Cispo,
        ObjectiveKind::M2po,
        ObjectiveKind::MinPro,
        ObjectiveKind::PrefixDirect,
        ObjectiveKind::PrefixFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Reinforce => "reinforce",
            ObjectiveKind::Grpo => "grpo",
            ObjectiveKind::Gspo => "gspo",
            ObjectiveKind::Cispo => "cispo",
            ObjectiveKind::M2po => "m2po",
            ObjectiveKind::MinPro => "minpro",
            ObjectiveKind::PrefixDirect => "prefix_direct",
            ObjectiveKind::PrefixFilter => "prefix_filter",
        }
    }

    pub fn uses_clip(self) -> bool {
        !matches!(self, ObjectiveKind::Reinforce | ObjectiveKind::M2po)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    TokenMean,
    SeqMean,
}

/// Algorithm choice plus exactly the hyperparameters it needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub clip: Option<ClipRange>,
    pub m2_budget: Option<f64>,
    pub filter_quantile: Option<f64>,
    pub aggregation: Aggregation,
}

pub const GRPO_CLIP: ClipRange = ClipRange {
    eps_low: 0.2,
    eps_high: 0.28,
};
pub const GSPO_CLIP: ClipRange = ClipRange {
    eps_low: 2e-3,
    eps_high: 2e-3,
};
/// Shared by CISPO, MinPRO and the prefix-ratio variants: bounds `[0, 5]`.
pub const SOFT_CLIP: ClipRange = ClipRange {
    eps_low: 1.0,
    eps_high: 4.0,
};
pub const M2_BUDGET: f64 = 0.04;
pub const FILTER_QUANTILE: f64 = 0.01;

impl ObjectiveSpec {
    /// Default hyperparameters for `kind`.
    pub fn default_for(kind: ObjectiveKind) -> Self {
        let clip = match kind {
            ObjectiveKind::Reinforce | ObjectiveKind::M2po => None,
            ObjectiveKind::Grpo => Some(GRPO_CLIP),
            ObjectiveKind::Gspo => Some(GSPO_CLIP),
            ObjectiveKind::Cispo
            | ObjectiveKind::MinPro
            | ObjectiveKind::PrefixDirect
            | ObjectiveKind::PrefixFilter => Some(SOFT_CLIP),
        };
        Self {
            kind,
            clip,
            m2_budget: (kind == ObjectiveKind::M2po).then_some(M2_BUDGET),
            filter_quantile: (kind == ObjectiveKind::PrefixFilter).then_some(FILTER_QUANTILE),
            aggregation: if kind == ObjectiveKind::Gspo {
                Aggregation::SeqMean
            } else {
                Aggregation::TokenMean
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        if self.clip.is_some() != kind.uses_clip() {
            return Err(Error::Config(format!(
                "{kind}: clip range must be {}",
                if kind.uses_clip() { "set" } else { "absent" }
            )));
        }
        if let Some(r) = self.clip {
            ClipRange::new(r.eps_low, r.eps_high).map_err(|e| Error::Config(e.to_string()))?;
        }
        match (kind, self.m2_budget) {
            (ObjectiveKind::M2po, Some(m)) if m.is_finite() && m >= 0.0 => {}
            (ObjectiveKind::M2po, _) => {
                return Err(Error::Config("m2po needs a finite m2_budget >= 0".into()))
            }
            (_, Some(_)) => return Err(Error::Config(format!("{kind}: m2_budget is m2po-only"))),
            _ => {}
        }
        match (kind, self.filter_quantile) {
            (ObjectiveKind::PrefixFilter, Some(q)) if (0.0..1.0).contains(&q) => {}
            (ObjectiveKind::PrefixFilter, _) => {
                return Err(Error::Config("prefix_filter needs filter_quantile in [0,1)".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Config(format!("{kind}: filter_quantile is prefix_filter-only")))
            }
            _ => {}
        }
        if kind == ObjectiveKind::Gspo && self.aggregation != Aggregation::SeqMean {
            return Err(Error::Config("gspo aggregates with seq_mean".into()));
        }
        Ok(())
    }

    fn clip_range(&self) -> Result<ClipRange> {
        self.clip
            .ok_or_else(|| Error::Config(format!("{}: missing clip range", self.kind)))
    }
}

/// What happened to one token's gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenStatus {
    /// Contributes with its unclamped coefficient.
    Kept,
    /// Soft clipping hit a bound; still contributes.
    Clamped,
    /// Hard clipping zeroed the gradient.
    Clipped,
    /// Removed by a mask or filter.
    Masked,
}

/// Per-sequence slice of a [`CoefficientPlan`].
#[derive(Debug, Clone)]
pub struct SequencePlan {
    pub group: usize,
    pub member: usize,
    pub contexts: Vec<Context>,
    pub tokens: Vec<Token>,
    pub advantage: f64,
    /// Aggregation weight applied to each token of this sequence.
    pub weight: f64,
    pub trace: RatioTrace,
    pub coeffs: Vec<f64>,
    pub status: Vec<TokenStatus>,
}

/// Frozen per-token coefficients for one mini-batch.
#[derive(Debug, Clone)]
pub struct CoefficientPlan {
    pub spec: ObjectiveSpec,
    pub sequences: Vec<SequencePlan>,
}

impl CoefficientPlan {
    pub fn count(&self, status: TokenStatus) -> usize {
        self.sequences
            .iter()
            .flat_map(|s| s.status.iter())
            .filter(|&&s| s == status)
            .count()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Gradient plus the diagnostics the trainer logs.
#[derive(Debug, Clone, Default)]
pub struct GradAccum {
    pub grad: Gradient,
    pub clipped_token_count: usize,
    pub total_token_count: usize,
    pub masked_token_count: usize,
    pub mean_abs_log_ratio: f64,
    pub max_abs_log_ratio: f64,
}

/// Fixed-order or rayon-parallel accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    #[default]
    Sequential,
    Parallel,
}

fn build_sequences(
    spec: &ObjectiveSpec,
    batch: &[RolloutGroup],
    current: &PolicyTable,
) -> Result<Vec<SequencePlan>> {
    if batch.is_empty() || batch.iter().all(|g| g.rollouts().is_empty()) {
        return input("empty batch");
    }
    let total_tokens: usize = batch.iter().map(RolloutGroup::token_count).sum();
    let total_seqs: usize = batch.iter().map(|g| g.rollouts().len()).sum();
    let mut out = Vec::with_capacity(total_seqs);
    for (gi, group) in batch.iter().enumerate() {
        for (mi, r) in group.rollouts().iter().enumerate() {
            let logp = current.response_logprobs(&r.prompt, &r.response)?;
            let trace = compute_trace(&logp, &r.behavior_logp)?;
            let weight = match spec.aggregation {
                Aggregation::TokenMean => 1.0 / total_tokens as f64,
                Aggregation::SeqMean => 1.0 / (total_seqs as f64 * r.len() as f64),
            };
            out.push(SequencePlan {
                group: gi,
                member: mi,
                contexts: current.response_contexts(&r.prompt, &r.response),
                tokens: r.response.clone(),
                advantage: group.advantages()[mi],
                weight,
                coeffs: vec![0.0; r.len()],
                status: vec![TokenStatus::Kept; r.len()],
                trace,
            });
        }
    }
    Ok(out)
}

fn soft_status(x: f64, r: ClipRange) -> TokenStatus {
    if x < r.lower() || x > r.upper() {
        TokenStatus::Clamped
    } else {
        TokenStatus::Kept
    }
}

/// Applies a soft clip to `raw(trace, t)` for every token.
fn soft_clip_plan(seqs: &mut [SequencePlan], r: ClipRange, raw: impl Fn(&RatioTrace, usize) -> f64) {
    for s in seqs {
        for t in 0..s.tokens.len() {
            let x = raw(&s.trace, t);
            s.coeffs[t] = soft_clip_coeff(x, r);
            s.status[t] = soft_status(x, r);
        }
    }
}

fn m2po_mask(seqs: &mut [SequencePlan], budget: f64) {
    // (sequence, position, (log ρ)²) in canonical order
    let mut items: Vec<(usize, usize, f64)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.trace
                .log_token_ratio
                .iter()
                .enumerate()
                .map(move |(t, l)| (si, t, l * l))
        })
        .collect();
    let masked = m2_mask_size(&mut items, budget);
    for s in seqs.iter_mut() {
        s.coeffs.copy_from_slice(&s.trace.token_ratio);
    }
    for &(si, t, _) in &items[..masked] {
        seqs[si].coeffs[t] = 0.0;
        seqs[si].status[t] = TokenStatus::Masked;
    }
}

/// Sorts `items` by second moment, largest first, and returns how many of
/// the leading items must be removed for the remaining mean to meet `budget`.
fn m2_mask_size(items: &mut [(usize, usize, f64)], budget: f64) -> usize {
    items.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let n = items.len();
    // suffix[k] = Σ_{j≥k} value_j, summed from the small end
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + items[k].2;
    }
    (0..=n)
        .find(|&k| k == n || suffix[k] / (n - k) as f64 <= budget)
        .unwrap_or(n)
}

/// Drops the lowest `floor(q · N)` tokens by prefix ratio.
fn prefix_filter(seqs: &mut [SequencePlan], quantile: f64) {
    let total: usize = seqs.iter().map(|s| s.tokens.len()).sum();
    let drop = (quantile * total as f64).floor() as usize;
    if drop == 0 {
        return;
    }
    let mut order: Vec<(usize, usize, f64)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.trace
                .log_prefix_ratio
                .iter()
                .enumerate()
                .map(move |(t, &l)| (si, t, l))
        })
        .collect();
    order.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    for &(si, t, _) in &order[..drop] {
        seqs[si].coeffs[t] = 0.0;
        seqs[si].status[t] = TokenStatus::Masked;
    }
}

/// Computes the frozen coefficient of every token for `spec`.
pub fn token_coefficients(
    spec: &ObjectiveSpec,
    batch: &[RolloutGroup],
    current: &PolicyTable,
) -> Result<CoefficientPlan> {
    spec.validate()?;
    let mut seqs = build_sequences(spec, batch, current)?;
    match spec.kind {
        ObjectiveKind::Reinforce => {
            for s in &mut seqs {
                s.coeffs.iter_mut().for_each(|c| *c = 1.0);
            }
        }
        ObjectiveKind::Grpo => {
            let r = spec.clip_range()?;
            for s in &mut seqs {
                for t in 0..s.tokens.len() {
                    let rho = s.trace.token_ratio[t];
                    match hard_clip_gate(rho, s.advantage, r) {
                        Gate::Active => s.coeffs[t] = rho,
                        Gate::Clipped => s.status[t] = TokenStatus::Clipped,
                    }
                }
            }
        }
        ObjectiveKind::Gspo => {
            let r = spec.clip_range()?;
            for s in &mut seqs {
                let ratio = sequence_ratio(&s.trace);
                let gate = hard_clip_gate(ratio, s.advantage, r);
                for t in 0..s.tokens.len() {
                    match gate {
                        Gate::Active => s.coeffs[t] = ratio,
                        Gate::Clipped => s.status[t] = TokenStatus::Clipped,
                    }
                }
            }
        }
        ObjectiveKind::Cispo => {
            soft_clip_plan(&mut seqs, spec.clip_range()?, |tr, t| tr.token_ratio[t]);
        }
        ObjectiveKind::MinPro => {
            soft_clip_plan(&mut seqs, spec.clip_range()?, |tr, t| tr.min_prefix_effective(t));
        }
        ObjectiveKind::PrefixDirect => {
            soft_clip_plan(&mut seqs, spec.clip_range()?, |tr, t| tr.prefix_ratio[t]);
        }
        ObjectiveKind::PrefixFilter => {
            soft_clip_plan(&mut seqs, spec.clip_range()?, |tr, t| tr.token_ratio[t]);
            prefix_filter(&mut seqs, spec.filter_quantile.unwrap_or(0.0));
        }
        ObjectiveKind::M2po => {
            let budget = spec
                .m2_budget
                .ok_or_else(|| Error::Config("m2po needs m2_budget".into()))?;
            m2po_mask(&mut seqs, budget);
        }
    }
    for s in &seqs {
        if let Some(t) = s.coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Numeric {
                what: format!("{} coefficient is {}", spec.kind, s.coeffs[t]),
                group: s.group,
                rollout: s.member,
                position: t,
            });
        }
    }
    Ok(CoefficientPlan {
        spec: *spec,
        sequences: seqs,
    })
}

/// Length-normalized geometric mean of the token ratios.
pub fn sequence_ratio(trace: &RatioTrace) -> f64 {
    let n = trace.len() as f64;
    (trace.log_token_ratio.iter().sum::<f64>() / n).exp()
}

fn accumulate_sequence(plan: &SequencePlan, current: &PolicyTable, grad: &mut Gradient) {
    for t in 0..plan.tokens.len() {
        let scale = plan.weight * plan.coeffs[t] * plan.advantage;
        if scale != 0.0 {
            current.accumulate_score(grad, &plan.contexts[t], plan.tokens[t], scale);
        }
    }
}

/// Sums `w · c_t · Â · score` over a plan.
pub fn accumulate(plan: &CoefficientPlan, current: &PolicyTable, mode: Accumulation) -> GradAccum {
    let grad = match mode {
        Accumulation::Sequential => {
            let mut g = Gradient::new();
            for s in &plan.sequences {
                accumulate_sequence(s, current, &mut g);
            }
            g
        }
        Accumulation::Parallel => plan
            .sequences
            .par_iter()
            .map(|s| {
                let mut g = Gradient::new();
                accumulate_sequence(s, current, &mut g);
                g
            })
            .reduce(Gradient::new, |mut a, b| {
                a.add_scaled(&b, 1.0);
                a
            }),
    };

    let total = plan.total_tokens();
    let abs_logs = plan
        .sequences
        .iter()
        .flat_map(|s| s.trace.log_token_ratio.iter().map(|l| l.abs()));
    let (sum_abs, max_abs) = abs_logs.fold((0.0, 0.0f64), |(s, m), x| (s + x, m.max(x)));
    let clipped = plan.count(TokenStatus::Clipped) + plan.count(TokenStatus::Clamped);
    GradAccum {
        grad,
        clipped_token_count: clipped,
        total_token_count: total,
        masked_token_count: plan.count(TokenStatus::Masked),
        mean_abs_log_ratio: sum_abs / total as f64,
        max_abs_log_ratio: max_abs,
    }
}

/// Gradient of `spec` on `batch` at `current`, accumulated in fixed order.
pub fn compute_gradient(
    spec: &ObjectiveSpec,
    batch: &[RolloutGroup],
    current: &PolicyTable,
) -> Result<GradAccum> {
    compute_gradient_with(spec, batch, current, Accumulation::Sequential)
}

pub fn compute_gradient_with(
    spec: &ObjectiveSpec,
    batch: &[RolloutGroup],
    current: &PolicyTable,
    mode: Accumulation,
) -> Result<GradAccum> {
    let plan = token_coefficients(spec, batch, current)?;
    Ok(accumulate(&plan, current, mode))
}

fn with_kind(spec: &ObjectiveSpec, kind: ObjectiveKind) -> ObjectiveSpec {
    ObjectiveSpec { kind, ..*spec }
}

/// On-policy REINFORCE with group advantages, `c_t = 1`. Unbiased only when
/// the batch was sampled from `current`.
pub fn grad_reinforce(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::Reinforce), batch, current)
}

/// Token-level hard clipping: `ρ_t` inside the trust region, zero outside.
pub fn grad_grpo(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::Grpo), batch, current)
}

/// Sequence-level hard clipping on the geometric-mean ratio.
pub fn grad_gspo(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::Gspo), batch, current)
}

/// Soft clipping of the token ratio; every token keeps a gradient.
pub fn grad_cispo(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::Cispo), batch, current)
}

/// Soft clipping of `ρ̲_t · ρ_t`.
pub fn grad_minpro(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::MinPro), batch, current)
}

/// Unclipped `ρ_t` with a mini-batch second-moment mask.
pub fn grad_m2po(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::M2po), batch, current)
}

/// Soft clipping of the full prefix ratio `ρ_{1:t}`.
pub fn grad_prefix_direct(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::PrefixDirect), batch, current)
}

/// CISPO on the tokens left after dropping the lowest prefix ratios.
pub fn grad_prefix_filter(spec: &ObjectiveSpec, batch: &[RolloutGroup], current: &PolicyTable) -> Result<GradAccum> {
    compute_gradient(&with_kind(spec, ObjectiveKind::PrefixFilter), batch, current)
}

/// Importance weight applied to each token's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    /// `ρ_{1:t}`: the exact off-policy correction.
    Prefix,
    /// `ρ_t`: the token-level relaxation.
    Token,
    /// No correction.
    None,
}

/// Unnormalized `Σ_i Σ_t c_t · A_t · ∇log π(o_t|·)` with per-token advantages
/// supplied by the caller and no clipping.
pub fn grad_importance_weighted(
    correction: Correction,
    rollouts: &[Rollout],
    token_advantages: &[Vec<f64>],
    current: &PolicyTable,
) -> Result<Gradient> {
    if rollouts.is_empty() {
        return input("empty batch");
    }
    if token_advantages.len() != rollouts.len() {
        return input("one advantage vector per rollout is required");
    }
    let mut grad = Gradient::new();
    for (i, (r, adv)) in rollouts.iter().zip(token_advantages).enumerate() {
        if adv.len() != r.len() {
            return input(format!("rollout {i}: advantage length differs from response length"));
        }
        let logp = current.response_logprobs(&r.prompt, &r.response)?;
        let trace = compute_trace(&logp, &r.behavior_logp)?;
        let contexts = current.response_contexts(&r.prompt, &r.response);
        for t in 0..r.len() {
            let c = match correction {
                Correction::Prefix => trace.prefix_ratio[t],
                Correction::Token => trace.token_ratio[t],
                Correction::None => 1.0,
            };
            if !c.is_finite() {
                return Err(Error::Numeric {
                    what: format!("importance weight is {c}"),
                    group: 0,
                    rollout: i,
                    position: t,
                });
            }
            current.accumulate_score(&mut grad, &contexts[t], r.response[t], c * adv[t]);
        }
    }
    Ok(grad)
}

/// The prefix-ratio estimator: `c_t = ρ_{1:t}` with no clipping.
pub fn grad_prefix_exact(
    rollouts: &[Rollout],
    token_advantages: &[Vec<f64>],
    current: &PolicyTable,
) -> Result<Gradient> {
    grad_importance_weighted(Correction::Prefix, rollouts, token_advantages, current)
}

/// Scalar objective whose gradient at the plan's reference point equals the
/// accumulated gradient.
///
/// Hard-clipped objectives (GRPO, GSPO) are evaluated in their ratio form
/// `min(ρÂ, clip(ρ)Â)` and M2PO as `mask · ρ · Â`, recomputing ratios under
/// `at`. Soft-clipped objectives and REINFORCE use the frozen coefficients:
/// `Σ w · c_t · Â · log π_at(o_t|·)`.
pub fn surrogate_objective(plan: &CoefficientPlan, batch: &[RolloutGroup], at: &PolicyTable) -> Result<f64> {
    let mut total = 0.0;
    for s in &plan.sequences {
        let r = &batch[s.group].rollouts()[s.member];
        let logp = at.response_logprobs(&r.prompt, &r.response)?;
        let adv = s.advantage;
        match plan.spec.kind {
            ObjectiveKind::Grpo => {
                let range = plan.spec.clip_range()?;
                for (lp, lb) in logp.iter().zip(&r.behavior_logp) {
                    let rho = (lp - lb).exp();
                    total += s.weight * (rho * adv).min(soft_clip_coeff(rho, range) * adv);
                }
            }
            ObjectiveKind::Gspo => {
                let range = plan.spec.clip_range()?;
                let n = logp.len() as f64;
                let mean_log = logp
                    .iter()
                    .zip(&r.behavior_logp)
                    .map(|(a, b)| a - b)
                    .sum::<f64>()
                    / n;
                let ratio = mean_log.exp();
                total += s.weight * n * (ratio * adv).min(soft_clip_coeff(ratio, range) * adv);
            }
            ObjectiveKind::M2po => {
                for ((lp, lb), st) in logp.iter().zip(&r.behavior_logp).zip(&s.status) {
                    if *st != TokenStatus::Masked {
                        total += s.weight * (lp - lb).exp() * adv;
                    }
                }
            }
            _ => {
                for (c, lp) in s.coeffs.iter().zip(&logp) {
                    total += s.weight * c * adv * lp;
                }
            }
        }
    }
    Ok(total)
}

/// Distance from each ratio a hard or soft clip looks at to the nearest clip
/// bound; `f64::INFINITY` for objectives without bounds.
pub fn boundary_margin(plan: &CoefficientPlan) -> f64 {
    let Some(r) = plan.spec.clip else {
        return f64::INFINITY;
    };
    let dist = |x: f64| (x - r.lower()).abs().min((x - r.upper()).abs());
    let mut margin = f64::INFINITY;
    for s in &plan.sequences {
        match plan.spec.kind {
            ObjectiveKind::Gspo => margin = margin.min(dist(sequence_ratio(&s.trace))),
            kind => {
                for t in 0..s.tokens.len() {
                    let x = match kind {
                        ObjectiveKind::MinPro => s.trace.min_prefix_effective(t),
                        ObjectiveKind::PrefixDirect => s.trace.prefix_ratio[t],
                        _ => s.trace.token_ratio[t],
                    };
                    margin = margin.min(dist(x));
                }
            }
        }
    }
    margin
}
