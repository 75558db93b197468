//! Tabular context-window autoregressive softmax policy.
//!
//! Token ids run `0..V`; id `V-1` is EOS and id `V` is the reserved PAD used
//! to left-pad contexts. A context is the last `k` tokens of
//! `prompt ⊕ response-so-far`. Missing contexts behave as all-zero logits
//! (the uniform distribution) until something writes to them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input, Result};

pub type Token = u32;

/// Exactly `k` token ids in `0..=V`, with PAD only as a contiguous left prefix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Context(Vec<Token>);

impl Context {
    /// Window over the tail of `history`, left-padded with `pad`.
    pub fn from_history(history: &[Token], k: usize, pad: Token) -> Self {
        let take = history.len().min(k);
        let mut tokens = Vec::with_capacity(k);
        tokens.resize(k - take, pad);
        tokens.extend_from_slice(&history[history.len() - take..]);
        Context(tokens)
    }

    /// Validating constructor used by decoders.
    pub fn new(tokens: Vec<Token>, k: usize, vocab_size: usize) -> Result<Self> {
        if tokens.len() != k {
            return input(format!("context has {} tokens, expected {k}", tokens.len()));
        }
        let pad = vocab_size as Token;
        let mut seen_real = false;
        for &t in &tokens {
            if t > pad {
                return input(format!("context token {t} exceeds PAD id {pad}"));
            }
            if t == pad && seen_real {
                return input("PAD appears after a real token in context");
            }
            seen_real |= t != pad;
        }
        Ok(Context(tokens))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&l| l - log_z).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Sparse gradient in the same index space as [`PolicyTable`] logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<Context, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&self, ctx: &Context) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn get(&self, ctx: &Context, token: Token) -> f64 {
        self.rows
            .get(ctx)
            .map_or(0.0, |r| r.get(token as usize).copied().unwrap_or(0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.rows.iter().map(|(c, r)| (c, r.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self[ctx] += scale * row`.
    pub fn add_row(&mut self, ctx: &Context, row: &[f64], scale: f64) {
        let dst = self
            .rows
            .entry(ctx.clone())
            .or_insert_with(|| vec![0.0; row.len()]);
        for (d, &r) in dst.iter_mut().zip(row) {
            *d += scale * r;
        }
    }

    pub fn add_entry(&mut self, ctx: &Context, token: Token, vocab_size: usize, value: f64) {
        let dst = self
            .rows
            .entry(ctx.clone())
            .or_insert_with(|| vec![0.0; vocab_size]);
        dst[token as usize] += value;
    }

    /// `self += scale * other`, visiting rows in key order.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (ctx, row) in &other.rows {
            self.add_row(ctx, row, scale);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute entrywise difference; missing rows count as zero.
    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        let mut worst: f64 = 0.0;
        for (ctx, row) in &self.rows {
            for (v, &x) in row.iter().enumerate() {
                worst = worst.max((x - other.get(ctx, v as Token)).abs());
            }
        }
        for (ctx, row) in &other.rows {
            if !self.rows.contains_key(ctx) {
                worst = worst.max(row.iter().fold(0.0, |m: f64, x| m.max(x.abs())));
            }
        }
        worst
    }

    /// Euclidean norm of `self - other`.
    pub fn diff_norm_l2(&self, other: &Gradient) -> f64 {
        let mut acc = 0.0;
        for (ctx, row) in &self.rows {
            for (v, &x) in row.iter().enumerate() {
                let d = x - other.get(ctx, v as Token);
                acc += d * d;
            }
        }
        for (ctx, row) in &other.rows {
            if !self.rows.contains_key(ctx) {
                acc += row.iter().map(|x| x * x).sum::<f64>();
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.rows.values().flat_map(|r| r.iter()).all(|x| x.is_finite())
    }
}

/// A sampled response with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
}

/// The tabular policy θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    vocab_size: usize,
    context_len: usize,
    logits: BTreeMap<Context, Vec<f64>>,
    version: u64,
}

impl PolicyTable {
    pub fn new(vocab_size: usize, context_len: usize) -> Result<Self> {
        if vocab_size == 0 || context_len == 0 {
            return input("vocab_size and context_len must be positive");
        }
        Ok(Self {
            vocab_size,
            context_len,
            logits: BTreeMap::new(),
            version: 0,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn eos(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    pub fn pad(&self) -> Token {
        self.vocab_size as Token
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self, by: u64) {
        self.version += by;
    }

    pub fn context(&self, history: &[Token]) -> Context {
        Context::from_history(history, self.context_len, self.pad())
    }

    /// Stored logits for `ctx`, or `None` when the context is still lazily zero.
    pub fn stored_logits(&self, ctx: &Context) -> Option<&[f64]> {
        self.logits.get(ctx).map(Vec::as_slice)
    }

    pub fn logits(&self, ctx: &Context) -> Vec<f64> {
        self.logits
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    /// Mutable access that materializes the row on first touch.
    pub fn logits_mut(&mut self, ctx: &Context) -> &mut [f64] {
        let v = self.vocab_size;
        self.logits
            .entry(ctx.clone())
            .or_insert_with(|| vec![0.0; v])
    }

    /// Overwrite one context row. The row must have length V and be finite.
    pub fn set_logits(&mut self, ctx: Context, row: Vec<f64>) -> Result<()> {
        if row.len() != self.vocab_size {
            return input(format!(
                "logit row has length {}, expected {}",
                row.len(),
                self.vocab_size
            ));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return input("logit row contains a non-finite value");
        }
        if ctx.tokens().len() != self.context_len {
            return input("context length does not match the table");
        }
        self.logits.insert(ctx, row);
        Ok(())
    }

    /// Stored rows in context order.
    pub fn entries(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.logits.iter().map(|(c, r)| (c, r.as_slice()))
    }

    /// True when both tables assign identical logits to every context,
    /// treating unstored rows as zero.
    pub fn same_parameters(&self, other: &PolicyTable) -> bool {
        if self.vocab_size != other.vocab_size || self.context_len != other.context_len {
            return false;
        }
        let zero = vec![0.0; self.vocab_size];
        let check = |a: &PolicyTable, b: &PolicyTable| {
            a.logits.iter().all(|(ctx, row)| {
                let other_row = b.logits.get(ctx).unwrap_or(&zero);
                row == other_row
            })
        };
        check(self, other) && check(other, self)
    }

    pub fn token_distribution(&self, ctx: &Context) -> Vec<f64> {
        match self.logits.get(ctx) {
            Some(row) => softmax(row),
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
        }
    }

    pub fn token_log_distribution(&self, ctx: &Context) -> Vec<f64> {
        match self.logits.get(ctx) {
            Some(row) => log_softmax(row),
            None => vec![-(self.vocab_size as f64).ln(); self.vocab_size],
        }
    }

    pub fn log_prob(&self, ctx: &Context, token: Token) -> f64 {
        self.token_log_distribution(ctx)[token as usize]
    }

    fn check_tokens(&self, tokens: &[Token], what: &str) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return input(format!(
                "{what} token {bad} out of range for vocab size {}",
                self.vocab_size
            ));
        }
        Ok(())
    }

    /// Contexts seen at each response position, paired with the emitted token.
    pub fn response_contexts(&self, prompt: &[Token], response: &[Token]) -> Vec<Context> {
        let mut history = Vec::with_capacity(prompt.len() + response.len());
        history.extend_from_slice(prompt);
        let mut out = Vec::with_capacity(response.len());
        for &tok in response {
            out.push(self.context(&history));
            history.push(tok);
        }
        out
    }

    /// Per-token log π(o_t | context_t).
    pub fn response_logprobs(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(prompt, "prompt")?;
        self.check_tokens(response, "response")?;
        Ok(self
            .response_contexts(prompt, response)
            .iter()
            .zip(response)
            .map(|(ctx, &tok)| self.log_prob(ctx, tok))
            .collect())
    }

    /// Σ_t log π(o_t | context_t).
    pub fn sequence_logprob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        if response.is_empty() {
            return input("response must be non-empty");
        }
        Ok(self.response_logprobs(prompt, response)?.iter().sum())
    }

    /// Autoregressive sampling at temperature 1, stopping at EOS or `t_max`.
    pub fn sample_rollout(&self, prompt: &[Token], t_max: usize, seed: u64) -> SampledResponse {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut history = prompt.to_vec();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let eos = self.eos();
        while tokens.len() < t_max {
            let ctx = self.context(&history);
            let probs = self.token_distribution(&ctx);
            let tok = sample_index(&probs, rng.random::<f64>()) as Token;
            logprobs.push(self.log_prob(&ctx, tok));
            tokens.push(tok);
            history.push(tok);
            if tok == eos {
                break;
            }
        }
        SampledResponse { tokens, logprobs }
    }

    /// ∇ log π(v | ctx) with respect to the row `logits[ctx]`: onehot(v) − π(·|ctx).
    pub fn score_row(&self, ctx: &Context, token: Token) -> Vec<f64> {
        let mut row = self.token_distribution(ctx);
        row.iter_mut().for_each(|p| *p = -*p);
        row[token as usize] += 1.0;
        row
    }

    /// The score as a sparse gradient with a single nonzero row.
    pub fn score(&self, ctx: &Context, token: Token) -> Gradient {
        let mut g = Gradient::new();
        g.add_row(ctx, &self.score_row(ctx, token), 1.0);
        g
    }

    /// `grad += scale * score(ctx, token)`.
    pub fn accumulate_score(&self, grad: &mut Gradient, ctx: &Context, token: Token, scale: f64) {
        grad.add_row(ctx, &self.score_row(ctx, token), scale);
    }

    pub fn token_entropy(&self, ctx: &Context) -> f64 {
        let probs = self.token_distribution(ctx);
        let logp = self.token_log_distribution(ctx);
        -probs
            .iter()
            .zip(&logp)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * l)
            .sum::<f64>()
    }
}

/// Inverse-CDF draw; `u` in [0, 1).
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_with(v: usize, row: Vec<f64>) -> (PolicyTable, Context) {
        let mut p = PolicyTable::new(v, 1).unwrap();
        let ctx = p.context(&[]);
        p.set_logits(ctx.clone(), row).unwrap();
        (p, ctx)
    }

    #[test]
    fn uniform_distribution_from_zero_logits() {
        let (p, ctx) = table_with(3, vec![0.0; 3]);
        for x in p.token_distribution(&ctx) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_softmax() {
        let (p, ctx) = table_with(3, vec![2f64.ln(), 0.0, 0.0]);
        let d = p.token_distribution(&ctx);
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert!((d[1] - 0.25).abs() < 1e-15);
        assert!((d[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn missing_context_is_uniform() {
        let p = PolicyTable::new(4, 2).unwrap();
        let d = p.token_distribution(&p.context(&[1, 2, 3]));
        assert_eq!(d, vec![0.25; 4]);
    }

    #[test]
    fn context_window_pads_left() {
        let ctx = Context::from_history(&[7], 3, 9);
        assert_eq!(ctx.tokens(), &[9, 9, 7]);
        let ctx = Context::from_history(&[1, 2, 3, 4], 2, 9);
        assert_eq!(ctx.tokens(), &[3, 4]);
        assert!(Context::new(vec![3, 1, 3], 3, 3).is_err());
        assert!(Context::new(vec![3, 3, 1], 3, 3).is_ok());
        assert!(Context::new(vec![4, 3, 1], 3, 3).is_err());
    }

    #[test]
    fn uniform_sequence_logprob() {
        let p = PolicyTable::new(3, 1).unwrap();
        let lp = p.sequence_logprob(&[0], &[1, 0]).unwrap();
        assert!((lp - 2.0 * -(3f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn eos_only_response() {
        let (p, ctx) = table_with(3, vec![0.3, -0.2, 0.9]);
        let lp = p.sequence_logprob(&[], &[2]).unwrap();
        assert_eq!(lp, p.log_prob(&ctx, 2));
    }

    #[test]
    fn sequence_logprob_rejects_bad_input() {
        let p = PolicyTable::new(3, 1).unwrap();
        assert!(p.sequence_logprob(&[0], &[]).is_err());
        assert!(p.sequence_logprob(&[0], &[3]).is_err());
        assert!(p.sequence_logprob(&[5], &[1]).is_err());
    }

    #[test]
    fn saturated_policy_repeats_token() {
        let mut p = PolicyTable::new(3, 1).unwrap();
        for h in [vec![], vec![1]] {
            let ctx = p.context(&h);
            p.set_logits(ctx, vec![0.0, 1e6, 0.0]).unwrap();
        }
        let s = p.sample_rollout(&[], 5, 11);
        assert_eq!(s.tokens, vec![1; 5]);
        assert!(s.logprobs.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn sampling_is_deterministic_and_matches_logprobs() {
        let mut p = PolicyTable::new(4, 2).unwrap();
        p.logits_mut(&p.context(&[1]))
            .copy_from_slice(&[0.5, -0.1, 0.2, -1.0]);
        let a = p.sample_rollout(&[1], 12, 99);
        let b = p.sample_rollout(&[1], 12, 99);
        assert_eq!(a, b);
        let recomputed = p.response_logprobs(&[1], &a.tokens).unwrap();
        assert_eq!(recomputed, a.logprobs);
        assert!(a.tokens.len() <= 12);
        if a.tokens.len() < 12 {
            assert_eq!(*a.tokens.last().unwrap(), p.eos());
        }
    }

    #[test]
    fn score_row_onehot_minus_uniform() {
        let (p, ctx) = table_with(3, vec![0.0; 3]);
        let row = p.score_row(&ctx, 1);
        let expect = [-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0];
        for (a, b) in row.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(row.iter().sum::<f64>().abs() <= 1e-15);
        let g = p.score(&ctx, 1);
        assert_eq!(g.iter().count(), 1);
    }

    #[test]
    fn entropy_cases() {
        let p = PolicyTable::new(4, 1).unwrap();
        let ctx = p.context(&[]);
        assert!((p.token_entropy(&ctx) - 4f64.ln()).abs() < 1e-15);

        let (p, ctx) = table_with(3, vec![20.0, 0.0, 0.0]);
        assert!(p.token_entropy(&ctx) < 1e-4);

        let (p, ctx) = table_with(3, vec![2f64.ln(), 0.0, 0.0]);
        let expect = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((p.token_entropy(&ctx) - expect).abs() < 1e-15);
    }

    #[test]
    fn set_logits_validates() {
        let mut p = PolicyTable::new(3, 1).unwrap();
        let ctx = p.context(&[]);
        assert!(p.set_logits(ctx.clone(), vec![0.0; 2]).is_err());
        assert!(p.set_logits(ctx, vec![0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn same_parameters_treats_missing_as_zero() {
        let a = PolicyTable::new(3, 1).unwrap();
        let mut b = a.clone();
        b.logits_mut(&b.context(&[0]));
        assert!(a.same_parameters(&b));
        b.logits_mut(&b.context(&[0]))[1] = 0.5;
        assert!(!a.same_parameters(&b));
    }
}
