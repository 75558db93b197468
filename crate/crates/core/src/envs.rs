//! Synthetic verifiable-answer tasks.
//!
//! Both environments reward a response with 1 when its final answer token
//! (the token before EOS, or the last token of a truncated response) equals
//! the prompt's answer, and with 0 otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input, Result};
use crate::policy::Token;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// Prompt `[v]`, answer `v`, for `v` in `0..=V-2`.
    Echo { vocab_size: usize },
    /// Prompt of `digits` base-`base` digits, answer their sum mod `base`.
    /// At most `reasoning_budget` tokens may precede the answer token.
    SumMod {
        base: usize,
        digits: usize,
        reasoning_budget: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Environment {
    pub kind: EnvKind,
    pub dataset_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<Token>,
    pub answer: Token,
}

impl Environment {
    pub fn echo(vocab_size: usize, dataset_seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return input("EchoEnv needs at least one non-EOS token");
        }
        Ok(Self {
            kind: EnvKind::Echo { vocab_size },
            dataset_seed,
        })
    }

    pub fn sum_mod(base: usize, digits: usize, reasoning_budget: usize, dataset_seed: u64) -> Result<Self> {
        if base < 2 || digits == 0 {
            return input("SumModEnv needs base >= 2 and at least one digit");
        }
        Ok(Self {
            kind: EnvKind::SumMod {
                base,
                digits,
                reasoning_budget,
            },
            dataset_seed,
        })
    }

    /// Policy vocabulary size this environment expects; EOS is the last id.
    pub fn vocab_size(&self) -> usize {
        match self.kind {
            EnvKind::Echo { vocab_size } => vocab_size,
            EnvKind::SumMod { base, .. } => base + 1,
        }
    }

    pub fn eos(&self) -> Token {
        (self.vocab_size() - 1) as Token
    }

    fn reasoning_budget(&self) -> Option<usize> {
        match self.kind {
            EnvKind::Echo { .. } => None,
            EnvKind::SumMod { reasoning_budget, .. } => Some(reasoning_budget),
        }
    }

    /// Prompt number `index` of this environment's dataset.
    pub fn gen_prompt(&self, index: u64) -> Prompt {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(&[self.dataset_seed, index]));
        match self.kind {
            EnvKind::Echo { vocab_size } => {
                let v = rng.random_range(0..vocab_size - 1) as Token;
                Prompt {
                    tokens: vec![v],
                    answer: v,
                }
            }
            EnvKind::SumMod { base, digits, .. } => {
                let tokens: Vec<Token> = (0..digits)
                    .map(|_| rng.random_range(0..base) as Token)
                    .collect();
                let answer = self.answer_for(&tokens).expect("generated prompt is valid");
                Prompt { tokens, answer }
            }
        }
    }

    /// The unique correct answer for a prompt produced by this environment.
    pub fn answer_for(&self, prompt: &[Token]) -> Result<Token> {
        match self.kind {
            EnvKind::Echo { vocab_size } => match prompt {
                [v] if (*v as usize) < vocab_size - 1 => Ok(*v),
                _ => input("EchoEnv prompt must be a single non-EOS token"),
            },
            EnvKind::SumMod { base, digits, .. } => {
                if prompt.len() != digits || prompt.iter().any(|&d| d as usize >= base) {
                    return input("SumModEnv prompt has the wrong shape");
                }
                Ok((prompt.iter().map(|&d| d as usize).sum::<usize>() % base) as Token)
            }
        }
    }

    /// 1 iff the response's answer position holds `answer` within the budget.
    pub fn answer_predicate(&self, response: &[Token], answer: Token) -> f64 {
        let eos = self.eos();
        let body = match response.iter().position(|&t| t == eos) {
            Some(i) => &response[..i],
            None => response,
        };
        let Some((&last, reasoning)) = body.split_last() else {
            return 0.0;
        };
        if last != answer {
            return 0.0;
        }
        match self.reasoning_budget() {
            Some(budget) if reasoning.len() > budget => 0.0,
            _ => 1.0,
        }
    }
}
