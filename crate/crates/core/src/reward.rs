//! Synthetic ground-truth rewards over token content.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{EnvSpec, PromptId, Response, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    /// `+1` per position whose token lies in `tokens`.
    TokenCountPositive { tokens: Vec<TokenId> },
    /// `-1` per position whose token lies in `tokens`.
    TokenCountNegative { tokens: Vec<TokenId> },
    /// `+1` per position matching `target`.
    TargetMatch { target: Vec<TokenId> },
    /// `sum_t weights[y_t]`, optionally with a separate table per prompt.
    WeightedTokenSum {
        weights: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        per_prompt: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: RewardKind,
}

impl RewardSpec {
    pub fn new(name: impl Into<String>, kind: RewardKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidRewardSpec {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self, env: &EnvSpec) -> Result<()> {
        let in_vocab = |ts: &[TokenId]| ts.iter().all(|&t| (t as usize) < env.vocab_size);
        match &self.kind {
            RewardKind::TokenCountPositive { tokens } | RewardKind::TokenCountNegative { tokens } => {
                if tokens.is_empty() {
                    return Err(self.invalid("token set is empty"));
                }
                if !in_vocab(tokens) {
                    return Err(self.invalid("token set contains ids outside the vocabulary"));
                }
            }
            RewardKind::TargetMatch { target } => {
                if target.len() != env.response_len {
                    return Err(self.invalid(format!(
                        "target has length {}, responses have length {}",
                        target.len(),
                        env.response_len
                    )));
                }
                if !in_vocab(target) {
                    return Err(self.invalid("target contains ids outside the vocabulary"));
                }
            }
            RewardKind::WeightedTokenSum { weights, per_prompt } => {
                let check = |w: &[f64]| w.len() == env.vocab_size && w.iter().all(|x| x.is_finite());
                if !check(weights) {
                    return Err(self.invalid("weights must be finite with one entry per token"));
                }
                if let Some(tables) = per_prompt {
                    if tables.len() != env.n_prompts || !tables.iter().all(|w| check(w)) {
                        return Err(self.invalid("per-prompt tables must cover every prompt and token"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-token magnitude bound `c`; rewards lie in `[-L c, L c]`.
    pub fn bound_per_token(&self) -> f64 {
        match &self.kind {
            RewardKind::WeightedTokenSum { weights, per_prompt } => {
                let m = |w: &[f64]| w.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                per_prompt
                    .iter()
                    .flatten()
                    .fold(m(weights), |acc, w| acc.max(m(w)))
            }
            _ => 1.0,
        }
    }
}

/// `r*(x, y)` for a single objective.
pub fn eval_reward(spec: &RewardSpec, prompt: PromptId, y: &Response) -> Result<f64> {
    let tokens = y.tokens();
    let count_in = |set: &[TokenId]| tokens.iter().filter(|t| set.contains(t)).count() as f64;
    Ok(match &spec.kind {
        RewardKind::TokenCountPositive { tokens: set } => count_in(set),
        RewardKind::TokenCountNegative { tokens: set } => -count_in(set),
        RewardKind::TargetMatch { target } => {
            if target.len() != tokens.len() {
                return Err(spec.invalid("target length differs from response length"));
            }
            tokens.iter().zip(target).filter(|(a, b)| a == b).count() as f64
        }
        RewardKind::WeightedTokenSum { weights, per_prompt } => {
            let table = match per_prompt {
                Some(tables) => tables
                    .get(prompt.0 as usize)
                    .ok_or_else(|| spec.invalid(format!("no table for prompt {prompt}")))?,
                None => weights,
            };
            let mut total = 0.0;
            for &t in tokens {
                total += *table
                    .get(t as usize)
                    .ok_or_else(|| spec.invalid(format!("no weight for token {t}")))?;
            }
            total
        }
    })
}

/// `r*(x, y) = [r*_1, ..., r*_N]`.
pub fn eval_reward_vector(specs: &[RewardSpec], prompt: PromptId, y: &Response) -> Result<Vec<f64>> {
    specs.iter().map(|s| eval_reward(s, prompt, y)).collect()
}

/// Named reward presets together with the environment they were designed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// `r_1` counts tokens in `{0, 1, 2}`, `r_2` is minus the count of `{6, 7}`.
    #[serde(rename = "toy-2obj")]
    Toy2Obj,
    /// `Toy2Obj` plus `r_3` counting token 4.
    #[serde(rename = "toy-3obj")]
    Toy3Obj,
    /// `r_1` matches the target `[1, 2, 0, 0]`, `r_2` counts non-zero tokens.
    #[serde(rename = "corr-verb")]
    CorrVerb,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "toy-2obj" => Ok(Preset::Toy2Obj),
            "toy-3obj" => Ok(Preset::Toy3Obj),
            "corr-verb" => Ok(Preset::CorrVerb),
            other => Err(Error::Config(format!("unknown reward preset `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy2Obj => "toy-2obj",
            Preset::Toy3Obj => "toy-3obj",
            Preset::CorrVerb => "corr-verb",
        }
    }

    /// Vocabulary size 8, response length 4.
    pub fn env(self, n_prompts: usize, seed: u64) -> EnvSpec {
        EnvSpec::new(8, 4, n_prompts, seed).expect("preset environment is valid")
    }

    pub fn specs(self) -> Vec<RewardSpec> {
        let helpful = RewardSpec::new(
            "helpful",
            RewardKind::TokenCountPositive {
                tokens: vec![0, 1, 2],
            },
        );
        let harmless = RewardSpec::new("harmless", RewardKind::TokenCountNegative { tokens: vec![6, 7] });
        match self {
            Preset::Toy2Obj => vec![helpful, harmless],
            Preset::Toy3Obj => vec![
                helpful,
                harmless,
                RewardSpec::new("humor", RewardKind::TokenCountPositive { tokens: vec![4] }),
            ],
            Preset::CorrVerb => vec![
                RewardSpec::new(
                    "correctness",
                    RewardKind::TargetMatch {
                        target: vec![1, 2, 0, 0],
                    },
                ),
                RewardSpec::new(
                    "verbosity",
                    RewardKind::TokenCountPositive {
                        tokens: (1..8).collect(),
                    },
                ),
            ],
        }
    }
}
