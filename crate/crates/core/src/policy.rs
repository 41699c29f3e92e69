//! Tabular autoregressive policies.
//!
//! A [`TabularPolicy`] stores one logit row per `(prompt, prefix)` state for
//! every prefix shorter than the fixed response length. The conditional
//! next-token distribution at a state is the softmax of its row, so sequence
//! log-probabilities and their gradients are exact, the sample space can be
//! enumerated, and merging policies is a literal convex combination of
//! parameter vectors.
//!
//! States are indexed by the full prefix: the prefix `t_1..t_k` maps to
//! `offset(k) + sum_j t_j * V^(k-j)` where `offset(k) = (V^k - 1) / (V - 1)`.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::weight::WeightVector;

pub type TokenId = u32;

pub const DEFAULT_ENUMERATION_BUDGET: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub u32);

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Sample space description shared by policies, rewards and datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub vocab_size: usize,
    pub response_len: usize,
    pub n_prompts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub enumeration_budget: u128,
}

fn default_budget() -> u128 {
    DEFAULT_ENUMERATION_BUDGET
}

impl EnvSpec {
    pub fn new(vocab_size: usize, response_len: usize, n_prompts: usize, seed: u64) -> Result<Self> {
        let env = Self {
            vocab_size,
            response_len,
            n_prompts,
            seed,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidEnv(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.response_len < 1 {
            return Err(Error::InvalidEnv("response_len must be at least 1".into()));
        }
        if self.n_prompts < 1 {
            return Err(Error::InvalidEnv("at least one prompt is required".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidEnv("vocab_size does not fit a token id".into()));
        }
        // The parameter table holds one row per prefix, so it must fit the
        // same budget as enumeration.
        let size = self.sample_space_size();
        if size > self.enumeration_budget {
            return Err(Error::EnumerationTooLarge {
                size,
                budget: self.enumeration_budget,
            });
        }
        Ok(())
    }

    /// `V^L`, saturating.
    pub fn sample_space_size(&self) -> u128 {
        let mut size: u128 = 1;
        for _ in 0..self.response_len {
            size = size.saturating_mul(self.vocab_size as u128);
        }
        size
    }

    /// Number of prefix states per prompt, `sum_{k<L} V^k`.
    pub fn n_states(&self) -> usize {
        let v = self.vocab_size;
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..self.response_len {
            total += level;
            level *= v;
        }
        total
    }

    pub fn n_params(&self) -> usize {
        self.n_prompts * self.n_states() * self.vocab_size
    }

    pub fn prompts(&self) -> impl Iterator<Item = PromptId> {
        (0..self.n_prompts as u32).map(PromptId)
    }

    pub fn check_prompt(&self, prompt: PromptId) -> Result<()> {
        if (prompt.0 as usize) < self.n_prompts {
            Ok(())
        } else {
            Err(Error::PromptNotFound(prompt.0))
        }
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub fn check_response(&self, y: &Response) -> Result<()> {
        if y.len() != self.response_len {
            return Err(Error::ResponseLength {
                got: y.len(),
                expected: self.response_len,
            });
        }
        self.check_tokens(y.tokens())
    }

    /// State index of `prefix` within a prompt block.
    pub fn state_index(&self, prefix: &[TokenId]) -> Result<usize> {
        if prefix.len() >= self.response_len {
            return Err(Error::PrefixTooLong {
                len: prefix.len(),
                max: self.response_len,
            });
        }
        self.check_tokens(prefix)?;
        let v = self.vocab_size;
        let mut offset = 0usize;
        let mut level = 1usize;
        let mut code = 0usize;
        for &t in prefix {
            offset += level;
            level *= v;
            code = code * v + t as usize;
        }
        Ok(offset + code)
    }

    /// Row offset of `(prompt, state)` in the flat parameter array.
    fn row_offset(&self, prompt: PromptId, state: usize) -> usize {
        (prompt.0 as usize * self.n_states() + state) * self.vocab_size
    }

    /// Row offsets visited when emitting `tokens` one at a time: entry `t` is
    /// the row for the prefix `tokens[..t]`.
    pub(crate) fn path_rows(&self, prompt: PromptId, tokens: &[TokenId]) -> Vec<usize> {
        let v = self.vocab_size;
        let base = prompt.0 as usize * self.n_states();
        let mut rows = Vec::with_capacity(tokens.len());
        let mut offset = 0usize;
        let mut level = 1usize;
        let mut code = 0usize;
        for (t, &tok) in tokens.iter().enumerate() {
            rows.push((base + offset + code) * v);
            if t + 1 < tokens.len() {
                offset += level;
                level *= v;
                code = code * v + tok as usize;
            }
        }
        rows
    }
}

/// A fixed-length token sequence. Ordering is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Response(Vec<TokenId>);

impl Response {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with_token(&self, pos: usize, token: TokenId) -> Self {
        let mut t = self.0.clone();
        t[pos] = token;
        Self(t)
    }
}

impl From<Vec<TokenId>> for Response {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "]")
    }
}

/// Numerically stable `log sum exp`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

/// Sparse gradient accumulator: `(parameter index, value)` pairs, possibly
/// with repeated indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub entries: Vec<(usize, f64)>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, index: usize, value: f64) {
        self.entries.push((index, value));
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, v) in &mut self.entries {
            *v *= factor;
        }
    }

    pub fn extend_scaled(&mut self, other: &SparseGrad, factor: f64) {
        self.entries
            .extend(other.entries.iter().map(|&(i, v)| (i, v * factor)));
    }

    pub fn add_into(&self, dense: &mut [f64], factor: f64) {
        for &(i, v) in &self.entries {
            dense[i] += v * factor;
        }
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n];
        self.add_into(&mut d, 1.0);
        d
    }
}

/// Anything that can produce next-token logits autoregressively.
pub trait Decoder: Sync {
    fn env(&self) -> &EnvSpec;

    /// Unnormalized next-token log-weights at `prefix`.
    fn next_log_weights(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>>;

    fn next_distribution(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(softmax(&self.next_log_weights(prompt, prefix)?))
    }
}

/// Autoregressive sampling from any decoder. Temperature 0 is greedy with
/// lowest-index tie-breaking.
pub fn sample_from<D: Decoder + ?Sized>(
    decoder: &D,
    prompt: PromptId,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<Response> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::InvalidTemperature(temperature));
    }
    let env = decoder.env();
    env.check_prompt(prompt)?;
    let mut tokens = Vec::with_capacity(env.response_len);
    for _ in 0..env.response_len {
        let logits = decoder.next_log_weights(prompt, &tokens)?;
        let token = if temperature == 0.0 {
            argmax_lowest(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            draw_categorical(&softmax(&scaled), rng)
        };
        tokens.push(token as TokenId);
    }
    Ok(Response(tokens))
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn draw_categorical(probs: &[f64], rng: &mut SeededRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Per-state categorical policy over fixed-length responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    env: EnvSpec,
    params: Vec<f64>,
}

impl TabularPolicy {
    /// All-zero logits: the uniform policy.
    pub fn uniform(env: &EnvSpec) -> Self {
        Self {
            env: env.clone(),
            params: vec![0.0; env.n_params()],
        }
    }

    /// Logit `bias` on `token` at every state, zero elsewhere.
    pub fn with_token_bias(env: &EnvSpec, token: TokenId, bias: f64) -> Self {
        let mut p = Self::uniform(env);
        let v = env.vocab_size;
        for row in p.params.chunks_mut(v) {
            row[token as usize] = bias;
        }
        p
    }

    pub fn from_params(env: &EnvSpec, params: Vec<f64>) -> Result<Self> {
        env.validate()?;
        if params.len() != env.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                env.n_params(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteParameter(i));
        }
        Ok(Self {
            env: env.clone(),
            params,
        })
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random_normal(env: &EnvSpec, scale: f64, rng: &mut SeededRng) -> Self {
        let params = (0..env.n_params())
            .map(|_| scale * standard_normal(rng))
            .collect();
        Self {
            env: env.clone(),
            params,
        }
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Logit row at `(prompt, prefix)`.
    pub fn next_logits(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<&[f64]> {
        self.env.check_prompt(prompt)?;
        let state = self.env.state_index(prefix)?;
        let off = self.env.row_offset(prompt, state);
        Ok(&self.params[off..off + self.env.vocab_size])
    }

    /// Add `delta[token]` to the logit row at `(prompt, prefix)`.
    pub fn bump_logits(&mut self, prompt: PromptId, prefix: &[TokenId], delta: &[f64]) -> Result<()> {
        self.env.check_prompt(prompt)?;
        let state = self.env.state_index(prefix)?;
        let off = self.env.row_offset(prompt, state);
        if delta.len() != self.env.vocab_size {
            return Err(Error::ShapeMismatch("logit delta length differs from vocab".into()));
        }
        for (p, d) in self.params[off..off + delta.len()].iter_mut().zip(delta) {
            *p += d;
        }
        Ok(())
    }

    /// `log pi(y | x)` with log-sum-exp stabilization at each step.
    pub fn log_prob_seq(&self, prompt: PromptId, y: &Response) -> Result<f64> {
        self.env.check_prompt(prompt)?;
        self.env.check_response(y)?;
        Ok(self.log_prob_unchecked(prompt, y.tokens()))
    }

    pub(crate) fn log_prob_unchecked(&self, prompt: PromptId, tokens: &[TokenId]) -> f64 {
        let v = self.env.vocab_size;
        self.env
            .path_rows(prompt, tokens)
            .into_iter()
            .zip(tokens)
            .map(|(off, &tok)| {
                let row = &self.params[off..off + v];
                row[tok as usize] - log_sum_exp(row)
            })
            .sum()
    }

    /// `log pi(y | x)` together with `scale * d log pi / d theta` appended to
    /// `grad`.
    pub fn log_prob_with_grad(
        &self,
        prompt: PromptId,
        y: &Response,
        scale: f64,
        grad: &mut SparseGrad,
    ) -> Result<f64> {
        self.env.check_prompt(prompt)?;
        self.env.check_response(y)?;
        let v = self.env.vocab_size;
        let mut total = 0.0;
        for (off, &tok) in self.env.path_rows(prompt, y.tokens()).into_iter().zip(y.tokens()) {
            let row = &self.params[off..off + v];
            let lse = log_sum_exp(row);
            total += row[tok as usize] - lse;
            if scale != 0.0 {
                for (j, &logit) in row.iter().enumerate() {
                    let p = (logit - lse).exp();
                    let indicator = if j == tok as usize { 1.0 } else { 0.0 };
                    grad.push(off + j, scale * (indicator - p));
                }
            }
        }
        Ok(total)
    }

    pub fn sample_response(&self, prompt: PromptId, temperature: f64, rng: &mut SeededRng) -> Result<Response> {
        sample_from(self, prompt, temperature, rng)
    }

    pub fn greedy(&self, prompt: PromptId) -> Result<Response> {
        let mut rng = crate::rng::seeded(0);
        sample_from(self, prompt, 0.0, &mut rng)
    }

    pub fn same_shape(&self, other: &TabularPolicy) -> bool {
        self.env == other.env && self.params.len() == other.params.len()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            env: self.env.clone(),
            params: self.params.clone(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ckpt)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Self::from_params(&ckpt.env, ckpt.params)
    }
}

impl Decoder for TabularPolicy {
    fn env(&self) -> &EnvSpec {
        &self.env
    }

    fn next_log_weights(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.next_logits(prompt, prefix)?.to_vec())
    }
}

const CHECKPOINT_FORMAT: &str = "moalign-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    env: EnvSpec,
    params: Vec<f64>,
}

pub(crate) fn standard_normal(rng: &mut SeededRng) -> f64 {
    // Box-Muller; the open interval keeps ln finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// All `V^L` responses in lexicographic order.
pub fn enumerate_responses(env: &EnvSpec) -> Result<ResponseIter> {
    let size = env.sample_space_size();
    if size > env.enumeration_budget {
        return Err(Error::EnumerationTooLarge {
            size,
            budget: env.enumeration_budget,
        });
    }
    Ok(ResponseIter {
        vocab: env.vocab_size as TokenId,
        next: Some(vec![0; env.response_len]),
    })
}

pub struct ResponseIter {
    vocab: TokenId,
    next: Option<Vec<TokenId>>,
}

impl Iterator for ResponseIter {
    type Item = Response;

    fn next(&mut self) -> Option<Response> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut pos = succ.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            if succ[pos] + 1 < self.vocab {
                succ[pos] += 1;
                self.next = Some(succ);
                break;
            }
            succ[pos] = 0;
        }
        Some(Response(current))
    }
}

/// Convex combination `sum_i w_i theta_i` of policy parameters.
pub fn merge_params(policies: &[&TabularPolicy], w: &WeightVector) -> Result<TabularPolicy> {
    let first = policies
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no policies to merge".into()))?;
    if policies.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} policies but {} weights",
            policies.len(),
            w.len()
        )));
    }
    if let Some(p) = policies.iter().find(|p| !p.same_shape(first)) {
        return Err(Error::ShapeMismatch(format!(
            "policy over {:?} does not match {:?}",
            p.env, first.env
        )));
    }
    // Vertices copy the selected policy so the result is bit-exact.
    if let Some(i) = w.vertex_index() {
        return Ok(policies[i].clone());
    }
    let mut params = vec![0.0; first.params.len()];
    for (p, &wi) in policies.iter().zip(w.as_slice()) {
        for (acc, x) in params.iter_mut().zip(&p.params) {
            *acc += wi * x;
        }
    }
    Ok(TabularPolicy {
        env: first.env.clone(),
        params,
    })
}
