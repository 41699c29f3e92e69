//! Multi-objective preference datasets.
//!
//! An instance holds two responses and one label per objective; `p_i = +1`
//! means `y_b` is preferred under objective `i`, `p_i = -1` means `y_a` is.
//! An instance is *conflicting* when its labels disagree.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Decoder, EnvSpec, PromptId, Response, TokenId};
use crate::reward::{eval_reward_vector, RewardSpec};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceInstance {
    pub prompt: PromptId,
    pub y_a: Response,
    pub y_b: Response,
    pub p: Vec<i8>,
}

impl PreferenceInstance {
    pub fn n_objectives(&self) -> usize {
        self.p.len()
    }

    pub fn is_conflict(&self) -> bool {
        labels_conflict(&self.p)
    }

    /// The response preferred under objective `i`.
    pub fn preferred(&self, i: usize) -> &Response {
        if self.p[i] > 0 {
            &self.y_b
        } else {
            &self.y_a
        }
    }

    pub fn dispreferred(&self, i: usize) -> &Response {
        if self.p[i] > 0 {
            &self.y_a
        } else {
            &self.y_b
        }
    }
}

pub fn labels_conflict(p: &[i8]) -> bool {
    match (p.iter().min(), p.iter().max()) {
        (Some(lo), Some(hi)) => lo != hi,
        _ => false,
    }
}

pub fn is_conflict(inst: &PreferenceInstance) -> bool {
    inst.is_conflict()
}

/// Label a response pair by comparing ground-truth rewards; ties on any
/// objective are rejected.
pub fn label_instance(
    specs: &[RewardSpec],
    prompt: PromptId,
    y_a: &Response,
    y_b: &Response,
) -> Result<PreferenceInstance> {
    let ra = eval_reward_vector(specs, prompt, y_a)?;
    let rb = eval_reward_vector(specs, prompt, y_b)?;
    let mut p = Vec::with_capacity(specs.len());
    for (i, (a, b)) in ra.iter().zip(&rb).enumerate() {
        if a == b {
            return Err(Error::TiedPreference { objective: i });
        }
        p.push(if b > a { 1 } else { -1 });
    }
    Ok(PreferenceInstance {
        prompt,
        y_a: y_a.clone(),
        y_b: y_b.clone(),
        p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_instances: usize,
    pub n_conflicting: usize,
    pub conflict_ratio: f64,
    /// Fraction of `+1` labels per objective.
    pub label_balance: Vec<f64>,
}

/// Count-based conflict statistics over any sequence of label vectors.
pub fn stats_from_labels<'a, I>(labels: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a [i8]>,
{
    let mut n = 0usize;
    let mut conflicting = 0usize;
    let mut positives: Vec<usize> = Vec::new();
    for p in labels {
        if positives.len() < p.len() {
            positives.resize(p.len(), 0);
        }
        n += 1;
        if labels_conflict(p) {
            conflicting += 1;
        }
        for (i, &l) in p.iter().enumerate() {
            if l > 0 {
                positives[i] += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(DatasetStats {
        n_instances: n,
        n_conflicting: conflicting,
        conflict_ratio: conflicting as f64 / n as f64,
        label_balance: positives.iter().map(|&c| c as f64 / n as f64).collect(),
    })
}

pub fn conflict_ratio(dataset: &[PreferenceInstance]) -> Result<DatasetStats> {
    stats_from_labels(dataset.iter().map(|inst| inst.p.as_slice()))
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    pub temperature: f64,
    /// Rejected draws tolerated per instance before giving up.
    pub max_attempts: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_attempts: 1000,
        }
    }
}

/// Draw `n` labelled pairs from `sampler`, resampling identical or tied pairs.
pub fn generate_dataset<D: Decoder + ?Sized>(
    env: &EnvSpec,
    specs: &[RewardSpec],
    n: usize,
    sampler: &D,
    options: GenerateOptions,
    rng: &mut SeededRng,
) -> Result<Vec<PreferenceInstance>> {
    use rand::Rng;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    for s in specs {
        s.validate(env)?;
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        let inst = loop {
            if attempts == options.max_attempts {
                return Err(Error::GenerationStalled { attempts });
            }
            attempts += 1;
            let prompt = PromptId(rng.gen_range(0..env.n_prompts as u32));
            let y_a = crate::policy::sample_from(sampler, prompt, options.temperature, rng)?;
            let y_b = crate::policy::sample_from(sampler, prompt, options.temperature, rng)?;
            if y_a == y_b {
                continue;
            }
            match label_instance(specs, prompt, &y_a, &y_b) {
                Ok(inst) => break inst,
                Err(Error::TiedPreference { .. }) => continue,
                Err(e) => return Err(e),
            }
        };
        out.push(inst);
    }
    Ok(out)
}

/// `round(target * size)` with halves rounded up. A tolerance of `1e-9`
/// absorbs binary representation error so decimal halves such as
/// `0.35 * 10` round up as written.
pub fn conflict_quota(target_ratio: f64, size: usize) -> usize {
    (target_ratio * size as f64 + 0.5 + 1e-9).floor() as usize
}

/// Subsample exactly `conflict_quota(target_ratio, size)` conflicting and the
/// remainder non-conflicting instances, uniformly within each stratum.
pub fn subsample_with_conflict_ratio(
    dataset: &[PreferenceInstance],
    target_ratio: f64,
    size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<PreferenceInstance>> {
    if !(0.0..=1.0).contains(&target_ratio) {
        return Err(Error::Config(format!("conflict ratio {target_ratio} outside [0, 1]")));
    }
    let (conflicting, clean): (Vec<&PreferenceInstance>, Vec<&PreferenceInstance>) =
        dataset.iter().partition(|i| i.is_conflict());
    let want_conflicting = conflict_quota(target_ratio, size).min(size);
    let want_clean = size - want_conflicting;
    if conflicting.len() < want_conflicting {
        return Err(Error::InsufficientPool {
            stratum: "conflicting",
            needed: want_conflicting,
            available: conflicting.len(),
        });
    }
    if clean.len() < want_clean {
        return Err(Error::InsufficientPool {
            stratum: "non-conflicting",
            needed: want_clean,
            available: clean.len(),
        });
    }
    let mut picked: Vec<PreferenceInstance> = Vec::with_capacity(size);
    for (pool, k) in [(&conflicting, want_conflicting), (&clean, want_clean)] {
        let mut idx = index::sample(rng, pool.len(), k).into_vec();
        idx.sort_unstable();
        picked.extend(idx.into_iter().map(|i| pool[i].clone()));
    }
    picked.shuffle(rng);
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptField {
    Id(u32),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseField {
    Tokens(Vec<TokenId>),
    Text(String),
}

/// One JSONL line:
/// `{"prompt": <id-or-string>, "y_a": [ints]|string, "y_b": [ints]|string, "p": [-1|1, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlRow {
    pub prompt: PromptField,
    pub y_a: ResponseField,
    pub y_b: ResponseField,
    pub p: Vec<i8>,
}

#[derive(Deserialize)]
struct RawRow {
    prompt: PromptField,
    y_a: ResponseField,
    y_b: ResponseField,
    p: Vec<i64>,
}

impl From<&PreferenceInstance> for JsonlRow {
    fn from(inst: &PreferenceInstance) -> Self {
        Self {
            prompt: PromptField::Id(inst.prompt.0),
            y_a: ResponseField::Tokens(inst.y_a.tokens().to_vec()),
            y_b: ResponseField::Tokens(inst.y_b.tokens().to_vec()),
            p: inst.p.clone(),
        }
    }
}

pub fn write_jsonl(path: &Path, dataset: &[PreferenceInstance]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for inst in dataset {
        serde_json::to_writer(&mut w, &JsonlRow::from(inst))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read raw rows; blank lines are skipped, line numbers are 1-based.
pub fn read_jsonl_rows(path: &Path) -> Result<Vec<JsonlRow>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.p.is_empty() {
            return Err(Error::Schema {
                line: line_no,
                message: "label vector is empty".into(),
            });
        }
        let mut p = Vec::with_capacity(raw.p.len());
        for l in raw.p {
            if l != 1 && l != -1 {
                return Err(Error::Schema {
                    line: line_no,
                    message: format!("label {l} is not -1 or +1"),
                });
            }
            p.push(l as i8);
        }
        rows.push(JsonlRow {
            prompt: raw.prompt,
            y_a: raw.y_a,
            y_b: raw.y_b,
            p,
        });
    }
    Ok(rows)
}

/// Text-to-token lookup for importing corpora with string responses.
pub type TokenizerMap = HashMap<String, Vec<TokenId>>;

/// Convert raw rows into token-level instances. String prompts receive
/// synthetic ids in order of first appearance; numeric prompts keep theirs.
/// String responses are resolved through `tokenizer`.
pub fn rows_to_dataset(
    rows: &[JsonlRow],
    env: &EnvSpec,
    tokenizer: Option<&TokenizerMap>,
) -> Result<Vec<PreferenceInstance>> {
    let mut prompt_ids: HashMap<&str, u32> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let line = i + 1;
        let prompt = match &row.prompt {
            PromptField::Id(id) => PromptId(*id),
            PromptField::Text(s) => {
                let next = prompt_ids.len() as u32;
                PromptId(*prompt_ids.entry(s.as_str()).or_insert(next))
            }
        };
        let resolve = |field: &ResponseField| -> Result<Response> {
            let tokens = match field {
                ResponseField::Tokens(t) => t.clone(),
                ResponseField::Text(s) => tokenizer
                    .and_then(|m| m.get(s))
                    .cloned()
                    .ok_or_else(|| Error::Schema {
                        line,
                        message: format!("no tokenization for response text {s:?}"),
                    })?,
            };
            let y = Response::new(tokens);
            env.check_response(&y).map_err(|e| Error::Schema {
                line,
                message: e.to_string(),
            })?;
            Ok(y)
        };
        let inst = PreferenceInstance {
            prompt,
            y_a: resolve(&row.y_a)?,
            y_b: resolve(&row.y_b)?,
            p: row.p.clone(),
        };
        env.check_prompt(inst.prompt).map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// Read a token-level dataset written by [`write_jsonl`].
pub fn read_jsonl(path: &Path, env: &EnvSpec) -> Result<Vec<PreferenceInstance>> {
    rows_to_dataset(&read_jsonl_rows(path)?, env, None)
}
