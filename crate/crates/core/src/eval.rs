//! Ground-truth evaluation: expected rewards, Pareto fronts and hypervolume.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::DecoderEnsemble;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::policy::{sample_from, Decoder, EnvSpec, PromptId, Response, TabularPolicy, TokenId};
use crate::reward::{eval_reward_vector, RewardSpec};
use crate::rng::substream;
use crate::weight::WeightVector;

/// A policy or decoding ensemble evaluated as one system.
#[derive(Debug, Clone)]
pub enum System {
    Policy(TabularPolicy),
    Ensemble(DecoderEnsemble),
}

impl Decoder for System {
    fn env(&self) -> &EnvSpec {
        match self {
            System::Policy(p) => p.env(),
            System::Ensemble(e) => e.env(),
        }
    }

    fn next_log_weights(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>> {
        match self {
            System::Policy(p) => p.next_log_weights(prompt, prefix),
            System::Ensemble(e) => e.next_log_weights(prompt, prefix),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimate {
    pub mean: Vec<f64>,
    /// Zero for exact evaluation.
    pub stderr: Vec<f64>,
}

const MC_CHUNK: usize = 4096;

/// Expected ground-truth reward vector, averaged uniformly over prompts.
pub fn expected_rewards<D: Decoder + ?Sized>(
    system: &D,
    specs: &[RewardSpec],
    mode: EvalMode,
    exec: Exec,
) -> Result<RewardEstimate> {
    let env = system.env();
    let n_obj = specs.len();
    match mode {
        EvalMode::Exact => {
            let size = env.sample_space_size();
            if size > env.enumeration_budget {
                return Err(Error::EnumerationTooLarge {
                    size,
                    budget: env.enumeration_budget,
                });
            }
            let per_prompt = par::try_map_range(exec, env.n_prompts, |p| {
                let mut acc = vec![0.0; n_obj];
                let mut prefix = Vec::with_capacity(env.response_len);
                exact_dfs(system, specs, PromptId(p as u32), &mut prefix, 1.0, &mut acc)?;
                Ok::<_, Error>(acc)
            })?;
            let mut mean = vec![0.0; n_obj];
            for acc in &per_prompt {
                for (m, a) in mean.iter_mut().zip(acc) {
                    *m += a;
                }
            }
            mean.iter_mut().for_each(|m| *m /= env.n_prompts as f64);
            Ok(RewardEstimate {
                mean,
                stderr: vec![0.0; n_obj],
            })
        }
        EvalMode::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::Config("Monte Carlo evaluation needs at least two samples".into()));
            }
            // Fixed-size chunks with their own sub-streams keep the estimate
            // independent of the execution mode.
            let n_chunks = samples.div_ceil(MC_CHUNK);
            let chunks = par::try_map_range(exec, n_chunks, |c| {
                let mut rng = substream(seed, c as u64);
                let count = MC_CHUNK.min(samples - c * MC_CHUNK);
                let mut sum = vec![0.0; n_obj];
                let mut sumsq = vec![0.0; n_obj];
                for k in 0..count {
                    let prompt = PromptId(((c * MC_CHUNK + k) % env.n_prompts) as u32);
                    let y = sample_from(system, prompt, 1.0, &mut rng)?;
                    let r = eval_reward_vector(specs, prompt, &y)?;
                    for i in 0..n_obj {
                        sum[i] += r[i];
                        sumsq[i] += r[i] * r[i];
                    }
                }
                Ok::<_, Error>((sum, sumsq))
            })?;
            let mut sum = vec![0.0; n_obj];
            let mut sumsq = vec![0.0; n_obj];
            for (s, q) in &chunks {
                for i in 0..n_obj {
                    sum[i] += s[i];
                    sumsq[i] += q[i];
                }
            }
            let n = samples as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let stderr = (0..n_obj)
                .map(|i| {
                    let var = ((sumsq[i] - n * mean[i] * mean[i]) / (n - 1.0)).max(0.0);
                    (var / n).sqrt()
                })
                .collect();
            Ok(RewardEstimate { mean, stderr })
        }
    }
}

fn exact_dfs<D: Decoder + ?Sized>(
    system: &D,
    specs: &[RewardSpec],
    prompt: PromptId,
    prefix: &mut Vec<TokenId>,
    mass: f64,
    acc: &mut [f64],
) -> Result<()> {
    let env = system.env();
    if prefix.len() == env.response_len {
        let r = eval_reward_vector(specs, prompt, &Response::new(prefix.clone()))?;
        for (a, ri) in acc.iter_mut().zip(r) {
            *a += mass * ri;
        }
        return Ok(());
    }
    let probs = system.next_distribution(prompt, prefix)?;
    for (t, p) in probs.into_iter().enumerate() {
        prefix.push(t as TokenId);
        exact_dfs(system, specs, prompt, prefix, mass * p, acc)?;
        prefix.pop();
    }
    Ok(())
}

/// `a` dominates `b`: no worse anywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

/// Indices of non-dominated points, in input order.
pub fn pareto_front_indices(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|q| dominates(q, &points[i])))
        .collect()
}

pub fn pareto_front(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    pareto_front_indices(points)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

/// Front size above which inclusion-exclusion is refused for three or more
/// objectives.
pub const MAX_INCLUSION_EXCLUSION_POINTS: usize = 20;

/// Lebesgue measure of the union of boxes `[reference, p]` over `front`.
pub fn hypervolume(front: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    for (i, p) in front.iter().enumerate() {
        if p.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "point {i} has {} objectives, reference has {}",
                p.len(),
                reference.len()
            )));
        }
        if p.iter().zip(reference).any(|(x, r)| x < r) {
            return Err(Error::ReferenceViolation { index: i });
        }
    }
    if front.is_empty() {
        return Ok(0.0);
    }
    match reference.len() {
        0 => Err(Error::ShapeMismatch("zero-dimensional reference".into())),
        1 => Ok(front.iter().map(|p| p[0] - reference[0]).fold(0.0, f64::max)),
        2 => Ok(hypervolume_2d(front, reference)),
        _ => {
            let front = pareto_front(front);
            if front.len() > MAX_INCLUSION_EXCLUSION_POINTS {
                return Err(Error::FrontTooLarge(front.len()));
            }
            Ok(hypervolume_inclusion_exclusion(&front, reference))
        }
    }
}

fn hypervolume_2d(front: &[Vec<f64>], reference: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = front.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut y_max = reference[1];
    for k in 0..pts.len() {
        y_max = y_max.max(pts[k].1);
        let x_next = if k + 1 < pts.len() { pts[k + 1].0 } else { reference[0] };
        area += (pts[k].0 - x_next) * (y_max - reference[1]);
    }
    area
}

fn hypervolume_inclusion_exclusion(front: &[Vec<f64>], reference: &[f64]) -> f64 {
    let n = front.len();
    let d = reference.len();
    let mut total = 0.0;
    let mut corner = vec![0.0; d];
    for mask in 1u32..(1u32 << n) {
        corner.iter_mut().for_each(|c| *c = f64::INFINITY);
        for (i, p) in front.iter().enumerate() {
            if mask >> i & 1 == 1 {
                for (c, x) in corner.iter_mut().zip(p) {
                    *c = c.min(*x);
                }
            }
        }
        let vol: f64 = corner.iter().zip(reference).map(|(c, r)| c - r).product();
        if mask.count_ones() % 2 == 1 {
            total += vol;
        } else {
            total -= vol;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub weight_index: usize,
    pub weight: WeightVector,
    pub rewards: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontTable {
    pub method: String,
    pub rows: Vec<FrontRow>,
    pub hypervolume: f64,
    pub reference_point: Vec<f64>,
}

impl FrontTable {
    /// Per-objective mean over weights.
    pub fn mean_rewards(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let d = self.rows.first().map_or(0, |r| r.rewards.len());
        (0..d)
            .map(|i| self.rows.iter().map(|r| r.rewards[i]).sum::<f64>() / n)
            .collect()
    }

    /// Per-objective `max - min` over weights.
    pub fn steerability(&self) -> Vec<f64> {
        let d = self.rows.first().map_or(0, |r| r.rewards.len());
        (0..d)
            .map(|i| {
                let vals = self.rows.iter().map(|r| r.rewards[i]);
                let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
                let lo = vals.fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.rewards.clone()).collect()
    }
}

/// Componentwise minimum over every row minus `1e-6`.
pub fn shared_reference<'a, I>(tables: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a FrontTable>,
{
    let mut reference: Vec<f64> = Vec::new();
    for t in tables {
        for r in &t.rows {
            if reference.is_empty() {
                reference = vec![f64::INFINITY; r.rewards.len()];
            }
            for (m, x) in reference.iter_mut().zip(&r.rewards) {
                *m = m.min(*x);
            }
        }
    }
    reference.into_iter().map(|m| m - 1e-6).collect()
}

/// Recompute every table's hypervolume against `reference`.
pub fn rescore(tables: &mut [FrontTable], reference: &[f64]) -> Result<()> {
    for t in tables.iter_mut() {
        t.hypervolume = hypervolume(&pareto_front(&t.points()), reference)?;
        t.reference_point = reference.to_vec();
    }
    Ok(())
}

/// Evaluate each method's per-weight systems and score all methods against a
/// shared reference point.
pub fn front_table(
    methods: &[(String, Vec<System>)],
    weight_grid: &[WeightVector],
    specs: &[RewardSpec],
    mode: EvalMode,
    exec: Exec,
) -> Result<Vec<FrontTable>> {
    for (tag, systems) in methods {
        if systems.len() != weight_grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "method {tag} has {} systems for {} weights",
                systems.len(),
                weight_grid.len()
            )));
        }
    }
    let cells: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..weight_grid.len()).map(move |w| (m, w)))
        .collect();
    let estimates = par::map_slice(exec, &cells, |&(m, w)| {
        // Cells already run in parallel; evaluate each one sequentially.
        expected_rewards(&methods[m].1[w], specs, mode, Exec::Sequential)
    });
    let mut estimates = estimates.into_iter();
    let mut tables = Vec::with_capacity(methods.len());
    for (tag, _) in methods {
        let mut rows = Vec::with_capacity(weight_grid.len());
        for (wi, weight) in weight_grid.iter().enumerate() {
            let est = estimates.next().expect("one estimate per cell")?;
            rows.push(FrontRow {
                weight_index: wi,
                weight: weight.clone(),
                rewards: est.mean,
                stderr: est.stderr,
            });
        }
        tables.push(FrontTable {
            method: tag.clone(),
            rows,
            hypervolume: 0.0,
            reference_point: Vec::new(),
        });
    }
    let reference = shared_reference(&tables);
    rescore(&mut tables, &reference)?;
    Ok(tables)
}

/// Per-objective mean over weights of `a - b`; both tables must share a grid.
pub fn average_improvement(a: &FrontTable, b: &FrontTable) -> Result<Vec<f64>> {
    if a.rows.len() != b.rows.len() || a.rows.iter().zip(&b.rows).any(|(x, y)| x.weight != y.weight) {
        return Err(Error::ShapeMismatch(format!(
            "tables {} and {} use different weight grids",
            a.method, b.method
        )));
    }
    let d = a.rows.first().map_or(0, |r| r.rewards.len());
    let n = a.rows.len() as f64;
    Ok((0..d)
        .map(|i| {
            a.rows
                .iter()
                .zip(&b.rows)
                .map(|(x, y)| x.rewards[i] - y.rewards[i])
                .sum::<f64>()
                / n
        })
        .collect())
}

/// `method,weight_index,w_1..w_N,r_1..r_N,stderr_1..stderr_N`.
pub fn write_front_csv(path: &Path, tables: &[FrontTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = tables
        .iter()
        .flat_map(|t| t.rows.first())
        .map(|r| r.rewards.len())
        .next()
        .unwrap_or(0);
    let mut header = vec!["method".to_string(), "weight_index".to_string()];
    for prefix in ["w", "r", "stderr"] {
        header.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    w.write_record(&header)?;
    for t in tables {
        for r in &t.rows {
            let mut rec = vec![t.method.clone(), r.weight_index.to_string()];
            rec.extend(r.weight.as_slice().iter().map(|x| x.to_string()));
            rec.extend(r.rewards.iter().map(|x| x.to_string()));
            rec.extend(r.stderr.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `method,hypervolume,ref_1..ref_N`.
pub fn write_hypervolume_csv(path: &Path, tables: &[FrontTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = tables.first().map_or(0, |t| t.reference_point.len());
    let mut header = vec!["method".to_string(), "hypervolume".to_string()];
    header.extend((1..=n).map(|i| format!("ref_{i}")));
    w.write_record(&header)?;
    for t in tables {
        let mut rec = vec![t.method.clone(), t.hypervolume.to_string()];
        rec.extend(t.reference_point.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
