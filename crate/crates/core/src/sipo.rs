//! Self-improvement over conflicting preferences: sample candidates under a
//! weight grid, refine them, keep those that beat both original responses
//! under every implicit-reward scorer, and re-align on the resulting
//! non-conflicting pairs.

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    implicit_reward, train, AlignConfig, ImplicitRewardMode, NllDpoObjective, RealignPair,
};
use crate::decode::{mod_generate, DecoderEnsemble};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::policy::{merge_params, PromptId, Response, TabularPolicy, TokenId};
use crate::prefdata::{labels_conflict, PreferenceInstance};
use crate::reward::{eval_reward_vector, RewardSpec};
use crate::rng::{derive_seed, substream, SeededRng};
use crate::weight::{pair_grid, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoCandidate {
    pub response: Response,
    pub source_weight: WeightVector,
    pub refined: bool,
    /// One implicit reward per aligned policy.
    pub rewards_pi: Vec<f64>,
    /// One implicit reward per merged scorer.
    pub rewards_w: Vec<f64>,
}

impl ParetoCandidate {
    pub fn all_rewards(&self) -> Vec<f64> {
        self.rewards_pi.iter().chain(&self.rewards_w).copied().collect()
    }

    pub fn is_scored(&self) -> bool {
        !self.rewards_pi.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Refiner {
    Noop,
    /// Steepest-ascent single-token substitutions on the reviewer-weighted
    /// implicit reward, at most `max_iters` accepted edits.
    EditSearch { max_iters: usize },
    /// Hand the rendered review and rewrite prompts to an outside process.
    ExternalPrompt { template_set: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewerWeight {
    /// Per candidate, the vertex of the objective whose implicit reward falls
    /// furthest short of the better original.
    MostNeeded,
    Fixed(WeightVector),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// `(y_c, y_a)` and `(y_c, y_b)` for every objective.
    #[default]
    Standard,
    /// Objective `i` learns only `y_c` over its own preferred response.
    YcVsYw,
    /// `YcVsYw` plus each objective's original pair.
    YcYwPlusYwYl,
    /// Each objective's original pair only.
    YwYl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    ParetoFilter,
    /// Uniform choice among candidates distinct from both originals, for as
    /// many instances as the filter would have resolved.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SipoConfig {
    pub weight_grid: Vec<WeightVector>,
    pub reviewer_weight: ReviewerWeight,
    pub refiner: Refiner,
    pub implicit_mode: ImplicitRewardMode,
    pub beta: f64,
    pub temperature: f64,
    pub samples_per_weight: usize,
    /// Cap on the conflicting instances processed per round.
    pub max_instances: Option<usize>,
    pub pair_mode: PairMode,
    pub selection: Selection,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SipoConfig {
    fn default() -> Self {
        Self {
            weight_grid: pair_grid(5),
            reviewer_weight: ReviewerWeight::MostNeeded,
            refiner: Refiner::EditSearch { max_iters: 4 },
            implicit_mode: ImplicitRewardMode::default(),
            beta: 0.1,
            temperature: 1.0,
            samples_per_weight: 4,
            max_instances: None,
            pair_mode: PairMode::Standard,
            selection: Selection::ParetoFilter,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl SipoConfig {
    pub fn validate(&self, n_objectives: usize) -> Result<()> {
        if self.weight_grid.is_empty() {
            return Err(Error::Config("weight grid is empty".into()));
        }
        if let Some(w) = self.weight_grid.iter().find(|w| w.len() != n_objectives) {
            return Err(Error::InvalidWeight(format!(
                "grid weight has {} entries for {n_objectives} objectives",
                w.len()
            )));
        }
        if let ReviewerWeight::Fixed(w) = &self.reviewer_weight {
            if w.len() != n_objectives {
                return Err(Error::InvalidWeight("reviewer weight has the wrong length".into()));
            }
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if self.samples_per_weight == 0 {
            return Err(Error::Config("samples_per_weight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Implicit-reward scorers: the aligned policies followed by one soup per
/// grid weight.
#[derive(Debug, Clone)]
pub struct ScorerSet {
    reference: TabularPolicy,
    policies: Vec<TabularPolicy>,
    n_objectives: usize,
    beta: f64,
    mode: ImplicitRewardMode,
}

impl ScorerSet {
    pub fn new(
        aligned: &[TabularPolicy],
        reference: &TabularPolicy,
        grid: &[WeightVector],
        beta: f64,
        mode: ImplicitRewardMode,
    ) -> Result<Self> {
        let refs: Vec<&TabularPolicy> = aligned.iter().collect();
        let mut policies = aligned.to_vec();
        for w in grid {
            policies.push(merge_params(&refs, w)?);
        }
        Ok(Self {
            reference: reference.clone(),
            policies,
            n_objectives: aligned.len(),
            beta,
            mode,
        })
    }

    /// `N + M`.
    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn n_objectives(&self) -> usize {
        self.n_objectives
    }

    /// All `N + M` implicit rewards of `y`.
    pub fn score(&self, prompt: PromptId, y: &Response) -> Result<Vec<f64>> {
        self.policies
            .iter()
            .map(|p| implicit_reward(p, &self.reference, prompt, y, self.beta, self.mode))
            .collect()
    }

    /// Implicit rewards under the aligned policies only.
    pub fn score_pi(&self, prompt: PromptId, y: &Response) -> Result<Vec<f64>> {
        self.policies[..self.n_objectives]
            .iter()
            .map(|p| implicit_reward(p, &self.reference, prompt, y, self.beta, self.mode))
            .collect()
    }

    pub fn score_candidate(&self, prompt: PromptId, c: &mut ParetoCandidate) -> Result<()> {
        let mut all = self.score(prompt, &c.response)?;
        c.rewards_w = all.split_off(self.n_objectives);
        c.rewards_pi = all;
        Ok(())
    }
}

/// Candidates from multi-objective decoding, `samples_per_weight` per grid
/// weight, unscored.
pub fn stage1_sample(
    policies: &[TabularPolicy],
    config: &SipoConfig,
    prompt: PromptId,
    rng: &mut SeededRng,
) -> Result<Vec<ParetoCandidate>> {
    let mut out = Vec::with_capacity(config.weight_grid.len() * config.samples_per_weight);
    for w in &config.weight_grid {
        let ens = DecoderEnsemble::new(policies.to_vec(), w.clone())?;
        for _ in 0..config.samples_per_weight {
            out.push(ParetoCandidate {
                response: mod_generate(&ens, prompt, config.temperature, rng)?,
                source_weight: w.clone(),
                refined: false,
                rewards_pi: Vec::new(),
                rewards_w: Vec::new(),
            });
        }
    }
    Ok(out)
}

fn reviewer_vector(
    config: &SipoConfig,
    scorers: &ScorerSet,
    candidate: &ParetoCandidate,
    inst: &PreferenceInstance,
) -> Result<WeightVector> {
    match &config.reviewer_weight {
        ReviewerWeight::Fixed(w) => Ok(w.clone()),
        ReviewerWeight::MostNeeded => {
            let own = scorers.score_pi(inst.prompt, &candidate.response)?;
            let a = scorers.score_pi(inst.prompt, &inst.y_a)?;
            let b = scorers.score_pi(inst.prompt, &inst.y_b)?;
            let mut worst = 0;
            let mut worst_gap = f64::INFINITY;
            for i in 0..own.len() {
                let gap = own[i] - a[i].max(b[i]);
                if gap < worst_gap {
                    worst_gap = gap;
                    worst = i;
                }
            }
            Ok(WeightVector::vertex(own.len(), worst))
        }
    }
}

/// Reviewer-weighted implicit reward `sum_i w_e,i r_i(x, y)`.
pub fn reviewer_score(scorers: &ScorerSet, w_e: &WeightVector, prompt: PromptId, y: &Response) -> Result<f64> {
    let r = scorers.score_pi(prompt, y)?;
    Ok(r.iter().zip(w_e.as_slice()).map(|(a, b)| a * b).sum())
}

/// Hill-climb from `start` over single-token substitutions. Each pass takes
/// the best strictly improving neighbour, ties to the lowest
/// `(position, token)`.
pub fn edit_search(
    scorers: &ScorerSet,
    w_e: &WeightVector,
    prompt: PromptId,
    start: &Response,
    max_iters: usize,
) -> Result<Response> {
    let vocab = scorers.reference.env().vocab_size as TokenId;
    let mut current = start.clone();
    let mut current_score = reviewer_score(scorers, w_e, prompt, &current)?;
    for _ in 0..max_iters {
        let mut best: Option<(Response, f64)> = None;
        for pos in 0..current.len() {
            for tok in 0..vocab {
                if tok == current.tokens()[pos] {
                    continue;
                }
                let cand = current.with_token(pos, tok);
                let s = reviewer_score(scorers, w_e, prompt, &cand)?;
                let threshold = best.as_ref().map_or(current_score, |b| b.1);
                if s > threshold {
                    best = Some((cand, s));
                }
            }
        }
        match best {
            Some((y, s)) => {
                current = y;
                current_score = s;
            }
            None => break,
        }
    }
    Ok(current)
}

/// Refine one candidate. The result is unscored.
pub fn stage2_refine(
    candidate: &ParetoCandidate,
    inst: &PreferenceInstance,
    scorers: &ScorerSet,
    config: &SipoConfig,
) -> Result<ParetoCandidate> {
    match &config.refiner {
        Refiner::Noop => Ok(candidate.clone()),
        Refiner::ExternalPrompt { .. } => Err(Error::ExternalRefinerUnavailable),
        Refiner::EditSearch { max_iters } => {
            let w_e = reviewer_vector(config, scorers, candidate, inst)?;
            let response = edit_search(scorers, &w_e, inst.prompt, &candidate.response, *max_iters)?;
            Ok(ParetoCandidate {
                refined: response != candidate.response,
                response,
                source_weight: candidate.source_weight.clone(),
                rewards_pi: Vec::new(),
                rewards_w: Vec::new(),
            })
        }
    }
}

/// Index of the candidate whose scores strictly exceed both originals on
/// every scorer and have the largest mean; ties go to the lexicographically
/// smallest response.
pub fn select_pareto(candidates: &[(Response, Vec<f64>)], score_a: &[f64], score_b: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (y, s)) in candidates.iter().enumerate() {
        let survives = s.len() == score_a.len()
            && s.iter().zip(score_a).zip(score_b).all(|((x, a), b)| x > a && x > b);
        if !survives {
            continue;
        }
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let better = match best {
            None => true,
            Some((j, m)) => mean > m || (mean == m && *y < candidates[j].0),
        };
        if better {
            best = Some((i, mean));
        }
    }
    best.map(|(i, _)| i)
}

/// Pareto-optimal response for `inst` among scored `candidates`.
pub fn stage3_filter(
    candidates: &[ParetoCandidate],
    inst: &PreferenceInstance,
    scorers: &ScorerSet,
) -> Result<Option<Response>> {
    if candidates.iter().any(|c| !c.is_scored()) {
        return Err(Error::Config("candidates must be scored before filtering".into()));
    }
    let a = scorers.score(inst.prompt, &inst.y_a)?;
    let b = scorers.score(inst.prompt, &inst.y_b)?;
    let scored: Vec<(Response, Vec<f64>)> = candidates
        .iter()
        .map(|c| (c.response.clone(), c.all_rewards()))
        .collect();
    Ok(select_pareto(&scored, &a, &b).map(|i| scored[i].0.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictPair {
    pub prompt: PromptId,
    pub y_c: Response,
    pub y_l: Response,
    pub p: Vec<i8>,
    /// Restricts the pair to one objective's re-alignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<usize>,
}

impl ConflictPair {
    pub fn applies_to(&self, objective: usize) -> bool {
        self.scope.is_none_or(|s| s == objective)
    }
}

pub fn build_conflict_pairs(inst: &PreferenceInstance, y_c: &Response, mode: PairMode) -> Result<Vec<ConflictPair>> {
    let n = inst.n_objectives();
    let pair = |y_c: &Response, y_l: &Response, scope: Option<usize>| ConflictPair {
        prompt: inst.prompt,
        y_c: y_c.clone(),
        y_l: y_l.clone(),
        p: vec![1; n],
        scope,
    };
    let needs_yc = mode != PairMode::YwYl;
    if needs_yc && (*y_c == inst.y_a || *y_c == inst.y_b) {
        return Err(Error::DegeneratePair);
    }
    let mut out = Vec::new();
    match mode {
        PairMode::Standard => {
            out.push(pair(y_c, &inst.y_a, None));
            out.push(pair(y_c, &inst.y_b, None));
        }
        PairMode::YcVsYw => {
            for i in 0..n {
                out.push(pair(y_c, inst.preferred(i), Some(i)));
            }
        }
        PairMode::YcYwPlusYwYl => {
            for i in 0..n {
                out.push(pair(y_c, inst.preferred(i), Some(i)));
                out.push(pair(inst.preferred(i), inst.dispreferred(i), Some(i)));
            }
        }
        PairMode::YwYl => {
            for i in 0..n {
                out.push(pair(inst.preferred(i), inst.dispreferred(i), Some(i)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedInstance {
    /// Position in the dataset passed to the round.
    pub index: usize,
    pub prompt: PromptId,
    pub y_c: Response,
    pub scores_c: Vec<f64>,
    pub true_c: Vec<f64>,
    pub true_a: Vec<f64>,
    pub true_b: Vec<f64>,
}

impl ResolvedInstance {
    /// `r*(y_c) >= r*(y_a)` and `r*(y_c) >= r*(y_b)` on every objective.
    pub fn truly_dominates(&self) -> bool {
        self.true_c
            .iter()
            .zip(&self.true_a)
            .zip(&self.true_b)
            .all(|((c, a), b)| c >= a && c >= b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub n_conflicting: usize,
    pub n_processed: usize,
    pub n_candidates: usize,
    pub n_refined: usize,
    pub n_resolved: usize,
    pub n_pairs: usize,
    /// Pairs whose labels disagree; zero by construction.
    pub nonconflict_violations: usize,
    /// Per-scorer mean implicit reward of `y_c`, `y_a` and `y_b` over resolved
    /// instances.
    pub mean_scores_c: Vec<f64>,
    pub mean_scores_a: Vec<f64>,
    pub mean_scores_b: Vec<f64>,
    /// Per-objective mean ground-truth reward over resolved instances.
    pub mean_true_c: Vec<f64>,
    pub mean_true_a: Vec<f64>,
    pub mean_true_b: Vec<f64>,
    /// Fraction of resolved instances where `y_c` is at least as good as both
    /// originals on every ground-truth objective.
    pub frac_true_dominant: f64,
    pub resolved: Vec<ResolvedInstance>,
    /// The constructed preference pairs used for re-alignment.
    pub pairs: Vec<ConflictPair>,
    pub traces: Vec<Vec<(usize, f64)>>,
}

struct InstanceOutcome {
    index: usize,
    n_candidates: usize,
    n_refined: usize,
    filtered: Option<(Response, Vec<f64>)>,
    random: Option<Response>,
    scores_a: Vec<f64>,
    scores_b: Vec<f64>,
}

fn process_instance(
    index: usize,
    inst: &PreferenceInstance,
    policies: &[TabularPolicy],
    scorers: &ScorerSet,
    config: &SipoConfig,
) -> Result<InstanceOutcome> {
    let mut rng = substream(config.seed, index as u64);
    let sampled = stage1_sample(policies, config, inst.prompt, &mut rng)?;
    let mut pool: Vec<ParetoCandidate> = Vec::with_capacity(sampled.len() * 2);
    let mut n_refined = 0;
    for c in &sampled {
        let r = stage2_refine(c, inst, scorers, config)?;
        if r.refined {
            n_refined += 1;
            pool.push(r);
        }
    }
    // Unrefined samples compete alongside their refinements.
    pool.extend(sampled);
    for c in pool.iter_mut() {
        scorers.score_candidate(inst.prompt, c)?;
    }
    let scores_a = scorers.score(inst.prompt, &inst.y_a)?;
    let scores_b = scorers.score(inst.prompt, &inst.y_b)?;
    let filtered = stage3_filter(&pool, inst, scorers)?.map(|y| {
        let s = pool
            .iter()
            .find(|c| c.response == y)
            .map(|c| c.all_rewards())
            .expect("selected response comes from the pool");
        (y, s)
    });
    if let Some((_, s)) = &filtered {
        debug_assert!(s
            .iter()
            .zip(&scores_a)
            .zip(&scores_b)
            .all(|((x, a), b)| x > a && x > b));
    }
    let distinct: Vec<&ParetoCandidate> = pool
        .iter()
        .filter(|c| c.response != inst.y_a && c.response != inst.y_b)
        .collect();
    let random = if distinct.is_empty() {
        None
    } else {
        let mut pick_rng = substream(derive_seed(config.seed, 1 << 32), index as u64);
        Some(distinct[pick_rng.gen_range(0..distinct.len())].response.clone())
    };
    Ok(InstanceOutcome {
        index,
        n_candidates: pool.len(),
        n_refined,
        filtered,
        random,
        scores_a,
        scores_b,
    })
}

fn column_means(rows: &[&[f64]], width: usize) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; width];
    }
    (0..width)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// One SIPO round. `reference` is the policy the implicit rewards are
/// measured against; `specs` are used only for reporting.
pub fn run_sipo_round(
    policies: &[TabularPolicy],
    reference: &TabularPolicy,
    dataset: &[PreferenceInstance],
    specs: &[RewardSpec],
    config: &SipoConfig,
    align_config: &AlignConfig,
) -> Result<(Vec<TabularPolicy>, RoundReport)> {
    let n_obj = policies.len();
    config.validate(n_obj)?;
    align_config.validate()?;
    let scorers = ScorerSet::new(policies, reference, &config.weight_grid, config.beta, config.implicit_mode)?;

    let conflicting: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].is_conflict()).collect();
    let n_conflicting = conflicting.len();
    let chosen: Vec<usize> = match config.max_instances {
        Some(cap) if cap < conflicting.len() => {
            let mut rng = substream(derive_seed(config.seed, 2 << 32), 0);
            let mut picks = index::sample(&mut rng, conflicting.len(), cap).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|k| conflicting[k]).collect()
        }
        _ => conflicting,
    };

    let outcomes = par::try_map_range(config.exec, chosen.len(), |k| {
        let i = chosen[k];
        process_instance(i, &dataset[i], policies, &scorers, config)
    })?;

    let n_filtered = outcomes.iter().filter(|o| o.filtered.is_some()).count();
    let picks: Vec<(&InstanceOutcome, Response)> = match config.selection {
        Selection::ParetoFilter => outcomes
            .iter()
            .filter_map(|o| o.filtered.as_ref().map(|(y, _)| (o, y.clone())))
            .collect(),
        Selection::Random => {
            let eligible: Vec<&InstanceOutcome> = outcomes.iter().filter(|o| o.random.is_some()).collect();
            let take = n_filtered.min(eligible.len());
            let mut rng = substream(derive_seed(config.seed, 3 << 32), 0);
            let mut idx = index::sample(&mut rng, eligible.len(), take).into_vec();
            idx.sort_unstable();
            idx.into_iter()
                .map(|j| (eligible[j], eligible[j].random.clone().expect("eligible")))
                .collect()
        }
    };

    let mut pairs: Vec<ConflictPair> = Vec::new();
    let mut resolved = Vec::with_capacity(picks.len());
    for (o, y_c) in &picks {
        let inst = &dataset[o.index];
        pairs.extend(build_conflict_pairs(inst, y_c, config.pair_mode)?);
        resolved.push(ResolvedInstance {
            index: o.index,
            prompt: inst.prompt,
            y_c: y_c.clone(),
            scores_c: scorers.score(inst.prompt, y_c)?,
            true_c: eval_reward_vector(specs, inst.prompt, y_c)?,
            true_a: eval_reward_vector(specs, inst.prompt, &inst.y_a)?,
            true_b: eval_reward_vector(specs, inst.prompt, &inst.y_b)?,
        });
    }
    let nonconflict_violations = pairs.iter().filter(|p| labels_conflict(&p.p)).count();
    debug_assert_eq!(nonconflict_violations, 0, "constructed pairs must be non-conflicting");

    if pairs.is_empty() {
        warn!("no Pareto-optimal responses found; policies left unchanged");
        return Err(Error::EmptyImprovementSet);
    }

    let mut updated = Vec::with_capacity(n_obj);
    let mut traces = Vec::with_capacity(n_obj);
    for (i, anchor) in policies.iter().enumerate() {
        let realign: Vec<RealignPair> = pairs
            .iter()
            .filter(|p| p.applies_to(i))
            .map(|p| RealignPair {
                prompt: p.prompt,
                y_c: p.y_c.clone(),
                y_l: p.y_l.clone(),
                p: p.p[i],
            })
            .collect();
        if realign.is_empty() {
            updated.push(anchor.clone());
            traces.push(Vec::new());
            continue;
        }
        let objective = NllDpoObjective {
            anchor,
            pairs: &realign,
            beta: align_config.beta,
            alpha: align_config.alpha,
        };
        let mut cfg = align_config.clone();
        cfg.seed = derive_seed(align_config.seed, i as u64);
        let outcome = train(anchor, &objective, &cfg)?;
        updated.push(outcome.policy);
        traces.push(outcome.trace);
    }

    let n_scorers = scorers.len();
    let picked: Vec<&InstanceOutcome> = picks.iter().map(|(o, _)| *o).collect();
    let report = RoundReport {
        n_conflicting,
        n_processed: outcomes.len(),
        n_candidates: outcomes.iter().map(|o| o.n_candidates).sum(),
        n_refined: outcomes.iter().map(|o| o.n_refined).sum(),
        n_resolved: resolved.len(),
        n_pairs: pairs.len(),
        nonconflict_violations,
        mean_scores_c: column_means(&resolved.iter().map(|r| r.scores_c.as_slice()).collect::<Vec<_>>(), n_scorers),
        mean_scores_a: column_means(&picked.iter().map(|o| o.scores_a.as_slice()).collect::<Vec<_>>(), n_scorers),
        mean_scores_b: column_means(&picked.iter().map(|o| o.scores_b.as_slice()).collect::<Vec<_>>(), n_scorers),
        mean_true_c: column_means(&resolved.iter().map(|r| r.true_c.as_slice()).collect::<Vec<_>>(), specs.len()),
        mean_true_a: column_means(&resolved.iter().map(|r| r.true_a.as_slice()).collect::<Vec<_>>(), specs.len()),
        mean_true_b: column_means(&resolved.iter().map(|r| r.true_b.as_slice()).collect::<Vec<_>>(), specs.len()),
        frac_true_dominant: resolved.iter().filter(|r| r.truly_dominates()).count() as f64 / resolved.len() as f64,
        resolved,
        pairs,
        traces,
    };
    Ok((updated, report))
}

const TEMPLATES: &[(&str, &str)] = &[
    ("beavertails_review", include_str!("../assets/templates/beavertails_review.txt")),
    ("beavertails_rewrite", include_str!("../assets/templates/beavertails_rewrite.txt")),
    ("helpsteer_review", include_str!("../assets/templates/helpsteer_review.txt")),
    ("helpsteer_rewrite", include_str!("../assets/templates/helpsteer_rewrite.txt")),
];

pub fn template_names() -> impl Iterator<Item = &'static str> {
    TEMPLATES.iter().map(|(n, _)| *n)
}

pub fn template(name: &str) -> Result<&'static str> {
    TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::UnknownTemplate(name.to_string()))
}

/// Substitute `{key}` placeholders.
pub fn render_template(name: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = template(name)?.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::enumerate_responses;
    use crate::reward::Preset;
    use crate::rng::seeded;

    fn r(t: &[TokenId]) -> Response {
        Response::new(t.to_vec())
    }

    fn inst(y_a: &[TokenId], y_b: &[TokenId], p: Vec<i8>) -> PreferenceInstance {
        PreferenceInstance {
            prompt: PromptId(0),
            y_a: r(y_a),
            y_b: r(y_b),
            p,
        }
    }

    fn random_world(seed: u64) -> (TabularPolicy, Vec<TabularPolicy>) {
        let env = crate::policy::EnvSpec::new(4, 3, 1, 0).unwrap();
        let mut rng = seeded(seed);
        let reference = TabularPolicy::random_normal(&env, 0.5, &mut rng);
        let pis = (0..2).map(|_| TabularPolicy::random_normal(&env, 1.0, &mut rng)).collect();
        (reference, pis)
    }

    #[test]
    fn strict_filter_example() {
        let a = [2.0, -2.0];
        let b = [1.0, 0.0];
        let c = vec![(r(&[0]), vec![3.0, 1.0]), (r(&[1]), vec![3.0, 0.0])];
        assert_eq!(select_pareto(&c, &a, &b), Some(0));
        assert_eq!(select_pareto(&c[1..], &a, &b), None);
        assert_eq!(select_pareto(&[], &a, &b), None);
    }

    #[test]
    fn filter_ties_break_lexicographically() {
        let a = [0.0, 0.0];
        let c = vec![(r(&[2, 0]), vec![1.0, 3.0]), (r(&[1, 3]), vec![2.0, 2.0])];
        assert_eq!(select_pareto(&c, &a, &a), Some(1));
    }

    #[test]
    fn stage1_shapes_and_determinism() {
        let (_, pis) = random_world(1);
        let config = SipoConfig {
            samples_per_weight: 1,
            ..SipoConfig::default()
        };
        let c1 = stage1_sample(&pis, &config, PromptId(0), &mut seeded(5)).unwrap();
        let c2 = stage1_sample(&pis, &config, PromptId(0), &mut seeded(5)).unwrap();
        assert_eq!(c1.len(), 6);
        assert_eq!(c1, c2);
        let weights: Vec<_> = c1.iter().map(|c| c.source_weight.clone()).collect();
        assert_eq!(weights, pair_grid(5));

        let greedy = SipoConfig {
            weight_grid: vec![WeightVector::vertex(2, 0)],
            temperature: 0.0,
            samples_per_weight: 1,
            ..SipoConfig::default()
        };
        let g = stage1_sample(&pis, &greedy, PromptId(0), &mut seeded(0)).unwrap();
        assert_eq!(g[0].response, pis[0].greedy(PromptId(0)).unwrap());
    }

    #[test]
    fn edit_search_reaches_neighbour_argmax() {
        let (reference, pis) = random_world(2);
        let scorers = ScorerSet::new(&pis, &reference, &pair_grid(5), 0.1, ImplicitRewardMode::DpoRatio).unwrap();
        let w_e = WeightVector::pair(0.5).unwrap();
        let env = reference.env().clone();
        let score = |y: &Response| reviewer_score(&scorers, &w_e, PromptId(0), y).unwrap();
        let best = enumerate_responses(&env)
            .unwrap()
            .max_by(|a, b| score(a).total_cmp(&score(b)))
            .unwrap();
        for pos in 0..env.response_len {
            for tok in 0..env.vocab_size as TokenId {
                let start = best.with_token(pos, tok);
                let out = edit_search(&scorers, &w_e, PromptId(0), &start, 1).unwrap();
                // One step from the argmax: that neighbour must be the best.
                let neighbours = (0..env.response_len).flat_map(|p| {
                    (0..env.vocab_size as TokenId).map(move |t| (p, t))
                });
                let top = neighbours
                    .map(|(p, t)| start.with_token(p, t))
                    .fold(start.clone(), |acc, y| if score(&y) > score(&acc) { y } else { acc });
                assert_eq!(score(&out), score(&top));
                assert_eq!(out, best);
                assert!(score(&out) >= score(&start));
            }
        }
    }

    #[test]
    fn refiners() {
        let (reference, pis) = random_world(3);
        let scorers = ScorerSet::new(&pis, &reference, &pair_grid(5), 0.1, ImplicitRewardMode::DpoRatio).unwrap();
        let sample = ParetoCandidate {
            response: r(&[0, 1, 2]),
            source_weight: WeightVector::pair(0.4).unwrap(),
            refined: false,
            rewards_pi: vec![],
            rewards_w: vec![],
        };
        let i = inst(&[3, 3, 3], &[2, 2, 2], vec![1, -1]);
        let noop = SipoConfig {
            refiner: Refiner::Noop,
            ..SipoConfig::default()
        };
        assert_eq!(stage2_refine(&sample, &i, &scorers, &noop).unwrap(), sample);
        let ext = SipoConfig {
            refiner: Refiner::ExternalPrompt {
                template_set: "beavertails".into(),
            },
            ..SipoConfig::default()
        };
        assert!(matches!(
            stage2_refine(&sample, &i, &scorers, &ext),
            Err(Error::ExternalRefinerUnavailable)
        ));
        let edit = SipoConfig::default();
        let out = stage2_refine(&sample, &i, &scorers, &edit).unwrap();
        let w_e = reviewer_vector(&edit, &scorers, &sample, &i).unwrap();
        assert!(w_e.vertex_index().is_some());
        let before = reviewer_score(&scorers, &w_e, PromptId(0), &sample.response).unwrap();
        let after = reviewer_score(&scorers, &w_e, PromptId(0), &out.response).unwrap();
        assert!(after >= before);
    }

    #[test]
    fn pair_construction() {
        let i = inst(&[0, 0], &[1, 1], vec![1, -1]);
        let y_c = r(&[2, 2]);
        let std = build_conflict_pairs(&i, &y_c, PairMode::Standard).unwrap();
        assert_eq!(std.len(), 2);
        assert!(std.iter().all(|p| !labels_conflict(&p.p) && p.y_c == y_c));
        assert_eq!(std[0].y_l, i.y_a);
        assert_eq!(std[1].y_l, i.y_b);
        let yw = build_conflict_pairs(&i, &y_c, PairMode::YcVsYw).unwrap();
        assert_eq!(yw.len(), 2);
        // Positive labels prefer `y_b`.
        assert_eq!((yw[0].y_l.clone(), yw[0].scope), (i.y_b.clone(), Some(0)));
        assert_eq!((yw[1].y_l.clone(), yw[1].scope), (i.y_a.clone(), Some(1)));
        let chain = build_conflict_pairs(&i, &y_c, PairMode::YcYwPlusYwYl).unwrap();
        assert_eq!(chain.len(), 4);
        assert_eq!((chain[1].y_c.clone(), chain[1].y_l.clone()), (i.y_b.clone(), i.y_a.clone()));
        let orig = build_conflict_pairs(&i, &y_c, PairMode::YwYl).unwrap();
        assert_eq!((orig[1].y_c.clone(), orig[1].y_l.clone()), (i.y_a.clone(), i.y_b.clone()));
        assert!(matches!(
            build_conflict_pairs(&i, &i.y_a, PairMode::Standard),
            Err(Error::DegeneratePair)
        ));
    }

    #[test]
    fn zero_conflicts_is_empty_improvement() {
        let (reference, pis) = random_world(4);
        let data = vec![inst(&[0, 0, 0], &[1, 1, 1], vec![1, 1])];
        let specs = Preset::Toy2Obj.specs();
        let err = run_sipo_round(&pis, &reference, &data, &specs, &SipoConfig::default(), &AlignConfig::default());
        assert!(matches!(err, Err(Error::EmptyImprovementSet)));
    }

    #[test]
    fn templates_render() {
        assert_eq!(template_names().count(), 4);
        let out = render_template(
            "beavertails_rewrite",
            &[("raw_prompt", "Q?"), ("response", "A."), ("review", "R.")],
        )
        .unwrap();
        assert!(out.contains("Question: Q?\nResponse: A.\nSuggestions: R.\nASSISTANT:"));
        assert!(!out.contains("{review}"));
        assert!(template("helpsteer_review").unwrap().contains("{raw_prompt}"));
        assert!(matches!(template("nope"), Err(Error::UnknownTemplate(_))));
    }
}
