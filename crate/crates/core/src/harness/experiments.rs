use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::align::{train, AlignConfig, LwObjective, ModpoObjective};
use crate::decode::DecoderEnsemble;
use crate::error::{Error, Result};
use crate::eval::{average_improvement, front_table, rescore, shared_reference, FrontTable, System};
use crate::par;
use crate::policy::{merge_params, TabularPolicy};
use crate::prefdata::{
    conflict_ratio, generate_dataset, subsample_with_conflict_ratio, DatasetStats, GenerateOptions,
    PreferenceInstance,
};
use crate::rng::{derive_seed, substream};
use crate::align::{NllDpoObjective, RealignPair};
use crate::sipo::{run_sipo_round, PairMode, Refiner, RoundReport, Selection, SipoConfig};
use crate::weight::WeightVector;
use crate::align::soups_align;

use super::config::{ExperimentConfig, Method};

const POOL_STREAM: u64 = 1;
const SUBSET_STREAM: u64 = 2;
const ALIGN_STREAM: u64 = 3;
const SIPO_STREAM: u64 = 4;

/// Everything derived from one seed: environment, reference policy and the
/// uniform-sampler preference pool.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub reference: TabularPolicy,
    pub pool: Vec<PreferenceInstance>,
}

impl SeedContext {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let env = config.env(seed);
        let reference = TabularPolicy::uniform(&env);
        let mut rng = substream(seed, POOL_STREAM);
        let options = GenerateOptions {
            temperature: config.data_temperature,
            ..GenerateOptions::default()
        };
        let pool = generate_dataset(&env, &config.specs(), config.pool_size, &reference, options, &mut rng)?;
        Ok(Self {
            seed,
            config: config.clone(),
            reference,
            pool,
        })
    }

    pub fn subset(&self, ratio: f64) -> Result<Vec<PreferenceInstance>> {
        // The stream depends on the ratio so that subsets at different ratios
        // are drawn independently but reproducibly.
        let stream = derive_seed(SUBSET_STREAM, ratio.to_bits());
        let mut rng = substream(self.seed, stream);
        subsample_with_conflict_ratio(&self.pool, ratio, self.config.subset_size, &mut rng)
    }

    pub fn align_config(&self) -> AlignConfig {
        let mut cfg = self.config.align_config();
        cfg.seed = derive_seed(self.seed, ALIGN_STREAM);
        cfg
    }

    pub fn sipo_config(&self) -> SipoConfig {
        let mut cfg = self.config.sipo_config();
        cfg.seed = derive_seed(self.seed, SIPO_STREAM);
        cfg
    }

    /// Per-objective DPO policies on `data`.
    pub fn align_dpo(&self, data: &[PreferenceInstance]) -> Result<Vec<TabularPolicy>> {
        let n = self.config.n_objectives();
        let sets: Vec<&[PreferenceInstance]> = vec![data; n];
        soups_align(&self.reference, &sets, &self.align_config())
    }
}

/// Outcome of one or more SIPO rounds: the final policies and every round
/// report; a round without Pareto-optimal responses keeps its input.
#[derive(Debug, Clone)]
pub struct SipoRun {
    pub policies: Vec<TabularPolicy>,
    pub rounds: Vec<RoundReport>,
    pub notes: Vec<String>,
}

pub fn run_sipo_rounds(
    ctx: &SeedContext,
    initial: &[TabularPolicy],
    data: &[PreferenceInstance],
    sipo: &SipoConfig,
    rounds: usize,
) -> Result<SipoRun> {
    let mut policies = initial.to_vec();
    let mut reports = Vec::new();
    let mut notes = Vec::new();
    let align = ctx.align_config();
    for round in 0..rounds {
        let mut cfg = sipo.clone();
        cfg.seed = derive_seed(sipo.seed, round as u64);
        match run_sipo_round(&policies, &ctx.reference, data, &ctx.config.specs(), &cfg, &align) {
            Ok((next, report)) => {
                policies = next;
                reports.push(report);
            }
            Err(Error::EmptyImprovementSet) => {
                let msg = format!("seed {} round {}: empty improvement set, policies unchanged", ctx.seed, round + 1);
                warn!("{msg}");
                notes.push(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SipoRun {
        policies,
        rounds: reports,
        notes,
    })
}

fn soups_systems(policies: &[TabularPolicy], grid: &[WeightVector]) -> Result<Vec<System>> {
    let refs: Vec<&TabularPolicy> = policies.iter().collect();
    grid.iter()
        .map(|w| Ok(System::Policy(merge_params(&refs, w)?)))
        .collect()
}

fn mod_systems(policies: &[TabularPolicy], grid: &[WeightVector]) -> Result<Vec<System>> {
    grid.iter()
        .map(|w| Ok(System::Ensemble(DecoderEnsemble::new(policies.to_vec(), w.clone())?)))
        .collect()
}

fn lw_systems(ctx: &SeedContext, dpo: &[TabularPolicy], data: &[PreferenceInstance]) -> Result<Vec<System>> {
    let cfg = ctx.align_config();
    par::try_map_range(ctx.config.exec(), ctx.config.weight_grid.len(), |wi| {
        let w = &ctx.config.weight_grid[wi];
        // At a vertex the weighted loss is the single-objective loss.
        if let Some(i) = w.vertex_index() {
            return Ok(System::Policy(dpo[i].clone()));
        }
        let objective = LwObjective {
            reference: &ctx.reference,
            data,
            weight: w.clone(),
            beta: cfg.beta,
        };
        Ok(System::Policy(train(&ctx.reference, &objective, &cfg)?.policy))
    })
}

fn modpo_systems(ctx: &SeedContext, dpo: &[TabularPolicy], data: &[PreferenceInstance]) -> Result<Vec<System>> {
    let cfg = ctx.align_config();
    let proxies: Vec<&TabularPolicy> = dpo.iter().collect();
    par::try_map_range(ctx.config.exec(), ctx.config.weight_grid.len(), |wi| {
        let w = &ctx.config.weight_grid[wi];
        if let Some(i) = w.vertex_index() {
            return Ok(System::Policy(dpo[i].clone()));
        }
        let k = (0..w.len()).find(|&k| w.get(k) > 0.0).expect("simplex weight has a positive entry");
        let objective = ModpoObjective::new(
            &ctx.reference,
            &proxies,
            data,
            w.clone(),
            k,
            cfg.beta,
            ctx.config.sipo.implicit_mode,
        )?;
        Ok(System::Policy(train(&ctx.reference, &objective, &cfg)?.policy))
    })
}

/// Systems evaluated for `method` at every grid weight. `sipo` must hold the
/// improved policies for SIPO-based methods.
pub fn method_systems(
    method: Method,
    ctx: &SeedContext,
    dpo: &[TabularPolicy],
    sipo: Option<&[TabularPolicy]>,
    data: &[PreferenceInstance],
) -> Result<Vec<System>> {
    let grid = &ctx.config.weight_grid;
    match method {
        Method::Soups => soups_systems(dpo, grid),
        Method::Mod => mod_systems(dpo, grid),
        Method::Lw => lw_systems(ctx, dpo, data),
        Method::Modpo => modpo_systems(ctx, dpo, data),
        Method::Sipo => mod_systems(sipo.ok_or_else(|| Error::Config("SIPO policies missing".into()))?, grid),
        Method::SipoSoups => soups_systems(sipo.ok_or_else(|| Error::Config("SIPO policies missing".into()))?, grid),
    }
}

fn evaluate(ctx: &SeedContext, named: Vec<(String, Vec<System>)>) -> Result<Vec<FrontTable>> {
    front_table(
        &named,
        &ctx.config.weight_grid,
        &ctx.config.specs(),
        ctx.config.eval,
        ctx.config.exec(),
    )
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn columnwise_median(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    (0..d)
        .map(|i| median(&rows.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect()
}

fn rescore_all<'a, I>(tables: I, reference: &[f64]) -> Result<()>
where
    I: IntoIterator<Item = &'a mut FrontTable>,
{
    for t in tables {
        rescore(std::slice::from_mut(t), reference)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub ratio: f64,
    pub seed: u64,
    pub stats: DatasetStats,
    pub table: FrontTable,
    pub mean_rewards: Vec<f64>,
    pub steerability: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub method: String,
    pub ratio: f64,
    pub median_hypervolume: f64,
    pub median_mean_rewards: Vec<f64>,
    /// Median mean reward at this ratio minus that at the first ratio.
    pub change_vs_first: Vec<f64>,
    pub median_steerability: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub reference_point: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub summary: Vec<RatioSummary>,
}

/// Train each sweep method on subsets of increasing conflict ratio and score
/// every front against one reference point shared by the whole sweep.
pub fn run_conflict_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    for m in &config.sweep_methods {
        if m.needs_sipo() {
            return Err(Error::Config(format!("method {} is not available in the sweep", m.tag())));
        }
    }
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        let ctx = SeedContext::new(config, seed)?;
        for &ratio in &config.conflict_ratios {
            info!("sweep seed {seed} ratio {ratio}");
            let data = ctx.subset(ratio)?;
            let stats = conflict_ratio(&data)?;
            let dpo = ctx.align_dpo(&data)?;
            let mut named = Vec::new();
            for &m in &config.sweep_methods {
                named.push((m.tag().to_string(), method_systems(m, &ctx, &dpo, None, &data)?));
            }
            for table in evaluate(&ctx, named)? {
                cells.push(SweepCell {
                    method: table.method.clone(),
                    ratio,
                    seed,
                    stats: stats.clone(),
                    mean_rewards: table.mean_rewards(),
                    steerability: table.steerability(),
                    table,
                });
            }
        }
    }
    let reference = shared_reference(cells.iter().map(|c| &c.table));
    rescore_all(cells.iter_mut().map(|c| &mut c.table), &reference)?;

    let mut summary = Vec::new();
    for &m in &config.sweep_methods {
        let mut first: Option<Vec<f64>> = None;
        for &ratio in &config.conflict_ratios {
            let sel: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.method == m.tag() && c.ratio == ratio)
                .collect();
            let hv: Vec<f64> = sel.iter().map(|c| c.table.hypervolume).collect();
            let means: Vec<Vec<f64>> = sel.iter().map(|c| c.mean_rewards.clone()).collect();
            let steer: Vec<Vec<f64>> = sel.iter().map(|c| c.steerability.clone()).collect();
            let med = columnwise_median(&means);
            let base = first.get_or_insert_with(|| med.clone()).clone();
            summary.push(RatioSummary {
                method: m.tag().to_string(),
                ratio,
                median_hypervolume: median(&hv),
                change_vs_first: med.iter().zip(&base).map(|(a, b)| a - b).collect(),
                median_mean_rewards: med,
                median_steerability: columnwise_median(&steer),
            });
        }
    }
    Ok(SweepReport {
        config: config.clone(),
        reference_point: reference,
        cells,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareCell {
    pub seed: u64,
    pub stats: DatasetStats,
    pub tables: Vec<FrontTable>,
    pub rounds: Vec<RoundReport>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub method: String,
    pub baseline: String,
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: ExperimentConfig,
    pub reference_point: Vec<f64>,
    pub cells: Vec<CompareCell>,
    pub median_hypervolume: Vec<(String, f64)>,
    pub improvements: Vec<Improvement>,
}

impl CompareReport {
    pub fn median_for(&self, method: Method) -> Option<f64> {
        self.median_hypervolume
            .iter()
            .find(|(m, _)| m == method.tag())
            .map(|(_, v)| *v)
    }
}

/// Train and evaluate every configured method on one dataset per seed.
pub fn run_baseline_comparison(config: &ExperimentConfig) -> Result<CompareReport> {
    config.validate()?;
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        info!("compare seed {seed}");
        let ctx = SeedContext::new(config, seed)?;
        let data = ctx.subset(config.conflict_ratio)?;
        let stats = conflict_ratio(&data)?;
        let dpo = ctx.align_dpo(&data)?;
        let sipo = if config.methods.iter().any(|m| m.needs_sipo()) {
            Some(run_sipo_rounds(&ctx, &dpo, &data, &ctx.sipo_config(), config.sipo_rounds)?)
        } else {
            None
        };
        let mut named = Vec::new();
        for &m in &config.methods {
            let improved = sipo.as_ref().map(|s| s.policies.as_slice());
            named.push((m.tag().to_string(), method_systems(m, &ctx, &dpo, improved, &data)?));
        }
        let (rounds, notes) = sipo.map_or((Vec::new(), Vec::new()), |s| (s.rounds, s.notes));
        cells.push(CompareCell {
            seed,
            stats,
            tables: evaluate(&ctx, named)?,
            rounds,
            notes,
        });
    }
    let reference = shared_reference(cells.iter().flat_map(|c| &c.tables));
    rescore_all(cells.iter_mut().flat_map(|c| c.tables.iter_mut()), &reference)?;

    let median_hypervolume = config
        .methods
        .iter()
        .map(|m| {
            let hv: Vec<f64> = cells
                .iter()
                .flat_map(|c| c.tables.iter().filter(|t| t.method == m.tag()))
                .map(|t| t.hypervolume)
                .collect();
            (m.tag().to_string(), median(&hv))
        })
        .collect();

    let mut improvements = Vec::new();
    for &m in config.methods.iter().filter(|m| m.needs_sipo()) {
        for &b in config.methods.iter().filter(|b| !b.needs_sipo()) {
            let per_seed = cells
                .iter()
                .map(|c| {
                    let find = |x: Method| c.tables.iter().find(|t| t.method == x.tag()).expect("method evaluated");
                    average_improvement(find(m), find(b))
                })
                .collect::<Result<Vec<_>>>()?;
            let d = per_seed.first().map_or(0, Vec::len);
            let mean = (0..d)
                .map(|i| per_seed.iter().map(|v| v[i]).sum::<f64>() / per_seed.len() as f64)
                .collect();
            improvements.push(Improvement {
                method: m.tag().to_string(),
                baseline: b.tag().to_string(),
                per_seed,
                mean,
            });
        }
    }
    Ok(CompareReport {
        config: config.clone(),
        reference_point: reference,
        cells,
        median_hypervolume,
        improvements,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    SipoMinusRefine,
    SipoMinusFilter,
    PrefDesignYcYw,
    PrefDesignChain,
    PrefDesignYwyl,
    SipoPlusSoups,
    SecondRound,
    NonconflictSipo,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::SipoMinusRefine,
        Ablation::SipoMinusFilter,
        Ablation::PrefDesignYcYw,
        Ablation::PrefDesignChain,
        Ablation::PrefDesignYwyl,
        Ablation::SipoPlusSoups,
        Ablation::SecondRound,
        Ablation::NonconflictSipo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::SipoMinusRefine => "sipo_minus_refine",
            Ablation::SipoMinusFilter => "sipo_minus_filter",
            Ablation::PrefDesignYcYw => "pref_design_yc_yw",
            Ablation::PrefDesignChain => "pref_design_chain",
            Ablation::PrefDesignYwyl => "pref_design_ywyl",
            Ablation::SipoPlusSoups => "sipo_plus_soups",
            Ablation::SecondRound => "second_round",
            Ablation::NonconflictSipo => "nonconflict_sipo",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::UnknownAblation(name.to_string()))
    }

    /// The variant's SIPO configuration. Ablations that change the pipeline
    /// shape rather than a setting return `base` unchanged.
    pub fn transform(self, base: &SipoConfig) -> SipoConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::SipoMinusRefine => cfg.refiner = Refiner::Noop,
            Ablation::SipoMinusFilter => cfg.selection = Selection::Random,
            Ablation::PrefDesignYcYw => cfg.pair_mode = PairMode::YcVsYw,
            Ablation::PrefDesignChain => cfg.pair_mode = PairMode::YcYwPlusYwYl,
            Ablation::PrefDesignYwyl => cfg.pair_mode = PairMode::YwYl,
            Ablation::SipoPlusSoups | Ablation::SecondRound | Ablation::NonconflictSipo => {}
        }
        cfg
    }
}

/// Top-level fields whose serialized values differ.
pub fn config_diff(base: &SipoConfig, variant: &SipoConfig) -> Vec<String> {
    let a = serde_json::to_value(base).expect("config serializes");
    let b = serde_json::to_value(variant).expect("config serializes");
    match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
        }
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub base: FrontTable,
    pub variant: FrontTable,
    pub base_rounds: Vec<RoundReport>,
    pub variant_rounds: Vec<RoundReport>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub config: ExperimentConfig,
    pub changed_fields: Vec<String>,
    pub reference_point: Vec<f64>,
    pub cells: Vec<AblationCell>,
    pub median_base_hypervolume: f64,
    pub median_variant_hypervolume: f64,
}

/// Realign on non-conflicting instances instead of constructed pairs, using
/// as many instances as SIPO resolved.
fn nonconflict_realign(
    ctx: &SeedContext,
    dpo: &[TabularPolicy],
    count: usize,
) -> Result<Vec<TabularPolicy>> {
    let agreeing: Vec<&PreferenceInstance> = ctx.pool.iter().filter(|i| !i.is_conflict()).take(count).collect();
    if agreeing.is_empty() {
        return Ok(dpo.to_vec());
    }
    let pairs: Vec<RealignPair> = agreeing
        .iter()
        .map(|i| RealignPair {
            prompt: i.prompt,
            y_c: i.preferred(0).clone(),
            y_l: i.dispreferred(0).clone(),
            p: 1,
        })
        .collect();
    let align = ctx.align_config();
    dpo.iter()
        .enumerate()
        .map(|(i, anchor)| {
            let objective = NllDpoObjective {
                anchor,
                pairs: &pairs,
                beta: align.beta,
                alpha: align.alpha,
            };
            let mut cfg = align.clone();
            cfg.seed = derive_seed(align.seed, i as u64);
            Ok(train(anchor, &objective, &cfg)?.policy)
        })
        .collect()
}

/// Run the base SIPO pipeline and the named variant from the same initial
/// policies and compare their fronts.
pub fn run_ablation(config: &ExperimentConfig, ablation: Ablation) -> Result<AblationReport> {
    config.validate()?;
    let base_cfg = config.sipo_config();
    let variant_cfg = ablation.transform(&base_cfg);
    let changed_fields = config_diff(&base_cfg, &variant_cfg);
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        info!("ablation {} seed {seed}", ablation.name());
        let ctx = SeedContext::new(config, seed)?;
        let data = ctx.subset(config.conflict_ratio)?;
        let dpo = ctx.align_dpo(&data)?;
        let base = run_sipo_rounds(&ctx, &dpo, &data, &ctx.sipo_config(), 1)?;
        let mut notes = base.notes.clone();
        let (variant_policies, variant_rounds, variant_method) = match ablation {
            Ablation::SipoPlusSoups => (base.policies.clone(), Vec::new(), Method::SipoSoups),
            Ablation::SecondRound => {
                let mut cfg = ctx.sipo_config();
                cfg.seed = derive_seed(cfg.seed, 1 << 20);
                let run = run_sipo_rounds(&ctx, &base.policies, &data, &cfg, 1)?;
                notes.extend(run.notes);
                (run.policies, run.rounds, Method::Sipo)
            }
            Ablation::NonconflictSipo => {
                let count = base.rounds.first().map_or(0, |r| r.n_resolved);
                (nonconflict_realign(&ctx, &dpo, count)?, Vec::new(), Method::Sipo)
            }
            _ => {
                let mut cfg = ablation.transform(&ctx.sipo_config());
                cfg.seed = ctx.sipo_config().seed;
                let run = run_sipo_rounds(&ctx, &dpo, &data, &cfg, 1)?;
                notes.extend(run.notes);
                (run.policies, run.rounds, Method::Sipo)
            }
        };
        let named = vec![
            ("base".to_string(), method_systems(Method::Sipo, &ctx, &dpo, Some(&base.policies), &data)?),
            (
                ablation.name().to_string(),
                method_systems(variant_method, &ctx, &dpo, Some(&variant_policies), &data)?,
            ),
        ];
        let mut tables = evaluate(&ctx, named)?.into_iter();
        cells.push(AblationCell {
            seed,
            base: tables.next().expect("base table"),
            variant: tables.next().expect("variant table"),
            base_rounds: base.rounds,
            variant_rounds,
            notes,
        });
    }
    let reference = shared_reference(cells.iter().flat_map(|c| [&c.base, &c.variant]));
    rescore_all(cells.iter_mut().flat_map(|c| [&mut c.base, &mut c.variant]), &reference)?;
    let base_hv: Vec<f64> = cells.iter().map(|c| c.base.hypervolume).collect();
    let variant_hv: Vec<f64> = cells.iter().map(|c| c.variant.hypervolume).collect();
    Ok(AblationReport {
        ablation,
        config: config.clone(),
        changed_fields,
        reference_point: reference,
        cells,
        median_base_hypervolume: median(&base_hv),
        median_variant_hypervolume: median(&variant_hv),
    })
}
