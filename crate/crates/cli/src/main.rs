use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use moalign_core::align::{train, write_trace_csv, DpoObjective, LwObjective, ModpoObjective};
use moalign_core::eval::{front_table, System};
use moalign_core::harness::{
    method_systems, run_ablation, run_baseline_comparison, run_conflict_sweep, run_sipo_rounds, write_ablation,
    write_compare, write_sweep, Ablation, ExperimentConfig, Method, OutputDir, SeedContext,
};
use moalign_core::prefdata::{conflict_ratio, read_jsonl_rows, stats_from_labels, write_jsonl};
use moalign_core::{Error, TabularPolicy};

#[derive(Parser)]
#[command(name = "moalign", version, about = "Multi-objective preference alignment on tabular policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Method tag(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the preference pool and a conflict-controlled subset.
    GenData(Common),
    /// Conflict statistics of a JSONL preference file.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train one method per weight and save checkpoints.
    Train(Common),
    /// Front quality of the sweep methods across conflict ratios.
    SweepConflict(Common),
    /// Compare methods on one dataset.
    Compare(Common),
    /// Run SIPO rounds and evaluate the improved policies.
    Sipo(Common),
    /// Run an ablation against base SIPO.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Ablation name, or `all`.
        #[arg(long)]
        ablation: String,
    },
    /// Evaluate per-objective checkpoints over the weight grid.
    Eval {
        #[command(flatten)]
        common: Common,
        /// One checkpoint per objective, in objective order.
        #[arg(long = "policy", required = true)]
        policies: Vec<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if !common.method.is_empty() {
        let methods = common
            .method
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::Config(e.to_string()))?;
        cfg.methods = methods.clone();
        cfg.sweep_methods = methods;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn finish(out: OutputDir, command: &str, cfg: Option<&ExperimentConfig>) -> CliResult<()> {
    let root = out.root().to_path_buf();
    out.finish(command, cfg)?;
    println!("wrote {}", root.join(moalign_core::harness::MANIFEST_NAME).display());
    Ok(())
}

fn gen_data(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    for &seed in &cfg.seeds {
        let ctx = SeedContext::new(&cfg, seed)?;
        let subset = ctx.subset(cfg.conflict_ratio)?;
        write_jsonl(&out.path(&format!("seed_{seed}/pool.jsonl"))?, &ctx.pool)?;
        write_jsonl(&out.path(&format!("seed_{seed}/subset.jsonl"))?, &subset)?;
        let stats = [("pool", conflict_ratio(&ctx.pool)?), ("subset", conflict_ratio(&subset)?)];
        for (name, s) in &stats {
            println!("seed {seed} {name}: {} instances, conflict ratio {}", s.n_instances, s.conflict_ratio);
        }
        out.write_json(&format!("seed_{seed}/stats.json"), &stats)?;
    }
    finish(out, "gen-data", Some(&cfg))
}

fn stats(common: &Common, input: &Path) -> CliResult<()> {
    let rows = read_jsonl_rows(input)?;
    let s = stats_from_labels(rows.iter().map(|r| r.p.as_slice()))?;
    println!("instances\t{}", s.n_instances);
    println!("conflicting\t{}", s.n_conflicting);
    println!("conflict_ratio\t{}", s.conflict_ratio);
    for (i, b) in s.label_balance.iter().enumerate() {
        println!("label_balance_{}\t{b}", i + 1);
    }
    if let Some(dir) = &common.out_dir {
        let mut out = OutputDir::create(dir)?;
        out.write_json("stats.json", &s)?;
        out.note(format!("input: {}", input.display()));
        finish(out, "stats", None)?;
    }
    Ok(())
}

fn train_cmd(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let method = match cfg.methods.as_slice() {
        [m] if common.method.len() == 1 => *m,
        _ if common.method.is_empty() => Method::Soups,
        _ => return Err(Failure::Config("train takes exactly one --method".into())),
    };
    let mut out = OutputDir::create(&cfg.out_dir)?;
    for &seed in &cfg.seeds {
        let ctx = SeedContext::new(&cfg, seed)?;
        let data = ctx.subset(cfg.conflict_ratio)?;
        let align = ctx.align_config();
        let dir = format!("train/{}/seed_{seed}", method.tag());
        let dpo_trained = |i: usize| -> moalign_core::Result<_> {
            let objective = DpoObjective {
                reference: &ctx.reference,
                data: &data,
                objective: i,
                beta: align.beta,
            };
            train(&ctx.reference, &objective, &align)
        };
        match method {
            Method::Soups | Method::Mod => {
                for i in 0..cfg.n_objectives() {
                    let outcome = dpo_trained(i)?;
                    outcome.policy.save_json(&out.path(&format!("{dir}/policy_{}.json", i + 1))?)?;
                    write_trace_csv(&out.path(&format!("{dir}/trace_{}.csv", i + 1))?, &outcome.trace)?;
                }
            }
            Method::Lw | Method::Modpo => {
                let dpo = ctx.align_dpo(&data)?;
                let proxies: Vec<&TabularPolicy> = dpo.iter().collect();
                for (wi, w) in cfg.weight_grid.iter().enumerate() {
                    let outcome = if let Some(i) = w.vertex_index() {
                        dpo_trained(i)?
                    } else if method == Method::Lw {
                        let objective = LwObjective {
                            reference: &ctx.reference,
                            data: &data,
                            weight: w.clone(),
                            beta: align.beta,
                        };
                        train(&ctx.reference, &objective, &align)?
                    } else {
                        let k = (0..w.len()).find(|&k| w.get(k) > 0.0).unwrap_or(0);
                        let objective = ModpoObjective::new(
                            &ctx.reference,
                            &proxies,
                            &data,
                            w.clone(),
                            k,
                            align.beta,
                            cfg.sipo.implicit_mode,
                        )?;
                        train(&ctx.reference, &objective, &align)?
                    };
                    outcome.policy.save_json(&out.path(&format!("{dir}/policy_w{wi}.json"))?)?;
                    write_trace_csv(&out.path(&format!("{dir}/trace_w{wi}.csv"))?, &outcome.trace)?;
                }
            }
            Method::Sipo | Method::SipoSoups => {
                return Err(Failure::Config("use the `sipo` command for SIPO".into()));
            }
        }
        info!("trained {} for seed {seed}", method.tag());
    }
    finish(out, "train", Some(&cfg))
}

fn sweep(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let report = run_conflict_sweep(&cfg)?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    write_sweep(&mut out, &report)?;
    for s in &report.summary {
        println!(
            "{}\tratio {}\tmedian hypervolume {:.6}\tmean rewards {:?}",
            s.method, s.ratio, s.median_hypervolume, s.median_mean_rewards
        );
    }
    finish(out, "sweep-conflict", Some(&cfg))
}

fn compare(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let report = run_baseline_comparison(&cfg)?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    write_compare(&mut out, &report)?;
    for (m, hv) in &report.median_hypervolume {
        println!("{m}\tmedian hypervolume {hv:.6}");
    }
    finish(out, "compare", Some(&cfg))
}

fn sipo(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    for &seed in &cfg.seeds {
        let ctx = SeedContext::new(&cfg, seed)?;
        let data = ctx.subset(cfg.conflict_ratio)?;
        let dpo = ctx.align_dpo(&data)?;
        let run = run_sipo_rounds(&ctx, &dpo, &data, &ctx.sipo_config(), cfg.sipo_rounds)?;
        let dir = format!("sipo/seed_{seed}");
        for (i, r) in run.rounds.iter().enumerate() {
            out.write_json(&format!("{dir}/round_{}.json", i + 1), r)?;
            println!(
                "seed {seed} round {}: {} resolved of {} processed, y_c dominant on {:.3}",
                i + 1,
                r.n_resolved,
                r.n_processed,
                r.frac_true_dominant
            );
        }
        for note in &run.notes {
            out.note(note.clone());
        }
        for (i, p) in run.policies.iter().enumerate() {
            p.save_json(&out.path(&format!("{dir}/policy_{}.json", i + 1))?)?;
        }
        let named = vec![
            ("soups".to_string(), method_systems(Method::Soups, &ctx, &dpo, None, &data)?),
            ("sipo".to_string(), method_systems(Method::Sipo, &ctx, &dpo, Some(&run.policies), &data)?),
        ];
        let tables = front_table(&named, &cfg.weight_grid, &cfg.specs(), cfg.eval, cfg.exec())?;
        out.write_fronts(&format!("{dir}/"), &tables)?;
    }
    finish(out, "sipo", Some(&cfg))
}

fn ablate(common: &Common, name: &str) -> CliResult<()> {
    let cfg = load_config(common)?;
    let ablations = if name == "all" {
        Ablation::ALL.to_vec()
    } else {
        vec![Ablation::parse(name)?]
    };
    let mut out = OutputDir::create(&cfg.out_dir)?;
    for a in ablations {
        let report = run_ablation(&cfg, a)?;
        write_ablation(&mut out, &report)?;
        println!(
            "{}\tbase {:.6}\tvariant {:.6}\tchanged {:?}",
            a.name(),
            report.median_base_hypervolume,
            report.median_variant_hypervolume,
            report.changed_fields
        );
    }
    finish(out, "ablate", Some(&cfg))
}

fn eval_cmd(common: &Common, paths: &[PathBuf]) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    if common.method.is_empty() {
        cfg.methods = vec![Method::Soups, Method::Mod];
    }
    let policies = paths
        .iter()
        .map(|p| TabularPolicy::load_json(p))
        .collect::<moalign_core::Result<Vec<_>>>()?;
    if policies.len() != cfg.n_objectives() {
        return Err(Failure::Config(format!(
            "{} checkpoints for {} objectives",
            policies.len(),
            cfg.n_objectives()
        )));
    }
    let env = policies[0].env().clone();
    let ctx = SeedContext {
        seed: env.seed,
        config: cfg.clone(),
        reference: TabularPolicy::uniform(&env),
        pool: Vec::new(),
    };
    let mut named: Vec<(String, Vec<System>)> = Vec::new();
    for &m in &cfg.methods {
        let systems = match m {
            Method::Soups | Method::Mod => method_systems(m, &ctx, &policies, None, &[])?,
            _ => return Err(Failure::Config(format!("eval supports soups and mod, not {}", m.tag()))),
        };
        named.push((m.tag().to_string(), systems));
    }
    let tables = front_table(&named, &cfg.weight_grid, &cfg.specs(), cfg.eval, cfg.exec())?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    out.write_fronts("eval/", &tables)?;
    for t in &tables {
        println!("{}\thypervolume {:.6}", t.method, t.hypervolume);
    }
    for p in paths {
        out.note(format!("checkpoint: {}", p.display()));
    }
    finish(out, "eval", Some(&cfg))
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Stats { common, input } => stats(common, input),
        Command::Train(c) => train_cmd(c),
        Command::SweepConflict(c) => sweep(c),
        Command::Compare(c) => compare(c),
        Command::Sipo(c) => sipo(c),
        Command::Ablate { common, ablation } => ablate(common, ablation),
        Command::Eval { common, policies } => eval_cmd(common, policies),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
