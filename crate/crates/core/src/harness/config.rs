use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::par::Exec;
use crate::policy::EnvSpec;
use crate::reward::{Preset, RewardSpec};
use crate::sipo::SipoConfig;
use crate::weight::{pair_grid, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Soups,
    Lw,
    Modpo,
    Mod,
    Sipo,
    SipoSoups,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Soups,
        Method::Lw,
        Method::Modpo,
        Method::Mod,
        Method::Sipo,
        Method::SipoSoups,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Soups => "soups",
            Method::Lw => "lw",
            Method::Modpo => "modpo",
            Method::Mod => "mod",
            Method::Sipo => "sipo",
            Method::SipoSoups => "sipo_soups",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == name)
            .ok_or_else(|| Error::Config(format!("unknown method `{name}`")))
    }

    pub fn needs_sipo(self) -> bool {
        matches!(self, Method::Sipo | Method::SipoSoups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub n_prompts: usize,
    /// Preference pairs generated from the uniform sampler per seed.
    pub pool_size: usize,
    /// Size of every conflict-controlled training subset.
    pub subset_size: usize,
    /// Ratios visited by the conflict sweep.
    pub conflict_ratios: Vec<f64>,
    /// Ratio used by `compare`, `sipo`, `ablate` and `train`.
    pub conflict_ratio: f64,
    /// Evaluation weights.
    pub weight_grid: Vec<WeightVector>,
    pub methods: Vec<Method>,
    pub sweep_methods: Vec<Method>,
    pub align: AlignConfig,
    pub sipo: SipoConfig,
    pub sipo_rounds: usize,
    pub eval: EvalMode,
    pub data_temperature: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Toy2Obj,
            n_prompts: 1,
            pool_size: 4000,
            subset_size: 400,
            conflict_ratios: vec![0.0, 0.3, 0.6, 0.9],
            conflict_ratio: 0.6,
            weight_grid: pair_grid(5),
            methods: vec![Method::Soups, Method::Lw, Method::Modpo, Method::Mod, Method::Sipo],
            sweep_methods: vec![Method::Soups],
            align: AlignConfig::default(),
            sipo: SipoConfig::default(),
            sipo_rounds: 1,
            eval: EvalMode::Exact,
            data_temperature: 1.0,
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("out"),
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn env(&self, seed: u64) -> EnvSpec {
        self.preset.env(self.n_prompts, seed)
    }

    pub fn specs(&self) -> Vec<RewardSpec> {
        self.preset.specs()
    }

    pub fn n_objectives(&self) -> usize {
        self.specs().len()
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::default()
        } else {
            Exec::Sequential
        }
    }

    /// Copies of the nested configs with the execution mode applied.
    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            exec: self.exec(),
            ..self.align.clone()
        }
    }

    pub fn sipo_config(&self) -> SipoConfig {
        SipoConfig {
            exec: self.exec(),
            ..self.sipo.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_objectives();
        if self.n_prompts == 0 {
            return Err(Error::Config("n_prompts must be at least 1".into()));
        }
        self.env(0).validate()?;
        if self.subset_size == 0 || self.pool_size < self.subset_size {
            return Err(Error::Config(format!(
                "need 1 <= subset_size <= pool_size, got {} and {}",
                self.subset_size, self.pool_size
            )));
        }
        for &r in self.conflict_ratios.iter().chain(std::iter::once(&self.conflict_ratio)) {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("conflict ratio {r} outside [0, 1]")));
            }
        }
        if self.weight_grid.is_empty() {
            return Err(Error::Config("weight grid is empty".into()));
        }
        if self.weight_grid.iter().any(|w| w.len() != n) {
            return Err(Error::InvalidWeight(format!("every weight needs {n} entries")));
        }
        if self.methods.is_empty() || self.sweep_methods.is_empty() {
            return Err(Error::Config("method lists must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sipo_rounds == 0 {
            return Err(Error::Config("sipo_rounds must be at least 1".into()));
        }
        if !(self.data_temperature.is_finite() && self.data_temperature > 0.0) {
            return Err(Error::InvalidTemperature(self.data_temperature));
        }
        if let EvalMode::MonteCarlo { samples, .. } = self.eval {
            if samples < 2 {
                return Err(Error::Config("Monte Carlo evaluation needs at least two samples".into()));
            }
        }
        self.align.validate()?;
        self.sipo.validate(n)?;
        Ok(())
    }
}
