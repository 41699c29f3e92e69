use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{write_front_csv, write_hypervolume_csv, FrontTable};

use super::config::ExperimentConfig;
use super::experiments::{AblationReport, CompareReport, SweepReport};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Option<ExperimentConfig>,
    pub seeds: Vec<u64>,
    /// Paths relative to the output directory, in write order.
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

/// Collects the files written under one output directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
    notes: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `name`, recorded in the manifest.
    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(p)
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(p, text)?;
        Ok(())
    }

    pub fn write_fronts(&mut self, stem: &str, tables: &[FrontTable]) -> Result<()> {
        let fronts = self.path(&format!("{stem}fronts.csv"))?;
        write_front_csv(&fronts, tables)?;
        let hv = self.path(&format!("{stem}hypervolume.csv"))?;
        write_hypervolume_csv(&hv, tables)?;
        Ok(())
    }

    pub fn finish(mut self, command: &str, config: Option<&ExperimentConfig>) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.cloned(),
            seeds: config.map(|c| c.seeds.clone()).unwrap_or_default(),
            files: std::mem::take(&mut self.files),
            notes: std::mem::take(&mut self.notes),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn nums(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| x.to_string())
}

pub fn write_sweep(out: &mut OutputDir, report: &SweepReport) -> Result<()> {
    let n = report.reference_point.len();
    for cell in &report.cells {
        let stem = format!("sweep/{}/ratio_{}/seed_{}/", cell.method, cell.ratio, cell.seed);
        out.write_fronts(&stem, std::slice::from_ref(&cell.table))?;
    }
    let mut header: Vec<String> = ["method", "ratio", "seed", "conflict_ratio", "hypervolume"]
        .map(String::from)
        .to_vec();
    header.extend(numbered("mean_r", n));
    header.extend(numbered("steer", n));
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            let mut r = vec![
                c.method.clone(),
                c.ratio.to_string(),
                c.seed.to_string(),
                c.stats.conflict_ratio.to_string(),
                c.table.hypervolume.to_string(),
            ];
            r.extend(nums(&c.mean_rewards));
            r.extend(nums(&c.steerability));
            r
        })
        .collect();
    write_rows(&out.path("sweep_cells.csv")?, &header, &rows)?;

    let mut header: Vec<String> = ["method", "ratio", "median_hypervolume"].map(String::from).to_vec();
    header.extend(numbered("median_mean_r", n));
    header.extend(numbered("change_r", n));
    header.extend(numbered("median_steer", n));
    let rows: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| {
            let mut r = vec![s.method.clone(), s.ratio.to_string(), s.median_hypervolume.to_string()];
            r.extend(nums(&s.median_mean_rewards));
            r.extend(nums(&s.change_vs_first));
            r.extend(nums(&s.median_steerability));
            r
        })
        .collect();
    write_rows(&out.path("sweep_summary.csv")?, &header, &rows)?;
    out.write_json("sweep_report.json", report)
}

pub fn write_compare(out: &mut OutputDir, report: &CompareReport) -> Result<()> {
    for cell in &report.cells {
        out.write_fronts(&format!("compare/seed_{}/", cell.seed), &cell.tables)?;
        for (i, round) in cell.rounds.iter().enumerate() {
            out.write_json(&format!("compare/seed_{}/round_{}.json", cell.seed, i + 1), round)?;
        }
        for note in &cell.notes {
            out.note(note.clone());
        }
    }
    let header = ["method", "median_hypervolume"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = report
        .median_hypervolume
        .iter()
        .map(|(m, v)| vec![m.clone(), v.to_string()])
        .collect();
    write_rows(&out.path("compare_summary.csv")?, &header, &rows)?;

    let n = report.reference_point.len();
    let mut header = ["method", "baseline", "seed"].map(String::from).to_vec();
    header.extend(numbered("improvement", n));
    let mut rows = Vec::new();
    for imp in &report.improvements {
        for (cell, v) in report.cells.iter().zip(&imp.per_seed) {
            let mut r = vec![imp.method.clone(), imp.baseline.clone(), cell.seed.to_string()];
            r.extend(nums(v));
            rows.push(r);
        }
        let mut r = vec![imp.method.clone(), imp.baseline.clone(), "mean".to_string()];
        r.extend(nums(&imp.mean));
        rows.push(r);
    }
    write_rows(&out.path("improvements.csv")?, &header, &rows)?;
    out.write_json("compare_report.json", report)
}

pub fn write_ablation(out: &mut OutputDir, report: &AblationReport) -> Result<()> {
    let name = report.ablation.name();
    let mut rows = Vec::new();
    for cell in &report.cells {
        out.write_fronts(
            &format!("ablate/{name}/seed_{}/", cell.seed),
            &[cell.base.clone(), cell.variant.clone()],
        )?;
        rows.push(vec![
            cell.seed.to_string(),
            cell.base.hypervolume.to_string(),
            cell.variant.hypervolume.to_string(),
        ]);
        for note in &cell.notes {
            out.note(note.clone());
        }
    }
    rows.push(vec![
        "median".to_string(),
        report.median_base_hypervolume.to_string(),
        report.median_variant_hypervolume.to_string(),
    ]);
    let header = ["seed", "base_hypervolume", "variant_hypervolume"].map(String::from).to_vec();
    write_rows(&out.path(&format!("ablate/{name}/summary.csv"))?, &header, &rows)?;
    out.write_json(&format!("ablate/{name}/report.json"), report)
}
