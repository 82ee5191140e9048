use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{MetricsRecord, RunSummary};
use crate::cmgp::{predict_many, CrossModalDataset, ShapeVector};
use crate::error::{Error, Result};

pub const FIGURE_FILES: [&str; 5] = [
    "cm_mse_vs_interaction.csv",
    "surprise_vs_interaction.csv",
    "efficiency_vs_interaction.csv",
    "filter_mse_vs_time.csv",
    "mass_vs_scale.csv",
];

/// Semi-axis lengths (m) of the scaled-shape sweep.
const SCALE_SWEEP: (f64, f64, usize) = (0.015, 0.09, 16);

#[derive(Deserialize)]
struct StepIn {
    #[allow(dead_code)]
    interaction: usize,
    t: f64,
    sq_error: f64,
}

#[derive(Serialize)]
struct MseRow {
    interaction: usize,
    catalog_mse: f64,
    shadow_catalog_mse: f64,
}

#[derive(Serialize)]
struct SurpriseRow<'a> {
    interaction: usize,
    object: &'a str,
    surprise: f64,
    inserted: bool,
}

#[derive(Serialize)]
struct EfficiencyRow {
    interaction: usize,
    dataset_size: usize,
    efficiency: f64,
}

#[derive(Serialize)]
struct TimeRow {
    t: f64,
    mass_mse: f64,
    runs: usize,
}

#[derive(Serialize)]
struct ScaleRow {
    ax: f64,
    ay: f64,
    az: f64,
    volumetric_scale: f64,
    mass_mean: f64,
    mass_var: f64,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingInput(p))
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a run directory and writes plot-ready CSVs into `dir/figures`.
/// Every input is read before anything is written.
pub fn emit_figures_data(dir: &Path) -> Result<Vec<PathBuf>> {
    let interactions = require(dir, "interactions.csv")?;
    let steps = require(dir, "steps.csv")?;
    let summary = require(dir, "summary.json")?;
    let dataset = require(dir, "dataset.jsonl")?;

    let records: Vec<MetricsRecord> = csv::Reader::from_path(&interactions)?.deserialize().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::InvalidParameter(format!("{} has no rows", interactions.display())));
    }
    let step_rows: Vec<StepIn> = csv::Reader::from_path(&steps)?.deserialize().collect::<std::result::Result<_, _>>()?;
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(&summary)?)?;
    let dataset = CrossModalDataset::load(&dataset)?;

    // Mean squared error per time stamp, keyed on the integer step.
    let mut by_t: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    for s in &step_rows {
        let e = by_t.entry((s.t * 1e6).round() as i64).or_insert((s.t, 0.0, 0));
        e.1 += s.sq_error;
        e.2 += 1;
    }

    let (lo, hi, n) = SCALE_SWEEP;
    let axes: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let queries: Vec<ShapeVector> = axes.iter().map(|&a| [0.5, 0.5, a, a, a]).collect();
    let preds = predict_many(&queries, &dataset, &summary.gp_hyper)?;

    let out = dir.join("figures");
    fs::create_dir_all(&out)?;
    let paths: Vec<PathBuf> = FIGURE_FILES.iter().map(|f| out.join(f)).collect();
    write_csv(
        &paths[0],
        records.iter().map(|r| MseRow {
            interaction: r.interaction,
            catalog_mse: r.catalog_mse,
            shadow_catalog_mse: r.shadow_catalog_mse,
        }),
    )?;
    write_csv(
        &paths[1],
        records.iter().map(|r| SurpriseRow {
            interaction: r.interaction,
            object: &r.object,
            surprise: r.surprise,
            inserted: r.inserted,
        }),
    )?;
    write_csv(
        &paths[2],
        records.iter().map(|r| EfficiencyRow {
            interaction: r.interaction,
            dataset_size: r.dataset_size,
            efficiency: r.efficiency,
        }),
    )?;
    write_csv(
        &paths[3],
        by_t.values().map(|&(t, sum, count)| TimeRow {
            t,
            mass_mse: sum / count as f64,
            runs: count,
        }),
    )?;
    write_csv(
        &paths[4],
        axes.iter().zip(&preds).map(|(&a, p)| ScaleRow {
            ax: a,
            ay: a,
            az: a,
            volumetric_scale: 1.0 / (3.0 * a * a).sqrt(),
            mass_mean: p.mean,
            mass_var: p.variance,
        }),
    )?;
    Ok(paths)
}
