use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Catalog, RunConfig};
use super::scene::{object_seed, prepare_object, PreparedObject, Stream};
use crate::cmgp::{CrossModalDataset, CrossModalGp, GpHyperparams, MassPrior, DEFAULT_PRIOR};
use crate::dualfilter::{run_filter, write_beliefs_csv, BeliefRecord, FilterConfig, MassGaussian, PoseGaussian};
use crate::error::{Error, Result};

/// Where the mass prior of each interaction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    WithCm,
    WithoutCm,
}

/// One interaction's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub interaction: usize,
    pub object: String,
    pub prior_mean: f64,
    pub prior_var: f64,
    pub final_mass: f64,
    pub true_mass: f64,
    pub final_sq_error: f64,
    pub surprise: f64,
    pub inserted: bool,
    pub dataset_size: usize,
    /// `100·(1 − dataset size / interactions so far)`.
    pub efficiency: f64,
    /// Prior-prediction MSE over the whole catalog after this interaction.
    pub catalog_mse: f64,
    /// Same for a GP that admits every interaction.
    pub shadow_catalog_mse: f64,
    #[serde(skip)]
    pub step_sq_errors: Vec<f64>,
    #[serde(skip)]
    pub beliefs: Vec<BeliefRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mode: PriorMode,
    pub alpha: f64,
    pub order: Vec<String>,
    pub interactions: usize,
    pub dataset_size: usize,
    pub shadow_dataset_size: usize,
    pub efficiency: f64,
    pub final_catalog_mse: f64,
    pub final_shadow_catalog_mse: f64,
    pub mean_final_sq_error: f64,
    pub gp_hyper: GpHyperparams,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub dataset: CrossModalDataset,
    pub summary: RunSummary,
}

/// Catalog with perception and simulation done for every object.
pub struct Experiment {
    pub config: RunConfig,
    pub catalog: Catalog,
    pub prepared: Vec<Result<PreparedObject>>,
}

impl Experiment {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let catalog = config.load_catalog()?;
        let prepared = catalog
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let p = prepare_object(config, i, o);
                if let Err(e) = &p {
                    log::error!("preparing {} failed: {e}", o.name);
                }
                p
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            catalog,
            prepared,
        })
    }

    fn catalog_mse(&self, gp: &CrossModalGp) -> Result<f64> {
        let ok: Vec<&PreparedObject> = self.prepared.iter().filter_map(|p| p.as_ref().ok()).collect();
        if ok.is_empty() {
            return Ok(f64::NAN);
        }
        let inputs: Vec<_> = ok.iter().map(|p| p.gp_input).collect();
        let preds = gp.predict_many(&inputs)?;
        Ok(preds.iter().zip(&ok).map(|(q, p)| (q.mean - p.object.true_mass).powi(2)).sum::<f64>() / ok.len() as f64)
    }

    fn filter_config(&self, p: &PreparedObject) -> FilterConfig {
        FilterConfig {
            seed: object_seed(self.config.seed, p.index, Stream::Filter),
            ..self.config.filter
        }
    }

    fn interact(&self, p: &PreparedObject, prior: &MassPrior) -> Result<Vec<BeliefRecord>> {
        let pose = PoseGaussian::isotropic(&p.fitted_pose, self.config.pose_sigma_xy, self.config.pose_sigma_theta);
        let mass = MassGaussian {
            mean: prior.mean,
            var: prior.variance,
        };
        let beliefs = run_filter(&pose, &mass, &p.steps, &p.model, &self.filter_config(p))?;
        Ok(beliefs
            .iter()
            .enumerate()
            .map(|(k, b)| BeliefRecord::new((k + 1) as f64 * self.config.period, b))
            .collect())
    }

    /// Runs the closed loop over `order`. With `persist`, the dataset
    /// file in that directory is replaced after every insertion.
    pub fn run(&self, order: &[usize], mode: PriorMode, persist: Option<&Path>) -> Result<RunOutput> {
        let mut gp = CrossModalGp::new(self.config.gp);
        let mut shadow = CrossModalGp::new(self.config.gp);
        let mut records = Vec::with_capacity(order.len());
        let mut failures = Vec::new();
        for &idx in order {
            let name = &self.catalog.objects[idx].name;
            let p = match &self.prepared[idx] {
                Ok(p) => p,
                Err(e) => {
                    failures.push(format!("{name}: {e}"));
                    continue;
                }
            };
            let k = records.len();
            let prior = match mode {
                PriorMode::WithCm => gp.predict(&p.gp_input)?,
                PriorMode::WithoutCm => DEFAULT_PRIOR,
            };
            let beliefs = match self.interact(p, &prior) {
                Ok(b) => b,
                Err(e) => {
                    log::error!("interaction with {name} failed: {e}");
                    failures.push(format!("{name}: {e}"));
                    continue;
                }
            };
            let truth = p.object.true_mass;
            let final_mass = beliefs.last().map(|b| b.mean[3]).unwrap_or(prior.mean);
            let gate = gp.observe(&p.gp_input, &prior, final_mass, self.config.alpha, k)?;
            if gate.inserted {
                if let Some(dir) = persist {
                    gp.dataset.save(&dir.join("dataset.jsonl"))?;
                }
            }
            let shadow_prior = shadow.predict(&p.gp_input)?;
            shadow.observe(&p.gp_input, &shadow_prior, final_mass, 0.0, k)?;
            let interactions = k + 1;
            records.push(MetricsRecord {
                interaction: k,
                object: name.clone(),
                prior_mean: prior.mean,
                prior_var: prior.variance,
                final_mass,
                true_mass: truth,
                final_sq_error: (final_mass - truth).powi(2),
                surprise: gate.surprise,
                inserted: gate.inserted,
                dataset_size: gp.dataset.len(),
                efficiency: 100.0 * (1.0 - gp.dataset.len() as f64 / interactions as f64),
                catalog_mse: self.catalog_mse(&gp)?,
                shadow_catalog_mse: self.catalog_mse(&shadow)?,
                step_sq_errors: beliefs.iter().map(|b| (b.mean[3] - truth).powi(2)).collect(),
                beliefs,
            });
        }
        if records.is_empty() {
            return Err(Error::InvalidParameter(format!("no interaction succeeded: {failures:?}")));
        }
        let last = records.last().expect("non-empty");
        let summary = RunSummary {
            seed: self.config.seed,
            mode,
            alpha: self.config.alpha,
            order: order.iter().map(|&i| self.catalog.objects[i].name.clone()).collect(),
            interactions: records.len(),
            dataset_size: gp.dataset.len(),
            shadow_dataset_size: shadow.dataset.len(),
            efficiency: last.efficiency,
            final_catalog_mse: last.catalog_mse,
            final_shadow_catalog_mse: last.shadow_catalog_mse,
            mean_final_sq_error: records.iter().map(|r| r.final_sq_error).sum::<f64>() / records.len() as f64,
            gp_hyper: gp.hyper,
            failures,
        };
        Ok(RunOutput {
            records,
            dataset: gp.dataset,
            summary,
        })
    }
}

#[derive(Serialize)]
struct StepRow<'a> {
    interaction: usize,
    object: &'a str,
    step: usize,
    t: f64,
    mass_mean: f64,
    mass_var: f64,
    sq_error: f64,
}

fn file_name(r: &MetricsRecord) -> String {
    let clean: String = r.object.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("{:02}-{clean}.csv", r.interaction)
}

/// Writes interactions.csv, steps.csv, summary.json, dataset.jsonl and one
/// belief CSV per interaction.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir.join("beliefs"))?;
    let mut w = csv::Writer::from_path(dir.join("interactions.csv"))?;
    for r in &out.records {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("steps.csv"))?;
    for r in &out.records {
        for (k, (b, e)) in r.beliefs.iter().zip(&r.step_sq_errors).enumerate() {
            w.serialize(StepRow {
                interaction: r.interaction,
                object: &r.object,
                step: k + 1,
                t: b.t,
                mass_mean: b.mean[3],
                mass_var: b.cov[15],
                sq_error: *e,
            })?;
        }
    }
    w.flush()?;
    for r in &out.records {
        write_beliefs_csv(fs::File::create(dir.join("beliefs").join(file_name(r)))?, &r.beliefs)?;
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)? + "\n")?;
    out.dataset.save(&dir.join("dataset.jsonl"))?;
    Ok(())
}

/// The closed loop in the configured order, written to `out_dir`.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput> {
    let exp = Experiment::prepare(config)?;
    let order = config.order.resolve(&exp.catalog)?;
    fs::create_dir_all(&config.out_dir)?;
    let out = exp.run(&order, PriorMode::WithCm, Some(&config.out_dir))?;
    write_outputs(&config.out_dir, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub interaction: usize,
    pub object: String,
    pub true_mass: f64,
    pub with_prior_mean: f64,
    pub without_prior_mean: f64,
    pub with_final_mass: f64,
    pub without_final_mass: f64,
    pub with_sq_error: f64,
    pub without_sq_error: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub with_cm: RunOutput,
    pub without_cm: RunOutput,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean final squared mass error over interactions from `start` on,
    /// `(with, without)`.
    pub fn mean_sq_error_from(&self, start: usize) -> (f64, f64) {
        let late: Vec<&AblationRow> = self.rows.iter().filter(|r| r.interaction >= start).collect();
        let n = late.len().max(1) as f64;
        (
            late.iter().map(|r| r.with_sq_error).sum::<f64>() / n,
            late.iter().map(|r| r.without_sq_error).sum::<f64>() / n,
        )
    }
}

/// Runs both prior modes on the same prepared objects and seeds.
pub fn run_ablation_prepared(exp: &Experiment, order: &[usize]) -> Result<AblationReport> {
    let with_cm = exp.run(order, PriorMode::WithCm, None)?;
    let without_cm = exp.run(order, PriorMode::WithoutCm, None)?;
    let rows = with_cm
        .records
        .iter()
        .filter_map(|a| {
            let b = without_cm.records.iter().find(|b| b.object == a.object)?;
            Some(AblationRow {
                interaction: a.interaction,
                object: a.object.clone(),
                true_mass: a.true_mass,
                with_prior_mean: a.prior_mean,
                without_prior_mean: b.prior_mean,
                with_final_mass: a.final_mass,
                without_final_mass: b.final_mass,
                with_sq_error: a.final_sq_error,
                without_sq_error: b.final_sq_error,
            })
        })
        .collect();
    Ok(AblationReport { with_cm, without_cm, rows })
}

/// Ablation in the configured order; writes `with_cm/`, `without_cm/` and
/// `ablation.csv` under `out_dir`.
pub fn run_ablation(config: &RunConfig) -> Result<AblationReport> {
    let exp = Experiment::prepare(config)?;
    let order = config.order.resolve(&exp.catalog)?;
    let report = run_ablation_prepared(&exp, &order)?;
    write_outputs(&config.out_dir.join("with_cm"), &report.with_cm)?;
    write_outputs(&config.out_dir.join("without_cm"), &report.without_cm)?;
    let mut w = csv::Writer::from_path(config.out_dir.join("ablation.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(report)
}
