//! Cross-modal Gaussian process from superquadric shape to mass.
//!
//! Inputs are `[ε₁, ε₂, a_x, a_y, a_z]`; targets are filtered mass
//! estimates. The kernel is `s · exp(−½ Σ ((x_d − x′_d)/ℓ_d)²)` evaluated on
//! inputs standardized by the dataset's own mean and spread, so the
//! lengthscales are in units of that spread. The GP has a constant mean
//! equal to the default prior mean.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHAPE_DIM: usize = 5;
pub type ShapeVector = [f64; SHAPE_DIM];

/// Prior used when nothing has been learned yet.
pub const DEFAULT_PRIOR: MassPrior = MassPrior { mean: 0.5, variance: 0.0625 };

/// Variance added to the Gram diagonal, (0.02 kg)².
pub const NOISE_FLOOR: f64 = 4e-4;

/// Smallest spread used to standardize each input dimension.
const MIN_INPUT_SCALE: ShapeVector = [0.05, 0.05, 0.005, 0.005, 0.005];

/// Jitter tried, in order, when the Gram matrix fails to factor.
const JITTER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassPrior {
    pub mean: f64,
    pub variance: f64,
}

/// One learned shape/mass pair, as persisted on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub shape: ShapeVector,
    pub mass: f64,
    pub surprise: f64,
    pub interaction_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossModalDataset {
    records: Vec<DatasetRecord>,
}

impl CrossModalDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn inputs(&self) -> impl Iterator<Item = &ShapeVector> {
        self.records.iter().map(|r| &r.shape)
    }

    pub fn targets(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.mass)
    }

    pub fn push(&mut self, record: DatasetRecord) -> Result<()> {
        if !(record.mass > 0.0) || !record.mass.is_finite() {
            return Err(Error::InvalidParameter(format!("dataset target {} must be positive", record.mass)));
        }
        if record.shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset input"));
        }
        self.records.push(record);
        Ok(())
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut out = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                what: "dataset line",
                detail: format!("line {}: {e}", i + 1),
            })?;
            out.push(rec)?;
        }
        Ok(out)
    }

    /// Replaces `path` atomically: the file is written next to it and
    /// renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_jsonl(&mut f)?;
            f.flush()?;
            f.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::read_jsonl(BufReader::new(fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// Signal variance `s` in kg².
    pub constant_scale: f64,
    /// Per-dimension lengthscales in standardized input units.
    pub rbf_lengthscales: ShapeVector,
    pub noise_floor: f64,
}

impl Default for GpHyperparams {
    fn default() -> Self {
        Self {
            constant_scale: DEFAULT_PRIOR.variance,
            rbf_lengthscales: [1.0; SHAPE_DIM],
            noise_floor: NOISE_FLOOR,
        }
    }
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.constant_scale > 0.0 && self.noise_floor > 0.0 && self.rbf_lengthscales.iter().all(|&l| l > 0.0);
        if ok && self.constant_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter("GP hyperparameters must be positive".into()))
        }
    }

    fn kernel(&self, a: &ShapeVector, b: &ShapeVector) -> f64 {
        let mut s = 0.0;
        for d in 0..SHAPE_DIM {
            let u = (a[d] - b[d]) / self.rbf_lengthscales[d];
            s += u * u;
        }
        self.constant_scale * (-0.5 * s).exp()
    }
}

/// Per-dimension affine map applied to inputs before the kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaling {
    pub mean: ShapeVector,
    pub scale: ShapeVector,
}

impl InputScaling {
    /// Mean and population standard deviation of the dataset inputs, the
    /// latter floored per dimension.
    pub fn fit(dataset: &CrossModalDataset) -> Self {
        let n = dataset.len().max(1) as f64;
        let mut mean = [0.0; SHAPE_DIM];
        for x in dataset.inputs() {
            for d in 0..SHAPE_DIM {
                mean[d] += x[d] / n;
            }
        }
        let mut scale = [0.0; SHAPE_DIM];
        for x in dataset.inputs() {
            for d in 0..SHAPE_DIM {
                scale[d] += (x[d] - mean[d]).powi(2) / n;
            }
        }
        for d in 0..SHAPE_DIM {
            scale[d] = scale[d].sqrt().max(MIN_INPUT_SCALE[d]);
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &ShapeVector) -> ShapeVector {
        std::array::from_fn(|d| (x[d] - self.mean[d]) / self.scale[d])
    }
}

/// Factored Gram matrix for repeated predictions.
struct Posterior {
    inputs: Vec<ShapeVector>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    residual: DVector<f64>,
}

fn factor_gram(inputs: &[ShapeVector], targets: &[f64], hyper: &GpHyperparams) -> Result<Posterior> {
    let n = inputs.len();
    let gram = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&inputs[i], &inputs[j]) + if i == j { hyper.noise_floor } else { 0.0 });
    let residual = DVector::from_iterator(n, targets.iter().map(|y| y - DEFAULT_PRIOR.mean));
    for jitter in JITTER {
        let m = &gram + DMatrix::identity(n, n) * jitter;
        if let Some(chol) = m.cholesky() {
            let alpha = chol.solve(&residual);
            return Ok(Posterior {
                inputs: inputs.to_vec(),
                chol,
                alpha,
                residual,
            });
        }
    }
    Err(Error::NotPositiveDefinite("GP Gram matrix"))
}

impl Posterior {
    fn predict(&self, q: &ShapeVector, hyper: &GpHyperparams) -> MassPrior {
        let k = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|x| hyper.kernel(x, q)));
        let mean = DEFAULT_PRIOR.mean + k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (hyper.constant_scale - k.dot(&v)).clamp(f64::MIN_POSITIVE, hyper.constant_scale);
        MassPrior { mean, variance: var }
    }

    fn log_marginal(&self) -> f64 {
        let n = self.inputs.len() as f64;
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * self.residual.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

fn standardized(dataset: &CrossModalDataset) -> (InputScaling, Vec<ShapeVector>, Vec<f64>) {
    let scaling = InputScaling::fit(dataset);
    let xs = dataset.inputs().map(|x| scaling.apply(x)).collect();
    (scaling, xs, dataset.targets().collect())
}

/// GP posterior at `query`; the default prior for an empty dataset.
pub fn predict_prior(query: &ShapeVector, dataset: &CrossModalDataset, hyper: &GpHyperparams) -> Result<MassPrior> {
    Ok(predict_many(std::slice::from_ref(query), dataset, hyper)?[0])
}

/// Batch form of [`predict_prior`] sharing one factorization.
pub fn predict_many(queries: &[ShapeVector], dataset: &CrossModalDataset, hyper: &GpHyperparams) -> Result<Vec<MassPrior>> {
    if queries.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GP query"));
    }
    hyper.validate()?;
    if dataset.is_empty() {
        return Ok(vec![DEFAULT_PRIOR; queries.len()]);
    }
    let (scaling, xs, ys) = standardized(dataset);
    let post = factor_gram(&xs, &ys, hyper)?;
    Ok(queries.iter().map(|q| post.predict(&scaling.apply(q), hyper)).collect())
}

/// Log marginal likelihood of the dataset targets.
pub fn log_marginal_likelihood(dataset: &CrossModalDataset, hyper: &GpHyperparams) -> Result<f64> {
    hyper.validate()?;
    let (_, xs, ys) = standardized(dataset);
    Ok(factor_gram(&xs, &ys, hyper)?.log_marginal())
}

// Search box in log space: ln s, then ln ℓ_d.
const LOG_SCALE_BOUNDS: (f64, f64) = (-9.0, 1.0);
const LOG_LENGTH_BOUNDS: (f64, f64) = (-2.5, 3.5);

struct NegLml<'a> {
    xs: &'a [ShapeVector],
    ys: &'a [f64],
    noise_floor: f64,
}

fn unpack(p: &[f64], noise_floor: f64) -> GpHyperparams {
    GpHyperparams {
        constant_scale: p[0].clamp(LOG_SCALE_BOUNDS.0, LOG_SCALE_BOUNDS.1).exp(),
        rbf_lengthscales: std::array::from_fn(|d| p[d + 1].clamp(LOG_LENGTH_BOUNDS.0, LOG_LENGTH_BOUNDS.1).exp()),
        noise_floor,
    }
}

fn pack(h: &GpHyperparams) -> Vec<f64> {
    std::iter::once(h.constant_scale.ln()).chain(h.rbf_lengthscales.iter().map(|l| l.ln())).collect()
}

impl CostFunction for NegLml<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let h = unpack(p, self.noise_floor);
        // Quadratic wall outside the box keeps the simplex inside.
        let mut wall = (p[0] - p[0].clamp(LOG_SCALE_BOUNDS.0, LOG_SCALE_BOUNDS.1)).powi(2);
        for v in &p[1..] {
            wall += (v - v.clamp(LOG_LENGTH_BOUNDS.0, LOG_LENGTH_BOUNDS.1)).powi(2);
        }
        Ok(match factor_gram(self.xs, self.ys, &h) {
            Ok(post) => -post.log_marginal() + 1e3 * wall,
            Err(_) => f64::INFINITY,
        })
    }
}

/// Starts for the multi-start search besides the caller's guess.
const STARTS: [(f64, f64); 4] = [(0.0625, 1.0), (0.02, 0.5), (0.2, 2.0), (0.0625, 4.0)];

/// Maximizes the log marginal likelihood over signal variance and
/// lengthscales with Nelder-Mead from several starts. The noise floor is
/// held fixed. Falls back to `init` when nothing better is found.
pub fn fit_hyperparams(dataset: &CrossModalDataset, init: &GpHyperparams) -> GpHyperparams {
    if dataset.len() < 2 || init.validate().is_err() {
        return *init;
    }
    let (_, xs, ys) = standardized(dataset);
    let problem = NegLml {
        xs: &xs,
        ys: &ys,
        noise_floor: init.noise_floor,
    };
    let Ok(init_cost) = problem.cost(&pack(init)) else {
        return *init;
    };
    let mut best = (init_cost, *init);
    let starts = std::iter::once(pack(init)).chain(STARTS.iter().map(|&(s, l)| {
        pack(&GpHyperparams {
            constant_scale: s,
            rbf_lengthscales: [l; SHAPE_DIM],
            noise_floor: init.noise_floor,
        })
    }));
    for start in starts {
        let mut simplex = vec![start.clone()];
        for d in 0..start.len() {
            let mut v = start.clone();
            v[d] += 0.7;
            simplex.push(v);
        }
        let Ok(solver) = NelderMead::new(simplex).with_sd_tolerance(1e-7) else {
            continue;
        };
        let problem = NegLml {
            xs: &xs,
            ys: &ys,
            noise_floor: init.noise_floor,
        };
        let Ok(res) = Executor::new(problem, solver).configure(|s| s.max_iters(600)).run() else {
            continue;
        };
        let state = res.state();
        if let Some(p) = state.get_best_param() {
            let h = unpack(p, init.noise_floor);
            let Ok(c) = NegLml {
                xs: &xs,
                ys: &ys,
                noise_floor: init.noise_floor,
            }
            .cost(&pack(&h)) else {
                continue;
            };
            if c < best.0 {
                best = (c, h);
            }
        }
    }
    best.1
}

/// Squared deviation of the posterior mean from the prior mean in units of
/// the prior variance.
pub fn surprise(prior: &MassPrior, posterior_mean: f64) -> f64 {
    (prior.mean - posterior_mean).powi(2) / prior.variance
}

/// Outcome of presenting one interaction to the gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub inserted: bool,
    pub surprise: f64,
}

/// Adds `(query, posterior_mean)` when the surprise reaches `alpha`.
/// `alpha = 0` admits everything and `alpha = ∞` nothing.
pub fn maybe_insert(
    dataset: &mut CrossModalDataset,
    query: &ShapeVector,
    prior: &MassPrior,
    posterior_mean: f64,
    alpha: f64,
    interaction_index: usize,
) -> Result<GateOutcome> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidParameter(format!("surprise threshold {alpha} must be non-negative")));
    }
    if !(prior.variance > 0.0) {
        return Err(Error::InvalidParameter("prior variance must be positive".into()));
    }
    let s = surprise(prior, posterior_mean);
    let inserted = s >= alpha;
    if inserted {
        dataset.push(DatasetRecord {
            shape: *query,
            mass: posterior_mean,
            surprise: s,
            interaction_index,
        })?;
    }
    Ok(GateOutcome { inserted, surprise: s })
}

/// Dataset plus hyperparameters, refitted after every insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalGp {
    pub dataset: CrossModalDataset,
    pub hyper: GpHyperparams,
}

impl CrossModalGp {
    pub fn new(init: GpHyperparams) -> Self {
        Self {
            dataset: CrossModalDataset::new(),
            hyper: init,
        }
    }

    pub fn from_dataset(dataset: CrossModalDataset, init: GpHyperparams) -> Self {
        let hyper = fit_hyperparams(&dataset, &init);
        Self { dataset, hyper }
    }

    pub fn predict(&self, query: &ShapeVector) -> Result<MassPrior> {
        predict_prior(query, &self.dataset, &self.hyper)
    }

    pub fn predict_many(&self, queries: &[ShapeVector]) -> Result<Vec<MassPrior>> {
        predict_many(queries, &self.dataset, &self.hyper)
    }

    /// Gate, insert and refit starting from the current hyperparameters.
    pub fn observe(&mut self, query: &ShapeVector, prior: &MassPrior, posterior_mean: f64, alpha: f64, index: usize) -> Result<GateOutcome> {
        let out = maybe_insert(&mut self.dataset, query, prior, posterior_mean, alpha, index)?;
        if out.inserted {
            self.hyper = fit_hyperparams(&self.dataset, &self.hyper);
        }
        Ok(out)
    }
}
