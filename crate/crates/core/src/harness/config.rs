use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmgp::GpHyperparams;
use crate::dualfilter::FilterConfig;
use crate::error::{Error, Result};
use crate::geometry::PlanarPose;
use crate::pushsim::{FrictionParams, NoiseSpec, FILTER_PERIOD};
use crate::superquadric::{EmsConfig, Superquadric};

const DEFAULT_CATALOG: &str = include_str!("../../../../configs/catalog.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogObject {
    pub name: String,
    pub true_shape: Superquadric,
    pub true_mass: f64,
    pub true_pose: PlanarPose,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    object: Vec<RawObject>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    name: String,
    shape: [f64; 5],
    mass: f64,
    #[serde(default)]
    pose: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub objects: Vec<CatalogObject>,
}

impl Catalog {
    /// The checked-in 30-object catalog.
    pub fn default_catalog() -> Self {
        Self::parse(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: CatalogFile = toml::from_str(text).map_err(|e| Error::Parse {
            what: "catalog",
            detail: e.to_string(),
        })?;
        let mut objects = Vec::with_capacity(file.object.len());
        for raw in file.object {
            let true_shape = Superquadric::from_array(raw.shape)?;
            if !(raw.mass > 0.0 && raw.mass.is_finite()) {
                return Err(Error::InvalidParameter(format!("{}: mass {} must be positive", raw.name, raw.mass)));
            }
            if objects.iter().any(|o: &CatalogObject| o.name == raw.name) {
                return Err(Error::InvalidParameter(format!("duplicate object name {}", raw.name)));
            }
            objects.push(CatalogObject {
                name: raw.name,
                true_shape,
                true_mass: raw.mass,
                true_pose: PlanarPose::new(raw.pose[0], raw.pose[1], raw.pose[2]),
            });
        }
        if objects.is_empty() {
            return Err(Error::InvalidParameter("catalog has no objects".into()));
        }
        Ok(Self { objects })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            object: &'a [RawObject],
        }
        let raw: Vec<RawObject> = self
            .objects
            .iter()
            .map(|o| RawObject {
                name: o.name.clone(),
                shape: o.true_shape.to_array(),
                mass: o.true_mass,
                pose: o.true_pose.as_array(),
            })
            .collect();
        toml::to_string(&Out { object: &raw }).expect("catalog serializes")
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }
}

/// Order in which catalog objects are presented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InteractionOrder {
    /// `"catalog"`: file order.
    Keyword(String),
    /// `{ shuffle = <seed> }`: a seeded permutation.
    Shuffled { shuffle: u64 },
    /// Explicit list of object names, each exactly once.
    Names(Vec<String>),
}

impl Default for InteractionOrder {
    fn default() -> Self {
        InteractionOrder::Keyword("catalog".into())
    }
}

impl InteractionOrder {
    /// Catalog indices in presentation order.
    pub fn resolve(&self, catalog: &Catalog) -> Result<Vec<usize>> {
        let n = catalog.len();
        match self {
            InteractionOrder::Keyword(k) if k == "catalog" => Ok((0..n).collect()),
            InteractionOrder::Keyword(k) => Err(Error::InvalidParameter(format!("unknown order keyword {k:?}"))),
            InteractionOrder::Shuffled { shuffle } => {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(*shuffle));
                Ok(idx)
            }
            InteractionOrder::Names(names) => {
                let mut seen = vec![false; n];
                let mut out = Vec::with_capacity(names.len());
                for name in names {
                    let i = catalog
                        .index_of(name)
                        .ok_or_else(|| Error::InvalidParameter(format!("order names unknown object {name}")))?;
                    if seen[i] {
                        return Err(Error::InvalidParameter(format!("object {name} listed twice")));
                    }
                    seen[i] = true;
                    out.push(i);
                }
                if out.len() != n {
                    return Err(Error::InvalidParameter("order must list every catalog object once".into()));
                }
                Ok(out)
            }
        }
    }
}

/// Synthetic multi-view capture of the object before the push.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    pub points: usize,
    pub views: usize,
    /// Standard deviation of per-coordinate noise (m).
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Points in the dense cloud the observed images are rendered from.
    pub observation_points: usize,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            points: 1500,
            views: 3,
            noise_sigma: 0.001,
            outlier_fraction: 0.05,
            observation_points: 8000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Catalog file; the bundled catalog when absent.
    pub catalog: Option<PathBuf>,
    pub order: InteractionOrder,
    /// Push duration (s).
    pub duration: f64,
    /// Filter period (s).
    pub period: f64,
    /// Surprise threshold for dataset growth.
    pub alpha: f64,
    pub out_dir: PathBuf,
    /// Initial pose belief standard deviations (m, rad).
    pub pose_sigma_xy: f64,
    pub pose_sigma_theta: f64,
    pub cloud: CloudConfig,
    pub ems: EmsConfig,
    pub filter: FilterConfig,
    pub friction: FrictionParams,
    pub rollout_noise: NoiseSpec,
    pub gp: GpHyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            catalog: None,
            order: InteractionOrder::default(),
            duration: 5.0,
            period: FILTER_PERIOD,
            alpha: 1.0,
            out_dir: PathBuf::from("out"),
            pose_sigma_xy: 0.005,
            pose_sigma_theta: 2f64.to_radians(),
            cloud: CloudConfig::default(),
            ems: EmsConfig::default(),
            filter: FilterConfig::default(),
            friction: FrictionParams::default(),
            rollout_noise: NoiseSpec::default(),
            gp: GpHyperparams::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            what: "run config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        // Relative catalog paths are taken from the config's directory.
        if let (Some(c), Some(dir)) = (&cfg.catalog, path.parent()) {
            if c.is_relative() {
                cfg.catalog = Some(dir.join(c));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.period > 0.0) {
            return Err(Error::InvalidParameter("duration and period must be positive".into()));
        }
        let steps = (self.duration / self.period).round();
        if steps < 1.0 || (steps * self.period - self.duration).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "period {} does not divide duration {}",
                self.period, self.duration
            )));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::InvalidParameter("alpha must be non-negative".into()));
        }
        if !(self.pose_sigma_xy > 0.0 && self.pose_sigma_theta > 0.0) {
            return Err(Error::InvalidParameter("pose sigmas must be positive".into()));
        }
        let c = &self.cloud;
        if c.points < 50 || c.views == 0 || !(c.noise_sigma >= 0.0) || !(0.0..1.0).contains(&c.outlier_fraction) || c.observation_points == 0 {
            return Err(Error::InvalidParameter("invalid cloud synthesis settings".into()));
        }
        self.ems.validate()?;
        self.friction.validate()?;
        self.gp.validate()?;
        self.filter.shrinkage.validate()?;
        self.filter.observation_noise.validate()?;
        self.filter.process_noise.validate()
    }

    pub fn load_catalog(&self) -> Result<Catalog> {
        match &self.catalog {
            Some(p) => Catalog::load(p),
            None => Ok(Catalog::default_catalog()),
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.period).round() as usize
    }
}
