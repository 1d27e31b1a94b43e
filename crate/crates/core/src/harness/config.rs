use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::problem::{InputTensor, Shape};
use crate::targets::{load_model, Classifier, Model, RemoteOracle, RemoteSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetProtocol {
    /// Every class other than the clean prediction.
    #[default]
    AllOtherClasses,
    /// One uniformly drawn class other than the clean prediction.
    RandomClass,
}

/// Where the attacked classifier lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRef {
    File(PathBuf),
    Remote(RemoteSpec),
}

/// A loaded target. Remote targets open one connection per worker.
#[derive(Debug, Clone)]
pub enum Target {
    Local(Model),
    Remote(RemoteSpec),
}

/// A target ready to answer queries from one worker.
pub enum TargetHandle<'a> {
    Local(&'a Model),
    Remote(RemoteOracle),
}

impl Target {
    pub fn load(model: &ModelRef) -> Result<Self> {
        Ok(match model {
            ModelRef::File(path) => Target::Local(load_model(path)?),
            ModelRef::Remote(spec) => Target::Remote(spec.clone()),
        })
    }

    pub fn input_shape(&self) -> Shape {
        match self {
            Target::Local(m) => m.input_shape(),
            Target::Remote(s) => s.shape,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Target::Local(m) => m.num_classes(),
            Target::Remote(s) => s.num_classes,
        }
    }

    pub fn handle(&self) -> Result<TargetHandle<'_>> {
        Ok(match self {
            Target::Local(m) => TargetHandle::Local(m),
            Target::Remote(s) => TargetHandle::Remote(s.connect()?),
        })
    }
}

impl TargetHandle<'_> {
    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            TargetHandle::Local(m) => *m,
            TargetHandle::Remote(r) => r,
        }
    }
}

fn default_max_queries() -> u64 {
    3000
}

fn default_workers() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_cdf_points() -> usize {
    100
}

/// One campaign: every attack against every (image, target class, epsilon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub attacks: Vec<AttackConfig>,
    pub model: ModelRef,
    pub images: PathBuf,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_max_queries")]
    pub max_queries: u64,
    #[serde(default)]
    pub protocol: TargetProtocol,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Restrict attacks to the `k` highest-variance pixels of each image.
    #[serde(default)]
    pub mask_top_k: Option<usize>,
    /// Number of points on the CDF query grid.
    #[serde(default = "default_cdf_points")]
    pub cdf_points: usize,
}

impl ExperimentConfig {
    /// Reads a TOML file; relative paths inside it resolve against its
    /// directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.images);
        rebase(&mut config.output);
        if let ModelRef::File(p) = &mut config.model {
            rebase(p);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::Config("no attacks configured".into()));
        }
        for attack in &self.attacks {
            if let AttackConfig::Bobyqa(b) = attack {
                b.validate()?;
            }
        }
        if self.epsilons.is_empty() {
            return Err(Error::Config("no epsilon values configured".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("epsilon must be positive, got {e}")));
        }
        if self.max_queries == 0 {
            return Err(Error::Config("max_queries must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if self.cdf_points == 0 {
            return Err(Error::Config("cdf_points must be positive".into()));
        }
        if self.mask_top_k == Some(0) {
            return Err(Error::Config("mask_top_k must be positive".into()));
        }
        let mut files = vec![&self.images];
        if let ModelRef::File(p) = &self.model {
            files.push(p);
        }
        if let Some(missing) = files.into_iter().find(|p| !p.is_file()) {
            return Err(Error::Config(format!("file not found: {}", missing.display())));
        }
        Ok(())
    }

    /// Evenly spaced query counts ending at the budget.
    pub fn query_grid(&self) -> Vec<u64> {
        let points = self.cdf_points.min(self.max_queries as usize) as u64;
        let mut grid: Vec<u64> = (1..=points)
            .map(|k| (k * self.max_queries).div_ceil(points))
            .collect();
        grid.dedup();
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub data: Vec<f64>,
}

/// A set of images sharing one shape and pixel range, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    pub shape: Shape,
    pub lower: f64,
    pub upper: f64,
    pub images: Vec<ImageEntry>,
}

impl ImageSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn tensors(&self) -> Result<Vec<(String, InputTensor)>> {
        self.images
            .iter()
            .map(|e| {
                InputTensor::new(self.shape, e.data.clone(), self.lower, self.upper)
                    .map(|t| (e.id.clone(), t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        toml::from_str(
            r#"
            model = { file = "m.model" }
            images = "images.json"
            epsilons = [0.05]
            max_queries = 10
            cdf_points = 4

            [[attacks]]
            name = "square"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_and_grid() {
        let c = config();
        assert_eq!(c.protocol, TargetProtocol::AllOtherClasses);
        assert_eq!(c.workers, 1);
        assert_eq!(c.query_grid(), vec![3, 5, 8, 10]);
    }

    #[test]
    fn missing_files_are_rejected() {
        let err = config().validate().unwrap_err();
        assert!(err.to_string().contains("not found"), "{err}");
    }
}
