//! Experiment grids in the flat `key = value` format.
//!
//! Parameterisation keys (`preset`, `a_first`, …, `alpha`) follow the
//! parameterisation file format. Grid keys take comma-separated lists:
//!
//! ```text
//! experiment = width-sweep
//! preset = mean-field
//! gamma0 = 0.1, 1, 4
//! kinds = mlp
//! widths = 64, 256
//! depths = 5
//! algorithm = pc_closed_form
//! steps = 100
//! seeds = 0, 1, 2
//! metrics = loss, grad_cosine
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pclab_core::optim::Rule;
use pclab_core::parameterization::{parse_real, preset};
use pclab_core::pc_engine::ActivityInit;
use pclab_core::{Activation, ArchKind, Parameterisation};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Bp,
    PcIterative,
    PcClosedForm,
}

impl FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "bp" => Ok(Algorithm::Bp),
            "pc_iterative" | "pc" => Ok(Algorithm::PcIterative),
            "pc_closed_form" => Ok(Algorithm::PcClosedForm),
            other => Err(LabError::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Loss,
    EquilibratedEnergy,
    Rescaling,
    EmpiricalRescaling,
    InferenceEnergy,
    InferenceConverged,
    GradCosine,
    SecondMoments,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::EquilibratedEnergy => "equilibrated_energy",
            Metric::Rescaling => "rescaling",
            Metric::EmpiricalRescaling => "empirical_rescaling",
            Metric::InferenceEnergy => "inference_energy",
            Metric::InferenceConverged => "inference_converged",
            Metric::GradCosine => "grad_cosine",
            Metric::SecondMoments => "second_moments",
        }
    }

    fn needs_linear(self) -> bool {
        matches!(
            self,
            Metric::EquilibratedEnergy | Metric::Rescaling | Metric::EmpiricalRescaling
        )
    }

    fn needs_inference(self) -> bool {
        matches!(self, Metric::InferenceEnergy | Metric::InferenceConverged)
    }
}

impl FromStr for Metric {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Metric::Loss,
            Metric::EquilibratedEnergy,
            Metric::Rescaling,
            Metric::EmpiricalRescaling,
            Metric::InferenceEnergy,
            Metric::InferenceConverged,
            Metric::GradCosine,
            Metric::SecondMoments,
        ];
        let s = s.trim();
        all.into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Toy { samples: usize, input_dim: usize },
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimiserSpec {
    pub rule: Rule,
    pub eta0: f64,
    pub width_depth_scaling: bool,
    pub adam_param_scaling: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub params: Parameterisation,
    pub gamma0s: Vec<f64>,
    pub kinds: Vec<ArchKind>,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub algorithm: Algorithm,
    /// Inference step sizes; one grid axis for `pc_iterative`.
    pub betas: Vec<f64>,
    pub inference_iters: usize,
    pub inference_tol: f64,
    pub activity_init: ActivityInit,
    pub optimiser: OptimiserSpec,
    pub steps: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Metric>,
    pub log_every: usize,
    pub output: Option<PathBuf>,
    pub data: DataSource,
    pub data_seed: u64,
    pub max_samples: Option<usize>,
    pub centred_targets: bool,
    pub init_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "experiment".into(),
            params: pclab_core::Preset::MeanField.params(),
            gamma0s: vec![1.0],
            kinds: vec![ArchKind::Mlp],
            widths: vec![64],
            depths: vec![5],
            activations: vec![Activation::Identity],
            algorithm: Algorithm::Bp,
            betas: vec![0.1],
            inference_iters: 20,
            inference_tol: 0.0,
            activity_init: ActivityInit::Forward,
            optimiser: OptimiserSpec {
                rule: Rule::Gd,
                eta0: 0.025,
                width_depth_scaling: false,
                adam_param_scaling: true,
            },
            steps: 100,
            batch_size: None,
            seeds: vec![0],
            metrics: vec![Metric::Loss],
            log_every: 1,
            output: None,
            data: DataSource::Toy {
                samples: 20,
                input_dim: 40,
            },
            data_seed: 0,
            max_samples: None,
            centred_targets: false,
            init_scale: 1.0,
        }
    }
}

fn list<T>(v: &str, parse: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(path))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            lines.push((idx + 1, k.trim().to_string(), v.trim().to_string()));
        }
        // The preset seeds the exponents before any override is applied.
        if let Some((n, _, v)) = lines.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg.params = preset(v).map_err(|e| LabError::Config(format!("line {n}: {e}")))?;
        }
        let mut data_kind = "toy".to_string();
        let mut toy = (20usize, 40usize);
        let mut images: Option<PathBuf> = None;
        let mut labels: Option<PathBuf> = None;
        let mut eta0_set = false;
        for (n, k, v) in &lines {
            let bad = || LabError::Config(format!("line {n}: bad value `{v}` for `{k}`"));
            let real = || parse_real(v).ok_or_else(bad);
            let count = || v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "preset" => {}
                "experiment" => cfg.experiment = v.clone(),
                "gamma0" | "gamma0s" => cfg.gamma0s = list(v, parse_real).ok_or_else(bad)?,
                "eta0" => {
                    cfg.optimiser.eta0 = real()?;
                    eta0_set = true;
                }
                key if Parameterisation::is_key(key) => cfg.params.set(key, real()?)?,
                "kinds" | "kind" => cfg.kinds = list(v, |s| s.parse().ok()).ok_or_else(bad)?,
                "widths" | "width" => cfg.widths = list(v, |s| s.parse().ok()).ok_or_else(bad)?,
                "depths" | "depth" => cfg.depths = list(v, |s| s.parse().ok()).ok_or_else(bad)?,
                "activations" | "activation" => {
                    cfg.activations = list(v, |s| s.parse().ok()).ok_or_else(bad)?
                }
                "algorithm" => cfg.algorithm = v.parse()?,
                "betas" | "beta" => cfg.betas = list(v, parse_real).ok_or_else(bad)?,
                "inference_iters" => cfg.inference_iters = count()?,
                "inference_tol" => cfg.inference_tol = real()?,
                "activity_init" => {
                    cfg.activity_init = match v.as_str() {
                        "forward" => ActivityInit::Forward,
                        "zero" => ActivityInit::Zero,
                        _ => return Err(bad()),
                    }
                }
                "optimizer" | "optimiser" => cfg.optimiser.rule = v.parse().map_err(|_| bad())?,
                "width_depth_scaling" => cfg.optimiser.width_depth_scaling = parse_bool(v).ok_or_else(bad)?,
                "adam_param_scaling" => cfg.optimiser.adam_param_scaling = parse_bool(v).ok_or_else(bad)?,
                "steps" => cfg.steps = count()?,
                "batch_size" => cfg.batch_size = Some(count()?).filter(|&b| b > 0),
                "seeds" => cfg.seeds = list(v, |s| s.parse().ok()).ok_or_else(bad)?,
                "metrics" => cfg.metrics = v.split(',').map(str::parse).collect::<Result<_>>()?,
                "log_every" => cfg.log_every = count()?,
                "output" => cfg.output = Some(PathBuf::from(v)),
                "data" => data_kind = v.clone(),
                "toy_samples" => toy.0 = count()?,
                "toy_dim" => toy.1 = count()?,
                "images" | "path" => images = Some(PathBuf::from(v)),
                "labels" => labels = Some(PathBuf::from(v)),
                "data_seed" => cfg.data_seed = v.parse().map_err(|_| bad())?,
                "max_samples" => cfg.max_samples = Some(count()?),
                "centred_targets" => cfg.centred_targets = parse_bool(v).ok_or_else(bad)?,
                "init_scale" => cfg.init_scale = real()?,
                other => return Err(LabError::Config(format!("line {n}: unknown key `{other}`"))),
            }
        }
        if eta0_set {
            cfg.params.eta0 = cfg.optimiser.eta0;
        } else {
            cfg.optimiser.eta0 = cfg.params.eta0;
        }
        cfg.data = match data_kind.as_str() {
            "toy" => DataSource::Toy {
                samples: toy.0,
                input_dim: toy.1,
            },
            "idx" => DataSource::Idx {
                images: images.ok_or_else(|| LabError::Config("idx data needs `images`".into()))?,
                labels: labels.ok_or_else(|| LabError::Config("idx data needs `labels`".into()))?,
            },
            "cifar" => DataSource::Cifar {
                path: images.ok_or_else(|| LabError::Config("cifar data needs `path`".into()))?,
            },
            other => return Err(LabError::Config(format!("unknown data source `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(LabError::Config(m.to_string()));
        if self.gamma0s.is_empty()
            || self.kinds.is_empty()
            || self.widths.is_empty()
            || self.depths.is_empty()
            || self.activations.is_empty()
            || self.seeds.is_empty()
        {
            return err("every grid axis needs at least one value");
        }
        if self.algorithm == Algorithm::PcIterative && self.betas.is_empty() {
            return err("pc_iterative needs at least one beta");
        }
        if self.widths.iter().any(|&n| n == 0) || self.depths.iter().any(|&l| l < 2) {
            return err("widths must be >= 1 and depths >= 2");
        }
        if self.log_every == 0 {
            return err("log_every must be >= 1");
        }
        if !(self.optimiser.eta0 > 0.0) {
            return err("eta0 must be > 0");
        }
        if self.gamma0s.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return err("gamma0 values must be positive");
        }
        if self.betas.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
            return err("betas must be >= 0");
        }
        let linear = self.activations.iter().all(|a| a.is_identity());
        let scalar = matches!(self.data, DataSource::Toy { .. });
        if self.algorithm == Algorithm::PcClosedForm && !(linear && scalar) {
            return err("pc_closed_form requires linear networks with scalar output");
        }
        for m in &self.metrics {
            if m.needs_linear() && !linear {
                return err(&format!("metric {} requires linear networks", m.name()));
            }
            if matches!(m, Metric::EquilibratedEnergy | Metric::Rescaling) && !scalar {
                return err(&format!("metric {} requires scalar output", m.name()));
            }
            if m.needs_inference() && self.algorithm != Algorithm::PcIterative {
                return err(&format!("metric {} requires algorithm pc_iterative", m.name()));
            }
        }
        if let DataSource::Toy { samples, input_dim } = self.data {
            if samples == 0 || input_dim == 0 {
                return err("toy task needs toy_samples >= 1 and toy_dim >= 1");
            }
        }
        let mut p = self.params.clone();
        p.gamma0 = self.gamma0s[0];
        p.validate()?;
        Ok(())
    }

    /// Betas that form a grid axis; `[None]` for algorithms without inference.
    pub fn beta_axis(&self) -> Vec<Option<f64>> {
        if self.algorithm == Algorithm::PcIterative {
            self.betas.iter().copied().map(Some).collect()
        } else {
            vec![None]
        }
    }

    pub fn num_runs(&self) -> usize {
        self.gamma0s.len()
            * self.kinds.len()
            * self.activations.len()
            * self.depths.len()
            * self.widths.len()
            * self.beta_axis().len()
            * self.seeds.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_grid() {
        let cfg = ExperimentConfig::parse(
            "experiment = demo\npreset = muP\ngamma0 = 0.1, 1/2\nwidths = 8, 16 # comment\n\
             depths = 3\nalgorithm = pc_iterative\nbetas = 0.5, 1\nmetrics = loss, grad_cosine\n\
             optimizer = adam\neta0 = 1e-3\nseeds = 1,2,3\nalpha = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment, "demo");
        assert_eq!(cfg.params.c, 1.0);
        assert_eq!(cfg.params.alpha, 0.0);
        assert_eq!(cfg.gamma0s, vec![0.1, 0.5]);
        assert_eq!(cfg.widths, vec![8, 16]);
        assert_eq!(cfg.optimiser.rule, Rule::Adam);
        assert_eq!(cfg.optimiser.eta0, 1e-3);
        assert_eq!(cfg.params.eta0, 1e-3);
        assert_eq!(cfg.metrics, vec![Metric::Loss, Metric::GradCosine]);
        assert_eq!(cfg.num_runs(), 2 * 2 * 2 * 3);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::parse("widths = \n").is_err());
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("activations = tanh\nalgorithm = pc_closed_form\n").is_err());
        assert!(ExperimentConfig::parse("activations = tanh\nmetrics = rescaling\n").is_err());
        assert!(ExperimentConfig::parse("metrics = inference_energy\n").is_err());
        assert!(ExperimentConfig::parse("depths = 1\n").is_err());
        assert!(ExperimentConfig::parse("widths = 8\nno equals sign\n").is_err());
        assert!(ExperimentConfig::parse("data = idx\n").is_err());
    }
}
