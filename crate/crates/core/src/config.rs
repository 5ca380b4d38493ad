//! Experiment configuration files.
//!
//! Files are TOML with unknown keys rejected. Every field is optional in the
//! file; missing fields take the per-task defaults, and the fully resolved
//! configuration can be written back out so a run has no hidden settings.
//!
//! ```toml
//! task = "poisson"
//! seed = 0
//! out_dir = "runs/poisson"
//! likelihood = "gaussian"
//!
//! [noise]
//! kind = "functional_gaussian"
//! sigma = 0.1
//!
//! [model]
//! width = [2, 2, 1]
//! grid = 5
//! k = 3
//! order = 4
//!
//! [train]
//! iterations = 20000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LikelihoodChoice, Mode, ModelConfig};
use crate::pde::{Function1d, NoiseDependence, PdeKind, PdeTask};
use crate::train::{Fit1dTask, Noise, Task, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    F1,
    F2,
    F3,
    Poisson,
    Helmholtz,
}

impl TaskName {
    pub fn is_pde(self) -> bool {
        matches!(self, Self::Poisson | Self::Helmholtz)
    }

    fn function(self) -> Option<Function1d> {
        match self {
            Self::F1 => Some(Function1d::F1),
            Self::F2 => Some(Function1d::F2),
            Self::F3 => Some(Function1d::F3),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub width: Option<Vec<usize>>,
    pub grid: Option<usize>,
    pub k: Option<usize>,
    pub order: Option<u32>,
    pub domain: Option<[f64; 2]>,
    pub surrogate_width: Option<Vec<usize>>,
    pub flow_steps: Option<usize>,
    pub mode: Option<Mode>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrain {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub iterations: Option<usize>,
    pub reset_every: Option<usize>,
    pub final_phase_iters: Option<usize>,
    pub final_phase_lr: Option<f64>,
    pub kl_basis: Option<bool>,
    pub log_every: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawData {
    /// Number of training points for 1-D tasks.
    pub n_points: Option<usize>,
    /// 1-D input interval.
    pub domain: Option<[f64; 2]>,
    /// Training grid side for PDE tasks.
    pub train_grid: Option<usize>,
    pub noise_dependence: Option<NoiseDependence>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub kappa: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInference {
    pub samples: Option<usize>,
    /// Side of the square test grid (PDE tasks).
    pub test_grid: Option<usize>,
    /// Number of evenly spaced test points (1-D tasks).
    pub test_points: Option<usize>,
}

/// The file format: every field optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub task: TaskName,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub likelihood: Option<LikelihoodChoice>,
    pub noise: Option<Noise>,
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub train: RawTrain,
    #[serde(default)]
    pub data: RawData,
    #[serde(default)]
    pub inference: RawInference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inference {
    pub samples: usize,
    pub test_grid: usize,
    pub test_points: usize,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: TaskName,
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: Inference,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn check_positive(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    /// Defaults for one task with nothing overridden.
    pub fn defaults(task: TaskName) -> Self {
        RawConfig::bare(task).resolve().expect("defaults are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        raw.resolve()
    }

    /// The resolved configuration with every field spelled out.
    pub fn to_raw(&self) -> RawConfig {
        let m = &self.model;
        let t = &self.train;
        let (noise, data) = match &self.task {
            Task::Fit1d(f) => (
                f.noise,
                RawData {
                    n_points: Some(f.n_points),
                    domain: Some([f.domain.0, f.domain.1]),
                    ..RawData::default()
                },
            ),
            Task::Pde(p) => {
                let (a1, a2, kappa) = match p.kind {
                    PdeKind::Poisson => (None, None, None),
                    PdeKind::Helmholtz { a1, a2, kappa } => (Some(a1), Some(a2), Some(kappa)),
                };
                let noise = if p.sigma_noise > 0.0 {
                    Noise::FunctionalGaussian { sigma: p.sigma_noise }
                } else {
                    Noise::None
                };
                (
                    noise,
                    RawData {
                        train_grid: Some(p.train_grid_n),
                        noise_dependence: Some(p.noise_dependence),
                        a1,
                        a2,
                        kappa,
                        ..RawData::default()
                    },
                )
            }
        };
        RawConfig {
            task: self.name,
            seed: Some(self.seed),
            out_dir: Some(self.out_dir.clone()),
            likelihood: Some(m.likelihood),
            noise: Some(noise),
            model: RawModel {
                width: Some(m.width.clone()),
                grid: Some(m.grid),
                k: Some(m.span),
                order: Some(m.order),
                domain: Some([m.input_domain.0, m.input_domain.1]),
                surrogate_width: Some(m.surrogate_width.clone().unwrap_or_else(|| m.width.clone())),
                flow_steps: Some(m.flow_steps),
                mode: Some(m.mode),
            },
            train: RawTrain {
                alpha: Some(t.alpha),
                beta: Some(t.beta),
                lr: Some(t.lr),
                iterations: Some(t.iterations),
                reset_every: Some(t.reset_every),
                final_phase_iters: Some(t.final_phase_iters),
                final_phase_lr: Some(t.final_phase_lr),
                kl_basis: Some(t.kl_basis),
                log_every: Some(t.log_every),
            },
            data,
            inference: RawInference {
                samples: Some(self.inference.samples),
                test_grid: Some(self.inference.test_grid),
                test_points: Some(self.inference.test_points),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_raw()).map_err(|e| Error::Config(e.to_string()))
    }
}

impl RawConfig {
    pub fn bare(task: TaskName) -> Self {
        Self {
            task,
            seed: None,
            out_dir: None,
            likelihood: None,
            noise: None,
            model: RawModel::default(),
            train: RawTrain::default(),
            data: RawData::default(),
            inference: RawInference::default(),
        }
    }

    pub fn resolve(self) -> Result<ExperimentConfig> {
        let name = self.task;
        let seed = self.seed.unwrap_or(0);
        let d = &self.data;
        let task = match name.function() {
            Some(function) => {
                let mut fit = Fit1dTask::new(function);
                if let Some(n) = d.n_points {
                    fit.n_points = n;
                }
                if let Some([lo, hi]) = d.domain {
                    fit.domain = (lo, hi);
                }
                if let Some(noise) = self.noise {
                    fit.noise = noise;
                }
                if d.train_grid.is_some() || d.noise_dependence.is_some() || d.a1.is_some() || d.a2.is_some() || d.kappa.is_some() {
                    return Err(Error::Config(format!("PDE data keys given for 1-D task {name:?}")));
                }
                if fit.n_points < 2 || fit.domain.1 <= fit.domain.0 {
                    return Err(Error::Config("1-D data needs at least 2 points on a non-empty interval".into()));
                }
                Task::Fit1d(fit)
            }
            None => {
                let mut pde = match name {
                    TaskName::Poisson => PdeTask::poisson(),
                    _ => PdeTask::helmholtz(),
                };
                if d.n_points.is_some() || d.domain.is_some() {
                    return Err(Error::Config(format!("1-D data keys given for PDE task {name:?}")));
                }
                if let Some(n) = d.train_grid {
                    pde.train_grid_n = n;
                }
                if let Some(dep) = d.noise_dependence {
                    pde.noise_dependence = dep;
                }
                match (&mut pde.kind, d.a1, d.a2, d.kappa) {
                    (PdeKind::Poisson, None, None, None) => {}
                    (PdeKind::Poisson, ..) => return Err(Error::Config("a1/a2/kappa apply only to helmholtz".into())),
                    (PdeKind::Helmholtz { a1, a2, kappa }, n1, n2, nk) => {
                        *a1 = n1.unwrap_or(*a1);
                        *a2 = n2.unwrap_or(*a2);
                        *kappa = nk.unwrap_or(*kappa);
                    }
                }
                match self.noise {
                    None => {}
                    Some(Noise::None) => pde.sigma_noise = 0.0,
                    Some(Noise::FunctionalGaussian { sigma }) => pde.sigma_noise = sigma,
                    Some(Noise::StudentT { .. }) => {
                        return Err(Error::Config("PDE tasks support only functional_gaussian or none noise".into()))
                    }
                }
                if pde.train_grid_n < 3 {
                    return Err(Error::Config("train_grid must be at least 3".into()));
                }
                Task::Pde(pde)
            }
        };
        match &task {
            Task::Fit1d(f) => match f.noise {
                Noise::StudentT { nu, scale } => {
                    check_positive("noise nu", nu)?;
                    check_positive("noise scale", scale)?;
                }
                Noise::FunctionalGaussian { sigma } => check_positive("noise sigma", sigma)?,
                Noise::None => {}
            },
            Task::Pde(p) => {
                if !(p.sigma_noise >= 0.0 && p.sigma_noise.is_finite()) {
                    return Err(Error::Config(format!("noise sigma must be non-negative, got {}", p.sigma_noise)));
                }
            }
        }

        let m = &self.model;
        let (width, grid, order, domain, likelihood) = match &task {
            Task::Fit1d(f) => (vec![1, 1], 5, 2, f.domain, LikelihoodChoice::StudentT),
            Task::Pde(p) => {
                let grid = if name == TaskName::Helmholtz { 10 } else { 5 };
                (vec![2, 2, 1], grid, 4, p.domain, LikelihoodChoice::Gaussian)
            }
        };
        let mut model = ModelConfig::new(
            m.width.clone().unwrap_or(width),
            m.grid.unwrap_or(grid),
            m.k.unwrap_or(3),
            m.order.unwrap_or(order),
            m.domain.map(|[a, b]| (a, b)).unwrap_or(domain),
        );
        model.surrogate_width = m.surrogate_width.clone();
        if let Some(s) = m.flow_steps {
            model.flow_steps = s;
        }
        model.mode = m.mode.unwrap_or(Mode::Bayesian);
        model.likelihood = self.likelihood.unwrap_or(likelihood);
        let in_dim = if name.is_pde() { 2 } else { 1 };
        if model.width.first() != Some(&in_dim) || model.width.last() != Some(&1) {
            return Err(Error::Config(format!(
                "width {:?} must start with {in_dim} inputs and end with 1 output",
                model.width
            )));
        }

        let t = &self.train;
        let mut train = if name.is_pde() {
            TrainConfig::pde_default()
        } else {
            TrainConfig::fit1d_default()
        };
        train.seed = seed;
        train.alpha = t.alpha.unwrap_or(train.alpha);
        train.beta = t.beta.unwrap_or(train.beta);
        train.lr = t.lr.unwrap_or(train.lr);
        train.iterations = t.iterations.unwrap_or(train.iterations);
        train.reset_every = t.reset_every.unwrap_or(train.reset_every);
        train.final_phase_iters = t.final_phase_iters.unwrap_or(train.final_phase_iters);
        train.final_phase_lr = t.final_phase_lr.unwrap_or(train.final_phase_lr);
        train.kl_basis = t.kl_basis.unwrap_or(train.kl_basis);
        train.log_every = t.log_every.unwrap_or(train.log_every);
        train.validate()?;

        let i = &self.inference;
        let inference = Inference {
            samples: i.samples.unwrap_or(if name.is_pde() { 5000 } else { 10000 }),
            test_grid: i.test_grid.unwrap_or(100),
            test_points: i.test_points.unwrap_or(1000),
        };
        if inference.samples < 2 || inference.test_grid < 2 || inference.test_points < 2 {
            return Err(Error::Config("inference needs at least 2 samples and 2 test points".into()));
        }

        let out_dir = self
            .out_dir
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("{name:?}").to_lowercase()));
        Ok(ExperimentConfig {
            name,
            task,
            model,
            train,
            inference,
            seed,
            out_dir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_are_the_defaults() {
        let p = ExperimentConfig::defaults(TaskName::Poisson);
        assert_eq!((p.model.width.clone(), p.model.grid, p.model.span, p.model.order), (vec![2, 2, 1], 5, 3, 4));
        assert_eq!((p.inference.samples, p.inference.test_grid), (5000, 100));
        let h = ExperimentConfig::defaults(TaskName::Helmholtz);
        assert_eq!((h.model.grid, h.model.span, h.model.order), (10, 3, 4));
        for f in [TaskName::F1, TaskName::F2, TaskName::F3] {
            let c = ExperimentConfig::defaults(f);
            assert_eq!((c.model.width.clone(), c.model.grid, c.model.span, c.model.order), (vec![1, 1], 5, 3, 2));
            assert_eq!(c.inference.samples, 10000);
            assert_eq!(c.model.likelihood, LikelihoodChoice::StudentT);
        }
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(ExperimentConfig::from_toml_str("task = \"f1\"\nsped = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("task = \"f1\"\n[model]\nwidht = [1,1]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("task = \"f4\"\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let text = r#"
            task = "poisson"
            seed = 7
            likelihood = "student_t"
            [noise]
            kind = "functional_gaussian"
            sigma = 0.2
            [model]
            mode = "deterministic"
            [train]
            iterations = 50
            reset_every = 0
            final_phase_iters = 0
            [data]
            train_grid = 16
            noise_dependence = "euclidean"
        "#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.iterations), (7, 7, 50));
        assert_eq!(c.model.mode, Mode::Deterministic);
        let Task::Pde(p) = &c.task else { panic!() };
        assert_eq!((p.train_grid_n, p.sigma_noise, p.noise_dependence), (16, 0.2, NoiseDependence::Euclidean));
    }

    #[test]
    fn inconsistent_keys_fail() {
        assert!(ExperimentConfig::from_toml_str("task = \"f1\"\n[data]\ntrain_grid = 10\n").is_err());
        assert!(ExperimentConfig::from_toml_str("task = \"poisson\"\n[model]\nwidth = [1, 1]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("task = \"poisson\"\n[noise]\nkind = \"student_t\"\nnu = 3.0\nscale = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("task = \"f1\"\n[train]\nlr = -1.0\n").is_err());
    }

    #[test]
    fn resolved_form_round_trips() {
        for name in [TaskName::F2, TaskName::Poisson, TaskName::Helmholtz] {
            let c = ExperimentConfig::defaults(name);
            let text = c.to_toml().unwrap();
            let mut back = ExperimentConfig::from_toml_str(&text).unwrap();
            if back.model.surrogate_width.as_ref() == Some(&back.model.width) {
                back.model.surrogate_width = None;
            }
            assert_eq!(back, c, "{text}");
        }
    }
}
