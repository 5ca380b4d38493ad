//! Loss assembly, Adam with periodic state resets, and the experiment loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::basis::forward_nodes;
use crate::error::{Error, Result};
use crate::likelihood::{floor_log_variance, nll_node};
use crate::model::{BhrKanModel, BoundModel, ModelConfig, ModelDraw, Mode};
use crate::pde::{
    jet_nodes, laplacian_node, make_grid, sample_functional_noise, sample_student_t, Function1d, Grid,
    NoiseDependence, PdeTask,
};

/// Seed streams so initialization, data noise and posterior draws never share
/// a generator.
const STREAM_INIT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_POSTERIOR: u64 = 2;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight on the interior PDE loss in the deterministic objective.
    pub alpha: f64,
    /// Weight on the KL regularizer.
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Optimizer reset period; 0 disables resets.
    pub reset_every: usize,
    /// Length of the closing phase run at `final_phase_lr`; 0 disables it.
    pub final_phase_iters: usize,
    pub final_phase_lr: f64,
    pub seed: u64,
    /// Include the support-posterior KL term.
    pub kl_basis: bool,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn pde_default() -> Self {
        Self {
            alpha: 5e-2,
            beta: 1e-3,
            lr: 1e-3,
            iterations: 60_000,
            reset_every: 10_000,
            final_phase_iters: 10_000,
            final_phase_lr: 1e-4,
            seed: 0,
            kl_basis: true,
            log_every: 100,
        }
    }

    pub fn fit1d_default() -> Self {
        Self {
            iterations: 20_000,
            reset_every: 0,
            final_phase_iters: 0,
            ..Self::pde_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lr", self.lr), ("final_phase_lr", self.final_phase_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.final_phase_iters > 0 && iteration + self.final_phase_iters >= self.iterations {
            self.final_phase_lr
        } else {
            self.lr
        }
    }

    /// Whether the optimizer state is cleared before `iteration`.
    pub fn resets_before(&self, iteration: usize) -> bool {
        self.reset_every > 0 && iteration > 0 && iteration % self.reset_every == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|a| a.fill(0.0));
        self.t = 0;
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Length {
                what: "optimizer parameter groups",
                left: params.len().max(grads.len()),
                right: self.m.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Length {
                    what: "optimizer parameter size",
                    left: p.len(),
                    right: m.len(),
                });
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Stochastic term added to the training targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    None,
    StudentT { nu: f64, scale: f64 },
    FunctionalGaussian { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit1dTask {
    pub function: Function1d,
    pub n_points: usize,
    pub domain: (f64, f64),
    pub noise: Noise,
}

impl Fit1dTask {
    pub fn new(function: Function1d) -> Self {
        Self {
            function,
            n_points: 1000,
            domain: (0.0, 1.0),
            noise: Noise::StudentT { nu: 3.0, scale: 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    Fit1d(Fit1dTask),
    Pde(PdeTask),
}

/// Fixed inputs plus the noise-free part of the targets.
#[derive(Clone, Debug)]
pub enum TrainingData {
    Fit1d {
        x: Tensor,
        clean: Vec<f64>,
        points: Vec<f64>,
        noise: Noise,
    },
    Pde {
        task: PdeTask,
        interior_points: Vec<[f64; 2]>,
        interior: Tensor,
        boundary: Tensor,
        /// `−driving` at interior points.
        base_target: Vec<f64>,
    },
}

/// One iteration's realized targets.
#[derive(Clone, Debug)]
pub enum Batch {
    Fit1d {
        x: Tensor,
        targets: Vec<f64>,
    },
    Pde {
        task: PdeTask,
        interior: Tensor,
        boundary: Tensor,
        /// Target for `∇²û (+ κ²û)`: `−driving − f`.
        interior_target: Vec<f64>,
    },
}

impl TrainingData {
    pub fn new(task: &Task) -> Result<Self> {
        match task {
            Task::Fit1d(t) => {
                if t.n_points < 2 {
                    return Err(Error::Config("1-D task needs at least two points".into()));
                }
                let points = crate::pde::linspace(t.domain.0, t.domain.1, t.n_points);
                Ok(Self::Fit1d {
                    x: Tensor::new(points.clone(), vec![t.n_points, 1])?,
                    clean: points.iter().map(|&p| t.function.eval(p)).collect(),
                    points,
                    noise: t.noise,
                })
            }
            Task::Pde(t) => {
                let grid: Grid = make_grid(t.train_grid_n, t.domain)?;
                let interior_points = grid.interior();
                let boundary_points = grid.boundary_points();
                Ok(Self::Pde {
                    task: *t,
                    base_target: interior_points.iter().map(|p| -t.driving(p[0], p[1])).collect(),
                    interior: Grid::tensor(&interior_points),
                    boundary: Grid::tensor(&boundary_points),
                    interior_points,
                })
            }
        }
    }

    /// Draws fresh noise for the targets.
    pub fn batch(&self, rng: &mut ChaCha8Rng) -> Result<Batch> {
        match self {
            Self::Fit1d {
                x,
                clean,
                points,
                noise,
            } => {
                let eps = match noise {
                    Noise::None => vec![0.0; clean.len()],
                    Noise::StudentT { nu, scale } => sample_student_t(clean.len(), *nu, *scale, rng)?,
                    Noise::FunctionalGaussian { sigma } => {
                        let pts: Vec<[f64; 2]> = points.iter().map(|p| [*p, 0.0]).collect();
                        sample_functional_noise(&pts, *sigma, NoiseDependence::FirstCoordinate, rng)
                    }
                };
                Ok(Batch::Fit1d {
                    x: x.clone(),
                    targets: clean.iter().zip(eps).map(|(c, e)| c + e).collect(),
                })
            }
            Self::Pde {
                task,
                interior_points,
                interior,
                boundary,
                base_target,
            } => {
                let f = sample_functional_noise(interior_points, task.sigma_noise, task.noise_dependence, rng);
                Ok(Batch::Pde {
                    task: *task,
                    interior: interior.clone(),
                    boundary: boundary.clone(),
                    interior_target: base_target.iter().zip(f).map(|(t, f)| t - f).collect(),
                })
            }
        }
    }
}

/// Loss components recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    /// Likelihood (Bayesian) or fit / weighted PDE MSE (deterministic).
    pub data: NodeId,
    pub bc: Option<NodeId>,
    /// Unweighted KL.
    pub kl: Option<NodeId>,
    pub floor_hits: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub data: f64,
    pub bc: f64,
    pub kl: f64,
}

fn mse_node(tape: &mut Tape, pred: NodeId, target: &[f64]) -> Result<NodeId> {
    let shape = tape.value(pred).shape().to_vec();
    let t = tape.leaf(Tensor::new(target.to_vec(), shape)?);
    let d = tape.sub(pred, t)?;
    let d2 = tape.square(d)?;
    tape.mean(d2)
}

/// `∇²û (+ κ²û)` and `û` at the boundary for the functional head.
fn pde_predictions(tape: &mut Tape, bound: &BoundModel, task: &PdeTask, interior: &Tensor, boundary: &Tensor) -> Result<(NodeId, NodeId)> {
    let jets = jet_nodes(tape, &bound.functional, interior)?;
    let mut op = laplacian_node(tape, &jets)?;
    let c = task.value_coefficient();
    if c != 0.0 {
        let v = tape.scale(jets.value, c)?;
        op = tape.add(op, v)?;
    }
    let b = tape.leaf(boundary.clone());
    let ub = forward_nodes(tape, &bound.functional, b)?;
    Ok((op, ub))
}

fn surrogate_log_variance(tape: &mut Tape, bound: &BoundModel, x: &Tensor) -> Result<(NodeId, usize)> {
    let layers = bound
        .surrogate
        .as_ref()
        .ok_or_else(|| Error::Config("bayesian loss needs a surrogate head".into()))?;
    let xl = tape.leaf(x.clone());
    let r = forward_nodes(tape, layers, xl)?;
    floor_log_variance(tape, r)
}

/// Builds the objective for `model`'s mode on a bound tape.
pub fn build_loss(tape: &mut Tape, model: &BhrKanModel, bound: &BoundModel, batch: &Batch, cfg: &TrainConfig) -> Result<LossNodes> {
    match model.mode() {
        Mode::Deterministic => match batch {
            Batch::Fit1d { x, targets } => {
                let xl = tape.leaf(x.clone());
                let u = forward_nodes(tape, &bound.functional, xl)?;
                let data = mse_node(tape, u, targets)?;
                Ok(LossNodes {
                    total: data,
                    data,
                    bc: None,
                    kl: None,
                    floor_hits: 0,
                })
            }
            Batch::Pde {
                task,
                interior,
                boundary,
                interior_target,
            } => {
                let (op, ub) = pde_predictions(tape, bound, task, interior, boundary)?;
                let pde = mse_node(tape, op, interior_target)?;
                let data = tape.scale(pde, cfg.alpha)?;
                let bc = mse_node(tape, ub, &vec![0.0; tape.value(ub).len()])?;
                let total = tape.add(data, bc)?;
                Ok(LossNodes {
                    total,
                    data,
                    bc: Some(bc),
                    kl: None,
                    floor_hits: 0,
                })
            }
        },
        Mode::Bayesian => {
            let (data, bc, floor_hits) = match batch {
                Batch::Fit1d { x, targets } => {
                    let xl = tape.leaf(x.clone());
                    let u = forward_nodes(tape, &bound.functional, xl)?;
                    let (r, hits) = surrogate_log_variance(tape, bound, x)?;
                    (nll_node(tape, &model.likelihood, targets, u, r, bound.nu_rho)?, None, hits)
                }
                Batch::Pde {
                    task,
                    interior,
                    boundary,
                    interior_target,
                } => {
                    let (op, ub) = pde_predictions(tape, bound, task, interior, boundary)?;
                    let (ri, hi) = surrogate_log_variance(tape, bound, interior)?;
                    let (rb, hb) = surrogate_log_variance(tape, bound, boundary)?;
                    let ni = interior_target.len() as f64;
                    let nb = tape.value(ub).len() as f64;
                    let li = nll_node(tape, &model.likelihood, interior_target, op, ri, bound.nu_rho)?;
                    let lb = nll_node(tape, &model.likelihood, &vec![0.0; nb as usize], ub, rb, bound.nu_rho)?;
                    // Mean over the concatenated interior and boundary sets.
                    let wi = tape.scale(li, ni / (ni + nb))?;
                    let wb = tape.scale(lb, nb / (ni + nb))?;
                    (tape.add(wi, wb)?, Some(lb), hi + hb)
                }
            };
            let kl = bound.kl.ok_or_else(|| Error::Config("bayesian loss needs a KL term".into()))?;
            let weighted = tape.scale(kl, cfg.beta)?;
            let total = tape.add(data, weighted)?;
            Ok(LossNodes {
                total,
                data,
                bc,
                kl: Some(kl),
                floor_hits,
            })
        }
    }
}

/// Loss values, gradients in parameter order, and the floor-hit count.
pub fn loss_and_gradients(
    model: &BhrKanModel,
    batch: &Batch,
    draw: &ModelDraw,
    cfg: &TrainConfig,
) -> Result<(LossValues, Vec<Vec<f64>>, usize)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, draw, cfg.kl_basis)?;
    let nodes = build_loss(&mut tape, model, &bound, batch, cfg)?;
    let values = loss_values(&tape, &nodes);
    let grads = tape.backward(nodes.total)?;
    let g = bound
        .leaves
        .iter()
        .map(|&id| grads.wrt_data(id, tape.value(id).len()))
        .collect();
    Ok((values, g, nodes.floor_hits))
}

fn loss_values(tape: &Tape, nodes: &LossNodes) -> LossValues {
    LossValues {
        total: tape.scalar_value(nodes.total),
        data: tape.scalar_value(nodes.data),
        bc: nodes.bc.map_or(0.0, |b| tape.scalar_value(b)),
        kl: nodes.kl.map_or(0.0, |k| tape.scalar_value(k)),
    }
}

/// Objective value only.
pub fn loss_value(model: &BhrKanModel, batch: &Batch, draw: &ModelDraw, cfg: &TrainConfig) -> Result<LossValues> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, draw, cfg.kl_basis)?;
    let nodes = build_loss(&mut tape, model, &bound, batch, cfg)?;
    Ok(loss_values(&tape, &nodes))
}

/// `α·MSE(residual) + MSE(boundary)` (plain MSE for 1-D fits).
pub fn deterministic_loss(model: &BhrKanModel, batch: &Batch, alpha: f64) -> Result<f64> {
    if model.mode() != Mode::Deterministic {
        return Err(Error::Config("deterministic loss needs a deterministic model".into()));
    }
    let cfg = TrainConfig {
        alpha,
        ..TrainConfig::pde_default()
    };
    Ok(loss_value(model, batch, &model.zero_draw(), &cfg)?.total)
}

/// Likelihood over interior and boundary plus `β·KL` for one posterior draw.
pub fn bayes_loss(model: &BhrKanModel, batch: &Batch, draw: &ModelDraw, cfg: &TrainConfig) -> Result<f64> {
    if model.mode() != Mode::Bayesian {
        return Err(Error::Config("bayes loss needs a bayesian model".into()));
    }
    Ok(loss_value(model, batch, draw, cfg)?.total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub data: f64,
    pub bc: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfigs {
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub configs: RunConfigs,
    pub seed: u64,
    pub git_describe: String,
    pub loss_log: Option<PathBuf>,
    pub wall_seconds: f64,
    pub iterations: usize,
    pub resets: usize,
    pub floor_events: usize,
    pub final_losses: LossRecord,
    pub nu_hat: Option<f64>,
    /// Fully resolved experiment configuration, when run from a config file.
    #[serde(default)]
    pub experiment: Option<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub struct TrainOutcome {
    pub model: BhrKanModel,
    pub manifest: RunManifest,
    pub log: Vec<LossRecord>,
}

struct LossLog {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            file: std::io::BufWriter::new(file),
        };
        writeln!(log.file, "iteration,total,data,bc,kl").map_err(|e| Error::io(&log.path, e))?;
        Ok(log)
    }

    fn append(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(
            self.file,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iteration, r.total, r.data, r.bc, r.kl
        )
        .map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn norms_snapshot(model: &mut BhrKanModel) -> String {
    model
        .parameter_slices_mut()
        .iter()
        .map(|p| format!("{:.3e}", p.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect::<Vec<_>>()
        .join(",")
}

/// Builds a model from `model_cfg` and trains it on `task`. When `log_path` is
/// given, the loss log is streamed there as CSV.
pub fn train_run(task: &Task, model_cfg: &ModelConfig, cfg: &TrainConfig, log_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mut init_rng = seeded_stream(cfg.seed, STREAM_INIT);
    let mut noise_rng = seeded_stream(cfg.seed, STREAM_NOISE);
    let mut post_rng = seeded_stream(cfg.seed, STREAM_POSTERIOR);
    let mut model = BhrKanModel::build(model_cfg, &mut init_rng)?;
    let data = TrainingData::new(task)?;
    let sizes: Vec<usize> = model.parameter_slices_mut().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut log_file = log_path.map(LossLog::create).transpose()?;
    let mut log = Vec::new();
    let mut resets = 0;
    let mut floor_events = 0;
    let mut last = LossRecord {
        iteration: 0,
        total: f64::NAN,
        data: f64::NAN,
        bc: f64::NAN,
        kl: f64::NAN,
    };
    for it in 0..cfg.iterations {
        if cfg.resets_before(it) {
            adam.reset();
            resets += 1;
        }
        let batch = data.batch(&mut noise_rng)?;
        let draw = match model.mode() {
            Mode::Bayesian => model.draw(&mut post_rng),
            Mode::Deterministic => model.zero_draw(),
        };
        let (values, grads, hits) = loss_and_gradients(&model, &batch, &draw, cfg)?;
        floor_events += hits;
        if !values.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                norms: norms_snapshot(&mut model),
            });
        }
        last = LossRecord {
            iteration: it,
            total: values.total,
            data: values.data,
            bc: values.bc,
            kl: values.kl,
        };
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            if let Some(f) = log_file.as_mut() {
                f.append(&last)?;
            }
            log.push(last);
        }
        let mut params = model.parameter_slices_mut();
        adam.step(&mut params, &grads, cfg.lr_at(it))?;
    }
    if let Some(f) = log_file {
        f.finish()?;
    }
    let manifest = RunManifest {
        configs: RunConfigs {
            task: task.clone(),
            model: model_cfg.clone(),
            train: cfg.clone(),
        },
        seed: cfg.seed,
        git_describe: git_describe(),
        loss_log: log_path.map(Path::to_path_buf),
        wall_seconds: started.elapsed().as_secs_f64(),
        iterations: cfg.iterations,
        resets,
        floor_events,
        final_losses: last,
        nu_hat: model.likelihood.nu(),
        experiment: None,
    };
    Ok(TrainOutcome { model, manifest, log })
}
