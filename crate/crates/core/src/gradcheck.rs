//! Finite-difference checks of every trainable-parameter gradient on small
//! models, one suite per objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{BhrKanModel, LikelihoodChoice, Mode, ModelConfig, ModelDraw};
use crate::pde::{Function1d, PdeTask};
use crate::train::{loss_and_gradients, loss_value, Batch, Fit1dTask, Noise, Task, TrainConfig, TrainingData};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub parameters: usize,
    /// Largest `|analytic − numeric| / max(1, |numeric|)`.
    pub max_error: f64,
    pub passed: bool,
}

/// Compares tape gradients with central differences for every scalar parameter.
pub fn check_model(
    name: &str,
    model: &BhrKanModel,
    batch: &Batch,
    draw: &ModelDraw,
    cfg: &TrainConfig,
    tolerance: f64,
) -> Result<SuiteResult> {
    let (_, grads, _) = loss_and_gradients(model, batch, draw, cfg)?;
    let mut probe = model.clone();
    let mut max_error = 0.0f64;
    let mut parameters = 0;
    for (slot, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let original = probe.parameter_slices_mut()[slot][j];
            probe.parameter_slices_mut()[slot][j] = original + STEP;
            let up = loss_value(&probe, batch, draw, cfg)?.total;
            probe.parameter_slices_mut()[slot][j] = original - STEP;
            let down = loss_value(&probe, batch, draw, cfg)?.total;
            probe.parameter_slices_mut()[slot][j] = original;
            let numeric = (up - down) / (2.0 * STEP);
            max_error = max_error.max((analytic - numeric).abs() / numeric.abs().max(1.0));
            parameters += 1;
        }
    }
    Ok(SuiteResult {
        name: name.to_string(),
        parameters,
        max_error,
        passed: max_error <= tolerance,
    })
}

fn miniature(width: Vec<usize>, order: u32, domain: (f64, f64), mode: Mode, likelihood: LikelihoodChoice) -> ModelConfig {
    let mut cfg = ModelConfig::new(width, 3, 2, order, domain);
    cfg.mode = mode;
    cfg.likelihood = likelihood;
    cfg
}

fn pde_batch(rng: &mut ChaCha8Rng) -> Result<Batch> {
    let task = Task::Pde(PdeTask {
        train_grid_n: 6,
        ..PdeTask::poisson()
    });
    TrainingData::new(&task)?.batch(rng)
}

fn fit_batch(rng: &mut ChaCha8Rng) -> Result<Batch> {
    let task = Task::Fit1d(Fit1dTask {
        n_points: 24,
        noise: Noise::StudentT { nu: 3.0, scale: 0.5 },
        ..Fit1dTask::new(Function1d::F1)
    });
    TrainingData::new(&task)?.batch(rng)
}

/// Runs the deterministic PDE loss, Gaussian NLL, Student-t NLL and full
/// Bayesian PDE loss suites on `[2,2,1]`/`[1,1]` miniatures with `G = 3`, `k = 2`.
pub fn run_all(seed: u64, tolerance: f64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let cfg = TrainConfig {
        beta: 0.0,
        ..TrainConfig::pde_default()
    };
    let det = BhrKanModel::build(
        &miniature(vec![2, 2, 1], 4, (-1.0, 1.0), Mode::Deterministic, LikelihoodChoice::Gaussian),
        &mut rng,
    )?;
    let batch = pde_batch(&mut rng)?;
    out.push(check_model("deterministic_loss", &det, &batch, &det.zero_draw(), &cfg, tolerance)?);

    let fit = fit_batch(&mut rng)?;
    let fit_cfg = TrainConfig {
        beta: 0.0,
        ..TrainConfig::fit1d_default()
    };
    for (name, lik) in [("gaussian_nll", LikelihoodChoice::Gaussian), ("student_t_nll", LikelihoodChoice::StudentT)] {
        let model = BhrKanModel::build(&miniature(vec![1, 1], 2, (0.0, 1.0), Mode::Bayesian, lik), &mut rng)?;
        let draw = model.draw(&mut rng);
        out.push(check_model(name, &model, &fit, &draw, &fit_cfg, tolerance)?);
    }

    let bayes = BhrKanModel::build(
        &miniature(vec![2, 2, 1], 4, (-1.0, 1.0), Mode::Bayesian, LikelihoodChoice::Gaussian),
        &mut rng,
    )?;
    let draw = bayes.draw(&mut rng);
    let bayes_cfg = TrainConfig {
        beta: 0.1,
        ..TrainConfig::pde_default()
    };
    out.push(check_model("bayes_loss", &bayes, &batch, &draw, &bayes_cfg, tolerance)?);
    Ok(out)
}
