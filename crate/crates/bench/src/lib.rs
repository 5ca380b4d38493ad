//! Fixtures shared by the benchmarks.

use hrkan::model::{BhrKanModel, Mode, ModelConfig};
use hrkan::pde::PdeTask;
use hrkan::train::{seeded_stream, Batch, Task, TrainingData};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The Poisson model at the given mode with the standard `[2,2,1]`, `G = 5`, `k = 3`, order-4 structure.
pub fn poisson_model(mode: Mode) -> BhrKanModel {
    let mut cfg = ModelConfig::new(vec![2, 2, 1], 5, 3, 4, (-1.0, 1.0));
    cfg.mode = mode;
    BhrKanModel::build(&cfg, &mut seeded_stream(0, 0)).expect("valid model config")
}

/// One noisy Poisson training batch on an `n × n` grid.
pub fn poisson_batch(n: usize) -> Batch {
    let task = Task::Pde(PdeTask {
        train_grid_n: n,
        ..PdeTask::poisson()
    });
    TrainingData::new(&task)
        .and_then(|d| d.batch(&mut seeded_stream(0, 1)))
        .expect("valid task")
}

/// `n` points in `[-1, 1]²`, flattened.
pub fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
