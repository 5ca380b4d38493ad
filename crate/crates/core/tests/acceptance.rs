//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! to stderr (visible without `--nocapture`) before asserting.
//!
//! The training-based criteria (5–9) run the shipped task defaults and take
//! about an hour on one core in total. Criterion 6 uses a scaled 20k-iteration
//! budget. Criteria 8 and 9 inspect one run of the full 60k-iteration schedule.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hrkan::autodiff::Tensor;
use hrkan::basis::{basis_derivatives, basis_eval, KanNetwork};
use hrkan::bayes::{AuxiliaryPosterior, FlowStack, WeightPosterior};
use hrkan::config::{ExperimentConfig, TaskName};
use hrkan::gradcheck;
use hrkan::likelihood::{gaussian_nll, student_t_nll};
use hrkan::model::{BhrKanModel, LikelihoodChoice, Mode};
use hrkan::oracles::{basis_order2_literal, kl_estimator_expectation, kl_toy_posterior};
use hrkan::pde::jet_forward;
use hrkan::special::softplus_inv;
use hrkan::train::{train_run, LossRecord, Task, TrainConfig, TrainOutcome};
use hrkan::uq::{build_report, pearson, test_set, UqReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Scaled PDE budget: a third of the full 60k schedule, with the reset period
/// and the low-learning-rate closing phase scaled by the same factor.
const POISSON_ITERATIONS: usize = 20_000;
const HELMHOLTZ_ITERATIONS: usize = 20_000;
const HELMHOLTZ_TRAIN_GRID: usize = 64;

fn verdict(criterion: u32, pass: bool, detail: std::fmt::Arguments) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[{status}] criterion {criterion}: {detail}"
    );
}

fn scaled_schedule(base: &TrainConfig, iterations: usize) -> TrainConfig {
    let scale = |n: usize| n * iterations / base.iterations;
    TrainConfig {
        iterations,
        reset_every: scale(base.reset_every),
        final_phase_iters: scale(base.final_phase_iters),
        ..base.clone()
    }
}

struct Run {
    outcome: TrainOutcome,
    report: UqReport,
    wall: Duration,
}

fn run_experiment(cfg: &ExperimentConfig) -> Run {
    let started = Instant::now();
    let outcome = train_run(&cfg.task, &cfg.model, &cfg.train, None).unwrap();
    let test = test_set(
        &cfg.task,
        cfg.inference.test_points,
        cfg.inference.test_grid,
        cfg.seed,
    )
    .unwrap();
    let report = build_report(&outcome.model, test, cfg.inference.samples, cfg.seed).unwrap();
    Run {
        outcome,
        report,
        wall: started.elapsed(),
    }
}

fn poisson_config(mode: Mode, iterations: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(TaskName::Poisson);
    cfg.model.mode = mode;
    cfg.train = scaled_schedule(&cfg.train, iterations);
    cfg
}

fn poisson_bayesian() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run_experiment(&poisson_config(Mode::Bayesian, POISSON_ITERATIONS)))
}

/// The shipped Poisson schedule, unscaled.
fn poisson_converged() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run_experiment(&ExperimentConfig::defaults(TaskName::Poisson)))
}

fn poisson_deterministic() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run_experiment(&poisson_config(Mode::Deterministic, POISSON_ITERATIONS)))
}

#[test]
fn criterion_01_basis_identity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = rng.random_range(-2.0..1.0);
        let e = s + rng.random_range(0.05..2.0);
        let x = rng.random_range(s - 0.2..e + 0.2);
        worst = worst.max((basis_eval(x, s, e, 2).unwrap() - basis_order2_literal(x, s, e)).abs());
    }
    let mut peak = 0.0f64;
    for _ in 0..1000 {
        let s = rng.random_range(-2.0..1.0);
        let e = s + rng.random_range(0.05..2.0);
        peak = peak.max((basis_eval(0.5 * (s + e), s, e, 2).unwrap() - 1.0).abs());
    }
    let elapsed = started.elapsed();
    let pass = worst <= 1e-12 && peak <= 1e-12 && elapsed < Duration::from_secs(1);
    verdict(1, pass, format_args!("max |basis − literal| {worst:.2e}, max |peak − 1| {peak:.2e}, {elapsed:.2?} (tol 1e-12, < 1 s)"));
    assert!(pass);
}

/// Richardson-extrapolated central differences.
fn fd_first(f: &impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn fd_second(f: &impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(1.0)
}

#[test]
fn criterion_02_derivative_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst1, mut worst2) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let order = rng.random_range(4..=6);
        let s = rng.random_range(-1.0..0.5);
        let e = s + rng.random_range(0.2..1.5);
        let x = s + rng.random_range(0.05..0.95) * (e - s);
        let (_, d1, d2) = basis_derivatives(x, s, e, order).unwrap();
        let f = |v: f64| basis_eval(v, s, e, order).unwrap();
        worst1 = worst1.max(rel(d1, fd_first(&f, x, 1e-4 * (e - s))));
        worst2 = worst2.max(rel(d2, fd_second(&f, x, 1e-3 * (e - s))));

        let grid = rng.random_range(3..=6);
        let net = KanNetwork::new(&[2, 2, 1], grid, 3, order, (-1.0, 1.0), &mut rng).unwrap();
        let p = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        for coord in 0..2 {
            let jet = jet_forward(&net, &p, coord).unwrap()[0];
            let g = |v: f64| {
                let mut q = p;
                q[coord] = v;
                net.network_forward(&q).unwrap()[0]
            };
            worst1 = worst1.max(rel(jet.d1, fd_first(&g, p[coord], 1e-4)));
            worst2 = worst2.max(rel(jet.d2, fd_second(&g, p[coord], 1e-3)));
        }
    }
    let elapsed = started.elapsed();
    let pass = worst1 < 1e-5 && worst2 < 1e-4 && elapsed < Duration::from_secs(10);
    verdict(2, pass, format_args!("first-order rel err {worst1:.2e} (< 1e-5), second-order {worst2:.2e} (< 1e-4), {elapsed:.2?} (< 10 s)"));
    assert!(pass);
}

#[test]
fn criterion_03_gradient_suite() {
    let started = Instant::now();
    let results = gradcheck::run_all(0, 1e-4).unwrap();
    let elapsed = started.elapsed();
    let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let pass = names
        == [
            "deterministic_loss",
            "gaussian_nll",
            "student_t_nll",
            "bayes_loss",
        ]
        && results.iter().all(|r| r.passed)
        && elapsed < Duration::from_secs(30);
    verdict(
        3,
        pass,
        format_args!(
            "{} suites, max error {worst:.2e} (tol 1e-4), {elapsed:.2?} (< 30 s)",
            results.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_kl_sanity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut post = WeightPosterior::new(Tensor::zeros(&[2, 3]), 2, &mut rng);
    post.w_rho = Tensor::filled(&[2, 3], softplus_inv(1.0));
    post.flow = FlowStack::zeros(2, 2);
    post.aux = AuxiliaryPosterior::matching(1.0, 0.05, FlowStack::zeros(2, 2));
    let zero_gap = (0..100)
        .map(|_| post.kl_estimate(&post.sample(&mut rng)).abs())
        .fold(0.0, f64::max);

    let toy = kl_toy_posterior(4);
    let reference = kl_estimator_expectation(&toy, 600).unwrap();
    let n = 10_000;
    let vals: Vec<f64> = (0..n)
        .map(|_| toy.kl_estimate(&toy.sample(&mut rng)))
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ((n - 1) * n) as f64).sqrt();
    let elapsed = started.elapsed();
    let pass = zero_gap < 1e-12
        && (mean - reference).abs() < 2.0 * se
        && elapsed < Duration::from_secs(30);
    verdict(
        4,
        pass,
        format_args!("q = p gives |KL| ≤ {zero_gap:.1e}; MC {mean:.5} ± {se:.5} vs quadrature {reference:.5} (within 2 SE), {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_student_t_recovery() {
    let t_cfg = ExperimentConfig::defaults(TaskName::F1);
    assert_eq!(t_cfg.model.likelihood, LikelihoodChoice::StudentT);
    let mut g_cfg = t_cfg.clone();
    g_cfg.model.likelihood = LikelihoodChoice::Gaussian;
    let t = run_experiment(&t_cfg);
    let g = run_experiment(&g_cfg);
    let sigma_t = t.report.metrics.sigma_avg.unwrap();
    let nu = t.report.metrics.nu_hat.unwrap();
    let sigma_g = g.report.metrics.sigma_avg.unwrap();
    let pass = (0.90..=1.10).contains(&sigma_t)
        && (2.5..=3.5).contains(&nu)
        && (1.45..=1.95).contains(&sigma_g);
    verdict(
        5,
        pass,
        format_args!(
            "Student-t σ_avg {sigma_t:.4} ∈ [0.90, 1.10], ν̂ {nu:.3} ∈ [2.5, 3.5]; Gaussian σ_avg {sigma_g:.4} ∈ [1.45, 1.95] ({:.0?} + {:.0?})",
            t.wall, g.wall
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_poisson_smoke() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/poisson_smoke.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.model.mode, Mode::Bayesian);
    let run = run_experiment(&cfg);
    let mse = run.report.metrics.mse;
    let pass = mse <= 0.1;
    verdict(
        6,
        pass,
        format_args!(
            "smoke tier (poisson_smoke.toml): Bayesian MSE {mse:.3e} after {} iterations (≤ 0.1), {:.0?}",
            cfg.train.iterations, run.wall
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_poisson_scaled() {
    let bayes = poisson_bayesian();
    let det = poisson_deterministic();
    let (mb, md) = (bayes.report.metrics.mse, det.report.metrics.mse);
    let ratio = mb.max(md) / mb.min(md);
    let pass = mb <= 0.01 && ratio <= 2.0;
    verdict(
        6,
        pass,
        format_args!(
            "{POISSON_ITERATIONS} iterations: Bayesian MSE {mb:.3e} (≤ 0.01), deterministic {md:.3e}, ratio {ratio:.2} (≤ 2) ({:.0?} + {:.0?})",
            bayes.wall, det.wall
        ),
    );
    assert!(pass);
}

fn helmholtz_mse(order: u32) -> f64 {
    let mut cfg = ExperimentConfig::defaults(TaskName::Helmholtz);
    cfg.model.mode = Mode::Deterministic;
    cfg.model.order = order;
    if let Task::Pde(task) = &mut cfg.task {
        task.train_grid_n = HELMHOLTZ_TRAIN_GRID;
    }
    cfg.train = scaled_schedule(&cfg.train, HELMHOLTZ_ITERATIONS);
    cfg.inference.samples = 2;
    run_experiment(&cfg).report.metrics.mse
}

#[test]
fn criterion_07_helmholtz_order() {
    let m2 = helmholtz_mse(2);
    let m4 = helmholtz_mse(4);
    let pass = m2 >= 5.0 * m4;
    verdict(
        7,
        pass,
        format_args!(
            "order 2 MSE {m2:.3e}, order 4 MSE {m4:.3e}, ratio {:.1} (≥ 5) at {HELMHOLTZ_ITERATIONS} iterations on a {HELMHOLTZ_TRAIN_GRID}² grid",
            m2 / m4
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_aleatoric_closure() {
    let run = poisson_converged();
    let report = &run.report;
    let alea = report.summary.aleatoric_std.as_ref().unwrap();
    let r = pearson(alea, &report.noise_scale);
    let epi = report.metrics.epi_avg;
    let sigma = report.metrics.sigma_avg.unwrap();
    let pass = r > 0.9 && epi < sigma;
    verdict(
        8,
        pass,
        format_args!(
            "{} iterations: Pearson(σ̂, 0.1|x|) {r:.4} (> 0.9); epi_avg {epi:.3e} < σ_avg {sigma:.3e} (MSE {:.3e}, {:.0?})",
            run.outcome.manifest.iterations, report.metrics.mse, run.wall
        ),
    );
    assert!(pass);
}

fn closing_likelihood(log: &[LossRecord], window: usize) -> f64 {
    let tail = &log[log.len().saturating_sub(window)..];
    tail.iter().map(|r| r.data).sum::<f64>() / tail.len() as f64
}

#[test]
fn criterion_09_negative_likelihood() {
    let outcome = &poisson_converged().outcome;
    let closing = closing_likelihood(&outcome.log, 10);
    let last = outcome.log.last().unwrap().data;
    let pass = closing < 0.0;
    verdict(
        9,
        pass,
        format_args!(
            "{} iterations: mean likelihood term over the last 10 logged iterations {closing:.4} (< 0), final {last:.4}",
            outcome.manifest.iterations
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_student_t_gaussian_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let u = [rng.random_range(-2.0..2.0)];
        let u_hat = [rng.random_range(-2.0..2.0)];
        let r: f64 = rng.random_range(-1.0..2.0);
        let g = gaussian_nll(&u, &u_hat, &[r]).unwrap();
        let t = student_t_nll(&u, &u_hat, &[r.exp()], 1e6).unwrap();
        worst = worst.max((t - g - HALF_LN_2PI).abs());
    }
    let pass = worst < 1e-3;
    verdict(
        10,
        pass,
        format_args!("max |NLL_t − NLL_gauss − ½ln2π| {worst:.2e} over 100 points (< 1e-3)"),
    );
    assert!(pass);
}

#[test]
fn criterion_11_determinism() {
    let mut cfg = poisson_config(Mode::Bayesian, 200);
    if let Task::Pde(task) = &mut cfg.task {
        task.train_grid_n = 16;
    }
    cfg.train.seed = 11;
    let bits = |m: &BhrKanModel| -> Vec<u64> {
        m.parameter_values()
            .iter()
            .flatten()
            .map(|v| v.to_bits())
            .collect()
    };
    let a = train_run(&cfg.task, &cfg.model, &cfg.train, None).unwrap();
    let b = train_run(&cfg.task, &cfg.model, &cfg.train, None).unwrap();
    let (ba, bb) = (bits(&a.model), bits(&b.model));
    let pass = ba == bb;
    verdict(
        11,
        pass,
        format_args!(
            "{} parameters bitwise identical across two seeded runs",
            ba.len()
        ),
    );
    assert!(pass);
}
