//! Posterior sampling over a set of points, the epistemic/aleatoric split,
//! scalar metrics, and CSV/JSON report emission.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BhrKanModel;
use crate::pde::{linspace, make_grid, noise_scale, sample_functional_noise, sample_student_t, NoiseDependence};
use crate::train::{seeded_stream, Noise, Task};

/// Samples per parallel work unit. Fixed so the merge order, and therefore
/// the floating-point result, does not depend on the thread count.
const CHUNK: usize = 32;

/// Per-sample generator: one ChaCha8 stream per posterior sample.
pub fn sample_stream(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64 + 16);
    rng
}

/// Streaming per-point mean and variance (Welford, with pairwise merging).
#[derive(Clone, Debug, PartialEq)]
pub struct Welford {
    pub count: usize,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl Welford {
    pub fn new(n: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(values) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    /// Population standard deviation.
    pub fn std(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|s| (s / n).max(0.0).sqrt()).collect()
    }
}

/// Raw posterior samples, row-major `[n_samples, n_points]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub n_samples: usize,
    pub n_points: usize,
    pub u: Vec<f64>,
    pub r: Option<Vec<f64>>,
}

fn check_inputs(model: &BhrKanModel, x: &[f64], n_samples: usize) -> Result<usize> {
    if n_samples < 2 {
        return Err(Error::domain(format!("posterior sampling needs at least 2 samples, got {n_samples}")));
    }
    let dim = model.input_dim();
    if x.is_empty() || x.len() % dim != 0 {
        return Err(Error::Length {
            what: "sample points",
            left: x.len(),
            right: dim,
        });
    }
    Ok(x.len() / dim)
}

fn one_sample(model: &BhrKanModel, x: &[f64], seed: u64, i: usize) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut rng = sample_stream(seed, i);
    let realized = model.realize(&model.draw(&mut rng))?;
    let u = realized.functional.forward_batch(x)?;
    let r = realized.surrogate.as_ref().map(|s| s.forward_batch(x)).transpose()?;
    Ok((u, r))
}

/// Draws `n_samples` posterior samples of both heads at the flattened points `x`.
pub fn posterior_sample_grid(model: &BhrKanModel, x: &[f64], n_samples: usize, seed: u64) -> Result<SampleSet> {
    let n_points = check_inputs(model, x, n_samples)?;
    let rows: Vec<(Vec<f64>, Option<Vec<f64>>)> =
        (0..n_samples).into_par_iter().map(|i| one_sample(model, x, seed, i)).collect::<Result<_>>()?;
    let mut u = Vec::with_capacity(n_samples * n_points);
    let mut r: Option<Vec<f64>> = rows[0].1.as_ref().map(|_| Vec::with_capacity(n_samples * n_points));
    for (ui, ri) in rows {
        u.extend(ui);
        if let (Some(acc), Some(ri)) = (r.as_mut(), ri) {
            acc.extend(ri);
        }
    }
    Ok(SampleSet {
        n_samples,
        n_points,
        u,
        r,
    })
}

/// Per-point posterior moments.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub n_samples: usize,
    pub mean_prediction: Vec<f64>,
    pub epistemic_std: Vec<f64>,
    /// Mean over samples of `e^{r/2}`.
    pub aleatoric_std: Option<Vec<f64>>,
    /// `e^{mean r / 2}`, the plug-in alternative.
    pub aleatoric_plugin: Option<Vec<f64>>,
}

struct Accumulators {
    u: Welford,
    sigma: Option<Welford>,
    r: Option<Welford>,
}

impl Accumulators {
    fn merge(&mut self, o: &Accumulators) {
        self.u.merge(&o.u);
        if let (Some(a), Some(b)) = (self.sigma.as_mut(), o.sigma.as_ref()) {
            a.merge(b);
        }
        if let (Some(a), Some(b)) = (self.r.as_mut(), o.r.as_ref()) {
            a.merge(b);
        }
    }
}

/// Streaming summary over `n_samples` posterior draws, in parallel.
pub fn posterior_summary(model: &BhrKanModel, x: &[f64], n_samples: usize, seed: u64) -> Result<PosteriorSummary> {
    let n_points = check_inputs(model, x, n_samples)?;
    let has_r = model.surrogate.is_some();
    let chunks: Vec<Accumulators> = (0..n_samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Accumulators {
                u: Welford::new(n_points),
                sigma: has_r.then(|| Welford::new(n_points)),
                r: has_r.then(|| Welford::new(n_points)),
            };
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let (u, r) = one_sample(model, x, seed, i)?;
                acc.u.push(&u);
                if let (Some(r), Some(sig), Some(racc)) = (r, acc.sigma.as_mut(), acc.r.as_mut()) {
                    let s: Vec<f64> = r.iter().map(|v| (0.5 * v).exp()).collect();
                    sig.push(&s);
                    racc.push(&r);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut iter = chunks.into_iter();
    let mut total = iter.next().expect("at least one chunk");
    for c in iter {
        total.merge(&c);
    }
    Ok(PosteriorSummary {
        n_samples,
        epistemic_std: total.u.std(),
        mean_prediction: total.u.mean,
        aleatoric_std: total.sigma.map(|s| s.mean),
        aleatoric_plugin: total.r.map(|r| r.mean.iter().map(|m| (0.5 * m).exp()).collect()),
    })
}

/// Linear-interpolation quantile on sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// Scalar summaries of a report. `std` is the standard deviation of the
/// per-point squared errors and is duplicated as `std_squared_error`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_points: usize,
    pub n_samples: usize,
    pub mse: f64,
    pub std: f64,
    pub std_squared_error: f64,
    pub max_abs_error: f64,
    pub sigma_avg: Option<f64>,
    pub q2_5: Option<f64>,
    pub q97_5: Option<f64>,
    pub nu_hat: Option<f64>,
    pub epi_avg: f64,
    /// Mean of `E[e^{r/2}] − e^{E[r]/2}` over points.
    pub plugin_gap: Option<f64>,
    /// How `std` is defined, kept in the JSON so readers need not guess.
    pub std_definition: String,
}

pub const STD_DEFINITION: &str = "standard deviation over test points of the squared error (u_true - mean)^2";

pub fn compute_metrics(
    u_true: &[f64],
    summary: &PosteriorSummary,
    nu_hat: Option<f64>,
) -> Result<Metrics> {
    let n = u_true.len();
    if n == 0 {
        return Err(Error::domain("metrics over an empty grid"));
    }
    if summary.mean_prediction.len() != n {
        return Err(Error::Length {
            what: "predictions",
            left: summary.mean_prediction.len(),
            right: n,
        });
    }
    let sq: Vec<f64> = u_true
        .iter()
        .zip(&summary.mean_prediction)
        .map(|(t, p)| (t - p) * (t - p))
        .collect();
    let nf = n as f64;
    let mse = sq.iter().sum::<f64>() / nf;
    let std = (sq.iter().map(|s| (s - mse) * (s - mse)).sum::<f64>() / nf).sqrt();
    let max_abs_error = sq.iter().fold(0.0f64, |m, s| m.max(s.sqrt()));
    let (sigma_avg, q2_5, q97_5) = match &summary.aleatoric_std {
        Some(a) => {
            let mut sorted = a.clone();
            sorted.sort_by(f64::total_cmp);
            (
                Some(a.iter().sum::<f64>() / nf),
                Some(quantile_sorted(&sorted, 0.025)),
                Some(quantile_sorted(&sorted, 0.975)),
            )
        }
        None => (None, None, None),
    };
    let plugin_gap = match (&summary.aleatoric_std, &summary.aleatoric_plugin) {
        (Some(a), Some(p)) => Some(a.iter().zip(p).map(|(a, p)| a - p).sum::<f64>() / nf),
        _ => None,
    };
    Ok(Metrics {
        n_points: n,
        n_samples: summary.n_samples,
        mse,
        std,
        std_squared_error: std,
        max_abs_error,
        sigma_avg,
        q2_5,
        q97_5,
        nu_hat,
        epi_avg: summary.epistemic_std.iter().sum::<f64>() / nf,
        plugin_gap,
        std_definition: STD_DEFINITION.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UqReport {
    /// Input dimension (1 or 2).
    pub dim: usize,
    /// Flattened `[n_points, dim]` coordinates.
    pub points: Vec<f64>,
    pub u_true: Vec<f64>,
    /// `u_true` plus one draw of the injected noise.
    pub u_noisy: Vec<f64>,
    /// Scale of the injected noise at each point.
    pub noise_scale: Vec<f64>,
    pub summary: PosteriorSummary,
    pub metrics: Metrics,
}

impl UqReport {
    pub fn n_points(&self) -> usize {
        self.u_true.len()
    }

    pub fn abs_error(&self) -> Vec<f64> {
        self.u_true
            .iter()
            .zip(&self.summary.mean_prediction)
            .map(|(t, p)| (t - p).abs())
            .collect()
    }
}

/// Test points, clean values, one noisy realization and the noise scale for a task.
pub struct TestSet {
    pub dim: usize,
    pub points: Vec<f64>,
    pub u_true: Vec<f64>,
    pub u_noisy: Vec<f64>,
    pub noise_scale: Vec<f64>,
}

/// `test_points` evenly spaced points for 1-D tasks, a `test_grid`² grid for PDEs.
pub fn test_set(task: &Task, test_points: usize, test_grid: usize, seed: u64) -> Result<TestSet> {
    let mut rng = seeded_stream(seed, 3);
    match task {
        Task::Fit1d(f) => {
            let xs = linspace(f.domain.0, f.domain.1, test_points);
            let u_true: Vec<f64> = xs.iter().map(|x| f.function.eval(*x)).collect();
            let (noise, scale) = match f.noise {
                Noise::None => (vec![0.0; xs.len()], vec![0.0; xs.len()]),
                Noise::StudentT { nu, scale } => (sample_student_t(xs.len(), nu, scale, &mut rng)?, vec![scale; xs.len()]),
                Noise::FunctionalGaussian { sigma } => {
                    let pts: Vec<[f64; 2]> = xs.iter().map(|x| [*x, 0.0]).collect();
                    (
                        sample_functional_noise(&pts, sigma, NoiseDependence::FirstCoordinate, &mut rng),
                        xs.iter().map(|x| x.abs() * sigma).collect(),
                    )
                }
            };
            Ok(TestSet {
                dim: 1,
                u_noisy: u_true.iter().zip(&noise).map(|(u, e)| u + e).collect(),
                points: xs,
                u_true,
                noise_scale: scale,
            })
        }
        Task::Pde(p) => {
            let grid = make_grid(test_grid, p.domain)?;
            let u_true: Vec<f64> = grid.points.iter().map(|q| p.exact(q[0], q[1])).collect();
            let noise = sample_functional_noise(&grid.points, p.sigma_noise, p.noise_dependence, &mut rng);
            Ok(TestSet {
                dim: 2,
                points: grid.points.iter().flatten().copied().collect(),
                u_noisy: u_true.iter().zip(&noise).map(|(u, e)| u + e).collect(),
                noise_scale: grid.points.iter().map(|q| noise_scale(q, p.noise_dependence) * p.sigma_noise).collect(),
                u_true,
            })
        }
    }
}

/// Posterior summary and metrics of `model` on the task's test set.
pub fn build_report(model: &BhrKanModel, test: TestSet, n_samples: usize, seed: u64) -> Result<UqReport> {
    let summary = posterior_summary(model, &test.points, n_samples, seed)?;
    let metrics = compute_metrics(&test.u_true, &summary, model.likelihood.nu())?;
    Ok(UqReport {
        dim: test.dim,
        points: test.points,
        u_true: test.u_true,
        u_noisy: test.u_noisy,
        noise_scale: test.noise_scale,
        summary,
        metrics,
    })
}

pub const PANEL_FILES: [&str; 6] = [
    "surface.csv",
    "residual.csv",
    "epistemic.csv",
    "aleatoric.csv",
    "abs_error.csv",
    "true_noise.csv",
];

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn coord_headers(dim: usize) -> Vec<&'static str> {
    ["x", "y", "z"][..dim.min(3)].to_vec()
}

fn write_columns(path: &Path, dim: usize, points: &[f64], columns: &[(&str, &[f64])]) -> Result<()> {
    let fail = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    let mut header: Vec<&str> = coord_headers(dim);
    header.extend(columns.iter().map(|(n, _)| *n));
    w.write_record(&header).map_err(fail)?;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let row: Vec<String> = p.iter().copied().chain(columns.iter().map(|(_, c)| c[i])).map(fmt).collect();
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `grid.csv`, the six panel CSVs, `epistemic_unnormalized.csv` and
/// `metrics.json` into `dir`.
pub fn emit_report(report: &UqReport, dir: &Path) -> Result<()> {
    let n = report.n_points();
    if n == 0 {
        return Err(Error::domain("cannot emit a report for an empty grid"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &report.summary;
    let abs_err = report.abs_error();
    let max_err = abs_err.iter().fold(0.0f64, |m, v| m.max(*v));
    let norm = if max_err > 0.0 { max_err } else { 1.0 };
    let epi_norm: Vec<f64> = s.epistemic_std.iter().map(|e| e / norm).collect();
    let alea = s.aleatoric_std.clone().unwrap_or_else(|| vec![0.0; n]);
    let residual: Vec<f64> = report.u_noisy.iter().zip(&s.mean_prediction).map(|(u, p)| u - p).collect();
    let noise_abs: Vec<f64> = report.u_noisy.iter().zip(&report.u_true).map(|(a, b)| (a - b).abs()).collect();
    let (dim, pts) = (report.dim, &report.points);
    write_columns(
        &dir.join("grid.csv"),
        dim,
        pts,
        &[
            ("u_true", &report.u_true),
            ("u_noisy", &report.u_noisy),
            ("mean", &s.mean_prediction),
            ("epi", &s.epistemic_std),
            ("alea", &alea),
            ("abs_err", &abs_err),
            ("true_noise_abs", &noise_abs),
            ("noise_scale", &report.noise_scale),
        ],
    )?;
    let panels: [(&str, &[f64]); 6] = [
        ("mean", &s.mean_prediction),
        ("residual", &residual),
        ("epistemic_normalized", &epi_norm),
        ("aleatoric", &alea),
        ("abs_error", &abs_err),
        ("noise_scale", &report.noise_scale),
    ];
    for (file, (name, col)) in PANEL_FILES.iter().zip(panels) {
        write_columns(&dir.join(file), dim, pts, &[(name, col)])?;
    }
    write_columns(&dir.join("epistemic_unnormalized.csv"), dim, pts, &[("epistemic", &s.epistemic_std)])?;
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report.metrics)?).map_err(|e| Error::io(&path, e))
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
