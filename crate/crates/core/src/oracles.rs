//! Independent reference computations.
//!
//! Everything here is written directly from the defining formulas and shares
//! no code with the production paths it checks: literal basis products,
//! finite differences, a double-loop layer, quadrature KL values and a
//! Stirling-series log-gamma.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::basis::{BasisSpec, KanNetwork, LayerParams};
use crate::bayes::WeightPosterior;
use crate::error::{Error, Result};

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn log_normal(x: f64, mean: f64, std: f64) -> f64 {
    let d = (x - mean) / std;
    -0.5 * d * d - std.ln() - 0.5 * (2.0 * PI).ln()
}

/// `ReLU(x − s)² · ReLU(e − x)² · 16 / (e − s)⁴`, written out term by term.
pub fn basis_order2_literal(x: f64, s: f64, e: f64) -> f64 {
    let a = relu(x - s);
    let b = relu(e - x);
    let len = e - s;
    a * a * b * b * 16.0 / (len * len * len * len)
}

/// `[ReLU(x − s) · ReLU(e − x)]^m · (2 / (e − s))^{2m}` by repeated multiplication.
pub fn basis_literal(x: f64, s: f64, e: f64, order: u32) -> f64 {
    let q = relu(x - s) * relu(e - x) * 4.0 / ((e - s) * (e - s));
    (0..order).fold(1.0, |acc, _| acc * q)
}

/// `ln Γ(x)` for `x > 0`: upward recurrence to `x ≥ 20`, then the Stirling series.
pub fn lgamma_stirling(x: f64) -> f64 {
    let mut x = x;
    let mut shift = 0.0;
    while x < 20.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0))));
    shift + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + series
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn second_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Five-point Laplacian of a scalar network output at `x = (x₁, x₂)`.
pub fn laplacian_fd(net: &KanNetwork, x: [f64; 2], h: f64) -> Result<f64> {
    let f = |a: f64, b: f64| net.network_forward(&[a, b]).map(|v| v[0]);
    let c = f(x[0], x[1])?;
    Ok((f(x[0] + h, x[1])? + f(x[0] - h, x[1])? + f(x[0], x[1] + h)? + f(x[0], x[1] - h)? - 4.0 * c) / (h * h))
}

/// A layer as a matrix of one-dimensional functions: `out_o = Σ_i φ_{o,i}(x_i)`
/// with each `φ` summed basis by basis.
pub fn layer_double_loop(x: &[f64], params: &LayerParams, spec: &BasisSpec) -> Vec<f64> {
    let k = spec.num_basis();
    let n_in = x.len();
    let (s, e, w) = (params.starts.data(), params.ends.data(), params.weights.data());
    (0..params.n_out())
        .map(|o| {
            let mut total = 0.0;
            for (i, &xi) in x.iter().enumerate() {
                let xn = (xi - spec.domain_low) / (spec.domain_high - spec.domain_low);
                let mut phi = 0.0;
                for j in 0..k {
                    phi += w[o * n_in * k + i * k + j] * basis_literal(xn, s[i * k + j], e[i * k + j], spec.order);
                }
                total += phi;
            }
            total
        })
        .collect()
}

/// Composite trapezoid rule on `[lo, hi]` with `n` intervals.
pub fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

/// `KL(N(mu, std²) ‖ N(prior_mu, prior_std²))` by quadrature over ±14 std.
pub fn gaussian_kl_quadrature(mu: f64, std: f64, prior_mu: f64, prior_std: f64) -> f64 {
    trapezoid(
        |x| {
            let lq = log_normal(x, mu, std);
            lq.exp() * (lq - log_normal(x, prior_mu, prior_std))
        },
        mu - 14.0 * std,
        mu + 14.0 * std,
        4000,
    )
}

/// One-dimensional planar step `z + û tanh(wz + b)` and its derivative.
fn planar_1d(u: f64, w: f64, b: f64, z: f64) -> (f64, f64) {
    let wu = w * u;
    let u_hat = u + (softplus(wu) - 1.0 - wu) / w;
    let t = (w * z + b).tanh();
    (z + u_hat * t, 1.0 + u_hat * w * (1.0 - t * t))
}

fn flow_1d(steps: &[(f64, f64, f64)], z: f64) -> (f64, f64) {
    steps.iter().fold((z, 0.0), |(z, ld), &(u, w, b)| {
        let (next, d) = planar_1d(u, w, b, z);
        (next, ld + d.abs().ln())
    })
}

/// Expected value of the single-sample KL estimator for a one-output
/// weight posterior, integrated over the base noise of `z` and the row mean of `W`.
///
/// The auxiliary density sees `W` only through its row mean, which given
/// `z_T` is Gaussian with mean `z_T · mean(w_mean)` and variance
/// `Σ std_i² / F²`, so a two-dimensional quadrature is exact up to the rule.
pub fn kl_estimator_expectation(post: &WeightPosterior, n: usize) -> Result<f64> {
    if post.n_out() != 1 {
        return Err(Error::domain("the quadrature oracle handles one output unit"));
    }
    let steps = |flow: &crate::bayes::FlowStack| -> Vec<(f64, f64, f64)> {
        flow.steps.iter().map(|s| (s.u.item(), s.w.item(), s.b.item())).collect()
    };
    let q_flow = steps(&post.flow);
    let r_flow = steps(&post.aux.flow);
    let w_mean = post.w_mean.data();
    let w_std: Vec<f64> = post.w_rho.data().iter().map(|r| softplus(*r)).collect();
    let fan_in = w_mean.len() as f64;
    let mean_coef = w_mean.iter().sum::<f64>() / fan_in;
    let stat_std = w_std.iter().map(|s| s * s).sum::<f64>().sqrt() / fan_in;
    let z_mu = post.z_base.mu.item();
    let z_std = softplus(post.z_base.rho.item());
    let (ms, mb) = (post.aux.mean_slope.item(), post.aux.mean_bias.item());
    let (ss, sb) = (post.aux.std_slope.item(), post.aux.std_bias.item());

    let outer = |eps: f64| {
        let z0 = z_mu + z_std * eps;
        let (z_t, ld) = flow_1d(&q_flow, z0);
        let log_q = log_normal(z0, z_mu, z_std) - ld;
        let kl_w: f64 = w_mean
            .iter()
            .zip(&w_std)
            .map(|(m, s)| {
                let mu = z_t * m;
                -s.ln() + 0.5 * (s * s + mu * mu) - 0.5
            })
            .sum();
        let (z_b, ld_r) = flow_1d(&r_flow, z_t);
        let stat_mean = z_t * mean_coef;
        let log_r = trapezoid(
            |stat| {
                let density = log_normal(stat, stat_mean, stat_std).exp();
                density * (log_normal(z_b, ms * stat + mb, softplus(ss * stat + sb)) + ld_r)
            },
            stat_mean - 10.0 * stat_std,
            stat_mean + 10.0 * stat_std,
            n,
        );
        log_normal(eps, 0.0, 1.0).exp() * (kl_w + log_q - log_r)
    };
    Ok(trapezoid(outer, -10.0, 10.0, n))
}

/// The non-trivial one-output, two-weight posterior used by the KL checks.
pub fn kl_toy_posterior(seed: u64) -> WeightPosterior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_mean = Tensor::new(vec![0.7, -0.4], vec![1, 2]).expect("toy shape");
    let mut post = WeightPosterior::new(w_mean, 2, &mut rng);
    post.w_rho = Tensor::new(vec![-0.3, 0.2], vec![1, 2]).expect("toy shape");
    post.z_base.mu = Tensor::new(vec![0.8], vec![1]).expect("toy shape");
    post.z_base.rho = Tensor::new(vec![-1.0], vec![1]).expect("toy shape");
    for step in post.flow.steps.iter_mut().chain(post.aux.flow.steps.iter_mut()) {
        step.u = Tensor::new(vec![rng.random_range(-1.0..1.0)], vec![1]).expect("toy shape");
        step.w = Tensor::new(vec![rng.random_range(0.5..1.5)], vec![1]).expect("toy shape");
        step.b = Tensor::new(vec![rng.random_range(-0.5..0.5)], vec![1]).expect("toy shape");
    }
    post.aux.mean_slope = Tensor::scalar(0.3);
    post.aux.mean_bias = Tensor::scalar(0.6);
    post.aux.std_slope = Tensor::scalar(0.2);
    post.aux.std_bias = Tensor::scalar(-0.5);
    post
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisFixture {
    pub x: f64,
    pub s: f64,
    pub e: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKlFixture {
    pub mu: f64,
    pub std: f64,
    pub prior_mu: f64,
    pub prior_std: f64,
    pub kl: f64,
}

/// Reference values regenerated by the `oracle` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFixtures {
    pub seed: u64,
    pub basis_order2: Vec<BasisFixture>,
    pub lgamma: Vec<(f64, f64)>,
    pub gaussian_kl: Vec<GaussianKlFixture>,
    pub kl_toy_expectation: f64,
}

pub fn fixtures(seed: u64) -> Result<OracleFixtures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis_order2 = (0..32)
        .map(|_| {
            let s = rng.random_range(-1.0..0.5);
            let e = s + rng.random_range(0.1..1.5);
            let x = rng.random_range(s - 0.2..e + 0.2);
            BasisFixture {
                x,
                s,
                e,
                value: basis_order2_literal(x, s, e),
            }
        })
        .collect();
    let lgamma = [0.5, 1.0, 1.5, 2.5, 3.0, 7.25, 30.0].iter().map(|&x| (x, lgamma_stirling(x))).collect();
    let gaussian_kl = (0..8)
        .map(|_| {
            let (mu, std) = (rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0));
            let (prior_mu, prior_std) = (rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0));
            GaussianKlFixture {
                mu,
                std,
                prior_mu,
                prior_std,
                kl: gaussian_kl_quadrature(mu, std, prior_mu, prior_std),
            }
        })
        .collect();
    Ok(OracleFixtures {
        seed,
        basis_order2,
        lgamma,
        gaussian_kl,
        kl_toy_expectation: kl_estimator_expectation(&kl_toy_posterior(seed), 600)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stirling_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((lgamma_stirling(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
            fact *= n as f64;
        }
        assert!((lgamma_stirling(0.5) - PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn quadrature_kl_closed_form() {
        let (m, s, pm, ps) = (0.3f64, 0.4f64, -0.2f64, 0.9f64);
        let exact = (ps / s).ln() + (s * s + (m - pm).powi(2)) / (2.0 * ps * ps) - 0.5;
        assert!((gaussian_kl_quadrature(m, s, pm, ps) - exact).abs() < 1e-10);
    }

    #[test]
    fn planar_derivative_matches_difference() {
        let (u, w, b) = (0.4, 1.3, -0.2);
        let d = central_difference(|z| planar_1d(u, w, b, z).0, 0.37, 1e-5);
        assert!((d - planar_1d(u, w, b, 0.37).1).abs() < 1e-8);
    }

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(fixtures(3).unwrap(), fixtures(3).unwrap());
    }
}
