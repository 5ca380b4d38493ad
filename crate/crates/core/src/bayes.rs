//! Variational posteriors over basis supports and convolution weights.
//!
//! Starts and ends carry fully factorized Gaussians sampled with the
//! reparameterization `mu + softplus(rho) ⊙ ε`. Weights follow a
//! multiplicative-flow posterior: a factorized Gaussian whose means are
//! scaled per output unit by `z_T`, where `z_T` is a planar-flow transform of
//! a Gaussian `z_0`. The KL term is the single-sample bound
//! `KL(q(W|z_T) ‖ p(W)) − log r(z_T|W) + log q(z_T)` with an auxiliary
//! posterior `r` built from a Gaussian base and its own planar steps.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::basis::{layer_domains, validate_width, BasisSpec, KanLayer, KanNetwork, LayerNodes, LayerParams};
use crate::error::{Error, Result};
use crate::special::{softplus, softplus_inv};

/// Prior std on starts and ends, centered at their initial tiling.
pub const BASIS_PRIOR_STD: f64 = 0.1;
pub const INIT_BASIS_STD: f64 = 0.01;
pub const INIT_WEIGHT_STD: f64 = 0.05;
pub const INIT_Z_STD: f64 = 0.05;
pub const DEFAULT_FLOW_STEPS: usize = 2;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const NORM_EPS: f64 = 1e-12;

fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Factorized Gaussian with `std = softplus(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGaussian {
    pub mu: Tensor,
    pub rho: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub rho: NodeId,
}

impl VariationalGaussian {
    pub fn new(mu: Tensor, std: f64) -> Self {
        let rho = Tensor::filled(mu.shape(), softplus_inv(std));
        Self { mu, rho }
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| softplus(r)).collect()
    }

    /// `mu + std ⊙ eps`.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .data()
            .iter()
            .zip(self.rho.data())
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect()
    }

    fn bind(&self, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> GaussianNodes {
        let mu = tape.leaf(self.mu.clone());
        let rho = tape.leaf(self.rho.clone());
        leaves.extend([mu, rho]);
        GaussianNodes { mu, rho }
    }
}

/// Draws a reparameterized sample; returns `(values, eps)`.
pub fn sample_basis_params<R: Rng + ?Sized>(post: &VariationalGaussian, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let eps = standard_normals(post.mu.len(), rng);
    (post.sample_with(&eps), eps)
}

/// Reparameterized sample recorded on the tape so gradients reach `mu` and `rho`.
pub fn sample_node(tape: &mut Tape, post: GaussianNodes, eps: &[f64]) -> Result<NodeId> {
    let shape = tape.value(post.mu).shape().to_vec();
    let eps = tape.leaf(Tensor::new(eps.to_vec(), shape)?);
    let std = tape.softplus(post.rho)?;
    let noise = tape.mul(std, eps)?;
    tape.add(post.mu, noise)
}

/// Closed-form `KL(N(mu, std²) ‖ N(prior_mean, prior_std²))`, summed.
pub fn kl_basis_params(post: &VariationalGaussian, prior_mean: &[f64], prior_std: f64) -> Result<f64> {
    if prior_mean.len() != post.mu.len() {
        return Err(Error::Length {
            what: "prior mean",
            left: prior_mean.len(),
            right: post.mu.len(),
        });
    }
    Ok(post
        .mu
        .data()
        .iter()
        .zip(post.std())
        .zip(prior_mean)
        .map(|((m, s), p)| (prior_std / s).ln() + (s * s + (m - p) * (m - p)) / (2.0 * prior_std * prior_std) - 0.5)
        .sum())
}

fn kl_basis_node(tape: &mut Tape, post: GaussianNodes, prior_mean: &[f64], prior_std: f64) -> Result<NodeId> {
    let shape = tape.value(post.mu).shape().to_vec();
    let n = prior_mean.len() as f64;
    let pm = tape.leaf(Tensor::new(prior_mean.to_vec(), shape)?);
    let std = tape.softplus(post.rho)?;
    let log_std = tape.log(std)?;
    let sum_log_std = tape.sum(log_std)?;
    let diff = tape.sub(post.mu, pm)?;
    let diff_sq = tape.square_norm(diff)?;
    let var_sum = tape.square_norm(std)?;
    let quad = tape.add(diff_sq, var_sum)?;
    let quad = tape.scale(quad, 0.5 / (prior_std * prior_std))?;
    let kl = tape.sub(quad, sum_log_std)?;
    tape.offset(kl, n * (prior_std.ln() - 0.5))
}

/// One planar step `f(z) = z + û · tanh(wᵀz + b)` with `û` constrained so that
/// `wᵀû > −1`, which keeps the step invertible.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarStep {
    pub u: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct PlanarNodes {
    pub u: NodeId,
    pub w: NodeId,
    pub b: NodeId,
}

impl PlanarStep {
    /// All-zero parameters: the identity map with zero log-determinant.
    pub fn zeros(dim: usize) -> Self {
        Self {
            u: Tensor::zeros(&[dim]),
            w: Tensor::zeros(&[dim]),
            b: Tensor::zeros(&[1]),
        }
    }

    /// Random direction `w` with `u` chosen so that `û = 0`, i.e. an identity
    /// map whose parameters still receive useful gradients.
    pub fn near_identity<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let w = standard_normals(dim, rng)
            .into_iter()
            .map(|v| v / (dim as f64).sqrt())
            .collect::<Vec<_>>();
        let ww: f64 = w.iter().map(|v| v * v).sum();
        // u = λw with λ the fixed point of the constraint, so that û vanishes.
        let mut lambda = softplus_inv(1.0) / ww;
        for _ in 0..100 {
            let wu = lambda * ww;
            lambda = (wu - (softplus(wu) - 1.0)) / (ww + NORM_EPS);
        }
        let u = w.iter().map(|v| lambda * v).collect();
        Self {
            u: Tensor::vector(u),
            w: Tensor::vector(w),
            b: Tensor::zeros(&[1]),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// `(û, wᵀû)`.
    fn constrained_u(&self) -> (Vec<f64>, f64) {
        let (u, w) = (self.u.data(), self.w.data());
        let wu: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
        let ww: f64 = w.iter().map(|v| v * v).sum();
        let m = softplus(wu) - 1.0;
        let coef = (m - wu) / (ww + NORM_EPS);
        let u_hat: Vec<f64> = u.iter().zip(w).map(|(a, b)| a + coef * b).collect();
        let w_uhat = u_hat.iter().zip(w).map(|(a, b)| a * b).sum();
        (u_hat, w_uhat)
    }

    /// Forward map and `log |det ∂f/∂z|`.
    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let (u_hat, w_uhat) = self.constrained_u();
        let a: f64 = self.w.data().iter().zip(z).map(|(w, z)| w * z).sum::<f64>() + self.b.item();
        let t = a.tanh();
        let out = z.iter().zip(&u_hat).map(|(z, u)| z + u * t).collect();
        (out, (1.0 + w_uhat * (1.0 - t * t)).ln())
    }

    /// Inverse map, solving the scalar equation along `w` by safeguarded Newton.
    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let (u_hat, c) = self.constrained_u();
        let b = self.b.item();
        let wy: f64 = self.w.data().iter().zip(y).map(|(w, y)| w * y).sum();
        // α = wᵀz solves α + c·tanh(α + b) = wᵀy; the root lies within |c| of wᵀy.
        let (mut lo, mut hi) = (wy - c.abs() - 1e-12, wy + c.abs() + 1e-12);
        let mut alpha = wy;
        for _ in 0..200 {
            let t = (alpha + b).tanh();
            let f = alpha + c * t - wy;
            if f.abs() < 1e-15 {
                break;
            }
            if f > 0.0 {
                hi = alpha;
            } else {
                lo = alpha;
            }
            let next = alpha - f / (1.0 + c * (1.0 - t * t));
            alpha = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        }
        let t = (alpha + b).tanh();
        y.iter().zip(&u_hat).map(|(y, u)| y - u * t).collect()
    }

    fn bind(&self, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> PlanarNodes {
        let u = tape.leaf(self.u.clone());
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        leaves.extend([u, w, b]);
        PlanarNodes { u, w, b }
    }
}

/// Planar step on the tape; returns `(f(z), log-det)`.
pub fn planar_node(tape: &mut Tape, step: PlanarNodes, z: NodeId) -> Result<(NodeId, NodeId)> {
    let uw = tape.mul(step.u, step.w)?;
    let wu = tape.sum(uw)?;
    let sp = tape.softplus(wu)?;
    let m = tape.offset(sp, -1.0)?;
    let ww = tape.square_norm(step.w)?;
    let ww = tape.offset(ww, NORM_EPS)?;
    let gap = tape.sub(m, wu)?;
    let coef = tape.div(gap, ww)?;
    let shift = tape.mul(step.w, coef)?;
    let u_hat = tape.add(step.u, shift)?;
    let w_uhat = tape.mul(step.w, u_hat)?;
    let w_uhat = tape.sum(w_uhat)?;
    let wz = tape.mul(step.w, z)?;
    let wz = tape.sum(wz)?;
    let a = tape.add(wz, step.b)?;
    let t = tape.tanh(a)?;
    let move_ = tape.mul(u_hat, t)?;
    let out = tape.add(z, move_)?;
    let t2 = tape.square(t)?;
    let slope = tape.scale(t2, -1.0)?;
    let slope = tape.offset(slope, 1.0)?;
    let det = tape.mul(w_uhat, slope)?;
    let det = tape.offset(det, 1.0)?;
    let logdet = tape.log(det)?;
    Ok((out, logdet))
}

/// Ordered planar steps acting on a `z_dim`-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    pub steps: Vec<PlanarStep>,
    pub z_dim: usize,
}

impl FlowStack {
    pub fn near_identity<R: Rng + ?Sized>(z_dim: usize, depth: usize, rng: &mut R) -> Self {
        Self {
            steps: (0..depth).map(|_| PlanarStep::near_identity(z_dim, rng)).collect(),
            z_dim,
        }
    }

    pub fn zeros(z_dim: usize, depth: usize) -> Self {
        Self {
            steps: (0..depth).map(|_| PlanarStep::zeros(z_dim)).collect(),
            z_dim,
        }
    }

    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        self.steps.iter().fold((z.to_vec(), 0.0), |(z, ld), step| {
            let (next, l) = step.forward(&z);
            (next, ld + l)
        })
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        self.steps.iter().rev().fold(y.to_vec(), |y, step| step.inverse(&y))
    }

    fn bind(&self, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> Vec<PlanarNodes> {
        self.steps.iter().map(|s| s.bind(tape, leaves)).collect()
    }

    fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.steps.iter().flat_map(|s| [&s.u, &s.w, &s.b])
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.steps.iter_mut().flat_map(|s| [&mut s.u, &mut s.w, &mut s.b])
    }
}

fn flow_node(tape: &mut Tape, steps: &[PlanarNodes], z: NodeId) -> Result<(NodeId, Option<NodeId>)> {
    let mut z = z;
    let mut total: Option<NodeId> = None;
    for step in steps {
        let (next, ld) = planar_node(tape, *step, z)?;
        z = next;
        total = Some(match total {
            Some(t) => tape.add(t, ld)?,
            None => ld,
        });
    }
    Ok((z, total))
}

/// Auxiliary posterior `r(z_T | W)`: `z_T` passes through its own planar
/// steps to `z_b`, which is scored under a Gaussian whose mean and std are
/// affine (std through softplus) in the per-output-unit mean of `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryPosterior {
    pub mean_slope: Tensor,
    pub mean_bias: Tensor,
    pub std_slope: Tensor,
    pub std_bias: Tensor,
    pub flow: FlowStack,
}

#[derive(Clone, Debug)]
pub struct AuxiliaryNodes {
    pub mean_slope: NodeId,
    pub mean_bias: NodeId,
    pub std_slope: NodeId,
    pub std_bias: NodeId,
    pub flow: Vec<PlanarNodes>,
}

impl AuxiliaryPosterior {
    /// Base `N(z_mean, z_std²)` independent of `W`, with the given flow.
    pub fn matching(z_mean: f64, z_std: f64, flow: FlowStack) -> Self {
        Self {
            mean_slope: Tensor::scalar(0.0),
            mean_bias: Tensor::scalar(z_mean),
            std_slope: Tensor::scalar(0.0),
            std_bias: Tensor::scalar(softplus_inv(z_std)),
            flow,
        }
    }

    /// `log r(z_T | W)` for a weight matrix `W [n_out, F]`.
    pub fn log_density(&self, z_t: &[f64], weights: &[f64]) -> f64 {
        let fan_in = weights.len() / z_t.len();
        let (z_b, logdet) = self.flow.forward(z_t);
        let mut acc = logdet;
        for (j, zb) in z_b.iter().enumerate() {
            let stat = weights[j * fan_in..(j + 1) * fan_in].iter().sum::<f64>() / fan_in as f64;
            let mean = self.mean_slope.item() * stat + self.mean_bias.item();
            let std = softplus(self.std_slope.item() * stat + self.std_bias.item());
            let d = (zb - mean) / std;
            acc += -0.5 * d * d - std.ln() - HALF_LN_2PI;
        }
        acc
    }

    fn bind(&self, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> AuxiliaryNodes {
        let mean_slope = tape.leaf(self.mean_slope.clone());
        let mean_bias = tape.leaf(self.mean_bias.clone());
        let std_slope = tape.leaf(self.std_slope.clone());
        let std_bias = tape.leaf(self.std_bias.clone());
        leaves.extend([mean_slope, mean_bias, std_slope, std_bias]);
        let flow = self.flow.bind(tape, leaves);
        AuxiliaryNodes {
            mean_slope,
            mean_bias,
            std_slope,
            std_bias,
            flow,
        }
    }
}

fn aux_log_density_node(tape: &mut Tape, aux: &AuxiliaryNodes, z_t: NodeId, weights: NodeId) -> Result<NodeId> {
    let (z_b, logdet) = flow_node(tape, &aux.flow, z_t)?;
    let stat = tape.row_mean(weights)?;
    let mean = tape.mul(stat, aux.mean_slope)?;
    let mean = tape.add(mean, aux.mean_bias)?;
    let pre = tape.mul(stat, aux.std_slope)?;
    let pre = tape.add(pre, aux.std_bias)?;
    let std = tape.softplus(pre)?;
    let diff = tape.sub(z_b, mean)?;
    let scaled = tape.div(diff, std)?;
    let quad = tape.square_norm(scaled)?;
    let quad = tape.scale(quad, -0.5)?;
    let log_std = tape.log(std)?;
    let log_std = tape.sum(log_std)?;
    let ll = tape.sub(quad, log_std)?;
    let n = tape.value(z_t).len() as f64;
    let ll = tape.offset(ll, -n * HALF_LN_2PI)?;
    match logdet {
        Some(ld) => tape.add(ll, ld),
        None => Ok(ll),
    }
}

/// Multiplicative-flow posterior over a weight matrix `[n_out, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPosterior {
    pub w_mean: Tensor,
    pub w_rho: Tensor,
    pub z_base: VariationalGaussian,
    pub flow: FlowStack,
    pub aux: AuxiliaryPosterior,
}

#[derive(Clone, Debug)]
pub struct WeightPosteriorNodes {
    pub w_mean: NodeId,
    pub w_rho: NodeId,
    pub z_base: GaussianNodes,
    pub flow: Vec<PlanarNodes>,
    pub aux: AuxiliaryNodes,
}

/// Concrete draw of weights together with the flow quantities used by the KL.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDraw {
    pub weights: Vec<f64>,
    pub z_t: Vec<f64>,
    pub logdet: f64,
    pub log_q_z: f64,
}

/// Tape handles for a weight sample.
#[derive(Clone, Copy, Debug)]
pub struct WeightSampleNodes {
    pub weights: NodeId,
    pub z_t: NodeId,
    pub log_q_z: NodeId,
}

impl WeightPosterior {
    pub fn new<R: Rng + ?Sized>(w_mean: Tensor, flow_steps: usize, rng: &mut R) -> Self {
        let n_out = w_mean.shape()[0];
        let w_rho = Tensor::filled(w_mean.shape(), softplus_inv(INIT_WEIGHT_STD));
        let flow = FlowStack::near_identity(n_out, flow_steps, rng);
        let aux_flow = FlowStack::near_identity(n_out, flow_steps, rng);
        Self {
            w_mean,
            w_rho,
            z_base: VariationalGaussian::new(Tensor::filled(&[n_out], 1.0), INIT_Z_STD),
            flow,
            aux: AuxiliaryPosterior::matching(1.0, INIT_Z_STD, aux_flow),
        }
    }

    pub fn n_out(&self) -> usize {
        self.w_mean.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.w_mean.shape()[1]
    }

    /// `W = (z_T ⊙ w_mean) + softplus(w_rho) ⊙ eps_w` with
    /// `z_T = flow(mu_z + std_z ⊙ eps_z)`.
    pub fn sample_with(&self, eps_z: &[f64], eps_w: &[f64]) -> WeightDraw {
        let z0 = self.z_base.sample_with(eps_z);
        let (z_t, logdet) = self.flow.forward(&z0);
        let fan_in = self.fan_in();
        let weights = self
            .w_mean
            .data()
            .iter()
            .zip(self.w_rho.data())
            .zip(eps_w)
            .enumerate()
            .map(|(i, ((m, r), e))| z_t[i / fan_in] * m + softplus(*r) * e)
            .collect();
        let log_n: f64 = eps_z
            .iter()
            .zip(self.z_base.std())
            .map(|(e, s)| -0.5 * e * e - s.ln() - HALF_LN_2PI)
            .sum();
        WeightDraw {
            weights,
            z_t,
            logdet,
            log_q_z: log_n - logdet,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightDraw {
        let eps_z = standard_normals(self.n_out(), rng);
        let eps_w = standard_normals(self.w_mean.len(), rng);
        self.sample_with(&eps_z, &eps_w)
    }

    /// Single-sample KL bound evaluated without a tape.
    pub fn kl_estimate(&self, draw: &WeightDraw) -> f64 {
        let fan_in = self.fan_in();
        let kl_w: f64 = self
            .w_mean
            .data()
            .iter()
            .zip(self.w_rho.data())
            .enumerate()
            .map(|(i, (m, r))| {
                let mu = draw.z_t[i / fan_in] * m;
                let s = softplus(*r);
                -s.ln() + 0.5 * (s * s + mu * mu) - 0.5
            })
            .sum();
        kl_w - self.aux.log_density(&draw.z_t, &draw.weights) + draw.log_q_z
    }

    pub fn bind(&self, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> WeightPosteriorNodes {
        let w_mean = tape.leaf(self.w_mean.clone());
        let w_rho = tape.leaf(self.w_rho.clone());
        leaves.extend([w_mean, w_rho]);
        let z_base = self.z_base.bind(tape, leaves);
        let flow = self.flow.bind(tape, leaves);
        let aux = self.aux.bind(tape, leaves);
        WeightPosteriorNodes {
            w_mean,
            w_rho,
            z_base,
            flow,
            aux,
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w_mean, &self.w_rho, &self.z_base.mu, &self.z_base.rho];
        out.extend(self.flow.parameters());
        out.extend([&self.aux.mean_slope, &self.aux.mean_bias, &self.aux.std_slope, &self.aux.std_bias]);
        out.extend(self.aux.flow.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_mean, &mut self.w_rho, &mut self.z_base.mu, &mut self.z_base.rho];
        out.extend(self.flow.parameters_mut());
        let aux = &mut self.aux;
        out.extend([&mut aux.mean_slope, &mut aux.mean_bias, &mut aux.std_slope, &mut aux.std_bias]);
        out.extend(aux.flow.parameters_mut());
        out
    }
}

/// Records a weight sample on the tape.
pub fn sample_weights_node(
    tape: &mut Tape,
    post: &WeightPosteriorNodes,
    eps_z: &[f64],
    eps_w: &[f64],
) -> Result<WeightSampleNodes> {
    let z0 = sample_node(tape, post.z_base, eps_z)?;
    let (z_t, logdet) = flow_node(tape, &post.flow, z0)?;
    let shape = tape.value(post.w_mean).shape().to_vec();
    let fan_in = shape[1];
    let z_rep = tape.repeat_inner(z_t, fan_in)?;
    let z_rep = tape.reshape(z_rep, &shape)?;
    let mean = tape.mul(z_rep, post.w_mean)?;
    let noise = sample_node(
        tape,
        GaussianNodes {
            mu: mean,
            rho: post.w_rho,
        },
        eps_w,
    )?;
    // log N(z0; mu, std) at z0 = mu + std·eps is −½eps² − log std − ½log 2π.
    let std = tape.softplus(post.z_base.rho)?;
    let log_std = tape.log(std)?;
    let log_std = tape.sum(log_std)?;
    let quad: f64 = eps_z.iter().map(|e| -0.5 * e * e - HALF_LN_2PI).sum();
    let log_n = tape.scale(log_std, -1.0)?;
    let log_n = tape.offset(log_n, quad)?;
    let log_q_z = match logdet {
        Some(ld) => tape.sub(log_n, ld)?,
        None => log_n,
    };
    Ok(WeightSampleNodes {
        weights: noise,
        z_t,
        log_q_z,
    })
}

/// Single-sample bound on `KL(q(W) ‖ N(0, I))`:
/// `KL(q(W|z_T) ‖ p(W)) − log r(z_T|W) + log q(z_T)`.
pub fn kl_estimate_node(tape: &mut Tape, post: &WeightPosteriorNodes, sample: WeightSampleNodes) -> Result<NodeId> {
    let shape = tape.value(post.w_mean).shape().to_vec();
    let fan_in = shape[1];
    let n = (shape[0] * fan_in) as f64;
    let z_rep = tape.repeat_inner(sample.z_t, fan_in)?;
    let z_rep = tape.reshape(z_rep, &shape)?;
    let mean = tape.mul(z_rep, post.w_mean)?;
    let std = tape.softplus(post.w_rho)?;
    let log_std = tape.log(std)?;
    let log_std = tape.sum(log_std)?;
    let mean_sq = tape.square_norm(mean)?;
    let var = tape.square_norm(std)?;
    let quad = tape.add(mean_sq, var)?;
    let quad = tape.scale(quad, 0.5)?;
    let kl_w = tape.sub(quad, log_std)?;
    let kl_w = tape.offset(kl_w, -0.5 * n)?;
    let log_r = aux_log_density_node(tape, &post.aux, sample.z_t, sample.weights)?;
    let kl = tape.sub(kl_w, log_r)?;
    tape.add(kl, sample.log_q_z)
}

/// Standard-normal noise for one layer's posterior sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDraw {
    pub eps_starts: Vec<f64>,
    pub eps_ends: Vec<f64>,
    pub eps_z: Vec<f64>,
    pub eps_w: Vec<f64>,
}

/// Posterior over one layer's supports and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesianLayerParams {
    pub starts: VariationalGaussian,
    pub ends: VariationalGaussian,
    pub weights: WeightPosterior,
    pub start_prior: Vec<f64>,
    pub end_prior: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BayesianLayerNodes {
    pub spec: BasisSpec,
    pub starts: GaussianNodes,
    pub ends: GaussianNodes,
    pub weights: WeightPosteriorNodes,
    pub start_prior: Vec<f64>,
    pub end_prior: Vec<f64>,
}

impl BayesianLayerParams {
    /// Posterior centered on a deterministic layer's parameters.
    pub fn from_deterministic<R: Rng + ?Sized>(params: &LayerParams, flow_steps: usize, rng: &mut R) -> Self {
        Self {
            starts: VariationalGaussian::new(params.starts.clone(), INIT_BASIS_STD),
            ends: VariationalGaussian::new(params.ends.clone(), INIT_BASIS_STD),
            weights: WeightPosterior::new(params.weights.clone(), flow_steps, rng),
            start_prior: params.starts.data().to_vec(),
            end_prior: params.ends.data().to_vec(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerDraw {
        LayerDraw {
            eps_starts: standard_normals(self.starts.mu.len(), rng),
            eps_ends: standard_normals(self.ends.mu.len(), rng),
            eps_z: standard_normals(self.weights.n_out(), rng),
            eps_w: standard_normals(self.weights.w_mean.len(), rng),
        }
    }

    /// All-zero noise: posterior means with `z` at the flow of its mean.
    pub fn zero_draw(&self) -> LayerDraw {
        LayerDraw {
            eps_starts: vec![0.0; self.starts.mu.len()],
            eps_ends: vec![0.0; self.ends.mu.len()],
            eps_z: vec![0.0; self.weights.n_out()],
            eps_w: vec![0.0; self.weights.w_mean.len()],
        }
    }

    /// Deterministic layer parameters for a given draw.
    pub fn realize(&self, draw: &LayerDraw) -> LayerParams {
        let shape = self.starts.mu.shape().to_vec();
        let w = self.weights.sample_with(&draw.eps_z, &draw.eps_w);
        LayerParams {
            starts: Tensor::new(self.starts.sample_with(&draw.eps_starts), shape.clone()).expect("shape"),
            ends: Tensor::new(self.ends.sample_with(&draw.eps_ends), shape).expect("shape"),
            weights: Tensor::new(w.weights, self.weights.w_mean.shape().to_vec()).expect("shape"),
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.starts.mu, &self.starts.rho, &self.ends.mu, &self.ends.rho];
        out.extend(self.weights.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.starts.mu, &mut self.starts.rho, &mut self.ends.mu, &mut self.ends.rho];
        out.extend(self.weights.parameters_mut());
        out
    }

    pub fn bind(&self, spec: BasisSpec, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> BayesianLayerNodes {
        let starts = self.starts.bind(tape, leaves);
        let ends = self.ends.bind(tape, leaves);
        let weights = self.weights.bind(tape, leaves);
        BayesianLayerNodes {
            spec,
            starts,
            ends,
            weights,
            start_prior: self.start_prior.clone(),
            end_prior: self.end_prior.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesianLayer {
    pub spec: BasisSpec,
    pub params: BayesianLayerParams,
}

/// A higher-order ReLU-KAN whose supports and weights carry posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesianKan {
    pub layers: Vec<BayesianLayer>,
}

pub type NetworkDraw = Vec<LayerDraw>;

impl BayesianKan {
    pub fn new<R: Rng + ?Sized>(
        width: &[usize],
        grid: usize,
        span: usize,
        order: u32,
        input_domain: (f64, f64),
        flow_steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        validate_width(width)?;
        let domains = layer_domains(width.len() - 1, input_domain);
        let layers = width
            .windows(2)
            .zip(domains)
            .map(|(w, (lo, hi))| {
                let spec = BasisSpec::new(grid, span, order, lo, hi)?;
                let det = LayerParams::init(&spec, w[0], w[1], rng);
                Ok(BayesianLayer {
                    params: BayesianLayerParams::from_deterministic(&det, flow_steps, rng),
                    spec,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn width(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].params.starts.mu.shape()[0]];
        w.extend(self.layers.iter().map(|l| l.params.weights.n_out()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].params.starts.mu.shape()[0]
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> NetworkDraw {
        self.layers.iter().map(|l| l.params.draw(rng)).collect()
    }

    pub fn zero_draw(&self) -> NetworkDraw {
        self.layers.iter().map(|l| l.params.zero_draw()).collect()
    }

    /// The deterministic network obtained for one posterior draw.
    pub fn realize(&self, draw: &NetworkDraw) -> KanNetwork {
        KanNetwork {
            layers: self
                .layers
                .iter()
                .zip(draw)
                .map(|(l, d)| KanLayer {
                    spec: l.spec,
                    params: l.params.realize(d),
                })
                .collect(),
        }
    }

    /// Network at the posterior means.
    pub fn mean_network(&self) -> KanNetwork {
        self.realize(&self.zero_draw())
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.parameters_mut()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> Vec<BayesianLayerNodes> {
        self.layers.iter().map(|l| l.params.bind(l.spec, tape, leaves)).collect()
    }
}

/// Samples every layer on the tape and accumulates the KL regularizer.
/// Returns the sampled layers and the summed KL node.
pub fn sample_network_nodes(
    tape: &mut Tape,
    layers: &[BayesianLayerNodes],
    draw: &NetworkDraw,
    include_basis_kl: bool,
) -> Result<(Vec<LayerNodes>, NodeId)> {
    let mut sampled = Vec::with_capacity(layers.len());
    let mut kl = tape.constant(0.0);
    for (layer, d) in layers.iter().zip(draw) {
        let starts = sample_node(tape, layer.starts, &d.eps_starts)?;
        let ends = sample_node(tape, layer.ends, &d.eps_ends)?;
        let w = sample_weights_node(tape, &layer.weights, &d.eps_z, &d.eps_w)?;
        let k = kl_estimate_node(tape, &layer.weights, w)?;
        kl = tape.add(kl, k)?;
        if include_basis_kl {
            let ks = kl_basis_node(tape, layer.starts, &layer.start_prior, BASIS_PRIOR_STD)?;
            let ke = kl_basis_node(tape, layer.ends, &layer.end_prior, BASIS_PRIOR_STD)?;
            kl = tape.add(kl, ks)?;
            kl = tape.add(kl, ke)?;
        }
        sampled.push(LayerNodes {
            spec: layer.spec,
            starts,
            ends,
            weights: w.weights,
        });
    }
    Ok((sampled, kl))
}

/// `log N(x; mean, std²)`.
pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let d = (x - mean) / std;
    -0.5 * d * d - std.ln() - 0.5 * (2.0 * PI).ln()
}
