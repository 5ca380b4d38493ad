//! Higher-order ReLU-KAN basis functions, activations and network assembly.
//!
//! A basis function with support `(s, e)` and order `m` is
//! `R(x) = [relu(e − x) · relu(x − s)]^m · (2 / (e − s))^{2m}`, which peaks at
//! exactly 1 at the midpoint. Writing `t = (x − s) / (e − s)` it is the
//! polynomial `g(t) = 4^m t^m (1 − t)^m` on `(0, 1)`, so every derivative in
//! `x`, `s` and `e` follows from derivatives of `g`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Grid, span, order and input domain shared by every activation of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub grid: usize,
    pub span: usize,
    pub order: u32,
    pub domain_low: f64,
    pub domain_high: f64,
}

impl BasisSpec {
    pub fn new(grid: usize, span: usize, order: u32, domain_low: f64, domain_high: f64) -> Result<Self> {
        let spec = Self {
            grid,
            span,
            order,
            domain_low,
            domain_high,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.span == 0 {
            return Err(Error::Config(format!(
                "grid and span must be positive (grid={}, span={})",
                self.grid, self.span
            )));
        }
        if self.order < 2 {
            return Err(Error::Config(format!("basis order must be >= 2, got {}", self.order)));
        }
        if !(self.domain_low < self.domain_high) {
            return Err(Error::Config(format!(
                "domain_low ({}) must be below domain_high ({})",
                self.domain_low, self.domain_high
            )));
        }
        Ok(())
    }

    /// Basis functions per activation, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.grid + self.span
    }

    pub fn domain_width(&self) -> f64 {
        self.domain_high - self.domain_low
    }

    /// Affine map of the layer domain onto `[0, 1]`.
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.domain_low) / self.domain_width()
    }

    /// Evenly spaced overlapping supports in normalized coordinates:
    /// `s_i = (i − 1 − k) / G`, `e_i = s_i + (k + 1) / G`.
    pub fn initial_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let g = self.grid as f64;
        let k = self.span as f64;
        let starts: Vec<f64> = (0..self.num_basis()).map(|i| (i as f64 - k) / g).collect();
        let ends = starts.iter().map(|s| s + (k + 1.0) / g).collect();
        (starts, ends)
    }
}

/// Coefficient tables of `g(t) = 4^m t^m (1 − t)^m` and its derivatives.
#[derive(Clone, Debug)]
pub(crate) struct BasisPoly {
    derivs: Vec<Vec<f64>>,
}

impl BasisPoly {
    pub(crate) fn new(order: u32) -> Self {
        let m = order as usize;
        let scale = 4f64.powi(order as i32);
        let mut coeffs = vec![0.0; 2 * m + 1];
        let mut binom = 1.0;
        for k in 0..=m {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            coeffs[m + k] = scale * binom * sign;
            binom = binom * (m - k) as f64 / (k + 1) as f64;
        }
        let mut derivs = vec![coeffs];
        while derivs.len() < 4 {
            let prev = derivs.last().expect("non-empty");
            let next: Vec<f64> = prev.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect();
            derivs.push(if next.is_empty() { vec![0.0] } else { next });
        }
        Self { derivs }
    }

    fn eval(&self, j: usize, t: f64) -> f64 {
        self.derivs[j].iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    /// `∂ʲR/∂xʲ` at `x`; zero outside the open support or for empty supports.
    pub(crate) fn derivative_at(&self, x: f64, s: f64, e: f64, j: usize) -> f64 {
        let len = e - s;
        if !(len > 0.0) {
            return 0.0;
        }
        let t = (x - s) / len;
        if !(t > 0.0 && t < 1.0) {
            return 0.0;
        }
        self.eval(j, t) / len.powi(j as i32)
    }

    /// Partials of `∂ʲR/∂xʲ` with respect to `(x, s, e)`.
    pub(crate) fn partials(&self, x: f64, s: f64, e: f64, j: usize) -> (f64, f64, f64) {
        let len = e - s;
        if !(len > 0.0) {
            return (0.0, 0.0, 0.0);
        }
        let t = (x - s) / len;
        if !(t > 0.0 && t < 1.0) {
            return (0.0, 0.0, 0.0);
        }
        let gj = self.eval(j, t);
        let gj1 = self.eval(j + 1, t);
        let lp = len.powi(j as i32 + 1);
        let jf = j as f64;
        (gj1 / lp, (gj1 * (t - 1.0) + jf * gj) / lp, (-t * gj1 - jf * gj) / lp)
    }
}

fn check_support(s: f64, e: f64, order: u32) -> Result<()> {
    if !(s < e) {
        return Err(Error::domain(format!("basis support requires s < e (s={s}, e={e})")));
    }
    if order < 2 {
        return Err(Error::domain(format!("basis order must be >= 2, got {order}")));
    }
    Ok(())
}

/// `R_{i,m}(x)` for a single support.
pub fn basis_eval(x: f64, s: f64, e: f64, order: u32) -> Result<f64> {
    check_support(s, e, order)?;
    let relu = |v: f64| v.max(0.0);
    let prod = relu(e - x) * relu(x - s);
    let m = order as i32;
    Ok(prod.powi(m) * (2.0 / (e - s)).powi(2 * m))
}

/// `(R, dR/dx, d²R/dx²)` in closed form via the product `q = (e − x)(x − s)`.
pub fn basis_derivatives(x: f64, s: f64, e: f64, order: u32) -> Result<(f64, f64, f64)> {
    check_support(s, e, order)?;
    if !(x > s && x < e) {
        return Ok((0.0, 0.0, 0.0));
    }
    let m = order as i32;
    let mf = order as f64;
    let c = (2.0 / (e - s)).powi(2 * m);
    let q = (e - x) * (x - s);
    let dq = e + s - 2.0 * x;
    let r = c * q.powi(m);
    let d1 = c * mf * q.powi(m - 1) * dq;
    let d2 = c * (mf * (mf - 1.0) * q.powi(m - 2) * dq * dq - 2.0 * mf * q.powi(m - 1));
    Ok((r, d1, d2))
}

/// One activation `φ(x) = Σ_i w_i R_i(x)`, with `x` in layer-domain units and
/// `starts`/`ends` in normalized coordinates.
pub fn phi_eval(x: f64, weights: &[f64], spec: &BasisSpec, starts: &[f64], ends: &[f64]) -> Result<f64> {
    let n = spec.num_basis();
    for (what, len) in [("weights", weights.len()), ("starts", starts.len()), ("ends", ends.len())] {
        if len != n {
            return Err(Error::Length { what, left: len, right: n });
        }
    }
    let xn = spec.normalize(x);
    let poly = BasisPoly::new(spec.order);
    Ok(weights
        .iter()
        .zip(starts.iter().zip(ends))
        .map(|(w, (&s, &e))| w * poly.derivative_at(xn, s, e, 0))
        .sum())
}

/// Starts, ends and convolution weights of one layer.
///
/// `starts`/`ends` have shape `[n_in, G + k]` and are shared across output
/// units; `weights` has shape `[n_out, n_in · (G + k)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub starts: Tensor,
    pub ends: Tensor,
    pub weights: Tensor,
}

impl LayerParams {
    pub fn n_in(&self) -> usize {
        self.starts.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_basis(&self) -> usize {
        self.starts.shape()[1]
    }

    /// Domain-tiling supports and Gaussian weights with std `1/√(n_in·(G+k))`.
    pub fn init<R: Rng + ?Sized>(spec: &BasisSpec, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let (s, e) = spec.initial_bounds();
        let k = spec.num_basis();
        let tile = |v: &[f64]| {
            Tensor::new(v.repeat(n_in), vec![n_in, k]).expect("tiled bounds have consistent shape")
        };
        let fan_in = n_in * k;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
        let w: Vec<f64> = (0..n_out * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            starts: tile(&s),
            ends: tile(&e),
            weights: Tensor::new(w, vec![n_out, fan_in]).expect("weight shape"),
        }
    }

    pub fn validate(&self, spec: &BasisSpec) -> Result<()> {
        let k = spec.num_basis();
        let n_in = self.starts.shape()[0];
        let expect_se = [n_in, k];
        if self.starts.shape() != expect_se || self.ends.shape() != expect_se {
            return Err(Error::ShapeMismatch {
                op: "layer params",
                lhs: self.starts.shape().to_vec(),
                rhs: self.ends.shape().to_vec(),
            });
        }
        if self.weights.shape().len() != 2 || self.weights.shape()[1] != n_in * k {
            return Err(Error::ShapeMismatch {
                op: "layer weights",
                lhs: self.weights.shape().to_vec(),
                rhs: vec![self.n_out(), n_in * k],
            });
        }
        Ok(())
    }

    /// The `[n_in, G+k]` matrix of basis derivatives of order `deriv` at `x`.
    pub(crate) fn basis_matrix(&self, xn: &[f64], poly: &BasisPoly, deriv: usize) -> Vec<f64> {
        let k = self.num_basis();
        let (s, e) = (self.starts.data(), self.ends.data());
        let mut out = vec![0.0; xn.len() * k];
        for (p, &xv) in xn.iter().enumerate() {
            for i in 0..k {
                out[p * k + i] = poly.derivative_at(xv, s[p * k + i], e[p * k + i], deriv);
            }
        }
        out
    }

    /// `W · flatten(M)` for a flattened `[n_in, G+k]` matrix `M`.
    pub(crate) fn apply_weights(&self, flat: &[f64]) -> Vec<f64> {
        let fan_in = flat.len();
        self.weights
            .data()
            .chunks_exact(fan_in)
            .map(|row| row.iter().zip(flat).map(|(w, r)| w * r).sum())
            .collect()
    }
}

/// Convolution form of one KAN layer: evaluate the `[n_in, G+k]` basis matrix
/// at the normalized inputs, flatten it, and apply `W`.
pub fn layer_forward(x: &[f64], params: &LayerParams, spec: &BasisSpec) -> Result<Vec<f64>> {
    if x.len() != params.n_in() {
        return Err(Error::Length {
            what: "layer input width",
            left: x.len(),
            right: params.n_in(),
        });
    }
    let xn: Vec<f64> = x.iter().map(|&v| spec.normalize(v)).collect();
    let poly = BasisPoly::new(spec.order);
    let basis = params.basis_matrix(&xn, &poly, 0);
    Ok(params.apply_weights(&basis))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    pub spec: BasisSpec,
    pub params: LayerParams,
}

/// Tape handles for one layer's (possibly sampled) parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub spec: BasisSpec,
    pub starts: NodeId,
    pub ends: NodeId,
    pub weights: NodeId,
}

/// A deterministic (higher-order) ReLU-KAN.
#[derive(Clone, Debug, PartialEq)]
pub struct KanNetwork {
    pub layers: Vec<KanLayer>,
}

/// Domains used by a network: the first layer sees the task's input domain,
/// inner layers default to `[-1, 1]`.
pub fn layer_domains(depth: usize, input_domain: (f64, f64)) -> Vec<(f64, f64)> {
    (0..depth)
        .map(|l| if l == 0 { input_domain } else { (-1.0, 1.0) })
        .collect()
}

pub fn validate_width(width: &[usize]) -> Result<()> {
    if width.len() < 2 || width.contains(&0) {
        return Err(Error::Config(format!(
            "width must list at least two positive layer sizes, got {width:?}"
        )));
    }
    Ok(())
}

impl KanNetwork {
    pub fn new<R: Rng + ?Sized>(
        width: &[usize],
        grid: usize,
        span: usize,
        order: u32,
        input_domain: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        validate_width(width)?;
        let domains = layer_domains(width.len() - 1, input_domain);
        let layers = width
            .windows(2)
            .zip(domains)
            .map(|(w, (lo, hi))| {
                let spec = BasisSpec::new(grid, span, order, lo, hi)?;
                Ok(KanLayer {
                    params: LayerParams::init(&spec, w[0], w[1], rng),
                    spec,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Assembles a network from explicit layers, checking width consistency.
    pub fn from_layers(layers: Vec<KanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for layer in &layers {
            layer.spec.validate()?;
            layer.params.validate(&layer.spec)?;
        }
        for pair in layers.windows(2) {
            if pair[0].params.n_out() != pair[1].params.n_in() {
                return Err(Error::Length {
                    what: "consecutive layer widths",
                    left: pair[0].params.n_out(),
                    right: pair[1].params.n_in(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn width(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].params.n_in()];
        w.extend(self.layers.iter().map(|l| l.params.n_out()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].params.n_in()
    }

    pub fn network_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.layers
            .iter()
            .try_fold(x.to_vec(), |h, layer| layer_forward(&h, &layer.params, &layer.spec))
    }

    /// Evaluates a flattened `[B, n_in]` batch, returning `[B, n_out]`.
    pub fn forward_batch(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n_in = self.input_dim();
        if x.len() % n_in != 0 {
            return Err(Error::Length {
                what: "batch input width",
                left: x.len(),
                right: n_in,
            });
        }
        let mut h = x.to_vec();
        let mut width = n_in;
        for layer in &self.layers {
            let poly = BasisPoly::new(layer.spec.order);
            let p = &layer.params;
            let n_out = p.n_out();
            let mut next = Vec::with_capacity(h.len() / width * n_out);
            let mut xn = vec![0.0; width];
            for row in h.chunks_exact(width) {
                for (d, v) in xn.iter_mut().zip(row) {
                    *d = layer.spec.normalize(*v);
                }
                next.extend(p.apply_weights(&p.basis_matrix(&xn, &poly, 0)));
            }
            h = next;
            width = n_out;
        }
        Ok(h)
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.params.starts, &l.params.ends, &l.params.weights])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.params.starts, &mut l.params.ends, &mut l.params.weights])
            .collect()
    }

    /// Registers every parameter as a tape leaf, in [`Self::parameters`] order.
    pub fn bind(&self, tape: &mut Tape, leaves: &mut Vec<NodeId>) -> Vec<LayerNodes> {
        self.layers
            .iter()
            .map(|l| {
                let starts = tape.leaf(l.params.starts.clone());
                let ends = tape.leaf(l.params.ends.clone());
                let weights = tape.leaf(l.params.weights.clone());
                leaves.extend([starts, ends, weights]);
                LayerNodes {
                    spec: l.spec,
                    starts,
                    ends,
                    weights,
                }
            })
            .collect()
    }
}

/// Normalizes a `[B, n]` node into `[0, 1]` layer coordinates.
pub(crate) fn normalize_node(tape: &mut Tape, x: NodeId, spec: &BasisSpec) -> Result<NodeId> {
    let w = spec.domain_width();
    let scaled = tape.scale(x, 1.0 / w)?;
    tape.offset(scaled, -spec.domain_low / w)
}

/// `[B, F] · Wᵀ` for weights `W [n_out, F]`.
pub(crate) fn apply_weights_node(tape: &mut Tape, features: NodeId, weights: NodeId) -> Result<NodeId> {
    let wt = tape.transpose(weights)?;
    tape.matmul(features, wt)
}

/// Batched network evaluation on the tape; `x` has shape `[B, n_in]`.
pub fn forward_nodes(tape: &mut Tape, layers: &[LayerNodes], x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for layer in layers {
        let xn = normalize_node(tape, h, &layer.spec)?;
        let r = tape.basis(xn, layer.starts, layer.ends, layer.spec.order, 0)?;
        h = apply_weights_node(tape, r, layer.weights)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_is_one_for_any_order() {
        for m in 2..=6 {
            let v = basis_eval(0.3, -0.1, 0.7, m).unwrap();
            assert!((v - 1.0).abs() < 1e-12, "m={m} v={v}");
        }
    }

    #[test]
    fn zero_outside_support() {
        assert_eq!(basis_eval(-0.1, 0.0, 1.0, 2).unwrap(), 0.0);
        assert_eq!(basis_eval(1.0, 0.0, 1.0, 3).unwrap(), 0.0);
        assert_eq!(basis_derivatives(2.0, 0.0, 1.0, 4).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn quarter_point_order_two() {
        let v = basis_eval(0.25, 0.0, 1.0, 2).unwrap();
        assert!((v - 0.5625).abs() < 1e-15);
    }

    #[test]
    fn invalid_support_is_domain_error() {
        assert!(matches!(basis_eval(0.5, 1.0, 1.0, 2), Err(Error::Domain(_))));
        assert!(matches!(basis_derivatives(0.5, 2.0, 1.0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_peak_has_zero_slope() {
        let (_, d1, _) = basis_derivatives(0.5, 0.0, 1.0, 3).unwrap();
        assert!(d1.abs() < 1e-14);
    }

    #[test]
    fn polynomial_form_matches_closed_form() {
        for m in 2..=5 {
            let poly = BasisPoly::new(m);
            for &x in &[0.05, 0.2, 0.41, 0.77, 0.93] {
                let (r, d1, d2) = basis_derivatives(x, -0.2, 1.1, m).unwrap();
                assert!((poly.derivative_at(x, -0.2, 1.1, 0) - r).abs() < 1e-12);
                assert!((poly.derivative_at(x, -0.2, 1.1, 1) - d1).abs() < 1e-10 * d1.abs().max(1.0));
                assert!((poly.derivative_at(x, -0.2, 1.1, 2) - d2).abs() < 1e-9 * d2.abs().max(1.0));
            }
        }
    }

    #[test]
    fn initial_bounds_tile_domain() {
        let spec = BasisSpec::new(5, 3, 2, 0.0, 1.0).unwrap();
        let (s, e) = spec.initial_bounds();
        assert_eq!(s.len(), 8);
        assert!((s[0] + 0.6).abs() < 1e-15);
        assert!((e[0] - 0.2).abs() < 1e-15);
        assert!(s.iter().zip(&e).all(|(a, b)| a < b));
        // k + 1 overlapping supports at an interior point
        let covering = s.iter().zip(&e).filter(|(a, b)| **a < 0.5 && 0.5 < **b).count();
        assert_eq!(covering, 4);
    }

    #[test]
    fn phi_eval_linearity_and_length_check() {
        let spec = BasisSpec::new(5, 3, 2, 0.0, 1.0).unwrap();
        let (s, e) = spec.initial_bounds();
        assert_eq!(phi_eval(0.3, &[0.0; 8], &spec, &s, &e).unwrap(), 0.0);
        let mut w = vec![0.0; 8];
        w[4] = 1.0;
        let v = phi_eval(0.3, &w, &spec, &s, &e).unwrap();
        assert_eq!(v, basis_eval(0.3, s[4], e[4], 2).unwrap());
        assert!(matches!(
            phi_eval(0.3, &[0.0; 7], &spec, &s, &e),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(BasisSpec::new(0, 3, 2, 0.0, 1.0).is_err());
        assert!(BasisSpec::new(5, 3, 1, 0.0, 1.0).is_err());
        assert!(BasisSpec::new(5, 3, 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn width_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = KanNetwork::new(&[2, 2, 1], 5, 3, 4, (-1.0, 1.0), &mut rng).unwrap();
        assert_eq!(net.width(), vec![2, 2, 1]);
        assert!(net.network_forward(&[0.1]).is_err());
        let a = net.layers[0].clone();
        assert!(KanNetwork::from_layers(vec![a.clone(), a]).is_ok());
        let mut bad = net.layers.clone();
        bad.swap(0, 1);
        assert!(KanNetwork::from_layers(bad).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = KanNetwork::new(&[2, 2, 1], 5, 3, 4, (-1.0, 1.0), &mut rng).unwrap();
        for l in &mut net.layers {
            l.params.weights.data_mut().fill(0.0);
        }
        assert_eq!(net.network_forward(&[0.3, -0.4]).unwrap(), vec![0.0]);
    }

    #[test]
    fn tape_forward_matches_pure_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = KanNetwork::new(&[2, 3, 1], 4, 2, 3, (-1.0, 1.0), &mut rng).unwrap();
        let pts = [[0.1, -0.3], [0.8, 0.5], [-0.9, 0.2]];
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let nodes = net.bind(&mut tape, &mut leaves);
        assert_eq!(leaves.len(), net.parameters().len());
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let x = tape.leaf(Tensor::new(flat, vec![3, 2]).unwrap());
        let out = forward_nodes(&mut tape, &nodes, x).unwrap();
        for (b, p) in pts.iter().enumerate() {
            let pure = net.network_forward(p).unwrap()[0];
            assert!((tape.value(out).data()[b] - pure).abs() < 1e-13);
        }
    }
}
