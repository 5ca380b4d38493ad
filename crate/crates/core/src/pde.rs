//! Physics targets: input-derivative jets, Poisson and Helmholtz residuals,
//! grids, and the heteroscedastic noise model.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::basis::{apply_weights_node, normalize_node, BasisPoly, KanNetwork, LayerNodes};
use crate::error::{Error, Result};

/// Value with first and second derivatives along one tracked coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn constant(value: f64) -> Self {
        Self { value, d1: 0.0, d2: 0.0 }
    }

    /// The tracked coordinate itself.
    pub fn variable(value: f64) -> Self {
        Self { value, d1: 1.0, d2: 0.0 }
    }

    /// `g ∘ self` given `(g, g′, g″)` evaluated at `self.value`.
    pub fn compose(self, g: f64, dg: f64, d2g: f64) -> Self {
        Self {
            value: g,
            d1: dg * self.d1,
            d2: d2g * self.d1 * self.d1 + dg * self.d2,
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.compose(s, c, -s)
    }

    pub fn scale(self, c: f64) -> Self {
        Self {
            value: c * self.value,
            d1: c * self.d1,
            d2: c * self.d2,
        }
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            value: self.value + o.value,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
        }
    }
}

impl std::ops::Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet {
            value: self.value * o.value,
            d1: self.d1 * o.value + self.value * o.d1,
            d2: self.d2 * o.value + 2.0 * self.d1 * o.d1 + self.value * o.d2,
        }
    }
}

/// Propagates a jet seeded on `x[coord]` through the network; one jet per output.
pub fn jet_forward(net: &KanNetwork, x: &[f64], coord: usize) -> Result<Vec<Jet>> {
    if coord >= x.len() {
        return Err(Error::domain(format!("coordinate {coord} out of range for input of width {}", x.len())));
    }
    if x.len() != net.input_dim() {
        return Err(Error::Length {
            what: "network input width",
            left: x.len(),
            right: net.input_dim(),
        });
    }
    let mut h: Vec<Jet> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if i == coord { Jet::variable(v) } else { Jet::constant(v) })
        .collect();
    for layer in &net.layers {
        let poly = BasisPoly::new(layer.spec.order);
        let p = &layer.params;
        let k = p.num_basis();
        let inv_w = 1.0 / layer.spec.domain_width();
        let (s, e) = (p.starts.data(), p.ends.data());
        let mut features = vec![Jet::default(); h.len() * k];
        for (i, jet) in h.iter().enumerate() {
            let xn = layer.spec.normalize(jet.value);
            let input = Jet {
                value: xn,
                d1: jet.d1 * inv_w,
                d2: jet.d2 * inv_w,
            };
            for b in 0..k {
                let (si, ei) = (s[i * k + b], e[i * k + b]);
                features[i * k + b] = input.compose(
                    poly.derivative_at(xn, si, ei, 0),
                    poly.derivative_at(xn, si, ei, 1),
                    poly.derivative_at(xn, si, ei, 2),
                );
            }
        }
        h = p
            .weights
            .data()
            .chunks_exact(features.len())
            .map(|row| {
                row.iter()
                    .zip(&features)
                    .fold(Jet::default(), |acc, (w, f)| acc + f.scale(*w))
            })
            .collect();
    }
    Ok(h)
}

/// `∂²û/∂x₁² + ∂²û/∂x₂²` of the first network output.
pub fn laplacian(net: &KanNetwork, x: &[f64]) -> Result<f64> {
    (0..x.len()).try_fold(0.0, |acc, c| Ok(acc + jet_forward(net, x, c)?[0].d2))
}

/// `(û, ∇²û)` of the first output.
pub fn value_and_laplacian(net: &KanNetwork, x: &[f64]) -> Result<(f64, f64)> {
    let mut lap = 0.0;
    let mut value = 0.0;
    for c in 0..x.len() {
        let j = jet_forward(net, x, c)?[0];
        value = j.value;
        lap += j.d2;
    }
    Ok((value, lap))
}

/// Tape jets for a batch: the network value and, per tracked coordinate,
/// first and second derivatives. All nodes have shape `[B, n_out]`.
#[derive(Clone, Debug)]
pub struct JetNodes {
    pub value: NodeId,
    pub d1: Vec<NodeId>,
    pub d2: Vec<NodeId>,
}

/// Propagates jets for every input coordinate of `x [B, n_in]` through the
/// sampled layers, sharing the basis evaluations across coordinates.
pub fn jet_nodes(tape: &mut Tape, layers: &[LayerNodes], x: &Tensor) -> Result<JetNodes> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "jet",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    let mut value = tape.leaf(x.clone());
    let mut d1: Vec<NodeId> = Vec::with_capacity(n_in);
    for c in 0..n_in {
        let mut seed = Tensor::zeros(&[batch, n_in]);
        for b in 0..batch {
            seed.data_mut()[b * n_in + c] = 1.0;
        }
        d1.push(tape.leaf(seed));
    }
    // The input is linear in each coordinate so its second derivatives vanish.
    let mut d2: Vec<Option<NodeId>> = vec![None; n_in];
    for layer in layers {
        let width = tape.value(value).shape()[1];
        let k = layer.spec.num_basis();
        let inv_w = 1.0 / layer.spec.domain_width();
        let xn = normalize_node(tape, value, &layer.spec)?;
        let r0 = tape.basis(xn, layer.starts, layer.ends, layer.spec.order, 0)?;
        let r1 = tape.basis(xn, layer.starts, layer.ends, layer.spec.order, 1)?;
        let r2 = tape.basis(xn, layer.starts, layer.ends, layer.spec.order, 2)?;
        let feat_shape = [batch, width * k];
        for c in 0..n_in {
            let a = tape.scale(d1[c], inv_w)?;
            let a = tape.repeat_inner(a, k)?;
            let a = tape.reshape(a, &feat_shape)?;
            let f1 = tape.mul(r1, a)?;
            let a2 = tape.square(a)?;
            let mut f2 = tape.mul(r2, a2)?;
            if let Some(prev) = d2[c] {
                let b = tape.scale(prev, inv_w)?;
                let b = tape.repeat_inner(b, k)?;
                let b = tape.reshape(b, &feat_shape)?;
                let extra = tape.mul(r1, b)?;
                f2 = tape.add(f2, extra)?;
            }
            d1[c] = apply_weights_node(tape, f1, layer.weights)?;
            d2[c] = Some(apply_weights_node(tape, f2, layer.weights)?);
        }
        value = apply_weights_node(tape, r0, layer.weights)?;
    }
    let d2 = d2
        .into_iter()
        .map(|d| d.ok_or_else(|| Error::Config("jet propagation needs at least one layer".into())))
        .collect::<Result<_>>()?;
    Ok(JetNodes { value, d1, d2 })
}

/// Sum of the second derivatives in `jets`.
pub fn laplacian_node(tape: &mut Tape, jets: &JetNodes) -> Result<NodeId> {
    let mut acc = jets.d2[0];
    for &d in &jets.d2[1..] {
        acc = tape.add(acc, d)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PdeKind {
    Poisson,
    Helmholtz { a1: f64, a2: f64, kappa: f64 },
}

/// How the noise scale depends on position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDependence {
    /// `|x₁|`.
    #[default]
    FirstCoordinate,
    /// `‖x‖₂`.
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeTask {
    pub kind: PdeKind,
    pub sigma_noise: f64,
    pub noise_dependence: NoiseDependence,
    pub domain: (f64, f64),
    pub train_grid_n: usize,
    pub test_grid_n: usize,
}

impl PdeTask {
    pub fn poisson() -> Self {
        Self {
            kind: PdeKind::Poisson,
            sigma_noise: 0.1,
            noise_dependence: NoiseDependence::FirstCoordinate,
            domain: (-1.0, 1.0),
            train_grid_n: 64,
            test_grid_n: 100,
        }
    }

    pub fn helmholtz() -> Self {
        Self {
            kind: PdeKind::Helmholtz {
                a1: 1.0,
                a2: 2.0,
                kappa: 1.0,
            },
            train_grid_n: 256,
            ..Self::poisson()
        }
    }

    /// Analytic solution.
    pub fn exact(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            PdeKind::Poisson => (PI * x).sin() * (PI * y).sin(),
            PdeKind::Helmholtz { a1, a2, .. } => (a1 * PI * x).sin() * (a2 * PI * y).sin(),
        }
    }

    /// Known source term added to the differential operator.
    pub fn driving(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            PdeKind::Poisson => 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin(),
            PdeKind::Helmholtz { a1, a2, kappa } => {
                let c = kappa - (a1 * PI).powi(2) - (a2 * PI).powi(2);
                -c * (a1 * PI * x).sin() * (a2 * PI * y).sin()
            }
        }
    }

    /// Coefficient on `û` in the operator (`κ²` for Helmholtz, 0 for Poisson).
    pub fn value_coefficient(&self) -> f64 {
        match self.kind {
            PdeKind::Poisson => 0.0,
            PdeKind::Helmholtz { kappa, .. } => kappa * kappa,
        }
    }

    /// Noise-free residual from `û` and `∇²û`.
    pub fn residual_from(&self, x: f64, y: f64, value: f64, lap: f64) -> f64 {
        lap + self.value_coefficient() * value + self.driving(x, y)
    }

    pub fn noise_std(&self, x: &[f64]) -> f64 {
        noise_scale(x, self.noise_dependence) * self.sigma_noise
    }
}

/// `∇²û + 2π² sin(πx₁) sin(πx₂)`.
pub fn poisson_residual(net: &KanNetwork, x: &[f64]) -> Result<f64> {
    let task = PdeTask::poisson();
    Ok(laplacian(net, x)? + task.driving(x[0], x[1]))
}

/// `∇²û + κ²û − [κ − (a₁π)² − (a₂π)²] sin(a₁πx₁) sin(a₂πx₂)`.
pub fn helmholtz_residual(net: &KanNetwork, x: &[f64], a1: f64, a2: f64, kappa: f64) -> Result<f64> {
    let task = PdeTask {
        kind: PdeKind::Helmholtz { a1, a2, kappa },
        ..PdeTask::helmholtz()
    };
    let (value, lap) = value_and_laplacian(net, x)?;
    Ok(task.residual_from(x[0], x[1], value, lap))
}

pub fn noise_scale(x: &[f64], dependence: NoiseDependence) -> f64 {
    match dependence {
        NoiseDependence::FirstCoordinate => x[0].abs(),
        NoiseDependence::Euclidean => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// One draw from `N(0, (|x₁|·sigma)²)`.
pub fn sample_noise<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * x[0].abs() * sigma
}

/// Scaled Student-t draws used for the 1-D tasks.
pub fn sample_student_t<R: Rng + ?Sized>(n: usize, nu: f64, scale: f64, rng: &mut R) -> Result<Vec<f64>> {
    let dist = StudentT::new(nu).map_err(|e| Error::domain(format!("student-t noise: {e}")))?;
    Ok((0..n).map(|_| scale * dist.sample(rng)).collect())
}

/// Position-dependent Gaussian draws for every grid point.
pub fn sample_functional_noise<R: Rng + ?Sized>(
    points: &[[f64; 2]],
    sigma: f64,
    dependence: NoiseDependence,
    rng: &mut R,
) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    points
        .iter()
        .map(|p| unit.sample(rng) * noise_scale(p, dependence) * sigma)
        .collect()
}

/// Uniform tensor-product grid on a square domain, row-major in `y` then `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub points: Vec<[f64; 2]>,
    pub boundary: Vec<bool>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        let (lo, hi) = (self.points[0][0], self.points[self.n - 1][0]);
        (hi - lo) / (self.n - 1) as f64
    }

    pub fn interior(&self) -> Vec<[f64; 2]> {
        self.select(false)
    }

    pub fn boundary_points(&self) -> Vec<[f64; 2]> {
        self.select(true)
    }

    fn select(&self, on_boundary: bool) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .zip(&self.boundary)
            .filter(|(_, b)| **b == on_boundary)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Points as a `[n², 2]` tensor.
    pub fn tensor(points: &[[f64; 2]]) -> Tensor {
        Tensor::new(points.iter().flatten().copied().collect(), vec![points.len(), 2]).expect("grid shape")
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + step * i as f64 })
        .collect()
}

pub fn make_grid(n: usize, domain: (f64, f64)) -> Result<Grid> {
    if n < 2 {
        return Err(Error::domain(format!("grid needs n >= 2, got {n}")));
    }
    let axis = linspace(domain.0, domain.1, n);
    let mut points = Vec::with_capacity(n * n);
    let mut boundary = Vec::with_capacity(n * n);
    for (j, &y) in axis.iter().enumerate() {
        for (i, &x) in axis.iter().enumerate() {
            points.push([x, y]);
            boundary.push(i == 0 || j == 0 || i + 1 == n || j + 1 == n);
        }
    }
    Ok(Grid { n, points, boundary })
}

/// Writes `x,y,u_true,u_noisy` rows.
pub fn write_grid_csv(path: &Path, grid: &Grid, u_true: &[f64], u_noisy: &[f64]) -> Result<()> {
    if u_true.len() != grid.len() || u_noisy.len() != grid.len() {
        return Err(Error::Length {
            what: "grid values",
            left: u_true.len().min(u_noisy.len()),
            right: grid.len(),
        });
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.write_record(["x", "y", "u_true", "u_noisy"])?;
    for ((p, t), n) in grid.points.iter().zip(u_true).zip(u_noisy) {
        w.write_record([p[0], p[1], *t, *n].iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The three 1-D benchmark functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Function1d {
    F1,
    F2,
    F3,
}

impl Function1d {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::F1 => (PI * x).sin(),
            Self::F2 => (5.0 * PI * x).sin() + x,
            Self::F3 => x.exp(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::F1 => "f1",
            Self::F2 => "f2",
            Self::F3 => "f3",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{forward_nodes, BasisSpec, KanLayer, LayerParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, order: u32) -> KanNetwork {
        KanNetwork::new(&[2, 2, 1], 3, 2, order, (-1.0, 1.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn jet_chain_rule() {
        let x = Jet::variable(0.7);
        let y = (x * x).sin();
        let (s, c) = 0.49f64.sin_cos();
        assert!((y.d1 - c * 1.4).abs() < 1e-14);
        assert!((y.d2 - (-s * 1.4 * 1.4 + c * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn jets_match_finite_differences() {
        let net = random_net(1, 4);
        let x = [0.13, -0.42];
        let h = 1e-4;
        for c in 0..2 {
            let j = jet_forward(&net, &x, c).unwrap()[0];
            let f = |d: f64| {
                let mut p = x;
                p[c] += d;
                net.network_forward(&p).unwrap()[0]
            };
            let fd1 = (f(h) - f(-h)) / (2.0 * h);
            let fd2 = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
            assert!((j.d1 - fd1).abs() < 1e-6 * fd1.abs().max(1.0));
            assert!((j.d2 - fd2).abs() < 1e-4 * fd2.abs().max(1.0));
        }
        assert!(jet_forward(&net, &x, 2).is_err());
    }

    #[test]
    fn tape_jets_match_pure_jets() {
        let net = random_net(2, 4);
        let pts = [[0.1, 0.2], [-0.5, 0.7], [0.9, -0.3]];
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let layers = net.bind(&mut tape, &mut leaves);
        let jets = jet_nodes(&mut tape, &layers, &Grid::tensor(&pts)).unwrap();
        let lap = laplacian_node(&mut tape, &jets).unwrap();
        let xs = tape.leaf(Grid::tensor(&pts));
        let plain = forward_nodes(&mut tape, &layers, xs).unwrap();
        for (b, p) in pts.iter().enumerate() {
            let (v, l) = value_and_laplacian(&net, p).unwrap();
            assert!((tape.value(jets.value).data()[b] - v).abs() < 1e-13);
            assert!((tape.value(plain).data()[b] - v).abs() < 1e-13);
            assert!((tape.value(lap).data()[b] - l).abs() < 1e-10 * l.abs().max(1.0));
            let j0 = jet_forward(&net, p, 0).unwrap()[0];
            assert!((tape.value(jets.d1[0]).data()[b] - j0.d1).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_network_has_zero_laplacian() {
        let spec = BasisSpec::new(3, 2, 4, -1.0, 1.0).unwrap();
        let mut params = LayerParams::init(&spec, 2, 1, &mut ChaCha8Rng::seed_from_u64(0));
        params.weights = Tensor::zeros(params.weights.shape());
        let net = KanNetwork::from_layers(vec![KanLayer { spec, params }]).unwrap();
        assert_eq!(laplacian(&net, &[0.3, 0.4]).unwrap(), 0.0);
        let r = poisson_residual(&net, &[0.5, 0.5]).unwrap();
        assert!((r - 2.0 * PI * PI).abs() < 1e-12);
        let h = helmholtz_residual(&net, &[0.5, 0.25], 1.0, 2.0, 1.0).unwrap();
        assert!((h.abs() - (1.0 - 5.0 * PI * PI).abs()).abs() < 1e-10);
        assert!(((5.0 * PI * PI - 1.0) - 48.348).abs() < 1e-3);
    }

    #[test]
    fn exact_solutions_satisfy_residuals() {
        let poisson = PdeTask::poisson();
        let helm = PdeTask::helmholtz();
        for &(x, y) in &[(0.3, -0.7), (0.5, 0.5), (-0.9, 0.1)] {
            let u = |task: &PdeTask, a1: f64, a2: f64| {
                let jx = Jet::variable(a1 * PI * x).sin();
                let jy = Jet::variable(a2 * PI * y).sin();
                let lap = jx.d2 * a1 * a1 * PI * PI * jy.value + jy.d2 * a2 * a2 * PI * PI * jx.value;
                task.residual_from(x, y, jx.value * jy.value, lap)
            };
            assert!(u(&poisson, 1.0, 1.0).abs() < 1e-10);
            assert!(u(&helm, 1.0, 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_counts() {
        let g = make_grid(2, (-1.0, 1.0)).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.boundary.iter().all(|b| *b));
        let g = make_grid(64, (-1.0, 1.0)).unwrap();
        assert_eq!(g.len(), 4096);
        assert_eq!(g.boundary.iter().filter(|b| **b).count(), 252);
        let g = make_grid(100, (-1.0, 1.0)).unwrap();
        assert!((g.spacing() - 2.0 / 99.0).abs() < 1e-15);
        assert!(make_grid(1, (-1.0, 1.0)).is_err());
    }

    #[test]
    fn noise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_noise(&[0.0, 0.5], 0.1, &mut rng), 0.0);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_noise(&[1.0, 0.0], 0.1, &mut rng)).collect();
        let std = (draws.iter().map(|v| v * v).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((std - 0.1).abs() < 0.002, "{std}");
        assert_eq!(noise_scale(&[-1.0, 0.0], NoiseDependence::FirstCoordinate), 1.0);
        assert_eq!(noise_scale(&[3.0, 4.0], NoiseDependence::Euclidean), 5.0);
    }

    #[test]
    fn poisson_zero_network_loss_scale() {
        let g = make_grid(64, (-1.0, 1.0)).unwrap();
        let task = PdeTask::poisson();
        let interior = g.interior();
        let ms: f64 = interior.iter().map(|p| task.driving(p[0], p[1]).powi(2)).sum::<f64>() / interior.len() as f64;
        let expected = (2.0 * PI * PI).powi(2) / 4.0;
        assert!((ms - expected).abs() / expected < 0.05, "{ms} vs {expected}");
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let g = make_grid(3, (-1.0, 1.0)).unwrap();
        let t: Vec<f64> = g.points.iter().map(|p| p[0] * p[1]).collect();
        write_grid_csv(&path, &g, &t, &t).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["x", "y", "u_true", "u_noisy"]);
        assert_eq!(r.records().count(), 9);
    }
}
