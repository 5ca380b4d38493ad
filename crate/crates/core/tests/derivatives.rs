use hrkan::basis::KanNetwork;
use hrkan::oracles::laplacian_fd;
use hrkan::pde::{jet_forward, value_and_laplacian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Richardson-extrapolated central second difference.
fn second_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn first_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

#[test]
fn jets_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut worst1, mut worst2) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let order = rng.random_range(4..=6);
        let grid = rng.random_range(3..=6);
        let width = if rng.random_bool(0.5) { vec![2, 2, 1] } else { vec![2, 3, 2, 1] };
        let net = KanNetwork::new(&width, grid, 3, order, (-1.0, 1.0), &mut rng).unwrap();
        let x = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        for coord in 0..2 {
            let jet = jet_forward(&net, &x, coord).unwrap()[0];
            let f = |v: f64| {
                let mut p = x;
                p[coord] = v;
                net.network_forward(&p).unwrap()[0]
            };
            assert!((jet.value - f(x[coord])).abs() < 1e-12);
            let d1 = first_derivative(f, x[coord], 1e-4);
            let d2 = second_derivative(f, x[coord], 1e-3);
            worst1 = worst1.max((jet.d1 - d1).abs() / jet.d1.abs().max(1.0));
            worst2 = worst2.max((jet.d2 - d2).abs() / jet.d2.abs().max(1.0));
        }
    }
    assert!(worst1 < 1e-5, "first-order error {worst1}");
    assert!(worst2 < 1e-4, "second-order error {worst2}");
}

#[test]
fn laplacian_matches_five_point_stencil() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let net = KanNetwork::new(&[2, 2, 1], 5, 3, 4, (-1.0, 1.0), &mut rng).unwrap();
        let x = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        let (_, lap) = value_and_laplacian(&net, &x).unwrap();
        let fd = laplacian_fd(&net, x, 1e-3).unwrap();
        assert!((lap - fd).abs() < 1e-3 * lap.abs().max(1.0), "{lap} vs {fd}");
    }
}

#[test]
fn out_of_range_coordinate_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = KanNetwork::new(&[2, 1], 3, 2, 2, (-1.0, 1.0), &mut rng).unwrap();
    assert!(jet_forward(&net, &[0.0, 0.0], 2).is_err());
}
