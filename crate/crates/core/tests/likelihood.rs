use hrkan::likelihood::{gaussian_nll, student_t_nll};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[test]
fn student_t_approaches_gaussian_for_large_nu() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let u = [rng.random_range(-2.0..2.0)];
        let u_hat = [rng.random_range(-2.0..2.0)];
        // Standardized residuals stay below ~7; the gap grows like z⁴/(4ν).
        let r: f64 = rng.random_range(-1.0..2.0);
        let g = gaussian_nll(&u, &u_hat, &[r]).unwrap();
        let t = student_t_nll(&u, &u_hat, &[r.exp()], 1e6).unwrap();
        assert!((t - g - HALF_LN_2PI).abs() < 1e-3, "{t} {g}");
    }
}

#[test]
fn gaussian_nll_reference_value() {
    let v = gaussian_nll(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 2f64.ln()]).unwrap();
    assert!((v - 0.5 * (0.5 * 1.0 + 0.5 * 2f64.ln())).abs() < 1e-15);
}

#[test]
fn mismatched_lengths_fail() {
    assert!(gaussian_nll(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    assert!(student_t_nll(&[1.0], &[1.0], &[1.0, 1.0], 3.0).is_err());
}

proptest! {
    #[test]
    fn gaussian_nll_minimized_at_squared_residual(res in -3.0..3.0f64, shift in -2.0..2.0f64) {
        let best = (res * res).max(1e-6).ln();
        let a = gaussian_nll(&[res], &[0.0], &[best]).unwrap();
        let b = gaussian_nll(&[res], &[0.0], &[best + shift]).unwrap();
        prop_assert!(a <= b + 1e-12);
    }

    #[test]
    fn student_t_heavier_tails_cost_less_far_out(nu in 2.5..10.0f64) {
        let far = student_t_nll(&[8.0], &[0.0], &[1.0], nu).unwrap();
        let gauss = gaussian_nll(&[8.0], &[0.0], &[0.0]).unwrap() + HALF_LN_2PI;
        prop_assert!(far < gauss);
    }
}
