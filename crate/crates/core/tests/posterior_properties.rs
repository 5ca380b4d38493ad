use hrkan::autodiff::Tensor;
use hrkan::bayes::{FlowStack, PlanarStep, WeightPosterior};
use hrkan::special::softplus;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0..2.0f64, n)
}

proptest! {
    #[test]
    fn flow_inverse_recovers_input(u in vec_strategy(3), w in vec_strategy(3), b in -1.0..1.0f64, z in vec_strategy(3)) {
        prop_assume!(w.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let step = PlanarStep {
            u: Tensor::new(u, vec![3]).unwrap(),
            w: Tensor::new(w, vec![3]).unwrap(),
            b: Tensor::scalar(b),
        };
        let (y, logdet) = step.forward(&z);
        prop_assert!(logdet.is_finite());
        let back = step.inverse(&y);
        for (a, c) in back.iter().zip(&z) {
            prop_assert!((a - c).abs() < 1e-10, "{a} vs {c}");
        }
    }

    #[test]
    fn stacked_inverse_recovers_input(seed in any::<u64>(), z in vec_strategy(2)) {
        let flow = FlowStack::near_identity(2, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let (y, _) = flow.forward(&z);
        for (a, c) in flow.inverse(&y).iter().zip(&z) {
            prop_assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn reparameterization_derivatives(mu in -2.0..2.0f64, rho in -3.0..2.0f64, eps in -3.0..3.0f64) {
        let sample = |m: f64, r: f64| m + softplus(r) * eps;
        let h = 1e-6;
        let d_mu = (sample(mu + h, rho) - sample(mu - h, rho)) / (2.0 * h);
        let d_rho = (sample(mu, rho + h) - sample(mu, rho - h)) / (2.0 * h);
        let sig = 1.0 / (1.0 + (-rho).exp());
        prop_assert!((d_mu - 1.0).abs() < 1e-6);
        prop_assert!((d_rho - eps * sig).abs() < 1e-6);
    }

    #[test]
    fn frozen_noise_is_repeatable(seed in any::<u64>(), eps_z in -2.0..2.0f64, eps_w in vec_strategy(4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let post = WeightPosterior::new(Tensor::new(vec![0.1, -0.3, 0.5, 0.2], vec![1, 4]).unwrap(), 2, &mut rng);
        let a = post.sample_with(&[eps_z], &eps_w);
        let b = post.sample_with(&[eps_z], &eps_w);
        prop_assert_eq!(a.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(post.kl_estimate(&a).to_bits(), post.kl_estimate(&b).to_bits());
    }

    #[test]
    fn flow_logdet_matches_jacobian(u in -1.5..1.5f64, w in 0.2..2.0f64, b in -1.0..1.0f64, z in -2.0..2.0f64) {
        let step = PlanarStep {
            u: Tensor::new(vec![u], vec![1]).unwrap(),
            w: Tensor::new(vec![w], vec![1]).unwrap(),
            b: Tensor::scalar(b),
        };
        let h = 1e-6;
        let d = (step.forward(&[z + h]).0[0] - step.forward(&[z - h]).0[0]) / (2.0 * h);
        prop_assert!((step.forward(&[z]).1 - d.abs().ln()).abs() < 1e-6);
    }
}

#[test]
fn identity_flow_with_frozen_mean_gives_mean_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut post = WeightPosterior::new(Tensor::new(vec![0.4, -0.9], vec![1, 2]).unwrap(), 2, &mut rng);
    post.flow = FlowStack::zeros(1, 2);
    let draw = post.sample_with(&[0.0], &[0.0, 0.0]);
    assert_eq!(draw.weights, vec![0.4, -0.9]);
    post.z_base.mu = Tensor::new(vec![2.0], vec![1]).unwrap();
    assert_eq!(post.sample_with(&[0.0], &[0.0, 0.0]).weights, vec![0.8, -1.8]);
}
