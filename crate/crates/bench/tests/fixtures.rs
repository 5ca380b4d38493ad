use hrkan::model::Mode;
use hrkan::train::{seeded_stream, Batch};
use hrkan_bench::{poisson_batch, poisson_model, random_points};

#[test]
fn fixtures_have_expected_shapes() {
    assert_eq!(poisson_model(Mode::Bayesian).input_dim(), 2);
    let Batch::Pde { interior, boundary, .. } = poisson_batch(8) else { panic!("pde batch") };
    assert_eq!(interior.shape(), &[36, 2]);
    assert_eq!(boundary.shape(), &[28, 2]);
    let pts = random_points(5, &mut seeded_stream(0, 0));
    assert_eq!(pts.len(), 10);
    assert!(pts.iter().all(|p| (-1.0..1.0).contains(p)));
}
