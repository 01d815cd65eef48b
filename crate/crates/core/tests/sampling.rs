mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rbx_core::graph::ClusterId;

use common::{graph_with_visits, inverse_visit_chi_square};

#[test]
fn visits_zero_and_four_sample_five_to_one() {
    let graph = graph_with_visits(&[0, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = graph.sample_clusters(60_000, &mut rng);
    let fresh = draws.iter().filter(|&&id| id == ClusterId(0)).count() as f64;
    let ratio = fresh / (draws.len() as f64 - fresh);
    assert!((ratio - 5.0).abs() < 0.25, "ratio {ratio}");
}

#[test]
fn inverse_visit_sampling_fits_its_distribution() {
    for seed in 0..5 {
        let (stat, p) = inverse_visit_chi_square(&[0, 1, 3, 9, 24], 100_000, seed);
        assert!(p > 0.001, "seed {seed}: chi2 {stat} p {p}");
    }
}

#[test]
fn a_wrong_distribution_is_rejected() {
    // Uniform draws should fail a fit against strongly unequal weights.
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let visits = [0u64, 1, 3, 9, 24];
    let graph = graph_with_visits(&[0; 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0u64; 5];
    for id in graph.sample_clusters(100_000, &mut rng) {
        counts[id.0 as usize] += 1;
    }
    let weights: Vec<f64> = visits.iter().map(|&v| 1.0 / (1.0 + v as f64)).collect();
    let total: f64 = weights.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(&c, w)| (c as f64 - 1e5 * w / total).powi(2) / (1e5 * w / total))
        .sum();
    let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(stat);
    assert!(p < 1e-6);
}
