//! Shared fixtures for the benchmarks.

use handbf_core::dataset::{background_excluding, split_writer, standardize};
use handbf_core::synth::{generate_population, PopulationConfig};
use handbf_core::Dataset;

/// Standardized questioned, control and background sets for writer 1 of the
/// default population.
pub fn default_case() -> (Dataset, Dataset, Dataset) {
    let (data, _) = generate_population(&PopulationConfig::default()).expect("default population");
    let (q, c) = split_writer(&data, 1, 0.5, 11).expect("writer 1 splits");
    let bg = background_excluding(&data, &[1]);
    let scale = |d: &Dataset| standardize(d, &bg).expect("background has spread");
    (scale(&q), scale(&c), scale(&bg))
}
