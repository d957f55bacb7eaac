//! Same-writer and different-writer error rates for the conjugate models on
//! the default synthetic population.
//!
//! cargo run --release -p handbf-core --example quick_study -- 5

use handbf_core::experiments::{mahalanobis_matrix, run_different_writer_study, run_same_writer_study};
use handbf_core::synth::generate_population;
use handbf_core::{ModelId, PopulationConfig, StudyConfig};

fn main() -> handbf_core::Result<()> {
    let reps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (data, _) = generate_population(&PopulationConfig::default())?;
    println!("closest writer pairs: {:?}", mahalanobis_matrix(&data)?.closest_pairs(4));
    let cfg = StudyConfig {
        models: vec![ModelId::M1, ModelId::M4],
        repetitions: reps,
        ..StudyConfig::default()
    };
    print!("{}", run_same_writer_study(&data, &cfg)?.table());
    print!("{}", run_different_writer_study(&data, &cfg)?.table());
    Ok(())
}
