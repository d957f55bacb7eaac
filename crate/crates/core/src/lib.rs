//! Bayesian handwriting evidence: Fourier contour shape features, conjugate and
//! non-conjugate Normal/MANOVA models, and marginal likelihoods via bridge sampling.

pub mod bridge;
pub mod contour;
pub mod dataset;
pub mod elicit;
pub mod error;
pub mod evidence;
pub mod experiments;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod sampler;
pub mod serde_util;
pub mod synth;

pub use bridge::{BridgeResult, BridgeSettings, RepeatedBridge};
pub use contour::{AmplitudePhase, ContourCoefficients, PolarContour};
pub use dataset::{Character, Dataset, FeatureVector, Record, L, P};
pub use elicit::ElicitOptions;
pub use error::{Error, ErrorKind, Result};
pub use evidence::{ComparisonResult, EvidenceBand, EvidenceResult, EvidenceSettings, Marginal};
pub use experiments::{StudyConfig, StudyReport};
pub use models::{ModelId, PriorHyper, SuffStats};
pub use sampler::{PosteriorDraws, SamplerSettings};
pub use synth::{PopulationConfig, PopulationTruth};
