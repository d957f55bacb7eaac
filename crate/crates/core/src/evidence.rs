//! Forensic and model-comparison Bayes factors.

use serde::{Deserialize, Serialize};

use crate::bridge::{repeated_bridge, bridge_from_draws, BridgeSettings};
use crate::dataset::{standardize, Dataset};
use crate::elicit::{elicit_priors, ElicitOptions};
use crate::error::{Error, Result};
use crate::linalg::mix_seed;
use crate::models::{closed_form_log_marginal, ModelId, Posterior, PriorHyper, SuffStats};
use crate::sampler::{sample_posterior, Context, SamplerSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSettings {
    pub sampler: SamplerSettings,
    pub bridge: BridgeSettings,
    /// Independent sampler and bridge runs per marginal likelihood. With a
    /// single run no Monte Carlo error is reported.
    pub runs: usize,
    pub elicit: ElicitOptions,
    pub seed: u64,
}

impl Default for EvidenceSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerSettings::default(),
            bridge: BridgeSettings::default(),
            runs: 10,
            elicit: ElicitOptions::default(),
            seed: 0,
        }
    }
}

impl EvidenceSettings {
    /// FNV-1a hash of the JSON form, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("settings serialize");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub log_m: f64,
    /// Zero for closed forms, `None` when only one run was made.
    pub mce: Option<f64>,
    /// Runs dropped because the estimator degenerated.
    pub failed_runs: usize,
}

/// Log marginal likelihood from sufficient statistics.
pub fn log_marginal_stats(hyper: &PriorHyper, stats: SuffStats, settings: &EvidenceSettings, seed: u64) -> Result<Marginal> {
    if stats.n == 0 {
        return Err(Error::BadValue("marginal likelihood of an empty data set".into()));
    }
    if hyper.model.has_closed_form() {
        return Ok(Marginal {
            log_m: closed_form_log_marginal(&stats, hyper)?,
            mce: Some(0.0),
            failed_runs: 0,
        });
    }
    let post = Posterior::new(hyper, stats)?;
    if settings.runs >= 2 {
        let rb = repeated_bridge(&post, settings.runs, &settings.sampler, &settings.bridge, seed)?;
        return Ok(Marginal {
            log_m: rb.log_ml,
            mce: Some(rb.mce),
            failed_runs: rb.failed,
        });
    }
    let s = SamplerSettings {
        seed: mix_seed(seed, 0),
        ..settings.sampler.clone()
    };
    let draws = sample_posterior(&post, &s, Context::Single)?;
    let r = bridge_from_draws(&post, &draws, &settings.bridge, mix_seed(s.seed, u64::MAX))?;
    if !r.converged {
        return Err(Error::EstimatorDegenerate(format!(
            "bridge did not converge (last change {:.3e})",
            r.relative_change
        )));
    }
    Ok(Marginal {
        log_m: r.log_ml,
        mce: None,
        failed_runs: 0,
    })
}

/// `log m(data | model)` under `hyper`: exact for conjugate models, bridge
/// sampling otherwise.
pub fn log_marginal(hyper: &PriorHyper, data: &Dataset, settings: &EvidenceSettings) -> Result<Marginal> {
    let stats = SuffStats::from_dataset(data, hyper.model.design());
    log_marginal_stats(hyper, stats, settings, settings.seed)
}

/// Kass-Raftery style strength of a log Bayes factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvidenceBand {
    BareMention,
    Substantial,
    Strong,
    VeryStrong,
    Extreme,
}

impl EvidenceBand {
    pub fn classify(log_bf: f64) -> Self {
        match log_bf.abs() {
            x if x < 1.1 => Self::BareMention,
            x if x < 2.3 => Self::Substantial,
            x if x < 3.4 => Self::Strong,
            x if x < 4.6 => Self::VeryStrong,
            _ => Self::Extreme,
        }
    }
}

impl std::fmt::Display for EvidenceBand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BareMention => "bare mention",
            Self::Substantial => "substantial",
            Self::Strong => "strong",
            Self::VeryStrong => "very strong",
            Self::Extreme => "extreme",
        })
    }
}

fn combine(mces: &[Option<f64>]) -> Option<f64> {
    mces.iter()
        .try_fold(0.0, |acc, m| m.map(|v| acc + v * v))
        .map(f64::sqrt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceResult {
    pub model: ModelId,
    /// Questioned and control pooled, shared parameters.
    pub log_m_h1: f64,
    pub mce_h1: Option<f64>,
    pub log_m_y1_h2: f64,
    pub mce_y1_h2: Option<f64>,
    pub log_m_y2_h2: f64,
    pub mce_y2_h2: Option<f64>,
    pub log_bf: f64,
    pub combined_mce: Option<f64>,
    pub band: EvidenceBand,
    pub failed_runs: usize,
    pub settings_fingerprint: String,
}

impl EvidenceResult {
    pub fn new(model: ModelId, h1: Marginal, y1: Marginal, y2: Marginal, fingerprint: String) -> Self {
        let log_bf = h1.log_m - y1.log_m - y2.log_m;
        Self {
            model,
            log_m_h1: h1.log_m,
            mce_h1: h1.mce,
            log_m_y1_h2: y1.log_m,
            mce_y1_h2: y1.mce,
            log_m_y2_h2: y2.log_m,
            mce_y2_h2: y2.mce,
            log_bf,
            combined_mce: combine(&[h1.mce, y1.mce, y2.mce]),
            band: EvidenceBand::classify(log_bf),
            failed_runs: h1.failed_runs + y1.failed_runs + y2.failed_runs,
            settings_fingerprint: fingerprint,
        }
    }

    /// `log_bf` equals the difference of its components exactly.
    pub fn is_consistent(&self) -> bool {
        self.log_bf == self.log_m_h1 - self.log_m_y1_h2 - self.log_m_y2_h2
    }

    /// Positive log Bayes factors support a common source.
    pub fn supports_same_source(&self) -> bool {
        self.log_bf > 0.0
    }
}

/// Bayes factor with given hyperparameters; `y1` and `y2` must already be on
/// the scale the hyperparameters were elicited on.
pub fn bayes_factor_with_hyper(
    hyper: &PriorHyper,
    y1: &Dataset,
    y2: &Dataset,
    settings: &EvidenceSettings,
) -> Result<EvidenceResult> {
    if y1.is_empty() || y2.is_empty() {
        return Err(Error::BadValue("questioned and control data must be nonempty".into()));
    }
    let design = hyper.model.design();
    let s1 = SuffStats::from_dataset(y1, design);
    let s2 = SuffStats::from_dataset(y2, design);
    let pooled = s1.merge(&s2);
    let seed = settings.seed;
    let (h1, (m1, m2)) = rayon::join(
        || log_marginal_stats(hyper, pooled, settings, mix_seed(seed, 1)),
        || {
            rayon::join(
                || log_marginal_stats(hyper, s1, settings, mix_seed(seed, 2)),
                || log_marginal_stats(hyper, s2, settings, mix_seed(seed, 3)),
            )
        },
    );
    Ok(EvidenceResult::new(hyper.model, h1?, m1?, m2?, settings.fingerprint()))
}

fn check_leakage(background: &Dataset, case: &[&Dataset]) -> Result<()> {
    let bg = background.writers();
    for d in case {
        if let Some(w) = d.writers().into_iter().find(|w| bg.binary_search(w).is_ok()) {
            return Err(Error::LeakageError(w));
        }
    }
    Ok(())
}

/// Standardizes `data` by the background feature SDs.
fn on_background_scale(background: &Dataset, data: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>)> {
    let bg = standardize(background, background)?;
    let rest = data
        .iter()
        .map(|d| standardize(d, background))
        .collect::<Result<Vec<_>>>()?;
    Ok((bg, rest))
}

/// Forensic Bayes factor of `y1` (questioned) and `y2` (control) coming from
/// one writer, with priors elicited from `background`.
pub fn bayes_factor(
    model: ModelId,
    y1: &Dataset,
    y2: &Dataset,
    background: &Dataset,
    settings: &EvidenceSettings,
) -> Result<EvidenceResult> {
    check_leakage(background, &[y1, y2])?;
    let (bg, scaled) = on_background_scale(background, &[y1, y2])?;
    let hyper = elicit_priors(model, &bg, &settings.elicit)?;
    bayes_factor_with_hyper(&hyper, &scaled[0], &scaled[1], settings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub model_l: ModelId,
    pub model_xi: ModelId,
    pub log_m_l: Marginal,
    pub log_m_xi: Marginal,
    pub log_bf: f64,
    pub combined_mce: Option<f64>,
}

/// `log m(D_i | model_l) - log m(D_i | model_xi)`, priors elicited from the
/// other writers.
pub fn model_comparison_bf(
    data_i: &Dataset,
    background: &Dataset,
    model_l: ModelId,
    model_xi: ModelId,
    settings: &EvidenceSettings,
) -> Result<ComparisonResult> {
    check_leakage(background, &[data_i])?;
    let (bg, scaled) = on_background_scale(background, &[data_i])?;
    let fit = |m: ModelId| -> Result<Marginal> {
        let h = elicit_priors(m, &bg, &settings.elicit)?;
        let stats = SuffStats::from_dataset(&scaled[0], m.design());
        // same seed per model keeps self-comparisons exactly zero
        log_marginal_stats(&h, stats, settings, mix_seed(settings.seed, m as u64))
    };
    let (a, b) = rayon::join(|| fit(model_l), || fit(model_xi));
    let (a, b) = (a?, b?);
    Ok(ComparisonResult {
        model_l,
        model_xi,
        log_m_l: a,
        log_m_xi: b,
        log_bf: a.log_m - b.log_m,
        combined_mce: combine(&[a.mce, b.mce]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{background_excluding, split_writer};
    use crate::linalg::{log_sum_exp, standard_normal_vec};
    use crate::models::cov_dim;
    use crate::synth::{generate_population, PopulationConfig, Reps};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn population(seed: u64) -> Dataset {
        let cfg = PopulationConfig {
            writers: 8,
            reps: Reps::Fixed(12),
            related: vec![],
            seed,
            ..PopulationConfig::default()
        };
        generate_population(&cfg).unwrap().0
    }

    fn light() -> EvidenceSettings {
        EvidenceSettings {
            sampler: SamplerSettings {
                iterations: 600,
                burn_in: 300,
                ..SamplerSettings::default()
            },
            runs: 3,
            ..EvidenceSettings::default()
        }
    }

    #[test]
    fn closed_form_marginal_has_zero_error_and_is_repeatable() {
        let data = population(1);
        let bg = standardize(&background_excluding(&data, &[1]), &background_excluding(&data, &[1])).unwrap();
        let h = elicit_priors(ModelId::M1, &bg, &ElicitOptions { k0: Some(0.3), ..Default::default() }).unwrap();
        let y = standardize(&data.writer(1), &background_excluding(&data, &[1])).unwrap();
        let a = log_marginal(&h, &y, &light()).unwrap();
        assert_eq!(a.mce, Some(0.0));
        assert_eq!(a, log_marginal(&h, &y, &light()).unwrap());
    }

    #[test]
    fn same_and_different_writer_signs() {
        let data = population(2);
        let settings = EvidenceSettings {
            elicit: ElicitOptions { k0: Some(0.3), ..Default::default() },
            ..light()
        };
        let (q, c) = split_writer(&data, 1, 0.5, 3).unwrap();
        let bg = background_excluding(&data, &[1]);
        let same = bayes_factor(ModelId::M1, &q, &c, &bg, &settings).unwrap();
        assert!(same.is_consistent());
        assert!(same.log_bf > 0.0, "same writer {}", same.log_bf);

        let (q, _) = split_writer(&data, 1, 0.5, 4).unwrap();
        let (_, c) = split_writer(&data, 2, 0.5, 4).unwrap();
        let bg = background_excluding(&data, &[1, 2]);
        let diff = bayes_factor(ModelId::M1, &q, &c, &bg, &settings).unwrap();
        assert!(diff.is_consistent());
        assert!(diff.log_bf < 0.0, "different writers {}", diff.log_bf);
    }

    #[test]
    fn leakage_is_rejected() {
        let data = population(3);
        let (q, c) = split_writer(&data, 1, 0.5, 1).unwrap();
        let bg = background_excluding(&data, &[2]);
        assert!(matches!(
            bayes_factor(ModelId::M1, &q, &c, &bg, &light()),
            Err(Error::LeakageError(1))
        ));
    }

    #[test]
    fn swapping_questioned_and_control_keeps_the_bf() {
        let data = population(4);
        let (q, c) = split_writer(&data, 3, 0.4, 2).unwrap();
        let bg = background_excluding(&data, &[3]);
        let s = light();
        let a = bayes_factor(ModelId::M2, &q, &c, &bg, &s).unwrap();
        let b = bayes_factor(ModelId::M2, &c, &q, &bg, &s).unwrap();
        let tol = 3.0 * a.combined_mce.unwrap().hypot(b.combined_mce.unwrap()) + 1e-9;
        assert!((a.log_bf - b.log_bf).abs() <= tol, "{} vs {}", a.log_bf, b.log_bf);
    }

    #[test]
    fn model_comparison_identities() {
        let data = population(5);
        let bg = background_excluding(&data, &[1]);
        let s = light();
        let y = data.writer(1);
        let self_bf = model_comparison_bf(&y, &bg, ModelId::M2, ModelId::M2, &s).unwrap();
        assert_eq!(self_bf.log_bf, 0.0);
        let ab = model_comparison_bf(&y, &bg, ModelId::M4, ModelId::M1, &s).unwrap();
        let ba = model_comparison_bf(&y, &bg, ModelId::M1, ModelId::M4, &s).unwrap();
        assert_eq!(ab.log_bf, -ba.log_bf);
    }

    #[test]
    fn bands() {
        assert_eq!(EvidenceBand::classify(0.5), EvidenceBand::BareMention);
        assert_eq!(EvidenceBand::classify(-2.0), EvidenceBand::Substantial);
        assert_eq!(EvidenceBand::classify(3.0), EvidenceBand::Strong);
        assert_eq!(EvidenceBand::classify(4.0), EvidenceBand::VeryStrong);
        assert_eq!(EvidenceBand::classify(-40.0), EvidenceBand::Extreme);
    }

    /// Prior Monte Carlo of `log m`: average the likelihood with `Theta`
    /// integrated out over covariance draws from the prior.
    fn prior_mc(post: &Posterior, draws: usize, seed: u64, prior_cov: impl Fn(&mut ChaCha8Rng) -> Vec<f64>) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..draws)
            .map(|_| {
                let zc = prior_cov(&mut rng);
                let cp = post.cov_point(&zc).unwrap();
                post.collapsed_log_likelihood(&cp)
            })
            .collect();
        let lm = log_sum_exp(&vals) - (draws as f64).ln();
        let w: Vec<f64> = vals.iter().map(|v| (v - lm).exp()).collect();
        let mean = w.iter().sum::<f64>() / draws as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
        // delta-method SE on the log scale
        (lm, (var / draws as f64).sqrt() / mean)
    }

    fn tiny(model: ModelId) -> (PriorHyper, SuffStats) {
        let p = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ys: Vec<DVector<f64>> = (0..5).map(|_| standard_normal_vec(&mut rng, p)).collect();
        let stats = SuffStats::from_rows(&ys, &vec![DVector::from_element(1, 1.0); 5]);
        let mut h = PriorHyper {
            model,
            mu: vec![DVector::zeros(p)],
            between: vec![DMatrix::identity(p, p)],
            u: None,
            nu: None,
            k0: None,
            k0_diag: None,
            upsilon: None,
            sigma: None,
            eta: None,
        };
        if model == ModelId::M2 {
            h.u = Some(DMatrix::identity(p, p) * 2.0);
            h.nu = Some(5.0);
        } else {
            h.upsilon = Some(0.0);
            h.sigma = Some(0.5);
            h.eta = Some(2.0);
        }
        (h, stats)
    }

    #[test]
    fn bridge_matches_prior_monte_carlo_on_tiny_instances() {
        let s = EvidenceSettings {
            sampler: SamplerSettings {
                iterations: 4000,
                ..SamplerSettings::default()
            },
            runs: 5,
            ..EvidenceSettings::default()
        };
        // M2: W ~ IW(2 I, 5)
        let (h, stats) = tiny(ModelId::M2);
        let post = Posterior::new(&h, stats.clone()).unwrap();
        let inv_l = crate::linalg::chol_lower(&(DMatrix::identity(2, 2) * 0.5), "u").unwrap();
        let (mc, se) = prior_mc(&post, 200_000, 1, |rng| {
            let (_, lw) = crate::linalg::inverse_wishart_sample(rng, &inv_l, 5.0).unwrap();
            crate::models::lower_to_log_cholesky(&lw)
        });
        let est = log_marginal_stats(&h, stats, &s, 2).unwrap();
        let tol = 3.0 * se.hypot(est.mce.unwrap());
        assert!((est.log_m - mc).abs() <= tol, "M2 {} vs {mc} (tol {tol})", est.log_m);

        // M3: log D ~ N(0, 0.25), r ~ LKJ(2) which at p = 2 is Beta(2, 2) on (r + 1) / 2
        let (h, stats) = tiny(ModelId::M3);
        let post = Posterior::new(&h, stats.clone()).unwrap();
        let beta = rand_distr::Beta::new(2.0, 2.0).unwrap();
        let (mc, se) = prior_mc(&post, 200_000, 3, |rng| {
            use rand_distr::Distribution;
            let mut z: Vec<f64> = (0..2)
                .map(|_| {
                    let e: f64 = rand_distr::StandardNormal.sample(rng);
                    0.25 * e
                })
                .collect();
            let r: f64 = 2.0 * beta.sample(rng) - 1.0;
            z.push(r.atanh());
            assert_eq!(z.len(), cov_dim(2));
            z
        });
        let est = log_marginal_stats(&h, stats, &s, 4).unwrap();
        let tol = 3.0 * se.hypot(est.mce.unwrap());
        assert!((est.log_m - mc).abs() <= tol, "M3 {} vs {mc} (tol {tol})", est.log_m);
    }
}
