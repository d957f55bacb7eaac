//! Iterative optimal bridge sampling for log marginal likelihoods.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_lower, log_add_exp, log_sum_exp, mean_cov, mix_seed, mvn_log_density, standard_normal_vec};
use crate::models::{Posterior, Target};
use crate::sampler::{sample_posterior, Context, SamplerSettings};

/// Gaussian proposal fitted to posterior draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(with = "crate::serde_util::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub chol: DMatrix<f64>,
    pub warp: bool,
}

impl Proposal {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        mvn_log_density(x, &self.mean, &self.chol)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.mean + &self.chol * standard_normal_vec(rng, self.dim())
    }

    /// Point reflection through the proposal mean.
    pub fn reflect(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mean * 2.0 - x
    }
}

/// Moment-matched Gaussian with `ridge` added to the covariance diagonal.
pub fn fit_proposal(draws: &[DVector<f64>], ridge: f64, warp: bool) -> Result<Proposal> {
    let d = draws.first().map_or(0, |x| x.len());
    if d == 0 || draws.len() < d + 2 {
        return Err(Error::NeedMoreDraws {
            needed: d + 2,
            got: draws.len(),
        });
    }
    let (mean, cov) = mean_cov(draws);
    let cov = crate::linalg::symmetrize(&cov) + DMatrix::identity(d, d) * ridge;
    Ok(Proposal {
        mean,
        chol: chol_lower(&cov, "proposal covariance")?,
        warp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeResult {
    pub log_ml: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Last absolute change in the log estimate.
    pub relative_change: f64,
    pub t1: usize,
    pub t2: usize,
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Bridge estimate of `log integral exp(log_q)`, from posterior draws that
/// were not used to fit `proposal`.
pub fn bridge_estimate<F>(
    log_q: F,
    proposal: &Proposal,
    posterior_draws: &[DVector<f64>],
    t2: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<BridgeResult>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if !(tol > 0.0) || posterior_draws.is_empty() || t2 == 0 {
        return Err(Error::Config("bridge needs tol > 0 and nonempty samples".into()));
    }
    if posterior_draws[0].len() != proposal.dim() {
        return Err(Error::BadModel(format!(
            "draw dimension {} does not match proposal dimension {}",
            posterior_draws[0].len(),
            proposal.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = |x: &DVector<f64>| -> f64 {
        let v = if proposal.warp {
            let r = proposal.reflect(x);
            log_add_exp(log_q(x), log_q(&r)) - std::f64::consts::LN_2
        } else {
            log_q(x)
        };
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };

    // log q - log g on the proposal draws, then on the posterior draws
    let l2: Vec<f64> = (0..t2)
        .map(|_| {
            let x = proposal.sample(&mut rng);
            target(&x) - proposal.log_density(&x)
        })
        .collect();
    if l2.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::EstimatorDegenerate("target is not finite at any proposal draw".into()));
    }
    let l1: Vec<f64> = posterior_draws
        .iter()
        .map(|x| {
            let x = if proposal.warp && rng.random::<bool>() {
                proposal.reflect(x)
            } else {
                x.clone()
            };
            target(&x) - proposal.log_density(&x)
        })
        .collect();

    let t1 = l1.len();
    let total = (t1 + t2) as f64;
    let (log_s1, log_s2) = ((t1 as f64 / total).ln(), (t2 as f64 / total).ln());
    let mut log_r = log_mean_exp(&l2);
    if !log_r.is_finite() {
        return Err(Error::EstimatorDegenerate("importance-sampling start".into()));
    }
    let mut num = vec![0.0; t2];
    let mut den = vec![0.0; t1];
    let mut update = |log_r: f64| -> f64 {
        for (o, &l) in num.iter_mut().zip(&l2) {
            *o = l - log_add_exp(log_s1 + l, log_s2 + log_r);
        }
        for (o, &l) in den.iter_mut().zip(&l1) {
            *o = -log_add_exp(log_s1 + l, log_s2 + log_r);
        }
        log_mean_exp(&num) - log_mean_exp(&den)
    };
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let next = update(log_r);
        if !next.is_finite() {
            return Err(Error::EstimatorDegenerate("bridge iteration left the finite range".into()));
        }
        change = (next - log_r).abs();
        log_r = next;
        if change < tol {
            break;
        }
    }
    if change >= tol {
        // update(x) - x is strictly decreasing; bracket its root and bisect
        let gap = |x: f64, update: &mut dyn FnMut(f64) -> f64| update(x) - x;
        let g0 = gap(log_r, &mut update);
        let mut step = g0.abs().max(1.0);
        let (mut lo, mut hi) = (log_r, log_r);
        for _ in 0..200 {
            if g0 > 0.0 {
                hi += step;
                if gap(hi, &mut update) <= 0.0 {
                    break;
                }
            } else {
                lo -= step;
                if gap(lo, &mut update) >= 0.0 {
                    break;
                }
            }
            step *= 2.0;
        }
        let (glo, ghi) = (gap(lo, &mut update), gap(hi, &mut update));
        if glo.is_finite() && ghi.is_finite() && glo >= 0.0 && ghi <= 0.0 {
            while hi - lo >= tol && iterations < max_iter + 200 {
                iterations += 1;
                let mid = 0.5 * (lo + hi);
                if gap(mid, &mut update) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            change = hi - lo;
            log_r = 0.5 * (lo + hi);
        }
    }
    Ok(BridgeResult {
        log_ml: log_r,
        iterations,
        converged: change < tol,
        relative_change: change,
        t1,
        t2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSettings {
    /// Proposal draws; `None` uses as many as there are second-half draws.
    pub t2: Option<usize>,
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
    pub warp: bool,
    /// Space the estimate runs on. `Collapsed` integrates `Theta` out.
    pub target: Target,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        Self {
            t2: None,
            tol: 1e-10,
            max_iter: 1000,
            ridge: 1e-8,
            warp: false,
            target: Target::Collapsed,
        }
    }
}

/// Split draws in half, fit the proposal on the first and bridge with the second.
pub fn bridge_from_draws(
    post: &Posterior,
    draws: &crate::sampler::PosteriorDraws,
    settings: &BridgeSettings,
    seed: u64,
) -> Result<BridgeResult> {
    let (first, second) = draws.split_halves(settings.target);
    let proposal = fit_proposal(&first, settings.ridge, settings.warp)?;
    let t2 = settings.t2.unwrap_or(second.len());
    bridge_estimate(
        |z| post.log_density(settings.target, z.as_slice()),
        &proposal,
        &second,
        t2,
        settings.tol,
        settings.max_iter,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedBridge {
    /// Mean of the log estimates over usable runs.
    pub log_ml: f64,
    /// Standard deviation of the log estimates over usable runs.
    pub mce: f64,
    pub runs: Vec<BridgeResult>,
    /// Runs excluded because the estimator degenerated or did not converge.
    pub failed: usize,
}

/// Independent sampler and bridge pipelines with seeds derived from `seed`.
pub fn repeated_bridge(
    post: &Posterior,
    runs: usize,
    sampler: &SamplerSettings,
    settings: &BridgeSettings,
    seed: u64,
) -> Result<RepeatedBridge> {
    if runs < 2 {
        return Err(Error::Config("repeated bridge needs at least 2 runs".into()));
    }
    let outcomes: Vec<Result<BridgeResult>> = (0..runs)
        .into_par_iter()
        .map(|k| {
            let run_seed = mix_seed(seed, k as u64);
            let s = SamplerSettings {
                seed: run_seed,
                ..sampler.clone()
            };
            let draws = sample_posterior(post, &s, Context::Single)?;
            bridge_from_draws(post, &draws, settings, mix_seed(run_seed, u64::MAX))
        })
        .collect();
    let mut good = Vec::with_capacity(runs);
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(r) if r.converged => good.push(r),
            Ok(r) => {
                log::warn!("bridge run did not converge (last change {:.3e})", r.relative_change);
                failed += 1;
            }
            Err(Error::EstimatorDegenerate(msg)) => {
                log::warn!("bridge run degenerate: {msg}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if good.len() < 2 {
        return Err(Error::EstimatorDegenerate(format!(
            "{failed} of {runs} bridge runs failed"
        )));
    }
    let vals: Vec<f64> = good.iter().map(|r| r.log_ml).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(RepeatedBridge {
        log_ml: mean,
        mce: sd,
        runs: good,
        failed,
    })
}
