//! Posterior samplers and chain diagnostics.
//!
//! * conjugate models: independent draws from the exact posterior;
//! * hierarchical models: two-block Gibbs on `(Theta, W)`;
//! * LKJ models: Metropolis on the covariance coordinates with `Theta`
//!   integrated out (an independence step around the Laplace approximation
//!   plus adaptive random-walk steps), followed by an exact `Theta` draw.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    chol_lower, inverse_wishart_sample, mix_seed, spd_inverse, standard_normal_vec, symmetrize,
};
use crate::models::{
    lower_to_log_cholesky, Covariance, PriorFamily, Posterior, Target,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    /// Retained sweeps per chain.
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub target_accept: f64,
    /// Random-walk steps per sweep for the LKJ models.
    pub mh_steps: usize,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            iterations: 2000,
            burn_in: 1000,
            chains: 1,
            target_accept: 0.234,
            mh_steps: 5,
            seed: 0,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 2 || self.chains == 0 || self.mh_steps == 0 {
            return Err(Error::Config(format!("invalid sampler settings {self:?}")));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Which data set a fit belongs to in a Bayes factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Context {
    Single,
    /// Questioned and control pooled with shared parameters.
    Shared,
    Questioned,
    Control,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    /// Draws on the unconstrained scale: `beta` then covariance coordinates.
    #[serde(with = "crate::serde_util::vector_vec")]
    pub draws: Vec<DVector<f64>>,
    pub log_post: Vec<f64>,
    pub log_jac: Vec<f64>,
    pub acceptance: Option<f64>,
    /// Acceptance of the independence step, LKJ models only.
    pub jump_rate: Option<f64>,
    /// Hash of the frozen random-walk proposal, taken at the end of burn-in
    /// and again after sampling.
    pub proposal_hash: Option<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub model: crate::models::ModelId,
    pub context: Context,
    pub seed: u64,
    pub burn_in: usize,
    pub theta_dim: usize,
    pub chains: Vec<Chain>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.chains[0].draws[0].len()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn project(&self, target: Target, z: &DVector<f64>) -> DVector<f64> {
        match target {
            Target::Full => z.clone(),
            Target::Collapsed => z.rows(self.theta_dim, z.len() - self.theta_dim).into_owned(),
        }
    }

    /// Draws restricted to the coordinates of `target`, chains concatenated.
    pub fn coordinates(&self, target: Target) -> Vec<DVector<f64>> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(|z| self.project(target, z)))
            .collect()
    }

    /// First and second half of every chain, concatenated across chains.
    pub fn split_halves(&self, target: Target) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for c in &self.chains {
            let h = c.draws.len() / 2;
            a.extend(c.draws[..h].iter().map(|z| self.project(target, z)));
            b.extend(c.draws[h..].iter().map(|z| self.project(target, z)));
        }
        (a, b)
    }

    /// One row per draw: chain index, unconstrained coordinates, log posterior
    /// and log Jacobian.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["chain".to_string()];
        header.extend((0..self.dim()).map(|k| format!("z{k}")));
        header.push("log_post".into());
        header.push("log_jac".into());
        w.write_record(&header)?;
        for (ci, c) in self.chains.iter().enumerate() {
            for (t, z) in c.draws.iter().enumerate() {
                let mut row = vec![ci.to_string()];
                row.extend(z.iter().map(|v| v.to_string()));
                row.push(c.log_post[t].to_string());
                row.push(c.log_jac[t].to_string());
                w.write_record(&row)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, chain as u64))
}

fn full_z(theta: &DMatrix<f64>, zc: &[f64]) -> DVector<f64> {
    let mut z: Vec<f64> = theta.transpose().iter().copied().collect();
    z.extend_from_slice(zc);
    DVector::from_vec(z)
}

fn cov_jacobian(post: &Posterior, zc: &[f64]) -> f64 {
    let p = post.p();
    let model = post.model;
    let mut z = vec![0.0; post.theta_dim()];
    z.extend_from_slice(zc);
    crate::models::from_unconstrained(model, &z, post.q(), p).1
}

fn record(post: &Posterior, chain: &mut Chain, theta: &DMatrix<f64>, zc: &[f64]) {
    let z = full_z(theta, zc);
    chain.log_post.push(post.log_density(Target::Full, z.as_slice()));
    chain.log_jac.push(cov_jacobian(post, zc));
    chain.draws.push(z);
}

/// Covariance coordinates of `W` for the posterior's parameterization.
fn cov_coordinates(post: &Posterior, w: &DMatrix<f64>) -> Result<Vec<f64>> {
    if post.is_inverse_wishart() {
        Ok(lower_to_log_cholesky(&chol_lower(w, "W")?))
    } else {
        let p = post.p();
        let sd = DVector::from_fn(p, |i, _| w[(i, i)].sqrt());
        let corr = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                1.0
            } else {
                w[(i, j)] / (sd[i] * sd[j])
            }
        });
        let params = crate::models::ModelParams {
            theta: DMatrix::zeros(post.q(), p),
            cov: Covariance::Decomposed { sd, corr },
        };
        let u = crate::models::to_unconstrained(post.model, &params)?;
        Ok(u.z.as_slice()[post.theta_dim()..].to_vec())
    }
}

/// Data-informed starting covariance: least-squares residual scatter shrunk
/// towards the prior scale.
fn initial_w(post: &Posterior) -> Result<DMatrix<f64>> {
    let (p, q) = (post.p(), post.q());
    let prior = {
        let zc = post.initial_cov_z();
        let cp = post
            .cov_point(&zc)
            .ok_or_else(|| Error::BadCovariance("prior scale".into()))?;
        &cp.lw * cp.lw.transpose()
    };
    let s = &post.stats;
    if s.n == 0 {
        return Ok(prior);
    }
    let ctc = &s.ctc + DMatrix::identity(q, q) * 1e-6;
    let theta_hat = spd_inverse(&ctc, "C^T C")? * &s.cty;
    let resid = s.residual_scatter(&theta_hat);
    let weight = (p + 2) as f64;
    let w = (resid + &prior * weight) / (s.n as f64 + weight);
    Ok(symmetrize(&w))
}

/// Independent draws from the exact conjugate posterior (M1, M4).
pub fn exact_conjugate(post: &Posterior, settings: &SamplerSettings, context: Context) -> Result<PosteriorDraws> {
    settings.validate()?;
    if post.model.family() != PriorFamily::Conjugate {
        return Err(Error::BadModel(format!("{} is not conjugate", post.model)));
    }
    let c = post.conjugate().expect("conjugate family");
    let (u_n, nu_n) = (&c.lu_n * c.lu_n.transpose(), c.nu_n);
    let inv_l = chol_lower(&spd_inverse(&u_n, "U_n")?, "U_n inverse")?;
    let chains = (0..settings.chains)
        .into_par_iter()
        .map(|ci| {
            let mut rng = chain_rng(settings.seed, ci);
            let mut chain = empty_chain(settings.iterations);
            for _ in 0..settings.iterations {
                let (_, lw) = inverse_wishart_sample(&mut rng, &inv_l, nu_n)?;
                let zc = lower_to_log_cholesky(&lw);
                let cp = post.cov_point(&zc).ok_or_else(|| Error::BadCovariance("draw".into()))?;
                let theta = post.sample_theta(&mut rng, &cp)?;
                record(post, &mut chain, &theta, &zc);
            }
            Ok(chain)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        model: post.model,
        context,
        seed: settings.seed,
        burn_in: 0,
        theta_dim: post.theta_dim(),
        chains,
    })
}

fn empty_chain(cap: usize) -> Chain {
    Chain {
        draws: Vec::with_capacity(cap),
        log_post: Vec::with_capacity(cap),
        log_jac: Vec::with_capacity(cap),
        acceptance: None,
        jump_rate: None,
        proposal_hash: None,
    }
}

/// Two-block Gibbs sampler for models with an Inverse-Wishart prior on `W`.
/// With `fixed_w` the covariance block is held at that value.
pub fn gibbs_niw_with(
    post: &Posterior,
    settings: &SamplerSettings,
    context: Context,
    fixed_w: Option<&DMatrix<f64>>,
) -> Result<PosteriorDraws> {
    settings.validate()?;
    if !post.is_inverse_wishart() {
        return Err(Error::BadModel(format!("{} has no Inverse-Wishart block", post.model)));
    }
    let start_w = match fixed_w {
        Some(w) => w.clone(),
        None => initial_w(post)?,
    };
    let start = cov_coordinates(post, &start_w)?;
    let chains = (0..settings.chains)
        .into_par_iter()
        .map(|ci| {
            let mut rng = chain_rng(settings.seed, ci);
            let mut chain = empty_chain(settings.iterations);
            let mut zc = start.clone();
            let mut cp = post
                .cov_point(&zc)
                .ok_or_else(|| Error::BadCovariance("starting covariance".into()))?;
            for it in 0..settings.burn_in + settings.iterations {
                let theta = post.sample_theta(&mut rng, &cp)?;
                if fixed_w.is_none() {
                    let (scale, dof) = post.w_conditional(&theta).expect("Inverse-Wishart block");
                    let inv_l = chol_lower(&spd_inverse(&scale, "W scale")?, "W scale inverse")?;
                    let (_, lw) = inverse_wishart_sample(&mut rng, &inv_l, dof)?;
                    zc = lower_to_log_cholesky(&lw);
                    cp = post
                        .cov_point(&zc)
                        .ok_or_else(|| Error::BadCovariance("Gibbs covariance draw".into()))?;
                }
                if it >= settings.burn_in {
                    record(post, &mut chain, &theta, &zc);
                }
            }
            Ok(chain)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        model: post.model,
        context,
        seed: settings.seed,
        burn_in: settings.burn_in,
        theta_dim: post.theta_dim(),
        chains,
    })
}

pub fn gibbs_niw(post: &Posterior, settings: &SamplerSettings, context: Context) -> Result<PosteriorDraws> {
    gibbs_niw_with(post, settings, context, None)
}

/// Proposals built around a Gaussian approximation of the target: a scaled
/// random walk and a multivariate-t independence proposal.
struct Kernel {
    center: DVector<f64>,
    chol: DMatrix<f64>,
    log_scale: f64,
}

const INDEPENDENCE_DOF: f64 = 20.0;
/// Burn-in sweeps between re-centerings of the independence proposal.
const RECENTER_EVERY: usize = 50;

impl Kernel {
    fn new(post: &Posterior, start: &[f64]) -> Self {
        let f = |z: &[f64]| post.log_density(Target::Collapsed, z);
        let d = start.len();
        let approx = crate::optim::laplace(f, start)
            .and_then(|(m, cov)| chol_lower(&cov, "Laplace covariance").ok().map(|l| (m, l)));
        let (center, chol) = approx.unwrap_or_else(|| {
            log::warn!("{}: Laplace approximation failed, using a diagonal proposal", post.model);
            (DVector::from_column_slice(start), DMatrix::identity(d, d) * 0.05)
        });
        Self {
            center,
            chol,
            log_scale: (2.38 / (d as f64).sqrt()).ln(),
        }
    }

    fn t_log_kernel(&self, x: &DVector<f64>) -> f64 {
        let d = x.len() as f64;
        let u = self
            .chol
            .solve_lower_triangular(&(x - &self.center))
            .expect("positive diagonal");
        -0.5 * (INDEPENDENCE_DOF + d) * (1.0 + u.norm_squared() / INDEPENDENCE_DOF).ln()
    }

    fn t_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let chi = rand_distr::ChiSquared::new(INDEPENDENCE_DOF).expect("positive dof");
        let w: f64 = rand_distr::Distribution::sample(&chi, rng);
        let z = standard_normal_vec(rng, self.center.len());
        &self.center + &self.chol * z / (w / INDEPENDENCE_DOF).sqrt()
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.chol.iter().chain(self.center.iter()) {
            v.to_bits().hash(&mut h);
        }
        self.log_scale.to_bits().hash(&mut h);
        h.finish()
    }
}

/// Collapsed Metropolis-within-Gibbs sampler for the LogNormal-LKJ models.
pub fn mwg_lkj(post: &Posterior, settings: &SamplerSettings, context: Context) -> Result<PosteriorDraws> {
    settings.validate()?;
    if post.model.family() != PriorFamily::Lkj {
        return Err(Error::BadModel(format!("{} has no LKJ block", post.model)));
    }
    let start = cov_coordinates(post, &initial_w(post)?)?;
    let d = start.len();
    let base = Kernel::new(post, &start);
    let target = |z: &DVector<f64>| post.log_density(Target::Collapsed, z.as_slice());
    let chains = (0..settings.chains)
        .into_par_iter()
        .map(|ci| {
            let mut rng = chain_rng(settings.seed, ci);
            let mut chain = empty_chain(settings.iterations);
            let mut kernel = Kernel { center: base.center.clone(), chol: base.chol.clone(), log_scale: base.log_scale };
            let mut zc = kernel.t_sample(&mut rng);
            let mut lt = target(&zc);
            if !lt.is_finite() {
                zc = kernel.center.clone();
                lt = target(&zc);
            }
            if !lt.is_finite() {
                return Err(Error::BadCovariance("starting covariance has zero density".into()));
            }
            let mut lk = kernel.t_log_kernel(&zc);
            let recenter_from = settings.burn_in / 5;
            let mut sum = DVector::zeros(d);
            let mut count = 0usize;
            let (mut accepted, mut proposed, mut jumps) = (0usize, 0usize, 0usize);
            let mut step = 0usize;
            for it in 0..settings.burn_in + settings.iterations {
                let adapting = it < settings.burn_in;
                if it == settings.burn_in {
                    chain.proposal_hash = Some((kernel.fingerprint(), 0));
                }
                let prop = kernel.t_sample(&mut rng);
                let lp = target(&prop);
                let lkp = kernel.t_log_kernel(&prop);
                if lp.is_finite() && rng.random::<f64>().ln() < lp - lt + lk - lkp {
                    zc = prop;
                    lt = lp;
                    lk = lkp;
                    jumps += !adapting as usize;
                }
                for _ in 0..settings.mh_steps {
                    let prop = &zc + &kernel.chol * standard_normal_vec(&mut rng, d) * kernel.log_scale.exp();
                    let lp = target(&prop);
                    let log_alpha = (lp - lt).min(0.0);
                    let accept = lp.is_finite() && rng.random::<f64>().ln() < log_alpha;
                    if accept {
                        zc = prop;
                        lt = lp;
                        lk = kernel.t_log_kernel(&zc);
                    }
                    if adapting {
                        step += 1;
                        let alpha = if lp.is_finite() { log_alpha.exp() } else { 0.0 };
                        kernel.log_scale += (alpha - settings.target_accept) / (step as f64).powf(0.6);
                    } else {
                        proposed += 1;
                        accepted += accept as usize;
                    }
                }
                if adapting {
                    if it >= recenter_from {
                        sum += &zc;
                        count += 1;
                        if count % RECENTER_EVERY == 0 {
                            kernel.center = &sum / count as f64;
                            lk = kernel.t_log_kernel(&zc);
                        }
                    }
                    continue;
                }
                let cp = post
                    .cov_point(zc.as_slice())
                    .ok_or_else(|| Error::BadCovariance("accepted covariance".into()))?;
                let theta = post.sample_theta(&mut rng, &cp)?;
                record(post, &mut chain, &theta, zc.as_slice());
            }
            chain.jump_rate = Some(jumps as f64 / settings.iterations as f64);
            let frozen = chain.proposal_hash.map_or(kernel.fingerprint(), |h| h.0);
            chain.proposal_hash = Some((frozen, kernel.fingerprint()));
            chain.acceptance = Some(accepted as f64 / proposed.max(1) as f64);
            log::debug!(
                "{} chain {ci}: acceptance {:.3}",
                post.model,
                chain.acceptance.unwrap()
            );
            Ok(chain)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        model: post.model,
        context,
        seed: settings.seed,
        burn_in: settings.burn_in,
        theta_dim: post.theta_dim(),
        chains,
    })
}

/// Dispatches to the sampler matching the model's prior family.
pub fn sample_posterior(post: &Posterior, settings: &SamplerSettings, context: Context) -> Result<PosteriorDraws> {
    match post.model.family() {
        PriorFamily::Conjugate => exact_conjugate(post, settings, context),
        PriorFamily::Hierarchical => gibbs_niw(post, settings, context),
        PriorFamily::Lkj => mwg_lkj(post, settings, context),
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Effective sample size with Geyer's initial monotone positive sequence.
pub fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var0 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var0 == 0.0 {
        return n as f64;
    }
    let rho = |k: usize| -> f64 {
        c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var0)
    };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let mut gamma = rho(2 * k) + rho(2 * k + 1);
        if gamma <= 0.0 {
            break;
        }
        gamma = gamma.min(prev);
        prev = gamma;
        tau += 2.0 * gamma;
        k += 1;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Split-R-hat over chains of equal length.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::NeedMoreChains);
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap() / 2;
    if n < 2 {
        return Err(Error::NeedMoreDraws { needed: 4, got: 2 * n });
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n..2 * n]])
        .collect();
    let stats: Vec<(f64, f64)> = halves.iter().map(|h| mean_var(h)).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let b = n as f64 * mean_var(&means).1;
    if w == 0.0 {
        return Ok(1.0);
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Ok((var_plus / w).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ess: Vec<f64>,
    pub split_rhat: Vec<f64>,
}

/// Per-coordinate ESS (summed over chains) and split-R-hat.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Diagnostics> {
    if draws.chains.len() < 2 {
        return Err(Error::NeedMoreChains);
    }
    let t = draws.chains.iter().map(|c| c.draws.len()).min().unwrap_or(0);
    if t < 100 {
        return Err(Error::NeedMoreDraws { needed: 100, got: t });
    }
    let d = draws.dim();
    let mut out = Diagnostics {
        ess: Vec::with_capacity(d),
        split_rhat: Vec::with_capacity(d),
    };
    for k in 0..d {
        let cols: Vec<Vec<f64>> = draws
            .chains
            .iter()
            .map(|c| c.draws.iter().map(|z| z[k]).collect())
            .collect();
        out.ess.push(cols.iter().map(|c| ess(c)).sum());
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        out.split_rhat.push(split_rhat(&refs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelId, PriorHyper, SuffStats};
    use rand_distr::{Distribution, StandardNormal};

    fn hyper(model: ModelId, p: usize) -> PriorHyper {
        let mut h = PriorHyper {
            model,
            mu: vec![DVector::from_fn(p, |i, _| 0.1 * i as f64)],
            between: vec![],
            u: None,
            nu: None,
            k0: None,
            k0_diag: None,
            upsilon: None,
            sigma: None,
            eta: None,
        };
        match model.family() {
            PriorFamily::Conjugate => {
                h.u = Some(DMatrix::identity(p, p) * 2.0);
                h.nu = Some(p as f64 + 4.0);
                h.k0 = Some(0.5);
            }
            PriorFamily::Hierarchical => {
                h.between = vec![DMatrix::identity(p, p) * 0.8];
                h.u = Some(DMatrix::identity(p, p) * 2.0);
                h.nu = Some(p as f64 + 4.0);
            }
            PriorFamily::Lkj => {
                h.between = vec![DMatrix::identity(p, p) * 0.8];
                h.upsilon = Some(0.0);
                h.sigma = Some(0.5);
                h.eta = Some(2.0);
            }
        }
        h
    }

    fn data(n: usize, p: usize, seed: u64, corr: f64) -> SuffStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                let z = standard_normal_vec(&mut rng, p);
                let mut y = z.clone();
                for k in 1..p {
                    y[k] = corr * y[k - 1] + (1.0 - corr * corr).sqrt() * z[k];
                }
                y.add_scalar(0.5)
            })
            .collect();
        SuffStats::from_rows(&ys, &vec![DVector::from_element(1, 1.0); n])
    }

    fn theta_mean_cov(draws: &PosteriorDraws, d: usize) -> (DVector<f64>, DMatrix<f64>) {
        let rows: Vec<DVector<f64>> = draws
            .coordinates(Target::Full)
            .into_iter()
            .map(|z| z.rows(0, d).into_owned())
            .collect();
        crate::linalg::mean_cov(&rows)
    }

    #[test]
    fn gibbs_with_no_data_recovers_prior_mean() {
        let p = 2;
        let h = hyper(ModelId::M2, p);
        let post = Posterior::new(&h, SuffStats::empty(1, p)).unwrap();
        let s = SamplerSettings {
            iterations: 20_000,
            burn_in: 100,
            seed: 1,
            ..SamplerSettings::default()
        };
        let draws = gibbs_niw(&post, &s, Context::Single).unwrap();
        let (mean, _) = theta_mean_cov(&draws, p);
        for k in 0..p {
            let se = (0.8f64 / 20_000.0).sqrt();
            assert!((mean[k] - h.mu[0][k]).abs() < 4.0 * se, "{mean}");
        }
    }

    #[test]
    fn gibbs_with_flat_mean_prior_centres_on_sample_mean() {
        let p = 2;
        let mut h = hyper(ModelId::M2, p);
        h.between = vec![DMatrix::identity(p, p) * 1e8];
        let stats = data(50, p, 2, 0.0);
        let ybar = stats.cty.row(0).transpose() / 50.0;
        let post = Posterior::new(&h, stats).unwrap();
        let s = SamplerSettings {
            iterations: 10_000,
            burn_in: 200,
            seed: 2,
            ..SamplerSettings::default()
        };
        let draws = gibbs_niw(&post, &s, Context::Single).unwrap();
        let (mean, cov) = theta_mean_cov(&draws, p);
        for k in 0..p {
            let se = (cov[(k, k)] / 10_000.0).sqrt();
            assert!((mean[k] - ybar[k]).abs() < 4.0 * se, "{mean} vs {ybar}");
        }
    }

    #[test]
    fn gibbs_with_fixed_w_matches_exact_conditional() {
        let p = 3;
        let h = hyper(ModelId::M2, p);
        let post = Posterior::new(&h, data(10, p, 3, 0.4)).unwrap();
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 1.2, 0.2, 0.1, 0.2, 0.9]);
        let s = SamplerSettings {
            iterations: 20_000,
            burn_in: 0,
            seed: 3,
            ..SamplerSettings::default()
        };
        let draws = gibbs_niw_with(&post, &s, Context::Single, Some(&w)).unwrap();
        let zc = lower_to_log_cholesky(&chol_lower(&w, "w").unwrap());
        let cp = post.cov_point(&zc).unwrap();
        let (m, la) = post.theta_conditional(&cp).unwrap();
        let exact_cov = crate::linalg::spd_inverse_from_chol(&la);
        let (mean, cov) = theta_mean_cov(&draws, p);
        let t = 20_000.0;
        for i in 0..p {
            let se = (exact_cov[(i, i)] / t).sqrt();
            assert!((mean[i] - m[i]).abs() < 4.0 * se);
            for j in 0..p {
                // SE of a sample covariance entry under normality
                let se = ((exact_cov[(i, i)] * exact_cov[(j, j)] + exact_cov[(i, j)].powi(2)) / t).sqrt();
                assert!((cov[(i, j)] - exact_cov[(i, j)]).abs() < 4.0 * se);
            }
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let p = 2;
        for model in [ModelId::M1, ModelId::M2, ModelId::M3] {
            let post = Posterior::new(&hyper(model, p), data(20, p, 4, 0.3)).unwrap();
            let s = SamplerSettings {
                iterations: 200,
                burn_in: 100,
                chains: 2,
                seed: 9,
                ..SamplerSettings::default()
            };
            let a = sample_posterior(&post, &s, Context::Single).unwrap();
            let b = sample_posterior(&post, &s, Context::Single).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 400);
            assert!(a.to_csv().unwrap().lines().count() == 401);
        }
    }

    #[test]
    fn exact_conjugate_matches_conditional_structure() {
        // posterior mean of theta equals M_n
        let p = 2;
        let h = hyper(ModelId::M1, p);
        let post = Posterior::new(&h, data(15, p, 5, 0.2)).unwrap();
        let s = SamplerSettings {
            iterations: 20_000,
            seed: 5,
            ..SamplerSettings::default()
        };
        let draws = exact_conjugate(&post, &s, Context::Single).unwrap();
        let (mean, cov) = theta_mean_cov(&draws, p);
        let m_n = &post.conjugate().unwrap().m_n;
        for k in 0..p {
            assert!((mean[k] - m_n[(0, k)]).abs() < 4.0 * (cov[(k, k)] / 20_000.0).sqrt());
        }
    }

    #[test]
    fn lkj_sampler_acceptance_and_frozen_proposal() {
        let p = 3;
        let post = Posterior::new(&hyper(ModelId::M3, p), data(60, p, 6, 0.5)).unwrap();
        let s = SamplerSettings {
            iterations: 1000,
            burn_in: 1000,
            chains: 2,
            seed: 6,
            ..SamplerSettings::default()
        };
        let draws = mwg_lkj(&post, &s, Context::Single).unwrap();
        for c in &draws.chains {
            let acc = c.acceptance.unwrap();
            assert!((0.1..=0.5).contains(&acc), "acceptance {acc}");
            let (frozen, end) = c.proposal_hash.unwrap();
            assert_eq!(frozen, end);
        }
        let diag = diagnostics(&draws).unwrap();
        assert!(diag.split_rhat.iter().all(|r| *r < 1.1), "{:?}", diag.split_rhat);
    }

    #[test]
    fn strong_lkj_prior_pulls_correlation_to_zero() {
        let p = 2;
        let mut h = hyper(ModelId::M3, p);
        h.eta = Some(1e6);
        let post = Posterior::new(&h, data(40, p, 7, 0.0)).unwrap();
        let s = SamplerSettings {
            iterations: 2000,
            burn_in: 1000,
            seed: 7,
            ..SamplerSettings::default()
        };
        let draws = mwg_lkj(&post, &s, Context::Single).unwrap();
        let r: f64 = draws
            .coordinates(Target::Collapsed)
            .iter()
            .map(|z| z[p].tanh().abs())
            .sum::<f64>()
            / draws.len() as f64;
        assert!(r < 0.05, "mean |r| {r}");
    }

    #[test]
    fn lkj_theta_matches_conditional_when_scales_are_pinned() {
        // sigma tiny pins D; at p = 1 there is no correlation block, so W is fixed
        let p = 1;
        let mut h = hyper(ModelId::M3, p);
        h.upsilon = Some(0.4f64.ln());
        h.sigma = Some(1e-6);
        let post = Posterior::new(&h, data(12, p, 8, 0.0)).unwrap();
        let s = SamplerSettings {
            iterations: 20_000,
            burn_in: 500,
            mh_steps: 1,
            seed: 8,
            ..SamplerSettings::default()
        };
        let draws = mwg_lkj(&post, &s, Context::Single).unwrap();
        let zc = [0.5 * 0.4f64.ln()];
        let cp = post.cov_point(&zc).unwrap();
        let (m, la) = post.theta_conditional(&cp).unwrap();
        let var = crate::linalg::spd_inverse_from_chol(&la)[(0, 0)];
        let (mean, _) = theta_mean_cov(&draws, 1);
        assert!((mean[0] - m[0]).abs() < 4.0 * (var / 20_000.0).sqrt());
    }

    #[test]
    fn ess_white_noise_and_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = 20_000;
        let x: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = ess(&x);
        assert!((e / t as f64 - 1.0).abs() < 0.2, "{e}");
        let rho = 0.9;
        let mut y = vec![0.0f64; t];
        for i in 1..t {
            let z: f64 = StandardNormal.sample(&mut rng);
            y[i] = rho * y[i - 1] + (1.0f64 - rho * rho).sqrt() * z;
        }
        let expect = t as f64 * (1.0 - rho) / (1.0 + rho);
        let got = ess(&y);
        assert!((got / expect - 1.0).abs() < 0.3, "{got} vs {expect}");
    }

    #[test]
    fn rhat_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(matches!(split_rhat(&[&a]), Err(Error::NeedMoreChains)));
        let r = split_rhat(&[&a, &a]).unwrap();
        assert!((r - 1.0).abs() < 0.01, "{r}");
        let trend: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0).collect();
        assert!(split_rhat(&[&trend, &trend]).unwrap() > 1.5);
    }
}
