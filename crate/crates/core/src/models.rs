//! The six models: Normal and MANOVA likelihoods, each with a conjugate
//! Normal-Inverse-Wishart, hierarchical Normal-Inverse-Wishart, or
//! Normal-LogNormal-LKJ prior.
//!
//! Every model is written as a multivariate regression `Y = C Theta + E` with
//! rows of `E ~ N(0, W)`. Normal models use an intercept-only design (`q = 1`);
//! MANOVA models use the dummy design (`q = L`). The parameter vector `beta`
//! stacks the rows of `Theta` (`q x p`).

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::dataset::{dummy_code, Dataset, L};
use crate::error::{Error, Result};
use crate::linalg::{
    chol_lower, inverse_lower, iw_log_density_chol, log_det_chol, log_multigamma,
    spd_inverse_from_chol, trace_product, LN_2PI,
};
use crate::serde_util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorFamily {
    Conjugate,
    Hierarchical,
    Lkj,
}

impl ModelId {
    pub const ALL: [ModelId; 6] = [
        ModelId::M1,
        ModelId::M2,
        ModelId::M3,
        ModelId::M4,
        ModelId::M5,
        ModelId::M6,
    ];

    pub fn is_manova(self) -> bool {
        matches!(self, ModelId::M4 | ModelId::M5 | ModelId::M6)
    }

    pub fn family(self) -> PriorFamily {
        match self {
            ModelId::M1 | ModelId::M4 => PriorFamily::Conjugate,
            ModelId::M2 | ModelId::M5 => PriorFamily::Hierarchical,
            ModelId::M3 | ModelId::M6 => PriorFamily::Lkj,
        }
    }

    pub fn has_closed_form(self) -> bool {
        self.family() == PriorFamily::Conjugate
    }

    pub fn design(self) -> Design {
        if self.is_manova() {
            Design::Dummy
        } else {
            Design::Intercept
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::BadModel(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Design {
    /// Single intercept column.
    Intercept,
    /// Corner-point coding over all `L` characters.
    Dummy,
}

impl Design {
    pub fn dim(self) -> usize {
        match self {
            Design::Intercept => 1,
            Design::Dummy => L,
        }
    }
}

/// Sufficient statistics `n`, `Y^T Y`, `C^T Y`, `C^T C` of a regression data set.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffStats {
    pub n: usize,
    pub yty: DMatrix<f64>,
    pub cty: DMatrix<f64>,
    pub ctc: DMatrix<f64>,
}

impl SuffStats {
    pub fn empty(q: usize, p: usize) -> Self {
        Self {
            n: 0,
            yty: DMatrix::zeros(p, p),
            cty: DMatrix::zeros(q, p),
            ctc: DMatrix::zeros(q, q),
        }
    }

    pub fn from_rows(ys: &[DVector<f64>], cs: &[DVector<f64>]) -> Self {
        assert_eq!(ys.len(), cs.len());
        let p = ys.first().map_or(0, |y| y.len());
        let q = cs.first().map_or(1, |c| c.len());
        let mut s = Self::empty(q, p);
        for (y, c) in ys.iter().zip(cs) {
            s.add(y.as_slice(), c.as_slice());
        }
        s
    }

    pub fn from_dataset(data: &Dataset, design: Design) -> Self {
        let q = design.dim();
        let mut s = Self::empty(q, crate::dataset::P);
        for r in data.records() {
            match design {
                Design::Intercept => s.add(r.features.as_slice(), &[1.0]),
                Design::Dummy => s.add(r.features.as_slice(), &dummy_code(r.character).0),
            }
        }
        s
    }

    fn add(&mut self, y: &[f64], c: &[f64]) {
        let (p, q) = (self.p(), self.q());
        self.n += 1;
        for i in 0..p {
            for j in 0..p {
                self.yty[(i, j)] += y[i] * y[j];
            }
        }
        for l in 0..q {
            for j in 0..p {
                self.cty[(l, j)] += c[l] * y[j];
            }
            for m in 0..q {
                self.ctc[(l, m)] += c[l] * c[m];
            }
        }
    }

    pub fn merge(&self, other: &SuffStats) -> SuffStats {
        SuffStats {
            n: self.n + other.n,
            yty: &self.yty + &other.yty,
            cty: &self.cty + &other.cty,
            ctc: &self.ctc + &other.ctc,
        }
    }

    pub fn p(&self) -> usize {
        self.yty.nrows()
    }

    pub fn q(&self) -> usize {
        self.ctc.nrows()
    }

    /// `(Y - C Theta)^T (Y - C Theta)`.
    pub fn residual_scatter(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let cross = theta.transpose() * &self.cty;
        &self.yty - &cross - cross.transpose() + theta.transpose() * &self.ctc * theta
    }
}

/// Elicited hyperparameters for one model; only fields relevant to `model`
/// are populated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorHyper {
    pub model: ModelId,
    /// Prior mean rows: one for Normal models, one per character for MANOVA.
    #[serde(with = "serde_util::vector_vec")]
    pub mu: Vec<DVector<f64>>,
    /// `B` (Normal) or `B_l` per design row (MANOVA).
    #[serde(with = "serde_util::matrix_vec", default)]
    pub between: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::matrix_opt", default)]
    pub u: Option<DMatrix<f64>>,
    pub nu: Option<f64>,
    pub k0: Option<f64>,
    /// Diagonal of `K0`.
    pub k0_diag: Option<Vec<f64>>,
    pub upsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub eta: Option<f64>,
}

impl PriorHyper {
    pub fn p(&self) -> usize {
        self.mu.first().map_or(0, |m| m.len())
    }

    pub fn q(&self) -> usize {
        self.mu.len()
    }

    pub fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.q(), self.p(), |l, j| self.mu[l][j])
    }

    /// `K0` diagonal for conjugate models (`[k0]` for the Normal case).
    pub fn shrinkage(&self) -> Result<Vec<f64>> {
        match (self.model, self.k0, &self.k0_diag) {
            (ModelId::M1, Some(k), _) => Ok(vec![k]),
            (ModelId::M4, _, Some(d)) => Ok(d.clone()),
            (m, _, _) => Err(Error::BadModel(format!("{m} hyper has no shrinkage"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        let bad = |what: &str| Err(Error::BadModel(format!("{} hyper: {what}", self.model)));
        let q_expected = if self.model.is_manova() { L } else { 1 };
        if self.q() != q_expected && !(self.model.is_manova() && self.q() >= 1) {
            return bad("wrong number of mean rows");
        }
        if p == 0 || self.mu.iter().any(|m| m.len() != p) {
            return bad("mean rows of unequal length");
        }
        let needs_iw = self.model.family() != PriorFamily::Lkj;
        match (&self.u, self.nu) {
            (Some(u), Some(nu)) if needs_iw => {
                if u.nrows() != p || u.ncols() != p {
                    return bad("U has wrong shape");
                }
                if nu <= p as f64 - 1.0 {
                    return Err(Error::BadDof {
                        nu,
                        min: p as f64 - 1.0,
                    });
                }
            }
            (None, None) if !needs_iw => {}
            _ => return bad("U and nu must be set exactly for Inverse-Wishart priors"),
        }
        match self.model.family() {
            PriorFamily::Conjugate => {
                let k = self.shrinkage()?;
                if k.len() != self.q() || k.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return bad("shrinkage must be positive, one per design row");
                }
                if !self.between.is_empty() || self.eta.is_some() || self.upsilon.is_some() {
                    return bad("unexpected hierarchical or LKJ fields");
                }
            }
            PriorFamily::Hierarchical | PriorFamily::Lkj => {
                if self.between.len() != self.q()
                    || self.between.iter().any(|b| b.nrows() != p || b.ncols() != p)
                {
                    return bad("one p x p between covariance per design row");
                }
                if self.k0.is_some() || self.k0_diag.is_some() {
                    return bad("unexpected shrinkage field");
                }
            }
        }
        if self.model.family() == PriorFamily::Lkj {
            match (self.upsilon, self.sigma, self.eta) {
                (Some(u), Some(s), Some(e)) if u.is_finite() && s > 0.0 && e > 0.0 => {}
                _ => return bad("LKJ prior needs finite upsilon, sigma > 0, eta > 0"),
            }
        } else if self.eta.is_some() || self.upsilon.is_some() || self.sigma.is_some() {
            return bad("unexpected LKJ fields");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    /// `W = D R D` with standard deviations `sd` and correlation `corr`.
    Decomposed { sd: DVector<f64>, corr: DMatrix<f64> },
}

impl Covariance {
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            Covariance::Full(w) => w.clone(),
            Covariance::Decomposed { sd, corr } => {
                DMatrix::from_fn(sd.len(), sd.len(), |i, j| (sd[i] * sd[j]) * corr[(i, j)])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `q x p`; a single row for Normal models.
    pub theta: DMatrix<f64>,
    pub cov: Covariance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unconstrained {
    pub z: DVector<f64>,
    /// `log |det d(params)/dz|`.
    pub log_jacobian: f64,
}

/// Gaussian log-likelihood from sufficient statistics given the lower
/// Cholesky factor of `W`.
pub fn log_likelihood_stats(stats: &SuffStats, theta: &DMatrix<f64>, lw: &DMatrix<f64>) -> f64 {
    let n = stats.n as f64;
    let p = stats.p() as f64;
    let s = stats.residual_scatter(theta);
    let w_inv = spd_inverse_from_chol(lw);
    -0.5 * n * p * LN_2PI - 0.5 * n * log_det_chol(lw) - 0.5 * trace_product(&w_inv, &s)
}

pub fn log_likelihood(model: ModelId, params: &ModelParams, data: &Dataset) -> Result<f64> {
    let stats = SuffStats::from_dataset(data, model.design());
    if params.theta.nrows() != stats.q() || params.theta.ncols() != stats.p() {
        return Err(Error::BadModel(format!(
            "{model} expects a {} x {} mean matrix",
            stats.q(),
            stats.p()
        )));
    }
    let lw = chol_lower(&params.cov.matrix(), "likelihood covariance")?;
    Ok(log_likelihood_stats(&stats, &params.theta, &lw))
}

/// `log c` of the LKJ density `|R|^{eta-1} / c` on `p x p` correlation matrices.
pub fn lkj_log_normalizer(p: usize, eta: f64) -> f64 {
    let mut log_c = 0.0;
    for k in 1..p {
        let pk = (p - k) as f64;
        let b = eta + (pk - 1.0) / 2.0;
        log_c += (2.0 * eta - 2.0 + pk) * pk * LN_2 + pk * ln_beta(b, b);
    }
    log_c
}

fn check_correlation(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = r.nrows();
    if r.ncols() != p {
        return Err(Error::BadCorrelation("not square".into()));
    }
    for i in 0..p {
        if (r[(i, i)] - 1.0).abs() > 1e-10 {
            return Err(Error::BadCorrelation(format!("diagonal entry {i} is {}", r[(i, i)])));
        }
        for j in 0..i {
            if (r[(i, j)] - r[(j, i)]).abs() > 1e-10 {
                return Err(Error::BadCorrelation("not symmetric".into()));
            }
        }
    }
    chol_lower(r, "correlation").map_err(|_| Error::BadCorrelation("not positive definite".into()))
}

pub fn lkj_log_density(r: &DMatrix<f64>, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::BadValue(format!("LKJ shape must be positive, got {eta}")));
    }
    let lr = check_correlation(r)?;
    Ok((eta - 1.0) * log_det_chol(&lr) - lkj_log_normalizer(r.nrows(), eta))
}

pub use crate::linalg::iw_log_density;

fn normal_log_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// `log p(params | hyper)` on the constrained scale.
pub fn log_prior(hyper: &PriorHyper, params: &ModelParams) -> Result<f64> {
    hyper.validate()?;
    let (q, p) = (hyper.q(), hyper.p());
    if params.theta.nrows() != q || params.theta.ncols() != p {
        return Err(Error::BadModel("parameter shape does not match hyper".into()));
    }
    let m = hyper.mean_matrix();
    let diff = &params.theta - &m;
    let family = hyper.model.family();
    let mut lp = match (&params.cov, family) {
        (Covariance::Full(w), PriorFamily::Conjugate | PriorFamily::Hierarchical) => {
            let lw = chol_lower(w, "W")?;
            let lu = chol_lower(hyper.u.as_ref().expect("validated"), "U")?;
            iw_log_density_chol(&lw, &lu, hyper.nu.expect("validated"))
        }
        (Covariance::Decomposed { sd, corr }, PriorFamily::Lkj) => {
            let (ups, sig) = (hyper.upsilon.unwrap(), hyper.sigma.unwrap());
            let mut acc = 0.0;
            for &d in sd.iter() {
                if !(d > 0.0) {
                    return Err(Error::BadVariance(d));
                }
                acc += normal_log_density(d.ln(), 0.5 * ups, 0.5 * sig) - d.ln();
            }
            acc + lkj_log_density(corr, hyper.eta.unwrap())?
        }
        _ => {
            return Err(Error::BadModel(format!(
                "{} does not take this covariance parameterization",
                hyper.model
            )))
        }
    };
    match family {
        PriorFamily::Conjugate => {
            let k0 = hyper.shrinkage()?;
            let lw = chol_lower(&params.cov.matrix(), "W")?;
            let w_inv = spd_inverse_from_chol(&lw);
            let k = DMatrix::from_diagonal(&DVector::from_vec(k0.clone()));
            let quad = trace_product(&w_inv, &(diff.transpose() * k * &diff));
            lp += -0.5 * (q * p) as f64 * LN_2PI
                + 0.5 * p as f64 * k0.iter().map(|v| v.ln()).sum::<f64>()
                - 0.5 * q as f64 * log_det_chol(&lw)
                - 0.5 * quad;
        }
        PriorFamily::Hierarchical | PriorFamily::Lkj => {
            for l in 0..q {
                let lb = chol_lower(&hyper.between[l], "B")?;
                lp += crate::linalg::mvn_log_density(
                    &params.theta.row(l).transpose(),
                    &hyper.mu[l],
                    &lb,
                );
            }
        }
    }
    Ok(lp)
}

/// Closed-form `log m(Y)` for the conjugate models from sufficient statistics.
pub fn closed_form_log_marginal(stats: &SuffStats, hyper: &PriorHyper) -> Result<f64> {
    if hyper.model.family() != PriorFamily::Conjugate {
        return Err(Error::BadModel(format!("{} has no closed form", hyper.model)));
    }
    hyper.validate()?;
    let c = ConjugatePosterior::new(stats, hyper)?;
    let (p, n) = (stats.p() as f64, stats.n as f64);
    let nu = hyper.nu.unwrap();
    let nu_n = nu + n;
    Ok(-0.5 * n * p * PI.ln() + log_multigamma(stats.p(), 0.5 * nu_n)
        - log_multigamma(stats.p(), 0.5 * nu)
        + 0.5 * nu * log_det_chol(&c.lu)
        - 0.5 * nu_n * log_det_chol(&c.lu_n)
        + 0.5 * p * (c.log_det_k0 - log_det_chol(&c.lk_n)))
}

pub fn closed_form_log_marginal_m1(data: &Dataset, hyper: &PriorHyper) -> Result<f64> {
    if hyper.model != ModelId::M1 {
        return Err(Error::BadModel(format!("expected M1, got {}", hyper.model)));
    }
    closed_form_log_marginal(&SuffStats::from_dataset(data, Design::Intercept), hyper)
}

pub fn closed_form_log_marginal_m4(data: &Dataset, hyper: &PriorHyper) -> Result<f64> {
    if hyper.model != ModelId::M4 {
        return Err(Error::BadModel(format!("expected M4, got {}", hyper.model)));
    }
    closed_form_log_marginal(&SuffStats::from_dataset(data, Design::Dummy), hyper)
}

/// Conjugate update quantities: `K_n`, `M_n`, `U_n`.
#[derive(Clone, Debug)]
pub struct ConjugatePosterior {
    pub log_det_k0: f64,
    pub lk_n: DMatrix<f64>,
    pub m_n: DMatrix<f64>,
    /// `Y^T Y + M^T K0 M - M_n^T K_n M_n`.
    pub scatter: DMatrix<f64>,
    pub lu: DMatrix<f64>,
    pub lu_n: DMatrix<f64>,
    pub nu_n: f64,
}

impl ConjugatePosterior {
    pub fn new(stats: &SuffStats, hyper: &PriorHyper) -> Result<Self> {
        let k0 = hyper.shrinkage()?;
        let k0m = DMatrix::from_diagonal(&DVector::from_vec(k0.clone()));
        let m = hyper.mean_matrix();
        let k_n = &stats.ctc + &k0m;
        let lk_n = chol_lower(&k_n, "K_n")?;
        let rhs = &stats.cty + &k0m * &m;
        let m_n = lk_n.solve_lower_triangular(&rhs).expect("positive diagonal");
        let m_n = lk_n
            .transpose()
            .solve_upper_triangular(&m_n)
            .expect("positive diagonal");
        let scatter = &stats.yty + m.transpose() * &k0m * &m - m_n.transpose() * &k_n * &m_n;
        let scatter = crate::linalg::symmetrize(&scatter);
        let u = hyper.u.as_ref().expect("validated");
        let lu = chol_lower(u, "U")?;
        let lu_n = chol_lower(&(u + &scatter), "U_n")?;
        Ok(Self {
            log_det_k0: k0.iter().map(|v| v.ln()).sum(),
            lk_n,
            m_n,
            scatter,
            lu,
            lu_n,
            nu_n: hyper.nu.unwrap() + stats.n as f64,
        })
    }
}

fn n_lower(p: usize) -> usize {
    p * (p - 1) / 2
}

/// Lower Cholesky factor of `W` from its log-Cholesky coordinates
/// (log diagonal first, then the strict lower triangle row by row).
pub fn log_cholesky_to_lower(z: &[f64], p: usize) -> (DMatrix<f64>, f64) {
    let mut l = DMatrix::zeros(p, p);
    let mut log_jac = p as f64 * LN_2;
    for k in 0..p {
        l[(k, k)] = z[k].exp();
        log_jac += (p - k + 1) as f64 * z[k];
    }
    let mut idx = p;
    for i in 1..p {
        for j in 0..i {
            l[(i, j)] = z[idx];
            idx += 1;
        }
    }
    (l, log_jac)
}

pub fn lower_to_log_cholesky(l: &DMatrix<f64>) -> Vec<f64> {
    let p = l.nrows();
    let mut z: Vec<f64> = (0..p).map(|k| l[(k, k)].ln()).collect();
    for i in 1..p {
        for j in 0..i {
            z.push(l[(i, j)]);
        }
    }
    z
}

/// `log(1 - tanh(y)^2)` without cancellation.
fn log_sech2(y: f64) -> f64 {
    let a = y.abs();
    2.0 * (LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// Lower Cholesky factor of a correlation matrix from unconstrained
/// coordinates via canonical partial correlations. Returns the factor and
/// `log |det dR/dy|` over the strict lower triangle of `R`.
pub fn corr_cholesky_from_unconstrained(y: &[f64], p: usize) -> (DMatrix<f64>, f64) {
    let mut l = DMatrix::zeros(p, p);
    l[(0, 0)] = 1.0;
    let mut log_jac = 0.0;
    let mut idx = 0;
    for i in 1..p {
        let mut sum_sq: f64 = 0.0;
        for j in 0..i {
            let c = y[idx].tanh();
            log_jac += log_sech2(y[idx]);
            idx += 1;
            let rest = (1.0 - sum_sq).max(0.0);
            l[(i, j)] = c * rest.sqrt();
            log_jac += 0.5 * rest.ln();
            sum_sq += l[(i, j)] * l[(i, j)];
        }
        l[(i, i)] = (1.0 - sum_sq).max(0.0).sqrt();
    }
    for j in 0..p - 1 {
        log_jac += (p - 1 - j) as f64 * l[(j, j)].ln();
    }
    (l, log_jac)
}

pub fn corr_to_unconstrained(r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let l = check_correlation(r)?;
    let p = r.nrows();
    let mut y = Vec::with_capacity(n_lower(p));
    for i in 1..p {
        let mut sum_sq: f64 = 0.0;
        for j in 0..i {
            let c = l[(i, j)] / (1.0 - sum_sq).sqrt();
            y.push(c.atanh());
            sum_sq += l[(i, j)] * l[(i, j)];
        }
    }
    Ok(y)
}

/// Number of unconstrained covariance coordinates (`p (p + 1) / 2` for both
/// parameterizations).
pub fn cov_dim(p: usize) -> usize {
    p * (p + 1) / 2
}

pub fn to_unconstrained(model: ModelId, params: &ModelParams) -> Result<Unconstrained> {
    let p = params.theta.ncols();
    let mut z: Vec<f64> = params.theta.transpose().iter().copied().collect();
    let cov_z = match (&params.cov, model.family()) {
        (Covariance::Full(w), PriorFamily::Conjugate | PriorFamily::Hierarchical) => {
            lower_to_log_cholesky(&chol_lower(w, "W")?)
        }
        (Covariance::Decomposed { sd, corr }, PriorFamily::Lkj) => {
            if let Some(&d) = sd.iter().find(|d| !(**d > 0.0)) {
                return Err(Error::BadVariance(d));
            }
            let mut v: Vec<f64> = sd.iter().map(|d| d.ln()).collect();
            v.extend(corr_to_unconstrained(corr)?);
            v
        }
        _ => return Err(Error::BadModel(format!("{model} covariance mismatch"))),
    };
    z.extend(cov_z);
    let z = DVector::from_vec(z);
    let (_, log_jacobian) = from_unconstrained(model, z.as_slice(), params.theta.nrows(), p);
    Ok(Unconstrained { z, log_jacobian })
}

/// Total inverse transform; every finite `z` maps to valid parameters.
pub fn from_unconstrained(model: ModelId, z: &[f64], q: usize, p: usize) -> (ModelParams, f64) {
    let theta = DMatrix::from_row_slice(q, p, &z[..q * p]);
    let zc = &z[q * p..];
    let (cov, log_jac) = match model.family() {
        PriorFamily::Conjugate | PriorFamily::Hierarchical => {
            let (l, j) = log_cholesky_to_lower(zc, p);
            (Covariance::Full(crate::linalg::symmetrize(&(&l * l.transpose()))), j)
        }
        PriorFamily::Lkj => {
            let sd = DVector::from_iterator(p, zc[..p].iter().map(|u| u.exp()));
            let (lr, jr) = corr_cholesky_from_unconstrained(&zc[p..], p);
            let mut corr = crate::linalg::symmetrize(&(&lr * lr.transpose()));
            for i in 0..p {
                corr[(i, i)] = 1.0;
            }
            (Covariance::Decomposed { sd, corr }, zc[..p].iter().sum::<f64>() + jr)
        }
    };
    (ModelParams { theta, cov }, log_jac)
}

/// Which coordinates a posterior density is defined over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    /// `(beta, covariance coordinates)`.
    Full,
    /// Covariance coordinates only, with `Theta` integrated out analytically.
    Collapsed,
}

/// Covariance evaluated at unconstrained coordinates.
#[derive(Clone, Debug)]
pub struct CovPoint {
    pub lw: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    pub log_det_w: f64,
    /// Log prior density of the covariance coordinates, Jacobian included.
    pub log_prior: f64,
}

#[derive(Clone, Debug)]
enum ThetaPrior {
    Conjugate(ConjugatePosterior, DVector<f64>),
    Independent {
        /// Block-diagonal prior precision over `beta`.
        precision: DMatrix<f64>,
        /// `precision * mean`.
        shift: DVector<f64>,
        log_det_precision: f64,
        quad: f64,
    },
}

#[derive(Clone, Debug)]
enum CovPrior {
    InverseWishart { lu: DMatrix<f64>, nu: f64 },
    Lkj { upsilon: f64, sigma: f64, eta: f64, log_c: f64 },
}

/// Unnormalized posterior of one model given sufficient statistics, on the
/// unconstrained scale.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub model: ModelId,
    pub stats: SuffStats,
    mean: DMatrix<f64>,
    theta_prior: ThetaPrior,
    cov_prior: CovPrior,
}

impl Posterior {
    pub fn new(hyper: &PriorHyper, stats: SuffStats) -> Result<Self> {
        hyper.validate()?;
        if stats.p() != hyper.p() || stats.q() != hyper.q() {
            return Err(Error::BadModel(format!(
                "{}: data dimensions ({}, {}) do not match hyper ({}, {})",
                hyper.model,
                stats.q(),
                stats.p(),
                hyper.q(),
                hyper.p()
            )));
        }
        let (q, p) = (hyper.q(), hyper.p());
        let mean = hyper.mean_matrix();
        let theta_prior = match hyper.model.family() {
            PriorFamily::Conjugate => ThetaPrior::Conjugate(
                ConjugatePosterior::new(&stats, hyper)?,
                DVector::from_vec(hyper.shrinkage()?),
            ),
            _ => {
                let mut precision = DMatrix::zeros(q * p, q * p);
                let mut shift = DVector::zeros(q * p);
                let mut log_det_precision = 0.0;
                let mut quad = 0.0;
                for l in 0..q {
                    let lb = chol_lower(&hyper.between[l], "B")?;
                    let b_inv = spd_inverse_from_chol(&lb);
                    let s = &b_inv * &hyper.mu[l];
                    quad += hyper.mu[l].dot(&s);
                    log_det_precision -= log_det_chol(&lb);
                    precision.view_mut((l * p, l * p), (p, p)).copy_from(&b_inv);
                    shift.rows_mut(l * p, p).copy_from(&s);
                }
                ThetaPrior::Independent {
                    precision,
                    shift,
                    log_det_precision,
                    quad,
                }
            }
        };
        let cov_prior = match hyper.model.family() {
            PriorFamily::Lkj => CovPrior::Lkj {
                upsilon: hyper.upsilon.unwrap(),
                sigma: hyper.sigma.unwrap(),
                eta: hyper.eta.unwrap(),
                log_c: lkj_log_normalizer(p, hyper.eta.unwrap()),
            },
            _ => CovPrior::InverseWishart {
                lu: chol_lower(hyper.u.as_ref().unwrap(), "U")?,
                nu: hyper.nu.unwrap(),
            },
        };
        Ok(Self {
            model: hyper.model,
            stats,
            mean,
            theta_prior,
            cov_prior,
        })
    }

    pub fn p(&self) -> usize {
        self.stats.p()
    }

    pub fn q(&self) -> usize {
        self.stats.q()
    }

    pub fn theta_dim(&self) -> usize {
        self.p() * self.q()
    }

    pub fn dim(&self, target: Target) -> usize {
        match target {
            Target::Full => self.theta_dim() + cov_dim(self.p()),
            Target::Collapsed => cov_dim(self.p()),
        }
    }

    pub fn prior_mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    /// Covariance at unconstrained coordinates; `None` when degenerate.
    pub fn cov_point(&self, zc: &[f64]) -> Option<CovPoint> {
        let p = self.p();
        let (lw, log_det_w, log_prior) = match &self.cov_prior {
            CovPrior::InverseWishart { lu, nu } => {
                let (l, jac) = log_cholesky_to_lower(zc, p);
                let ld = 2.0 * zc[..p].iter().sum::<f64>();
                let lp = iw_log_density_chol(&l, lu, *nu);
                (l, ld, lp + jac)
            }
            CovPrior::Lkj {
                upsilon,
                sigma,
                eta,
                log_c,
            } => {
                let (lr, jr) = corr_cholesky_from_unconstrained(&zc[p..], p);
                let log_det_r = log_det_chol(&lr);
                if !log_det_r.is_finite() {
                    return None;
                }
                let mut lp = jr + (eta - 1.0) * log_det_r - log_c;
                for &u in &zc[..p] {
                    lp += normal_log_density(u, 0.5 * upsilon, 0.5 * sigma);
                }
                let mut l = lr;
                for i in 0..p {
                    let d = zc[i].exp();
                    l.row_mut(i).scale_mut(d);
                }
                (l, 2.0 * zc[..p].iter().sum::<f64>() + log_det_r, lp)
            }
        };
        if !(log_prior.is_finite() && log_det_w.is_finite()) {
            return None;
        }
        if lw.diagonal().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return None;
        }
        let li = inverse_lower(&lw);
        let w_inv = li.transpose() * li;
        if w_inv.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(CovPoint {
            lw,
            w_inv,
            log_det_w,
            log_prior,
        })
    }

    /// Precision `A` and linear term `b` of `beta | W, Y` for the independent
    /// (hierarchical and LKJ) mean priors.
    fn independent_conditional(&self, w_inv: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let ThetaPrior::Independent {
            precision, shift, ..
        } = &self.theta_prior
        else {
            unreachable!("conjugate models use the matrix-normal update")
        };
        let (q, p) = (self.q(), self.p());
        let mut a = precision.clone();
        let mut b = shift.clone();
        let wy = w_inv * self.stats.cty.transpose();
        for l in 0..q {
            for m in 0..q {
                let c = self.stats.ctc[(l, m)];
                if c != 0.0 {
                    let mut blk = a.view_mut((l * p, m * p), (p, p));
                    blk += w_inv * c;
                }
            }
            let mut seg = b.rows_mut(l * p, p);
            seg += wy.column(l);
        }
        (a, b)
    }

    /// `log p(Y | W)` with `Theta` integrated out.
    pub fn collapsed_log_likelihood(&self, cp: &CovPoint) -> f64 {
        let n = self.stats.n as f64;
        let p = self.p() as f64;
        let base = -0.5 * n * p * LN_2PI - 0.5 * n * cp.log_det_w;
        match &self.theta_prior {
            ThetaPrior::Conjugate(c, _) => {
                base + 0.5 * p * (c.log_det_k0 - log_det_chol(&c.lk_n))
                    - 0.5 * trace_product(&cp.w_inv, &c.scatter)
            }
            ThetaPrior::Independent {
                log_det_precision,
                quad,
                ..
            } => {
                let (a, b) = self.independent_conditional(&cp.w_inv);
                let Some(la) = nalgebra::Cholesky::new(a) else {
                    return f64::NEG_INFINITY;
                };
                let la = la.unpack();
                let h = la.solve_lower_triangular(&b).expect("positive diagonal");
                base - 0.5 * trace_product(&cp.w_inv, &self.stats.yty) + 0.5 * log_det_precision
                    - 0.5 * quad
                    - 0.5 * log_det_chol(&la)
                    + 0.5 * h.norm_squared()
            }
        }
    }

    /// Log prior of `Theta` given the covariance point.
    fn theta_log_prior(&self, theta: &DMatrix<f64>, cp: &CovPoint) -> f64 {
        let (q, p) = (self.q() as f64, self.p() as f64);
        let diff = theta - &self.mean;
        match &self.theta_prior {
            ThetaPrior::Conjugate(c, k0) => {
                let mut scaled = diff.clone();
                for (l, k) in k0.iter().enumerate() {
                    scaled.row_mut(l).scale_mut(*k);
                }
                let quad = trace_product(&cp.w_inv, &(diff.transpose() * scaled));
                -0.5 * q * p * LN_2PI + 0.5 * p * c.log_det_k0 - 0.5 * q * cp.log_det_w
                    - 0.5 * quad
            }
            ThetaPrior::Independent {
                precision,
                log_det_precision,
                ..
            } => {
                let beta = DVector::from_iterator(diff.len(), diff.transpose().iter().copied());
                -0.5 * q * p * LN_2PI + 0.5 * log_det_precision
                    - 0.5 * beta.dot(&(precision * &beta))
            }
        }
    }

    pub fn log_density(&self, target: Target, z: &[f64]) -> f64 {
        let t = match target {
            Target::Full => self.theta_dim(),
            Target::Collapsed => 0,
        };
        let Some(cp) = self.cov_point(&z[t..]) else {
            return f64::NEG_INFINITY;
        };
        let v = match target {
            Target::Collapsed => cp.log_prior + self.collapsed_log_likelihood(&cp),
            Target::Full => {
                let theta = DMatrix::from_row_slice(self.q(), self.p(), &z[..t]);
                let n = self.stats.n as f64;
                let s = self.stats.residual_scatter(&theta);
                let ll = -0.5 * n * self.p() as f64 * LN_2PI - 0.5 * n * cp.log_det_w
                    - 0.5 * trace_product(&cp.w_inv, &s);
                cp.log_prior + self.theta_log_prior(&theta, &cp) + ll
            }
        };
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Draw `Theta` (`q x p`) from its exact conditional given `W`.
    pub fn sample_theta<R: rand::Rng + ?Sized>(&self, rng: &mut R, cp: &CovPoint) -> Result<DMatrix<f64>> {
        let (q, p) = (self.q(), self.p());
        match &self.theta_prior {
            ThetaPrior::Conjugate(c, _) => {
                // Theta = M_n + chol(K_n^{-1}) Z chol(W)^T
                let z = DMatrix::from_fn(q, p, |_, _| {
                    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
                });
                let left = c
                    .lk_n
                    .transpose()
                    .solve_upper_triangular(&z)
                    .expect("positive diagonal");
                Ok(&c.m_n + left * cp.lw.transpose())
            }
            ThetaPrior::Independent { .. } => {
                let (mean, la) = self.theta_conditional(cp)?;
                let z = crate::linalg::standard_normal_vec(rng, q * p);
                let dev = la.transpose().solve_upper_triangular(&z).expect("positive diagonal");
                let beta = mean + dev;
                Ok(DMatrix::from_row_slice(q, p, beta.as_slice()))
            }
        }
    }

    /// Mean and lower Cholesky factor of the precision of `beta | W, Y`.
    pub fn theta_conditional(&self, cp: &CovPoint) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match &self.theta_prior {
            ThetaPrior::Conjugate(c, _) => {
                // precision K_n (x) W^{-1}
                let (q, p) = (self.q(), self.p());
                let k_n = &c.lk_n * c.lk_n.transpose();
                let a = k_n.kronecker(&cp.w_inv);
                let la = chol_lower(&a, "conditional precision")?;
                let mean = DVector::from_iterator(q * p, c.m_n.transpose().iter().copied());
                Ok((mean, la))
            }
            ThetaPrior::Independent { .. } => {
                let (a, b) = self.independent_conditional(&cp.w_inv);
                let la = chol_lower(&a, "conditional precision")?;
                let h = la.solve_lower_triangular(&b).expect("positive diagonal");
                let mean = la.transpose().solve_upper_triangular(&h).expect("positive diagonal");
                Ok((mean, la))
            }
        }
    }

    /// `U + S(Theta)` and `nu + n` for the Inverse-Wishart conditional of `W`.
    pub fn w_conditional(&self, theta: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
        let CovPrior::InverseWishart { lu, nu } = &self.cov_prior else {
            return None;
        };
        let u = lu * lu.transpose();
        let mut s = &u + self.stats.residual_scatter(theta);
        s = crate::linalg::symmetrize(&s);
        if let ThetaPrior::Conjugate(_, k0) = &self.theta_prior {
            let diff = theta - &self.mean;
            let mut scaled = diff.clone();
            for (l, k) in k0.iter().enumerate() {
                scaled.row_mut(l).scale_mut(*k);
            }
            s += diff.transpose() * scaled;
            return Some((crate::linalg::symmetrize(&s), nu + (self.stats.n + self.q()) as f64));
        }
        Some((s, nu + self.stats.n as f64))
    }

    /// Prior-mean covariance used to start chains.
    pub fn initial_cov_z(&self) -> Vec<f64> {
        let p = self.p();
        match &self.cov_prior {
            CovPrior::InverseWishart { lu, nu } => {
                let scale = (nu - p as f64 - 1.0).max(1.0);
                lower_to_log_cholesky(&(lu / scale.sqrt()))
            }
            CovPrior::Lkj { upsilon, .. } => {
                let mut z = vec![0.5 * upsilon; p];
                z.extend(std::iter::repeat(0.0).take(n_lower(p)));
                z
            }
        }
    }

    /// Closed-form posterior pieces for the conjugate models.
    pub fn conjugate(&self) -> Option<&ConjugatePosterior> {
        match &self.theta_prior {
            ThetaPrior::Conjugate(c, _) => Some(c),
            ThetaPrior::Independent { .. } => None,
        }
    }

    pub fn is_inverse_wishart(&self) -> bool {
        matches!(self.cov_prior, CovPrior::InverseWishart { .. })
    }
}
