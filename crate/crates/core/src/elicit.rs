//! Prior elicitation from background writers.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Character, Dataset, L, P};
use crate::error::{Error, Result};
use crate::linalg::{ridge, symmetrize};
use crate::models::{closed_form_log_marginal, ModelId, PriorFamily, SuffStats};

pub use crate::models::PriorHyper;

/// Per-cell mean and count.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub n: usize,
    pub mean: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundSummary {
    pub writers: Vec<u64>,
    pub characters: Vec<Character>,
    /// `theta_hat[(i, l)]`.
    pub cells: BTreeMap<(u64, Character), CellSummary>,
    /// `mu_hat_l`, count-weighted mean of the cell means.
    pub char_mean: BTreeMap<Character, DVector<f64>>,
    pub char_count: BTreeMap<Character, usize>,
    /// `B_hat_l`: covariance of character-`l` observations around `mu_hat_l`.
    pub char_between: BTreeMap<Character, DMatrix<f64>>,
    pub mean: DVector<f64>,
    /// Pooled scatter around cell means, divided by `n - #cells`.
    pub within: DMatrix<f64>,
    /// Covariance of all observations around `mean`, characters pooled.
    pub pooled_between: DMatrix<f64>,
    /// Scatter around per-writer means (characters pooled), divided by `n - m`.
    pub pooled_within: DMatrix<f64>,
    pub n: usize,
}

impl BackgroundSummary {
    pub fn m(&self) -> usize {
        self.writers.len()
    }
}

fn feature_vec(f: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(f)
}

fn scatter_around<'a>(
    xs: impl Iterator<Item = &'a [f64]>,
    center: &DVector<f64>,
    acc: &mut DMatrix<f64>,
) {
    for x in xs {
        let d = feature_vec(x) - center;
        acc.ger(1.0, &d, &d, 1.0);
    }
}

pub fn summarize_background(bg: &Dataset) -> Result<BackgroundSummary> {
    let writers = bg.writers();
    if writers.len() < 2 {
        return Err(Error::NeedMoreWriters(writers.len()));
    }
    let characters = bg.characters();
    let groups = bg.cells();
    for &w in &writers {
        for &c in &characters {
            if !groups.contains_key(&(w, c)) {
                return Err(Error::MissingCell {
                    writer: w,
                    character: c.to_string(),
                });
            }
        }
    }
    let n = bg.len();
    let mut cells = BTreeMap::new();
    let mut within = DMatrix::zeros(P, P);
    for (&key, recs) in &groups {
        let mean = recs
            .iter()
            .fold(DVector::zeros(P), |a, r| a + feature_vec(r.features.as_slice()))
            / recs.len() as f64;
        scatter_around(recs.iter().map(|r| r.features.as_slice()), &mean, &mut within);
        cells.insert(key, CellSummary { n: recs.len(), mean });
    }
    let dof_cells = n as isize - cells.len() as isize;
    if dof_cells <= 0 {
        return Err(Error::BadCovariance(
            "pooled within-writer scatter has no degrees of freedom".into(),
        ));
    }
    if (dof_cells as usize) < P {
        log::warn!("pooled within-writer covariance has {dof_cells} degrees of freedom for {P} features");
    }
    let within = symmetrize(&(within / dof_cells as f64));

    let mut char_mean = BTreeMap::new();
    let mut char_count = BTreeMap::new();
    let mut char_between = BTreeMap::new();
    for &c in &characters {
        let n_c: usize = writers.iter().map(|w| cells[&(*w, c)].n).sum();
        let mu = writers.iter().fold(DVector::zeros(P), |a, w| {
            let cell = &cells[&(*w, c)];
            a + &cell.mean * (cell.n as f64 / n_c as f64)
        });
        let mut b = DMatrix::zeros(P, P);
        scatter_around(
            bg.records()
                .iter()
                .filter(|r| r.character == c)
                .map(|r| r.features.as_slice()),
            &mu,
            &mut b,
        );
        char_between.insert(c, symmetrize(&(b / (n_c as f64 - 1.0).max(1.0))));
        char_mean.insert(c, mu);
        char_count.insert(c, n_c);
    }

    let mean = bg
        .records()
        .iter()
        .fold(DVector::zeros(P), |a, r| a + feature_vec(r.features.as_slice()))
        / n as f64;
    let mut pooled_between = DMatrix::zeros(P, P);
    scatter_around(bg.records().iter().map(|r| r.features.as_slice()), &mean, &mut pooled_between);
    let pooled_between = symmetrize(&(pooled_between / (n as f64 - 1.0)));

    let mut pooled_within = DMatrix::zeros(P, P);
    for &w in &writers {
        let own: Vec<&[f64]> = bg
            .records()
            .iter()
            .filter(|r| r.writer == w)
            .map(|r| r.features.as_slice())
            .collect();
        let wm = own.iter().fold(DVector::zeros(P), |a, x| a + feature_vec(x)) / own.len() as f64;
        scatter_around(own.into_iter(), &wm, &mut pooled_within);
    }
    let pooled_within = symmetrize(&(pooled_within / (n - writers.len()) as f64));

    Ok(BackgroundSummary {
        writers,
        characters,
        cells,
        char_mean,
        char_count,
        char_between,
        mean,
        within,
        pooled_between,
        pooled_within,
        n,
    })
}

/// `U = W_hat (nu - p - 1)`, so the Inverse-Wishart mean equals `W_hat`.
pub fn iw_scale_from_within(w_hat: &DMatrix<f64>, nu: f64) -> Result<DMatrix<f64>> {
    let p = w_hat.nrows() as f64;
    if !(nu >= p + 2.0) {
        return Err(Error::BadDof { nu, min: p + 2.0 });
    }
    Ok(w_hat * (nu - p - 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaRule {
    /// Mean signed deviation of the log variances, which is zero up to rounding.
    #[default]
    Printed,
    /// Sample standard deviation of the log variances.
    SampleSd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFit {
    pub upsilon: f64,
    pub sigma: f64,
    pub raw_sigma: f64,
    pub clamped: bool,
}

/// Location and scale of the LogNormal prior on the within-writer variances.
pub fn lognormal_from_within(w_hat: &DMatrix<f64>, rule: SigmaRule, sigma_min: f64) -> Result<LogNormalFit> {
    let p = w_hat.nrows();
    let logs = (0..p)
        .map(|k| {
            let v = w_hat[(k, k)];
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(Error::BadVariance(v))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let upsilon = logs.iter().sum::<f64>() / p as f64;
    let denom = (p as f64 - 1.0).max(1.0);
    let raw_sigma = match rule {
        SigmaRule::Printed => logs.iter().map(|l| l - upsilon).sum::<f64>() / denom,
        SigmaRule::SampleSd => {
            (logs.iter().map(|l| (l - upsilon).powi(2)).sum::<f64>() / denom).sqrt()
        }
    };
    let sigma = raw_sigma.max(sigma_min);
    Ok(LogNormalFit {
        upsilon,
        sigma,
        raw_sigma,
        clamped: sigma != raw_sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElicitOptions {
    /// Inverse-Wishart degrees of freedom; `None` means `p + 2`.
    pub nu: Option<f64>,
    pub eta: f64,
    pub k0_grid: Vec<f64>,
    pub k0_axis_grid: Vec<f64>,
    /// Skip the grid search and use these values.
    pub k0: Option<f64>,
    pub k0_diag: Option<Vec<f64>>,
    pub sigma_rule: SigmaRule,
    pub sigma_min: f64,
    pub ridge: f64,
}

impl Default for ElicitOptions {
    fn default() -> Self {
        Self {
            nu: None,
            eta: 1.0,
            k0_grid: (1..=19).map(|i| i as f64 * 0.05).collect(),
            k0_axis_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            k0: None,
            k0_diag: None,
            sigma_rule: SigmaRule::Printed,
            sigma_min: 0.25,
            ridge: 1e-8,
        }
    }
}

impl ElicitOptions {
    pub fn nu(&self) -> f64 {
        self.nu.unwrap_or(P as f64 + 2.0)
    }
}

/// Mean rows and between covariances for the MANOVA parameterization:
/// row 1 is the reference character `a`, rows 2..L are differences from it.
/// Characters absent from the background get a zero mean and the pooled
/// covariance; with no data for them their rows integrate out exactly.
fn manova_means(s: &BackgroundSummary, ridge_eps: f64) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let reference = s.char_mean.get(&Character::A).ok_or(Error::MissingCell {
        writer: s.writers[0],
        character: Character::A.to_string(),
    })?;
    let mut mu = Vec::with_capacity(L);
    let mut between = Vec::with_capacity(L);
    for c in Character::ALL {
        match (s.char_mean.get(&c), s.char_between.get(&c)) {
            (Some(m), Some(b)) => {
                mu.push(if c == Character::A { m.clone() } else { m - reference });
                between.push(ridge(b, ridge_eps));
            }
            _ => {
                mu.push(DVector::zeros(P));
                between.push(ridge(&s.pooled_between, ridge_eps));
            }
        }
    }
    Ok((mu, between))
}

fn base_hyper(model: ModelId) -> PriorHyper {
    PriorHyper {
        model,
        mu: vec![],
        between: vec![],
        u: None,
        nu: None,
        k0: None,
        k0_diag: None,
        upsilon: None,
        sigma: None,
        eta: None,
    }
}

/// Hyperparameters with the shrinkage left unset for conjugate models.
fn elicit_without_shrinkage(model: ModelId, s: &BackgroundSummary, opts: &ElicitOptions) -> Result<PriorHyper> {
    let mut h = base_hyper(model);
    let within = if model.is_manova() {
        let (mu, between) = manova_means(s, opts.ridge)?;
        h.mu = mu;
        if model.family() != PriorFamily::Conjugate {
            h.between = between;
        }
        ridge(&s.within, opts.ridge)
    } else {
        h.mu = vec![s.mean.clone()];
        if model.family() != PriorFamily::Conjugate {
            h.between = vec![ridge(&s.pooled_between, opts.ridge)];
        }
        ridge(&s.pooled_within, opts.ridge)
    };
    match model.family() {
        PriorFamily::Conjugate | PriorFamily::Hierarchical => {
            let nu = opts.nu();
            h.u = Some(iw_scale_from_within(&within, nu)?);
            h.nu = Some(nu);
        }
        PriorFamily::Lkj => {
            if !(opts.eta > 0.0) {
                return Err(Error::BadValue(format!("eta must be positive, got {}", opts.eta)));
            }
            let fit = lognormal_from_within(&within, opts.sigma_rule, opts.sigma_min)?;
            if fit.clamped {
                log::debug!("LogNormal scale {} clamped to {}", fit.raw_sigma, fit.sigma);
            }
            h.upsilon = Some(fit.upsilon);
            h.sigma = Some(fit.sigma);
            h.eta = Some(opts.eta);
        }
    }
    Ok(h)
}

/// One leave-one-out fold: the held-out writer's statistics and the
/// hyperparameters elicited from everyone else.
struct Fold {
    stats: SuffStats,
    hyper: PriorHyper,
}

fn loo_folds(bg: &Dataset, model: ModelId, opts: &ElicitOptions) -> Result<Vec<Fold>> {
    let writers = bg.writers();
    if writers.len() < 3 {
        return Err(Error::NeedMoreWriters(writers.len()));
    }
    writers
        .iter()
        .map(|&w| {
            let rest = bg.filter(|r| r.writer != w);
            let s = summarize_background(&rest)?;
            Ok(Fold {
                stats: SuffStats::from_dataset(&bg.writer(w), model.design()),
                hyper: elicit_without_shrinkage(model, &s, opts)?,
            })
        })
        .collect()
}

fn fold_objective(folds: &mut [Fold], shrink: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for f in folds.iter_mut() {
        if f.hyper.model.is_manova() {
            f.hyper.k0_diag = Some(shrink.to_vec());
        } else {
            f.hyper.k0 = Some(shrink[0]);
        }
        total += closed_form_log_marginal(&f.stats, &f.hyper)?;
    }
    Ok(total)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::BadGrid("empty grid".into()));
    }
    if let Some(g) = grid.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(Error::BadGrid(format!("grid value {g} outside (0, 1)")));
    }
    Ok(())
}

/// Summed leave-one-out M1 log marginals at each grid value.
pub fn k0_objective(bg: &Dataset, grid: &[f64], opts: &ElicitOptions) -> Result<Vec<f64>> {
    check_grid(grid)?;
    let mut folds = loo_folds(bg, ModelId::M1, opts)?;
    grid.iter().map(|&k| fold_objective(&mut folds, &[k])).collect()
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Grid value of `k0` maximizing the summed leave-one-out M1 log marginal;
/// ties go to the first grid index.
pub fn grid_search_k0(bg: &Dataset, grid: &[f64], opts: &ElicitOptions) -> Result<f64> {
    let obj = k0_objective(bg, grid, opts)?;
    Ok(grid[argmax_first(&obj)])
}

/// Points of the product grid in lexicographic order (last axis fastest).
pub fn product_grid(axis: &[f64], dims: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for _ in 0..dims {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&g| {
                    let mut v = prefix.clone();
                    v.push(g);
                    v
                })
            })
            .collect();
    }
    out
}

/// Summed leave-one-out M4 log marginals over the full product grid.
pub fn big_k0_objective(bg: &Dataset, axis: &[f64], opts: &ElicitOptions) -> Result<Vec<(Vec<f64>, f64)>> {
    check_grid(axis)?;
    let mut folds = loo_folds(bg, ModelId::M4, opts)?;
    product_grid(axis, L)
        .into_iter()
        .map(|k| {
            let v = fold_objective(&mut folds, &k)?;
            Ok((k, v))
        })
        .collect()
}

/// Diagonal `K0` maximizing the summed leave-one-out M4 log marginal.
pub fn grid_search_big_k0(bg: &Dataset, axis: &[f64], opts: &ElicitOptions) -> Result<Vec<f64>> {
    let obj = big_k0_objective(bg, axis, opts)?;
    let values: Vec<f64> = obj.iter().map(|(_, v)| *v).collect();
    Ok(obj[argmax_first(&values)].0.clone())
}

pub fn elicit_priors(model: ModelId, bg: &Dataset, opts: &ElicitOptions) -> Result<PriorHyper> {
    let s = summarize_background(bg)?;
    let mut h = elicit_without_shrinkage(model, &s, opts)?;
    match model {
        ModelId::M1 => {
            h.k0 = Some(match opts.k0 {
                Some(k) => k,
                None => grid_search_k0(bg, &opts.k0_grid, opts)?,
            });
        }
        ModelId::M4 => {
            h.k0_diag = Some(match &opts.k0_diag {
                Some(k) => k.clone(),
                None => grid_search_big_k0(bg, &opts.k0_axis_grid, opts)?,
            });
        }
        _ => {}
    }
    h.validate()?;
    Ok(h)
}
