//! Hierarchical synthetic writer populations.
//!
//! Each writer `i` gets a within-writer covariance `W_i` and, per character
//! `l`, a mean `theta_il ~ N(mu + offset_l, B_l)`. Repetitions are drawn from
//! `N(theta_il, W_i)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Character, Dataset, FeatureVector, Record, L, P};
use crate::error::{Error, Result};
use crate::linalg::{chol_lower, mvn_sample, symmetrize, wishart_lower};
use crate::serde_util;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Reps {
    Fixed(usize),
    /// Inclusive range, drawn uniformly per writer-character cell.
    Range(usize, usize),
}

/// Writer `writer` is generated as a perturbed copy of `source`:
/// `theta = theta_source + closeness * N(0, B_l)`, with its own `W`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelatedWriter {
    pub writer: usize,
    pub source: usize,
    pub closeness: f64,
}

#[derive(Clone, Debug)]
pub struct PopulationConfig {
    pub writers: usize,
    pub characters: usize,
    pub reps: Reps,
    pub mu: DVector<f64>,
    pub between: Vec<DMatrix<f64>>,
    pub within: DMatrix<f64>,
    pub offsets: Vec<DVector<f64>>,
    /// Degrees of freedom of the Wishart jitter `W_i ~ Wishart(W / k, k)`;
    /// `None` gives every writer the template `W`.
    pub within_dof: Option<f64>,
    /// Log-scale SD of per-feature scale jitter applied on top of `W_i`.
    pub scale_jitter: f64,
    pub related: Vec<RelatedWriter>,
    pub seed: u64,
}

fn ar1(rho: f64, scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(P, P, |i, j| {
        rho.powi((i as i32 - j as i32).abs()) * scale[i] * scale[j]
    })
}

impl Default for PopulationConfig {
    fn default() -> Self {
        let mu = DVector::from_vec(vec![8.0, 1.2, -0.6, 0.5, 0.3, -0.25, 0.15, 0.1, -0.05]);
        let within_sd = [0.9, 0.12, 0.1, 0.08, 0.07, 0.05, 0.05, 0.04, 0.035];
        let within = ar1(0.8, &within_sd);
        let between = [1.0, 0.9, 1.1, 0.8]
            .iter()
            .map(|f| ar1(0.3, &within_sd) * (0.8 * f * f))
            .collect();
        let offsets = (0..L)
            .map(|l| {
                DVector::from_fn(P, |k, _| {
                    if l == 0 {
                        0.0
                    } else {
                        2.5 * within_sd[k] * ((l * (k + 2)) as f64).sin()
                    }
                })
            })
            .collect();
        let related = [(7, 6, 0.15), (8, 6, 0.2), (12, 11, 0.15), (13, 10, 0.2)]
            .into_iter()
            .map(|(writer, source, closeness)| RelatedWriter {
                writer,
                source,
                closeness,
            })
            .collect();
        Self {
            writers: 13,
            characters: L,
            reps: Reps::Fixed(30),
            mu,
            between,
            within,
            offsets,
            within_dof: Some(10.0),
            scale_jitter: 0.3,
            related,
            seed: 1,
        }
    }
}

/// Ground truth behind a generated population. Writer ids are `1..=m`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PopulationTruth {
    pub writers: Vec<u64>,
    pub characters: Vec<Character>,
    /// `theta[i][l]` for writer index `i` and character index `l`.
    pub theta: Vec<Vec<Vec<f64>>>,
    #[serde(with = "serde_util::matrix_vec")]
    pub within: Vec<DMatrix<f64>>,
}

impl PopulationTruth {
    pub fn theta(&self, writer_index: usize, character: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.theta[writer_index][character])
    }
}

fn check(cfg: &PopulationConfig) -> Result<()> {
    if cfg.writers < 2 {
        return Err(Error::NeedMoreWriters(cfg.writers));
    }
    if cfg.characters == 0 || cfg.characters > L {
        return Err(Error::BadValue(format!(
            "character count must lie in 1..={L}, got {}",
            cfg.characters
        )));
    }
    let min_reps = match cfg.reps {
        Reps::Fixed(n) => n,
        Reps::Range(lo, hi) if lo <= hi => lo,
        Reps::Range(lo, hi) => {
            return Err(Error::BadValue(format!("empty repetition range {lo}..={hi}")))
        }
    };
    if min_reps < 2 {
        return Err(Error::BadValue("at least 2 repetitions per cell".into()));
    }
    if cfg.mu.len() != P || cfg.between.len() < cfg.characters || cfg.offsets.len() < cfg.characters {
        return Err(Error::BadValue("population config dimensions".into()));
    }
    for r in &cfg.related {
        if r.source == 0 || r.source >= r.writer || r.writer > cfg.writers {
            return Err(Error::BadValue(format!(
                "related writer {} must follow its source {}",
                r.writer, r.source
            )));
        }
    }
    Ok(())
}

fn jitter_scale<R: Rng>(rng: &mut R, w: &DMatrix<f64>, sd: f64) -> DMatrix<f64> {
    if sd == 0.0 {
        return w.clone();
    }
    let d = DVector::from_fn(P, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        (sd * z).exp()
    });
    DMatrix::from_fn(P, P, |i, j| w[(i, j)] * d[i] * d[j])
}

pub fn generate_population(cfg: &PopulationConfig) -> Result<(Dataset, PopulationTruth)> {
    check(cfg)?;
    let within_l = chol_lower(&cfg.within, "within-writer template")?;
    let between_l = cfg.between[..cfg.characters]
        .iter()
        .map(|b| chol_lower(b, "between-writer covariance"))
        .collect::<Result<Vec<_>>>()?;
    let characters: Vec<Character> = Character::ALL[..cfg.characters].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut theta: Vec<Vec<DVector<f64>>> = Vec::with_capacity(cfg.writers);
    let mut within: Vec<DMatrix<f64>> = Vec::with_capacity(cfg.writers);
    for w in 1..=cfg.writers {
        let base = match cfg.within_dof {
            Some(k) => {
                let g = wishart_lower(&mut rng, &(within_l.clone() / k.sqrt()), k);
                symmetrize(&(&g * g.transpose()))
            }
            None => cfg.within.clone(),
        };
        let wi = jitter_scale(&mut rng, &base, cfg.scale_jitter);
        let th = match cfg.related.iter().find(|r| r.writer == w) {
            Some(r) => (0..cfg.characters)
                .map(|l| {
                    let z = &between_l[l] * crate::linalg::standard_normal_vec(&mut rng, P);
                    &theta[r.source - 1][l] + z * r.closeness
                })
                .collect(),
            None => (0..cfg.characters)
                .map(|l| mvn_sample(&mut rng, &(&cfg.mu + &cfg.offsets[l]), &between_l[l]))
                .collect(),
        };
        theta.push(th);
        within.push(wi);
    }

    let mut records = Vec::new();
    for (i, (th, wi)) in theta.iter().zip(&within).enumerate() {
        let li = chol_lower(wi, "writer covariance")?;
        for (l, &c) in characters.iter().enumerate() {
            let n = match cfg.reps {
                Reps::Fixed(n) => n,
                Reps::Range(lo, hi) => rng.random_range(lo..=hi),
            };
            for rep in 1..=n {
                let x = mvn_sample(&mut rng, &th[l], &li);
                let mut f = [0.0; P];
                f.copy_from_slice(x.as_slice());
                records.push(Record {
                    writer: i as u64 + 1,
                    character: c,
                    repetition: rep as u64,
                    features: FeatureVector::new(f)?,
                });
            }
        }
    }
    let truth = PopulationTruth {
        writers: (1..=cfg.writers as u64).collect(),
        characters,
        theta: theta
            .iter()
            .map(|t| t.iter().map(|v| v.as_slice().to_vec()).collect())
            .collect(),
        within,
    };
    Ok((Dataset::new(records)?, truth))
}
