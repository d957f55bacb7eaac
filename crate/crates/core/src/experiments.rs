//! Discrimination studies, background-subsampling and prior sensitivity
//! sweeps, and writer-to-writer Mahalanobis distances.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_scaling, background_excluding, feature_sd, split_writer, Character, Dataset, Record};
use crate::elicit::{elicit_priors, ElicitOptions};
use crate::error::{Error, Result};
use crate::evidence::{bayes_factor_with_hyper, EvidenceResult, EvidenceSettings};
use crate::linalg::{mean_cov, mix_seed, ridge, spd_inverse};
use crate::models::{ModelId, PriorFamily, PriorHyper};

/// Which part of the data a model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Character(Character),
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::All => f.write_str("all"),
            Scope::Character(c) => write!(f, "{c}"),
        }
    }
}

impl Scope {
    fn restrict(self, data: &Dataset) -> Dataset {
        match self {
            Scope::All => data.clone(),
            Scope::Character(c) => data.only_character(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub models: Vec<ModelId>,
    /// Also fit the Normal models to each character separately.
    pub per_character: bool,
    pub repetitions: usize,
    pub pi_range: (f64, f64),
    pub seed: u64,
    pub evidence: EvidenceSettings,
    pub nu_values: Vec<f64>,
    pub eta_values: Vec<f64>,
    pub subsample_fraction: f64,
    pub subsample_with_replacement: bool,
    pub subsample_iterations: usize,
    /// Background subsamples per pair in the prior sweeps.
    pub sweep_subsamples: usize,
    pub hard_pairs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            models: ModelId::ALL.to_vec(),
            per_character: true,
            repetitions: 100,
            pi_range: (0.35, 0.65),
            seed: 0,
            evidence: EvidenceSettings::default(),
            nu_values: vec![11.0, 20.0, 30.0, 40.0, 50.0],
            eta_values: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            subsample_fraction: 0.5,
            subsample_with_replacement: true,
            subsample_iterations: 30,
            sweep_subsamples: 10,
            hard_pairs: 4,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pi_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("pi range ({lo}, {hi}) must lie inside (0, 1)")));
        }
        if self.repetitions == 0 || self.subsample_iterations == 0 || self.sweep_subsamples == 0 {
            return Err(Error::Config("repetition and iteration counts must be positive".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config("subsample fraction must lie in (0, 1]".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        Ok(())
    }

    /// Every (model, scope) combination a study evaluates.
    pub fn specs(&self) -> Vec<(ModelId, Scope)> {
        let mut out: Vec<(ModelId, Scope)> = self.models.iter().map(|m| (*m, Scope::All)).collect();
        if self.per_character {
            for m in self.models.iter().filter(|m| !m.is_manova()) {
                out.extend(Character::ALL.iter().map(|c| (*m, Scope::Character(*c))));
            }
        }
        out
    }

    fn draw_pi(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.pi_range;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    }
}

/// Background standardization and elicited priors for a set of model specs.
struct Prepared {
    sd: [f64; crate::P],
    hypers: BTreeMap<(ModelId, Scope), PriorHyper>,
}

fn prepare(background: &Dataset, specs: &[(ModelId, Scope)], opts: &ElicitOptions) -> Result<Prepared> {
    let sd = feature_sd(background);
    let bg = apply_scaling(background, &sd)?;
    let hypers = specs
        .iter()
        .map(|&(m, s)| Ok(((m, s), elicit_priors(m, &s.restrict(&bg), opts)?)))
        .collect::<Result<_>>()?;
    Ok(Prepared { sd, hypers })
}

fn evaluate(
    prep: &Prepared,
    spec: (ModelId, Scope),
    y1: &Dataset,
    y2: &Dataset,
    settings: &EvidenceSettings,
) -> Result<EvidenceResult> {
    let y1 = spec.1.restrict(&apply_scaling(y1, &prep.sd)?);
    let y2 = spec.1.restrict(&apply_scaling(y2, &prep.sd)?);
    bayes_factor_with_hyper(&prep.hypers[&spec], &y1, &y2, settings)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    SameWriter,
    DifferentWriter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    pub questioned_writer: u64,
    pub control_writer: u64,
    pub repetition: usize,
    pub pi_split: f64,
    pub model: ModelId,
    pub scope: Scope,
    pub evidence: Option<EvidenceResult>,
    pub error: Option<String>,
}

impl CaseResult {
    pub fn log_bf(&self) -> Option<f64> {
        self.evidence.as_ref().map(|e| e.log_bf)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub model: ModelId,
    pub scope: Scope,
    pub cases: usize,
    pub failed: usize,
    /// False negatives in a same-writer study, false positives otherwise.
    pub errors: usize,
    pub correct: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub cases: Vec<CaseResult>,
    pub summary: Vec<RateSummary>,
}

impl StudyReport {
    fn new(kind: StudyKind, cases: Vec<CaseResult>) -> Self {
        let mut groups: BTreeMap<(ModelId, Scope), Vec<&CaseResult>> = BTreeMap::new();
        for c in &cases {
            groups.entry((c.model, c.scope)).or_default().push(c);
        }
        let summary = groups
            .into_iter()
            .map(|((model, scope), cs)| {
                let failed = cs.iter().filter(|c| c.evidence.is_none()).count();
                let errors = cs
                    .iter()
                    .filter_map(|c| c.log_bf())
                    .filter(|&b| match kind {
                        StudyKind::SameWriter => b < 0.0,
                        StudyKind::DifferentWriter => b > 0.0,
                    })
                    .count();
                let valid = cs.len() - failed;
                RateSummary {
                    model,
                    scope,
                    cases: cs.len(),
                    failed,
                    errors,
                    correct: valid - errors,
                    rate: if valid > 0 { errors as f64 / valid as f64 } else { f64::NAN },
                }
            })
            .collect();
        Self { kind, cases, summary }
    }

    pub fn rate(&self, model: ModelId, scope: Scope) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.model == model && s.scope == scope)
            .map(|s| s.rate)
    }

    /// One row per case and model.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "case", "questioned", "control", "repetition", "pi_split", "model", "scope", "log_bf",
            "combined_mce", "log_m_h1", "log_m_y1_h2", "log_m_y2_h2", "error",
        ])?;
        for c in &self.cases {
            let e = c.evidence.as_ref();
            let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                c.case.to_string(),
                c.questioned_writer.to_string(),
                c.control_writer.to_string(),
                c.repetition.to_string(),
                c.pi_split.to_string(),
                c.model.to_string(),
                c.scope.to_string(),
                num(e.map(|e| e.log_bf)),
                num(e.and_then(|e| e.combined_mce)),
                num(e.map(|e| e.log_m_h1)),
                num(e.map(|e| e.log_m_y1_h2)),
                num(e.map(|e| e.log_m_y2_h2)),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned text summary of error rates.
    pub fn table(&self) -> String {
        let label = match self.kind {
            StudyKind::SameWriter => "FN",
            StudyKind::DifferentWriter => "FP",
        };
        let mut out = format!(
            "{:<6} {:<6} {:>7} {:>7} {:>7} {:>9}\n",
            "model", "scope", "cases", "failed", label, "rate (%)"
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<6} {:<6} {:>7} {:>7} {:>7} {:>9.2}",
                s.model.to_string(),
                s.scope.to_string(),
                s.cases,
                s.failed,
                s.errors,
                100.0 * s.rate
            );
        }
        out
    }
}

/// One questioned/control split with its background.
struct Case {
    repetition: usize,
    pi: f64,
    y1: Dataset,
    y2: Dataset,
}

fn make_case(data: &Dataset, cfg: &StudyConfig, index: usize, q: u64, c: u64, repetition: usize) -> Result<Case> {
    let seed = mix_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = cfg.draw_pi(&mut rng);
    let split_seed = mix_seed(seed, 1);
    let (y1, y2) = if q == c {
        split_writer(data, q, pi, split_seed)?
    } else {
        (
            split_writer(data, q, pi, split_seed)?.0,
            split_writer(data, c, pi, mix_seed(seed, 2))?.1,
        )
    };
    Ok(Case {
        repetition,
        pi,
        y1,
        y2,
    })
}

fn case_settings(cfg: &StudyConfig, case: usize, spec: usize) -> EvidenceSettings {
    EvidenceSettings {
        seed: mix_seed(mix_seed(cfg.seed, case as u64), 100 + spec as u64),
        ..cfg.evidence.clone()
    }
}

fn run_study(data: &Dataset, cfg: &StudyConfig, kind: StudyKind, pairs: Vec<(u64, u64)>) -> Result<StudyReport> {
    cfg.validate()?;
    let specs = cfg.specs();
    // one elicitation per distinct background
    let prepared: BTreeMap<(u64, u64), std::result::Result<Prepared, String>> = pairs
        .par_iter()
        .map(|&(q, c)| {
            let bg = background_excluding(data, &[q, c]);
            ((q, c), prepare(&bg, &specs, &cfg.evidence.elicit).map_err(|e| e.to_string()))
        })
        .collect();
    let jobs: Vec<(usize, (u64, u64), usize)> = pairs
        .iter()
        .enumerate()
        .flat_map(|(pi, &pair)| (0..cfg.repetitions).map(move |r| (pi * cfg.repetitions + r, pair, r)))
        .collect();
    let cases: Vec<Vec<CaseResult>> = jobs
        .par_iter()
        .map(|&(index, (q, c), rep)| {
            let case = make_case(data, cfg, index, q, c, rep);
            specs
                .iter()
                .enumerate()
                .map(|(si, &spec)| {
                    let outcome = match (&case, &prepared[&(q, c)]) {
                        (Err(e), _) => Err(e.to_string()),
                        (_, Err(e)) => Err(e.clone()),
                        (Ok(case), Ok(prep)) => evaluate(prep, spec, &case.y1, &case.y2, &case_settings(cfg, index, si))
                            .map_err(|e| e.to_string()),
                    };
                    if let Err(e) = &outcome {
                        log::warn!("case {index} {} {}: {e}", spec.0, spec.1);
                    }
                    let (pi, repetition) = case.as_ref().map_or((f64::NAN, rep), |c| (c.pi, c.repetition));
                    CaseResult {
                        case: index,
                        questioned_writer: q,
                        control_writer: c,
                        repetition,
                        pi_split: pi,
                        model: spec.0,
                        scope: spec.1,
                        evidence: outcome.as_ref().ok().cloned(),
                        error: outcome.err(),
                    }
                })
                .collect()
        })
        .collect();
    let cases: Vec<CaseResult> = cases.into_iter().flatten().collect();
    log::info!("{} case evaluations done", cases.len());
    Ok(StudyReport::new(kind, cases))
}

/// Every writer against itself, `repetitions` random splits each.
pub fn run_same_writer_study(data: &Dataset, cfg: &StudyConfig) -> Result<StudyReport> {
    let writers = data.writers();
    if writers.len() < 3 {
        return Err(Error::NeedMoreWriters(writers.len()));
    }
    let pairs = writers.iter().map(|&w| (w, w)).collect();
    run_study(data, cfg, StudyKind::SameWriter, pairs)
}

/// All unordered writer pairs, `repetitions` random splits each.
pub fn run_different_writer_study(data: &Dataset, cfg: &StudyConfig) -> Result<StudyReport> {
    let writers = data.writers();
    if writers.len() < 4 {
        return Err(Error::NeedMoreWriters(writers.len()));
    }
    let mut pairs = Vec::new();
    for (i, &a) in writers.iter().enumerate() {
        for &b in &writers[i + 1..] {
            pairs.push((a, b));
        }
    }
    run_study(data, cfg, StudyKind::DifferentWriter, pairs)
}

/// Resamples every writer-character cell to `fraction` of its size.
/// Repetitions are renumbered so resampled duplicates stay distinct.
pub fn subsample_background<R: Rng + ?Sized>(
    background: &Dataset,
    fraction: f64,
    with_replacement: bool,
    rng: &mut R,
) -> Result<Dataset> {
    let mut records = Vec::with_capacity(background.len());
    for ((_, _), cell) in background.cells() {
        let n = cell.len();
        let k = ((fraction * n as f64).round() as usize).clamp(2.min(n), n.max(1));
        let picked: Vec<&Record> = if with_replacement {
            (0..k).map(|_| *cell.choose(rng).expect("nonempty cell")).collect()
        } else {
            let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| cell[i]).collect()
        };
        records.extend(picked.into_iter().enumerate().map(|(i, r)| Record {
            repetition: i as u64 + 1,
            ..r.clone()
        }));
    }
    Dataset::new(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleCase {
    pub questioned_writer: u64,
    pub control_writer: u64,
    pub model: ModelId,
    pub scope: Scope,
    pub reference_log_bf: Option<f64>,
    pub log_bfs: Vec<f64>,
    pub failed: usize,
    pub min: f64,
    pub max: f64,
    /// Subsample Bayes factors whose sign differs from the reference.
    pub shifts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleReport {
    pub cases: Vec<SubsampleCase>,
    /// Per model and scope: shifted subsample BFs over all subsample BFs.
    pub shift_rates: Vec<(ModelId, Scope, f64)>,
}

impl SubsampleReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<6} {:<6} {:>5} {:>5} {:>10} {:>9} {:>9} {:>6}\n",
            "model", "scope", "q", "c", "reference", "min", "max", "shifts"
        );
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{:<6} {:<6} {:>5} {:>5} {:>10.3} {:>9.3} {:>9.3} {:>6}",
                c.model.to_string(),
                c.scope.to_string(),
                c.questioned_writer,
                c.control_writer,
                c.reference_log_bf.unwrap_or(f64::NAN),
                c.min,
                c.max,
                c.shifts
            );
        }
        for (m, s, r) in &self.shift_rates {
            let _ = writeln!(out, "shift rate {m} {s}: {:.2}%", 100.0 * r);
        }
        out
    }
}

/// Counts of subsample Bayes factors disagreeing in sign with the reference.
pub fn support_shifts(reference: f64, log_bfs: &[f64]) -> usize {
    log_bfs.iter().filter(|b| (**b > 0.0) != (reference > 0.0)).count()
}

/// One fixed split per case, Bayes factors under `subsample_iterations`
/// resampled backgrounds. A pair `(w, w)` is a same-writer case.
pub fn run_subsample_sensitivity(data: &Dataset, cfg: &StudyConfig, pairs: &[(u64, u64)]) -> Result<SubsampleReport> {
    cfg.validate()?;
    let specs = cfg.specs();
    let per_pair: Vec<Vec<SubsampleCase>> = pairs
        .par_iter()
        .enumerate()
        .map(|(pi, &(q, c))| -> Result<Vec<SubsampleCase>> {
            let case = make_case(data, cfg, pi, q, c, 0)?;
            let bg = background_excluding(data, &[q, c]);
            let reference = prepare(&bg, &specs, &cfg.evidence.elicit)?;
            let subsamples: Vec<Result<Prepared>> = (0..cfg.subsample_iterations)
                .into_par_iter()
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, pi as u64), 1000 + k as u64));
                    let sub = subsample_background(&bg, cfg.subsample_fraction, cfg.subsample_with_replacement, &mut rng)?;
                    prepare(&sub, &specs, &cfg.evidence.elicit)
                })
                .collect();
            Ok(specs
                .iter()
                .enumerate()
                .map(|(si, &spec)| {
                    // common random numbers across subsamples
                    let settings = case_settings(cfg, pi, si);
                    let reference_log_bf = evaluate(&reference, spec, &case.y1, &case.y2, &settings)
                        .map(|e| e.log_bf)
                        .ok();
                    let results: Vec<Option<f64>> = subsamples
                        .par_iter()
                        .map(|p| {
                            p.as_ref()
                                .ok()
                                .and_then(|p| evaluate(p, spec, &case.y1, &case.y2, &settings).ok())
                                .map(|e| e.log_bf)
                        })
                        .collect();
                    let log_bfs: Vec<f64> = results.iter().flatten().copied().collect();
                    SubsampleCase {
                        questioned_writer: q,
                        control_writer: c,
                        model: spec.0,
                        scope: spec.1,
                        reference_log_bf,
                        failed: results.len() - log_bfs.len(),
                        min: log_bfs.iter().copied().fold(f64::INFINITY, f64::min),
                        max: log_bfs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        shifts: reference_log_bf.map_or(0, |r| support_shifts(r, &log_bfs)),
                        log_bfs,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let cases: Vec<SubsampleCase> = per_pair.into_iter().flatten().collect();
    let mut totals: BTreeMap<(ModelId, Scope), (usize, usize)> = BTreeMap::new();
    for c in &cases {
        let t = totals.entry((c.model, c.scope)).or_default();
        t.0 += c.shifts;
        t.1 += c.log_bfs.len();
    }
    let shift_rates = totals
        .into_iter()
        .map(|((m, s), (k, n))| (m, s, k as f64 / n.max(1) as f64))
        .collect();
    Ok(SubsampleReport { cases, shift_rates })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Nu,
    Eta,
}

impl SweepParameter {
    fn applies_to(self, model: ModelId) -> bool {
        match self {
            SweepParameter::Nu => model.family() != PriorFamily::Lkj,
            SweepParameter::Eta => model.family() == PriorFamily::Lkj,
        }
    }

    fn set(self, opts: &ElicitOptions, value: f64) -> ElicitOptions {
        let mut o = opts.clone();
        match self {
            SweepParameter::Nu => o.nu = Some(value),
            SweepParameter::Eta => o.eta = value,
        }
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub questioned_writer: u64,
    pub control_writer: u64,
    pub subsample: usize,
    pub model: ModelId,
    pub value: f64,
    pub log_bf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub model: ModelId,
    pub values: Vec<f64>,
    pub mean_log_bf: Vec<f64>,
    pub failed: Vec<usize>,
    /// Least-squares slope of mean log BF against the swept value.
    pub slope: f64,
}

impl SweepCurve {
    pub fn is_increasing(&self) -> bool {
        self.mean_log_bf.windows(2).all(|w| w[1] > w[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParameter,
    pub points: Vec<SweepPoint>,
    pub curves: Vec<SweepCurve>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        for c in &self.curves {
            let _ = writeln!(out, "{} slope {:.3}", c.model, c.slope);
            for (v, m) in c.values.iter().zip(&c.mean_log_bf) {
                let _ = writeln!(out, "  {:>8.2} {:>12.3}", v, m);
            }
        }
        out
    }
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean different-writer log BF as one prior parameter varies, on
/// `sweep_subsamples` background subsamples per pair. The same split, the same
/// subsample and the same Monte Carlo seeds are reused across values.
pub fn run_sweep(data: &Dataset, cfg: &StudyConfig, pairs: &[(u64, u64)], parameter: SweepParameter) -> Result<SweepReport> {
    cfg.validate()?;
    let models: Vec<ModelId> = cfg.models.iter().copied().filter(|m| parameter.applies_to(*m)).collect();
    if models.is_empty() {
        return Err(Error::Config(format!("no selected model has a {parameter:?} parameter")));
    }
    let values = match parameter {
        SweepParameter::Nu => &cfg.nu_values,
        SweepParameter::Eta => &cfg.eta_values,
    };
    let jobs: Vec<(usize, (u64, u64), usize)> = pairs
        .iter()
        .enumerate()
        .flat_map(|(pi, &pair)| (0..cfg.sweep_subsamples).map(move |s| (pi, pair, s)))
        .collect();
    let points: Vec<Vec<SweepPoint>> = jobs
        .par_iter()
        .map(|&(pi, (q, c), sub)| -> Result<Vec<SweepPoint>> {
            let index = pi * cfg.sweep_subsamples + sub;
            let case = make_case(data, cfg, index, q, c, sub)?;
            let bg = background_excluding(data, &[q, c]);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, index as u64), 2000));
            let bg = subsample_background(&bg, cfg.subsample_fraction, cfg.subsample_with_replacement, &mut rng)?;
            let mut out = Vec::new();
            for (mi, &model) in models.iter().enumerate() {
                let settings = case_settings(cfg, index, mi);
                for &value in values {
                    let opts = parameter.set(&cfg.evidence.elicit, value);
                    let log_bf = prepare(&bg, &[(model, Scope::All)], &opts)
                        .and_then(|p| evaluate(&p, (model, Scope::All), &case.y1, &case.y2, &settings))
                        .map(|e| e.log_bf);
                    if let Err(e) = &log_bf {
                        log::warn!("sweep {model} {value} pair ({q}, {c}): {e}");
                    }
                    out.push(SweepPoint {
                        questioned_writer: q,
                        control_writer: c,
                        subsample: sub,
                        model,
                        value,
                        log_bf: log_bf.ok(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let points: Vec<SweepPoint> = points.into_iter().flatten().collect();
    let curves = models
        .iter()
        .map(|&model| {
            let (mut means, mut failed) = (Vec::new(), Vec::new());
            for &v in values {
                let at: Vec<&SweepPoint> = points.iter().filter(|p| p.model == model && p.value == v).collect();
                let bfs: Vec<f64> = at.iter().filter_map(|p| p.log_bf).collect();
                failed.push(at.len() - bfs.len());
                means.push(bfs.iter().sum::<f64>() / bfs.len().max(1) as f64);
            }
            SweepCurve {
                model,
                values: values.clone(),
                slope: slope(values, &means),
                mean_log_bf: means,
                failed,
            }
        })
        .collect();
    Ok(SweepReport {
        parameter,
        points,
        curves,
    })
}

pub fn run_nu_sweep(data: &Dataset, cfg: &StudyConfig, pairs: &[(u64, u64)]) -> Result<SweepReport> {
    run_sweep(data, cfg, pairs, SweepParameter::Nu)
}

pub fn run_eta_sweep(data: &Dataset, cfg: &StudyConfig, pairs: &[(u64, u64)]) -> Result<SweepReport> {
    run_sweep(data, cfg, pairs, SweepParameter::Eta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisMatrix {
    pub writers: Vec<u64>,
    /// Symmetrized square-root distances, row-major.
    pub distances: Vec<Vec<f64>>,
}

impl MahalanobisMatrix {
    /// The `k` off-diagonal pairs with the smallest distances.
    pub fn closest_pairs(&self, k: usize) -> Vec<(u64, u64)> {
        let m = self.writers.len();
        let mut pairs: Vec<(f64, u64, u64)> = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                pairs.push((self.distances[i][j], self.writers[i], self.writers[j]));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.into_iter().take(k).map(|(_, a, b)| (a, b)).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["writer".to_string()];
        header.extend(self.writers.iter().map(|w| w.to_string()));
        w.write_record(&header)?;
        for (i, row) in self.distances.iter().enumerate() {
            let mut r = vec![self.writers[i].to_string()];
            r.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// For writers `i` and `j`: the square root of the mean squared Mahalanobis
/// distance of `i`'s observations from `j`'s mean under `j`'s covariance,
/// averaged over both directions.
pub fn mahalanobis_matrix(data: &Dataset) -> Result<MahalanobisMatrix> {
    let writers = data.writers();
    let rows: Vec<Vec<DVector<f64>>> = writers
        .iter()
        .map(|&w| {
            data.writer(w)
                .records()
                .iter()
                .map(|r| DVector::from_column_slice(r.features.as_slice()))
                .collect()
        })
        .collect();
    let fits = rows
        .iter()
        .zip(&writers)
        .map(|(r, w)| {
            if r.len() < 2 {
                return Err(Error::NeedMoreDraws { needed: 2, got: r.len() });
            }
            let (mean, cov) = mean_cov(r);
            let inv = match spd_inverse(&cov, "writer covariance") {
                Ok(inv) if r.len() > cov.nrows() => inv,
                _ => {
                    log::warn!("writer {w}: singular covariance, adding a ridge");
                    spd_inverse(&ridge(&cov, 1e-6), "writer covariance")?
                }
            };
            Ok((mean, inv))
        })
        .collect::<Result<Vec<(DVector<f64>, DMatrix<f64>)>>>()?;
    let m = writers.len();
    let directed = |i: usize, j: usize| -> f64 {
        let (mean, inv) = &fits[j];
        let total: f64 = rows[i]
            .iter()
            .map(|x| {
                let d = x - mean;
                d.dot(&(inv * &d))
            })
            .sum();
        (total / rows[i].len() as f64).sqrt()
    };
    let mut distances = vec![vec![0.0; m]; m];
    for i in 0..m {
        distances[i][i] = directed(i, i);
        for j in 0..i {
            let v = 0.5 * (directed(i, j) + directed(j, i));
            distances[i][j] = v;
            distances[j][i] = v;
        }
    }
    Ok(MahalanobisMatrix { writers, distances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_population, PopulationConfig, Reps};

    fn pop(writers: usize, reps: usize, seed: u64) -> Dataset {
        generate_population(&PopulationConfig {
            writers,
            reps: Reps::Fixed(reps),
            related: vec![],
            seed,
            ..PopulationConfig::default()
        })
        .unwrap()
        .0
    }

    fn quick(models: Vec<ModelId>) -> StudyConfig {
        let mut cfg = StudyConfig {
            models,
            per_character: false,
            repetitions: 1,
            seed: 5,
            ..StudyConfig::default()
        };
        cfg.evidence.elicit.k0 = Some(0.3);
        cfg.evidence.elicit.k0_diag = Some(vec![0.3; 4]);
        cfg
    }

    #[test]
    fn case_counts_and_partitions() {
        let data = pop(4, 10, 1);
        let cfg = quick(vec![ModelId::M1, ModelId::M4]);
        let same = run_same_writer_study(&data, &cfg).unwrap();
        assert_eq!(same.cases.len(), 4 * 2);
        let diff = run_different_writer_study(&data, &cfg).unwrap();
        assert_eq!(diff.cases.len(), 6 * 2);
        for r in [&same, &diff] {
            for s in &r.summary {
                assert_eq!(s.errors + s.correct + s.failed, s.cases);
            }
        }
        assert_eq!(same.to_csv().unwrap().lines().count(), 9);
        assert!(same.table().contains("FN"));
    }

    #[test]
    fn per_character_specs_only_for_normal_models() {
        let cfg = StudyConfig {
            models: vec![ModelId::M1, ModelId::M4],
            ..StudyConfig::default()
        };
        let specs = cfg.specs();
        assert_eq!(specs.len(), 2 + 4);
        assert!(specs.iter().all(|(m, s)| *s == Scope::All || !m.is_manova()));
    }

    #[test]
    fn studies_are_deterministic() {
        let data = pop(4, 8, 2);
        let mut cfg = quick(vec![ModelId::M2]);
        cfg.evidence.sampler.iterations = 200;
        cfg.evidence.sampler.burn_in = 100;
        cfg.evidence.runs = 2;
        let a = run_same_writer_study(&data, &cfg).unwrap();
        let b = run_same_writer_study(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    }

    #[test]
    fn full_subsample_without_replacement_is_the_background() {
        let data = pop(5, 6, 3);
        let mut cfg = quick(vec![ModelId::M1]);
        cfg.subsample_fraction = 1.0;
        cfg.subsample_with_replacement = false;
        cfg.subsample_iterations = 4;
        let r = run_subsample_sensitivity(&data, &cfg, &[(1, 2)]).unwrap();
        let c = &r.cases[0];
        assert_eq!(c.log_bfs.len(), 4);
        assert!(c.log_bfs.iter().all(|b| Some(*b) == c.reference_log_bf));
        assert_eq!(c.shifts, 0);
    }

    #[test]
    fn subsampling_keeps_every_cell() {
        let data = pop(3, 9, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = subsample_background(&data, 0.5, true, &mut rng).unwrap();
        assert_eq!(sub.cells().len(), data.cells().len());
        assert!(sub.cells().values().all(|c| c.len() == 5));
    }

    #[test]
    fn shift_bookkeeping() {
        assert_eq!(support_shifts(1.0, &[0.5; 30]), 0);
        assert_eq!(support_shifts(1.0, &[0.5, -0.2, -3.0]), 2);
        assert_eq!(support_shifts(-1.0, &[0.5, -0.2]), 1);
    }

    #[test]
    fn nu_sweep_shape() {
        let data = pop(5, 8, 6);
        let mut cfg = quick(vec![ModelId::M1, ModelId::M3]);
        cfg.sweep_subsamples = 2;
        let r = run_nu_sweep(&data, &cfg, &[(1, 2)]).unwrap();
        assert_eq!(r.curves.len(), 1);
        assert_eq!(r.points.len(), 2 * 5);
        assert!(r.curves[0].slope.is_finite());
        assert!(run_eta_sweep(&data, &quick(vec![ModelId::M1]), &[(1, 2)]).is_err());
    }

    #[test]
    fn mahalanobis_properties() {
        let mut data = pop(4, 20, 7);
        // writer 5 duplicates writer 1
        let copy: Vec<Record> = data
            .writer(1)
            .records()
            .iter()
            .map(|r| Record { writer: 5, ..r.clone() })
            .collect();
        data = data.union(&Dataset::new(copy).unwrap()).unwrap();
        let m = mahalanobis_matrix(&data).unwrap();
        let d = &m.distances;
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(d[i][j], d[j][i]);
            }
        }
        assert!((d[0][4] - d[0][0]).abs() < 1e-10);
        // with n observations the self distance is sqrt(p (n - 1) / n)
        let expect = (9.0 * 79.0 / 80.0f64).sqrt();
        assert!((d[1][1] - expect).abs() < 1e-9, "{} vs {expect}", d[1][1]);
        assert_eq!(m.closest_pairs(1), vec![(1, 5)]);
    }

    #[test]
    fn planted_separation_orders_distances() {
        let data = pop(3, 30, 8);
        let shifted = data.writer(3).map_features(|f| f[0] += 10.0);
        let recs: Vec<Record> = data
            .filter(|r| r.writer != 3)
            .records()
            .iter()
            .cloned()
            .chain(shifted.records().iter().cloned())
            .collect();
        let far = mahalanobis_matrix(&Dataset::new(recs).unwrap()).unwrap();
        let near = mahalanobis_matrix(&data).unwrap();
        assert!(far.distances[0][2] > near.distances[0][2]);
    }
}
