//! Handwriting measurements: records, CSV ingestion, standardization,
//! corner-point dummy coding and questioned/control splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of measurements per character repetition.
pub const P: usize = 9;

/// Number of supported loop characters.
pub const L: usize = 4;

/// Column names, in storage order.
pub const FEATURE_NAMES: [&str; P] = ["S", "a1", "b1", "a2", "b2", "a3", "b3", "a4", "b4"];

const CSV_HEADER: [&str; 3 + P] = [
    "writer", "char", "rep", "S", "a1", "b1", "a2", "b2", "a3", "b3", "a4", "b4",
];

/// Loop character. `A` is the reference level of the dummy coding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Character {
    A,
    D,
    O,
    Q,
}

impl Character {
    pub const ALL: [Character; L] = [Character::A, Character::D, Character::O, Character::Q];

    /// Position in `ALL`, which is also the dummy-variable column.
    pub fn index(self) -> usize {
        match self {
            Character::A => 0,
            Character::D => 1,
            Character::O => 2,
            Character::Q => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Character::A => "a",
            Character::D => "d",
            Character::O => "o",
            Character::Q => "q",
        }
    }
}

impl fmt::Display for Character {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Character {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "a" => Ok(Character::A),
            "d" => Ok(Character::D),
            "o" => Ok(Character::O),
            "q" => Ok(Character::Q),
            other => Err(Error::BadLabel(other.to_string())),
        }
    }
}

/// The nine measurements of one repetition: S, a1, b1, .., a4, b4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; P]);

impl FeatureVector {
    pub fn new(values: [f64; P]) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::BadValue(format!(
                "feature {} is not finite ({})",
                FEATURE_NAMES[k], values[k]
            )));
        }
        Ok(Self(values))
    }

    pub fn surface(&self) -> f64 {
        self.0[0]
    }

    /// Fourier coefficient pair (a_h, b_h) for harmonic `h` in 1..=4.
    pub fn harmonic(&self, h: usize) -> (f64, f64) {
        assert!((1..=4).contains(&h), "harmonic {h} out of range");
        (self.0[2 * h - 1], self.0[2 * h])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub writer: u64,
    pub character: Character,
    pub repetition: u64,
    pub features: FeatureVector,
}

impl Record {
    fn key(&self) -> (u64, Character, u64) {
        (self.writer, self.character, self.repetition)
    }
}

/// Corner-point design row for one observation: intercept plus one
/// indicator for each non-reference character.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignRow(pub [f64; L]);

/// Dummy coding with character `a` as the reference group.
pub fn dummy_code(character: Character) -> DesignRow {
    let mut c = [0.0; L];
    c[0] = 1.0;
    if character.index() > 0 {
        c[character.index()] = 1.0;
    }
    DesignRow(c)
}

/// Label-level entry point for callers holding raw strings.
pub fn dummy_code_label(label: &str) -> Result<DesignRow> {
    Ok(dummy_code(label.parse()?))
}

/// A collection of records with unique (writer, character, repetition) keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<Record>,
    /// Per-feature divisors applied by [`standardize`], relative to raw units.
    scaling: Option<[f64; P]>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            FeatureVector::new(r.features.0)?;
            if !seen.insert(r.key()) {
                return Err(Error::DuplicateRecord {
                    writer: r.writer,
                    character: r.character.to_string(),
                    repetition: r.repetition,
                });
            }
        }
        Ok(Self {
            records,
            scaling: None,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Subset constructor; keys are already unique.
    fn from_subset(records: Vec<Record>, scaling: Option<[f64; P]>) -> Self {
        Self { records, scaling }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scaling(&self) -> Option<&[f64; P]> {
        self.scaling.as_ref()
    }

    pub fn writers(&self) -> Vec<u64> {
        self.records
            .iter()
            .map(|r| r.writer)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn characters(&self) -> Vec<Character> {
        self.records
            .iter()
            .map(|r| r.character)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn filter(&self, mut keep: impl FnMut(&Record) -> bool) -> Dataset {
        Dataset::from_subset(
            self.records.iter().filter(|r| keep(r)).cloned().collect(),
            self.scaling,
        )
    }

    pub fn writer(&self, writer: u64) -> Dataset {
        self.filter(|r| r.writer == writer)
    }

    pub fn only_character(&self, c: Character) -> Dataset {
        self.filter(|r| r.character == c)
    }

    /// Concatenation of two disjoint datasets (same scaling assumed).
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let mut d = Dataset::new(records)?;
        d.scaling = self.scaling.or(other.scaling);
        Ok(d)
    }

    /// Records grouped by (writer, character), preserving order within a cell.
    pub fn cells(&self) -> BTreeMap<(u64, Character), Vec<&Record>> {
        let mut cells: BTreeMap<(u64, Character), Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            cells.entry((r.writer, r.character)).or_default().push(r);
        }
        cells
    }

    /// Feature column `k` across all records.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.features.0[k]).collect()
    }

    /// Multiplies every feature by `factor[k]` without touching the scaling record.
    pub fn map_features(&self, mut f: impl FnMut(&mut [f64; P])) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                f(&mut r.features.0);
                r
            })
            .collect();
        Dataset::from_subset(records, self.scaling)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            let mut row = vec![
                r.writer.to_string(),
                r.character.to_string(),
                r.repetition.to_string(),
            ];
            row.extend(r.features.0.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Parses the `writer,char,rep,S,a1,b1,a2,b2,a3,b3,a4,b4` CSV layout.
pub fn parse_dataset(csv_text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != CSV_HEADER {
        return Err(Error::BadValue(format!(
            "expected header {:?}, found {:?}",
            CSV_HEADER.join(","),
            names.join(",")
        )));
    }
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let int = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|_| {
                Error::BadValue(format!(
                    "row {}: column {} is not a non-negative integer: {:?}",
                    line + 1,
                    CSV_HEADER[i],
                    field(i)
                ))
            })
        };
        let writer = int(0)?;
        let character: Character = field(1).parse()?;
        let repetition = int(2)?;
        let mut values = [0.0; P];
        for (k, v) in values.iter_mut().enumerate() {
            *v = field(3 + k).parse().map_err(|_| {
                Error::BadValue(format!(
                    "row {}: column {} is not a number: {:?}",
                    line + 1,
                    FEATURE_NAMES[k],
                    field(3 + k)
                ))
            })?;
        }
        records.push(Record {
            writer,
            character,
            repetition,
            features: FeatureVector::new(values)?,
        });
    }
    Dataset::new(records)
}

/// Per-feature sample standard deviations (n - 1 denominator).
pub fn feature_sd(data: &Dataset) -> [f64; P] {
    let n = data.len() as f64;
    let mut sd = [0.0; P];
    for (k, s) in sd.iter_mut().enumerate() {
        let col = data.column(k);
        let mean = col.iter().sum::<f64>() / n;
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        *s = (ss / (n - 1.0)).sqrt();
    }
    sd
}

/// Divides each feature of `data` by its standard deviation in `reference`.
pub fn standardize(data: &Dataset, reference: &Dataset) -> Result<Dataset> {
    if reference.len() < 2 {
        return Err(Error::BadValue(format!(
            "standardization reference needs at least 2 records, got {}",
            reference.len()
        )));
    }
    let sd = feature_sd(reference);
    if let Some(k) = sd.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::DegenerateScale(k));
    }
    let mut out = data.map_features(|f| {
        for (v, s) in f.iter_mut().zip(&sd) {
            *v /= s;
        }
    });
    let mut total = sd;
    if let Some(prev) = data.scaling {
        for (t, p) in total.iter_mut().zip(prev) {
            *t *= p;
        }
    }
    out.scaling = Some(total);
    Ok(out)
}

/// Applies an existing divisor vector (e.g. one computed on background data).
pub fn apply_scaling(data: &Dataset, divisors: &[f64; P]) -> Result<Dataset> {
    if let Some(k) = divisors.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateScale(k));
    }
    let mut out = data.map_features(|f| {
        for (v, s) in f.iter_mut().zip(divisors) {
            *v /= s;
        }
    });
    out.scaling = Some(*divisors);
    Ok(out)
}

/// Splits one writer's records into questioned and control parts, stratified
/// by character: `round(pi_split * n_c)` repetitions of each character go to
/// the questioned side, clamped so both sides keep at least one.
pub fn split_writer(
    data: &Dataset,
    writer: u64,
    pi_split: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(pi_split > 0.0 && pi_split < 1.0) {
        return Err(Error::BadValue(format!(
            "pi_split must lie in (0, 1), got {pi_split}"
        )));
    }
    let own = data.writer(writer);
    if own.is_empty() {
        return Err(Error::UnknownWriter(writer));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut questioned_idx = HashSet::new();
    for c in Character::ALL {
        let idx: Vec<usize> = own
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.character == c)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::SplitInfeasible {
                writer,
                character: c.to_string(),
                count: idx.len(),
            });
        }
        let n = idx.len();
        let q = ((pi_split * n as f64).round() as usize).clamp(1, n - 1);
        let mut shuffled = idx;
        shuffled.shuffle(&mut rng);
        questioned_idx.extend(shuffled.into_iter().take(q));
    }
    let (mut q, mut c) = (Vec::new(), Vec::new());
    for (i, r) in own.records.into_iter().enumerate() {
        if questioned_idx.contains(&i) {
            q.push(r);
        } else {
            c.push(r);
        }
    }
    Ok((
        Dataset::from_subset(q, data.scaling),
        Dataset::from_subset(c, data.scaling),
    ))
}

/// All records whose writer is not in `writers`.
pub fn background_excluding(data: &Dataset, writers: &[u64]) -> Dataset {
    let excluded: HashSet<u64> = writers.iter().copied().collect();
    data.filter(|r| !excluded.contains(&r.writer))
}
