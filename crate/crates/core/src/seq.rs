//! Discrete sequence layer: vocabulary, encoding, edit distance, datasets and
//! fitness normalization.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 20 canonical amino acids in one-letter code.
pub const AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, u8>,
}

impl Vocabulary {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() || symbols.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("vocabulary needs 1..=255 symbols, got {}", symbols.len())));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i as u8).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn amino_acids() -> Self {
        Self::new(AMINO_ACIDS).expect("static alphabet is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, token: u8) -> Option<char> {
        self.symbols.get(token as usize).copied()
    }

    pub fn token(&self, symbol: char) -> Option<u8> {
        self.index.get(&symbol).copied()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }
}

/// A fixed-length string of vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence(Vec<u8>);

impl Sequence {
    pub fn new(tokens: Vec<u8>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_tokens(self) -> Vec<u8> {
        self.0
    }
}

impl From<Vec<u8>> for Sequence {
    fn from(tokens: Vec<u8>) -> Self {
        Self(tokens)
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Sequence> {
    text.chars()
        .enumerate()
        .map(|(index, symbol)| vocab.token(symbol).ok_or(Error::UnknownSymbol { index, symbol }))
        .collect::<Result<Vec<u8>>>()
        .map(Sequence)
}

pub fn detokenize(seq: &Sequence, vocab: &Vocabulary) -> String {
    seq.tokens().iter().map(|&t| vocab.symbol(t).unwrap_or('?')).collect()
}

/// `d x |V|` indicator matrix of a sequence.
pub fn one_hot(seq: &Sequence, vocab_size: usize) -> Array2<f64> {
    let mut out = Array2::zeros((seq.len(), vocab_size));
    for (p, &t) in seq.tokens().iter().enumerate() {
        out[[p, t as usize]] = 1.0;
    }
    out
}

/// Row-major flattened one-hot encodings of a batch, shape `n x (d*|V|)`.
pub fn one_hot_batch(seqs: &[Sequence], vocab_size: usize) -> Array2<f64> {
    let d = seqs.first().map_or(0, Sequence::len);
    let mut out = Array2::zeros((seqs.len(), d * vocab_size));
    for (i, s) in seqs.iter().enumerate() {
        for (p, &t) in s.tokens().iter().enumerate() {
            out[[i, p * vocab_size + t as usize]] = 1.0;
        }
    }
    out
}

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub sequence: Sequence,
    pub raw_fitness: f64,
}

/// Labelled sequences plus the fitness extremes of the full reference set
/// they were drawn from. Subsets keep the parent's extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<FitnessRecord>,
    pub y_min: f64,
    pub y_max: f64,
}

impl Dataset {
    pub fn new(records: Vec<FitnessRecord>, y_min: f64, y_max: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset("no records".into()));
        }
        if !(y_min.is_finite() && y_max.is_finite() && y_min < y_max) {
            return Err(Error::InvalidRange { y_min, y_max });
        }
        let d = records[0].sequence.len();
        for r in &records {
            if r.sequence.len() != d {
                return Err(Error::LengthMismatch { expected: d, got: r.sequence.len() });
            }
            if !r.raw_fitness.is_finite() {
                return Err(Error::NonFinite { context: "dataset fitness".into() });
            }
        }
        Ok(Self { records, y_min, y_max })
    }

    /// Uses the records' own extremes as the reference range.
    pub fn with_own_range(records: Vec<FitnessRecord>) -> Result<Self> {
        let (lo, hi) = records
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.raw_fitness), hi.max(r.raw_fitness)));
        Self::new(records, lo, hi)
    }

    pub fn records(&self) -> &[FitnessRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn seq_len(&self) -> usize {
        self.records[0].sequence.len()
    }

    pub fn sequences(&self) -> Vec<Sequence> {
        self.records.iter().map(|r| r.sequence.clone()).collect()
    }

    pub fn fitness(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.raw_fitness).collect()
    }

    pub fn normalizer(&self) -> FitnessNormalizer {
        FitnessNormalizer { y_min: self.y_min, y_max: self.y_max }
    }

    pub fn normalized_fitness(&self) -> Vec<f64> {
        let norm = self.normalizer();
        self.records.iter().map(|r| norm.normalize(r.raw_fitness)).collect()
    }

    /// Subset that keeps this dataset's reference range.
    pub fn subset(&self, keep: impl IntoIterator<Item = usize>) -> Result<Self> {
        let records = keep.into_iter().map(|i| self.records[i].clone()).collect::<Vec<_>>();
        Self::new(records, self.y_min, self.y_max)
    }
}

/// Affine map sending `y_min -> 0` and `y_max -> 1`. Never clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessNormalizer {
    pub y_min: f64,
    pub y_max: f64,
}

impl FitnessNormalizer {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !(y_min.is_finite() && y_max.is_finite() && y_min < y_max) {
            return Err(Error::InvalidRange { y_min, y_max });
        }
        Ok(Self { y_min, y_max })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.y_min) / (self.y_max - self.y_min)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.y_min + v * (self.y_max - self.y_min)
    }
}

/// Where `load_csv` takes the normalization range from.
#[derive(Debug, Clone, PartialEq)]
pub enum RangeSource<'a> {
    /// Extremes of the loaded file.
    FromFile,
    Declared {
        y_min: f64,
        y_max: f64,
    },
    /// `y_min=<real>` / `y_max=<real>` sidecar file.
    Sidecar(&'a Path),
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    sequence: String,
    fitness: String,
}

pub fn load_csv(path: &Path, vocab: &Vocabulary, range: RangeSource<'_>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    if headers.len() != 2 || &headers[0] != "sequence" || &headers[1] != "fitness" {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "expected header `sequence,fitness`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut records = Vec::new();
    let mut expected_len = None;
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(path, line, e))?;
        let sequence = tokenize(&row.sequence, vocab).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let raw_fitness: f64 = row.fitness.parse().map_err(|_| Error::Csv {
            path: path.to_path_buf(),
            line,
            message: format!("non-numeric fitness {:?}", row.fitness),
        })?;
        if !raw_fitness.is_finite() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line,
                message: format!("non-finite fitness {:?}", row.fitness),
            });
        }
        match expected_len {
            None => expected_len = Some(sequence.len()),
            Some(d) if d != sequence.len() => {
                return Err(Error::RaggedLength { path: path.to_path_buf(), line, expected: d, got: sequence.len() })
            }
            Some(_) => {}
        }
        records.push(FitnessRecord { sequence, raw_fitness });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no records", path.display())));
    }
    match range {
        RangeSource::FromFile => Dataset::with_own_range(records),
        RangeSource::Declared { y_min, y_max } => Dataset::new(records, y_min, y_max),
        RangeSource::Sidecar(p) => {
            let norm = read_range_sidecar(p)?;
            Dataset::new(records, norm.y_min, norm.y_max)
        }
    }
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Csv { path: path.to_path_buf(), line, message: e.to_string() }
}

pub fn read_range_sidecar(path: &Path) -> Result<FitnessNormalizer> {
    let text = std::fs::read_to_string(path)?;
    let mut y_min = None;
    let mut y_max = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Csv {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected `y_min=<real>` or `y_max=<real>`, found {line:?}"),
        };
        let (key, value) = line.split_once('=').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        match key.trim() {
            "y_min" => y_min = Some(value),
            "y_max" => y_max = Some(value),
            _ => return Err(bad()),
        }
    }
    match (y_min, y_max) {
        (Some(lo), Some(hi)) => FitnessNormalizer::new(lo, hi),
        _ => Err(Error::Csv {
            path: path.to_path_buf(),
            line: 0,
            message: "sidecar must declare both y_min and y_max".into(),
        }),
    }
}

pub fn write_csv(path: &Path, data: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    w.write_record(["sequence", "fitness"]).map_err(|e| csv_error(path, 0, e))?;
    for r in data.records() {
        w.write_record([detokenize(&r.sequence, vocab), format!("{}", r.raw_fitness)])
            .map_err(|e| csv_error(path, 0, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_range_sidecar(path: &Path, norm: &FitnessNormalizer) -> Result<()> {
    std::fs::write(path, format!("y_min={}\ny_max={}\n", norm.y_min, norm.y_max))?;
    Ok(())
}

/// Linearly interpolated percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Fitness-percentile window used to carve a task out of the full set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileRange {
    Between { low: f64, high: f64 },
    Below { high: f64 },
}

impl PercentileRange {
    pub fn medium() -> Self {
        PercentileRange::Between { low: 20.0, high: 40.0 }
    }

    pub fn hard() -> Self {
        PercentileRange::Below { high: 30.0 }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            PercentileRange::Between { low, high } => (low, high),
            PercentileRange::Below { high } => (0.0, high),
        }
    }
}

/// Percentile of the full set whose members define the mutation gap.
pub const TOP_PERCENTILE: f64 = 99.0;

/// Keeps records inside the fitness-percentile window that are at least
/// `gap` edits away from every member of the full set's top percentile.
pub fn difficulty_filter(full: &Dataset, range: PercentileRange, gap: usize) -> Result<Dataset> {
    let fitness = full.fitness();
    let (lo_q, hi_q) = range.bounds();
    let lo = percentile(&fitness, lo_q);
    let hi = percentile(&fitness, hi_q);
    let top_cut = percentile(&fitness, TOP_PERCENTILE);
    let top: Vec<&[u8]> =
        full.records().iter().filter(|r| r.raw_fitness >= top_cut).map(|r| r.sequence.tokens()).collect();

    let keep: Vec<usize> = full
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.raw_fitness >= lo && r.raw_fitness <= hi)
        .filter(|(_, r)| {
            let s = r.sequence.tokens();
            top.iter().all(|t| {
                // edit distance never exceeds Hamming distance
                hamming(s, t) >= gap && levenshtein(s, t) >= gap
            })
        })
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyFilter(format!(
            "range {range:?}, gap {gap}, {} candidates in window",
            fitness.iter().filter(|&&f| f >= lo && f <= hi).count()
        )));
    }
    full.subset(keep)
}
