//! Raw tabular records to embedded feature maps.
//!
//! Continuous fields are discretized (equal-frequency bins, or the
//! `floor(ln(v²))` transform), every field is then mapped through a
//! frequency-thresholded vocabulary with index 0 reserved for
//! out-of-vocabulary levels, and each index selects a row of that field's
//! embedding table. The per-field rows are concatenated into an `F × D`
//! feature map, stored flattened as one row of `F·D` values per example.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Partition, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Continuous,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousTransform {
    #[default]
    EqualFrequency,
    LogSquare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub transform: ContinuousTransform,
}

impl FieldSpec {
    pub fn categorical(name: impl Into<String>) -> Self {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Categorical,
            transform: ContinuousTransform::default(),
        }
    }

    pub fn continuous(name: impl Into<String>, transform: ContinuousTransform) -> Self {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Continuous,
            transform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    pub embedding_dim: usize,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Schema("schema needs at least one field".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Schema("embedding_dim must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name {:?}", f.name)));
            }
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }
}

/// Bucket returned by [`log_square_transform`] for `v = 0`, where `ln(0)` is
/// undefined.
pub const LOG_SQUARE_ZERO_BUCKET: i64 = i64::MIN;

/// `floor(ln(v²))` with natural log; `v = 0` maps to [`LOG_SQUARE_ZERO_BUCKET`].
pub fn log_square_transform(v: f64) -> i64 {
    if v == 0.0 {
        return LOG_SQUARE_ZERO_BUCKET;
    }
    (v * v).ln().floor() as i64
}

/// Equal-frequency bin boundaries for one continuous field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucketizer {
    boundaries: Vec<f64>,
    bin_count: usize,
}

impl Bucketizer {
    /// Cuts the sorted values at every `i·n/bins` rank, placing each boundary
    /// midway between its neighbours. A cut falling inside a run of equal
    /// values is dropped, so heavy ties give fewer effective bins.
    pub fn fit(values: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Fit(format!("need at least 2 bins, got {bins}")));
        }
        if values.is_empty() {
            return Err(Error::Fit("cannot fit bins on an empty column".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("non-finite value in continuous column".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut boundaries: Vec<f64> = Vec::with_capacity(bins - 1);
        for i in 1..bins {
            let cut = i * n / bins;
            if cut == 0 || cut >= n {
                continue;
            }
            let (lo, hi) = (sorted[cut - 1], sorted[cut]);
            if lo == hi {
                continue;
            }
            let b = lo + (hi - lo) / 2.0;
            if boundaries.last().is_none_or(|&last| b > last) {
                boundaries.push(b);
            }
        }
        Ok(Bucketizer {
            boundaries,
            bin_count: bins,
        })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    /// Number of boundaries strictly below `v`.
    pub fn bucket(&self, v: f64) -> usize {
        self.boundaries.partition_point(|&b| b < v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "FieldVocabRepr", into = "FieldVocabRepr")]
pub struct FieldVocab {
    levels: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct FieldVocabRepr {
    levels: Vec<String>,
    counts: Vec<u64>,
}

impl From<FieldVocabRepr> for FieldVocab {
    fn from(r: FieldVocabRepr) -> Self {
        let index = r.levels.iter().enumerate().map(|(i, l)| (l.clone(), i + 1)).collect();
        FieldVocab {
            levels: r.levels,
            counts: r.counts,
            index,
        }
    }
}

impl From<FieldVocab> for FieldVocabRepr {
    fn from(v: FieldVocab) -> Self {
        FieldVocabRepr {
            levels: v.levels,
            counts: v.counts,
        }
    }
}

impl FieldVocab {
    fn fit<'a>(tokens: impl Iterator<Item = &'a str>, min_frequency: u64) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_frequency).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        FieldVocab::from(FieldVocabRepr {
            levels: kept.iter().map(|(l, _)| l.to_string()).collect(),
            counts: kept.iter().map(|&(_, c)| c).collect(),
        })
    }

    /// Index of `level`, 0 when it was infrequent or unseen.
    pub fn lookup(&self, level: &str) -> usize {
        self.index.get(level).copied().unwrap_or(0)
    }

    /// Kept levels, in index order starting at 1.
    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn count(&self, index: usize) -> Option<u64> {
        index.checked_sub(1).and_then(|i| self.counts.get(i).copied())
    }

    /// Number of embedding rows needed: kept levels plus the OOV row.
    pub fn table_rows(&self) -> usize {
        self.levels.len() + 1
    }
}

/// Per-field level-to-index maps with index 0 reserved for OOV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub min_frequency: u64,
    pub fields: Vec<FieldVocab>,
}

impl Vocabulary {
    /// Fits on the raw column strings of every field. Levels seen fewer than
    /// `min_frequency` times map to 0; kept levels are numbered by descending
    /// frequency, ties broken lexically.
    pub fn fit(records: &[RawRecord], schema: &FeatureSchema, min_frequency: u64) -> Result<Self> {
        if min_frequency == 0 {
            return Err(Error::Fit("min_frequency must be at least 1".into()));
        }
        let fields = (0..schema.num_fields())
            .map(|f| FieldVocab::fit(records.iter().map(|r| r.values[f].as_str()), min_frequency))
            .collect();
        Ok(Vocabulary { min_frequency, fields })
    }

    fn fit_tokens(columns: &[Vec<String>], min_frequency: u64) -> Self {
        let fields = columns
            .iter()
            .map(|col| FieldVocab::fit(col.iter().map(String::as_str), min_frequency))
            .collect();
        Vocabulary { min_frequency, fields }
    }

    pub fn table_rows(&self) -> Vec<usize> {
        self.fields.iter().map(FieldVocab::table_rows).collect()
    }
}

/// One labeled line of input: the label and the raw field strings.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub label: f64,
    pub values: Vec<String>,
}

/// Parses header-less delimited lines: label (0/1) then one column per field.
pub fn parse_records(reader: impl BufRead, delimiter: char, num_fields: usize) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(delimiter);
        let label = match cols.next().map(str::trim) {
            Some("0") => 0.0,
            Some("1") => 1.0,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("label must be 0 or 1, got {:?}", other.unwrap_or("")),
                })
            }
        };
        let values: Vec<String> = cols.map(str::to_owned).collect();
        if values.len() != num_fields {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {num_fields} feature columns, found {}", values.len()),
            });
        }
        out.push(RawRecord { label, values });
    }
    Ok(out)
}

pub fn read_records(path: &Path, delimiter: char, num_fields: usize) -> Result<Vec<RawRecord>> {
    let f = std::fs::File::open(path)?;
    parse_records(std::io::BufReader::new(f), delimiter, num_fields)
}

pub fn write_records(path: &Path, records: &[RawRecord], delimiter: char) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let sep = delimiter.to_string();
    for r in records {
        writeln!(w, "{}{}{}", r.label as u8, sep, r.values.join(&sep))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-field fitting summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub name: String,
    pub cardinality: usize,
    pub oov_rate: f64,
    pub merged_levels: usize,
}

/// Bucketizers plus vocabulary, fitted on a training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub schema: FeatureSchema,
    pub bins: usize,
    pub bucketizers: Vec<Option<Bucketizer>>,
    pub vocabulary: Vocabulary,
}

const MISSING: &str = "";

fn parse_continuous(raw: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::Input(format!("not a finite number: {s:?}")))
}

impl FeaturePipeline {
    pub fn fit(records: &[RawRecord], schema: &FeatureSchema, bins: usize, min_frequency: u64) -> Result<Self> {
        schema.validate()?;
        if min_frequency == 0 {
            return Err(Error::Fit("min_frequency must be at least 1".into()));
        }
        if let Some(r) = records.iter().find(|r| r.values.len() != schema.num_fields()) {
            return Err(Error::Schema(format!(
                "record has {} columns, schema has {} fields",
                r.values.len(),
                schema.num_fields()
            )));
        }
        let mut bucketizers = Vec::with_capacity(schema.num_fields());
        for (f, spec) in schema.fields.iter().enumerate() {
            let b = match (spec.kind, spec.transform) {
                (FieldKind::Continuous, ContinuousTransform::EqualFrequency) => {
                    let mut values = Vec::new();
                    for (i, r) in records.iter().enumerate() {
                        if let Some(v) =
                            parse_continuous(&r.values[f]).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?
                        {
                            values.push(v);
                        }
                    }
                    if values.is_empty() {
                        None
                    } else {
                        Some(Bucketizer::fit(&values, bins)?)
                    }
                }
                _ => None,
            };
            bucketizers.push(b);
        }
        let mut pipeline = FeaturePipeline {
            schema: schema.clone(),
            bins,
            bucketizers,
            vocabulary: Vocabulary {
                min_frequency,
                fields: Vec::new(),
            },
        };
        let mut columns = vec![Vec::with_capacity(records.len()); schema.num_fields()];
        for (i, r) in records.iter().enumerate() {
            for (f, col) in columns.iter_mut().enumerate() {
                col.push(
                    pipeline
                        .token(f, &r.values[f])
                        .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?,
                );
            }
        }
        pipeline.vocabulary = Vocabulary::fit_tokens(&columns, min_frequency);
        Ok(pipeline)
    }

    pub fn num_fields(&self) -> usize {
        self.schema.num_fields()
    }

    pub fn embedding_dim(&self) -> usize {
        self.schema.embedding_dim
    }

    pub fn table_rows(&self) -> Vec<usize> {
        self.vocabulary.table_rows()
    }

    /// The discrete level a raw column value maps to before vocabulary lookup.
    pub fn token(&self, field: usize, raw: &str) -> Result<String> {
        let spec = &self.schema.fields[field];
        match (spec.kind, spec.transform) {
            (FieldKind::Categorical, _) => Ok(raw.to_owned()),
            (FieldKind::Continuous, t) => {
                let Some(v) = parse_continuous(raw)? else {
                    return Ok(MISSING.to_owned());
                };
                Ok(match t {
                    ContinuousTransform::LogSquare => match log_square_transform(v) {
                        LOG_SQUARE_ZERO_BUCKET => "zero".to_owned(),
                        b => b.to_string(),
                    },
                    ContinuousTransform::EqualFrequency => match &self.bucketizers[field] {
                        Some(b) => b.bucket(v).to_string(),
                        None => MISSING.to_owned(),
                    },
                })
            }
        }
    }

    pub fn encode(&self, record: &RawRecord) -> Result<Vec<usize>> {
        if record.values.len() != self.num_fields() {
            return Err(Error::Schema(format!(
                "record has {} columns, pipeline expects {}",
                record.values.len(),
                self.num_fields()
            )));
        }
        (0..self.num_fields())
            .map(|f| Ok(self.vocabulary.fields[f].lookup(&self.token(f, &record.values[f])?)))
            .collect()
    }

    pub fn encode_all(&self, records: &[RawRecord]) -> Result<EncodedDataset> {
        let mut indices = Vec::with_capacity(records.len() * self.num_fields());
        let mut labels = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            indices.extend(self.encode(r).map_err(|e| match e {
                Error::Input(msg) => Error::Parse { line: i + 1, msg },
                other => other,
            })?);
            labels.push(r.label);
        }
        Ok(EncodedDataset {
            num_fields: self.num_fields(),
            indices,
            labels,
        })
    }

    /// Cardinality and OOV rate of each field over `records`.
    pub fn summarize(&self, records: &[RawRecord]) -> Result<Vec<FieldSummary>> {
        let encoded = self.encode_all(records)?;
        let n = encoded.len().max(1) as f64;
        Ok(self
            .schema
            .fields
            .iter()
            .enumerate()
            .map(|(f, spec)| {
                let oov = (0..encoded.len()).filter(|&i| encoded.row(i)[f] == 0).count();
                let distinct: std::collections::HashSet<String> = records
                    .iter()
                    .filter_map(|r| self.token(f, &r.values[f]).ok())
                    .collect();
                FieldSummary {
                    name: spec.name.clone(),
                    cardinality: self.vocabulary.fields[f].levels().len(),
                    oov_rate: oov as f64 / n,
                    merged_levels: distinct.len() - distinct.iter().filter(|t| self.vocabulary.fields[f].lookup(t) > 0).count(),
                }
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: FeaturePipeline = serde_json::from_str(s)?;
        p.schema.validate()?;
        if p.vocabulary.fields.len() != p.num_fields() || p.bucketizers.len() != p.num_fields() {
            return Err(Error::Schema("pipeline artifact is inconsistent with its schema".into()));
        }
        Ok(p)
    }
}

/// Vocabulary indices (row-major `examples × fields`) and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub num_fields: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<f64>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.num_fields..(i + 1) * self.num_fields]
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let mut indices = Vec::with_capacity(rows.len() * self.num_fields);
        for &r in rows {
            indices.extend_from_slice(self.row(r));
        }
        Batch {
            num_fields: self.num_fields,
            indices,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            num_fields: self.num_fields,
            indices: self.indices.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// A mini-batch of encoded examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub num_fields: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.num_fields..(i + 1) * self.num_fields]
    }

    pub fn subset(&self, rows: &[usize]) -> Batch {
        let mut indices = Vec::with_capacity(rows.len() * self.num_fields);
        for &r in rows {
            indices.extend_from_slice(self.row(r));
        }
        Batch {
            num_fields: self.num_fields,
            indices,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// One trainable `rows × D` matrix per field.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    tables: Vec<ParamId>,
    rows: Vec<usize>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, names: &[String], rows: &[usize], dim: usize, rng: &mut Rng) -> Result<Self> {
        if names.len() != rows.len() || rows.is_empty() || dim == 0 || rows.contains(&0) {
            return Err(Error::Config("embedding tables need one positive row count per field".into()));
        }
        let tables = names
            .iter()
            .zip(rows)
            .map(|(name, &r)| {
                let t = Tensor::glorot(&[r, dim], r, dim, rng);
                store.add(format!("embedding.{name}"), t, Partition::Weights)
            })
            .collect();
        Ok(EmbeddingTable {
            tables,
            rows: rows.to_vec(),
            dim,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.tables.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self, field: usize) -> ParamId {
        self.tables[field]
    }

    pub fn table_ids(&self) -> &[ParamId] {
        &self.tables
    }

    /// Looks up a batch of index rows (`batch × F`, row-major) and returns the
    /// flattened feature maps `[batch, F·D]`.
    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let f_count = self.num_fields();
        if indices.is_empty() || !indices.len().is_multiple_of(f_count) {
            return Err(Error::Input(format!(
                "{} indices do not form rows of {f_count} fields",
                indices.len()
            )));
        }
        let mut parts = Vec::with_capacity(f_count);
        for f in 0..f_count {
            let col: Vec<usize> = indices.iter().skip(f).step_by(f_count).copied().collect();
            if let Some(&bad) = col.iter().find(|&&i| i >= self.rows[f]) {
                return Err(Error::Lookup {
                    field: f,
                    index: bad,
                    rows: self.rows[f],
                });
            }
            let table = tape.param(store, self.tables[f]);
            parts.push(tape.gather_rows(table, &col)?);
        }
        tape.concat_cols(&parts)
    }
}
