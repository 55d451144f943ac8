//! CSV and JSON input/output, and baseline missing-data preprocessing.
//!
//! Matrix files have a header row of column names; missing cells hold the
//! matrix's NA token (`NA` by default). Column loss kinds come from a JSON
//! sidecar mapping column name to `"gaussian"`, `"bernoulli"` or `"poisson"`,
//! or to a full loss object such as `{"kind": "gaussian", "variance": 5.0}`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::CausalDataset;
use crate::mf::{Entry, LossKind, ObservedMatrix, DEFAULT_NA_TOKEN};
use crate::synth::TwinsRecord;

/// How column loss kinds are assigned when reading a matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Schema {
    /// Same loss for every column.
    Uniform(LossKind),
    /// Loss per column name; every column in the file must be listed.
    Columns(BTreeMap<String, LossKind>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SchemaEntry {
    Name(String),
    Full(LossKind),
}

impl Schema {
    pub fn loss_for(&self, column: &str) -> Result<LossKind> {
        match self {
            Schema::Uniform(kind) => Ok(*kind),
            Schema::Columns(map) => map
                .get(column)
                .copied()
                .ok_or_else(|| Error::Parse(format!("column `{column}` missing from schema"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, SchemaEntry> = serde_json::from_str(text)?;
        let mut map = BTreeMap::new();
        for (name, entry) in raw {
            let kind = match entry {
                SchemaEntry::Name(s) => parse_loss_name(&s)?,
                SchemaEntry::Full(k) => k,
            };
            map.insert(name, kind);
        }
        Ok(Schema::Columns(map))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    /// JSON sidecar describing the columns of `obs`.
    pub fn for_matrix(obs: &ObservedMatrix) -> String {
        let map: BTreeMap<&str, serde_json::Value> = obs
            .col_names()
            .iter()
            .zip(obs.col_losses())
            .map(|(name, kind)| {
                let value = match kind {
                    LossKind::Gaussian { variance } if *variance != 1.0 => {
                        serde_json::to_value(kind).expect("loss kinds serialize")
                    }
                    _ => serde_json::Value::String(kind.name().to_string()),
                };
                (name.as_str(), value)
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("schema serializes")
    }
}

/// `"gaussian"` (unit variance), `"bernoulli"` or `"poisson"`.
pub fn parse_loss_name(name: &str) -> Result<LossKind> {
    match name.to_ascii_lowercase().as_str() {
        "gaussian" => Ok(LossKind::UNIT_GAUSSIAN),
        "bernoulli" => Ok(LossKind::Bernoulli),
        "poisson" => Ok(LossKind::Poisson),
        other => Err(Error::Parse(format!("unknown loss kind `{other}`"))),
    }
}

fn parse_value(field: &str, row: usize, col: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse(format!("row {row}, column `{col}`: `{field}` is not a finite number")))
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader)
}

fn headers<R: Read>(rdr: &mut csv::Reader<R>) -> Result<Vec<String>> {
    let h: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if h.is_empty() || (h.len() == 1 && h[0].is_empty()) {
        return Err(Error::Parse("file is empty or has no header".into()));
    }
    Ok(h)
}

/// Parses a matrix CSV; cells equal to `na_token` become unobserved.
pub fn parse_csv_matrix<R: Read>(reader: R, schema: &Schema, na_token: &str) -> Result<ObservedMatrix> {
    let mut rdr = csv_reader(reader);
    let names = headers(&mut rdr)?;
    let losses = names.iter().map(|n| schema.loss_for(n)).collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    let mut n_rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            if field == na_token {
                continue;
            }
            entries.push(Entry { row: i, col: j, value: parse_value(field, i, &names[j])? });
        }
        n_rows = i + 1;
    }
    Ok(ObservedMatrix::with_names(n_rows, names.len(), entries, losses, names)?.with_na_token(na_token))
}

pub fn read_csv_matrix(path: impl AsRef<Path>, schema: &Schema) -> Result<ObservedMatrix> {
    parse_csv_matrix(File::open(path)?, schema, DEFAULT_NA_TOKEN)
}

/// Relabels every column by its observed values: `bernoulli` when all are
/// `-1` or `+1`, otherwise `gaussian` with unit variance.
pub fn infer_losses(obs: &ObservedMatrix) -> Result<ObservedMatrix> {
    let mut binary = vec![true; obs.n_cols()];
    for e in obs.entries() {
        if e.value != 1.0 && e.value != -1.0 {
            binary[e.col] = false;
        }
    }
    let losses = binary.iter().map(|&b| if b { LossKind::Bernoulli } else { LossKind::UNIT_GAUSSIAN }).collect();
    Ok(ObservedMatrix::with_names(
        obs.n_rows(),
        obs.n_cols(),
        obs.entries().to_vec(),
        losses,
        obs.col_names().to_vec(),
    )?
    .with_na_token(obs.na_token()))
}

/// Shortest decimal string that parses back to the same `f64`.
fn format_value(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv_matrix_to<W: Write>(writer: W, obs: &ObservedMatrix) -> Result<()> {
    let mut cells: Vec<Option<f64>> = vec![None; obs.n_rows() * obs.n_cols()];
    for e in obs.entries() {
        cells[e.row * obs.n_cols() + e.col] = Some(e.value);
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(obs.col_names())?;
    for row in cells.chunks(obs.n_cols().max(1)).take(obs.n_rows()) {
        w.write_record(row.iter().map(|c| c.map_or_else(|| obs.na_token().to_string(), format_value)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_matrix(path: impl AsRef<Path>, obs: &ObservedMatrix) -> Result<()> {
    write_csv_matrix_to(File::create(path)?, obs)
}

/// Fully observed numeric CSV with a header row.
pub fn read_dense_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    parse_dense_csv(File::open(path)?)
}

pub fn parse_dense_csv<R: Read>(reader: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv_reader(reader);
    let names = headers(&mut rdr)?;
    let mut values = Vec::new();
    let mut n = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            values.push(parse_value(field, i, &names[j])?);
        }
        n += 1;
    }
    Ok((names.clone(), DMatrix::from_row_slice(n, names.len(), &values)))
}

pub fn write_dense_csv(path: impl AsRef<Path>, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    if names.len() != m.ncols() {
        return invalid("one header name per column required");
    }
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(names)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format_value(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `treatment` and `outcome`, plus `y0` and `y1` when potential outcomes are known.
pub fn write_dataset_csv(path: impl AsRef<Path>, data: &CausalDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let po = data.potential_outcomes();
    if po.is_some() {
        w.write_record(["treatment", "outcome", "y0", "y1"])?;
    } else {
        w.write_record(["treatment", "outcome"])?;
    }
    for i in 0..data.len() {
        let mut row = vec![format_value(data.treatment()[i]), format_value(data.outcome()[i])];
        if let Some(po) = po {
            row.push(format_value(po[i].0));
            row.push(format_value(po[i].1));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads treatment and outcome (and optional `y0`, `y1`) and pairs them with `covariates`.
pub fn read_dataset_csv(path: impl AsRef<Path>, covariates: DMatrix<f64>) -> Result<CausalDataset> {
    let (names, m) = read_dense_csv(path)?;
    let col = |name: &str| names.iter().position(|n| n == name);
    let (Some(t), Some(y)) = (col("treatment"), col("outcome")) else {
        return Err(Error::Parse("dataset needs `treatment` and `outcome` columns".into()));
    };
    let data = CausalDataset::new(covariates, m.column(t).into_owned(), m.column(y).into_owned())?;
    match (col("y0"), col("y1")) {
        (Some(a), Some(b)) => data.with_potential_outcomes((0..m.nrows()).map(|i| (m[(i, a)], m[(i, b)])).collect()),
        _ => Ok(data),
    }
}

pub const TWINS_COLUMNS: [&str; 6] =
    ["pair_id", "gestat10", "weight_lighter", "weight_heavier", "mortality_lighter", "mortality_heavier"];

pub fn parse_twins_csv<R: Read>(reader: R) -> Result<Vec<TwinsRecord>> {
    let mut rdr = csv_reader(reader);
    let names = headers(&mut rdr)?;
    for c in TWINS_COLUMNS {
        if !names.iter().any(|n| n == c) {
            return Err(Error::Parse(format!("twins file lacks column `{c}`")));
        }
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<TwinsRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("twins row {i}: {e}")))?;
        if rec.gestat10 > 9 {
            return Err(Error::Parse(format!("twins row {i}: gestat10 {} outside 0..=9", rec.gestat10)));
        }
        if rec.mortality_lighter > 1 || rec.mortality_heavier > 1 {
            return Err(Error::Parse(format!("twins row {i}: mortality must be 0 or 1")));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_twins_csv(path: impl AsRef<Path>) -> Result<Vec<TwinsRecord>> {
    parse_twins_csv(File::open(path)?)
}

pub fn write_twins_csv(path: impl AsRef<Path>, records: &[TwinsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(TWINS_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

/// Turns a partially observed matrix into a dense one.
///
/// Implement this to plug in other imputation schemes (multiple imputation,
/// for example) alongside [`ModeImputer`].
pub trait Preprocessor {
    fn name(&self) -> &str;
    fn preprocess(&self, obs: &ObservedMatrix) -> Result<DMatrix<f64>>;
}

/// Column-wise mode imputation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeImputer;

impl Preprocessor for ModeImputer {
    fn name(&self) -> &str {
        "mode"
    }

    fn preprocess(&self, obs: &ObservedMatrix) -> Result<DMatrix<f64>> {
        mode_impute(obs)
    }
}

/// Fills each missing cell with its column's most frequent observed value,
/// breaking ties toward the smallest value.
pub fn mode_impute(obs: &ObservedMatrix) -> Result<DMatrix<f64>> {
    let p = obs.n_cols();
    let mut counts: Vec<HashMap<u64, usize>> = vec![HashMap::new(); p];
    for e in obs.entries() {
        // +0.0 folds -0.0 into 0.0.
        *counts[e.col].entry((e.value + 0.0).to_bits()).or_default() += 1;
    }
    let mut modes = DVector::zeros(p);
    for (j, c) in counts.iter().enumerate() {
        let best = c
            .iter()
            .map(|(bits, n)| (f64::from_bits(*bits), *n))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
            .ok_or_else(|| Error::InvalidInput(format!("column `{}` has no observed entries", obs.col_names()[j])))?;
        modes[j] = best.0;
    }
    let mut dense = DMatrix::from_fn(obs.n_rows(), p, |_, j| modes[j]);
    for e in obs.entries() {
        dense[(e.row, e.col)] = e.value;
    }
    Ok(dense)
}
