//! CSV datasets and tables, and versioned JSON documents.
//!
//! Every CSV written here starts with a `#schema:` comment line. Datasets
//! carry their JSON column schema there, so a written file reloads without
//! a separate schema. Floats are written with 17 significant digits.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use fairicp_core::data::{AttrKind, ColumnNames, Dataset, Response};
use fairicp_core::linalg::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_PREFIX: &str = "#schema:";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Feature,
    Attribute,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kind {
    Continuous,
    /// Cells must match one of `levels`; the code is the position in the list.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: Role,
    #[serde(flatten)]
    pub kind: Kind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: Vec<ColumnSpec>,
}

impl CsvSchema {
    pub fn validate(&self) -> Result<(), String> {
        let responses = self.columns.iter().filter(|c| c.role == Role::Response).count();
        if responses != 1 {
            return Err(format!("schema needs exactly one response column, found {responses}"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(format!("column '{}' listed twice", c.name));
            }
            if let Kind::Categorical { levels } = &c.kind {
                if levels.is_empty() {
                    return Err(format!("column '{}' declares no levels", c.name));
                }
                if c.role == Role::Feature {
                    return Err(format!("feature column '{}' must be continuous", c.name));
                }
            }
        }
        Ok(())
    }

    /// Schema describing `ds`, with levels named by their integer codes.
    pub fn for_dataset(ds: &Dataset) -> Self {
        let codes = |l: usize| (0..l).map(|v| v.to_string()).collect::<Vec<_>>();
        let names = ds.names();
        let mut columns: Vec<ColumnSpec> = names
            .x
            .iter()
            .map(|n| ColumnSpec { name: n.clone(), role: Role::Feature, kind: Kind::Continuous })
            .collect();
        for (n, k) in names.a.iter().zip(ds.a_kinds()) {
            let kind = match k {
                AttrKind::Continuous => Kind::Continuous,
                AttrKind::Categorical { levels } => Kind::Categorical { levels: codes(*levels) },
            };
            columns.push(ColumnSpec { name: n.clone(), role: Role::Attribute, kind });
        }
        let kind = match ds.y() {
            Response::Regression(_) => Kind::Continuous,
            Response::Classification { classes, .. } => Kind::Categorical { levels: codes(*classes) },
        };
        columns.push(ColumnSpec { name: names.y.clone(), role: Role::Response, kind });
        CsvSchema { columns }
    }
}

/// Float with 17 significant digits; round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_cell(path: &Path, row: usize, col: &ColumnSpec, cell: &str) -> CliResult<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Err(CliError::data(path, format!("row {row}, column '{}': missing value", col.name)));
    }
    match &col.kind {
        Kind::Continuous => match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::data(path, format!("row {row}, column '{}': cannot parse '{cell}' as a finite number", col.name))),
        },
        Kind::Categorical { levels } => levels
            .iter()
            .position(|l| l == cell)
            .map(|p| p as f64)
            .ok_or_else(|| CliError::data(path, format!("row {row}, column '{}': unknown level '{cell}'", col.name))),
    }
}

/// Reads a dataset laid out by `schema`. Lines starting with `#` are
/// skipped; `path` only labels errors. Rows are numbered from 1 after the
/// header.
pub fn read_dataset<R: Read>(reader: R, schema: &CsvSchema, path: &Path) -> CliResult<Dataset> {
    schema.validate().map_err(CliError::Config)?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut index = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        match header.iter().position(|h| *h == c.name) {
            Some(i) => index.push(i),
            None => return Err(CliError::data(path, format!("missing column '{}'", c.name))),
        }
    }
    if let Some(extra) = header.iter().find(|h| !schema.columns.iter().any(|c| &c.name == *h)) {
        return Err(CliError::data(path, format!("column '{extra}' is not in the schema")));
    }

    let by_role = |r: Role| schema.columns.iter().zip(&index).filter(move |(c, _)| c.role == r).collect::<Vec<_>>();
    let (xs, attrs, resp) = (by_role(Role::Feature), by_role(Role::Attribute), by_role(Role::Response));
    let (mut xd, mut ad, mut yd) = (Vec::new(), Vec::new(), Vec::new());
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(CliError::data(path, format!("row {row}: {} fields, header has {}", record.len(), header.len())));
        }
        for (c, &i) in &xs {
            xd.push(parse_cell(path, row, c, &record[i])?);
        }
        for (c, &i) in &attrs {
            ad.push(parse_cell(path, row, c, &record[i])?);
        }
        let (c, &i) = resp[0];
        yd.push(parse_cell(path, row, c, &record[i])?);
        n += 1;
    }
    if n == 0 {
        return Err(CliError::data(path, "no data rows"));
    }
    let x = Matrix::from_vec(n, xs.len(), xd)?;
    let a = Matrix::from_vec(n, attrs.len(), ad)?;
    let a_kinds = attrs
        .iter()
        .map(|(c, _)| match &c.kind {
            Kind::Continuous => AttrKind::Continuous,
            Kind::Categorical { levels } => AttrKind::Categorical { levels: levels.len() },
        })
        .collect();
    let y = match &resp[0].0.kind {
        Kind::Continuous => Response::Regression(yd),
        Kind::Categorical { levels } => Response::Classification {
            labels: yd.iter().map(|v| *v as usize).collect(),
            classes: levels.len(),
        },
    };
    let names = ColumnNames {
        x: xs.iter().map(|(c, _)| c.name.clone()).collect(),
        a: attrs.iter().map(|(c, _)| c.name.clone()).collect(),
        y: resp[0].0.name.clone(),
    };
    Ok(Dataset::new(x, a, a_kinds, y, names)?)
}

/// The JSON schema embedded in a leading `#schema:` line, if any.
pub fn embedded_schema(text: &str) -> Option<CsvSchema> {
    let first = text.lines().next()?;
    serde_json::from_str(first.strip_prefix(SCHEMA_PREFIX)?.trim()).ok()
}

/// Loads a dataset CSV. Without an explicit schema the file must carry one.
pub fn load_csv(path: &Path, schema: Option<&CsvSchema>) -> CliResult<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let schema = match schema {
        Some(s) => s.clone(),
        None => embedded_schema(&text).ok_or_else(|| CliError::data(path, "no schema given and none embedded in the file"))?,
    };
    read_dataset(text.as_bytes(), &schema, path)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes `ds` with its schema line; categorical cells hold level names.
pub fn write_dataset(path: &Path, ds: &Dataset) -> CliResult<()> {
    let schema = CsvSchema::for_dataset(ds);
    let mut w = create(path)?;
    writeln!(w, "{SCHEMA_PREFIX} {}", serde_json::to_string(&schema)?).map_err(|e| CliError::io(path, e))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(schema.columns.iter().map(|c| c.name.as_str()))?;
    for (i, y) in ds.y().values().into_iter().enumerate() {
        let mut rec: Vec<String> = ds.x().row(i).iter().map(|v| fmt_f64(*v)).collect();
        for (v, k) in ds.a().row(i).iter().zip(ds.a_kinds()) {
            rec.push(match k {
                AttrKind::Continuous => fmt_f64(*v),
                AttrKind::Categorical { .. } => (*v as usize).to_string(),
            });
        }
        rec.push(match ds.y() {
            Response::Regression(_) => fmt_f64(y),
            Response::Classification { .. } => (y as usize).to_string(),
        });
        csv.write_record(&rec)?;
    }
    csv.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColType {
    Int,
    Float,
    Str,
}

impl ColType {
    fn tag(self) -> &'static str {
        match self {
            ColType::Int => "int",
            ColType::Float => "float",
            ColType::Str => "str",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Str(s) => s.clone(),
        }
    }
}

/// A typed output table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<(String, ColType)>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[(&str, ColType)]) -> Self {
        Table {
            columns: columns.iter().map(|(n, t)| (n.to_string(), *t)).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// `#schema: name:type,...`
    pub fn schema_line(&self) -> String {
        let cols: Vec<String> = self.columns.iter().map(|(n, t)| format!("{n}:{}", t.tag())).collect();
        format!("{SCHEMA_PREFIX} {}", cols.join(","))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = create(path)?;
        writeln!(w, "{}", self.schema_line()).map_err(|e| CliError::io(path, e))?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(self.columns.iter().map(|(n, _)| n.as_str()))?;
        for row in &self.rows {
            csv.write_record(row.iter().map(Cell::render))?;
        }
        csv.flush().map_err(|e| CliError::io(path, e))?;
        Ok(())
    }
}

/// All-numeric CSV (for example predictions) as a matrix; `#` lines skipped.
pub fn read_matrix_csv(path: &Path) -> CliResult<Matrix> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).has_headers(true).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| CliError::data(path, format!("row {}, column '{}': cannot parse '{cell}'", r + 1, header[j])))?;
            data.push(v);
        }
        n += 1;
    }
    if n == 0 || header.is_empty() {
        return Err(CliError::data(path, "empty table"));
    }
    Ok(Matrix::from_vec(n, header.len(), data)?)
}

/// Versioned JSON document: `{format, version, kind, arch?, body}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    pub body: T,
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn write_envelope<T: Serialize>(path: &Path, kind: &str, arch: Option<String>, body: &T) -> CliResult<()> {
    let env = Envelope {
        format: String::from("fairicp"),
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        arch,
        body,
    };
    write_text(path, &to_json_pretty(&env)?)
}

pub fn read_envelope<T: DeserializeOwned>(path: &Path, kind: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text)?;
    if env.format != "fairicp" || env.version != FORMAT_VERSION {
        return Err(CliError::data(path, format!("unsupported document {} v{}", env.format, env.version)));
    }
    if env.kind != kind {
        return Err(CliError::data(path, format!("expected a '{kind}' document, found '{}'", env.kind)));
    }
    Ok(env.body)
}
