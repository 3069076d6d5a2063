//! File formats: numeric CSV, sparse triplets and JSON documents.
//!
//! Every floating-point number is written with 17 significant digits, so
//! reading a file and writing it again reproduces it byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::blockmodel::{BlockParameters, ClusterAssignment, PrecisionModel, Target};
use crate::error::{CggmError, Result};
use crate::penalty::SparseSymmetric;

/// `x` in scientific notation with 17 significant digits.
pub fn format_number(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON with numbers as in [`format_number`].
struct Digits17<'a>(PrettyFormatter<'a>);

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> std::io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl Formatter for Digits17<'_> {
    forward! {
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    }

    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        w.write_all(format_number(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, f64::from(value))
    }
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn to_json<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| CggmError::Parse(e.to_string()))
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let file = File::open(path).map_err(|e| io_context(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn io_context(path: &Path, e: std::io::Error) -> CggmError {
    CggmError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Numeric table with optional column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub values: DMatrix<f64>,
    pub names: Option<Vec<String>>,
}

/// Parses comma-separated numbers. The first row is taken as a header when
/// any of its fields is not a number.
pub fn parse_matrix_csv<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut names = None;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let parsed: Vec<Option<f64>> = record.iter().map(|f| f.parse::<f64>().ok()).collect();
        if i == 0 && parsed.iter().any(Option::is_none) {
            names = Some(record.iter().map(str::to_string).collect::<Vec<_>>());
            continue;
        }
        let row = parsed
            .into_iter()
            .enumerate()
            .map(|(j, v)| match v {
                Some(x) if x.is_finite() => Ok(x),
                _ => Err(CggmError::Parse(format!("line {}, column {}: {:?} is not a finite number", i + 1, j + 1, &record[j]))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let ncol = names.as_ref().map(Vec::len).or_else(|| rows.first().map(Vec::len)).unwrap_or(0);
    if rows.is_empty() || ncol == 0 {
        return Err(CggmError::Parse("no numeric rows".into()));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncol) {
        return Err(CggmError::Parse(format!("row {} has {} fields, expected {ncol}", bad + 1, rows[bad].len())));
    }
    let values = DMatrix::from_fn(rows.len(), ncol, |i, j| rows[i][j]);
    Ok(Table { values, names })
}

pub fn read_matrix_csv(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| io_context(path, e))?;
    parse_matrix_csv(BufReader::new(file))
}

pub fn write_matrix_csv<W: Write>(writer: W, m: &DMatrix<f64>, names: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if let Some(names) = names {
        if names.len() != m.ncols() {
            return Err(CggmError::Dimension(format!("{} names for {} columns", names.len(), m.ncols())));
        }
        w.write_record(names)?;
    }
    for row in m.row_iter() {
        w.write_record(row.iter().map(|&x| format_number(x)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_matrix_csv(path: &Path, m: &DMatrix<f64>, names: Option<&[String]>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_context(path, e))?;
    write_matrix_csv(BufWriter::new(file), m, names)
}

/// Writes `row,col,value` lines for the upper triangle of a sparse matrix.
pub fn write_triplets<W: Write>(writer: W, m: &SparseSymmetric<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "col", "value"])?;
    for (j, k, v) in m.iter() {
        w.write_record([j.to_string(), k.to_string(), format_number(v)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_triplets(path: &Path, m: &SparseSymmetric<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_context(path, e))?;
    write_triplets(BufWriter::new(file), m)
}

/// Reads `row,col,value` lines (zero-based, header optional) into a
/// symmetric matrix of dimension `p`.
pub fn parse_triplets<R: Read>(reader: R, p: usize) -> Result<SparseSymmetric<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut out = SparseSymmetric::new(p);
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != 3 {
            return Err(CggmError::Parse(format!("line {}: expected row,col,value", i + 1)));
        }
        let parsed = (record[0].parse::<usize>(), record[1].parse::<usize>(), record[2].parse::<f64>());
        match parsed {
            (Ok(j), Ok(k), Ok(v)) => out.insert(j, k, v)?,
            _ if i == 0 => continue,
            _ => return Err(CggmError::Parse(format!("line {}: expected row,col,value", i + 1))),
        }
    }
    Ok(out)
}

pub fn read_triplets(path: &Path, p: usize) -> Result<SparseSymmetric<f64>> {
    let file = File::open(path).map_err(|e| io_context(path, e))?;
    parse_triplets(BufReader::new(file), p)
}

/// Serialized form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub target: Target,
    pub p: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    pub labels: Vec<usize>,
    pub b: Vec<f64>,
    pub r: Vec<Vec<f64>>,
}

impl ModelDocument {
    pub fn new(model: &PrecisionModel<f64>, names: Option<&[String]>) -> Self {
        let params = &model.params;
        let k = model.k();
        Self {
            target: model.target,
            p: model.p(),
            k,
            names: names.map(<[String]>::to_vec),
            labels: model.assignment.labels().to_vec(),
            b: params.b().iter().copied().collect(),
            r: (0..k).map(|i| (0..k).map(|j| params.r_at(i, j)).collect()).collect(),
        }
    }

    pub fn to_model(&self) -> Result<PrecisionModel<f64>> {
        if self.labels.len() != self.p {
            return Err(CggmError::Parse(format!("{} labels for p = {}", self.labels.len(), self.p)));
        }
        if self.names.as_ref().is_some_and(|n| n.len() != self.p) {
            return Err(CggmError::Parse("number of names differs from p".into()));
        }
        if self.b.len() != self.k || self.r.len() != self.k || self.r.iter().any(|row| row.len() != self.k) {
            return Err(CggmError::Parse(format!("parameters are not sized for k = {}", self.k)));
        }
        let assignment = ClusterAssignment::new(self.labels.clone())?;
        if assignment.k() != self.k {
            return Err(CggmError::Parse(format!("labels form {} clusters, document says {}", assignment.k(), self.k)));
        }
        let r = DMatrix::from_fn(self.k, self.k, |i, j| self.r[i][j]);
        let params = BlockParameters::new(DVector::from_vec(self.b.clone()), r)?;
        PrecisionModel::new(assignment, params, self.target)
    }
}

pub fn save_model(path: &Path, model: &PrecisionModel<f64>, names: Option<&[String]>) -> Result<()> {
    write_json(path, &ModelDocument::new(model, names))
}

pub fn load_model(path: &Path) -> Result<(PrecisionModel<f64>, Option<Vec<String>>)> {
    let doc: ModelDocument = read_json(path)?;
    Ok((doc.to_model()?, doc.names))
}
