//! Frame files and the plot-ready CSV exports.
//!
//! Frame files have a header `t,z1,...,zp,v1,...,vd` and one row per
//! observation; consecutive rows sharing `t` form one frame. Floats are
//! written with 17 significant digits so that files round-trip exactly.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use flowfield::{Frame, Locations};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Spatial (`p`) and velocity (`d`) dimensions of a frame file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub p: usize,
    pub d: usize,
}

impl Schema {
    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=self.p).map(|i| format!("z{i}")));
        cols.extend((1..=self.d).map(|i| format!("v{i}")));
        cols
    }

    fn columns(&self) -> usize {
        1 + self.p + self.d
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_header(fields: &csv::StringRecord, source: &str, line: u64) -> CliResult<Schema> {
    let names: Vec<&str> = fields.iter().collect();
    if names.first().is_some_and(|f| f.parse::<f64>().is_ok()) {
        return Err(CliError::parse(source, line, "missing header row `t,z1,...,zp,v1,...,vd`"));
    }
    if names.first() != Some(&"t") {
        return Err(CliError::parse(source, line, format!("first header column must be `t`, got {:?}", names.first())));
    }
    let p = names[1..].iter().take_while(|n| n.starts_with('z')).count();
    let d = names.len() - 1 - p;
    let schema = Schema { p, d };
    if p == 0 || d == 0 || schema.header() != names {
        return Err(CliError::parse(
            source,
            line,
            format!("header must read `t,z1,...,zp,v1,...,vd`, got `{}`", names.join(",")),
        ));
    }
    Ok(schema)
}

/// Parses a frame file. When `expect` is given the header must match it.
pub fn read_frames<R: Read>(reader: R, source: &str, expect: Option<Schema>) -> CliResult<(Schema, Vec<Frame<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(source, e))?,
        None => return Err(CliError::parse(source, 1, "empty file, expected a header row")),
    };
    let schema = parse_header(&header, source, line_of(&header))?;
    if let Some(want) = expect {
        if want != schema {
            return Err(CliError::parse(
                source,
                line_of(&header),
                format!("expected p = {}, d = {}, header has p = {}, d = {}", want.p, want.d, schema.p, schema.d),
            ));
        }
    }

    let mut frames = Vec::new();
    let mut current: Option<(usize, Vec<f64>, Vec<f64>)> = None;
    for rec in records {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = line_of(&rec);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != schema.columns() {
            return Err(CliError::parse(
                source,
                line,
                format!("expected {} columns, found {}", schema.columns(), rec.len()),
            ));
        }
        let t: usize = rec[0]
            .parse()
            .map_err(|_| CliError::parse(source, line, format!("frame index `{}` is not a nonnegative integer", &rec[0])))?;
        let mut values = Vec::with_capacity(schema.p + schema.d);
        for (col, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                CliError::parse(source, line, format!("column {} (`{field}`) is not numeric", &header[col]))
            })?;
            if !v.is_finite() {
                return Err(CliError::parse(source, line, format!("column {} is not finite", &header[col])));
            }
            values.push(v);
        }
        match &mut current {
            Some((ct, z, v)) if *ct == t => {
                z.extend_from_slice(&values[..schema.p]);
                v.extend_from_slice(&values[schema.p..]);
            }
            Some((ct, _, _)) if t < *ct => {
                return Err(CliError::parse(source, line, format!("frame index decreases from {ct} to {t}")));
            }
            _ => {
                if let Some(done) = current.take() {
                    frames.push(build_frame(done, schema)?);
                }
                current = Some((t, values[..schema.p].to_vec(), values[schema.p..].to_vec()));
            }
        }
    }
    if let Some(done) = current.take() {
        frames.push(build_frame(done, schema)?);
    }
    if frames.is_empty() {
        return Err(CliError::Data(format!("{source}: no observation rows")));
    }
    Ok((schema, frames))
}

fn build_frame((t, z, v): (usize, Vec<f64>, Vec<f64>), schema: Schema) -> CliResult<Frame<f64>> {
    let n = v.len() / schema.d;
    let locations = Locations::from_flat(schema.p, z)?;
    Ok(Frame::new(t, locations, DMatrix::from_row_slice(n, schema.d, &v))?)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn csv_error(source: &str, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    CliError::parse(source, line, e.to_string())
}

/// A parsed frame file with the digest of its raw bytes.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub schema: Schema,
    pub frames: Vec<Frame<f64>>,
    pub sha256: String,
}

pub fn load_frames(path: &Path, expect: Option<Schema>) -> CliResult<Ingested> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let hash = Sha256::digest(&bytes);
    let sha256 = hash.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let (schema, frames) = read_frames(bytes.as_slice(), &path.display().to_string(), expect)?;
    Ok(Ingested { schema, frames, sha256 })
}

pub fn write_frames<W: Write>(mut w: W, frames: &[Frame<f64>]) -> std::io::Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no frames to write"))?;
    let schema = Schema {
        p: first.locations.dim(),
        d: first.dim(),
    };
    writeln!(w, "{}", schema.header().join(","))?;
    let mut line = String::new();
    for f in frames {
        for i in 0..f.len() {
            line.clear();
            let _ = write!(line, "{}", f.t);
            for &z in f.locations.point(i) {
                line.push(',');
                line.push_str(&fmt_f64(z));
            }
            for c in 0..f.dim() {
                line.push(',');
                line.push_str(&fmt_f64(f.velocities[(i, c)]));
            }
            writeln!(w, "{line}")?;
        }
    }
    w.flush()
}

/// Per-axis affine map of spatial coordinates onto the unit box,
/// `z' = (z − lo) / span`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lo: Vec<f64>,
    pub span: Vec<f64>,
}

impl Normalization {
    /// Fits the map to the bounding box of every location. Degenerate axes
    /// get unit span.
    pub fn fit(frames: &[Frame<f64>]) -> Option<Self> {
        let (lo, hi) = bounding_box(frames)?;
        let span = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| if b > a { b - a } else { 1.0 })
            .collect();
        Some(Self { lo, span })
    }

    pub fn apply(&self, frames: &mut [Frame<f64>]) {
        let p = self.lo.len();
        for f in frames {
            for (i, z) in f.locations.coords_mut().iter_mut().enumerate() {
                *z = (*z - self.lo[i % p]) / self.span[i % p];
            }
        }
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(i, &v)| self.lo[i] + v * self.span[i]).collect()
    }
}

/// Coordinate-wise minimum and maximum over all locations.
pub fn bounding_box(frames: &[Frame<f64>]) -> Option<(Vec<f64>, Vec<f64>)> {
    let p = frames.first()?.locations.dim();
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for f in frames {
        for z in f.locations.iter() {
            for a in 0..p {
                lo[a] = lo[a].min(z[a]);
                hi[a] = hi[a].max(z[a]);
            }
        }
    }
    Some((lo, hi))
}

/// Square matrix with a `from,to_1,...,to_K` header and 1-based row labels.
pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> std::io::Result<()> {
    let mut header = vec!["from".to_string()];
    header.extend((1..=m.ncols()).map(|j| format!("to_{j}")));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..m.nrows() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(m.row(i).iter().map(|&v| fmt_f64(v)));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

pub fn read_matrix<R: Read>(reader: R, source: &str) -> CliResult<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = line_of(&rec);
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| CliError::parse(source, line, format!("`{v}` is not numeric"))))
            .collect::<CliResult<Vec<_>>>()?;
        rows.push(vals);
    }
    let k = rows.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(CliError::Data(format!("{source}: matrix is not square")));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

/// One row of `assignments.csv`; `state` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub t: usize,
    pub state: usize,
    pub oracle: u8,
    pub step_loglik: f64,
}

pub fn write_assignments<W: Write>(w: W, rows: &[AssignmentRow]) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "state", "oracle", "step_loglik"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for r in rows {
        wtr.write_record([r.t.to_string(), r.state.to_string(), r.oracle.to_string(), fmt_f64(r.step_loglik)])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    wtr.flush().map_err(|e| CliError::Data(e.to_string()))
}

pub fn read_assignments<R: Read>(reader: R, source: &str) -> CliResult<Vec<AssignmentRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_error(source, e)))
        .collect()
}

/// One grid point of an exported field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRow {
    pub z: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

pub fn write_field<W: Write>(mut w: W, schema: Schema, rows: &[FieldRow]) -> std::io::Result<()> {
    let mut header: Vec<String> = (1..=schema.p).map(|i| format!("z{i}")).collect();
    header.extend((1..=schema.d).map(|i| format!("mean_v{i}")));
    header.extend((1..=schema.d).map(|i| format!("sd_v{i}")));
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let cells: Vec<String> = r.z.iter().chain(&r.mean).chain(&r.sd).map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()
}

pub fn read_field<R: Read>(reader: R, source: &str) -> CliResult<(Schema, Vec<FieldRow>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    let p = header.iter().filter(|h| h.starts_with('z')).count();
    let d = header.iter().filter(|h| h.starts_with("mean_v")).count();
    if p == 0 || d == 0 || header.len() != p + 2 * d {
        return Err(CliError::parse(source, 1, "field header must read `z1..zp,mean_v1..,sd_v1..`"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = line_of(&rec);
        let vals = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| CliError::parse(source, line, format!("`{v}` is not numeric"))))
            .collect::<CliResult<Vec<_>>>()?;
        if vals.len() != header.len() {
            return Err(CliError::parse(source, line, "wrong column count"));
        }
        rows.push(FieldRow {
            z: vals[..p].to_vec(),
            mean: vals[p..p + d].to_vec(),
            sd: vals[p + d..].to_vec(),
        });
    }
    Ok((Schema { p, d }, rows))
}
