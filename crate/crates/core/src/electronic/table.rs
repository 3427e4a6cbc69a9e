//! Coefficient and energy tables read from CSV.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::spline::CubicSpline;

pub const PAULI_HEADER: [&str; 4] = ["R_bohr", "a_hartree", "b_hartree", "c_hartree"];
pub const RAW_HEADER: [&str; 2] = ["R_bohr", "V_hartree"];
pub const MIN_ROWS: usize = 8;

/// Splines of `a(R)`, `b(R)`, `c(R)` for `H_e(R) = a I + b Z + c X`.
#[derive(Clone, Debug)]
pub struct PauliCoefficientTable {
    a: CubicSpline,
    b: CubicSpline,
    c: CubicSpline,
}

/// Splined `V(R)` read from an `R_bohr,V_hartree` table.
#[derive(Clone, Debug)]
pub struct RawPesTable {
    v: CubicSpline,
}

fn read_columns<R: Read>(source: R, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Parse(format!(
            "expected header {}, found {}",
            header.join(","),
            found.join(",")
        )));
    }
    let mut cols = vec![Vec::new(); header.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!(
                "row {}: expected {} fields",
                line + 1,
                header.len()
            )));
        }
        for (col, field) in cols.iter_mut().zip(rec.iter()) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: cannot parse {field:?}", line + 1)))?;
            col.push(v);
        }
    }
    let n = cols[0].len();
    if n < MIN_ROWS {
        return Err(Error::Table(format!(
            "need at least {MIN_ROWS} samples, got {n}"
        )));
    }
    if cols.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Table("non-finite value".into()));
    }
    if cols[0].windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Table("R values must be strictly increasing".into()));
    }
    Ok(cols)
}

fn write_columns<W: Write>(sink: W, header: &[&str], cols: &[&[f64]]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for i in 0..cols[0].len() {
        w.write_record(cols.iter().map(|c| c[i].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

impl PauliCoefficientTable {
    pub fn from_columns(r: Vec<f64>, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if r.len() < MIN_ROWS {
            return Err(Error::Table(format!(
                "need at least {MIN_ROWS} samples, got {}",
                r.len()
            )));
        }
        Ok(Self {
            a: CubicSpline::new(r.clone(), a)?,
            b: CubicSpline::new(r.clone(), b)?,
            c: CubicSpline::new(r, c)?,
        })
    }

    /// Parse `R_bohr,a_hartree,b_hartree,c_hartree` CSV; `#` lines are comments.
    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut cols = read_columns(source, &PAULI_HEADER)?.into_iter();
        let mut next = || cols.next().unwrap();
        Self::from_columns(next(), next(), next(), next())
    }

    /// Write in the same format; values round-trip bit-exactly.
    pub fn write<W: Write>(&self, sink: W) -> Result<()> {
        write_columns(
            sink,
            &PAULI_HEADER,
            &[self.r(), self.a.values(), self.b.values(), self.c.values()],
        )
    }

    pub fn len(&self) -> usize {
        self.a.knots().len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn r(&self) -> &[f64] {
        self.a.knots()
    }
    pub fn a(&self) -> &[f64] {
        self.a.values()
    }
    pub fn b(&self) -> &[f64] {
        self.b.values()
    }
    pub fn c(&self) -> &[f64] {
        self.c.values()
    }
    pub fn domain(&self) -> (f64, f64) {
        self.a.domain()
    }

    /// `(value, first, second derivative)` of `a`, `b`, `c` at `r`.
    pub fn coefficients(&self, r: f64) -> Result<[(f64, f64, f64); 3]> {
        Ok([
            self.a.eval_all(r)?,
            self.b.eval_all(r)?,
            self.c.eval_all(r)?,
        ])
    }
}

impl RawPesTable {
    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut cols = read_columns(source, &RAW_HEADER)?;
        let v = cols.pop().unwrap();
        let r = cols.pop().unwrap();
        Ok(Self {
            v: CubicSpline::new(r, v)?,
        })
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<()> {
        write_columns(sink, &RAW_HEADER, &[self.v.knots(), self.v.values()])
    }

    pub fn from_columns(r: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if r.len() < MIN_ROWS {
            return Err(Error::Table(format!(
                "need at least {MIN_ROWS} samples, got {}",
                r.len()
            )));
        }
        Ok(Self {
            v: CubicSpline::new(r, v)?,
        })
    }

    pub fn len(&self) -> usize {
        self.v.knots().len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn domain(&self) -> (f64, f64) {
        self.v.domain()
    }
    pub(crate) fn spline(&self) -> &CubicSpline {
        &self.v
    }
}
