//! Observational datasets: covariates, outcomes, treatment indicators and
//! (for simulations only) the latent response labels.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An observational dataset with `n` rows and `d` covariates.
///
/// Covariates are stored row-major. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    t: Vec<bool>,
    h: Option<Vec<bool>>,
}

/// Row indices of the treated and untreated samples, each ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentSplit {
    pub treated: Vec<usize>,
    pub untreated: Vec<usize>,
}

impl Dataset {
    /// Builds a validated dataset. `x` is row-major with `y.len()` rows.
    pub fn new(x: Vec<f64>, d: usize, y: Vec<f64>, t: Vec<bool>, h: Option<Vec<bool>>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if d == 0 {
            return Err(Error::InvalidInput("dataset has no covariates".into()));
        }
        if x.len() != n * d {
            return Err(Error::InvalidInput(format!(
                "covariate buffer has {} values, expected {n}x{d}",
                x.len()
            )));
        }
        if t.len() != n {
            return Err(Error::InvalidInput(format!("t has length {}, expected {n}", t.len())));
        }
        for i in 0..n {
            if !y[i].is_finite() || x[i * d..(i + 1) * d].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRow {
                    row: i + 1,
                    message: "non-finite value".into(),
                });
            }
        }
        if let Some(h) = &h {
            if h.len() != n {
                return Err(Error::InvalidInput(format!("h has length {}, expected {n}", h.len())));
            }
            if let Some(i) = (0..n).find(|&i| h[i] && !t[i]) {
                return Err(Error::InvalidRow {
                    row: i + 1,
                    message: "h=1 on an untreated sample".into(),
                });
            }
        }
        Ok(Self { n, d, x, y, t, h })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Row-major covariate buffer.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[bool] {
        &self.t
    }

    pub fn h(&self) -> Option<&[bool]> {
        self.h.as_deref()
    }

    pub fn has_truth(&self) -> bool {
        self.h.is_some()
    }

    /// Drops the latent labels, as if the data were observational.
    pub fn without_truth(&self) -> Self {
        Self { h: None, ..self.clone() }
    }

    /// Copy of the dataset with covariate columns centred and scaled to unit
    /// variance (columns with zero variance are only centred).
    pub fn standardized(&self) -> Self {
        let (n, d) = (self.n, self.d);
        let mut x = self.x.clone();
        for j in 0..d {
            let mean = (0..n).map(|i| self.x[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (self.x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                x[i * d + j] = (self.x[i * d + j] - mean) / sd;
            }
        }
        Self { x, ..self.clone() }
    }

    /// Rows selected by `idx`, in the given order.
    pub fn subset_rows(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        (x, y)
    }

    /// Writes the canonical CSV form (`x1..xd,y,t[,h]`), 17 significant
    /// digits per float. `comment` lines, if any, are prefixed with `#`.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(w, "# {line}")?;
            }
        }
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.d).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        header.push("t".into());
        if self.h.is_some() {
            header.push("h".into());
        }
        wtr.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n {
            rec.clear();
            rec.extend(self.row(i).iter().map(|v| format_f64(*v)));
            rec.push(format_f64(self.y[i]));
            rec.push(if self.t[i] { "1" } else { "0" }.into());
            if let Some(h) = &self.h {
                rec.push(if h[i] { "1" } else { "0" }.into());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f), comment)
    }

    /// Parses the canonical CSV form. Lines starting with `#` are ignored.
    /// When `has_truth` is set the `h` column is required.
    pub fn read_csv<R: Read>(r: R, has_truth: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let mut x_cols = Vec::new();
        while let Some(c) = col(&format!("x{}", x_cols.len() + 1)) {
            x_cols.push(c);
        }
        if x_cols.is_empty() {
            return Err(Error::MissingColumn("x1".into()));
        }
        let y_col = col("y").ok_or_else(|| Error::MissingColumn("y".into()))?;
        let t_col = col("t").ok_or_else(|| Error::MissingColumn("t".into()))?;
        let h_col = match (col("h"), has_truth) {
            (Some(c), _) => Some(c),
            (None, true) => return Err(Error::MissingColumn("h".into())),
            (None, false) => None,
        };
        let d = x_cols.len();
        let (mut x, mut y, mut t) = (Vec::new(), Vec::new(), Vec::new());
        let mut h = h_col.map(|_| Vec::new());
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 1;
            let rec = rec?;
            let num = |c: usize, name: &str| -> Result<f64> {
                let s = rec.get(c).unwrap_or("");
                let v: f64 = s.parse().map_err(|_| Error::InvalidRow {
                    row,
                    message: format!("column {name}: cannot parse `{s}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::InvalidRow {
                        row,
                        message: format!("column {name}: non-finite value"),
                    });
                }
                Ok(v)
            };
            let flag = |c: usize, name: &str| -> Result<bool> {
                match rec.get(c).unwrap_or("") {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    s => Err(Error::InvalidRow {
                        row,
                        message: format!("column {name}: expected 0 or 1, found `{s}`"),
                    }),
                }
            };
            for (j, &c) in x_cols.iter().enumerate() {
                x.push(num(c, &format!("x{}", j + 1))?);
            }
            y.push(num(y_col, "y")?);
            let ti = flag(t_col, "t")?;
            t.push(ti);
            if let (Some(c), Some(h)) = (h_col, h.as_mut()) {
                let hi = flag(c, "h")?;
                if hi && !ti {
                    return Err(Error::InvalidRow {
                        row,
                        message: "h=1 on an untreated sample".into(),
                    });
                }
                h.push(hi);
            }
        }
        Self::new(x, d, y, t, h)
    }

    pub fn load_csv(path: &Path, has_truth: bool) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f), has_truth)
    }
}

/// Loads a dataset from a CSV file; see [`Dataset::read_csv`].
pub fn load_dataset(path: &Path, has_truth: bool) -> Result<Dataset> {
    Dataset::load_csv(path, has_truth)
}

/// Partitions row indices by treatment. Both groups must be non-empty.
pub fn split_by_treatment(ds: &Dataset) -> Result<TreatmentSplit> {
    let (treated, untreated): (Vec<usize>, Vec<usize>) = (0..ds.n()).partition(|&i| ds.t()[i]);
    if treated.is_empty() {
        return Err(Error::EmptyGroup("treated"));
    }
    if untreated.is_empty() {
        return Err(Error::EmptyGroup("untreated"));
    }
    Ok(TreatmentSplit { treated, untreated })
}

fn format_f64(v: f64) -> String {
    // 17 significant digits round-trip every finite f64.
    format!("{v:.16e}")
}
