//! Matrix Market coordinate format (`real general` / `real symmetric`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::CsrMatrix;
use crate::error::{Error, Result};

pub fn write_matrix_market(a: &CsrMatrix, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", a.nrows(), a.ncols(), a.nnz())?;
        for (i, j, v) in a.triplets() {
            writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_market(path: &Path) -> Result<CsrMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_market(&text)
}

pub fn parse_matrix_market(text: &str) -> Result<CsrMatrix> {
    let mut lines = text.lines();
    let banner = lines
        .next()
        .ok_or_else(|| Error::Format("empty Matrix Market file".into()))?
        .to_ascii_lowercase();
    let fields: Vec<&str> = banner.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" || fields[2] != "coordinate" {
        return Err(Error::Format(format!("unsupported Matrix Market banner '{banner}'")));
    }
    if fields[3] != "real" && fields[3] != "integer" {
        return Err(Error::Format(format!("unsupported field type '{}'", fields[3])));
    }
    let symmetric = match fields[4] {
        "general" => false,
        "symmetric" => true,
        other => return Err(Error::Format(format!("unsupported symmetry '{other}'"))),
    };
    let mut data = lines.filter(|l| !l.trim().is_empty() && !l.starts_with('%'));
    let size = data.next().ok_or_else(|| Error::Format("missing size line".into()))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad size line '{size}'"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Format(format!("bad size line '{size}'")));
    }
    let (nrows, ncols, nnz) = (dims[0], dims[1], dims[2]);
    let mut trip = Vec::with_capacity(if symmetric { 2 * nnz } else { nnz });
    let mut count = 0;
    for line in data {
        let tok: Vec<&str> = line.split_whitespace().collect();
        let parse_err = || Error::Format(format!("bad entry line '{line}'"));
        if tok.len() != 3 {
            return Err(parse_err());
        }
        let i: usize = tok[0].parse().map_err(|_| parse_err())?;
        let j: usize = tok[1].parse().map_err(|_| parse_err())?;
        let v: f64 = tok[2].parse().map_err(|_| parse_err())?;
        if i == 0 || j == 0 || i > nrows || j > ncols {
            return Err(parse_err());
        }
        trip.push((i - 1, j - 1, v));
        if symmetric && i != j {
            trip.push((j - 1, i - 1, v));
        }
        count += 1;
    }
    if count != nnz {
        return Err(Error::SizeMismatch {
            expected: nnz,
            found: count,
        });
    }
    CsrMatrix::from_triplets(nrows, ncols, &trip)
}
