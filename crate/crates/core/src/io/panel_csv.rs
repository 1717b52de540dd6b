//! Long-format panel CSV: header `t,location,y,x1,..,xk`, one row per
//! (time, location), time-major. Values are written with the shortest
//! representation that parses back to the same `f64`, so a round trip is
//! bit-exact.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::PanelData;

pub fn write_panel<W: Write>(panel: &PanelData, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "location".to_string(), "y".to_string()];
    header.extend((1..=panel.k()).map(|l| format!("x{l}")));
    wtr.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            row.clear();
            row.push(t.to_string());
            row.push(i.to_string());
            row.push(panel.y()[(i, t)].to_string());
            row.extend((0..panel.k()).map(|l| panel.x()[t][(i, l)].to_string()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn parse_f64(field: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: '{field}' is not a number")))
}

fn parse_index(field: &str, line: u64) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: '{field}' is not a nonnegative integer")))
}

/// Reads a panel written by [`write_panel`]. Rows may come in any order
/// but every `(t, location)` pair of the implied grid must appear once.
pub fn read_panel<R: Read>(input: R) -> Result<PanelData> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "t" || &headers[1] != "location" || &headers[2] != "y" {
        return Err(Error::Parse("panel CSV header must start with t,location,y".into()));
    }
    let k = headers.len() - 3;
    for (l, h) in headers.iter().skip(3).enumerate() {
        if h != format!("x{}", l + 1) {
            return Err(Error::Parse(format!("expected column x{}, found '{h}'", l + 1)));
        }
    }
    let mut rows = Vec::new();
    let (mut n, mut t_len) = (0, 0);
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let t = parse_index(&rec[0], line)?;
        let i = parse_index(&rec[1], line)?;
        let y = parse_f64(&rec[2], line)?;
        let x: Vec<f64> = (0..k).map(|l| parse_f64(&rec[3 + l], line)).collect::<Result<_>>()?;
        n = n.max(i + 1);
        t_len = t_len.max(t + 1);
        rows.push((t, i, y, x));
    }
    if rows.len() != n * t_len {
        return Err(Error::Parse(format!(
            "{} rows do not form a complete {n} x {t_len} grid",
            rows.len()
        )));
    }
    let mut y = DMatrix::from_element(n, t_len, f64::NAN);
    let mut xs = vec![DMatrix::zeros(n, k); t_len];
    let mut seen = vec![false; n * t_len];
    for (t, i, v, x) in rows {
        if std::mem::replace(&mut seen[t * n + i], true) {
            return Err(Error::Parse(format!("duplicate row for t={t}, location={i}")));
        }
        y[(i, t)] = v;
        for (l, xv) in x.into_iter().enumerate() {
            xs[t][(i, l)] = xv;
        }
    }
    PanelData::new(y, xs)
}
