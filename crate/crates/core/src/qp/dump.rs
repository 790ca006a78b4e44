use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{QpProblem, SlackColumn};
use crate::error::{Error, Result};

const HEADER: &str = "koopsafe-qp 1";

/// Plain-text dump of a problem: a header, the dimensions, then one labelled
/// line per array in row-major order. Floats use the shortest round-trip
/// representation, so reading a dump back is exact.
pub fn write_dump(problem: &QpProblem, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, dump_string(problem))?;
    Ok(())
}

fn push_array<'a>(out: &mut String, label: &str, values: impl Iterator<Item = &'a f64>) {
    out.push_str(label);
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

fn dump_string(p: &QpProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(
        out,
        "vars {} rows {} slack {}",
        p.var_count(),
        p.row_count(),
        p.slack.len()
    );
    let _ = writeln!(out, "offset {:?}", p.offset);
    push_array(&mut out, "H", p.hessian.transpose().iter());
    push_array(&mut out, "g", p.linear.iter());
    push_array(&mut out, "G", p.ineq.transpose().iter());
    push_array(&mut out, "h", p.ineq_rhs.iter());
    push_array(&mut out, "lb", p.lb.iter());
    push_array(&mut out, "ub", p.ub.iter());
    out.push_str("slack");
    for s in &p.slack {
        let _ = write!(out, " {}:{}", s.row, s.column);
    }
    out.push('\n');
    out
}

pub fn read_dump(path: &Path) -> Result<QpProblem> {
    let text = fs::read_to_string(path)?;
    parse_dump(&text).map_err(|detail| Error::Format {
        path: path.display().to_string(),
        detail,
    })
}

fn parse_dump(text: &str) -> std::result::Result<QpProblem, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err("missing header".into());
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or("missing dimensions")?
        .split_whitespace()
        .skip(1)
        .step_by(2)
        .map(|t| t.parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let [v, r, ns] = dims[..] else {
        return Err("dimension line needs vars, rows and slack".into());
    };
    let mut field = |label: &str, len: usize| -> std::result::Result<Vec<f64>, String> {
        let line = lines.next().ok_or(format!("missing {label}"))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(label) {
            return Err(format!("expected {label}"));
        }
        let vals = parts
            .map(|t| t.parse::<f64>().map_err(|e| format!("{label}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if vals.len() != len {
            return Err(format!("{label} has {} values, expected {len}", vals.len()));
        }
        Ok(vals)
    };
    let offset = field("offset", 1)?[0];
    let h = DMatrix::from_row_slice(v, v, &field("H", v * v)?);
    let g = DVector::from_vec(field("g", v)?);
    let gm = DMatrix::from_row_slice(r, v, &field("G", r * v)?);
    let hv = DVector::from_vec(field("h", r)?);
    let lb = DVector::from_vec(field("lb", v)?);
    let ub = DVector::from_vec(field("ub", v)?);
    let slack_line = lines.next().ok_or("missing slack")?;
    let slack = slack_line
        .split_whitespace()
        .skip(1)
        .map(|t| {
            let (a, b) = t.split_once(':').ok_or("bad slack entry")?;
            Ok(SlackColumn {
                row: a.parse().map_err(|_| "bad slack row")?,
                column: b.parse().map_err(|_| "bad slack column")?,
            })
        })
        .collect::<std::result::Result<Vec<_>, &str>>()?;
    if slack.len() != ns {
        return Err("slack count mismatch".into());
    }
    let p = QpProblem {
        hessian: h,
        linear: g,
        offset,
        ineq: gm,
        ineq_rhs: hv,
        lb,
        ub,
        slack,
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.1 + 0.2, 0.1 + 0.2, 1.0 / 3.0]);
        let p = QpProblem::new(h, DVector::from_vec(vec![-1e-17, 5.5]))
            .unwrap()
            .with_bounds(
                DVector::from_vec(vec![f64::NEG_INFINITY, -1.0]),
                DVector::from_vec(vec![f64::INFINITY, 1.0]),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_row_slice(1, 2, &[1.0, std::f64::consts::E]),
                DVector::from_element(1, 0.7),
            )
            .unwrap()
            .add_slack(&[0], 100.0)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.qp");
        write_dump(&p, &path).unwrap();
        assert_eq!(read_dump(&path).unwrap(), p);
    }

    #[test]
    fn malformed_dump_is_rejected() {
        assert!(parse_dump("nonsense").is_err());
        assert!(parse_dump(&format!(
            "{HEADER}\nvars 1 rows 0 slack 0\noffset 0.0\nH 1.0 2.0\n"
        ))
        .is_err());
    }
}
