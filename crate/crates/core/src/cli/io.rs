//! Plain-text artifact formats.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::sim_eval::{SweepRow, Trace};

pub const SWEEP_HEADER: &str = "delay_s,mode,measure,value,lower_bound,upper_bound,status";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// `"rows cols"` followed by one whitespace-separated row per line.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| num(m[(i, j)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, String> {
    let mut tokens = text.split_whitespace();
    let mut dim = |what: &str| -> Result<usize, String> {
        tokens
            .next()
            .ok_or_else(|| format!("missing {what} count"))?
            .parse::<usize>()
            .map_err(|e| format!("bad {what} count: {e}"))
    };
    let (rows, cols) = (dim("row")?, dim("column")?);
    let values: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad value `{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    if values.len() != rows * cols {
        return Err(format!("expected {} values, found {}", rows * cols, values.len()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            num(r.delay_s),
            csv_field(&r.mode),
            r.measure.name(),
            num(r.value),
            num(r.lower_bound),
            num(r.upper_bound),
            csv_field(&r.status)
        );
    }
    s
}

pub fn format_trace(trace: &Trace) -> String {
    let (nx, nu, ny) = (
        trace.x.first().map_or(0, |v| v.len()),
        trace.u.first().map_or(0, |v| v.len()),
        trace.y.first().map_or(0, |v| v.len()),
    );
    let mut cols = vec!["t_s".to_string()];
    cols.extend((1..=nx).map(|i| format!("x{i}")));
    cols.extend((1..=nu).map(|i| format!("u{i}")));
    cols.extend((1..=nu).map(|i| format!("u_bar{i}")));
    cols.extend((1..=ny).map(|i| format!("y{i}")));
    let mut s = cols.join(",");
    s.push('\n');
    for k in 0..trace.t.len() {
        let mut row = vec![num(trace.t[k])];
        for v in [&trace.x[k], &trace.u[k], &trace.u_bar[k], &trace.y[k]] {
            row.extend(v.iter().map(|&e| num(e)));
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_eval::Measure;
    use proptest::prelude::*;

    #[test]
    fn matrix_header_and_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 0.1, 0.0, 1e-300, 3.0]);
        let s = format_matrix(&m);
        assert!(s.starts_with("2 3\n1.0000000000000000e0 -2.5000000000000000e0 "));
        assert_eq!(s.lines().count(), 3);
        assert_eq!(parse_matrix(&s).unwrap(), m);
    }

    #[test]
    fn malformed_matrix_rejected() {
        assert!(parse_matrix("2 2\n1 2 3\n").is_err());
        assert!(parse_matrix("x 2\n").is_err());
    }

    #[test]
    fn sweep_csv_quotes_status() {
        let row = SweepRow {
            delay_s: 0.02,
            mode: "oscillation".into(),
            measure: Measure::LqrCost,
            value: 1.5,
            lower_bound: 1.0,
            upper_bound: 2.0,
            status: "error: a, b".into(),
        };
        let s = format_sweep(&[row]);
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some(SWEEP_HEADER));
        assert_eq!(
            lines.next(),
            Some("2.0000000000000000e-2,oscillation,lqr_cost,1.5000000000000000e0,1.0000000000000000e0,2.0000000000000000e0,\"error: a, b\"")
        );
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    proptest! {
        #[test]
        fn matrix_text_is_lossless(vals in proptest::collection::vec(-1e300f64..1e300, 1..20), cols in 1usize..4) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let m = DMatrix::from_row_slice(rows, cols, &vals[..rows * cols]);
            prop_assert_eq!(parse_matrix(&format_matrix(&m)).unwrap(), m);
        }
    }
}
