//! Assignment fidelity, geometric-mean fidelity and the cross-fidelity
//! matrix.
//!
//! With `P(a_i | b_j)` the empirical probability of detecting qubit `i` in
//! state `a` given qubit `j` was prepared in state `b` (marginalised over
//! every other qubit's preparation):
//!
//! * `F_i = 1 - [P(0_i | 1_i) + P(1_i | 0_i)] / 2`
//! * `F_GM = (prod_i F_i)^(1/N)`
//! * `CF_ij = 1 - [P(1_i | 0_j) + P(0_i | 1_j)]`
//!
//! Rows of `CF` index the detected qubit, columns the prepared one, so
//! `CF_ii = 2 F_i - 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QubitCounts {
    pub n_prep0: u64,
    pub n_prep1: u64,
    pub n_pred1_prep0: u64,
    pub n_pred0_prep1: u64,
}

impl QubitCounts {
    /// `P(detect 1 | prepared 0)`.
    pub fn p01(&self) -> f64 {
        self.n_pred1_prep0 as f64 / self.n_prep0 as f64
    }

    /// `P(detect 0 | prepared 1)`.
    pub fn p10(&self) -> f64 {
        self.n_pred0_prep1 as f64 / self.n_prep1 as f64
    }

    pub fn fidelity(&self) -> f64 {
        1.0 - (self.p10() + self.p01()) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity: Vec<f64>,
    pub f_gm: f64,
    /// `cross_fidelity[i][j]`: detected qubit `i`, prepared qubit `j`.
    pub cross_fidelity: Vec<Vec<f64>>,
    pub confusion: Vec<QubitCounts>,
}

impl FidelityReport {
    pub fn n_qubits(&self) -> usize {
        self.fidelity.len()
    }

    /// A qubit with zero fidelity forces `F_GM = 0`; such reports are
    /// reported as-is and flagged here.
    pub fn is_degenerate(&self) -> bool {
        self.fidelity.contains(&0.0)
    }

    /// Mean |CF_ij| over i != j.
    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let n = self.n_qubits();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for (i, row) in self.cross_fidelity.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    sum += v.abs();
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    let product: f64 = values.iter().product();
    product.powf(1.0 / values.len() as f64)
}

fn check_inputs(labels: &[u32], preds: &[u32], n_qubits: usize) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(Error::Shape { expected: labels.len(), got: preds.len() });
    }
    if labels.is_empty() {
        return Err(Error::Domain("no shots to evaluate".into()));
    }
    if n_qubits == 0 || n_qubits > 32 {
        return Err(Error::Domain(format!("unsupported qubit count {n_qubits}")));
    }
    Ok(())
}

/// Per-(detected i, prepared j) counts: `[n_prep0_j, n_prep1_j,
/// n_pred1_i & prep0_j, n_pred0_i & prep1_j]`.
fn tally(labels: &[u32], preds: &[u32], n: usize) -> Vec<[u64; 4]> {
    let mut t = vec![[0u64; 4]; n * n];
    for (&l, &p) in labels.iter().zip(preds) {
        for j in 0..n {
            let prep = (l >> j) & 1;
            for i in 0..n {
                let det = (p >> i) & 1;
                let c = &mut t[i * n + j];
                if prep == 0 {
                    c[0] += 1;
                    c[2] += det as u64;
                } else {
                    c[1] += 1;
                    c[3] += 1 - det as u64;
                }
            }
        }
    }
    t
}

fn check_both_preparations(t: &[[u64; 4]], n: usize) -> Result<()> {
    for q in 0..n {
        let c = t[q * n + q];
        if c[0] == 0 {
            return Err(Error::SingleClass { qubit: q, missing: 0 });
        }
        if c[1] == 0 {
            return Err(Error::SingleClass { qubit: q, missing: 1 });
        }
    }
    Ok(())
}

fn cf_matrix(t: &[[u64; 4]], n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let c = t[i * n + j];
                    let p1_given_0 = c[2] as f64 / c[0] as f64;
                    let p0_given_1 = c[3] as f64 / c[1] as f64;
                    1.0 - (p1_given_0 + p0_given_1)
                })
                .collect()
        })
        .collect()
}

pub fn fidelity(labels: &[u32], preds: &[u32], n_qubits: usize) -> Result<FidelityReport> {
    check_inputs(labels, preds, n_qubits)?;
    let n = n_qubits;
    let t = tally(labels, preds, n);
    check_both_preparations(&t, n)?;
    let confusion: Vec<QubitCounts> = (0..n)
        .map(|q| {
            let c = t[q * n + q];
            QubitCounts { n_prep0: c[0], n_prep1: c[1], n_pred1_prep0: c[2], n_pred0_prep1: c[3] }
        })
        .collect();
    let fidelity: Vec<f64> = confusion.iter().map(QubitCounts::fidelity).collect();
    Ok(FidelityReport { f_gm: geometric_mean(&fidelity), cross_fidelity: cf_matrix(&t, n), fidelity, confusion })
}

pub fn cross_fidelity_only(labels: &[u32], preds: &[u32], n_qubits: usize) -> Result<Vec<Vec<f64>>> {
    check_inputs(labels, preds, n_qubits)?;
    let t = tally(labels, preds, n_qubits);
    check_both_preparations(&t, n_qubits)?;
    Ok(cf_matrix(&t, n_qubits))
}

pub const CSV_HEADER: &str = "qubit,fidelity,p01,p10";
const COUNTS_HEADER: &str = "qubit,n_prep0,n_prep1,n_pred1_prep0,n_pred0_prep1";
const CF_HEADER: &str = "row,col,cross_fidelity";

/// Three blank-line separated tables: per-qubit fidelities, raw counts,
/// and the cross-fidelity matrix in row-major order.
pub fn summarize_csv(report: &FidelityReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (q, (f, c)) in report.fidelity.iter().zip(&report.confusion).enumerate() {
        let _ = writeln!(out, "{q},{f},{},{}", c.p01(), c.p10());
    }
    out.push('\n');
    out.push_str(COUNTS_HEADER);
    out.push('\n');
    for (q, c) in report.confusion.iter().enumerate() {
        let _ = writeln!(out, "{q},{},{},{},{}", c.n_prep0, c.n_prep1, c.n_pred1_prep0, c.n_pred0_prep1);
    }
    out.push('\n');
    out.push_str(CF_HEADER);
    out.push('\n');
    for (i, row) in report.cross_fidelity.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{i},{j},{v}");
        }
    }
    out
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn fields(line: &str, n: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != n {
        return Err(parse_err(format!("expected {n} fields in {line:?}")));
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| parse_err(format!("bad number {s:?}")))
}

/// Inverse of [`summarize_csv`].
pub fn parse_csv(text: &str) -> Result<FidelityReport> {
    let sections: Vec<Vec<&str>> = text.split("\n\n").map(|s| s.lines().filter(|l| !l.trim().is_empty()).collect()).collect();
    if sections.len() != 3 {
        return Err(parse_err(format!("expected 3 sections, found {}", sections.len())));
    }
    let headers = [CSV_HEADER, COUNTS_HEADER, CF_HEADER];
    for (s, h) in sections.iter().zip(headers) {
        if s.first() != Some(&h) {
            return Err(parse_err(format!("missing header {h:?}")));
        }
    }
    let mut fidelity = Vec::new();
    for (q, line) in sections[0][1..].iter().enumerate() {
        let f = fields(line, 4)?;
        if num::<usize>(f[0])? != q {
            return Err(parse_err("qubit rows out of order"));
        }
        fidelity.push(num(f[1])?);
    }
    let n = fidelity.len();
    let mut confusion = Vec::new();
    for line in &sections[1][1..] {
        let f = fields(line, 5)?;
        confusion.push(QubitCounts { n_prep0: num(f[1])?, n_prep1: num(f[2])?, n_pred1_prep0: num(f[3])?, n_pred0_prep1: num(f[4])? });
    }
    let mut cross_fidelity = vec![vec![0.0; n]; n];
    let cells = &sections[2][1..];
    if confusion.len() != n || cells.len() != n * n {
        return Err(parse_err("section sizes disagree"));
    }
    for line in cells {
        let f = fields(line, 3)?;
        let (i, j): (usize, usize) = (num(f[0])?, num(f[1])?);
        if i >= n || j >= n {
            return Err(parse_err("cross-fidelity index out of range"));
        }
        cross_fidelity[i][j] = num(f[2])?;
    }
    Ok(FidelityReport { f_gm: geometric_mean(&fidelity), fidelity, cross_fidelity, confusion })
}

/// The cross-fidelity matrix as a JSON array of rows.
pub fn cross_fidelity_json(report: &FidelityReport) -> String {
    serde_json::to_string(&report.cross_fidelity).expect("f64 matrix serializes")
}
