//! ngspice-compatible ASCII rawfile writer.

use crate::analysis::Plot;
use std::fmt::Write as _;

/// Fixed date string keeps rawfiles byte-identical across runs.
const DATE: &str = "Thu Jan  1 00:00:00 1970";

/// C-style `%.15e` (two-digit signed exponent), which is what SPICE tools
/// write and expect.
fn fmt_e(v: f64) -> String {
    let s = format!("{v:.15e}");
    match s.split_once('e') {
        Some((mant, exp)) => {
            let e: i32 = exp.parse().unwrap_or(0);
            format!("{mant}e{}{:02}", if e < 0 { "-" } else { "+" }, e.abs())
        }
        None => s,
    }
}

pub fn write_plot(out: &mut String, title: &str, plot: &Plot) {
    let _ = writeln!(out, "Title: {title}");
    let _ = writeln!(out, "Date: {DATE}");
    let _ = writeln!(out, "Plotname: {}", plot.name);
    let _ = writeln!(out, "Flags: {}", if plot.complex { "complex" } else { "real" });
    let _ = writeln!(out, "No. Variables: {}", plot.variables.len());
    let _ = writeln!(out, "No. Points: {}", plot.data.len());
    let _ = writeln!(out, "Variables:");
    for (i, v) in plot.variables.iter().enumerate() {
        let _ = writeln!(out, "\t{i}\t{}\t{}", v.name, v.kind);
    }
    let _ = writeln!(out, "Values:");
    for (pt, row) in plot.data.iter().enumerate() {
        for (vi, val) in row.iter().enumerate() {
            let text = if plot.complex {
                format!("{},{}", fmt_e(val.re), fmt_e(val.im))
            } else {
                fmt_e(val.re)
            };
            if vi == 0 {
                let _ = writeln!(out, "{pt}\t{text}");
            } else {
                let _ = writeln!(out, "\t{text}");
            }
        }
        let _ = writeln!(out);
    }
}

pub fn render(title: &str, plots: &[Plot]) -> String {
    let mut out = String::new();
    for p in plots {
        write_plot(&mut out, title, p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_formatting_matches_c_style() {
        assert_eq!(fmt_e(1.8), "1.800000000000000e+00");
        assert_eq!(fmt_e(-0.9), "-9.000000000000000e-01");
        assert_eq!(fmt_e(1.0e10), "1.000000000000000e+10");
        assert_eq!(fmt_e(0.0), "0.000000000000000e+00");
    }
}
