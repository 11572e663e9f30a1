//! Plain-text report of a fit.

use std::fmt::Write;

use crate::ecm::FitResult;

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.10e}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn fit_report(result: &FitResult) -> String {
    let p = &result.params;
    let d = p.dim();
    let mut out = String::new();
    let _ = writeln!(out, "dimension: {d}");
    let _ = writeln!(out, "mu: {}", fmt_vec(p.mu().as_slice()));
    let _ = writeln!(out, "gamma: {}", fmt_vec(p.gamma().as_slice()));
    let _ = writeln!(out, "sigma:");
    for i in 0..d {
        let row: Vec<f64> = (0..d).map(|j| p.sigma()[(i, j)]).collect();
        let _ = writeln!(out, "  {}", fmt_vec(&row));
    }
    let _ = writeln!(out, "nu: {:.10e}", p.nu());
    let _ = writeln!(out, "iterations: {}", result.iterations);
    let _ = writeln!(out, "trace_length: {}", result.loglik_trace.len());
    let _ = writeln!(out, "loo_loglik: {:.12e}", result.final_loglik());
    let _ = writeln!(out, "termination: {}", result.termination);
    let _ = writeln!(out, "warnings: {}", result.warnings.len());
    for w in &result.warnings {
        let _ = writeln!(out, "  - {w}");
    }
    out
}
