//! Artifact writers: trace CSVs, replication summaries, plot scripts.
//!
//! Trace files use the fixed schema `iter,objective,grad_norm,wall_ms`
//! with an optional trailing `ref_dist` column (present when the run
//! tracked a reference point). Decimal formatting is Rust's shortest
//! round-trip form, which never depends on the process locale. Files are
//! assembled in memory and written through a private temporary file
//! followed by an atomic rename, so concurrent sweep runs never observe a
//! half-written artifact.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rngd_core::optimizer::RunTrace;

use crate::CliError;

/// Counter distinguishing temporary files created by this process.
static TMP_NONCE: AtomicU64 = AtomicU64::new(0);

/// Writes `content` to `path` atomically: a uniquely named sibling file
/// is written first, then renamed into place.
///
/// # Errors
///
/// [`CliError::Io`] tagged with the destination path.
pub fn write_atomic(path: &Path, content: &str) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let nonce = TMP_NONCE.fetch_add(1, Ordering::Relaxed);
    let tmp_name = format!(
        ".{}.tmp-{}-{nonce}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into()),
        std::process::id(),
    );
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    std::fs::write(&tmp, content).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Renders a run trace in the fixed CSV schema. `record_timing` controls
/// whether the `wall_ms` column carries the measured time (opt-in) or a
/// deterministic zero, keeping default artifacts reproducible byte for
/// byte.
pub fn render_trace(trace: &RunTrace, record_timing: bool) -> String {
    let with_ref = trace
        .records
        .first()
        .is_some_and(|r| r.ref_dist.is_some());
    let mut out = String::from("iter,objective,grad_norm,wall_ms");
    if with_ref {
        out.push_str(",ref_dist");
    }
    out.push('\n');
    for r in &trace.records {
        let wall = if record_timing { r.wall_ms } else { 0.0 };
        let _ = write!(out, "{},{},{},{}", r.iter, r.objective, r.grad_norm, wall);
        if with_ref {
            let _ = write!(out, ",{}", r.ref_dist.unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

/// One aggregated summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Method tag.
    pub method: String,
    /// Iteration index.
    pub iter: usize,
    /// Mean objective across replications.
    pub mean: f64,
    /// Standard error of the mean (0 for a single replication).
    pub stderr: f64,
    /// Replications aggregated.
    pub n: usize,
}

/// Aggregates traces by method at matching iteration indices only: an
/// iteration contributes a row when every replication of that method
/// recorded it.
pub fn summarize(traces: &[(String, RunTrace)]) -> Vec<SummaryRow> {
    let mut methods: Vec<&str> = Vec::new();
    for (m, _) in traces {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
    }
    let mut rows = Vec::new();
    for method in methods {
        let reps: Vec<&RunTrace> = traces
            .iter()
            .filter(|(m, _)| m == method)
            .map(|(_, t)| t)
            .collect();
        let mut common: Vec<usize> = reps[0].records.iter().map(|r| r.iter).collect();
        for rep in &reps[1..] {
            let have: Vec<usize> = rep.records.iter().map(|r| r.iter).collect();
            common.retain(|i| have.contains(i));
        }
        for iter in common {
            let values: Vec<f64> = reps
                .iter()
                .map(|t| {
                    t.records
                        .iter()
                        .find(|r| r.iter == iter)
                        .expect("iteration index was intersected")
                        .objective
                })
                .collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = if n > 1 {
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            rows.push(SummaryRow {
                method: method.to_string(),
                iter,
                mean,
                stderr,
                n,
            });
        }
    }
    rows
}

/// Renders summary rows as CSV.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,iter,objective_mean,objective_stderr,replications\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.method, r.iter, r.mean, r.stderr, r.n);
    }
    out
}

/// Renders a gnuplot script plotting every trace file (objective vs
/// iteration). Output format/terminal is left to the caller of gnuplot.
pub fn render_plot_script(title: &str, trace_files: &[(String, String)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# gnuplot script; run from the directory holding it.");
    let _ = writeln!(out, "# e.g.  gnuplot -p plot.gp");
    let _ = writeln!(out, "set datafile separator comma");
    let _ = writeln!(out, "set title '{title}'");
    let _ = writeln!(out, "set xlabel 'iteration'");
    let _ = writeln!(out, "set ylabel 'objective'");
    let _ = writeln!(out, "set key outside right");
    let _ = writeln!(out, "set grid");
    out.push_str("plot \\\n");
    for (i, (label, file)) in trace_files.iter().enumerate() {
        let sep = if i + 1 == trace_files.len() { "" } else { ", \\" };
        let _ = writeln!(
            out,
            "  '{file}' using 1:2 skip 1 with lines title '{label}'{sep}"
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rngd_core::optimizer::IterRecord;

    fn record(iter: usize, objective: f64, ref_dist: Option<f64>) -> IterRecord {
        IterRecord {
            iter,
            objective,
            grad_norm: 0.5,
            wall_ms: 12.25,
            ref_dist,
        }
    }

    #[test]
    fn trace_schema_matches_the_contract() {
        let trace = RunTrace {
            records: vec![record(0, 1.5, None), record(10, 0.25, None)],
            ..RunTrace::default()
        };
        let csv = render_trace(&trace, false);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("iter,objective,grad_norm,wall_ms"));
        assert_eq!(lines.next(), Some("0,1.5,0.5,0"));
        assert_eq!(lines.next(), Some("10,0.25,0.5,0"));
        assert_eq!(lines.next(), None);

        let with_ref = RunTrace {
            records: vec![record(0, 1.5, Some(2.0))],
            ..RunTrace::default()
        };
        let csv = render_trace(&with_ref, true);
        assert!(csv.starts_with("iter,objective,grad_norm,wall_ms,ref_dist\n"));
        assert!(csv.contains(",12.25,2\n"), "{csv}");
    }

    #[test]
    fn summaries_align_on_shared_iterations_only() {
        let a = RunTrace {
            records: vec![record(0, 1.0, None), record(10, 0.5, None), record(20, 0.25, None)],
            ..RunTrace::default()
        };
        let b = RunTrace {
            records: vec![record(0, 2.0, None), record(10, 1.5, None)],
            ..RunTrace::default()
        };
        let rows = summarize(&[("m".into(), a), ("m".into(), b)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].iter, 0);
        assert_eq!(rows[0].mean, 1.5);
        assert_eq!(rows[1].iter, 10);
        assert_eq!(rows[1].mean, 1.0);
        assert_eq!(rows[1].n, 2);
        // Stderr of {0.5, 1.5}: sd = 1/sqrt(2) scaled... sample sd is
        // sqrt(0.5), stderr = sqrt(0.5)/sqrt(2) = 0.5.
        assert!((rows[1].stderr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn atomic_writes_land_and_leave_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, "hello\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "hello\n");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn plot_scripts_reference_every_trace() {
        let script = render_plot_script(
            "demo",
            &[
                ("m1-r0".into(), "traces/m1-r0.csv".into()),
                ("m2-r0".into(), "traces/m2-r0.csv".into()),
            ],
        );
        assert!(script.contains("set datafile separator comma"));
        assert!(script.contains("'traces/m1-r0.csv' using 1:2"));
        assert!(script.contains("'traces/m2-r0.csv' using 1:2"));
        assert!(!script.contains(".png"), "plots stay scripts, not bitmaps");
    }
}
