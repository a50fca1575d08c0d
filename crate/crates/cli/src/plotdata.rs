//! Per-figure CSV bundles derived from the artifacts of a finished run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::run::{Summary, SUMMARY_FILE};
use crate::table::{fmt_float, read_csv, write_csv};

pub const PLOT_DIR: &str = "plot";

fn require(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if !p.is_file() {
        bail!("missing artifact: {}", p.display());
    }
    Ok(p)
}

fn render(rows: &[Vec<f64>], cols: &[usize]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| cols.iter().map(|&c| fmt_float(r[c])).collect())
        .collect()
}

fn columns(header: &[String], names: &[&str], file: &Path) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .with_context(|| format!("{}: missing column {n}", file.display()))
        })
        .collect()
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Write plot-ready files under `<dir>/plot` and return their paths.
///
/// Every run yields the control against time and the terminal error per
/// parameter value. Planar single runs add the initial and achieved shapes,
/// sweeps add an error-versus-bound table, and Bloch runs add trajectories.
pub fn emit_plotdata(dir: &Path) -> Result<Vec<PathBuf>> {
    let summary_path = require(dir, SUMMARY_FILE)?;
    let summary: Summary = serde_json::from_str(
        &std::fs::read_to_string(&summary_path)
            .with_context(|| format!("cannot read {}", summary_path.display()))?,
    )
    .with_context(|| format!("malformed {}", summary_path.display()))?;
    let out = dir.join(PLOT_DIR);
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let n = summary.state_dim;

    let runs: Vec<(String, String)> = if summary.sweep.is_empty() {
        vec![(String::new(), String::new())]
    } else {
        summary
            .sweep
            .iter()
            .map(|e| (format!("{}/", e.dir), format!("_{}", e.dir)))
            .collect()
    };
    for (prefix, suffix) in &runs {
        let control = require(dir, &format!("{prefix}control.csv"))?;
        let (header, rows) = read_csv(&control)?;
        let cols: Vec<usize> = (0..header.len()).collect();
        let p = out.join(format!("control_vs_t{suffix}.csv"));
        write_csv(&p, &header, render(&rows, &cols))?;
        written.push(p);

        let terminal = require(dir, &format!("{prefix}terminal_error.csv"))?;
        let (header, rows) = read_csv(&terminal)?;
        let mut names = vec!["param".to_string()];
        names.extend((1..=n).map(|j| format!("e{j}")));
        names.push("error".into());
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let cols = columns(&header, &refs, &terminal)?;
        let p = out.join(format!("terminal_error_scatter{suffix}.csv"));
        write_csv(&p, &names, render(&rows, &cols))?;
        written.push(p);

        if n == 2 && summary.sweep.is_empty() {
            let boundary = require(dir, "boundary.csv")?;
            let (bh, brows) = read_csv(&boundary)?;
            let cols = columns(&bh, &["x0_1", "x0_2"], &boundary)?;
            let p = out.join("shape_initial.csv");
            write_csv(&p, &strings(&["x1", "x2"]), render(&brows, &cols))?;
            written.push(p);
            let cols = columns(&header, &["x1", "x2"], &terminal)?;
            let p = out.join("shape_final.csv");
            write_csv(&p, &strings(&["x1", "x2"]), render(&rows, &cols))?;
            written.push(p);
        }
    }

    if !summary.sweep.is_empty() {
        require(dir, "sweep.csv")?;
        let p = out.join("error_vs_bound.csv");
        write_csv(
            &p,
            &strings(&["bound", "max_terminal_error", "rms_terminal_error"]),
            summary.sweep.iter().map(|e| {
                vec![
                    fmt_float(e.bound),
                    fmt_float(e.result.max_terminal_error),
                    fmt_float(e.result.rms_terminal_error),
                ]
            }),
        )?;
        written.push(p);
    }

    if summary.family == "bloch" {
        let traj = require(dir, "trajectory.csv")?;
        let (header, rows) = read_csv(&traj)?;
        let cols = columns(&header, &["sample", "t", "x1", "x2", "x3"], &traj)?;
        let p = out.join("bloch_trajectories.csv");
        let body = rows.iter().map(|r| {
            let mut row = vec![format!("{}", r[cols[0]] as usize)];
            row.extend(cols[1..].iter().map(|&c| fmt_float(r[c])));
            row
        });
        write_csv(&p, &strings(&["sample", "t", "x", "y", "z"]), body)?;
        written.push(p);
    }
    Ok(written)
}
