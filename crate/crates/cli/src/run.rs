//! Build models from a scenario, run the selected solver and write artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ensemble_core::{
    affine_sets, assess_reachability, build_spectral, legendre_basis, make_time_grid,
    sample_parameters, simulate_linear, solve_bilinear, solve_constrained, solve_dykstra,
    solve_feasible, solve_min_energy, spectral_evidence, to_coordinates, AmplitudeBox,
    BilinearEnsembleModel, BilinearOptions, BoundaryPair, Classification, ConstraintSet,
    ControlSignal, Coordinates, DriftTable, EnergyBall, FamilyTag, LinearEnsembleModel,
    ReachabilityMethod, RelinearizeAbout, SolveReport, SolverOptions, TimeGrid, Trajectory,
    Verdict, DEFAULT_REACH_TOL,
};
use log::info;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scenario::{ConstraintKind, Family, Method, Relinearize, Scenario, SolverKind};
use crate::shapes;
use crate::table::{fmt_float, numbered, read_csv, write_csv};

pub const SUMMARY_FILE: &str = "summary.json";

/// Files written for one solve.
#[derive(Debug, Clone)]
pub struct RunFiles {
    /// Sweep label such as `bound_5`; `None` for single runs.
    pub label: Option<String>,
    pub control: PathBuf,
    pub terminal_error: PathBuf,
    pub trace: PathBuf,
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: PathBuf,
    pub boundary: PathBuf,
    pub runs: Vec<RunFiles>,
    /// Checkpoints, spectra and sweep tables.
    pub extra: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub classification: String,
    pub iterations: usize,
    pub max_terminal_error: f64,
    /// Root mean square of the per-sample terminal errors.
    pub rms_terminal_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_residual: Option<f64>,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub bound: f64,
    pub dir: String,
    #[serde(flatten)]
    pub result: RunResult,
    /// How far the returned control exceeds its bound; zero when it complies.
    pub constraint_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub iteration: usize,
    pub max_terminal_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub order: usize,
    pub unit_eigenvalues: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearSummary {
    pub converged: bool,
    pub diverged: bool,
    pub outer_iterations: usize,
    /// Largest deviation of any `‖X(t)‖₂` from its initial value.
    pub max_norm_drift: f64,
}

/// Machine-readable record of a run; contains no timings, so identical
/// inputs give identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub family: String,
    pub solver: String,
    pub samples: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub status: String,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<RunResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<CheckpointEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reach_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral: Option<SpectralSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bilinear: Option<BilinearSummary>,
    /// Every file written, relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Summary,
    pub artifacts: RunArtifacts,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }
}

fn exit_code_for(classification: Classification) -> i32 {
    match classification {
        Classification::ConvergedInfeasible | Classification::Stalled => 2,
        Classification::Diverged => 1,
        _ => 0,
    }
}

pub fn parameters(s: &Scenario) -> Result<Vec<f64>> {
    let [lo, hi] = s.params.range;
    if s.params.count == 1 && lo == hi {
        return Ok(vec![lo]);
    }
    Ok(sample_parameters(lo, hi, s.params.count)?)
}

pub fn time_grid(s: &Scenario) -> Result<TimeGrid> {
    Ok(make_time_grid(s.horizon, s.grid.steps)?)
}

/// The linear ensemble of a non-Bloch scenario.
pub fn linear_model(s: &Scenario, grid: &TimeGrid) -> Result<LinearEnsembleModel> {
    let params = parameters(s)?;
    Ok(match s.family {
        Family::HarmonicOscillator2In => {
            LinearEnsembleModel::harmonic_oscillator_2in(params, s.horizon)?
        }
        Family::HarmonicOscillator1In => {
            LinearEnsembleModel::harmonic_oscillator_1in(params, s.horizon)?
        }
        Family::CustomTabulated => tabulated_model(s, grid, params)?,
        Family::Bloch => bail!("the bloch family is bilinear"),
    })
}

/// Read `t, a{r}_{c}, pa{r}_{c}, b{r}_{c}, pb{r}_{c}` rows at the grid nodes.
fn tabulated_model(s: &Scenario, grid: &TimeGrid, params: Vec<f64>) -> Result<LinearEnsembleModel> {
    let spec = s.model.as_ref().context("custom_tabulated needs [model]")?;
    let (n, m) = (spec.state_dim, spec.input_dim);
    let path = s.resolve(&spec.table);
    let (header, rows) = read_csv(&path)?;
    let column = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column {name}", path.display()))
    };
    let block = |prefix: &str, cols: usize| -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(n * cols);
        for r in 1..=n {
            for c in 1..=cols {
                idx.push(column(&format!("{prefix}{r}_{c}"))?);
            }
        }
        Ok(idx)
    };
    let t = column("t")?;
    let (a, pa, b, pb) = (
        block("a", n)?,
        block("pa", n)?,
        block("b", m)?,
        block("pb", m)?,
    );
    ensure!(
        rows.len() == grid.n_nodes(),
        "{}: {} rows, the grid has {} nodes",
        path.display(),
        rows.len(),
        grid.n_nodes()
    );
    for (k, row) in rows.iter().enumerate() {
        ensure!(
            (row[t] - grid.node(k)).abs() <= 1e-9 * (1.0 + s.horizon),
            "{}: row {} has t = {}, expected grid node {}",
            path.display(),
            k + 2,
            row[t],
            grid.node(k)
        );
    }
    let tabulate = |base: &[usize], slope: &[usize], beta: f64| -> Vec<f64> {
        rows.iter()
            .flat_map(|row| {
                base.iter()
                    .zip(slope)
                    .map(move |(&i, &j)| row[i] + beta * row[j])
            })
            .collect()
    };
    let drift = params
        .iter()
        .map(|&beta| DriftTable::Nodes(tabulate(&a, &pa, beta)))
        .collect();
    let input = params.iter().map(|&beta| tabulate(&b, &pb, beta)).collect();
    Ok(LinearEnsembleModel::tabulated(
        FamilyTag::CustomTabulated,
        params,
        *grid,
        n,
        m,
        drift,
        input,
    )?)
}

pub fn boundary(s: &Scenario, n: usize) -> Result<BoundaryPair> {
    let count = s.params.count;
    let b = &s.boundary;
    if let Some(table) = &b.table {
        let path = s.resolve(table);
        let (header, rows) = read_csv(&path)?;
        let want: Vec<String> = numbered("x0_", n).chain(numbered("xf_", n)).collect();
        ensure!(
            header == want,
            "{}: expected columns {}",
            path.display(),
            want.join(",")
        );
        ensure!(
            rows.len() == count,
            "{}: {} rows but params.count (N) is {count}",
            path.display(),
            rows.len()
        );
        let initial = rows
            .iter()
            .map(|r| DVector::from_column_slice(&r[..n]))
            .collect();
        let target = rows
            .iter()
            .map(|r| DVector::from_column_slice(&r[n..]))
            .collect();
        return Ok(BoundaryPair::new(initial, target)?);
    }
    let side = |vector: &Option<Vec<f64>>, shape| -> Vec<DVector<f64>> {
        match (vector, shape) {
            (Some(x), _) => vec![DVector::from_column_slice(x); count],
            (None, Some(sh)) => shapes::points(sh)
                .iter()
                .map(|p| DVector::from_column_slice(p))
                .collect(),
            (None, None) => Vec::new(),
        }
    };
    Ok(BoundaryPair::new(
        side(&b.initial, b.initial_shape),
        side(&b.target, b.target_shape),
    )?)
}

fn solver_options(s: &Scenario, grid: &TimeGrid, m: usize) -> Result<SolverOptions> {
    let sv = &s.solver;
    let mut o = SolverOptions::default();
    if let Some(k) = sv.max_iterations {
        o.max_iterations = k;
    }
    o.weights = sv.weights.clone();
    if let Some(x) = sv.residual_tol {
        o.residual_tol = x;
    }
    if let Some(x) = sv.stall_window {
        o.stall_window = x;
    }
    if let Some(x) = sv.stall_threshold {
        o.stall_threshold = x;
    }
    if let Some(x) = sv.divergence_factor {
        o.divergence_factor = x;
    }
    o.record_trace = true;
    o.trace_every = sv.trace_every.unwrap_or((o.max_iterations / 1000).max(1));
    o.checkpoints = sv.checkpoints.clone();
    if let Some(u0) = &sv.initial_control {
        ensure!(u0.len() == m, "solver.initial_control needs {m} entries");
        o.initial_control = Some(ControlSignal::constant(*grid, u0)?);
    }
    Ok(o)
}

fn constraint_set(kind: ConstraintKind, bound: f64, joint: bool) -> Result<ConstraintSet> {
    Ok(match kind {
        ConstraintKind::Ball => ConstraintSet::Ball(EnergyBall::new(bound, !joint)?),
        ConstraintKind::Box => ConstraintSet::Box(AmplitudeBox::new(bound)?),
    })
}

fn constraint_excess(set: &ConstraintSet, u: &ControlSignal) -> f64 {
    let (measure, bound) = match set {
        ConstraintSet::Ball(b) if b.per_channel => (
            (0..u.channels())
                .map(|c| u.channel_norm(c))
                .fold(0.0, f64::max),
            b.radius,
        ),
        ConstraintSet::Ball(b) => (u.norm_l2(), b.radius),
        ConstraintSet::Box(b) => (u.max_abs(), b.bound),
        ConstraintSet::Affine(_) => return 0.0,
    };
    (measure - bound).max(0.0)
}

fn error_stats(errors: &[f64]) -> (f64, f64) {
    let max = errors.iter().fold(0.0, |a: f64, &b| a.max(b));
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64).sqrt();
    (max, rms)
}

/// Output files are written relative to `dir`; paths are recorded for the summary.
struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    fn csv<I>(&mut self, rel: &str, header: Vec<String>, rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let p = self.path(rel)?;
        write_csv(&p, &header, rows)?;
        Ok(p)
    }

    fn text(&mut self, rel: &str, body: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        std::fs::write(&p, body).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    fn control(&mut self, rel: &str, u: &ControlSignal) -> Result<PathBuf> {
        let header = std::iter::once("t".to_string())
            .chain(numbered("u", u.channels()))
            .collect();
        let grid = *u.grid();
        self.csv(
            rel,
            header,
            (0..grid.n_nodes()).map(|k| {
                std::iter::once(fmt_float(grid.node(k)))
                    .chain(u.at(k).iter().map(|&x| fmt_float(x)))
                    .collect()
            }),
        )
    }

    /// `sample, param, x_j (final state), e_j (final − target), error`.
    fn terminal(
        &mut self,
        rel: &str,
        x: &Trajectory,
        params: &[f64],
        targets: &[DVector<f64>],
    ) -> Result<(PathBuf, Vec<f64>)> {
        let n = x.state_dim();
        let errors = x.terminal_errors(targets);
        let header = ["sample", "param"]
            .into_iter()
            .map(String::from)
            .chain(numbered("x", n))
            .chain(numbered("e", n))
            .chain(std::iter::once("error".to_string()))
            .collect();
        let rows = (0..x.len()).map(|i| {
            let xt = x.terminal(i);
            let mut row = vec![i.to_string(), fmt_float(params[i])];
            row.extend(xt.iter().map(|&v| fmt_float(v)));
            row.extend((&xt - &targets[i]).iter().map(|&v| fmt_float(v)));
            row.push(fmt_float(errors[i]));
            row
        });
        let p = self.csv(rel, header, rows.collect::<Vec<_>>())?;
        Ok((p, errors))
    }

    fn trajectory(&mut self, rel: &str, x: &Trajectory) -> Result<PathBuf> {
        let n = x.state_dim();
        let grid = *x.grid();
        let header = ["sample", "t"]
            .into_iter()
            .map(String::from)
            .chain(numbered("x", n))
            .collect();
        let rows = (0..x.len()).flat_map(|i| {
            (0..grid.n_nodes()).map(move |k| {
                let mut row = vec![i.to_string(), fmt_float(grid.node(k))];
                row.extend(x.state(i, k).iter().map(|&v| fmt_float(v)));
                row
            })
        });
        self.csv(rel, header, rows.collect::<Vec<_>>())
    }

    fn boundary(&mut self, b: &BoundaryPair, params: &[f64]) -> Result<PathBuf> {
        let n = b.initial.first().map_or(0, |x| x.len());
        let header = ["sample", "param"]
            .into_iter()
            .map(String::from)
            .chain(numbered("x0_", n))
            .chain(numbered("xf_", n))
            .collect();
        let rows = (0..b.len()).map(|i| {
            let mut row = vec![i.to_string(), fmt_float(params[i])];
            row.extend(b.initial[i].iter().map(|&v| fmt_float(v)));
            row.extend(b.target[i].iter().map(|&v| fmt_float(v)));
            row
        });
        self.csv("boundary.csv", header, rows.collect::<Vec<_>>())
    }
}

/// Apply command-line overrides on top of the scenario file.
pub fn apply_overrides(
    s: &mut Scenario,
    output_dir: Option<PathBuf>,
    checkpoints: Option<Vec<usize>>,
    trace_every: Option<usize>,
) -> Result<()> {
    if let Some(d) = output_dir {
        s.output.dir = Some(d.to_string_lossy().into_owned());
    }
    if let Some(c) = checkpoints {
        s.solver.checkpoints = c;
    }
    if let Some(k) = trace_every {
        s.solver.trace_every = Some(k);
    }
    let problems = s.violations();
    ensure!(
        problems.is_empty(),
        "invalid overrides:\n  - {}",
        problems.join("\n  - ")
    );
    Ok(())
}

/// Execute the scenario's solver and write every artifact to its output directory.
pub fn run_scenario(s: &Scenario) -> Result<RunOutcome> {
    let dir = s.output_dir();
    let mut w = Writer::new(&dir)?;
    let grid = time_grid(s)?;
    let params = parameters(s)?;
    let (n, m) = s.dims().context("model dimensions unknown")?;
    let bnd = boundary(s, n)?;
    let boundary_file = w.boundary(&bnd, &params)?;

    let mut summary = Summary {
        name: s.name.clone(),
        family: s.family.name().into(),
        solver: s.solver.kind.name().into(),
        samples: params.len(),
        state_dim: n,
        input_dim: m,
        horizon: s.horizon,
        steps: s.grid.steps,
        status: String::new(),
        exit_code: 0,
        result: None,
        sweep: Vec::new(),
        checkpoints: Vec::new(),
        verdict: None,
        reach_tol: None,
        spectral: None,
        bilinear: None,
        files: Vec::new(),
    };
    let mut runs = Vec::new();
    let mut extra = Vec::new();
    info!("running scenario {} ({})", s.name, s.solver.kind.name());

    if s.solver.kind == SolverKind::Bilinear {
        run_bilinear(s, &grid, &params, &bnd, &mut w, &mut summary, &mut runs)?;
    } else {
        let model = linear_model(s, &grid)?;
        ensure!(
            model.state_dim() == n && model.input_dim() == m,
            "model dimensions differ from the scenario"
        );
        let opts = solver_options(s, &grid, m)?;
        let sweep = s.constraint.as_ref().and_then(|c| c.sweep.clone());
        match sweep {
            Some(bounds) => run_sweep(
                s,
                &model,
                &grid,
                &bnd,
                &opts,
                &bounds,
                &mut w,
                &mut summary,
                &mut runs,
                &mut extra,
            )?,
            None => {
                let report = solve_linear(
                    s,
                    &model,
                    &grid,
                    &bnd,
                    &opts,
                    &mut w,
                    &mut summary,
                    &mut extra,
                )?;
                let files = write_linear(&mut w, None, &model, &bnd, &report, s.output.trajectory)?;
                let (max, rms) = files.1;
                summary.result = Some(RunResult {
                    classification: report.classification.name().into(),
                    iterations: report.iterations,
                    max_terminal_error: max,
                    rms_terminal_error: rms,
                    max_residual: Some(report.max_residual()),
                    energy: report.energy,
                });
                if summary.status.is_empty() {
                    summary.status = report.classification.name().into();
                    summary.exit_code = exit_code_for(report.classification);
                }
                for (k, u) in &report.checkpoints {
                    let x = simulate_linear(&model, u, &bnd.initial)?;
                    extra.push(w.control(&format!("checkpoint_{k}_control.csv"), u)?);
                    let (p, errors) = w.terminal(
                        &format!("checkpoint_{k}_terminal_error.csv"),
                        &x,
                        model.params(),
                        &bnd.target,
                    )?;
                    extra.push(p);
                    summary.checkpoints.push(CheckpointEntry {
                        iteration: *k,
                        max_terminal_error: error_stats(&errors).0,
                    });
                }
                runs.push(files.0);
            }
        }
    }

    let summary_path = w.path(SUMMARY_FILE)?;
    summary.files = {
        let mut f = w.files.clone();
        f.sort();
        f
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(&summary_path, json)
        .with_context(|| format!("cannot write {}", summary_path.display()))?;
    Ok(RunOutcome {
        summary,
        artifacts: RunArtifacts {
            dir,
            summary: summary_path,
            boundary: boundary_file,
            runs,
            extra,
        },
    })
}

/// One solve of a linear scenario without a constraint sweep.
#[allow(clippy::too_many_arguments)]
fn solve_linear(
    s: &Scenario,
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    bnd: &BoundaryPair,
    opts: &SolverOptions,
    w: &mut Writer,
    summary: &mut Summary,
    extra: &mut Vec<PathBuf>,
) -> Result<SolveReport> {
    let kind = s.solver.kind;
    let reach_tol = s.solver.reach_tol.unwrap_or(DEFAULT_REACH_TOL);
    Ok(match kind {
        SolverKind::Feasible => solve_feasible(model, grid, bnd, opts)?,
        SolverKind::MinEnergy => solve_min_energy(model, grid, bnd, opts)?,
        SolverKind::ConstrainedBall | SolverKind::ConstrainedBox => {
            let c = s.constraint.as_ref().context("missing [constraint]")?;
            let ck = if kind == SolverKind::ConstrainedBall {
                ConstraintKind::Ball
            } else {
                ConstraintKind::Box
            };
            let set = constraint_set(ck, c.bound.context("missing constraint.bound")?, c.joint)?;
            solve_constrained(model, grid, bnd, set, opts)?
        }
        SolverKind::Dykstra => {
            let mut sets: Vec<ConstraintSet> = affine_sets(model, grid, bnd)?
                .into_iter()
                .map(ConstraintSet::Affine)
                .collect();
            if let Some(c) = &s.constraint {
                let ck = c.kind.context("missing constraint.kind")?;
                sets.push(constraint_set(
                    ck,
                    c.bound.context("missing constraint.bound")?,
                    c.joint,
                )?);
            }
            let u0 = opts
                .initial_control
                .clone()
                .unwrap_or_else(|| ControlSignal::zeros(*grid, model.input_dim()));
            solve_dykstra(&sets, &u0, opts)?
        }
        SolverKind::Spectral => {
            let order = s.solver.order.context("missing solver.order")?;
            let basis = legendre_basis(order, grid)?;
            let op = build_spectral(model, grid, bnd, &basis, opts)?;
            let mu0 = match &opts.initial_control {
                Some(u) => to_coordinates(u, &basis)?,
                None => Coordinates::zeros(order, model.input_dim()),
            };
            let unit = op
                .eigenvalues
                .iter()
                .filter(|&&e| (e - 1.0).abs() <= 1e-8)
                .count();
            summary.spectral = Some(SpectralSummary {
                order,
                unit_eigenvalues: unit,
                min_eigenvalue: op.eigenvalues[0],
                max_eigenvalue: *op.eigenvalues.last().expect("non-empty spectrum"),
            });
            summary.reach_tol = Some(reach_tol);
            extra.push(
                w.csv(
                    "spectrum.csv",
                    vec!["index".into(), "eigenvalue".into()],
                    op.eigenvalues
                        .iter()
                        .enumerate()
                        .map(|(i, &e)| vec![i.to_string(), fmt_float(e)])
                        .collect::<Vec<_>>(),
                )?,
            );
            spectral_evidence(model, grid, bnd, &op, &mu0, reach_tol)?
        }
        SolverKind::Reachability => {
            let method = match s.solver.method.unwrap_or(Method::Iterative) {
                Method::Iterative => ReachabilityMethod::Iterative,
                Method::Spectral => ReachabilityMethod::Spectral {
                    order: s.solver.order.context("missing solver.order")?,
                },
            };
            let r = assess_reachability(model, grid, bnd, opts, method, reach_tol)?;
            summary.verdict = Some(r.verdict.name().into());
            summary.reach_tol = Some(reach_tol);
            summary.status = r.verdict.name().into();
            summary.exit_code = match r.verdict {
                Verdict::NotReachable => 2,
                _ if r.evidence.classification == Classification::Diverged => 1,
                _ => 0,
            };
            r.evidence
        }
        SolverKind::Bilinear => bail!("bilinear scenarios take the bilinear path"),
    })
}

type LinearFiles = (RunFiles, (f64, f64));

fn write_linear(
    w: &mut Writer,
    label: Option<&str>,
    model: &LinearEnsembleModel,
    bnd: &BoundaryPair,
    report: &SolveReport,
    with_trajectory: bool,
) -> Result<LinearFiles> {
    let prefix = label.map(|l| format!("{l}/")).unwrap_or_default();
    let x = simulate_linear(model, &report.control, &bnd.initial)?;
    let control = w.control(&format!("{prefix}control.csv"), &report.control)?;
    let (terminal_error, errors) = w.terminal(
        &format!("{prefix}terminal_error.csv"),
        &x,
        model.params(),
        &bnd.target,
    )?;
    let trace = w.text(&format!("{prefix}trace.csv"), &report.trace.to_csv())?;
    let trajectory = if with_trajectory {
        Some(w.trajectory(&format!("{prefix}trajectory.csv"), &x)?)
    } else {
        None
    };
    Ok((
        RunFiles {
            label: label.map(String::from),
            control,
            terminal_error,
            trace,
            trajectory,
        },
        error_stats(&errors),
    ))
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    s: &Scenario,
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    bnd: &BoundaryPair,
    opts: &SolverOptions,
    bounds: &[f64],
    w: &mut Writer,
    summary: &mut Summary,
    runs: &mut Vec<RunFiles>,
    extra: &mut Vec<PathBuf>,
) -> Result<()> {
    let c = s.constraint.as_ref().context("missing [constraint]")?;
    let ck = match s.solver.kind {
        SolverKind::ConstrainedBall => ConstraintKind::Ball,
        SolverKind::ConstrainedBox => ConstraintKind::Box,
        k => bail!("solver {} cannot sweep a constraint", k.name()),
    };
    let reports = bounds
        .par_iter()
        .map(|&bound| {
            let set = constraint_set(ck, bound, c.joint)?;
            let r = solve_constrained(model, grid, bnd, set.clone(), opts)?;
            Ok((bound, set, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0;
    for (bound, set, report) in &reports {
        let label = format!("bound_{bound}");
        let (files, (max, rms)) =
            write_linear(w, Some(&label), model, bnd, report, s.output.trajectory)?;
        runs.push(files);
        let code = exit_code_for(report.classification);
        worst = match (worst, code) {
            (1, _) | (_, 1) => 1,
            (a, b) => a.max(b),
        };
        summary.sweep.push(SweepEntry {
            bound: *bound,
            dir: label,
            result: RunResult {
                classification: report.classification.name().into(),
                iterations: report.iterations,
                max_terminal_error: max,
                rms_terminal_error: rms,
                max_residual: Some(report.max_residual()),
                energy: report.energy,
            },
            constraint_excess: constraint_excess(set, &report.control),
        });
    }
    let header = [
        "bound",
        "classification",
        "iterations",
        "max_terminal_error",
        "rms_terminal_error",
        "max_residual",
        "constraint_excess",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = summary
        .sweep
        .iter()
        .map(|e| {
            vec![
                fmt_float(e.bound),
                e.result.classification.clone(),
                e.result.iterations.to_string(),
                fmt_float(e.result.max_terminal_error),
                fmt_float(e.result.rms_terminal_error),
                fmt_float(e.result.max_residual.unwrap_or(f64::NAN)),
                fmt_float(e.constraint_excess),
            ]
        })
        .collect();
    extra.push(w.csv("sweep.csv", header, rows)?);
    summary.exit_code = worst;
    summary.status = if worst == 2 {
        Classification::ConvergedInfeasible.name().into()
    } else {
        "completed".into()
    };
    Ok(())
}

fn run_bilinear(
    s: &Scenario,
    grid: &TimeGrid,
    params: &[f64],
    bnd: &BoundaryPair,
    w: &mut Writer,
    summary: &mut Summary,
    runs: &mut Vec<RunFiles>,
) -> Result<()> {
    let model = BilinearEnsembleModel::bloch(params.to_vec(), s.horizon)?;
    let cfg = s.bilinear.clone().unwrap_or_default();
    let mut inner = solver_options(s, grid, model.input_dim())?;
    inner.max_iterations = cfg.inner_iterations.unwrap_or(1000);
    inner.record_trace = false;
    inner.checkpoints.clear();
    inner.initial_control = None;
    let defaults = BilinearOptions::default();
    let opts = BilinearOptions {
        inner,
        outer_cap: cfg.outer_cap.unwrap_or(defaults.outer_cap),
        stop_tol: cfg.stop_tol.unwrap_or(defaults.stop_tol),
        damping: cfg.damping.unwrap_or(defaults.damping),
        warm_start: cfg.warm_start,
        initial_control: cfg
            .seed
            .as_ref()
            .map(|u| ControlSignal::constant(*grid, u))
            .transpose()?,
        relinearize: match cfg.relinearize {
            Some(Relinearize::FrozenModel) => RelinearizeAbout::FrozenModel,
            _ => RelinearizeAbout::TrueDynamics,
        },
        ..defaults
    };
    let report = solve_bilinear(&model, grid, bnd, &opts)?;

    let control = w.control("control.csv", &report.control)?;
    let (terminal_error, errors) = w.terminal(
        "terminal_error.csv",
        &report.trajectory,
        params,
        &bnd.target,
    )?;
    let trace = w.text("trace.csv", &report.trace_csv())?;
    let trajectory = w.trajectory("trajectory.csv", &report.trajectory)?;
    runs.push(RunFiles {
        label: None,
        control,
        terminal_error,
        trace,
        trajectory: Some(trajectory),
    });

    let x = &report.trajectory;
    let mut drift = 0.0_f64;
    for i in 0..x.len() {
        let n0 = DVector::from_column_slice(x.state(i, 0)).norm();
        for k in 0..x.grid().n_nodes() {
            let nk = DVector::from_column_slice(x.state(i, k)).norm();
            drift = drift.max((nk - n0).abs());
        }
    }
    let (max, rms) = error_stats(&errors);
    let status = if report.diverged {
        "diverged"
    } else if report.converged {
        "converged"
    } else {
        "outer_cap"
    };
    summary.status = status.into();
    summary.exit_code = i32::from(report.diverged);
    summary.result = Some(RunResult {
        classification: status.into(),
        iterations: report.outer_iterations,
        max_terminal_error: max,
        rms_terminal_error: rms,
        max_residual: None,
        energy: report.control.energy(),
    });
    summary.bilinear = Some(BilinearSummary {
        converged: report.converged,
        diverged: report.diverged,
        outer_iterations: report.outer_iterations,
        max_norm_drift: drift,
    });
    Ok(())
}
