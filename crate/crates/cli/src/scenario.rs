//! Declarative scenario files: schema, parsing and validation.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

impl ScenarioError {
    /// Violations reported by validation, empty for other errors.
    pub fn violations(&self) -> &[String] {
        match self {
            ScenarioError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Family {
    #[serde(rename = "harmonic_oscillator_2in")]
    HarmonicOscillator2In,
    #[serde(rename = "harmonic_oscillator_1in")]
    HarmonicOscillator1In,
    #[serde(rename = "bloch")]
    Bloch,
    #[serde(rename = "custom_tabulated")]
    CustomTabulated,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::HarmonicOscillator2In => "harmonic_oscillator_2in",
            Family::HarmonicOscillator1In => "harmonic_oscillator_1in",
            Family::Bloch => "bloch",
            Family::CustomTabulated => "custom_tabulated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Feasible,
    MinEnergy,
    ConstrainedBall,
    ConstrainedBox,
    Dykstra,
    Spectral,
    Bilinear,
    Reachability,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Feasible => "feasible",
            SolverKind::MinEnergy => "min_energy",
            SolverKind::ConstrainedBall => "constrained_ball",
            SolverKind::ConstrainedBox => "constrained_box",
            SolverKind::Dykstra => "dykstra",
            SolverKind::Spectral => "spectral",
            SolverKind::Bilinear => "bilinear",
            SolverKind::Reachability => "reachability",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Star,
    Maple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Ball,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Iterative,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relinearize {
    TrueDynamics,
    FrozenModel,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub range: [f64; 2],
    pub count: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub steps: usize,
}

/// Endpoints: a vector shared by every sample, a built-in planar shape, or a
/// per-sample table with columns `x0_1..x0_n, xf_1..xf_n`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundary {
    pub initial: Option<Vec<f64>>,
    pub target: Option<Vec<f64>>,
    pub initial_shape: Option<Shape>,
    pub target_shape: Option<Shape>,
    pub table: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solver {
    pub kind: SolverKind,
    pub max_iterations: Option<usize>,
    pub weights: Option<Vec<f64>>,
    /// Constant starting control, one value per channel.
    pub initial_control: Option<Vec<f64>>,
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    pub trace_every: Option<usize>,
    pub residual_tol: Option<f64>,
    pub stall_window: Option<usize>,
    pub stall_threshold: Option<f64>,
    pub divergence_factor: Option<f64>,
    /// Legendre order for the spectral solver.
    pub order: Option<usize>,
    pub method: Option<Method>,
    pub reach_tol: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub kind: Option<ConstraintKind>,
    pub bound: Option<f64>,
    /// Run once per bound instead of a single `bound`.
    pub sweep: Option<Vec<f64>>,
    /// Bound the joint L² norm rather than each channel's.
    #[serde(default)]
    pub joint: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bilinear {
    pub outer_cap: Option<usize>,
    pub stop_tol: Option<f64>,
    pub damping: Option<f64>,
    #[serde(default)]
    pub warm_start: bool,
    pub relinearize: Option<Relinearize>,
    pub inner_iterations: Option<usize>,
    /// Constant `U⁽⁰⁾`, one value per channel.
    pub seed: Option<Vec<f64>>,
}

/// System matrices `A(t,β) = a(t) + β·pa(t)`, `B(t,β) = b(t) + β·pb(t)`
/// tabulated at the grid nodes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTable {
    pub table: String,
    pub state_dim: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    pub dir: Option<String>,
    #[serde(default)]
    pub trajectory: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub family: Family,
    pub horizon: f64,
    pub params: Params,
    pub grid: Grid,
    #[serde(default)]
    pub boundary: Boundary,
    pub solver: Solver,
    pub constraint: Option<Constraint>,
    pub bilinear: Option<Bilinear>,
    pub model: Option<ModelTable>,
    #[serde(default)]
    pub output: Output,
    /// Directory that relative table paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Read, parse and validate a scenario file.
pub fn parse_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    parse_scenario_str(&text, path, base)
}

/// Parse scenario text; `origin` only labels error messages.
pub fn parse_scenario_str(
    text: &str,
    origin: impl AsRef<Path>,
    base_dir: PathBuf,
) -> Result<Scenario, ScenarioError> {
    let mut s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
        path: origin.as_ref().to_path_buf(),
        message: e.to_string(),
    })?;
    s.base_dir = base_dir;
    let problems = s.violations();
    if problems.is_empty() {
        Ok(s)
    } else {
        Err(ScenarioError::Invalid(problems))
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl Scenario {
    /// State and input dimensions implied by the family.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self.family {
            Family::HarmonicOscillator2In => Some((2, 2)),
            Family::HarmonicOscillator1In => Some((2, 1)),
            Family::Bloch => Some((3, 2)),
            Family::CustomTabulated => self.model.as_ref().map(|m| (m.state_dim, m.input_dim)),
        }
    }

    pub fn resolve(&self, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory, `out/<name>` unless configured.
    pub fn output_dir(&self) -> PathBuf {
        match &self.output.dir {
            Some(d) => PathBuf::from(d),
            None => Path::new("out").join(&self.name),
        }
    }

    /// Every problem with the scenario, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let kind = self.solver.kind;
        let n_samples = self.params.count;

        if self.name.trim().is_empty() {
            v.push("name must not be empty".into());
        }
        if !positive(self.horizon) {
            v.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if n_samples == 0 {
            v.push("params.count (N) must be at least 1".into());
        }
        let [lo, hi] = self.params.range;
        if !(lo.is_finite() && hi.is_finite()) {
            v.push("params.range must be finite".into());
        } else if lo > hi || (lo == hi && n_samples > 1) {
            v.push(format!(
                "params.range must satisfy lo < hi (lo = hi only for N = 1), got [{lo}, {hi}]"
            ));
        }
        if self.grid.steps == 0 {
            v.push("grid.steps must be at least 1".into());
        }

        // family and solver compatibility
        let bloch = self.family == Family::Bloch;
        if bloch && kind != SolverKind::Bilinear {
            v.push(format!(
                "family bloch requires solver.kind = \"bilinear\", got \"{}\"",
                kind.name()
            ));
        }
        if !bloch && kind == SolverKind::Bilinear {
            v.push(format!(
                "solver.kind = \"bilinear\" requires family bloch, got {}",
                self.family.name()
            ));
        }
        match (&self.model, self.family) {
            (None, Family::CustomTabulated) => {
                v.push("family custom_tabulated requires a [model] section".into())
            }
            (Some(_), f) if f != Family::CustomTabulated => v.push(format!(
                "[model] is only allowed for custom_tabulated, not {}",
                f.name()
            )),
            (Some(m), _) => {
                if m.state_dim == 0 || m.input_dim == 0 {
                    v.push("model.state_dim and model.input_dim must be at least 1".into());
                }
                if !self.resolve(&m.table).is_file() {
                    v.push(format!("model.table file not found: {}", m.table));
                }
            }
            _ => {}
        }

        let dims = self.dims();
        self.check_boundary(dims.map(|d| d.0), &mut v);
        self.check_solver(dims.map(|d| d.1), &mut v);
        v
    }

    fn check_boundary(&self, n: Option<usize>, v: &mut Vec<String>) {
        let b = &self.boundary;
        if let Some(table) = &b.table {
            if b.initial.is_some()
                || b.target.is_some()
                || b.initial_shape.is_some()
                || b.target_shape.is_some()
            {
                v.push("boundary.table excludes the other boundary keys".into());
            }
            if !self.resolve(table).is_file() {
                v.push(format!("boundary.table file not found: {table}"));
            }
            return;
        }
        for (side, vector, shape) in [
            ("initial", &b.initial, b.initial_shape),
            ("target", &b.target, b.target_shape),
        ] {
            match (vector, shape) {
                (Some(_), Some(_)) => v.push(format!(
                    "boundary.{side} and boundary.{side}_shape are mutually exclusive"
                )),
                (None, None) => v.push(format!("boundary needs {side}, {side}_shape or table")),
                (Some(x), None) => {
                    if let Some(n) = n {
                        if x.len() != n {
                            v.push(format!(
                                "boundary.{side} has {} entries, the state dimension is {n}",
                                x.len()
                            ));
                        }
                    }
                    if x.iter().any(|e| !e.is_finite()) {
                        v.push(format!("boundary.{side} must be finite"));
                    }
                }
                (None, Some(_)) => {
                    if n.is_some_and(|n| n != 2) {
                        v.push(format!("boundary.{side}_shape needs a planar state"));
                    }
                    if self.params.count != crate::shapes::SHAPE_POINTS {
                        v.push(format!(
                            "boundary.{side}_shape has {} points but params.count (N) is {}",
                            crate::shapes::SHAPE_POINTS,
                            self.params.count
                        ));
                    }
                }
            }
        }
    }

    fn check_solver(&self, m: Option<usize>, v: &mut Vec<String>) {
        let s = &self.solver;
        let kind = s.kind;
        if s.max_iterations == Some(0) && kind != SolverKind::Spectral {
            v.push("solver.max_iterations must be at least 1".into());
        }
        if let (Some(u0), Some(m)) = (&s.initial_control, m) {
            if u0.len() != m {
                v.push(format!(
                    "solver.initial_control has {} entries, the input dimension is {m}",
                    u0.len()
                ));
            }
        }
        if s.initial_control.is_some()
            && matches!(kind, SolverKind::MinEnergy | SolverKind::Bilinear)
        {
            v.push(format!(
                "solver.initial_control does not apply to {} (use bilinear.seed for bilinear)",
                kind.name()
            ));
        }
        if s.weights.is_some() && kind == SolverKind::Dykstra {
            v.push("solver.weights does not apply to dykstra".into());
        }
        if s.trace_every == Some(0) {
            v.push("solver.trace_every must be at least 1".into());
        }
        if let Some(max) = s.max_iterations {
            if let Some(c) = s.checkpoints.iter().find(|&&c| c > max) {
                v.push(format!(
                    "solver.checkpoints entry {c} exceeds solver.max_iterations {max}"
                ));
            }
        }
        for (key, val) in [
            ("residual_tol", s.residual_tol),
            ("stall_threshold", s.stall_threshold),
            ("divergence_factor", s.divergence_factor),
            ("reach_tol", s.reach_tol),
        ] {
            if val.is_some_and(|x| !positive(x)) {
                v.push(format!("solver.{key} must be positive"));
            }
        }
        if s.stall_window == Some(0) {
            v.push("solver.stall_window must be at least 1".into());
        }

        let needs_order = kind == SolverKind::Spectral
            || (kind == SolverKind::Reachability && s.method == Some(Method::Spectral));
        match s.order {
            None if needs_order => {
                v.push("solver.order is required for the spectral solver".into())
            }
            Some(r) if r == 0 || r > self.grid.steps + 1 => v.push(format!(
                "solver.order must lie in 1..={}, got {r}",
                self.grid.steps + 1
            )),
            _ => {}
        }
        if s.method.is_some() && kind != SolverKind::Reachability {
            v.push("solver.method only applies to the reachability solver".into());
        }

        let constrained = matches!(
            kind,
            SolverKind::ConstrainedBall | SolverKind::ConstrainedBox
        );
        let mut set_count = self.params.count;
        match &self.constraint {
            None if constrained => v.push(format!(
                "solver.kind = \"{}\" requires [constraint]",
                kind.name()
            )),
            Some(_) if !constrained && kind != SolverKind::Dykstra => v.push(format!(
                "[constraint] does not apply to solver.kind = \"{}\"",
                kind.name()
            )),
            Some(c) => {
                set_count += 1;
                let implied = match kind {
                    SolverKind::ConstrainedBall => Some(ConstraintKind::Ball),
                    SolverKind::ConstrainedBox => Some(ConstraintKind::Box),
                    _ => None,
                };
                match (implied, c.kind) {
                    (Some(a), Some(b)) if a != b => {
                        v.push("constraint.kind contradicts solver.kind".into())
                    }
                    (None, None) => v.push("constraint.kind is required with dykstra".into()),
                    _ => {}
                }
                match (&c.bound, &c.sweep) {
                    (Some(_), Some(_)) => v.push(
                        "constraint.bound and constraint.sweep are mutually exclusive".into(),
                    ),
                    (None, None) => v.push("constraint needs bound or sweep".into()),
                    (Some(b), None) if !positive(*b) => {
                        v.push("constraint.bound must be positive".into())
                    }
                    (None, Some(list)) => {
                        if list.is_empty() || list.iter().any(|&b| !positive(b)) {
                            v.push("constraint.sweep must list positive bounds".into());
                        }
                        if kind == SolverKind::Dykstra {
                            v.push(
                                "constraint.sweep is only supported by constrained solvers".into(),
                            );
                        }
                    }
                    _ => {}
                }
                if c.joint && c.kind.or(implied) == Some(ConstraintKind::Box) {
                    v.push("constraint.joint applies to ball constraints only".into());
                }
            }
            None => {}
        }
        if let Some(w) = &s.weights {
            if w.len() != set_count {
                v.push(format!(
                    "solver.weights has {} entries, expected {set_count}",
                    w.len()
                ));
            }
            if w.iter().any(|&x| !positive(x)) {
                v.push("solver.weights must be positive".into());
            } else if (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                v.push("solver.weights must sum to 1".into());
            }
        }

        match (&self.bilinear, kind) {
            (Some(_), k) if k != SolverKind::Bilinear => {
                v.push("[bilinear] only applies to solver.kind = \"bilinear\"".into())
            }
            (Some(b), _) => {
                if b.outer_cap == Some(0) {
                    v.push("bilinear.outer_cap must be at least 1".into());
                }
                if b.inner_iterations == Some(0) {
                    v.push("bilinear.inner_iterations must be at least 1".into());
                }
                if b.stop_tol.is_some_and(|x| !positive(x)) {
                    v.push("bilinear.stop_tol must be positive".into());
                }
                if b.damping.is_some_and(|g| !(g > 0.0 && g <= 1.0)) {
                    v.push("bilinear.damping must lie in (0, 1]".into());
                }
                if let (Some(seed), Some(m)) = (&b.seed, m) {
                    if seed.len() != m {
                        v.push(format!(
                            "bilinear.seed has {} entries, the input dimension is {m}",
                            seed.len()
                        ));
                    }
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        parse_scenario_str(text, "test.toml", PathBuf::from("."))
    }

    const BASE: &str = r#"
name = "t"
family = "harmonic_oscillator_2in"
horizon = 1.0
[params]
range = [-1.0, 1.0]
count = 3
[grid]
steps = 100
[boundary]
initial = [1.0, 0.0]
target = [0.0, 1.0]
[solver]
kind = "feasible"
"#;

    #[test]
    fn minimal_scenario_parses() {
        let s = parse(BASE).unwrap();
        assert_eq!(s.params.count, 3);
        assert_eq!(s.output_dir(), Path::new("out/t"));
    }

    #[test]
    fn unknown_key_is_rejected_with_context() {
        let err = parse(&BASE.replace("steps = 100", "steps = 100\nstep = 3")).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("unknown field") && msg.contains("step"),
            "{msg}"
        );
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn all_violations_are_listed() {
        let text = BASE
            .replace("count = 3", "count = 0")
            .replace("horizon = 1.0", "horizon = -1.0")
            .replace("kind = \"feasible\"", "kind = \"bilinear\"");
        let err = parse(&text).unwrap_err();
        let v = err.violations();
        assert!(v.iter().any(|m| m.contains("N")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("horizon")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("bilinear")), "{v:?}");
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn shapes_need_fifty_samples() {
        let text = BASE
            .replace("initial = [1.0, 0.0]", "initial_shape = \"star\"")
            .replace("target = [0.0, 1.0]", "target_shape = \"maple\"");
        let err = parse(&text).unwrap_err();
        assert_eq!(err.violations().len(), 2);
        assert!(parse(&text.replace("count = 3", "count = 50")).is_ok());
    }

    #[test]
    fn sweep_needs_constrained_solver() {
        let text = BASE.replace("kind = \"feasible\"", "kind = \"constrained_box\"");
        assert!(parse(&text).is_err());
        let ok = format!("{text}[constraint]\nsweep = [5.0, 10.0]\n");
        assert!(parse(&ok).is_ok());
        let bad = ok.replace("[constraint]", "[constraint]\nkind = \"ball\"");
        assert!(parse(&bad).is_err());
    }
}
