//! Run configuration, the study driver and result files.
//!
//! Configuration is flat `key = value` text, one pair per line, `#` starts
//! a comment. Every key is optional; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;

use crate::assembly::{NitscheConfig, PhysicalConfig, Problem, StabConfig, VectorField};
use crate::error::{Error, Result};
use crate::estimator::{adaptive_loop_with, AdaptRecord, AdaptStop, Refinement};
use crate::fem::Space;
use crate::mesh::{navier_except_top, navier_on_top, never_navier, Mesh};
use crate::solver::{SolveConfig, SolverState};
use crate::verification::{mms_lshape, mms_square, rate_dofs, rate_h, vortex_center, ExactSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    MmsSquare,
    MmsLshape,
    Cavity,
    CustomMesh,
}

impl ProblemKind {
    fn parse(s: &str) -> Option<ProblemKind> {
        Some(match s {
            "mms-square" => ProblemKind::MmsSquare,
            "mms-lshape" => ProblemKind::MmsLshape,
            "cavity" => ProblemKind::Cavity,
            "custom-mesh" => ProblemKind::CustomMesh,
            _ => return None,
        })
    }
}

/// Boundary condition on the three fixed cavity walls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Walls {
    NoSlip,
    Slip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefinementPlan {
    Uniform { levels: usize },
    Adaptive { marking: f64, max_dofs: usize, max_levels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemKind,
    /// Mesh file for `custom-mesh`.
    pub mesh: Option<PathBuf>,
    /// Subdivisions of the initial structured mesh.
    pub divisions: usize,
    pub walls: Walls,
    pub degree: usize,
    pub nitsche: NitscheConfig,
    pub stab: StabConfig,
    pub nu: f64,
    pub solver: SolveConfig,
    pub refinement: RefinementPlan,
    pub output: PathBuf,
    /// Write one visualization file per level.
    pub fields: bool,
    /// Grid resolution of the vortex search.
    pub vortex_samples: usize,
}

const KEYS: &[&str] = &[
    "problem",
    "mesh",
    "divisions",
    "walls",
    "degree",
    "theta",
    "gamma",
    "beta",
    "lambda",
    "m_k",
    "p_norm",
    "nu",
    "continuation",
    "linearization",
    "tol_rel",
    "tol_abs",
    "max_iterations",
    "refinement",
    "levels",
    "marking",
    "max_dofs",
    "max_levels",
    "output",
    "fields",
    "vortex_samples",
];

/// Splits config text into key/value pairs. Later duplicates are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got '{line}'") })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate key '{key}'") });
        }
    }
    Ok(out)
}

/// Applies `key=value` overrides on top of parsed pairs.
pub fn apply_overrides(pairs: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(vec![format!("override '{o}' is not key=value")]))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

struct Fields<'a> {
    pairs: &'a BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Fields<'_> {
    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.pairs.get(key) {
            None => default,
            Some(v) => v.parse().unwrap_or_else(|_| {
                self.errors.push(format!("{key}: cannot parse '{v}'"));
                default
            }),
        }
    }

    fn list(&mut self, key: &str) -> Vec<f64> {
        let Some(v) = self.pairs.get(key) else { return Vec::new() };
        let mut out = Vec::new();
        for tok in v.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.parse() {
                Ok(x) => out.push(x),
                Err(_) => self.errors.push(format!("{key}: cannot parse '{tok}'")),
            }
        }
        out
    }
}

impl RunConfig {
    pub fn from_text(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut pairs = parse_pairs(text)?;
        apply_overrides(&mut pairs, overrides)?;
        RunConfig::from_pairs(&pairs)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::from_text(&text, overrides)
    }

    /// Builds and validates a configuration, reporting every problem at once.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut f = Fields { pairs, errors: Vec::new() };
        for k in pairs.keys() {
            if !KEYS.contains(&k.as_str()) {
                f.errors.push(format!("{k}: unknown key"));
            }
        }

        let problem_name: String = f.get("problem", "mms-square".to_string());
        let problem = ProblemKind::parse(&problem_name).unwrap_or_else(|| {
            f.errors.push(format!("problem: expected mms-square, mms-lshape, cavity or custom-mesh (got '{problem_name}')"));
            ProblemKind::MmsSquare
        });
        let mesh = pairs.get("mesh").map(PathBuf::from);
        if problem == ProblemKind::CustomMesh && mesh.is_none() {
            f.errors.push("mesh: required for problem custom-mesh".into());
        }
        let default_divisions = match problem {
            ProblemKind::MmsSquare => 4,
            ProblemKind::Cavity => 8,
            _ => 1,
        };
        let divisions = f.get("divisions", default_divisions);
        if divisions == 0 {
            f.errors.push("divisions: must be at least 1".into());
        }
        let walls = match f.get("walls", "no-slip".to_string()).as_str() {
            "no-slip" => Walls::NoSlip,
            "slip" => Walls::Slip,
            other => {
                f.errors.push(format!("walls: expected no-slip or slip (got '{other}')"));
                Walls::NoSlip
            }
        };
        let degree = f.get("degree", 1usize);
        if !(1..=2).contains(&degree) {
            f.errors.push(format!("degree: must be 1 or 2 (got {degree})"));
        }

        let nitsche = NitscheConfig { theta: f.get("theta", 1.0), gamma: f.get("gamma", 10.0), beta: f.get("beta", 10.0) };
        let stab = StabConfig {
            lambda: f.get("lambda", 1.0),
            m_k: f.get("m_k", crate::assembly::DEFAULT_M_K),
            p_norm: f.get("p_norm", 2.0),
        };
        let nu = f.get("nu", 1.0);
        let mut physical_errors = Vec::new();
        if let Err(e) = nitsche.validate() {
            physical_errors.extend(e);
        }
        if let Err(e) = stab.validate() {
            physical_errors.extend(e);
        }
        if !(nu > 0.0) {
            physical_errors.push(format!("nu must be positive (got {nu})"));
        }

        let mut solver = SolveConfig { continuation: f.list("continuation"), ..SolveConfig::default() };
        solver.newton = match f.get("linearization", "newton".to_string()).as_str() {
            "newton" => true,
            "picard" => false,
            other => {
                f.errors.push(format!("linearization: expected newton or picard (got '{other}')"));
                true
            }
        };
        solver.tol_rel = f.get("tol_rel", solver.tol_rel);
        solver.tol_abs = f.get("tol_abs", solver.tol_abs);
        solver.max_iters = f.get("max_iterations", solver.max_iters);
        if let Err(e) = solver.validate() {
            physical_errors.extend(e);
        }
        if let Some(&last) = solver.continuation.last() {
            if last != nu {
                f.errors.push(format!("continuation: ladder must end at nu = {nu} (ends at {last})"));
            }
        }

        let refinement = match f.get("refinement", "uniform".to_string()).as_str() {
            "uniform" => {
                let levels = f.get("levels", 5usize);
                if levels == 0 {
                    f.errors.push("levels: must be at least 1".into());
                }
                RefinementPlan::Uniform { levels }
            }
            "adaptive" => {
                let marking = f.get("marking", 0.5);
                if !(marking > 0.0 && marking < 1.0) {
                    f.errors.push(format!("marking: must lie in (0, 1) (got {marking})"));
                }
                let max_levels = f.get("max_levels", 100usize);
                if max_levels == 0 {
                    f.errors.push("max_levels: must be at least 1".into());
                }
                RefinementPlan::Adaptive { marking, max_dofs: f.get("max_dofs", 5000usize), max_levels }
            }
            other => {
                f.errors.push(format!("refinement: expected uniform or adaptive (got '{other}')"));
                RefinementPlan::Uniform { levels: 1 }
            }
        };
        let output = PathBuf::from(f.get("output", "out".to_string()));
        let fields = f.get("fields", true);
        let vortex_samples = f.get("vortex_samples", 200usize);
        if vortex_samples < 3 {
            f.errors.push("vortex_samples: must be at least 3".into());
        }

        // field-level messages already start with the parameter name
        f.errors.extend(physical_errors);
        if !f.errors.is_empty() {
            return Err(Error::Config(f.errors));
        }
        Ok(RunConfig { problem, mesh, divisions, walls, degree, nitsche, stab, nu, solver, refinement, output, fields, vortex_samples })
    }

    /// Initial mesh, discrete problem and, for manufactured solutions, the exact fields.
    pub fn setup(&self) -> Result<(Mesh, Problem, Option<Arc<ExactSolution>>)> {
        let (mesh, physical, exact) = match self.problem {
            ProblemKind::MmsSquare => {
                let exact = Arc::new(mms_square(self.nu)?);
                let cfg = exact.physical_config(self.nitsche.beta, true);
                (Mesh::unit_square(self.divisions, &navier_on_top)?, cfg, Some(exact))
            }
            ProblemKind::MmsLshape => {
                let exact = Arc::new(mms_lshape(self.nu)?);
                let cfg = exact.physical_config(self.nitsche.beta, true);
                (Mesh::lshape(self.divisions)?, cfg, Some(exact))
            }
            ProblemKind::Cavity => {
                let rule: &dyn Fn(_, _) -> bool = match self.walls {
                    Walls::NoSlip => &never_navier,
                    Walls::Slip => &navier_except_top,
                };
                (Mesh::unit_square(self.divisions, rule)?, PhysicalConfig::new(self.nu, lid(1.0, 0.0, 1.0)), None)
            }
            ProblemKind::CustomMesh => {
                let path = self.mesh.as_ref().ok_or_else(|| Error::Config(vec!["mesh: required for problem custom-mesh".into()]))?;
                let mesh = Mesh::read_text(fs::File::open(path)?)?;
                let top = mesh.vertices.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p[1]));
                let on_top = mesh.vertices.iter().filter(|p| (p[1] - top).abs() < 1e-12);
                let (left, right) = on_top.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, r), p| (l.min(p[0]), r.max(p[0])));
                (mesh, PhysicalConfig::new(self.nu, lid(top, left, right)), None)
            }
        };
        let problem = Problem { physical, nitsche: self.nitsche, stab: self.stab };
        problem.validate()?;
        Ok((mesh, problem, exact))
    }
}

/// Unit tangential velocity on the open segment `left < x < right` of the
/// line `y = top`, zero elsewhere. The lid end points stay at rest so the
/// data is compatible with slip side walls.
fn lid(top: f64, left: f64, right: f64) -> VectorField {
    Arc::new(move |x| {
        let moving = (x[1] - top).abs() < 1e-12 && x[0] > left + 1e-12 && x[0] < right - 1e-12;
        if moving {
            [1.0, 0.0]
        } else {
            [0.0, 0.0]
        }
    })
}

/// Outcome of [`run`]: per-level records plus the cavity vortex center.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<AdaptRecord>,
    pub vortex: Option<[f64; 2]>,
}

/// Runs the configured study and writes its result files into `output`.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let (mesh, problem, exact) = config.setup()?;
    fs::create_dir_all(&config.output)?;
    let (refinement, stop) = match config.refinement {
        RefinementPlan::Uniform { levels } => (Refinement::Uniform, AdaptStop { max_dofs: usize::MAX, max_iterations: levels }),
        RefinementPlan::Adaptive { marking, max_dofs, max_levels } => {
            (Refinement::Adaptive { theta: marking }, AdaptStop { max_dofs, max_iterations: max_levels })
        }
    };
    let solver = SolveConfig {
        continuation: if config.solver.continuation.is_empty() { vec![config.nu] } else { config.solver.continuation.clone() },
        ..config.solver.clone()
    };
    let out = config.output.clone();
    let write = config.fields;
    let result = adaptive_loop_with(mesh, config.degree, &problem, &solver, exact.as_deref(), refinement, stop, |rec, space, state| {
        if write {
            let path = out.join(format!("fields_{:03}.vtk", rec.iteration));
            write_fields(space, state, &path)?;
        }
        Ok(())
    })?;

    let by_dofs = matches!(config.refinement, RefinementPlan::Adaptive { .. });
    fs::write(config.output.join("report.csv"), report_csv(&result.records, by_dofs)?)?;
    if result.space.mesh.facets_tagged(crate::mesh::FacetTag::Navier).next().is_some() {
        fs::write(config.output.join("slip.csv"), slip_csv(&result.records))?;
    }
    let vortex = if matches!(config.problem, ProblemKind::Cavity | ProblemKind::CustomMesh) {
        let c = vortex_center(&result.space, &result.state, config.vortex_samples)?;
        fs::write(config.output.join("summary.txt"), format!("vortex_center {} {}\n", fmt_sci(c[0]), fmt_sci(c[1])))?;
        info!("vortex center ({:.4}, {:.4})", c[0], c[1]);
        Some(c)
    } else {
        None
    };
    Ok(RunSummary { records: result.records, vortex })
}

/// 17 significant digits, lowercase exponent.
pub fn fmt_sci(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_rate(r: Option<f64>) -> String {
    match r {
        Some(r) if r.is_finite() => format!("{r:.2}"),
        _ => String::new(),
    }
}

pub const REPORT_HEADER: &str =
    "h,dofs,l2_p,rate_l2_p,l2_u,rate_l2_u,h1_u,rate_h1_u,total_error,rate_total_error,psi,rate_psi,effectivity";

/// One row per level. Rates use the mesh size, or the DoF count for
/// adaptive studies; the first row has none.
pub fn report_csv(records: &[AdaptRecord], by_dofs: bool) -> Result<String> {
    let hs: Vec<f64> = records.iter().map(|r| r.h_max).collect();
    let dofs: Vec<f64> = records.iter().map(|r| r.dofs as f64).collect();
    let rates = |vals: &[f64]| -> Result<Vec<Option<f64>>> {
        if vals.len() < 2 {
            return Ok(vec![None; vals.len()]);
        }
        let r = if by_dofs { rate_dofs(vals, &dofs)? } else { rate_h(vals, &hs)? };
        Ok(std::iter::once(None).chain(r.into_iter().map(Some)).collect())
    };
    let col = |g: fn(&crate::verification::ErrorReport) -> f64| -> Option<Vec<f64>> {
        records.iter().map(|r| r.errors.as_ref().map(g)).collect()
    };
    let psi: Vec<f64> = records.iter().map(|r| r.psi).collect();
    let psi_rate = rates(&psi)?;
    let errs = [col(|e| e.l2_p), col(|e| e.l2_u), col(|e| e.h1_u), col(|e| e.total_error)];
    let err_rates = errs.iter().map(|c| c.as_ref().map(|v| rates(v)).transpose()).collect::<Result<Vec<_>>>()?;

    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for (i, rec) in records.iter().enumerate() {
        write!(s, "{},{}", fmt_sci(rec.h_max), rec.dofs).unwrap();
        for (c, r) in errs.iter().zip(&err_rates) {
            match (c, r) {
                (Some(c), Some(r)) => write!(s, ",{},{}", fmt_sci(c[i]), fmt_rate(r[i])).unwrap(),
                _ => s.push_str(",,"),
            }
        }
        write!(s, ",{},{}", fmt_sci(rec.psi), fmt_rate(psi_rate[i])).unwrap();
        match rec.effectivity() {
            Some(e) => writeln!(s, ",{}", fmt_sci(e)).unwrap(),
            None => s.push_str(",\n"),
        }
    }
    Ok(s)
}

pub fn slip_csv(records: &[AdaptRecord]) -> String {
    let mut s = String::from("h,dofs,slip\n");
    for r in records {
        writeln!(s, "{},{},{}", fmt_sci(r.h_max), r.dofs, fmt_sci(r.slip)).unwrap();
    }
    s
}

/// A parsed `report.csv` row; `None` marks an empty field.
pub type ReportRow = Vec<Option<f64>>;

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: "unexpected report header".into() }),
    }
    lines
        .map(|(i, l)| {
            l.split(',')
                .map(|t| {
                    if t.is_empty() {
                        Ok(None)
                    } else {
                        t.parse().map(Some).map_err(|_| Error::Parse { line: i + 1, msg: format!("bad number '{t}'") })
                    }
                })
                .collect()
        })
        .collect()
}

/// Writes a legacy-ASCII VTK unstructured grid with nodal velocity and
/// pressure. Quadratic spaces use six-node triangles.
pub fn write_fields(space: &Space, state: &SolverState, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(fields_vtk(space, state).as_bytes())?;
    Ok(())
}

pub fn fields_vtk(space: &Space, state: &SolverState) -> String {
    let n = space.n_nodes();
    let nc = space.mesh.n_cells();
    let per = space.cell_nodes.first().map_or(3, Vec::len);
    let (ux, uy) = state.velocity(space);
    let p = state.pressure(space);
    let mut s = String::from("# vtk DataFile Version 3.0\nnsslip fields\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(s, "POINTS {n} double").unwrap();
    for x in &space.node_coords {
        writeln!(s, "{:e} {:e} 0", x[0], x[1]).unwrap();
    }
    writeln!(s, "CELLS {nc} {}", nc * (per + 1)).unwrap();
    for nodes in &space.cell_nodes {
        s.push_str(&per.to_string());
        for a in nodes {
            write!(s, " {a}").unwrap();
        }
        s.push('\n');
    }
    writeln!(s, "CELL_TYPES {nc}").unwrap();
    let kind = if space.degree == 2 { 22 } else { 5 };
    for _ in 0..nc {
        writeln!(s, "{kind}").unwrap();
    }
    writeln!(s, "POINT_DATA {n}\nVECTORS velocity double").unwrap();
    for a in 0..n {
        writeln!(s, "{:e} {:e} 0", ux[a], uy[a]).unwrap();
    }
    s.push_str("SCALARS pressure double 1\nLOOKUP_TABLE default\n");
    for v in p {
        writeln!(s, "{v:e}").unwrap();
    }
    s
}
