//! Convergence-study driver: TOML configuration, ladder runs against a
//! shared reference solve, incremental CSV/plot-data output, and log-log
//! slope fitting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Deserialize;

use crate::analysis::{
    atomistic_harmonic_basis, continuum_harmonic_basis, full_domain_gram,
    overlap_control_constant, sup_cosine,
};
use crate::atomistic::{solve_reference, NewtonOpts};
use crate::continuum::solve_restricted_continuum;
use crate::coupling::{broken_error, solve_atc, AtcOpts, AtcProblem};
use crate::error::{AtcError, Result};
use crate::geometry::{build_domains, DomainGeometry, InteractionRange, LatticeField, LatticeIndex};
use crate::potential::{PairPotentialSpec, SiteModel};

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialConfig {
    pub stiffness: f64,
    pub w_nn: f64,
    pub w_nnn: f64,
    /// Bond-strength impurity factor; 1.0 means a homogeneous lattice.
    pub alpha: f64,
    /// Defect radius: sites with |ξ| ≤ this carry the impurity.
    pub defect_radius: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        let p = PairPotentialSpec::default();
        Self {
            stiffness: p.stiffness,
            w_nn: p.w_nn,
            w_nnn: p.w_nnn,
            alpha: 1.2,
            defect_radius: 0.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Core half-widths; one study row per entry.
    pub r_core_ladder: Vec<i64>,
    pub psi_a: i64,
    pub kappa: i64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            r_core_ladder: vec![6, 8, 12, 16],
            psi_a: 4,
            kappa: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub grading_exponent: f64,
    pub beta_min_deg: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            grading_exponent: 1.5,
            beta_min_deg: 20.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub tol_outer: f64,
    pub tol_j: f64,
    pub max_outer: usize,
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
    pub armijo_c: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let n = NewtonOpts::default();
        let a = AtcOpts::default();
        Self {
            newton_tol: n.tol,
            newton_max_iter: n.max_iter,
            tol_outer: a.tol_outer,
            tol_j: a.tol_j,
            max_outer: a.max_outer,
            cg_rel_tol: a.cg_rel_tol,
            cg_max_iter: a.cg_max_iter,
            armijo_c: a.armijo_c,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    /// Reference truncation: N = reference_factor · max(r_c).
    pub reference_factor: i64,
    /// Seed for randomized property checks; the study itself is
    /// deterministic, the seed is recorded for reproducibility.
    pub seed: u64,
    /// Compute the sup-cosine and overlap-control columns (harmonic-basis
    /// construction is the dominant cost on large ladders).
    pub sup_cosine: bool,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            reference_factor: 4,
            seed: 0,
            sup_cosine: false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub potential: PotentialConfig,
    pub geometry: GeometryConfig,
    pub mesh: MeshConfig,
    pub solver: SolverConfig,
    pub study: StudySettings,
}

impl StudyConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: StudyConfig =
            toml::from_str(s).map_err(|e| AtcError::Config(format!("TOML parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    /// Check every ladder entry up front and return the built geometries.
    pub fn validate(&self) -> Result<Vec<DomainGeometry>> {
        if self.geometry.r_core_ladder.is_empty() {
            return Err(AtcError::Config("empty geometry ladder".into()));
        }
        if self.study.reference_factor < 1 {
            return Err(AtcError::Config(format!(
                "reference_factor must be ≥ 1, got {}",
                self.study.reference_factor
            )));
        }
        if !(1.0..2.0).contains(&self.mesh.grading_exponent) {
            return Err(AtcError::Config(format!(
                "grading_exponent must lie in [1, 2), got {}",
                self.mesh.grading_exponent
            )));
        }
        self.geometry
            .r_core_ladder
            .iter()
            .map(|&r| {
                build_domains(r, self.geometry.psi_a, self.geometry.kappa, InteractionRange::nn_nnn())
                    .map_err(|e| AtcError::Config(format!("ladder entry R_core = {r}: {e}")))
            })
            .collect()
    }

    pub fn model(&self) -> SiteModel {
        let pot = PairPotentialSpec {
            stiffness: self.potential.stiffness,
            w_nn: self.potential.w_nn,
            w_nnn: self.potential.w_nnn,
        };
        SiteModel::with_impurity(
            InteractionRange::nn_nnn(),
            pot,
            self.potential.alpha,
            self.potential.defect_radius,
        )
    }

    pub fn newton_opts(&self) -> NewtonOpts {
        NewtonOpts {
            tol: self.solver.newton_tol,
            max_iter: self.solver.newton_max_iter,
            armijo_c: self.solver.armijo_c,
        }
    }

    pub fn atc_opts(&self) -> AtcOpts {
        AtcOpts {
            newton: self.newton_opts(),
            tol_outer: self.solver.tol_outer,
            tol_j: self.solver.tol_j,
            max_outer: self.solver.max_outer,
            cg_rel_tol: self.solver.cg_rel_tol,
            cg_max_iter: self.solver.cg_max_iter,
            armijo_c: self.solver.armijo_c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    SubproblemFailed,
    OuterDiverged,
}

impl std::fmt::Display for RowStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RowStatus::Ok => "ok",
            RowStatus::SubproblemFailed => "subproblem-failed",
            RowStatus::OuterDiverged => "outer-diverged",
        })
    }
}

#[derive(Clone, Debug)]
pub struct StudyRow {
    pub r_core: i64,
    pub r_c: i64,
    pub atom_dofs: usize,
    pub fe_dofs: usize,
    pub j_star: f64,
    pub broken_error: f64,
    /// ‖∇u^con − ∇Iu^ref‖ over Ω_c with the exact reference trace as
    /// boundary data (the continuum half of the error in isolation).
    pub continuum_error: f64,
    /// ‖∇Iu^ref − ∇u^con‖² over the overlap: the squared mismatch of the
    /// best independently solvable continuum field, a yardstick for J*.
    pub overlap_mismatch_sq: f64,
    pub sup_cosine: f64,
    pub control_const_a: f64,
    pub control_const_c: f64,
    pub wall_time_s: f64,
    pub status: RowStatus,
}

pub const CSV_HEADER: &str = "r_core,r_c,atom_dofs,fe_dofs,j_star,broken_error,continuum_error,\
overlap_mismatch_sq,sup_cosine,control_const_a,control_const_c,wall_time_s,status";

impl StudyRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.r_core,
            self.r_c,
            self.atom_dofs,
            self.fe_dofs,
            self.j_star,
            self.broken_error,
            self.continuum_error,
            self.overlap_mismatch_sq,
            self.sup_cosine,
            self.control_const_a,
            self.control_const_c,
            self.wall_time_s,
            self.status
        )
    }
}

/// Strip the wall-time column so reruns can be compared for determinism.
pub fn csv_without_timing(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let mut kept: Vec<&str> = Vec::with_capacity(cols.len());
            for (i, c) in cols.iter().enumerate() {
                if i != 11 {
                    kept.push(c);
                }
            }
            kept.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Copy a covering lattice field onto another index, site by site.
pub fn restrict_to_lattice(reference: &LatticeField, index: Arc<LatticeIndex>) -> Result<LatticeField> {
    let mut f = LatticeField::zeros(index.clone());
    f.gauge = reference.gauge;
    for (i, &s) in index.sites().iter().enumerate() {
        f.values[i] = reference
            .get(s)
            .ok_or_else(|| AtcError::Coverage(format!("reference misses site {s:?}")))?;
    }
    Ok(f)
}

fn nan_row(geom: &DomainGeometry, status: RowStatus) -> StudyRow {
    StudyRow {
        r_core: geom.r_core,
        r_c: geom.r_c,
        atom_dofs: 0,
        fe_dofs: 0,
        j_star: f64::NAN,
        broken_error: f64::NAN,
        continuum_error: f64::NAN,
        overlap_mismatch_sq: f64::NAN,
        sup_cosine: f64::NAN,
        control_const_a: f64::NAN,
        control_const_c: f64::NAN,
        wall_time_s: 0.0,
        status,
    }
}

/// One ladder entry: AtC solve from zero controls, errors against the
/// shared reference, optional subspace-angle measurements.
pub fn run_ladder_entry(
    cfg: &StudyConfig,
    geom: &DomainGeometry,
    model: &Arc<SiteModel>,
    reference: &LatticeField,
) -> Result<StudyRow> {
    let t0 = Instant::now();
    let problem = AtcProblem::new(
        geom.clone(),
        model.clone(),
        cfg.mesh.grading_exponent,
        cfg.mesh.beta_min_deg,
    )?;
    let atom_dofs = 2 * problem.asys.n_free();
    let fe_dofs = 2 * problem.csys.mesh.n_interior();
    let newton = cfg.newton_opts();

    // continuum-only error: exact reference trace as boundary data
    let lambda_c: Vec<_> = problem
        .csys
        .mesh
        .core_nodes()
        .iter()
        .map(|&n| {
            let s = problem.csys.mesh.nodes[n as usize];
            reference
                .get(s)
                .ok_or_else(|| AtcError::Coverage(format!("reference misses node {s:?}")))
        })
        .collect::<Result<_>>()?;
    let ref_on_lattice = restrict_to_lattice(reference, problem.asys.lattice.clone())?;
    let (u_con, _) = match solve_restricted_continuum(&problem.csys, &lambda_c, None, &newton) {
        Ok(v) => v,
        Err(AtcError::NonConvergence { .. }) => {
            return Ok(nan_row(geom, RowStatus::SubproblemFailed))
        }
        Err(e) => return Err(e),
    };
    let continuum_error = broken_error(geom, &ref_on_lattice, &u_con, reference)?;
    let overlap_mismatch_sq = crate::coupling::overlap_mismatch_vs_lattice(geom, reference, &u_con)?;

    // the coupled solve
    let state = match solve_atc(&problem, None, &cfg.atc_opts()) {
        Ok(s) => s,
        Err(AtcError::NonConvergence { .. }) => {
            return Ok(nan_row(geom, RowStatus::SubproblemFailed))
        }
        Err(AtcError::OuterDiverged { .. }) => {
            return Ok(nan_row(geom, RowStatus::OuterDiverged))
        }
        Err(e) => return Err(e),
    };
    let broken = broken_error(geom, &state.u_a, &state.u_c, reference)?;

    let (c, ra, rc) = if cfg.study.sup_cosine {
        let ba = atomistic_harmonic_basis(&problem, &ref_on_lattice)?;
        let bc = continuum_harmonic_basis(&problem, &u_con)?;
        let c = sup_cosine(&ba, &bc)?;
        let gfa = full_domain_gram(&problem, &ba)?;
        let ra = overlap_control_constant(&gfa, &ba.gram_overlap)?;
        let gfc = full_domain_gram(&problem, &bc)?;
        let rc = overlap_control_constant(&gfc, &bc.gram_overlap)?;
        (c, ra, rc)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };

    Ok(StudyRow {
        r_core: geom.r_core,
        r_c: geom.r_c,
        atom_dofs,
        fe_dofs,
        j_star: state.j,
        broken_error: broken,
        continuum_error,
        overlap_mismatch_sq,
        sup_cosine: c,
        control_const_a: ra,
        control_const_c: rc,
        wall_time_s: t0.elapsed().as_secs_f64(),
        status: RowStatus::Ok,
    })
}

/// Run the full ladder against one shared reference solve, writing
/// `study.csv` and a gnuplot-compatible `study.dat` into `out_dir`
/// incrementally (one row per completed entry).
pub fn run_convergence_study(cfg: &StudyConfig, out_dir: &Path) -> Result<Vec<StudyRow>> {
    let geoms = cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut csv = BufWriter::new(File::create(out_dir.join("study.csv"))?);
    let mut dat = BufWriter::new(File::create(out_dir.join("study.dat"))?);
    writeln!(csv, "{CSV_HEADER}")?;
    writeln!(dat, "# {}", CSV_HEADER.replace(',', " "))?;

    let model = Arc::new(cfg.model());
    let n_ref = cfg.study.reference_factor * geoms.iter().map(|g| g.r_c).max().unwrap();
    let newton = cfg.newton_opts();
    let (reference, _) = solve_reference(model.clone(), n_ref, &newton)?;

    let mut rows = Vec::with_capacity(geoms.len());
    for geom in &geoms {
        let row = run_ladder_entry(cfg, geom, &model, &reference)?;
        writeln!(csv, "{}", row.to_csv())?;
        csv.flush()?;
        writeln!(dat, "{}", row.to_csv().replace(',', " "))?;
        dat.flush()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Ordinary least squares fit, optionally in log-log coordinates.
/// Returns (slope, intercept, R²).
pub fn fit_slope(points: &[(f64, f64)], log_log: bool) -> Result<(f64, f64, f64)> {
    if points.len() < 3 {
        return Err(AtcError::DegenerateFit);
    }
    let xy: Vec<(f64, f64)> = if log_log {
        if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
            return Err(AtcError::DegenerateFit);
        }
        points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect()
    } else {
        points.to_vec()
    };
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = xy.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    if sxx <= 1e-300 {
        return Err(AtcError::DegenerateFit);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res = syy - slope * sxy;
    let r2 = if syy <= 1e-300 {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    Ok((slope, intercept, r2))
}
