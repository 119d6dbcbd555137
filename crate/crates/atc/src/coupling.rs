//! The reduced-space AtC objective and its Gauss-Newton minimization.
//!
//! Both restricted subproblems are parametrized by virtual controls (the
//! atomistic boundary-layer data λ_a and the continuum Γ_core data λ_c).  The
//! coupling minimizes the H¹-seminorm mismatch of the two solution fields on
//! the overlap annulus Ω_o,
//!
//!   J(λ) = ½ ‖∇Iu^a(λ_a) − ∇u^c(λ_c)‖²_{L²(Ω_o)},
//!
//! where Iu^a is the P1 interpolant of the atomistic solution on the unit
//! lattice triangulation.  Gradients of J are assembled with one adjoint
//! solve per subproblem; the outer loop is Gauss-Newton on the per-triangle
//! residual, with the joint-constant (translation) direction projected out of
//! the normal equations and an Armijo line search on the true objective.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};

use crate::atomistic::{
    linearize_atomistic, solve_restricted_atomistic, AtomisticSystem, LinearizedAtomistic,
    NewtonOpts,
};
use crate::continuum::{
    build_mesh, linearize_continuum, solve_restricted_continuum, tri_geometry,
    unit_cell_triangles, ContinuumSystem, FEField, FEMesh, LinearizedContinuum,
};
use crate::error::{AtcError, Result};
use crate::geometry::{DomainGeometry, DomainTag, Gauge, LatticeField, Site};
use crate::potential::{CauchyBornDensity, SiteModel};
use crate::sparse::conjugate_gradient;

/// P1 shape-function gradients of the two unit right triangles (lower:
/// (0,0)-(1,0)-(1,1); upper: (0,0)-(1,1)-(0,1)).
const LOWER_GRADS: [[f64; 2]; 3] = [[-1.0, 0.0], [1.0, -1.0], [0.0, 1.0]];
const UPPER_GRADS: [[f64; 2]; 3] = [[0.0, -1.0], [1.0, 0.0], [-1.0, 1.0]];

/// Dirichlet data for both subproblems: λ_a on the atomistic boundary layer
/// ∂𝓛_a (control-site order of the `AtomisticSystem`), λ_c on Γ_core
/// (control-node order of the `FEMesh`).
#[derive(Clone, Debug)]
pub struct VirtualControls {
    pub lambda_a: Vec<Vector2<f64>>,
    pub lambda_c: Vec<Vector2<f64>>,
    pub gauge: Gauge,
}

impl VirtualControls {
    pub fn zeros(problem: &AtcProblem) -> Self {
        Self {
            lambda_a: vec![Vector2::zeros(); problem.asys.n_ctrl()],
            lambda_c: vec![Vector2::zeros(); problem.csys.mesh.core_nodes().len()],
            gauge: Gauge::Raw,
        }
    }

    pub fn shift(&mut self, c: Vector2<f64>) {
        for v in self.lambda_a.iter_mut().chain(self.lambda_c.iter_mut()) {
            *v += c;
        }
        self.gauge = Gauge::Raw;
    }

    /// Flatten as (λ_a then λ_c, x before y per entry).
    pub fn flat(&self) -> Vec<f64> {
        self.lambda_a
            .iter()
            .chain(self.lambda_c.iter())
            .flat_map(|v| [v[0], v[1]])
            .collect()
    }

    pub fn axpy_flat(&mut self, t: f64, d: &[f64]) {
        debug_assert_eq!(d.len(), 2 * (self.lambda_a.len() + self.lambda_c.len()));
        let na = self.lambda_a.len();
        for (i, v) in self.lambda_a.iter_mut().enumerate() {
            *v += t * Vector2::new(d[2 * i], d[2 * i + 1]);
        }
        for (i, v) in self.lambda_c.iter_mut().enumerate() {
            let o = 2 * (na + i);
            *v += t * Vector2::new(d[o], d[o + 1]);
        }
    }
}

/// One unit triangle of the overlap region with its lattice ordinals, mesh
/// node ids, and orientation.
#[derive(Clone, Copy, Debug)]
struct OverlapTri {
    a_ord: [u32; 3],
    c_node: [u32; 3],
    upper: bool,
}

/// Enumeration of the unit triangles tiling Ω_o, with precomputed index maps
/// into the atomistic lattice (𝓛_a) and the FE mesh.  Requires the mesh to
/// be fully resolved on Ω_o.
pub struct OverlapMap {
    tris: Vec<OverlapTri>,
    n_lattice: usize,
    n_nodes: usize,
}

impl OverlapMap {
    pub fn new(
        geom: &DomainGeometry,
        lattice: &crate::geometry::LatticeIndex,
        mesh: &FEMesh,
    ) -> Result<Self> {
        let mut tris = Vec::new();
        let (r_core, r_a) = (geom.r_core, geom.r_a);
        for y in -r_a..r_a {
            for x in -r_a..r_a {
                let in_core = x >= -r_core && x + 1 <= r_core && y >= -r_core && y + 1 <= r_core;
                if in_core {
                    continue;
                }
                for (which, tri) in unit_cell_triangles(x, y).into_iter().enumerate() {
                    let mut a_ord = [0u32; 3];
                    let mut c_node = [0u32; 3];
                    for (i, s) in tri.into_iter().enumerate() {
                        a_ord[i] = lattice.ordinal(s).ok_or_else(|| {
                            AtcError::Coverage(format!("lattice misses overlap site {s:?}"))
                        })? as u32;
                        c_node[i] = mesh.node_id(s).ok_or_else(|| {
                            AtcError::MeshMismatch(format!(
                                "mesh not resolved at overlap node {s:?}"
                            ))
                        })?;
                    }
                    tris.push(OverlapTri {
                        a_ord,
                        c_node,
                        upper: which == 1,
                    });
                }
            }
        }
        Ok(Self {
            tris,
            n_lattice: lattice.len(),
            n_nodes: mesh.n_nodes(),
        })
    }

    pub fn n_triangles(&self) -> usize {
        self.tris.len()
    }

    pub fn area(&self) -> f64 {
        self.tris.len() as f64 * 0.5
    }

    fn grads(upper: bool) -> &'static [[f64; 2]; 3] {
        if upper {
            &UPPER_GRADS
        } else {
            &LOWER_GRADS
        }
    }

    /// Per-triangle constant gradients flattened row-major and weighted by
    /// √|T|, so the Euclidean norm equals the L²(Ω_o) gradient norm.
    pub fn grad_vec_lattice(&self, u: &LatticeField) -> Vec<f64> {
        debug_assert_eq!(u.values.len(), self.n_lattice);
        self.grad_vec(|t| t.a_ord, &u.values)
    }

    pub fn grad_vec_fe(&self, u: &FEField) -> Vec<f64> {
        debug_assert_eq!(u.values.len(), self.n_nodes);
        self.grad_vec(|t| t.c_node, &u.values)
    }

    fn grad_vec(&self, idx: impl Fn(&OverlapTri) -> [u32; 3], values: &[Vector2<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.tris.len());
        for t in &self.tris {
            let g = Self::grads(t.upper);
            let ids = idx(t);
            let mut m = [0.0f64; 4];
            for i in 0..3 {
                let v = values[ids[i] as usize];
                m[0] += v[0] * g[i][0];
                m[1] += v[0] * g[i][1];
                m[2] += v[1] * g[i][0];
                m[3] += v[1] * g[i][1];
            }
            out.extend(m.iter().map(|x| x * FRAC_1_SQRT_2));
        }
        out
    }

    /// The weighted per-triangle mismatch r = ∇Iu^a − ∇u^c (layout as
    /// `grad_vec_*`); J = ½‖r‖².
    pub fn residual(&self, u_a: &LatticeField, u_c: &FEField) -> Vec<f64> {
        let mut r = self.grad_vec_lattice(u_a);
        for (a, b) in r.iter_mut().zip(self.grad_vec_fe(u_c)) {
            *a -= b;
        }
        r
    }

    /// J = ½‖∇Iu^a − ∇u^c‖²_{L²(Ω_o)}.
    pub fn mismatch(&self, u_a: &LatticeField, u_c: &FEField) -> f64 {
        0.5 * self.residual(u_a, u_c).iter().map(|x| x * x).sum::<f64>()
    }

    /// Adjoint of `grad_vec_lattice`: per-site derivative of ⟨w, grad_vec⟩.
    pub fn scatter_lattice(&self, w: &[f64]) -> Vec<Vector2<f64>> {
        self.scatter(|t| t.a_ord, self.n_lattice, w)
    }

    /// Adjoint of `grad_vec_fe`: per-node derivative of ⟨w, grad_vec⟩.
    pub fn scatter_fe(&self, w: &[f64]) -> Vec<Vector2<f64>> {
        self.scatter(|t| t.c_node, self.n_nodes, w)
    }

    fn scatter(
        &self,
        idx: impl Fn(&OverlapTri) -> [u32; 3],
        n: usize,
        w: &[f64],
    ) -> Vec<Vector2<f64>> {
        debug_assert_eq!(w.len(), 4 * self.tris.len());
        let mut out = vec![Vector2::zeros(); n];
        for (k, t) in self.tris.iter().enumerate() {
            let g = Self::grads(t.upper);
            let ids = idx(t);
            let wt = &w[4 * k..4 * k + 4];
            for i in 0..3 {
                out[ids[i] as usize] += Vector2::new(
                    (wt[0] * g[i][0] + wt[1] * g[i][1]) * FRAC_1_SQRT_2,
                    (wt[2] * g[i][0] + wt[3] * g[i][1]) * FRAC_1_SQRT_2,
                );
            }
        }
        out
    }

    /// Mean of (Iu^a − u^c) over Ω_o (exact P1 quadrature).
    pub fn mean_diff(&self, u_a: &LatticeField, u_c: &FEField) -> Vector2<f64> {
        let mut acc = Vector2::zeros();
        for t in &self.tris {
            for i in 0..3 {
                acc += u_a.values[t.a_ord[i] as usize] - u_c.values[t.c_node[i] as usize];
            }
        }
        acc / 6.0 / self.area()
    }
}

/// Shift u^c by the constant that zeroes the overlap mean of (Iu^a − u^c);
/// gradients (and hence J) are unchanged.  Returns the shift.
pub fn apply_mean_constraint(
    overlap: &OverlapMap,
    u_a: &LatticeField,
    u_c: &mut FEField,
) -> Vector2<f64> {
    let shift = overlap.mean_diff(u_a, u_c);
    u_c.shift(shift);
    shift
}

/// A fully assembled coupling problem: geometry, both restricted systems on
/// a shared model, and the overlap index maps.
pub struct AtcProblem {
    pub geom: DomainGeometry,
    pub asys: AtomisticSystem,
    pub csys: ContinuumSystem,
    pub overlap: OverlapMap,
}

impl AtcProblem {
    pub fn new(
        geom: DomainGeometry,
        model: Arc<SiteModel>,
        grading_exponent: f64,
        beta_min_deg: f64,
    ) -> Result<Self> {
        let lattice = Arc::new(crate::geometry::lattice_sets(&geom, DomainTag::Atomistic));
        let asys = AtomisticSystem::new(lattice.clone(), model.clone());
        let mesh = Arc::new(build_mesh(&geom, grading_exponent, beta_min_deg)?);
        let cb = CauchyBornDensity::from_model(&model);
        let overlap = OverlapMap::new(&geom, &lattice, &mesh)?;
        let csys = ContinuumSystem::new(mesh, cb);
        Ok(Self {
            geom,
            asys,
            csys,
            overlap,
        })
    }

    pub fn n_controls(&self) -> usize {
        2 * (self.asys.n_ctrl() + self.csys.mesh.core_nodes().len())
    }

    /// Traces of a lattice field (covering both boundary sets) as controls.
    pub fn controls_from_field(&self, u: &LatticeField) -> Result<VirtualControls> {
        let lambda_a = self
            .asys
            .ctrl_sites()
            .iter()
            .map(|&ord| {
                let s = self.asys.lattice.site(ord as usize);
                u.get(s)
                    .ok_or_else(|| AtcError::Coverage(format!("field misses site {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let lambda_c = self
            .csys
            .mesh
            .core_nodes()
            .iter()
            .map(|&n| {
                let s = self.csys.mesh.nodes[n as usize];
                u.get(s)
                    .ok_or_else(|| AtcError::Coverage(format!("field misses node {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VirtualControls {
            lambda_a,
            lambda_c,
            gauge: u.gauge,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Remove the two joint-constant (translation) components from a flattened
/// control-space vector.
fn project_out_constants(v: &mut [f64]) {
    let n = v.len() / 2;
    let mut mx = 0.0;
    let mut my = 0.0;
    for i in 0..n {
        mx += v[2 * i];
        my += v[2 * i + 1];
    }
    mx /= n as f64;
    my /= n as f64;
    for i in 0..n {
        v[2 * i] -= mx;
        v[2 * i + 1] -= my;
    }
}

/// ∇J over the flattened controls (λ_a then λ_c), computed with one adjoint
/// solve per subproblem from the weighted overlap residual `r`.
fn reduced_gradient_inner(
    problem: &AtcProblem,
    lin_a: &LinearizedAtomistic,
    lin_c: &LinearizedContinuum,
    r: &[f64],
) -> Vec<f64> {
    let sa = problem.overlap.scatter_lattice(r);
    let (gf, gc) = problem.asys.fold_sites(&sa);
    let mut grad = lin_a.adjoint(&gf, &gc);

    let mut sc = problem.overlap.scatter_fe(r);
    for v in &mut sc {
        *v = -*v;
    }
    let (hf, hc) = problem.csys.fold_nodal(&sc);
    grad.extend(lin_c.adjoint(&hf, &hc));
    grad
}

/// ∇J at the given controls; solves both subproblems and one adjoint each.
pub fn reduced_gradient(
    problem: &AtcProblem,
    controls: &VirtualControls,
    opts: &NewtonOpts,
) -> Result<Vec<f64>> {
    let (u_a, _) = solve_restricted_atomistic(&problem.asys, &controls.lambda_a, None, opts)?;
    let (u_c, _) = solve_restricted_continuum(&problem.csys, &controls.lambda_c, None, opts)?;
    let lin_a = linearize_atomistic(&problem.asys, &u_a)?;
    let lin_c = linearize_continuum(&problem.csys, &u_c)?;
    let r = problem.overlap.residual(&u_a, &u_c);
    Ok(reduced_gradient_inner(problem, &lin_a, &lin_c, &r))
}

#[derive(Clone, Copy, Debug)]
pub struct AtcOpts {
    pub newton: NewtonOpts,
    /// Outer stop on ‖∇J‖.
    pub tol_outer: f64,
    /// Outer stop on J itself.
    pub tol_j: f64,
    pub max_outer: usize,
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
    pub armijo_c: f64,
}

impl Default for AtcOpts {
    fn default() -> Self {
        Self {
            newton: NewtonOpts::default(),
            tol_outer: 1e-8,
            tol_j: 1e-20,
            max_outer: 30,
            cg_rel_tol: 1e-8,
            cg_max_iter: 2000,
            armijo_c: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AtcIterate {
    pub iteration: usize,
    pub j: f64,
    pub grad_norm: f64,
}

/// Converged coupling state: controls with their subproblem solutions and
/// the outer iteration log.
pub struct AtcState {
    pub controls: VirtualControls,
    pub u_a: LatticeField,
    pub u_c: FEField,
    pub j: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub log: Vec<AtcIterate>,
}

/// Gauss-Newton minimization of J over the virtual controls.
pub fn solve_atc(
    problem: &AtcProblem,
    init: Option<VirtualControls>,
    opts: &AtcOpts,
) -> Result<AtcState> {
    let mut controls = init.unwrap_or_else(|| VirtualControls::zeros(problem));
    let (mut u_a, _) =
        solve_restricted_atomistic(&problem.asys, &controls.lambda_a, None, &opts.newton)?;
    let (mut u_c, _) =
        solve_restricted_continuum(&problem.csys, &controls.lambda_c, None, &opts.newton)?;
    let mut log = Vec::new();
    let mut grad_norm = f64::INFINITY;
    for it in 0..=opts.max_outer {
        let r = problem.overlap.residual(&u_a, &u_c);
        let j = 0.5 * dot(&r, &r);
        let lin_a = linearize_atomistic(&problem.asys, &u_a)?;
        let lin_c = linearize_continuum(&problem.csys, &u_c)?;
        let grad = reduced_gradient_inner(problem, &lin_a, &lin_c, &r);
        grad_norm = dot(&grad, &grad).sqrt();
        log.push(AtcIterate {
            iteration: it,
            j,
            grad_norm,
        });
        if j <= opts.tol_j || grad_norm <= opts.tol_outer {
            return Ok(AtcState {
                controls,
                u_a,
                u_c,
                j,
                grad_norm,
                iterations: it,
                log,
            });
        }
        if it == opts.max_outer {
            break;
        }

        // Gauss-Newton normal equations (MᵀM)δ = −∇J on the control space,
        // joint constants projected out
        let na = 2 * problem.asys.n_ctrl();
        let apply = |v: &[f64]| -> Vec<f64> {
            let mu_a: Vec<Vector2<f64>> = (0..na / 2)
                .map(|i| Vector2::new(v[2 * i], v[2 * i + 1]))
                .collect();
            let mu_c: Vec<Vector2<f64>> = (na / 2..v.len() / 2)
                .map(|i| Vector2::new(v[2 * i], v[2 * i + 1]))
                .collect();
            let da = lin_a.apply(&mu_a);
            let dc = lin_c.apply(&mu_c);
            let mut m = problem.overlap.grad_vec_lattice(&da);
            for (a, b) in m.iter_mut().zip(problem.overlap.grad_vec_fe(&dc)) {
                *a -= b;
            }
            let mut out = reduced_gradient_inner(problem, &lin_a, &lin_c, &m);
            project_out_constants(&mut out);
            out
        };
        let mut b: Vec<f64> = grad.iter().map(|x| -x).collect();
        project_out_constants(&mut b);
        let (mut delta, _) = conjugate_gradient(apply, &b, opts.cg_rel_tol, opts.cg_max_iter);
        let mut slope = dot(&grad, &delta);
        if slope >= 0.0 {
            // CG returned an unusable direction; fall back to steepest descent
            delta = b.clone();
            slope = dot(&grad, &delta);
        }

        let mut t = 1.0;
        loop {
            let mut trial = controls.clone();
            trial.axpy_flat(t, &delta);
            let ua_t =
                solve_restricted_atomistic(&problem.asys, &trial.lambda_a, Some(&u_a), &opts.newton);
            let uc_t =
                solve_restricted_continuum(&problem.csys, &trial.lambda_c, Some(&u_c), &opts.newton);
            if let (Ok((ua_t, _)), Ok((uc_t, _))) = (ua_t, uc_t) {
                let j_t = problem.overlap.mismatch(&ua_t, &uc_t);
                if j_t <= j + opts.armijo_c * t * slope {
                    controls = trial;
                    u_a = ua_t;
                    u_c = uc_t;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(AtcError::OuterDiverged {
                    iterations: it,
                    grad_norm,
                });
            }
        }
    }
    Err(AtcError::OuterDiverged {
        iterations: opts.max_outer,
        grad_norm,
    })
}

fn get2(u: &LatticeField, s: Site) -> Result<Vector2<f64>> {
    u.get(s)
        .ok_or_else(|| AtcError::Coverage(format!("field misses site {s:?}")))
}

/// Constant gradient of the P1 interpolant of a lattice field on one unit
/// triangle (vertex order as in `unit_cell_triangles`).
fn lattice_tri_grad(u: &LatticeField, tri: &[Site; 3], upper: bool) -> Result<Matrix2<f64>> {
    let g = if upper { &UPPER_GRADS } else { &LOWER_GRADS };
    let mut m = Matrix2::zeros();
    for i in 0..3 {
        let v = get2(u, tri[i])?;
        m[(0, 0)] += v[0] * g[i][0];
        m[(0, 1)] += v[0] * g[i][1];
        m[(1, 0)] += v[1] * g[i][0];
        m[(1, 1)] += v[1] * g[i][1];
    }
    Ok(m)
}

/// Clip a convex polygon against the half-plane left of the directed edge
/// a → b (Sutherland-Hodgman step).
fn clip_halfplane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let sp = side(p);
        let sq = side(q);
        if sp >= 0.0 {
            out.push(p);
        }
        if (sp > 0.0 && sq < 0.0) || (sp < 0.0 && sq > 0.0) {
            let t = sp / (sp - sq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    a * 0.5
}

/// Broken H¹-seminorm error of an AtC pair against a reference lattice
/// field:
///
///   ( ‖∇I(u^a − u^ref)‖²_{L²(Ω_a)} + ‖∇(u^c − Iu^ref)‖²_{L²(Ω_c)} )^{1/2}.
///
/// On coarse FE triangles ∇Iu^ref is averaged exactly by clipping the unit
/// micro-triangles against the element.  Only gradients enter, so the result
/// is invariant under constant shifts of any of the three fields.
pub fn broken_error(
    geom: &DomainGeometry,
    u_a: &LatticeField,
    u_c: &FEField,
    reference: &LatticeField,
) -> Result<f64> {
    let r_c = geom.r_c;
    for corner in [
        [-r_c, -r_c],
        [r_c, -r_c],
        [-r_c, r_c],
        [r_c, r_c],
    ] {
        get2(reference, corner)?;
    }

    // atomistic term over the unit triangulation of Ω_a
    let mut acc = 0.0;
    for y in -geom.r_a..geom.r_a {
        for x in -geom.r_a..geom.r_a {
            for (which, tri) in unit_cell_triangles(x, y).into_iter().enumerate() {
                let ga = lattice_tri_grad(u_a, &tri, which == 1)?;
                let gr = lattice_tri_grad(reference, &tri, which == 1)?;
                acc += (ga - gr).norm_squared() * 0.5;
            }
        }
    }

    // continuum term per FE element
    let mesh = &u_c.mesh;
    for t in 0..mesh.n_triangles() {
        let p = mesh.tri_sites(t);
        let (area, _) = tri_geometry(&p);
        let gc = u_c.grad_on_tri(t);
        let gref = if (area - 0.5).abs() < 1e-12 {
            // resolved element: ∇Iu^ref on the unit triangle itself
            let x = p.iter().map(|q| q[0]).min().unwrap();
            let y = p.iter().map(|q| q[1]).min().unwrap();
            let upper = p.contains(&[x, y + 1]);
            let tri = unit_cell_triangles(x, y)[usize::from(upper)];
            lattice_tri_grad(reference, &tri, upper)?
        } else {
            average_ref_grad(reference, &p, area)?
        };
        acc += (gc - gref).norm_squared() * area;
    }
    Ok(acc.sqrt())
}

/// Area-weighted average of ∇Iu^ref over an integer-vertex triangle, by
/// clipping each unit micro-triangle against it.
fn average_ref_grad(
    reference: &LatticeField,
    p: &[Site; 3],
    area: f64,
) -> Result<Matrix2<f64>> {
    let pf: Vec<[f64; 2]> = p.iter().map(|q| [q[0] as f64, q[1] as f64]).collect();
    let xmin = p.iter().map(|q| q[0]).min().unwrap();
    let xmax = p.iter().map(|q| q[0]).max().unwrap();
    let ymin = p.iter().map(|q| q[1]).min().unwrap();
    let ymax = p.iter().map(|q| q[1]).max().unwrap();
    let mut acc = Matrix2::zeros();
    let mut covered = 0.0;
    for y in ymin..ymax {
        for x in xmin..xmax {
            for (which, tri) in unit_cell_triangles(x, y).into_iter().enumerate() {
                let mut poly: Vec<[f64; 2]> = tri
                    .iter()
                    .map(|q| [q[0] as f64, q[1] as f64])
                    .collect();
                for i in 0..3 {
                    poly = clip_halfplane(&poly, pf[i], pf[(i + 1) % 3]);
                    if poly.len() < 3 {
                        break;
                    }
                }
                if poly.len() < 3 {
                    continue;
                }
                let a = polygon_area(&poly);
                if a <= 1e-12 {
                    continue;
                }
                acc += lattice_tri_grad(reference, &tri, which == 1)? * a;
                covered += a;
            }
        }
    }
    if (covered - area).abs() > 1e-9 * area {
        return Err(AtcError::Coverage(format!(
            "element at {p:?} covered {covered} of {area}"
        )));
    }
    Ok(acc / area)
}

/// ‖∇Iu^ref − ∇u^c‖²_{L²(Ω_o)} for an arbitrary covering lattice field
/// (hash-lookup path; the reference need not live on 𝓛_a).
pub fn overlap_mismatch_vs_lattice(
    geom: &DomainGeometry,
    u_ref: &LatticeField,
    u_c: &FEField,
) -> Result<f64> {
    let mesh = &u_c.mesh;
    let (r_core, r_a) = (geom.r_core, geom.r_a);
    let mut acc = 0.0;
    for y in -r_a..r_a {
        for x in -r_a..r_a {
            let in_core = x >= -r_core && x + 1 <= r_core && y >= -r_core && y + 1 <= r_core;
            if in_core {
                continue;
            }
            for (which, tri) in unit_cell_triangles(x, y).into_iter().enumerate() {
                let gr = lattice_tri_grad(u_ref, &tri, which == 1)?;
                let g = if which == 1 { &UPPER_GRADS } else { &LOWER_GRADS };
                let mut gc = Matrix2::zeros();
                for i in 0..3 {
                    let n = mesh.node_id(tri[i]).ok_or_else(|| {
                        AtcError::MeshMismatch(format!("mesh misses node {:?}", tri[i]))
                    })?;
                    let v = u_c.values[n as usize];
                    gc[(0, 0)] += v[0] * g[i][0];
                    gc[(0, 1)] += v[0] * g[i][1];
                    gc[(1, 0)] += v[1] * g[i][0];
                    gc[(1, 1)] += v[1] * g[i][1];
                }
                acc += (gr - gc).norm_squared() * 0.5;
            }
        }
    }
    Ok(acc)
}
