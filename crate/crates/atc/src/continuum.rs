//! Graded P1 finite elements for the Cauchy-Born far field.
//!
//! The mesh covers the annulus Ω_c = Ω ∖ Ω_core with lattice-aligned right
//! triangles.  It is fully resolved (unit cells) out to the extended overlap
//! Ω_o,ex, then coarsens outward through concentric square rings whose cell
//! size doubles whenever the grading target h(x) ≈ (|x|∞/r_a)^g permits and
//! the ring layout stays aligned with the outer boundary.  Each doubling is
//! bridged by one transition ring of three-triangle blocks (minimum angle
//! atan(1/2) ≈ 26.6°), so every node is an integer lattice point and the mesh
//! is conforming by construction.
//!
//! The restricted continuum problem minimizes 𝓔ᶜ(u) = Σ_T W(∇u|_T)·|T| over
//! fields that take prescribed values on Γ_core (the inner boundary) and a
//! single shared constant K on Γ_c (the outer boundary); K is solved as an
//! unknown.  One-point quadrature is exact since ∇u is constant per triangle.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};

use crate::atomistic::{NewtonOpts, NewtonReport};
use crate::error::{AtcError, Result};
use crate::geometry::{DomainGeometry, Gauge, Site};
use crate::potential::CauchyBornDensity;
use crate::sparse::{Cholesky, CscMatrix, SymbolicCholesky};

/// Boundary classification of a mesh node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeTag {
    Interior,
    /// Inner boundary |x|∞ = r_core, carrying the Dirichlet controls.
    GammaCore,
    /// Outer boundary |x|∞ = r_c, tied to the shared constant K.
    GammaC,
}

/// How a node's two displacement components enter the solver's unknowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeDof {
    /// Free block starting at the given flat index.
    Free(u32),
    /// Tied to the shared constant K (one free block for all Γ_c nodes).
    Shared,
    /// Dirichlet control block starting at the given flat index.
    Ctrl(u32),
}

/// Conforming triangulation of Ω_c with integer nodes.
#[derive(Debug)]
pub struct FEMesh {
    pub geom: DomainGeometry,
    pub nodes: Vec<Site>,
    pub tags: Vec<NodeTag>,
    /// Positively oriented vertex triples.
    pub triangles: Vec<[u32; 3]>,
    /// Per-triangle diameter (longest edge).
    pub h_t: Vec<f64>,
    /// Smallest interior angle over all triangles, in degrees.
    pub min_angle_deg: f64,
    ids: HashMap<Site, u32>,
    dof: Vec<NodeDof>,
    /// Γ_core node ids in lexicographic (y-major, then x) site order; the
    /// control vector λ_c follows this ordering.
    core_nodes: Vec<u32>,
    n_interior: usize,
}

/// The two positively oriented unit right triangles of the lattice
/// triangulation 𝓣_a for the cell [x, x+1] × [y, y+1] (diagonal from the
/// lower-left to the upper-right corner).
pub fn unit_cell_triangles(x: i64, y: i64) -> [[Site; 3]; 2] {
    [
        [[x, y], [x + 1, y], [x + 1, y + 1]],
        [[x, y], [x + 1, y + 1], [x, y + 1]],
    ]
}

/// Area and P1 shape-function gradients of a positively oriented triangle
/// with integer vertices.
pub fn tri_geometry(p: &[Site; 3]) -> (f64, [Vector2<f64>; 3]) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
        - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    debug_assert!(det > 0, "triangle not positively oriented");
    let inv = 1.0 / det as f64;
    let grad = |a: Site, b: Site| Vector2::new(-((b[1] - a[1]) as f64), (b[0] - a[0]) as f64) * inv;
    (
        det as f64 * 0.5,
        [
            grad(p[1], p[2]),
            grad(p[2], p[0]),
            grad(p[0], p[1]),
        ],
    )
}

#[derive(Default)]
struct MeshBuilder {
    ids: HashMap<Site, u32>,
    nodes: Vec<Site>,
    triangles: Vec<[u32; 3]>,
}

impl MeshBuilder {
    fn node(&mut self, p: Site) -> u32 {
        if let Some(&i) = self.ids.get(&p) {
            return i;
        }
        let i = self.nodes.len() as u32;
        self.nodes.push(p);
        self.ids.insert(p, i);
        i
    }

    /// Emit one triangle, normalizing to positive orientation.
    fn tri(&mut self, a: Site, b: Site, c: Site) {
        let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        assert!(cross != 0, "degenerate triangle {a:?} {b:?} {c:?}");
        let (b, c) = if cross > 0 { (b, c) } else { (c, b) };
        let t = [self.node(a), self.node(b), self.node(c)];
        self.triangles.push(t);
    }

    /// An s×s cell split along the lower-left → upper-right diagonal.
    fn square(&mut self, x: i64, y: i64, s: i64) {
        self.tri([x, y], [x + s, y], [x + s, y + s]);
        self.tri([x, y], [x + s, y + s], [x, y + s]);
    }
}

/// One square ring [−(b+s), b+s]² ∖ (−b, b)² of s×s cells.
fn uniform_ring(mb: &mut MeshBuilder, b: i64, s: i64) {
    let mut x = -(b + s);
    while x <= b {
        mb.square(x, b, s);
        mb.square(x, -(b + s), s);
        x += s;
    }
    let mut y = -b;
    while y < b {
        mb.square(b, y, s);
        mb.square(-(b + s), y, s);
        y += s;
    }
}

/// A ring of width 2s bridging inner cell size s to outer cell size 2s.
/// Interior blocks use the three-triangle pattern (two s-edges inside, one
/// 2s-edge outside); corners are plain 2s squares.
fn transition_ring(mb: &mut MeshBuilder, b: i64, s: i64) {
    let s2 = 2 * s;
    // local block pattern in (t = along-edge, n = outward) coordinates
    let pattern: [[[i64; 2]; 3]; 3] = [
        [[0, 0], [s, 0], [0, s2]],
        [[s, 0], [s2, s2], [0, s2]],
        [[s, 0], [s2, 0], [s2, s2]],
    ];
    let sides: [fn(i64, i64, i64, i64) -> Site; 4] = [
        |b, t0, t, n| [t0 + t, b + n],   // top
        |b, t0, t, n| [t0 + t, -b - n],  // bottom
        |b, t0, t, n| [b + n, t0 + t],   // right
        |b, t0, t, n| [-b - n, t0 + t],  // left
    ];
    for side in sides {
        let mut t0 = -b;
        while t0 < b {
            for tri in &pattern {
                let p: Vec<Site> = tri.iter().map(|&[t, n]| side(b, t0, t, n)).collect();
                mb.tri(p[0], p[1], p[2]);
            }
            t0 += s2;
        }
    }
    mb.square(b, b, s2);
    mb.square(-(b + s2), b, s2);
    mb.square(b, -(b + s2), s2);
    mb.square(-(b + s2), -(b + s2), s2);
}

/// Build the graded mesh of Ω_c.  Deterministic for fixed inputs.
pub fn build_mesh(
    geom: &DomainGeometry,
    grading_exponent: f64,
    beta_min_deg: f64,
) -> Result<FEMesh> {
    if !(1.0..2.0).contains(&grading_exponent) {
        return Err(AtcError::Config(format!(
            "grading exponent {grading_exponent} outside [1, 2)"
        )));
    }
    let (r_core, r_a, r_c, r_oex) = (geom.r_core, geom.r_a, geom.r_c, geom.r_oex);
    let b0 = r_oex.min(r_c);
    let mut mb = MeshBuilder::default();
    // fully resolved annulus r_core .. b0
    for y in -b0..b0 {
        for x in -b0..b0 {
            let in_core = x >= -r_core && x + 1 <= r_core && y >= -r_core && y + 1 <= r_core;
            if !in_core {
                mb.square(x, y, 1);
            }
        }
    }
    // graded rings b0 .. r_c
    let mut b = b0;
    let mut s: i64 = 1;
    while b < r_c {
        let s2 = 2 * s;
        // doubling must respect the grading target, fit inside Ω, keep the
        // remaining width tileable at the new size, and stay block-aligned
        let can_double = (b as f64 / r_a as f64).powf(grading_exponent) >= s2 as f64
            && b + s2 <= r_c
            && (r_c - b - s2) % s2 == 0
            && b % s == 0;
        if can_double {
            transition_ring(&mut mb, b, s);
            b += s2;
            s = s2;
        } else {
            uniform_ring(&mut mb, b, s);
            b += s;
        }
    }

    finalize(geom.clone(), mb, beta_min_deg)
}

fn finalize(geom: DomainGeometry, mb: MeshBuilder, beta_min_deg: f64) -> Result<FEMesh> {
    let MeshBuilder {
        ids,
        nodes,
        triangles,
    } = mb;
    let (r_core, r_c, r_oex) = (geom.r_core, geom.r_c, geom.r_oex);

    let tags: Vec<NodeTag> = nodes
        .iter()
        .map(|p| {
            let m = p[0].abs().max(p[1].abs());
            debug_assert!((r_core..=r_c).contains(&m));
            if m == r_core {
                NodeTag::GammaCore
            } else if m == r_c {
                NodeTag::GammaC
            } else {
                NodeTag::Interior
            }
        })
        .collect();

    // exact tiling check: twice the areas are integers, so compare exactly
    let mut two_area_sum: i64 = 0;
    let mut h_t = Vec::with_capacity(triangles.len());
    let mut min_angle = f64::INFINITY;
    for t in &triangles {
        let p = [
            nodes[t[0] as usize],
            nodes[t[1] as usize],
            nodes[t[2] as usize],
        ];
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        if det <= 0 {
            return Err(AtcError::Mesh("non-positive triangle".into()));
        }
        two_area_sum += det;
        let mut h: f64 = 0.0;
        for i in 0..3 {
            let (a, bb, c) = (p[i], p[(i + 1) % 3], p[(i + 2) % 3]);
            let e1 = [(bb[0] - a[0]) as f64, (bb[1] - a[1]) as f64];
            let e2 = [(c[0] - a[0]) as f64, (c[1] - a[1]) as f64];
            let n1 = (e1[0] * e1[0] + e1[1] * e1[1]).sqrt();
            let n2 = (e2[0] * e2[0] + e2[1] * e2[1]).sqrt();
            h = h.max(n1);
            let cos = (e1[0] * e2[0] + e1[1] * e2[1]) / (n1 * n2);
            min_angle = min_angle.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
        }
        h_t.push(h);

        // resolution check: triangles inside the extended overlap must be
        // unit right triangles of the lattice triangulation
        let m = p
            .iter()
            .map(|q| q[0].abs().max(q[1].abs()))
            .max()
            .unwrap();
        if m <= r_oex {
            let diag_ok = (0..3).any(|i| {
                let dx = p[(i + 1) % 3][0] - p[i][0];
                let dy = p[(i + 1) % 3][1] - p[i][1];
                dx * dx + dy * dy == 2 && dx == dy
            });
            if det != 1 || !diag_ok {
                return Err(AtcError::Mesh(format!(
                    "non-unit triangle {p:?} inside the resolved region"
                )));
            }
        }
    }
    let expected = 4 * (r_c * r_c - r_core * r_core);
    if two_area_sum != 2 * expected {
        return Err(AtcError::Mesh(format!(
            "mesh tiles area {}/2, domain has {expected}",
            two_area_sum
        )));
    }
    if min_angle < beta_min_deg {
        return Err(AtcError::Mesh(format!(
            "minimum angle {min_angle:.2}° below {beta_min_deg}°"
        )));
    }

    // DOF map: interior nodes get consecutive free blocks, Γ_c shares one
    // trailing block (K), Γ_core nodes get control blocks in site order
    let mut core_nodes: Vec<u32> = (0..nodes.len() as u32)
        .filter(|&i| tags[i as usize] == NodeTag::GammaCore)
        .collect();
    core_nodes.sort_by_key(|&i| (nodes[i as usize][1], nodes[i as usize][0]));
    let mut dof = vec![NodeDof::Shared; nodes.len()];
    let mut n_interior = 0;
    for i in 0..nodes.len() {
        if tags[i] == NodeTag::Interior {
            dof[i] = NodeDof::Free(2 * n_interior as u32);
            n_interior += 1;
        }
    }
    for (ci, &i) in core_nodes.iter().enumerate() {
        dof[i as usize] = NodeDof::Ctrl(2 * ci as u32);
    }

    Ok(FEMesh {
        geom,
        nodes,
        tags,
        triangles,
        h_t,
        min_angle_deg: min_angle,
        ids,
        dof,
        core_nodes,
        n_interior,
    })
}

impl FEMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn node_id(&self, p: Site) -> Option<u32> {
        self.ids.get(&p).copied()
    }

    /// Γ_core node ids in control order (lexicographic by site, y-major).
    pub fn core_nodes(&self) -> &[u32] {
        &self.core_nodes
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn tri_sites(&self, t: usize) -> [Site; 3] {
        let tri = self.triangles[t];
        [
            self.nodes[tri[0] as usize],
            self.nodes[tri[1] as usize],
            self.nodes[tri[2] as usize],
        ]
    }

    /// Max-norm of the farthest vertex of triangle `t`.
    pub fn tri_radius(&self, t: usize) -> i64 {
        self.tri_sites(t)
            .iter()
            .map(|p| p[0].abs().max(p[1].abs()))
            .max()
            .unwrap()
    }

    /// Plain-text listing: one node per line "id x y tag", then one triangle
    /// per line "id n0 n1 n2".
    pub fn dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (i, p) in self.nodes.iter().enumerate() {
            let tag = match self.tags[i] {
                NodeTag::Interior => "interior",
                NodeTag::GammaCore => "gamma_core",
                NodeTag::GammaC => "gamma_c",
            };
            writeln!(w, "{} {} {} {}", i, p[0], p[1], tag)?;
        }
        for (i, t) in self.triangles.iter().enumerate() {
            writeln!(w, "{} {} {} {}", i, t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// A P1 displacement field on an `FEMesh`.  `values` holds every node;
/// fields produced by the solvers carry the identical shared constant `k` on
/// all Γ_c nodes.  (Test constructors such as `affine` may leave the outer
/// boundary untied; they are not elements of the constrained trial space.)
#[derive(Clone, Debug)]
pub struct FEField {
    pub mesh: Arc<FEMesh>,
    pub values: Vec<Vector2<f64>>,
    pub k: Vector2<f64>,
    pub gauge: Gauge,
}

impl FEField {
    pub fn zeros(mesh: Arc<FEMesh>) -> Self {
        let n = mesh.n_nodes();
        Self {
            mesh,
            values: vec![Vector2::zeros(); n],
            k: Vector2::zeros(),
            gauge: Gauge::Raw,
        }
    }

    /// u(x) = Gx at every node (untied outer boundary; for assembly tests).
    pub fn affine(mesh: Arc<FEMesh>, g: &Matrix2<f64>) -> Self {
        let values = mesh
            .nodes
            .iter()
            .map(|p| g * Vector2::new(p[0] as f64, p[1] as f64))
            .collect();
        Self {
            mesh,
            values,
            k: Vector2::zeros(),
            gauge: Gauge::Raw,
        }
    }

    pub fn value(&self, node: u32) -> Vector2<f64> {
        self.values[node as usize]
    }

    /// Constant 2×2 gradient on triangle `t`.
    pub fn grad_on_tri(&self, t: usize) -> Matrix2<f64> {
        let tri = self.mesh.triangles[t];
        let p = self.mesh.tri_sites(t);
        let (_, grads) = tri_geometry(&p);
        let mut g = Matrix2::zeros();
        for i in 0..3 {
            g += self.values[tri[i] as usize] * grads[i].transpose();
        }
        g
    }

    pub fn shift(&mut self, c: Vector2<f64>) {
        for v in &mut self.values {
            *v += c;
        }
        self.k += c;
        self.gauge = Gauge::Raw;
    }
}

/// ∫ |∇u|² over the triangles whose farthest vertex satisfies |x|∞ ≤ r_max.
pub fn grad_seminorm_sq(u: &FEField, r_max: i64) -> f64 {
    let mut acc = 0.0;
    for t in 0..u.mesh.n_triangles() {
        if u.mesh.tri_radius(t) <= r_max {
            let p = u.mesh.tri_sites(t);
            let (area, _) = tri_geometry(&p);
            acc += u.grad_on_tri(t).norm_squared() * area;
        }
    }
    acc
}

/// Hessian of the restricted continuum energy split by DOF kind.
pub struct ContinuumHessian {
    /// free × free block (interior nodes plus K)
    pub ff: CscMatrix,
    /// free × control block (columns follow the Γ_core control ordering)
    pub fc: CscMatrix,
}

/// The restricted continuum problem: mesh, energy density, and the DOF
/// partition into free unknowns (interior + K) and Γ_core controls.
pub struct ContinuumSystem {
    pub mesh: Arc<FEMesh>,
    pub cb: CauchyBornDensity,
}

impl ContinuumSystem {
    pub fn new(mesh: Arc<FEMesh>, cb: CauchyBornDensity) -> Self {
        Self { mesh, cb }
    }

    pub fn n_free(&self) -> usize {
        2 * (self.mesh.n_interior + 1)
    }

    pub fn n_ctrl(&self) -> usize {
        2 * self.mesh.core_nodes.len()
    }

    fn k_base(&self) -> u32 {
        2 * self.mesh.n_interior as u32
    }

    pub fn energy(&self, u: &FEField) -> f64 {
        let mut e = 0.0;
        for t in 0..self.mesh.n_triangles() {
            let p = self.mesh.tri_sites(t);
            let (area, _) = tri_geometry(&p);
            e += self.cb.energy(&u.grad_on_tri(t)) * area;
        }
        e
    }

    /// Unconstrained residual ∂𝓔ᶜ/∂u_a at every node.
    pub fn nodal_residual(&self, u: &FEField) -> Vec<Vector2<f64>> {
        let mut r = vec![Vector2::zeros(); self.mesh.n_nodes()];
        for t in 0..self.mesh.n_triangles() {
            let tri = self.mesh.triangles[t];
            let p = self.mesh.tri_sites(t);
            let (area, grads) = tri_geometry(&p);
            let stress = self.cb.stress(&u.grad_on_tri(t));
            for i in 0..3 {
                r[tri[i] as usize] += stress * grads[i] * area;
            }
        }
        r
    }

    /// Gradient over the free DOFs: interior node blocks, then the K block
    /// (the sum of all Γ_c nodal residuals).
    pub fn gradient(&self, u: &FEField) -> Vec<f64> {
        let nodal = self.nodal_residual(u);
        let mut g = vec![0.0; self.n_free()];
        let kb = self.k_base() as usize;
        for (i, r) in nodal.iter().enumerate() {
            match self.mesh.dof[i] {
                NodeDof::Free(b) => {
                    g[b as usize] += r[0];
                    g[b as usize + 1] += r[1];
                }
                NodeDof::Shared => {
                    g[kb] += r[0];
                    g[kb + 1] += r[1];
                }
                NodeDof::Ctrl(_) => {}
            }
        }
        g
    }

    /// Split a per-node linear functional into flattened (free, control)
    /// vectors; Γ_c contributions accumulate onto the shared K block.
    pub fn fold_nodal(&self, nodal: &[Vector2<f64>]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(nodal.len(), self.mesh.n_nodes());
        let mut gf = vec![0.0; self.n_free()];
        let mut gc = vec![0.0; self.n_ctrl()];
        let kb = self.k_base() as usize;
        for (i, v) in nodal.iter().enumerate() {
            match self.mesh.dof[i] {
                NodeDof::Free(b) => {
                    gf[b as usize] += v[0];
                    gf[b as usize + 1] += v[1];
                }
                NodeDof::Shared => {
                    gf[kb] += v[0];
                    gf[kb + 1] += v[1];
                }
                NodeDof::Ctrl(b) => {
                    gc[b as usize] += v[0];
                    gc[b as usize + 1] += v[1];
                }
            }
        }
        (gf, gc)
    }

    pub fn hessian(&self, u: &FEField) -> ContinuumHessian {
        let mut ff = Vec::new();
        let mut fc = Vec::new();
        let kb = self.k_base();
        let row_of = |d: NodeDof| -> Option<u32> {
            match d {
                NodeDof::Free(b) => Some(b),
                NodeDof::Shared => Some(kb),
                NodeDof::Ctrl(_) => None,
            }
        };
        let e = [Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        for t in 0..self.mesh.n_triangles() {
            let tri = self.mesh.triangles[t];
            let p = self.mesh.tri_sites(t);
            let (area, grads) = tri_geometry(&p);
            let g = {
                let mut g = Matrix2::zeros();
                for i in 0..3 {
                    g += u.values[tri[i] as usize] * grads[i].transpose();
                }
                g
            };
            for j in 0..3 {
                let dof_j = self.mesh.dof[tri[j] as usize];
                for b in 0..2 {
                    let f = e[b] * grads[j].transpose();
                    let a_jb = self.cb.tangent_apply(&g, &f) * area;
                    for i in 0..3 {
                        let Some(row) = row_of(self.mesh.dof[tri[i] as usize]) else {
                            continue;
                        };
                        let col = match dof_j {
                            NodeDof::Free(bb) => Ok(bb + b as u32),
                            NodeDof::Shared => Ok(kb + b as u32),
                            NodeDof::Ctrl(bb) => Err(bb + b as u32),
                        };
                        let v = a_jb * grads[i];
                        match col {
                            Ok(c) => {
                                ff.push((row as usize, c as usize, v[0]));
                                ff.push((row as usize + 1, c as usize, v[1]));
                            }
                            Err(c) => {
                                fc.push((row as usize, c as usize, v[0]));
                                fc.push((row as usize + 1, c as usize, v[1]));
                            }
                        }
                    }
                }
            }
        }
        let nf = self.n_free();
        ContinuumHessian {
            ff: CscMatrix::from_triplets(nf, nf, ff),
            fc: CscMatrix::from_triplets(nf, self.n_ctrl(), fc),
        }
    }

    /// Assemble a field from Dirichlet data on Γ_core and the free vector
    /// (interior blocks followed by K).
    pub fn field_from_parts(&self, lambda: &[Vector2<f64>], free: &[f64]) -> FEField {
        debug_assert_eq!(2 * lambda.len(), self.n_ctrl());
        debug_assert_eq!(free.len(), self.n_free());
        let kb = self.k_base() as usize;
        let k = Vector2::new(free[kb], free[kb + 1]);
        let values = (0..self.mesh.n_nodes())
            .map(|i| match self.mesh.dof[i] {
                NodeDof::Free(b) => Vector2::new(free[b as usize], free[b as usize + 1]),
                NodeDof::Shared => k,
                NodeDof::Ctrl(b) => lambda[b as usize / 2],
            })
            .collect();
        FEField {
            mesh: self.mesh.clone(),
            values,
            k,
            gauge: Gauge::Raw,
        }
    }
}

/// Newton with Armijo backtracking for the restricted continuum problem with
/// Dirichlet data `lambda_c` on Γ_core (control ordering of the mesh).
pub fn solve_restricted_continuum(
    sys: &ContinuumSystem,
    lambda_c: &[Vector2<f64>],
    u0: Option<&FEField>,
    opts: &NewtonOpts,
) -> Result<(FEField, NewtonReport)> {
    if 2 * lambda_c.len() != sys.n_ctrl() {
        return Err(AtcError::Constraint(format!(
            "control data has {} entries, Γ_core has {}",
            lambda_c.len(),
            sys.mesh.core_nodes.len()
        )));
    }
    let mut free = vec![0.0; sys.n_free()];
    match u0 {
        Some(u0) => {
            let kb = sys.k_base() as usize;
            for i in 0..sys.mesh.n_nodes() {
                if let NodeDof::Free(b) = sys.mesh.dof[i] {
                    free[b as usize] = u0.values[i][0];
                    free[b as usize + 1] = u0.values[i][1];
                }
            }
            free[kb] = u0.k[0];
            free[kb + 1] = u0.k[1];
        }
        None => {
            if !lambda_c.is_empty() {
                // exact for constant controls, keeps the first iterate away
                // from crushed states
                let mean: Vector2<f64> =
                    lambda_c.iter().sum::<Vector2<f64>>() / lambda_c.len() as f64;
                for fi in 0..sys.n_free() / 2 {
                    free[2 * fi] = mean[0];
                    free[2 * fi + 1] = mean[1];
                }
            }
        }
    }
    let lam_inf = lambda_c
        .iter()
        .map(|v| v[0].abs().max(v[1].abs()))
        .fold(0.0, f64::max);
    let tol = opts.tol * (1.0 + lam_inf);

    let mut u = sys.field_from_parts(lambda_c, &free);
    let mut symbolic: Option<SymbolicCholesky> = None;
    let mut residual = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let g = sys.gradient(&u);
        residual = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if residual <= tol {
            return Ok((
                u,
                NewtonReport {
                    iterations: it,
                    residual,
                },
            ));
        }
        if it == opts.max_iter {
            break;
        }
        let hess = sys.hessian(&u);
        let sym = match &symbolic {
            Some(s) => s,
            None => {
                symbolic = Some(hess.ff.symbolic_cholesky()?);
                symbolic.as_ref().unwrap()
            }
        };
        let factor = sym.factor(&hess.ff)?;
        let mut d = g.clone();
        factor.solve_in_place(&mut d);
        for x in &mut d {
            *x = -*x;
        }
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let e0 = sys.energy(&u);
        // below the fp resolution of the energy Armijo cannot certify the
        // decrease; take the full (locally contractive) Newton step
        let full_step = slope.abs() <= 1e-14 * (1.0 + e0.abs());
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = free.iter().zip(&d).map(|(f, dd)| f + t * dd).collect();
            let u_trial = sys.field_from_parts(lambda_c, &trial);
            if full_step || sys.energy(&u_trial) <= e0 + opts.armijo_c * t * slope {
                free = trial;
                u = u_trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(AtcError::NonConvergence {
                    iterations: it,
                    residual,
                });
            }
        }
    }
    Err(AtcError::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Factorized linearization of the restricted continuum problem at a base
/// state: applies δUᶜ[μ_c] and its adjoint.
pub struct LinearizedContinuum<'a> {
    pub sys: &'a ContinuumSystem,
    factor: Cholesky,
    fc: CscMatrix,
}

pub fn linearize_continuum<'a>(
    sys: &'a ContinuumSystem,
    base: &FEField,
) -> Result<LinearizedContinuum<'a>> {
    let hess = sys.hessian(base);
    let factor = hess.ff.cholesky()?;
    Ok(LinearizedContinuum {
        sys,
        factor,
        fc: hess.fc,
    })
}

impl LinearizedContinuum<'_> {
    /// Free-DOF values of δUᶜ[μ] for flattened control data μ.
    pub fn apply_vec(&self, mu: &[f64]) -> Vec<f64> {
        let mut rhs = self.fc.matvec(mu);
        for x in &mut rhs {
            *x = -*x;
        }
        self.factor.solve_in_place(&mut rhs);
        rhs
    }

    /// Full FE field of δUᶜ[μ].
    pub fn apply(&self, mu: &[Vector2<f64>]) -> FEField {
        let flat: Vec<f64> = mu.iter().flat_map(|v| [v[0], v[1]]).collect();
        let free = self.apply_vec(&flat);
        self.sys.field_from_parts(mu, &free)
    }

    /// Adjoint of μ ↦ δUᶜ[μ] applied to a functional with components
    /// (g_free, g_ctrl): returns g_ctrl − fcᵀ ff⁻¹ g_free.
    pub fn adjoint(&self, g_free: &[f64], g_ctrl: &[f64]) -> Vec<f64> {
        let w = self.factor.solve(g_free);
        let mut out = self.fc.matvec_transpose(&w);
        for (o, g) in out.iter_mut().zip(g_ctrl) {
            *o = g - *o;
        }
        out
    }
}
