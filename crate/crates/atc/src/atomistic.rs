//! The restricted atomistic problem: minimize the site-energy sum over the
//! interior of a lattice set, with Dirichlet virtual controls on the width-2
//! boundary layer ∂𝓛 = 𝓛 ∖ 𝓛°°, plus its linearization and the truncated
//! reference problem on a large box.
//!
//! Summing the site energies over the full interior 𝓛° (every site whose
//! stencil stays inside 𝓛) makes the Euler-Lagrange equation at each free
//! site identical to the infinite-lattice equation.  This matters for a
//! pre-stressed potential: it is what makes u ≡ 0 an exact homogeneous
//! equilibrium and lets Dirichlet data taken from a reference solution
//! reproduce that solution exactly, with no spurious surface forces at the
//! edge of the free region.

use std::sync::Arc;

use nalgebra::Vector2;

use crate::error::{AtcError, Result};
use crate::geometry::{Gauge, InteractionRange, LatticeField, LatticeIndex};
use crate::potential::{site_gradient, site_hessian, SiteModel};
use crate::sparse::{Cholesky, CscMatrix, SymbolicCholesky};

/// DOF classification of a lattice site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dof {
    Free(u32),
    Ctrl(u32),
}

/// The free/control split of a lattice set: free sites are the double
/// interior (where site energies are summed), control sites the boundary
/// layer ∂𝓛 carrying Dirichlet data.
pub struct AtomisticSystem {
    pub lattice: Arc<LatticeIndex>,
    pub model: Arc<SiteModel>,
    dof: Vec<Dof>,
    free_sites: Vec<u32>,
    ctrl_sites: Vec<u32>,
    /// Sites whose energies are summed: the interior 𝓛°.
    sum_sites: Vec<u32>,
    /// Neighbor ordinals of each sum site, `range.len()` per site.
    neighbors: Vec<u32>,
}

impl AtomisticSystem {
    pub fn new(lattice: Arc<LatticeIndex>, model: Arc<SiteModel>) -> Self {
        let mut dof = Vec::with_capacity(lattice.len());
        let mut free_sites = Vec::new();
        let mut ctrl_sites = Vec::new();
        let mut sum_sites = Vec::new();
        for i in 0..lattice.len() {
            if lattice.is_double_interior(i) {
                dof.push(Dof::Free(free_sites.len() as u32));
                free_sites.push(i as u32);
            } else {
                dof.push(Dof::Ctrl(ctrl_sites.len() as u32));
                ctrl_sites.push(i as u32);
            }
            if lattice.is_interior(i) {
                sum_sites.push(i as u32);
            }
        }
        let offsets = model.range.offsets();
        let mut neighbors = Vec::with_capacity(sum_sites.len() * offsets.len());
        for &si in &sum_sites {
            let s = lattice.site(si as usize);
            for &rho in offsets {
                let n = lattice
                    .ordinal([s[0] + rho[0], s[1] + rho[1]])
                    .expect("interior site has all neighbors");
                neighbors.push(n as u32);
            }
        }
        Self {
            lattice,
            model,
            dof,
            free_sites,
            ctrl_sites,
            sum_sites,
            neighbors,
        }
    }

    pub fn n_free(&self) -> usize {
        self.free_sites.len()
    }

    pub fn n_ctrl(&self) -> usize {
        self.ctrl_sites.len()
    }

    /// Ordinals (into the lattice) of the control sites, in site order.
    pub fn ctrl_sites(&self) -> &[u32] {
        &self.ctrl_sites
    }

    pub fn free_sites(&self) -> &[u32] {
        &self.free_sites
    }

    /// Split a per-site linear functional (indexed by lattice ordinal) into
    /// flattened (free, control) vectors.
    pub fn fold_sites(&self, per_site: &[Vector2<f64>]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(per_site.len(), self.lattice.len());
        let mut gf = vec![0.0; 2 * self.n_free()];
        let mut gc = vec![0.0; 2 * self.n_ctrl()];
        for (i, v) in per_site.iter().enumerate() {
            match self.dof[i] {
                Dof::Free(b) => {
                    gf[2 * b as usize] = v[0];
                    gf[2 * b as usize + 1] = v[1];
                }
                Dof::Ctrl(b) => {
                    gc[2 * b as usize] = v[0];
                    gc[2 * b as usize + 1] = v[1];
                }
            }
        }
        (gf, gc)
    }

    fn stencil_of(&self, k: usize, values: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
        let nr = self.model.range.len();
        let u0 = values[self.sum_sites[k] as usize];
        (0..nr)
            .map(|j| values[self.neighbors[k * nr + j] as usize] - u0)
            .collect()
    }

    /// 𝓔̃ᵃ(u) = Σ_{ξ ∈ 𝓛°} V_ξ(Du).
    pub fn energy(&self, u: &LatticeField) -> f64 {
        debug_assert_eq!(u.values.len(), self.lattice.len());
        let mut e = 0.0;
        for k in 0..self.sum_sites.len() {
            let xi = self.lattice.site(self.sum_sites[k] as usize);
            let du = self.stencil_of(k, &u.values);
            e += crate::potential::site_energy(&self.model, xi, &du);
        }
        e
    }

    /// Exact gradient with respect to the free DOFs, flattened (x, y) per site.
    pub fn gradient(&self, u: &LatticeField) -> Vec<f64> {
        let nr = self.model.range.len();
        let mut g = vec![0.0; 2 * self.n_free()];
        for k in 0..self.sum_sites.len() {
            let center_ord = self.sum_sites[k] as usize;
            let xi = self.lattice.site(center_ord);
            let du = self.stencil_of(k, &u.values);
            let blocks = site_gradient(&self.model, xi, &du);
            let mut center = Vector2::zeros();
            for (j, b) in blocks.iter().enumerate() {
                center -= b;
                let n = self.neighbors[k * nr + j] as usize;
                if let Dof::Free(fi) = self.dof[n] {
                    g[2 * fi as usize] += b[0];
                    g[2 * fi as usize + 1] += b[1];
                }
            }
            if let Dof::Free(fi) = self.dof[center_ord] {
                g[2 * fi as usize] += center[0];
                g[2 * fi as usize + 1] += center[1];
            }
        }
        g
    }

    /// Allocate the Hessian blocks (free-free and free-control) with their
    /// sparsity pattern; values zeroed.
    pub fn hessian_pattern(&self) -> AtomisticHessian {
        let nf = 2 * self.n_free();
        let nc = 2 * self.n_ctrl();
        // A free DOF couples to itself and its one-hop neighbors only (pair
        // potential: no two-hop coupling).
        let mut site_rows: Vec<u32> = Vec::with_capacity(self.model.range.len() + 1);
        let ff = CscMatrix::from_column_fn(nf, nf, |col, rows| {
            let k = col / 2;
            let s = self.lattice.site(self.free_sites[k] as usize);
            site_rows.clear();
            for &rho in self.model.range.offsets() {
                let n = self
                    .lattice
                    .ordinal([s[0] + rho[0], s[1] + rho[1]])
                    .expect("free site has all neighbors");
                if let Dof::Free(fi) = self.dof[n] {
                    site_rows.push(fi);
                }
            }
            site_rows.push(k as u32);
            site_rows.sort_unstable();
            for &fi in site_rows.iter() {
                rows.push(2 * fi as usize);
                rows.push(2 * fi as usize + 1);
            }
        });
        // free×ctrl block: column per control DOF, rows are the free
        // neighbors of the control site.
        let mut ctrl_cols: Vec<Vec<u32>> = vec![Vec::new(); self.n_ctrl()];
        for (k, &ci_ord) in self.ctrl_sites.iter().enumerate() {
            let s = self.lattice.site(ci_ord as usize);
            for &rho in self.model.range.offsets() {
                if let Some(n) = self.lattice.ordinal([s[0] + rho[0], s[1] + rho[1]]) {
                    if let Dof::Free(fi) = self.dof[n] {
                        ctrl_cols[k].push(fi);
                    }
                }
            }
        }
        for c in &mut ctrl_cols {
            c.sort_unstable();
        }
        let fc = CscMatrix::from_column_fn(nf, nc, |col, rows| {
            for &fi in &ctrl_cols[col / 2] {
                rows.push(2 * fi as usize);
                rows.push(2 * fi as usize + 1);
            }
        });
        AtomisticHessian { ff, fc }
    }

    /// Fill the Hessian values at state `u` (pattern from `hessian_pattern`).
    pub fn hessian_fill(&self, u: &LatticeField, h: &mut AtomisticHessian) {
        h.ff.zero_values();
        h.fc.zero_values();
        let nr = self.model.range.len();
        for k in 0..self.sum_sites.len() {
            let center_ord = self.sum_sites[k] as usize;
            let xi = self.lattice.site(center_ord);
            let du = self.stencil_of(k, &u.values);
            let blocks = site_hessian(&self.model, xi, &du);
            let center_dof = self.dof[center_ord];
            for (j, b) in blocks.iter().enumerate() {
                let n_dof = self.dof[self.neighbors[k * nr + j] as usize];
                for a in 0..2 {
                    for c in 0..2 {
                        let v = b[(a, c)];
                        // d²φ of the bond (ξ, ξ+ρ): +v on both diagonals,
                        // −v on the two couplings; control-control dropped.
                        match (center_dof, n_dof) {
                            (Dof::Free(fi), Dof::Free(ni)) => {
                                let (fi, ni) = (fi as usize, ni as usize);
                                h.ff.add(2 * fi + a, 2 * fi + c, v);
                                h.ff.add(2 * ni + a, 2 * ni + c, v);
                                h.ff.add(2 * fi + a, 2 * ni + c, -v);
                                h.ff.add(2 * ni + a, 2 * fi + c, -v);
                            }
                            (Dof::Free(fi), Dof::Ctrl(ci)) => {
                                let (fi, ci) = (fi as usize, ci as usize);
                                h.ff.add(2 * fi + a, 2 * fi + c, v);
                                h.fc.add(2 * fi + a, 2 * ci + c, -v);
                            }
                            (Dof::Ctrl(ci), Dof::Free(ni)) => {
                                let (ci, ni) = (ci as usize, ni as usize);
                                h.ff.add(2 * ni + a, 2 * ni + c, v);
                                h.fc.add(2 * ni + a, 2 * ci + c, -v);
                            }
                            (Dof::Ctrl(_), Dof::Ctrl(_)) => {}
                        }
                    }
                }
            }
        }
    }

    pub fn hessian(&self, u: &LatticeField) -> AtomisticHessian {
        let mut h = self.hessian_pattern();
        self.hessian_fill(u, &mut h);
        h
    }

    /// Assemble a full field from control data and free values.
    pub fn field_from_parts(
        &self,
        lambda: &[Vector2<f64>],
        free: &[f64],
    ) -> LatticeField {
        debug_assert_eq!(lambda.len(), self.n_ctrl());
        debug_assert_eq!(free.len(), 2 * self.n_free());
        let mut u = LatticeField::zeros(self.lattice.clone());
        for (ci, &ord) in self.ctrl_sites.iter().enumerate() {
            u.values[ord as usize] = lambda[ci];
        }
        for (fi, &ord) in self.free_sites.iter().enumerate() {
            u.values[ord as usize] = Vector2::new(free[2 * fi], free[2 * fi + 1]);
        }
        u
    }
}

/// Second variation of the restricted energy, split by DOF class.
pub struct AtomisticHessian {
    /// free × free block (symmetric positive definite near stable states)
    pub ff: CscMatrix,
    /// free × ctrl coupling block
    pub fc: CscMatrix,
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOpts {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            armijo_c: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
}

/// Newton with Armijo backtracking for the restricted problem with Dirichlet
/// data `lambda` on the control sites.  Returns the equilibrium field (equal
/// to `lambda` on controls bit-for-bit).
pub fn solve_restricted_atomistic(
    sys: &AtomisticSystem,
    lambda: &[Vector2<f64>],
    u0: Option<&LatticeField>,
    opts: &NewtonOpts,
) -> Result<(LatticeField, NewtonReport)> {
    if lambda.len() != sys.n_ctrl() {
        return Err(AtcError::Constraint(format!(
            "control data has {} entries, boundary layer has {}",
            lambda.len(),
            sys.n_ctrl()
        )));
    }
    let mut free = vec![0.0; 2 * sys.n_free()];
    match u0 {
        Some(u0) => {
            for (fi, &ord) in sys.free_sites.iter().enumerate() {
                free[2 * fi] = u0.values[ord as usize][0];
                free[2 * fi + 1] = u0.values[ord as usize][1];
            }
        }
        None => {
            // start from the mean of the boundary data: exact for constant
            // controls and keeps the first iterate away from crushed bonds
            if sys.n_ctrl() > 0 {
                let mean: Vector2<f64> =
                    lambda.iter().sum::<Vector2<f64>>() / lambda.len() as f64;
                for fi in 0..sys.n_free() {
                    free[2 * fi] = mean[0];
                    free[2 * fi + 1] = mean[1];
                }
            }
        }
    }
    let lam_inf = lambda
        .iter()
        .map(|v| v[0].abs().max(v[1].abs()))
        .fold(0.0, f64::max);
    let tol = opts.tol * (1.0 + lam_inf);

    let mut u = sys.field_from_parts(lambda, &free);
    let mut hess = sys.hessian_pattern();
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
        sys.hessian_fill(&u, &mut hess);
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
            let trial: Vec<f64> = free
                .iter()
                .zip(&d)
                .map(|(f, dd)| f + t * dd)
                .collect();
            let u_trial = sys.field_from_parts(lambda, &trial);
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

/// The truncated reference problem on ℤ² ∩ [−N, N]²: boundary layer clamped
/// to zero (gauge pinned), defect at the origin.
pub fn solve_reference(
    model: Arc<SiteModel>,
    n: i64,
    opts: &NewtonOpts,
) -> Result<(LatticeField, NewtonReport)> {
    let lattice = Arc::new(LatticeIndex::from_box(-n, n, &model.range));
    let sys = AtomisticSystem::new(lattice, model);
    let lambda = vec![Vector2::zeros(); sys.n_ctrl()];
    let (mut u, report) = solve_restricted_atomistic(&sys, &lambda, None, opts)?;
    u.gauge = Gauge::Pinned(0);
    Ok((u, report))
}

/// Factorized linearization of the restricted problem at a base state:
/// applies δUᵃ[μ] (Dirichlet data μ, Hessian system on the free DOFs) and its
/// adjoint.
pub struct LinearizedAtomistic<'a> {
    pub sys: &'a AtomisticSystem,
    factor: Cholesky,
    fc: CscMatrix,
}

pub fn linearize_atomistic<'a>(
    sys: &'a AtomisticSystem,
    base: &LatticeField,
) -> Result<LinearizedAtomistic<'a>> {
    let hess = sys.hessian(base);
    let factor = hess.ff.cholesky()?;
    Ok(LinearizedAtomistic {
        sys,
        factor,
        fc: hess.fc,
    })
}

impl LinearizedAtomistic<'_> {
    /// Free-DOF values of δUᵃ[μ] for flattened control data μ.
    pub fn apply_vec(&self, mu: &[f64]) -> Vec<f64> {
        let mut rhs = self.fc.matvec(mu);
        for x in &mut rhs {
            *x = -*x;
        }
        self.factor.solve_in_place(&mut rhs);
        rhs
    }

    /// Full lattice field of δUᵃ[μ].
    pub fn apply(&self, mu: &[Vector2<f64>]) -> LatticeField {
        let flat: Vec<f64> = mu.iter().flat_map(|v| [v[0], v[1]]).collect();
        let free = self.apply_vec(&flat);
        self.sys.field_from_parts(mu, &free)
    }

    /// Adjoint of μ ↦ δUᵃ[μ] applied to a functional with components
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

/// Shell-max finite-difference magnitudes of a field: for each dyadic shell
/// |ξ| ∈ [2^j, 2^{j+1}), the max over interior sites of max_ρ |D_ρu(ξ)|.
/// Returns (2^j, max) pairs for nonempty shells.
pub fn decay_profile(
    u: &LatticeField,
    range: &InteractionRange,
) -> Result<Vec<(f64, f64)>> {
    let mut shells: Vec<f64> = Vec::new();
    let mut any = false;
    for i in 0..u.index.len() {
        if !u.index.is_interior(i) {
            continue;
        }
        any = true;
        let s = u.index.site(i);
        let r = ((s[0] * s[0] + s[1] * s[1]) as f64).sqrt();
        if r < 1.0 {
            continue;
        }
        let j = r.log2().floor() as usize;
        if shells.len() <= j {
            shells.resize(j + 1, 0.0);
        }
        let st = crate::geometry::stencil(u, range, s)?;
        let m = st.iter().map(|v| v.norm()).fold(0.0, f64::max);
        shells[j] = shells[j].max(m);
    }
    if !any {
        return Err(AtcError::EmptyShell);
    }
    Ok(shells
        .iter()
        .enumerate()
        .map(|(j, &m)| ((1u64 << j) as f64, m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domains, lattice_sets, DomainTag};
    use nalgebra::Matrix2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_system() -> AtomisticSystem {
        let geom = build_domains(2, 4, 3, InteractionRange::nn_nnn()).unwrap();
        let lattice = Arc::new(lattice_sets(&geom, DomainTag::Atomistic));
        let model = Arc::new(SiteModel::default_defect());
        AtomisticSystem::new(lattice, model)
    }

    fn random_field(sys: &AtomisticSystem, rng: &mut StdRng, scale: f64) -> LatticeField {
        let mut u = LatticeField::zeros(sys.lattice.clone());
        for v in &mut u.values {
            *v = Vector2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale;
        }
        u
    }

    #[test]
    fn zero_state_is_homogeneous_equilibrium() {
        let geom = build_domains(2, 4, 3, InteractionRange::nn_nnn()).unwrap();
        let lattice = Arc::new(lattice_sets(&geom, DomainTag::Atomistic));
        let model = Arc::new(SiteModel::homogeneous(
            InteractionRange::nn_nnn(),
            Default::default(),
        ));
        let sys = AtomisticSystem::new(lattice, model);
        let u = LatticeField::zeros(sys.lattice.clone());
        assert_eq!(sys.energy(&u), 0.0);
        let g = sys.gradient(&u);
        assert!(g.iter().all(|&x| x.abs() < 1e-14));

        // the impurity, by contrast, exerts a nonzero force at u = 0
        let sys = test_system();
        let u = LatticeField::zeros(sys.lattice.clone());
        assert_eq!(sys.energy(&u), 0.0);
        let g = sys.gradient(&u);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-3, "defect exerts no force: {norm:e}");
    }

    #[test]
    fn gradient_matches_fd() {
        let sys = test_system();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let u = random_field(&sys, &mut rng, 0.05);
            let g = sys.gradient(&u);
            let d: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let h = 1e-6;
            let mut up = u.clone();
            let mut um = u.clone();
            for (fi, &ord) in sys.free_sites.iter().enumerate() {
                let dv = Vector2::new(d[2 * fi], d[2 * fi + 1]);
                up.values[ord as usize] += dv * h;
                um.values[ord as usize] -= dv * h;
            }
            let fd = (sys.energy(&up) - sys.energy(&um)) / (2.0 * h);
            let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!(
                (fd - gd).abs() <= 1e-6 * gd.abs().max(1e-3),
                "fd {fd:e} vs analytic {gd:e}"
            );
        }
    }

    #[test]
    fn hessian_matches_gradient_fd() {
        let sys = test_system();
        let mut rng = StdRng::seed_from_u64(12);
        let u = random_field(&sys, &mut rng, 0.05);
        let hess = sys.hessian(&u);
        // random direction over all DOFs (free and control)
        let df: Vec<f64> = (0..2 * sys.n_free())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let dc: Vec<f64> = (0..2 * sys.n_ctrl())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let h = 1e-6;
        let mut up = u.clone();
        let mut um = u.clone();
        for (fi, &ord) in sys.free_sites.iter().enumerate() {
            let dv = Vector2::new(df[2 * fi], df[2 * fi + 1]);
            up.values[ord as usize] += dv * h;
            um.values[ord as usize] -= dv * h;
        }
        for (ci, &ord) in sys.ctrl_sites.iter().enumerate() {
            let dv = Vector2::new(dc[2 * ci], dc[2 * ci + 1]);
            up.values[ord as usize] += dv * h;
            um.values[ord as usize] -= dv * h;
        }
        let gp = sys.gradient(&up);
        let gm = sys.gradient(&um);
        let hv: Vec<f64> = hess
            .ff
            .matvec(&df)
            .iter()
            .zip(hess.fc.matvec(&dc))
            .map(|(a, b)| a + b)
            .collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..hv.len() {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            num += (fd - hv[i]) * (fd - hv[i]);
            den += fd * fd;
        }
        assert!(num.sqrt() <= 1e-5 * den.sqrt().max(1e-6));
    }

    #[test]
    fn hessian_row_sums_vanish() {
        let sys = test_system();
        let mut rng = StdRng::seed_from_u64(13);
        let u = random_field(&sys, &mut rng, 0.05);
        let hess = sys.hessian(&u);
        let ones_f = vec![1.0; 2 * sys.n_free()];
        let ones_c = vec![1.0; 2 * sys.n_ctrl()];
        let rf = hess.ff.matvec(&ones_f);
        let rc = hess.fc.matvec(&ones_c);
        for i in 0..rf.len() {
            assert!((rf[i] + rc[i]).abs() < 1e-10, "row {i}: {}", rf[i] + rc[i]);
        }
    }

    #[test]
    fn homogeneous_solve_is_zero() {
        let geom = build_domains(2, 4, 3, InteractionRange::nn_nnn()).unwrap();
        let lattice = Arc::new(lattice_sets(&geom, DomainTag::Atomistic));
        let model = Arc::new(SiteModel::homogeneous(
            InteractionRange::nn_nnn(),
            Default::default(),
        ));
        let sys = AtomisticSystem::new(lattice, model);
        let lambda = vec![Vector2::zeros(); sys.n_ctrl()];
        let (u, rep) = solve_restricted_atomistic(&sys, &lambda, None, &Default::default())
            .unwrap();
        assert!(rep.iterations <= 1);
        assert!(u.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn constant_controls_give_constant_field() {
        let geom = build_domains(2, 4, 3, InteractionRange::nn_nnn()).unwrap();
        let lattice = Arc::new(lattice_sets(&geom, DomainTag::Atomistic));
        let model = Arc::new(SiteModel::homogeneous(
            InteractionRange::nn_nnn(),
            Default::default(),
        ));
        let sys = AtomisticSystem::new(lattice, model);
        let c = Vector2::new(0.3, -0.7);
        let lambda = vec![c; sys.n_ctrl()];
        let (u, _) = solve_restricted_atomistic(&sys, &lambda, None, &Default::default())
            .unwrap();
        for v in &u.values {
            assert!((v - c).norm() < 1e-9);
        }
        // Dirichlet exactness, bit-for-bit
        for &ord in sys.ctrl_sites() {
            assert_eq!(u.values[ord as usize], c);
        }
    }

    #[test]
    fn translation_invariance_of_solutions() {
        let sys = test_system();
        let c = Vector2::new(0.3, -0.7);
        let zero = vec![Vector2::zeros(); sys.n_ctrl()];
        let shifted = vec![c; sys.n_ctrl()];
        let (u0, _) =
            solve_restricted_atomistic(&sys, &zero, None, &Default::default()).unwrap();
        let (uc, _) =
            solve_restricted_atomistic(&sys, &shifted, None, &Default::default()).unwrap();
        for (a, b) in u0.values.iter().zip(&uc.values) {
            assert!((a + c - b).norm() < 1e-8);
        }
    }

    #[test]
    fn defect_solve_and_reference_consistency() {
        // Solve the reference problem on a box, then feed its trace on the
        // boundary layer of a smaller lattice back in: the restricted solve
        // must reproduce the reference restricted to that lattice.
        let model = Arc::new(SiteModel::default_defect());
        let (uref, rep) = solve_reference(model.clone(), 16, &Default::default()).unwrap();
        assert!(rep.residual <= 1e-10 * 2.0);
        assert!(uref.values.iter().any(|v| v.norm() > 1e-6), "defect field is trivial");

        let geom = build_domains(2, 4, 3, InteractionRange::nn_nnn()).unwrap();
        let lattice = Arc::new(lattice_sets(&geom, DomainTag::Atomistic));
        let sys = AtomisticSystem::new(lattice, model);
        let lambda: Vec<Vector2<f64>> = sys
            .ctrl_sites()
            .iter()
            .map(|&ord| uref.get(sys.lattice.site(ord as usize)).unwrap())
            .collect();
        let (u, _) = solve_restricted_atomistic(&sys, &lambda, None, &Default::default())
            .unwrap();
        let mut max_diff = 0.0f64;
        for (i, v) in u.values.iter().enumerate() {
            let r = uref.get(sys.lattice.site(i)).unwrap();
            max_diff = max_diff.max((v - r).norm());
        }
        assert!(max_diff <= 1e-9, "max diff {max_diff:e}");
    }

    #[test]
    fn linearized_solve_properties() {
        let sys = test_system();
        let lambda = vec![Vector2::zeros(); sys.n_ctrl()];
        let (base, _) = solve_restricted_atomistic(&sys, &lambda, None, &Default::default())
            .unwrap();
        let lin = linearize_atomistic(&sys, &base).unwrap();

        // μ = 0 → 0
        let zero = lin.apply(&vec![Vector2::zeros(); sys.n_ctrl()]);
        assert!(zero.values.iter().all(|v| v.norm() < 1e-14));

        // μ ≡ c → δU ≡ c
        let c = Vector2::new(0.4, 0.1);
        let constant = lin.apply(&vec![c; sys.n_ctrl()]);
        for v in &constant.values {
            assert!((v - c).norm() < 1e-9);
        }

        // linearity
        let mut rng = StdRng::seed_from_u64(14);
        let mu: Vec<Vector2<f64>> = (0..sys.n_ctrl())
            .map(|_| Vector2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let nu: Vec<Vector2<f64>> = (0..sys.n_ctrl())
            .map(|_| Vector2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let combo: Vec<Vector2<f64>> = mu
            .iter()
            .zip(&nu)
            .map(|(a, b)| 2.0 * a - 0.5 * b)
            .collect();
        let da = lin.apply(&mu);
        let db = lin.apply(&nu);
        let dc = lin.apply(&combo);
        let mut rel_num = 0.0f64;
        let mut rel_den = 0.0f64;
        for i in 0..dc.values.len() {
            let expect = 2.0 * da.values[i] - 0.5 * db.values[i];
            rel_num += (dc.values[i] - expect).norm_squared();
            rel_den += expect.norm_squared();
        }
        assert!(rel_num.sqrt() <= 1e-10 * rel_den.sqrt());

        // FD against the nonlinear solve
        let t = 1e-5;
        let lam_p: Vec<Vector2<f64>> = lambda.iter().zip(&mu).map(|(l, m)| l + t * m).collect();
        let (up, _) = solve_restricted_atomistic(&sys, &lam_p, Some(&base), &Default::default())
            .unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..up.values.len() {
            let fd = (up.values[i] - base.values[i]) / t;
            num += (fd - da.values[i]).norm_squared();
            den += da.values[i].norm_squared();
        }
        assert!(num.sqrt() <= 1e-4 * den.sqrt(), "{:e}", num.sqrt() / den.sqrt());
    }

    #[test]
    fn adjoint_is_transpose() {
        let sys = test_system();
        let lambda = vec![Vector2::zeros(); sys.n_ctrl()];
        let (base, _) = solve_restricted_atomistic(&sys, &lambda, None, &Default::default())
            .unwrap();
        let lin = linearize_atomistic(&sys, &base).unwrap();
        let mut rng = StdRng::seed_from_u64(15);
        let mu: Vec<f64> = (0..2 * sys.n_ctrl()).map(|_| rng.random::<f64>() - 0.5).collect();
        let gf: Vec<f64> = (0..2 * sys.n_free()).map(|_| rng.random::<f64>() - 0.5).collect();
        let gc: Vec<f64> = (0..2 * sys.n_ctrl()).map(|_| rng.random::<f64>() - 0.5).collect();
        // ⟨(g_free, g_ctrl), (free(μ), μ)⟩ = ⟨adjoint(g), μ⟩
        let free = lin.apply_vec(&mu);
        let lhs: f64 = gf.iter().zip(&free).map(|(a, b)| a * b).sum::<f64>()
            + gc.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>();
        let adj = lin.adjoint(&gf, &gc);
        let rhs: f64 = adj.iter().zip(&mu).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn decay_profile_affine_and_zero() {
        let range = InteractionRange::nn_nnn();
        let idx = Arc::new(LatticeIndex::from_box(-20, 20, &range));
        let g = Matrix2::new(0.02, 0.01, -0.01, 0.03);
        let u = LatticeField::affine(idx.clone(), &g);
        let prof = decay_profile(&u, &range).unwrap();
        assert!(prof.len() >= 4);
        // constant level across shells → slope 0
        let levels: Vec<f64> = prof.iter().map(|&(_, m)| m).collect();
        for w in levels.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12 * w[0].abs());
        }
        let z = LatticeField::zeros(idx);
        let prof = decay_profile(&z, &range).unwrap();
        assert!(prof.iter().all(|&(_, m)| m == 0.0));
    }
}
