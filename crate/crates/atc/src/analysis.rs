//! Numerical measurement of the coupling's stability constants.
//!
//! A discrete-harmonic subspace is spanned by the overlap-restricted
//! gradients of linearized subproblem solutions δU[e_i], one per unit
//! control DOF.  The largest principal-angle cosine c between the atomistic
//! and continuum subspaces (in the L²(Ω_o) gradient inner product) is the
//! norm-equivalence constant: c < 1 certifies that the mismatch seminorm
//! controls both subproblem energies.  The overlap-control constant is the
//! largest ratio ‖∇w‖ over the full subdomain to ‖∇w‖ over the overlap,
//! again over the harmonic subspace.
//!
//! All Gram computations are dense; control DOF counts are O(10²–10³) at
//! desk scale.  Rank deficiency (the projected-out joint constants, or
//! synthetic degenerate inputs) is handled by restricting to the numerical
//! range space, dropping eigenvalues below 1e-10 of the largest.

use nalgebra::{DMatrix, Vector2};

use crate::atomistic::linearize_atomistic;
use crate::continuum::{linearize_continuum, tri_geometry, unit_cell_triangles, FEField};
use crate::coupling::AtcProblem;
use crate::error::{AtcError, Result};
use crate::geometry::LatticeField;

/// Which subproblem a harmonic basis was generated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Atomistic,
    Continuum,
}

/// Overlap-gradient basis of a discrete-harmonic subspace: one column per
/// control DOF, with the last boundary entity's d controls dropped (the
/// joint-constant directions make them redundant in gradient space).
pub struct HarmonicBasis {
    pub side: Side,
    /// Flattened per-overlap-triangle gradients, √|T|-weighted (rows) per
    /// control direction (columns).
    pub overlap_cols: DMatrix<f64>,
    /// overlap_colsᵀ · overlap_cols; symmetric PSD.
    pub gram_overlap: DMatrix<f64>,
    /// Per-column field values on the carrier (lattice sites or mesh nodes).
    fields: Vec<Vec<Vector2<f64>>>,
}

impl HarmonicBasis {
    pub fn n_cols(&self) -> usize {
        self.overlap_cols.ncols()
    }
}

/// Harmonic basis of the atomistic side, linearized at `base`.
pub fn atomistic_harmonic_basis(
    problem: &AtcProblem,
    base: &LatticeField,
) -> Result<HarmonicBasis> {
    let lin = linearize_atomistic(&problem.asys, base)?;
    let n_ctrl = problem.asys.n_ctrl();
    let nc = 2 * n_ctrl - 2;
    let rows = 4 * problem.overlap.n_triangles();
    let mut overlap_cols = DMatrix::zeros(rows, nc);
    let mut fields = Vec::with_capacity(nc);
    let mut mu = vec![Vector2::zeros(); n_ctrl];
    for k in 0..nc {
        mu[k / 2][k % 2] = 1.0;
        let f = lin.apply(&mu);
        mu[k / 2][k % 2] = 0.0;
        let col = problem.overlap.grad_vec_lattice(&f);
        overlap_cols.column_mut(k).copy_from_slice(&col);
        fields.push(f.values);
    }
    let gram_overlap = overlap_cols.tr_mul(&overlap_cols);
    Ok(HarmonicBasis {
        side: Side::Atomistic,
        overlap_cols,
        gram_overlap,
        fields,
    })
}

/// Harmonic basis of the continuum side, linearized at `base`.
pub fn continuum_harmonic_basis(problem: &AtcProblem, base: &FEField) -> Result<HarmonicBasis> {
    let lin = linearize_continuum(&problem.csys, base)?;
    let n_ctrl = problem.csys.mesh.core_nodes().len();
    let nc = 2 * n_ctrl - 2;
    let rows = 4 * problem.overlap.n_triangles();
    let mut overlap_cols = DMatrix::zeros(rows, nc);
    let mut fields = Vec::with_capacity(nc);
    let mut mu = vec![Vector2::zeros(); n_ctrl];
    for k in 0..nc {
        mu[k / 2][k % 2] = 1.0;
        let f = lin.apply(&mu);
        mu[k / 2][k % 2] = 0.0;
        let col = problem.overlap.grad_vec_fe(&f);
        overlap_cols.column_mut(k).copy_from_slice(&col);
        fields.push(f.values);
    }
    let gram_overlap = overlap_cols.tr_mul(&overlap_cols);
    Ok(HarmonicBasis {
        side: Side::Continuum,
        overlap_cols,
        gram_overlap,
        fields,
    })
}

/// Gram of the basis in the L² gradient inner product over the full
/// subdomain: Ω_a (all unit triangles of the atomistic box) for an
/// atomistic basis, Ω_c (all mesh elements) for a continuum basis.
pub fn full_domain_gram(problem: &AtcProblem, basis: &HarmonicBasis) -> Result<DMatrix<f64>> {
    let nc = basis.n_cols();
    let mut gram = DMatrix::zeros(nc, nc);
    // stream row blocks: per triangle, 4 gradient components × nc columns
    let mut block = DMatrix::zeros(4 * 256, nc);
    let mut filled = 0usize;
    let flush = |block: &mut DMatrix<f64>, filled: &mut usize, gram: &mut DMatrix<f64>| {
        if *filled > 0 {
            let view = block.rows(0, 4 * *filled);
            *gram += view.tr_mul(&view);
            *filled = 0;
        }
    };
    match basis.side {
        Side::Atomistic => {
            let lattice = &problem.asys.lattice;
            let r_a = problem.geom.r_a;
            let w = std::f64::consts::FRAC_1_SQRT_2;
            for y in -r_a..r_a {
                for x in -r_a..r_a {
                    for tri in unit_cell_triangles(x, y) {
                        let ords: Vec<usize> = tri
                            .iter()
                            .map(|&s| {
                                lattice.ordinal(s).ok_or_else(|| {
                                    AtcError::Coverage(format!("lattice misses {s:?}"))
                                })
                            })
                            .collect::<Result<_>>()?;
                        let (_, grads) = tri_geometry(&tri);
                        for (c, f) in basis.fields.iter().enumerate() {
                            let mut m = [0.0f64; 4];
                            for i in 0..3 {
                                let v = f[ords[i]];
                                m[0] += v[0] * grads[i][0];
                                m[1] += v[0] * grads[i][1];
                                m[2] += v[1] * grads[i][0];
                                m[3] += v[1] * grads[i][1];
                            }
                            for (r, mm) in m.iter().enumerate() {
                                block[(4 * filled + r, c)] = mm * w;
                            }
                        }
                        filled += 1;
                        if 4 * filled == block.nrows() {
                            flush(&mut block, &mut filled, &mut gram);
                        }
                    }
                }
            }
        }
        Side::Continuum => {
            let mesh = &problem.csys.mesh;
            for t in 0..mesh.n_triangles() {
                let p = mesh.tri_sites(t);
                let (area, grads) = tri_geometry(&p);
                let w = area.sqrt();
                let tri = mesh.triangles[t];
                for (c, f) in basis.fields.iter().enumerate() {
                    let mut m = [0.0f64; 4];
                    for i in 0..3 {
                        let v = f[tri[i] as usize];
                        m[0] += v[0] * grads[i][0];
                        m[1] += v[0] * grads[i][1];
                        m[2] += v[1] * grads[i][0];
                        m[3] += v[1] * grads[i][1];
                    }
                    for (r, mm) in m.iter().enumerate() {
                        block[(4 * filled + r, c)] = mm * w;
                    }
                }
                filled += 1;
                if 4 * filled == block.nrows() {
                    flush(&mut block, &mut filled, &mut gram);
                }
            }
        }
    }
    flush(&mut block, &mut filled, &mut gram);
    Ok(gram)
}

/// Whitening map of a symmetric PSD Gram restricted to its numerical range
/// space (eigenvalues ≥ 1e-10 of the largest): columns u_i/√λ_i.
fn whiten(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = nalgebra::SymmetricEigen::try_new(gram.clone(), 1e-13, 100_000)
        .ok_or_else(|| AtcError::EigenFailure("symmetric eigensolve did not converge".into()))?;
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(AtcError::RankZero);
    }
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * max) {
        return Err(AtcError::EigenFailure(format!(
            "Gram not PSD: min eigenvalue {:e}",
            eig.eigenvalues.min()
        )));
    }
    let tol = 1e-10 * max;
    let kept: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    if kept.is_empty() {
        return Err(AtcError::RankZero);
    }
    let mut w = DMatrix::zeros(gram.nrows(), kept.len());
    for (j, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt().recip();
        w.column_mut(j)
            .copy_from(&(eig.eigenvectors.column(i) * s));
    }
    Ok(w)
}

/// Largest principal-angle cosine between two subspaces, given their self-
/// and cross-Grams in a shared inner product.
pub fn principal_cosine(
    gaa: &DMatrix<f64>,
    gab: &DMatrix<f64>,
    gbb: &DMatrix<f64>,
) -> Result<f64> {
    let wa = whiten(gaa)?;
    let wb = whiten(gbb)?;
    let m = wa.tr_mul(&(gab * &wb));
    let svd = nalgebra::SVD::try_new(m, false, false, 1e-13, 100_000)
        .ok_or_else(|| AtcError::EigenFailure("SVD did not converge".into()))?;
    let c = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    Ok(c.min(1.0))
}

/// Sup-cosine between the atomistic and continuum harmonic subspaces on the
/// shared overlap triangulation.
pub fn sup_cosine(a: &HarmonicBasis, b: &HarmonicBasis) -> Result<f64> {
    if a.overlap_cols.nrows() != b.overlap_cols.nrows() {
        return Err(AtcError::Constraint(
            "harmonic bases live on different overlap triangulations".into(),
        ));
    }
    let gab = a.overlap_cols.tr_mul(&b.overlap_cols);
    principal_cosine(&a.gram_overlap, &gab, &b.gram_overlap)
}

/// Largest ratio ‖∇w‖_{full} / ‖∇w‖_{Ω_o} over the (numerical range space
/// of the) subspace: √λ_max of the generalized pair (full, overlap).
pub fn overlap_control_constant(
    gram_full: &DMatrix<f64>,
    gram_overlap: &DMatrix<f64>,
) -> Result<f64> {
    let w = whiten(gram_overlap)?;
    let m = w.tr_mul(&(gram_full * &w));
    let m = (&m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(m, 1e-13, 100_000)
        .ok_or_else(|| AtcError::EigenFailure("symmetric eigensolve did not converge".into()))?;
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    Ok(max.max(0.0).sqrt())
}
