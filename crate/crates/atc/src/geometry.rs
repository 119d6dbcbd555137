//! Domains, lattice index sets, and finite-difference stencils.
//!
//! The computational domain is a nest of axis-aligned squares centered at the
//! origin: the defect core `Ω_core = [-r_core, r_core]²`, the atomistic region
//! `Ω_a = ψ_a · Ω_core`, and the full domain `Ω = [-r_c, r_c]²` with
//! `r_c = r_core^(κ+1)`.  The continuum region is `Ω_c = Ω ∖ Ω_core` and the
//! overlap is `Ω_o = Ω_a ∖ Ω_core`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Vector2;

use crate::error::{AtcError, Result};

/// A lattice site of ℤ².
pub type Site = [i64; 2];

/// Finite interaction range ℛ: a point-symmetric set of nonzero offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRange {
    offsets: Vec<Site>,
    r_cut: f64,
}

impl InteractionRange {
    pub fn new(mut offsets: Vec<Site>) -> Result<Self> {
        offsets.sort_by_key(|s| (s[1], s[0]));
        offsets.dedup();
        if offsets.is_empty() {
            return Err(AtcError::Constraint("interaction range is empty".into()));
        }
        if offsets.contains(&[0, 0]) {
            return Err(AtcError::Constraint("0 ∈ offsets violated".into()));
        }
        for &rho in &offsets {
            if !offsets.contains(&[-rho[0], -rho[1]]) {
                return Err(AtcError::Constraint(format!(
                    "point symmetry violated: -{rho:?} missing"
                )));
            }
        }
        let r_cut = offsets
            .iter()
            .map(|r| ((r[0] * r[0] + r[1] * r[1]) as f64).sqrt())
            .fold(0.0, f64::max);
        Ok(Self { offsets, r_cut })
    }

    /// Nearest neighbors only: {±e₁, ±e₂}.
    pub fn nn() -> Self {
        Self::new(vec![[1, 0], [-1, 0], [0, 1], [0, -1]]).unwrap()
    }

    /// Nearest plus next-nearest neighbors on ℤ² (8 offsets, r_cut = √2).
    pub fn nn_nnn() -> Self {
        Self::new(vec![
            [1, 0],
            [-1, 0],
            [0, 1],
            [0, -1],
            [1, 1],
            [-1, -1],
            [1, -1],
            [-1, 1],
        ])
        .unwrap()
    }

    pub fn offsets(&self) -> &[Site] {
        &self.offsets
    }

    pub fn r_cut(&self) -> f64 {
        self.r_cut
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Which nested region a lattice set is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    /// Ω_core = [-r_core, r_core]²
    Core,
    /// Ω_a = [-r_a, r_a]²
    Atomistic,
    /// Ω_c = Ω ∖ Ω_core
    Continuum,
    /// Ω_o = Ω_a ∖ Ω_core
    Overlap,
    /// Ω = [-r_c, r_c]²
    Full,
}

/// The nested squares Ω_core ⊂ Ω_a ⊂ Ω and derived annuli.
#[derive(Clone, Debug)]
pub struct DomainGeometry {
    pub d: usize,
    pub r_core: i64,
    pub psi_a: i64,
    pub kappa: i64,
    /// Half-width of Ω_a: r_a = ψ_a · r_core.
    pub r_a: i64,
    /// Half-width of Ω: r_c = r_core^(κ+1).
    pub r_c: i64,
    /// Outer half-width of the extended overlap Ω_o,ex = (2ψ_a Ω_core) ∖ Ω_core.
    pub r_oex: i64,
    pub range: InteractionRange,
}

/// Validate the scaling preconditions and derive all radii.
pub fn build_domains(
    r_core: i64,
    psi_a: i64,
    kappa: i64,
    range: InteractionRange,
) -> Result<DomainGeometry> {
    if r_core < 1 {
        return Err(AtcError::Constraint("R_core ≥ 1 violated".into()));
    }
    if psi_a < 4 {
        return Err(AtcError::Constraint("ψ_a ≥ 4 violated".into()));
    }
    if kappa < 1 {
        return Err(AtcError::Constraint("κ ≥ 1 violated".into()));
    }
    if (((psi_a - 1) * r_core) as f64) < 4.0 * range.r_cut() {
        return Err(AtcError::Constraint(
            "(ψ_a−1)r_core ≥ 4r_cut violated".into(),
        ));
    }
    let pow = |b: i64, e: i64| -> Result<i64> {
        b.checked_pow(e.try_into().map_err(|_| {
            AtcError::Constraint("κ out of range".into())
        })?)
        .filter(|v| *v <= 1 << 30)
        .ok_or_else(|| AtcError::Constraint("r_core^(κ+1) overflows".into()))
    };
    if pow(r_core, kappa)? <= psi_a {
        return Err(AtcError::Constraint("r_core^κ > ψ_a violated".into()));
    }
    let r_a = psi_a * r_core;
    let r_c = pow(r_core, kappa + 1)?;
    debug_assert!(r_c > r_a);
    Ok(DomainGeometry {
        d: 2,
        r_core,
        psi_a,
        kappa,
        r_a,
        r_c,
        r_oex: 2 * psi_a * r_core,
        range,
    })
}

impl DomainGeometry {
    /// Membership of a lattice site in the tagged region.  Annular regions
    /// exclude the closed inner square, so the overlap lattice is exactly
    /// 𝓛_a ∖ 𝓛_core.
    pub fn contains(&self, tag: DomainTag, site: Site) -> bool {
        let m = site[0].abs().max(site[1].abs());
        match tag {
            DomainTag::Core => m <= self.r_core,
            DomainTag::Atomistic => m <= self.r_a,
            DomainTag::Continuum => m > self.r_core && m <= self.r_c,
            DomainTag::Overlap => m > self.r_core && m <= self.r_a,
            DomainTag::Full => m <= self.r_c,
        }
    }
}

/// An ordered lattice set 𝓛 with its interior 𝓛°, double interior 𝓛°°, and
/// boundary layer ∂𝓛 = 𝓛 ∖ 𝓛°°.  Sites are ordered lexicographically,
/// y-major then x.
#[derive(Debug)]
pub struct LatticeIndex {
    sites: Vec<Site>,
    ord: HashMap<Site, u32>,
    interior: Vec<bool>,
    double_interior: Vec<bool>,
}

impl LatticeIndex {
    pub fn from_sites(mut sites: Vec<Site>, range: &InteractionRange) -> Self {
        sites.sort_by_key(|s| (s[1], s[0]));
        sites.dedup();
        let ord: HashMap<Site, u32> = sites
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i as u32))
            .collect();
        let member = |s: Site| ord.contains_key(&s);
        let interior: Vec<bool> = sites
            .iter()
            .map(|&s| {
                range
                    .offsets()
                    .iter()
                    .all(|&r| member([s[0] - r[0], s[1] - r[1]]))
            })
            .collect();
        let interior_member =
            |s: Site| ord.get(&s).is_some_and(|&i| interior[i as usize]);
        let double_interior: Vec<bool> = sites
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                interior[i]
                    && range
                        .offsets()
                        .iter()
                        .all(|&r| interior_member([s[0] - r[0], s[1] - r[1]]))
            })
            .collect();
        Self {
            sites,
            ord,
            interior,
            double_interior,
        }
    }

    /// All integer points of the box [lo, hi]².
    pub fn from_box(lo: i64, hi: i64, range: &InteractionRange) -> Self {
        let mut sites = Vec::with_capacity(((hi - lo + 1) * (hi - lo + 1)) as usize);
        for y in lo..=hi {
            for x in lo..=hi {
                sites.push([x, y]);
            }
        }
        Self::from_sites(sites, range)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, ord: usize) -> Site {
        self.sites[ord]
    }

    pub fn ordinal(&self, s: Site) -> Option<usize> {
        self.ord.get(&s).map(|&i| i as usize)
    }

    pub fn contains(&self, s: Site) -> bool {
        self.ord.contains_key(&s)
    }

    /// ξ ∈ 𝓛° (all stencil neighbors present).
    pub fn is_interior(&self, ord: usize) -> bool {
        self.interior[ord]
    }

    /// ξ ∈ 𝓛°° = (𝓛°)°.
    pub fn is_double_interior(&self, ord: usize) -> bool {
        self.double_interior[ord]
    }

    /// Ordinals of the boundary layer ∂𝓛 = 𝓛 ∖ 𝓛°°, in site order.
    pub fn boundary_ordinals(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.double_interior[i])
            .collect()
    }

    pub fn interior_ordinals(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.interior[i]).collect()
    }
}

/// 𝓛_t = ℤ² ∩ Ω_t with interiors computed relative to that set.
pub fn lattice_sets(geom: &DomainGeometry, tag: DomainTag) -> LatticeIndex {
    let hw = match tag {
        DomainTag::Core => geom.r_core,
        DomainTag::Atomistic | DomainTag::Overlap => geom.r_a,
        DomainTag::Continuum | DomainTag::Full => geom.r_c,
    };
    let mut sites = Vec::new();
    for y in -hw..=hw {
        for x in -hw..=hw {
            if geom.contains(tag, [x, y]) {
                sites.push([x, y]);
            }
        }
    }
    LatticeIndex::from_sites(sites, &geom.range)
}

/// Gauge representative convention for a displacement field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    Raw,
    MeanZero,
    Pinned(u32),
}

/// A displacement field on a lattice index set.
#[derive(Clone, Debug)]
pub struct LatticeField {
    pub index: Arc<LatticeIndex>,
    pub values: Vec<Vector2<f64>>,
    pub gauge: Gauge,
}

impl LatticeField {
    pub fn zeros(index: Arc<LatticeIndex>) -> Self {
        let n = index.len();
        Self {
            index,
            values: vec![Vector2::zeros(); n],
            gauge: Gauge::Raw,
        }
    }

    /// u(ξ) = Gξ.
    pub fn affine(index: Arc<LatticeIndex>, g: &nalgebra::Matrix2<f64>) -> Self {
        let values = index
            .sites()
            .iter()
            .map(|&s| g * Vector2::new(s[0] as f64, s[1] as f64))
            .collect();
        Self {
            index,
            values,
            gauge: Gauge::Raw,
        }
    }

    pub fn get(&self, s: Site) -> Option<Vector2<f64>> {
        self.index.ordinal(s).map(|i| self.values[i])
    }

    /// Shift all values so the arithmetic mean vanishes.
    pub fn fix_mean_zero(&mut self) {
        let n = self.values.len() as f64;
        let mean: Vector2<f64> = self.values.iter().sum::<Vector2<f64>>() / n;
        for v in &mut self.values {
            *v -= mean;
        }
        self.gauge = Gauge::MeanZero;
    }

    pub fn shift(&mut self, c: Vector2<f64>) {
        for v in &mut self.values {
            *v += c;
        }
        self.gauge = Gauge::Raw;
    }
}

/// The finite-difference stencil (D_ρ u(ξ))_ρ = (u(ξ+ρ) − u(ξ))_ρ, ordered as
/// `range.offsets()`.
pub fn stencil(
    u: &LatticeField,
    range: &InteractionRange,
    xi: Site,
) -> Result<Vec<Vector2<f64>>> {
    let u_xi = u.get(xi).ok_or(AtcError::OutOfRange {
        site: xi,
        neighbor: xi,
    })?;
    range
        .offsets()
        .iter()
        .map(|&rho| {
            let nb = [xi[0] + rho[0], xi[1] + rho[1]];
            u.get(nb)
                .map(|v| v - u_xi)
                .ok_or(AtcError::OutOfRange {
                    site: xi,
                    neighbor: nb,
                })
        })
        .collect()
}
