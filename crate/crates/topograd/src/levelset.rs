//! Level-set representation of designs and the L²(D) geometry of the
//! optimization.
//!
//! A design `Ω ⊂ D` is the set where the P1 level-set function `ψ` is
//! negative. Classification computes, per triangle, the exact area fraction
//! of the negative region of the linear interpolant (a polygon clip, not a
//! sign vote), which makes material volumes vary continuously with ψ.
//!
//! All inner products, norms, angles, and projections used by the
//! optimization algorithms are L²(D) quantities realized through the
//! consistent P1 mass matrix, bundled here as [`L2Space`].

use crate::fem::{p1_mass_matrix, NodalField};
use crate::mesh::space::SpaceKind;
use crate::mesh::{Mesh, Rect};
use crate::sparse::SparseMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LevelSetError {
    #[error("expected a P1 scalar field, got {0:?}")]
    WrongKind(SpaceKind),
    #[error("field has {got} values but the mesh has {want} nodes")]
    LengthMismatch { got: usize, want: usize },
    #[error("field has zero L² norm")]
    ZeroNorm,
    #[error("operation requires the hold-all domain [{x0}, {x1}] x [{y0}, {y1}]")]
    DomainMismatch { x0: f64, x1: f64, y0: f64, y1: f64 },
}

/// Exact area fraction of `{interpolant < 0}` within a triangle, from its
/// three nodal values. Nodal zeros lie on the interface: they belong to the
/// closure of Ω but contribute no area, so a triangle with values `(0, 0, 1)`
/// or `(0, 0, 0)` has fraction 0, while `(0, 0, -1)` has fraction 1.
pub fn triangle_fraction(values: [f64; 3]) -> f64 {
    if !values.iter().any(|&v| v < 0.0) {
        return 0.0;
    }
    if values.iter().all(|&v| v <= 0.0) {
        return 1.0;
    }
    // Mixed signs: clip the reference triangle (0,0), (1,0), (0,1) against
    // the negative region of the (barycentric-linear) interpolant. Fractions
    // are affine-invariant, so the reference triangle stands in for any.
    let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let mut poly: Vec<[f64; 2]> = Vec::with_capacity(5);
    for i in 0..3 {
        let (a, b) = (i, (i + 1) % 3);
        let (va, vb) = (values[a], values[b]);
        if va <= 0.0 {
            poly.push(corners[a]);
        }
        if (va < 0.0 && vb > 0.0) || (va > 0.0 && vb < 0.0) {
            let t = va / (va - vb);
            poly.push([
                corners[a][0] + t * (corners[b][0] - corners[a][0]),
                corners[a][1] + t * (corners[b][1] - corners[a][1]),
            ]);
        }
    }
    let mut twice_area = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        twice_area += p[0] * q[1] - p[1] * q[0];
    }
    (twice_area.abs()).clamp(0.0, 1.0)
}

fn check_p1(mesh: &Mesh, field: &NodalField) -> Result<(), LevelSetError> {
    if field.kind != SpaceKind::P1Scalar {
        return Err(LevelSetError::WrongKind(field.kind));
    }
    if field.len() != mesh.node_count() {
        return Err(LevelSetError::LengthMismatch { got: field.len(), want: mesh.node_count() });
    }
    Ok(())
}

/// Per-triangle material fractions of the design `{ψ < 0}`.
pub fn classify(mesh: &Mesh, psi: &NodalField) -> Result<Vec<f64>, LevelSetError> {
    check_p1(mesh, psi)?;
    Ok((0..mesh.triangle_count())
        .map(|t| {
            let [a, b, c] = mesh.triangles[t];
            triangle_fraction([psi.values[a], psi.values[b], psi.values[c]])
        })
        .collect())
}

/// Material volume `|Ω|` for given fractions.
pub fn volume(mesh: &Mesh, fractions: &[f64]) -> f64 {
    fractions.iter().enumerate().map(|(t, f)| f * mesh.tri_area(t)).sum()
}

/// A level-set function together with its cached classification.
#[derive(Debug, Clone)]
pub struct LevelSetState {
    pub psi: NodalField,
    pub fractions: Vec<f64>,
    pub volume: f64,
}

impl LevelSetState {
    pub fn new(mesh: &Mesh, psi: NodalField) -> Result<LevelSetState, LevelSetError> {
        let fractions = classify(mesh, &psi)?;
        let volume = volume(mesh, &fractions);
        Ok(LevelSetState { psi, fractions, volume })
    }
}

/// The L²(D) inner-product space of P1 scalar fields on a mesh, backed by
/// the consistent mass matrix.
pub struct L2Space {
    node_count: usize,
    mass: SparseMatrix,
}

impl L2Space {
    pub fn new(mesh: &Mesh) -> L2Space {
        L2Space { node_count: mesh.node_count(), mass: p1_mass_matrix(mesh) }
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    fn check(&self, field: &NodalField) -> Result<(), LevelSetError> {
        if field.kind != SpaceKind::P1Scalar {
            return Err(LevelSetError::WrongKind(field.kind));
        }
        if field.len() != self.node_count {
            return Err(LevelSetError::LengthMismatch { got: field.len(), want: self.node_count });
        }
        Ok(())
    }

    pub(crate) fn inner_raw(&self, a: &[f64], b: &[f64]) -> f64 {
        let mb = self.mass.matvec(b).expect("length checked by caller");
        a.iter().zip(mb).map(|(x, y)| x * y).sum()
    }

    pub(crate) fn norm_raw(&self, a: &[f64]) -> f64 {
        self.inner_raw(a, a).max(0.0).sqrt()
    }

    /// `(a, b)_{L²(D)} = aᵀ M b`.
    pub fn inner(&self, a: &NodalField, b: &NodalField) -> Result<f64, LevelSetError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.inner_raw(&a.values, &b.values))
    }

    pub fn norm(&self, a: &NodalField) -> Result<f64, LevelSetError> {
        self.check(a)?;
        Ok(self.norm_raw(&a.values))
    }

    /// `P_{ψ⊥} a = a − ((a, ψ)/‖ψ‖²) ψ`, the component of `a` orthogonal
    /// to `ψ` in L²(D).
    pub fn project(&self, a: &NodalField, psi: &NodalField) -> Result<NodalField, LevelSetError> {
        self.check(a)?;
        self.check(psi)?;
        let psi_sq = self.inner_raw(&psi.values, &psi.values);
        if psi_sq <= 0.0 {
            return Err(LevelSetError::ZeroNorm);
        }
        let factor = self.inner_raw(&a.values, &psi.values) / psi_sq;
        let values = a
            .values
            .iter()
            .zip(&psi.values)
            .map(|(av, pv)| av - factor * pv)
            .collect();
        Ok(NodalField::new(SpaceKind::P1Scalar, values))
    }

    /// Angle between two fields in L²(D), in radians within `[0, π]`.
    ///
    /// Mathematically this is the arccos of the normalized inner product, but
    /// it is evaluated through the half-angle chords `‖ψ‖d‖ ∓ d‖ψ‖‖ =
    /// 2‖ψ‖‖d‖·{sin, cos}(θ/2)` and `atan2`. The arccos form cannot separate
    /// near-(anti)parallel pairs from exact ones — every cosine within
    /// roundoff of ±1 collapses to exactly 0 or π — while the chord form
    /// resolves both ends down to machine precision.
    pub fn angle(&self, psi: &NodalField, d: &NodalField) -> Result<f64, LevelSetError> {
        self.check(psi)?;
        self.check(d)?;
        let np = self.norm_raw(&psi.values);
        let nd = self.norm_raw(&d.values);
        if np == 0.0 || nd == 0.0 {
            return Err(LevelSetError::ZeroNorm);
        }
        let diff: Vec<f64> = psi
            .values
            .iter()
            .zip(&d.values)
            .map(|(p, q)| p * nd - q * np)
            .collect();
        let sum: Vec<f64> = psi
            .values
            .iter()
            .zip(&d.values)
            .map(|(p, q)| p * nd + q * np)
            .collect();
        Ok(2.0 * self.norm_raw(&diff).atan2(self.norm_raw(&sum)))
    }

    /// Rescales to unit L² norm. Signs (and hence the design) are unchanged.
    pub fn normalize(&self, psi: &NodalField) -> Result<NodalField, LevelSetError> {
        self.check(psi)?;
        let n = self.norm_raw(&psi.values);
        if n == 0.0 {
            return Err(LevelSetError::ZeroNorm);
        }
        let values = psi.values.iter().map(|v| v / n).collect();
        Ok(NodalField::new(SpaceKind::P1Scalar, values))
    }
}

const CLOVER_RECT: Rect = Rect { x0: -2.0, y0: -2.0, x1: 2.0, y1: 2.0 };

/// The fixed reference design on the hold-all `(−2, 2)²`: the domain minus
/// five disk inclusions (radius 0.5 at `(±0.7, 0)` and `(0, ±0.7)`, radius
/// 0.2 at the origin). Returns `ψ_des(x) = −minᵢ (|x − cᵢ| − rᵢ)`, negative
/// on the material region, interpolated at mesh nodes.
pub fn reference_clover(mesh: &Mesh) -> Result<NodalField, LevelSetError> {
    let r = mesh.rect;
    let want = CLOVER_RECT;
    let tol = 1e-9;
    if (r.x0 - want.x0).abs() > tol
        || (r.y0 - want.y0).abs() > tol
        || (r.x1 - want.x1).abs() > tol
        || (r.y1 - want.y1).abs() > tol
    {
        return Err(LevelSetError::DomainMismatch { x0: want.x0, x1: want.x1, y0: want.y0, y1: want.y1 });
    }
    let disks: [([f64; 2], f64); 5] = [
        ([0.7, 0.0], 0.5),
        ([-0.7, 0.0], 0.5),
        ([0.0, 0.7], 0.5),
        ([0.0, -0.7], 0.5),
        ([0.0, 0.0], 0.2),
    ];
    let values = mesh
        .nodes
        .iter()
        .map(|p| {
            let min_dist = disks
                .iter()
                .map(|(c, radius)| (p[0] - c[0]).hypot(p[1] - c[1]) - radius)
                .fold(f64::INFINITY, f64::min);
            -min_dist
        })
        .collect();
    Ok(NodalField::new(SpaceKind::P1Scalar, values))
}
