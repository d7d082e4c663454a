//! Finite-element assembly and nonlinear solution drivers.
//!
//! All element integrals use the triangle quadrature rules from [`crate::mesh`]:
//! closed forms (equivalent to order 2) for P1 stiffness/mass/load, and the
//! order-4 rule for the nonlinear reaction terms and the Taylor–Hood
//! Navier–Stokes forms. Dirichlet conditions are imposed by symmetric
//! elimination, which keeps symmetric matrices symmetric.

use crate::mesh::space::{p2_gradients, p2_values, FunctionSpace, SpaceKind};
use crate::mesh::{quadrature, Mesh};
use crate::sparse::{SparseError, SparseMatrix};
use thiserror::Error;

/// Errors from assembly and nonlinear solves.
#[derive(Debug, Error)]
pub enum FemError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("Newton did not converge in {iterations} iterations (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("Newton produced a non-finite iterate at iteration {0}")]
    NewtonNonFinite(usize),
    #[error("field has {got} values but the space requires {want}")]
    FieldLength { got: usize, want: usize },
}

/// A finite-element function given by its global dof values.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub kind: SpaceKind,
    pub values: Vec<f64>,
}

impl NodalField {
    pub fn new(kind: SpaceKind, values: Vec<f64>) -> NodalField {
        NodalField { kind, values }
    }

    /// A P1 scalar field constant over the mesh.
    pub fn p1_constant(mesh: &Mesh, value: f64) -> NodalField {
        NodalField::new(SpaceKind::P1Scalar, vec![value; mesh.node_count()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// P1 element stiffness `∫_T ∇λ_i · ∇λ_j`.
pub fn element_stiffness(mesh: &Mesh, t: usize) -> [[f64; 3]; 3] {
    let g = mesh.grad_lambda(t);
    let area = mesh.tri_area(t);
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let v = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

/// P1 consistent element mass `∫_T λ_i λ_j = |T|/12 · (1 + δ_ij)`.
pub fn element_mass(area: f64) -> [[f64; 3]; 3] {
    let m = area / 12.0;
    [[2.0 * m, m, m], [m, 2.0 * m, m], [m, m, 2.0 * m]]
}

/// Assembles the P1 system for `-div(d ∇u) + r u = f` with per-element
/// constant coefficients: matrix `Σ_T d_T K_T + r_T M_T`, right-hand side
/// `Σ_T f_T ∫_T λ_i` (all integrals exact for piecewise-constant data).
pub fn assemble_scalar_diffusion_reaction(
    mesh: &Mesh,
    diffusion: &[f64],
    reaction: &[f64],
    source: &[f64],
) -> Result<(SparseMatrix, Vec<f64>), FemError> {
    let nt = mesh.triangle_count();
    assert_eq!(diffusion.len(), nt, "one diffusion coefficient per triangle");
    assert_eq!(reaction.len(), nt, "one reaction coefficient per triangle");
    assert_eq!(source.len(), nt, "one source value per triangle");
    let n = mesh.node_count();
    let mut trips = Vec::with_capacity(9 * nt);
    let mut rhs = vec![0.0; n];
    for t in 0..nt {
        let tri = mesh.triangles[t];
        let area = mesh.tri_area(t);
        let k = element_stiffness(mesh, t);
        let m = element_mass(area);
        for i in 0..3 {
            for j in 0..3 {
                let v = diffusion[t] * k[i][j] + reaction[t] * m[i][j];
                if v != 0.0 {
                    trips.push((tri[i], tri[j], v));
                }
            }
            rhs[tri[i]] += source[t] * area / 3.0;
        }
    }
    Ok((SparseMatrix::from_triplets(n, n, &trips)?, rhs))
}

/// The consistent P1 mass matrix of the whole mesh.
pub fn p1_mass_matrix(mesh: &Mesh) -> SparseMatrix {
    let nt = mesh.triangle_count();
    let (mass, _) = assemble_scalar_diffusion_reaction(mesh, &vec![0.0; nt], &vec![1.0; nt], &vec![0.0; nt])
        .expect("constant coefficient arrays are well-formed");
    mass
}

/// Assembles the vector `b_i = Σ_T c_T ∫_T g(u_h) λ_i` for a P1 field `u`
/// with per-element weights `c`, using the order-4 quadrature rule.
pub fn assemble_p1_reaction_term(
    mesh: &Mesh,
    coeff: &[f64],
    u: &[f64],
    g: impl Fn(f64) -> f64,
) -> Vec<f64> {
    assert_eq!(coeff.len(), mesh.triangle_count());
    assert_eq!(u.len(), mesh.node_count());
    let quad = quadrature(4).expect("order 4 is supported");
    let mut b = vec![0.0; mesh.node_count()];
    for t in 0..mesh.triangle_count() {
        let tri = mesh.triangles[t];
        let area = mesh.tri_area(t);
        for q in quad {
            let uq: f64 = (0..3).map(|i| q.bary[i] * u[tri[i]]).sum();
            let w = coeff[t] * area * q.weight * g(uq);
            for i in 0..3 {
                b[tri[i]] += w * q.bary[i];
            }
        }
    }
    b
}

/// Assembles the matrix `A_ij = Σ_T c_T ∫_T dg(u_h) λ_i λ_j` (the Jacobian
/// of [`assemble_p1_reaction_term`]) with the same order-4 rule.
pub fn assemble_p1_reaction_jacobian(
    mesh: &Mesh,
    coeff: &[f64],
    u: &[f64],
    dg: impl Fn(f64) -> f64,
) -> Result<SparseMatrix, FemError> {
    assert_eq!(coeff.len(), mesh.triangle_count());
    assert_eq!(u.len(), mesh.node_count());
    let quad = quadrature(4).expect("order 4 is supported");
    let n = mesh.node_count();
    let mut trips = Vec::with_capacity(9 * mesh.triangle_count());
    for t in 0..mesh.triangle_count() {
        let tri = mesh.triangles[t];
        let area = mesh.tri_area(t);
        let mut local = [[0.0; 3]; 3];
        for q in quad {
            let uq: f64 = (0..3).map(|i| q.bary[i] * u[tri[i]]).sum();
            let w = coeff[t] * area * q.weight * dg(uq);
            for i in 0..3 {
                for j in 0..=i {
                    local[i][j] += w * q.bary[i] * q.bary[j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let v = if j <= i { local[i][j] } else { local[j][i] };
                if v != 0.0 {
                    trips.push((tri[i], tri[j], v));
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(n, n, &trips)?)
}

/// Imposes Dirichlet values by symmetric elimination: constrained rows and
/// columns are zeroed, the diagonal set to 1, the right-hand side updated so
/// that the solution of the new system satisfies the constraints exactly.
/// Symmetry of the matrix is preserved.
pub fn apply_dirichlet(
    a: &SparseMatrix,
    rhs: &[f64],
    bc: &[(usize, f64)],
) -> Result<(SparseMatrix, Vec<f64>), FemError> {
    let n = a.nrows();
    assert_eq!(rhs.len(), n);
    let mut constrained: Vec<Option<f64>> = vec![None; n];
    for &(dof, value) in bc {
        assert!(dof < n, "Dirichlet dof {dof} out of range");
        constrained[dof] = Some(value);
    }
    let mut new_rhs = rhs.to_vec();
    let mut trips = Vec::with_capacity(a.nnz() + bc.len());
    for (r, c, v) in a.entries() {
        match (constrained[r], constrained[c]) {
            (Some(_), _) => {}
            (None, Some(g)) => new_rhs[r] -= v * g,
            (None, None) => trips.push((r, c, v)),
        }
    }
    for (dof, value) in constrained.iter().enumerate() {
        if let Some(g) = value {
            trips.push((dof, dof, 1.0));
            new_rhs[dof] = *g;
        }
    }
    Ok((SparseMatrix::from_triplets(n, n, &trips)?, new_rhs))
}

/// Stopping rule and iteration cap for [`newton_solve`]: converged when
/// `‖R(x)‖₂ ≤ abs_tol + rel_tol · ‖R(x₀)‖₂`.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings { abs_tol: 1e-10, rel_tol: 1e-9, max_iter: 25 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton's method with full steps: `x ← x − J(x)⁻¹ R(x)`. The residual and
/// Jacobian callbacks must be consistent (the Jacobian is the exact
/// derivative of the residual), including any boundary-condition handling.
pub fn newton_solve(
    residual: impl FnMut(&[f64]) -> Result<Vec<f64>, FemError>,
    jacobian: impl FnMut(&[f64]) -> Result<SparseMatrix, FemError>,
    x0: Vec<f64>,
    settings: &NewtonSettings,
) -> Result<NewtonOutcome, FemError> {
    newton_solve_with(residual, jacobian, x0, settings, |jac, rhs| {
        crate::sparse::solve_sparse(jac, rhs)
    })
}

/// [`newton_solve`] with a caller-supplied linear solver for the Newton
/// systems `J δ = −R`. The solver must meet the [`crate::sparse::solve_sparse`]
/// residual contract against the passed Jacobian (e.g. a cached
/// factorization refined by defect correction).
pub fn newton_solve_with(
    mut residual: impl FnMut(&[f64]) -> Result<Vec<f64>, FemError>,
    mut jacobian: impl FnMut(&[f64]) -> Result<SparseMatrix, FemError>,
    x0: Vec<f64>,
    settings: &NewtonSettings,
    mut solver: impl FnMut(&SparseMatrix, &[f64]) -> Result<Vec<f64>, SparseError>,
) -> Result<NewtonOutcome, FemError> {
    let mut x = x0;
    let mut r = residual(&x)?;
    let r0_norm = norm2(&r);
    let threshold = settings.abs_tol + settings.rel_tol * r0_norm;
    let mut r_norm = r0_norm;
    for iter in 0..settings.max_iter {
        if r_norm <= threshold {
            return Ok(NewtonOutcome { solution: x, iterations: iter, residual_norm: r_norm });
        }
        let jac = jacobian(&x)?;
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = solver(&jac, &neg_r)?;
        for (xi, di) in x.iter_mut().zip(&delta) {
            *xi += di;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FemError::NewtonNonFinite(iter + 1));
        }
        r = residual(&x)?;
        r_norm = norm2(&r);
    }
    if r_norm <= threshold {
        let iters = settings.max_iter;
        return Ok(NewtonOutcome { solution: x, iterations: iters, residual_norm: r_norm });
    }
    Err(FemError::NewtonDiverged { iterations: settings.max_iter, residual: r_norm })
}

/// Lamé parameters of an isotropic material.
#[derive(Debug, Clone, Copy)]
pub struct Lame {
    pub mu: f64,
    pub lambda: f64,
}

impl Lame {
    /// Plane-stress parameters from Young's modulus and Poisson's ratio:
    /// `μ = E / (2(1+ν))` and the reduced `λ = 2μλ* / (λ* + 2μ)` with
    /// `λ* = Eν / ((1+ν)(1−2ν))` (equivalently `Eν / (1−ν²)`).
    pub fn plane_stress(young: f64, poisson: f64) -> Lame {
        let mu = young / (2.0 * (1.0 + poisson));
        let lambda_3d = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
        let lambda = 2.0 * mu * lambda_3d / (lambda_3d + 2.0 * mu);
        Lame { mu, lambda }
    }
}

/// Strain-displacement matrix of a P1 triangle: maps the six interleaved
/// nodal displacements to the Voigt strain `[e_xx, e_yy, γ_xy]`.
pub fn element_strain_matrix(mesh: &Mesh, t: usize) -> [[f64; 6]; 3] {
    let g = mesh.grad_lambda(t);
    let mut b = [[0.0; 6]; 3];
    for i in 0..3 {
        b[0][2 * i] = g[i][0];
        b[1][2 * i + 1] = g[i][1];
        b[2][2 * i] = g[i][1];
        b[2][2 * i + 1] = g[i][0];
    }
    b
}

/// Voigt stress `[σ_xx, σ_yy, σ_xy]` from a Voigt strain `[e_xx, e_yy, γ_xy]`
/// via Hooke's law `σ = 2μ e + λ tr(e) I`.
pub fn hooke_stress(strain: [f64; 3], lame: Lame) -> [f64; 3] {
    let tr = strain[0] + strain[1];
    [
        2.0 * lame.mu * strain[0] + lame.lambda * tr,
        2.0 * lame.mu * strain[1] + lame.lambda * tr,
        lame.mu * strain[2],
    ]
}

/// Assembles the plane-stress elasticity stiffness `Σ_T α_T ∫_T σ(u):e(v)`
/// on the interleaved P1 vector space. Loads (point forces) are applied by
/// the caller directly to the right-hand side.
pub fn assemble_elasticity(
    mesh: &Mesh,
    alpha: &[f64],
    lame: Lame,
) -> Result<SparseMatrix, FemError> {
    assert_eq!(alpha.len(), mesh.triangle_count());
    let n = 2 * mesh.node_count();
    let mut trips = Vec::with_capacity(36 * mesh.triangle_count());
    for t in 0..mesh.triangle_count() {
        let tri = mesh.triangles[t];
        let area = mesh.tri_area(t);
        let b = element_strain_matrix(mesh, t);
        // k = α |T| Bᵀ D B, with D the plane-stress Hooke matrix in Voigt
        // form ([[2μ+λ, λ, 0], [λ, 2μ+λ, 0], [0, 0, μ]]).
        let mut local = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..=i {
                let col_i = [b[0][i], b[1][i], b[2][i]];
                let col_j = [b[0][j], b[1][j], b[2][j]];
                let sig_j = hooke_stress(col_j, lame);
                let v = alpha[t] * area * (col_i[0] * sig_j[0] + col_i[1] * sig_j[1] + col_i[2] * sig_j[2]);
                local[i][j] = v;
                local[j][i] = v;
            }
        }
        let dofs = [
            2 * tri[0],
            2 * tri[0] + 1,
            2 * tri[1],
            2 * tri[1] + 1,
            2 * tri[2],
            2 * tri[2] + 1,
        ];
        for i in 0..6 {
            for j in 0..6 {
                if local[i][j] != 0.0 {
                    trips.push((dofs[i], dofs[j], local[i][j]));
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(n, n, &trips)?)
}

/// Residual and exact Jacobian of the stationary incompressible
/// Navier–Stokes system with Brinkman penalization on a Taylor–Hood space:
///
/// ```text
///   μ (∇u, ∇v) + ρ ((u·∇)u, v) + (α u, v) − (p, div v) = 0
///   (div u, q) + m ∫ q = 0,      ∫ p = 0
/// ```
///
/// where `m` is the trailing pressure-mean multiplier dof. Boundary
/// conditions are not applied here.
pub fn assemble_navier_stokes(
    mesh: &Mesh,
    space: &FunctionSpace,
    state: &[f64],
    alpha: &[f64],
    mu: f64,
    rho: f64,
) -> Result<(Vec<f64>, SparseMatrix), FemError> {
    assert_eq!(space.kind, SpaceKind::TaylorHood);
    assert_eq!(alpha.len(), mesh.triangle_count());
    if state.len() != space.dof_count {
        return Err(FemError::FieldLength { got: state.len(), want: space.dof_count });
    }
    let n = space.dof_count;
    let mult = n - 1;
    let m_val = state[mult];
    let quad = quadrature(4).expect("order 4 is supported");
    let mut residual = vec![0.0; n];
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(225 * mesh.triangle_count());

    for t in 0..mesh.triangle_count() {
        let dofs = space.elem_dofs(t);
        let (vel_dofs, p_dofs) = dofs.split_at(12);
        let area = mesh.tri_area(t);
        let gl = mesh.grad_lambda(t);
        let a_t = alpha[t];

        // Local accumulators: 12 velocity dofs + 3 pressure dofs.
        let mut r_loc = [0.0; 15];
        let mut j_loc = [[0.0; 15]; 15];

        let uvals: Vec<f64> = vel_dofs.iter().map(|&d| state[d]).collect();
        let pvals: [f64; 3] = [state[p_dofs[0]], state[p_dofs[1]], state[p_dofs[2]]];

        for q in quad {
            let phi = p2_values(q.bary);
            let gphi = p2_gradients(q.bary, gl);
            let w = area * q.weight;

            // Velocity value and gradient at the quadrature point.
            let mut u = [0.0; 2];
            let mut grad_u = [[0.0; 2]; 2]; // grad_u[c][d] = ∂_d u_c
            for s in 0..6 {
                for c in 0..2 {
                    let coef = uvals[2 * s + c];
                    u[c] += coef * phi[s];
                    grad_u[c][0] += coef * gphi[s][0];
                    grad_u[c][1] += coef * gphi[s][1];
                }
            }
            let p_q: f64 = (0..3).map(|k| q.bary[k] * pvals[k]).sum();
            let div_u = grad_u[0][0] + grad_u[1][1];

            // Momentum residual and blocks.
            for s in 0..6 {
                for c in 0..2 {
                    let row = 2 * s + c;
                    let conv = u[0] * grad_u[c][0] + u[1] * grad_u[c][1];
                    r_loc[row] += w
                        * (mu * (gphi[s][0] * grad_u[c][0] + gphi[s][1] * grad_u[c][1])
                            + rho * conv * phi[s]
                            + a_t * u[c] * phi[s]
                            - p_q * gphi[s][c]);
                    for s2 in 0..6 {
                        for c2 in 0..2 {
                            let col = 2 * s2 + c2;
                            let mut v = 0.0;
                            if c == c2 {
                                v += mu * (gphi[s][0] * gphi[s2][0] + gphi[s][1] * gphi[s2][1]);
                                v += rho * (u[0] * gphi[s2][0] + u[1] * gphi[s2][1]) * phi[s];
                                v += a_t * phi[s] * phi[s2];
                            }
                            v += rho * phi[s2] * grad_u[c][c2] * phi[s];
                            j_loc[row][col] += w * v;
                        }
                    }
                    // ∂(momentum)/∂p and the matching (div, q) block.
                    for k in 0..3 {
                        j_loc[row][12 + k] -= w * q.bary[k] * gphi[s][c];
                        j_loc[12 + k][row] += w * q.bary[k] * gphi[s][c];
                    }
                }
            }
            // Continuity residual.
            for k in 0..3 {
                r_loc[12 + k] += w * q.bary[k] * div_u;
            }
        }

        // Pressure-mean multiplier coupling: ∫_T λ_k = |T|/3.
        let c_k = area / 3.0;
        for k in 0..3 {
            r_loc[12 + k] += c_k * m_val;
            residual[mult] += c_k * pvals[k];
            trips.push((p_dofs[k], mult, c_k));
            trips.push((mult, p_dofs[k], c_k));
        }

        for (i, &di) in dofs.iter().enumerate() {
            residual[di] += r_loc[i];
            for (j, &dj) in dofs.iter().enumerate() {
                if j_loc[i][j] != 0.0 {
                    trips.push((di, dj, j_loc[i][j]));
                }
            }
        }
    }
    Ok((residual, SparseMatrix::from_triplets(n, n, &trips)?))
}
