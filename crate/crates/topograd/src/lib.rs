//! Two-dimensional topology optimization on fixed triangular grids.
//!
//! The design region is described by a P1 level-set function `ψ` (negative
//! inside the material domain `Ω`, positive outside), and designs are improved
//! with descent methods driven by the topological derivative of the cost —
//! the sensitivity of the cost to flipping an infinitesimal disk of material.
//! A local optimum is characterized by `𝒟J = c·ψ` with `c > 0`, which the
//! optimizers monitor through the angle between `𝒟J` and `ψ` in `L²(D)`.
//!
//! The crate is organized bottom-up:
//!
//! - [`mesh`]: crossed-triangle grids on rectangles, quadrature rules, and
//!   finite-element dof maps (P1 scalar/vector, P2 vector, Taylor–Hood).
//! - [`sparse`]: CSR matrices, triplet assembly, and linear solvers.
//! - [`fem`]: element assembly (diffusion–reaction, plane-stress elasticity,
//!   Navier–Stokes with Brinkman penalization), Dirichlet elimination, and a
//!   Newton driver.
//! - [`levelset`]: cut-cell material fractions, the `L²(D)` geometry used by
//!   the optimizers (inner products, projections, angles), and reference
//!   designs.
//! - [`problems`]: the three model problems (inverse Poisson conductivity,
//!   compliance elasticity, dissipated-power flow) exposed behind a common
//!   cost/derivative oracle, plus a finite-ε verification quotient.
//! - [`optimizer`]: the four level-set update algorithms (sphere combination,
//!   convex combination, projected gradient, limited-memory BFGS) sharing one
//!   line-search driver.
//! - [`vtk`]: legacy-ASCII VTK output for meshes and nodal fields.
//! - [`benchmarks`]: ready-to-run configurations of the seven benchmark
//!   problems used by the CLI and the acceptance tests.

pub mod benchmarks;
pub mod fem;
pub mod levelset;
pub mod mesh;
pub mod optimizer;
pub mod problems;
pub mod sparse;
pub mod vtk;
