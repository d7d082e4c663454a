//! Ready-to-run configurations of the seven benchmark problems.
//!
//! Each [`Problem`] bundles a hold-all rectangle, a grid-resolution
//! convention, and an oracle constructor with the model coefficients the
//! experiments use, so the CLI and the acceptance tests share one roster.
//! The single resolution knob `mesh_n` is the vertical cell count; the
//! horizontal count follows the domain's aspect ratio, keeping the crossed
//! triangles isotropic at every scale.
//!
//! All benchmarks start from the same neutral design `ψ0 ≡ −1` (normalized
//! to unit `L²` norm): the whole hold-all is material for the inverse and
//! compliance problems, and all fluid for the flow problems.

use std::fmt;
use std::str::FromStr;

use crate::fem::NodalField;
use crate::levelset::{reference_clover, L2Space, LevelSetError};
use crate::mesh::{Mesh, Rect};
use crate::problems::{
    ElasticityConfig, ElasticityOracle, FlowConfig, FlowOracle, Nonlinearity, PoissonOracle,
    ProblemError, ProblemOracle,
};

/// The benchmark roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    /// Reconstruct the five-disk clover design from linear-Poisson data.
    CloverLinear,
    /// Reconstruct the clover design from semilinear (cubic) Poisson data.
    CloverSemilinear,
    /// Minimal-compliance cantilever: clamped left edge, tip load at the
    /// right-edge midpoint.
    Cantilever,
    /// Minimal-compliance bridge: pinned bottom corners, one load at the
    /// bottom-center.
    BridgeSingle,
    /// Bridge with three simultaneous bottom loads and a stronger volume
    /// penalty.
    BridgeMulti,
    /// Dissipated-power pipe bend: flow entering the left wall must exit
    /// through the bottom wall.
    PipeBend,
    /// Rugby-ball obstacle in a uniform upward flow with a fluid-volume
    /// target of 0.8.
    Rugby,
}

impl Problem {
    pub const ALL: [Problem; 7] = [
        Problem::CloverLinear,
        Problem::CloverSemilinear,
        Problem::Cantilever,
        Problem::BridgeSingle,
        Problem::BridgeMulti,
        Problem::PipeBend,
        Problem::Rugby,
    ];

    /// The CLI-facing identifier.
    pub fn name(self) -> &'static str {
        match self {
            Problem::CloverLinear => "clover_linear",
            Problem::CloverSemilinear => "clover_semilinear",
            Problem::Cantilever => "cantilever",
            Problem::BridgeSingle => "bridge_single",
            Problem::BridgeMulti => "bridge_multi",
            Problem::PipeBend => "pipe_bend",
            Problem::Rugby => "rugby",
        }
    }

    /// The hold-all rectangle `D`.
    pub fn domain(self) -> Rect {
        match self {
            Problem::CloverLinear | Problem::CloverSemilinear => Rect::new(-2.0, -2.0, 2.0, 2.0),
            Problem::Cantilever => Rect::new(0.0, 0.0, 2.0, 1.0),
            Problem::BridgeSingle | Problem::BridgeMulti => Rect::new(0.0, 0.0, 2.0, 1.2),
            Problem::PipeBend | Problem::Rugby => Rect::new(0.0, 0.0, 1.0, 1.0),
        }
    }

    /// The resolution the experiments quote for this benchmark.
    pub fn default_mesh_n(self) -> usize {
        match self {
            Problem::CloverLinear | Problem::CloverSemilinear => 96,
            Problem::Cantilever => 32,
            Problem::BridgeSingle | Problem::BridgeMulti => 48,
            Problem::PipeBend | Problem::Rugby => 100,
        }
    }

    /// Cell counts `(nx, ny)` for a vertical resolution of `mesh_n`,
    /// matching the domain aspect ratio (rounded to the nearest column
    /// count for the 5:3 bridge).
    pub fn grid_dims(self, mesh_n: usize) -> (usize, usize) {
        match self {
            Problem::CloverLinear
            | Problem::CloverSemilinear
            | Problem::PipeBend
            | Problem::Rugby => (mesh_n, mesh_n),
            Problem::Cantilever => (2 * mesh_n, mesh_n),
            Problem::BridgeSingle | Problem::BridgeMulti => ((5 * mesh_n + 1) / 3, mesh_n),
        }
    }

    /// The crossed-triangle grid for this benchmark at resolution `mesh_n`.
    pub fn mesh(self, mesh_n: usize) -> Result<Mesh, ProblemError> {
        let (nx, ny) = self.grid_dims(mesh_n);
        Ok(Mesh::crossed_grid(nx, ny, self.domain())?)
    }

    /// Builds the benchmark oracle at resolution `mesh_n`.
    ///
    /// The inverse problems synthesize their target data by solving the
    /// state equation on the clover design at this same resolution, so their
    /// global minimum (cost zero) is attainable exactly.
    pub fn oracle(self, mesh_n: usize) -> Result<Box<dyn ProblemOracle>, ProblemError> {
        let mesh = self.mesh(mesh_n)?;
        match self {
            Problem::CloverLinear | Problem::CloverSemilinear => {
                let nonlinearity = if self == Problem::CloverLinear {
                    Nonlinearity::Linear
                } else {
                    Nonlinearity::Cubic
                };
                let psi_des = reference_clover(&mesh).map_err(ProblemError::from)?;
                Ok(Box::new(PoissonOracle::inverse_problem(mesh, &psi_des, nonlinearity)?))
            }
            Problem::Cantilever => {
                Ok(Box::new(ElasticityOracle::new(mesh, ElasticityConfig::cantilever())?))
            }
            Problem::BridgeSingle => {
                Ok(Box::new(ElasticityOracle::new(mesh, ElasticityConfig::bridge(false))?))
            }
            Problem::BridgeMulti => {
                Ok(Box::new(ElasticityOracle::new(mesh, ElasticityConfig::bridge(true))?))
            }
            Problem::PipeBend => Ok(Box::new(FlowOracle::new(mesh, FlowConfig::pipe_bend())?)),
            Problem::Rugby => Ok(Box::new(FlowOracle::new(mesh, FlowConfig::rugby())?)),
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = UnknownProblem;

    fn from_str(s: &str) -> Result<Problem, UnknownProblem> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| UnknownProblem { given: s.into() })
    }
}

/// Parse error for [`Problem`] names, listing the accepted spellings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownProblem {
    pub given: String,
}

impl fmt::Display for UnknownProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown problem `{}`; expected one of", self.given)?;
        for (i, p) in Problem::ALL.iter().enumerate() {
            write!(f, "{} {}", if i == 0 { "" } else { "," }, p.name())?;
        }
        Ok(())
    }
}

impl std::error::Error for UnknownProblem {}

/// The shared starting design `ψ0 ≡ −1`, normalized to unit `L²(D)` norm.
pub fn initial_level_set(mesh: &Mesh) -> Result<NodalField, LevelSetError> {
    L2Space::new(mesh).normalize(&NodalField::p1_constant(mesh, -1.0))
}
