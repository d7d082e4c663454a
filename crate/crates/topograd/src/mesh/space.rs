//! Finite-element spaces and their element dof maps.
//!
//! Dof numbering conventions:
//!
//! - **P1 scalar**: one dof per mesh node, dof index = node index.
//! - **P1 vector**: two dofs per node, interleaved `(2n, 2n+1)` for the x and
//!   y components of node `n`.
//! - **P2 vector**: scalar P2 dofs are the mesh nodes followed by one dof per
//!   mesh edge (`node_count + edge_index`); the vector space interleaves
//!   components as for P1 vector.
//! - **Taylor–Hood**: P2 vector velocity block first, then one P1 pressure
//!   dof per node, then a single trailing Lagrange-multiplier dof pinning the
//!   pressure mean to zero. `elem_dofs` lists the 12 velocity and 3 pressure
//!   dofs; the multiplier couples globally and is handled by the assembler.

use super::Mesh;

/// The finite-element spaces used by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    P1Scalar,
    P1Vector,
    P2Vector,
    TaylorHood,
}

/// A dof map for one [`SpaceKind`] over a given mesh.
#[derive(Debug, Clone)]
pub struct FunctionSpace {
    pub kind: SpaceKind,
    /// Total number of global dofs (including the pressure-mean multiplier
    /// for Taylor–Hood).
    pub dof_count: usize,
    dofs_per_elem: usize,
    elem_dofs: Vec<usize>,
}

impl FunctionSpace {
    pub fn new(mesh: &Mesh, kind: SpaceKind) -> FunctionSpace {
        let n = mesh.node_count();
        let p2_scalar = n + mesh.edge_count();
        let (dof_count, dofs_per_elem) = match kind {
            SpaceKind::P1Scalar => (n, 3),
            SpaceKind::P1Vector => (2 * n, 6),
            SpaceKind::P2Vector => (2 * p2_scalar, 12),
            SpaceKind::TaylorHood => (2 * p2_scalar + n + 1, 15),
        };
        let mut elem_dofs = Vec::with_capacity(dofs_per_elem * mesh.triangle_count());
        for t in 0..mesh.triangle_count() {
            let tri = mesh.triangles[t];
            match kind {
                SpaceKind::P1Scalar => elem_dofs.extend(tri),
                SpaceKind::P1Vector => {
                    for v in tri {
                        elem_dofs.extend([2 * v, 2 * v + 1]);
                    }
                }
                SpaceKind::P2Vector | SpaceKind::TaylorHood => {
                    let edges = mesh.tri_edges(t);
                    for s in p2_scalar_dofs(tri, edges, n) {
                        elem_dofs.extend([2 * s, 2 * s + 1]);
                    }
                    if kind == SpaceKind::TaylorHood {
                        elem_dofs.extend(tri.map(|v| 2 * p2_scalar + v));
                    }
                }
            }
        }
        FunctionSpace {
            kind,
            dof_count,
            dofs_per_elem,
            elem_dofs,
        }
    }

    /// Global dofs of element `t`, in the per-kind local ordering.
    pub fn elem_dofs(&self, t: usize) -> &[usize] {
        &self.elem_dofs[t * self.dofs_per_elem..(t + 1) * self.dofs_per_elem]
    }

    pub fn dofs_per_elem(&self) -> usize {
        self.dofs_per_elem
    }
}

/// Scalar P2 dofs of a triangle: the three vertices, then the three edge
/// dofs ordered opposite each vertex (edge dof `3 + k` sits on the edge
/// joining vertices `k+1` and `k+2`, mod 3).
fn p2_scalar_dofs(tri: [usize; 3], edges: [usize; 3], node_count: usize) -> [usize; 6] {
    [
        tri[0],
        tri[1],
        tri[2],
        node_count + edges[0],
        node_count + edges[1],
        node_count + edges[2],
    ]
}

/// Values of the six scalar P2 basis functions at a barycentric point, in
/// the local ordering of [`p2_scalar_dofs`].
pub fn p2_values(bary: [f64; 3]) -> [f64; 6] {
    let [l0, l1, l2] = bary;
    [
        l0 * (2.0 * l0 - 1.0),
        l1 * (2.0 * l1 - 1.0),
        l2 * (2.0 * l2 - 1.0),
        4.0 * l1 * l2,
        4.0 * l2 * l0,
        4.0 * l0 * l1,
    ]
}

/// Gradients of the six scalar P2 basis functions at a barycentric point,
/// given the (constant) barycentric gradients of the triangle.
pub fn p2_gradients(bary: [f64; 3], grad_lambda: [[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let [l0, l1, l2] = bary;
    let g = grad_lambda;
    let vertex = |k: usize, l: f64| [(4.0 * l - 1.0) * g[k][0], (4.0 * l - 1.0) * g[k][1]];
    let edge = |a: usize, b: usize, la: f64, lb: f64| {
        [
            4.0 * (la * g[b][0] + lb * g[a][0]),
            4.0 * (la * g[b][1] + lb * g[a][1]),
        ]
    };
    [
        vertex(0, l0),
        vertex(1, l1),
        vertex(2, l2),
        edge(1, 2, l1, l2),
        edge(2, 0, l2, l0),
        edge(0, 1, l0, l1),
    ]
}
