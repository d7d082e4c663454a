//! Crossed-triangle grids on axis-aligned rectangles.
//!
//! The hold-all domain `D` is always a rectangle. It is split into `nx × ny`
//! cells and every cell into four triangles fanning counter-clockwise around
//! the cell center, so the grid has no preferred diagonal direction:
//!
//! ```text
//!   p01 ─────── p11
//!    │ ╲  top  ╱ │
//!    │  ╲    ╱   │
//!    │   ╲  ╱    │
//!    │ left  right
//!    │   ╱  ╲    │
//!    │  ╱    ╲   │
//!    │ ╱ bottom ╲│
//!   p00 ─────── p10
//! ```
//!
//! Node ordering is deterministic: the `(nx+1)(ny+1)` grid corners first
//! (row-major, bottom row first), then the `nx·ny` cell centers (row-major).
//! Triangles are listed cell by cell in bottom/right/top/left order. All
//! triangles are counter-clockwise, so signed areas are positive.

use thiserror::Error;

pub mod space;

/// Errors from grid construction and point location.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("grid must have at least one cell in each direction, got {nx} x {ny}")]
    EmptyGrid { nx: usize, ny: usize },
    #[error("rectangle has non-positive extent: [{x0}, {x1}] x [{y0}, {y1}]")]
    DegenerateRect { x0: f64, x1: f64, y0: f64, y1: f64 },
    #[error("no quadrature rule of order {0} (supported: 1 through 4)")]
    UnsupportedQuadratureOrder(usize),
    #[error("point ({0}, {1}) lies outside the closed domain rectangle")]
    PointOutsideDomain(f64, f64),
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Whether `p` lies in the closed rectangle, with an absolute slack of
    /// `tol` on each side.
    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        p[0] >= self.x0 - tol && p[0] <= self.x1 + tol && p[1] >= self.y0 - tol && p[1] <= self.y1 + tol
    }
}

/// One of the four sides of the domain rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    fn bit(self) -> u8 {
        match self {
            Side::Left => 1,
            Side::Right => 2,
            Side::Bottom => 4,
            Side::Top => 8,
        }
    }
}

/// Set of sides a boundary node belongs to (corner nodes carry two sides).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SideSet(u8);

impl SideSet {
    pub fn empty() -> Self {
        SideSet(0)
    }

    pub fn insert(&mut self, side: Side) {
        self.0 |= side.bit();
    }

    pub fn contains(&self, side: Side) -> bool {
        self.0 & side.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }
}

/// Undirected mesh edge with its triangle adjacency count.
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    /// Endpoint node indices, `nodes[0] < nodes[1]`.
    pub nodes: [usize; 2],
    /// Number of triangles sharing the edge: 2 in the interior, 1 on the
    /// domain boundary.
    pub tri_count: u8,
}

/// A crossed-triangle grid over a rectangle.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub rect: Rect,
    pub nx: usize,
    pub ny: usize,
    /// Node coordinates; grid corners first, then cell centers.
    pub nodes: Vec<[f64; 2]>,
    /// Vertex index triples, counter-clockwise.
    pub triangles: Vec<[usize; 3]>,
    /// Which domain sides each node lies on; empty for interior nodes.
    node_sides: Vec<SideSet>,
    /// Unique undirected edges, sorted by endpoint pair.
    edges: Vec<Edge>,
    /// Per triangle, the edge index opposite each local vertex
    /// (`tri_edges[t][k]` joins the two vertices other than `k`).
    tri_edges: Vec<[usize; 3]>,
}

impl Mesh {
    /// Builds the `nx × ny` crossed grid over `rect`.
    pub fn crossed_grid(nx: usize, ny: usize, rect: Rect) -> Result<Mesh, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::EmptyGrid { nx, ny });
        }
        if !(rect.width() > 0.0 && rect.height() > 0.0) {
            return Err(MeshError::DegenerateRect {
                x0: rect.x0,
                x1: rect.x1,
                y0: rect.y0,
                y1: rect.y1,
            });
        }

        let n_corner = (nx + 1) * (ny + 1);
        let mut nodes = Vec::with_capacity(n_corner + nx * ny);
        let mut node_sides = Vec::with_capacity(nodes.capacity());

        // Affine blend so that the extreme coordinates are exactly the
        // rectangle bounds; boundary membership then follows from indices
        // alone, with no floating-point comparisons.
        let blend = |a: f64, b: f64, i: usize, n: usize| -> f64 {
            let t = i as f64 / n as f64;
            a * (1.0 - t) + b * t
        };
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([blend(rect.x0, rect.x1, i, nx), blend(rect.y0, rect.y1, j, ny)]);
                let mut sides = SideSet::empty();
                if i == 0 {
                    sides.insert(Side::Left);
                }
                if i == nx {
                    sides.insert(Side::Right);
                }
                if j == 0 {
                    sides.insert(Side::Bottom);
                }
                if j == ny {
                    sides.insert(Side::Top);
                }
                node_sides.push(sides);
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                let x = 0.5 * (blend(rect.x0, rect.x1, i, nx) + blend(rect.x0, rect.x1, i + 1, nx));
                let y = 0.5 * (blend(rect.y0, rect.y1, j, ny) + blend(rect.y0, rect.y1, j + 1, ny));
                nodes.push([x, y]);
                node_sides.push(SideSet::empty());
            }
        }

        let corner = |i: usize, j: usize| j * (nx + 1) + i;
        let center = |i: usize, j: usize| n_corner + j * nx + i;
        let mut triangles = Vec::with_capacity(4 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (p00, p10) = (corner(i, j), corner(i + 1, j));
                let (p01, p11) = (corner(i, j + 1), corner(i + 1, j + 1));
                let c = center(i, j);
                triangles.push([p00, p10, c]); // bottom
                triangles.push([p10, p11, c]); // right
                triangles.push([p11, p01, c]); // top
                triangles.push([p01, p00, c]); // left
            }
        }

        let (edges, tri_edges) = collect_edges(&triangles);
        Ok(Mesh {
            rect,
            nx,
            ny,
            nodes,
            triangles,
            node_sides,
            edges,
            tri_edges,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edge index opposite each local vertex of triangle `t`.
    pub fn tri_edges(&self, t: usize) -> [usize; 3] {
        self.tri_edges[t]
    }

    pub fn tri_vertices(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    /// Signed triangle area (positive: all triangles are counter-clockwise).
    pub fn tri_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tri_vertices(t);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    }

    pub fn tri_centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.tri_vertices(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Gradients of the three barycentric coordinates of triangle `t`
    /// (constant on the triangle).
    pub fn grad_lambda(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.tri_vertices(t);
        let inv2a = 1.0 / (2.0 * self.tri_area(t));
        [
            [(b[1] - c[1]) * inv2a, (c[0] - b[0]) * inv2a],
            [(c[1] - a[1]) * inv2a, (a[0] - c[0]) * inv2a],
            [(a[1] - b[1]) * inv2a, (b[0] - a[0]) * inv2a],
        ]
    }

    /// Sides of the domain rectangle that node `n` lies on (empty set for
    /// interior nodes, two sides for corners).
    pub fn node_sides(&self, n: usize) -> SideSet {
        self.node_sides[n]
    }

    pub fn is_boundary_node(&self, n: usize) -> bool {
        !self.node_sides[n].is_empty()
    }

    /// All node indices on a given side, in increasing index order.
    pub fn nodes_on(&self, side: Side) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| self.node_sides[n].contains(side)).collect()
    }

    /// Index of the mesh node nearest to `p`; ties resolve to the lowest
    /// index. Errors if `p` lies outside the closed domain rectangle (with a
    /// relative slack of `1e-9` of the rectangle diameter).
    pub fn locate_node(&self, p: [f64; 2]) -> Result<usize, MeshError> {
        if !self.rect.contains(p, 1e-9 * self.rect.diameter()) {
            return Err(MeshError::PointOutsideDomain(p[0], p[1]));
        }
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (n, q) in self.nodes.iter().enumerate() {
            let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = n;
            }
        }
        Ok(best)
    }
}

fn collect_edges(triangles: &[[usize; 3]]) -> (Vec<Edge>, Vec<[usize; 3]>) {
    use std::collections::BTreeMap;
    let mut map: BTreeMap<[usize; 2], usize> = BTreeMap::new();
    // First pass: assign ids in sorted endpoint order for determinism.
    for tri in triangles {
        for k in 0..3 {
            let (a, b) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let key = [a.min(b), a.max(b)];
            map.entry(key).or_insert(0);
        }
    }
    for (id, slot) in map.values_mut().enumerate() {
        *slot = id;
    }
    let mut edges: Vec<Edge> = map
        .iter()
        .map(|(&nodes, _)| Edge { nodes, tri_count: 0 })
        .collect();
    let mut tri_edges = Vec::with_capacity(triangles.len());
    for tri in triangles {
        let mut local = [0usize; 3];
        for k in 0..3 {
            let (a, b) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let id = map[&[a.min(b), a.max(b)]];
            edges[id].tri_count += 1;
            local[k] = id;
        }
        tri_edges.push(local);
    }
    (edges, tri_edges)
}

/// One point of a triangle quadrature rule, in barycentric coordinates.
/// Weights are normalized to sum to 1, so an integral over a triangle `T`
/// is `|T| · Σᵢ wᵢ f(xᵢ)`.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub bary: [f64; 3],
    pub weight: f64,
}

const fn qp(l1: f64, l2: f64, l3: f64, w: f64) -> QuadPoint {
    QuadPoint { bary: [l1, l2, l3], weight: w }
}

const THIRD: f64 = 1.0 / 3.0;

static QUAD_1: [QuadPoint; 1] = [qp(THIRD, THIRD, THIRD, 1.0)];

static QUAD_2: [QuadPoint; 3] = [
    qp(0.5, 0.5, 0.0, THIRD),
    qp(0.0, 0.5, 0.5, THIRD),
    qp(0.5, 0.0, 0.5, THIRD),
];

static QUAD_3: [QuadPoint; 4] = [
    qp(THIRD, THIRD, THIRD, -27.0 / 48.0),
    qp(0.6, 0.2, 0.2, 25.0 / 48.0),
    qp(0.2, 0.6, 0.2, 25.0 / 48.0),
    qp(0.2, 0.2, 0.6, 25.0 / 48.0),
];

// Six-point rule exact through degree 4 (two symmetric orbits).
const QA: f64 = 0.445_948_490_915_965;
const WA: f64 = 0.223_381_589_678_011;
const QB: f64 = 0.091_576_213_509_771;
const WB: f64 = 0.109_951_743_655_322;

static QUAD_4: [QuadPoint; 6] = [
    qp(1.0 - 2.0 * QA, QA, QA, WA),
    qp(QA, 1.0 - 2.0 * QA, QA, WA),
    qp(QA, QA, 1.0 - 2.0 * QA, WA),
    qp(1.0 - 2.0 * QB, QB, QB, WB),
    qp(QB, 1.0 - 2.0 * QB, QB, WB),
    qp(QB, QB, 1.0 - 2.0 * QB, WB),
];

/// Quadrature rule exact for polynomials of total degree `order` on a
/// triangle, for `order` in 1..=4.
pub fn quadrature(order: usize) -> Result<&'static [QuadPoint], MeshError> {
    match order {
        1 => Ok(&QUAD_1),
        2 => Ok(&QUAD_2),
        3 => Ok(&QUAD_3),
        4 => Ok(&QUAD_4),
        other => Err(MeshError::UnsupportedQuadratureOrder(other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_rect() -> Rect {
        Rect::new(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn node_and_triangle_counts_match_closed_forms() {
        for &(nx, ny, nodes, tris) in &[
            (32usize, 32usize, 2113usize, 4096usize),
            (64, 32, 4193, 8192),
            (96, 96, 18625, 36864),
            (80, 48, 7809, 15360),
            (100, 100, 20201, 40000),
        ] {
            let mesh = Mesh::crossed_grid(nx, ny, unit_rect()).unwrap();
            assert_eq!(mesh.node_count(), nodes, "node count for {nx}x{ny}");
            assert_eq!(mesh.triangle_count(), tris, "triangle count for {nx}x{ny}");
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(matches!(
            Mesh::crossed_grid(0, 4, unit_rect()),
            Err(MeshError::EmptyGrid { .. })
        ));
        assert!(matches!(
            Mesh::crossed_grid(4, 0, unit_rect()),
            Err(MeshError::EmptyGrid { .. })
        ));
    }

    #[test]
    fn degenerate_rect_is_rejected() {
        let flat = Rect::new(0.0, 0.0, 1.0, 0.0);
        assert!(matches!(
            Mesh::crossed_grid(2, 2, flat),
            Err(MeshError::DegenerateRect { .. })
        ));
    }

    #[test]
    fn triangle_areas_are_positive_and_partition_the_rectangle() {
        let rect = Rect::new(-2.0, -2.0, 2.0, 2.0);
        let mesh = Mesh::crossed_grid(7, 5, rect).unwrap();
        let mut total = 0.0;
        for t in 0..mesh.triangle_count() {
            let a = mesh.tri_area(t);
            assert!(a > 0.0, "triangle {t} has non-positive area {a}");
            total += a;
        }
        assert!((total - rect.area()).abs() <= 1e-12 * rect.area());
    }

    #[test]
    fn every_edge_is_shared_by_one_or_two_triangles() {
        let mesh = Mesh::crossed_grid(6, 3, unit_rect()).unwrap();
        let expect = 6 * (3 + 1) + (6 + 1) * 3 + 4 * 6 * 3;
        assert_eq!(mesh.edge_count(), expect);
        for e in mesh.edges() {
            assert!(e.tri_count == 1 || e.tri_count == 2);
            if e.tri_count == 1 {
                assert!(
                    mesh.is_boundary_node(e.nodes[0]) && mesh.is_boundary_node(e.nodes[1]),
                    "boundary edge {:?} must have boundary endpoints",
                    e.nodes
                );
            }
        }
        let boundary_edges = mesh.edges().iter().filter(|e| e.tri_count == 1).count();
        assert_eq!(boundary_edges, 2 * (6 + 3));
    }

    #[test]
    fn boundary_tags_follow_grid_indices() {
        let mesh = Mesh::crossed_grid(4, 3, Rect::new(0.0, 0.0, 2.0, 1.2)).unwrap();
        assert_eq!(mesh.nodes_on(Side::Left).len(), 4);
        assert_eq!(mesh.nodes_on(Side::Bottom).len(), 5);
        // Corner (0,0) carries both Left and Bottom.
        let sides = mesh.node_sides(0);
        assert!(sides.contains(Side::Left) && sides.contains(Side::Bottom));
        assert!(!sides.contains(Side::Top));
        // Total count of boundary nodes equals the grid perimeter count.
        let n_boundary = (0..mesh.node_count()).filter(|&n| mesh.is_boundary_node(n)).count();
        assert_eq!(n_boundary, 2 * (4 + 3));
        // Cell centers are interior.
        for n in (4 + 1) * (3 + 1)..mesh.node_count() {
            assert!(!mesh.is_boundary_node(n));
        }
    }

    #[test]
    fn locate_node_finds_exact_hits_and_breaks_ties_low() {
        let mesh = Mesh::crossed_grid(4, 4, Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap();
        // Exact grid node.
        let n = mesh.locate_node([0.25, 0.5]).unwrap();
        assert_eq!(mesh.nodes[n], [0.25, 0.5]);
        // A point equidistant from several nodes resolves to the lowest index.
        let tie = mesh.locate_node([0.125, 0.0]).unwrap();
        assert_eq!(tie, 0);
        assert!(matches!(
            mesh.locate_node([1.5, 0.5]),
            Err(MeshError::PointOutsideDomain(..))
        ));
    }

    /// Exact integral of `x^a y^b` over the reference triangle
    /// `{x, y ≥ 0, x + y ≤ 1}`: `a! b! / (a + b + 2)!`.
    fn monomial_integral(a: u32, b: u32) -> f64 {
        let fact = |k: u32| (1..=k).map(|v| v as f64).product::<f64>().max(1.0);
        fact(a) * fact(b) / fact(a + b + 2)
    }

    fn quad_integral(order: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
        // Reference triangle (0,0), (1,0), (0,1): x = λ₂, y = λ₃, |T| = 1/2.
        quadrature(order)
            .unwrap()
            .iter()
            .map(|q| 0.5 * q.weight * f(q.bary[1], q.bary[2]))
            .sum()
    }

    #[test]
    fn quadrature_weights_sum_to_one() {
        for order in 1..=4 {
            let sum: f64 = quadrature(order).unwrap().iter().map(|q| q.weight).sum();
            assert!((sum - 1.0).abs() <= 1e-14, "order {order}: weights sum to {sum}");
        }
    }

    #[test]
    fn quadrature_rules_are_exact_up_to_their_order() {
        for order in 1..=4usize {
            for a in 0..=order as u32 {
                for b in 0..=(order as u32 - a) {
                    let got = quad_integral(order, |x, y| x.powi(a as i32) * y.powi(b as i32));
                    let want = monomial_integral(a, b);
                    assert!(
                        (got - want).abs() <= 1e-14,
                        "order {order} on x^{a} y^{b}: got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn quadrature_reference_values() {
        // Frozen oracle values (area measure on the reference triangle).
        let xy = quad_integral(2, |x, y| x * y);
        assert!((xy - 1.0 / 24.0).abs() <= 1e-15, "∫ xy = {xy}");
        let x4 = quad_integral(4, |x, _| x.powi(4));
        assert!((x4 - 1.0 / 30.0).abs() <= 1e-15, "∫ x⁴ = {x4}");
    }

    #[test]
    fn unknown_quadrature_order_errors() {
        assert!(matches!(quadrature(0), Err(MeshError::UnsupportedQuadratureOrder(0))));
        assert!(matches!(quadrature(5), Err(MeshError::UnsupportedQuadratureOrder(5))));
    }

    #[test]
    fn grad_lambda_sums_to_zero_and_is_dual_to_edges() {
        let mesh = Mesh::crossed_grid(3, 2, Rect::new(-1.0, 0.5, 2.0, 3.0)).unwrap();
        for t in 0..mesh.triangle_count() {
            let g = mesh.grad_lambda(t);
            for d in 0..2 {
                let s: f64 = g.iter().map(|v| v[d]).sum();
                assert!(s.abs() <= 1e-12);
            }
            // λ_k is 1 at vertex k and 0 at the others: check via finite
            // differences along the edges.
            let v = mesh.tri_vertices(t);
            for k in 0..3 {
                for m in 0..3 {
                    let dot = g[k][0] * (v[m][0] - v[k][0]) + g[k][1] * (v[m][1] - v[k][1]);
                    let want = if m == k { 0.0 } else { -1.0 };
                    assert!((dot - want).abs() <= 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn counts_and_area_partition_hold_for_arbitrary_grids(nx in 1usize..20, ny in 1usize..20) {
            let rect = Rect::new(0.0, 0.0, 1.5, 0.7);
            let mesh = Mesh::crossed_grid(nx, ny, rect).unwrap();
            prop_assert_eq!(mesh.node_count(), (nx + 1) * (ny + 1) + nx * ny);
            prop_assert_eq!(mesh.triangle_count(), 4 * nx * ny);
            prop_assert_eq!(mesh.edge_count(), nx * (ny + 1) + (nx + 1) * ny + 4 * nx * ny);
            let total: f64 = (0..mesh.triangle_count()).map(|t| mesh.tri_area(t)).sum();
            prop_assert!((total - rect.area()).abs() <= 1e-12 * rect.area());
            let n_boundary = (0..mesh.node_count()).filter(|&n| mesh.is_boundary_node(n)).count();
            prop_assert_eq!(n_boundary, 2 * (nx + ny));
        }
    }
}
