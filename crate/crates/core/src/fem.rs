//! Reference-element machinery: quadrature, Lagrange bases of degree 1 and 2,
//! affine maps and the equal-order degree-of-freedom layout.

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = 0.5 * (1.0 - z);
        w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Quadrature on the reference triangle `(0,0), (1,0), (0,1)`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub order: usize,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Collapsed (Duffy) tensor Gauss rule exact for total degree `order`.
    pub fn triangle(order: usize) -> QuadratureRule {
        if order <= 1 {
            return QuadratureRule {
                order,
                points: vec![[1.0 / 3.0, 1.0 / 3.0]],
                weights: vec![0.5],
            };
        }
        if order == 2 {
            let (a, b) = (1.0 / 6.0, 2.0 / 3.0);
            return QuadratureRule {
                order,
                points: vec![[a, a], [b, a], [a, b]],
                weights: vec![1.0 / 6.0; 3],
            };
        }
        // Integrand picks up one extra degree in the collapsed direction.
        let n = (order + 3) / 2;
        let (x, w) = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let u = x[i];
                let v = x[j];
                points.push([u, (1.0 - u) * v]);
                weights.push(w[i] * w[j] * (1.0 - u));
            }
        }
        QuadratureRule { order, points, weights }
    }
}

/// Gauss rule on `[0, 1]` exact for polynomials of degree `order`.
pub fn line_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_legendre(order / 2 + 1)
}

/// Values, reference gradients and reference Hessians of a Lagrange basis
/// at one reference point.
#[derive(Debug, Clone)]
pub struct ShapeEval {
    pub values: Vec<f64>,
    pub gradients: Vec<[f64; 2]>,
    /// Symmetric Hessians stored as `[d_xx, d_xy, d_yy]`.
    pub hessians: Vec<[f64; 3]>,
}

const BARY_GRADS: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];

/// Local nodes: vertices 0..3, then edge midpoints on local edges
/// `(0,1), (1,2), (2,0)` for degree 2.
pub fn n_local_nodes(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

pub fn reference_nodes(degree: usize) -> Vec<Point> {
    let mut nodes = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    if degree == 2 {
        nodes.extend([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]);
    }
    nodes
}

pub fn shape_functions(degree: usize, xi: Point) -> Result<ShapeEval> {
    let l = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
    let g = BARY_GRADS;
    match degree {
        1 => Ok(ShapeEval {
            values: l.to_vec(),
            gradients: g.to_vec(),
            hessians: vec![[0.0; 3]; 3],
        }),
        2 => {
            let outer = |a: [f64; 2], b: [f64; 2]| {
                [2.0 * a[0] * b[0], a[0] * b[1] + a[1] * b[0], 2.0 * a[1] * b[1]]
            };
            let mut values = Vec::with_capacity(6);
            let mut gradients = Vec::with_capacity(6);
            let mut hessians = Vec::with_capacity(6);
            for i in 0..3 {
                values.push(l[i] * (2.0 * l[i] - 1.0));
                let s = 4.0 * l[i] - 1.0;
                gradients.push([s * g[i][0], s * g[i][1]]);
                let h = outer(g[i], g[i]);
                hessians.push([2.0 * h[0], 2.0 * h[1], 2.0 * h[2]]);
            }
            for i in 0..3 {
                let j = (i + 1) % 3;
                values.push(4.0 * l[i] * l[j]);
                gradients.push([
                    4.0 * (l[i] * g[j][0] + l[j] * g[i][0]),
                    4.0 * (l[i] * g[j][1] + l[j] * g[i][1]),
                ]);
                let h = outer(g[i], g[j]);
                hessians.push([4.0 * h[0], 4.0 * h[1], 4.0 * h[2]]);
            }
            Ok(ShapeEval { values, gradients, hessians })
        }
        d => Err(Error::InvalidArgument(format!("unsupported polynomial degree {d}"))),
    }
}

/// Affine map from the reference triangle onto a physical cell.
#[derive(Debug, Clone, Copy)]
pub struct AffineMap {
    pub origin: Point,
    /// Columns are the images of the reference axes.
    pub jacobian: [[f64; 2]; 2],
    pub det: f64,
    /// Inverse of the Jacobian.
    pub inverse: [[f64; 2]; 2],
}

impl AffineMap {
    pub fn new(p: [Point; 3]) -> Result<AffineMap> {
        let j = [[p[1][0] - p[0][0], p[2][0] - p[0][0]], [p[1][1] - p[0][1], p[2][1] - p[0][1]]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let scale = (j[0][0].abs() + j[0][1].abs() + j[1][0].abs() + j[1][1].abs()).powi(2);
        if !(det.abs() > 1e-14 * scale) {
            return Err(Error::DegenerateCell { cell: usize::MAX, area: 0.5 * det });
        }
        let inverse = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
        Ok(AffineMap { origin: p[0], jacobian: j, det, inverse })
    }

    pub fn to_physical(&self, xi: Point) -> Point {
        let j = &self.jacobian;
        [
            self.origin[0] + j[0][0] * xi[0] + j[0][1] * xi[1],
            self.origin[1] + j[1][0] * xi[0] + j[1][1] * xi[1],
        ]
    }

    pub fn to_reference(&self, x: Point) -> Point {
        let d = [x[0] - self.origin[0], x[1] - self.origin[1]];
        let k = &self.inverse;
        [k[0][0] * d[0] + k[0][1] * d[1], k[1][0] * d[0] + k[1][1] * d[1]]
    }

    /// `J^{-T} g`.
    pub fn gradient(&self, g: [f64; 2]) -> [f64; 2] {
        let k = &self.inverse;
        [k[0][0] * g[0] + k[1][0] * g[1], k[0][1] * g[0] + k[1][1] * g[1]]
    }

    /// `J^{-T} H J^{-1}` for a packed symmetric Hessian.
    pub fn hessian(&self, h: [f64; 3]) -> [f64; 3] {
        let k = &self.inverse;
        let hm = [[h[0], h[1]], [h[1], h[2]]];
        let mut out = [[0.0; 2]; 2];
        for (a, row) in out.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                for i in 0..2 {
                    for j in 0..2 {
                        *v += k[i][a] * hm[i][j] * k[j][b];
                    }
                }
            }
        }
        [out[0][0], out[0][1], out[1][1]]
    }

    pub fn weight(&self, reference_weight: f64) -> f64 {
        reference_weight * self.det.abs()
    }
}

/// Basis values mapped onto a physical cell at one point.
#[derive(Debug, Clone)]
pub struct PhysicalEval {
    pub point: Point,
    pub weight: f64,
    pub values: Vec<f64>,
    pub gradients: Vec<[f64; 2]>,
    pub hessians: Vec<[f64; 3]>,
}

pub fn map_to_physical(map: &AffineMap, reference: &ShapeEval, xi: Point, ref_weight: f64) -> PhysicalEval {
    PhysicalEval {
        point: map.to_physical(xi),
        weight: map.weight(ref_weight),
        values: reference.values.clone(),
        gradients: reference.gradients.iter().map(|&g| map.gradient(g)).collect(),
        hessians: reference.hessians.iter().map(|&h| map.hessian(h)).collect(),
    }
}

/// Equal-order continuous Lagrange space for velocity (two components) and
/// pressure.
///
/// Global unknown layout: `u_x` on nodes `0..N`, `u_y` on `N..2N`, `p` on
/// `2N..3N`, where `N` is the scalar node count.
#[derive(Debug, Clone)]
pub struct Space {
    pub mesh: Mesh,
    pub degree: usize,
    /// Scalar Lagrange nodes per cell, in local node order.
    pub cell_nodes: Vec<Vec<usize>>,
    pub node_coords: Vec<Point>,
    pub maps: Vec<AffineMap>,
}

impl Space {
    pub fn new(mesh: Mesh, degree: usize) -> Result<Space> {
        if !(1..=2).contains(&degree) {
            return Err(Error::InvalidArgument(format!("unsupported polynomial degree {degree}")));
        }
        let nv = mesh.n_vertices();
        let mut node_coords = mesh.vertices.clone();
        if degree == 2 {
            for f in &mesh.facets {
                let (a, b) = (mesh.vertices[f.vertices[0]], mesh.vertices[f.vertices[1]]);
                node_coords.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
            }
        }
        let mut cell_nodes = Vec::with_capacity(mesh.n_cells());
        let mut maps = Vec::with_capacity(mesh.n_cells());
        for c in 0..mesh.n_cells() {
            let mut nodes = mesh.cells[c].to_vec();
            if degree == 2 {
                nodes.extend(mesh.cell_facets[c].iter().map(|&f| nv + f));
            }
            cell_nodes.push(nodes);
            maps.push(AffineMap::new(mesh.cell_points(c)).map_err(|_| Error::DegenerateCell {
                cell: c,
                area: mesh.cell_area(c),
            })?);
        }
        Ok(Space { mesh, degree, cell_nodes, node_coords, maps })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_dofs_velocity(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn n_dofs_pressure(&self) -> usize {
        self.n_nodes()
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.n_nodes()
    }

    /// Global velocity unknowns of a cell: all `u_x` nodes, then all `u_y` nodes.
    pub fn velocity_dofs(&self, c: usize) -> Vec<usize> {
        let n = self.n_nodes();
        let nodes = &self.cell_nodes[c];
        nodes.iter().copied().chain(nodes.iter().map(|&a| a + n)).collect()
    }

    pub fn pressure_dofs(&self, c: usize) -> Vec<usize> {
        let n = self.n_nodes();
        self.cell_nodes[c].iter().map(|&a| a + 2 * n).collect()
    }

    /// All unknowns of a cell in local order `(u_x, u_y, p)`.
    pub fn cell_dofs(&self, c: usize) -> Vec<usize> {
        let mut d = self.velocity_dofs(c);
        d.extend(self.pressure_dofs(c));
        d
    }

    /// Scalar nodes lying on a facet (endpoints, plus midpoint for degree 2).
    pub fn facet_nodes(&self, f: usize) -> Vec<usize> {
        let facet = &self.mesh.facets[f];
        let mut nodes = facet.vertices.to_vec();
        if self.degree == 2 {
            nodes.push(self.mesh.n_vertices() + f);
        }
        nodes
    }

    /// Reference coordinates on the owner cell of the point at parameter `s`
    /// along facet `f` (from its first to its second vertex).
    pub fn facet_reference_point(&self, f: usize, s: f64) -> Point {
        let facet = &self.mesh.facets[f];
        let nodes = reference_nodes(1);
        let e = facet.owner_edge;
        let (a, b) = (nodes[e], nodes[(e + 1) % 3]);
        [(1.0 - s) * a[0] + s * b[0], (1.0 - s) * a[1] + s * b[1]]
    }

    /// Interpolates a scalar function at the Lagrange nodes.
    pub fn interpolate_scalar(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        self.node_coords.iter().map(|&p| f(p)).collect()
    }
}

/// Discrete velocity and pressure with derivatives at one point of a cell.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FieldEval {
    pub u: [f64; 2],
    /// `grad_u[i][j] = d u_i / d x_j`.
    pub grad_u: [[f64; 2]; 2],
    /// `div e(u)`, zero for linear elements.
    pub div_eps: [f64; 2],
    pub p: f64,
    pub grad_p: [f64; 2],
}

impl FieldEval {
    pub fn eps(&self) -> [[f64; 2]; 2] {
        let g = &self.grad_u;
        let off = 0.5 * (g[0][1] + g[1][0]);
        [[g[0][0], off], [off, g[1][1]]]
    }

    pub fn div(&self) -> f64 {
        self.grad_u[0][0] + self.grad_u[1][1]
    }
}

/// Evaluates the discrete fields of `coeffs` (global layout) on cell `c`.
pub fn eval_fields(space: &Space, coeffs: &[f64], c: usize, ev: &PhysicalEval) -> FieldEval {
    let n = space.n_nodes();
    let mut out = FieldEval::default();
    for (k, &a) in space.cell_nodes[c].iter().enumerate() {
        let (v, g, h) = (ev.values[k], ev.gradients[k], ev.hessians[k]);
        for comp in 0..2 {
            let coef = coeffs[a + comp * n];
            out.u[comp] += coef * v;
            out.grad_u[comp][0] += coef * g[0];
            out.grad_u[comp][1] += coef * g[1];
        }
        let (ux, uy) = (coeffs[a], coeffs[a + n]);
        // div e(u) = (lap u + grad div u) / 2
        out.div_eps[0] += ux * (h[0] + 0.5 * h[2]) + 0.5 * uy * h[1];
        out.div_eps[1] += uy * (h[2] + 0.5 * h[0]) + 0.5 * ux * h[1];
        let pc = coeffs[a + 2 * n];
        out.p += pc * v;
        out.grad_p[0] += pc * g[0];
        out.grad_p[1] += pc * g[1];
    }
    out
}

/// Evaluates the discrete fields at a physical point known to lie in cell `c`.
pub fn eval_fields_at(space: &Space, coeffs: &[f64], c: usize, x: Point) -> FieldEval {
    let xi = space.maps[c].to_reference(x);
    let shape = shape_functions(space.degree, xi).expect("supported degree");
    eval_fields(space, coeffs, c, &map_to_physical(&space.maps[c], &shape, xi, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{navier_on_top, never_navier};

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    #[test]
    fn quadrature_exactness() {
        for q in 0..=12 {
            let rule = QuadratureRule::triangle(q);
            let sum: f64 = rule.weights.iter().sum();
            assert!((sum - 0.5).abs() < 1e-14);
            for a in 0..=q {
                for b in 0..=(q - a) {
                    let num: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                        .sum();
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    assert!((num - exact).abs() < 1e-14, "q={q} a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn line_rule_exactness() {
        for q in 0..12 {
            let (x, w) = line_rule(q);
            for k in 0..=q {
                let num: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert!((num - 1.0 / (k as f64 + 1.0)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_function_basics() {
        let s = shape_functions(1, [1.0 / 3.0, 1.0 / 3.0]).unwrap();
        for v in &s.values {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let nodes = reference_nodes(2);
        for (i, &p) in nodes.iter().enumerate() {
            let s = shape_functions(2, p).unwrap();
            for (j, v) in s.values.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-15);
            }
        }
        assert!(shape_functions(3, [0.2, 0.2]).is_err());
    }

    #[test]
    fn quadratic_hessians_match_finite_differences() {
        let p = [0.21, 0.33];
        let eps = 1e-5;
        let s = shape_functions(2, p).unwrap();
        let sx_p = shape_functions(2, [p[0] + eps, p[1]]).unwrap();
        let sx_m = shape_functions(2, [p[0] - eps, p[1]]).unwrap();
        let sy_p = shape_functions(2, [p[0], p[1] + eps]).unwrap();
        let sy_m = shape_functions(2, [p[0], p[1] - eps]).unwrap();
        for i in 0..6 {
            let dxx = (sx_p.gradients[i][0] - sx_m.gradients[i][0]) / (2.0 * eps);
            let dxy = (sy_p.gradients[i][0] - sy_m.gradients[i][0]) / (2.0 * eps);
            let dyy = (sy_p.gradients[i][1] - sy_m.gradients[i][1]) / (2.0 * eps);
            let h = s.hessians[i];
            assert!((h[0] - dxx).abs() < 1e-6 && (h[1] - dxy).abs() < 1e-6 && (h[2] - dyy).abs() < 1e-6);
            // constant over the element
            assert_eq!(h, shape_functions(2, [0.6, 0.1]).unwrap().hessians[i]);
        }
    }

    #[test]
    fn affine_map_scaling() {
        let id = AffineMap::new([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = shape_functions(2, [0.2, 0.3]).unwrap();
        let e = map_to_physical(&id, &s, [0.2, 0.3], 0.1);
        assert_eq!(e.gradients, s.gradients);
        assert_eq!(e.point, [0.2, 0.3]);
        assert!((e.weight - 0.1).abs() < 1e-16);

        let big = AffineMap::new([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]).unwrap();
        let e2 = map_to_physical(&big, &s, [0.2, 0.3], 0.1);
        for (g2, g) in e2.gradients.iter().zip(&s.gradients) {
            assert!((g2[0] - 0.5 * g[0]).abs() < 1e-15 && (g2[1] - 0.5 * g[1]).abs() < 1e-15);
        }
        assert!((e2.weight - 0.4).abs() < 1e-15);
        assert!(AffineMap::new([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
    }

    #[test]
    fn quadrature_area() {
        let mesh = Mesh::lshape(3).unwrap().refine(&[0, 5, 11]).unwrap();
        let rule = QuadratureRule::triangle(4);
        for c in 0..mesh.n_cells() {
            let map = AffineMap::new(mesh.cell_points(c)).unwrap();
            let area: f64 = rule.weights.iter().map(|&w| map.weight(w)).sum();
            assert!((area - mesh.cell_area(c)).abs() < 1e-14);
        }
    }

    #[test]
    fn dof_counts() {
        let m = Mesh::unit_square(4, &navier_on_top).unwrap();
        let s = Space::new(m, 1).unwrap();
        assert_eq!((s.n_dofs_pressure(), s.n_dofs_velocity()), (25, 50));
        let m = Mesh::unit_square(1, &never_navier).unwrap();
        let s = Space::new(m, 2).unwrap();
        assert_eq!(s.n_dofs_pressure(), 9);
        assert!(Space::new(Mesh::unit_square(1, &never_navier).unwrap(), 3).is_err());
    }

    #[test]
    fn shared_edge_dofs_agree_and_cover() {
        let m = Mesh::lshape(2).unwrap().refine(&[1, 2]).unwrap();
        for degree in 1..=2 {
            let s = Space::new(m.clone(), degree).unwrap();
            let mut seen = vec![false; s.n_nodes()];
            for c in 0..m.n_cells() {
                let map = &s.maps[c];
                for (k, &node) in s.cell_nodes[c].iter().enumerate() {
                    let x = map.to_physical(reference_nodes(degree)[k]);
                    let y = s.node_coords[node];
                    assert!((x[0] - y[0]).abs() < 1e-14 && (x[1] - y[1]).abs() < 1e-14);
                    seen[node] = true;
                }
            }
            assert!(seen.iter().all(|&b| b));
        }
    }
}
