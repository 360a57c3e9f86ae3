//! Conforming triangle meshes with tagged boundary facets.
//!
//! Cells are stored counter-clockwise. Each cell carries a refinement edge
//! (local edge `i` joins local vertices `i` and `(i + 1) % 3`) which drives
//! newest-vertex bisection in [`Mesh::refine`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FacetTag {
    Interior,
    Dirichlet,
    Navier,
}

/// An edge of the triangulation.
///
/// `vertices` follow the orientation of the owner cell, which is the
/// incident cell with the lower index. For interior facets the owner's
/// outward normal fixes the jump sign.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub vertices: [usize; 2],
    pub owner: usize,
    pub owner_edge: usize,
    pub neighbor: Option<(usize, usize)>,
}

impl Facet {
    pub fn is_boundary(&self) -> bool {
        self.neighbor.is_none()
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.owner).chain(self.neighbor.map(|(c, _)| c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacetGeometry {
    pub length: f64,
    /// Unit normal, outward from the owner cell.
    pub normal: [f64; 2],
    /// Unit tangent, owner-cell orientation; `normal` is `tangent` rotated clockwise.
    pub tangent: [f64; 2],
    pub owner: usize,
    pub neighbor: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub cells: Vec<[usize; 3]>,
    pub refinement_edge: Vec<u8>,
    pub facets: Vec<Facet>,
    pub facet_tag: Vec<FacetTag>,
    /// `cell_facets[c][i]` is the facet on local edge `i` of cell `c`.
    pub cell_facets: Vec<[usize; 3]>,
    /// Cell of the coarser mesh this cell was produced from, if any.
    pub parent: Vec<Option<usize>>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_area(p: Point, q: Point, r: Point) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

fn dist(p: Point, q: Point) -> f64 {
    (q[0] - p[0]).hypot(q[1] - p[1])
}

fn longest_edge(pts: [Point; 3]) -> u8 {
    let mut best = 0;
    let mut best_len = -1.0;
    for i in 0..3 {
        let l = dist(pts[i], pts[(i + 1) % 3]);
        if l > best_len * (1.0 + 1e-12) {
            best = i as u8;
            best_len = l;
        }
    }
    best
}

/// Navier iff the facet lies on the line `y = 1`.
pub fn navier_on_top(a: Point, b: Point) -> bool {
    (a[1] - 1.0).abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12
}

/// Navier iff the facet lies on `x = 0` or `y = 0` (the re-entrant sides of the L-shape).
pub fn navier_on_axes(a: Point, b: Point) -> bool {
    (a[0].abs() < 1e-12 && b[0].abs() < 1e-12) || (a[1].abs() < 1e-12 && b[1].abs() < 1e-12)
}

/// Navier on every side of the unit square except the lid `y = 1`.
pub fn navier_except_top(a: Point, b: Point) -> bool {
    !navier_on_top(a, b)
}

pub fn never_navier(_: Point, _: Point) -> bool {
    false
}

impl Mesh {
    /// Builds the facet structure from raw cells.
    ///
    /// `tag_of` is called once per boundary facet with its two vertex
    /// indices and must return `Dirichlet` or `Navier`.
    pub fn new(
        vertices: Vec<Point>,
        cells: Vec<[usize; 3]>,
        refinement_edge: Vec<u8>,
        parent: Vec<Option<usize>>,
        mut tag_of: impl FnMut(usize, usize) -> Result<FacetTag>,
    ) -> Result<Mesh> {
        if refinement_edge.len() != cells.len() || parent.len() != cells.len() {
            return Err(Error::DimensionMismatch {
                expected: cells.len(),
                got: refinement_edge.len().min(parent.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            if cell.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidArgument(format!("cell {c} references a missing vertex")));
            }
            let area = signed_area(vertices[cell[0]], vertices[cell[1]], vertices[cell[2]]);
            if area <= 0.0 {
                return Err(Error::DegenerateCell { cell: c, area });
            }
        }

        let mut lookup: HashMap<(usize, usize), usize> = HashMap::with_capacity(cells.len() * 2);
        let mut facets: Vec<Facet> = Vec::with_capacity(cells.len() * 2);
        let mut cell_facets = vec![[usize::MAX; 3]; cells.len()];
        for (c, cell) in cells.iter().enumerate() {
            for i in 0..3 {
                let (a, b) = (cell[i], cell[(i + 1) % 3]);
                match lookup.get(&edge_key(a, b)) {
                    Some(&f) => {
                        let facet = &mut facets[f];
                        if facet.neighbor.is_some() {
                            return Err(Error::InvalidArgument(format!(
                                "edge ({a}, {b}) shared by more than two cells"
                            )));
                        }
                        facet.neighbor = Some((c, i));
                        cell_facets[c][i] = f;
                    }
                    None => {
                        lookup.insert(edge_key(a, b), facets.len());
                        cell_facets[c][i] = facets.len();
                        facets.push(Facet {
                            vertices: [a, b],
                            owner: c,
                            owner_edge: i,
                            neighbor: None,
                        });
                    }
                }
            }
        }

        let mut facet_tag = Vec::with_capacity(facets.len());
        for f in &facets {
            if f.is_boundary() {
                let tag = tag_of(f.vertices[0], f.vertices[1])?;
                if tag == FacetTag::Interior {
                    return Err(Error::InvalidArgument(format!(
                        "boundary facet ({}, {}) tagged Interior",
                        f.vertices[0], f.vertices[1]
                    )));
                }
                facet_tag.push(tag);
            } else {
                facet_tag.push(FacetTag::Interior);
            }
        }

        Ok(Mesh {
            vertices,
            cells,
            refinement_edge,
            facets,
            facet_tag,
            cell_facets,
            parent,
        })
    }

    fn from_geometry(
        vertices: Vec<Point>,
        cells: Vec<[usize; 3]>,
        nav_rule: &dyn Fn(Point, Point) -> bool,
    ) -> Result<Mesh> {
        let refinement_edge = cells
            .iter()
            .map(|c| longest_edge([vertices[c[0]], vertices[c[1]], vertices[c[2]]]))
            .collect();
        let parent = vec![None; cells.len()];
        let verts = vertices.clone();
        Mesh::new(vertices, cells, refinement_edge, parent, |a, b| {
            Ok(if nav_rule(verts[a], verts[b]) {
                FacetTag::Navier
            } else {
                FacetTag::Dirichlet
            })
        })
    }

    /// Uniform `n x n` grid on the unit square, each square split along the
    /// diagonal from its lower-left to its upper-right corner.
    pub fn unit_square(n: usize, nav_rule: &dyn Fn(Point, Point) -> bool) -> Result<Mesh> {
        if n == 0 {
            return Err(Error::InvalidArgument("subdivision count must be at least 1".into()));
        }
        let h = 1.0 / n as f64;
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut cells = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            }
        }
        Mesh::from_geometry(vertices, cells, nav_rule)
    }

    /// Rotated L-shape `(-1,1)^2 \ (-1,0)^2` built from three unit squares with
    /// `n` subdivisions each. Facets on `x = 0` and `y = 0` are Navier.
    pub fn lshape(n: usize) -> Result<Mesh> {
        if n == 0 {
            return Err(Error::InvalidArgument("subdivision count must be at least 1".into()));
        }
        let m = 2 * n;
        let h = 1.0 / n as f64;
        let mut index = vec![usize::MAX; (m + 1) * (m + 1)];
        let mut vertices = Vec::new();
        for j in 0..=m {
            for i in 0..=m {
                if i < n && j < n {
                    continue;
                }
                index[j * (m + 1) + i] = vertices.len();
                vertices.push([-1.0 + i as f64 * h, -1.0 + j as f64 * h]);
            }
        }
        let idx = |i: usize, j: usize| index[j * (m + 1) + i];
        let mut cells = Vec::with_capacity(6 * n * n);
        for j in 0..m {
            for i in 0..m {
                if i < n && j < n {
                    continue;
                }
                let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            }
        }
        Mesh::from_geometry(vertices, cells, &navier_on_axes)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn cell_points(&self, c: usize) -> [Point; 3] {
        let [a, b, d] = self.cells[c];
        [self.vertices[a], self.vertices[b], self.vertices[d]]
    }

    pub fn cell_area(&self, c: usize) -> f64 {
        let [p, q, r] = self.cell_points(c);
        signed_area(p, q, r)
    }

    /// Longest edge of the cell.
    pub fn cell_diameter(&self, c: usize) -> f64 {
        let p = self.cell_points(c);
        (0..3).map(|i| dist(p[i], p[(i + 1) % 3])).fold(0.0, f64::max)
    }

    pub fn h_max(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_diameter(c)).fold(0.0, f64::max)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_area(c)).sum()
    }

    pub fn facet_geometry(&self, f: usize) -> FacetGeometry {
        let facet = &self.facets[f];
        let a = self.vertices[facet.vertices[0]];
        let b = self.vertices[facet.vertices[1]];
        let length = dist(a, b);
        let tangent = [(b[0] - a[0]) / length, (b[1] - a[1]) / length];
        FacetGeometry {
            length,
            normal: [tangent[1], -tangent[0]],
            tangent,
            owner: facet.owner,
            neighbor: facet.neighbor.map(|(c, _)| c),
        }
    }

    pub fn facets_tagged(&self, tag: FacetTag) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_facets()).filter(move |&f| self.facet_tag[f] == tag)
    }

    /// Newest-vertex bisection of every marked cell plus the closure needed
    /// to keep the mesh conforming.
    pub fn refine(&self, marked: &[usize]) -> Result<Mesh> {
        if let Some(&c) = marked.iter().find(|&&c| c >= self.n_cells()) {
            return Err(Error::InvalidArgument(format!(
                "marked cell {c} out of range ({} cells)",
                self.n_cells()
            )));
        }
        if marked.is_empty() {
            return Ok(self.clone());
        }

        let ref_facet = |c: usize| self.cell_facets[c][self.refinement_edge[c] as usize];
        let mut edge_marked = vec![false; self.n_facets()];
        let mut work: Vec<usize> = Vec::new();
        for &c in marked {
            let f = ref_facet(c);
            if !edge_marked[f] {
                edge_marked[f] = true;
                work.extend(self.facets[f].cells());
            }
        }
        // Closure: a cell with any marked edge must also split its refinement edge.
        while let Some(c) = work.pop() {
            let f = ref_facet(c);
            if !edge_marked[f] {
                edge_marked[f] = true;
                work.extend(self.facets[f].cells());
            }
        }

        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut tags: HashMap<(usize, usize), FacetTag> = HashMap::new();
        for (f, facet) in self.facets.iter().enumerate() {
            let [a, b] = facet.vertices;
            let tag = self.facet_tag[f];
            if edge_marked[f] {
                let (pa, pb) = (self.vertices[a], self.vertices[b]);
                let m = vertices.len();
                vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                midpoint.insert(edge_key(a, b), m);
                if tag != FacetTag::Interior {
                    tags.insert(edge_key(a, m), tag);
                    tags.insert(edge_key(m, b), tag);
                }
            } else if tag != FacetTag::Interior {
                tags.insert(edge_key(a, b), tag);
            }
        }

        let mut cells = Vec::with_capacity(self.n_cells() * 2);
        let mut refinement_edge = Vec::with_capacity(self.n_cells() * 2);
        let mut parent = Vec::with_capacity(self.n_cells() * 2);
        for c in 0..self.n_cells() {
            let r = self.refinement_edge[c] as usize;
            let v = self.cells[c];
            // Rotate so the refinement edge is local edge 0.
            let tri = [v[r], v[(r + 1) % 3], v[(r + 2) % 3]];
            bisect(tri, &midpoint, &mut |t, e| {
                cells.push(t);
                refinement_edge.push(e);
                parent.push(Some(c));
            });
        }

        Mesh::new(vertices, cells, refinement_edge, parent, |a, b| {
            tags.get(&edge_key(a, b)).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("boundary facet ({a}, {b}) has no inherited tag"))
            })
        })
    }

    /// Checks orientation, facet incidence and the absence of hanging vertices.
    pub fn check_conformity(&self) -> Result<()> {
        for c in 0..self.n_cells() {
            let area = self.cell_area(c);
            if area <= 0.0 {
                return Err(Error::DegenerateCell { cell: c, area });
            }
        }
        let mut incidence = vec![0usize; self.n_facets()];
        for cf in &self.cell_facets {
            for &f in cf {
                incidence[f] += 1;
            }
        }
        for (f, facet) in self.facets.iter().enumerate() {
            let expected = if facet.is_boundary() { 1 } else { 2 };
            if incidence[f] != expected {
                return Err(Error::InvalidArgument(format!(
                    "facet {f} has {} incident cells, expected {expected}",
                    incidence[f]
                )));
            }
            let interior_tag = self.facet_tag[f] == FacetTag::Interior;
            if interior_tag == facet.is_boundary() {
                return Err(Error::InvalidArgument(format!("facet {f} carries an inconsistent tag")));
            }
        }

        // A hanging vertex always sits inside an edge that has only one incident cell.
        let mut order: Vec<usize> = (0..self.n_vertices()).collect();
        order.sort_by(|&i, &j| self.vertices[i][0].total_cmp(&self.vertices[j][0]));
        let xs: Vec<f64> = order.iter().map(|&i| self.vertices[i][0]).collect();
        for facet in self.facets.iter().filter(|f| f.is_boundary()) {
            let [a, b] = facet.vertices;
            let (pa, pb) = (self.vertices[a], self.vertices[b]);
            let len = dist(pa, pb);
            let tol = 1e-10 * len;
            let lo = xs.partition_point(|&x| x < pa[0].min(pb[0]) - tol);
            let hi = xs.partition_point(|&x| x <= pa[0].max(pb[0]) + tol);
            for &v in &order[lo..hi] {
                if v == a || v == b {
                    continue;
                }
                let p = self.vertices[v];
                let t = ((p[0] - pa[0]) * (pb[0] - pa[0]) + (p[1] - pa[1]) * (pb[1] - pa[1])) / (len * len);
                if t <= 0.0 || t >= 1.0 {
                    continue;
                }
                if signed_area(pa, pb, p).abs() * 2.0 / len <= tol {
                    return Err(Error::InvalidArgument(format!(
                        "hanging vertex {v} on edge ({a}, {b})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the plain-text `ns-mesh 1` format.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let mut s = String::from("ns-mesh 1\n");
        writeln!(s, "{}", self.n_vertices()).unwrap();
        for p in &self.vertices {
            writeln!(s, "{:.16e} {:.16e}", p[0], p[1]).unwrap();
        }
        writeln!(s, "{}", self.n_cells()).unwrap();
        for c in &self.cells {
            writeln!(s, "{} {} {}", c[0], c[1], c[2]).unwrap();
        }
        let boundary: Vec<usize> = (0..self.n_facets()).filter(|&f| self.facets[f].is_boundary()).collect();
        writeln!(s, "{}", boundary.len()).unwrap();
        for f in boundary {
            let [a, b] = self.facets[f].vertices;
            let tag = match self.facet_tag[f] {
                FacetTag::Navier => "NAV",
                _ => "D",
            };
            writeln!(s, "{a} {b} {tag}").unwrap();
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Reads the `ns-mesh 1` format. Refinement edges are reset to the longest edge.
    pub fn read_text<R: Read>(r: R) -> Result<Mesh> {
        let mut lines = Lines::new(r);
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };

        let (n, header) = lines.next()?;
        if header.trim() != "ns-mesh 1" {
            return Err(perr(n, "expected header 'ns-mesh 1'"));
        }

        let nv = lines.count("vertex")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (n, l) = lines.next()?;
            let xy: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| perr(n, "bad coordinate"))?;
            if xy.len() != 2 {
                return Err(perr(n, "expected 2 coordinates"));
            }
            vertices.push([xy[0], xy[1]]);
        }
        let nc = lines.count("cell")?;
        let mut cells = Vec::with_capacity(nc);
        for _ in 0..nc {
            let (n, l) = lines.next()?;
            let ids: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| perr(n, "bad vertex index"))?;
            if ids.len() != 3 {
                return Err(perr(n, "expected 3 vertex indices"));
            }
            cells.push([ids[0], ids[1], ids[2]]);
        }
        let nb = lines.count("boundary facet")?;
        let mut tags = HashMap::with_capacity(nb);
        for _ in 0..nb {
            let (n, l) = lines.next()?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(perr(n, "expected 'i j TAG'"));
            }
            let a: usize = toks[0].parse().map_err(|_| perr(n, "bad vertex index"))?;
            let b: usize = toks[1].parse().map_err(|_| perr(n, "bad vertex index"))?;
            let tag = match toks[2] {
                "D" => FacetTag::Dirichlet,
                "NAV" => FacetTag::Navier,
                other => return Err(perr(n, &format!("unknown tag '{other}'"))),
            };
            tags.insert(edge_key(a, b), tag);
        }

        let refinement_edge = cells
            .iter()
            .map(|c| longest_edge([vertices[c[0]], vertices[c[1]], vertices[c[2]]]))
            .collect();
        let parent = vec![None; cells.len()];
        Mesh::new(vertices, cells, refinement_edge, parent, |a, b| {
            tags.get(&edge_key(a, b))
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("boundary facet ({a}, {b}) missing from file")))
        })
    }
}

struct Lines<R: Read> {
    inner: std::iter::Enumerate<std::io::Lines<BufReader<R>>>,
}

impl<R: Read> Lines<R> {
    fn new(r: R) -> Self {
        Lines { inner: BufReader::new(r).lines().enumerate() }
    }

    /// Next non-blank line with its 1-based line number.
    fn next(&mut self) -> Result<(usize, String)> {
        for (i, l) in self.inner.by_ref() {
            let l = l?;
            if !l.trim().is_empty() {
                return Ok((i + 1, l));
            }
        }
        Err(Error::Parse { line: 0, msg: "unexpected end of file".into() })
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let (n, l) = self.next()?;
        l.trim().parse().map_err(|_| Error::Parse { line: n, msg: format!("expected {what} count") })
    }
}

/// Recursively bisects `tri` (refinement edge = local edge 0) while its
/// refinement edge carries a midpoint.
fn bisect(
    tri: [usize; 3],
    midpoint: &HashMap<(usize, usize), usize>,
    emit: &mut dyn FnMut([usize; 3], u8),
) {
    let [a, b, c] = tri;
    match midpoint.get(&edge_key(a, b)) {
        None => emit(tri, 0),
        Some(&m) => {
            // Children keep CCW order; their refinement edge is opposite `m`.
            bisect([c, a, m], midpoint, emit);
            bisect([b, c, m], midpoint, emit);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_tags(m: &Mesh) -> (usize, usize) {
        let nav = m.facets_tagged(FacetTag::Navier).count();
        let dir = m.facets_tagged(FacetTag::Dirichlet).count();
        (nav, dir)
    }

    #[test]
    fn unit_square_counts() {
        let m = Mesh::unit_square(4, &navier_on_top).unwrap();
        assert_eq!(m.n_vertices(), 25);
        assert_eq!(m.n_cells(), 32);
        for c in 0..m.n_cells() {
            assert!((m.cell_diameter(c) - 2f64.sqrt() / 4.0).abs() < 1e-15);
        }
        assert!((m.h_max() - 0.3536).abs() < 5e-5);
        assert_eq!(count_tags(&m), (4, 12));
        m.check_conformity().unwrap();

        let m1 = Mesh::unit_square(1, &never_navier).unwrap();
        assert_eq!((m1.n_vertices(), m1.n_cells()), (4, 2));
        assert!((m1.h_max() - 2f64.sqrt()).abs() < 1e-15);
        assert!(Mesh::unit_square(0, &never_navier).is_err());
    }

    #[test]
    fn lshape_counts() {
        let m = Mesh::lshape(1).unwrap();
        assert_eq!((m.n_vertices(), m.n_cells()), (8, 6));
        assert!((m.h_max() - std::f64::consts::SQRT_2).abs() < 1e-14);
        assert_eq!(count_tags(&m).0, 2);
        for n in 1..5 {
            let m = Mesh::lshape(n).unwrap();
            let corners = m.vertices.iter().filter(|p| p[0] == 0.0 && p[1] == 0.0).count();
            assert_eq!(corners, 1);
            assert!((m.total_area() - 3.0).abs() < 1e-12);
            m.check_conformity().unwrap();
        }
        assert!(Mesh::lshape(0).is_err());
    }

    #[test]
    fn facet_normals() {
        let m = Mesh::unit_square(2, &navier_on_top).unwrap();
        for f in m.facets_tagged(FacetTag::Navier) {
            let g = m.facet_geometry(f);
            assert!((g.normal[0]).abs() < 1e-15 && (g.normal[1] - 1.0).abs() < 1e-15);
            assert!((g.tangent[0].abs() - 1.0).abs() < 1e-15);
        }
        for f in 0..m.n_facets() {
            let g = m.facet_geometry(f);
            let [a, b] = m.facets[f].vertices;
            assert!((g.length - dist(m.vertices[a], m.vertices[b])).abs() < 1e-15);
            assert!((g.normal[0] * g.tangent[0] + g.normal[1] * g.tangent[1]).abs() < 1e-15);
            let fa = &m.facets[f];
            if fa.is_boundary() {
                let p = m.vertices[a];
                if p[1] == 0.0 && m.vertices[b][1] == 0.0 {
                    assert_eq!(g.normal, [0.0, -1.0]);
                }
            } else {
                assert!(fa.owner < fa.neighbor.unwrap().0);
            }
        }
    }

    #[test]
    fn refine_single_cell_is_conforming() {
        let m = Mesh::unit_square(1, &navier_on_top).unwrap();
        for c in 0..2 {
            let r = m.refine(&[c]).unwrap();
            r.check_conformity().unwrap();
            assert!(r.n_cells() >= 3);
            assert!((r.total_area() - 1.0).abs() < 1e-14);
        }
        let both = m.refine(&[0, 1]).unwrap();
        assert!(both.n_cells() >= 4);
        assert!(both.h_max() < m.h_max());
        assert!(m.refine(&[]).unwrap().n_cells() == 2);
        assert!(m.refine(&[5]).is_err());
    }

    #[test]
    fn uniform_refinement_halves_diameter_every_two_steps() {
        let mut m = Mesh::unit_square(4, &navier_on_top).unwrap();
        for k in 1..=4 {
            let all: Vec<usize> = (0..m.n_cells()).collect();
            m = m.refine(&all).unwrap();
            m.check_conformity().unwrap();
            let bound = 2f64.sqrt() / 4.0 * 2f64.powf(-(k as f64) / 2.0);
            assert!(m.h_max() <= bound * (1.0 + 1e-12), "k={k}: {} > {bound}", m.h_max());
        }
        assert_eq!(m.n_cells(), 32 * 16);
    }

    #[test]
    fn navier_tags_inherited() {
        let m = Mesh::unit_square(2, &navier_on_top).unwrap();
        let top: Vec<usize> = (0..m.n_cells())
            .filter(|&c| m.cell_points(c).iter().any(|p| p[1] == 1.0))
            .collect();
        let r = m.refine(&top).unwrap();
        let nav_len: f64 = r.facets_tagged(FacetTag::Navier).map(|f| r.facet_geometry(f).length).sum();
        assert!((nav_len - 1.0).abs() < 1e-14);
        for f in r.facets_tagged(FacetTag::Navier) {
            let [a, b] = r.facets[f].vertices;
            assert!(navier_on_top(r.vertices[a], r.vertices[b]));
        }
    }

    #[test]
    fn text_round_trip() {
        let m = Mesh::lshape(2).unwrap().refine(&[0, 3, 7]).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = Mesh::read_text(&buf[..]).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.cells, m.cells);
        assert_eq!(back.facet_tag, m.facet_tag);
        assert!(Mesh::read_text("ns-mesh 2\n".as_bytes()).is_err());
    }
}
