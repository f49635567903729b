//! Triangulated disk meshes.
//!
//! Meshes are built from concentric rings of nodes: ring `k` carries `6k`
//! equally spaced nodes and neighbouring rings are stitched together by a
//! merge walk over node angles. The resulting triangulation is deterministic
//! and quasi-uniform, and its outer polygon is inscribed in the circle.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::MeshError;
use crate::fem::StiffnessPattern;

/// Relative tolerance on boundary node radii.
const BOUNDARY_RADIUS_TOL: f64 = 1e-9;

/// Ring count for a target size `h`.
///
/// The factor 5/3 puts the node count of `(0.5, 1/64)` and `(0.5, 0.01)` close to
/// the reference meshes of the original experiments; the resulting edges are
/// about `0.65 h` long.
fn ring_count(radius: f64, h: f64) -> usize {
    (5.0 * radius / (3.0 * h)).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub a: usize,
    pub b: usize,
    /// Polar angle of the edge midpoint in `[0, 2π)`.
    pub mid_angle: f64,
}

/// An immutable P1 triangulation together with the per-element geometry used
/// throughout assembly and integration.
#[derive(Debug)]
pub struct TriMesh {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    elem_area: Vec<f64>,
    elem_grad: Vec<[[f64; 2]; 3]>,
    node_mass: Vec<f64>,
    boundary_mass: Vec<f64>,
    radius: f64,
    id: u64,
    pattern: OnceLock<StiffnessPattern>,
}

impl Clone for TriMesh {
    fn clone(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            triangles: self.triangles.clone(),
            boundary_edges: self.boundary_edges.clone(),
            elem_area: self.elem_area.clone(),
            elem_grad: self.elem_grad.clone(),
            node_mass: self.node_mass.clone(),
            boundary_mass: self.boundary_mass.clone(),
            radius: self.radius,
            id: self.id,
            pattern: OnceLock::new(),
        }
    }
}

impl PartialEq for TriMesh {
    fn eq(&self, other: &Self) -> bool {
        self.triangles == other.triangles
            && self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(p, q)| p[0].to_bits() == q[0].to_bits() && p[1].to_bits() == q[1].to_bits())
    }
}

impl TriMesh {
    /// Builds a mesh from raw nodes and counter-clockwise triangles, checking
    /// every structural invariant.
    pub fn from_parts(nodes: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if nodes.is_empty() || triangles.is_empty() {
            return Err(MeshError::Invalid("mesh has no nodes or no triangles".into()));
        }
        if let Some(i) = nodes.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(MeshError::Invalid(format!("node {i} has non-finite coordinates")));
        }

        let mut elem_area = Vec::with_capacity(triangles.len());
        let mut elem_grad = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&n| n >= nodes.len()) {
                return Err(MeshError::Invalid(format!("triangle {t} references missing node {bad}")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Invalid(format!("triangle {t} has repeated nodes")));
            }
            let (area, grad) = p1_geometry(&nodes, tri);
            if !(area > 0.0) {
                return Err(MeshError::Invalid(format!(
                    "triangle {t} has non-positive signed area {area:e} (nodes must be counter-clockwise)"
                )));
            }
            elem_area.push(area);
            elem_grad.push(grad);
        }

        // Directed edge a->b belongs to the triangle on its left. Boundary edges
        // have no reverse partner.
        let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let e = (tri[k], tri[(k + 1) % 3]);
                if directed.insert(e, t).is_some() {
                    return Err(MeshError::Invalid(format!(
                        "edge ({}, {}) appears twice with the same orientation",
                        e.0, e.1
                    )));
                }
            }
        }
        let mut next: HashMap<usize, usize> = HashMap::new();
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) && next.insert(a, b).is_some() {
                return Err(MeshError::Invalid(format!("boundary node {a} starts two boundary edges")));
            }
        }
        if next.len() < 3 {
            return Err(MeshError::Invalid("mesh has no closed boundary".into()));
        }

        let radius = next.keys().map(|&a| norm(nodes[a])).sum::<f64>() / next.len() as f64;
        for &a in next.keys() {
            let r = norm(nodes[a]);
            if (r - radius).abs() > BOUNDARY_RADIUS_TOL * radius.max(1.0) {
                return Err(MeshError::Invalid(format!("boundary node {a} lies at radius {r}, expected {radius}")));
            }
        }

        // Walk the loop starting from the edge with the smallest midpoint angle.
        let mid_angle = |a: usize, b: usize| {
            let m = [(nodes[a][0] + nodes[b][0]) / 2.0, (nodes[a][1] + nodes[b][1]) / 2.0];
            polar_angle(m)
        };
        let start = next
            .iter()
            .map(|(&a, &b)| (a, mid_angle(a, b)))
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
            .map(|(a, _)| a)
            .expect("non-empty boundary");
        let mut boundary_edges = Vec::with_capacity(next.len());
        let mut a = start;
        loop {
            let b = next[&a];
            boundary_edges.push(BoundaryEdge { a, b, mid_angle: mid_angle(a, b) });
            a = b;
            if a == start {
                break;
            }
            if boundary_edges.len() > next.len() {
                return Err(MeshError::Invalid("boundary does not close".into()));
            }
        }
        if boundary_edges.len() != next.len() {
            return Err(MeshError::Invalid(format!(
                "boundary splits into several loops ({} of {} edges in the first)",
                boundary_edges.len(),
                next.len()
            )));
        }
        if boundary_edges.windows(2).any(|w| w[1].mid_angle <= w[0].mid_angle) {
            return Err(MeshError::Invalid("boundary midpoint angles are not increasing".into()));
        }

        let mut node_mass = vec![0.0; nodes.len()];
        for (tri, &area) in triangles.iter().zip(&elem_area) {
            for &n in tri {
                node_mass[n] += area / 3.0;
            }
        }
        if let Some(n) = node_mass.iter().position(|&m| m == 0.0) {
            return Err(MeshError::Invalid(format!("node {n} belongs to no triangle")));
        }
        let mut boundary_mass = vec![0.0; nodes.len()];
        for e in &boundary_edges {
            let len = dist(nodes[e.a], nodes[e.b]);
            boundary_mass[e.a] += len / 2.0;
            boundary_mass[e.b] += len / 2.0;
        }

        let id = fingerprint(&nodes, &triangles);
        Ok(Self {
            nodes,
            triangles,
            boundary_edges,
            elem_area,
            elem_grad,
            node_mass,
            boundary_mass,
            radius,
            id,
            pattern: OnceLock::new(),
        })
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn elem_area(&self) -> &[f64] {
        &self.elem_area
    }

    /// Constant gradients of the three P1 hat functions on each triangle.
    pub fn elem_grad(&self) -> &[[[f64; 2]; 3]] {
        &self.elem_grad
    }

    /// Lumped node masses: a third of the area of every adjacent triangle.
    pub fn node_mass(&self) -> &[f64] {
        &self.node_mass
    }

    /// `∫_Γ φ_i ds` over the polygonal boundary.
    pub fn boundary_mass(&self) -> &[f64] {
        &self.boundary_mass
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Identity derived from the node coordinates and connectivity.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn total_area(&self) -> f64 {
        self.elem_area.iter().sum()
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    pub fn max_edge_length(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|tri| (0..3).map(move |k| (tri[k], tri[(k + 1) % 3])))
            .map(|(a, b)| dist(self.nodes[a], self.nodes[b]))
            .fold(0.0, f64::max)
    }

    pub(crate) fn pattern(&self) -> &StiffnessPattern {
        self.pattern.get_or_init(|| StiffnessPattern::new(self))
    }
}

/// Signed area and hat-function gradients of one triangle.
fn p1_geometry(nodes: &[[f64; 2]], tri: &[usize; 3]) -> (f64, [[f64; 2]; 3]) {
    let [p0, p1, p2] = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
    let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    let area = det / 2.0;
    // ∇φ_k = perp(edge opposite k) / (2|T|)
    let grad = [
        [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
        [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
        [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
    ];
    (area, grad)
}

fn fingerprint(nodes: &[[f64; 2]], triangles: &[[usize; 3]]) -> u64 {
    // FNV-1a over coordinate bits and indices.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for byte in x.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(nodes.len() as u64);
    for p in nodes {
        eat(p[0].to_bits());
        eat(p[1].to_bits());
    }
    eat(triangles.len() as u64);
    for t in triangles {
        for &n in t {
            eat(n as u64);
        }
    }
    h
}

fn norm(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Polar angle mapped into `[0, 2π)`.
pub fn polar_angle(p: [f64; 2]) -> f64 {
    let a = p[1].atan2(p[0]);
    if a < 0.0 {
        let w = a + 2.0 * PI;
        if w >= 2.0 * PI {
            0.0
        } else {
            w
        }
    } else {
        a
    }
}

/// Generates the concentric-ring triangulation of the disk of the given radius.
pub fn generate_disk_mesh(radius: f64, h: f64) -> Result<TriMesh, MeshError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(MeshError::Parameter(format!("radius must be positive, got {radius}")));
    }
    if !(h > 0.0) || h >= radius {
        return Err(MeshError::Parameter(format!("mesh size must satisfy 0 < h < radius, got h = {h}")));
    }
    let rings = ring_count(radius, h);

    let ring_start = |k: usize| if k == 0 { 0 } else { 1 + 3 * k * (k - 1) };
    let ring_len = |k: usize| if k == 0 { 1 } else { 6 * k };

    let mut nodes = Vec::with_capacity(ring_start(rings + 1));
    nodes.push([0.0, 0.0]);
    for k in 1..=rings {
        let r = if k == rings { radius } else { radius * k as f64 / rings as f64 };
        let n = ring_len(k);
        for j in 0..n {
            let theta = 2.0 * PI * j as f64 / n as f64;
            nodes.push([r * theta.cos(), r * theta.sin()]);
        }
    }

    let mut triangles = Vec::with_capacity(6 * rings * rings);
    for k in 1..=rings {
        let (inner0, ni) = (ring_start(k - 1), ring_len(k - 1));
        let (outer0, no) = (ring_start(k), ring_len(k));
        if k == 1 {
            for j in 0..no {
                triangles.push([0, outer0 + j, outer0 + (j + 1) % no]);
            }
            continue;
        }
        // Merge walk: advance whichever ring has the smaller next angle.
        // Angles compare exactly as (i+1)/ni versus (j+1)/no.
        let (mut i, mut j) = (0, 0);
        while i < ni || j < no {
            let advance_outer = i == ni || (j < no && (j + 1) * ni <= (i + 1) * no);
            if advance_outer {
                triangles.push([inner0 + i % ni, outer0 + j, outer0 + (j + 1) % no]);
                j += 1;
            } else {
                triangles.push([inner0 + i, outer0 + j % no, inner0 + (i + 1) % ni]);
                i += 1;
            }
        }
    }
    for tri in &mut triangles {
        if p1_geometry(&nodes, tri).0 < 0.0 {
            tri.swap(1, 2);
        }
    }
    TriMesh::from_parts(nodes, triangles)
}

/// Serializes a mesh in the plain-text `aetmesh 1` format.
pub fn write_mesh_string(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(48 * mesh.node_count() + 24 * mesh.triangle_count());
    s.push_str("aetmesh 1\n");
    let _ = writeln!(s, "{}", mesh.node_count());
    for p in mesh.nodes() {
        // `{:?}` prints the shortest representation that parses back exactly.
        let _ = writeln!(s, "{:?} {:?}", p[0], p[1]);
    }
    let _ = writeln!(s, "{}", mesh.triangle_count());
    for t in mesh.triangles() {
        let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    std::fs::write(path, write_mesh_string(mesh))?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    let text = std::fs::read_to_string(path)?;
    parse_mesh(&text)
}

/// Parses the `aetmesh 1` format. Errors carry 1-based line numbers.
pub fn parse_mesh(text: &str) -> Result<TriMesh, MeshError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| MeshError::Parse {
            line: text.lines().count() + 1,
            message: format!("unexpected end of file, expected {what}"),
        })
    };
    let perr = |line: usize, message: String| MeshError::Parse { line, message };

    let (line, header) = next("header `aetmesh 1`")?;
    if header != "aetmesh 1" {
        return Err(perr(line, format!("bad header {header:?}, expected `aetmesh 1`")));
    }
    let (line, count) = next("node count")?;
    let n_nodes: usize = count.parse().map_err(|_| perr(line, format!("bad node count {count:?}")))?;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (line, l) = next("node coordinates")?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| perr(line, format!("bad coordinate: {e}")))?;
        if v.len() != 2 {
            return Err(perr(line, format!("expected 2 coordinates, found {}", v.len())));
        }
        nodes.push([v[0], v[1]]);
    }
    let (line, count) = next("triangle count")?;
    let n_tris: usize = count.parse().map_err(|_| perr(line, format!("bad triangle count {count:?}")))?;
    let mut triangles = Vec::with_capacity(n_tris);
    for _ in 0..n_tris {
        let (line, l) = next("triangle indices")?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| perr(line, format!("bad node index: {e}")))?;
        if v.len() != 3 {
            return Err(perr(line, format!("expected 3 node indices, found {}", v.len())));
        }
        if let Some(&bad) = v.iter().find(|&&i| i >= n_nodes) {
            return Err(perr(line, format!("node index {bad} out of range (node count {n_nodes})")));
        }
        let tri = [v[0], v[1], v[2]];
        if p1_geometry(&nodes, &tri).0 <= 0.0 {
            return Err(perr(line, "triangle has non-positive signed area".into()));
        }
        triangles.push(tri);
    }
    if let Some((line, l)) = lines.next() {
        return Err(perr(line, format!("trailing content {l:?}")));
    }
    TriMesh::from_parts(nodes, triangles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn check_invariants(mesh: &TriMesh) {
        assert!(mesh.elem_area().iter().all(|&a| a > 0.0));
        for g in mesh.elem_grad() {
            assert_abs_diff_eq!(g[0][0] + g[1][0] + g[2][0], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(g[0][1] + g[1][1] + g[2][1], 0.0, epsilon = 1e-9);
        }
        let total = mesh.total_area();
        assert!(total <= PI * mesh.radius().powi(2));
        let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
        for t in mesh.triangles() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let boundary: Vec<_> = edge_use.iter().filter(|(_, &c)| c == 1).collect();
        assert!(edge_use.values().all(|&c| c == 1 || c == 2));
        assert_eq!(boundary.len(), mesh.boundary_edges().len());
        let angles: Vec<f64> = mesh.boundary_edges().iter().map(|e| e.mid_angle).collect();
        assert!(angles.windows(2).all(|w| w[1] > w[0]));
        assert!(angles.iter().all(|&a| (0.0..2.0 * PI).contains(&a)));
    }

    #[test]
    fn coarse_mesh_has_rings_and_invariants() {
        let mesh = generate_disk_mesh(0.5, 0.25).unwrap();
        // at least three rings: 1 + 6 + 12 + 18 nodes
        assert!(mesh.node_count() >= 37);
        check_invariants(&mesh);
        assert!(mesh.max_edge_length() <= 1.5 * 0.25);
    }

    #[test]
    fn area_deficit_is_second_order() {
        let deficit = |h: f64| PI / 4.0 - generate_disk_mesh(0.5, h).unwrap().total_area();
        let (d1, d2) = (deficit(1.0 / 8.0), deficit(1.0 / 16.0));
        assert!(d1 > 0.0 && d2 > 0.0);
        let ratio = d1 / d2;
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
        // C fitted at h = 1/8 bounds the deficit at h = 1/16
        let c = d1 / (1.0f64 / 8.0).powi(2);
        assert!(d2 <= c * (1.0f64 / 16.0).powi(2) * 1.05);
    }

    #[test]
    fn reconstruction_mesh_counts_match_reference_scale() {
        let mesh = generate_disk_mesh(0.5, 1.0 / 64.0).unwrap();
        let node_ratio = mesh.node_count() as f64 / 8272.0;
        let tri_ratio = mesh.triangle_count() as f64 / 16140.0;
        assert!((0.7..=1.3).contains(&node_ratio), "{node_ratio}");
        assert!((0.7..=1.3).contains(&tri_ratio), "{tri_ratio}");
        assert!(mesh.max_edge_length() <= 1.5 / 64.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_disk_mesh(0.5, 0.07).unwrap();
        let b = generate_disk_mesh(0.5, 0.07).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_disk_mesh(0.5, 0.5).is_err());
        assert!(generate_disk_mesh(0.5, 0.0).is_err());
        assert!(generate_disk_mesh(-1.0, 0.1).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mesh = generate_disk_mesh(0.5, 0.1).unwrap();
        let parsed = parse_mesh(&write_mesh_string(&mesh)).unwrap();
        assert_eq!(parsed, mesh);
        assert_eq!(parsed.id(), mesh.id());
    }

    #[test]
    fn rejects_empty_and_negative_area() {
        assert!(matches!(parse_mesh(""), Err(MeshError::Parse { .. })));
        let text = "aetmesh 1\n3\n0 0\n1 0\n0 1\n1\n0 2 1\n";
        match parse_mesh(text) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_names_line() {
        let text = "aetmesh 1\n3\n0 0\n1 zero\n0 1\n1\n0 1 2\n";
        match parse_mesh(text) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
