//! Eyepiece mirror mesh: generation, equivalent center and edge augmentation.

mod shape;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use shape::{BoundaryCurve, EyeShape, Polygon};

use crate::error::{Error, Result};
use crate::pseudofem::{DeformationOracle, DesignVariables};

pub const BOUNDARY_NODES: usize = 102;
pub const ANCHOR_NODES: usize = 16;
pub const DEFAULT_NODE_COUNT: usize = 651;
/// Radius around the equivalent center whose nodes are wired to the anchors, mm.
pub const AUGMENT_RADIUS: f64 = 10.0;

const MESH_FORMAT: &str = "varifocal-mesh";
const MESH_VERSION: u32 = 1;

/// Full description of a mesh to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSpec {
    pub shape: EyeShape,
    pub node_count: usize,
    pub boundary_count: usize,
    pub anchor_count: usize,
    pub seed: u64,
}

impl Default for MeshSpec {
    fn default() -> Self {
        Self {
            shape: EyeShape::default(),
            node_count: DEFAULT_NODE_COUNT,
            boundary_count: BOUNDARY_NODES,
            anchor_count: ANCHOR_NODES,
            seed: 0,
        }
    }
}

/// Triangulated planar mirror surface. Positions are in mm with `z = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Undirected, `i < j`, sorted, each pair once.
    pub edges: Vec<[usize; 2]>,
    /// Perimeter order, counter-clockwise.
    pub boundary: Vec<usize>,
    /// Subset of `boundary`, uniform by arc length.
    pub anchors: Vec<usize>,
}

/// Mesh plus the long-range edges wiring central nodes to the anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMesh {
    pub mesh: Mesh,
    /// `(central node, anchor)` pairs.
    pub augmented_edges: Vec<[usize; 2]>,
    pub equivalent_center: [f64; 2],
    pub radius: f64,
}

pub fn generate_eyepiece_mesh(shape: &EyeShape, target_node_count: usize, seed: u64) -> Result<Mesh> {
    generate(&MeshSpec {
        shape: *shape,
        node_count: target_node_count,
        seed,
        ..MeshSpec::default()
    })
}

pub fn generate(spec: &MeshSpec) -> Result<Mesh> {
    if spec.boundary_count < 3 {
        return Err(Error::InvalidArgument("boundary_count must be at least 3".into()));
    }
    if spec.node_count < spec.boundary_count + 3 {
        return Err(Error::InvalidArgument(format!(
            "node_count {} must be at least boundary_count + 3 = {}",
            spec.node_count,
            spec.boundary_count + 3
        )));
    }
    if spec.anchor_count == 0 || spec.anchor_count > spec.boundary_count {
        return Err(Error::InvalidArgument(format!(
            "anchor_count {} must be in 1..={}",
            spec.anchor_count, spec.boundary_count
        )));
    }
    let curve = BoundaryCurve::eye(&spec.shape)?;
    let boundary_pts = curve.equispaced(spec.boundary_count);
    let spacing = curve.perimeter() / spec.boundary_count as f64;
    let polygon = curve.polygon(spec.boundary_count * 20);

    let interior_count = spec.node_count - spec.boundary_count;
    let mut points = boundary_pts.clone();
    points.extend(best_candidate_interior(
        &polygon,
        &boundary_pts,
        interior_count,
        0.5 * spacing,
        spec.seed,
    ));

    let nb = spec.boundary_count;
    let mut triangles = triangulate(&points, nb)?;
    for _ in 0..3 {
        smooth_interior(&mut points, &triangles, nb, 5);
        triangles = triangulate(&points, nb)?;
    }

    let anchors = (0..spec.anchor_count)
        .map(|j| ((j * spec.boundary_count) as f64 / spec.anchor_count as f64).round() as usize)
        .map(|i| i % spec.boundary_count)
        .collect();

    let edges = edges_from_triangles(&triangles);
    Ok(Mesh {
        nodes: points.iter().map(|p| [p[0], p[1], 0.0]).collect(),
        triangles,
        edges,
        boundary: (0..nb).collect(),
        anchors,
    })
}

/// Mitchell's best-candidate sampling: each new point is the farthest of a
/// handful of uniform candidates from everything placed so far.
fn best_candidate_interior(
    polygon: &Polygon,
    fixed: &[[f64; 2]],
    count: usize,
    margin: f64,
    seed: u64,
) -> Vec<[f64; 2]> {
    const CANDIDATES: usize = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = polygon.bounding_box();
    let mut placed: Vec<[f64; 2]> = fixed.to_vec();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut best: Option<([f64; 2], f64)> = None;
        let mut tried = 0;
        while tried < CANDIDATES {
            let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
            if polygon.signed_distance(p) < margin {
                continue;
            }
            tried += 1;
            let d = placed
                .iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((p, d));
            }
        }
        let (p, _) = best.expect("at least one candidate");
        placed.push(p);
        out.push(p);
    }
    out
}

fn triangulate(points: &[[f64; 2]], boundary_count: usize) -> Result<Vec<[usize; 3]>> {
    let pts: Vec<delaunator::Point> = points
        .iter()
        .map(|p| delaunator::Point { x: p[0], y: p[1] })
        .collect();
    let tri = delaunator::triangulate(&pts);
    if tri.triangles.is_empty() {
        return Err(Error::InvalidShape("triangulation is empty".into()));
    }
    let hull: BTreeSet<usize> = tri.hull.iter().copied().collect();
    if hull.iter().any(|&i| i >= boundary_count) {
        return Err(Error::InvalidShape(
            "an interior node lies on the convex hull; the outline is not convex".into(),
        ));
    }
    let mut out = Vec::with_capacity(tri.triangles.len() / 3);
    for t in tri.triangles.chunks_exact(3) {
        let (a, b, c) = (t[0], t[1], t[2]);
        if signed_area(points[a], points[b], points[c]) > 0.0 {
            out.push([a, b, c]);
        } else {
            out.push([a, c, b]);
        }
    }
    Ok(out)
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn smooth_interior(points: &mut [[f64; 2]], triangles: &[[usize; 3]], fixed: usize, iterations: usize) {
    let edges = edges_from_triangles(triangles);
    let mut neighbors = vec![Vec::new(); points.len()];
    for &[i, j] in &edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    for _ in 0..iterations {
        let snapshot = points.to_vec();
        for i in fixed..points.len() {
            let nb = &neighbors[i];
            if nb.is_empty() {
                continue;
            }
            let mut acc = [0.0; 2];
            for &j in nb {
                acc[0] += snapshot[j][0];
                acc[1] += snapshot[j][1];
            }
            points[i] = [acc[0] / nb.len() as f64, acc[1] / nb.len() as f64];
        }
    }
}

fn edges_from_triangles(triangles: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut set = BTreeSet::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            set.insert([a.min(b), a.max(b)]);
        }
    }
    set.into_iter().collect()
}

impl Mesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn xy(&self, i: usize) -> [f64; 2] {
        [self.nodes[i][0], self.nodes[i][1]]
    }

    /// Centroid of the boundary nodes.
    pub fn boundary_centroid(&self) -> [f64; 2] {
        let n = self.boundary.len() as f64;
        let (sx, sy) = self
            .boundary
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &i| (sx + self.nodes[i][0], sy + self.nodes[i][1]));
        [sx / n, sy / n]
    }

    /// Mean distance of boundary nodes from their centroid.
    pub fn mean_radius(&self) -> f64 {
        let c = self.boundary_centroid();
        self.boundary
            .iter()
            .map(|&i| dist2(self.xy(i), c).sqrt())
            .sum::<f64>()
            / self.boundary.len() as f64
    }

    /// Largest distance of any node from the boundary centroid.
    pub fn outer_radius(&self) -> f64 {
        let c = self.boundary_centroid();
        (0..self.node_count())
            .map(|i| dist2(self.xy(i), c).sqrt())
            .fold(0.0, f64::max)
    }

    /// Lumped (one third of incident triangle area) nodal areas, mm².
    pub fn lumped_areas(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.node_count()];
        for t in &self.triangles {
            let a = signed_area(self.xy(t[0]), self.xy(t[1]), self.xy(t[2])).abs() / 3.0;
            for &i in t {
                out[i] += a;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Format("triangle references a missing node".into()));
        }
        if self.edges.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Format("edge references a missing node".into()));
        }
        if self.edges.iter().any(|e| e[0] >= e[1]) {
            return Err(Error::Format("edges must be stored as i < j".into()));
        }
        let boundary: BTreeSet<usize> = self.boundary.iter().copied().collect();
        if boundary.len() != self.boundary.len() || boundary.iter().any(|&i| i >= n) {
            return Err(Error::Format("boundary ids are invalid".into()));
        }
        if self.anchors.iter().any(|a| !boundary.contains(a)) {
            return Err(Error::Format("anchors must be boundary nodes".into()));
        }
        Ok(())
    }

    /// Deterministic serialized bytes, used for files and hashing.
    pub fn to_json(&self, augmentation: Option<&AugmentedMesh>) -> String {
        let file = MeshFile {
            format: MESH_FORMAT.into(),
            version: MESH_VERSION,
            nodes: self.nodes.clone(),
            triangles: self.triangles.clone(),
            edges: self.edges.clone(),
            boundary: self.boundary.clone(),
            anchors: self.anchors.clone(),
            augmentation: augmentation.map(|a| AugmentationRecord {
                equivalent_center: a.equivalent_center,
                radius: a.radius,
                edges: a.augmented_edges.clone(),
            }),
        };
        serde_json::to_string(&file).expect("mesh serialization cannot fail")
    }

    pub fn hash(&self) -> String {
        hex_digest(self.to_json(None).as_bytes())
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshFile {
    format: String,
    version: u32,
    nodes: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    boundary: Vec<usize>,
    anchors: Vec<usize>,
    augmentation: Option<AugmentationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentationRecord {
    equivalent_center: [f64; 2],
    radius: f64,
    edges: Vec<[usize; 2]>,
}

/// Parses a mesh file, returning the augmentation if one was stored.
pub fn mesh_from_json(text: &str) -> Result<(Mesh, Option<AugmentedMesh>)> {
    let file: MeshFile = serde_json::from_str(text)?;
    if file.format != MESH_FORMAT || file.version != MESH_VERSION {
        return Err(Error::Format(format!(
            "unsupported mesh format {} v{}",
            file.format, file.version
        )));
    }
    let mesh = Mesh {
        nodes: file.nodes,
        triangles: file.triangles,
        edges: file.edges,
        boundary: file.boundary,
        anchors: file.anchors,
    };
    mesh.validate()?;
    let aug = file.augmentation.map(|a| AugmentedMesh {
        mesh: mesh.clone(),
        augmented_edges: a.edges,
        equivalent_center: a.equivalent_center,
        radius: a.radius,
    });
    Ok((mesh, aug))
}

/// Position of the node with the largest |dz| at `v1 = 0.5` under uniform
/// mid-range stiffness. Ties go to the lowest node index.
pub fn equivalent_center(mesh: &Mesh, oracle: &impl DeformationOracle) -> Result<[f64; 2]> {
    let design = DesignVariables::uniform(0.5, crate::pseudofem::STIFFNESS_MID, mesh.boundary.len())?;
    let field = oracle.deform(&design)?;
    let mut best = 0;
    for (i, dz) in field.dz.iter().enumerate() {
        if dz.abs() > field.dz[best].abs() {
            best = i;
        }
    }
    Ok(mesh.xy(best))
}

/// Connects every node within `radius` of `center` to each anchor, skipping
/// pairs already present as edges.
pub fn augment_edges(mesh: &Mesh, center: [f64; 2], radius: f64, anchors: &[usize]) -> Result<AugmentedMesh> {
    let base = AugmentedMesh {
        mesh: mesh.clone(),
        augmented_edges: Vec::new(),
        equivalent_center: center,
        radius,
    };
    base.augment(center, radius, anchors)
}

impl AugmentedMesh {
    /// Adds augmentation edges on top of the existing ones; re-applying the
    /// same parameters adds nothing.
    pub fn augment(&self, center: [f64; 2], radius: f64, anchors: &[usize]) -> Result<AugmentedMesh> {
        if radius.is_nan() || radius < 0.0 {
            return Err(Error::InvalidArgument(format!("augmentation radius {radius} must be >= 0")));
        }
        let boundary: BTreeSet<usize> = self.mesh.boundary.iter().copied().collect();
        if anchors.iter().any(|a| !boundary.contains(a)) {
            return Err(Error::InvalidArgument("anchors must be boundary nodes".into()));
        }
        let mut existing: BTreeSet<[usize; 2]> = self.mesh.edges.iter().copied().collect();
        existing.extend(self.augmented_edges.iter().map(|&[a, b]| [a.min(b), a.max(b)]));

        let mut added = self.augmented_edges.clone();
        let r2 = radius * radius;
        let central: Vec<usize> = if radius > 0.0 {
            (0..self.mesh.node_count())
                .filter(|&i| dist2(self.mesh.xy(i), center) <= r2)
                .collect()
        } else {
            Vec::new()
        };
        if central.is_empty() {
            log::warn!("edge augmentation: no nodes within {radius} mm of the center");
        }
        for &i in &central {
            for &a in anchors {
                if i == a {
                    continue;
                }
                let key = [i.min(a), i.max(a)];
                if existing.insert(key) {
                    added.push([i, a]);
                }
            }
        }
        Ok(AugmentedMesh {
            mesh: self.mesh.clone(),
            augmented_edges: added,
            equivalent_center: center,
            radius,
        })
    }

    pub fn to_json(&self) -> String {
        self.mesh.to_json(Some(self))
    }

    /// Nodes within the augmentation radius of the equivalent center.
    pub fn central_nodes(&self) -> Vec<usize> {
        let r2 = self.radius * self.radius;
        (0..self.mesh.node_count())
            .filter(|&i| dist2(self.mesh.xy(i), self.equivalent_center) <= r2)
            .collect()
    }
}
