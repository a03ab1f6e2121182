//! Synthetic deformation oracle: a linear membrane on the mirror mesh with
//! boundary springs, loaded by a smooth pressure bump.
//!
//! The system solved per design is
//! `(T·K + diag(k)) u = v1·A·M·g`, where `K` is the cotangent Laplacian of the
//! mesh, `T` the membrane tension (N/m), `k` the spring stiffness on boundary
//! nodes (N/m), `M` the lumped nodal areas, `g` a unit Gaussian profile and
//! `A` the calibrated load amplitude (Pa). Lengths are converted to metres for
//! the solve and the returned `dz` is in mm.

mod calibrate;
mod dataset;
pub mod solver;

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use solver::EnvelopeMatrix;

pub use calibrate::{calibrate_oracle, sphere_fit_of_field, CalibrationRecord, CalibrationTarget};
pub use dataset::{generate_dataset, Dataset, DatasetManifest, Sample};

pub const STIFFNESS_MIN: f64 = 100.0;
pub const STIFFNESS_MAX: f64 = 200_000.0;
/// Geometric midpoint of the stiffness range, `sqrt(100 · 200000)`.
pub const STIFFNESS_MID: f64 = 4472.135954999579;

pub const ORACLE_NAME: &str = "membrane-cot";
pub const ORACLE_REVISION: u32 = 1;

/// Voltage multiplier and boundary spring stiffness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignVariables {
    pub v1: f64,
    /// N/m, one per boundary node in perimeter order.
    pub stiffness: Vec<f64>,
}

impl DesignVariables {
    pub fn new(v1: f64, stiffness: Vec<f64>) -> Result<Self> {
        let d = Self { v1, stiffness };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(v1: f64, stiffness: f64, count: usize) -> Result<Self> {
        Self::new(v1, vec![stiffness; count])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v1 > 0.0 && self.v1 <= 1.0) {
            return Err(Error::InvalidDesign(format!("v1 = {} outside (0, 1]", self.v1)));
        }
        if let Some((i, k)) = self
            .stiffness
            .iter()
            .enumerate()
            .find(|(_, &k)| !(STIFFNESS_MIN..=STIFFNESS_MAX).contains(&k))
        {
            return Err(Error::InvalidDesign(format!(
                "stiffness[{i}] = {k} outside [{STIFFNESS_MIN}, {STIFFNESS_MAX}]"
            )));
        }
        Ok(())
    }
}

/// Per-node z displacement, mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub dz: Vec<f64>,
}

impl DeformationField {
    pub fn max_abs(&self) -> f64 {
        self.dz.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// Anything that maps a design to a deformation field.
pub trait DeformationOracle {
    fn deform(&self, design: &DesignVariables) -> Result<DeformationField>;

    fn version(&self) -> String {
        "custom".into()
    }
}

impl<F> DeformationOracle for F
where
    F: Fn(&DesignVariables) -> Result<DeformationField>,
{
    fn deform(&self, design: &DesignVariables) -> Result<DeformationField> {
        self(design)
    }
}

/// Wraps an oracle and counts calls.
pub struct CountingOracle<'a, O: ?Sized> {
    inner: &'a O,
    calls: Cell<usize>,
}

impl<'a, O: DeformationOracle + ?Sized> CountingOracle<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<O: DeformationOracle + ?Sized> DeformationOracle for CountingOracle<'_, O> {
    fn deform(&self, design: &DesignVariables) -> Result<DeformationField> {
        self.calls.set(self.calls.get() + 1);
        self.inner.deform(design)
    }

    fn version(&self) -> String {
        self.inner.version()
    }
}

/// Physical constants of the membrane model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// N/m
    pub membrane_tension: f64,
    /// Peak pressure of the load at `v1 = 1`, Pa.
    pub load_amplitude: f64,
    /// Gaussian sigma as a fraction of the mesh mean radius.
    pub load_width_ratio: f64,
    /// Largest admissible |dz|, mm.
    pub dz_cap: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            membrane_tension: 2000.0,
            load_amplitude: 1.0,
            load_width_ratio: 0.4,
            dz_cap: 5.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.membrane_tension) || !ok(self.load_amplitude) || !ok(self.load_width_ratio) || !ok(self.dz_cap) {
            return Err(Error::InvalidArgument(format!("oracle constants must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Cotangent-weight stiffness entries `(i, j, w)` with `i < j` for the mesh.
/// Weights are `(cot α + cot β) / 2` over the angles opposite each edge.
pub fn cotangent_weights(mesh: &Mesh) -> BTreeMap<(usize, usize), f64> {
    let mut w = BTreeMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b, c) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
            let (pa, pb, pc) = (mesh.xy(a), mesh.xy(b), mesh.xy(c));
            let u = [pa[0] - pc[0], pa[1] - pc[1]];
            let v = [pb[0] - pc[0], pb[1] - pc[1]];
            let dot = u[0] * v[0] + u[1] * v[1];
            let cross = (u[0] * v[1] - u[1] * v[0]).abs();
            let cot = dot / cross;
            *w.entry((a.min(b), a.max(b))).or_insert(0.0) += 0.5 * cot;
        }
    }
    w
}

/// Membrane oracle bound to one mesh.
#[derive(Debug, Clone)]
pub struct MembraneOracle {
    params: OracleParams,
    mesh_hash: String,
    boundary: Vec<usize>,
    base: EnvelopeMatrix,
    /// Unit-amplitude nodal load, N.
    load: Vec<f64>,
    load_center: [f64; 2],
}

impl MembraneOracle {
    pub fn new(mesh: &Mesh, params: OracleParams) -> Result<Self> {
        params.validate()?;
        mesh.validate()?;
        let n = mesh.node_count();
        let t = params.membrane_tension;
        let mut entries = Vec::new();
        for (&(i, j), &w) in &cotangent_weights(mesh) {
            entries.push((i, j, -t * w));
            entries.push((i, i, t * w));
            entries.push((j, j, t * w));
        }
        let base = EnvelopeMatrix::new(n, &entries);
        let center = mesh.boundary_centroid();
        let sigma = params.load_width_ratio * mesh.mean_radius();
        let areas = mesh.lumped_areas();
        let load = (0..n)
            .map(|i| {
                let p = mesh.xy(i);
                let r2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                (-r2 / (2.0 * sigma * sigma)).exp() * areas[i] * 1e-6
            })
            .collect();
        Ok(Self {
            params,
            mesh_hash: mesh.hash(),
            boundary: mesh.boundary.clone(),
            base,
            load,
            load_center: center,
        })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    pub fn mesh_hash(&self) -> &str {
        &self.mesh_hash
    }

    pub fn load_center(&self) -> [f64; 2] {
        self.load_center
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary.len()
    }

    /// Same oracle with a different load amplitude.
    pub fn with_amplitude(&self, load_amplitude: f64) -> Result<Self> {
        let params = OracleParams {
            load_amplitude,
            ..self.params.clone()
        };
        params.validate()?;
        Ok(Self { params, ..self.clone() })
    }

    pub fn simulate(&self, design: &DesignVariables) -> Result<DeformationField> {
        design.validate()?;
        self.simulate_raw(design.v1, &design.stiffness)
    }

    /// Solve without the design-range checks, e.g. for `v1 = 0` or stiffness
    /// outside the admissible range. Only finiteness and sign are checked.
    pub fn simulate_raw(&self, v1: f64, stiffness: &[f64]) -> Result<DeformationField> {
        if stiffness.len() != self.boundary.len() {
            return Err(Error::DimensionMismatch {
                expected: self.boundary.len(),
                got: stiffness.len(),
            });
        }
        if !v1.is_finite() || stiffness.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return Err(Error::InvalidDesign("non-finite or negative design value".into()));
        }
        let mut m = self.base.clone();
        for (&b, &k) in self.boundary.iter().zip(stiffness) {
            m.add_diagonal(b, k);
        }
        let factor = m.factor()?;
        let scale = v1 * self.params.load_amplitude;
        let rhs: Vec<f64> = self.load.iter().map(|g| g * scale).collect();
        let dz: Vec<f64> = factor.solve(&rhs).into_iter().map(|u| u * 1e3).collect();
        let field = DeformationField { dz };
        let max_dz = field.max_abs();
        if !max_dz.is_finite() {
            return Err(Error::Solver("non-finite displacement".into()));
        }
        if max_dz > self.params.dz_cap {
            return Err(Error::DeformationCap {
                max_dz,
                cap: self.params.dz_cap,
            });
        }
        Ok(field)
    }
}

impl DeformationOracle for MembraneOracle {
    fn deform(&self, design: &DesignVariables) -> Result<DeformationField> {
        self.simulate(design)
    }

    fn version(&self) -> String {
        let p = &self.params;
        format!(
            "{ORACLE_NAME}/{ORACLE_REVISION} T={} A={} w={} cap={}",
            p.membrane_tension, p.load_amplitude, p.load_width_ratio, p.dz_cap
        )
    }
}

/// Convenience wrapper for the common call shape.
pub fn simulate_deformation(oracle: &MembraneOracle, design: &DesignVariables) -> Result<DeformationField> {
    oracle.simulate(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_eyepiece_mesh, EyeShape, DEFAULT_NODE_COUNT};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn mesh() -> &'static Mesh {
        static MESH: OnceLock<Mesh> = OnceLock::new();
        MESH.get_or_init(|| generate_eyepiece_mesh(&EyeShape::default(), DEFAULT_NODE_COUNT, 0).unwrap())
    }

    fn oracle() -> MembraneOracle {
        MembraneOracle::new(mesh(), OracleParams::default()).unwrap()
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize) -> DesignVariables {
        let w = (0..n)
            .map(|_| 10f64.powf(rng.random_range(2.0..(2e5f64).log10())))
            .collect();
        DesignVariables::new(rng.random_range(0.05..1.0), w).unwrap()
    }

    #[test]
    fn design_validation() {
        assert!(DesignVariables::uniform(0.5, 1000.0, 3).is_ok());
        assert!(DesignVariables::uniform(0.0, 1000.0, 3).is_err());
        assert!(DesignVariables::uniform(1.2, 1000.0, 3).is_err());
        assert!(DesignVariables::uniform(0.5, 99.0, 3).is_err());
        assert!(DesignVariables::uniform(0.5, 2.1e5, 3).is_err());
        assert!(DesignVariables::uniform(0.5, f64::NAN, 3).is_err());
    }

    #[test]
    fn zero_voltage_gives_zero_field() {
        let o = oracle();
        let f = o.simulate_raw(0.0, &vec![STIFFNESS_MID; 102]).unwrap();
        assert!(f.dz.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn zero_stiffness_is_singular() {
        let o = oracle();
        assert!(matches!(o.simulate_raw(0.5, &vec![0.0; 102]), Err(Error::Solver(_))));
    }

    #[test]
    fn cap_is_enforced() {
        let o = oracle().with_amplitude(1e9).unwrap();
        let d = DesignVariables::uniform(1.0, STIFFNESS_MIN, 102).unwrap();
        assert!(matches!(o.simulate(&d), Err(Error::DeformationCap { .. })));
    }

    #[test]
    fn wrong_length_rejected() {
        let d = DesignVariables::uniform(0.5, 1000.0, 5).unwrap();
        assert!(matches!(oracle().simulate(&d), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn doubling_voltage_doubles_field() {
        let o = oracle();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_design(&mut rng, 102);
        let a = o.simulate(&DesignVariables { v1: 0.25, ..d.clone() }).unwrap();
        let b = o.simulate(&DesignVariables { v1: 0.5, ..d }).unwrap();
        for (x, y) in a.dz.iter().zip(&b.dz) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn stiff_boundary_moves_less() {
        let o = oracle();
        let soft = o.simulate(&DesignVariables::uniform(0.5, STIFFNESS_MIN, 102).unwrap()).unwrap();
        let stiff = o.simulate(&DesignVariables::uniform(0.5, STIFFNESS_MAX, 102).unwrap()).unwrap();
        let max_b = |f: &DeformationField| mesh().boundary.iter().map(|&i| f.dz[i].abs()).fold(0.0, f64::max);
        assert!(max_b(&stiff) < max_b(&soft));
    }

    #[test]
    fn matches_dense_solve() {
        let m = mesh();
        let o = oracle();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_design(&mut rng, 102);
        let n = m.node_count();
        let t = o.params().membrane_tension;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (&(i, j), &w) in &cotangent_weights(m) {
            a[(i, j)] -= t * w;
            a[(j, i)] -= t * w;
            a[(i, i)] += t * w;
            a[(j, j)] += t * w;
        }
        for (&b, &k) in m.boundary.iter().zip(&d.stiffness) {
            a[(b, b)] += k;
        }
        let c = m.boundary_centroid();
        let sigma = 0.4 * m.mean_radius();
        let areas = m.lumped_areas();
        let rhs = DVector::from_fn(n, |i, _| {
            let p = m.xy(i);
            let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            d.v1 * o.params().load_amplitude * (-r2 / (2.0 * sigma * sigma)).exp() * areas[i] * 1e-6
        });
        let u = a.cholesky().unwrap().solve(&rhs);
        let f = o.simulate(&d).unwrap();
        let scale = u.amax() * 1e3;
        for i in 0..n {
            assert!((f.dz[i] - u[i] * 1e3).abs() < 1e-10 * scale, "node {i}");
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_reproduce_linear_fields() {
        let m = mesh();
        let n = m.node_count();
        let mut lx = vec![0.0; n];
        let boundary: std::collections::BTreeSet<usize> = m.boundary.iter().copied().collect();
        for (&(i, j), &w) in &cotangent_weights(m) {
            let (xi, xj) = (m.nodes[i][0], m.nodes[j][0]);
            lx[i] += w * (xi - xj);
            lx[j] += w * (xj - xi);
        }
        for i in (0..n).filter(|i| !boundary.contains(i)) {
            assert!(lx[i].abs() < 1e-9, "interior node {i}: {}", lx[i]);
        }
    }

    #[test]
    fn radially_symmetric_on_circle() {
        let circle = generate_eyepiece_mesh(&EyeShape::circle(40.0), 500, 2).unwrap();
        let o = MembraneOracle::new(&circle, OracleParams::default()).unwrap();
        let f = o
            .simulate(&DesignVariables::uniform(0.5, STIFFNESS_MID, circle.boundary.len()).unwrap())
            .unwrap();
        // boundary nodes all sit at the same radius: their deflections agree
        let b: Vec<f64> = circle.boundary.iter().map(|&i| f.dz[i]).collect();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        let spread = b.iter().fold(0.0f64, |m, x| m.max((x - mean).abs()));
        assert!(spread < 0.02 * mean.abs(), "spread {spread}, mean {mean}");
    }

    #[test]
    fn counting_oracle_counts() {
        let o = oracle();
        let c = CountingOracle::new(&o);
        let d = DesignVariables::uniform(0.5, 1000.0, 102).unwrap();
        c.deform(&d).unwrap();
        c.deform(&d).unwrap();
        assert_eq!(c.calls(), 2);
        assert_eq!(c.version(), o.version());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn linear_in_voltage(seed in 0u64..1000, alpha in 0.1f64..1.0) {
            let o = oracle();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_design(&mut rng, 102);
            let base = o.simulate(&DesignVariables { v1: 1.0, ..d.clone() }).unwrap();
            let scaled = o.simulate(&DesignVariables { v1: alpha, ..d }).unwrap();
            let tol = 1e-12 * base.max_abs();
            for (x, y) in base.dz.iter().zip(&scaled.dz) {
                prop_assert!((alpha * x - y).abs() <= tol);
            }
        }

        #[test]
        fn stiffening_never_raises_boundary_motion(seed in 0u64..1000) {
            let o = oracle();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_design(&mut rng, 102);
            let stiffer: Vec<f64> = d.stiffness.iter().map(|k| (k * rng.random_range(1.0..3.0)).min(STIFFNESS_MAX)).collect();
            let a = o.simulate(&d).unwrap();
            let b = o.simulate(&DesignVariables { stiffness: stiffer, ..d }).unwrap();
            let max_b = |f: &DeformationField| mesh().boundary.iter().map(|&i| f.dz[i].abs()).fold(0.0, f64::max);
            prop_assert!(max_b(&b) <= max_b(&a) * (1.0 + 1e-12));
        }
    }
}
