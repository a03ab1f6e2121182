//! Edge-augmented encode–process–decode graph network predicting the
//! per-node z-displacement of a design.
//!
//! Node features: position relative to the equivalent center over the mesh
//! outer radius (2), boundary flag, normalized log stiffness (zero inside),
//! voltage multiplier. Edge features: relative position (2), length, and the
//! augmented-edge flag. Mesh edges carry messages both ways; augmented
//! edges run from the boundary anchor to the central node.

mod fused;
mod train;

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::AugmentedMesh;
use crate::pseudofem::{DeformationField, DesignVariables, STIFFNESS_MAX, STIFFNESS_MIN};

pub use train::{r_squared, train, TrainConfig, TrainReport};

pub const NODE_FEATURES: usize = 5;
pub const EDGE_FEATURES: usize = 4;
const STIFFNESS_FEATURE: usize = 3;
const VOLTAGE_FEATURE: usize = 4;

/// `(log₁₀ w − log₁₀ 100) / (log₁₀ 200000 − log₁₀ 100)`.
pub fn normalize_stiffness(w: f64) -> f64 {
    let (lo, hi) = (STIFFNESS_MIN.log10(), STIFFNESS_MAX.log10());
    (w.log10() - lo) / (hi - lo)
}

pub fn denormalize_stiffness(s: f64) -> f64 {
    let (lo, hi) = (STIFFNESS_MIN.log10(), STIFFNESS_MAX.log10());
    if s <= 0.0 {
        STIFFNESS_MIN
    } else if s >= 1.0 {
        STIFFNESS_MAX
    } else {
        10f64.powf(lo + s * (hi - lo))
    }
}

/// Design-independent part of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    pub node_count: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `E × 4`.
    pub edge_features: Tensor,
    /// Boundary node of each stiffness entry.
    pub boundary: Vec<usize>,
    /// `N × 5` with zero stiffness and voltage columns.
    base_features: Tensor,
}

impl GraphTopology {
    pub fn new(aug: &AugmentedMesh) -> Self {
        let mesh = &aug.mesh;
        let n = mesh.node_count();
        let scale = mesh.outer_radius();
        let c = aug.equivalent_center;
        let mut base_features = Tensor::zeros((n, NODE_FEATURES));
        for i in 0..n {
            let p = mesh.xy(i);
            base_features[[i, 0]] = (p[0] - c[0]) / scale;
            base_features[[i, 1]] = (p[1] - c[1]) / scale;
        }
        for &b in &mesh.boundary {
            base_features[[b, 2]] = 1.0;
        }
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut flags = Vec::new();
        for &[a, b] in &mesh.edges {
            src.extend([a, b]);
            dst.extend([b, a]);
            flags.extend([0.0, 0.0]);
        }
        for &[a, b] in &aug.augmented_edges {
            let (from, to) = if mesh.anchors.contains(&b) { (b, a) } else { (a, b) };
            src.push(from);
            dst.push(to);
            flags.push(1.0);
        }
        let mut edge_features = Tensor::zeros((src.len(), EDGE_FEATURES));
        for (k, (&s, &d)) in src.iter().zip(&dst).enumerate() {
            let (ps, pd) = (mesh.xy(s), mesh.xy(d));
            let dx = (pd[0] - ps[0]) / scale;
            let dy = (pd[1] - ps[1]) / scale;
            edge_features[[k, 0]] = dx;
            edge_features[[k, 1]] = dy;
            edge_features[[k, 2]] = dx.hypot(dy);
            edge_features[[k, 3]] = flags[k];
        }
        Self {
            node_count: n,
            src,
            dst,
            edge_features,
            boundary: mesh.boundary.clone(),
            base_features,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`; edge order is kept.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut base_features = Tensor::zeros(self.base_features.dim());
        for (i, &p) in perm.iter().enumerate() {
            base_features.row_mut(p).assign(&self.base_features.row(i));
        }
        Self {
            node_count: self.node_count,
            src: self.src.iter().map(|&s| perm[s]).collect(),
            dst: self.dst.iter().map(|&d| perm[d]).collect(),
            edge_features: self.edge_features.clone(),
            boundary: self.boundary.iter().map(|&b| perm[b]).collect(),
            base_features,
        }
    }
}

/// Featurized design on a fixed topology, with an optional target field.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub topology: Arc<GraphTopology>,
    /// `N × 5`.
    pub node_features: Tensor,
    pub target: Option<Vec<f64>>,
}

impl GraphSample {
    pub fn edge_features(&self) -> &Tensor {
        &self.topology.edge_features
    }
}

pub fn build_graph_features(
    topology: &Arc<GraphTopology>,
    design: &DesignVariables,
    target: Option<&DeformationField>,
) -> Result<GraphSample> {
    design.validate()?;
    if design.stiffness.len() != topology.boundary.len() {
        return Err(Error::DimensionMismatch {
            expected: topology.boundary.len(),
            got: design.stiffness.len(),
        });
    }
    if let Some(t) = target {
        if t.dz.len() != topology.node_count {
            return Err(Error::DimensionMismatch {
                expected: topology.node_count,
                got: t.dz.len(),
            });
        }
    }
    let mut x = topology.base_features.clone();
    for (&b, &w) in topology.boundary.iter().zip(&design.stiffness) {
        x[[b, STIFFNESS_FEATURE]] = normalize_stiffness(w);
    }
    x.column_mut(VOLTAGE_FEATURE).fill(design.v1);
    Ok(GraphSample {
        topology: Arc::clone(topology),
        node_features: x,
        target: target.map(|t| t.dz.clone()),
    })
}

/// Node features on a tape with the stiffness column supplied as a
/// differentiable `B × 1` vector of normalized log stiffness.
pub fn node_features_on_tape<'t>(topology: &GraphTopology, s: Var<'t>, v1: f64) -> Result<Var<'t>> {
    let tape = s.tape();
    if s.shape() != (topology.boundary.len(), 1) {
        return Err(Error::DimensionMismatch {
            expected: topology.boundary.len(),
            got: s.shape().0,
        });
    }
    let mut base = topology.base_features.clone();
    base.column_mut(VOLTAGE_FEATURE).fill(v1);
    let fixed = tape.constant(base.slice(ndarray::s![.., 0..STIFFNESS_FEATURE]).to_owned());
    let stiff = s.scatter_add_rows(&topology.boundary, topology.node_count);
    let volt = tape.constant(base.slice(ndarray::s![.., VOLTAGE_FEATURE..]).to_owned());
    Ok(tape.concat_cols(&[fixed, stiff, volt]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Message-passing blocks.
    pub steps: usize,
    /// Latent width.
    pub latent: usize,
    pub seed: u64,
}

impl SurrogateConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            steps: 6,
            latent: 32,
            seed,
        }
    }

    pub fn full(seed: u64) -> Self {
        Self {
            steps: 8,
            latent: 64,
            seed,
        }
    }
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self::full(0)
    }
}

/// Two-layer MLP weights `[W1, b1, W2, b2]`; the edge and node updates split
/// `W1` by input block.
fn layout(cfg: &SurrogateConfig) -> Vec<(usize, usize)> {
    let h = cfg.latent;
    let mut shapes = vec![
        (NODE_FEATURES, h),
        (1, h),
        (h, h),
        (1, h),
        (EDGE_FEATURES, h),
        (1, h),
        (h, h),
        (1, h),
    ];
    for _ in 0..cfg.steps {
        // edge: W_src, W_dst, W_edge, b1, W2, b2
        shapes.extend([(h, h), (h, h), (h, h), (1, h), (h, h), (1, h)]);
        // node: W_node, W_agg, b1, W2, b2
        shapes.extend([(h, h), (h, h), (1, h), (h, h), (1, h)]);
    }
    shapes.extend([(h, h), (1, h), (h, 1), (1, 1)]);
    shapes
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub config: SurrogateConfig,
    /// Prediction multiplier, mm.
    pub target_scale: f64,
    pub weights: Vec<f64>,
}

impl SurrogateModel {
    /// Xavier-uniform weights and zero biases from `config.seed`. The output
    /// layers of each residual block start at zero, so every block begins as
    /// the identity.
    pub fn new(config: SurrogateConfig) -> Result<Self> {
        if config.steps == 0 || config.latent == 0 {
            return Err(Error::InvalidArgument("surrogate needs steps >= 1 and latent >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = Vec::new();
        let blocks = 8..8 + 11 * config.steps;
        for (idx, (r, c)) in layout(&config).into_iter().enumerate() {
            let block_out = blocks.contains(&idx) && matches!((idx - 8) % 11, 4 | 9);
            if r == 1 || block_out {
                weights.extend(std::iter::repeat_n(0.0, r * c));
            } else {
                let a = (6.0 / (r + c) as f64).sqrt();
                weights.extend((0..r * c).map(|_| rng.random_range(-a..a)));
            }
        }
        log::debug!("surrogate with {} parameters", weights.len());
        Ok(Self {
            config,
            target_scale: 1.0,
            weights,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len()
    }

    /// Weights as per-layer tensors.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut at = 0;
        for (r, c) in layout(&self.config) {
            out.push(Tensor::from_shape_vec((r, c), self.weights[at..at + r * c].to_vec()).expect("layout"));
            at += r * c;
        }
        out
    }

    /// Zeroes the output layer.
    pub fn zero_decoder(&mut self) {
        let h = self.config.latent;
        let n = self.weights.len();
        self.weights[n - h - 1..].fill(0.0);
    }

    /// Prediction (`B·N × 1`, mm) for `batch` stacked copies of the topology.
    /// `params` are the tape leaves for [`Self::tensors`].
    pub fn forward_on_tape<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        topology: &GraphTopology,
        batch: usize,
    ) -> Result<Var<'t>> {
        let n = topology.node_count;
        if x.shape() != (batch * n, NODE_FEATURES) {
            return Err(Error::DimensionMismatch {
                expected: batch * n * NODE_FEATURES,
                got: x.shape().0 * x.shape().1,
            });
        }
        if params.len() != layout(&self.config).len() {
            return Err(Error::DimensionMismatch {
                expected: layout(&self.config).len(),
                got: params.len(),
            });
        }
        let tape = x.tape();
        let (src, dst) = stacked_edges(topology, batch);
        let mlp = |x: Var<'t>, p: &[Var<'t>]| (x.matmul(p[0]) + p[1]).tanh().matmul(p[2]) + p[3];
        let mut h = mlp(x, &params[0..4]);
        let e_single = fused::mlp2(tape.constant(topology.edge_features.clone()), &params[4..8]);
        let mut e = if batch == 1 {
            e_single
        } else {
            let tile: Vec<usize> = (0..batch).flat_map(|_| 0..topology.edge_count()).collect();
            e_single.gather_rows(&tile)
        };
        let mut at = 8;
        for _ in 0..self.config.steps {
            let p = &params[at..at + 11];
            e = fused::edge_update(h.matmul(p[0]), h.matmul(p[1]), e, &p[2..6], &src, &dst);
            let agg = e.scatter_add_rows(&dst, batch * n);
            let dh = (h.matmul(p[6]) + agg.matmul(p[7]) + p[8]).tanh().matmul(p[9]) + p[10];
            h = h + dh;
            at += 11;
        }
        let out = mlp(h, &params[at..at + 4]);
        Ok(out * self.target_scale)
    }

    /// Prediction for one sample, mm.
    pub fn forward(&self, sample: &GraphSample) -> Result<Vec<f64>> {
        Ok(self.forward_batch(std::slice::from_ref(sample))?.remove(0))
    }

    /// Predictions for samples sharing one topology.
    pub fn forward_batch(&self, samples: &[GraphSample]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = samples.first() else {
            return Ok(Vec::new());
        };
        let topo = &first.topology;
        if samples.iter().any(|s| !Arc::ptr_eq(&s.topology, topo) && *s.topology != **topo) {
            return Err(Error::InvalidArgument("batched samples must share a topology".into()));
        }
        let tape = Tape::new();
        let params: Vec<Var<'_>> = self.tensors().into_iter().map(|t| tape.constant(t)).collect();
        let x = tape.constant(stack_rows(samples.iter().map(|s| &s.node_features)));
        let y = self.forward_on_tape(&params, x, topo, samples.len())?;
        let v = y.value();
        let n = topo.node_count;
        Ok((0..samples.len())
            .map(|b| (0..n).map(|i| v[[b * n + i, 0]]).collect())
            .collect())
    }
}

fn stacked_edges(topology: &GraphTopology, batch: usize) -> (Rc<[usize]>, Rc<[usize]>) {
    let n = topology.node_count;
    let src: Vec<usize> = (0..batch).flat_map(|b| topology.src.iter().map(move |&s| s + b * n)).collect();
    let dst: Vec<usize> = (0..batch).flat_map(|b| topology.dst.iter().map(move |&d| d + b * n)).collect();
    (src.into(), dst.into())
}

fn stack_rows<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let views: Vec<_> = parts.map(|t| t.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("row stack")
}

const CHECKPOINT_FORMAT: &str = "varifocal-surrogate";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: SurrogateConfig,
    parameter_count: usize,
    target_scale: f64,
    weights: Vec<f64>,
}

impl SurrogateModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            parameter_count: self.weights.len(),
            target_scale: self.target_scale,
            weights: self.weights.clone(),
        })
        .expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let expected: usize = layout(&ck.config).iter().map(|(r, c)| r * c).sum();
        if ck.weights.len() != expected || ck.parameter_count != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: ck.weights.len(),
            });
        }
        Ok(Self {
            config: ck.config,
            target_scale: ck.target_scale,
            weights: ck.weights,
        })
    }
}
