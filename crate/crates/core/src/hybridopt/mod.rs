//! Hybrid evolutionary + gradient inverse design: voltage sweep, Bézier
//! stiffness hypotheses, neighborhood sampling, surrogate gradient descent,
//! the iterate-with-fresh-data loop and the final voltage tune.

mod design;
mod hybrid;
mod pca;
mod pipeline;

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::optics::{center_points, deformed_points, fit_sphere, fit_zernike, roi_nodes, SphereFit, ZernikeSurface};
use crate::pseudofem::{DeformationField, DeformationOracle, DesignVariables, Sample, STIFFNESS_MAX, STIFFNESS_MIN};
use crate::raytrace::{find_best_focus, make_source, reflect_bundle, RayBundle, SourcePattern, TraceConfig};
use crate::surrogate::denormalize_stiffness;

pub use design::{optimize_design, GdConfig, GdResult, SurrogateObjective};
pub use hybrid::{hybrid_loop, EpochRecord, LoopConfig, LoopOutcome, LoopState, OptimizationHistory};
pub use pca::{pca_project, PcaResult};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineState, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Objectives {
    /// mm.
    pub target_focal: f64,
    /// nm.
    pub rms_tolerance: f64,
    /// Accepted relative focal-length error after the voltage tune.
    pub focal_tolerance: f64,
}

impl Default for Objectives {
    fn default() -> Self {
        Self {
            target_focal: 590.0,
            rms_tolerance: 500.0,
            focal_tolerance: 0.02,
        }
    }
}

impl Objectives {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_focal > 0.0) || !(self.rms_tolerance > 0.0) || !(self.focal_tolerance > 0.0) {
            return Err(Error::InvalidArgument("objectives must be positive".into()));
        }
        Ok(())
    }
}

/// How a deformation field is turned into optical figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Radius of the optical region around the equivalent center, mm.
    pub roi_radius: f64,
    /// Source aperture as a fraction of the ROI radius.
    pub aperture_ratio: f64,
    pub n_rays: usize,
    pub pattern: SourcePattern,
    pub z_source: f64,
    /// Detector-plane search interval, mm.
    pub focus_interval: [f64; 2],
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            roi_radius: 9.0,
            aperture_ratio: 0.9,
            n_rays: 121,
            pattern: SourcePattern::Grid,
            z_source: 100.0,
            focus_interval: [-3000.0, -100.0],
        }
    }
}

/// Simulated performance of one design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub v1: f64,
    /// Surface RMS against the best-fit sphere, nm.
    pub surface_rms: f64,
    /// |best-focus plane|, mm.
    pub focal_length: f64,
    /// Spot RMS at the best-focus plane, nm.
    pub spot_rms: f64,
    pub sphere_radius: f64,
    pub zernike: [f64; 6],
}

/// Binds the oracle to the optical evaluation and counts oracle calls.
pub struct Evaluator<'a> {
    pub mesh: &'a Mesh,
    oracle: &'a dyn DeformationOracle,
    pub center: [f64; 2],
    pub settings: EvalSettings,
    pub roi: Vec<usize>,
    pub source: RayBundle,
    pub trace: TraceConfig,
    calls: Cell<usize>,
}

impl<'a> Evaluator<'a> {
    pub fn new(mesh: &'a Mesh, oracle: &'a dyn DeformationOracle, center: [f64; 2], settings: EvalSettings) -> Result<Self> {
        let roi = roi_nodes(mesh, center, settings.roi_radius);
        if roi.len() < 6 {
            return Err(Error::InvalidArgument(format!(
                "only {} nodes within {} mm of the center",
                roi.len(),
                settings.roi_radius
            )));
        }
        let source = make_source(
            settings.aperture_ratio * settings.roi_radius,
            settings.n_rays,
            settings.pattern,
            settings.z_source,
        )?;
        Ok(Self {
            mesh,
            oracle,
            center,
            settings,
            roi,
            source,
            trace: TraceConfig::default(),
            calls: Cell::new(0),
        })
    }

    /// Oracle calls made through this evaluator.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn simulate(&self, design: &DesignVariables) -> Result<DeformationField> {
        self.calls.set(self.calls.get() + 1);
        self.oracle.deform(design)
    }

    /// Sphere fit and centered Zernike fit of the ROI.
    pub fn fit_field(&self, dz: &[f64]) -> Result<(SphereFit, ZernikeSurface)> {
        surface_of_field(self.mesh, dz, &self.roi, self.settings.roi_radius)
    }

    /// Optical figures of a field without calling the oracle.
    pub fn assess(&self, v1: f64, dz: &[f64]) -> Result<Evaluation> {
        let (sphere, surface) = self.fit_field(dz)?;
        let reflected = reflect_bundle(&surface, &self.source, &self.trace)?;
        let [lo, hi] = self.settings.focus_interval;
        let focus = find_best_focus(&reflected.rays, (lo, hi))?;
        Ok(Evaluation {
            v1,
            surface_rms: sphere.rms,
            focal_length: focus.focal_length(),
            spot_rms: focus.spot_rms,
            sphere_radius: sphere.radius,
            zernike: surface.coefficients,
        })
    }

    pub fn evaluate(&self, design: &DesignVariables) -> Result<(DeformationField, Evaluation)> {
        let field = self.simulate(design)?;
        let eval = self.assess(design.v1, &field.dz)?;
        Ok((field, eval))
    }
}

/// Best-fit sphere of the ROI and the Zernike fit of the points centered on
/// the sphere axis.
pub fn surface_of_field(mesh: &Mesh, dz: &[f64], roi: &[usize], roi_radius: f64) -> Result<(SphereFit, ZernikeSurface)> {
    let points = deformed_points(mesh, dz, roi);
    let sphere = fit_sphere(&points)?;
    let surface = fit_zernike(&center_points(&points, &sphere), roi_radius)?;
    Ok((sphere, surface))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub v1: f64,
    /// `None` when the design could not be evaluated.
    pub focal_length: Option<f64>,
    pub surface_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageSweep {
    pub v_bar: f64,
    pub entries: Vec<SweepEntry>,
}

/// `V̄ = argmin_v |D(v, W⁰) − D*|`; ties go to the smaller `v`.
pub fn coarse_voltage_sweep(eval: &Evaluator<'_>, w0: &[f64], sweep: &[f64], target_focal: f64) -> Result<VoltageSweep> {
    if sweep.is_empty() {
        return Err(Error::InvalidArgument("empty voltage sweep".into()));
    }
    if w0.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::InvalidArgument("sweep stiffness must be uniform".into()));
    }
    let mut entries = Vec::with_capacity(sweep.len());
    let mut best: Option<(f64, f64)> = None;
    for &v in sweep {
        let outcome = DesignVariables::new(v, w0.to_vec()).and_then(|d| eval.evaluate(&d));
        match outcome {
            Ok((_, e)) => {
                let gap = (e.focal_length - target_focal).abs();
                let better = match best {
                    None => true,
                    Some((bv, bg)) => gap < bg || (gap == bg && v < bv),
                };
                if better {
                    best = Some((v, gap));
                }
                entries.push(SweepEntry {
                    v1: v,
                    focal_length: Some(e.focal_length),
                    surface_rms: Some(e.surface_rms),
                });
            }
            Err(err) => {
                log::warn!("voltage sweep: v1 = {v} failed: {err}");
                entries.push(SweepEntry {
                    v1: v,
                    focal_length: None,
                    surface_rms: None,
                });
            }
        }
    }
    let (v_bar, _) = best.ok_or_else(|| Error::Fit("every voltage in the sweep failed".into()))?;
    Ok(VoltageSweep { v_bar, entries })
}

/// Quadratic Bézier through (0,0), (a,b), (1,1) mapping normalized boundary
/// distance to normalized log stiffness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BezierHypothesis {
    pub a: f64,
    pub b: f64,
}

impl BezierHypothesis {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidArgument(format!("control point ({a}, {b}) outside the unit box")));
        }
        Ok(Self { a, b })
    }

    /// Curve height at abscissa `d`.
    pub fn eval(&self, d: f64) -> f64 {
        let s = if d <= 0.0 {
            0.0
        } else if d >= 1.0 {
            1.0
        } else {
            let x = |s: f64| 2.0 * self.a * s * (1.0 - s) + s * s;
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if x(mid) < d {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        2.0 * self.b * s * (1.0 - s) + s * s
    }
}

/// Boundary-node distances to `center`, mapped linearly so the nearest node
/// is 0 and the farthest is 1.
pub fn normalized_boundary_distances(mesh: &Mesh, center: [f64; 2]) -> Result<Vec<f64>> {
    let d: Vec<f64> = mesh
        .boundary
        .iter()
        .map(|&i| {
            let p = mesh.xy(i);
            (p[0] - center[0]).hypot(p[1] - center[1])
        })
        .collect();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-9 * hi) {
        return Err(Error::InvalidArgument("boundary is equidistant from the center".into()));
    }
    Ok(d.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

pub fn bezier_stiffness(hyp: &BezierHypothesis, distances: &[f64]) -> Result<Vec<f64>> {
    if let Some(d) = distances.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::InvalidArgument(format!("normalized distance {d} outside [0, 1]")));
    }
    Ok(distances.iter().map(|&d| denormalize_stiffness(hyp.eval(d))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoeConfig {
    pub coarse_step: f64,
    pub refine_step: f64,
    /// Half-width of the refined lattice around the coarse minimum.
    pub refine_halfwidth: f64,
}

impl Default for DoeConfig {
    fn default() -> Self {
        Self {
            coarse_step: 0.1,
            refine_step: 0.02,
            refine_halfwidth: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoeStage {
    Coarse,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoeEntry {
    pub stage: DoeStage,
    pub a: f64,
    pub b: f64,
    pub surface_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoeResult {
    pub best: BezierHypothesis,
    pub surface_rms: f64,
    /// `W^p`.
    pub stiffness: Vec<f64>,
    pub table: Vec<DoeEntry>,
    /// Every simulated design with its field.
    pub samples: Vec<Sample>,
}

fn lattice(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| (lo + step * i as f64).clamp(0.0, 1.0)).collect()
}

/// Surface-RMS search over Bézier control points at `v_bar`: a coarse lattice
/// over the unit box, then a finer one around the coarse minimum.
pub fn doe_bezier(eval: &Evaluator<'_>, v_bar: f64, cfg: &DoeConfig) -> Result<DoeResult> {
    if !(cfg.coarse_step > 0.0 && cfg.coarse_step <= 1.0) || !(cfg.refine_step > 0.0) || cfg.refine_halfwidth < 0.0 {
        return Err(Error::InvalidArgument("empty DOE lattice".into()));
    }
    let distances = normalized_boundary_distances(eval.mesh, eval.center)?;
    let mut table: Vec<DoeEntry> = Vec::new();
    let mut samples: Vec<Sample> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut run = |stage: DoeStage, points: Vec<(f64, f64)>, table: &mut Vec<DoeEntry>| -> Result<()> {
        for (a, b) in points {
            let key = ((a * 1e9).round() as i64, (b * 1e9).round() as i64);
            if !seen.insert(key) {
                continue;
            }
            let hyp = BezierHypothesis::new(a, b)?;
            let design = DesignVariables::new(v_bar, bezier_stiffness(&hyp, &distances)?)?;
            let (field, e) = eval.evaluate(&design)?;
            table.push(DoeEntry {
                stage,
                a,
                b,
                surface_rms: e.surface_rms,
            });
            samples.push(Sample { design, field });
        }
        Ok(())
    };
    let argmin = |table: &[DoeEntry]| {
        let mut best = 0;
        for (i, e) in table.iter().enumerate() {
            if e.surface_rms < table[best].surface_rms {
                best = i;
            }
        }
        best
    };
    let coarse = lattice(0.0, 1.0, cfg.coarse_step);
    run(
        DoeStage::Coarse,
        coarse.iter().flat_map(|&a| coarse.iter().map(move |&b| (a, b))).collect(),
        &mut table,
    )?;
    if cfg.refine_halfwidth > 0.0 {
        let c = &table[argmin(&table)];
        let ra = lattice((c.a - cfg.refine_halfwidth).max(0.0), (c.a + cfg.refine_halfwidth).min(1.0), cfg.refine_step);
        let rb = lattice((c.b - cfg.refine_halfwidth).max(0.0), (c.b + cfg.refine_halfwidth).min(1.0), cfg.refine_step);
        run(
            DoeStage::Refined,
            ra.iter().flat_map(|&a| rb.iter().map(move |&b| (a, b))).collect(),
            &mut table,
        )?;
    }
    drop(run);
    let i = argmin(&table);
    Ok(DoeResult {
        best: BezierHypothesis::new(table[i].a, table[i].b)?,
        surface_rms: table[i].surface_rms,
        stiffness: samples[i].design.stiffness.clone(),
        table,
        samples,
    })
}

/// `k` designs `W ⊙ U[0.8, 1.2]`, clipped to the stiffness bounds.
pub fn sample_neighbors(center: &[f64], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("neighbor count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| {
            center
                .iter()
                .map(|&w| (w * rng.random_range(0.8..=1.2)).clamp(STIFFNESS_MIN, STIFFNESS_MAX))
                .collect()
        })
        .collect())
}

/// Random Bézier designs: control points uniform in the unit box, each
/// stiffness vector perturbed by `U[0.8, 1.2]` and clipped, `v1` uniform in
/// `v_range`.
pub fn random_bezier_designs(distances: &[f64], count: usize, v_range: [f64; 2], seed: u64) -> Result<Vec<DesignVariables>> {
    if !(v_range[0] > 0.0 && v_range[1] >= v_range[0]) {
        return Err(Error::InvalidArgument(format!("invalid voltage range {v_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v1 = rng.random_range(v_range[0]..=v_range[1]);
            let hyp = BezierHypothesis::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0))?;
            let w = bezier_stiffness(&hyp, distances)?
                .into_iter()
                .map(|w| (w * rng.random_range(0.8..=1.2)).clamp(STIFFNESS_MIN, STIFFNESS_MAX))
                .collect();
            DesignVariables::new(v1, w)
        })
        .collect()
}

/// Least-squares line `y = slope·x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("a line needs two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("probe voltages coincide".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Voltage at which the fitted line reaches `target`.
pub fn voltage_for_focal(slope: f64, intercept: f64, target: f64) -> Result<f64> {
    if slope == 0.0 || !slope.is_finite() {
        return Err(Error::Fit("focal length does not depend on the voltage".into()));
    }
    Ok((intercept - target) / -slope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageTuning {
    /// `(v1, focal length)` per probe.
    pub probes: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub v_star: f64,
    /// Simulated check at `v_star`.
    pub check: Evaluation,
}

/// Probes `v_bar · m` for each multiplier (within ±5%), fits focal length
/// linearly in `v1` and solves for the target.
pub fn fine_tune_voltage(
    eval: &Evaluator<'_>,
    w_star: &[f64],
    v_bar: f64,
    target_focal: f64,
    multipliers: &[f64],
) -> Result<VoltageTuning> {
    if multipliers.len() < 2 {
        return Err(Error::InvalidArgument("need at least two probe voltages".into()));
    }
    if multipliers.iter().any(|m| !(0.95 - 1e-12..=1.05 + 1e-12).contains(m)) {
        return Err(Error::InvalidArgument("probe voltages must lie within 5% of v_bar".into()));
    }
    let mut probes = Vec::with_capacity(multipliers.len());
    for m in multipliers {
        let v = v_bar * m;
        let (_, e) = eval.evaluate(&DesignVariables::new(v, w_star.to_vec())?)?;
        probes.push((v, e.focal_length));
    }
    let (slope, intercept) = linear_fit(&probes)?;
    let mean_focal = probes.iter().map(|p| p.1).sum::<f64>() / probes.len() as f64;
    if (slope * v_bar).abs() < 1e-9 * mean_focal.abs() {
        return Err(Error::Fit("focal length does not depend on the voltage".into()));
    }
    let v_star = voltage_for_focal(slope, intercept, target_focal)?;
    let (_, check) = eval.evaluate(&DesignVariables::new(v_star, w_star.to_vec())?)?;
    Ok(VoltageTuning {
        probes,
        slope,
        intercept,
        v_star,
        check,
    })
}

/// Normalized finite-difference sensitivities `|∂ln y / ∂ln x|` of focal
/// length and surface RMS at a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivities {
    pub focal_v: f64,
    /// Mean over stiffness entries.
    pub focal_w: f64,
    pub rms_v: f64,
    pub rms_w: f64,
}

impl Sensitivities {
    /// Focal length is voltage-driven by at least `factor`.
    pub fn focal_dominated_by_voltage(&self, factor: f64) -> bool {
        self.focal_v >= factor * self.focal_w
    }

    /// Surface RMS is stiffness-driven by at least `factor`.
    pub fn rms_dominated_by_stiffness(&self, factor: f64) -> bool {
        self.rms_w >= factor * self.rms_v
    }
}

pub fn sensitivities(eval: &Evaluator<'_>, design: &DesignVariables, rel_step: f64) -> Result<Sensitivities> {
    let at = |d: &DesignVariables| -> Result<(f64, f64)> {
        let (_, e) = eval.evaluate(d)?;
        Ok((e.focal_length.ln(), e.surface_rms.ln()))
    };
    let h = (1.0 + rel_step).ln();
    let perturbed = |f: &dyn Fn(&mut DesignVariables)| -> Result<(f64, f64)> {
        let mut up = design.clone();
        f(&mut up);
        at(&up)
    };
    let base = at(design)?;
    let v = perturbed(&|d| d.v1 *= 1.0 + rel_step)?;
    let (mut fw, mut rw) = (0.0, 0.0);
    for i in 0..design.stiffness.len() {
        let w = perturbed(&|d| {
            let up = d.stiffness[i] * (1.0 + rel_step);
            d.stiffness[i] = if up > STIFFNESS_MAX { d.stiffness[i] / (1.0 + rel_step) } else { up };
        })?;
        fw += ((w.0 - base.0) / h).abs();
        rw += ((w.1 - base.1) / h).abs();
    }
    let n = design.stiffness.len() as f64;
    Ok(Sensitivities {
        focal_v: ((v.0 - base.0) / h).abs(),
        focal_w: fw / n,
        rms_v: ((v.1 - base.1) / h).abs(),
        rms_w: rw / n,
    })
}

#[cfg(test)]
mod tests;
