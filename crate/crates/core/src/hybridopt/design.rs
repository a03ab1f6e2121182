use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::optics::{deformed_points, fit_sphere, zernike_projector, ZernikeSurface};
use crate::raytrace::{find_best_focus, reflect_bundle, trace_loss, RayBundle, RootGradient, TraceConfig};
use crate::surrogate::{node_features_on_tape, normalize_stiffness, denormalize_stiffness, GraphTopology, SurrogateModel};

use super::Evaluator;

/// Spot RMS (nm) at the best-focus plane of the surface predicted by the
/// surrogate, as a function of the normalized log stiffness `u ∈ [0,1]^B`
/// at a fixed voltage.
pub struct SurrogateObjective<'a> {
    pub model: &'a SurrogateModel,
    pub topology: &'a GraphTopology,
    pub mesh: &'a Mesh,
    pub roi: &'a [usize],
    pub roi_radius: f64,
    pub source: &'a RayBundle,
    pub focus_interval: [f64; 2],
    pub trace: TraceConfig,
    pub v1: f64,
}

impl<'a> SurrogateObjective<'a> {
    pub fn from_evaluator(
        eval: &'a Evaluator<'a>,
        model: &'a SurrogateModel,
        topology: &'a GraphTopology,
        v1: f64,
    ) -> Self {
        Self {
            model,
            topology,
            mesh: eval.mesh,
            roi: &eval.roi,
            roi_radius: eval.settings.roi_radius,
            source: &eval.source,
            focus_interval: eval.settings.focus_interval,
            trace: eval.trace,
            v1,
        }
    }

    fn predict<'t>(&self, tape: &'t Tape, u: Var<'t>) -> Result<Var<'t>> {
        let params: Vec<Var<'t>> = self.model.tensors().into_iter().map(|t| tape.constant(t)).collect();
        let x = node_features_on_tape(self.topology, u, self.v1)?;
        let dz = self.model.forward_on_tape(&params, x, self.topology, 1)?;
        let base: Vec<f64> = self.roi.iter().map(|&i| self.mesh.nodes[i][2]).collect();
        Ok(dz.gather_rows(self.roi) + tape.column(&base))
    }

    /// Zernike coefficients of the predicted ROI heights `z` (`n × 1`) with
    /// the in-plane centering taken from the current sphere fit and held
    /// fixed.
    fn zernike<'t>(&self, z: Var<'t>) -> Result<(Var<'t>, ZernikeSurface)> {
        let zv = z.value();
        let dz: Vec<f64> = {
            let mut full = vec![0.0; self.mesh.node_count()];
            for (k, &i) in self.roi.iter().enumerate() {
                full[i] = zv[[k, 0]] - self.mesh.nodes[i][2];
            }
            full
        };
        let points = deformed_points(self.mesh, &dz, self.roi);
        let sphere = fit_sphere(&points)?;
        let xy: Vec<[f64; 2]> = points
            .iter()
            .map(|p| [p[0] - sphere.center[0], p[1] - sphere.center[1]])
            .collect();
        let p = z.tape().constant(zernike_projector(&xy, self.roi_radius)?);
        let theta = p.matmul(z).t();
        let tv = theta.value();
        let surface = ZernikeSurface::new(std::array::from_fn(|k| tv[[0, k]]), self.roi_radius)?;
        Ok((theta, surface))
    }

    fn best_plane(&self, surface: &ZernikeSurface) -> Result<(f64, f64)> {
        let reflected = reflect_bundle(surface, self.source, &self.trace)?;
        let [lo, hi] = self.focus_interval;
        let focus = find_best_focus(&reflected.rays, (lo, hi))?;
        Ok((focus.plane_z, focus.spot_rms))
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.topology.boundary.len() {
            return Err(Error::DimensionMismatch {
                expected: self.topology.boundary.len(),
                got: u.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, u: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        let tape = Tape::new();
        let z = self.predict(&tape, tape.column(u))?;
        let (_, surface) = self.zernike(z)?;
        Ok(self.best_plane(&surface)?.1)
    }

    /// Objective, its gradient in `u`, and the best-focus plane (held fixed
    /// while differentiating).
    pub fn value_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
        self.check_len(u)?;
        let tape = Tape::new();
        let uv = tape.var(Tensor::from_shape_vec((u.len(), 1), u.to_vec()).expect("column"));
        let z = self.predict(&tape, uv)?;
        let (theta, surface) = self.zernike(z)?;
        let (plane, _) = self.best_plane(&surface)?;
        let out = trace_loss(theta, self.roi_radius, self.source, plane, RootGradient::Implicit, &self.trace)?;
        let g = tape.backward(out.loss)?.get(uv);
        Ok((out.loss.item(), g.iter().copied().collect(), plane))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdConfig {
    pub epochs: usize,
    /// Adam step in normalized log-stiffness units.
    pub lr: f64,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdResult {
    /// `W^q`, N/m: the iterate with the lowest objective.
    pub stiffness: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Objective per epoch, evaluated before the step.
    pub losses: Vec<f64>,
    pub step_norms: Vec<f64>,
}

/// Adam descent of the surrogate objective over normalized log stiffness,
/// clipped to the stiffness bounds after every step. An iterate the
/// objective cannot evaluate ends the descent with the best one so far.
pub fn optimize_design(objective: &SurrogateObjective<'_>, w_init: &[f64], cfg: &GdConfig) -> Result<GdResult> {
    objective.check_len(w_init)?;
    let mut u: Vec<f64> = w_init.iter().map(|&w| normalize_stiffness(w).clamp(0.0, 1.0)).collect();
    let mut adam = AdamState::new(u.len());
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let mut step_norms = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, u.clone());
    for epoch in 0..=cfg.epochs {
        let step = if epoch < cfg.epochs {
            objective.value_and_grad(&u).map(|(l, g, _)| (l, Some(g)))
        } else {
            objective.value(&u).map(|l| (l, None))
        };
        let (loss, grad) = match step {
            Ok(s) => s,
            Err(e) if epoch > 0 => {
                log::warn!("design descent stopped at epoch {epoch}: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: epoch });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, u.clone());
        }
        let Some(grad) = grad else { break };
        let before = u.clone();
        adam_step(&mut u, &grad, &mut adam, &adam_cfg).map_err(|_| Error::NonFiniteLoss { iteration: epoch })?;
        for x in &mut u {
            *x = x.clamp(0.0, 1.0);
        }
        step_norms.push(before.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        if epoch % 50 == 0 {
            log::debug!("design descent epoch {epoch}: {loss:.2} nm");
        }
    }
    Ok(GdResult {
        stiffness: best.1.iter().map(|&s| denormalize_stiffness(s)).collect(),
        initial_loss: losses[0],
        final_loss: best.0,
        losses,
        step_norms,
    })
}
