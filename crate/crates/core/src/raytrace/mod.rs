//! Sequential ray tracing against a height-field mirror, with gradients
//! flowing back to the surface coefficients.
//!
//! Rays leave a plane source travelling along `-z`, meet the surface
//! `z = f(x, y; θ)` (Newton's method on the ray parameter), reflect, and are
//! extended, backwards if needed, to a detector plane `z = const`. A convex
//! mirror forms a virtual image, so its best focus lies at negative `z`.

mod spot;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::optics::{basis, ZernikeSurface, MM_TO_NM, ZERNIKE_TERMS};

pub use spot::{find_best_focus, propagate_to_plane, FocusResult, SpotDiagram, FOCUS_SCAN_SAMPLES};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT6: f64 = 2.449_489_742_783_178;

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// A mirror described as a height field.
pub trait Surface {
    fn height(&self, x: f64, y: f64) -> f64;
    fn gradient(&self, x: f64, y: f64) -> [f64; 2];

    /// Height of the plane used to start the Newton iteration.
    fn reference_height(&self) -> f64 {
        self.height(0.0, 0.0)
    }
}

impl Surface for ZernikeSurface {
    fn height(&self, x: f64, y: f64) -> f64 {
        ZernikeSurface::height(self, x, y)
    }

    fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        ZernikeSurface::gradient(self, x, y)
    }

    /// Mean height over the unit disk, which is `η₀⁰` alone.
    fn reference_height(&self) -> f64 {
        self.coefficients[0]
    }
}

/// Spherical cap with its vertex at `z = vertex_z`. A positive radius is
/// concave towards `+z` (center of curvature above the vertex).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalSurface {
    pub radius: f64,
    pub vertex_z: f64,
}

impl Surface for SphericalSurface {
    fn height(&self, x: f64, y: f64) -> f64 {
        let r = self.radius.abs();
        let sag = r - (r * r - x * x - y * y).sqrt();
        self.vertex_z + self.radius.signum() * sag
    }

    fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let r = self.radius.abs();
        let s = (r * r - x * x - y * y).sqrt();
        let k = self.radius.signum() / s;
        [k * x, k * y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl RayBundle {
    pub fn new(origins: Vec<Vec3>, directions: Vec<Vec3>) -> Result<Self> {
        if origins.len() != directions.len() {
            return Err(Error::DimensionMismatch {
                expected: origins.len(),
                got: directions.len(),
            });
        }
        if let Some(i) = directions.iter().position(|d| (norm(*d) - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidArgument(format!("direction {i} is not a unit vector")));
        }
        Ok(Self { origins, directions })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    fn subset(&self, keep: &[usize]) -> RayBundle {
        RayBundle {
            origins: keep.iter().map(|&i| self.origins[i]).collect(),
            directions: keep.iter().map(|&i| self.directions[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourcePattern {
    Grid,
    Ring,
}

/// Parallel rays along `-z` from the plane `z = z_source`.
///
/// `Grid` lays out the densest centered square lattice with at most `n_rays`
/// points inside the aperture; `Ring` puts `n_rays` points on its rim.
pub fn make_source(aperture_radius: f64, n_rays: usize, pattern: SourcePattern, z_source: f64) -> Result<RayBundle> {
    if n_rays == 0 {
        return Err(Error::InvalidArgument("n_rays must be at least 1".into()));
    }
    if !(aperture_radius > 0.0) {
        return Err(Error::InvalidArgument(format!("aperture radius {aperture_radius} must be positive")));
    }
    let xy: Vec<[f64; 2]> = match pattern {
        SourcePattern::Ring => (0..n_rays)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n_rays as f64;
                [aperture_radius * a.cos(), aperture_radius * a.sin()]
            })
            .collect(),
        SourcePattern::Grid => {
            let lattice = |m: usize| -> Vec<[f64; 2]> {
                let step = 2.0 * aperture_radius / m as f64;
                let mut pts = Vec::new();
                for j in 0..m {
                    for i in 0..m {
                        let p = [
                            -aperture_radius + (i as f64 + 0.5) * step,
                            -aperture_radius + (j as f64 + 0.5) * step,
                        ];
                        if p[0] * p[0] + p[1] * p[1] <= aperture_radius * aperture_radius {
                            pts.push(p);
                        }
                    }
                }
                pts
            };
            let mut m = 1;
            while lattice(m + 1).len() <= n_rays {
                m += 1;
            }
            lattice(m)
        }
    };
    let n = xy.len();
    RayBundle::new(
        xy.into_iter().map(|p| [p[0], p[1], z_source]).collect(),
        vec![[0.0, 0.0, -1.0]; n],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    /// Convergence threshold on |g(t)|, mm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intersection {
    pub t: Vec<f64>,
    pub points: Vec<Vec3>,
    pub converged: Vec<bool>,
}

impl Intersection {
    pub fn flagged(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }

    pub fn converged_indices(&self) -> Vec<usize> {
        (0..self.t.len()).filter(|&i| self.converged[i]).collect()
    }
}

/// Newton's method on `g(t) = f(o_xy + u_xy t) − (o_z + u_z t)`, started
/// from the reference plane. Rays that fail to converge are flagged.
pub fn intersect(rays: &RayBundle, surface: &(impl Surface + ?Sized), cfg: &NewtonConfig) -> Intersection {
    let z_ref = surface.reference_height();
    let mut out = Intersection {
        t: Vec::with_capacity(rays.len()),
        points: Vec::with_capacity(rays.len()),
        converged: Vec::with_capacity(rays.len()),
    };
    for (o, u) in rays.origins.iter().zip(&rays.directions) {
        let mut t = if u[2] != 0.0 { (z_ref - o[2]) / u[2] } else { 0.0 };
        let mut ok = false;
        for _ in 0..=cfg.max_iter {
            let (x, y) = (o[0] + u[0] * t, o[1] + u[1] * t);
            let g = surface.height(x, y) - (o[2] + u[2] * t);
            if !g.is_finite() {
                break;
            }
            if g.abs() <= cfg.tol {
                ok = true;
                break;
            }
            let grad = surface.gradient(x, y);
            let dg = grad[0] * u[0] + grad[1] * u[1] - u[2];
            if dg == 0.0 || !dg.is_finite() {
                break;
            }
            t -= g / dg;
        }
        out.t.push(t);
        out.points.push([o[0] + u[0] * t, o[1] + u[1] * t, o[2] + u[2] * t]);
        out.converged.push(ok);
    }
    out
}

/// Unit normal `(−f_x, −f_y, 1)/‖·‖` flipped if needed so that `n · u < 0`.
pub fn surface_normal(surface: &(impl Surface + ?Sized), q: Vec3, u: Vec3) -> Vec3 {
    let g = surface.gradient(q[0], q[1]);
    let len = (g[0] * g[0] + g[1] * g[1] + 1.0).sqrt();
    let n = [-g[0] / len, -g[1] / len, 1.0 / len];
    if dot(n, u) > 0.0 {
        [-n[0], -n[1], -n[2]]
    } else {
        n
    }
}

pub fn reflect(u: Vec3, n: Vec3) -> Vec3 {
    let d = dot(u, n);
    [u[0] - 2.0 * d * n[0], u[1] - 2.0 * d * n[1], u[2] - 2.0 * d * n[2]]
}

/// Vector Snell's law with `mu = n_incident / n_transmitted`. The normal may
/// face either way; it is taken along the propagation side.
pub fn refract(u: Vec3, n: Vec3, mu: f64) -> Result<Vec3> {
    let n = if dot(n, u) < 0.0 { [-n[0], -n[1], -n[2]] } else { n };
    let c = dot(n, u);
    let radicand = 1.0 - mu * mu * (1.0 - c * c);
    if radicand < 0.0 {
        return Err(Error::TotalInternalReflection { radicand });
    }
    let s = radicand.sqrt();
    Ok([
        n[0] * s + mu * (u[0] - c * n[0]),
        n[1] * s + mu * (u[1] - c * n[1]),
        n[2] * s + mu * (u[2] - c * n[2]),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub newton: NewtonConfig,
    /// Largest tolerated fraction of non-converged rays.
    pub max_flagged_fraction: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            newton: NewtonConfig::default(),
            max_flagged_fraction: 0.1,
        }
    }
}

fn check_budget(flagged: usize, total: usize, cfg: &TraceConfig) -> Result<()> {
    if total == 0 || flagged as f64 > cfg.max_flagged_fraction * total as f64 || flagged == total {
        return Err(Error::TraceBudget { flagged, total });
    }
    Ok(())
}

/// Reflected rays leaving the surface, starting at the hit points.
#[derive(Debug, Clone)]
pub struct Reflection {
    pub rays: RayBundle,
    pub flagged: usize,
}

/// Intersects, reflects and drops non-converged rays.
pub fn reflect_bundle(surface: &(impl Surface + ?Sized), source: &RayBundle, cfg: &TraceConfig) -> Result<Reflection> {
    let hit = intersect(source, surface, &cfg.newton);
    let flagged = hit.flagged();
    check_budget(flagged, source.len(), cfg)?;
    let mut origins = Vec::new();
    let mut directions = Vec::new();
    for i in hit.converged_indices() {
        let u = source.directions[i];
        let n = surface_normal(surface, hit.points[i], u);
        let r = reflect(u, n);
        let len = norm(r);
        origins.push(hit.points[i]);
        directions.push([r[0] / len, r[1] / len, r[2] / len]);
    }
    Ok(Reflection {
        rays: RayBundle { origins, directions },
        flagged,
    })
}

/// Backward rule of the ray parameter at a converged root:
/// `∂t/∂θₖ = −Zₖ(q) / g'(t)`.
struct ImplicitRoot {
    /// Row i: `−Zₖ(qᵢ)/g'ᵢ`.
    sensitivity: Tensor,
}

impl CustomOp for ImplicitRoot {
    fn name(&self) -> &'static str {
        "implicit_root"
    }

    fn backward(&self, grad_out: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        vec![grad_out.t().dot(&self.sensitivity)]
    }
}

/// Per-ray constant columns of a bundle.
struct RayColumns<'t> {
    ox: Var<'t>,
    oy: Var<'t>,
    oz: Var<'t>,
    ux: Var<'t>,
    uy: Var<'t>,
    uz: Var<'t>,
}

impl<'t> RayColumns<'t> {
    fn new(tape: &'t Tape, rays: &RayBundle) -> Self {
        let col = |f: &dyn Fn(usize) -> f64| {
            tape.column(&(0..rays.len()).map(f).collect::<Vec<_>>())
        };
        Self {
            ox: col(&|i| rays.origins[i][0]),
            oy: col(&|i| rays.origins[i][1]),
            oz: col(&|i| rays.origins[i][2]),
            ux: col(&|i| rays.directions[i][0]),
            uy: col(&|i| rays.directions[i][1]),
            uz: col(&|i| rays.directions[i][2]),
        }
    }
}

/// Surface height and slopes on the tape at points `(x, y)` for coefficients `θ` (`1 × 6`).
fn zernike_on_tape<'t>(theta: Var<'t>, x: Var<'t>, y: Var<'t>, roi_radius: f64) -> (Var<'t>, Var<'t>, Var<'t>) {
    let c = |k: usize| theta.col(k);
    let xn = x * (1.0 / roi_radius);
    let yn = y * (1.0 / roi_radius);
    let r2 = xn.square() + yn.square();
    let z = c(0)
        + c(1) * yn * 2.0
        + c(2) * xn * 2.0
        + c(3) * (xn * yn) * (2.0 * SQRT6)
        + c(4) * (r2 * 2.0 - 1.0) * SQRT3
        + c(5) * (xn.square() - yn.square()) * SQRT6;
    let fx = (c(2) * 2.0 + c(3) * yn * (2.0 * SQRT6) + c(4) * xn * (4.0 * SQRT3) + c(5) * xn * (2.0 * SQRT6))
        * (1.0 / roi_radius);
    let fy = (c(1) * 2.0 + c(3) * xn * (2.0 * SQRT6) + c(4) * yn * (4.0 * SQRT3) - c(5) * yn * (2.0 * SQRT6))
        * (1.0 / roi_radius);
    (z, fx, fy)
}

/// How the intersection parameter enters the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootGradient {
    /// Converged root with the implicit-function rule.
    Implicit,
    /// The Newton iterations themselves, recorded step by step.
    Unrolled { iterations: usize },
}

/// Intersection parameters `t` (`n × 1`) of `rays` with the Zernike surface
/// `θ`, differentiable with respect to `θ`. All rays must converge.
pub fn intersect_on_tape<'t>(
    theta: Var<'t>,
    roi_radius: f64,
    rays: &RayBundle,
    mode: RootGradient,
    cfg: &NewtonConfig,
) -> Result<Var<'t>> {
    let tape = theta.tape();
    let coeffs = theta.value();
    let surface = ZernikeSurface::new(
        std::array::from_fn(|k| coeffs[[0, k]]),
        roi_radius,
    )?;
    match mode {
        RootGradient::Implicit => {
            let hit = intersect(rays, &surface, cfg);
            if hit.flagged() > 0 {
                return Err(Error::TraceBudget {
                    flagged: hit.flagged(),
                    total: rays.len(),
                });
            }
            let n = rays.len();
            let mut sens = Tensor::zeros((n, ZERNIKE_TERMS));
            for i in 0..n {
                let q = hit.points[i];
                let u = rays.directions[i];
                let g = surface.gradient(q[0], q[1]);
                let dg = g[0] * u[0] + g[1] * u[1] - u[2];
                let z = basis(q[0] / roi_radius, q[1] / roi_radius);
                for k in 0..ZERNIKE_TERMS {
                    sens[[i, k]] = -z[k] / dg;
                }
            }
            let t = Tensor::from_shape_vec((n, 1), hit.t).expect("column");
            Ok(tape.custom(&[theta], t, ImplicitRoot { sensitivity: sens }))
        }
        RootGradient::Unrolled { iterations } => {
            let cols = RayColumns::new(tape, rays);
            let z_ref = surface.reference_height();
            let t0: Vec<f64> = rays
                .origins
                .iter()
                .zip(&rays.directions)
                .map(|(o, u)| (z_ref - o[2]) / u[2])
                .collect();
            let mut t = tape.column(&t0);
            for _ in 0..iterations {
                let x = cols.ox + cols.ux * t;
                let y = cols.oy + cols.uy * t;
                let (f, fx, fy) = zernike_on_tape(theta, x, y, roi_radius);
                let g = f - (cols.oz + cols.uz * t);
                let dg = fx * cols.ux + fy * cols.uy - cols.uz;
                t = t - g / dg;
            }
            Ok(t)
        }
    }
}

/// Differentiable spot RMS (nm) at `plane_z`, with the rays that hit the
/// surface and their count of flagged rays.
pub struct TraceOutput<'t> {
    pub loss: Var<'t>,
    pub flagged: usize,
    pub traced: usize,
}

/// Spot RMS at `plane_z` of `source` reflected by the surface `θ` (`1 × 6`).
/// Rays that fail to intersect are dropped; more than the configured
/// fraction is an error.
pub fn trace_loss<'t>(
    theta: Var<'t>,
    roi_radius: f64,
    source: &RayBundle,
    plane_z: f64,
    mode: RootGradient,
    cfg: &TraceConfig,
) -> Result<TraceOutput<'t>> {
    let tape = theta.tape();
    let coeffs = theta.value();
    let surface = ZernikeSurface::new(std::array::from_fn(|k| coeffs[[0, k]]), roi_radius)?;
    let hit = intersect(source, &surface, &cfg.newton);
    let flagged = hit.flagged();
    check_budget(flagged, source.len(), cfg)?;
    let rays = source.subset(&hit.converged_indices());
    let t = intersect_on_tape(theta, roi_radius, &rays, mode, &cfg.newton)?;
    let cols = RayColumns::new(tape, &rays);
    let qx = cols.ox + cols.ux * t;
    let qy = cols.oy + cols.uy * t;
    let qz = cols.oz + cols.uz * t;
    let (_, fx, fy) = zernike_on_tape(theta, qx, qy, roi_radius);
    let len = (fx.square() + fy.square() + 1.0).sqrt();
    let (nx, ny, nz) = (-fx / len, -fy / len, 1.0 / len);
    let d = cols.ux * nx + cols.uy * ny + cols.uz * nz;
    let rx = cols.ux - d * nx * 2.0;
    let ry = cols.uy - d * ny * 2.0;
    let rz = cols.uz - d * nz * 2.0;
    let s = (plane_z - qz) / rz;
    let hx = qx + rx * s;
    let hy = qy + ry * s;
    let dx = hx - hx.mean();
    let dy = hy - hy.mean();
    let loss = ((dx.square() + dy.square()).mean()).sqrt() * MM_TO_NM;
    Ok(TraceOutput {
        loss,
        flagged,
        traced: rays.len(),
    })
}

/// Value-only spot RMS (nm) at `plane_z` for a Zernike surface.
pub fn trace_loss_value(surface: &ZernikeSurface, source: &RayBundle, plane_z: f64, cfg: &TraceConfig) -> Result<f64> {
    let reflection = reflect_bundle(surface, source, cfg)?;
    Ok(propagate_to_plane(&reflection.rays, plane_z).spot_rms)
}

#[cfg(test)]
mod tests;
