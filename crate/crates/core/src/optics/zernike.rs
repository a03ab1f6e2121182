use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_rank, equilibrate, lstsq};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ZERNIKE_TERMS: usize = 6;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT6: f64 = 2.449_489_742_783_178;

/// Terms `Z₀⁰, Z₁⁻¹, Z₁¹, Z₂⁻², Z₂⁰, Z₂²` at unit-disk coordinates.
pub fn basis(x: f64, y: f64) -> [f64; 6] {
    [
        1.0,
        2.0 * y,
        2.0 * x,
        2.0 * SQRT6 * x * y,
        SQRT3 * (2.0 * (x * x + y * y) - 1.0),
        SQRT6 * (x * x - y * y),
    ]
}

/// `(∂/∂x, ∂/∂y)` of each term at unit-disk coordinates.
pub fn basis_gradient(x: f64, y: f64) -> ([f64; 6], [f64; 6]) {
    (
        [0.0, 0.0, 2.0, 2.0 * SQRT6 * y, 4.0 * SQRT3 * x, 2.0 * SQRT6 * x],
        [0.0, 2.0, 0.0, 2.0 * SQRT6 * x, 4.0 * SQRT3 * y, -2.0 * SQRT6 * y],
    )
}

/// Height field `z = Σ ηₖ Zₖ(x/ρ, y/ρ)`, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "ZernikeRecord", try_from = "ZernikeRecord")]
pub struct ZernikeSurface {
    pub coefficients: [f64; 6],
    pub roi_radius: f64,
}

const RECORD_FORMAT: &str = "varifocal-zernike";
const RECORD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZernikeRecord {
    format: String,
    version: u32,
    roi_radius: f64,
    eta_0_0: f64,
    eta_1_m1: f64,
    eta_1_1: f64,
    eta_2_m2: f64,
    eta_2_0: f64,
    eta_2_2: f64,
}

impl From<ZernikeSurface> for ZernikeRecord {
    fn from(s: ZernikeSurface) -> Self {
        let c = s.coefficients;
        Self {
            format: RECORD_FORMAT.into(),
            version: RECORD_VERSION,
            roi_radius: s.roi_radius,
            eta_0_0: c[0],
            eta_1_m1: c[1],
            eta_1_1: c[2],
            eta_2_m2: c[3],
            eta_2_0: c[4],
            eta_2_2: c[5],
        }
    }
}

impl TryFrom<ZernikeRecord> for ZernikeSurface {
    type Error = Error;

    fn try_from(r: ZernikeRecord) -> Result<Self> {
        if r.format != RECORD_FORMAT || r.version != RECORD_VERSION {
            return Err(Error::Format(format!("unsupported surface record {} v{}", r.format, r.version)));
        }
        ZernikeSurface::new(
            [r.eta_0_0, r.eta_1_m1, r.eta_1_1, r.eta_2_m2, r.eta_2_0, r.eta_2_2],
            r.roi_radius,
        )
    }
}

impl ZernikeSurface {
    pub fn new(coefficients: [f64; 6], roi_radius: f64) -> Result<Self> {
        if !(roi_radius > 0.0 && roi_radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("roi_radius {roi_radius} must be positive")));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Zernike coefficient".into()));
        }
        Ok(Self {
            coefficients,
            roi_radius,
        })
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let b = basis(x / self.roi_radius, y / self.roi_radius);
        self.coefficients.iter().zip(b).map(|(c, z)| c * z).sum()
    }

    /// `(∂z/∂x, ∂z/∂y)` in physical coordinates.
    pub fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let (bx, by) = basis_gradient(x / self.roi_radius, y / self.roi_radius);
        let dot = |b: [f64; 6]| self.coefficients.iter().zip(b).map(|(c, z)| c * z).sum::<f64>();
        [dot(bx) / self.roi_radius, dot(by) / self.roi_radius]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("surface serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Height and physical-coordinate gradient at `(x, y)`.
pub fn zernike_eval(surface: &ZernikeSurface, x: f64, y: f64) -> (f64, [f64; 2]) {
    (surface.height(x, y), surface.gradient(x, y))
}

fn design_matrix(xy: impl ExactSizeIterator<Item = [f64; 2]>, roi_radius: f64) -> DMatrix<f64> {
    let rows: Vec<[f64; 6]> = xy.map(|p| basis(p[0] / roi_radius, p[1] / roi_radius)).collect();
    DMatrix::from_fn(rows.len(), ZERNIKE_TERMS, |i, j| rows[i][j])
}

/// Least-squares Zernike coefficients of the points' heights.
pub fn fit_zernike(points: &[[f64; 3]], roi_radius: f64) -> Result<ZernikeSurface> {
    if points.len() < ZERNIKE_TERMS {
        return Err(Error::Fit(format!(
            "Zernike fit needs {ZERNIKE_TERMS} points, got {}",
            points.len()
        )));
    }
    if !(roi_radius > 0.0) {
        return Err(Error::InvalidArgument(format!("roi_radius {roi_radius} must be positive")));
    }
    let a = design_matrix(points.iter().map(|p| [p[0], p[1]]), roi_radius);
    let z = DVector::from_iterator(points.len(), points.iter().map(|p| p[2]));
    let c = lstsq(a, z)?;
    ZernikeSurface::new([c[0], c[1], c[2], c[3], c[4], c[5]], roi_radius)
}

/// The `6 × n` matrix `P` with `fit_zernike(points).coefficients = P · z` for
/// fixed in-plane positions.
pub fn zernike_projector(xy: &[[f64; 2]], roi_radius: f64) -> Result<Tensor> {
    let n = xy.len();
    if n < ZERNIKE_TERMS {
        return Err(Error::Fit(format!("Zernike fit needs {ZERNIKE_TERMS} points, got {n}")));
    }
    let (a, scale) = equilibrate(design_matrix(xy.iter().copied(), roi_radius))?;
    let qr = a.qr();
    let r = qr.r();
    check_rank(&r)?;
    let rinv_qt = r
        .solve_upper_triangular(&qr.q().transpose())
        .ok_or_else(|| Error::Fit("singular triangular factor".into()))?;
    let p = Tensor::from_shape_fn((ZERNIKE_TERMS, n), |(i, j)| rinv_qt[(i, j)] / scale[i]);
    Ok(p)
}
