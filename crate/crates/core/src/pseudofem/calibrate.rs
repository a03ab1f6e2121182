use serde::{Deserialize, Serialize};

use super::{DesignVariables, MembraneOracle, OracleParams, STIFFNESS_MID};
use crate::error::{Error, Result};
use crate::mesh::{equivalent_center, Mesh};
use crate::optics::{deformed_points, fit_sphere, roi_nodes, SphereFit};

/// What the calibrated oracle must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationTarget {
    /// mm; the fitted sphere radius is twice this.
    pub focal_length: f64,
    pub v1: f64,
    pub uniform_stiffness: f64,
    /// Radius of the fitting region around the equivalent center, mm.
    pub roi_radius: f64,
    /// Search bracket for the load amplitude, Pa.
    pub amplitude_bracket: [f64; 2],
}

impl Default for CalibrationTarget {
    fn default() -> Self {
        Self {
            focal_length: 590.0,
            v1: 0.5,
            uniform_stiffness: STIFFNESS_MID,
            roi_radius: 9.0,
            amplitude_bracket: [1e-3, 1e7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub oracle_version: String,
    pub mesh_hash: String,
    pub params: OracleParams,
    pub target: CalibrationTarget,
    pub equivalent_center: [f64; 2],
    pub roi_node_count: usize,
    pub fitted_radius: f64,
    pub fitted_focal_length: f64,
    pub fitted_rms_nm: f64,
    pub iterations: usize,
}

/// Sphere fit of the deformed nodes within `roi_radius` of `center`.
pub fn sphere_fit_of_field(mesh: &Mesh, dz: &[f64], center: [f64; 2], roi_radius: f64) -> Result<SphereFit> {
    let nodes = roi_nodes(mesh, center, roi_radius);
    fit_sphere(&deformed_points(mesh, dz, &nodes))
}

/// Chooses the load amplitude so that the uniform design at the target
/// voltage bends the ROI into a sphere of radius `2 · focal_length`.
///
/// The fitted radius falls monotonically with the amplitude, so the search is
/// a bisection on `log A` inside the bracket.
pub fn calibrate_oracle(
    mesh: &Mesh,
    params: &OracleParams,
    target: &CalibrationTarget,
) -> Result<(MembraneOracle, CalibrationRecord)> {
    let unit = MembraneOracle::new(
        mesh,
        OracleParams {
            load_amplitude: 1.0,
            ..params.clone()
        },
    )?;
    let center = equivalent_center(mesh, &unit)?;
    let design = DesignVariables::uniform(target.v1, target.uniform_stiffness, mesh.boundary.len())?;
    let base = unit.simulate(&design)?;
    let radius_at = |amp: f64| -> Result<f64> {
        let dz: Vec<f64> = base.dz.iter().map(|d| d * amp).collect();
        Ok(sphere_fit_of_field(mesh, &dz, center, target.roi_radius)?.radius)
    };
    let want = 2.0 * target.focal_length;
    let [lo, hi] = target.amplitude_bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Calibration(format!("invalid amplitude bracket [{lo}, {hi}]")));
    }
    let (r_lo, r_hi) = (radius_at(lo)?, radius_at(hi)?);
    if !(r_lo > want && r_hi < want) {
        return Err(Error::Calibration(format!(
            "target radius {want} mm not bracketed: radius {r_lo:.6e} mm at {lo} Pa, {r_hi:.6e} mm at {hi} Pa"
        )));
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut iterations = 0;
    while b - a > 1e-14 * a.abs().max(1.0) && iterations < 200 {
        let mid = 0.5 * (a + b);
        if radius_at(mid.exp())? > want {
            a = mid;
        } else {
            b = mid;
        }
        iterations += 1;
    }
    let amplitude = (0.5 * (a + b)).exp();
    let oracle = unit.with_amplitude(amplitude)?;
    let field = oracle.simulate(&design)?;
    let fit = sphere_fit_of_field(mesh, &field.dz, center, target.roi_radius)?;
    if (fit.radius / want - 1.0).abs() > 1e-6 {
        return Err(Error::Calibration(format!(
            "calibrated radius {} mm misses target {want} mm",
            fit.radius
        )));
    }
    let record = CalibrationRecord {
        oracle_version: super::DeformationOracle::version(&oracle),
        mesh_hash: mesh.hash(),
        params: oracle.params().clone(),
        target: target.clone(),
        equivalent_center: center,
        roi_node_count: roi_nodes(mesh, center, target.roi_radius).len(),
        fitted_radius: fit.radius,
        fitted_focal_length: fit.radius / 2.0,
        fitted_rms_nm: fit.rms,
        iterations,
    };
    Ok((oracle, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_eyepiece_mesh, EyeShape, DEFAULT_NODE_COUNT};

    #[test]
    fn calibration_hits_target_and_is_idempotent() {
        let mesh = generate_eyepiece_mesh(&EyeShape::default(), DEFAULT_NODE_COUNT, 0).unwrap();
        let target = CalibrationTarget::default();
        let (oracle, rec) = calibrate_oracle(&mesh, &OracleParams::default(), &target).unwrap();
        assert!((rec.fitted_focal_length / 590.0 - 1.0).abs() < 0.05);
        let (_, again) = calibrate_oracle(&mesh, &OracleParams::default(), &target).unwrap();
        assert_eq!(rec, again);

        // twice the load, half the radius (small-sag regime)
        let design = DesignVariables::uniform(0.5, STIFFNESS_MID, 102).unwrap();
        let doubled = oracle.with_amplitude(2.0 * oracle.params().load_amplitude).unwrap();
        let f = doubled.simulate(&design).unwrap();
        let fit = sphere_fit_of_field(&mesh, &f.dz, rec.equivalent_center, target.roi_radius).unwrap();
        assert!((fit.radius / (rec.fitted_radius / 2.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn unreachable_target_reports_bracket() {
        let mesh = generate_eyepiece_mesh(&EyeShape::default(), DEFAULT_NODE_COUNT, 0).unwrap();
        let target = CalibrationTarget {
            amplitude_bracket: [1e-3, 1e-2],
            ..CalibrationTarget::default()
        };
        let err = calibrate_oracle(&mesh, &OracleParams::default(), &target).unwrap_err();
        assert!(matches!(err, Error::Calibration(ref m) if m.contains("not bracketed")), "{err}");
    }
}
