//! Surface analysis: sphere fitting, deviation RMS, centering and the
//! six-term Zernike representation used by the ray tracer.

mod zernike;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

pub use zernike::{basis, basis_gradient, fit_zernike, zernike_eval, zernike_projector, ZernikeSurface, ZERNIKE_TERMS};

/// Best-fit sphere of a point set. Lengths in mm, `rms` in nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereFit {
    pub center: [f64; 3],
    pub radius: f64,
    pub rms: f64,
}

pub const MM_TO_NM: f64 = 1e6;

/// Solves the least-squares problem `min ‖A x − b‖` by Householder QR on
/// column-equilibrated `A`. Fails when `A` is numerically rank deficient.
pub(crate) fn lstsq(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Fit(format!("{m} equations for {n} unknowns")));
    }
    let (a, scale) = equilibrate(a)?;
    let qr = a.qr();
    let r = qr.r();
    check_rank(&r)?;
    let qtb = qr.q().transpose() * b;
    let y = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Fit("singular triangular factor".into()))?;
    Ok(y.component_div(&scale))
}

pub(super) fn equilibrate(mut a: DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = a.ncols();
    let mut scale = DVector::zeros(n);
    for j in 0..n {
        let norm = a.column(j).norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Fit(format!("column {j} is zero or non-finite")));
        }
        a.column_mut(j).scale_mut(1.0 / norm);
        scale[j] = norm;
    }
    Ok((a, scale))
}

pub(super) fn check_rank(r: &DMatrix<f64>) -> Result<()> {
    let diag: Vec<f64> = (0..r.ncols()).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if let Some(i) = diag.iter().position(|&d| d <= 1e-10 * max) {
        return Err(Error::Fit(format!("design matrix is rank deficient (column {i})")));
    }
    Ok(())
}

/// Sphere through `points` in the least-squares sense of the linearised
/// system `[2x 2y 2z 1]·ξ = x² + y² + z²`, with `r² = ξ₄ + x₀² + y₀² + z₀²`.
/// The RMS is evaluated with [`surface_rms`].
pub fn fit_sphere(points: &[[f64; 3]]) -> Result<SphereFit> {
    if points.len() < 4 {
        return Err(Error::Fit(format!("sphere fit needs 4 points, got {}", points.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite point".into()));
    }
    // The least-squares solution is translation covariant, so solve about the
    // centroid for conditioning.
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let a = DMatrix::from_fn(points.len(), 4, |i, j| {
        if j == 3 {
            1.0
        } else {
            2.0 * (points[i][j] - c[j])
        }
    });
    let b = DVector::from_fn(points.len(), |i, _| {
        (0..3).map(|k| (points[i][k] - c[k]).powi(2)).sum::<f64>()
    });
    let xi = lstsq(a, b)?;
    let r2 = xi[3] + xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
    if !(r2 > 0.0) {
        return Err(Error::Fit(format!("fitted r² = {r2} is not positive")));
    }
    let mut fit = SphereFit {
        center: [xi[0] + c[0], xi[1] + c[1], xi[2] + c[2]],
        radius: r2.sqrt(),
        rms: 0.0,
    };
    fit.rms = surface_rms(points, &fit)?;
    Ok(fit)
}

/// Branch of `z = z₀ ± √(r² − (x−x₀)² − (y−y₀)²)` that fits the points best, `+1.0` or `-1.0`.
pub fn sphere_branch(points: &[[f64; 3]], fit: &SphereFit) -> Result<f64> {
    let roots = radicand_roots(points, fit)?;
    let z0 = fit.center[2];
    let (mut up, mut down) = (0.0, 0.0);
    for (p, s) in points.iter().zip(&roots) {
        up += (z0 + s - p[2]).powi(2);
        down += (z0 - s - p[2]).powi(2);
    }
    Ok(if up <= down { 1.0 } else { -1.0 })
}

fn radicand_roots(points: &[[f64; 3]], fit: &SphereFit) -> Result<Vec<f64>> {
    let [x0, y0, _] = fit.center;
    let r2 = fit.radius * fit.radius;
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let rad = r2 - (p[0] - x0).powi(2) - (p[1] - y0).powi(2);
            if rad < 0.0 {
                Err(Error::OutsideFootprint { index })
            } else {
                Ok(rad.sqrt())
            }
        })
        .collect()
}

/// RMS deviation of the point heights from the sphere surface, in nm.
pub fn surface_rms(points: &[[f64; 3]], fit: &SphereFit) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Fit("no points".into()));
    }
    let roots = radicand_roots(points, fit)?;
    let z0 = fit.center[2];
    let (mut up, mut down) = (0.0, 0.0);
    for (p, s) in points.iter().zip(&roots) {
        up += (z0 + s - p[2]).powi(2);
        down += (z0 - s - p[2]).powi(2);
    }
    let sse = up.min(down);
    Ok((sse / points.len() as f64).sqrt() * MM_TO_NM)
}

/// Shifts x and y by the fitted sphere center; z is untouched.
pub fn center_points(points: &[[f64; 3]], fit: &SphereFit) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| [p[0] - fit.center[0], p[1] - fit.center[1], p[2]])
        .collect()
}

/// Nodes within `radius` of `center` (inclusive), ascending.
pub fn roi_nodes(mesh: &Mesh, center: [f64; 2], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    (0..mesh.node_count())
        .filter(|&i| {
            let p = mesh.xy(i);
            (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) <= r2
        })
        .collect()
}

/// Deformed positions `X + Δ` of the selected nodes (in-plane motion is zero).
pub fn deformed_points(mesh: &Mesh, dz: &[f64], nodes: &[usize]) -> Vec<[f64; 3]> {
    nodes
        .iter()
        .map(|&i| [mesh.nodes[i][0], mesh.nodes[i][1], mesh.nodes[i][2] + dz[i]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn sphere_points(rng: &mut ChaCha8Rng, c: [f64; 3], r: f64, n: usize, cap: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                let th = rng.random_range(0.0..cap);
                let ph = rng.random_range(0.0..std::f64::consts::TAU);
                [
                    c[0] + r * th.sin() * ph.cos(),
                    c[1] + r * th.sin() * ph.sin(),
                    c[2] + r * th.cos(),
                ]
            })
            .collect()
    }

    #[test]
    fn recovers_exact_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sphere_points(&mut rng, [1.0, 2.0, 3.0], 5.0, 200, 1.4);
        let fit = fit_sphere(&pts).unwrap();
        for k in 0..3 {
            assert!((fit.center[k] - [1.0, 2.0, 3.0][k]).abs() < 1e-9);
        }
        assert!((fit.radius - 5.0).abs() < 1e-9);
        assert!(fit.rms < 1e-6, "{}", fit.rms);
    }

    #[test]
    fn shallow_cap_lower_branch() {
        // mirror-like cap: z = z0 - sqrt(...) around the origin
        let r = 1180.0;
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|i| {
                let a = i as f64 * 0.7;
                let rho = 8.0 * ((i as f64 + 0.5) / 300.0).sqrt();
                let (x, y) = (rho * a.cos(), rho * a.sin());
                [x, y, r - (r * r - x * x - y * y).sqrt()]
            })
            .collect();
        let fit = fit_sphere(&pts).unwrap();
        assert!((fit.radius - r).abs() < 1e-6 * r, "{}", fit.radius);
        assert_eq!(sphere_branch(&pts, &fit).unwrap(), -1.0);
        assert!(fit.rms < 1e-3, "{}", fit.rms);
    }

    #[test]
    fn noise_rms_tracks_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = 1e-4;
        let mut pts = sphere_points(&mut rng, [0.0, 0.0, -50.0], 60.0, 20000, 0.5);
        for p in &mut pts {
            p[2] += sigma * normal(&mut rng);
        }
        let fit = fit_sphere(&pts).unwrap();
        let rel = (fit.rms / (sigma * MM_TO_NM) - 1.0).abs();
        assert!(rel < 0.2, "rms {} vs {}", fit.rms, sigma * MM_TO_NM);
    }

    #[test]
    fn collinear_points_rejected() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        assert!(fit_sphere(&pts).is_err());
        let pts = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [3.0, 3.0, 3.0], [4.0, 4.0, 4.0]];
        assert!(matches!(fit_sphere(&pts), Err(Error::Fit(_))));
    }

    #[test]
    fn single_offset_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sphere_points(&mut rng, [0.0, 0.0, 0.0], 10.0, 400, 1.5);
        let exact = fit_sphere(&pts).unwrap();
        let delta = 1e-3;
        let mut moved = pts.clone();
        moved[17][2] += delta;
        let rms = surface_rms(&moved, &exact).unwrap();
        let expect = delta / (pts.len() as f64).sqrt() * MM_TO_NM;
        assert!((rms - expect).abs() < 1e-6 * expect);
    }

    #[test]
    fn outside_footprint_names_point() {
        let fit = SphereFit {
            center: [0.0; 3],
            radius: 1.0,
            rms: 0.0,
        };
        let pts = [[0.0, 0.0, 1.0], [0.5, 0.0, 0.8], [2.0, 0.0, 0.0]];
        assert!(matches!(surface_rms(&pts, &fit), Err(Error::OutsideFootprint { index: 2 })));
    }

    #[test]
    fn centering() {
        let fit = SphereFit {
            center: [3.0, 0.0, 1.0],
            radius: 5.0,
            rms: 0.0,
        };
        let pts = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let c = center_points(&pts, &fit);
        assert_eq!(c, vec![[-2.0, 2.0, 3.0], [1.0, 5.0, 6.0]]);
        let zero = SphereFit { center: [0.0, 0.0, 7.0], ..fit };
        assert_eq!(center_points(&pts, &zero), pts.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = sphere_points(&mut rng, [2.5, -1.5, 0.0], 30.0, 100, 0.4);
        let f = fit_sphere(&pts).unwrap();
        let refit = fit_sphere(&center_points(&pts, &f)).unwrap();
        assert!(refit.center[0].abs() < 1e-9 && refit.center[1].abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn translation_covariance(tx in -50.0f64..50.0, ty in -50.0f64..50.0, tz in -50.0f64..50.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = sphere_points(&mut rng, [0.0, 0.0, 0.0], 20.0, 80, 0.8);
            for p in &mut pts {
                p[2] += 1e-3 * normal(&mut rng);
            }
            let a = fit_sphere(&pts).unwrap();
            let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + tx, p[1] + ty, p[2] + tz]).collect();
            let b = fit_sphere(&moved).unwrap();
            prop_assert!((b.center[0] - a.center[0] - tx).abs() < 1e-9);
            prop_assert!((b.center[1] - a.center[1] - ty).abs() < 1e-9);
            prop_assert!((b.center[2] - a.center[2] - tz).abs() < 1e-9);
            prop_assert!((b.radius - a.radius).abs() < 1e-9);
            prop_assert!((b.rms - a.rms).abs() < 1e-9 * 1e6);
        }

        #[test]
        fn rms_scales_with_residuals(alpha in 0.1f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fit = SphereFit { center: [0.0, 0.0, 0.0], radius: 10.0, rms: 0.0 };
            let pts = sphere_points(&mut rng, [0.0; 3], 10.0, 50, 1.0);
            let res: Vec<f64> = (0..50).map(|_| 1e-3 * normal(&mut rng)).collect();
            let with = |s: f64| -> Vec<[f64; 3]> {
                pts.iter().zip(&res).map(|(p, r)| [p[0], p[1], p[2] + s * r]).collect()
            };
            let a = surface_rms(&with(1.0), &fit).unwrap();
            let b = surface_rms(&with(alpha), &fit).unwrap();
            prop_assert!((b - alpha * a).abs() < 1e-9 * b.max(1.0));
        }
    }
}
