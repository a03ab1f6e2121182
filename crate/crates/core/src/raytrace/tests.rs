use super::*;
use crate::autodiff::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = norm(v);
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn angle(a: Vec3, b: Vec3) -> f64 {
    norm(cross(a, b)).atan2(dot(a, b))
}

fn mirror_like(rng: &mut ChaCha8Rng) -> ZernikeSurface {
    // convex cap of radius ~1200 mm with small random aberrations
    let rho = 9.0;
    let c4 = rho * rho / (2.0 * 1180.0) / (2.0 * SQRT3) * rng.random_range(0.7..1.3);
    let mut c = [0.0; 6];
    c[0] = rng.random_range(-0.05..0.05);
    c[1] = rng.random_range(-2e-3..2e-3);
    c[2] = rng.random_range(-2e-3..2e-3);
    c[3] = rng.random_range(-3e-4..3e-4);
    c[4] = -c4;
    c[5] = rng.random_range(-3e-4..3e-4);
    ZernikeSurface::new(c, rho).unwrap()
}

#[test]
fn source_patterns() {
    let one = make_source(10.0, 1, SourcePattern::Grid, 100.0).unwrap();
    assert_eq!(one.origins, vec![[0.0, 0.0, 100.0]]);
    let grid = make_source(10.0, 400, SourcePattern::Grid, 100.0).unwrap();
    assert!(grid.len() <= 400 && grid.len() > 300, "{}", grid.len());
    assert!(grid.origins.iter().all(|o| o[0].hypot(o[1]) <= 10.0));
    assert!(grid.directions.iter().all(|d| *d == [0.0, 0.0, -1.0]));
    let ring = make_source(7.0, 33, SourcePattern::Ring, 100.0).unwrap();
    assert_eq!(ring.len(), 33);
    assert!(ring.origins.iter().all(|o| (o[0].hypot(o[1]) - 7.0).abs() < 1e-12));
    assert!(make_source(10.0, 0, SourcePattern::Grid, 100.0).is_err());
}

#[test]
fn flat_surface_one_step() {
    let s = ZernikeSurface::new([0.25, 0.0, 0.0, 0.0, 0.0, 0.0], 5.0).unwrap();
    let rays = RayBundle::new(vec![[0.0, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]]).unwrap();
    let hit = intersect(&rays, &s, &NewtonConfig::default());
    assert!(hit.converged[0]);
    assert!((hit.points[0][2] - 0.25).abs() < 1e-15);
    assert!((hit.t[0] - 0.25).abs() < 1e-15);
}

#[test]
fn defocus_root_matches_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let rho = 8.0;
        let (c0, c4) = (rng.random_range(-0.1..0.1), rng.random_range(-0.05..0.05));
        let s = ZernikeSurface::new([c0, 0.0, 0.0, 0.0, c4, 0.0], rho).unwrap();
        let o = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 50.0];
        let tilt = rng.random_range(0.0..0.2f64);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let u = [tilt.sin() * phi.cos(), tilt.sin() * phi.sin(), -tilt.cos()];
        let rays = RayBundle::new(vec![o], vec![u]).unwrap();
        let hit = intersect(&rays, &s, &NewtonConfig::default());
        assert!(hit.converged[0]);
        let a = c0 - SQRT3 * c4;
        let b = 2.0 * SQRT3 * c4 / (rho * rho);
        let qa = b * (u[0] * u[0] + u[1] * u[1]);
        let qb = 2.0 * b * (o[0] * u[0] + o[1] * u[1]) - u[2];
        let qc = a + b * (o[0] * o[0] + o[1] * o[1]) - o[2];
        let t = if qa.abs() < 1e-300 {
            -qc / qb
        } else {
            let disc = (qb * qb - 4.0 * qa * qc).sqrt();
            // numerically stable pair; first hit is the smaller positive root
            let q = -0.5 * (qb + qb.signum() * disc);
            let (r1, r2) = (q / qa, qc / q);
            [r1, r2].into_iter().filter(|r| *r > 0.0).fold(f64::INFINITY, f64::min)
        };
        assert!((hit.t[0] - t).abs() < 1e-9, "{} vs {t}", hit.t[0]);
    }
}

#[test]
fn implicit_hit_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let s = mirror_like(&mut rng);
    let source = make_source(8.0, 30, SourcePattern::Grid, 100.0).unwrap();
    let tape = Tape::new();
    let theta = tape.var(Tensor::from_shape_vec((1, 6), s.coefficients.to_vec()).unwrap());
    let t = intersect_on_tape(theta, s.roi_radius, &source, RootGradient::Implicit, &NewtonConfig::default()).unwrap();
    // q_z of ray 3 as a function of η₂⁰
    let i = 3;
    let qz = (t.gather_rows(&[i]) * source.directions[i][2]).sum() + source.origins[i][2];
    let g = tape.backward(qz).unwrap().get(theta)[[0, 4]];
    let h = 1e-6;
    let at = |d: f64| {
        let mut c = s.coefficients;
        c[4] += d;
        let surf = ZernikeSurface::new(c, s.roi_radius).unwrap();
        intersect(&source, &surf, &NewtonConfig::default()).points[i][2]
    };
    let fd = (at(h) - at(-h)) / (2.0 * h);
    assert!((g - fd).abs() < 1e-6 * fd.abs(), "{g} vs {fd}");
}

#[test]
fn reflection_examples() {
    assert_eq!(reflect([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]), [0.0, 0.0, -1.0]);
    let u = [1.0, 0.0, 0.0];
    assert_eq!(reflect(u, [0.0, 0.0, 1.0]), u);
}

#[test]
fn reflection_and_refraction_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..1000 {
        let u = random_unit(&mut rng);
        let n = random_unit(&mut rng);
        let r = reflect(u, n);
        assert!((norm(r) - 1.0).abs() < 1e-12);
        assert!((angle(u, n) - angle(r, [-n[0], -n[1], -n[2]])).abs() < 1e-12);
        assert!(dot(cross(u, n), r).abs() < 1e-12);

        let mu = rng.random_range(0.5..1.0);
        let t = refract(u, n, mu).unwrap();
        assert!((norm(t) - 1.0).abs() < 1e-12);
        assert!(dot(cross(u, n), t).abs() < 1e-12);
        let nn = if dot(n, u) < 0.0 { [-n[0], -n[1], -n[2]] } else { n };
        let (si, st) = (norm(cross(u, nn)), norm(cross(t, nn)));
        assert!((st - mu * si).abs() < 1e-12);
    }
}

#[test]
fn refraction_examples() {
    let u = [0.3f64.sin(), 0.0, -0.3f64.cos()];
    let n = [0.0, 0.0, 1.0];
    let t = refract(u, n, 1.0).unwrap();
    for k in 0..3 {
        assert!((t[k] - u[k]).abs() < 1e-15);
    }
    let steep = [80f64.to_radians().sin(), 0.0, -80f64.to_radians().cos()];
    assert!(matches!(refract(steep, n, 1.5), Err(Error::TotalInternalReflection { .. })));
    let th = 30f64.to_radians();
    let u = [th.sin(), 0.0, -th.cos()];
    let mu = 1.0 / 1.5;
    let t = refract(u, n, mu).unwrap();
    assert!((t[0] - mu * th.sin()).abs() < 1e-12);
}

#[test]
fn normals() {
    let flat = ZernikeSurface::new([1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3.0).unwrap();
    let down = [0.0, 0.0, -1.0];
    assert_eq!(surface_normal(&flat, [0.3, 0.2, 1.0], down), [0.0, 0.0, 1.0]);
    let defocus = ZernikeSurface::new([0.0, 0.0, 0.0, 0.0, 0.2, 0.0], 3.0).unwrap();
    let n = surface_normal(&defocus, [0.0, 0.0, 0.0], down);
    assert!(n[0].abs() < 1e-15 && n[1].abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..500 {
        let s = mirror_like(&mut rng);
        let (x, y) = (rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
        let g = s.gradient(x, y);
        let n = surface_normal(&s, [x, y, s.height(x, y)], down);
        assert!(dot(n, [1.0, 0.0, g[0]]).abs() < 1e-12);
        assert!(dot(n, [0.0, 1.0, g[1]]).abs() < 1e-12);
        assert!(dot(n, down) < 0.0);
    }
}

#[test]
fn propagation() {
    let focus = [1.0, -2.0, -30.0];
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut origins = Vec::new();
    let mut dirs = Vec::new();
    for _ in 0..50 {
        let o = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 10.0];
        let d = [focus[0] - o[0], focus[1] - o[1], focus[2] - o[2]];
        let l = norm(d);
        origins.push(o);
        dirs.push([d[0] / l, d[1] / l, d[2] / l]);
    }
    let rays = RayBundle::new(origins, dirs).unwrap();
    assert!(propagate_to_plane(&rays, -30.0).spot_rms < 1e-6);

    let src = make_source(5.0, 100, SourcePattern::Grid, 100.0).unwrap();
    let pattern = propagate_to_plane(&src, 100.0).spot_rms;
    for z in [-500.0, 0.0, 42.0] {
        assert!((propagate_to_plane(&src, z).spot_rms - pattern).abs() < 1e-6);
    }
    let sideways = RayBundle::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(propagate_to_plane(&sideways, 5.0).flagged, 1);
}

#[test]
fn concave_mirror_focus() {
    let r = 1180.0;
    let mirror = SphericalSurface { radius: r, vertex_z: 0.0 };
    let src = make_source(0.02 * r, 400, SourcePattern::Grid, 100.0).unwrap();
    let refl = reflect_bundle(&mirror, &src, &TraceConfig::default()).unwrap();
    let f = find_best_focus(&refl.rays, (100.0, 1200.0)).unwrap();
    assert!((f.focal_length() / 590.0 - 1.0).abs() < 0.01, "{}", f.plane_z);

    let convex = SphericalSurface { radius: -r, vertex_z: 0.0 };
    let refl = reflect_bundle(&convex, &src, &TraceConfig::default()).unwrap();
    let f = find_best_focus(&refl.rays, (-1200.0, -100.0)).unwrap();
    assert!((f.focal_length() / 590.0 - 1.0).abs() < 0.01, "{}", f.plane_z);
}

#[test]
fn parallel_bundle_has_no_focus() {
    let src = make_source(5.0, 50, SourcePattern::Grid, 100.0).unwrap();
    assert!(matches!(
        find_best_focus(&src, (-100.0, 100.0)),
        Err(Error::NoInteriorMinimum { .. })
    ));
}

fn loss_value(c: [f64; 6], rho: f64, src: &RayBundle, plane: f64) -> f64 {
    trace_loss_value(&ZernikeSurface::new(c, rho).unwrap(), src, plane, &TraceConfig::default()).unwrap()
}

#[test]
fn trace_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..20 {
        let s = mirror_like(&mut rng);
        let src = make_source(8.0, 60, SourcePattern::Grid, 100.0).unwrap();
        let plane = -rng.random_range(400.0..800.0);
        let tape = Tape::new();
        let theta = tape.var(Tensor::from_shape_vec((1, 6), s.coefficients.to_vec()).unwrap());
        let out = trace_loss(theta, s.roi_radius, &src, plane, RootGradient::Implicit, &TraceConfig::default()).unwrap();
        assert!((out.loss.item() - loss_value(s.coefficients, s.roi_radius, &src, plane)).abs() < 1e-6);
        let g = tape.backward(out.loss).unwrap().get(theta);
        for k in 1..6 {
            let h = 1e-7;
            let mut cp = s.coefficients;
            let mut cm = s.coefficients;
            cp[k] += h;
            cm[k] -= h;
            let fd = (loss_value(cp, s.roi_radius, &src, plane) - loss_value(cm, s.roi_radius, &src, plane)) / (2.0 * h);
            let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!((g[[0, k]] - fd).abs() < 1e-4 * scale, "k={k}: {} vs {fd}", g[[0, k]]);
        }
    }
}

#[test]
fn loss_decreases_along_negative_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let s = mirror_like(&mut rng);
    let src = make_source(8.0, 80, SourcePattern::Grid, 100.0).unwrap();
    let tape = Tape::new();
    let theta = tape.var(Tensor::from_shape_vec((1, 6), s.coefficients.to_vec()).unwrap());
    let out = trace_loss(theta, s.roi_radius, &src, -590.0, RootGradient::Implicit, &TraceConfig::default()).unwrap();
    let g = tape.backward(out.loss).unwrap().get(theta);
    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut prev = out.loss.item();
    for step in 1..=5 {
        let eps = 1e-9 * step as f64 / gn;
        let c: [f64; 6] = std::array::from_fn(|k| s.coefficients[k] - eps * g[[0, k]]);
        let l = loss_value(c, s.roi_radius, &src, -590.0);
        assert!(l < prev, "step {step}: {l} >= {prev}");
        prev = l;
    }
}

#[test]
fn implicit_equals_unrolled() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let s = mirror_like(&mut rng);
    let src = make_source(8.0, 200, SourcePattern::Grid, 100.0).unwrap();
    let grad = |mode| {
        let tape = Tape::new();
        let theta = tape.var(Tensor::from_shape_vec((1, 6), s.coefficients.to_vec()).unwrap());
        let t = intersect_on_tape(theta, s.roi_radius, &src, mode, &NewtonConfig::default()).unwrap();
        (0..src.len())
            .map(|i| {
                let ti = t.gather_rows(&[i]).sum();
                tape.backward(ti).unwrap().get(theta)
            })
            .collect::<Vec<_>>()
    };
    let a = grad(RootGradient::Implicit);
    let b = grad(RootGradient::Unrolled { iterations: 8 });
    for (ga, gb) in a.iter().zip(&b) {
        let scale = ga.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..6 {
            assert!((ga[[0, k]] - gb[[0, k]]).abs() <= 1e-8 * scale);
        }
    }
}

#[test]
fn focus_moves_monotonically_with_defocus() {
    let src = make_source(8.0, 100, SourcePattern::Grid, 100.0).unwrap();
    let rho = 9.0;
    let mut prev = 0.0;
    for i in 0..8 {
        let c4 = -(0.008 + 0.002 * i as f64);
        let s = ZernikeSurface::new([0.0, 0.0, 0.0, 0.0, c4, 0.0], rho).unwrap();
        let refl = reflect_bundle(&s, &src, &TraceConfig::default()).unwrap();
        let f = find_best_focus(&refl.rays, (-3000.0, -50.0)).unwrap().focal_length();
        // paraxial: f = R/2 with R = rho² / (4√3 |c4|)
        let paraxial = rho * rho / (4.0 * SQRT3 * c4.abs()) / 2.0;
        assert!((f / paraxial - 1.0).abs() < 0.01, "{f} vs {paraxial}");
        if i > 0 {
            assert!(f < prev);
        }
        prev = f;
    }
}

#[test]
fn svg_title_and_determinism() {
    let src = make_source(5.0, 20, SourcePattern::Grid, 100.0).unwrap();
    let s = ZernikeSurface::new([0.0, 0.0, 0.0, 0.0, -0.01, 0.0], 9.0).unwrap();
    let refl = reflect_bundle(&s, &src, &TraceConfig::default()).unwrap();
    let spot = propagate_to_plane(&refl.rays, -590.0);
    let svg = spot.to_svg("test");
    assert!(svg.contains("-590 mm"));
    assert_eq!(svg, propagate_to_plane(&refl.rays, -590.0).to_svg("test"));
    assert!(spot.to_csv().contains("# spot_rms_nm="));
}
