use std::sync::Arc;

use super::*;
use crate::mesh::{augment_edges, generate_eyepiece_mesh, EyeShape, AUGMENT_RADIUS};
use crate::pseudofem::{generate_dataset, CalibrationTarget, MembraneOracle, OracleParams};
use crate::surrogate::{normalize_stiffness, train, GraphTopology, SurrogateConfig, SurrogateModel, TrainConfig};
use crate::pseudofem::calibrate_oracle;

struct Fixture {
    mesh: Mesh,
    oracle: MembraneOracle,
    center: [f64; 2],
}

fn fixture() -> Fixture {
    let mesh = generate_eyepiece_mesh(&EyeShape::default(), 300, 4).unwrap();
    let (oracle, rec) = calibrate_oracle(&mesh, &OracleParams::default(), &CalibrationTarget::default()).unwrap();
    Fixture {
        center: rec.equivalent_center,
        mesh,
        oracle,
    }
}

fn evaluator(f: &Fixture) -> Evaluator<'_> {
    Evaluator::new(&f.mesh, &f.oracle, f.center, EvalSettings::default()).unwrap()
}

fn mid(f: &Fixture) -> Vec<f64> {
    vec![crate::pseudofem::STIFFNESS_MID; f.mesh.boundary.len()]
}

fn trained_model(f: &Fixture, topo: &Arc<GraphTopology>) -> SurrogateModel {
    let distances = normalized_boundary_distances(&f.mesh, f.center).unwrap();
    let mut designs = Vec::new();
    for (k, (a, b)) in [(0.0, 0.4), (0.3, 0.3), (0.5, 0.5), (0.8, 0.6), (0.1, 0.9), (0.6, 0.1)].iter().enumerate() {
        let w = bezier_stiffness(&BezierHypothesis::new(*a, *b).unwrap(), &distances).unwrap();
        for n in sample_neighbors(&w, 2, k as u64).unwrap() {
            designs.push(DesignVariables::new(0.5, n).unwrap());
        }
    }
    let data = generate_dataset(&f.oracle, &f.mesh, &designs, 0).unwrap();
    let mut model = SurrogateModel::new(SurrogateConfig {
        steps: 2,
        latent: 8,
        seed: 3,
    })
    .unwrap();
    let cfg = TrainConfig {
        iterations: 150,
        lr: 1e-2,
        ..Default::default()
    };
    train(&mut model, topo, &data, &cfg).unwrap();
    model
}

fn topology(f: &Fixture) -> Arc<GraphTopology> {
    let aug = augment_edges(&f.mesh, f.center, AUGMENT_RADIUS, &f.mesh.anchors).unwrap();
    Arc::new(GraphTopology::new(&aug))
}

#[test]
fn bezier_identity_and_endpoints() {
    let id = BezierHypothesis::new(0.5, 0.5).unwrap();
    for d in [0.0, 0.1, 0.25, 0.5, 0.9, 1.0] {
        assert!((id.eval(d) - d).abs() < 1e-12);
    }
    let w = bezier_stiffness(&id, &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(w[0], 100.0);
    assert!((w[1] - 20_000_000f64.sqrt()).abs() < 1e-6);
    assert!((w[1] - 4472.136).abs() < 1e-3);
    assert_eq!(w[2], 200_000.0);
    for (a, b) in [(0.0, 0.0), (1.0, 1.0), (0.2, 0.9), (0.0, 0.38)] {
        let w = bezier_stiffness(&BezierHypothesis::new(a, b).unwrap(), &[0.0, 1.0]).unwrap();
        assert_eq!(w, vec![100.0, 200_000.0]);
    }
}

#[test]
fn bezier_matches_closed_form() {
    // control x = 0 makes x(s) = s², so s = √d
    let h = BezierHypothesis::new(0.0, 0.38).unwrap();
    for i in 0..=100 {
        let d = i as f64 / 100.0;
        let s = d.sqrt();
        let y = 2.0 * 0.38 * s * (1.0 - s) + s * s;
        assert!((h.eval(d) - y).abs() < 1e-12, "d = {d}");
    }
    let mut prev = -1.0;
    for i in 0..=100 {
        let y = h.eval(i as f64 / 100.0);
        assert!(y >= prev);
        prev = y;
    }
}

#[test]
fn bezier_preconditions() {
    assert!(BezierHypothesis::new(1.1, 0.5).is_err());
    assert!(BezierHypothesis::new(0.5, -0.1).is_err());
    let h = BezierHypothesis::new(0.5, 0.5).unwrap();
    assert!(bezier_stiffness(&h, &[0.5, 1.2]).is_err());
}

#[test]
fn circular_boundary_has_no_distance_spread() {
    let circle = generate_eyepiece_mesh(&EyeShape::circle(40.0), 300, 2).unwrap();
    assert!(normalized_boundary_distances(&circle, circle.boundary_centroid()).is_err());
}

#[test]
fn voltage_from_reported_line() {
    let v = voltage_for_focal(-776.63, 968.545, 590.0).unwrap();
    assert!((v - 0.48742).abs() < 1e-5);
    assert!((v - 378.545 / 776.63).abs() < 1e-15);
    assert!(voltage_for_focal(0.0, 968.545, 590.0).is_err());
}

#[test]
fn linear_fit_exact() {
    let pts: Vec<(f64, f64)> = [0.45, 0.5, 0.55].iter().map(|&x| (x, -3.0 * x + 7.0)).collect();
    let (s, c) = linear_fit(&pts).unwrap();
    assert!((s + 3.0).abs() < 1e-12 && (c - 7.0).abs() < 1e-12);
    let v = voltage_for_focal(s, c, 5.5).unwrap();
    assert!((v - 0.5).abs() < 1e-12);
    assert!(linear_fit(&[(0.5, 1.0)]).is_err());
    assert!(linear_fit(&[(0.5, 1.0), (0.5, 2.0)]).is_err());
}

#[test]
fn sweep_single_element_and_ties() {
    let f = fixture();
    let frozen = f.oracle.simulate(&DesignVariables::new(0.5, mid(&f)).unwrap()).unwrap();
    let constant = move |_: &DesignVariables| -> Result<DeformationField> { Ok(frozen.clone()) };
    let eval = Evaluator::new(&f.mesh, &constant, f.center, EvalSettings::default()).unwrap();
    let one = coarse_voltage_sweep(&eval, &mid(&f), &[0.7], 590.0).unwrap();
    assert_eq!(one.v_bar, 0.7);
    let tie = coarse_voltage_sweep(&eval, &mid(&f), &[0.6, 0.3, 0.8], 590.0).unwrap();
    assert_eq!(tie.v_bar, 0.3);
    assert!(coarse_voltage_sweep(&eval, &mid(&f), &[], 590.0).is_err());
    let mut mixed = mid(&f);
    mixed[0] *= 2.0;
    assert!(coarse_voltage_sweep(&eval, &mixed, &[0.5], 590.0).is_err());
}

#[test]
fn sweep_skips_failures() {
    let f = fixture();
    let oracle = |d: &DesignVariables| -> Result<DeformationField> {
        if d.v1 > 0.55 {
            Err(Error::Solver("synthetic".into()))
        } else {
            f.oracle.simulate(d)
        }
    };
    let eval = Evaluator::new(&f.mesh, &oracle, f.center, EvalSettings::default()).unwrap();
    let s = coarse_voltage_sweep(&eval, &mid(&f), &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], 590.0).unwrap();
    assert_eq!(s.v_bar, 0.5);
    assert!(s.entries.iter().filter(|e| e.v1 > 0.55).all(|e| e.focal_length.is_none()));
    assert!(coarse_voltage_sweep(&eval, &mid(&f), &[0.7, 0.9], 590.0).is_err());
}

#[test]
fn calibrated_sweep_selects_half() {
    let f = fixture();
    let eval = evaluator(&f);
    let sweep: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let s = coarse_voltage_sweep(&eval, &mid(&f), &sweep, 590.0).unwrap();
    assert_eq!(s.v_bar, 0.5);
    assert_eq!(eval.calls(), 9);
}

#[test]
fn neighbors_within_band() {
    let center: Vec<f64> = (0..102).map(|i| 100.0 * 1.08f64.powi(i)).collect();
    let a = sample_neighbors(&center, 50, 7).unwrap();
    assert_eq!(a.len(), 50);
    for w in &a {
        for (x, c) in w.iter().zip(&center) {
            let lo = (0.8 * c).max(STIFFNESS_MIN);
            let hi = (1.2 * c).min(STIFFNESS_MAX);
            assert!(*x >= lo - 1e-9 && *x <= hi + 1e-9);
        }
    }
    assert!(a.iter().flatten().any(|&x| x == STIFFNESS_MIN));
    assert!(a.iter().flatten().any(|&x| x == STIFFNESS_MAX));
    assert_eq!(a, sample_neighbors(&center, 50, 7).unwrap());
    assert_ne!(a, sample_neighbors(&center, 50, 8).unwrap());
    assert!(sample_neighbors(&center, 0, 7).is_err());
}

#[test]
fn doe_lattice_and_best() {
    let f = fixture();
    let eval = evaluator(&f);
    let cfg = DoeConfig {
        coarse_step: 0.5,
        refine_step: 0.25,
        refine_halfwidth: 0.25,
    };
    let doe = doe_bezier(&eval, 0.5, &cfg).unwrap();
    let coarse = doe.table.iter().filter(|e| e.stage == DoeStage::Coarse).count();
    assert_eq!(coarse, 9);
    assert!(doe.table.len() > 9 && doe.table.len() <= 18);
    assert_eq!(eval.calls(), doe.table.len());
    let min = doe.table.iter().map(|e| e.surface_rms).fold(f64::INFINITY, f64::min);
    assert_eq!(doe.surface_rms, min);
    let distances = normalized_boundary_distances(&f.mesh, f.center).unwrap();
    assert_eq!(doe.stiffness, bezier_stiffness(&doe.best, &distances).unwrap());
    let mut keys: Vec<(i64, i64)> = doe.table.iter().map(|e| ((e.a * 1e6) as i64, (e.b * 1e6) as i64)).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), doe.table.len());
    let bad = DoeConfig {
        coarse_step: 0.0,
        ..cfg
    };
    assert!(doe_bezier(&eval, 0.5, &bad).is_err());
}

#[test]
fn voltage_tune_hits_target() {
    let f = fixture();
    let eval = evaluator(&f);
    let tune = fine_tune_voltage(&eval, &mid(&f), 0.5, 590.0, &[0.95, 1.0, 1.05]).unwrap();
    assert!(tune.slope < 0.0);
    assert!((tune.check.focal_length - 590.0).abs() / 590.0 < 0.01);
    assert!(fine_tune_voltage(&eval, &mid(&f), 0.5, 590.0, &[0.9, 1.0]).is_err());
    assert!(fine_tune_voltage(&eval, &mid(&f), 0.5, 590.0, &[1.0]).is_err());

    let frozen = f.oracle.simulate(&DesignVariables::new(0.5, mid(&f)).unwrap()).unwrap();
    let constant = move |_: &DesignVariables| -> Result<DeformationField> { Ok(frozen.clone()) };
    let flat = Evaluator::new(&f.mesh, &constant, f.center, EvalSettings::default()).unwrap();
    assert!(fine_tune_voltage(&flat, &mid(&f), 0.5, 590.0, &[0.95, 1.05]).is_err());
}

/// Symmetric eigen-solver by cyclic Jacobi rotations.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

fn random_designs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..dim).map(|j| 1.0 / (1.0 + j as f64)).collect();
    (0..n)
        .map(|_| {
            scales
                .iter()
                .map(|s| 10f64.powf(3.5 + 1.5 * s * rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect()
}

fn pairwise(coords: &[[f64; 2]]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            out.push((coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]));
        }
    }
    out
}

#[test]
fn pca_matches_jacobi_oracle() {
    let designs = random_designs(30, 8, 11);
    let metric: Vec<f64> = (0..30).map(|i| i as f64).collect();
    let pca = pca_project(&designs, &metric).unwrap();

    let x: Vec<Vec<f64>> = designs.iter().map(|d| d.iter().map(|&w| normalize_stiffness(w)).collect()).collect();
    let dim = 8;
    let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / 30.0).collect();
    let cov: Vec<Vec<f64>> = (0..dim)
        .map(|a| {
            (0..dim)
                .map(|b| x.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / 29.0)
                .collect()
        })
        .collect();
    let (values, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let coords: Vec<[f64; 2]> = x
        .iter()
        .map(|r| std::array::from_fn(|c| (0..dim).map(|j| (r[j] - mean[j]) * vectors[order[c]][j]).sum()))
        .collect();
    for (a, b) in pairwise(&pca.coords).iter().zip(pairwise(&coords)) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let total: f64 = values.iter().sum();
    for (k, &o) in order.iter().enumerate() {
        assert!((pca.explained[k] - values[o] / total).abs() < 1e-9);
    }
    for w in pca.explained.windows(2) {
        assert!(w[0] >= w[1]);
    }
    for c in &pca.components {
        let first = c.iter().find(|x| x.abs() > 1e-12).unwrap();
        assert!(*first > 0.0);
    }
    assert!(pca.to_csv().starts_with("index,pc1,pc2,metric\n"));
}

#[test]
fn pca_recovers_two_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = vec![crate::pseudofem::STIFFNESS_MID; 10];
    let designs: Vec<Vec<f64>> = (0..12)
        .map(|_| {
            let mut d = base.clone();
            d[3] = 10f64.powf(rng.random_range(2.5..5.0));
            d[7] = 10f64.powf(rng.random_range(2.5..5.0));
            d
        })
        .collect();
    let pca = pca_project(&designs, &[0.0; 12]).unwrap();
    assert!((pca.explained[0] + pca.explained[1] - 1.0).abs() < 1e-12);
    let orig: Vec<[f64; 2]> = designs.iter().map(|d| [normalize_stiffness(d[3]), normalize_stiffness(d[7])]).collect();
    for (a, b) in pairwise(&pca.coords).iter().zip(pairwise(&orig)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pca_preconditions() {
    let line: Vec<Vec<f64>> = (0..5).map(|i| vec![1000.0 * (1.0 + i as f64); 4]).collect();
    assert!(pca_project(&line, &[0.0; 5]).is_err());
    let ok = random_designs(5, 4, 1);
    assert!(pca_project(&ok[..2], &[0.0; 2]).is_err());
    assert!(pca_project(&ok, &[0.0; 4]).is_err());
}

#[test]
fn surrogate_chain_gradient_matches_finite_differences() {
    let f = fixture();
    let topo = topology(&f);
    let model = trained_model(&f, &topo);
    let eval = evaluator(&f);
    let obj = SurrogateObjective::from_evaluator(&eval, &model, &topo, 0.5);
    let u: Vec<f64> = (0..topo.boundary.len()).map(|i| 0.3 + 0.4 * ((i * 37) % 101) as f64 / 101.0).collect();
    let (loss, grad, _) = obj.value_and_grad(&u).unwrap();
    assert!((loss - obj.value(&u).unwrap()).abs() < 1e-9 * loss);
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(gmax > 0.0);
    let h = 1e-5;
    for i in [0, 17, 40, 63, 101] {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[i] += h;
        dn[i] -= h;
        let fd = (obj.value(&up).unwrap() - obj.value(&dn).unwrap()) / (2.0 * h);
        assert!((fd - grad[i]).abs() <= 1e-3 * gmax, "node {i}: fd {fd} vs {}", grad[i]);
    }
    assert!(obj.value(&u[..10]).is_err());
}

#[test]
fn design_descent_does_not_worsen() {
    let f = fixture();
    let topo = topology(&f);
    let model = trained_model(&f, &topo);
    let eval = evaluator(&f);
    let obj = SurrogateObjective::from_evaluator(&eval, &model, &topo, 0.5);
    let w0 = mid(&f);
    let gd = optimize_design(&obj, &w0, &GdConfig { epochs: 25, lr: 0.02 }).unwrap();
    let u0: Vec<f64> = w0.iter().map(|&w| normalize_stiffness(w)).collect();
    let uq: Vec<f64> = gd.stiffness.iter().map(|&w| normalize_stiffness(w)).collect();
    assert!((gd.initial_loss - obj.value(&u0).unwrap()).abs() < 1e-9 * gd.initial_loss);
    assert!(obj.value(&uq).unwrap() <= obj.value(&u0).unwrap());
    assert!(gd.final_loss <= gd.initial_loss);
    assert_eq!(gd.losses.len(), 26);
    assert!(gd.stiffness.iter().all(|w| (STIFFNESS_MIN..=STIFFNESS_MAX).contains(w)));
}

fn loop_config() -> LoopConfig {
    LoopConfig {
        max_epochs: 2,
        neighbors: 12,
        surrogate: SurrogateConfig {
            steps: 2,
            latent: 8,
            seed: 0,
        },
        train: TrainConfig {
            iterations: 150,
            lr: 1e-2,
            ..Default::default()
        },
        descent: GdConfig { epochs: 5, lr: 0.02 },
        use_seed_data: false,
        ..Default::default()
    }
}

fn run_loop(
    f: &Fixture,
    objectives: &Objectives,
    cfg: &LoopConfig,
    resume: Option<LoopState>,
    states: &mut Vec<LoopState>,
) -> LoopOutcome {
    let topo = topology(f);
    let eval = evaluator(f);
    let mut record = |s: &LoopState, _: Option<&SurrogateModel>| {
        states.push(s.clone());
        Ok(())
    };
    hybrid_loop(&eval, &topo, objectives, cfg, 0.5, &mid(f), &[], resume, &mut record).unwrap()
}

#[test]
fn infinite_tolerance_stops_after_first_epoch() {
    let f = fixture();
    let objectives = Objectives {
        rms_tolerance: f64::INFINITY,
        ..Default::default()
    };
    let mut states = Vec::new();
    let out = run_loop(&f, &objectives, &loop_config(), None, &mut states);
    assert!(out.converged);
    assert_eq!(out.epochs, 1);
    assert_eq!(out.oracle_calls, 12);
    let rec = &out.history.epochs[0];
    assert!(rec.proposal.is_none() && rec.surrogate.is_none());
    assert_eq!(out.w_star, rec.designs[rec.best_index]);
    assert_eq!(states.len(), 1);
}

#[test]
fn zero_epoch_budget_is_not_converged() {
    let f = fixture();
    let cfg = LoopConfig {
        max_epochs: 0,
        ..loop_config()
    };
    let out = run_loop(&f, &Objectives::default(), &cfg, None, &mut Vec::new());
    assert!(!out.converged);
    assert_eq!(out.epochs, 0);
    assert_eq!(out.w_star, mid(&f));
    assert!(out.best.is_none());
}

#[test]
fn oracle_budget_caps_the_loop() {
    let f = fixture();
    let objectives = Objectives {
        rms_tolerance: 1e-9,
        ..Default::default()
    };
    let cfg = LoopConfig {
        max_epochs: 5,
        max_oracle_calls: 20,
        ..loop_config()
    };
    let out = run_loop(&f, &objectives, &cfg, None, &mut Vec::new());
    assert_eq!(out.epochs, 1);
    assert_eq!(out.oracle_calls, 12);
    assert!(!out.converged);
}

#[test]
fn loop_is_monotone_reproducible_and_resumable() {
    let f = fixture();
    let objectives = Objectives {
        rms_tolerance: 1e-9,
        ..Default::default()
    };
    let cfg = LoopConfig {
        max_epochs: 3,
        ..loop_config()
    };
    let mut states = Vec::new();
    let out = run_loop(&f, &objectives, &cfg, None, &mut states);
    assert_eq!(out.epochs, 3);
    assert!(!out.converged);
    let epochs = &out.history.epochs;
    assert_eq!(out.oracle_calls, epochs.iter().map(|e| e.designs.len()).sum::<usize>());
    assert!(epochs.iter().all(|e| e.surrogate.is_some() == (e.epoch < 3)));
    for w in epochs.windows(2) {
        assert!(w[1].best_so_far_rms <= w[0].best_so_far_rms);
        assert_eq!(w[1].includes_proposal, w[0].proposal.is_some());
        if let Some(p) = &w[0].proposal {
            assert_eq!(&w[1].designs[0], p);
        }
    }
    assert!(epochs[2].proposal.is_none());
    for rec in epochs {
        assert_eq!(rec.designs.len(), rec.evaluations.len());
        assert!(rec.designs.iter().flatten().all(|w| (STIFFNESS_MIN..=STIFFNESS_MAX).contains(w)));
    }
    let best = out.best.as_ref().unwrap();
    assert_eq!(best.surface_rms, epochs[2].best_so_far_rms);

    let again = run_loop(&f, &objectives, &cfg, None, &mut Vec::new());
    assert_eq!(again, out);

    let snapshot = serde_json::to_string(&states[0]).unwrap();
    let resumed = run_loop(&f, &objectives, &cfg, Some(serde_json::from_str(&snapshot).unwrap()), &mut Vec::new());
    assert_eq!(resumed, out);
}

#[test]
fn sensitivities_are_finite() {
    let f = fixture();
    let eval = evaluator(&f);
    let s = sensitivities(&eval, &DesignVariables::new(0.5, mid(&f)).unwrap(), 0.01).unwrap();
    assert!((s.focal_v - 1.0).abs() < 0.05);
    assert!(s.focal_w > 0.0 && s.rms_w > 0.0);
    assert!(s.focal_dominated_by_voltage(10.0));
}
