use std::cell::Cell;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use varifocal_core::hybridopt::{
    normalized_boundary_distances, pca_project, random_bezier_designs, run_pipeline, Evaluator, PipelineState, Stage,
};
use varifocal_core::mesh::{augment_edges, generate};
use varifocal_core::pseudofem::{calibrate_oracle, generate_dataset, CalibrationRecord, Dataset};
use varifocal_core::raytrace::{find_best_focus, make_source, propagate_to_plane, reflect_bundle, SpotDiagram, TraceConfig};
use varifocal_core::surrogate::{train, GraphTopology, SurrogateModel};
use varifocal_core::{AugmentedMesh, DesignVariables, MembraneOracle, Mesh, ZernikeSurface};

use crate::artifacts::{read_json, read_json_text, write_csv, write_json, write_json_text, write_svg, write_text};
use crate::config::RunConfig;

pub const MESH_FILE: &str = "mesh.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const DATASET_DIR: &str = "dataset";
pub const SURROGATE_FILE: &str = "surrogate.json";
pub const RUN_DIR: &str = "run";
pub const STATE_FILE: &str = "state.json";

/// How a command ended when it did not fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    NotConverged,
}

pub struct Workspace {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
}

/// Mesh, calibrated oracle and graph topology for a config.
pub struct Setup {
    pub mesh: Mesh,
    pub augmented: AugmentedMesh,
    pub oracle: MembraneOracle,
    pub record: CalibrationRecord,
    pub topology: Arc<GraphTopology>,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let hash = cfg.hash();
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let ws = Self { cfg, hash, out };
        let text = format!("# {}={}\n{}", crate::artifacts::HASH_KEY, ws.hash, ws.cfg.to_toml());
        write_text(&ws.out.join("config.toml"), &text)?;
        Ok(ws)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn setup(&self) -> Result<Setup> {
        let mesh = generate(&self.cfg.mesh)?;
        let (oracle, record) = calibrate_oracle(&mesh, &self.cfg.oracle, &self.cfg.calibration)?;
        let augmented = augment_edges(&mesh, record.equivalent_center, self.cfg.augment_radius, &mesh.anchors)?;
        let topology = Arc::new(GraphTopology::new(&augmented));
        Ok(Setup {
            mesh,
            augmented,
            oracle,
            record,
            topology,
        })
    }

    fn write_mesh(&self, s: &Setup) -> Result<()> {
        write_json_text(&self.path(MESH_FILE), &s.mesh.to_json(Some(&s.augmented)), &self.hash)
    }

    fn write_calibration(&self, s: &Setup) -> Result<()> {
        write_json(&self.path(CALIBRATION_FILE), &s.record, &self.hash)
    }
}

pub fn gen_mesh(ws: &Workspace) -> Result<Outcome> {
    let s = ws.setup()?;
    ws.write_mesh(&s)?;
    println!(
        "mesh: {} nodes, {} edges, {} boundary, {} anchors, {} augmented edges",
        s.mesh.node_count(),
        s.mesh.edges.len(),
        s.mesh.boundary.len(),
        s.mesh.anchors.len(),
        s.augmented.augmented_edges.len()
    );
    println!("wrote {}", ws.path(MESH_FILE).display());
    Ok(Outcome::Done)
}

pub fn calibrate(ws: &Workspace) -> Result<Outcome> {
    let s = ws.setup()?;
    ws.write_mesh(&s)?;
    ws.write_calibration(&s)?;
    println!(
        "calibration: load amplitude {:.6e} Pa, fitted focal length {:.3} mm, center ({:.3}, {:.3}) mm",
        s.record.params.load_amplitude,
        s.record.fitted_focal_length,
        s.record.equivalent_center[0],
        s.record.equivalent_center[1]
    );
    Ok(Outcome::Done)
}

pub fn gen_data(ws: &Workspace) -> Result<Outcome> {
    let s = ws.setup()?;
    let d = &ws.cfg.data;
    let distances = normalized_boundary_distances(&s.mesh, s.record.equivalent_center)?;
    let designs = random_bezier_designs(&distances, d.count, d.v_range, d.seed)?;
    let data = generate_dataset(&s.oracle, &s.mesh, &designs, d.seed)?;
    let dir = ws.path(DATASET_DIR);
    data.save_tagged(&dir, Some(&ws.hash))?;
    println!("dataset: {} samples in {}", data.len(), dir.display());
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    dataset: String,
    samples: usize,
    test_r2: f64,
    train_mse: f64,
    test_mse: f64,
    parameter_count: usize,
    wall_time_s: f64,
    seed: u64,
    train_indices: &'a [usize],
    test_indices: &'a [usize],
}

pub fn train_surrogate(ws: &Workspace, data_dir: Option<&Path>) -> Result<Outcome> {
    let s = ws.setup()?;
    let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| ws.path(DATASET_DIR));
    let data = Dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if data.mesh_hash != s.mesh.hash() {
        bail!("dataset {} was generated on a different mesh", dir.display());
    }
    let mut model = SurrogateModel::new(ws.cfg.surrogate)?;
    let report = train(&mut model, &s.topology, &data, &ws.cfg.train)?;
    write_json_text(&ws.path(SURROGATE_FILE), &model.to_json(), &ws.hash)?;
    let mut loss = String::from("iteration,loss_mm2\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(loss, "{},{l:e}", i + 1).unwrap();
    }
    write_csv(&ws.path("loss.csv"), &loss, &ws.hash)?;
    let summary = TrainSummary {
        dataset: dir.display().to_string(),
        samples: data.len(),
        test_r2: report.test_r2,
        train_mse: report.train_mse,
        test_mse: report.test_mse,
        parameter_count: report.parameter_count,
        wall_time_s: report.wall_time_s,
        seed: report.seed,
        train_indices: &report.train_indices,
        test_indices: &report.test_indices,
    };
    write_json(&ws.path("train_report.json"), &summary, &ws.hash)?;
    println!(
        "surrogate: {} parameters, held-out R² {:.5}, test MSE {:.3e} mm², {:.1} s",
        report.parameter_count, report.test_r2, report.test_mse, report.wall_time_s
    );
    Ok(Outcome::Done)
}

fn run_dir(ws: &Workspace) -> PathBuf {
    ws.out.join(RUN_DIR)
}

fn load_state(ws: &Workspace) -> Result<PipelineState> {
    let path = run_dir(ws).join(STATE_FILE);
    let (v, hash) = read_json(&path).context("no checkpoint to resume from")?;
    if hash.as_deref() != Some(ws.hash.as_str()) {
        bail!("checkpoint {} belongs to a different configuration", path.display());
    }
    Ok(serde_json::from_value(v)?)
}

/// Table S1 end to end, checkpointing after every stage and loop epoch.
pub fn optimize(ws: &Workspace, resume: bool, stop_after_epoch: Option<usize>) -> Result<Outcome> {
    let s = ws.setup()?;
    ws.write_mesh(&s)?;
    ws.write_calibration(&s)?;
    let dir = run_dir(ws);
    let state = if resume { load_state(ws)? } else { PipelineState::default() };
    let eval = Evaluator::new(&s.mesh, &s.oracle, s.record.equivalent_center, ws.cfg.eval)?;
    let stage = Cell::new(state.stage());
    let stopped = Cell::new(false);
    let mut epochs_written = state.hybrid.as_ref().map_or(0, |h| h.history.epochs.len());
    let mut observer = |st: &PipelineState, model: Option<&SurrogateModel>| -> varifocal_core::Result<()> {
        let io = |e: anyhow::Error| varifocal_core::Error::Format(format!("{e:#}"));
        write_json(&dir.join(STATE_FILE), st, &ws.hash).map_err(io)?;
        stage.set(st.stage());
        if let Some(h) = &st.hybrid {
            while epochs_written < h.history.epochs.len() {
                let rec = &h.history.epochs[epochs_written];
                write_epoch(ws, &dir, &eval, rec, model).map_err(io)?;
                epochs_written += 1;
            }
            if st.outcome.is_none() && stop_after_epoch.is_some_and(|n| h.epochs_done >= n) {
                stopped.set(true);
                return Err(varifocal_core::Error::InvalidArgument("stop requested".into()));
            }
        }
        Ok(())
    };
    let result = run_pipeline(&eval, &s.topology, &ws.cfg.pipeline, state, &mut observer);
    let state = match result {
        Ok(st) => st,
        Err(_) if stopped.get() => {
            println!("stopped after epoch {}; continue with --resume", stop_after_epoch.unwrap_or(0));
            return Ok(Outcome::NotConverged);
        }
        Err(e) => return Err(anyhow::Error::new(e).context(format!("stage `{}` failed", stage.get().name()))),
    };
    let satisfied = write_report(ws, &s, &state)?;
    Ok(if satisfied { Outcome::Done } else { Outcome::NotConverged })
}

fn write_epoch(
    ws: &Workspace,
    dir: &Path,
    eval: &Evaluator<'_>,
    rec: &varifocal_core::hybridopt::EpochRecord,
    model: Option<&SurrogateModel>,
) -> Result<()> {
    let edir = dir.join(format!("epoch_{:02}", rec.epoch));
    let mut csv = String::from("index,surface_rms_nm,focal_length_mm,spot_rms_nm,proposal");
    for i in 0..rec.designs.first().map_or(0, Vec::len) {
        write!(csv, ",w_{i}").unwrap();
    }
    csv.push('\n');
    for (i, (w, e)) in rec.designs.iter().zip(&rec.evaluations).enumerate() {
        write!(
            csv,
            "{i},{:e},{:e},{:e},{}",
            e.surface_rms,
            e.focal_length,
            e.spot_rms,
            (rec.includes_proposal && i == 0) as u8
        )
        .unwrap();
        for x in w {
            write!(csv, ",{x:e}").unwrap();
        }
        csv.push('\n');
    }
    write_csv(&edir.join("designs.csv"), &csv, &ws.hash)?;
    if let Some(m) = model {
        write_json_text(&edir.join(SURROGATE_FILE), &m.to_json(), &ws.hash)?;
    }
    let best = &rec.evaluations[rec.best_index];
    let surface = ZernikeSurface::new(best.zernike, eval.settings.roi_radius)?;
    let spot = best_spot(eval, &surface)?;
    let caption = format!("epoch {} best candidate, surface RMS {:.1} nm", rec.epoch, best.surface_rms);
    write_svg(&edir.join("best_spot.svg"), &spot.to_svg(&caption), &ws.hash)?;
    write_csv(&edir.join("best_spot.csv"), &spot.to_csv(), &ws.hash)
}

fn best_spot(eval: &Evaluator<'_>, surface: &ZernikeSurface) -> Result<SpotDiagram> {
    let reflected = reflect_bundle(surface, &eval.source, &eval.trace)?;
    let [lo, hi] = eval.settings.focus_interval;
    let focus = find_best_focus(&reflected.rays, (lo, hi))?;
    let mut spot = propagate_to_plane(&reflected.rays, focus.plane_z);
    spot.flagged += reflected.flagged;
    Ok(spot)
}

#[derive(Serialize)]
struct Report {
    satisfied: bool,
    loop_converged: bool,
    v_bar: f64,
    v_star: f64,
    focal_length_mm: f64,
    surface_rms_nm: f64,
    spot_rms_nm: f64,
    fit_slope: f64,
    fit_intercept: f64,
    epochs: usize,
    budget_oracle_calls: usize,
    total_oracle_calls: usize,
    sweep_calls: usize,
    doe_calls: usize,
    doe_best: [f64; 2],
    doe_rms_nm: f64,
    w_star: Vec<f64>,
    /// `(log₁₀ W − 1.70) / 3.58`, the display scale of the published plots.
    w_star_display: Vec<f64>,
    pca_explained: Option<[f64; 2]>,
}

fn write_report(ws: &Workspace, s: &Setup, state: &PipelineState) -> Result<bool> {
    let (Some(sweep), Some(doe), Some(outcome), Some(tuning)) = (&state.sweep, &state.doe, &state.outcome, &state.tuning)
    else {
        bail!("run is incomplete (next stage: {})", state.stage().name());
    };
    let dir = run_dir(ws);
    let objectives = &ws.cfg.pipeline.objectives;
    let satisfied = state.satisfied(objectives);

    let mut csv = String::from("v1,focal_length_mm,surface_rms_nm\n");
    for e in &sweep.entries {
        let f = |x: Option<f64>| x.map_or(String::from("nan"), |v| format!("{v:e}"));
        writeln!(csv, "{},{},{}", e.v1, f(e.focal_length), f(e.surface_rms)).unwrap();
    }
    write_csv(&dir.join("sweep.csv"), &csv, &ws.hash)?;
    let mut csv = String::from("stage,a,b,surface_rms_nm\n");
    for e in &doe.table {
        let stage = serde_json::to_value(e.stage)?;
        writeln!(csv, "{},{},{},{:e}", stage.as_str().unwrap_or(""), e.a, e.b, e.surface_rms).unwrap();
    }
    write_csv(&dir.join("doe.csv"), &csv, &ws.hash)?;
    write_json(&dir.join("history.json"), &outcome.history, &ws.hash)?;

    let (designs, metric): (Vec<Vec<f64>>, Vec<f64>) = outcome
        .history
        .epochs
        .iter()
        .flat_map(|r| r.designs.iter().cloned().zip(r.evaluations.iter().map(|e| e.surface_rms)))
        .unzip();
    let pca = pca_project(&designs, &metric).ok();
    if let Some(p) = &pca {
        write_csv(&dir.join("pca.csv"), &p.to_csv(), &ws.hash)?;
    }

    let eval = Evaluator::new(&s.mesh, &s.oracle, s.record.equivalent_center, ws.cfg.eval)?;
    let (_, fin) = eval.evaluate(&DesignVariables::new(tuning.v_star, outcome.w_star.clone())?)?;
    let surface = ZernikeSurface::new(fin.zernike, eval.settings.roi_radius)?;
    let spot = best_spot(&eval, &surface)?;
    let caption = format!("final design, v1 = {:.5}", tuning.v_star);
    write_svg(&dir.join("final_spot.svg"), &spot.to_svg(&caption), &ws.hash)?;
    write_csv(&dir.join("final_spot.csv"), &spot.to_csv(), &ws.hash)?;

    let report = Report {
        satisfied,
        loop_converged: outcome.converged,
        v_bar: sweep.v_bar,
        v_star: tuning.v_star,
        focal_length_mm: tuning.check.focal_length,
        surface_rms_nm: tuning.check.surface_rms,
        spot_rms_nm: tuning.check.spot_rms,
        fit_slope: tuning.slope,
        fit_intercept: tuning.intercept,
        epochs: outcome.epochs,
        budget_oracle_calls: state.budget_calls(),
        total_oracle_calls: state.total_calls(),
        sweep_calls: state.calls.sweep,
        doe_calls: state.calls.doe,
        doe_best: [doe.best.a, doe.best.b],
        doe_rms_nm: doe.surface_rms,
        w_star_display: outcome.w_star.iter().map(|w| (w.log10() - 1.70) / 3.58).collect(),
        w_star: outcome.w_star.clone(),
        pca_explained: pca.as_ref().map(|p| [p.explained[0], p.explained[1]]),
    };
    write_json(&dir.join("report.json"), &report, &ws.hash)?;

    let mut md = String::new();
    writeln!(md, "# Varifocal design run\n").unwrap();
    writeln!(md, "config hash: `{}`\n", ws.hash).unwrap();
    writeln!(md, "| quantity | value |\n|---|---|").unwrap();
    writeln!(md, "| status | {} |", if satisfied { "satisfied" } else { "not satisfied" }).unwrap();
    writeln!(md, "| V̄ | {} |", sweep.v_bar).unwrap();
    writeln!(md, "| DOE best (a, b) | ({}, {}) at {:.2} nm |", doe.best.a, doe.best.b, doe.surface_rms).unwrap();
    writeln!(md, "| loop epochs | {} |", outcome.epochs).unwrap();
    writeln!(md, "| focal fit | {:.3}·v₁ + {:.3} mm |", tuning.slope, tuning.intercept).unwrap();
    writeln!(md, "| V* | {:.5} |", tuning.v_star).unwrap();
    writeln!(md, "| focal length | {:.2} mm |", tuning.check.focal_length).unwrap();
    writeln!(md, "| surface RMS | {:.2} nm |", tuning.check.surface_rms).unwrap();
    writeln!(md, "| spot RMS | {:.2} nm |", tuning.check.spot_rms).unwrap();
    writeln!(
        md,
        "| oracle calls | {} budgeted (loop + tune), {} total |",
        state.budget_calls(),
        state.total_calls()
    )
    .unwrap();
    writeln!(md, "\n## Epochs\n\n| epoch | simulated | batch best nm | best so far nm | surrogate R² |\n|---|---|---|---|---|").unwrap();
    for r in &outcome.history.epochs {
        let r2 = r.surrogate.as_ref().map_or(String::from("-"), |s| format!("{:.4}", s.test_r2));
        writeln!(md, "| {} | {} | {:.2} | {:.2} | {r2} |", r.epoch, r.designs.len(), r.best_rms, r.best_so_far_rms).unwrap();
    }
    write_text(&dir.join("report.md"), &md)?;
    println!(
        "{}: v* = {:.5}, focal {:.2} mm, surface RMS {:.2} nm, {} budgeted oracle calls",
        if satisfied { "satisfied" } else { "not satisfied" },
        tuning.v_star,
        tuning.check.focal_length,
        tuning.check.surface_rms,
        state.budget_calls()
    );
    Ok(satisfied)
}

/// Rebuilds the reports of a finished run from its checkpoint.
pub fn report(ws: &Workspace) -> Result<Outcome> {
    let state = load_state(ws)?;
    if state.stage() != Stage::Done {
        bail!("run is incomplete (next stage: {})", state.stage().name());
    }
    let s = ws.setup()?;
    Ok(if write_report(ws, &s, &state)? { Outcome::Done } else { Outcome::NotConverged })
}

pub struct TraceArgs {
    pub surface: PathBuf,
    pub plane: Option<f64>,
    pub n_rays: Option<usize>,
    pub aperture: Option<f64>,
    pub name: String,
}

pub fn trace(ws: &Workspace, args: &TraceArgs) -> Result<Outcome> {
    let text = read_json_text(&args.surface)?;
    let surface: ZernikeSurface =
        serde_json::from_str(&text).with_context(|| format!("invalid surface file {}", args.surface.display()))?;
    let e = &ws.cfg.eval;
    let source = make_source(
        args.aperture.unwrap_or(e.aperture_ratio * surface.roi_radius),
        args.n_rays.unwrap_or(e.n_rays),
        e.pattern,
        e.z_source,
    )?;
    let reflected = reflect_bundle(&surface, &source, &TraceConfig::default())?;
    let plane = match args.plane {
        Some(z) => z,
        None => find_best_focus(&reflected.rays, (e.focus_interval[0], e.focus_interval[1]))?.plane_z,
    };
    let mut spot = propagate_to_plane(&reflected.rays, plane);
    spot.flagged += reflected.flagged;
    write_csv(&ws.path(&format!("{}.csv", args.name)), &spot.to_csv(), &ws.hash)?;
    write_svg(&ws.path(&format!("{}.svg", args.name)), &spot.to_svg(""), &ws.hash)?;
    println!("spot at z = {plane} mm: RMS {:.4} nm, {} flagged rays", spot.spot_rms, spot.flagged);
    Ok(Outcome::Done)
}
