use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::hybrid::{hybrid_loop, LoopConfig, LoopOutcome, LoopState};
use super::{coarse_voltage_sweep, doe_bezier, fine_tune_voltage, DoeConfig, DoeResult, Evaluator, Objectives, VoltageSweep, VoltageTuning};
use crate::error::{Error, Result};
use crate::pseudofem::STIFFNESS_MID;
use crate::surrogate::{GraphTopology, SurrogateModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub objectives: Objectives,
    pub sweep: Vec<f64>,
    /// Uniform stiffness of the sweep design, N/m.
    pub sweep_stiffness: f64,
    pub doe: DoeConfig,
    pub hybrid: LoopConfig,
    /// Probe voltages of the final tune as multiples of `v_bar`.
    pub tune_multipliers: Vec<f64>,
    /// Oracle calls shared by the loop and the voltage tune.
    pub max_oracle_calls: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            objectives: Objectives::default(),
            sweep: (1..=9).map(|i| i as f64 / 10.0).collect(),
            sweep_stiffness: STIFFNESS_MID,
            doe: DoeConfig::default(),
            hybrid: LoopConfig::default(),
            tune_multipliers: vec![0.95, 0.975, 1.0, 1.025, 1.05],
            max_oracle_calls: 300,
        }
    }
}

impl PipelineConfig {
    pub fn tune_calls(&self) -> usize {
        self.tune_multipliers.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sweep,
    Doe,
    Loop,
    Tune,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sweep => "voltage sweep",
            Stage::Doe => "bezier doe",
            Stage::Loop => "hybrid loop",
            Stage::Tune => "voltage tune",
            Stage::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCalls {
    pub sweep: usize,
    pub doe: usize,
    pub tune: usize,
}

/// Results of the completed stages; enough to resume the rest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub sweep: Option<VoltageSweep>,
    pub doe: Option<DoeResult>,
    pub hybrid: Option<LoopState>,
    pub outcome: Option<LoopOutcome>,
    pub tuning: Option<VoltageTuning>,
    pub calls: StageCalls,
}

impl PipelineState {
    /// The next stage to run.
    pub fn stage(&self) -> Stage {
        if self.sweep.is_none() {
            Stage::Sweep
        } else if self.doe.is_none() {
            Stage::Doe
        } else if self.outcome.is_none() {
            Stage::Loop
        } else if self.tuning.is_none() {
            Stage::Tune
        } else {
            Stage::Done
        }
    }

    /// Oracle calls charged to the budget: loop plus voltage tune.
    pub fn budget_calls(&self) -> usize {
        let loop_calls = match (&self.outcome, &self.hybrid) {
            (Some(o), _) => o.oracle_calls,
            (None, Some(h)) => h.oracle_calls,
            _ => 0,
        };
        loop_calls + self.calls.tune
    }

    pub fn total_calls(&self) -> usize {
        self.calls.sweep + self.calls.doe + self.budget_calls()
    }

    /// Tuned design meets both the RMS tolerance and the focal target.
    pub fn satisfied(&self, objectives: &Objectives) -> bool {
        self.tuning.as_ref().is_some_and(|t| {
            t.check.surface_rms <= objectives.rms_tolerance
                && (t.check.focal_length - objectives.target_focal).abs() <= objectives.focal_tolerance * objectives.target_focal
        })
    }
}

/// Sweep, DOE, hybrid loop and voltage tune in order, skipping the stages
/// already present in `state`. `observer` sees the state after every stage
/// and every loop epoch.
pub fn run_pipeline(
    eval: &Evaluator<'_>,
    topology: &Arc<GraphTopology>,
    cfg: &PipelineConfig,
    mut state: PipelineState,
    observer: &mut dyn FnMut(&PipelineState, Option<&SurrogateModel>) -> Result<()>,
) -> Result<PipelineState> {
    cfg.objectives.validate()?;
    let budget = cfg
        .max_oracle_calls
        .checked_sub(cfg.tune_calls())
        .ok_or_else(|| Error::InvalidArgument("oracle budget does not cover the voltage tune".into()))?;
    let target = cfg.objectives.target_focal;

    if state.sweep.is_none() {
        let w0 = vec![cfg.sweep_stiffness; eval.mesh.boundary.len()];
        let before = eval.calls();
        let sweep = coarse_voltage_sweep(eval, &w0, &cfg.sweep, target)?;
        log::info!("voltage sweep: v_bar = {}", sweep.v_bar);
        state.calls.sweep = eval.calls() - before;
        state.sweep = Some(sweep);
        observer(&state, None)?;
    }
    let v_bar = state.sweep.as_ref().expect("sweep done").v_bar;

    if state.doe.is_none() {
        let before = eval.calls();
        let doe = doe_bezier(eval, v_bar, &cfg.doe)?;
        log::info!(
            "bezier doe: best ({}, {}) at {:.1} nm over {} designs",
            doe.best.a,
            doe.best.b,
            doe.surface_rms,
            doe.table.len()
        );
        state.calls.doe = eval.calls() - before;
        state.doe = Some(doe);
        observer(&state, None)?;
    }

    if state.outcome.is_none() {
        let doe = state.doe.as_ref().expect("doe done");
        let w_p = doe.stiffness.clone();
        let seed_data = doe.samples.clone();
        let resume = match state.hybrid.take() {
            Some(h) => h,
            None => {
                let mut h = LoopState::new(&w_p);
                let best = doe
                    .samples
                    .iter()
                    .find(|s| s.design.stiffness == w_p)
                    .expect("DOE winner was simulated");
                h.best = Some((w_p.clone(), eval.assess(v_bar, &best.field.dz)?));
                h
            }
        };
        let loop_cfg = LoopConfig {
            max_oracle_calls: budget,
            ..cfg.hybrid
        };
        let mut on_epoch = |s: &LoopState, m: Option<&SurrogateModel>| {
            state.hybrid = Some(s.clone());
            observer(&state, m)
        };
        let outcome = hybrid_loop(eval, topology, &cfg.objectives, &loop_cfg, v_bar, &w_p, &seed_data, Some(resume), &mut on_epoch)?;
        state.outcome = Some(outcome);
        observer(&state, None)?;
    }

    if state.tuning.is_none() {
        let w_star = state.outcome.as_ref().expect("loop done").w_star.clone();
        let before = eval.calls();
        let tuning = fine_tune_voltage(eval, &w_star, v_bar, target, &cfg.tune_multipliers)?;
        log::info!(
            "voltage tune: v* = {:.5}, focal {:.2} mm, surface RMS {:.1} nm",
            tuning.v_star,
            tuning.check.focal_length,
            tuning.check.surface_rms
        );
        state.calls.tune = eval.calls() - before;
        state.tuning = Some(tuning);
        observer(&state, None)?;
    }
    Ok(state)
}
