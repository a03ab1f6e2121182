use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::design::{optimize_design, GdConfig, SurrogateObjective};
use super::{sample_neighbors, Evaluation, Evaluator, Objectives};
use crate::error::{Error, Result};
use crate::pseudofem::{DeformationField, Dataset, DesignVariables, Sample};
use crate::surrogate::{train, GraphTopology, SurrogateConfig, SurrogateModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub max_epochs: usize,
    /// Neighbors simulated per epoch.
    pub neighbors: usize,
    /// Oracle calls the loop may spend.
    pub max_oracle_calls: usize,
    pub seed: u64,
    pub surrogate: SurrogateConfig,
    pub train: TrainConfig,
    pub descent: GdConfig,
    /// Continue from the previous epoch's weights instead of a fresh model.
    pub warm_start: bool,
    /// Train on the seed designs (e.g. the DOE lattice) as well.
    pub use_seed_data: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_epochs: 5,
            neighbors: 50,
            max_oracle_calls: 300,
            seed: 0,
            surrogate: SurrogateConfig::desk(0),
            train: TrainConfig::default(),
            descent: GdConfig::default(),
            warm_start: false,
            use_seed_data: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub seed: u64,
    pub training_samples: usize,
    pub test_r2: f64,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Center of the neighbor batch.
    pub center: Vec<f64>,
    /// Simulated stiffness vectors; the previous proposal comes first when present.
    pub designs: Vec<Vec<f64>>,
    pub includes_proposal: bool,
    pub evaluations: Vec<Evaluation>,
    /// Lowest surface RMS in this batch, first on ties.
    pub best_index: usize,
    pub best_rms: f64,
    pub best_so_far_rms: f64,
    pub converged: bool,
    pub surrogate: Option<SurrogateSummary>,
    pub descent: Option<DescentSummary>,
    /// `W^q` proposed for the next epoch.
    pub proposal: Option<Vec<f64>>,
    /// Loop oracle calls after this epoch.
    pub oracle_calls: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Everything needed to continue the loop after the last completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub epochs_done: usize,
    pub center: Vec<f64>,
    pub proposal: Option<Vec<f64>>,
    pub samples: Vec<(Vec<f64>, Vec<f64>)>,
    pub best: Option<(Vec<f64>, Evaluation)>,
    pub converged: bool,
    pub oracle_calls: usize,
    pub history: OptimizationHistory,
    /// Latest surrogate checkpoint (used for warm starts).
    pub model: Option<String>,
}

impl LoopState {
    pub fn new(w_p: &[f64]) -> Self {
        Self {
            epochs_done: 0,
            center: w_p.to_vec(),
            proposal: None,
            samples: Vec::new(),
            best: None,
            converged: false,
            oracle_calls: 0,
            history: OptimizationHistory::default(),
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    /// `W*`: the simulated design with the lowest surface RMS.
    pub w_star: Vec<f64>,
    pub best: Option<Evaluation>,
    pub converged: bool,
    pub epochs: usize,
    pub oracle_calls: usize,
    pub history: OptimizationHistory,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64)
}

/// Iterates neighbor sampling, simulation, surrogate retraining and
/// surrogate descent at `v_bar` until a simulated design meets the RMS
/// tolerance or the epoch or oracle budget runs out. `on_epoch` sees the
/// state after every completed epoch together with that epoch's surrogate.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loop(
    eval: &Evaluator<'_>,
    topology: &Arc<GraphTopology>,
    objectives: &Objectives,
    cfg: &LoopConfig,
    v_bar: f64,
    w_p: &[f64],
    seed_data: &[Sample],
    resume: Option<LoopState>,
    on_epoch: &mut dyn FnMut(&LoopState, Option<&SurrogateModel>) -> Result<()>,
) -> Result<LoopOutcome> {
    objectives.validate()?;
    if cfg.neighbors == 0 {
        return Err(Error::InvalidArgument("neighbors per epoch must be >= 1".into()));
    }
    DesignVariables::new(v_bar, w_p.to_vec())?;
    let mut state = resume.unwrap_or_else(|| LoopState::new(w_p));

    while !state.converged && state.epochs_done < cfg.max_epochs {
        let epoch = state.epochs_done + 1;
        let mut designs: Vec<Vec<f64>> = state.proposal.iter().cloned().collect();
        let includes_proposal = !designs.is_empty();
        designs.extend(sample_neighbors(&state.center, cfg.neighbors, epoch_seed(cfg.seed, epoch))?);
        if state.oracle_calls + designs.len() > cfg.max_oracle_calls {
            log::warn!(
                "epoch {epoch}: {} more simulations would exceed the budget of {} oracle calls",
                designs.len(),
                cfg.max_oracle_calls
            );
            break;
        }

        let mut evaluations = Vec::with_capacity(designs.len());
        for w in &designs {
            let (field, e) = eval.evaluate(&DesignVariables::new(v_bar, w.clone())?)?;
            state.oracle_calls += 1;
            state.samples.push((w.clone(), field.dz));
            evaluations.push(e);
        }
        let mut best_index = 0;
        for (i, e) in evaluations.iter().enumerate() {
            if e.surface_rms < evaluations[best_index].surface_rms {
                best_index = i;
            }
        }
        let batch_best = &evaluations[best_index];
        if state.best.as_ref().is_none_or(|(_, b)| batch_best.surface_rms < b.surface_rms) {
            state.best = Some((designs[best_index].clone(), batch_best.clone()));
        }
        let (best_w, best_eval) = state.best.clone().expect("at least one simulation");
        state.converged = best_eval.surface_rms < objectives.rms_tolerance;
        log::info!(
            "epoch {epoch}: batch best {:.1} nm, overall best {:.1} nm, {} oracle calls",
            batch_best.surface_rms,
            best_eval.surface_rms,
            state.oracle_calls
        );

        let mut record = EpochRecord {
            epoch,
            center: state.center.clone(),
            designs,
            includes_proposal,
            best_index,
            best_rms: batch_best.surface_rms,
            best_so_far_rms: best_eval.surface_rms,
            evaluations,
            converged: state.converged,
            surrogate: None,
            descent: None,
            proposal: None,
            oracle_calls: state.oracle_calls,
        };

        let more = !state.converged
            && epoch < cfg.max_epochs
            && state.oracle_calls + cfg.neighbors + 1 <= cfg.max_oracle_calls;
        let mut model_out = None;
        state.proposal = None;
        if more {
            let data = training_data(&state, seed_data, cfg.use_seed_data, v_bar, eval);
            let mut model = match (&state.model, cfg.warm_start) {
                (Some(ck), true) => SurrogateModel::from_json(ck)?,
                _ => SurrogateModel::new(SurrogateConfig {
                    seed: epoch_seed(cfg.surrogate.seed, epoch),
                    ..cfg.surrogate
                })?,
            };
            let train_cfg = TrainConfig {
                split_seed: epoch_seed(cfg.train.split_seed, epoch),
                ..cfg.train
            };
            let report = train(&mut model, topology, &data, &train_cfg)?;
            record.surrogate = Some(SurrogateSummary {
                seed: model.config.seed,
                training_samples: report.train_indices.len(),
                test_r2: report.test_r2,
                train_mse: report.train_mse,
                test_mse: report.test_mse,
            });
            state.model = Some(model.to_json());
            let objective = SurrogateObjective::from_evaluator(eval, &model, topology, v_bar);
            let gd = match optimize_design(&objective, &best_w, &cfg.descent) {
                Ok(gd) => gd,
                Err(e) => {
                    log::warn!("epoch {epoch}: surrogate descent failed ({e}); resampling around the best design");
                    state.center = best_w.clone();
                    state.history.epochs.push(record);
                    state.epochs_done = epoch;
                    on_epoch(&state, Some(&model))?;
                    continue;
                }
            };
            log::info!(
                "epoch {epoch}: surrogate R² {:.4}, descent {:.1} -> {:.1} nm",
                report.test_r2,
                gd.initial_loss,
                gd.final_loss
            );
            record.descent = Some(DescentSummary {
                initial_loss: gd.initial_loss,
                final_loss: gd.final_loss,
            });
            record.proposal = Some(gd.stiffness.clone());
            state.center = gd.stiffness.clone();
            state.proposal = Some(gd.stiffness);
            model_out = Some(model);
        }
        state.history.epochs.push(record);
        state.epochs_done = epoch;
        on_epoch(&state, model_out.as_ref())?;
    }

    let (w_star, best) = match &state.best {
        Some((w, e)) => (w.clone(), Some(e.clone())),
        None => (w_p.to_vec(), None),
    };
    Ok(LoopOutcome {
        w_star,
        best,
        converged: state.converged,
        epochs: state.epochs_done,
        oracle_calls: state.oracle_calls,
        history: state.history,
    })
}

fn training_data(state: &LoopState, seed_data: &[Sample], use_seed: bool, v_bar: f64, eval: &Evaluator<'_>) -> Dataset {
    let mut samples: Vec<Sample> = if use_seed { seed_data.to_vec() } else { Vec::new() };
    samples.extend(state.samples.iter().map(|(w, dz)| Sample {
        design: DesignVariables {
            v1: v_bar,
            stiffness: w.clone(),
        },
        field: DeformationField { dz: dz.clone() },
    }));
    Dataset {
        seed: 0,
        oracle_version: String::new(),
        mesh_hash: eval.mesh.hash(),
        samples,
    }
}
