//! Scripted operator for headless studies.
//!
//! Per run: every target view is defined (DOFs set, view saved, reference
//! X-ray keypoints stored), the device is retracted to neutral, then each
//! view is restored. The conventional operator recalls the DOFs with error
//! and refines with X-ray images until the keypoints are close enough. The
//! proposed operator aligns against the shown cloud, which leaves a smaller
//! residual, and takes one verification image.

use carm_core::evaluation::{keypoint_displacement, AcquisitionPurpose, EvaluationError, KeypointSet, MethodArm, RunEvent, RunLog};
use carm_core::kinematics::{CArmDofs, DOF_COUNT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::SimConfig;
use crate::session::{CommandMessage, Session, Verb};
use crate::study::StudyFile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorModel {
    /// Recall error per angular DOF, degrees (SD).
    pub recall_sigma_deg: f64,
    /// Recall error per translational DOF, mm (SD).
    pub recall_sigma_mm: f64,
    /// Fraction of the remaining DOF error removed after each X-ray. The
    /// recall error of each correction shrinks by the same factor.
    pub correction_gain: f64,
    /// Keypoint displacement at which the conventional operator stops, px.
    pub acceptance_px: f64,
    /// Repositioning images allowed per view.
    pub max_xrays: usize,
    /// Residual angular error after aligning against the shown cloud, degrees (SD).
    pub overlay_sigma_deg: f64,
    /// Residual translational error after aligning against the shown cloud, mm (SD).
    pub overlay_sigma_mm: f64,
}

impl Default for OperatorModel {
    fn default() -> Self {
        Self {
            recall_sigma_deg: 4.0,
            recall_sigma_mm: 25.0,
            correction_gain: 0.7,
            acceptance_px: 20.0,
            max_xrays: 6,
            overlay_sigma_deg: 1.5,
            overlay_sigma_mm: 12.0,
        }
    }
}

const ANGULAR: [bool; DOF_COUNT] = [false, false, false, true, true, true, true];

#[derive(Debug, thiserror::Error)]
pub enum SimulateError {
    #[error("run {run}: {verb} failed: {message}")]
    Command { run: String, verb: &'static str, message: String },
    #[error("run {run}: view {view:?} has no preset")]
    UnknownPreset { run: String, view: String },
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

struct Driver<'a> {
    session: Session,
    run: &'a str,
}

impl Driver<'_> {
    fn send(&mut self, verb: Verb, args: Value) -> Result<Value, SimulateError> {
        let out = self.session.handle_command(&CommandMessage::new(verb, args).with_client("operator"));
        if !out.reply.ok {
            return Err(SimulateError::Command {
                run: self.run.to_string(),
                verb: verb.as_str(),
                message: out.reply.error.unwrap_or_default(),
            });
        }
        Ok(out.reply.data.unwrap_or(Value::Null))
    }

    fn set_dofs(&mut self, dofs: &CArmDofs) -> Result<(), SimulateError> {
        self.send(Verb::SetDofs, serde_json::to_value(dofs).expect("DOFs serialize"))?;
        Ok(())
    }

    fn acquire(&mut self, view: &str, purpose: AcquisitionPurpose) -> Result<KeypointSet, SimulateError> {
        let data = self.send(Verb::AcquireXray, json!({ "view": view, "purpose": purpose }))?;
        Ok(serde_json::from_value(data["keypoints"].clone()).unwrap_or_default())
    }
}

fn perturbed(dofs: &CArmDofs, rng: &mut ChaCha8Rng, sigma_mm: f64, sigma_deg: f64) -> CArmDofs {
    let mm = Normal::new(0.0, sigma_mm).expect("finite sigma");
    let deg = Normal::new(0.0, sigma_deg).expect("finite sigma");
    let mut a = dofs.to_array();
    for (i, v) in a.iter_mut().enumerate() {
        *v += if ANGULAR[i] { deg.sample(rng) } else { mm.sample(rng) };
    }
    CArmDofs::from_array(a).clamped()
}

fn toward(current: &CArmDofs, target: &CArmDofs, gain: f64) -> CArmDofs {
    let (c, t) = (current.to_array(), target.to_array());
    CArmDofs::from_array(core::array::from_fn(|i| c[i] + gain * (t[i] - c[i]))).clamped()
}

/// Runs every scenario of `study` and returns the merged study log, with
/// runs placed one after another on a common clock.
pub fn simulate(study: &StudyFile, config: &SimConfig, seed: u64) -> Result<RunLog, SimulateError> {
    let model = &study.operator;
    let mut merged = RunLog::default();
    let mut offset = 0.0;
    for (k, scenario) in study.scenarios.iter().enumerate() {
        scenario.validate()?;
        let mut cfg = config.clone();
        cfg.run = scenario.run.clone();
        cfg.arm = scenario.arm;
        let mut d = Driver {
            session: Session::new(cfg),
            run: &scenario.run,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));

        let mut targets = Vec::with_capacity(scenario.views.len());
        let mut references = Vec::with_capacity(scenario.views.len());
        for view in &scenario.views {
            let dofs = scenario.preset_for(view).map_err(|_| SimulateError::UnknownPreset {
                run: scenario.run.clone(),
                view: view.clone(),
            })?;
            d.set_dofs(&dofs)?;
            d.send(Verb::SaveView, json!({ "name": view }))?;
            let reference = d.session.state().registry.get(view).ok().and_then(|v| v.reference_keypoints.clone());
            targets.push(dofs);
            references.push(reference.unwrap_or_default());
        }
        d.send(Verb::ResetNeutral, Value::Null)?;

        for ((view, target), reference) in scenario.views.iter().zip(&targets).zip(&references) {
            match scenario.arm {
                MethodArm::Conventional => {
                    let mut dofs = perturbed(target, &mut rng, model.recall_sigma_mm, model.recall_sigma_deg);
                    let mut spread = 1.0;
                    for shot in 0..model.max_xrays.max(1) {
                        d.set_dofs(&dofs)?;
                        let image = d.acquire(view, AcquisitionPurpose::Repositioning)?;
                        let good = keypoint_displacement(reference, &image).is_ok_and(|px| px <= model.acceptance_px);
                        if good || shot + 1 == model.max_xrays {
                            break;
                        }
                        let corrected = toward(&dofs, target, model.correction_gain);
                        spread *= 1.0 - model.correction_gain;
                        dofs = perturbed(&corrected, &mut rng, model.recall_sigma_mm * spread, model.recall_sigma_deg * spread);
                    }
                }
                MethodArm::Proposed => {
                    d.send(Verb::ShowView, json!({ "name": view }))?;
                    let dofs = perturbed(target, &mut rng, model.overlay_sigma_mm, model.overlay_sigma_deg);
                    d.set_dofs(&dofs)?;
                    d.acquire(view, AcquisitionPurpose::Verification)?;
                    d.send(Verb::HideView, Value::Null)?;
                }
            }
            d.send(Verb::ResetNeutral, Value::Null)?;
        }

        let events = d.session.state().study_log.events();
        let end = events.last().map_or(0.0, |e| e.t);
        for e in events {
            merged.push(RunEvent { t: e.t + offset, ..e.clone() })?;
        }
        offset += end;
    }
    Ok(merged)
}
