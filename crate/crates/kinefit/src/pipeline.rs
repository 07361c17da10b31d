//! Session-level operations shared by the CLI and tests: loading a model
//! and a manifest, fitting, and the analyses run on fit reports.

use std::path::Path;

use kinefit_core::fitting::{fit_session_with, FitConfig, LossRecord, ObservationSet, TrialExecutor};
use kinefit_core::gait::{cadence, detect_events_kinematic, double_support_time, extract_cycles, DetectorConfig, GaitCycle, GaitEvents, Trajectory};
use kinefit_core::skeleton::{BodyScale, SkeletonDefinition, DEFAULT_MODEL_JSON};
use kinefit_core::stats::{joint_group_mjae, mjae_aggregate, rte, rte_aligned};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::sha256_hex;
use crate::error::{Error, Result};
use crate::formats::{load_events, load_observations, load_truth, read_text};
use crate::manifest::{SessionManifest, TrialEntry};
use crate::report::{FitReport, TrialInput, TrialReport};

/// Environment variable naming the default model definition file.
pub const MODEL_ENV: &str = "KINEFIT_MODEL";

pub struct Model {
    pub def: SkeletonDefinition,
    /// SHA-256 of the definition text.
    pub hash: String,
}

impl Model {
    /// Loads `path`, or the bundled model when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => read_text(p)?,
            None => DEFAULT_MODEL_JSON.to_string(),
        };
        let def = SkeletonDefinition::from_json(&text).map_err(|e| match path {
            Some(p) => Error::format(p, e),
            None => Error::Skeleton(e),
        })?;
        Ok(Self { def, hash: sha256_hex(text.as_bytes()) })
    }

    pub fn site_names(&self) -> Vec<String> {
        self.def.sites.iter().map(|s| s.name.clone()).collect()
    }
}

pub struct LoadedTrial {
    pub entry: TrialEntry,
    pub observations: ObservationSet,
    pub events: Option<GaitEvents>,
}

/// Loads the included trials of a manifest.
pub fn load_session(model: &Model, manifest: &SessionManifest) -> Result<Vec<LoadedTrial>> {
    let sites = model.site_names();
    manifest
        .included()
        .map(|entry| {
            let mut observations = load_observations(&entry.keypoints, &entry.intrinsics, entry.orientation.as_deref(), &sites)?;
            observations.name = entry.id.clone();
            let events = entry.events.as_deref().map(load_events).transpose()?;
            Ok(LoadedTrial { entry: entry.clone(), observations, events })
        })
        .collect()
}

/// Fits every included trial of a manifest with one shared body scale.
pub fn fit_manifest<E: TrialExecutor>(
    model: &Model,
    manifest: &SessionManifest,
    config: &FitConfig,
    executor: &E,
    on_iteration: impl FnMut(usize, &LossRecord),
) -> Result<(FitReport, Checkpoint)> {
    let trials = load_session(model, manifest)?;
    if trials.is_empty() {
        return Err(Error::Data(format!("session '{}' has no included trials", manifest.session)));
    }
    let obs: Vec<ObservationSet> = trials.iter().map(|t| t.observations.clone()).collect();
    let fit = fit_session_with(&model.def, &obs, config, &BodyScale::default(), executor, on_iteration)?;
    let inputs: Vec<TrialInput> = trials
        .iter()
        .map(|t| TrialInput { id: &t.entry.id, activity: &t.entry.activity, observations: &t.observations, events: t.events.clone() })
        .collect();
    let report = FitReport::build(&model.def, &model.hash, &manifest.session, &manifest.participant, &inputs, &fit, config)?;
    Ok((report, Checkpoint { nets: fit.nets, scale: fit.scale }))
}

/// Events for a reported trial: the override, else the events stored in
/// the report, else kinematic detection on the fitted series, which comes
/// with a warning.
pub fn trial_events(
    def: &SkeletonDefinition,
    report: &FitReport,
    trial: &TrialReport,
    supplied: Option<&GaitEvents>,
) -> Result<(GaitEvents, Option<String>)> {
    if let Some(e) = supplied.or(trial.events.as_ref()) {
        return Ok((e.clone(), None));
    }
    let traj = report.trajectory(def, trial)?;
    let events = detect_events_kinematic(def, &report.scale, &traj, &DetectorConfig::default())?;
    Ok((events, Some(format!("trial '{}' has no event file; using kinematic event detection", trial.id))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub id: String,
    pub event_source: String,
    /// Steps per minute.
    pub cadence: Option<f64>,
    /// Seconds per cycle.
    pub double_support_s: Option<f64>,
    pub residual_px: f64,
    pub residual_cm: f64,
}

pub fn trial_metrics(def: &SkeletonDefinition, report: &FitReport, trial: &TrialReport, supplied: Option<&GaitEvents>) -> Result<(TrialMetrics, Option<String>)> {
    let (events, warning) = trial_events(def, report, trial, supplied)?;
    let m = TrialMetrics {
        id: trial.id.clone(),
        event_source: if warning.is_some() { "kinematic".into() } else { "ingested".into() },
        cadence: cadence(&events).ok(),
        double_support_s: double_support_time(&events).ok(),
        residual_px: trial.residual_px,
        residual_cm: trial.residual_cm,
    };
    Ok((m, warning))
}

/// Gait cycles of the report's `gait` trials, with any warnings.
pub fn report_cycles(def: &SkeletonDefinition, report: &FitReport) -> Result<(Vec<GaitCycle>, Vec<String>)> {
    let (mut cycles, mut warnings) = (Vec::new(), Vec::new());
    for trial in report.trials.iter().filter(|t| t.activity == "gait") {
        let (events, w) = trial_events(def, report, trial, None)?;
        warnings.extend(w);
        let traj = report.trajectory(def, trial)?;
        let (c, w) = extract_cycles(def, &traj, &events, &report.session)?;
        warnings.extend(w.map(|w| format!("trial '{}': {w}", trial.id)));
        cycles.extend(c);
    }
    Ok((cycles, warnings))
}

/// A reference trajectory per trial id: ground-truth sidecars of a
/// manifest, or the series of another report.
pub fn load_reference(def: &SkeletonDefinition, path: &Path) -> Result<Vec<(String, Trajectory)>> {
    if path.extension().is_some_and(|e| e == "toml") {
        let manifest = SessionManifest::load(path)?;
        let mut out = Vec::new();
        for t in manifest.included() {
            let truth_path = t.truth.as_ref().ok_or_else(|| Error::format(path, format!("trial '{}' has no truth file", t.id)))?;
            let truth = load_truth(truth_path)?;
            out.push((t.id.clone(), Trajectory { times: truth.times, poses: truth.poses }));
        }
        Ok(out)
    } else {
        let r = FitReport::load(path)?;
        r.trials.iter().map(|t| Ok((t.id.clone(), r.trajectory(def, t)?))).collect()
    }
}

fn reference_for<'a>(reference: &'a [(String, Trajectory)], id: &str) -> Result<&'a Trajectory> {
    reference.iter().find(|(i, _)| i == id).map(|(_, t)| t).ok_or_else(|| Error::Data(format!("reference has no trial '{id}'")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialMjae {
    pub id: String,
    /// `(group, degrees)` in reporting order.
    pub groups: Vec<(String, f64)>,
    /// Median over the groups.
    pub aggregate: f64,
}

pub fn report_mjae(def: &SkeletonDefinition, report: &FitReport, reference: &[(String, Trajectory)]) -> Result<Vec<TrialMjae>> {
    report
        .trials
        .iter()
        .map(|t| {
            let est = report.trajectory(def, t)?;
            let per = joint_group_mjae(def, &est, reference_for(reference, &t.id)?)?;
            let names = kinefit_core::skeleton::JOINT_GROUPS.iter().map(|(n, _)| n.to_string());
            Ok(TrialMjae { id: t.id.clone(), aggregate: mjae_aggregate(&per)?, groups: names.zip(per).collect() })
        })
        .collect()
}

/// Pelvis positions of `traj` at `times`, linearly interpolated.
pub fn pelvis_at(def: &SkeletonDefinition, traj: &Trajectory, times: &[f64]) -> Result<Vec<[f64; 3]>> {
    let tr = def.root_translation_coords();
    times
        .iter()
        .map(|&t| {
            let mut p = [0.0; 3];
            for (k, &c) in tr.iter().enumerate() {
                p[k] = traj.sample(c, t).ok_or_else(|| Error::Data(format!("reference does not cover t = {t} s")))?;
            }
            Ok(p)
        })
        .collect()
}

/// Root translation error per trial in centimeters.
pub fn report_rte(def: &SkeletonDefinition, report: &FitReport, reference: &[(String, Trajectory)], aligned: bool) -> Result<Vec<(String, f64)>> {
    report
        .trials
        .iter()
        .map(|t| {
            let est = report.trajectory(def, t)?;
            let a = pelvis_at(def, &est, &t.times)?;
            let b = pelvis_at(def, reference_for(reference, &t.id)?, &t.times)?;
            let e = if aligned { rte_aligned(&a, &b)? } else { rte(&a, &b)? };
            Ok((t.id.clone(), e))
        })
        .collect()
}
