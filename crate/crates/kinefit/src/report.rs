//! Fit reports: per-trial joint-angle series, the shared body scale, loss
//! history and provenance. Reports contain no timestamps, so identical
//! runs give identical bytes.

use std::path::Path;

use kinefit_core::fitting::{residuals, FitConfig, LossRecord, ObservationSet, SessionFit};
use kinefit_core::gait::{GaitEvents, Trajectory};
use kinefit_core::skeleton::{BodyScale, JointKind, Pose, SkeletonDefinition};
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::formats::{read_json, write_json, VERSION};
use crate::manifest::Participant;

pub const REPORT_SCHEMA: &str = "kinefit.fit_report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub time: String,
    pub rotation: String,
    pub translation: String,
    pub residual_2d: String,
    pub residual_3d: String,
}

impl Default for Units {
    fn default() -> Self {
        Self { time: "s".into(), rotation: "deg".into(), translation: "m".into(), residual_2d: "px".into(), residual_3d: "cm".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub id: String,
    pub activity: String,
    /// Mean frame rate of the reported series.
    pub rate_hz: f64,
    pub times: Vec<f64>,
    /// One row per time, in `coordinates` order.
    pub poses: Vec<Vec<f64>>,
    /// Camera-to-world quaternions `(w, x, y, z)` per time.
    pub camera: Vec<[f64; 4]>,
    pub residual_px: f64,
    pub residual_cm: f64,
    /// Events supplied with the trial, if any.
    pub events: Option<GaitEvents>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub model_hash: String,
    pub seed: u64,
    pub version: String,
    pub config: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: String,
    pub version: u32,
    pub session: String,
    pub participant: Participant,
    pub coordinates: Vec<String>,
    pub units: Units,
    pub trials: Vec<TrialReport>,
    pub scale: BodyScale,
    pub history: Vec<LossRecord>,
    pub provenance: Provenance,
}

/// One fitted trial's inputs as recorded in the report.
pub struct TrialInput<'a> {
    pub id: &'a str,
    pub activity: &'a str,
    pub observations: &'a ObservationSet,
    pub events: Option<GaitEvents>,
}

fn is_translation(def: &SkeletonDefinition, i: usize) -> bool {
    def.joints[i].kind == JointKind::Translational
}

impl FitReport {
    pub fn build(
        def: &SkeletonDefinition,
        model_hash: &str,
        session: &str,
        participant: &Participant,
        trials: &[TrialInput],
        fit: &SessionFit,
        config: &FitConfig,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(trials.len());
        for (input, net) in trials.iter().zip(&fit.nets) {
            let obs = input.observations;
            let times: Vec<f64> = obs.usable_frames().iter().map(|&i| obs.frames[i].time).collect();
            let (mut poses, mut camera) = (Vec::with_capacity(times.len()), Vec::with_capacity(times.len()));
            for &t in &times {
                let (pose, r) = net.evaluate(t).map_err(kinefit_core::fitting::FitError::from)?;
                poses.push(pose.0.iter().enumerate().map(|(i, v)| if is_translation(def, i) { *v } else { v.to_degrees() }).collect());
                camera.push(r.to_quat());
            }
            let span = times.last().unwrap_or(&0.0) - times.first().unwrap_or(&0.0);
            let rate_hz = if span > 0.0 { (times.len() - 1) as f64 / span } else { 0.0 };
            let (residual_px, residual_cm) = residuals(def, net, &fit.scale, obs)?;
            out.push(TrialReport {
                id: input.id.into(),
                activity: input.activity.into(),
                rate_hz,
                times,
                poses,
                camera,
                residual_px,
                residual_cm,
                events: input.events.clone(),
            });
        }
        Ok(Self {
            schema: REPORT_SCHEMA.into(),
            version: VERSION,
            session: session.into(),
            participant: participant.clone(),
            coordinates: def.joints.iter().map(|j| j.name.clone()).collect(),
            units: Units::default(),
            trials: out,
            scale: fit.scale.clone(),
            history: fit.history.clone(),
            provenance: Provenance {
                config_hash: config_hash(config),
                model_hash: model_hash.into(),
                seed: config.seed,
                version: env!("CARGO_PKG_VERSION").into(),
                config: *config,
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = read_json(path)?;
        if r.schema != REPORT_SCHEMA || r.version != VERSION {
            return Err(Error::format(path, format!("not a version {VERSION} {REPORT_SCHEMA} file")));
        }
        if r.trials.iter().any(|t| t.times.len() != t.poses.len() || t.poses.iter().any(|p| p.len() != r.coordinates.len())) {
            return Err(Error::format(path, "pose rows do not match times and coordinates"));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn trial(&self, id: &str) -> Option<&TrialReport> {
        self.trials.iter().find(|t| t.id == id)
    }

    /// A trial's series in model units (radians, meters). The report's
    /// coordinate list must match the model.
    pub fn trajectory(&self, def: &SkeletonDefinition, trial: &TrialReport) -> Result<Trajectory> {
        let names: Vec<&str> = def.joints.iter().map(|j| j.name.as_str()).collect();
        if self.coordinates != names {
            return Err(Error::Data(format!("report '{}' was fitted with a different model", self.session)));
        }
        let poses = trial
            .poses
            .iter()
            .map(|row| Pose(row.iter().enumerate().map(|(i, v)| if is_translation(def, i) { *v } else { v.to_radians() }).collect()))
            .collect();
        Ok(Trajectory { times: trial.times.clone(), poses })
    }
}
