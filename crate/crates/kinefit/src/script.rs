//! Synthetic session scripts: a TOML description of one body and its
//! trials, rendered into the ingestion formats plus a manifest.
//!
//! ```toml
//! session = "synthetic-01"
//!
//! [body]
//! spread = 0.05
//! seed = 3
//!
//! [[trial]]
//! id = "walk"
//! motion = "gait"
//! duration = 10.0
//! placement = { position = [0.0, 3.5], heading_deg = 0.0 }
//! noise = { sigma_2d_px = 5.0, sigma_3d_cm = 2.0, spread = 0.3, orientation_deg = 1.0, seed = 7 }
//!
//! [[trial]]
//! id = "tug"
//! motion = "tug"
//! camera = { kind = "tracking", wobble_deg = 2.0 }
//! ```

use std::path::{Path, PathBuf};

use kinefit_core::fitting::TrialExecutor;
use kinefit_core::skeleton::{BodyScale, SkeletonDefinition, NUM_SCALE_GROUPS};
use kinefit_core::synth::{
    generate, random_scale, CameraPath, CameraSetup, GaitParams, MotionKind, MotionScript, NoiseSpec, Placement,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_text, save_events, save_intrinsics, save_keypoints, save_orientation, save_truth};
use crate::manifest::{Participant, SessionManifest, TrialEntry};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodySpec {
    /// Explicit segment scales; otherwise drawn within ±`spread` of 1.
    pub scales: Option<[f64; NUM_SCALE_GROUPS]>,
    pub spread: f64,
    pub seed: u64,
}

impl BodySpec {
    pub fn scale(&self) -> BodyScale {
        match self.scales {
            Some(scales) => BodyScale { scales, ..BodyScale::default() },
            None => random_scale(self.seed, self.spread),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TugSpec {
    pub distance: f64,
    pub speed: f64,
}

impl Default for TugSpec {
    fn default() -> Self {
        Self { distance: 3.0, speed: 1.0 }
    }
}

fn ten() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    pub id: String,
    pub motion: MotionKind,
    /// Seconds; TUG-like trials derive their duration from `tug`.
    #[serde(default = "ten")]
    pub duration: f64,
    #[serde(default)]
    pub gait: GaitParams,
    #[serde(default)]
    pub tug: TugSpec,
    /// Defaults to a side view for gait and standing, and a diagonal start
    /// for TUG-like trials.
    #[serde(default)]
    pub placement: Option<Placement>,
    /// Defaults to a static camera.
    #[serde(default)]
    pub camera: Option<CameraPath>,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl TrialSpec {
    pub fn motion_script(&self, def: &SkeletonDefinition, scale: BodyScale) -> Result<MotionScript> {
        let side = Placement { position: [0.0, 3.5], heading_deg: 0.0 };
        let script = match self.motion {
            MotionKind::Gait => MotionScript::gait(def, self.duration, &self.gait, scale, self.placement.unwrap_or(side))?,
            MotionKind::Standing => MotionScript::standing(def, self.duration, scale, self.placement.unwrap_or(side))?,
            MotionKind::Tug => {
                let diagonal = Placement { position: [2.0, 2.0], heading_deg: -45.0 };
                MotionScript::tug(def, &self.gait, self.tug.distance, self.tug.speed, scale, self.placement.unwrap_or(diagonal))?
            }
        };
        Ok(script)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthScript {
    pub session: String,
    #[serde(default)]
    pub participant: Participant,
    #[serde(default)]
    pub body: BodySpec,
    #[serde(rename = "trial")]
    pub trials: Vec<TrialSpec>,
}

impl SynthScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

fn activity(kind: MotionKind) -> &'static str {
    match kind {
        MotionKind::Gait => "gait",
        MotionKind::Tug => "tug",
        MotionKind::Standing => "standing",
    }
}

/// Renders every trial into `out` and writes `manifest.toml`, whose path
/// is returned. Trials render in parallel; output does not depend on the
/// executor.
pub fn synthesize<E: TrialExecutor>(def: &SkeletonDefinition, script: &SynthScript, out: &Path, executor: &E) -> Result<PathBuf> {
    if script.trials.is_empty() {
        return Err(Error::Data("synthesis script lists no trials".into()));
    }
    let scale = script.body.scale();
    let sites: Vec<String> = def.sites.iter().map(|s| s.name.clone()).collect();
    let rendered = executor.map(script.trials.len(), |i| -> Result<TrialEntry> {
        let spec = &script.trials[i];
        let motion = spec.motion_script(def, scale.clone())?;
        let data = generate(def, &motion, &CameraSetup::phone(spec.camera.unwrap_or(CameraPath::Static)), &spec.noise, &spec.id)?;
        let file = |suffix: &str| PathBuf::from(format!("{}.{suffix}", spec.id));
        let entry = TrialEntry {
            id: spec.id.clone(),
            keypoints: file("keypoints.jsonl"),
            intrinsics: file("intrinsics.json"),
            orientation: Some(file("orientation.jsonl")),
            activity: activity(spec.motion).into(),
            events: data.truth.events.as_ref().map(|_| file("events.json")),
            truth: Some(file("truth.json")),
            include: true,
        };
        save_keypoints(&out.join(&entry.keypoints), &spec.id, &sites, &data.observations.frames)?;
        save_intrinsics(&out.join(&entry.intrinsics), &data.observations.intrinsics)?;
        save_orientation(&out.join(file("orientation.jsonl")), &data.observations.orientations)?;
        if let Some(ev) = &data.truth.events {
            save_events(&out.join(file("events.json")), ev)?;
        }
        save_truth(&out.join(file("truth.json")), &data.truth)?;
        Ok(entry)
    });
    let trials = rendered.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = SessionManifest { session: script.session.clone(), participant: script.participant.clone(), trials };
    let path = out.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
