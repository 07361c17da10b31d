//! Synthetic subjects: parametric motions on the default skeleton rendered
//! through a scripted camera into noisy keypoints and phone orientations,
//! with the ground truth needed to score a reconstruction.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::MIN_DEPTH;
use crate::fitting::{confidence_from_std, Frame, ObservationSet, OrientationSample};
use crate::gait::{detect_events_kinematic, DetectorConfig, Foot, GaitError, GaitEvents, Trajectory};
use crate::geometry::{add, look_rotation, project, scale, CameraIntrinsics, Rotation, Vec3};
use crate::skeleton::{BodyScale, Pose, SkeletonDefinition, SkeletonError, NUM_COORDS, NUM_SITES};

/// Camera height above the floor; the camera sits at the world origin.
pub const CAMERA_HEIGHT: f64 = 1.2;

/// Sampling rate used to locate the true gait events.
const EVENT_RATE_HZ: f64 = 1000.0;

/// Longest tolerated stretch with the subject partly out of frame.
const MAX_OUT_OF_VIEW_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid motion script: {0}")]
    InvalidScript(&'static str),
    #[error("invalid noise specification: {0}")]
    InvalidNoise(&'static str),
    #[error("subject leaves the camera frustum for {seconds:.2} s starting at t = {start:.2} s")]
    OutOfFrustum { start: f64, seconds: f64 },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Gait(#[from] GaitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Gait,
    Tug,
    Standing,
}

/// One cosine term `amplitude · cos(2π·(harmonic·φ − phase))` of a curve
/// over stride phase `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: f64,
    pub harmonic: u32,
    pub phase: f64,
}

/// Periodic curve of one coordinate in degrees (joint and pelvis rotation
/// channels) or meters (pelvis translation channels, in the heading frame).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Curve {
    pub offset: f64,
    pub harmonics: Vec<Harmonic>,
}

impl Curve {
    fn oscillation(&self, phase: f64) -> f64 {
        self.harmonics
            .iter()
            .map(|h| h.amplitude * libm::cos(2.0 * core::f64::consts::PI * (h.harmonic as f64 * phase - h.phase)))
            .sum()
    }

    /// Smallest and largest oscillation over one cycle.
    fn extremes(&self) -> (f64, f64) {
        (0..360).map(|i| self.oscillation(i as f64 / 360.0)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    }
}

/// Margin kept between a scripted curve and its joint limits, degrees.
const LIMIT_MARGIN_DEG: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitParams {
    /// Strides per second.
    pub stride_frequency: f64,
    /// Left-side amplitude relative to the right; 1 is symmetric.
    pub asymmetry: f64,
    /// Relative spread of per-subject template perturbations.
    pub variability: f64,
    pub seed: u64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self { stride_frequency: 0.9, asymmetry: 1.0, variability: 0.0, seed: 0 }
    }
}

/// Where the subject starts, in the camera-anchored world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Horizontal pelvis position `(x, z)`, meters.
    pub position: [f64; 2],
    /// Heading in degrees about `+y`; 0 faces `+x`.
    pub heading_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TugTimeline {
    rise: (f64, f64),
    walk_up: (f64, f64),
    turn: (f64, f64),
    walk_down: (f64, f64),
    sit: (f64, f64),
    speed: f64,
}

/// A complete parametric motion of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScript {
    pub kind: MotionKind,
    pub duration: f64,
    pub stride_frequency: f64,
    pub curves: Vec<Curve>,
    pub scale: BodyScale,
    pub placement: Placement,
    standing_height: f64,
    tug: Option<TugTimeline>,
    /// Pelvis `(x, z)` at 1 ms resolution.
    path: Vec<[f64; 2]>,
}

fn smoothstep(t: f64, (a, b): (f64, f64)) -> f64 {
    let x = ((t - a) / (b - a)).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn h(amplitude: f64, harmonic: u32, phase: f64) -> Harmonic {
    Harmonic { amplitude, harmonic, phase }
}

/// Right-side and axial templates; the left side reuses the right-side
/// entries half a stride later.
fn gait_templates() -> Vec<(&'static str, Curve)> {
    let c = |offset: f64, hs: &[Harmonic]| Curve { offset, harmonics: hs.to_vec() };
    vec![
        ("pelvis_tx", c(0.0, &[h(0.015, 2, 0.1)])),
        ("pelvis_ty", c(0.0, &[h(0.018, 2, 0.3)])),
        ("pelvis_tz", c(0.0, &[h(0.02, 1, 0.25)])),
        ("pelvis_rx", c(0.0, &[h(4.0, 1, 0.2)])),
        ("pelvis_ry", c(0.0, &[h(5.0, 1, 0.0)])),
        ("pelvis_rz", c(-2.0, &[h(2.0, 2, 0.15)])),
        ("hip_flexion_r", c(10.0, &[h(22.0, 1, 0.05), h(3.0, 2, 0.2)])),
        ("hip_adduction_r", c(1.0, &[h(5.0, 1, 0.2), h(2.0, 2, 0.0)])),
        ("hip_rotation_r", c(2.0, &[h(4.0, 1, 0.1)])),
        ("knee_angle_r", c(25.0, &[h(22.0, 1, 0.72), h(8.0, 2, 0.62)])),
        ("ankle_angle_r", c(0.0, &[h(8.0, 1, 0.4), h(6.0, 2, 0.1)])),
        ("subtalar_angle_r", c(0.0, &[h(3.0, 1, 0.3)])),
        ("mtp_angle_r", c(5.0, &[h(10.0, 1, 0.6)])),
        ("lumbar_extension", c(-3.0, &[h(2.5, 2, 0.1)])),
        ("lumbar_bending", c(0.0, &[h(3.0, 1, 0.25)])),
        ("lumbar_rotation", c(0.0, &[h(5.0, 1, 0.5)])),
        ("neck_extension", c(3.0, &[h(2.0, 2, 0.6)])),
        ("neck_bending", c(0.0, &[h(1.5, 1, 0.75)])),
        ("neck_rotation", c(0.0, &[h(3.0, 1, 0.0)])),
        ("arm_flex_r", c(5.0, &[h(15.0, 1, 0.55)])),
        ("arm_add_r", c(-10.0, &[h(3.0, 1, 0.3)])),
        ("arm_rot_r", c(5.0, &[h(4.0, 1, 0.5)])),
        ("elbow_flex_r", c(25.0, &[h(10.0, 1, 0.6)])),
        ("pro_sup_r", c(10.0, &[h(5.0, 1, 0.2)])),
        ("wrist_flex_r", c(0.0, &[h(5.0, 1, 0.6)])),
        ("wrist_dev_r", c(0.0, &[h(3.0, 1, 0.4)])),
    ]
}

/// Seated posture targets for the sit/stand phases of a TUG-like motion.
const SIT_TARGETS: [(&str, f64); 8] = [
    ("hip_flexion_r", 85.0),
    ("hip_flexion_l", 85.0),
    ("knee_angle_r", 90.0),
    ("knee_angle_l", 90.0),
    ("ankle_angle_r", 5.0),
    ("ankle_angle_l", 5.0),
    ("lumbar_extension", -10.0),
    ("elbow_flex_r", 60.0),
];

const PATH_DT: f64 = 1e-3;

impl MotionScript {
    fn build(
        def: &SkeletonDefinition,
        kind: MotionKind,
        duration: f64,
        params: &GaitParams,
        scale_: BodyScale,
        placement: Placement,
        tug: Option<TugTimeline>,
    ) -> Result<Self, SynthError> {
        if !(duration > 1.0) || !duration.is_finite() {
            return Err(SynthError::InvalidScript("duration must exceed 1 s"));
        }
        if !(params.stride_frequency > 0.2 && params.stride_frequency < 3.0) {
            return Err(SynthError::InvalidScript("stride frequency must be in (0.2, 3) Hz"));
        }
        if !(params.asymmetry > 0.0 && params.asymmetry <= 2.0) || !(params.variability >= 0.0) {
            return Err(SynthError::InvalidScript("asymmetry must be in (0, 2] and variability non-negative"));
        }
        scale_.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let jitter = Normal::new(0.0, 1.0).expect("unit normal");
        let mut curves = vec![Curve::default(); NUM_COORDS];
        for (name, curve) in gait_templates() {
            let mut perturbed = curve.clone();
            if params.variability > 0.0 {
                let v = params.variability;
                perturbed.offset += v * 3.0 * jitter.sample(&mut rng) * if name.starts_with("pelvis_t") { 0.0 } else { 1.0 };
                for hm in &mut perturbed.harmonics {
                    hm.amplitude *= 1.0 + v * jitter.sample(&mut rng);
                    hm.phase += 0.03 * v * jitter.sample(&mut rng);
                }
            }
            let i = def.coord_index(name).ok_or(SynthError::InvalidScript("template names an unknown coordinate"))?;
            curves[i] = perturbed.clone();
            if let Some(base) = name.strip_suffix("_r") {
                let j = def.coord_index(&alloc::format!("{base}_l")).ok_or(SynthError::InvalidScript("missing left coordinate"))?;
                let mut left = perturbed;
                for hm in &mut left.harmonics {
                    hm.amplitude *= params.asymmetry;
                    hm.phase += 0.5 * hm.harmonic as f64;
                }
                curves[j] = left;
            }
        }
        let mut script = Self {
            kind,
            duration,
            stride_frequency: params.stride_frequency,
            curves,
            scale: scale_,
            placement,
            standing_height: 0.0,
            tug,
            path: Vec::new(),
        };
        script.integrate_path();
        let neutral = script.pose_with(def, 0.0, 0.0, 0.0);
        let x = def.forward_kinematics(&neutral, &script.scale)?;
        let lowest = x.0.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        script.standing_height = -CAMERA_HEIGHT - lowest;
        for (i, j) in def.joints.iter().enumerate() {
            let Some((lo, hi)) = j.limits else { continue };
            if def.root_rotation_coords().contains(&i) {
                continue;
            }
            let (lo, hi) = (lo.to_degrees() + LIMIT_MARGIN_DEG, hi.to_degrees() - LIMIT_MARGIN_DEG);
            let c = &mut script.curves[i];
            if !(c.offset > lo && c.offset < hi) {
                return Err(SynthError::InvalidScript("curves exceed joint limits"));
            }
            // Perturbed or asymmetric amplitudes shrink to fit the range.
            let (down, up) = c.extremes();
            let room = f64::min(if down < 0.0 { (lo - c.offset) / down } else { 1.0 }, if up > 0.0 { (hi - c.offset) / up } else { 1.0 });
            if room < 1.0 {
                c.harmonics.iter_mut().for_each(|h| h.amplitude *= room);
            }
            if let Some((_, sit)) = SIT_TARGETS.iter().find(|(n, _)| *n == j.name) {
                if script.tug.is_some() && !(*sit > lo && *sit < hi) {
                    return Err(SynthError::InvalidScript("seated posture exceeds joint limits"));
                }
            }
        }
        Ok(script)
    }

    /// Steady walking in place (treadmill-like) with no net progression.
    pub fn gait(def: &SkeletonDefinition, duration: f64, params: &GaitParams, scale: BodyScale, placement: Placement) -> Result<Self, SynthError> {
        Self::build(def, MotionKind::Gait, duration, params, scale, placement, None)
    }

    /// Quiet standing.
    pub fn standing(def: &SkeletonDefinition, duration: f64, scale: BodyScale, placement: Placement) -> Result<Self, SynthError> {
        Self::build(def, MotionKind::Standing, duration, &GaitParams::default(), scale, placement, None)
    }

    /// Stand up, walk `distance` meters, turn 180°, walk back and sit.
    pub fn tug(
        def: &SkeletonDefinition,
        params: &GaitParams,
        distance: f64,
        speed: f64,
        scale: BodyScale,
        placement: Placement,
    ) -> Result<Self, SynthError> {
        if !(distance > 0.5 && distance < 10.0) || !(speed > 0.2 && speed < 2.5) {
            return Err(SynthError::InvalidScript("walk distance or speed out of range"));
        }
        if !(placement.heading_deg >= -90.0 && placement.heading_deg <= -0.0) {
            // the turn adds 180°; keeping the heading within ±90° keeps the
            // root rotation vector away from its ±π limits
            return Err(SynthError::InvalidScript("TUG start heading must lie in [-90°, 0°]"));
        }
        let walk = distance / speed;
        let rise = (1.0, 2.0);
        let walk_up = (2.0, 2.5);
        let turn = (walk_up.1 + walk, walk_up.1 + walk + 1.5);
        let walk_down = (turn.1 + walk, turn.1 + walk + 0.5);
        let sit = (walk_down.1, walk_down.1 + 1.0);
        let duration = sit.1 + 0.5;
        let t = TugTimeline { rise, walk_up, turn, walk_down, sit, speed };
        Self::build(def, MotionKind::Tug, duration, params, scale, placement, Some(t))
    }

    fn walking_weight(&self, t: f64) -> f64 {
        match (self.kind, &self.tug) {
            (MotionKind::Gait, _) => 1.0,
            (MotionKind::Tug, Some(tl)) => smoothstep(t, tl.walk_up) * (1.0 - smoothstep(t, tl.walk_down)),
            _ => 0.0,
        }
    }

    fn sitting_weight(&self, t: f64) -> f64 {
        match &self.tug {
            Some(tl) => (1.0 - smoothstep(t, tl.rise)) + smoothstep(t, tl.sit),
            None => 0.0,
        }
    }

    /// Heading in radians at `t`.
    pub fn heading(&self, t: f64) -> f64 {
        let base = self.placement.heading_deg.to_radians();
        match &self.tug {
            Some(tl) => base + core::f64::consts::PI * smoothstep(t, tl.turn),
            None => base,
        }
    }

    fn integrate_path(&mut self) {
        let n = libm::ceil(self.duration / PATH_DT) as usize + 2;
        let mut path = Vec::with_capacity(n);
        let mut p = self.placement.position;
        path.push(p);
        let speed = self.tug.map(|t| t.speed).unwrap_or(0.0);
        for i in 0..n - 1 {
            let tm = (i as f64 + 0.5) * PATH_DT;
            let v = speed * self.walking_weight(tm);
            let psi = self.heading(tm);
            p[0] += v * libm::cos(psi) * PATH_DT;
            p[1] += -v * libm::sin(psi) * PATH_DT;
            path.push(p);
        }
        self.path = path;
    }

    fn path_at(&self, t: f64) -> [f64; 2] {
        let x = (t / PATH_DT).clamp(0.0, (self.path.len() - 1) as f64);
        let i = (libm::floor(x) as usize).min(self.path.len() - 2);
        let a = x - i as f64;
        let (p, q) = (self.path[i], self.path[i + 1]);
        [p[0] * (1.0 - a) + q[0] * a, p[1] * (1.0 - a) + q[1] * a]
    }

    /// True pose at `t`.
    pub fn pose_at(&self, def: &SkeletonDefinition, t: f64) -> Pose {
        self.pose_with(def, t, self.walking_weight(t), self.sitting_weight(t))
    }

    fn pose_with(&self, def: &SkeletonDefinition, t: f64, w: f64, s: f64) -> Pose {
        let phase = self.stride_frequency * t;
        let mut pose = Pose::zeros();
        for (i, c) in self.curves.iter().enumerate() {
            pose.0[i] = c.offset + w * c.oscillation(phase);
        }
        for (name, target) in SIT_TARGETS {
            if let Some(i) = def.coord_index(name) {
                pose.0[i] = (1.0 - s) * pose.0[i] + s * target;
            }
        }
        let rot = def.root_rotation_coords();
        let tr = def.root_translation_coords();
        let psi = self.heading(t);
        let osc = rot.map(|i| pose.0[i].to_radians());
        let r = Rotation::from_axis_angle([0.0, 1.0, 0.0], psi + osc[1])
            .compose(&Rotation::from_axis_angle([0.0, 0.0, 1.0], osc[2]))
            .compose(&Rotation::from_axis_angle([1.0, 0.0, 0.0], osc[0]));
        let rv = r.to_rotvec();
        let local = tr.map(|i| pose.0[i]);
        let heading = Rotation::from_axis_angle([0.0, 1.0, 0.0], psi);
        let offset = heading.apply(local);
        let p = self.path_at(t);
        let drop = 0.45 * self.scale.scales[0] * s;
        let root = add([p[0], self.standing_height - drop, p[1]], offset);
        for k in 0..3 {
            pose.0[rot[k]] = rv[k];
            pose.0[tr[k]] = root[k];
        }
        for (i, j) in def.joints.iter().enumerate() {
            if j.limits.is_some() && !rot.contains(&i) {
                pose.0[i] = pose.0[i].to_radians();
            }
        }
        pose
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub sites: [usize; 2],
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub start: f64,
    pub end: f64,
    /// Multiplier on the keypoint noise inside the window.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma_2d_px: f64,
    pub sigma_3d_cm: f64,
    /// Log-normal spread of the per-keypoint noise multiplier.
    pub spread: f64,
    /// Site index ranges `[first, last]` with zero confidence in a window.
    pub occlusions: Vec<Occlusion>,
    pub degradations: Vec<Degradation>,
    pub orientation_deg: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma_2d_px: 0.0, sigma_3d_cm: 0.0, spread: 0.0, occlusions: vec![], degradations: vec![], orientation_deg: 0.0, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn noisy(sigma_2d_px: f64, sigma_3d_cm: f64, seed: u64) -> Self {
        Self { sigma_2d_px, sigma_3d_cm, spread: 0.3, orientation_deg: 1.0, seed, ..Self::default() }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let sig = [self.sigma_2d_px, self.sigma_3d_cm, self.spread, self.orientation_deg];
        if sig.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(SynthError::InvalidNoise("noise levels must be finite and non-negative"));
        }
        if self.occlusions.iter().any(|o| o.sites[0] > o.sites[1] || o.sites[1] >= NUM_SITES || !(o.end >= o.start)) {
            return Err(SynthError::InvalidNoise("occlusion windows need valid site ranges and times"));
        }
        if self.degradations.iter().any(|d| !(d.factor >= 0.0) || !(d.end >= d.start)) {
            return Err(SynthError::InvalidNoise("degradation windows need non-negative factors"));
        }
        Ok(())
    }
}

/// Camera attitude over time. The camera stays at the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CameraPath {
    /// Fixed attitude aimed at the subject's mean pelvis position.
    Static,
    /// Pans to keep the pelvis centered, with an optional hand-held wobble.
    Tracking { wobble_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSetup {
    pub intrinsics: CameraIntrinsics,
    pub path: CameraPath,
    pub frame_rate: f64,
    pub imu_rate: f64,
}

impl CameraSetup {
    /// A portrait phone camera at 30 fps with a 60 Hz orientation stream.
    pub fn phone(path: CameraPath) -> Self {
        let intrinsics = CameraIntrinsics { fx: 1400.0, fy: 1400.0, cx: 540.0, cy: 960.0, width: 1080, height: 1920 };
        Self { intrinsics, path, frame_rate: 30.0, imu_rate: 60.0 }
    }
}

/// Everything the generator knows about a synthetic trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
    /// Camera-to-world quaternions per frame.
    pub camera: Vec<[f64; 4]>,
    pub scale: BodyScale,
    pub events: Option<GaitEvents>,
    pub views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub observations: ObservationSet,
    pub truth: GroundTruth,
}

fn camera_at(script: &MotionScript, def: &SkeletonDefinition, path: &CameraPath, target: Vec3, t: f64) -> Rotation {
    let down = [0.0, -1.0, 0.0];
    match path {
        CameraPath::Static => look_rotation(target, down),
        CameraPath::Tracking { wobble_deg } => {
            let pose = script.pose_at(def, t);
            let p = def.root_translation_coords().map(|i| pose.0[i]);
            let aim = look_rotation(add(p, [0.0, 0.2 * script.scale.scales[0], 0.0]), down);
            let w = wobble_deg.to_radians();
            let tau = 2.0 * core::f64::consts::PI * t;
            let wobble = [w * libm::sin(0.7 * tau), w * libm::sin(1.1 * tau + 1.0), 0.5 * w * libm::sin(0.4 * tau + 2.0)];
            aim.compose(&Rotation::from_rotvec(wobble))
        }
    }
}

/// Renders a script into observations and ground truth.
pub fn generate(
    def: &SkeletonDefinition,
    script: &MotionScript,
    camera: &CameraSetup,
    noise: &NoiseSpec,
    name: &str,
) -> Result<Synthesized, SynthError> {
    noise.validate()?;
    camera.intrinsics.validate().map_err(|_| SynthError::InvalidScript("invalid camera intrinsics"))?;
    if !(camera.frame_rate > 0.0 && camera.imu_rate >= 0.0) {
        return Err(SynthError::InvalidScript("frame rate must be positive"));
    }
    let n = libm::floor(script.duration * camera.frame_rate) as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / camera.frame_rate).collect();
    let poses: Vec<Pose> = times.iter().map(|&t| script.pose_at(def, t)).collect();
    let markers = def.forward_kinematics_batch(&poses, &script.scale)?;
    let tr = def.root_translation_coords();
    let mut target = [0.0; 3];
    for p in &poses {
        target = add(target, scale(tr.map(|i| p.0[i]), 1.0 / n as f64));
    }
    let cams: Vec<Rotation> = times.iter().map(|&t| camera_at(script, def, &camera.path, target, t)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let spread = LogNormal::new(0.0, noise.spread).map_err(|_| SynthError::InvalidNoise("bad spread"))?;
    let k = &camera.intrinsics;
    let mut frames = Vec::with_capacity(n);
    for (fi, (&t, x)) in times.iter().zip(&markers).enumerate() {
        let inv = cams[fi].inverse();
        let factor: f64 = noise.degradations.iter().filter(|d| t >= d.start && t <= d.end).map(|d| d.factor).product();
        let mut kp2 = Vec::with_capacity(NUM_SITES);
        let mut kp3 = Vec::with_capacity(NUM_SITES);
        let mut conf = Vec::with_capacity(NUM_SITES);
        let mut in_view = true;
        for (j, xw) in x.0.iter().enumerate() {
            let xc = inv.apply(*xw);
            let g = if noise.spread > 0.0 { spread.sample(&mut rng) } else { 1.0 };
            let std_m = noise.sigma_3d_cm * 0.01 * g * factor;
            let n3 = [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)];
            let n2 = [unit.sample(&mut rng), unit.sample(&mut rng)];
            let uv = if xc[2] > MIN_DEPTH { project(xc, k).unwrap_or([0.0, 0.0]) } else { [0.0, 0.0] };
            if !(xc[2] > MIN_DEPTH) || !k.contains(uv) {
                in_view = false;
            }
            let s2 = noise.sigma_2d_px * g * factor;
            kp2.push([uv[0] + s2 * n2[0], uv[1] + s2 * n2[1]]);
            kp3.push(add(xc, scale(n3, std_m)));
            let occluded = noise.occlusions.iter().any(|o| j >= o.sites[0] && j <= o.sites[1] && t >= o.start && t <= o.end);
            let c = confidence_from_std(std_m * 1000.0).expect("non-negative std");
            conf.push(if occluded { 0.0 } else { c });
        }
        frames.push(Frame { time: t, keypoints_2d: kp2, keypoints_3d: kp3, confidence: conf, in_view });
    }
    let mut i = 0;
    while i < frames.len() {
        if frames[i].in_view {
            i += 1;
            continue;
        }
        let s = i;
        while i < frames.len() && !frames[i].in_view {
            i += 1;
        }
        let seconds = (i - s) as f64 / camera.frame_rate;
        if seconds > MAX_OUT_OF_VIEW_S {
            return Err(SynthError::OutOfFrustum { start: times[s], seconds });
        }
    }

    let mut orientations = Vec::new();
    if camera.imu_rate > 0.0 {
        let m = libm::floor(script.duration * camera.imu_rate) as usize + 1;
        let sigma = noise.orientation_deg.to_radians();
        for i in 0..m {
            let t = i as f64 / camera.imu_rate;
            let r = camera_at(script, def, &camera.path, target, t);
            let e = [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)];
            let r = r.compose(&Rotation::from_rotvec(scale(e, sigma)));
            orientations.push(OrientationSample { time: t, quat: r.to_quat() });
        }
    }

    let events = match script.kind {
        MotionKind::Standing => None,
        _ => Some(true_events(def, script)?),
    };
    let views = poses.iter().map(|p| view_classify(def, p, [0.0; 3])).collect();
    let observations = ObservationSet { name: String::from(name), intrinsics: *k, frames, orientations };
    let truth = GroundTruth { times, poses, camera: cams.iter().map(|r| r.to_quat()).collect(), scale: script.scale.clone(), events, views };
    Ok(Synthesized { observations, truth })
}

/// Gait events of a script located on a 1 kHz rendering of its truth.
pub fn true_events(def: &SkeletonDefinition, script: &MotionScript) -> Result<GaitEvents, SynthError> {
    let traj = truth_trajectory(def, script, EVENT_RATE_HZ);
    Ok(detect_events_kinematic(def, &script.scale, &traj, &DetectorConfig::default())?)
}

/// The script's poses sampled at `rate_hz` from time 0 to its end.
pub fn truth_trajectory(def: &SkeletonDefinition, script: &MotionScript, rate_hz: f64) -> Trajectory {
    let n = libm::floor(script.duration * rate_hz) as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / rate_hz).collect();
    let poses = times.iter().map(|&t| script.pose_at(def, t)).collect();
    Trajectory { times, poses }
}

/// Camera position relative to the subject, by 45° bearing quadrants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Back,
    Right,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewClass {
    Front,
    Back,
    Ipsilateral,
    Contralateral,
}

impl View {
    /// The view as seen from the given side of the body.
    pub fn relative_to(self, side: Foot) -> ViewClass {
        match (self, side) {
            (View::Front, _) => ViewClass::Front,
            (View::Back, _) => ViewClass::Back,
            (View::Right, Foot::Right) | (View::Left, Foot::Left) => ViewClass::Ipsilateral,
            _ => ViewClass::Contralateral,
        }
    }
}

/// Signed bearing (radians) of `camera` from the subject relative to the
/// pelvis heading, positive toward the subject's right.
pub fn camera_bearing(def: &SkeletonDefinition, pose: &Pose, camera: Vec3) -> f64 {
    let r = Rotation::from_rotvec(def.root_rotation_coords().map(|i| pose.0[i]));
    let fwd = r.apply([1.0, 0.0, 0.0]);
    let p = def.root_translation_coords().map(|i| pose.0[i]);
    let to_cam = [camera[0] - p[0], camera[2] - p[2]];
    let f = [fwd[0], fwd[2]];
    // right of heading (x, z) is (-z, x) rotated: for heading +x, right is +z
    let right = [-f[1], f[0]];
    let along = to_cam[0] * f[0] + to_cam[1] * f[1];
    let across = to_cam[0] * right[0] + to_cam[1] * right[1];
    libm::atan2(across, along)
}

/// Quadrant of the camera bearing relative to the subject's heading.
pub fn view_classify(def: &SkeletonDefinition, pose: &Pose, camera: Vec3) -> View {
    let b = camera_bearing(def, pose, camera).to_degrees();
    if b.abs() <= 45.0 {
        View::Front
    } else if b.abs() >= 135.0 {
        View::Back
    } else if b > 0.0 {
        View::Right
    } else {
        View::Left
    }
}

/// A body scale drawn around the neutral model, within ±`spread`.
pub fn random_scale(seed: u64, spread: f64) -> BodyScale {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = BodyScale::default();
    for v in &mut s.scales {
        *v = 1.0 + rng.random_range(-spread..=spread);
    }
    s
}
