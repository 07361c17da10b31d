//! Session fitting: reprojection, 3D keypoint and phone-orientation losses,
//! Adam with decoupled weight decay, and the joint optimization of one
//! trajectory network per trial with a single shared body scale.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{huber, AdError, NonFiniteNode, Pinhole, Tape, Tensor, Var, MIN_DEPTH};
use crate::geometry::{project, quat_angle_deg, quat_conj, quat_mul, sub, CameraIntrinsics, Rotation, Vec3};
use crate::implicit::{ImplicitError, NetConfig, TrajectoryNet, TIME_MARGIN};
use crate::skeleton::{BodyScale, SkeletonDefinition, SkeletonError, NUM_SCALE_GROUPS, NUM_SITES};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

const RAD_TO_DEG: f64 = 180.0 / core::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("session has no trials")]
    EmptySession,
    #[error("trial '{trial}' has {frames} usable frames; at least 2 are required")]
    TooFewFrames { trial: String, frames: usize },
    #[error("invalid observations in trial '{trial}': {msg}")]
    InvalidObservation { trial: String, msg: String },
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("standard deviation must be non-negative, got {0}")]
    NegativeStd(f64),
    #[error("non-finite loss in trial '{trial}' at iteration {iteration}: first non-finite value at {node}")]
    NonFinite { trial: String, iteration: usize, node: NonFiniteNode },
    #[error(transparent)]
    Tape(#[from] AdError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Implicit(#[from] ImplicitError),
}

/// One video frame of detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub time: f64,
    /// Pixel coordinates, one per site.
    pub keypoints_2d: Vec<[f64; 2]>,
    /// Camera-frame positions in meters, one per site.
    pub keypoints_3d: Vec<Vec3>,
    pub confidence: Vec<f64>,
    /// False when the person is not fully in view; such frames are skipped.
    pub in_view: bool,
}

/// One phone orientation sample: camera-to-world quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationSample {
    pub time: f64,
    pub quat: [f64; 4],
}

/// All observations of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    pub orientations: Vec<OrientationSample>,
}

impl ObservationSet {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |msg: String| FitError::InvalidObservation { trial: self.name.clone(), msg };
        self.intrinsics.validate().map_err(|e| bad(alloc::format!("{e}")))?;
        for (i, f) in self.frames.iter().enumerate() {
            if f.keypoints_2d.len() != NUM_SITES || f.keypoints_3d.len() != NUM_SITES || f.confidence.len() != NUM_SITES {
                return Err(bad(alloc::format!("frame {i} does not have {NUM_SITES} keypoints")));
            }
            if !f.time.is_finite() || (i > 0 && !(f.time > self.frames[i - 1].time)) {
                return Err(bad(alloc::format!("frame {i} timestamp is not strictly increasing")));
            }
            if f.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(bad(alloc::format!("frame {i} has a confidence outside [0, 1]")));
            }
            let finite = f.keypoints_2d.iter().flatten().chain(f.keypoints_3d.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return Err(bad(alloc::format!("frame {i} has non-finite keypoints")));
            }
        }
        for (i, s) in self.orientations.iter().enumerate() {
            if !s.time.is_finite() || (i > 0 && !(s.time > self.orientations[i - 1].time)) {
                return Err(bad(alloc::format!("orientation sample {i} timestamp is not strictly increasing")));
            }
            Rotation::from_quat(s.quat).map_err(|e| bad(alloc::format!("orientation sample {i}: {e}")))?;
        }
        Ok(())
    }

    /// Indices of frames used for fitting.
    pub fn usable_frames(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].in_view).collect()
    }

    /// `(start, duration)` spanned by the usable frames.
    pub fn span(&self) -> Option<(f64, f64)> {
        let idx = self.usable_frames();
        let (a, b) = (*idx.first()?, *idx.last()?);
        let (t0, t1) = (self.frames[a].time, self.frames[b].time);
        (t1 > t0).then_some((t0, t1 - t0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lambda_3d: f64,
    pub lambda_2d: f64,
    pub lambda_phone: f64,
    /// Huber threshold of the 3D loss, centimeters.
    pub delta_3d_cm: f64,
    /// Huber threshold of the reprojection loss, pixels.
    pub delta_2d_px: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub imu_batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Weight of the mean squared site offset (cm²) added to the loss.
    pub offset_regularization: f64,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_3d: 1.0,
            lambda_2d: 0.1,
            lambda_phone: 1.0,
            delta_3d_cm: 10.0,
            delta_2d_px: 5.0,
            iterations: 2000,
            batch_size: 300,
            imu_batch_size: 100,
            lr_start: 3e-3,
            lr_end: 3e-5,
            weight_decay: 1e-5,
            offset_regularization: 10.0,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl FitConfig {
    /// The long schedule: 25,000 iterations decaying from 1e-3 to 1e-6.
    pub fn full_scale() -> Self {
        Self { iterations: 25_000, lr_start: 1e-3, lr_end: 1e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let lambdas = [self.lambda_3d, self.lambda_2d, self.lambda_phone];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(FitError::InvalidConfig("loss weights must be finite and non-negative"));
        }
        if !(self.delta_3d_cm > 0.0 && self.delta_2d_px > 0.0) {
            return Err(FitError::InvalidConfig("huber thresholds must be positive"));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(FitError::InvalidConfig("iterations and batch size must be at least 1"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) || !self.lr_start.is_finite() || !self.lr_end.is_finite() {
            return Err(FitError::InvalidConfig("learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.offset_regularization >= 0.0) {
            return Err(FitError::InvalidConfig("weight decay and offset regularization must be non-negative"));
        }
        self.net.validate().map_err(|_| FitError::InvalidConfig("invalid network configuration"))
    }
}

/// Keypoint confidence from a detector's positional standard deviation:
/// a logistic falling through one half at 30 mm with a 10 mm width.
pub fn confidence_from_std(std_mm: f64) -> Result<f64, FitError> {
    if !(std_mm >= 0.0) {
        return Err(FitError::NegativeStd(std_mm));
    }
    Ok(1.0 / (1.0 + libm::exp(-(30.0 - std_mm) / 10.0)))
}

/// Learning rate at `iter`, geometrically interpolated from start to end.
pub fn lr_at(iter: usize, config: &FitConfig) -> f64 {
    if config.iterations <= 1 {
        return config.lr_start;
    }
    let f = iter.min(config.iterations - 1) as f64 / (config.iterations - 1) as f64;
    config.lr_start * libm::pow(config.lr_end / config.lr_start, f)
}

/// Weighted sum of the three loss components.
pub fn total_loss(components: [f64; 3], config: &FitConfig) -> f64 {
    config.lambda_3d * components[0] + config.lambda_2d * components[1] + config.lambda_phone * components[2]
}

/// `(1/J) Σ_j c_j · huber(e_j, δ)` for one frame of residual magnitudes.
pub fn weighted_huber_mean(residuals: &[f64], confidence: &[f64], delta: f64) -> f64 {
    let s: f64 = residuals.iter().zip(confidence).map(|(e, c)| c * huber(*e, delta)).sum();
    s / residuals.len() as f64
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One Adam update with decoupled weight decay.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) {
    assert!(params.len() == grads.len() && params.len() == state.m.len(), "adam_step: shape mismatch");
    state.step += 1;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, state.step as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, state.step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * (mh / (libm::sqrt(vh) + ADAM_EPS) + weight_decay * params[i]);
    }
}

/// 3D keypoint loss on a tape.
///
/// `markers` is `[B,J,3]` world-frame model markers, `r_nc` `[B,3,3]`
/// camera-to-world rotations, `obs_cam` the `[B,J,3]` camera-frame
/// observations and `conf` the `[B,J]` confidences. Both point sets are
/// centered on the mean of the joints with non-zero confidence before
/// comparison; distances are in centimeters.
pub fn loss_3d(tape: &mut Tape, markers: Var, r_nc: Var, obs_cam: &[f64], conf: &[f64], delta_cm: f64) -> Result<Var, FitError> {
    let shape = tape.shape(markers).to_vec();
    let (b, j) = (shape[0], shape[1]);
    let obs = tape.constant(Tensor { shape: vec![b, j, 3], data: obs_cam.to_vec() });
    let obs_world = tape.batch_matmul(obs, r_nc, false, true)?;
    let mut mask = vec![0.0; b * j];
    let mut inv_count = vec![0.0; b];
    for f in 0..b {
        let n = (0..j).filter(|&k| conf[f * j + k] > 0.0).count();
        for k in 0..j {
            mask[f * j + k] = if conf[f * j + k] > 0.0 { 1.0 } else { 0.0 };
        }
        inv_count[f] = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    }
    let mask = tape.constant(Tensor { shape: vec![b, j, 1], data: mask });
    let inv_count = tape.constant(Tensor { shape: vec![b, 1, 1], data: inv_count });
    let centered = |tape: &mut Tape, x: Var| -> Result<Var, FitError> {
        let m = tape.mul(x, mask)?;
        let s = tape.sum_axis(m, 1)?;
        let s = tape.reshape(s, &[b, 1, 3])?;
        let mean = tape.mul(s, inv_count)?;
        Ok(tape.sub(x, mean)?)
    };
    let mc = centered(tape, markers)?;
    let oc = centered(tape, obs_world)?;
    let d = tape.sub(mc, oc)?;
    let d = tape.scale(d, 100.0);
    let e = tape.norm_last(d)?;
    let h = tape.huber(e, delta_cm)?;
    let c = tape.constant(Tensor { shape: vec![b, j], data: conf.to_vec() });
    let w = tape.mul(h, c)?;
    let s = tape.sum(w);
    Ok(tape.scale(s, 1.0 / (b * j) as f64))
}

/// Reprojection loss on a tape; observed pixels `obs_px` are `[B,J,2]`.
/// Model points at or behind the camera plane are excluded.
pub fn loss_2d(
    tape: &mut Tape,
    markers: Var,
    r_nc: Var,
    obs_px: &[f64],
    conf: &[f64],
    k: &CameraIntrinsics,
    delta_px: f64,
) -> Result<Var, FitError> {
    let shape = tape.shape(markers).to_vec();
    let (b, j) = (shape[0], shape[1]);
    let x_cam = tape.batch_matmul(markers, r_nc, false, false)?;
    let weight: Vec<f64> = tape
        .value(x_cam)
        .chunks(3)
        .zip(conf)
        .map(|(p, c)| if p[2] < MIN_DEPTH { 0.0 } else { *c })
        .collect();
    let uv = tape.project(x_cam, Pinhole { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy })?;
    let obs = tape.constant(Tensor { shape: vec![b, j, 2], data: obs_px.to_vec() });
    let d = tape.sub(uv, obs)?;
    let e = tape.norm_last(d)?;
    let h = tape.huber(e, delta_px)?;
    let c = tape.constant(Tensor { shape: vec![b, j], data: weight });
    let w = tape.mul(h, c)?;
    let s = tape.sum(w);
    Ok(tape.scale(s, 1.0 / (b * j) as f64))
}

/// Mean angle in degrees between predicted camera orientations (rotation
/// vectors `[B,3]`) and measured quaternions.
pub fn loss_phone(tape: &mut Tape, predicted: Var, measured: &[[f64; 4]]) -> Result<Var, FitError> {
    let b = measured.len();
    let q = tape.rotvec_to_quat(predicted)?;
    let q = tape.reshape(q, &[b, 4, 1])?;
    // conj(p) ⊗ m as a linear map of p
    let mut mats = Vec::with_capacity(16 * b);
    for m in measured {
        let r = [
            [m[0], -m[1], -m[2], -m[3]],
            [m[1], m[0], m[3], -m[2]],
            [m[2], -m[3], m[0], m[1]],
            [m[3], m[2], -m[1], m[0]],
        ];
        for row in r {
            mats.extend_from_slice(&[row[0], -row[1], -row[2], -row[3]]);
        }
    }
    let a = tape.constant(Tensor { shape: vec![b, 4, 4], data: mats });
    let rel = tape.batch_matmul(a, q, false, false)?;
    let rel = tape.reshape(rel, &[b, 4])?;
    let w = tape.index_select(rel, 1, &[0])?;
    let w = tape.reshape(w, &[b])?;
    let w = tape.abs(w);
    let v = tape.index_select(rel, 1, &[1, 2, 3])?;
    let v = tape.norm_last(v)?;
    let angle = tape.atan2(v, w)?;
    let m = tape.mean(angle)?;
    Ok(tape.scale(m, 2.0 * RAD_TO_DEG))
}

/// Runs independent per-trial work, returning results in trial order.
pub trait TrialExecutor {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync;
}

/// Runs trials one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl TrialExecutor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub loss_3d: f64,
    pub loss_2d: f64,
    pub loss_phone: f64,
}

/// Loss and gradients of one trial at one iteration.
#[derive(Debug, Clone)]
pub struct TrialStep {
    pub loss: LossRecord,
    pub net_grads: Vec<Vec<f64>>,
    pub scale_grads: Vec<f64>,
    pub offset_grads: Vec<f64>,
}

/// The fitted state of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFit {
    pub nets: Vec<TrajectoryNet>,
    pub scale: BodyScale,
    pub history: Vec<LossRecord>,
}

fn mix_seed(seed: u64, trial: usize) -> u64 {
    let mut z = seed ^ (trial as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampler for the batch of one trial at one iteration.
fn batch_rng(seed: u64, trial: usize, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, trial));
    rng.set_stream(iteration as u64);
    rng
}

fn nearest(times: &[f64], t: f64) -> usize {
    let i = times.partition_point(|x| *x < t);
    if i == 0 {
        0
    } else if i == times.len() || t - times[i - 1] <= times[i] - t {
        i - 1
    } else {
        i
    }
}

/// Frame indices and IMU sample indices drawn for one trial and iteration.
pub fn sample_batch(obs: &ObservationSet, net: &TrajectoryNet, config: &FitConfig, trial: usize, iteration: usize) -> (Vec<usize>, Vec<usize>) {
    let usable = obs.usable_frames();
    let times: Vec<f64> = usable.iter().map(|&i| obs.frames[i].time).collect();
    let mut rng = batch_rng(config.seed, trial, iteration);
    let (t0, t1) = (times[0], times[times.len() - 1]);
    let frames = (0..config.batch_size).map(|_| usable[nearest(&times, rng.random_range(t0..=t1))]).collect();
    let imu: Vec<usize> = (0..obs.orientations.len())
        .filter(|&i| {
            let t = obs.orientations[i].time;
            t >= net.start() - TIME_MARGIN && t <= net.end() + TIME_MARGIN
        })
        .collect();
    let picks = if imu.is_empty() || config.lambda_phone == 0.0 || config.imu_batch_size == 0 {
        Vec::new()
    } else {
        (0..config.imu_batch_size).map(|_| imu[rng.random_range(0..imu.len())]).collect()
    };
    (frames, picks)
}

/// Total loss of one trial on a fresh tape, with gradients for the network
/// parameters and the body scale.
pub fn trial_step(
    def: &SkeletonDefinition,
    obs: &ObservationSet,
    net: &TrajectoryNet,
    scale: &BodyScale,
    config: &FitConfig,
    trial: usize,
    iteration: usize,
) -> Result<TrialStep, FitError> {
    let (frames, imu) = sample_batch(obs, net, config, trial, iteration);
    let b = frames.len();
    let mut times: Vec<f64> = frames.iter().map(|&i| obs.frames[i].time).collect();
    times.extend(imu.iter().map(|&i| obs.orientations[i].time));

    let mut tape = Tape::new();
    let params = net.record_params(&mut tape);
    for v in &params.0 {
        tape.label(*v, "network parameter");
    }
    let scales = tape.leaf(Tensor { shape: vec![NUM_SCALE_GROUPS], data: scale.scales.to_vec() });
    let scales = tape.label(scales, "segment scales");
    let offsets = tape.leaf(Tensor { shape: vec![NUM_SITES, 3], data: scale.offsets.iter().flatten().copied().collect() });
    let offsets = tape.label(offsets, "site offsets");

    let out = net.forward_tape(&mut tape, &params, &times)?;
    let video_rows: Vec<usize> = (0..b).collect();
    let pose = tape.index_select(out.pose, 0, &video_rows)?;
    let rv = tape.index_select(out.orientation, 0, &video_rows)?;
    let r_nc = tape.rotvec_to_matrix(rv)?;
    let markers = def.forward_kinematics_tape(&mut tape, pose, scales, offsets)?;

    let mut conf = Vec::with_capacity(b * NUM_SITES);
    let mut obs3 = Vec::with_capacity(b * NUM_SITES * 3);
    let mut obs2 = Vec::with_capacity(b * NUM_SITES * 2);
    for &i in &frames {
        let f = &obs.frames[i];
        conf.extend_from_slice(&f.confidence);
        obs3.extend(f.keypoints_3d.iter().flatten());
        obs2.extend(f.keypoints_2d.iter().flatten());
    }
    let l3 = loss_3d(&mut tape, markers, r_nc, &obs3, &conf, config.delta_3d_cm)?;
    let l3 = tape.label(l3, "3d keypoint loss");
    let l2 = loss_2d(&mut tape, markers, r_nc, &obs2, &conf, &obs.intrinsics, config.delta_2d_px)?;
    let l2 = tape.label(l2, "reprojection loss");
    let a = tape.scale(l3, config.lambda_3d);
    let c = tape.scale(l2, config.lambda_2d);
    let mut total = tape.add(a, c)?;
    let mut phone = 0.0;
    if !imu.is_empty() {
        let rows: Vec<usize> = (b..b + imu.len()).collect();
        let rv_imu = tape.index_select(out.orientation, 0, &rows)?;
        let measured: Vec<[f64; 4]> = imu.iter().map(|&i| obs.orientations[i].quat).collect();
        let lp = loss_phone(&mut tape, rv_imu, &measured)?;
        let lp = tape.label(lp, "phone orientation loss");
        phone = tape.scalar_value(lp);
        let d = tape.scale(lp, config.lambda_phone);
        total = tape.add(total, d)?;
    }
    let value = tape.scalar_value(total);
    if !value.is_finite() {
        let node = tape.first_non_finite().unwrap_or(NonFiniteNode { node: total.index(), op: "total", label: None });
        return Err(FitError::NonFinite { trial: obs.name.clone(), iteration, node });
    }
    let grads = tape.backward(total)?;
    let loss = LossRecord { total: value, loss_3d: tape.scalar_value(l3), loss_2d: tape.scalar_value(l2), loss_phone: phone };
    Ok(TrialStep {
        loss,
        net_grads: params.0.iter().map(|v| grads.get_or_zeros(&tape, *v)).collect(),
        scale_grads: grads.get_or_zeros(&tape, scales),
        offset_grads: grads.get_or_zeros(&tape, offsets),
    })
}

/// Adds the gradient of `weight · mean_sites(‖offset_cm‖²)` to `grad` and
/// returns the penalty.
pub fn offset_penalty(offsets: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let n = (offsets.len() / 3) as f64;
    let mut p = 0.0;
    for (o, g) in offsets.iter().zip(grad.iter_mut()) {
        p += 1e4 * o * o;
        *g += weight * 2e4 * o / n;
    }
    weight * p / n
}

/// Checks observations and builds the initial networks of a session.
pub fn init_session(def: &SkeletonDefinition, trials: &[ObservationSet], config: &FitConfig) -> Result<Vec<TrajectoryNet>, FitError> {
    config.validate()?;
    if trials.is_empty() {
        return Err(FitError::EmptySession);
    }
    let mut nets = Vec::with_capacity(trials.len());
    for (k, obs) in trials.iter().enumerate() {
        obs.validate()?;
        let usable = obs.usable_frames().len();
        let Some((start, duration)) = obs.span().filter(|_| usable >= 2) else {
            return Err(FitError::TooFewFrames { trial: obs.name.clone(), frames: usable });
        };
        let quats: Vec<[f64; 4]> = obs.orientations.iter().map(|s| s.quat).collect();
        nets.push(TrajectoryNet::init_for_trial(def, config.net, start, duration, &quats, mix_seed(config.seed, k))?);
    }
    Ok(nets)
}

/// Loss and gradients of the whole session at one iteration's batches.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionGradients {
    pub record: LossRecord,
    /// Per trial, per parameter tensor.
    pub nets: Vec<Vec<Vec<f64>>>,
    pub scales: Vec<f64>,
    /// Flattened `[87, 3]`.
    pub offsets: Vec<f64>,
}

/// Sums trial losses and the offset penalty. The shared scale gradients
/// accumulate in trial order whatever the executor.
pub fn session_gradients<E: TrialExecutor>(
    def: &SkeletonDefinition,
    trials: &[ObservationSet],
    nets: &[TrajectoryNet],
    scale: &BodyScale,
    config: &FitConfig,
    iteration: usize,
    executor: &E,
) -> Result<SessionGradients, FitError> {
    let steps = executor.map(trials.len(), |k| trial_step(def, &trials[k], &nets[k], scale, config, k, iteration));
    let mut out = SessionGradients {
        record: LossRecord::default(),
        nets: Vec::with_capacity(trials.len()),
        scales: vec![0.0; NUM_SCALE_GROUPS],
        offsets: vec![0.0; NUM_SITES * 3],
    };
    for step in steps {
        let step = step?;
        out.record.total += step.loss.total;
        out.record.loss_3d += step.loss.loss_3d;
        out.record.loss_2d += step.loss.loss_2d;
        out.record.loss_phone += step.loss.loss_phone;
        out.scales.iter_mut().zip(&step.scale_grads).for_each(|(a, g)| *a += g);
        out.offsets.iter_mut().zip(&step.offset_grads).for_each(|(a, g)| *a += g);
        out.nets.push(step.net_grads);
    }
    let flat: Vec<f64> = scale.offsets.iter().flatten().copied().collect();
    out.record.total += offset_penalty(&flat, config.offset_regularization, &mut out.offsets);
    Ok(out)
}

/// Fits one network per trial and a shared body scale.
pub fn fit_session<E: TrialExecutor>(
    def: &SkeletonDefinition,
    trials: &[ObservationSet],
    config: &FitConfig,
    initial_scale: &BodyScale,
    executor: &E,
) -> Result<SessionFit, FitError> {
    fit_session_with(def, trials, config, initial_scale, executor, |_, _| {})
}

/// [`fit_session`] reporting each iteration's losses to `on_iteration`.
pub fn fit_session_with<E: TrialExecutor>(
    def: &SkeletonDefinition,
    trials: &[ObservationSet],
    config: &FitConfig,
    initial_scale: &BodyScale,
    executor: &E,
    mut on_iteration: impl FnMut(usize, &LossRecord),
) -> Result<SessionFit, FitError> {
    let nets = init_session(def, trials, config)?;
    initial_scale.validate()?;
    let mut fit = SessionFit { nets, scale: initial_scale.clone(), history: Vec::with_capacity(config.iterations) };
    let mut net_states: Vec<Vec<AdamState>> =
        fit.nets.iter().map(|n| n.param_slices().iter().map(|p| AdamState::new(p.len())).collect()).collect();
    let mut scale_state = AdamState::new(NUM_SCALE_GROUPS);
    let mut offset_state = AdamState::new(NUM_SITES * 3);

    for iteration in 0..config.iterations {
        let lr = lr_at(iteration, config);
        let g = session_gradients(def, trials, &fit.nets, &fit.scale, config, iteration, executor)?;
        for ((net, grads), states) in fit.nets.iter_mut().zip(&g.nets).zip(&mut net_states) {
            for ((p, g), s) in net.param_slices_mut().into_iter().zip(grads).zip(states) {
                adam_step(p, g, s, lr, config.weight_decay);
            }
        }
        let mut flat: Vec<f64> = fit.scale.offsets.iter().flatten().copied().collect();
        adam_step(&mut fit.scale.scales, &g.scales, &mut scale_state, lr, 0.0);
        adam_step(&mut flat, &g.offsets, &mut offset_state, lr, 0.0);
        for (o, c) in fit.scale.offsets.iter_mut().zip(flat.chunks(3)) {
            *o = [c[0], c[1], c[2]];
        }
        fit.scale.clamp();
        on_iteration(iteration, &g.record);
        fit.history.push(g.record);
    }
    Ok(fit)
}

/// Confidence-weighted mean reprojection error (px) and centered 3D error
/// (cm) of a fitted trial over its usable frames.
pub fn residuals(def: &SkeletonDefinition, net: &TrajectoryNet, scale: &BodyScale, obs: &ObservationSet) -> Result<(f64, f64), FitError> {
    let (mut e2, mut w2, mut e3, mut w3) = (0.0, 0.0, 0.0, 0.0);
    for i in obs.usable_frames() {
        let f = &obs.frames[i];
        let (pose, r) = net.evaluate(f.time)?;
        let x = def.forward_kinematics(&pose, scale)?;
        let obs_world: Vec<Vec3> = f.keypoints_3d.iter().map(|p| r.apply(*p)).collect();
        let visible: Vec<usize> = (0..NUM_SITES).filter(|&j| f.confidence[j] > 0.0).collect();
        if visible.is_empty() {
            continue;
        }
        let mean = |pts: &[Vec3]| {
            let mut m = [0.0; 3];
            for &j in &visible {
                for k in 0..3 {
                    m[k] += pts[j][k] / visible.len() as f64;
                }
            }
            m
        };
        let (mm, mo) = (mean(&x.0), mean(&obs_world));
        let inv = r.inverse();
        for &j in &visible {
            let c = f.confidence[j];
            let d = sub(sub(x.0[j], mm), sub(obs_world[j], mo));
            e3 += c * 100.0 * libm::sqrt(d.iter().map(|v| v * v).sum());
            w3 += c;
            if let Ok(uv) = project(inv.apply(x.0[j]), &obs.intrinsics) {
                e2 += c * libm::hypot(uv[0] - f.keypoints_2d[j][0], uv[1] - f.keypoints_2d[j][1]);
                w2 += c;
            }
        }
    }
    let avg = |e: f64, w: f64| if w > 0.0 { e / w } else { 0.0 };
    Ok((avg(e2, w2), avg(e3, w3)))
}

/// Angle in degrees between two unit quaternions.
pub fn orientation_error_deg(predicted: [f64; 4], measured: [f64; 4]) -> f64 {
    quat_angle_deg(quat_mul(quat_conj(predicted), measured)).unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_curve() {
        assert_eq!(confidence_from_std(30.0).unwrap(), 0.5);
        assert!((confidence_from_std(0.0).unwrap() - 0.952_574_126_822_433_4).abs() < 1e-12);
        assert!((confidence_from_std(40.0).unwrap() - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!(matches!(confidence_from_std(-1.0), Err(FitError::NegativeStd(_))));
    }

    #[test]
    fn learning_rate_schedule() {
        let mut c = FitConfig::full_scale();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert!((lr_at(24_999, &c) - 1e-6).abs() < 1e-18);
        // halfway in log space: sqrt(1e-3 * 1e-6)
        let mid = 1e-3 * (1e-3f64).powf(12_500.0 / 24_999.0);
        assert!((lr_at(12_500, &c) - mid).abs() < 1e-15);
        assert!((lr_at(12_500, &c) - 3.162e-5).abs() < 1e-8);
        c.iterations = 1;
        assert_eq!(lr_at(0, &c), 1e-3);
    }

    #[test]
    fn weighted_sum_of_components() {
        let c = FitConfig::default();
        assert!((total_loss([1.0, 2.0, 3.0], &c) - 4.2).abs() < 1e-15);
        assert_eq!(total_loss([0.0; 3], &c), 0.0);
    }

    #[test]
    fn huber_mean_examples() {
        let mut e = vec![0.0; 87];
        let c = vec![1.0; 87];
        e[4] = 5.0;
        assert!((weighted_huber_mean(&e, &c, 10.0) - 12.5 / 87.0).abs() < 1e-15);
        e[4] = 3.0;
        assert!((weighted_huber_mean(&e, &c, 5.0) - 4.5 / 87.0).abs() < 1e-15);
        e[4] = 50.0;
        assert!((weighted_huber_mean(&e, &c, 5.0) - 5.0 * 47.5 / 87.0).abs() < 1e-15);
        assert_eq!(weighted_huber_mean(&e, &vec![0.0; 87], 5.0), 0.0);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 1e-3, 0.0);
        // bias-corrected first step moves by lr·g/(|g|+ε)
        assert!((p[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        let mut q = vec![0.3, -0.2];
        let mut s = AdamState::new(2);
        adam_step(&mut q, &[0.0, 0.0], &mut s, 1e-3, 0.0);
        assert_eq!(q, vec![0.3, -0.2]);
        adam_step(&mut q, &[0.0, 0.0], &mut s, 1e-3, 1e-5);
        assert!((q[0] - 0.3 * (1.0 - 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn nearest_frame_lookup() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(nearest(&t, -1.0), 0);
        assert_eq!(nearest(&t, 0.4), 0);
        assert_eq!(nearest(&t, 0.6), 1);
        assert_eq!(nearest(&t, 5.0), 2);
    }

    #[test]
    fn phone_loss_examples() {
        let mut tape = Tape::new();
        let q = Rotation::from_rotvec([0.2, 0.5, -0.1]);
        let rv = q.to_rotvec();
        let off = Rotation::from_axis_angle([0.0, 0.6, 0.8], 10f64.to_radians());
        let pred = tape.constant(Tensor { shape: vec![2, 3], data: [rv, rv].concat() });
        let l = loss_phone(&mut tape, pred, &[q.to_quat(), q.compose(&off).to_quat()]).unwrap();
        assert!((tape.scalar_value(l) - 5.0).abs() < 1e-9);
        let l = loss_phone(&mut tape, pred, &[q.compose(&off).to_quat(), q.compose(&off).to_quat().map(|v| -v)]).unwrap();
        assert!((tape.scalar_value(l) - 10.0).abs() < 1e-9);
        let a = orientation_error_deg(q.to_quat(), q.compose(&off).to_quat());
        assert!((a - 10.0).abs() < 1e-9);
    }
}
