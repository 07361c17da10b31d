//! Implicit trajectory function: a small MLP over a sinusoidal encoding of
//! time whose outputs are mapped into joint limits, giving the pose and the
//! camera orientation at any instant of a trial.

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::geometry::{Rotation, Vec3};
use crate::skeleton::{JointKind, Pose, SkeletonDefinition, NUM_COORDS};

/// Pose channels followed by the camera-orientation rotation vector.
pub const NUM_OUTPUTS: usize = NUM_COORDS + 3;

/// How far outside the trial span the net may be queried.
pub const TIME_MARGIN: f64 = 0.5;

/// Keeps mapped outputs strictly inside their limits even when tanh saturates.
const RANGE_SHRINK: f64 = 1.0 - 1e-9;

/// Bound on each camera rotation-vector component.
const ORIENTATION_RANGE: f64 = core::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImplicitError {
    #[error("time {t} outside trial span [{start}, {end}] plus margin")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },
    #[error("invalid network configuration: {0}")]
    Config(&'static str),
    #[error("parameter layout mismatch")]
    Layout,
    #[error(transparent)]
    Tape(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub bands: usize,
    /// Meters of pelvis translation per unit of raw network output.
    pub translation_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden_layers: 4, width: 256, bands: 8, translation_scale: 5.0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), ImplicitError> {
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(ImplicitError::Config("hidden layers and width must be positive"));
        }
        if self.bands == 0 || self.bands > 30 {
            return Err(ImplicitError::Config("band count must be in 1..=30"));
        }
        if !(self.translation_scale > 0.0) || !self.translation_scale.is_finite() {
            return Err(ImplicitError::Config("translation scale must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal time encoding with base angular frequency `2π / duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub bands: usize,
    pub start: f64,
    pub duration: f64,
}

impl PositionalEncoding {
    pub fn len(&self) -> usize {
        2 * self.bands + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Appends the encoding of `t` to `out`.
    pub fn encode_into(&self, t: f64, out: &mut Vec<f64>) {
        let tau = (t - self.start) / self.duration;
        let mut w = 2.0 * core::f64::consts::PI * tau;
        for _ in 0..self.bands {
            out.push(libm::sin(w));
            out.push(libm::cos(w));
            w *= 2.0;
        }
        out.push(tau);
    }

    pub fn encode(&self, t: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        self.encode_into(t, &mut v);
        v
    }
}

/// Weights `[in, out]` and bias `[out]` of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-channel output map `out = center + half·tanh(raw)` for bounded
/// channels and `out = scale·raw` for pelvis translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub center: Vec<f64>,
    pub half: Vec<f64>,
    pub linear: Vec<f64>,
}

impl OutputMap {
    pub fn new(def: &SkeletonDefinition, translation_scale: f64) -> Self {
        let mut center = vec![0.0; NUM_OUTPUTS];
        let mut half = vec![0.0; NUM_OUTPUTS];
        let mut linear = vec![0.0; NUM_OUTPUTS];
        for (i, j) in def.joints.iter().enumerate() {
            match j.limits {
                Some((lo, hi)) if j.kind != JointKind::Translational => {
                    center[i] = 0.5 * (lo + hi);
                    half[i] = 0.5 * (hi - lo) * RANGE_SHRINK;
                }
                _ => linear[i] = translation_scale,
            }
        }
        for i in NUM_COORDS..NUM_OUTPUTS {
            half[i] = ORIENTATION_RANGE * RANGE_SHRINK;
        }
        Self { center, half, linear }
    }

    pub fn apply(&self, raw: &[f64], out: &mut [f64]) {
        for i in 0..NUM_OUTPUTS {
            out[i] = if self.half[i] != 0.0 { self.center[i] + self.half[i] * libm::tanh(raw[i]) } else { self.linear[i] * raw[i] };
        }
    }

    /// Raw output that maps to `value`, clamped away from tanh saturation.
    pub fn inverse(&self, i: usize, value: f64) -> f64 {
        if self.half[i] != 0.0 {
            let y = ((value - self.center[i]) / self.half[i]).clamp(-0.999_999, 0.999_999);
            libm::atanh(y)
        } else {
            value / self.linear[i]
        }
    }
}

/// The trajectory network of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNet {
    pub config: NetConfig,
    pub encoding: PositionalEncoding,
    pub layers: Vec<Layer>,
    pub map: OutputMap,
}

/// Handles to the network parameters recorded on a tape, in layer order
/// `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone)]
pub struct NetVars(pub Vec<Var>);

/// Time-batched network outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NetOutputs {
    /// `[B, 40]`
    pub pose: Var,
    /// `[B, 3]` camera-to-world rotation vectors
    pub orientation: Var,
}

impl TrajectoryNet {
    /// Randomly initialized network (Glorot uniform hidden layers, zero
    /// output weights) whose constant output is a neutral pose.
    pub fn new(def: &SkeletonDefinition, config: NetConfig, start: f64, duration: f64, seed: u64) -> Result<Self, ImplicitError> {
        config.validate()?;
        if !(duration > 0.0) || !duration.is_finite() || !start.is_finite() {
            return Err(ImplicitError::Config("trial span must be finite with positive duration"));
        }
        let encoding = PositionalEncoding { bands: config.bands, start, duration };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![encoding.len()];
        sizes.extend(core::iter::repeat_n(config.width, config.hidden_layers));
        sizes.push(NUM_OUTPUTS);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for k in 0..sizes.len() - 1 {
            let (i, o) = (sizes[k], sizes[k + 1]);
            let last = k == sizes.len() - 2;
            let bound = libm::sqrt(6.0 / (i + o) as f64);
            let weight = if last { vec![0.0; i * o] } else { (0..i * o).map(|_| rng.random_range(-bound..bound)).collect() };
            layers.push(Layer { inputs: i, outputs: o, weight, bias: vec![0.0; o] });
        }
        let map = OutputMap::new(def, config.translation_scale);
        let mut net = Self { config, encoding, layers, map };
        let neutral: Vec<f64> = (0..NUM_OUTPUTS).map(|i| net.map.inverse(i, 0.0)).collect();
        net.output_bias_mut().copy_from_slice(&neutral);
        Ok(net)
    }

    /// Rebuilds a network from stored layers, checking that their shapes
    /// chain from the encoding to the output head.
    pub fn from_parts(def: &SkeletonDefinition, config: NetConfig, encoding: PositionalEncoding, layers: Vec<Layer>) -> Result<Self, ImplicitError> {
        config.validate()?;
        if encoding.bands != config.bands || !(encoding.duration > 0.0) || layers.len() != config.hidden_layers + 1 {
            return Err(ImplicitError::Layout);
        }
        let mut inputs = encoding.len();
        for (k, l) in layers.iter().enumerate() {
            let outputs = if k == layers.len() - 1 { NUM_OUTPUTS } else { config.width };
            if l.inputs != inputs || l.outputs != outputs || l.weight.len() != inputs * outputs || l.bias.len() != outputs {
                return Err(ImplicitError::Layout);
            }
            inputs = outputs;
        }
        Ok(Self { config, encoding, layers, map: OutputMap::new(def, config.translation_scale) })
    }

    /// Network for a trial: neutral joints, the pelvis 1.5 m in front of the
    /// camera and the orientation output at the median observed orientation.
    pub fn init_for_trial(
        def: &SkeletonDefinition,
        config: NetConfig,
        start: f64,
        duration: f64,
        orientations: &[[f64; 4]],
        seed: u64,
    ) -> Result<Self, ImplicitError> {
        let mut net = Self::new(def, config, start, duration, seed)?;
        let r = Rotation::from_quat(rotation_median(orientations)).unwrap_or_else(|_| Rotation::identity());
        let pelvis = r.apply([0.0, 0.0, INITIAL_CAMERA_DISTANCE]);
        let rv = r.to_rotvec();
        let root = def.root_translation_coords();
        let mut bias = net.output_bias_mut().to_vec();
        for k in 0..3 {
            bias[root[k]] = net.map.inverse(root[k], pelvis[k]);
            bias[NUM_COORDS + k] = net.map.inverse(NUM_COORDS + k, rv[k]);
        }
        net.output_bias_mut().copy_from_slice(&bias);
        Ok(net)
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        &mut self.layers.last_mut().expect("at least one layer").bias
    }

    pub fn start(&self) -> f64 {
        self.encoding.start
    }

    pub fn end(&self) -> f64 {
        self.encoding.start + self.encoding.duration
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in `[w0, b0, w1, b1, ...]` order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_slices(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn check_time(&self, t: f64) -> Result<(), ImplicitError> {
        let (start, end) = (self.start(), self.end());
        if !(t >= start - TIME_MARGIN && t <= end + TIME_MARGIN) {
            return Err(ImplicitError::TimeOutOfRange { t, start, end });
        }
        Ok(())
    }

    /// Records the parameters as tape leaves.
    pub fn record_params(&self, tape: &mut Tape) -> NetVars {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            vars.push(tape.leaf(Tensor { shape: vec![l.inputs, l.outputs], data: l.weight.clone() }));
            vars.push(tape.leaf(Tensor { shape: vec![l.outputs], data: l.bias.clone() }));
        }
        NetVars(vars)
    }

    /// Network evaluation at `times` on the tape.
    pub fn forward_tape(&self, tape: &mut Tape, params: &NetVars, times: &[f64]) -> Result<NetOutputs, ImplicitError> {
        if params.0.len() != 2 * self.layers.len() {
            return Err(ImplicitError::Layout);
        }
        for &t in times {
            self.check_time(t)?;
        }
        let b = times.len();
        let mut enc = Vec::with_capacity(b * self.encoding.len());
        for &t in times {
            self.encoding.encode_into(t, &mut enc);
        }
        let mut h = tape.constant(Tensor { shape: vec![b, self.encoding.len()], data: enc });
        let last = self.layers.len() - 1;
        for (k, pair) in params.0.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add(h, pair[1])?;
            if k != last {
                h = tape.tanh(h);
            }
        }
        let raw = h;
        let squashed = tape.tanh(raw);
        let half = tape.constant(Tensor { shape: vec![NUM_OUTPUTS], data: self.map.half.clone() });
        let linear = tape.constant(Tensor { shape: vec![NUM_OUTPUTS], data: self.map.linear.clone() });
        let center = tape.constant(Tensor { shape: vec![NUM_OUTPUTS], data: self.map.center.clone() });
        let bounded = tape.mul(squashed, half)?;
        let free = tape.mul(raw, linear)?;
        let out = tape.add(bounded, free)?;
        let out = tape.add(out, center)?;
        let pose_cols: Vec<usize> = (0..NUM_COORDS).collect();
        let pose = tape.index_select(out, 1, &pose_cols)?;
        let orientation = tape.index_select(out, 1, &[NUM_COORDS, NUM_COORDS + 1, NUM_COORDS + 2])?;
        Ok(NetOutputs { pose, orientation })
    }

    /// Raw (pre-mapping) outputs at one time, without a tape.
    fn raw_at(&self, t: f64) -> Vec<f64> {
        let mut h = self.encoding.encode(t);
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut next = l.bias.clone();
            for (i, x) in h.iter().enumerate() {
                let row = &l.weight[i * l.outputs..(i + 1) * l.outputs];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += x * w;
                }
            }
            if k != last {
                next.iter_mut().for_each(|v| *v = libm::tanh(*v));
            }
            h = next;
        }
        h
    }

    /// Pose and camera orientation at time `t`.
    pub fn evaluate(&self, t: f64) -> Result<(Pose, Rotation), ImplicitError> {
        self.check_time(t)?;
        let raw = self.raw_at(t);
        let mut out = vec![0.0; NUM_OUTPUTS];
        self.map.apply(&raw, &mut out);
        let r: Vec3 = [out[NUM_COORDS], out[NUM_COORDS + 1], out[NUM_COORDS + 2]];
        out.truncate(NUM_COORDS);
        Ok((Pose(out), Rotation::from_rotvec(r)))
    }
}

/// Distance of the initial pelvis position along the camera's optical axis.
pub const INITIAL_CAMERA_DISTANCE: f64 = 1.5;

/// Chordal geometric median of unit quaternions `(w, x, y, z)` by Weiszfeld
/// iteration. Signs are aligned to the first sample; identity if empty.
pub fn rotation_median(quats: &[[f64; 4]]) -> [f64; 4] {
    let unit: Vec<[f64; 4]> = quats
        .iter()
        .filter_map(|q| {
            let n = libm::sqrt(q.iter().map(|v| v * v).sum());
            (n > 0.0 && n.is_finite()).then(|| q.map(|v| v / n))
        })
        .collect();
    let Some(first) = unit.first().copied() else {
        return [1.0, 0.0, 0.0, 0.0];
    };
    let aligned: Vec<[f64; 4]> = unit
        .iter()
        .map(|q| {
            let d: f64 = (0..4).map(|k| q[k] * first[k]).sum();
            if d < 0.0 { q.map(|v| -v) } else { *q }
        })
        .collect();
    let mut m = [0.0; 4];
    for q in &aligned {
        for k in 0..4 {
            m[k] += q[k] / aligned.len() as f64;
        }
    }
    for _ in 0..32 {
        let mut num = [0.0; 4];
        let mut den = 0.0;
        for q in &aligned {
            let d = libm::sqrt((0..4).map(|k| (q[k] - m[k]) * (q[k] - m[k])).sum());
            let w = 1.0 / d.max(1e-12);
            for k in 0..4 {
                num[k] += w * q[k];
            }
            den += w;
        }
        m = num.map(|v| v / den);
    }
    let n = libm::sqrt(m.iter().map(|v| v * v).sum());
    if n > 0.0 { m.map(|v| v / n) } else { first }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm;

    fn small() -> NetConfig {
        NetConfig { hidden_layers: 2, width: 16, bands: 4, translation_scale: 5.0 }
    }

    #[test]
    fn encoding_layout() {
        let e = PositionalEncoding { bands: 8, start: 2.0, duration: 4.0 };
        let v = e.encode(3.0);
        assert_eq!(v.len(), 17);
        assert!((v[0] - (core::f64::consts::PI / 2.0).sin()).abs() < 1e-15);
        assert!((v[3] - core::f64::consts::PI.cos()).abs() < 1e-15);
        assert_eq!(v[16], 0.25);
    }

    #[test]
    fn zero_net_sits_at_range_midpoints() {
        let def = SkeletonDefinition::default_model();
        let mut net = TrajectoryNet::new(&def, small(), 0.0, 2.0, 1).unwrap();
        for p in net.param_slices_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let (pose, r) = net.evaluate(1.0).unwrap();
        for (i, j) in def.joints.iter().enumerate() {
            match j.limits {
                Some((lo, hi)) => assert!((pose.0[i] - 0.5 * (lo + hi)).abs() < 1e-12),
                None => assert_eq!(pose.0[i], 0.0),
            }
        }
        assert_eq!(r.angle(), 0.0);
    }

    #[test]
    fn init_places_pelvis_in_front_of_camera() {
        let def = SkeletonDefinition::default_model();
        let net = TrajectoryNet::init_for_trial(&def, small(), 0.0, 2.0, &[], 3).unwrap();
        let (pose, r) = net.evaluate(0.0).unwrap();
        let root = def.root_translation_coords().map(|i| pose.0[i]);
        assert!(norm(crate::geometry::sub(root, [0.0, 0.0, 1.5])) < 1e-12);
        assert!(r.angle() < 1e-12);
        let knee = def.coord_index("knee_angle_r").unwrap();
        assert!(pose.0[knee].abs() < 1e-12);
    }

    #[test]
    fn init_orientation_is_median_of_constant_stream() {
        let def = SkeletonDefinition::default_model();
        let q = Rotation::from_rotvec([0.1, -0.4, 0.2]);
        let stream = vec![q.to_quat(); 5];
        let net = TrajectoryNet::init_for_trial(&def, small(), 0.0, 2.0, &stream, 3).unwrap();
        let (pose, r) = net.evaluate(1.3).unwrap();
        assert!(r.angle_to(&q) < 1e-9);
        let root = def.root_translation_coords().map(|i| pose.0[i]);
        assert!(norm(crate::geometry::sub(root, q.apply([0.0, 0.0, 1.5]))) < 1e-9);
    }

    #[test]
    fn median_resists_outliers() {
        let a = Rotation::from_rotvec([0.0, 0.3, 0.0]);
        let out = Rotation::from_rotvec([2.0, 0.0, 0.0]);
        let mut s = vec![a.to_quat(); 6];
        s.push(out.to_quat());
        // a sign-flipped copy is the same rotation
        s.push(a.to_quat().map(|v| -v));
        let m = Rotation::from_quat(rotation_median(&s)).unwrap();
        assert!(m.angle_to(&a) < 1e-3);
        assert_eq!(rotation_median(&[]), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let def = SkeletonDefinition::default_model();
        let a = TrajectoryNet::new(&def, NetConfig::default(), 0.0, 10.0, 7).unwrap();
        let b = TrajectoryNet::new(&def, NetConfig::default(), 0.0, 10.0, 7).unwrap();
        assert_eq!(a, b);
        let c = TrajectoryNet::new(&def, NetConfig::default(), 0.0, 10.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_times_outside_span() {
        let def = SkeletonDefinition::default_model();
        let net = TrajectoryNet::new(&def, small(), 1.0, 2.0, 1).unwrap();
        assert!(net.evaluate(0.5).is_ok());
        assert!(matches!(net.evaluate(3.6), Err(ImplicitError::TimeOutOfRange { .. })));
    }

    #[test]
    fn tape_and_plain_evaluation_agree() {
        let def = SkeletonDefinition::default_model();
        let mut net = TrajectoryNet::new(&def, small(), 0.0, 3.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in net.param_slices_mut() {
            p.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let times = [0.0, 0.7, 2.9];
        let mut tape = Tape::new();
        let vars = net.record_params(&mut tape);
        let out = net.forward_tape(&mut tape, &vars, &times).unwrap();
        for (b, &t) in times.iter().enumerate() {
            let (pose, r) = net.evaluate(t).unwrap();
            let row = &tape.value(out.pose)[b * NUM_COORDS..(b + 1) * NUM_COORDS];
            for (x, y) in row.iter().zip(&pose.0) {
                assert!((x - y).abs() < 1e-12);
            }
            let rv = &tape.value(out.orientation)[b * 3..b * 3 + 3];
            assert!(Rotation::from_rotvec([rv[0], rv[1], rv[2]]).angle_to(&r) < 1e-12);
        }
    }
}
