//! The articulated body model: a kinematic tree with 40 generalized
//! coordinates, 8 segment scale factors and 87 marker sites, plus
//! differentiable forward kinematics.
//!
//! Frames follow the model convention `+x` forward, `+y` up, `+z` to the
//! subject's right. A body's rest offset is expressed in its parent's frame
//! and scales with the parent's segment scale; site offsets scale with their
//! own body. The effective scale of a body is `overall × group`, or just
//! `overall` for bodies in the `overall` group.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::geometry::Vec3;

pub const NUM_COORDS: usize = 40;
pub const NUM_SITES: usize = 87;
pub const NUM_SCALE_GROUPS: usize = 8;

pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 2.0;
pub const OFFSET_BOUND: f64 = 0.10;

/// Normalized-coordinate magnitude at which a coordinate counts as
/// saturated against its limit.
pub const CLAMP_THRESHOLD: f64 = 0.999;

/// Poses per tape when evaluating long sequences.
const FK_CHUNK: usize = 256;

/// The model definition shipped with the crate.
pub const DEFAULT_MODEL_JSON: &str = include_str!("../models/default_model.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SkeletonError {
    #[error("model definition parse error: {0}")]
    Parse(String),
    #[error("invalid model definition: {0}")]
    Invalid(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} {what}, found {found}")]
    WrongLength { what: &'static str, expected: usize, found: usize },
    #[error("body scale out of bounds: {0}")]
    ScaleOutOfBounds(String),
    #[error(transparent)]
    Tape(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    /// Root translation along a world axis (meters, unbounded).
    Translational,
    /// One-axis hinge (radians).
    Revolute,
    /// One component of the root rotation vector (radians).
    RootRotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub scale_group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub body: usize,
    pub kind: JointKind,
    pub axis: Vec3,
    /// `(lo, hi)` in radians; `None` for translations.
    pub limits: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub name: String,
    pub body: usize,
    pub offset: Vec3,
}

/// A validated, immutable model definition. Joint order defines the
/// coordinate order of a [`Pose`].
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDefinition {
    pub scale_groups: Vec<String>,
    pub bodies: Vec<Body>,
    pub joints: Vec<Joint>,
    pub sites: Vec<Site>,
    root_translation: [usize; 3],
    root_rotation: [usize; 3],
}

#[derive(Deserialize)]
struct RawModel {
    schema: String,
    version: u32,
    scale_groups: Vec<String>,
    bodies: Vec<RawBody>,
    joints: Vec<RawJoint>,
    sites: Vec<RawSite>,
}

#[derive(Deserialize)]
struct RawBody {
    name: String,
    parent: Option<String>,
    offset: Vec3,
    scale_group: String,
}

#[derive(Deserialize)]
struct RawJoint {
    name: String,
    body: String,
    #[serde(rename = "type")]
    kind: JointKind,
    axis: Vec3,
    range_deg: Option<[f64; 2]>,
}

#[derive(Deserialize)]
struct RawSite {
    name: String,
    body: String,
    offset: Vec3,
}

fn invalid(msg: impl ToString) -> SkeletonError {
    SkeletonError::Invalid(msg.to_string())
}

impl SkeletonDefinition {
    pub fn default_model() -> Self {
        Self::from_json(DEFAULT_MODEL_JSON).expect("bundled model definition is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SkeletonError> {
        let raw: RawModel = serde_json::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        if raw.schema != "kinefit.model" {
            return Err(invalid(alloc::format!("unexpected schema '{}'", raw.schema)));
        }
        if raw.version != 1 {
            return Err(invalid(alloc::format!("unsupported version {}", raw.version)));
        }
        if raw.scale_groups.len() != NUM_SCALE_GROUPS {
            return Err(SkeletonError::WrongLength {
                what: "scale groups",
                expected: NUM_SCALE_GROUPS,
                found: raw.scale_groups.len(),
            });
        }
        let group_index = |g: &str| {
            raw.scale_groups
                .iter()
                .position(|s| s == g)
                .ok_or_else(|| invalid(alloc::format!("unknown scale group '{g}'")))
        };
        let mut bodies: Vec<Body> = Vec::with_capacity(raw.bodies.len());
        for b in &raw.bodies {
            if bodies.iter().any(|x| x.name == b.name) {
                return Err(invalid(alloc::format!("duplicate body '{}'", b.name)));
            }
            // parents must be declared first, which also rules out cycles
            let parent = match &b.parent {
                None => None,
                Some(p) => Some(
                    bodies
                        .iter()
                        .position(|x| &x.name == p)
                        .ok_or_else(|| invalid(alloc::format!("body '{}' precedes or lacks parent '{p}'", b.name)))?,
                ),
            };
            bodies.push(Body { name: b.name.clone(), parent, offset: b.offset, scale_group: group_index(&b.scale_group)? });
        }
        let roots: Vec<usize> = bodies.iter().enumerate().filter(|(_, b)| b.parent.is_none()).map(|(i, _)| i).collect();
        if roots != [0] {
            return Err(invalid("the tree needs exactly one root, declared first"));
        }
        let body_index = |n: &str| {
            bodies
                .iter()
                .position(|b| b.name == n)
                .ok_or_else(|| invalid(alloc::format!("unknown body '{n}'")))
        };
        let mut joints = Vec::with_capacity(raw.joints.len());
        for j in &raw.joints {
            let body = body_index(&j.body)?;
            let norm = libm::sqrt(j.axis.iter().map(|x| x * x).sum());
            if !(norm > 0.0) {
                return Err(invalid(alloc::format!("joint '{}' has a zero axis", j.name)));
            }
            let axis = j.axis.map(|x| x / norm);
            let limits = match (j.kind, j.range_deg) {
                (JointKind::Translational, _) => None,
                (_, Some([lo, hi])) => {
                    if !(lo < hi) {
                        return Err(invalid(alloc::format!("joint '{}' limits must satisfy lo < hi", j.name)));
                    }
                    Some((lo.to_radians(), hi.to_radians()))
                }
                (_, None) => return Err(invalid(alloc::format!("rotational joint '{}' needs a range", j.name))),
            };
            if j.kind != JointKind::Revolute && body != 0 {
                return Err(invalid(alloc::format!("joint '{}': only the root carries translation/rotation-vector coordinates", j.name)));
            }
            joints.push(Joint { name: j.name.clone(), body, kind: j.kind, axis, limits });
        }
        if joints.len() != NUM_COORDS {
            return Err(SkeletonError::WrongLength { what: "coordinates", expected: NUM_COORDS, found: joints.len() });
        }
        let find_root = |kind: JointKind| -> Result<[usize; 3], SkeletonError> {
            let idx: Vec<usize> = joints.iter().enumerate().filter(|(_, j)| j.kind == kind).map(|(i, _)| i).collect();
            if idx.len() != 3 {
                return Err(invalid("the root needs three translational and three rotation-vector coordinates"));
            }
            let mut out = [0; 3];
            for &i in &idx {
                let a = joints[i].axis;
                let axis = (0..3).find(|&k| a[k] == 1.0).ok_or_else(|| invalid("root axes must be unit coordinate axes"))?;
                out[axis] = i;
            }
            Ok(out)
        };
        let root_translation = find_root(JointKind::Translational)?;
        let root_rotation = find_root(JointKind::RootRotation)?;
        let mut sites = Vec::with_capacity(raw.sites.len());
        for s in &raw.sites {
            if sites.iter().any(|x: &Site| x.name == s.name) {
                return Err(invalid(alloc::format!("duplicate site '{}'", s.name)));
            }
            sites.push(Site { name: s.name.clone(), body: body_index(&s.body)?, offset: s.offset });
        }
        if sites.len() != NUM_SITES {
            return Err(SkeletonError::WrongLength { what: "sites", expected: NUM_SITES, found: sites.len() });
        }
        Ok(Self { scale_groups: raw.scale_groups, bodies, joints, sites, root_translation, root_rotation })
    }

    pub fn coord_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    pub fn root_translation_coords(&self) -> [usize; 3] {
        self.root_translation
    }

    pub fn root_rotation_coords(&self) -> [usize; 3] {
        self.root_rotation
    }

    /// Limits for every coordinate, `None` for root translation.
    pub fn limits(&self) -> Vec<Option<(f64, f64)>> {
        self.joints.iter().map(|j| j.limits).collect()
    }

    /// Scale-group index chain that multiplies into a body's scale.
    fn scale_factors(&self, body: usize) -> (usize, Option<usize>) {
        let g = self.bodies[body].scale_group;
        (0, (g != 0).then_some(g))
    }

    /// Differentiable forward kinematics for a batch of poses.
    ///
    /// `pose` is `[B,40]`, `scales` `[8]` and `offsets` `[87,3]`; returns
    /// `[B,87,3]` world-frame marker positions.
    pub fn forward_kinematics_tape(&self, tape: &mut Tape, pose: Var, scales: Var, offsets: Var) -> Result<Var, SkeletonError> {
        let ps = tape.shape(pose).to_vec();
        if ps.len() != 2 || ps[1] != NUM_COORDS {
            return Err(SkeletonError::WrongLength { what: "pose columns", expected: NUM_COORDS, found: *ps.last().unwrap_or(&0) });
        }
        if tape.shape(scales) != [NUM_SCALE_GROUPS] {
            return Err(SkeletonError::WrongLength { what: "scale factors", expected: NUM_SCALE_GROUPS, found: tape.value(scales).len() });
        }
        if tape.shape(offsets) != [NUM_SITES, 3] {
            return Err(SkeletonError::WrongLength { what: "site offsets", expected: NUM_SITES * 3, found: tape.value(offsets).len() });
        }
        let batch = ps[0];

        let mut group_scale = Vec::with_capacity(NUM_SCALE_GROUPS);
        let overall = tape.index_select(scales, 0, &[0])?;
        for g in 0..NUM_SCALE_GROUPS {
            if g == 0 {
                group_scale.push(overall);
            } else {
                let s = tape.index_select(scales, 0, &[g])?;
                group_scale.push(tape.mul(overall, s)?);
            }
        }
        let body_scale = |b: usize| {
            let (_, g) = self.scale_factors(b);
            group_scale[g.unwrap_or(0)]
        };

        let mut rot: Vec<Var> = Vec::with_capacity(self.bodies.len());
        let mut pos: Vec<Var> = Vec::with_capacity(self.bodies.len());
        for (bi, body) in self.bodies.iter().enumerate() {
            let (mut r, p) = match body.parent {
                None => {
                    let t = tape.index_select(pose, 1, &self.root_translation)?;
                    let rv = tape.index_select(pose, 1, &self.root_rotation)?;
                    (tape.rotvec_to_matrix(rv)?, t)
                }
                Some(parent) => {
                    let off = tape.constant(Tensor { shape: vec![3, 1], data: body.offset.to_vec() });
                    let off = tape.mul(off, body_scale(parent))?;
                    let d = tape.batch_matmul(rot[parent], off, false, false)?;
                    let d = tape.reshape(d, &[batch, 3])?;
                    (rot[parent], tape.add(pos[parent], d)?)
                }
            };
            for (ci, joint) in self.joints.iter().enumerate() {
                if joint.body != bi || joint.kind != JointKind::Revolute {
                    continue;
                }
                let theta = tape.index_select(pose, 1, &[ci])?;
                let theta = tape.reshape(theta, &[batch])?;
                let rj = tape.axis_rotation(theta, joint.axis)?;
                r = tape.batch_matmul(r, rj, false, false)?;
            }
            rot.push(r);
            pos.push(p);
        }

        let mut chunks = Vec::new();
        let mut order = Vec::with_capacity(NUM_SITES);
        for (bi, _) in self.bodies.iter().enumerate() {
            let ids: Vec<usize> = (0..self.sites.len()).filter(|&s| self.sites[s].body == bi).collect();
            if ids.is_empty() {
                continue;
            }
            let rest: Vec<f64> = ids.iter().flat_map(|&s| self.sites[s].offset).collect();
            let rest = tape.constant(Tensor { shape: vec![ids.len(), 3], data: rest });
            let rest = tape.mul(rest, body_scale(bi))?;
            let corr = tape.index_select(offsets, 0, &ids)?;
            let local = tape.add(rest, corr)?;
            let world = tape.batch_matmul(local, rot[bi], false, true)?;
            let origin = tape.reshape(pos[bi], &[batch, 1, 3])?;
            chunks.push(tape.add(world, origin)?);
            order.extend(ids);
        }
        let stacked = tape.concat(&chunks, 1)?;
        let mut perm = vec![0; NUM_SITES];
        for (row, site) in order.iter().enumerate() {
            perm[*site] = row;
        }
        Ok(tape.index_select(stacked, 1, &perm)?)
    }

    /// Marker positions for a sequence of poses (no gradients recorded).
    pub fn forward_kinematics_batch(&self, poses: &[Pose], scale: &BodyScale) -> Result<Vec<MarkerSet>, SkeletonError> {
        scale.validate()?;
        for p in poses {
            p.validate()?;
        }
        let mut out = Vec::with_capacity(poses.len());
        for chunk in poses.chunks(FK_CHUNK) {
            out.extend(self.fk_chunk(chunk, scale)?);
        }
        Ok(out)
    }

    fn fk_chunk(&self, poses: &[Pose], scale: &BodyScale) -> Result<Vec<MarkerSet>, SkeletonError> {
        let mut tape = Tape::new();
        let pose = tape.constant(Tensor { shape: vec![poses.len(), NUM_COORDS], data: poses.iter().flat_map(|p| p.0.iter().copied()).collect() });
        let scales = tape.constant(Tensor { shape: vec![NUM_SCALE_GROUPS], data: scale.scales.to_vec() });
        let offsets = tape.constant(Tensor { shape: vec![NUM_SITES, 3], data: scale.offsets.iter().flatten().copied().collect() });
        let x = self.forward_kinematics_tape(&mut tape, pose, scales, offsets)?;
        Ok(tape
            .value(x)
            .chunks(NUM_SITES * 3)
            .map(|c| MarkerSet(c.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()))
            .collect())
    }

    pub fn forward_kinematics(&self, pose: &Pose, scale: &BodyScale) -> Result<MarkerSet, SkeletonError> {
        Ok(self.forward_kinematics_batch(core::slice::from_ref(pose), scale)?.remove(0))
    }

    /// Coordinates whose value sits at (or beyond) its limit, i.e. whose
    /// normalized value `2(θ−lo)/(hi−lo) − 1` has magnitude ≥ 0.999.
    pub fn clamp_report(&self, pose: &Pose) -> Vec<usize> {
        self.joints
            .iter()
            .enumerate()
            .filter_map(|(i, j)| {
                let (lo, hi) = j.limits?;
                let n = 2.0 * (pose.0[i] - lo) / (hi - lo) - 1.0;
                (libm::fabs(n) >= CLAMP_THRESHOLD).then_some(i)
            })
            .collect()
    }
}

/// Generalized coordinates θ: root translation (m), root rotation vector
/// (rad), then joint angles (rad), in model joint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub Vec<f64>);

impl Pose {
    pub fn zeros() -> Self {
        Self(vec![0.0; NUM_COORDS])
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.0.len() != NUM_COORDS {
            return Err(SkeletonError::WrongLength { what: "pose coordinates", expected: NUM_COORDS, found: self.0.len() });
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(SkeletonError::NonFinite("pose"));
        }
        Ok(())
    }
}

/// Body scale β: 8 segment scale factors and a per-site offset correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyScale {
    pub scales: [f64; NUM_SCALE_GROUPS],
    pub offsets: Vec<Vec3>,
}

impl Default for BodyScale {
    fn default() -> Self {
        Self { scales: [1.0; NUM_SCALE_GROUPS], offsets: vec![[0.0; 3]; NUM_SITES] }
    }
}

impl BodyScale {
    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.offsets.len() != NUM_SITES {
            return Err(SkeletonError::WrongLength { what: "site offsets", expected: NUM_SITES, found: self.offsets.len() });
        }
        if self.scales.iter().chain(self.offsets.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(SkeletonError::NonFinite("body scale"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(SCALE_MIN..=SCALE_MAX).contains(*s)) {
            return Err(SkeletonError::ScaleOutOfBounds(alloc::format!("scale factor {s} outside [{SCALE_MIN}, {SCALE_MAX}]")));
        }
        if self.offsets.iter().flatten().any(|o| libm::fabs(*o) > OFFSET_BOUND) {
            return Err(SkeletonError::ScaleOutOfBounds(alloc::format!("site offset beyond ±{OFFSET_BOUND} m")));
        }
        Ok(())
    }

    /// Projects onto the admissible box.
    pub fn clamp(&mut self) {
        for s in &mut self.scales {
            *s = s.clamp(SCALE_MIN, SCALE_MAX);
        }
        for o in self.offsets.iter_mut().flatten() {
            *o = o.clamp(-OFFSET_BOUND, OFFSET_BOUND);
        }
    }
}

/// World-frame marker positions, one per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet(pub Vec<Vec3>);

/// The joint groups reported for joint-angle accuracy, each listing its
/// coordinates (bilateral groups pool both sides).
pub const JOINT_GROUPS: [(&str, &[&str]); 14] = [
    ("hip_flexion", &["hip_flexion_r", "hip_flexion_l"]),
    ("hip_adduction", &["hip_adduction_r", "hip_adduction_l"]),
    ("hip_rotation", &["hip_rotation_r", "hip_rotation_l"]),
    ("knee_angle", &["knee_angle_r", "knee_angle_l"]),
    ("ankle_angle", &["ankle_angle_r", "ankle_angle_l"]),
    ("lumbar_extension", &["lumbar_extension"]),
    ("lumbar_bending", &["lumbar_bending"]),
    ("lumbar_rotation", &["lumbar_rotation"]),
    ("neck_extension", &["neck_extension"]),
    ("neck_bending", &["neck_bending"]),
    ("neck_rotation", &["neck_rotation"]),
    ("arm_flex", &["arm_flex_r", "arm_flex_l"]),
    ("arm_add", &["arm_add_r", "arm_add_l"]),
    ("elbow_flex", &["elbow_flex_r", "elbow_flex_l"]),
];
