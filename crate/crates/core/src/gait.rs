//! Gait analysis: event handling, cycle extraction and normalization, the
//! Gait Deviation Index against a normative bank, cadence, double-support
//! time and a kinematic fallback event detector.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dot, sub, Rotation};
use crate::skeleton::{BodyScale, Pose, SkeletonDefinition, SkeletonError};

pub const CYCLE_POINTS: usize = 50;
pub const CYCLE_LEN: usize = 3 * CYCLE_POINTS;
pub const MIN_CYCLE_S: f64 = 0.3;
pub const MAX_CYCLE_S: f64 = 3.0;
pub const MIN_BANK_CYCLES: usize = CYCLE_LEN;
pub const VARIANCE_TARGET: f64 = 0.95;
pub const GDI_CEILING: f64 = 130.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaitError {
    #[error("invalid gait events: {0}")]
    InvalidEvents(String),
    #[error("need at least two initial contacts")]
    TooFewContacts,
    #[error("no cycle has the events needed for double support")]
    NoDoubleSupport,
    #[error("normative bank needs at least {needed} cycles, got {got}")]
    TooFewCycles { needed: usize, got: usize },
    #[error("normative cycles have no variance")]
    Degenerate,
    #[error("cycle must have {CYCLE_LEN} finite values")]
    BadCycle,
    #[error("no cycles to score")]
    Empty,
    #[error("trajectory is missing coordinate '{0}'")]
    MissingCoordinate(&'static str),
    #[error("trajectory times and poses differ in length or are not increasing")]
    BadTrajectory,
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Foot {
    Left,
    Right,
}

impl Foot {
    pub fn other(self) -> Self {
        match self {
            Foot::Left => Foot::Right,
            Foot::Right => Foot::Left,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Foot::Left => "l",
            Foot::Right => "r",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventSource {
    Ingested,
    KinematicFallback,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FootEvents {
    pub initial_contacts: Vec<f64>,
    pub toe_offs: Vec<f64>,
}

/// Per-foot initial-contact and toe-off times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitEvents {
    pub left: FootEvents,
    pub right: FootEvents,
    pub source: EventSource,
}

impl GaitEvents {
    pub fn foot(&self, foot: Foot) -> &FootEvents {
        match foot {
            Foot::Left => &self.left,
            Foot::Right => &self.right,
        }
    }

    /// Checks ordering and IC/TO alternation per foot.
    pub fn validate(&self) -> Result<(), GaitError> {
        for foot in [Foot::Left, Foot::Right] {
            let e = self.foot(foot);
            let mut all: Vec<(f64, bool)> =
                e.initial_contacts.iter().map(|t| (*t, true)).chain(e.toe_offs.iter().map(|t| (*t, false))).collect();
            if all.iter().any(|(t, _)| !t.is_finite()) {
                return Err(GaitError::InvalidEvents(alloc::format!("non-finite {foot:?} event")));
            }
            all.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in all.windows(2) {
                if !(w[1].0 > w[0].0) {
                    return Err(GaitError::InvalidEvents(alloc::format!("{foot:?} events are not strictly increasing")));
                }
                if w[0].1 == w[1].1 {
                    return Err(GaitError::InvalidEvents(alloc::format!("{foot:?} events do not alternate contact/toe-off")));
                }
            }
        }
        Ok(())
    }

    pub fn shifted(&self, dt: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|t| t + dt).collect();
        let f = |e: &FootEvents| FootEvents { initial_contacts: s(&e.initial_contacts), toe_offs: s(&e.toe_offs) };
        Self { left: f(&self.left), right: f(&self.right), source: self.source }
    }
}

/// A pose trajectory sampled at increasing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    fn validate(&self) -> Result<(), GaitError> {
        if self.times.len() != self.poses.len() || self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GaitError::BadTrajectory);
        }
        Ok(())
    }

    /// Linear interpolation of coordinate `c` at `t`; `None` outside the span.
    pub fn sample(&self, c: usize, t: f64) -> Option<f64> {
        let n = self.times.len();
        if n == 0 || t < self.times[0] || t > self.times[n - 1] {
            return None;
        }
        let i = self.times.partition_point(|x| *x <= t);
        if i >= n {
            return Some(self.poses[n - 1].0[c]);
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let a = (t - t0) / (t1 - t0);
        Some(self.poses[i - 1].0[c] * (1.0 - a) + self.poses[i].0[c] * a)
    }
}

/// Hip flexion, hip adduction and knee flexion over one cycle, 50 points
/// each at 2% increments, in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitCycle {
    pub values: Vec<f64>,
    pub side: Foot,
    pub session: String,
    pub start: f64,
    pub end: f64,
}

/// Resamples a periodic series of `values` (equally spaced over one cycle,
/// starting at 0%) to `n` points at `100/n`% increments.
pub fn resample_cycle(values: &[f64], n: usize) -> Vec<f64> {
    let m = values.len();
    (0..n)
        .map(|i| {
            let x = i as f64 * m as f64 / n as f64;
            let k = libm::floor(x) as usize;
            let a = x - k as f64;
            let (v0, v1) = (values[k % m], values[(k + 1) % m]);
            if a == 0.0 { v0 } else { v0 * (1.0 - a) + v1 * a }
        })
        .collect()
}

const CYCLE_COORDS: [&str; 3] = ["hip_flexion", "hip_adduction", "knee_angle"];

/// Cycles between consecutive same-foot initial contacts, dropping the
/// first and last cycle of each foot. Returns the cycles and, when a foot
/// had too few contacts, a warning.
pub fn extract_cycles(
    def: &SkeletonDefinition,
    traj: &Trajectory,
    events: &GaitEvents,
    session: &str,
) -> Result<(Vec<GaitCycle>, Option<String>), GaitError> {
    traj.validate()?;
    events.validate()?;
    let mut cycles = Vec::new();
    let mut warning = None;
    for foot in [Foot::Right, Foot::Left] {
        let mut cols = [0usize; 3];
        for (k, name) in CYCLE_COORDS.iter().enumerate() {
            let full = alloc::format!("{name}_{}", foot.suffix());
            cols[k] = def.coord_index(&full).ok_or(GaitError::MissingCoordinate(name))?;
        }
        let ic = &events.foot(foot).initial_contacts;
        if ic.len() < 4 {
            warning = Some(alloc::format!("{foot:?} foot has {} initial contacts; no interior cycles", ic.len()));
            continue;
        }
        let pairs = ic.windows(2).collect::<Vec<_>>();
        'cycle: for w in &pairs[1..pairs.len() - 1] {
            let (t0, t1) = (w[0], w[1]);
            if !(t1 - t0 > MIN_CYCLE_S && t1 - t0 < MAX_CYCLE_S) {
                continue;
            }
            let mut values = Vec::with_capacity(CYCLE_LEN);
            for &c in &cols {
                for i in 0..CYCLE_POINTS {
                    let t = t0 + (t1 - t0) * i as f64 / CYCLE_POINTS as f64;
                    match traj.sample(c, t) {
                        Some(v) => values.push(v.to_degrees()),
                        None => continue 'cycle,
                    }
                }
            }
            cycles.push(GaitCycle { values, side: foot, session: String::from(session), start: t0, end: t1 });
        }
    }
    Ok((cycles, warning))
}

/// PCA basis and log-distance statistics of normative cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormativeBank {
    pub mean: Vec<f64>,
    /// `k` unit-norm principal directions.
    pub components: Vec<Vec<f64>>,
    /// Explained-variance ratio of every eigen-direction, descending.
    pub explained: Vec<f64>,
    pub ln_mean: f64,
    pub ln_std: f64,
    pub min_distance: f64,
    pub cycles: usize,
}

/// Smallest `k` with cumulative explained ratio reaching the target.
pub fn components_for(ratios: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        if acc >= target {
            return i + 1;
        }
    }
    ratios.len()
}

impl NormativeBank {
    pub fn fit(cycles: &[Vec<f64>]) -> Result<Self, GaitError> {
        if cycles.len() < MIN_BANK_CYCLES {
            return Err(GaitError::TooFewCycles { needed: MIN_BANK_CYCLES, got: cycles.len() });
        }
        if cycles.iter().any(|c| c.len() != CYCLE_LEN || c.iter().any(|v| !v.is_finite())) {
            return Err(GaitError::BadCycle);
        }
        let n = cycles.len();
        let mut mean = vec![0.0; CYCLE_LEN];
        for c in cycles {
            for (m, v) in mean.iter_mut().zip(c) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let x = DMatrix::from_fn(n, CYCLE_LEN, |i, j| cycles[i][j] - mean[j]);
        let cov = (x.transpose() * &x) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..CYCLE_LEN).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let total: f64 = vals.iter().sum();
        let scale = mean.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if !(total > 1e-20 * scale * scale) {
            return Err(GaitError::Degenerate);
        }
        let explained: Vec<f64> = vals.iter().map(|v| v / total).collect();
        let k = components_for(&explained, VARIANCE_TARGET);
        let components: Vec<Vec<f64>> = order[..k]
            .iter()
            .map(|&i| {
                let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                let lead = col.iter().copied().fold(0.0, |a: f64, v| if v.abs() > a.abs() { v } else { a });
                if lead < 0.0 { col.iter().map(|v| -v).collect() } else { col }
            })
            .collect();
        let mut bank = Self { mean, components, explained, ln_mean: 0.0, ln_std: 1.0, min_distance: 0.0, cycles: n };
        let d: Vec<f64> = cycles.iter().map(|c| bank.distance(c)).collect();
        bank.min_distance = d.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        if !bank.min_distance.is_finite() {
            return Err(GaitError::Degenerate);
        }
        let ln: Vec<f64> = d.iter().map(|v| libm::log(v.max(bank.min_distance))).collect();
        let mu = ln.iter().sum::<f64>() / n as f64;
        let var = ln.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n as f64 - 1.0);
        if !(var > 0.0) {
            return Err(GaitError::Degenerate);
        }
        bank.ln_mean = mu;
        bank.ln_std = libm::sqrt(var);
        Ok(bank)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Projection of a cycle onto the retained components.
    pub fn project(&self, cycle: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(cycle).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum())
            .collect()
    }

    /// Distance to the normative mean within the component subspace.
    pub fn distance(&self, cycle: &[f64]) -> f64 {
        libm::sqrt(self.project(cycle).iter().map(|v| v * v).sum())
    }

    pub fn gdi(&self, cycle: &[f64]) -> Result<f64, GaitError> {
        if cycle.len() != CYCLE_LEN || cycle.iter().any(|v| !v.is_finite()) {
            return Err(GaitError::BadCycle);
        }
        let d = self.distance(cycle).max(self.min_distance);
        let z = (libm::log(d) - self.ln_mean) / self.ln_std;
        Ok((100.0 - 10.0 * z).min(GDI_CEILING))
    }

    /// Mean per-step GDI over a participant's cycles.
    pub fn session_gdi(&self, cycles: &[Vec<f64>]) -> Result<f64, GaitError> {
        if cycles.is_empty() {
            return Err(GaitError::Empty);
        }
        let mut s = 0.0;
        for c in cycles {
            s += self.gdi(c)?;
        }
        Ok(s / cycles.len() as f64)
    }
}

/// Steps per minute over the span of all initial contacts.
pub fn cadence(events: &GaitEvents) -> Result<f64, GaitError> {
    let mut ic: Vec<f64> = events.left.initial_contacts.iter().chain(&events.right.initial_contacts).copied().collect();
    ic.sort_by(f64::total_cmp);
    if ic.len() < 2 {
        return Err(GaitError::TooFewContacts);
    }
    let span = ic[ic.len() - 1] - ic[0];
    if !(span > 0.0) {
        return Err(GaitError::InvalidEvents(String::from("initial contacts span no time")));
    }
    Ok(60.0 * (ic.len() - 1) as f64 / span)
}

fn next_after(v: &[f64], t: f64) -> Option<f64> {
    v.iter().copied().find(|x| *x > t)
}

/// Mean per-cycle double-support time in seconds.
pub fn double_support_time(events: &GaitEvents) -> Result<f64, GaitError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for foot in [Foot::Right, Foot::Left] {
        let (me, other) = (events.foot(foot), events.foot(foot.other()));
        for w in me.initial_contacts.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let Some(other_to) = next_after(&other.toe_offs, t0).filter(|t| *t < t1) else { continue };
            let Some(other_ic) = next_after(&other.initial_contacts, other_to).filter(|t| *t < t1) else { continue };
            let Some(my_to) = next_after(&me.toe_offs, other_ic).filter(|t| *t < t1) else { continue };
            sum += (other_to - t0) + (my_to - other_ic);
            n += 1;
        }
    }
    if n == 0 {
        return Err(GaitError::NoDoubleSupport);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Minimum fore-aft excursion of a foot relative to the pelvis, meters.
    pub min_excursion: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { min_excursion: 0.08 }
    }
}

/// Alternating extrema of `x` whose rise/fall exceeds `delta`; returns
/// `(maxima, minima)` sample indices.
fn extrema(x: &[f64], delta: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut maxima, mut minima) = (Vec::new(), Vec::new());
    if x.is_empty() {
        return (maxima, minima);
    }
    let (mut hi, mut lo) = (0usize, 0usize);
    let mut looking: Option<bool> = None; // Some(true): looking for a maximum
    for i in 1..x.len() {
        if x[i] > x[hi] {
            hi = i;
        }
        if x[i] < x[lo] {
            lo = i;
        }
        match looking {
            None => {
                if x[hi] - x[i] > delta && hi > 0 {
                    maxima.push(hi);
                    lo = i;
                    looking = Some(false);
                } else if x[i] - x[lo] > delta && lo > 0 {
                    minima.push(lo);
                    hi = i;
                    looking = Some(true);
                }
            }
            Some(true) => {
                if x[hi] - x[i] > delta {
                    maxima.push(hi);
                    lo = i;
                    looking = Some(false);
                }
            }
            Some(false) => {
                if x[i] - x[lo] > delta {
                    minima.push(lo);
                    hi = i;
                    looking = Some(true);
                }
            }
        }
    }
    (maxima, minima)
}

/// Sub-sample extremum time by a parabola through neighbouring samples.
fn refine(times: &[f64], x: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= x.len() {
        return times[i];
    }
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        return times[i];
    }
    let off = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
    if off >= 0.0 { times[i] + off * (times[i + 1] - times[i]) } else { times[i] + off * (times[i] - times[i - 1]) }
}

/// Fore-aft position of heel and toe sites relative to the pelvis along the
/// pelvis heading, per foot.
fn foot_excursions(def: &SkeletonDefinition, scale: &BodyScale, traj: &Trajectory) -> Result<[[Vec<f64>; 2]; 2], GaitError> {
    let sites = |n: &'static str| def.site_index(n).ok_or(GaitError::MissingCoordinate(n));
    let ids = [[sites("RHEE")?, sites("RTOE")?], [sites("LHEE")?, sites("LTOE")?]];
    let rot = def.root_rotation_coords();
    let tr = def.root_translation_coords();
    let markers = def.forward_kinematics_batch(&traj.poses, scale)?;
    let mut out: [[Vec<f64>; 2]; 2] = Default::default();
    for (pose, m) in traj.poses.iter().zip(&markers) {
        let r = Rotation::from_rotvec(rot.map(|i| pose.0[i]));
        let f = r.apply([1.0, 0.0, 0.0]);
        let h = libm::hypot(f[0], f[2]);
        let heading = if h > 1e-9 { [f[0] / h, 0.0, f[2] / h] } else { [1.0, 0.0, 0.0] };
        let pelvis = tr.map(|i| pose.0[i]);
        for s in 0..2 {
            for p in 0..2 {
                out[s][p].push(dot(sub(m.0[ids[s][p]], pelvis), heading));
            }
        }
    }
    Ok(out)
}

/// Initial contact at the most-forward heel position and toe-off at the
/// most-rearward toe position, both relative to the pelvis, i.e. where the
/// foot's forward velocity relative to the pelvis changes sign.
pub fn detect_events_kinematic(
    def: &SkeletonDefinition,
    scale: &BodyScale,
    traj: &Trajectory,
    config: &DetectorConfig,
) -> Result<GaitEvents, GaitError> {
    traj.validate()?;
    let ex = foot_excursions(def, scale, traj)?;
    let mut feet: [FootEvents; 2] = Default::default();
    for s in 0..2 {
        let (heel_max, _) = extrema(&ex[s][0], config.min_excursion);
        let (_, toe_min) = extrema(&ex[s][1], config.min_excursion);
        let mut all: Vec<(f64, bool)> = heel_max
            .iter()
            .map(|&i| (refine(&traj.times, &ex[s][0], i), true))
            .chain(toe_min.iter().map(|&i| (refine(&traj.times, &ex[s][1], i), false)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        // keep strict alternation
        let mut kept: Vec<(f64, bool)> = Vec::with_capacity(all.len());
        for e in all {
            match kept.last() {
                Some(last) if last.1 == e.1 || !(e.0 > last.0) => {}
                _ => kept.push(e),
            }
        }
        feet[s] = FootEvents {
            initial_contacts: kept.iter().filter(|e| e.1).map(|e| e.0).collect(),
            toe_offs: kept.iter().filter(|e| !e.1).map(|e| e.0).collect(),
        };
    }
    let [right, left] = feet;
    Ok(GaitEvents { left, right, source: EventSource::KinematicFallback })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alternating(step: f64, stance: f64, duration: f64) -> GaitEvents {
        let mut r = FootEvents::default();
        let mut l = FootEvents::default();
        let mut t = 0.0;
        let mut k = 0;
        while t <= duration + 1e-9 {
            let e = if k % 2 == 0 { &mut r } else { &mut l };
            e.initial_contacts.push(t);
            e.toe_offs.push(t + stance);
            t += step;
            k += 1;
        }
        GaitEvents { left: l, right: r, source: EventSource::Ingested }
    }

    #[test]
    fn cadence_and_double_support() {
        let e = alternating(0.5, 0.62, 10.0);
        e.validate().unwrap();
        assert!((cadence(&e).unwrap() - 120.0).abs() < 1e-9);
        assert!((double_support_time(&e).unwrap() - 0.24).abs() < 1e-9);
        let shifted = e.shifted(3.7);
        assert!((cadence(&shifted).unwrap() - 120.0).abs() < 1e-9);
        assert!((double_support_time(&shifted).unwrap() - 0.24).abs() < 1e-9);
        let single = GaitEvents {
            left: FootEvents::default(),
            right: FootEvents { initial_contacts: vec![1.0], toe_offs: vec![] },
            source: EventSource::Ingested,
        };
        assert_eq!(cadence(&single), Err(GaitError::TooFewContacts));
    }

    #[test]
    fn event_validation() {
        let mut e = alternating(0.5, 0.62, 3.0);
        e.right.initial_contacts[1] = e.right.initial_contacts[0] + 0.1;
        assert!(e.validate().is_err());
    }

    #[test]
    fn resampling_is_idempotent() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = resample_cycle(&v, 50);
        for (a, b) in v.iter().zip(&r) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(resample_cycle(&[1.0, 3.0], 4), vec![1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn component_count_rule() {
        assert_eq!(components_for(&[0.5, 0.3, 0.15, 0.05], 0.95), 3);
        assert_eq!(components_for(&[1.0, 0.0], 0.95), 1);
    }

    #[test]
    fn gdi_linear_mapping() {
        let mut bank = NormativeBank {
            mean: vec![0.0; CYCLE_LEN],
            components: vec![{
                let mut c = vec![0.0; CYCLE_LEN];
                c[0] = 1.0;
                c
            }],
            explained: vec![1.0],
            ln_mean: 1.0,
            ln_std: 0.5,
            min_distance: 0.01,
            cycles: 200,
        };
        let mut c = vec![0.0; CYCLE_LEN];
        c[0] = libm::exp(1.0);
        assert!((bank.gdi(&c).unwrap() - 100.0).abs() < 1e-12);
        c[0] = libm::exp(2.0);
        assert!((bank.gdi(&c).unwrap() - 80.0).abs() < 1e-12);
        c[0] = 0.0;
        assert_eq!(bank.gdi(&c).unwrap(), GDI_CEILING);
        bank.ln_std = 10.0;
        assert!(bank.gdi(&c).unwrap() < GDI_CEILING);
        assert!((bank.session_gdi(&[c.clone(), c.clone()]).unwrap() - bank.gdi(&c).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn extrema_with_hysteresis() {
        let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin() + 0.01 * ((i * 7) as f64).sin()).collect();
        let (mx, mn) = extrema(&x, 0.5);
        assert!(mx.len() >= 3 && mn.len() >= 3);
        for i in mx {
            assert!(x[i] > 0.9);
        }
        let flat = vec![0.2; 100];
        assert_eq!(extrema(&flat, 0.1), (vec![], vec![]));
    }
}
