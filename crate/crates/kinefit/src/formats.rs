//! On-disk formats. JSON documents and the header line of JSON Lines
//! streams carry a `schema` name and `version`; units are explicit (seconds,
//! pixels, meters, quaternions `w, x, y, z`).

use std::fs;
use std::path::{Path, PathBuf};

use kinefit_core::fitting::{Frame, ObservationSet, OrientationSample};
use kinefit_core::gait::{EventSource, FootEvents, GaitEvents, NormativeBank};
use kinefit_core::geometry::CameraIntrinsics;
use kinefit_core::skeleton::NUM_SITES;
use kinefit_core::synth::GroundTruth;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
pub const KEYPOINTS_SCHEMA: &str = "kinefit.keypoints";
pub const ORIENTATION_SCHEMA: &str = "kinefit.orientation";
pub const INTRINSICS_SCHEMA: &str = "kinefit.intrinsics";
pub const EVENTS_SCHEMA: &str = "kinefit.events";
pub const TRUTH_SCHEMA: &str = "kinefit.truth";
pub const BANK_SCHEMA: &str = "kinefit.bank";

/// Writes through a temporary file in the same directory, then renames it
/// over `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory JSON serialization");
    out.push(b'\n');
    out
}

fn check_header(path: &Path, schema: &str, version: u32, want: &str) -> Result<()> {
    if schema != want {
        return Err(Error::format(path, format!("schema is '{schema}', expected '{want}'")));
    }
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported {want} version {version}")));
    }
    Ok(())
}

/// Reads a JSON document, naming the file in every error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json(value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointUnits {
    time: String,
    keypoints_2d: String,
    keypoints_3d: String,
}

impl KeypointUnits {
    fn standard() -> Self {
        Self { time: "s".into(), keypoints_2d: "px".into(), keypoints_3d: "m".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointHeader {
    schema: String,
    version: u32,
    trial: String,
    units: KeypointUnits,
    /// Site names in keypoint order.
    sites: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrientationUnits {
    time: String,
    quat: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrientationHeader {
    schema: String,
    version: u32,
    units: OrientationUnits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsFile {
    schema: String,
    version: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventsFile {
    schema: String,
    version: u32,
    units: String,
    right: FootEvents,
    left: FootEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthFile {
    schema: String,
    version: u32,
    /// Poses use radians for rotations and meters for translations.
    units: String,
    truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    schema: String,
    version: u32,
    bank: NormativeBank,
}

fn jsonl_lines(path: &Path, text: &str) -> Result<Vec<(usize, String)>> {
    let lines: Vec<(usize, String)> =
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l.to_string())).collect();
    if lines.is_empty() {
        return Err(Error::format(path, "empty file; expected a header line"));
    }
    Ok(lines)
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::record(path, line, "json", e))
}

fn all_finite<'a>(v: impl IntoIterator<Item = &'a f64>) -> bool {
    v.into_iter().all(|x| x.is_finite())
}

/// Parses a keypoint stream. Records are numbered by line, header = 1.
/// Confidences are clamped to `[0, 1]`; timestamps must increase.
pub fn load_keypoints(path: &Path, sites: &[String]) -> Result<(String, Vec<Frame>)> {
    let text = read_text(path)?;
    let lines = jsonl_lines(path, &text)?;
    let header: KeypointHeader = parse_line(path, lines[0].0, &lines[0].1)?;
    check_header(path, &header.schema, header.version, KEYPOINTS_SCHEMA)?;
    if header.units != KeypointUnits::standard() {
        return Err(Error::record(path, lines[0].0, "units", "expected time in s, 2D keypoints in px and 3D keypoints in m"));
    }
    if header.sites != sites {
        return Err(Error::record(path, lines[0].0, "sites", "site list does not match the model"));
    }
    let mut frames: Vec<Frame> = Vec::with_capacity(lines.len() - 1);
    for (line, body) in &lines[1..] {
        let mut f: Frame = parse_line(path, *line, body)?;
        let bad = |field: &str, msg: &str| Error::record(path, *line, field, msg);
        if !f.time.is_finite() {
            return Err(bad("time", "not finite"));
        }
        if let Some(prev) = frames.last() {
            if !(f.time > prev.time) {
                return Err(bad("time", "timestamps must be strictly increasing"));
            }
        }
        for (field, len) in [("keypoints_2d", f.keypoints_2d.len()), ("keypoints_3d", f.keypoints_3d.len()), ("confidence", f.confidence.len())] {
            if len != NUM_SITES {
                return Err(bad(field, &format!("{len} entries, expected {NUM_SITES}")));
            }
        }
        if !all_finite(f.keypoints_2d.iter().flatten()) {
            return Err(bad("keypoints_2d", "non-finite value"));
        }
        if !all_finite(f.keypoints_3d.iter().flatten()) {
            return Err(bad("keypoints_3d", "non-finite value"));
        }
        if f.confidence.iter().any(|c| c.is_nan()) {
            return Err(bad("confidence", "NaN value"));
        }
        f.confidence.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
        frames.push(f);
    }
    Ok((header.trial, frames))
}

pub fn keypoints_bytes(trial: &str, sites: &[String], frames: &[Frame]) -> Vec<u8> {
    let header = KeypointHeader {
        schema: KEYPOINTS_SCHEMA.into(),
        version: VERSION,
        trial: trial.into(),
        units: KeypointUnits::standard(),
        sites: sites.to_vec(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for f in frames {
        serde_json::to_writer(&mut out, f).expect("frame serializes");
        out.push(b'\n');
    }
    out
}

pub fn save_keypoints(path: &Path, trial: &str, sites: &[String], frames: &[Frame]) -> Result<()> {
    write_atomic(path, &keypoints_bytes(trial, sites, frames))
}

fn orientation_units() -> OrientationUnits {
    OrientationUnits { time: "s".into(), quat: "wxyz camera-to-world".into() }
}

/// Parses a phone orientation stream; quaternions must be finite and
/// nonzero and are renormalized when off unit length by more than 1e-9.
pub fn load_orientation(path: &Path) -> Result<Vec<OrientationSample>> {
    let text = read_text(path)?;
    let lines = jsonl_lines(path, &text)?;
    let header: OrientationHeader = parse_line(path, lines[0].0, &lines[0].1)?;
    check_header(path, &header.schema, header.version, ORIENTATION_SCHEMA)?;
    if header.units != orientation_units() {
        return Err(Error::record(path, lines[0].0, "units", "expected time in s and wxyz camera-to-world quaternions"));
    }
    let mut out: Vec<OrientationSample> = Vec::with_capacity(lines.len() - 1);
    for (line, body) in &lines[1..] {
        let mut s: OrientationSample = parse_line(path, *line, body)?;
        if !s.time.is_finite() || out.last().is_some_and(|p| !(s.time > p.time)) {
            return Err(Error::record(path, *line, "time", "timestamps must be finite and strictly increasing"));
        }
        let n = s.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n < 1e-6 {
            return Err(Error::record(path, *line, "quat", "quaternion must be finite and nonzero"));
        }
        if (n - 1.0).abs() > 1e-9 {
            s.quat.iter_mut().for_each(|v| *v /= n);
        }
        out.push(s);
    }
    Ok(out)
}

pub fn orientation_bytes(samples: &[OrientationSample]) -> Vec<u8> {
    let header = OrientationHeader { schema: ORIENTATION_SCHEMA.into(), version: VERSION, units: orientation_units() };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for s in samples {
        serde_json::to_writer(&mut out, s).expect("sample serializes");
        out.push(b'\n');
    }
    out
}

pub fn save_orientation(path: &Path, samples: &[OrientationSample]) -> Result<()> {
    write_atomic(path, &orientation_bytes(samples))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let f: IntrinsicsFile = read_json(path)?;
    check_header(path, &f.schema, f.version, INTRINSICS_SCHEMA)?;
    CameraIntrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height).map_err(|e| Error::format(path, e))
}

pub fn save_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let f = IntrinsicsFile {
        schema: INTRINSICS_SCHEMA.into(),
        version: VERSION,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
    };
    write_json(path, &f)
}

/// Loads one trial's observations. The trial name comes from the keypoint
/// header; a missing orientation file leaves the phone stream empty.
pub fn load_observations(keypoints: &Path, intrinsics: &Path, orientation: Option<&Path>, sites: &[String]) -> Result<ObservationSet> {
    let intrinsics = load_intrinsics(intrinsics)?;
    let (name, frames) = load_keypoints(keypoints, sites)?;
    let orientations = match orientation {
        Some(p) => load_orientation(p)?,
        None => Vec::new(),
    };
    let obs = ObservationSet { name, intrinsics, frames, orientations };
    obs.validate().map_err(|e| Error::format(keypoints, e))?;
    Ok(obs)
}

pub fn load_events(path: &Path) -> Result<GaitEvents> {
    let f: EventsFile = read_json(path)?;
    check_header(path, &f.schema, f.version, EVENTS_SCHEMA)?;
    if f.units != "s" {
        return Err(Error::format(path, "event times must be in s"));
    }
    let events = GaitEvents { right: f.right, left: f.left, source: EventSource::Ingested };
    events.validate().map_err(|e| Error::format(path, e))?;
    Ok(events)
}

pub fn save_events(path: &Path, events: &GaitEvents) -> Result<()> {
    let f = EventsFile {
        schema: EVENTS_SCHEMA.into(),
        version: VERSION,
        units: "s".into(),
        right: events.right.clone(),
        left: events.left.clone(),
    };
    write_json(path, &f)
}

pub fn load_truth(path: &Path) -> Result<GroundTruth> {
    let f: TruthFile = read_json(path)?;
    check_header(path, &f.schema, f.version, TRUTH_SCHEMA)?;
    Ok(f.truth)
}

pub fn save_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let f = TruthFile {
        schema: TRUTH_SCHEMA.into(),
        version: VERSION,
        units: "rad, m".into(),
        truth: truth.clone(),
    };
    write_json(path, &f)
}

pub fn load_bank(path: &Path) -> Result<NormativeBank> {
    let f: BankFile = read_json(path)?;
    check_header(path, &f.schema, f.version, BANK_SCHEMA)?;
    Ok(f.bank)
}

pub fn save_bank(path: &Path, bank: &NormativeBank) -> Result<()> {
    write_json(path, &BankFile { schema: BANK_SCHEMA.into(), version: VERSION, bank: bank.clone() })
}
