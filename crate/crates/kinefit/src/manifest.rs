//! Session manifests: participant metadata and the trials of one session,
//! in TOML. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_text, write_atomic};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Participant {
    #[serde(default)]
    pub cohort: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mjoa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mjoa_le: Option<f64>,
    /// 10-meter walk test speed, m/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ten_mwt_speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbs: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub id: String,
    pub keypoints: PathBuf,
    pub intrinsics: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<PathBuf>,
    /// Free-form activity tag, e.g. `gait`, `tug`.
    pub activity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<PathBuf>,
    /// Ground-truth sidecar of synthetic trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// Excluded trials are listed but not fitted.
    #[serde(default = "yes")]
    pub include: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub session: String,
    #[serde(default)]
    pub participant: Participant,
    #[serde(rename = "trial")]
    pub trials: Vec<TrialEntry>,
}

impl SessionManifest {
    /// Parses, resolves paths and checks ids and referenced files.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        m.resolve(&base);
        m.check(path)?;
        Ok(m)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.trials {
            fix(&mut t.keypoints);
            fix(&mut t.intrinsics);
            for p in [&mut t.orientation, &mut t.events, &mut t.truth].into_iter().flatten() {
                fix(p);
            }
        }
    }

    fn check(&self, path: &Path) -> Result<()> {
        if self.trials.is_empty() {
            return Err(Error::format(path, "manifest lists no trials"));
        }
        let mut seen = HashSet::new();
        for t in &self.trials {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::format(path, format!("duplicate trial id '{}'", t.id)));
            }
            let files = [Some(&t.keypoints), Some(&t.intrinsics), t.orientation.as_ref(), t.events.as_ref(), t.truth.as_ref()];
            for f in files.into_iter().flatten() {
                if !f.is_file() {
                    return Err(Error::Data(format!("{}: trial '{}' references missing file {}", path.display(), t.id, f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn included(&self) -> impl Iterator<Item = &TrialEntry> {
        self.trials.iter().filter(|t| t.include)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    const BASIC: &str = r#"
session = "s1"

[participant]
cohort = "control"
mjoa = 17

[[trial]]
id = "walk"
keypoints = "walk.keypoints.jsonl"
intrinsics = "walk.intrinsics.json"
activity = "gait"
"#;

    #[test]
    fn relative_paths_resolve_against_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "walk.keypoints.jsonl", "");
        write(dir.path(), "walk.intrinsics.json", "");
        let m = SessionManifest::load(&write(dir.path(), "m.toml", BASIC)).unwrap();
        assert_eq!(m.trials[0].keypoints, dir.path().join("walk.keypoints.jsonl"));
        assert_eq!(m.participant.mjoa, Some(17.0));
        assert!(m.trials[0].include);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "walk.keypoints.jsonl", "");
        let err = SessionManifest::load(&write(dir.path(), "m.toml", BASIC)).unwrap_err();
        assert!(err.to_string().contains("walk.intrinsics.json"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "walk.keypoints.jsonl", "");
        write(dir.path(), "walk.intrinsics.json", "");
        let twice = format!("{BASIC}\n{}", &BASIC[BASIC.find("[[trial]]").unwrap()..]);
        let err = SessionManifest::load(&write(dir.path(), "m.toml", &twice)).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }
}
