//! Tidy CSV export of a fit report for external plotting.

use std::path::{Path, PathBuf};

use kinefit_core::skeleton::{JointKind, SkeletonDefinition};

use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::report::FitReport;

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e)
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<PathBuf> {
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    write_atomic(path, &bytes)?;
    Ok(path.to_path_buf())
}

/// Writes `poses.csv` (one row per trial, time and coordinate), `loss.csv`
/// and `scale.csv` into `dir`; returns the written paths.
pub fn export_csv(def: &SkeletonDefinition, report: &FitReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let translation = |name: &str| def.coord_index(name).is_some_and(|i| def.joints[i].kind == JointKind::Translational);

    let poses = dir.join("poses.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "time_s", "coordinate", "value", "unit"]).map_err(csv_err(&poses))?;
    for t in &report.trials {
        for (time, row) in t.times.iter().zip(&t.poses) {
            for (name, v) in report.coordinates.iter().zip(row) {
                let unit = if translation(name) { &report.units.translation } else { &report.units.rotation };
                w.write_record([t.id.as_str(), &time.to_string(), name, &v.to_string(), unit]).map_err(csv_err(&poses))?;
            }
        }
    }
    let mut out = vec![finish(&poses, w)?];

    let loss = dir.join("loss.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "total", "loss_3d", "loss_2d", "loss_phone"]).map_err(csv_err(&loss))?;
    for (i, r) in report.history.iter().enumerate() {
        let row = [i.to_string(), r.total.to_string(), r.loss_3d.to_string(), r.loss_2d.to_string(), r.loss_phone.to_string()];
        w.write_record(&row).map_err(csv_err(&loss))?;
    }
    out.push(finish(&loss, w)?);

    let scale = dir.join("scale.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "scale"]).map_err(csv_err(&scale))?;
    for (g, s) in def.scale_groups.iter().zip(&report.scale.scales) {
        w.write_record([g.as_str(), &s.to_string()]).map_err(csv_err(&scale))?;
    }
    out.push(finish(&scale, w)?);
    Ok(out)
}
