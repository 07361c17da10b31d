use std::fs;
use std::path::{Path, PathBuf};

use kinefit::cli::run;
use kinefit::formats::*;
use kinefit::manifest::SessionManifest;
use kinefit::pipeline::Model;
use kinefit::report::{FitReport, Provenance, TrialReport, Units};
use kinefit_core::fitting::FitConfig;
use kinefit_core::skeleton::{BodyScale, JointKind, SkeletonDefinition};
use kinefit_core::synth::{truth_trajectory, true_events, GaitParams, MotionScript, Placement};

fn kinefit(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["kinefit"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SCRIPT: &str = r#"
session = "cli-test"

[participant]
cohort = "control"
mjoa = 18

[body]
spread = 0.05
seed = 2

[[trial]]
id = "walk"
motion = "gait"
duration = 4.0
noise = { sigma_2d_px = 2.0, sigma_3d_cm = 1.0, seed = 5 }

[[trial]]
id = "still"
motion = "standing"
duration = 2.0
"#;

const SMALL: &str = "iterations = 30\nbatch_size = 16\nimu_batch_size = 8\nseed = 4\n[net]\nhidden_layers = 2\nwidth = 16\nbands = 4\n";

fn synth_session(dir: &Path) -> PathBuf {
    let script = dir.join("script.toml");
    fs::write(&script, SCRIPT).unwrap();
    let (code, out, err) = kinefit(&["synth", s(&script), "--out", s(&dir.join("session"))]);
    assert_eq!(code, 0, "{err}");
    PathBuf::from(out.trim())
}

#[test]
fn help_version_and_usage_codes() {
    assert_eq!(kinefit(&["--help"]).0, 0);
    assert_eq!(kinefit(&["--version"]).0, 0);
    assert_eq!(kinefit(&["fit", "--help"]).0, 0);
    let (code, out, err) = kinefit(&["fit", "m.toml", "--out", "x", "--bogus"]);
    assert_eq!(code, 64);
    assert!(out.is_empty() && err.contains("--bogus"));
    assert_eq!(kinefit(&[]).0, 64);
    assert_eq!(kinefit(&["stats", "nonsense"]).0, 64);
}

#[test]
fn synthesized_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = synth_session(dir.path());
    let manifest = SessionManifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.trials.len(), 2);
    assert_eq!(manifest.participant.mjoa, Some(18.0));
    let model = Model::load(None).unwrap();
    let sites = model.site_names();
    for t in &manifest.trials {
        let (name, frames) = load_keypoints(&t.keypoints, &sites).unwrap();
        assert_eq!(keypoints_bytes(&name, &sites, &frames), fs::read(&t.keypoints).unwrap());
        let o = t.orientation.as_ref().unwrap();
        assert_eq!(orientation_bytes(&load_orientation(o).unwrap()), fs::read(o).unwrap());

        let again = dir.path().join("again.json");
        save_intrinsics(&again, &load_intrinsics(&t.intrinsics).unwrap()).unwrap();
        assert_eq!(fs::read(&again).unwrap(), fs::read(&t.intrinsics).unwrap());
        let truth = t.truth.as_ref().unwrap();
        save_truth(&again, &load_truth(truth).unwrap()).unwrap();
        assert_eq!(fs::read(&again).unwrap(), fs::read(truth).unwrap());
        if let Some(ev) = &t.events {
            save_events(&again, &load_events(ev).unwrap()).unwrap();
            assert_eq!(fs::read(&again).unwrap(), fs::read(ev).unwrap());
        }
    }
    assert!(manifest.trials[0].events.is_some() && manifest.trials[1].events.is_none());
    // Same script, same bytes.
    let other = tempfile::tempdir().unwrap();
    let second = synth_session(other.path());
    let a = fs::read(manifest.trials[0].keypoints.clone()).unwrap();
    let b = fs::read(second.parent().unwrap().join("walk.keypoints.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_intrinsics_is_a_data_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_session(dir.path());
    fs::remove_file(manifest.parent().unwrap().join("walk.intrinsics.json")).unwrap();
    let (code, out, err) = kinefit(&["fit", s(&manifest), "--out", s(&dir.path().join("fit"))]);
    assert_eq!(code, 2);
    assert!(out.is_empty());
    assert!(err.contains("walk.intrinsics.json"), "{err}");
}

#[test]
fn malformed_config_and_model_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_session(dir.path());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "iterations = 0\n").unwrap();
    let (code, _, err) = kinefit(&["fit", s(&manifest), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("bad.toml"));
    let model = dir.path().join("model.json");
    fs::write(&model, "{}").unwrap();
    let (code, _, err) = kinefit(&["--model", s(&model), "fit", s(&manifest), "--out", s(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("model.json"), "{err}");
}

#[test]
fn exploding_learning_rate_is_a_numerical_abort() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_session(dir.path());
    let cfg = dir.path().join("boom.toml");
    fs::write(&cfg, format!("lr_start = 1e300\nlr_end = 1e300\n{SMALL}")).unwrap();
    let (code, _, err) = kinefit(&["fit", s(&manifest), "--config", s(&cfg), "--out", s(&dir.path().join("fit")), "--quiet"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("non-finite"));
}

#[test]
fn short_fit_pipeline_is_deterministic_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_session(dir.path());
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let fit = |name: &str, threads: &str| {
        let out_dir = dir.path().join(name);
        let (code, out, err) = kinefit(&["fit", s(&manifest), "--config", s(&cfg), "--out", s(&out_dir), "--threads", threads]);
        assert_eq!(code, 0, "{err}");
        assert!(err.contains("iteration"));
        assert_eq!(PathBuf::from(out.trim()), out_dir.join("report.json"));
        out_dir
    };
    let (a, b) = (fit("a", "1"), fit("b", "2"));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.kfck")).unwrap(), fs::read(b.join("checkpoint.kfck")).unwrap());

    let report_path = a.join("report.json");
    let report = FitReport::load(&report_path).unwrap();
    let again = dir.path().join("copy.json");
    report.save(&again).unwrap();
    assert_eq!(FitReport::load(&again).unwrap(), report);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&report_path).unwrap());
    assert_eq!(report.history.len(), 30);
    assert_eq!(report.participant.cohort, "control");
    assert_eq!(report.provenance.config.iterations, 30);
    assert_eq!(report.trials[0].poses[0].len(), 40);
    assert!((report.trials[0].rate_hz - 30.0).abs() < 1e-9);

    let model = Model::load(None).unwrap();
    let ck = kinefit::checkpoint::Checkpoint::load(&model.def, &a.join("checkpoint.kfck")).unwrap();
    assert_eq!(ck.scale, report.scale);
    let t = &report.trials[1];
    let (pose, _) = ck.nets[1].evaluate(t.times[3]).unwrap();
    assert!((pose.0[10].to_degrees() - t.poses[3][10]).abs() < 1e-9);

    let (code, out, err) = kinefit(&["metrics", s(&report_path)]);
    assert_eq!(code, 0, "{err}");
    let m: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(m[0]["event_source"], "ingested");
    assert_eq!(m[1]["event_source"], "kinematic");
    assert!(err.contains("kinematic event detection"));

    let (code, out, err) = kinefit(&["stats", "mjae", s(&report_path), "--reference", s(&manifest)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["trials"][0]["groups"].as_object().unwrap().len(), 14);
    assert!(v["trials"][0]["mjae"].as_f64().unwrap() > 0.0);
    // A report compared with itself has no error.
    let (_, out, _) = kinefit(&["stats", "mjae", s(&report_path), "--reference", s(&report_path)]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["trials"][1]["mjae"].as_f64().unwrap() < 1e-9);
    let (code, out, _) = kinefit(&["stats", "rte", s(&report_path), "--reference", s(&manifest), "--aligned"]);
    assert_eq!(code, 0);
    assert!(out.contains("\"cm\""));

    let csv_dir = dir.path().join("csv");
    let (code, out, _) = kinefit(&["export", s(&report_path), "--csv", s(&csv_dir)]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 3);
    let poses = fs::read_to_string(csv_dir.join("poses.csv")).unwrap();
    let rows = report.trials.iter().map(|t| t.times.len()).sum::<usize>() * 40;
    assert_eq!(poses.lines().count(), rows + 1);
    assert!(poses.lines().nth(1).unwrap().starts_with("walk,0,pelvis_tx,"));
}

#[test]
fn gdi_commands_score_normative_reports() {
    let def = SkeletonDefinition::default_model();
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for subject in 0..30u64 {
        let params = GaitParams { variability: 0.15, seed: 100 + subject, ..GaitParams::default() };
        let script = MotionScript::gait(&def, 10.0, &params, BodyScale::default(), Placement { position: [0.0, 3.5], heading_deg: 0.0 }).unwrap();
        let traj = truth_trajectory(&def, &script, 30.0);
        let poses = traj
            .poses
            .iter()
            .map(|p| p.0.iter().enumerate().map(|(i, v)| if def.joints[i].kind == JointKind::Translational { *v } else { v.to_degrees() }).collect())
            .collect();
        let report = FitReport {
            schema: "kinefit.fit_report".into(),
            version: 1,
            session: format!("s{subject}"),
            participant: Default::default(),
            coordinates: def.joints.iter().map(|j| j.name.clone()).collect(),
            units: Units::default(),
            trials: vec![TrialReport {
                id: "walk".into(),
                activity: "gait".into(),
                rate_hz: 30.0,
                times: traj.times.clone(),
                poses,
                camera: vec![[1.0, 0.0, 0.0, 0.0]; traj.times.len()],
                residual_px: 0.0,
                residual_cm: 0.0,
                events: Some(true_events(&def, &script).unwrap()),
            }],
            scale: BodyScale::default(),
            history: vec![],
            provenance: Provenance {
                config_hash: String::new(),
                model_hash: String::new(),
                seed: 0,
                version: String::new(),
                config: FitConfig::default(),
            },
        };
        let p = dir.path().join(format!("r{subject}.json"));
        report.save(&p).unwrap();
        paths.push(p);
    }
    let bank = dir.path().join("bank.json");
    let mut args = vec!["gdi", "build-bank"];
    args.extend(paths.iter().map(|p| s(p)));
    args.extend(["--out", s(&bank)]);
    let (code, out, err) = kinefit(&args);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.trim(), s(&bank));
    let (code, out, err) = kinefit(&["gdi", "score", s(&paths[3]), "--bank", s(&bank)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let steps = v["steps"].as_array().unwrap();
    assert!(steps.len() >= 8);
    let mean = steps.iter().map(|x| x["gdi"].as_f64().unwrap()).sum::<f64>() / steps.len() as f64;
    assert!((mean - v["session_gdi"].as_f64().unwrap()).abs() < 1e-9);
    assert!((v["session_gdi"].as_f64().unwrap() - 100.0).abs() < 25.0);
}

#[test]
fn table_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let icc_csv = dir.path().join("icc.csv");
    let mut text = String::from("subject,value\n");
    let table = [[9.0, 2.0, 5.0, 8.0], [6.0, 1.0, 3.0, 2.0], [8.0, 4.0, 6.0, 8.0], [7.0, 1.0, 2.0, 6.0], [10.0, 5.0, 6.0, 9.0], [6.0, 2.0, 4.0, 7.0]];
    for (i, row) in table.iter().enumerate() {
        for v in row {
            text += &format!("p{i},{v}\n");
        }
    }
    fs::write(&icc_csv, text).unwrap();
    let (code, out, err) = kinefit(&["stats", "icc", s(&icc_csv)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    // Shrout & Fleiss (1979) ICC(2,1) and ICC(2,4).
    assert!((v["icc2"]["value"].as_f64().unwrap() - 0.29).abs() < 0.005);
    assert!((v["icc2k"]["value"].as_f64().unwrap() - 0.62).abs() < 0.005);

    let groups = dir.path().join("groups.csv");
    fs::write(&groups, "group,value\na,1\nb,4\na,2\nb,5.5\na,3\nb,6\n").unwrap();
    let (code, out, _) = kinefit(&["stats", "mann-whitney", s(&groups)]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    // All of a below all of b: U = 0, exact two-sided p = 2/20.
    assert_eq!(v["u"].as_f64().unwrap(), 0.0);
    assert!((v["p"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    let (code, out, _) = kinefit(&["stats", "ttest", s(&groups), "--paired"]);
    assert_eq!(code, 0);
    assert!(out.contains("\"paired\": true"));

    let prepost = dir.path().join("pp.csv");
    fs::write(&prepost, "pre,post,x\n1,2,1\n2,2.5,2\n3,4.5,3\n4,4.2,5\n").unwrap();
    let (code, out, _) = kinefit(&["stats", "srm", s(&prepost)]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let d = [1.0, 0.5, 1.5, 0.2f64];
    let m = d.iter().sum::<f64>() / 4.0;
    let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((v["srm"].as_f64().unwrap() - m / sd).abs() < 1e-12);
    let (code, out, _) = kinefit(&["stats", "correlate", s(&prepost), "--x", "pre", "--y", "x"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["spearman"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    fs::write(&prepost, "pre,post\n1,2\n2,oops\n").unwrap();
    let (code, _, err) = kinefit(&["stats", "srm", s(&prepost)]);
    assert_eq!(code, 2);
    assert!(err.contains("record 3") && err.contains("post"), "{err}");
}
