use kinefit_core::gait::*;
use kinefit_core::skeleton::{BodyScale, SkeletonDefinition};
use kinefit_core::synth::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn walker(def: &SkeletonDefinition, seed: u64, variability: f64) -> MotionScript {
    let params = GaitParams { variability, seed, ..GaitParams::default() };
    MotionScript::gait(def, 10.0, &params, BodyScale::default(), Placement { position: [0.0, 3.5], heading_deg: 0.0 }).unwrap()
}

fn cycles_of(def: &SkeletonDefinition, script: &MotionScript, session: &str) -> Vec<GaitCycle> {
    let traj = truth_trajectory(def, script, 100.0);
    let events = true_events(def, script).unwrap();
    extract_cycles(def, &traj, &events, session).unwrap().0
}

/// Explained-variance ratios from singular values of the centered data.
fn svd_ratios(rows: &[Vec<f64>]) -> Vec<f64> {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let mut sv: Vec<f64> = m.singular_values().iter().map(|s| s * s).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sv.iter().sum();
    sv.iter().map(|s| s / total).collect()
}

#[test]
fn component_count_matches_full_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Anisotropic cloud: a decaying spectrum over all 150 dimensions.
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|_| (0..CYCLE_LEN).map(|j| 30.0 / (1.0 + j as f64) * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
        .collect();
    let bank = NormativeBank::fit(&rows).unwrap();
    let oracle = svd_ratios(&rows);
    let mut acc = 0.0;
    let k = oracle.iter().position(|r| {
        acc += r;
        acc >= 0.95
    }).unwrap() + 1;
    assert_eq!(bank.k(), k);
    for (a, b) in bank.explained.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn isotropic_cloud_needs_most_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..3000).map(|_| (0..CYCLE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let bank = NormativeBank::fit(&rows).unwrap();
    let oracle = svd_ratios(&rows);
    assert!(bank.explained.iter().all(|r| (r - 1.0 / 150.0).abs() < 0.004));
    assert_eq!(bank.k(), components_for(&oracle, 0.95));
    assert!(bank.k() > 130);
}

#[test]
fn line_of_cycles_has_one_component() {
    let dir: Vec<f64> = (0..CYCLE_LEN).map(|j| (j as f64 * 0.1).sin()).collect();
    let rows: Vec<Vec<f64>> = (0..160).map(|i| dir.iter().map(|d| 5.0 + d * (i as f64 - 80.0)).collect()).collect();
    let bank = NormativeBank::fit(&rows).unwrap();
    assert_eq!(bank.k(), 1);
    assert!((bank.explained[0] - 1.0).abs() < 1e-9);
}

fn synthetic_bank(def: &SkeletonDefinition) -> (NormativeBank, Vec<Vec<f64>>) {
    let mut rows = vec![];
    for s in 0..30 {
        for c in cycles_of(def, &walker(def, 100 + s, 0.15), "control") {
            rows.push(c.values);
        }
    }
    (NormativeBank::fit(&rows).unwrap(), rows)
}

#[test]
fn normative_self_score_is_standardized() {
    let def = SkeletonDefinition::default_model();
    let (bank, rows) = synthetic_bank(&def);
    assert!(rows.len() >= 150);
    let scores: Vec<f64> = rows.iter().map(|r| bank.gdi(r).unwrap()).collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 100.0).abs() < 0.2, "mean {mean}");
    assert!((std - 10.0).abs() < 0.2, "std {std}");

    // Shuffled rows give the same scores.
    let mut shuffled = rows.clone();
    shuffled.reverse();
    shuffled.swap(0, 7);
    let other = NormativeBank::fit(&shuffled).unwrap();
    for r in rows.iter().take(20) {
        assert!((other.gdi(r).unwrap() - bank.gdi(r).unwrap()).abs() < 1e-8);
    }
    // Session score is the plain mean of step scores, in any order.
    let some: Vec<Vec<f64>> = rows[..50].to_vec();
    let brute = some.iter().map(|r| bank.gdi(r).unwrap()).sum::<f64>() / 50.0;
    assert!((bank.session_gdi(&some).unwrap() - brute).abs() < 1e-9);
    let mut rev = some.clone();
    rev.reverse();
    assert!((bank.session_gdi(&rev).unwrap() - brute).abs() < 1e-9);
}

#[test]
fn resampled_sinusoid_matches_analytic() {
    let def = SkeletonDefinition::default_model();
    let knee = def.coord_index("knee_angle_r").unwrap();
    let period = 1.1;
    let times: Vec<f64> = (0..=600).map(|i| i as f64 / 100.0).collect();
    let value = |t: f64| (30.0 + 25.0 * (2.0 * std::f64::consts::PI * t / period).sin()).to_radians();
    let poses = times
        .iter()
        .map(|&t| {
            let mut p = kinefit_core::skeleton::Pose(vec![0.0; 40]);
            p.0[knee] = value(t);
            p
        })
        .collect();
    let traj = Trajectory { times, poses };
    let ic: Vec<f64> = (0..5).map(|i| 0.2 + i as f64 * period).collect();
    let to: Vec<f64> = ic.iter().map(|t| t + 0.6 * period).collect();
    let left = FootEvents { initial_contacts: ic.iter().map(|t| t + period / 2.0).collect(), toe_offs: to.iter().map(|t| t + period / 2.0).collect() };
    let events = GaitEvents { right: FootEvents { initial_contacts: ic.clone(), toe_offs: to }, left, source: EventSource::Ingested };
    let (cycles, _) = extract_cycles(&def, &traj, &events, "s").unwrap();
    let right: Vec<&GaitCycle> = cycles.iter().filter(|c| c.side == Foot::Right).collect();
    // 5 contacts, 4 cycles, first and last dropped
    assert_eq!(right.len(), 2);
    for c in right {
        for i in 0..CYCLE_POINTS {
            let t = c.start + (c.end - c.start) * i as f64 / CYCLE_POINTS as f64;
            let want = value(t).to_degrees();
            assert!((c.values[2 * CYCLE_POINTS + i] - want).abs() < 0.1);
        }
    }
}

#[test]
fn detector_finds_true_events_at_video_rate() {
    let def = SkeletonDefinition::default_model();
    for seed in 0..4 {
        let script = walker(&def, seed, 0.1);
        let truth = true_events(&def, &script).unwrap();
        let traj = truth_trajectory(&def, &script, 30.0);
        let found = detect_events_kinematic(&def, &script.scale, &traj, &DetectorConfig::default()).unwrap();
        found.validate().unwrap();
        for foot in [Foot::Right, Foot::Left] {
            let (a, b) = (truth.foot(foot), found.foot(foot));
            assert_eq!(a.initial_contacts.len(), b.initial_contacts.len());
            for (x, y) in a.initial_contacts.iter().zip(&b.initial_contacts) {
                assert!((x - y).abs() <= 1.0 / 30.0, "{x} vs {y}");
            }
        }
        // About one stride per 1/0.9 s.
        let c = cadence(&found).unwrap();
        assert!((c - 108.0).abs() < 3.0, "cadence {c}");
    }
}

#[test]
fn standing_still_has_no_events() {
    let def = SkeletonDefinition::default_model();
    let script = MotionScript::standing(&def, 5.0, BodyScale::default(), Placement { position: [0.0, 3.0], heading_deg: 0.0 }).unwrap();
    let traj = truth_trajectory(&def, &script, 30.0);
    let ev = detect_events_kinematic(&def, &script.scale, &traj, &DetectorConfig::default()).unwrap();
    assert!(ev.right.initial_contacts.is_empty() && ev.left.initial_contacts.is_empty());
}

#[test]
fn temporal_metrics_ignore_time_shift() {
    let def = SkeletonDefinition::default_model();
    let ev = true_events(&def, &walker(&def, 3, 0.0)).unwrap();
    let moved = ev.shifted(12.5);
    assert!((cadence(&ev).unwrap() - cadence(&moved).unwrap()).abs() < 1e-9);
    assert!((double_support_time(&ev).unwrap() - double_support_time(&moved).unwrap()).abs() < 1e-9);
}
