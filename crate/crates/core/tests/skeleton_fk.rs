//! Forward kinematics against an independent homogeneous-transform chain.

use kinefit_core::autodiff::{Tape, Tensor};
use kinefit_core::skeleton::{BodyScale, JointKind, Pose, SkeletonDefinition, NUM_COORDS, NUM_SCALE_GROUPS, NUM_SITES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M4 = [[f64; 4]; 4];

fn m4_mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rodrigues(axis: [f64; 3], angle: f64) -> M4 {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s, 0.0],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s, 0.0],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn translation(v: [f64; 3]) -> M4 {
    let mut m = rodrigues([1.0, 0.0, 0.0], 0.0);
    for k in 0..3 {
        m[k][3] = v[k];
    }
    m
}

fn body_scale(def: &SkeletonDefinition, b: usize, s: &BodyScale) -> f64 {
    let g = def.bodies[b].scale_group;
    if g == 0 { s.scales[0] } else { s.scales[0] * s.scales[g] }
}

fn oracle(def: &SkeletonDefinition, pose: &[f64], s: &BodyScale) -> Vec<[f64; 3]> {
    let mut frames: Vec<M4> = Vec::new();
    for (bi, body) in def.bodies.iter().enumerate() {
        let mut t = match body.parent {
            None => {
                let tr = def.root_translation_coords().map(|i| pose[i]);
                let rv = def.root_rotation_coords().map(|i| pose[i]);
                let th = (rv[0] * rv[0] + rv[1] * rv[1] + rv[2] * rv[2]).sqrt();
                let r = if th > 0.0 { rodrigues(rv.map(|v| v / th), th) } else { rodrigues([1.0, 0.0, 0.0], 0.0) };
                m4_mul(&translation(tr), &r)
            }
            Some(p) => {
                let k = body_scale(def, p, s);
                m4_mul(&frames[p], &translation(body.offset.map(|v| v * k)))
            }
        };
        for (ci, j) in def.joints.iter().enumerate() {
            if j.body == bi && j.kind == JointKind::Revolute {
                t = m4_mul(&t, &rodrigues(j.axis, pose[ci]));
            }
        }
        frames.push(t);
    }
    def.sites
        .iter()
        .enumerate()
        .map(|(i, site)| {
            let k = body_scale(def, site.body, s);
            let l: Vec<f64> = (0..3).map(|a| site.offset[a] * k + s.offsets[i][a]).collect();
            let f = &frames[site.body];
            [0, 1, 2].map(|r| f[r][0] * l[0] + f[r][1] * l[1] + f[r][2] * l[2] + f[r][3])
        })
        .collect()
}

fn random_pose(def: &SkeletonDefinition, rng: &mut ChaCha8Rng) -> Pose {
    let mut p = Pose::zeros();
    for (i, j) in def.joints.iter().enumerate() {
        p.0[i] = match j.limits {
            None => rng.random_range(-2.0..2.0),
            Some((lo, hi)) => rng.random_range(lo..hi),
        };
    }
    p
}

fn random_scale(rng: &mut ChaCha8Rng) -> BodyScale {
    let mut s = BodyScale::default();
    for v in &mut s.scales {
        *v = rng.random_range(0.7..1.4);
    }
    for o in s.offsets.iter_mut().flatten() {
        *o = rng.random_range(-0.03..0.03);
    }
    s
}

#[test]
fn knee_flexion_matches_homogeneous_chain() {
    let def = SkeletonDefinition::default_model();
    let mut pose = Pose::zeros();
    pose.0[def.coord_index("knee_angle_r").unwrap()] = 90f64.to_radians();
    let x = def.forward_kinematics(&pose, &BodyScale::default()).unwrap();
    let expect = oracle(&def, &pose.0, &BodyScale::default());
    for (a, b) in x.0.iter().zip(&expect) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }
    // with the knee flexed 90 degrees the ankle sits behind the knee
    let knee = x.0[def.site_index("RKJC").unwrap()];
    let ankle = x.0[def.site_index("RAJC").unwrap()];
    assert!((knee[1] - ankle[1]).abs() < 1e-9);
    assert!(ankle[0] < knee[0] - 0.4);
}

#[test]
fn random_poses_match_oracle() {
    let def = SkeletonDefinition::default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let pose = random_pose(&def, &mut rng);
        let s = random_scale(&mut rng);
        let x = def.forward_kinematics(&pose, &s).unwrap();
        let expect = oracle(&def, &pose.0, &s);
        for (a, b) in x.0.iter().zip(&expect) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-10, "{a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn scale_group_only_moves_its_segments() {
    let def = SkeletonDefinition::default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pose = random_pose(&def, &mut rng);
    let base = def.forward_kinematics(&pose, &BodyScale::default()).unwrap();
    let g = def.scale_groups.iter().position(|n| n == "left_thigh").unwrap();
    let mut s = BodyScale::default();
    s.scales[g] = 1.3;
    let moved = def.forward_kinematics(&pose, &s).unwrap();
    let downstream = |name: &str| {
        let mut b = def.body_index(name);
        while let Some(i) = b {
            if def.bodies[i].name == "femur_l" {
                return true;
            }
            b = def.bodies[i].parent;
        }
        false
    };
    for (i, site) in def.sites.iter().enumerate() {
        let body = &def.bodies[site.body].name;
        if downstream(body) {
            continue;
        }
        assert_eq!(base.0[i], moved.0[i], "{} moved", site.name);
    }
    assert_ne!(base.0[def.site_index("LKNE").unwrap()], moved.0[def.site_index("LKNE").unwrap()]);
}

#[test]
fn body_frames_stay_right_handed() {
    let def = SkeletonDefinition::default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let pose = random_pose(&def, &mut rng);
        let x = def.forward_kinematics(&pose, &BodyScale::default()).unwrap();
        // pelvis: forward x, up y, right z in the body frame
        let r = x.0[def.site_index("RASI").unwrap()];
        let l = x.0[def.site_index("LASI").unwrap()];
        let sacr = x.0[def.site_index("SACR").unwrap()];
        let right: Vec<f64> = (0..3).map(|k| r[k] - l[k]).collect();
        let mid: Vec<f64> = (0..3).map(|k| 0.5 * (r[k] + l[k]) - sacr[k]).collect();
        let up = [
            right[1] * mid[2] - right[2] * mid[1],
            right[2] * mid[0] - right[0] * mid[2],
            right[0] * mid[1] - right[1] * mid[0],
        ];
        let hjc = x.0[def.site_index("RHJC").unwrap()];
        let down: f64 = (0..3).map(|k| (hjc[k] - sacr[k]) * up[k]).sum();
        assert!(down < 0.0, "hip centre should lie below the pelvis plane");
    }
}

#[test]
fn tape_gradient_matches_finite_differences() {
    let def = SkeletonDefinition::default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = 2;
    let poses: Vec<f64> = (0..batch).flat_map(|_| random_pose(&def, &mut rng).0).collect();
    let s = random_scale(&mut rng);
    let w: Vec<f64> = (0..batch * NUM_SITES * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scales: Vec<f64> = s.scales.to_vec();
    let offs: Vec<f64> = s.offsets.iter().flatten().copied().collect();

    let eval = |p: &[f64], sc: &[f64], of: &[f64], grads: bool| {
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor { shape: vec![batch, NUM_COORDS], data: p.to_vec() });
        let sv = tape.leaf(Tensor { shape: vec![NUM_SCALE_GROUPS], data: sc.to_vec() });
        let ov = tape.leaf(Tensor { shape: vec![NUM_SITES, 3], data: of.to_vec() });
        let x = def.forward_kinematics_tape(&mut tape, pv, sv, ov).unwrap();
        let wv = tape.constant(Tensor { shape: vec![batch, NUM_SITES, 3], data: w.clone() });
        let y = tape.mul(x, wv).unwrap();
        let y = tape.sum(y);
        let val = tape.scalar_value(y);
        if !grads {
            return (val, vec![], vec![], vec![]);
        }
        let g = tape.backward(y).unwrap();
        (val, g.get_or_zeros(&tape, pv), g.get_or_zeros(&tape, sv), g.get_or_zeros(&tape, ov))
    };
    let (_, gp, gs, go) = eval(&poses, &scales, &offs, true);
    let h = 1e-6;
    let check = |analytic: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * h);
        assert!((analytic - fd).abs() / fd.abs().max(1.0) < 1e-6, "{analytic} vs {fd}");
    };
    for i in 0..poses.len() {
        let mut a = poses.clone();
        let mut b = poses.clone();
        a[i] += h;
        b[i] -= h;
        check(gp[i], eval(&a, &scales, &offs, false).0, eval(&b, &scales, &offs, false).0);
    }
    for i in 0..scales.len() {
        let mut a = scales.clone();
        let mut b = scales.clone();
        a[i] += h;
        b[i] -= h;
        check(gs[i], eval(&poses, &a, &offs, false).0, eval(&poses, &b, &offs, false).0);
    }
    for i in (0..offs.len()).step_by(7) {
        let mut a = offs.clone();
        let mut b = offs.clone();
        a[i] += h;
        b[i] -= h;
        check(go[i], eval(&poses, &scales, &a, false).0, eval(&poses, &scales, &b, false).0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn batch_agrees_with_single_pose(seed in any::<u64>()) {
        let def = SkeletonDefinition::default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..3).map(|_| random_pose(&def, &mut rng)).collect();
        let s = random_scale(&mut rng);
        let batch = def.forward_kinematics_batch(&poses, &s).unwrap();
        for (p, b) in poses.iter().zip(&batch) {
            prop_assert_eq!(&def.forward_kinematics(p, &s).unwrap(), b);
        }
    }
}
