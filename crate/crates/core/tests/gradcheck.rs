//! Central finite-difference checks of every tape primitive and of randomly
//! composed graphs.

use kinefit_core::autodiff::{Pinhole, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compares tape gradients against central differences for every input
/// element and returns the worst relative error.
fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let out = build(&mut t, &vars);
        t.scalar_value(out)
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
    let out = build(&mut t, &vars);
    let grads = t.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(&t, vars[k]);
        for i in 0..input.data.len() {
            let mut plus = inputs.to_vec();
            plus[k].data[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data[i] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(g[i], fd));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
    // a fixed random projection so every output element matters
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.shape(x).to_vec().as_slice(), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], 0.2, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4], -2.0, -0.2);
    type Build = fn(&mut Tape, &[Var]) -> Var;
    let cases: Vec<(&str, Build)> = vec![
        ("add", |t, v| { let y = t.add(v[0], v[1]).unwrap(); weighted_sum(t, y, 9) }),
        ("sub", |t, v| { let y = t.sub(v[0], v[1]).unwrap(); weighted_sum(t, y, 9) }),
        ("mul", |t, v| { let y = t.mul(v[0], v[1]).unwrap(); weighted_sum(t, y, 9) }),
        ("div", |t, v| { let y = t.div(v[0], v[1]).unwrap(); weighted_sum(t, y, 9) }),
        ("atan2", |t, v| { let y = t.atan2(v[0], v[1]).unwrap(); weighted_sum(t, y, 9) }),
        ("tanh", |t, v| { let y = t.tanh(v[1]); weighted_sum(t, y, 9) }),
        ("sin", |t, v| { let y = t.sin(v[0]); weighted_sum(t, y, 9) }),
        ("cos", |t, v| { let y = t.cos(v[0]); weighted_sum(t, y, 9) }),
        ("sqrt", |t, v| { let y = t.sqrt(v[0]); weighted_sum(t, y, 9) }),
        ("abs", |t, v| { let y = t.abs(v[1]); weighted_sum(t, y, 9) }),
        ("neg", |t, v| { let y = t.neg(v[1]); weighted_sum(t, y, 9) }),
        ("scale", |t, v| { let y = t.scale(v[1], 2.5); weighted_sum(t, y, 9) }),
        ("add_scalar", |t, v| { let y = t.add_scalar(v[1], 2.5); let y = t.mul(y, y).unwrap(); weighted_sum(t, y, 9) }),
        ("huber", |t, v| { let y = t.huber(v[1], 1.0).unwrap(); weighted_sum(t, y, 9) }),
        ("sum", |t, v| { let y = t.mul(v[0], v[0]).unwrap(); t.sum(y) }),
        ("mean", |t, v| { let y = t.mul(v[0], v[1]).unwrap(); t.mean(y).unwrap() }),
        ("sum_axis", |t, v| { let y = t.sum_axis(v[0], 1).unwrap(); let y = t.mul(y, y).unwrap(); weighted_sum(t, y, 9) }),
        ("norm_last", |t, v| { let y = t.norm_last(v[1]).unwrap(); weighted_sum(t, y, 9) }),
        ("reshape", |t, v| { let y = t.reshape(v[0], &[4, 3]).unwrap(); let y = t.sin(y); weighted_sum(t, y, 9) }),
        ("concat0", |t, v| { let y = t.concat(&[v[0], v[1]], 0).unwrap(); let y = t.sin(y); weighted_sum(t, y, 9) }),
        ("concat1", |t, v| { let y = t.concat(&[v[0], v[1], v[0]], 1).unwrap(); let y = t.sin(y); weighted_sum(t, y, 9) }),
        ("index_select", |t, v| { let y = t.index_select(v[0], 1, &[3, 0, 0, 2]).unwrap(); let y = t.sin(y); weighted_sum(t, y, 9) }),
        ("broadcast_row", |t, v| { let r = t.sum_axis(v[1], 0).unwrap(); let y = t.mul(v[0], r).unwrap(); weighted_sum(t, y, 9) }),
        ("broadcast_col", |t, v| { let r = t.sum_axis(v[1], 1).unwrap(); let r = t.reshape(r, &[3, 1]).unwrap(); let y = t.div(v[0], r).unwrap(); weighted_sum(t, y, 9) }),
        ("matmul", |t, v| { let bt = t.reshape(v[1], &[4, 3]).unwrap(); let y = t.matmul(v[0], bt).unwrap(); weighted_sum(t, y, 9) }),
    ];
    for (name, build) in cases {
        let err = check(&[a.clone(), b.clone()], build);
        assert!(err < TOL, "{name}: relative error {err}");
    }
}

#[test]
fn batch_matmul_all_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for ta in [false, true] {
        for tb in [false, true] {
            let sa = if ta { [5, 4, 2] } else { [5, 2, 4] };
            let sb = if tb { [5, 3, 4] } else { [5, 4, 3] };
            let a = rand_tensor(&mut rng, &sa, -1.0, 1.0);
            let b = rand_tensor(&mut rng, &sb, -1.0, 1.0);
            let err = check(&[a.clone(), b.clone()], |t, v| {
                let y = t.batch_matmul(v[0], v[1], ta, tb).unwrap();
                weighted_sum(t, y, 3)
            });
            assert!(err < TOL, "batched ta={ta} tb={tb}: {err}");
            // unbatched left operand broadcast over the batch
            let a2 = rand_tensor(&mut rng, &sa[1..], -1.0, 1.0);
            let err = check(&[a2, b.clone()], |t, v| {
                let y = t.batch_matmul(v[0], v[1], ta, tb).unwrap();
                weighted_sum(t, y, 3)
            });
            assert!(err < TOL, "broadcast-left ta={ta} tb={tb}: {err}");
            let b2 = rand_tensor(&mut rng, &sb[1..], -1.0, 1.0);
            let err = check(&[a, b2], |t, v| {
                let y = t.batch_matmul(v[0], v[1], ta, tb).unwrap();
                weighted_sum(t, y, 3)
            });
            assert!(err < TOL, "broadcast-right ta={ta} tb={tb}: {err}");
        }
    }
}

#[test]
fn rigid_body_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = rand_tensor(&mut rng, &[6], -3.0, 3.0);
    let err = check(&[theta], |t, v| {
        let r = t.axis_rotation(v[0], [0.3, -0.5, 0.8]).unwrap();
        weighted_sum(t, r, 4)
    });
    assert!(err < TOL, "axis_rotation: {err}");

    // rotation vectors spanning tiny, series-boundary and large angles
    let mut rv = Vec::new();
    for scale in [1e-9, 1e-4, 9e-3, 1.1e-2, 0.5, 2.0, 3.1] {
        let d: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        rv.extend(d.iter().map(|x| x / n * scale));
    }
    let rv = Tensor::new(&[7, 3], rv).unwrap();
    let err = check(std::slice::from_ref(&rv), |t, v| {
        let r = t.rotvec_to_matrix(v[0]).unwrap();
        weighted_sum(t, r, 5)
    });
    assert!(err < TOL, "rotvec_to_matrix: {err}");
    let err = check(&[rv], |t, v| {
        let q = t.rotvec_to_quat(v[0]).unwrap();
        weighted_sum(t, q, 6)
    });
    assert!(err < TOL, "rotvec_to_quat: {err}");

    let mut pts = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    for p in pts.data.chunks_mut(3) {
        p[2] = p[2].abs() + 1.0;
    }
    let k = Pinhole { fx: 900.0, fy: 950.0, cx: 500.0, cy: 800.0 };
    let err = check(&[pts], |t, v| {
        let u = t.project(v[0], k).unwrap();
        let u = t.scale(u, 1e-3);
        weighted_sum(t, u, 7)
    });
    assert!(err < TOL, "project: {err}");
}

#[test]
fn project_masks_points_behind_camera() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2, 3], vec![0.1, 0.2, -1.0, 0.1, 0.2, 2.0]).unwrap());
    let u = t.project(x, Pinhole { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 }).unwrap();
    assert_eq!(&t.value(u)[..2], &[0.0, 0.0]);
    let s = t.sum(u);
    let g = t.backward(s).unwrap();
    assert_eq!(&g.get(x).unwrap()[..3], &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[8, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[5, 7], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let (va, vw) = (t.leaf(a.clone()), t.leaf(w.clone()));
        let h = t.matmul(va, vw).unwrap();
        let h = t.tanh(h);
        let h = t.huber(h, 0.3).unwrap();
        let l = t.mean(h).unwrap();
        let g = t.backward(l).unwrap();
        (g.get(va).unwrap().to_vec(), g.get(vw).unwrap().to_vec())
    };
    let (g1, g2) = (run(), run());
    assert_eq!(
        g1.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        g2.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        g1.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        g2.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

/// One step of a random graph: combines pool entries into a new `[2,3]` node.
fn apply(t: &mut Tape, pool: &mut Vec<Var>, w: Var, code: u8, i: usize, j: usize) {
    let (a, b) = (pool[i % pool.len()], pool[j % pool.len()]);
    let y = match code % 17 {
        0 => t.add(a, b).unwrap(),
        1 => t.sub(a, b).unwrap(),
        2 => t.mul(a, b).unwrap(),
        3 => {
            let d = t.mul(b, b).unwrap();
            let d = t.add_scalar(d, 1.0);
            t.div(a, d).unwrap()
        }
        4 => t.tanh(a),
        5 => t.sin(a),
        6 => t.cos(a),
        7 => {
            let s = t.mul(a, a).unwrap();
            let s = t.add_scalar(s, 0.5);
            t.sqrt(s)
        }
        8 => t.huber(a, 0.7).unwrap(),
        9 => {
            let m = t.matmul(a, w).unwrap();
            t.tanh(m)
        }
        10 => t.atan2(a, b).unwrap(),
        11 => {
            let s = t.add_scalar(a, 5.0);
            t.abs(s)
        }
        12 => {
            let r = t.sum_axis(b, 0).unwrap();
            t.add(a, r).unwrap()
        }
        13 => {
            let c = t.concat(&[a, b], 1).unwrap();
            t.index_select(c, 1, &[0, 4, 2]).unwrap()
        }
        14 => {
            let n = t.norm_last(b).unwrap();
            let n = t.reshape(n, &[2, 1]).unwrap();
            let n = t.add_scalar(n, 1.0);
            t.div(a, n).unwrap()
        }
        15 => t.scale(a, 0.7),
        _ => t.neg(a),
    };
    pool.push(y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_graphs_match_finite_differences(
        ops in prop::collection::vec((any::<u8>(), any::<usize>(), any::<usize>()), 1..=20),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 3], -0.8, 0.8),
        ];
        let err = check(&inputs, |t, v| {
            let mut pool = vec![v[0], v[1]];
            for (code, i, j) in &ops {
                apply(t, &mut pool, v[2], *code, *i, *j);
            }
            let last = *pool.last().unwrap();
            let s = t.mul(last, last).unwrap();
            t.mean(s).unwrap()
        });
        prop_assert!(err < TOL, "relative error {}", err);
    }
}
