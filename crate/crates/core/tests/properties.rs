//! Property suites for the autodiff engine and the gate math.
//!
//! The gradient checks compare every primitive's reverse rule against the
//! central finite-difference oracle on random shapes, steering clear of the
//! ReLU / Top-k kink points and the smooth-step region boundaries where the
//! (one-sided) derivative is not what a symmetric difference estimates.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dselect_core::gate::{
    build_per_example_dselect, build_static_dselect, ceil_log2, selector, smooth_step,
};
use dselect_core::graph::numeric_gradient;
use dselect_core::{Bindings, ExprGraph, NodeId, ParamStore, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Relative error with a small-magnitude floor: tiny gradients are dominated
/// by finite-difference truncation noise, so they are compared absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Checks analytic gradients of `loss` w.r.t. every parameter in `params`
/// against central finite differences.
fn check_graph(
    g: &ExprGraph,
    loss: NodeId,
    params: &ParamStore,
    consts: &BTreeMap<String, Tensor>,
    label: &str,
) {
    let make_bindings = |store: &ParamStore| -> f64 {
        let mut b = Bindings::new();
        b.insert_store(store);
        b.insert_map(consts);
        let trace = g.evaluate(&b).expect("forward");
        trace.value(loss).item()
    };

    let mut b = Bindings::new();
    b.insert_store(params);
    b.insert_map(consts);
    let analytic = g.gradient(loss, &b).expect("backward");

    let flat = params.flatten();
    let mut scratch = params.clone();
    let numeric = numeric_gradient(
        |p| {
            scratch.assign_flat(p);
            make_bindings(&scratch)
        },
        &flat,
        EPS,
    )
    .expect("finite differences");

    let mut at = 0;
    for (name, t) in params.iter() {
        let a = analytic.get(name).expect("gradient entry");
        for (i, &av) in a.data().iter().enumerate() {
            let nv = numeric[at + i];
            assert!(
                rel_err(av, nv) < TOL,
                "{}: parameter {}[{}] analytic {} vs numeric {}",
                label,
                name,
                i,
                av,
                nv
            );
        }
        at += t.numel();
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.random_range(lo..hi)).collect())
        .unwrap()
}

/// Values bounded away from zero (ReLU kink guard).
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| {
            let mag = rng.random_range(0.1..1.2);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn primitive_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..8 {
        let r = rng.random_range(1..=8usize);
        let c = rng.random_range(1..=8usize);
        let k = rng.random_range(1..=8usize);

        // matmul: (r x c) @ (c x k), plus the transposed variant.
        {
            let mut g = ExprGraph::new();
            let a = g.leaf("a", &[r, c], true).unwrap();
            let b = g.leaf("b", &[c, k], true).unwrap();
            let bt = g.leaf("bt", &[k, c], true).unwrap();
            let y1 = g.matmul(a, b).unwrap();
            let y2 = g.matmul_nt(a, bt).unwrap();
            let s1 = g.sum_all(y1).unwrap();
            let m2 = g.mean_all(y2).unwrap();
            let loss = g.add(s1, m2).unwrap();
            let mut params = ParamStore::new();
            params.insert("a", rand_tensor(&mut rng, &[r, c], -1.0, 1.0));
            params.insert("b", rand_tensor(&mut rng, &[c, k], -1.0, 1.0));
            params.insert("bt", rand_tensor(&mut rng, &[k, c], -1.0, 1.0));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("matmul t{trial}"));
        }

        // matvec and vecmat forms.
        {
            let mut g = ExprGraph::new();
            let m = g.leaf("m", &[r, c], true).unwrap();
            let v = g.leaf("v", &[c], true).unwrap();
            let u = g.leaf("u", &[r], true).unwrap();
            let mv = g.matmul(m, v).unwrap(); // [r]
            let um = g.matmul(u, m).unwrap(); // [c]
            let s1 = g.sum_all(mv).unwrap();
            let s2 = g.sum_all(um).unwrap();
            let loss = g.add(s1, s2).unwrap();
            let mut params = ParamStore::new();
            params.insert("m", rand_tensor(&mut rng, &[r, c], -1.0, 1.0));
            params.insert("v", rand_tensor(&mut rng, &[c], -1.0, 1.0));
            params.insert("u", rand_tensor(&mut rng, &[r], -1.0, 1.0));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("matvec t{trial}"));
        }

        // Elementwise binaries with every broadcast form, squares, scalar_mul.
        {
            let mut g = ExprGraph::new();
            let a = g.leaf("a", &[r, c], true).unwrap();
            let row = g.leaf("row", &[c], true).unwrap();
            let col = g.leaf("col", &[r, 1], true).unwrap();
            let s = g.leaf("s", &[], true).unwrap();
            let t1 = g.add(a, row).unwrap();
            let t2 = g.mul(t1, col).unwrap();
            let t3 = g.sub(t2, s).unwrap();
            let t4 = g.square(t3).unwrap();
            let t5 = g.scalar_mul(t4, 0.37).unwrap();
            let rowsum = g.sum_last_axis(t5).unwrap();
            let loss = g.mean_all(rowsum).unwrap();
            let mut params = ParamStore::new();
            params.insert("a", rand_tensor(&mut rng, &[r, c], -1.0, 1.0));
            params.insert("row", rand_tensor(&mut rng, &[c], -1.0, 1.0));
            params.insert("col", rand_tensor(&mut rng, &[r, 1], -1.0, 1.0));
            params.insert("s", rand_tensor(&mut rng, &[], -1.0, 1.0));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("broadcast t{trial}"));
        }

        // relu / exp / log / xlogx / softmax chains.
        {
            let mut g = ExprGraph::new();
            let a = g.leaf("a", &[r, c], true).unwrap();
            let pos = g.leaf("pos", &[c], true).unwrap();
            let rl = g.relu(a).unwrap();
            let sm = g.softmax(rl).unwrap();
            let lg = g.log(pos).unwrap();
            let ex = g.exp(lg).unwrap();
            let xl = g.xlogx(pos).unwrap();
            let t1 = g.add(sm, lg).unwrap();
            let t2 = g.add(t1, ex).unwrap();
            let t3 = g.add(t2, xl).unwrap();
            let loss = g.sum_all(t3).unwrap();
            let mut params = ParamStore::new();
            params.insert("a", rand_tensor_off_zero(&mut rng, &[r, c]));
            params.insert("pos", rand_tensor(&mut rng, &[c], 0.05, 2.0));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("unary t{trial}"));
        }

        // concat / slice / reshape plumbing.
        {
            let mut g = ExprGraph::new();
            let a = g.leaf("a", &[r, c], true).unwrap();
            let b = g.leaf("b", &[r, c], true).unwrap();
            let cat = g.concat(&[a, b], 1).unwrap(); // [r, 2c]
            let cat0 = g.concat(&[a, b], 0).unwrap(); // [2r, c]
            let sl = g.slice(cat, 1, c / 2, c / 2 + c).unwrap();
            let sl0 = g.slice(cat0, 0, 0, r).unwrap();
            let rs = g.reshape(sl, &[r * c]).unwrap();
            let s1 = g.sum_all(rs).unwrap();
            let sq = g.square(sl0).unwrap();
            let s2 = g.mean_all(sq).unwrap();
            let loss = g.add(s1, s2).unwrap();
            let mut params = ParamStore::new();
            params.insert("a", rand_tensor(&mut rng, &[r, c], -1.0, 1.0));
            params.insert("b", rand_tensor(&mut rng, &[r, c], -1.0, 1.0));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("shape ops t{trial}"));
        }

        // smooth_step away from the region boundaries.
        {
            let gamma = rng.random_range(0.5..2.0);
            let mut g = ExprGraph::new();
            let a = g.leaf("a", &[r], true).unwrap();
            let gn = g.scalar(gamma);
            let s = g.smooth_step(a, gn).unwrap();
            let probe = g.lit(rand_tensor(&mut rng, &[r], -1.0, 1.0));
            let w = g.mul(s, probe).unwrap();
            let loss = g.sum_all(w).unwrap();
            let half = gamma / 2.0;
            let data: Vec<f64> = (0..r)
                .map(|_| loop {
                    let v: f64 = rng.random_range(-1.5 * half..1.5 * half);
                    if (v.abs() - half).abs() > 0.05 * gamma {
                        break v;
                    }
                })
                .collect();
            let mut params = ParamStore::new();
            params.insert("a", Tensor::vector(data));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("smooth_step t{trial}"));
        }

        // Top-k softmax with a safe margin between kept and dropped logits.
        {
            let n = rng.random_range(3..=8usize);
            let kk = rng.random_range(1..n);
            let mut g = ExprGraph::new();
            let a = g.leaf("a", &[n], true).unwrap();
            let y = g.topk_softmax(a, kk).unwrap();
            let probe = g.lit(rand_tensor(&mut rng, &[n], -1.0, 1.0));
            let w = g.mul(y, probe).unwrap();
            let loss = g.sum_all(w).unwrap();
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.8).collect();
            for v in vals.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
            // Shuffle to randomize which indices survive.
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                vals.swap(i, j);
            }
            let mut params = ParamStore::new();
            params.insert("a", Tensor::vector(vals));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("topk t{trial}"));
        }

        // Stable sigmoid / softplus / BCE composites.
        {
            let mut g = ExprGraph::new();
            let a = g.leaf("a", &[r], true).unwrap();
            let sg = g.sigmoid(a).unwrap();
            let sp = g.softplus(a).unwrap();
            let labels = g.lit(Tensor::vector((0..r).map(|i| (i % 2) as f64).collect()));
            let bce = g.bce_with_logits(a, labels).unwrap();
            let t1 = g.add(sg, sp).unwrap();
            let s1 = g.sum_all(t1).unwrap();
            let loss = g.add(s1, bce).unwrap();
            let mut params = ParamStore::new();
            params.insert("a", rand_tensor_off_zero(&mut rng, &[r]));
            check_graph(&g, loss, &params, &BTreeMap::new(), &format!("composite t{trial}"));
        }
    }
}

#[test]
fn static_dselect_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(n, k) in &[(4usize, 2usize), (8, 3), (6, 2)] {
        let mut g = ExprGraph::new();
        let gamma = g.scalar(1.0);
        let nodes = build_static_dselect(&mut g, "gate", n, k, gamma, 0.5).unwrap();
        let probe = g.lit(rand_tensor(&mut rng, &[n], -1.0, 1.0));
        let dot0 = g.mul(nodes.weights, probe).unwrap();
        let dot = g.sum_all(dot0).unwrap();
        let om = g.scalar_mul(nodes.omega, 0.1).unwrap();
        let l1 = g.add(dot, om).unwrap();
        let loss = g.add(l1, nodes.phantom_penalty).unwrap();

        let m = ceil_log2(n);
        let mut params = ParamStore::new();
        params.insert("gate.alpha", rand_tensor(&mut rng, &[k], -0.5, 0.5));
        params.insert("gate.z", rand_tensor(&mut rng, &[k, m], -0.2, 0.2));
        check_graph(&g, loss, &params, &BTreeMap::new(), &format!("dselect n={n} k={k}"));
    }
}

#[test]
fn per_example_dselect_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, k, p, batch) = (8usize, 2usize, 4usize, 3usize);
    let mut g = ExprGraph::new();
    let x = g.leaf("data.x", &[batch, p], false).unwrap();
    let gamma = g.scalar(1.0);
    let nodes = build_per_example_dselect(&mut g, "gate", x, n, k, true, gamma, 0.0).unwrap();
    let probe = g.lit(rand_tensor(&mut rng, &[batch, n], -1.0, 1.0));
    let weighted = g.mul(nodes.weights, probe).unwrap();
    let per_row = g.sum_last_axis(weighted).unwrap();
    let fit = g.mean_all(per_row).unwrap();
    let om = g.scalar_mul(nodes.omega_mean, 0.05).unwrap();
    let loss = g.add(fit, om).unwrap();

    let m = ceil_log2(n);
    let mut params = ParamStore::new();
    params.insert("gate.g", rand_tensor(&mut rng, &[k, p], -0.5, 0.5));
    params.insert("gate.g_bias", rand_tensor(&mut rng, &[k], -0.1, 0.1));
    for i in 0..k {
        params.insert(format!("gate.w{i}"), rand_tensor(&mut rng, &[m, p], -0.15, 0.15));
        params.insert(format!("gate.w{i}_bias"), rand_tensor(&mut rng, &[m], -0.05, 0.05));
    }
    let mut consts = BTreeMap::new();
    consts.insert("data.x".to_string(), rand_tensor(&mut rng, &[batch, p], -1.0, 1.0));
    check_graph(&g, loss, &params, &consts, "per-example dselect");
}

#[test]
fn selector_simplex_sweep() {
    // Prop 2: r(S(z)) lies on the probability simplex for any real z.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let m = rng.random_range(1..=5usize);
        let gamma = rng.random_range(0.2..3.0);
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s: Vec<f64> = z.iter().map(|&t| smooth_step(t, gamma).unwrap()).collect();
        let r = selector(&s);
        assert_eq!(r.len(), 1 << m);
        assert!(r.iter().all(|&v| v >= 0.0));
        let sum: f64 = r.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum {} for z {:?}", sum, z);
    }
}

#[test]
fn selector_recursive_identity() {
    // Appending an encoding variable scales the low half by 1 - S(v) and the
    // high half by S(v).
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for _ in 0..2_000 {
        let t = rng.random_range(1..=4usize);
        let gamma = 1.0;
        let v: Vec<f64> = (0..t + 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = v.iter().map(|&x| smooth_step(x, gamma).unwrap()).collect();
        let full = selector(&s);
        let prefix = selector(&s[..t]);
        let st1 = s[t];
        for i in 0..(1 << t) {
            assert!((full[i] - prefix[i] * (1.0 - st1)).abs() < 1e-12);
            assert!((full[i + (1 << t)] - prefix[i] * st1).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn smooth_step_is_monotone_and_bounded(t1 in -3.0f64..3.0, t2 in -3.0f64..3.0, gamma in 0.1f64..4.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = smooth_step(lo, gamma).unwrap();
        let b = smooth_step(hi, gamma).unwrap();
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn selector_of_unit_box_is_a_distribution(z in prop::collection::vec(0.0f64..=1.0, 1..=5)) {
        let r = selector(&z);
        prop_assert!(r.iter().all(|&v| v >= 0.0));
        let sum: f64 = r.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_referential_transparency(vals in prop::collection::vec(-2.0f64..2.0, 4)) {
        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[4], false).unwrap();
        let sm = g.softmax(x).unwrap();
        let e = g.exp(sm).unwrap();
        let s = g.sum_all(e).unwrap();
        let xv = Tensor::vector(vals);
        let mut b = Bindings::new();
        b.insert("x", &xv);
        let v1 = g.evaluate(&b).unwrap().value(s).item();
        let v2 = g.evaluate(&b).unwrap().value(s).item();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
    }
}
