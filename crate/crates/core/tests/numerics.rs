use proptest::prelude::*;
use taco_core::numerics::ops::{kl_uniform, layer_norm, log_softmax_masked, softmax_row};
use taco_core::numerics::{grad_check, GradCheckOptions, Graph, MaskLayout, NodeId, ParamStore, Rng, Tensor};
use taco_core::Result;

fn store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = Rng::new(seed);
    let mut p = ParamStore::new();
    for &(name, r, c) in shapes {
        p.add(name, Tensor::matrix(r, c, rng.normal_vec(r * c, 0.7)).unwrap()).unwrap();
    }
    p
}

fn check<F>(shapes: &[(&str, usize, usize)], f: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let p = store(shapes, 11);
    let ids: Vec<_> = p.ids().collect();
    let rep = grad_check(
        |g, s| {
            let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &nodes)
        },
        &p,
        GradCheckOptions { tol: 1e-6, floor: 1e-4, ..Default::default() },
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

/// Contract to a scalar with fixed weights so every output entry matters.
fn weigh(g: &mut Graph, x: NodeId) -> NodeId {
    let v = g.value(x);
    let w = Tensor::matrix(v.rows(), v.cols(), (0..v.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
    let w = g.constant(w);
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

#[test]
fn matmul_family_gradients() {
    check(&[("a", 3, 4), ("b", 4, 5), ("c", 5, 4)], |g, n| {
        let ab = g.matmul(n[0], n[1])?;
        let act = g.matmul_t(n[0], n[2])?;
        let s = g.add(ab, act)?;
        let t = g.transpose(s);
        let tt = g.matmul(t, n[0])?;
        Ok(weigh(g, tt))
    });
}

#[test]
fn elementwise_and_broadcast_gradients() {
    check(&[("a", 3, 4), ("b", 3, 4), ("r", 1, 4), ("c", 3, 1), ("s", 1, 1)], |g, n| {
        let x = g.sub(n[0], n[1])?;
        let x = g.mul(x, n[1])?;
        let x = g.add_row(x, n[2])?;
        let x = g.mul_row(x, n[2])?;
        let x = g.mul_col(x, n[3])?;
        let x = g.scale_by(x, n[4])?;
        let x = g.add_scalar(x, 0.3);
        let y = g.sigmoid(x);
        let z = g.gelu(x);
        let w = g.add(y, z)?;
        let q = g.sq_norm(n[0]);
        let a = weigh(g, w);
        g.add(a, q)
    });
}

#[test]
fn softmax_and_layer_norm_gradients() {
    check(&[("x", 3, 5), ("g", 1, 5), ("b", 1, 5)], |g, n| {
        let s = g.softmax(n[0])?;
        let l = g.layer_norm(n[0], n[1], n[2], 1e-5)?;
        let a = weigh(g, s);
        let b = weigh(g, l);
        g.add(a, b)
    });
}

#[test]
fn structural_op_gradients() {
    check(&[("a", 4, 3), ("b", 4, 2), ("c", 2, 3)], |g, n| {
        let cc = g.concat_cols(&[n[0], n[1]])?;
        let sc = g.slice_cols(cc, 1, 3)?;
        let cr = g.concat_rows(&[sc, n[2]])?;
        let sr = g.slice_rows(cr, 1, 4)?;
        let gr = g.gather_rows(sr, &[3, 0, 3, 2])?;
        Ok(weigh(g, gr))
    });
}

#[test]
fn cosine_gradient() {
    check(&[("a", 3, 4), ("b", 5, 4)], |g, n| {
        let c = g.cosine(n[0], n[1])?;
        Ok(weigh(g, c))
    });
}

#[test]
fn neg_log_capped_gradient() {
    let mut p = ParamStore::new();
    let x = p.add("x", Tensor::column(&[0.3, 0.8, 0.05])).unwrap();
    let rep = grad_check(
        |g, s| {
            let n = g.param(s, x);
            let l = g.neg_log_capped(n, 20.0);
            Ok(weigh(g, l))
        },
        &p,
        GradCheckOptions { tol: 1e-6, floor: 1e-4, ..Default::default() },
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn task_mask_and_kl_gradients() {
    let layout = MaskLayout { len: 5, query_pos: 1, icd_positions: vec![2, 3, 4], scale: 0.5, literal_query_branch: false };
    let mut p = ParamStore::new();
    let mut rng = Rng::new(3);
    let tok = p.add("tok", Tensor::matrix(5, 3, rng.normal_vec(15, 1.0)).unwrap()).unwrap();
    let nlt = p.add("nlt", Tensor::column(&[0.4, 1.1, 0.2, 0.9, 0.6])).unwrap();
    let alpha = p.add("alpha", Tensor::scalar(1.3)).unwrap();
    let rep = grad_check(
        |g, s| {
            let t = g.param(s, tok);
            let c = g.cosine(t, t)?;
            let (n, a) = (g.param(s, nlt), g.param(s, alpha));
            let m = g.task_mask(c, n, a, layout.clone())?;
            g.kl_uniform_rows(m, &[2, 3, 4])
        },
        &p,
        GradCheckOptions { tol: 1e-6, floor: 1e-4, ..Default::default() },
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn cross_entropy_gradient_with_exclusions() {
    check(&[("l", 3, 6)], |g, n| g.cross_entropy(n[0], &[2, 0, 5], &[vec![], vec![2], vec![2, 0]]));
}

#[test]
fn simplex_cap_gradient() {
    let mut p = ParamStore::new();
    // Rows inside and outside the cap.
    let f = p.add("f", Tensor::from_rows(&[vec![0.8, 0.1, 0.1], vec![0.34, 0.33, 0.33]]).unwrap()).unwrap();
    let rep = grad_check(
        |g, s| {
            let n = g.param(s, f);
            let c = g.simplex_cap(n, 0.5);
            Ok(weigh(g, c))
        },
        &p,
        GradCheckOptions { tol: 1e-6, floor: 1e-4, ..Default::default() },
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(2, 2));
    assert!(g.backward(x).is_err());
}

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..12)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(row in row_strategy()) {
        let mut out = vec![0.0; row.len()];
        softmax_row(&row, &mut out).unwrap();
        let s: f64 = out.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn softmax_is_shift_invariant(row in row_strategy(), c in -50.0f64..50.0) {
        let mut a = vec![0.0; row.len()];
        let mut b = vec![0.0; row.len()];
        softmax_row(&row, &mut a).unwrap();
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        softmax_row(&shifted, &mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_log_softmax_normalizes_over_kept(row in prop::collection::vec(-10.0f64..10.0, 2..10), drop in 0usize..10) {
        let drop = drop % row.len();
        let lp = log_softmax_masked(&row, &[drop]).unwrap();
        prop_assert_eq!(lp[drop], f64::NEG_INFINITY);
        let s: f64 = lp.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_to_uniform_is_non_negative(row in prop::collection::vec(0.0f64..1.0, 2..10)) {
        let s: f64 = row.iter().sum();
        prop_assume!(s > 1e-6);
        let p: Vec<f64> = row.iter().map(|x| x / s).collect();
        prop_assert!(kl_uniform(&p).unwrap() >= -1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardized(row in prop::collection::vec(-5.0f64..5.0, 3..16)) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        prop_assume!(row.iter().any(|x| (x - mean).abs() > 1e-3));
        let x = Tensor::row(&row);
        let n = row.len();
        let y = layer_norm(&x, &Tensor::filled(1, n, 1.0), &Tensor::zeros(1, n), 0.0).unwrap();
        let m = y.data().iter().sum::<f64>() / n as f64;
        let v = y.data().iter().map(|t| (t - m) * (t - m)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-9);
        prop_assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..500) {
        let mut rng = Rng::new(seed);
        let a = Tensor::matrix(2, 3, rng.normal_vec(6, 1.0)).unwrap();
        let b = Tensor::matrix(3, 4, rng.normal_vec(12, 1.0)).unwrap();
        let c = Tensor::matrix(4, 2, rng.normal_vec(8, 1.0)).unwrap();
        let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(l.max_abs_diff(&r) < 1e-10);
    }

    #[test]
    fn rng_sampling_is_distinct_and_in_range(seed in any::<u64>(), n in 1usize..50, k in 0usize..50) {
        let k = k.min(n);
        let s = Rng::new(seed).sample_distinct(n, k);
        let mut t = s.clone();
        t.sort_unstable();
        t.dedup();
        prop_assert_eq!(t.len(), k);
        prop_assert!(s.iter().all(|&i| i < n));
    }
}
