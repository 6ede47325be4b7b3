use proptest::prelude::*;
use rtnag::geometry::{chol_distance, chol_exp, chol_log, group_op, project_to_chol, wfm, CholPoint, TangentVec};
use rtnag::space::{read_point, Space};
use rtnag::{Tape, Tensor};

fn point(dim: usize) -> impl Strategy<Value = CholPoint<f64>> {
    let n = dim * (dim + 1) / 2;
    prop::collection::vec(-4.0f64..4.0, n).prop_map(move |raw| {
        let mut t = Tensor::zeros(&[dim, dim]);
        let mut k = 0;
        for i in 0..dim {
            for j in 0..=i {
                // diagonal entries become exp of a log-scale draw
                t.set(i, j, if i == j { (raw[k] / 2.0).exp() } else { raw[k] });
                k += 1;
            }
        }
        CholPoint::from_tensor(&t).unwrap()
    })
}

fn points(count: usize) -> impl Strategy<Value = Vec<CholPoint<f64>>> {
    (1usize..=6).prop_flat_map(move |d| prop::collection::vec(point(d), count))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn exp_inverts_log(p in points(1)) {
        let back = chol_exp(&chol_log(&p[0]).unwrap());
        prop_assert!(close(back.packed(), p[0].packed(), 1e-12));
    }

    #[test]
    fn log_inverts_exp(raw in (1usize..=6).prop_flat_map(|d| prop::collection::vec(-5.0f64..5.0, d * (d + 1) / 2))) {
        let x = TangentVec::from_packed(raw).unwrap();
        let back = chol_log(&chol_exp(&x)).unwrap();
        prop_assert!(close(back.packed(), x.packed(), 1e-12));
    }

    #[test]
    fn group_axioms(p in points(3)) {
        let (a, b, c) = (&p[0], &p[1], &p[2]);
        let id = CholPoint::identity(a.dim());
        prop_assert_eq!(&group_op(a, &id).unwrap(), a);
        prop_assert_eq!(group_op(a, b).unwrap(), group_op(b, a).unwrap());
        let left = group_op(&group_op(a, b).unwrap(), c).unwrap();
        let right = group_op(a, &group_op(b, c).unwrap()).unwrap();
        prop_assert!(close(left.packed(), right.packed(), 1e-12));
    }

    #[test]
    fn group_is_addition_in_log_coordinates(p in points(2)) {
        let g = chol_log(&group_op(&p[0], &p[1]).unwrap()).unwrap();
        let (la, lb) = (chol_log(&p[0]).unwrap(), chol_log(&p[1]).unwrap());
        let sum: Vec<f64> = la.packed().iter().zip(lb.packed()).map(|(x, y)| x + y).collect();
        prop_assert!(close(g.packed(), &sum, 1e-12));
    }

    #[test]
    fn wfm_matches_log_domain_average(p in points(4), logits in prop::collection::vec(-3.0f64..3.0, 4)) {
        let got = wfm(&p, &logits).unwrap();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut acc = vec![0.0; got.packed().len()];
        for (pt, w) in p.iter().zip(&e) {
            for (s, v) in acc.iter_mut().zip(chol_log(pt).unwrap().packed()) {
                *s += w / z * v;
            }
        }
        let oracle = chol_exp(&TangentVec::from_packed(acc).unwrap());
        prop_assert!(close(got.packed(), oracle.packed(), 1e-12));
    }

    #[test]
    fn distance_is_a_metric(p in points(3)) {
        let d = |a, b| chol_distance(a, b).unwrap();
        prop_assert_eq!(d(&p[0], &p[0]), 0.0);
        prop_assert_eq!(d(&p[0], &p[1]), d(&p[1], &p[0]));
        prop_assert!(d(&p[0], &p[2]) <= d(&p[0], &p[1]) + d(&p[1], &p[2]) + 1e-12);
    }

    #[test]
    fn tape_ops_agree_with_value_ops(p in points(2), w in prop::collection::vec(-3.0f64..3.0, 2)) {
        let mut tape = Tape::new();
        let a = tape.constant(p[0].to_tensor());
        let b = tape.constant(p[1].to_tensor());
        let g = Space::Manifold.group(&mut tape, a, b).unwrap();
        prop_assert!(close(read_point(&tape, g).unwrap().packed(), group_op(&p[0], &p[1]).unwrap().packed(), 1e-12));
        let logits = tape.constant(Tensor::new(vec![1, 2], w.clone()).unwrap());
        let m = Space::Manifold.wfm2(&mut tape, a, b, logits).unwrap();
        let want = wfm(&p, &w).unwrap();
        prop_assert!(close(read_point(&tape, m).unwrap().packed(), want.packed(), 1e-12));
    }

    #[test]
    fn projection_lands_on_the_manifold(raw in prop::collection::vec(-5.0f64..5.0, 16)) {
        let m = Tensor::new(vec![4, 4], raw).unwrap();
        let p = project_to_chol(&m, 1e-8).unwrap();
        prop_assert!(p.min_diagonal() >= 1e-8);
        prop_assert!(CholPoint::from_tensor(&p.to_tensor()).is_ok());
    }
}

#[test]
fn invalid_points_are_rejected() {
    assert!(CholPoint::from_packed(vec![1.0, 0.5, 0.0]).is_err());
    assert!(CholPoint::from_packed(vec![1.0, 0.5]).is_err());
    let mut t = Tensor::identity(2);
    t.set(0, 1, 1e-300);
    assert!(CholPoint::<f64>::from_tensor(&t).is_err());
    let a = CholPoint::<f64>::identity(2);
    let b = CholPoint::<f64>::identity(3);
    assert!(group_op(&a, &b).is_err());
}
