//! Property-based checks over the numeric kernels.

use proptest::prelude::*;

use scl::tensor::ComputationRecord;
use scl::Tensor64;

fn finite_vals(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax rows sum to one and stay in (0, 1], including rows whose
    /// logit range exceeds 500.
    #[test]
    fn softmax_rows_are_distributions(
        vals in finite_vals(4 * 6, -400.0, 400.0),
        shift in -300.0f64..300.0,
    ) {
        let mut vals = vals;
        vals[0] += shift + 400.0; // force at least one extreme row range
        let mut rec = ComputationRecord::<f64>::new();
        let x = rec.leaf(Tensor64::new(vec![4, 6], vals).unwrap());
        let y = rec.softmax_rows(x).unwrap();
        let out = rec.value(y);
        for i in 0..4 {
            let row: Vec<f64> = (0..6).map(|j| out.at2(i, j)).collect();
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p <= 1.0));
        }
    }

    /// Row l2-normalization is invariant to positive per-row rescaling
    /// across six orders of magnitude.
    #[test]
    fn l2_normalize_scale_invariant(
        vals in finite_vals(3 * 8, -5.0, 5.0),
        scales in prop::collection::vec(1e-3f64..1e3, 3),
    ) {
        // keep rows away from zero so the eps guard is not in play
        let mut vals = vals;
        for i in 0..3 {
            vals[i * 8] += 6.0;
        }
        let scaled: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(idx, &v)| v * scales[idx / 8])
            .collect();
        let norm = |v: Vec<f64>| {
            let mut rec = ComputationRecord::<f64>::new();
            let x = rec.leaf(Tensor64::new(vec![3, 8], v).unwrap());
            let y = rec.l2_normalize_rows(x, 1e-12).unwrap();
            rec.value(y).data().to_vec()
        };
        let a = norm(vals);
        let b = norm(scaled);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    /// (A B) C equals A (B C) to within floating-point tolerance.
    #[test]
    fn matmul_associative(
        a in finite_vals(3 * 4, -2.0, 2.0),
        b in finite_vals(4 * 5, -2.0, 2.0),
        c in finite_vals(5 * 2, -2.0, 2.0),
    ) {
        let run = |left_first: bool| {
            let mut rec = ComputationRecord::<f64>::new();
            let ta = rec.leaf(Tensor64::new(vec![3, 4], a.clone()).unwrap());
            let tb = rec.leaf(Tensor64::new(vec![4, 5], b.clone()).unwrap());
            let tc = rec.leaf(Tensor64::new(vec![5, 2], c.clone()).unwrap());
            let out = if left_first {
                let ab = rec.matmul(ta, tb).unwrap();
                rec.matmul(ab, tc).unwrap()
            } else {
                let bc = rec.matmul(tb, tc).unwrap();
                rec.matmul(ta, bc).unwrap()
            };
            rec.value(out).data().to_vec()
        };
        for (x, y) in run(true).iter().zip(run(false).iter()) {
            let tol = 1e-4 * x.abs().max(y.abs()).max(1.0);
            prop_assert!((x - y).abs() <= tol);
        }
    }
}
