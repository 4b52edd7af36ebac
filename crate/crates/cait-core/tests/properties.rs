//! Property tests over the tensor ops.

use cait_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn finite_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1e3f64..1e3, r * c)
            .prop_map(move |data| Tensor::matrix(r, c, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(t in finite_matrix(6, 9)) {
        let cols = t.cols();
        let mut tape = Tape::new();
        let id = tape.constant(t).unwrap();
        let s = tape.softmax(id).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn transpose_is_an_involution(t in finite_matrix(7, 7)) {
        let mut tape = Tape::new();
        let id = tape.constant(t.clone()).unwrap();
        let once = tape.transpose(id).unwrap();
        let twice = tape.transpose(once).unwrap();
        prop_assert_eq!(tape.value(twice).data(), t.data());
    }

    #[test]
    fn reshape_preserves_data(t in finite_matrix(5, 8)) {
        let n = t.numel();
        let mut tape = Tape::new();
        let id = tape.constant(t.clone()).unwrap();
        let flat = tape.reshape(id, vec![n]).unwrap();
        prop_assert_eq!(tape.value(flat).data(), t.data());
        let back = tape.reshape(flat, t.shape().to_vec()).unwrap();
        prop_assert_eq!(tape.value(back).data(), t.data());
    }

    #[test]
    fn unit_diagonal_scaling_is_identity(t in finite_matrix(5, 6)) {
        let cols = t.cols();
        let mut tape = Tape::new();
        let id = tape.constant(t.clone()).unwrap();
        let ones = tape.constant(Tensor::full(vec![cols], 1.0)).unwrap();
        let scaled = tape.scale_rows(id, ones).unwrap();
        prop_assert_eq!(tape.value(scaled).data(), t.data());
    }

    #[test]
    fn concat_then_slice_recovers_rows(
        a in finite_matrix(4, 5),
        rows in 1usize..4,
    ) {
        let cols = a.cols();
        let b = Tensor::full(vec![rows, cols], 0.25);
        let mut tape = Tape::new();
        let ia = tape.constant(a.clone()).unwrap();
        let ib = tape.constant(b).unwrap();
        let cat = tape.concat_rows(&[ia, ib]).unwrap();
        let back = tape.slice_rows(cat, 0, a.rows()).unwrap();
        prop_assert_eq!(tape.value(back).data(), a.data());
    }
}
