//! Property tests for the geometric building blocks.

use maha_core::aggregate::{nn_upsample, simplex_project};
use maha_core::pyramid::make_schedule;
use maha_core::tensor::adaptive_max_pool;
use maha_core::SeqMatrix;
use proptest::prelude::*;

proptest! {
    #[test]
    fn simplex_projection_lands_on_simplex(v in prop::collection::vec(-10.0f64..10.0, 1..10)) {
        let w = simplex_project(&v).unwrap();
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn simplex_projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let w = simplex_project(&v).unwrap();
        let w2 = simplex_project(&w).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_follows_index_law(
        data in prop::collection::vec(-4.0f64..4.0, 2..32),
        extra in 0usize..40,
    ) {
        let rows = data.len();
        let m = SeqMatrix::new(rows, 1, data).unwrap();
        let n = rows + extra;
        let up = nn_upsample(&m, n).unwrap();
        for i in 0..n {
            prop_assert_eq!(up.get(i, 0), m.get(i * rows / n, 0));
        }
    }

    #[test]
    fn pool_outputs_are_window_members_bounded_below_by_mean(
        data in prop::collection::vec(-4.0f64..4.0, 4..48),
        frac in 0.1f64..1.0,
    ) {
        let rows = data.len();
        let n_out = ((rows as f64 * frac) as usize).clamp(1, rows);
        let m = SeqMatrix::new(rows, 1, data).unwrap();
        let pooled = adaptive_max_pool(&m, n_out).unwrap();
        for i in 0..n_out {
            let start = i * rows / n_out;
            let end = ((i + 1) * rows).div_ceil(n_out);
            let window: Vec<f64> = (start..end).map(|r| m.get(r, 0)).collect();
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            let v = pooled.get(i, 0);
            prop_assert!(v >= mean);
            prop_assert!(window.contains(&v));
        }
    }

    #[test]
    fn schedule_lengths_decrease_and_respect_ratio(
        n in 8usize..8192,
        r in 2usize..5,
        depth in 1usize..6,
    ) {
        match make_schedule(n, r, depth) {
            Ok(s) => {
                let mut prev = n;
                for &len in &s.lengths {
                    prop_assert_eq!(len, prev / r);
                    prop_assert!(len < prev);
                    prev = len;
                }
                prop_assert!(*s.lengths.last().unwrap() >= 2);
            }
            Err(_) => {
                // Rejected exactly when the coarsest level would underflow.
                let mut cur = n;
                for _ in 0..depth {
                    cur /= r;
                }
                prop_assert!(cur < 2);
            }
        }
    }
}
