//! Property tests for the kernel invariants and the metric identities.

use proptest::prelude::*;

use lmam_core::fusion::{build_fusion, FusionMethod, FusionOptions};
use lmam_core::lowrank::LowRankWeight;
use lmam_core::matrix::{concat_cols, split_cols, Matrix};
use lmam_core::metrics::ConfusionMatrix;
use lmam_core::rng::Rng;

fn matrix_strategy(rows: usize, cols: usize, bound: f64) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-bound..bound, rows * cols)
        .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..6,
        scale in 1f64..1e4,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let mut x = Matrix::zeros(rows, cols);
        for v in x.data_mut() {
            *v = rng.uniform_in(-1.0, 1.0) * scale;
        }
        let y = x.softmax_rows();
        prop_assert!(y.is_finite());
        for r in 0..rows {
            let sum: f64 = y.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            prop_assert!(y.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(m in matrix_strategy(3, 6, 5.0)) {
        let gain = Matrix::ones(1, 6);
        let bias = Matrix::zeros(1, 6);
        // The standardization property is checked with a negligible epsilon;
        // the attention layers run with 1e-5, which deliberately damps rows
        // whose variance is comparable to it.
        let y = m.layer_norm_rows(&gain, &bias, 1e-12).unwrap();
        for r in 0..3 {
            let row = m.row(r);
            let mean_in = row.iter().sum::<f64>() / 6.0;
            let var_in = row.iter().map(|x| (x - mean_in) * (x - mean_in)).sum::<f64>() / 6.0;
            let out = y.row(r);
            let mean = out.iter().sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-9, "mean {mean}");
            if var_in >= 1e-3 {
                let var = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 6.0;
                prop_assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop_oracle(
        a_rows in 1usize..=8,
        inner in 1usize..=8,
        b_cols in 1usize..=8,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let a = Matrix::uniform_init(&mut rng, a_rows, inner, 1);
        let b = Matrix::uniform_init(&mut rng, inner, b_cols, 1);
        let c = a.matmul(&b).unwrap();
        for i in 0..a_rows {
            for j in 0..b_cols {
                let mut s = 0.0;
                for k in 0..inner {
                    s += a[(i, k)] * b[(k, j)];
                }
                prop_assert!((c[(i, j)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_involution_and_concat_split_roundtrip(
        m in matrix_strategy(4, 5, 10.0),
        n in matrix_strategy(4, 3, 10.0),
    ) {
        prop_assert_eq!(m.transpose().transpose(), m.clone());
        let joined = concat_cols(&[&m, &n]).unwrap();
        let parts = split_cols(&joined, &[5, 3]).unwrap();
        prop_assert_eq!(&parts[0], &m);
        prop_assert_eq!(&parts[1], &n);
    }

    #[test]
    fn low_rank_apply_agrees_with_dense_path(
        d_in in 2usize..=16,
        d_out in 2usize..=16,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let max_rank = d_in.min(d_out);
        let rank = 1 + (seed as usize % max_rank);
        let w = LowRankWeight::init(&mut rng, d_in, d_out, rank).unwrap();
        let x = Matrix::uniform_init(&mut rng, 4, d_in, 1);
        let fast = w.apply(&x).unwrap();
        let dense = x.matmul(&w.reconstruct()).unwrap().add_row(&w.bias).unwrap();
        let diff = fast.sub(&dense).unwrap().frobenius_norm();
        prop_assert!(diff < 1e-10, "diff {diff}");
    }

    #[test]
    fn fusion_layers_keep_the_shape_contract(
        d_t in 1usize..=6,
        d_a in 1usize..=6,
        d_v in 1usize..=6,
        l in 1usize..=5,
        seed in 0u64..100,
    ) {
        let mut rng = Rng::new(seed);
        let dims = [d_t, d_a, d_v];
        for method in FusionMethod::ALL {
            let opts = FusionOptions { rank: Some(1), ..FusionOptions::default() };
            let mut layer = build_fusion(&mut rng, method, &dims, &opts).unwrap();
            let parts: Vec<Matrix> =
                dims.iter().map(|&d| Matrix::uniform_init(&mut rng, l, d, 1)).collect();
            let refs: Vec<&Matrix> = parts.iter().collect();
            let out = layer.forward(&refs).unwrap();
            prop_assert_eq!(out.rows(), l);
            prop_assert_eq!(out.cols(), layer.output_dim());
            prop_assert!(out.is_finite());
        }
    }

    #[test]
    fn weighted_f1_is_the_support_weighted_mean(
        counts in proptest::collection::vec(0usize..40, 9),
    ) {
        let rows: Vec<Vec<usize>> = counts.chunks(3).map(|c| c.to_vec()).collect();
        let total: usize = counts.iter().sum();
        prop_assume!(total > 0);
        let cm = ConfusionMatrix::from_counts(&rows).unwrap();
        let m = cm.metrics().unwrap();

        // Independent scalar route over the raw counts.
        let mut expected = 0.0;
        for k in 0..3 {
            let support: usize = rows[k].iter().sum();
            let tp = rows[k][k];
            let predicted: usize = (0..3).map(|t| rows[t][k]).sum();
            let p = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
            let r = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            expected += support as f64 / total as f64 * f1;
        }
        prop_assert!((m.weighted_f1 - expected).abs() < 1e-12);

        // And the identity against the reported per-class scores.
        let identity: f64 = m
            .per_class
            .iter()
            .map(|c| c.support as f64 / total as f64 * c.f1)
            .sum();
        prop_assert!((m.weighted_f1 - identity).abs() < 1e-12);
    }
}
