//! Property tests for the invariants that must hold on all inputs.

use proptest::prelude::*;

use rotatek::cache::budget;
use rotatek::decode::{merge_partials, SoftmaxPartial};
use rotatek::harness::trace::{TensorData, TraceFile, TraceTensor};
use rotatek::linalg::{cholesky, eigh_full, gram, matmul, solve_triangular_right, Matrix};
use rotatek::metrics::{score_residual, score_residual_projector};
use rotatek::rotation::{
    build_rotation_state, centered_covariance, covariance_pair, weighted_covariance, QueryWeights,
    SubspaceConfig,
};

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (2usize..24, 2usize..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_any_pd_gram((n, extra) in (2usize..9, 0usize..6),
                                         seed in any::<u64>()) {
        let mut data = Vec::with_capacity((n + extra + 1) * n);
        let mut state = seed;
        for _ in 0..(n + extra + 1) * n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            data.push(((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0);
        }
        let a = Matrix::from_vec(n + extra + 1, n, data).unwrap();
        let mut g = gram(&a);
        for i in 0..n {
            g.set(i, i, g.get(i, i) + 0.05);
        }
        let l = cholesky(&g).unwrap().to_matrix();
        let rec = matmul(&l, &l.transpose()).unwrap();
        let rel = rec.sub(&g).unwrap().frobenius_norm() / g.frobenius_norm();
        prop_assert!(rel <= 1e-9, "relative reconstruction {rel}");
    }

    #[test]
    fn eigh_orthonormal_and_trace_complete(m in matrix_strategy(7, 7)) {
        let sym = matmul(&m, &m.transpose()).unwrap();
        let (vals, vecs) = eigh_full(&sym).unwrap();
        let defect = gram(&vecs).sub(&Matrix::identity(7)).unwrap().frobenius_norm();
        prop_assert!(defect <= 1e-9, "orthonormality defect {defect}");
        let sum: f64 = vals.iter().sum();
        let tr = sym.trace();
        prop_assert!((sum - tr).abs() <= 1e-9 * tr.abs().max(1.0));
    }

    #[test]
    fn triangular_solve_is_right_inverse(v in matrix_strategy(6, 5), a in matrix_strategy(8, 5)) {
        let mut g = gram(&a);
        for i in 0..5 {
            g.set(i, i, g.get(i, i) + 0.1);
        }
        let l = cholesky(&g).unwrap();
        let x = solve_triangular_right(&v, &l).unwrap();
        let back = matmul(&x, &l.to_matrix().transpose()).unwrap();
        let rel = back.sub(&v).unwrap().frobenius_norm() / v.frobenius_norm().max(1e-12);
        prop_assert!(rel <= 1e-9, "relative residual {rel}");
    }

    #[test]
    fn hadamard_reweighting_identity((n, d) in dims(),
                                     seed in any::<u64>(),
                                     sigma_scale in 0.0f64..3.0) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let keys = Matrix::from_vec(n, d, (0..n * d).map(|_| next()).collect()).unwrap();
        let sigma_vals: Vec<f64> = (0..d).map(|_| (next() + 1.0) * sigma_scale).collect();
        let sigma = QueryWeights::new(sigma_vals.clone()).unwrap();
        let pair = covariance_pair(&keys, &sigma).unwrap();

        // Route 1 (already in pair.weighted): Hadamard on the centered covariance.
        // Route 2: materialize (K − 1μᵀ)·diag(σ) and take the Gram.
        let (_, mu) = centered_covariance(&keys);
        let mut rescaled = keys.clone();
        for i in 0..n {
            for (j, v) in rescaled.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mu[j]) * sigma_vals[j];
            }
        }
        let oracle = gram(&rescaled);
        let denom = oracle.frobenius_norm().max(1e-300);
        let rel = pair.weighted.sub(&oracle).unwrap().frobenius_norm() / denom;
        prop_assert!(rel <= 1e-10, "relative disagreement {rel}");

        // And the entrywise definition itself.
        let direct = weighted_covariance(&pair.centered, &sigma).unwrap();
        prop_assert!(direct.sub(&pair.weighted).unwrap().frobenius_norm() == 0.0);
    }

    #[test]
    fn merge_is_associative_and_permutation_insensitive(
        scores in proptest::collection::vec(-8.0f64..8.0, 3..40),
        perm_seed in any::<u64>(),
    ) {
        let d = 3;
        let values: Vec<Vec<f64>> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| vec![s, i as f64, 1.0])
            .collect();
        let chunk = scores.len().div_ceil(4);
        let mut parts: Vec<SoftmaxPartial> = (0..4)
            .map(|c| {
                let mut p = SoftmaxPartial::empty(d);
                for i in (c * chunk).min(scores.len())..((c + 1) * chunk).min(scores.len()) {
                    p.accumulate(scores[i], values[i].iter().copied());
                }
                p
            })
            .collect();
        let reference = merge_partials(&parts).finalize(0.0);

        // Associativity.
        let left = parts[0].merge(&parts[1]).merge(&parts[2]).merge(&parts[3]);
        let right = parts[0].merge(&parts[1].merge(&parts[2].merge(&parts[3])));
        for (a, b) in left.finalize(0.0).iter().zip(right.finalize(0.0)) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        // Permutation insensitivity.
        let mut state = perm_seed;
        for i in (1..parts.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            parts.swap(i, j);
        }
        let shuffled = merge_partials(&parts).finalize(0.0);
        for (a, b) in reference.iter().zip(&shuffled) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn budget_multiplier_invariant(token in 0.01f64..1.0, channel in 0.01f64..1.0) {
        let b = budget(token, channel).unwrap();
        let expect = token * (1.0 + channel) / 2.0;
        prop_assert!((b.visual_cache_multiplier - expect).abs() <= 1e-15);
        let display = b.display_multiplier();
        prop_assert!((display * 100.0 - (display * 100.0).round()).abs() < 1e-9);
    }

    #[test]
    fn trace_roundtrip_bit_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        raw in proptest::collection::vec(-1000.0f32..1000.0, 36),
        mask in proptest::collection::vec(any::<bool>(), 1..8),
    ) {
        let layout = rotatek::cache::SequenceLayout {
            n_visual: rows,
            n_text: 0,
            d: cols,
            heads_q: 1,
            heads_kv: 1,
        };
        let values: Vec<f32> = raw[..rows * cols].to_vec();
        let trace = TraceFile {
            layout,
            tensors: vec![
                TraceTensor {
                    name: "k_visual".into(),
                    data: TensorData::F32 { shape: vec![1, rows, cols], values },
                },
                TraceTensor {
                    name: "token_mask".into(),
                    data: TensorData::U8 {
                        shape: vec![mask.len()],
                        values: mask.iter().map(|&b| u8::from(b)).collect(),
                    },
                },
            ],
        };
        let bytes = trace.to_bytes();
        let back = TraceFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &trace);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn residual_dual_path_agreement(
        (n, d) in (4usize..30, 3usize..12),
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let keys = Matrix::from_vec(n, d, (0..n * d).map(|_| next()).collect()).unwrap();
        let qw = Matrix::from_vec(6, d, (0..6 * d).map(|_| next()).collect()).unwrap();
        let k = 1 + (seed as usize % (d - 1));
        let cfg = SubspaceConfig::new(k, seed);
        let st = build_rotation_state(&keys, &qw, &cfg).unwrap();
        let q: Vec<f64> = (0..d).map(|_| next()).collect();
        let a = score_residual(&q, &keys, &st).unwrap();
        let b = score_residual_projector(&q, &keys, &st).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6, "dual-path gap {}", (x - y).abs());
        }
    }
}
