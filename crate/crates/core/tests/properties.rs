//! Property tests for the algebraic invariants.

use proptest::prelude::*;

use mpt_core::numerics::{add, hadamard, matmul, outer, scale, softmax_with_temperature, Matrix, Vector};
use mpt_core::prompts::{chain_gradients, compose, SharedPrompt, TaskFactors};
use mpt_core::Rng;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    finite_vec(rows * cols).prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
}

fn vector(len: usize) -> impl Strategy<Value = Vector> {
    finite_vec(len).prop_map(|data| Vector::from_vec(data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hadamard_commutes(a in matrix(4, 6), b in matrix(4, 6)) {
        prop_assert_eq!(hadamard(&a, &b).unwrap(), hadamard(&b, &a).unwrap());
    }

    #[test]
    fn matmul_associates_within_tolerance(
        a in matrix(8, 8),
        b in matrix(8, 8),
        c in matrix(8, 8),
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let denom = left.frob_norm().max(right.frob_norm()).max(1.0);
        let mut diff = left.clone();
        diff.add_scaled(&right, -1.0).unwrap();
        prop_assert!(diff.frob_norm() / denom < 1e-9);
    }

    #[test]
    fn outer_product_has_rank_at_most_one(u in vector(5), v in vector(7)) {
        let m = outer(&u, &v).unwrap();
        let bound = 1e-12 * (1.0 + m.max_abs() * m.max_abs());
        for i in 0..4 {
            for j in 0..6 {
                let minor = m.get(i, j) * m.get(i + 1, j + 1) - m.get(i, j + 1) * m.get(i + 1, j);
                prop_assert!(minor.abs() <= bound, "minor {minor} at ({i},{j})");
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_shifts_cancel(
        z in finite_vec(9),
        shift in -30.0f64..30.0,
        temp in 0.1f64..20.0,
    ) {
        let base = softmax_with_temperature(&Vector::from_vec(z.clone()).unwrap(), temp).unwrap();
        let sum: f64 = base.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let moved = softmax_with_temperature(&Vector::from_vec(shifted).unwrap(), temp).unwrap();
        for (a, b) in base.as_slice().iter().zip(moved.as_slice().iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn add_and_scale_are_linear(a in matrix(3, 4), b in matrix(3, 4), s in -4.0f64..4.0) {
        let left = scale(&add(&a, &b).unwrap(), s);
        let right = add(&scale(&a, s), &scale(&b, s)).unwrap();
        let mut diff = left.clone();
        diff.add_scaled(&right, -1.0).unwrap();
        prop_assert!(diff.frob_norm() < 1e-9 * (1.0 + left.frob_norm()));
    }

    // The composed prompt divided by the shared matrix is a rank-one grid:
    // its 2x2 minors vanish.
    #[test]
    fn composed_over_shared_is_rank_one(
        shared_data in proptest::collection::vec(0.1f64..4.0, 4 * 5),
        u in proptest::collection::vec(-2.0f64..2.0, 4),
        v in proptest::collection::vec(-2.0f64..2.0, 5),
    ) {
        let shared = SharedPrompt {
            matrix: Matrix::from_vec(4, 5, shared_data).unwrap(),
        };
        let factors = TaskFactors {
            task_id: "p".into(),
            u: Vector::from_vec(u).unwrap(),
            v: Vector::from_vec(v).unwrap(),
        };
        let composed = compose(&shared, &factors).unwrap();
        let mut ratio = Matrix::zeros(4, 5);
        for i in 0..4 {
            for j in 0..5 {
                ratio.set(i, j, composed.get(i, j) / shared.matrix.get(i, j));
            }
        }
        let bound = 1e-9 * (1.0 + ratio.max_abs() * ratio.max_abs());
        for i in 0..3 {
            for j in 0..4 {
                let minor = ratio.get(i, j) * ratio.get(i + 1, j + 1)
                    - ratio.get(i, j + 1) * ratio.get(i + 1, j);
                prop_assert!(minor.abs() <= bound);
            }
        }
    }

    #[test]
    fn chain_gradients_matches_finite_differences(
        seed in 0u64..500,
    ) {
        // scalar functional: f = sum_ij w_ij * tanh(C_ij)
        let mut rng = Rng::new(seed);
        let (l, d) = (3, 4);
        let mut shared = SharedPrompt { matrix: Matrix::zeros(l, d) };
        let mut weights = Matrix::zeros(l, d);
        for i in 0..l {
            for j in 0..d {
                shared.matrix.set(i, j, rng.gauss(1.0));
                weights.set(i, j, rng.gauss(1.0));
            }
        }
        let mut factors = TaskFactors::identity("p", l, d);
        for i in 0..l {
            factors.u.set(i, 1.0 + rng.gauss(0.25));
        }
        for j in 0..d {
            factors.v.set(j, 1.0 + rng.gauss(0.25));
        }
        let eval = |s: &SharedPrompt, f: &TaskFactors| -> f64 {
            let c = compose(s, f).unwrap();
            let mut total = 0.0;
            for i in 0..l {
                for j in 0..d {
                    total += weights.get(i, j) * c.get(i, j).tanh();
                }
            }
            total
        };
        let c = compose(&shared, &factors).unwrap();
        let mut dc = Matrix::zeros(l, d);
        for i in 0..l {
            for j in 0..d {
                let t = c.get(i, j).tanh();
                dc.set(i, j, weights.get(i, j) * (1.0 - t * t));
            }
        }
        let (dp, du, dv) = chain_gradients(&dc, &shared, &factors).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-9);

        // spot-check a few coordinates of each gradient
        for &(i, j) in &[(0usize, 0usize), (1, 2), (2, 3)] {
            let mut plus = shared.clone();
            plus.matrix.set(i, j, shared.matrix.get(i, j) + eps);
            let mut minus = shared.clone();
            minus.matrix.set(i, j, shared.matrix.get(i, j) - eps);
            let fd = (eval(&plus, &factors) - eval(&minus, &factors)) / (2.0 * eps);
            prop_assert!(rel(dp.get(i, j), fd) < 1e-6);
        }
        for i in 0..l {
            let mut plus = factors.clone();
            plus.u.set(i, factors.u.get(i) + eps);
            let mut minus = factors.clone();
            minus.u.set(i, factors.u.get(i) - eps);
            let fd = (eval(&shared, &plus) - eval(&shared, &minus)) / (2.0 * eps);
            prop_assert!(rel(du.get(i), fd) < 1e-6);
        }
        for j in 0..d {
            let mut plus = factors.clone();
            plus.v.set(j, factors.v.get(j) + eps);
            let mut minus = factors.clone();
            minus.v.set(j, factors.v.get(j) - eps);
            let fd = (eval(&shared, &plus) - eval(&shared, &minus)) / (2.0 * eps);
            prop_assert!(rel(dv.get(j), fd) < 1e-6);
        }
    }
}

// Statistical invariants with fixed seeds (deterministic, so not flaky).

#[test]
fn stochastic_k_is_uniform_by_chi_square() {
    // 1e5 draws, kappa = 6, so K ranges over 5 values: chi-square with 4
    // degrees of freedom; critical value at significance 0.001 is 18.467.
    let mut rng = Rng::new(2024);
    let draws = 100_000usize;
    let kappa = 6usize;
    let mut counts = vec![0usize; kappa + 1];
    for _ in 0..draws {
        let picks = mpt_core::stochastic_task_subset(kappa, &mut rng).unwrap();
        counts[picks.len()] += 1;
    }
    let expected = draws as f64 / (kappa - 1) as f64;
    let chi2: f64 = (2..=kappa)
        .map(|k| {
            let diff = counts[k] as f64 - expected;
            diff * diff / expected
        })
        .sum();
    assert!(chi2 < 18.467, "chi-square statistic {chi2}");
}

#[test]
fn decomposition_initialization_stays_near_shared() {
    // Factors start at ones plus N(0, sigma). Per entry |u*v - 1| stays
    // within B = 2*(3.5 sigma) + (3.5 sigma)^2 unless a draw exceeds 3.5
    // sigma, which happens for one of the 24 factor entries in well under
    // 5% of seeds.
    let sigma = mpt_core::prompts::FACTOR_INIT_NOISE_STD;
    let bound = 2.0 * 3.5 * sigma + (3.5 * sigma) * (3.5 * sigma);
    let cfg = mpt_core::ModelConfig::tiny();
    let model = mpt_core::init_model(&cfg, &mut Rng::new(1)).unwrap();

    let mut within = 0;
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let (shared, factors) =
            mpt_core::init_decomposition(&model, 8, &["probe".to_string()], &mut rng).unwrap();
        let composed = compose(&shared, &factors[0]).unwrap();
        let mut worst = 0.0f64;
        for i in 0..8 {
            for j in 0..cfg.d_model {
                let p = shared.matrix.get(i, j);
                if p.abs() > 1e-12 {
                    worst = worst.max((composed.get(i, j) / p - 1.0).abs());
                }
            }
        }
        if worst <= bound {
            within += 1;
        }
    }
    assert!(within >= 95, "only {within}/100 seeds within the envelope");
}

#[test]
fn distinct_tasks_get_independent_factor_noise() {
    let cfg = mpt_core::ModelConfig::tiny();
    let model = mpt_core::init_model(&cfg, &mut Rng::new(1)).unwrap();
    let ids: Vec<String> = vec!["a".into(), "b".into()];
    let (_, factors) = mpt_core::init_decomposition(&model, 4, &ids, &mut Rng::new(9)).unwrap();
    assert_ne!(factors[0].u, factors[1].u);
    assert_ne!(factors[0].v, factors[1].v);
}

#[test]
fn zero_noise_decomposition_composes_to_shared_exactly() {
    let cfg = mpt_core::ModelConfig::tiny();
    let model = mpt_core::init_model(&cfg, &mut Rng::new(1)).unwrap();
    let ids: Vec<String> = vec!["a".into()];
    let (shared, factors) = mpt_core::prompts::init_decomposition_with_noise(
        &model,
        4,
        &ids,
        0.0,
        &mut Rng::new(2),
    )
    .unwrap();
    let composed = compose(&shared, &factors[0]).unwrap();
    assert_eq!(composed, shared.matrix);
}

#[test]
fn vanilla_prompt_rows_come_from_the_embedding_table() {
    let cfg = mpt_core::ModelConfig::tiny();
    let model = mpt_core::init_model(&cfg, &mut Rng::new(3)).unwrap();
    let prompt = mpt_core::init_vanilla_prompt(&model, 8, &mut Rng::new(4)).unwrap();
    for i in 0..8 {
        let row = prompt.matrix.row(i);
        let found = (0..cfg.vocab_size).any(|t| model.embedding_row(t) == row);
        assert!(found, "prompt row {i} is not an embedding row");
    }
    // determinism
    let again = mpt_core::init_vanilla_prompt(&model, 8, &mut Rng::new(4)).unwrap();
    assert_eq!(prompt, again);
    // degenerate: single row with vocab forced small is still an embedding row
    let one = mpt_core::init_vanilla_prompt(&model, 1, &mut Rng::new(5)).unwrap();
    let found = (0..cfg.vocab_size).any(|t| model.embedding_row(t) == one.matrix.row(0));
    assert!(found);
}

// Compression equivalence through the model: composing then running the
// network and compressing then running it give bitwise-equal logits.
#[test]
fn compress_and_compose_forward_identically() {
    let cfg = mpt_core::ModelConfig::tiny();
    let model =
        mpt_core::FrozenModel::init(&cfg, mpt_core::ModelInit::Anchored, &mut Rng::new(6)).unwrap();
    let mut rng = Rng::new(7);
    for trial in 0..20 {
        let (shared, factors) = mpt_core::init_decomposition(
            &model,
            4,
            &[format!("t{trial}")],
            &mut rng,
        )
        .unwrap();
        let src: Vec<usize> = (0..5).map(|_| 4 + rng.below(16)).collect();
        let tgt: Vec<usize> = (0..3).map(|_| 4 + rng.below(16)).collect();

        let composed = compose(&shared, &factors[0]).unwrap();
        let compressed = mpt_core::compress(&shared, &factors[0]).unwrap();
        assert_eq!(composed, compressed.matrix);

        let a = mpt_core::forward(&model, &composed, &src, &tgt).unwrap();
        let b = mpt_core::forward(&model, &compressed.matrix, &src, &tgt).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}
