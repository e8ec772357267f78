//! Prompt decomposition: a task prompt is the Hadamard product of a shared
//! matrix and a rank-one task-specific matrix built from two vectors. This
//! module owns composition, compression into a single deployable matrix,
//! gradient chaining through the decomposition, initialization, and the
//! trainable-parameter accounting.

use crate::error::{Error, Result};
use crate::model::FrozenModel;
use crate::numerics::{Matrix, Rng, Vector};

/// Noise added to the all-ones task vectors at initialization, so every
/// composed student prompt starts close to the shared matrix.
pub const FACTOR_INIT_NOISE_STD: f64 = 0.01;

/// The "slow" prompt matrix shared across tasks (`l x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPrompt {
    pub matrix: Matrix,
}

impl SharedPrompt {
    pub fn prompt_len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// The "fast" rank-one weights for one task: a length-`l` vector and a
/// length-`d` vector whose outer product gates the shared prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFactors {
    pub task_id: String,
    pub u: Vector,
    pub v: Vector,
}

impl TaskFactors {
    /// All-ones factors; composing with these reproduces the shared prompt
    /// bit for bit.
    pub fn identity(task_id: impl Into<String>, l: usize, d: usize) -> Self {
        TaskFactors {
            task_id: task_id.into(),
            u: Vector::ones(l),
            v: Vector::ones(d),
        }
    }
}

/// A plain `l x d` prompt matrix: the vanilla prompt-tuning parameter, a
/// trained teacher prompt, or a compressed deployment artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaPrompt {
    pub matrix: Matrix,
}

fn check_shapes(op: &'static str, shared: &SharedPrompt, factors: &TaskFactors) -> Result<()> {
    if factors.u.len() != shared.prompt_len() || factors.v.len() != shared.dim() {
        return Err(Error::shape(
            op,
            shared.matrix.shape_string(),
            format!("factors u:{} v:{}", factors.u.len(), factors.v.len()),
        ));
    }
    Ok(())
}

/// Task prompt: `out[i][j] = shared[i][j] * u[i] * v[j]`.
pub fn compose(shared: &SharedPrompt, factors: &TaskFactors) -> Result<Matrix> {
    check_shapes("compose", shared, factors)?;
    let (l, d) = shared.matrix.shape();
    let mut out = Matrix::zeros(l, d);
    for i in 0..l {
        let ui = factors.u.get(i);
        let src = shared.matrix.row(i);
        let dst = out.row_mut(i);
        for j in 0..d {
            dst[j] = src[j] * ui * factors.v.get(j);
        }
    }
    Ok(out)
}

/// Collapses a trained decomposition into a single deployable matrix.
/// The result is arithmetically identical to [`compose`], so forward passes
/// through either produce bitwise-equal logits.
pub fn compress(shared: &SharedPrompt, factors: &TaskFactors) -> Result<VanillaPrompt> {
    Ok(VanillaPrompt {
        matrix: compose(shared, factors)?,
    })
}

/// Chains a gradient w.r.t. the composed prompt back onto the decomposition.
///
/// With `C[i][j] = P[i][j] u[i] v[j]`:
///   dP[i][j] = dC[i][j] u[i] v[j]
///   du[i]    = sum_j dC[i][j] P[i][j] v[j]
///   dv[j]    = sum_i dC[i][j] P[i][j] u[i]
pub fn chain_gradients(
    dloss_dcomposed: &Matrix,
    shared: &SharedPrompt,
    factors: &TaskFactors,
) -> Result<(Matrix, Vector, Vector)> {
    check_shapes("chain_gradients", shared, factors)?;
    if dloss_dcomposed.shape() != shared.matrix.shape() {
        return Err(Error::shape(
            "chain_gradients",
            dloss_dcomposed.shape_string(),
            shared.matrix.shape_string(),
        ));
    }
    let (l, d) = shared.matrix.shape();
    let mut d_shared = Matrix::zeros(l, d);
    let mut du = Vector::zeros(l);
    let mut dv = Vector::zeros(d);
    for i in 0..l {
        let ui = factors.u.get(i);
        let g_row = dloss_dcomposed.row(i);
        let p_row = shared.matrix.row(i);
        let out_row = d_shared.row_mut(i);
        let mut du_i = 0.0;
        for j in 0..d {
            let vj = factors.v.get(j);
            out_row[j] = g_row[j] * ui * vj;
            du_i += g_row[j] * p_row[j] * vj;
            dv.set(j, dv.get(j) + g_row[j] * p_row[j] * ui);
        }
        du.set(i, du_i);
    }
    Ok((d_shared, du, dv))
}

/// What the parameter count is being reported for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamCountMode {
    /// One target task trained in isolation: `l*d + l + d`.
    SingleTask,
    /// Per-task share when one shared matrix serves `tau` grouped targets:
    /// `l*d/tau + (l + d)`, kept exact as a rational.
    GroupedPerTask { tau: u64 },
    /// Total across a group of `tau` targets: `l*d + (l + d)*tau`.
    GroupedTotal { tau: u64 },
}

/// Exact nonnegative rational; parameter counts are only fractional in the
/// grouped per-task report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    num: u64,
    den: u64,
}

impl ParamCount {
    fn new(num: u64, den: u64) -> Self {
        let g = gcd(num.max(1), den);
        ParamCount {
            num: num / g,
            den: den / g,
        }
    }

    pub fn from_integer(n: u64) -> Self {
        ParamCount { num: n, den: 1 }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// The exact integer value, when the count is whole.
    pub fn exact_integer(&self) -> Option<u64> {
        (self.den == 1).then_some(self.num)
    }

    /// Table-style "K" string with one decimal, truncated toward zero
    /// (77,668 renders as "77.6K").
    pub fn format_k(&self) -> String {
        let tenths_of_k = self.num / (self.den * 100);
        format!("{}.{}K", tenths_of_k / 10, tenths_of_k % 10)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

/// Number of trainable parameters for prompt length `l` and embedding
/// dimension `d` under the given reporting mode.
pub fn param_count(l: u64, d: u64, mode: ParamCountMode) -> ParamCount {
    match mode {
        ParamCountMode::SingleTask => ParamCount::new(l * d + l + d, 1),
        ParamCountMode::GroupedPerTask { tau } => {
            // l*d/tau + (l+d), exact: (l*d + (l+d)*tau) / tau
            ParamCount::new(l * d + (l + d) * tau, tau)
        }
        ParamCountMode::GroupedTotal { tau } => ParamCount::new(l * d + (l + d) * tau, 1),
    }
}

/// Trainable parameters of vanilla prompt tuning (`l*d`); also the size of
/// a compressed deployment matrix.
pub fn vanilla_param_count(l: u64, d: u64) -> u64 {
    l * d
}

/// Vocabulary-sampled prompt: each row is a copy of the embedding-table row
/// of a uniformly drawn token.
pub fn init_vanilla_prompt(model: &FrozenModel, l: usize, rng: &mut Rng) -> Result<VanillaPrompt> {
    if l == 0 {
        return Err(Error::arg("init_vanilla_prompt", "prompt length must be >= 1"));
    }
    let cfg = model.config();
    if l + 1 > cfg.max_src_len {
        return Err(Error::arg(
            "init_vanilla_prompt",
            format!(
                "prompt length {l} leaves no room for source tokens (max_src_len {})",
                cfg.max_src_len
            ),
        ));
    }
    let d = cfg.d_model;
    let mut matrix = Matrix::zeros(l, d);
    for i in 0..l {
        let token = rng.below(cfg.vocab_size);
        matrix.row_mut(i).copy_from_slice(model.embedding_row(token));
    }
    Ok(VanillaPrompt { matrix })
}

/// Fresh decomposition for a set of tasks: a vocabulary-sampled shared
/// prompt plus near-identity factors per task, so every composed student
/// prompt starts out approximately equal to the shared matrix.
pub fn init_decomposition(
    model: &FrozenModel,
    l: usize,
    task_ids: &[String],
    rng: &mut Rng,
) -> Result<(SharedPrompt, Vec<TaskFactors>)> {
    init_decomposition_with_noise(model, l, task_ids, FACTOR_INIT_NOISE_STD, rng)
}

/// As [`init_decomposition`] but with an explicit factor noise level.
pub fn init_decomposition_with_noise(
    model: &FrozenModel,
    l: usize,
    task_ids: &[String],
    noise_std: f64,
    rng: &mut Rng,
) -> Result<(SharedPrompt, Vec<TaskFactors>)> {
    if task_ids.is_empty() {
        return Err(Error::arg("init_decomposition", "empty task list"));
    }
    let shared = SharedPrompt {
        matrix: init_vanilla_prompt(model, l, rng)?.matrix,
    };
    let d = model.config().d_model;
    let factors = task_ids
        .iter()
        .map(|id| {
            let mut u = Vector::ones(l);
            let mut v = Vector::ones(d);
            for i in 0..l {
                u.set(i, 1.0 + rng.gauss(noise_std));
            }
            for j in 0..d {
                v.set(j, 1.0 + rng.gauss(noise_std));
            }
            TaskFactors {
                task_id: id.clone(),
                u,
                v,
            }
        })
        .collect();
    Ok((shared, factors))
}

/// Elementwise mean of a nonempty set of task factors; used to initialize
/// target-task vectors from the source tasks' trained vectors.
pub fn average_factors(factors: &[TaskFactors], task_id: impl Into<String>) -> Result<TaskFactors> {
    let first = factors
        .first()
        .ok_or_else(|| Error::arg("average_factors", "empty factor list"))?;
    let l = first.u.len();
    let d = first.v.len();
    let mut u = Vector::zeros(l);
    let mut v = Vector::zeros(d);
    for f in factors {
        if f.u.len() != l || f.v.len() != d {
            return Err(Error::shape(
                "average_factors",
                format!("u:{l} v:{d}"),
                format!("u:{} v:{}", f.u.len(), f.v.len()),
            ));
        }
        u.add_scaled(&f.u, 1.0)?;
        v.add_scaled(&f.v, 1.0)?;
    }
    let n = factors.len() as f64;
    for i in 0..l {
        u.set(i, u.get(i) / n);
    }
    for j in 0..d {
        v.set(j, v.get(j) / n);
    }
    Ok(TaskFactors {
        task_id: task_id.into(),
        u,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shared_2x2() -> SharedPrompt {
        SharedPrompt {
            matrix: Matrix::from_rows(&[&[2.0, 3.0], &[5.0, 7.0]]).unwrap(),
        }
    }

    #[test]
    fn compose_identity_factors_is_bitwise_shared() {
        let shared = shared_2x2();
        let f = TaskFactors::identity("t", 2, 2);
        let composed = compose(&shared, &f).unwrap();
        assert_eq!(composed, shared.matrix);
    }

    #[test]
    fn compose_elementwise_oracle() {
        let shared = shared_2x2();
        let f = TaskFactors {
            task_id: "t".into(),
            u: Vector::from_vec(vec![1.0, 2.0]).unwrap(),
            v: Vector::from_vec(vec![10.0, 100.0]).unwrap(),
        };
        let composed = compose(&shared, &f).unwrap();
        let want = Matrix::from_rows(&[&[20.0, 300.0], &[100.0, 1400.0]]).unwrap();
        assert_eq!(composed, want);
    }

    #[test]
    fn compose_zero_u_gives_zero_prompt() {
        let shared = shared_2x2();
        let f = TaskFactors {
            task_id: "t".into(),
            u: Vector::zeros(2),
            v: Vector::ones(2),
        };
        assert_eq!(compose(&shared, &f).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn compose_shape_mismatch() {
        let shared = shared_2x2();
        let f = TaskFactors::identity("t", 3, 2);
        assert!(compose(&shared, &f).is_err());
    }

    #[test]
    fn compress_matches_compose_bitwise() {
        let shared = shared_2x2();
        let f = TaskFactors {
            task_id: "t".into(),
            u: Vector::from_vec(vec![0.3, -1.7]).unwrap(),
            v: Vector::from_vec(vec![2.2, 0.9]).unwrap(),
        };
        let a = compose(&shared, &f).unwrap();
        let b = compress(&shared, &f).unwrap();
        assert_eq!(a, b.matrix);
    }

    #[test]
    fn chain_gradients_identity_factors_passes_through() {
        let shared = shared_2x2();
        let f = TaskFactors::identity("t", 2, 2);
        let g = Matrix::from_rows(&[&[0.1, -0.2], &[0.3, 0.4]]).unwrap();
        let (dp, _, _) = chain_gradients(&g, &shared, &f).unwrap();
        assert_eq!(dp, g);
    }

    #[test]
    fn chain_gradients_zero_upstream() {
        let shared = shared_2x2();
        let f = TaskFactors::identity("t", 2, 2);
        let (dp, du, dv) = chain_gradients(&Matrix::zeros(2, 2), &shared, &f).unwrap();
        assert_eq!(dp, Matrix::zeros(2, 2));
        assert_eq!(du, Vector::zeros(2));
        assert_eq!(dv, Vector::zeros(2));
    }

    // Finite-difference check of all three chained gradients through the
    // scalar functional f(C) = sum_ij w_ij * sin(C_ij).
    #[test]
    fn chain_gradients_finite_difference() {
        let mut rng = Rng::new(17);
        let (l, d) = (3, 5);
        let mut shared = SharedPrompt {
            matrix: Matrix::zeros(l, d),
        };
        let mut weights = Matrix::zeros(l, d);
        for i in 0..l {
            for j in 0..d {
                shared.matrix.set(i, j, rng.gauss(1.0));
                weights.set(i, j, rng.gauss(1.0));
            }
        }
        let mut factors = TaskFactors::identity("t", l, d);
        for i in 0..l {
            factors.u.set(i, 1.0 + rng.gauss(0.3));
        }
        for j in 0..d {
            factors.v.set(j, 1.0 + rng.gauss(0.3));
        }

        let eval = |shared: &SharedPrompt, factors: &TaskFactors| -> f64 {
            let c = compose(shared, factors).unwrap();
            let mut total = 0.0;
            for i in 0..l {
                for j in 0..d {
                    total += weights.get(i, j) * c.get(i, j).sin();
                }
            }
            total
        };

        // Analytic: dL/dC_ij = w_ij * cos(C_ij), chained onto (P, u, v).
        let c = compose(&shared, &factors).unwrap();
        let mut dc = Matrix::zeros(l, d);
        for i in 0..l {
            for j in 0..d {
                dc.set(i, j, weights.get(i, j) * c.get(i, j).cos());
            }
        }
        let (dp, du, dv) = chain_gradients(&dc, &shared, &factors).unwrap();

        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        for i in 0..l {
            for j in 0..d {
                let mut plus = shared.clone();
                plus.matrix.set(i, j, shared.matrix.get(i, j) + eps);
                let mut minus = shared.clone();
                minus.matrix.set(i, j, shared.matrix.get(i, j) - eps);
                let fd = (eval(&plus, &factors) - eval(&minus, &factors)) / (2.0 * eps);
                assert!(rel(dp.get(i, j), fd) < 1e-6, "dP[{i}][{j}]");
            }
        }
        for i in 0..l {
            let mut plus = factors.clone();
            plus.u.set(i, factors.u.get(i) + eps);
            let mut minus = factors.clone();
            minus.u.set(i, factors.u.get(i) - eps);
            let fd = (eval(&shared, &plus) - eval(&shared, &minus)) / (2.0 * eps);
            assert!(rel(du.get(i), fd) < 1e-6, "du[{i}]");
        }
        for j in 0..d {
            let mut plus = factors.clone();
            plus.v.set(j, factors.v.get(j) + eps);
            let mut minus = factors.clone();
            minus.v.set(j, factors.v.get(j) - eps);
            let fd = (eval(&shared, &plus) - eval(&shared, &minus)) / (2.0 * eps);
            assert!(rel(dv.get(j), fd) < 1e-6, "dv[{j}]");
        }
    }

    #[test]
    fn param_count_paper_values() {
        let single = param_count(100, 768, ParamCountMode::SingleTask);
        assert_eq!(single.exact_integer(), Some(77_668));
        assert_eq!(single.format_k(), "77.6K");

        assert_eq!(vanilla_param_count(100, 768), 76_800);
        assert_eq!(ParamCount::new(76_800, 1).format_k(), "76.8K");

        let grouped = param_count(100, 768, ParamCountMode::GroupedPerTask { tau: 8 });
        assert_eq!(grouped.exact_integer(), Some(10_468));
        assert_eq!(grouped.as_f64(), 10_468.0);
    }

    #[test]
    fn param_count_formula_grid() {
        for l in 1..=512u64 {
            for d in (1..=512u64).step_by(7) {
                let got = param_count(l, d, ParamCountMode::SingleTask);
                assert_eq!(got.exact_integer(), Some(l * d + l + d));
            }
        }
    }

    #[test]
    fn param_count_grouped_is_exact_rational() {
        // 5*3 / 2 is not an integer; the rational must be exact.
        let pc = param_count(5, 3, ParamCountMode::GroupedPerTask { tau: 2 });
        assert_eq!(pc.exact_integer(), None);
        assert!((pc.as_f64() - (15.0 / 2.0 + 8.0)).abs() < 1e-12);
        let total = param_count(5, 3, ParamCountMode::GroupedTotal { tau: 2 });
        assert_eq!(total.exact_integer(), Some(15 + 16));
    }

    #[test]
    fn average_factors_cases() {
        let a = TaskFactors {
            task_id: "a".into(),
            u: Vector::from_vec(vec![1.0, 3.0]).unwrap(),
            v: Vector::from_vec(vec![2.0]).unwrap(),
        };
        let b = TaskFactors {
            task_id: "b".into(),
            u: Vector::from_vec(vec![3.0, 1.0]).unwrap(),
            v: Vector::from_vec(vec![4.0]).unwrap(),
        };
        let avg = average_factors(&[a.clone(), b], "t").unwrap();
        assert_eq!(avg.task_id, "t");
        assert_eq!(avg.u.as_slice(), &[2.0, 2.0]);
        assert_eq!(avg.v.as_slice(), &[3.0]);

        let solo = average_factors(&[a.clone()], "t").unwrap();
        assert_eq!(solo.u, a.u);
        assert_eq!(solo.v, a.v);

        let ones = vec![TaskFactors::identity("x", 4, 6); 5];
        let avg = average_factors(&ones, "t").unwrap();
        assert_eq!(avg.u, Vector::ones(4));
        assert_eq!(avg.v, Vector::ones(6));

        assert!(average_factors(&[], "t").is_err());
    }
}
