//! Shared fixtures for the benchmarks.

use mpt_core::model::{FrozenModel, ModelConfig, ModelInit};
use mpt_core::numerics::{Matrix, Rng};
use mpt_core::prompts::{SharedPrompt, TaskFactors};

pub struct BenchFixture {
    pub model: FrozenModel,
    pub shared: SharedPrompt,
    pub factors: TaskFactors,
    pub teacher: Matrix,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Default-scale model plus one decomposition and a batch-sized example.
pub fn fixture() -> BenchFixture {
    let cfg = ModelConfig::tiny();
    let mut rng = Rng::new(7);
    let model = FrozenModel::init(&cfg, ModelInit::Anchored, &mut rng).unwrap();
    let (shared, mut factors) =
        mpt_core::init_decomposition(&model, 8, &["bench".to_string()], &mut rng).unwrap();
    let teacher = mpt_core::init_vanilla_prompt(&model, 8, &mut rng).unwrap().matrix;
    BenchFixture {
        model,
        shared,
        factors: factors.remove(0),
        teacher,
        src: vec![5, 9, 13, 7, 11, 6],
        tgt: vec![5, 9, 13, 7, 11, 6],
    }
}
