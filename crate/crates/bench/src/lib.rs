//! Shared fixtures for the benchmark suite.

use crft_core::{gen_chain_arith, MicroTransformer, ModelConfig, TaskSample};

pub fn desk_model(seed: u64) -> MicroTransformer {
    MicroTransformer::new(ModelConfig::desk(crft_core::tasks::vocab::SIZE), seed)
        .expect("desk config is valid")
}

pub fn bench_samples(n: usize) -> Vec<TaskSample> {
    gen_chain_arith(n, 4, 10, 123).expect("generator works at bench sizes")
}
