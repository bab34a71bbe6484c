//! Shared builders for the benchmark targets.

use auxlat_core::model::{Model, ModelConfig};
use auxlat_core::taskgen::{generate_dataset, TaskInstance};

pub fn bench_model() -> Model {
    Model::new(ModelConfig {
        hidden_size: 64,
        n_layers: 2,
        n_heads: 2,
        k_latent: 10,
        max_seq_len: 256,
        raster_size: 16,
        patch_size: 4,
        d_vis: 32,
        seed: 17,
    })
    .expect("valid benchmark config")
}

pub fn bench_tasks(n: usize) -> Vec<TaskInstance> {
    generate_dataset(n, 23).expect("task generation")
}
