//! Seeded toy checkpoints for demos and tests.
//!
//! Every block has an attention projection pair, an MLP pair, a layer-norm
//! vector and a bias, named like a GPT-style transformer so the default layer
//! rules classify them. Experts differ from the base by low-rank updates on
//! the matrix layers and small dense shifts elsewhere. Proxies follow the
//! `<layer_key>.input` convention.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensorstore::{DenseTensor, TensorMap};

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub blocks: usize,
    pub d_model: usize,
    pub tasks: usize,
    /// Rank of each expert's update on every matrix layer.
    pub update_rank: usize,
    pub update_scale: f64,
    /// Rows per proxy matrix.
    pub proxy_rows: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            blocks: 2,
            d_model: 8,
            tasks: 3,
            update_rank: 2,
            update_scale: 0.05,
            proxy_rows: 32,
            seed: 7,
        }
    }
}

pub struct SyntheticSet {
    pub base: TensorMap,
    pub experts: Vec<TensorMap>,
    pub proxies: Vec<TensorMap>,
}

/// `(name, d_out, d_in)` of every matrix layer.
pub fn matrix_layers(spec: &SyntheticSpec) -> Vec<(String, usize, usize)> {
    let d = spec.d_model;
    (0..spec.blocks)
        .flat_map(|b| {
            [
                (format!("blocks.{b}.attn.qkv.weight"), 3 * d, d),
                (format!("blocks.{b}.attn.out_proj.weight"), d, d),
                (format!("blocks.{b}.mlp.c_fc.weight"), 4 * d, d),
                (format!("blocks.{b}.mlp.c_proj.weight"), d, 4 * d),
            ]
        })
        .collect()
}

fn vectors(spec: &SyntheticSpec) -> Vec<String> {
    (0..spec.blocks)
        .flat_map(|b| [format!("blocks.{b}.ln_1.weight"), format!("blocks.{b}.attn.out_proj.bias")])
        .collect()
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn low_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize, scale: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(rows, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = DMatrix::from_fn(rank, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    (b * a) * (scale / (rank as f64).sqrt())
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticSet {
    let layers = matrix_layers(spec);
    let mut rng = rng_for(spec.seed, 0);
    let mut base = TensorMap::new();
    for (name, rows, cols) in &layers {
        let data = normal(&mut rng, rows * cols, 1.0 / (*cols as f64).sqrt());
        base.insert(name.clone(), DenseTensor::new(vec![*rows, *cols], data).expect("sized"));
    }
    for name in vectors(spec) {
        base.insert(name, DenseTensor::new(vec![spec.d_model], normal(&mut rng, spec.d_model, 0.1)).expect("sized"));
    }

    let mut experts = Vec::with_capacity(spec.tasks);
    let mut proxies = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let mut rng = rng_for(spec.seed, 1 + t as u64);
        let mut expert = TensorMap::new();
        let mut proxy = TensorMap::new();
        for (name, rows, cols) in &layers {
            let w = base.get(name).expect("base layer").to_matrix().expect("matrix");
            let dw = low_rank(&mut rng, *rows, *cols, spec.update_rank.min(*rows).min(*cols), spec.update_scale);
            expert.insert(name.clone(), DenseTensor::from_matrix(&(w + dw)));
            let x = normal(&mut rng, spec.proxy_rows * cols, 1.0);
            let key = format!("{}.input", name.strip_suffix(".weight").unwrap_or(name));
            proxy.insert(key, DenseTensor::new(vec![spec.proxy_rows, *cols], x).expect("sized"));
        }
        for name in vectors(spec) {
            let b = base.get(&name).expect("base vector");
            let shift = normal(&mut rng, spec.d_model, spec.update_scale);
            let data = b.data().iter().zip(shift).map(|(v, s)| v + s).collect();
            expert.insert(name, DenseTensor::new(vec![spec.d_model], data).expect("sized"));
        }
        experts.push(expert);
        proxies.push(proxy);
    }
    SyntheticSet { base, experts, proxies }
}
