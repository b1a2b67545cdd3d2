#![allow(dead_code)]

use htsr_core::tensor_io::ModuleKind;
use htsr_core::train::{forward_backward, loss, Batch, ModelConfig, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One checked coordinate.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub module: String,
    pub kind: ModuleKind,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

pub fn tiny_gradcheck_model() -> ModelConfig {
    ModelConfig { hidden: 16, intermediate: 32, heads: 2, layers: 2, vocab: 256, context: 8 }
}

pub fn random_batch(cfg: &ModelConfig, rows: usize, seq_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bytes: Vec<Vec<u8>> = (0..rows)
        .map(|_| (0..=seq_len).map(|_| rng.random_range(0..cfg.vocab as u32) as u8).collect())
        .collect();
    let windows: Vec<&[u8]> = bytes.iter().map(|b| b.as_slice()).collect();
    Batch::from_windows(&windows)
}

/// Central differences with step `h` on `per_module` coordinates of every
/// parameter tensor. Among `candidates` random coordinates the one with the
/// largest analytic gradient is probed, so the comparison is not swamped by
/// round-off on near-zero entries.
pub fn finite_difference_probes(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &Batch,
    h: f64,
    per_module: usize,
    candidates: usize,
    seed: u64,
) -> Vec<GradProbe> {
    let (_, grads) = forward_backward(cfg, params, batch).expect("forward_backward");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for (i, id) in params.ids().iter().enumerate() {
        let g = &grads.tensors()[i];
        let (rows, cols) = g.dim();
        for _ in 0..per_module {
            let best = (0..candidates)
                .map(|_| (rng.random_range(0..rows), rng.random_range(0..cols)))
                .max_by(|a, b| g[*a].abs().total_cmp(&g[*b].abs()))
                .unwrap();
            let mut plus = params.clone();
            plus.tensors_mut()[i][best] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[i][best] -= h;
            let numeric = (loss(cfg, &plus, batch).unwrap() - loss(cfg, &minus, batch).unwrap()) / (2.0 * h);
            probes.push(GradProbe {
                module: id.raw_name.clone(),
                kind: id.kind,
                index: best,
                analytic: g[best],
                numeric,
            });
        }
    }
    probes
}
