//! Decoder-only transformer with a hand-written backward pass.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head attention and a
//! SiLU-gated MLP, learned absolute positions, untied output head. Weights act
//! on row vectors (`y = x · W`), so projection shapes are `in × out`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Batch;
use super::TrainError;
use crate::tensor_io::{ModuleId, ModuleKind, TensorError, WeightMatrix};

const NORM_EPS: f64 = 1e-6;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub context: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 || self.vocab < 2 || self.context == 0 {
            return fail(format!("model dimensions must be positive (vocab >= 2): {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.intermediate < self.hidden {
            return fail(format!("intermediate {} is smaller than hidden {}", self.intermediate, self.hidden));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

// Per-layer slot order inside a ParamSet.
const ATTN_NORM: usize = 0;
const Q: usize = 1;
const K: usize = 2;
const V: usize = 3;
const O: usize = 4;
const MLP_NORM: usize = 5;
const GATE: usize = 6;
const UP: usize = 7;
const DOWN: usize = 8;
const PER_LAYER: usize = 9;
const EMBED: usize = 0;
const POS: usize = 1;

fn slot(layer: usize, s: usize) -> usize {
    2 + layer * PER_LAYER + s
}

/// Ordered named tensors: either model parameters or their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    ids: Vec<ModuleId>,
    tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> &[ModuleId] {
        &self.ids
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModuleId, &Array2<f64>)> {
        self.ids.iter().zip(&self.tensors)
    }

    pub fn get(&self, id: &ModuleId) -> Option<&Array2<f64>> {
        self.ids.iter().position(|i| i == id).map(|p| &self.tensors[p])
    }

    pub fn get_mut(&mut self, id: &ModuleId) -> Option<&mut Array2<f64>> {
        self.ids.iter().position(|i| i == id).map(move |p| &mut self.tensors[p])
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            ids: self.ids.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Ids of the projection matrices, layer-major.
    pub fn projection_ids(&self) -> Vec<ModuleId> {
        self.ids.iter().filter(|i| i.kind != ModuleKind::Other).cloned().collect()
    }

    pub fn to_weight_matrix(&self, id: &ModuleId) -> Option<Result<WeightMatrix, TensorError>> {
        let t = self.get(id)?;
        let values: Vec<f64> = t.iter().copied().collect();
        Some(WeightMatrix::from_f64(id.clone(), t.nrows(), t.ncols(), &values))
    }

    pub fn to_weight_matrices(&self) -> Result<Vec<WeightMatrix>, TensorError> {
        self.ids.iter().map(|id| self.to_weight_matrix(id).expect("own id")).collect()
    }

    /// Rebuilds a parameter set from stored matrices, checking names and shapes
    /// against a freshly laid-out model.
    pub fn from_weight_matrices(cfg: &ModelConfig, matrices: &[WeightMatrix]) -> Result<ParamSet, TrainError> {
        let mut params = layout(cfg);
        for (id, t) in params.ids.iter().zip(params.tensors.iter_mut()) {
            let m = matrices
                .iter()
                .find(|m| &m.id == id)
                .ok_or_else(|| TrainError::Config(format!("checkpoint lacks `{id}`")))?;
            if m.shape() != t.dim() {
                return Err(TrainError::Config(format!("`{id}` has shape {:?}, expected {:?}", m.shape(), t.dim())));
            }
            *t = Array2::from_shape_vec(m.shape(), m.to_f64()).expect("shape checked");
        }
        Ok(params)
    }
}

fn layout(cfg: &ModelConfig) -> ParamSet {
    let (h, i) = (cfg.hidden, cfg.intermediate);
    let mut ids = vec![ModuleId::other("embed.tokens"), ModuleId::other("embed.positions")];
    let mut shapes = vec![(cfg.vocab, h), (cfg.context, h)];
    for l in 0..cfg.layers {
        let layer_slots = [
            (ModuleId::other(format!("layers.{l}.attn_norm")), (1, h)),
            (ModuleId::projection(l, ModuleKind::AttQ), (h, h)),
            (ModuleId::projection(l, ModuleKind::AttK), (h, h)),
            (ModuleId::projection(l, ModuleKind::AttV), (h, h)),
            (ModuleId::projection(l, ModuleKind::AttO), (h, h)),
            (ModuleId::other(format!("layers.{l}.mlp_norm")), (1, h)),
            (ModuleId::projection(l, ModuleKind::MlpGate), (h, i)),
            (ModuleId::projection(l, ModuleKind::MlpUp), (h, i)),
            (ModuleId::projection(l, ModuleKind::MlpDown), (i, h)),
        ];
        for (id, shape) in layer_slots {
            ids.push(id);
            shapes.push(shape);
        }
    }
    ids.push(ModuleId::other("final_norm"));
    shapes.push((1, h));
    ids.push(ModuleId::other("lm_head"));
    shapes.push((h, cfg.vocab));
    ParamSet { ids, tensors: shapes.into_iter().map(Array2::zeros).collect() }
}

/// Fresh parameters: projections ~ N(0, (0.02/√(2·layers))²), embeddings and
/// head ~ N(0, 0.02²), norm gains 1.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet, TrainError> {
    cfg.validate()?;
    let mut params = layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj_std = EMBED_STD / (2.0 * cfg.layers as f64).sqrt();
    for (id, t) in params.ids.iter().zip(params.tensors.iter_mut()) {
        if t.nrows() == 1 {
            t.fill(1.0);
            continue;
        }
        let std = if id.kind == ModuleKind::Other { EMBED_STD } else { proj_std };
        let normal = Normal::new(0.0, std).expect("positive std");
        t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    Ok(params)
}

struct NormCache {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

fn rms_forward(x: &Array2<f64>, gain: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let h = x.ncols() as f64;
    let inv = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / h + NORM_EPS).sqrt());
    let xhat = x * &inv.view().insert_axis(Axis(1));
    let out = &xhat * gain;
    (out, NormCache { xhat, inv })
}

/// Returns `dx` and accumulates the gain gradient into `dgain`.
fn rms_backward(dout: &Array2<f64>, cache: &NormCache, gain: &Array2<f64>, dgain: &mut Array2<f64>) -> Array2<f64> {
    let h = dout.ncols() as f64;
    *dgain += &(dout * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dout * gain;
    let mut dx = Array2::zeros(dout.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.inv)
        .for_each(|mut dx, dxh, xh, &inv| {
            let proj = dxh.dot(&xh) / h;
            Zip::from(&mut dx).and(&dxh).and(&xh).for_each(|d, &a, &b| *d = inv * (a - b * proj));
        });
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerCache {
    norm1: NormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm2: NormCache,
    h2: Array2<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
    mixed: Array2<f64>,
}

struct Forward {
    layers: Vec<LayerCache>,
    norm_f: NormCache,
    hf: Array2<f64>,
    logits: Array2<f64>,
}

fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<(), TrainError> {
    if batch.seq_len == 0 || batch.rows == 0 || batch.seq_len > cfg.context {
        return Err(TrainError::Config(format!(
            "batch of {}x{} does not fit context {}",
            batch.rows, batch.seq_len, cfg.context
        )));
    }
    if let Some(&tok) = batch.inputs.iter().chain(&batch.targets).find(|&&t| t as usize >= cfg.vocab) {
        return Err(TrainError::Config(format!("token {tok} is outside vocab {}", cfg.vocab)));
    }
    Ok(())
}

fn forward(cfg: &ModelConfig, p: &ParamSet, batch: &Batch) -> Forward {
    let (rows, seq) = (batch.rows, batch.seq_len);
    let n = rows * seq;
    let t = &p.tensors;
    let mut x = Array2::zeros((n, cfg.hidden));
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&t[EMBED].row(batch.inputs[r] as usize));
        row += &t[POS].row(r % seq);
    }

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let w = |s| &t[slot(l, s)];
        let (h1, norm1) = rms_forward(&x, w(ATTN_NORM));
        let q = h1.dot(w(Q));
        let k = h1.dot(w(K));
        let v = h1.dot(w(V));
        let mut attn = Array2::zeros((n, cfg.hidden));
        let mut probs = Vec::with_capacity(rows * cfg.heads);
        for b in 0..rows {
            let r = b * seq..(b + 1) * seq;
            for head in 0..cfg.heads {
                let c = head * hd..(head + 1) * hd;
                let qs = q.slice(s![r.clone(), c.clone()]);
                let ks = k.slice(s![r.clone(), c.clone()]);
                let vs = v.slice(s![r.clone(), c.clone()]);
                let mut scores = qs.dot(&ks.t());
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let visible = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                    let mut sum = 0.0;
                    for (j, e) in row.iter_mut().enumerate() {
                        *e = if j <= i { (*e * scale - visible).exp() } else { 0.0 };
                        sum += *e;
                    }
                    row /= sum;
                }
                attn.slice_mut(s![r.clone(), c]).assign(&scores.dot(&vs));
                probs.push(scores);
            }
        }
        x = x + attn.dot(w(O));

        let (h2, norm2) = rms_forward(&x, w(MLP_NORM));
        let gate = h2.dot(w(GATE));
        let up = h2.dot(w(UP));
        let act = gate.mapv(|a| a * sigmoid(a));
        let mixed = &act * &up;
        x = x + mixed.dot(w(DOWN));
        layers.push(LayerCache { norm1, h1, q, k, v, probs, attn, norm2, h2, gate, up, act, mixed });
    }
    let final_norm = slot(cfg.layers, 0);
    let (hf, norm_f) = rms_forward(&x, &t[final_norm]);
    let logits = hf.dot(&t[final_norm + 1]);
    Forward { layers, norm_f, hf, logits }
}

/// Per-token negative log-likelihoods, in batch order.
fn token_nll_from_logits(logits: &Array2<f64>, targets: &[u32]) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &tgt)| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[tgt as usize]
        })
        .collect()
}

pub fn token_nll(cfg: &ModelConfig, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>, TrainError> {
    check_batch(cfg, batch)?;
    Ok(token_nll_from_logits(&forward(cfg, params, batch).logits, &batch.targets))
}

/// Mean next-token cross-entropy.
pub fn loss(cfg: &ModelConfig, params: &ParamSet, batch: &Batch) -> Result<f64, TrainError> {
    let nll = token_nll(cfg, params, batch)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Mean next-token cross-entropy and its gradient with respect to every
/// parameter.
pub fn forward_backward(cfg: &ModelConfig, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet), TrainError> {
    check_batch(cfg, batch)?;
    let fwd = forward(cfg, params, batch);
    let (rows, seq) = (batch.rows, batch.seq_len);
    let n = rows * seq;
    let nll = token_nll_from_logits(&fwd.logits, &batch.targets);
    let loss = nll.iter().sum::<f64>() / n as f64;

    let t = &params.tensors;
    let mut grads = params.zeros_like();
    let g = &mut grads.tensors;

    // Softmax cross-entropy.
    let mut dlogits = fwd.logits.clone();
    for (mut row, &tgt) in dlogits.rows_mut().into_iter().zip(&batch.targets) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum / n as f64);
        row[tgt as usize] -= 1.0 / n as f64;
    }
    let final_norm = slot(cfg.layers, 0);
    g[final_norm + 1] = fwd.hf.t().dot(&dlogits);
    let dhf = dlogits.dot(&t[final_norm + 1].t());
    let mut dx = rms_backward(&dhf, &fwd.norm_f, &t[final_norm], &mut g[final_norm]);

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    for l in (0..cfg.layers).rev() {
        let c = &fwd.layers[l];
        let w = |s| &t[slot(l, s)];

        // MLP: x += (silu(h2·Wg) ∘ (h2·Wu)) · Wd
        g[slot(l, DOWN)] = c.mixed.t().dot(&dx);
        let dmixed = dx.dot(&w(DOWN).t());
        let dup = &dmixed * &c.act;
        let mut dgate = &dmixed * &c.up;
        Zip::from(&mut dgate).and(&c.gate).for_each(|d, &a| {
            let sg = sigmoid(a);
            *d *= sg * (1.0 + a * (1.0 - sg));
        });
        g[slot(l, GATE)] = c.h2.t().dot(&dgate);
        g[slot(l, UP)] = c.h2.t().dot(&dup);
        let dh2 = dgate.dot(&w(GATE).t()) + dup.dot(&w(UP).t());
        dx += &rms_backward(&dh2, &c.norm2, w(MLP_NORM), &mut g[slot(l, MLP_NORM)]);

        // Attention: x += attn · Wo
        g[slot(l, O)] = c.attn.t().dot(&dx);
        let dattn = dx.dot(&w(O).t());
        let mut dq = Array2::zeros((n, cfg.hidden));
        let mut dk = Array2::zeros((n, cfg.hidden));
        let mut dv = Array2::zeros((n, cfg.hidden));
        for b in 0..rows {
            let r = b * seq..(b + 1) * seq;
            for head in 0..cfg.heads {
                let cols = head * hd..(head + 1) * hd;
                let p = &c.probs[b * cfg.heads + head];
                let d_out = dattn.slice(s![r.clone(), cols.clone()]);
                let qs = c.q.slice(s![r.clone(), cols.clone()]);
                let ks = c.k.slice(s![r.clone(), cols.clone()]);
                let vs = c.v.slice(s![r.clone(), cols.clone()]);
                let dp = d_out.dot(&vs.t());
                dv.slice_mut(s![r.clone(), cols.clone()]).assign(&p.t().dot(&d_out));
                let ds = softmax_backward(p.view(), dp.view());
                dq.slice_mut(s![r.clone(), cols.clone()]).assign(&(ds.dot(&ks) * scale));
                dk.slice_mut(s![r.clone(), cols]).assign(&(ds.t().dot(&qs) * scale));
            }
        }
        g[slot(l, Q)] = c.h1.t().dot(&dq);
        g[slot(l, K)] = c.h1.t().dot(&dk);
        g[slot(l, V)] = c.h1.t().dot(&dv);
        let dh1 = dq.dot(&w(Q).t()) + dk.dot(&w(K).t()) + dv.dot(&w(V).t());
        dx += &rms_backward(&dh1, &c.norm1, w(ATTN_NORM), &mut g[slot(l, ATTN_NORM)]);
    }

    for (r, row) in dx.rows().into_iter().enumerate() {
        let mut e = g[EMBED].row_mut(batch.inputs[r] as usize);
        e += &row;
        let mut pe = g[POS].row_mut(r % seq);
        pe += &row;
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss(loss));
    }
    Ok((loss, grads))
}

/// `dS = P ∘ (dP − rowsum(dP ∘ P))`
fn softmax_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.raw_dim());
    Zip::from(ds.rows_mut()).and(p.rows()).and(dp.rows()).for_each(|mut ds, p, dp| {
        let inner = p.dot(&dp);
        Zip::from(&mut ds).and(&p).and(&dp).for_each(|d, &pv, &dpv| *d = pv * (dpv - inner));
    });
    ds
}
