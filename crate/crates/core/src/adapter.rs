//! Residual bottleneck visual adapter and its in-batch NCE objective.
//!
//! `adapt(v) = W2 · relu(W1 · v + b1) + b2 + v`, with `W1: h×d` and `W2: d×h`.
//! All gradients are derived by hand; the ReLU subgradient at 0 is 0.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datastore::{feature_range, Corpus};
use crate::error::{Error, Result};
use crate::optim::{run_epochs, LoopConfig, OptimizerKind, TrainHistory};
use crate::vector::{dot_unchecked, Embeddings};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    dim: usize,
    hidden: usize,
    values: Vec<f64>,
}

impl AdapterParams {
    pub fn param_count(dim: usize, hidden: usize) -> usize {
        2 * dim * hidden + hidden + dim
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            values: vec![0.0; Self::param_count(dim, hidden)],
        }
    }

    /// `W1 ~ N(0, 1/d)`, everything else zero, so the initial map is the identity.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        for w in p.w1_mut() {
            *w = rng.sample::<f64, _>(StandardNormal) * scale;
        }
        p
    }

    pub fn from_values(dim: usize, hidden: usize, values: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(dim, hidden);
        if values.len() != expected || dim == 0 || hidden == 0 {
            return Err(Error::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            dim,
            hidden,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offsets(&self) -> [usize; 4] {
        let (d, h) = (self.dim, self.hidden);
        [0, h * d, h * d + h, 2 * h * d + h]
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[0]..o[1]]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[1]..o[2]]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[2]..o[3]]
    }

    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[3]..]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[0]..o[1]]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[1]..o[2]]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[2]..o[3]]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[3]..]
    }

    fn hidden_pre(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        self.w1()
            .chunks_exact(d)
            .zip(self.b1())
            .map(|(row, b)| dot_unchecked(row, v) + b)
            .collect()
    }

    pub fn adapt(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(self.adapt_unchecked(v))
    }

    pub(crate) fn adapt_unchecked(&self, v: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = self.hidden_pre(v).into_iter().map(|z| z.max(0.0)).collect();
        self.w2()
            .chunks_exact(self.hidden)
            .zip(self.b2())
            .zip(v)
            .map(|((row, b), x)| dot_unchecked(row, &r) + b + x)
            .collect()
    }

    pub fn adapt_all(&self, frames: &Embeddings) -> Result<Embeddings> {
        if frames.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: frames.dim(),
            });
        }
        let data = frames
            .rows()
            .flat_map(|v| self.adapt_unchecked(v))
            .collect();
        Embeddings::new(self.dim, data)
    }

    /// Adapts only the rows in `range`; other rows are left as-is.
    pub fn adapt_range(&self, frames: &Embeddings, range: Range<usize>) -> Embeddings {
        let mut data = frames.as_slice().to_vec();
        let d = self.dim;
        for i in range {
            let a = self.adapt_unchecked(frames.row(i));
            data[i * d..(i + 1) * d].copy_from_slice(&a);
        }
        Embeddings::new(d, data).expect("same shape")
    }

    /// Accumulates `d(grad_out · adapt(v)) / dparams` into `grads`.
    pub fn backward_frame(&self, v: &[f64], grad_out: &[f64], grads: &mut [f64]) {
        let (d, h) = (self.dim, self.hidden);
        let o = self.offsets();
        let z = self.hidden_pre(v);
        let w2 = self.w2();
        // W2, b2
        for a in 0..d {
            let g = grad_out[a];
            if g == 0.0 {
                continue;
            }
            for b in 0..h {
                grads[o[2] + a * h + b] += g * z[b].max(0.0);
            }
            grads[o[3] + a] += g;
        }
        // back through relu into W1, b1
        for b in 0..h {
            if z[b] <= 0.0 {
                continue;
            }
            let dz: f64 = (0..d).map(|a| w2[a * h + b] * grad_out[a]).sum();
            if dz == 0.0 {
                continue;
            }
            let row = &mut grads[o[0] + b * d..o[0] + (b + 1) * d];
            for (g, x) in row.iter_mut().zip(v) {
                *g += dz * x;
            }
            grads[o[1] + b] += dz;
        }
    }

    /// Backpropagates a gradient on the mean-pooled adapted feature of `range`.
    pub fn backward_pooled(
        &self,
        frames: &Embeddings,
        range: Range<usize>,
        grad_mean: &[f64],
        grads: &mut [f64],
    ) {
        let n = range.len() as f64;
        let g: Vec<f64> = grad_mean.iter().map(|x| x / n).collect();
        for t in range {
            self.backward_frame(frames.row(t), &g, grads);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(ADAPTER_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for x in &self.values {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::TruncatedFile {
                path: path.into(),
                expected: 12,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..4] != ADAPTER_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "CFA1",
            });
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let hidden = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 || hidden == 0 {
            return Err(Error::ZeroDim { path: path.into() });
        }
        let n = Self::param_count(dim, hidden);
        let values = read_f32s(&bytes[12..], n, path)?;
        Self::from_values(dim, hidden, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }
}

pub const ADAPTER_MAGIC: &[u8; 4] = b"CFA1";

pub(crate) fn read_f32s(body: &[u8], n: usize, path: &Path) -> Result<Vec<f64>> {
    if body.len() < 4 * n {
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected: 4 * n as u64,
            actual: body.len() as u64,
        });
    }
    body[..4 * n]
        .chunks_exact(4)
        .enumerate()
        .map(|(index, c)| {
            let x = f32::from_le_bytes(c.try_into().unwrap());
            if x.is_finite() {
                Ok(x as f64)
            } else {
                Err(Error::NonFiniteValue {
                    path: path.into(),
                    index,
                })
            }
        })
        .collect()
}

/// Proposal feature: the mean of adapted frames over `range`.
pub fn proposal_feature(adapted: &Embeddings, range: Range<usize>) -> Result<Vec<f64>> {
    adapted.mean_pool(range)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-batch NCE: `-sum_i log softmax_j(h_j · q_i)[i]`.
pub fn nce_loss(h: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    nce_loss_and_grad(h, q).0
}

/// NCE loss and its gradient with respect to each proposal feature `h_j`.
pub fn nce_loss_and_grad(h: &[Vec<f64>], q: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = h.len();
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; h.first().map_or(0, Vec::len)]; n];
    for (i, qi) in q.iter().enumerate() {
        let logits: Vec<f64> = h.iter().map(|hj| dot_unchecked(hj, qi)).collect();
        let lse = log_sum_exp(&logits);
        loss += lse - logits[i];
        for (j, g) in grads.iter_mut().enumerate() {
            let p = (logits[j] - lse).exp();
            let coeff = if i == j { p - 1.0 } else { p };
            for (gk, qk) in g.iter_mut().zip(qi) {
                *gk += coeff * qk;
            }
        }
    }
    (loss, grads)
}

/// One adapter training example: the ground-truth proposal of a query.
#[derive(Debug, Clone)]
pub struct AdapterSample<'a> {
    pub frames: &'a Embeddings,
    pub range: Range<usize>,
    pub q_cls: &'a [f64],
}

pub fn adapter_samples(corpus: &Corpus) -> Result<Vec<AdapterSample<'_>>> {
    corpus
        .instances
        .iter()
        .map(|inst| {
            let video = corpus.video(&inst.video_id)?;
            Ok(AdapterSample {
                frames: &video.features,
                range: feature_range(&inst.gt, video.fps, video.len()),
                q_cls: inst.query.cls(),
            })
        })
        .collect()
}

fn pooled_adapted(p: &AdapterParams, s: &AdapterSample) -> Vec<f64> {
    let n = s.range.len() as f64;
    let mut h = vec![0.0; p.dim];
    for t in s.range.clone() {
        for (o, x) in h.iter_mut().zip(p.adapt_unchecked(s.frames.row(t))) {
            *o += x;
        }
    }
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// NCE loss over one batch of ground-truth proposals.
pub fn adapter_loss(batch: &[AdapterSample], p: &AdapterParams) -> f64 {
    let h: Vec<Vec<f64>> = batch.iter().map(|s| pooled_adapted(p, s)).collect();
    let q: Vec<Vec<f64>> = batch.iter().map(|s| s.q_cls.to_vec()).collect();
    nce_loss(&h, &q)
}

/// NCE loss and analytic gradient with respect to every adapter parameter.
pub fn adapter_grad(batch: &[AdapterSample], p: &AdapterParams) -> (f64, AdapterParams) {
    let h: Vec<Vec<f64>> = batch.iter().map(|s| pooled_adapted(p, s)).collect();
    let q: Vec<Vec<f64>> = batch.iter().map(|s| s.q_cls.to_vec()).collect();
    let (loss, dh) = nce_loss_and_grad(&h, &q);
    let mut grads = AdapterParams::zeros(p.dim, p.hidden);
    for (s, g) in batch.iter().zip(&dh) {
        p.backward_pooled(s.frames, s.range.clone(), g, &mut grads.values);
    }
    (loss, grads)
}

#[derive(Debug, Clone)]
pub struct AdapterTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub lambda_adapt: f64,
    /// Bottleneck width; `None` means `max(1, d / 4)`.
    pub hidden: Option<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 5,
            seed: 0,
            lambda_adapt: 0.2,
            hidden: None,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

fn batched_loss(samples: &[AdapterSample], idx: &[usize], batch: usize, p: &AdapterParams) -> f64 {
    idx.chunks(batch.max(2))
        .map(|c| {
            let b: Vec<AdapterSample> = c.iter().map(|&i| samples[i].clone()).collect();
            adapter_loss(&b, p)
        })
        .sum()
}

/// Deterministic train / held-out split: roughly one in five instances held out.
pub(crate) fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 4 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let held = (n / 5).max(2);
    let heldout = idx.split_off(n - held);
    (idx, heldout)
}

#[derive(Debug, Clone)]
pub struct AdapterTrainReport {
    pub params: AdapterParams,
    pub history: TrainHistory,
    pub initial_heldout: f64,
    pub final_heldout: f64,
}

pub fn train_adapter(
    samples: &[AdapterSample],
    cfg: &AdapterTrainConfig,
) -> Result<AdapterTrainReport> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "adapter training needs at least 2 instances, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].frames.dim();
    let hidden = cfg.hidden.unwrap_or((dim / 4).max(1));
    let init = AdapterParams::init(dim, hidden, cfg.seed);
    let (train, heldout) = split_indices(samples.len(), cfg.seed);
    let loop_cfg = LoopConfig {
        optimizer: cfg.optimizer,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: cfg.early_stop_patience,
        seed: cfg.seed,
        param_scale: vec![],
    };
    let wrap = |v: &[f64]| AdapterParams {
        dim,
        hidden,
        values: v.to_vec(),
    };
    let initial_heldout = batched_loss(samples, &heldout, cfg.batch_size, &init);
    let (best, history) = run_epochs(
        init.values.clone(),
        train.len(),
        &loop_cfg,
        |v, chunk, _| {
            let b: Vec<AdapterSample> = chunk.iter().map(|&i| samples[train[i]].clone()).collect();
            if b.len() < 2 {
                return vec![0.0; v.len()];
            }
            adapter_grad(&b, &wrap(v)).1.values
        },
        |v| batched_loss(samples, &train, cfg.batch_size, &wrap(v)),
        |v| batched_loss(samples, &heldout, cfg.batch_size, &wrap(v)),
    );
    let params = wrap(&best);
    let final_heldout = batched_loss(samples, &heldout, cfg.batch_size, &params);
    Ok(AdapterTrainReport {
        params,
        history,
        initial_heldout,
        final_heldout,
    })
}
