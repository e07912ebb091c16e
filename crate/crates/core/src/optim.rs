//! First-order optimizers and the shared epoch loop used by both trainers.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (sgd|adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    scale: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { n } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            scale: Vec::new(),
        }
    }

    pub fn with_scale(mut self, scale: Vec<f64>) -> Self {
        self.scale = scale;
        self
    }

    fn lr_at(&self, i: usize) -> f64 {
        self.lr * self.scale.get(i).copied().unwrap_or(1.0)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    params[i] -= self.lr_at(i) * grads[i];
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr_at(i) * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Per-parameter learning-rate multipliers; empty means 1 everywhere.
    pub param_scale: Vec<f64>,
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Training loss after each accepted epoch, starting with the initial loss.
    pub train_loss: Vec<f64>,
    pub heldout_loss: Vec<f64>,
    pub rejected_epochs: usize,
    pub best_epoch: usize,
    pub final_lr: f64,
}

/// Mini-batch training with two safeguards: an epoch whose training loss
/// rises is rolled back and the learning rate halved, and the parameters with
/// the lowest held-out loss (initial parameters included) are returned.
pub fn run_epochs<B, T, H>(
    mut params: Vec<f64>,
    n_train: usize,
    cfg: &LoopConfig,
    mut batch_grad: B,
    train_loss: T,
    heldout_loss: H,
) -> (Vec<f64>, TrainHistory)
where
    B: FnMut(&[f64], &[usize], &mut ChaCha8Rng) -> Vec<f64>,
    T: Fn(&[f64]) -> f64,
    H: Fn(&[f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len())
        .with_scale(cfg.param_scale.clone());
    let mut history = TrainHistory::default();
    let mut prev_train = train_loss(&params);
    history.train_loss.push(prev_train);
    let mut best_heldout = heldout_loss(&params);
    history.heldout_loss.push(best_heldout);
    let mut best = params.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n_train).collect();
    let batch = cfg.batch_size.max(1);

    for epoch in 1..=cfg.max_epochs {
        let snapshot = (params.clone(), opt.clone());
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let g = batch_grad(&params, chunk, &mut rng);
            opt.step(&mut params, &g);
        }
        let tl = train_loss(&params);
        if !(tl <= prev_train) {
            (params, opt) = snapshot;
            let lr = opt.lr() / 2.0;
            opt.set_lr(lr);
            history.rejected_epochs += 1;
            since_best += 1;
            if since_best >= cfg.patience || lr < 1e-12 {
                break;
            }
            continue;
        }
        prev_train = tl;
        history.train_loss.push(tl);
        let hl = heldout_loss(&params);
        history.heldout_loss.push(hl);
        if hl < best_heldout {
            best_heldout = hl;
            best.clone_from(&params);
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    history.final_lr = opt.lr();
    (best, history)
}

/// Deterministic per-stage seed derived from a root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    // splitmix64 over the root xor an FNV-1a hash of the stage name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
