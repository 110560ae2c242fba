//! Optimisation: initialisation, loss, Adam, clipping, scheduling and the
//! epoch loop.

mod init;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Reduction, Var};
use crate::config::{PlateauConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::FindingLabel;
use crate::model::Model;
use crate::params::ParamStore;
use crate::seeding::mix;
use crate::tensor::Tensor;

pub use init::{xavier_init, xavier_with_fans};

/// Mean token cross-entropy over unmasked positions.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    g.cross_entropy(logits, targets, mask, Reduction::Mean)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                param: format!("parameter `{}`", params.name(i)),
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    param: format!("parameter `{}`", params.name(i)),
                });
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a relative improvement of `threshold`. Each learning-rate
/// level starts from a fresh baseline, so flat losses reduce at epochs
/// `patience + 1`, `2·(patience + 1)`, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        PlateauScheduler {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - self.cfg.threshold) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr.min(self.lr));
                self.bad_epochs = 0;
                self.best = f64::INFINITY;
            }
        }
        self.lr
    }
}

/// A tokenised training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub labels: Vec<FindingLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.12e},{:.12e},{:.6e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    s
}

/// Everything the optimiser carries between epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub scheduler: PlateauScheduler,
    pub epoch: usize,
    pub best_val: f64,
    pub epochs_since_improvement: usize,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig) -> Self {
        TrainState {
            adam: Adam::new(&params),
            scheduler: PlateauScheduler::new(cfg.scheduler, cfg.learning_rate),
            params,
            epoch: 0,
            best_val: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
    pub stopped_early: bool,
}

/// Token-weighted mean cross-entropy over `examples`, without dropout.
pub fn evaluate_loss(model: &Model, params: &ParamStore, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for ex in examples {
        let mut g = Graph::with_params(params, Mode::Eval);
        let (loss, n) = model.example_loss(&mut g, &ex.image, &ex.tokens, &ex.labels, 0.0)?;
        total += g.value(loss).data()[0];
        count += n;
    }
    Ok(total / count as f64)
}

/// One optimiser step over `batch`. Returns the summed token cross-entropy
/// and the token count.
/// Names the forward pass that overflowed and the parameter with the largest
/// magnitude.
fn forward_abort(params: &ParamStore, what: &str) -> Error {
    let largest = params
        .iter()
        .map(|(name, t)| (name, t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let detail = largest.map_or(String::new(), |(name, v)| format!("; largest parameter `{name}` at {v:e}"));
    Error::NonFinite {
        param: format!("{what}{detail}"),
    }
}

fn train_batch(
    model: &Model,
    state: &mut TrainState,
    batch: &[&Example],
    cfg: &TrainConfig,
    seeds: [u64; 2],
) -> Result<(f64, usize)> {
    let tokens: usize = batch.iter().map(|e| e.tokens.len() - 1).sum();
    let mut grads: Vec<Vec<f64>> = state.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut loss_sum = 0.0;
    let dropout = model.decoder().config().dropout > 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mode = if dropout {
            Mode::Train {
                seed: mix(&[cfg.seed, seeds[0], seeds[1], i as u64]),
            }
        } else {
            Mode::Eval
        };
        let mut g = Graph::with_params(&state.params, mode);
        let forward = model.example_loss(&mut g, &ex.image, &ex.tokens, &ex.labels, cfg.probe_weight);
        let loss = match forward {
            Ok((loss, _)) if g.value(loss).data()[0].is_finite() => loss,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(forward_abort(&state.params, &format!("training loss of {}", ex.id))),
            Err(e) => return Err(e),
        };
        let scaled = g.scale(loss, 1.0 / tokens as f64);
        loss_sum += g.value(loss).data()[0];
        let back = g.backward(scaled)?;
        for (p, acc) in grads.iter_mut().enumerate() {
            if let Some(gr) = back.param(p) {
                acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
        }
    }
    clip_gradients(&mut grads, cfg.gradient_clipping);
    let lr = state.lr();
    state.adam.step(&mut state.params, &grads, lr)?;
    Ok((loss_sum, tokens))
}

/// Full training loop: shuffled mini-batches, clip + Adam per batch, then
/// validation loss, plateau scheduling and early stopping per epoch. The
/// best-validation parameters are kept. `on_epoch` sees every history row
/// as it is produced.
pub fn train(
    model: &Model,
    params: ParamStore,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_set = if cfg.validate_on_train { train_set } else { val_set };
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut state = TrainState::new(params, cfg);
    let mut best_params = state.params.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64])));
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        let lr = state.lr();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (l, n) = train_batch(model, &mut state, &batch, cfg, [epoch as u64, step as u64])?;
            loss_sum += l;
            tokens += n;
        }
        let val_loss = match evaluate_loss(model, &state.params, val_set) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(forward_abort(&state.params, "validation loss")),
            Err(e) => return Err(e),
        };
        let row = HistoryRow {
            epoch,
            train_loss: loss_sum / tokens as f64,
            val_loss,
            lr,
        };
        on_epoch(&row);
        history.push(row);
        state.scheduler.step(val_loss);
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.epochs_since_improvement = 0;
            best_params = state.params.clone();
            best_epoch = epoch;
        } else {
            state.epochs_since_improvement += 1;
        }
        if cfg.target_loss > 0.0 && val_loss < cfg.target_loss {
            break;
        }
        if state.epochs_since_improvement >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        best_params,
        best_epoch,
        history,
        stopped_early,
    })
}

/// Human-readable `key = value` sidecar written next to a checkpoint.
pub fn write_metadata(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {}", v.replace('\n', " "));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_metadata(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(" = ")
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::CorruptData {
                    path: path.to_path_buf(),
                    reason: format!("bad metadata line `{l}`"),
                })
        })
        .collect()
}
