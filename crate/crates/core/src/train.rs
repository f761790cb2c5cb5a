//! Masked fine-tuning, explicit linearized fine-tuning and pre-training.
//!
//! Every optimizer step multiplies the gradient by the mask before touching
//! optimizer state, and coordinates with `c_j = 0` are skipped entirely, so
//! they come out bitwise equal to their starting values with zero moments.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{PretrainMixture, Samples};
use crate::mask::SparseMask;
use crate::models::{FlatParams, Model, ParamBinding};
use crate::numeric::l2_norm;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "yes")]
    pub cosine_schedule: bool,
    /// Stop after this many validation checks without improvement.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Record a parameter snapshot every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn default_eval_every() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            iterations: 300,
            batch_size: 64,
            optimizer: Optimizer::Adamw,
            weight_decay: 0.0,
            warmup_steps: 30,
            cosine_schedule: true,
            early_stop_patience: None,
            eval_every: default_eval_every(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "iterations and batch_size must be at least 1".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for step `t` (0-based): linear warmup then cosine decay.
    pub fn lr_at(&self, t: usize) -> f64 {
        let base = self.learning_rate;
        if t < self.warmup_steps {
            return base * (t + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_schedule {
            return base;
        }
        let span = self.iterations.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (t - self.warmup_steps) as f64 / span;
        base * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: FlatParams,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub log: Vec<StepLog>,
    /// Snapshots at step 0, every `checkpoint_every` steps, and the end.
    pub trajectory: Vec<FlatParams>,
    pub steps_run: usize,
}

/// JSON-lines, one object per step.
pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut f, entry)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Epoch-wise shuffled mini-batches.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batches {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

struct LoopOutput {
    values: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    log: Vec<StepLog>,
    snapshots: Vec<Vec<f64>>,
    steps_run: usize,
}

/// Shared optimizer loop. `grad` returns the batch loss and full gradient at
/// the current values; `val` optionally returns a validation loss.
fn optimize(
    start: &[f64],
    update: &[bool],
    cfg: &TrainConfig,
    mut grad: impl FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
    mut val: Option<&mut dyn FnMut(&[f64]) -> Result<f64>>,
) -> Result<LoopOutput> {
    cfg.validate()?;
    let m = start.len();
    let mut theta = start.to_vec();
    let mut m1 = vec![0.0; m];
    let mut m2 = vec![0.0; m];
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut snapshots = vec![theta.clone()];
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut steps_run = 0;
    for t in 0..cfg.iterations {
        let (loss, mut g) = grad(t, &theta).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("training diverged at step {t}: {msg}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {t}: loss {loss}"
            )));
        }
        for (gj, &keep) in g.iter_mut().zip(update) {
            if !keep {
                *gj = 0.0;
            }
        }
        let grad_norm = l2_norm(&g);
        let lr = cfg.lr_at(t);
        let step = (t + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(step);
        let bc2 = 1.0 - BETA2.powi(step);
        for j in 0..m {
            if !update[j] {
                continue;
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    theta[j] -= lr * (g[j] + cfg.weight_decay * theta[j]);
                }
                Optimizer::Adamw => {
                    m1[j] = BETA1 * m1[j] + (1.0 - BETA1) * g[j];
                    m2[j] = BETA2 * m2[j] + (1.0 - BETA2) * g[j] * g[j];
                    let mh = m1[j] / bc1;
                    let vh = m2[j] / bc2;
                    theta[j] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + cfg.weight_decay * theta[j]);
                }
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameters became non-finite at step {t}"
            )));
        }
        steps_run = t + 1;
        let mut val_loss = None;
        if let (Some(patience), Some(f)) = (cfg.early_stop_patience, val.as_mut()) {
            if cfg.eval_every > 0 && steps_run % cfg.eval_every == 0 {
                let v = f(&theta)?;
                val_loss = Some(v);
                if v < best {
                    best = v;
                    stale = 0;
                } else {
                    stale += 1;
                }
                if stale >= patience {
                    log.push(StepLog {
                        step: t,
                        loss,
                        grad_norm,
                        lr,
                        val_loss,
                    });
                    break;
                }
            }
        }
        log.push(StepLog {
            step: t,
            loss,
            grad_norm,
            lr,
            val_loss,
        });
        if cfg.checkpoint_every > 0
            && steps_run % cfg.checkpoint_every == 0
            && steps_run < cfg.iterations
        {
            snapshots.push(theta.clone());
        }
    }
    snapshots.push(theta.clone());
    Ok(LoopOutput {
        values: theta,
        m1,
        m2,
        log,
        snapshots,
        steps_run,
    })
}

fn batch_inputs(data: &Samples, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(idx.len() * data.dim);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(data.row(i));
        y.push(data.y[i]);
    }
    (x, y)
}

fn check_task(data: &Samples, model: &Model) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    if data.dim != model.config().input_dim {
        return Err(Error::Shape(format!(
            "data dim {} for model input {}",
            data.dim,
            model.config().input_dim
        )));
    }
    Ok(())
}

/// Fine-tunes the coordinates kept by `mask` on `train` through `head`.
pub fn train_sparse(
    model: &Model,
    theta0: &FlatParams,
    mask: &SparseMask,
    train: &Samples,
    val: Option<&Samples>,
    head: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model.ensure_layout(theta0)?;
    check_task(train, model)?;
    if mask.len() != theta0.len() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} parameters",
            mask.len(),
            theta0.len()
        )));
    }
    if !theta0.is_finite() {
        return Err(Error::Numeric("initial parameters are not finite".into()));
    }
    let mut batches = Batches::new(train.len(), cfg.batch_size, cfg.seed);
    let grad = |_t: usize, theta: &[f64]| {
        let (x, y) = batch_inputs(train, &batches.next());
        model.loss_and_grad(&theta0.with_values(theta.to_vec())?, &x, &y, head)
    };
    let mut val_fn = |theta: &[f64]| -> Result<f64> {
        let v = val.expect("validation set");
        Ok(model
            .loss_and_grad(&theta0.with_values(theta.to_vec())?, &v.x, &v.y, head)?
            .0)
    };
    let val_ref: Option<&mut dyn FnMut(&[f64]) -> Result<f64>> = match val {
        Some(v) if !v.is_empty() => Some(&mut val_fn),
        _ => None,
    };
    let out = optimize(&theta0.values, &mask.bits, cfg, grad, val_ref)?;
    Ok(TrainOutcome {
        params: theta0.with_values(out.values)?,
        first_moment: out.m1,
        second_moment: out.m2,
        log: out.log,
        trajectory: out
            .snapshots
            .into_iter()
            .map(|v| theta0.with_values(v))
            .collect::<Result<_>>()?,
        steps_run: out.steps_run,
    })
}

/// Loss and gradient of the first-order Taylor model
/// `f(x, θ0) + J(x, θ0) τ` with respect to `τ`.
pub fn linearized_loss_and_grad(
    model: &Model,
    theta0: &FlatParams,
    tau: &[f64],
    inputs: &[f64],
    labels: &[usize],
    head: usize,
) -> Result<(f64, Vec<f64>)> {
    model.ensure_layout(theta0)?;
    let mut g = Graph::new();
    let p = ParamBinding::bind(&mut g, theta0, Some(tau), true)?;
    let d = model.config().input_dim;
    let x = g.constant(Tensor::matrix(inputs.len() / d, d, inputs.to_vec())?)?;
    let out = model.forward_graph(&mut g, &p, x, head)?;
    let z = g.value(out);
    let zt = g
        .tangent(out)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(z.shape()));
    let (rows, c) = (z.rows(), z.cols());
    if rows == 0 || labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    let mut seed = vec![0.0; rows * c];
    let mut loss = 0.0;
    for r in 0..rows {
        let lin: Vec<f64> = (0..c).map(|k| z.row(r)[k] + zt.row(r)[k]).collect();
        let max = lin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lin.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let y = labels[r];
        if y >= c {
            return Err(Error::Shape(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        loss += lse - lin[y];
        for k in 0..c {
            let pk = (lin[k] - lse).exp();
            seed[r * c + k] = (pk - f64::from(u8::from(k == y))) / rows as f64;
        }
    }
    let loss = loss / rows as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("linearized loss {loss}")));
    }
    let grads = g.backward(out, &Tensor::matrix(rows, c, seed)?)?;
    Ok((loss, p.flat_grad(&grads, model.layout())))
}

/// Trains `τ` through the linearized model; returns `θ0 + τ`.
pub fn train_linearized(
    model: &Model,
    theta0: &FlatParams,
    mask: &SparseMask,
    train: &Samples,
    head: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_task(train, model)?;
    model.ensure_layout(theta0)?;
    let m = theta0.len();
    let mut batches = Batches::new(train.len(), cfg.batch_size, cfg.seed);
    let grad = |_t: usize, tau: &[f64]| {
        let (x, y) = batch_inputs(train, &batches.next());
        linearized_loss_and_grad(model, theta0, tau, &x, &y, head)
    };
    let out = optimize(&vec![0.0; m], &mask.bits, cfg, grad, None)?;
    let shift = |tau: &[f64]| {
        theta0.with_values(theta0.values.iter().zip(tau).map(|(a, b)| a + b).collect())
    };
    Ok(TrainOutcome {
        params: shift(&out.values)?,
        first_moment: out.m1,
        second_moment: out.m2,
        log: out.log,
        trajectory: out
            .snapshots
            .iter()
            .map(|t| shift(t))
            .collect::<Result<_>>()?,
        steps_run: out.steps_run,
    })
}

/// Trains every parameter (all heads included) on the mixture. Each step
/// averages the gradients of one mini-batch per head.
pub fn pretrain(
    model: &Model,
    init: &FlatParams,
    mixture: &PretrainMixture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model.ensure_layout(init)?;
    if mixture.is_empty() {
        return Err(Error::Empty("pre-training mixture is empty".into()));
    }
    let parts: Vec<&(usize, Samples)> = mixture
        .parts
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .collect();
    for (_, s) in &parts {
        check_task(s, model)?;
    }
    let mut samplers: Vec<Batches> = parts
        .iter()
        .enumerate()
        .map(|(i, (_, s))| Batches::new(s.len(), cfg.batch_size, cfg.seed.wrapping_add(i as u64)))
        .collect();
    let m = init.len();
    let grad = |_t: usize, theta: &[f64]| {
        let params = init.with_values(theta.to_vec())?;
        let mut total = vec![0.0; m];
        let mut loss = 0.0;
        for ((head, s), sampler) in parts.iter().zip(samplers.iter_mut()) {
            let (x, y) = batch_inputs(s, &sampler.next());
            let (l, g) = model.loss_and_grad(&params, &x, &y, *head)?;
            loss += l;
            for (a, b) in total.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let n = parts.len() as f64;
        Ok((loss / n, total.into_iter().map(|v| v / n).collect()))
    };
    let out = optimize(&init.values, &vec![true; m], cfg, grad, None)?;
    Ok(TrainOutcome {
        params: init.with_values(out.values)?,
        first_moment: out.m1,
        second_moment: out.m2,
        log: out.log,
        trajectory: out
            .snapshots
            .into_iter()
            .map(|v| init.with_values(v))
            .collect::<Result<_>>()?,
        steps_run: out.steps_run,
    })
}
