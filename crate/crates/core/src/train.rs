//! SGD with momentum, learning-rate schedules, and the epoch loop.

use std::collections::BTreeMap;
use std::fmt;

use crate::autograd::{backward, softmax_cross_entropy};
use crate::data::{augment_cifar, Dataset};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::layer::Layer;
use crate::norm::Mode;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_top1,val_loss,val_top1";

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `lr0·(1 − step/total_steps)`, reaching 0 at `total_steps` and staying there.
    Linear { lr0: f64, total_steps: usize },
    /// `lr0 / factor^k` where `k` counts milestones `≤ epoch`.
    Step { lr0: f64, milestones: Vec<usize>, factor: f64 },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Linear { lr0, .. } if *lr0 < 0.0 || !lr0.is_finite() => {
                Err(Error::config(format!("learning rate {lr0} must be finite and non-negative")))
            }
            Schedule::Step { lr0, factor, .. } if *lr0 < 0.0 || !lr0.is_finite() || *factor < 1.0 => {
                Err(Error::config(format!("step schedule needs lr0 ≥ 0 and factor ≥ 1 (got {lr0}, {factor})")))
            }
            _ => Ok(()),
        }
    }

    pub fn initial(&self) -> f64 {
        match self {
            Schedule::Linear { lr0, .. } | Schedule::Step { lr0, .. } => *lr0,
        }
    }
}

/// Learning rate at `step`. Linear schedules count optimizer steps; step
/// schedules count epochs.
pub fn schedule_lr(s: &Schedule, step: usize) -> f64 {
    match s {
        Schedule::Linear { lr0, total_steps } => {
            if *total_steps == 0 || step >= *total_steps {
                0.0
            } else {
                lr0 * (1.0 - step as f64 / *total_steps as f64)
            }
        }
        Schedule::Step { lr0, milestones, factor } => {
            let k = milestones.iter().filter(|&&m| step >= m).count();
            lr0 / factor.powi(k as i32)
        }
    }
}

/// Momentum buffers and hyper-parameters of SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Element = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimState { lr, momentum, weight_decay, buffers: BTreeMap::new() }
    }
}

/// One SGD step over every parameter of `model` using its accumulated
/// gradients: `buf ← μ·buf + (g + λ·p)`, `p ← p − lr·buf`. Weight decay `λ`
/// applies to conv and linear weights only.
///
/// Gradients are checked before anything is modified; a non-finite one aborts
/// the step and names the parameter.
pub fn sgd_step<T: Element, L: Layer<T> + ?Sized>(model: &mut L, opt: &mut OptimState<T>) -> Result<()> {
    let mut bad = None;
    model.visit_params("", &mut |name, p| {
        if bad.is_none() && !p.grad.all_finite() {
            let worst = p.grad.data().iter().find(|v| !v.is_finite()).map(|v| v.to_f64());
            bad = Some(format!("non-finite gradient in {name} (e.g. {worst:?})"));
        }
    });
    if let Some(msg) = bad {
        return Err(Error::Numeric(msg));
    }
    let (lr, mu, wd) = (T::from_f64(opt.lr), T::from_f64(opt.momentum), T::from_f64(opt.weight_decay));
    let buffers = &mut opt.buffers;
    model.visit_params_mut("", &mut |name, p| {
        let buf = buffers.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
        let decay = p.kind.decays();
        for ((b, &g), v) in buf.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
            let step = if decay { g + wd * *v } else { g };
            *b = mu * *b + step;
            *v -= lr * *b;
        }
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            schedule: Schedule::Step { lr0: 0.1, milestones: vec![10, 15], factor: 10.0 },
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val: Option<EvalMetrics>,
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_top1,
            opt_num(self.val.map(|v| v.loss)),
            opt_num(self.val.map(|v| v.top1))
        )
    }
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:.6e} train_loss={:.6} train_top1={:.6} val_loss={} val_top1={}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_top1,
            opt_num(self.val.map(|v| v.loss)),
            opt_num(self.val.map(|v| v.top1))
        )
    }
}

fn correct(logits: &Tensor<impl Element>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &label)| {
            let row = logits.sample(n);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == label
        })
        .count()
}

fn check_compatible<T: Element>(net: &Network<T>, data: &Dataset) -> Result<()> {
    if net.meta.classes != data.classes {
        return Err(Error::config(format!(
            "network predicts {} classes but the {} data has {}",
            net.meta.classes, data.split, data.classes
        )));
    }
    if net.meta.input != data.image_dims() {
        return Err(Error::shape(format!("network expects images {:?}, data has {:?}", net.meta.input, data.image_dims())));
    }
    Ok(())
}

/// Inference-mode loss and top-1 accuracy. Never touches the network's state.
pub fn evaluate<T: Element>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    check_compatible(net, data)?;
    if data.is_empty() {
        return Ok(EvalMetrics { loss: f64::NAN, top1: f64::NAN });
    }
    let (mut loss, mut hits) = (0.0, 0);
    for idx in data.batches(batch_size, None) {
        let (x, labels) = data.batch(&idx);
        let logits = net.infer(&x.cast::<T>())?;
        loss += softmax_cross_entropy(&logits, &labels)?.value * labels.len() as f64;
        hits += correct(&logits, &labels);
    }
    Ok(EvalMetrics { loss: loss / data.len() as f64, top1: hits as f64 / data.len() as f64 })
}

fn params_finite<T: Element>(net: &Network<T>) -> Result<()> {
    let mut bad = None;
    net.visit_params(&mut |name, p| {
        if bad.is_none() && !p.value.all_finite() {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::Numeric(format!("parameter {name} became non-finite"))),
        None => Ok(()),
    }
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each one.
///
/// Batches are reshuffled per epoch from `cfg.seed`; with a fixed seed and a
/// single thread the whole run is deterministic.
pub fn train_epochs<T: Element>(
    net: &mut Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.schedule.validate()?;
    check_compatible(net, train)?;
    if let Some(v) = val {
        check_compatible(net, v)?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let root = Rng::new(cfg.seed);
    let mut opt = OptimState::new(cfg.schedule.initial(), cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order_rng = root.fork(2 * epoch as u64);
        let mut aug_rng = root.fork(2 * epoch as u64 + 1);
        let epoch_lr = match cfg.schedule {
            Schedule::Step { .. } => schedule_lr(&cfg.schedule, epoch - 1),
            Schedule::Linear { .. } => schedule_lr(&cfg.schedule, step),
        };
        net.set_mode(Mode::Train);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0, 0);
        for idx in train.batches(cfg.batch_size, Some(&mut order_rng)) {
            opt.lr = match cfg.schedule {
                Schedule::Step { .. } => epoch_lr,
                Schedule::Linear { .. } => schedule_lr(&cfg.schedule, step),
            };
            let (mut x, labels) = train.batch(&idx);
            if cfg.augment {
                x = augment_cifar(&x, &mut aug_rng);
            }
            let logits = net.forward(&x.cast::<T>())?;
            let loss = softmax_cross_entropy(&logits, &labels)?;
            backward(net, &loss)?;
            sgd_step(net, &mut opt)?;
            loss_sum += loss.value * labels.len() as f64;
            hits += correct(&logits, &labels);
            seen += labels.len();
            step += 1;
        }
        params_finite(net)?;
        net.set_mode(Mode::Infer);
        let val_metrics = val.map(|v| evaluate(net, v, cfg.batch_size)).transpose()?;
        let denom = seen.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / denom,
            train_top1: hits as f64 / denom,
            val: val_metrics,
        };
        if !m.train_loss.is_finite() && seen > 0 {
            return Err(Error::Numeric(format!("epoch {epoch}: training loss is not finite")));
        }
        on_epoch(&m)?;
        history.push(m);
    }
    Ok(history)
}
