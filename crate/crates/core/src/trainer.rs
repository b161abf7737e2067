//! Mini-batch training with Adam, a reduce-on-plateau learning-rate
//! schedule and best-validation checkpointing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, Record};
use crate::datasynth::Sample;
use crate::error::{shape_err, Error, Result};
use crate::labelcodec::{collapse_to_three, LabelMap, OverlapPolicy};
use crate::losses::{loss_and_grad, loss_on_tape, LossKind, LossSpec};
use crate::metrics::IouAccumulator;
use crate::models::Model;
use crate::nn::Mode;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place; `t` is the
/// 1-based step count.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return shape_err(format!(
            "adam_step: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        ));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] = params[i] - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Adam moments for every learnable tensor of a store, in store order.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = |k: ParamKind, n: usize| (k == ParamKind::Trainable).then(|| vec![T::zero(); n]);
        let m = store.iter().map(|(_, p)| zeros(p.kind, p.tensor.len())).collect();
        let v = store.iter().map(|(_, p)| zeros(p.kind, p.tensor.len())).collect();
        Self { cfg, t: 0, m, v }
    }

    /// Update every learnable tensor from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        for ((id, p), (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (Some(m), Some(v)) = (m, v) else { continue };
            let grad = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            adam_step(p.tensor.data_mut(), &grad, m, v, self.t, lr, &self.cfg)
                .map_err(|e| Error::Shape(format!("parameter {} ({}): {e}", p.name, id.0)))?;
        }
        Ok(())
    }

    pub fn records(&self, store: &ParamStore<T>) -> Vec<Record> {
        let mut out = Vec::new();
        for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
            for ((_, p), mom) in store.iter().zip(moments) {
                if let Some(mom) = mom {
                    let data = mom.iter().map(|x| x.as_f64() as f32).collect();
                    out.push(Record::new(format!("adam.{kind}.{}", p.name), p.tensor.dims(), data));
                }
            }
        }
        out.push(Record::scalar("adam.t", self.t as f32));
        out
    }
}

/// Reduce the learning rate by `factor` after `patience` epochs without
/// a validation-loss decrease of more than `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, threshold: 1e-6, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Record one epoch's validation loss; returns whether the rate dropped.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub adam: AdamConfig,
    pub loss: LossSpec,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// How OV ground truth is folded when the model has three classes.
    pub overlap_policy: OverlapPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr0: 1e-3,
            lr_patience: 4,
            lr_factor: 0.1,
            adam: AdamConfig::default(),
            loss: LossSpec::new(LossKind::Fusion, 4).expect("four-class defaults"),
            seed: 0,
            max_steps: None,
            overlap_policy: OverlapPolicy::ToPt,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor must lie in (0,1), got {}", self.lr_factor)));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_iou: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Parameters and optimizer state at the best validation loss.
    pub best: Checkpoint,
    /// Parameters and optimizer state after the last step.
    pub last: Checkpoint,
}

/// Training target for a four-class sample given the model's class count.
pub fn target_labels(labels: &LabelMap, classes: usize, policy: OverlapPolicy) -> Result<LabelMap> {
    match classes {
        4 => Ok(labels.clone()),
        3 => collapse_to_three(labels, policy),
        c => Err(Error::Config(format!("unsupported class count {c}"))),
    }
}

struct Prepared<T: Real> {
    inputs: Vec<Tensor<T>>,
    targets: Vec<Tensor<T>>,
    labels: Vec<LabelMap>,
}

fn prepare<T: Real>(samples: &[Sample], classes: usize, policy: OverlapPolicy) -> Result<Prepared<T>> {
    let mut p = Prepared { inputs: Vec::new(), targets: Vec::new(), labels: Vec::new() };
    for s in samples {
        let l = target_labels(&s.labels, classes, policy)?;
        p.inputs.push(s.input());
        p.targets.push(l.one_hot());
        p.labels.push(l);
    }
    Ok(p)
}

/// Mean per-sample loss and pooled IoU in inference mode.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    loss: &LossSpec,
    policy: OverlapPolicy,
) -> Result<(f64, IouAccumulator)> {
    let data = prepare::<T>(samples, model.out_classes(), policy)?;
    let mut total = 0.0;
    let mut acc = IouAccumulator::new();
    for i in 0..data.inputs.len() {
        let probs = model.predict(&data.inputs[i])?;
        total += loss_and_grad(&probs, &data.targets[i], loss)?.0.as_f64();
        acc.add(&LabelMap::from_probs(&probs)?, &data.labels[i])?;
    }
    Ok((total / data.inputs.len().max(1) as f64, acc))
}

fn snapshot<T: Real>(model: &Model<T>, adam: &Adam<T>, epoch: usize, best: f64, lr: f64) -> Checkpoint {
    let mut c = Checkpoint::from_store(model.store());
    c.optimizer = adam.records(model.store());
    c.optimizer.push(Record::scalar("train.epoch", epoch as f32));
    c.optimizer.push(Record::scalar("train.best_val_loss", best as f32));
    c.optimizer.push(Record::scalar("train.lr", lr as f32));
    c
}

/// Train `model` in place; `on_epoch` sees each epoch's log entry as it is produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training and validation sets must be nonempty".into()));
    }
    let classes = model.out_classes();
    if cfg.loss.weights.len() != classes {
        return Err(Error::Config(format!(
            "loss has {} class weights but the model predicts {classes} classes",
            cfg.loss.weights.len()
        )));
    }
    let data = prepare::<T>(train_set, classes, cfg.overlap_policy)?;
    let mut adam = Adam::new(model.store(), cfg.adam);
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.lr_factor, cfg.lr_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.inputs.len()).collect();
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut best_val = f64::INFINITY;
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = sched.lr;
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let x = Tensor::stack(&chunk.iter().map(|&i| data.inputs[i].clone()).collect::<Vec<_>>())?;
            let y = Tensor::stack(&chunk.iter().map(|&i| data.targets[i].clone()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let forward = model
                .forward(&mut tape, xv, Mode::Train)
                .and_then(|pred| loss_on_tape(&mut tape, pred.probs, &y, &cfg.loss));
            let root = match forward {
                Ok(r) => r,
                // Non-finite activations are caught by the layers before a loss exists.
                Err(Error::Numeric(_)) => return Err(Error::Divergence { epoch, step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let loss = tape.value(root).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            let grads = tape.backward(root)?;
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads)?;
            store.apply_stat_updates(tape.take_stat_updates());
            adam.step(store, lr)?;
            step += 1;
            sum += loss;
            batches += 1;
            step_losses.push(loss);
        }
        if batches == 0 {
            break 'epochs;
        }
        let (val_loss, acc) = match evaluate_model(model, val_set, &cfg.loss, cfg.overlap_policy) {
            Err(Error::Numeric(_)) => return Err(Error::Divergence { epoch, step, loss: f64::NAN }),
            r => r?,
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, step, loss: val_loss });
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = Some(snapshot(model, &adam, epoch, best_val, lr));
        }
        sched.observe(val_loss);
        let entry = EpochLog {
            epoch,
            train_loss: sum / batches as f64,
            val_loss,
            val_mean_iou: acc.report().mean,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    let last_epoch = log.last().map_or(0, |e| e.epoch);
    let last = snapshot(model, &adam, last_epoch, best_val, sched.lr);
    Ok(TrainOutcome { log, step_losses, best: best.unwrap_or_else(|| last.clone()), last })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![0.5f64, -1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let cfg = AdamConfig::default();
        for g in [0.3f64, -2.0, 1e-3] {
            let mut p = vec![1.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_step(&mut p, &[g], &mut m, &mut v, 1, 1e-3, &cfg).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let expected = 1e-3 * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - p[0]).abs() - expected).abs() < 1e-12);
            assert_eq!((1.0 - p[0]).signum(), g.signum());
        }
    }

    #[test]
    fn adam_is_elementwise() {
        let mut p = vec![0.2f32, 0.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=5 {
            adam_step(&mut p, &[0.7, 0.7], &mut m, &mut v, t, 0.01, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0], p[1]);
        assert!(adam_step(&mut p, &[0.0], &mut m, &mut v, 6, 0.01, &AdamConfig::default()).is_err());
    }

    #[test]
    fn plateau_drop_after_four_flat_epochs() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 4);
        let mut lrs = Vec::new();
        for v in [1.0, 0.9, 0.9, 0.9, 0.9, 0.9] {
            s.observe(v);
            lrs.push(s.lr);
        }
        assert_eq!(&lrs[..5], &[1e-3; 5]);
        assert!((lrs[5] - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_needs_strict_decrease() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2);
        s.observe(1.0);
        assert!(!s.observe(1.0 - 1e-7));
        assert!(s.observe(1.0 - 5e-7));
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
