//! Parameterized layers built on the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{StatUpdate, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running buffers updated after the pass.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// He-normal kernel (std = sqrt(2 / fan_in)), zero bias.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel).max(1);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let w = Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| T::lit(normal.sample(rng)));
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamKind::Trainable);
        Self { weight, bias, in_ch, out_ch, kernel, stride: 1 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let c = [channels];
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&c, T::one()), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&c), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&c), ParamKind::Buffer),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&c, T::one()),
                ParamKind::Buffer,
            ),
            channels,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let eps = T::lit(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batchnorm(x, g, b, None, eps)?;
                tape.record_stat_update(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                    momentum: T::lit(BN_MOMENTUM),
                });
                Ok(y)
            }
            Mode::Eval => {
                let running = Some((store.get(self.running_mean), store.get(self.running_var)));
                Ok(tape.batchnorm(x, g, b, running, eps)?.0)
            }
        }
    }
}

/// conv3×3 → BatchNorm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, rng);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch);
        Self { conv, bn }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let c = self.conv.forward(tape, store, x)?;
        let b = self.bn.forward(tape, store, c, mode)?;
        Ok(tape.relu(b))
    }
}
