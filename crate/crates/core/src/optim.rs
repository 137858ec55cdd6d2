//! SGD with momentum and a milestone learning-rate schedule, plus Adam for
//! the auxiliary sequence model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Piecewise-constant multipliers: the rate at epoch `e` is the base rate
/// times every multiplier whose milestone is `<= e`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule::default()
    }

    /// Decay by `gamma` every `every` epochs starting at `first`, up to `total`.
    pub fn step_decay(first: usize, every: usize, gamma: f64, total: usize) -> Self {
        let milestones = (first..total)
            .step_by(every.max(1))
            .map(|e| (e, gamma))
            .collect();
        LrSchedule { milestones }
    }

    /// The CIFAR-style schedule: 240 epochs, x0.1 every 30 epochs after 150.
    pub fn cifar() -> Self {
        Self::step_decay(150, 30, 0.1, 240)
    }

    pub fn factor(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(m, _)| *m <= epoch)
            .fold(1.0, |acc, (_, f)| acc * f)
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64, schedule: LrSchedule) -> Self {
        Sgd {
            lr,
            momentum,
            schedule,
            velocity: params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.schedule.factor(epoch)
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) -> Result<()> {
        check_shapes(&self.velocity, &velocity)?;
        self.velocity = velocity;
        Ok(())
    }

    /// `v <- momentum * v + g; p <- p - lr(epoch) * v`, then clear gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>, epoch: usize) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::contract(
                "optimizer was built for a different parameter set",
            ));
        }
        let lr = T::from_f64(self.lr_at(epoch));
        let mu = T::from_f64(self.momentum);
        for i in 0..params.len() {
            let g = params.take_grad(i).ok_or_else(|| {
                Error::contract(format!("parameter `{}` has no gradient", params.names()[i]))
            })?;
            let v = self.velocity[i].data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi;
            }
            for (p, &vi) in params.value_mut(i).data_mut().iter_mut().zip(v.iter()) {
                *p -= lr * vi;
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step_count: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        check_shapes(&self.m, &m)?;
        check_shapes(&self.v, &v)?;
        self.step_count = step_count;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(
                "optimizer was built for a different parameter set",
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let bias1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for i in 0..params.len() {
            let g = params.take_grad(i).ok_or_else(|| {
                Error::contract(format!("parameter `{}` has no gradient", params.names()[i]))
            })?;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.value_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

fn check_shapes<T: Real>(have: &[Tensor<T>], got: &[Tensor<T>]) -> Result<()> {
    if have.len() != got.len() {
        return Err(Error::contract("optimizer state count mismatch"));
    }
    for (a, b) in have.iter().zip(got) {
        if a.shape() != b.shape() {
            return Err(Error::dimension("optimizer state", a.shape(), b.shape()));
        }
    }
    Ok(())
}
