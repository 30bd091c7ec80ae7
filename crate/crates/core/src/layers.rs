//! Conv and batchnorm layers: parameter storage plus tape registration.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    /// Fan-in-scaled zero-mean normal init, std = sqrt(2 / fan_in).
    pub fn init(
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let data: Vec<f64> = (0..cout * cin * kh * kw)
            .map(|_| normal.sample(rng))
            .collect();
        Conv2dLayer {
            weight: Tensor::new(vec![cout, cin, kh, kw], data).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let w = g.param(name, self.weight.clone());
        g.conv2d(x, w, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
        }
    }

    /// Train mode normalizes by batch statistics and (when `update_stats`)
    /// advances the running EMA; eval mode uses the frozen running stats.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        name: &str,
        mode: Mode,
        update_stats: bool,
    ) -> Result<NodeId> {
        let gamma = g.param(&format!("{name}.gamma"), self.gamma.clone());
        let beta = g.param(&format!("{name}.beta"), self.beta.clone());
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                if update_stats {
                    let xs = g.value(x).shape();
                    let m = (xs[0] * xs[2] * xs[3]) as f64;
                    // running var uses the unbiased estimate when possible
                    let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    for (rm, &bm) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bm;
                    }
                    for (rv, &bv) in self.running_var.data_mut().iter_mut().zip(&var) {
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bv * bessel;
                    }
                }
                Ok(y)
            }
            Mode::Eval => g.batchnorm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                BN_EPS,
            ),
        }
    }
}
