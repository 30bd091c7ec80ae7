//! Tape-based reverse-mode differentiation over exactly the operations the
//! pipeline needs. A `Graph` records one forward computation; `backward`
//! consumes the recording and may be called at most once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name, one entry per parameter registered on
/// the tape. Parameters unused downstream of the loss hold exact zeros.
#[derive(Debug, Clone, Default)]
pub struct GradientRecord {
    grads: HashMap<String, Tensor>,
}

impl GradientRecord {
    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        batch_mode: bool,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        window: (usize, usize),
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Sum {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    /// S[n,i,k] = sum_j M[i,j] F[n,j,k]
    ClassScores {
        f: NodeId,
        m: NodeId,
    },
    SoftmaxLast {
        x: NodeId,
        temp: f64,
    },
    /// Constant one-hot at the row argmax; no gradient flows through it.
    OneHotArgmaxLast,
    /// a[n,i,j] = sum_k A[n,i,k] F[n,j,k]
    Attend {
        f: NodeId,
        att: NodeId,
    },
    /// z[n,i,j] = g[n,j] + lambda * a[n,i,j]
    ResidualCombine {
        g: NodeId,
        a: NodeId,
        lambda: f64,
    },
    /// logit[n,i] = sum_j M[i,j] z[n,i,j] + b[i]
    HeadLogits {
        z: NodeId,
        m: NodeId,
        b: NodeId,
    },
    BceWithLogits {
        logits: NodeId,
        truths: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Register a trainable parameter under a unique name.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects 4-d input and kernel, got {xs:?} and {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kcin != cin {
            return Err(Error::shape(
                format!("conv2d kernel Cin vs input Cin (kernel {ws:?}, input {xs:?})"),
                &[cout, cin, kh, kw],
                &ws,
            ));
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::invalid(format!("conv2d kernel {kh}x{kw} exceeds padded input {h}x{wdt} (pad {pad})")))?;
        let ow = kernels::conv_out_extent(wdt, kw, stride, pad)
            .ok_or_else(|| Error::invalid(format!("conv2d kernel {kh}x{kw} exceeds padded input {h}x{wdt} (pad {pad})")))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            n,
            cin,
            h,
            wdt,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Op::Conv2d { x, w, stride, pad },
            rg,
        ))
    }

    /// Train-mode batchnorm over batch statistics. Returns the node plus the
    /// per-channel batch mean and biased variance so the caller can update
    /// running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let (n, c, hw) = self.check_bn_shapes(x, gamma, beta, eps)?;
        let (mean, var) = kernels::batch_stats(self.value(x).data(), n, c, hw);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = kernels::batchnorm_apply(
            self.value(x).data(),
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            hw,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.value(x).shape().to_vec();
        let id = self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
                batch_mode: true,
            },
            rg,
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batchnorm using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, hw) = self.check_bn_shapes(x, gamma, beta, eps)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid("batchnorm running stats length mismatch"));
        }
        let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = kernels::batchnorm_apply(
            self.value(x).data(),
            running_mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            hw,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
                batch_mode: false,
            },
            rg,
        ))
    }

    fn check_bn_shapes(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(usize, usize, usize)> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!(
                "batchnorm epsilon must be positive, got {eps}"
            )));
        }
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Error::invalid(format!(
                "batchnorm expects 4-d input, got {xs:?}"
            )));
        }
        let c = xs[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm gamma/beta",
                &[c],
                self.value(gamma).shape(),
            ));
        }
        Ok((xs[0], c, xs[2] * xs[3]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y).unwrap(), Op::Relu { x }, rg)
    }

    pub fn maxpool2d(
        &mut self,
        x: NodeId,
        window: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, h, w, oh, ow) = self.check_pool_shapes(x, window, stride, pad)?;
        let (out, argmax) = kernels::maxpool_forward(
            self.value(x).data(),
            n,
            c,
            h,
            w,
            window.0,
            window.1,
            stride,
            pad,
            oh,
            ow,
        );
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    pub fn avgpool2d(
        &mut self,
        x: NodeId,
        window: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, h, w, oh, ow) = self.check_pool_shapes(x, window, stride, pad)?;
        let out = kernels::avgpool_forward(
            self.value(x).data(),
            n,
            c,
            h,
            w,
            window.0,
            window.1,
            stride,
            pad,
            oh,
            ow,
        );
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::AvgPool {
                x,
                window,
                stride,
                pad,
            },
            rg,
        ))
    }

    fn check_pool_shapes(
        &self,
        x: NodeId,
        window: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Error::invalid(format!("pool expects 4-d input, got {xs:?}")));
        }
        if stride == 0 || window.0 == 0 || window.1 == 0 {
            return Err(Error::invalid("pool window and stride must be positive"));
        }
        let oh = kernels::conv_out_extent(xs[2], window.0, stride, pad);
        let ow = kernels::conv_out_extent(xs[3], window.1, stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((xs[0], xs[1], xs[2], xs[3], oh, ow)),
            _ => Err(Error::invalid(format!(
                "pool window {:?} larger than padded input {}x{} (pad {pad})",
                window, xs[2], xs[3]
            ))),
        }
    }

    /// Spatial mean per channel: [N,C,H,W] -> [N,C,1,1].
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(format!(
                "global_avg_pool expects 4-d input, got {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let data = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let mut s = 0.0;
            for k in 0..hw {
                s += data[i * hw + k];
            }
            out[i] = s / hw as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, 1, 1], out)?,
            Op::GlobalAvgPool { x },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let y: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let y: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y: Vec<f64> = self.value(x).data().iter().map(|&v| c * v).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y).unwrap(), Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Per-class, per-location scores S[n,i,k] = m_i . x_k over a flattened
    /// feature map F [N,d,L] and classifier matrix M [C,d].
    pub fn class_scores(&mut self, f: NodeId, m: NodeId) -> Result<NodeId> {
        let fs = self.value(f).shape().to_vec();
        let ms = self.value(m).shape().to_vec();
        if fs.len() != 3 || ms.len() != 2 || ms[1] != fs[1] {
            return Err(Error::shape(
                "class_scores: classifier d vs feature d",
                &fs,
                &ms,
            ));
        }
        let (n, d, l) = (fs[0], fs[1], fs[2]);
        let c = ms[0];
        let fd = self.value(f).data();
        let md = self.value(m).data();
        let mut out = vec![0.0; n * c * l];
        for ni in 0..n {
            for i in 0..c {
                let dst = &mut out[(ni * c + i) * l..(ni * c + i + 1) * l];
                for j in 0..d {
                    let mv = md[i * d + j];
                    if mv == 0.0 {
                        continue;
                    }
                    let frow = &fd[(ni * d + j) * l..(ni * d + j + 1) * l];
                    for k in 0..l {
                        dst[k] += mv * frow[k];
                    }
                }
            }
        }
        let rg = self.rg(f) || self.rg(m);
        Ok(self.push(
            Tensor::new(vec![n, c, l], out)?,
            Op::ClassScores { f, m },
            rg,
        ))
    }

    /// Temperature softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId, temp: f64) -> Result<NodeId> {
        if !(temp > 0.0) {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let xs = self.value(x).shape().to_vec();
        let l = *xs.last().expect("non-empty shape");
        let rows = self.value(x).len() / l;
        let y = kernels::softmax_rows(self.value(x).data(), rows, l, temp);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xs, y)?, Op::SoftmaxLast { x, temp }, rg))
    }

    /// One-hot at the last-axis argmax, treated as a constant (the T=INF
    /// attention subgradient choice).
    pub fn onehot_argmax_last(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let l = *xs.last().expect("non-empty shape");
        let rows = self.value(x).len() / l;
        let y = kernels::onehot_argmax_rows(self.value(x).data(), rows, l);
        self.push(Tensor::new(xs, y).unwrap(), Op::OneHotArgmaxLast, false)
    }

    /// Attention-weighted feature per class: a[n,i,j] = sum_k A[n,i,k] F[n,j,k].
    pub fn attend(&mut self, f: NodeId, att: NodeId) -> Result<NodeId> {
        let fs = self.value(f).shape().to_vec();
        let as_ = self.value(att).shape().to_vec();
        if fs.len() != 3 || as_.len() != 3 || fs[0] != as_[0] || fs[2] != as_[2] {
            return Err(Error::shape("attend: feature vs attention", &fs, &as_));
        }
        let (n, d, l) = (fs[0], fs[1], fs[2]);
        let c = as_[1];
        let fd = self.value(f).data();
        let ad = self.value(att).data();
        let mut out = vec![0.0; n * c * d];
        for ni in 0..n {
            for i in 0..c {
                let arow = &ad[(ni * c + i) * l..(ni * c + i + 1) * l];
                for j in 0..d {
                    let frow = &fd[(ni * d + j) * l..(ni * d + j + 1) * l];
                    let mut s = 0.0;
                    for k in 0..l {
                        s += arow[k] * frow[k];
                    }
                    out[(ni * c + i) * d + j] = s;
                }
            }
        }
        let rg = self.rg(f) || self.rg(att);
        Ok(self.push(
            Tensor::new(vec![n, c, d], out)?,
            Op::Attend { f, att },
            rg,
        ))
    }

    /// z[n,i,j] = g[n,j] + lambda * a[n,i,j] with g [N,d] and a [N,C,d].
    pub fn residual_combine(&mut self, g: NodeId, a: NodeId, lambda: f64) -> Result<NodeId> {
        let gs = self.value(g).shape().to_vec();
        let as_ = self.value(a).shape().to_vec();
        if gs.len() != 2 || as_.len() != 3 || gs[0] != as_[0] || gs[1] != as_[2] {
            return Err(Error::shape("residual_combine: g vs a", &gs, &as_));
        }
        let (n, c, d) = (as_[0], as_[1], as_[2]);
        let gd = self.value(g).data();
        let ad = self.value(a).data();
        let mut out = vec![0.0; n * c * d];
        for ni in 0..n {
            for i in 0..c {
                for j in 0..d {
                    out[(ni * c + i) * d + j] = gd[ni * d + j] + lambda * ad[(ni * c + i) * d + j];
                }
            }
        }
        let rg = self.rg(g) || self.rg(a);
        Ok(self.push(
            Tensor::new(vec![n, c, d], out)?,
            Op::ResidualCombine { g, a, lambda },
            rg,
        ))
    }

    /// logit[n,i] = m_i . z[n,i] + b[i] with z [N,C,d], M [C,d], b [C].
    pub fn head_logits(&mut self, z: NodeId, m: NodeId, b: NodeId) -> Result<NodeId> {
        let zs = self.value(z).shape().to_vec();
        let ms = self.value(m).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if zs.len() != 3 || ms.len() != 2 || zs[1] != ms[0] || zs[2] != ms[1] || bs != [ms[0]] {
            return Err(Error::shape("head_logits: z vs M/b", &zs, &ms));
        }
        let (n, c, d) = (zs[0], zs[1], zs[2]);
        let zd = self.value(z).data();
        let md = self.value(m).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for i in 0..c {
                let mut s = bd[i];
                let zrow = &zd[(ni * c + i) * d..(ni * c + i + 1) * d];
                let mrow = &md[i * d..(i + 1) * d];
                for j in 0..d {
                    s += mrow[j] * zrow[j];
                }
                out[ni * c + i] = s;
            }
        }
        let rg = self.rg(z) || self.rg(m) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::HeadLogits { z, m, b },
            rg,
        ))
    }

    /// Mean binary cross entropy over all N*C label slots, stable form.
    pub fn bce_with_logits(&mut self, logits: NodeId, truths: &Tensor) -> Result<NodeId> {
        if self.value(logits).shape() != truths.shape() {
            return Err(Error::shape(
                "bce_with_logits: logits vs truths",
                truths.shape(),
                self.value(logits).shape(),
            ));
        }
        if !self.value(logits).is_finite() {
            return Err(Error::Numerical("non-finite logits in bce_with_logits".into()));
        }
        let mut total = 0.0;
        for (&z, &y) in self.value(logits).data().iter().zip(truths.data()) {
            total += kernels::bce_with_logits_slot(z, y);
        }
        let mean = total / truths.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::BceWithLogits {
                logits,
                truths: truths.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the recording: a
    /// second call on the same graph is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientRecord> {
        if self.consumed {
            return Err(Error::invalid(
                "backward already called on this recording",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Err(Error::invalid(
                "loss is detached: no parameter with requires_grad reaches it",
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dout, &mut grads);
            if self.nodes[idx].param.is_some() {
                grads[idx] = Some(dout);
            }
        }

        let mut record = GradientRecord::default();
        for idx in 0..self.nodes.len() {
            if let Some(name) = self.nodes[idx].param.clone() {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape().to_vec()));
                record.grads.insert(name, g);
            }
        }
        Ok(record)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta.to_vec()).unwrap());
            }
        }
    }

    fn backprop_node(&self, idx: usize, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::OneHotArgmaxLast => {}
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let os = self.nodes[idx].value.shape();
                let (dw, dx) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dout.data(),
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    ws[0],
                    ws[2],
                    ws[3],
                    *stride,
                    *pad,
                    os[2],
                    os[3],
                );
                self.accumulate(grads, *w, &dw);
                self.accumulate(grads, *x, &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_mode,
            } => {
                let xs = self.value(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    self.value(*x).data(),
                    dout.data(),
                    mean,
                    invstd,
                    self.value(*gamma).data(),
                    n,
                    c,
                    hw,
                    *batch_mode,
                );
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(dout.data()) {
                    dx[src] += d;
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::AvgPool {
                x,
                window,
                stride,
                pad,
            } => {
                let xs = self.value(*x).shape();
                let os = self.nodes[idx].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (os[2], os[3]);
                let mut dx = vec![0.0; self.value(*x).len()];
                let dd = dout.data();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let obase = (ni * c + ci) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut cells = Vec::new();
                                for ki in 0..window.0 {
                                    let iy = (oy * stride + ki) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..window.1 {
                                        let ix = (ox * stride + kj) as isize - *pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            cells.push(base + iy as usize * w + ix as usize);
                                        }
                                    }
                                }
                                let share = dd[obase + oy * ow + ox] / cells.len() as f64;
                                for cell in cells {
                                    dx[cell] += share;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &d) in dout.data().iter().enumerate() {
                    let share = d / hw as f64;
                    for k in 0..hw {
                        dx[i * hw + k] = share;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dout.data());
                self.accumulate(grads, *b, dout.data());
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = self
                    .value(*b)
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&v, &d)| v * d)
                    .collect();
                let db: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&v, &d)| v * d)
                    .collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = dout.data().iter().map(|&d| c * d).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let d = dout.data()[0];
                let dx = vec![d; self.value(*x).len()];
                self.accumulate(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, dout.data());
            }
            Op::ClassScores { f, m } => {
                let fs = self.value(*f).shape();
                let ms = self.value(*m).shape();
                let (n, d, l) = (fs[0], fs[1], fs[2]);
                let c = ms[0];
                let fd = self.value(*f).data();
                let md = self.value(*m).data();
                let dd = dout.data();
                let mut dm = vec![0.0; c * d];
                let mut df = vec![0.0; n * d * l];
                for ni in 0..n {
                    for i in 0..c {
                        let drow = &dd[(ni * c + i) * l..(ni * c + i + 1) * l];
                        for j in 0..d {
                            let frow = &fd[(ni * d + j) * l..(ni * d + j + 1) * l];
                            let mut s = 0.0;
                            for k in 0..l {
                                s += drow[k] * frow[k];
                            }
                            dm[i * d + j] += s;
                            let mv = md[i * d + j];
                            if mv != 0.0 {
                                let frow_d = &mut df[(ni * d + j) * l..(ni * d + j + 1) * l];
                                for k in 0..l {
                                    frow_d[k] += mv * drow[k];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *m, &dm);
                self.accumulate(grads, *f, &df);
            }
            Op::SoftmaxLast { x, temp } => {
                let y = self.nodes[idx].value.data();
                let l = *self.nodes[idx].value.shape().last().unwrap();
                let rows = y.len() / l;
                let dd = dout.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * l..(r + 1) * l];
                    let dr = &dd[r * l..(r + 1) * l];
                    let mut dot = 0.0;
                    for k in 0..l {
                        dot += dr[k] * yr[k];
                    }
                    for k in 0..l {
                        dx[r * l + k] = temp * yr[k] * (dr[k] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Attend { f, att } => {
                let fs = self.value(*f).shape();
                let as_ = self.value(*att).shape();
                let (n, d, l) = (fs[0], fs[1], fs[2]);
                let c = as_[1];
                let fd = self.value(*f).data();
                let ad = self.value(*att).data();
                let dd = dout.data();
                let mut df = vec![0.0; n * d * l];
                let mut datt = vec![0.0; n * c * l];
                for ni in 0..n {
                    for i in 0..c {
                        let arow = &ad[(ni * c + i) * l..(ni * c + i + 1) * l];
                        let datt_row = &mut datt[(ni * c + i) * l..(ni * c + i + 1) * l];
                        for j in 0..d {
                            let dv = dd[(ni * c + i) * d + j];
                            if dv == 0.0 {
                                continue;
                            }
                            let frow = &fd[(ni * d + j) * l..(ni * d + j + 1) * l];
                            let frow_d = &mut df[(ni * d + j) * l..(ni * d + j + 1) * l];
                            for k in 0..l {
                                datt_row[k] += dv * frow[k];
                                frow_d[k] += dv * arow[k];
                            }
                        }
                    }
                }
                self.accumulate(grads, *f, &df);
                self.accumulate(grads, *att, &datt);
            }
            Op::ResidualCombine { g, a, lambda } => {
                let as_ = self.nodes[idx].value.shape();
                let (n, c, d) = (as_[0], as_[1], as_[2]);
                let dd = dout.data();
                let mut dg = vec![0.0; n * d];
                let mut da = vec![0.0; n * c * d];
                for ni in 0..n {
                    for i in 0..c {
                        for j in 0..d {
                            let dv = dd[(ni * c + i) * d + j];
                            dg[ni * d + j] += dv;
                            da[(ni * c + i) * d + j] = lambda * dv;
                        }
                    }
                }
                self.accumulate(grads, *g, &dg);
                self.accumulate(grads, *a, &da);
            }
            Op::HeadLogits { z, m, b } => {
                let zs = self.value(*z).shape();
                let (n, c, d) = (zs[0], zs[1], zs[2]);
                let zd = self.value(*z).data();
                let md = self.value(*m).data();
                let dd = dout.data();
                let mut dz = vec![0.0; n * c * d];
                let mut dm = vec![0.0; c * d];
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for i in 0..c {
                        let dv = dd[ni * c + i];
                        db[i] += dv;
                        if dv == 0.0 {
                            continue;
                        }
                        let zrow = &zd[(ni * c + i) * d..(ni * c + i + 1) * d];
                        let mrow = &md[i * d..(i + 1) * d];
                        let dzrow = &mut dz[(ni * c + i) * d..(ni * c + i + 1) * d];
                        for j in 0..d {
                            dm[i * d + j] += dv * zrow[j];
                            dzrow[j] = dv * mrow[j];
                        }
                    }
                }
                self.accumulate(grads, *z, &dz);
                self.accumulate(grads, *m, &dm);
                self.accumulate(grads, *b, &db);
            }
            Op::BceWithLogits { logits, truths } => {
                let d = dout.data()[0];
                let slots = truths.len() as f64;
                let dz: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(truths)
                    .map(|(&z, &y)| d * (kernels::sigmoid(z) - y) / slots)
                    .collect();
                self.accumulate(grads, *logits, &dz);
            }
        }
    }
}
