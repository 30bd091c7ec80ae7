//! Backbone plus CSRA head, with named-parameter access for the optimizer,
//! checkpointing and gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_backbone, Backbone, BackboneConfig, StateKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::head::{AttentionHeadConfig, CsraHead};
use crate::layers::Mode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("head.") {
        ParamGroup::Head
    } else {
        ParamGroup::Backbone
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub head: CsraHead,
}

pub fn build_model(
    config: &BackboneConfig,
    classes: usize,
    heads: Vec<AttentionHeadConfig>,
    seed: u64,
) -> Result<Model> {
    if classes == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    let backbone = build_backbone(config, seed)?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let head = CsraHead::init(classes, config.feature_dim(), heads, &mut head_rng)?;
    Ok(Model { backbone, head })
}

impl Model {
    pub fn classes(&self) -> usize {
        self.head.classifier.classes()
    }

    /// Forward a batch [N,3,H,W] to fused logits [N,C]. Train mode with
    /// `update_stats` advances BN running statistics; eval mode never
    /// mutates the model.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        batch: NodeId,
        mode: Mode,
        update_stats: bool,
    ) -> Result<NodeId> {
        let feat = self.backbone.forward(g, batch, mode, update_stats)?;
        self.head.forward(g, feat)
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut Tensor)) {
        self.backbone.visit_state(f);
        self.head.visit_state(f);
    }

    /// Names and lengths of trainable parameters, in visit order.
    pub fn trainable_params(&mut self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit_state(&mut |name, kind, t| {
            if kind == StateKind::Trainable {
                out.push((name.to_string(), t.len()));
            }
        });
        out
    }

    pub fn trainable_param_count(&mut self) -> usize {
        self.trainable_params().iter().map(|(_, l)| l).sum()
    }

    /// Add `delta` to one element of a named parameter.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) {
        let mut found = false;
        self.visit_state(&mut |n, _, t| {
            if n == name {
                t.data_mut()[index] += delta;
                found = true;
            }
        });
        assert!(found, "unknown parameter {name}");
    }

    /// Full state as (name, kind, tensor snapshot) triples.
    pub fn state_snapshot(&mut self) -> Vec<(String, StateKind, Tensor)> {
        let mut out = Vec::new();
        self.visit_state(&mut |name, kind, t| {
            out.push((name.to_string(), kind, t.clone()));
        });
        out
    }
}
