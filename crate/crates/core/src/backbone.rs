//! Residual CNN feature extractor: 7x7 stem with max-pooling, then four
//! stages of bottleneck blocks (1x1 -> 3x3 -> 1x1, expansion 4).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::conv_out_extent;
use crate::layers::{BatchNorm2d, Conv2dLayer, Mode};
use crate::tensor::Tensor;

pub const EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Bottleneck blocks per stage (the k sequence).
    pub block_counts: [usize; 4],
    /// Internal bottleneck width per stage; block output is 4x this.
    pub stage_widths: [usize; 4],
    pub stem_channels: usize,
    pub input_channels: usize,
}

impl BackboneConfig {
    pub fn resnet50() -> Self {
        BackboneConfig {
            block_counts: [3, 4, 6, 3],
            stage_widths: [64, 128, 256, 512],
            stem_channels: 64,
            input_channels: 3,
        }
    }

    pub fn resnet101() -> Self {
        BackboneConfig {
            block_counts: [3, 4, 23, 3],
            stage_widths: [64, 128, 256, 512],
            stem_channels: 64,
            input_channels: 3,
        }
    }

    /// Small configuration for CPU-scale experiments and tests.
    pub fn desk() -> Self {
        BackboneConfig {
            block_counts: [1, 1, 1, 1],
            stage_widths: [8, 16, 32, 64],
            stem_channels: 8,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_counts.iter().any(|&k| k == 0) {
            return Err(Error::Config(format!(
                "block_counts must all be >= 1, got {:?}",
                self.block_counts
            )));
        }
        if self.stage_widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "stage_widths must be non-decreasing, got {:?}",
                self.stage_widths
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0)
            || self.stem_channels == 0
            || self.input_channels == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Output channel count d of the feature map.
    pub fn feature_dim(&self) -> usize {
        EXPANSION * self.stage_widths[3]
    }

    pub fn total_blocks(&self) -> usize {
        self.block_counts.iter().sum()
    }

    /// Spatial extents after the stem and all four stages, or None if some
    /// stage would collapse below 1x1.
    pub fn output_spatial(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut h = conv_out_extent(h, 7, 2, 3)?;
        let mut w = conv_out_extent(w, 7, 2, 3)?;
        h = conv_out_extent(h, 3, 2, 1)?;
        w = conv_out_extent(w, 3, 2, 1)?;
        for stride in [1usize, 2, 2, 2] {
            if stride == 2 {
                h = conv_out_extent(h, 3, 2, 1)?;
                w = conv_out_extent(w, 3, 2, 1)?;
            }
        }
        if h >= 1 && w >= 1 {
            Some((h, w))
        } else {
            None
        }
    }

    /// Smallest square input admissible for this architecture.
    pub fn min_input_size(&self) -> usize {
        (1..=64)
            .find(|&s| self.output_spatial(s, s).is_some())
            .unwrap_or(64)
    }
}

/// The feature matrix X of one image: d channels over an h x w grid.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::invalid(format!(
                "feature map must be [d,h,w], got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numerical("non-finite feature map".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn d(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn locations(&self) -> usize {
        self.h() * self.w()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Feature vector x_k at flat spatial location k.
    pub fn at(&self, k: usize) -> Vec<f64> {
        let l = self.locations();
        (0..self.d())
            .map(|j| self.values.data()[j * l + k])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: Conv2dLayer,
    bn1: BatchNorm2d,
    conv2: Conv2dLayer,
    bn2: BatchNorm2d,
    conv3: Conv2dLayer,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2dLayer, BatchNorm2d)>,
}

impl Bottleneck {
    fn init(in_ch: usize, width: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let out_ch = width * EXPANSION;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2dLayer::init(out_ch, in_ch, 1, 1, stride, 0, rng),
                BatchNorm2d::new(out_ch),
            ))
        } else {
            None
        };
        Bottleneck {
            conv1: Conv2dLayer::init(width, in_ch, 1, 1, 1, 0, rng),
            bn1: BatchNorm2d::new(width),
            conv2: Conv2dLayer::init(width, width, 3, 3, stride, 1, rng),
            bn2: BatchNorm2d::new(width),
            conv3: Conv2dLayer::init(out_ch, width, 1, 1, 1, 0, rng),
            bn3: BatchNorm2d::new(out_ch),
            shortcut,
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        name: &str,
        mode: Mode,
        update_stats: bool,
    ) -> Result<NodeId> {
        let mut y = self.conv1.forward(g, x, &format!("{name}.conv1"))?;
        y = self.bn1.forward(g, y, &format!("{name}.bn1"), mode, update_stats)?;
        y = g.relu(y);
        y = self.conv2.forward(g, y, &format!("{name}.conv2"))?;
        y = self.bn2.forward(g, y, &format!("{name}.bn2"), mode, update_stats)?;
        y = g.relu(y);
        y = self.conv3.forward(g, y, &format!("{name}.conv3"))?;
        y = self.bn3.forward(g, y, &format!("{name}.bn3"), mode, update_stats)?;
        let sc = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x, &format!("{name}.down.conv"))?;
                bn.forward(g, s, &format!("{name}.down.bn"), mode, update_stats)?
            }
            None => x,
        };
        let sum = g.add(y, sc)?;
        Ok(g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem_conv: Conv2dLayer,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
}

/// Whether a state tensor is trainable or a frozen-at-eval running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Trainable,
    RunningStat,
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_conv = Conv2dLayer::init(
        config.stem_channels,
        config.input_channels,
        7,
        7,
        2,
        3,
        &mut rng,
    );
    let stem_bn = BatchNorm2d::new(config.stem_channels);
    let mut stages = Vec::with_capacity(4);
    let mut in_ch = config.stem_channels;
    for stage in 0..4 {
        let width = config.stage_widths[stage];
        let mut blocks = Vec::with_capacity(config.block_counts[stage]);
        for block in 0..config.block_counts[stage] {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            blocks.push(Bottleneck::init(in_ch, width, stride, &mut rng));
            in_ch = width * EXPANSION;
        }
        stages.push(blocks);
    }
    Ok(Backbone {
        config: config.clone(),
        stem_conv,
        stem_bn,
        stages,
    })
}

impl Backbone {
    /// Forward a batch [N,3,H,W] to the feature map batch [N,d,h,w].
    pub fn forward(
        &mut self,
        g: &mut Graph,
        batch: NodeId,
        mode: Mode,
        update_stats: bool,
    ) -> Result<NodeId> {
        let shape = g.value(batch).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::shape(
                "backbone input",
                &[0, self.config.input_channels, 0, 0],
                &shape,
            ));
        }
        if self.config.output_spatial(shape[2], shape[3]).is_none() {
            let min = self.config.min_input_size();
            return Err(Error::invalid(format!(
                "input {}x{} too small for the strided stages; minimum admissible size is {min}x{min}",
                shape[2], shape[3]
            )));
        }
        let mut x = self.stem_conv.forward(g, batch, "backbone.stem.conv")?;
        x = self
            .stem_bn
            .forward(g, x, "backbone.stem.bn", mode, update_stats)?;
        x = g.relu(x);
        x = g.maxpool2d(x, (3, 3), 2, 1)?;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                x = block.forward(g, x, &format!("backbone.s{si}.b{bi}"), mode, update_stats)?;
            }
        }
        Ok(x)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Visit every state tensor under its tape registration name.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut Tensor)) {
        f(
            "backbone.stem.conv",
            StateKind::Trainable,
            &mut self.stem_conv.weight,
        );
        visit_bn(&mut self.stem_bn, "backbone.stem.bn", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let name = format!("backbone.s{si}.b{bi}");
                f(
                    &format!("{name}.conv1"),
                    StateKind::Trainable,
                    &mut block.conv1.weight,
                );
                visit_bn(&mut block.bn1, &format!("{name}.bn1"), f);
                f(
                    &format!("{name}.conv2"),
                    StateKind::Trainable,
                    &mut block.conv2.weight,
                );
                visit_bn(&mut block.bn2, &format!("{name}.bn2"), f);
                f(
                    &format!("{name}.conv3"),
                    StateKind::Trainable,
                    &mut block.conv3.weight,
                );
                visit_bn(&mut block.bn3, &format!("{name}.bn3"), f);
                if let Some((conv, bn)) = &mut block.shortcut {
                    f(
                        &format!("{name}.down.conv"),
                        StateKind::Trainable,
                        &mut conv.weight,
                    );
                    visit_bn(bn, &format!("{name}.down.bn"), f);
                }
            }
        }
    }
}

fn visit_bn(bn: &mut BatchNorm2d, name: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor)) {
    f(&format!("{name}.gamma"), StateKind::Trainable, &mut bn.gamma);
    f(&format!("{name}.beta"), StateKind::Trainable, &mut bn.beta);
    f(
        &format!("{name}.running_mean"),
        StateKind::RunningStat,
        &mut bn.running_mean,
    );
    f(
        &format!("{name}.running_var"),
        StateKind::RunningStat,
        &mut bn.running_var,
    );
}
