//! The three segmentation networks and their shared forward contract:
//! `(N, 3, H, W)` normalised images in, `(N, 2, H, W)` class probabilities
//! out.

pub mod graph;
pub mod layers;
pub mod pretrained;
pub mod scse;

use std::path::PathBuf;

use footprint_grad::{Graph, NodeId, ParamStore, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use graph::{LayerKind, NetworkGraph, SkipEdge};
use layers::{BasicBlock, Builder, Conv, DoubleConv, Init, Upsample};
pub use scse::{Scse, ScseCombine};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    UnetScratch,
    ResnetScse,
    ResnetPixelshuffle,
}

impl ModelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::UnetScratch => "unet_scratch",
            ModelVariant::ResnetScse => "resnet_scse",
            ModelVariant::ResnetPixelshuffle => "resnet_pixelshuffle",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Two-channel softmax.
    #[default]
    Softmax,
    /// Single-channel sigmoid score for the weighted-MSE loss.
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub base_channels: usize,
    /// Encoder blocks (scratch) or residual stages (ResNet variants).
    pub encoder_depth: usize,
    pub block_counts: [usize; 4],
    pub dropout_rate: f32,
    pub pretrained: bool,
    pub pretrained_path: Option<PathBuf>,
    pub num_classes: usize,
    pub head: HeadKind,
    pub scse_reduction: usize,
    pub scse_combine: ScseCombine,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::unet_scratch()
    }
}

impl ModelConfig {
    pub fn unet_scratch() -> Self {
        Self {
            variant: ModelVariant::UnetScratch,
            base_channels: 64,
            encoder_depth: 4,
            block_counts: [3, 4, 6, 3],
            dropout_rate: 0.5,
            pretrained: false,
            pretrained_path: None,
            num_classes: 2,
            head: HeadKind::Softmax,
            scse_reduction: 2,
            scse_combine: ScseCombine::Sum,
            seed: 0,
        }
    }

    pub fn resnet_scse() -> Self {
        Self {
            variant: ModelVariant::ResnetScse,
            base_channels: 16,
            dropout_rate: 0.0,
            ..Self::unet_scratch()
        }
    }

    pub fn resnet_pixelshuffle() -> Self {
        Self {
            variant: ModelVariant::ResnetPixelshuffle,
            ..Self::resnet_scse()
        }
    }

    pub fn for_variant(variant: ModelVariant) -> Self {
        match variant {
            ModelVariant::UnetScratch => Self::unet_scratch(),
            ModelVariant::ResnetScse => Self::resnet_scse(),
            ModelVariant::ResnetPixelshuffle => Self::resnet_pixelshuffle(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes != 2 {
            problems.push(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".to_string());
        }
        if self.encoder_depth != 4 {
            problems.push(format!("encoder_depth must be 4, got {}", self.encoder_depth));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        match self.variant {
            ModelVariant::UnetScratch => {
                if self.pretrained {
                    problems.push("the scratch U-Net has no pretrained weights".to_string());
                }
            }
            _ => {
                if self.head != HeadKind::Softmax {
                    problems.push("the regression head is only available for unet_scratch".to_string());
                }
                if self.block_counts.iter().any(|&b| b == 0) {
                    problems.push(format!("block counts must be positive: {:?}", self.block_counts));
                }
                if self.variant == ModelVariant::ResnetScse && self.base_channels < self.scse_reduction {
                    problems.push("base_channels smaller than the scSE reduction".to_string());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Spatial input sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.variant {
            ModelVariant::UnetScratch => 8,
            _ => 32,
        }
    }
}

#[derive(Clone, Debug)]
struct UnetNet {
    encoders: Vec<DoubleConv>,
    ups: Vec<Upsample>,
    decoders: Vec<DoubleConv>,
    head: Conv,
    dropout: f32,
}

#[derive(Clone, Debug)]
struct ResnetNet {
    stem: Vec<DoubleConv>,
    stages: Vec<Vec<BasicBlock>>,
    /// One block per encoder stage output: stem 0, stem 1, layer1..layer4.
    scse: Option<Vec<Scse>>,
    ups: Vec<Upsample>,
    decoders: Vec<DoubleConv>,
    head: Conv,
}

#[derive(Clone, Debug)]
enum Net {
    Unet(UnetNet),
    Resnet(ResnetNet),
}

/// A built network: configuration, parameters and layer structure.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    graph: NetworkGraph,
    net: Net,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    match config.variant {
        ModelVariant::UnetScratch => build_unet_scratch(config),
        ModelVariant::ResnetScse => build_resnet_scse(config),
        ModelVariant::ResnetPixelshuffle => build_resnet_pixelshuffle(config),
    }
}

fn expect_variant(config: &ModelConfig, v: ModelVariant) -> Result<()> {
    if config.variant != v {
        return Err(Error::Config(format!(
            "builder for {} called with variant {}",
            v.name(),
            config.variant.name()
        )));
    }
    config.validate()
}

/// Four double-conv encoder blocks with widths `base * (1, 2, 4, 8)`,
/// three transposed-conv decoder blocks, dropout, 1x1 head. Xavier init.
pub fn build_unet_scratch(config: &ModelConfig) -> Result<Model> {
    expect_variant(config, ModelVariant::UnetScratch)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = Builder { store: &mut store, rng: &mut rng, init: Init::Xavier };
    let mut desc = NetworkGraph::default();
    let widths: Vec<usize> = (0..4).map(|i| config.base_channels << i).collect();

    let mut encoders = Vec::new();
    let mut skip_nodes = Vec::new();
    let mut cin = 3;
    for (i, &w) in widths.iter().enumerate() {
        if i > 0 {
            desc.push(format!("pool{i}"), LayerKind::MaxPool, cin, cin);
        }
        encoders.push(b.double_conv(&format!("encoder.{i}"), cin, w)?);
        push_double_conv(&mut desc, &format!("encoder.{i}"), cin, w);
        skip_nodes.push(desc.last());
        cin = w;
    }
    let mut ups = Vec::new();
    let mut decoders = Vec::new();
    for i in (0..3).rev() {
        let w = widths[i];
        ups.push(b.up_transpose(&format!("decoder.{i}.up"), cin, w)?);
        desc.push(format!("decoder.{i}.up"), LayerKind::ConvTranspose, cin, w);
        desc.concat_skip(format!("decoder.{i}.cat"), skip_nodes[i]);
        decoders.push(b.double_conv(&format!("decoder.{i}.conv"), 2 * w, w)?);
        push_double_conv(&mut desc, &format!("decoder.{i}.conv"), 2 * w, w);
        cin = w;
    }
    desc.push("dropout", LayerKind::Dropout, cin, cin);
    let out = match config.head {
        HeadKind::Softmax => 2,
        HeadKind::Regression => 1,
    };
    let head = b.conv("head", cin, out, 1, 1, true)?;
    desc.push("head", LayerKind::Conv1x1Head, cin, out);
    let act = match config.head {
        HeadKind::Softmax => LayerKind::Softmax,
        HeadKind::Regression => LayerKind::Sigmoid,
    };
    desc.push("activation", act, out, out);
    desc.validate()?;
    Ok(Model {
        config: config.clone(),
        store,
        graph: desc,
        net: Net::Unet(UnetNet {
            encoders,
            ups,
            decoders,
            head,
            dropout: config.dropout_rate,
        }),
    })
}

/// Custom double-conv stem (widths `base * (1, 2, 4)`), four residual
/// stages with block counts `(3, 4, 6, 3)` and widths `base * (4, 8, 16,
/// 32)`, scSE on every encoder stage output, transposed-conv decoder.
pub fn build_resnet_scse(config: &ModelConfig) -> Result<Model> {
    expect_variant(config, ModelVariant::ResnetScse)?;
    build_resnet(config, true)
}

/// Same encoder without scSE; decoder upsamples by ICNR-initialised 1x1
/// convolution and pixel shuffle.
pub fn build_resnet_pixelshuffle(config: &ModelConfig) -> Result<Model> {
    expect_variant(config, ModelVariant::ResnetPixelshuffle)?;
    build_resnet(config, false)
}

fn push_double_conv(desc: &mut NetworkGraph, name: &str, cin: usize, cout: usize) {
    for (j, (a, b)) in [(cin, cout), (cout, cout)].into_iter().enumerate() {
        desc.push(format!("{name}.{j}.conv"), LayerKind::Conv3x3, a, b);
        desc.push(format!("{name}.{j}.bn"), LayerKind::BatchNorm, b, b);
        desc.push(format!("{name}.{j}.relu"), LayerKind::Relu, b, b);
    }
}

fn build_resnet(config: &ModelConfig, with_scse: bool) -> Result<Model> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = Builder { store: &mut store, rng: &mut rng, init: Init::Kaiming };
    let mut desc = NetworkGraph::default();
    let base = config.base_channels;
    let mut scse = with_scse.then(Vec::new);
    let mut add_scse = |b: &mut Builder<'_>, desc: &mut NetworkGraph, name: &str, c: usize| -> Result<()> {
        if let Some(list) = scse.as_mut() {
            list.push(Scse::build(b, name, c, config.scse_reduction, config.scse_combine)?);
            desc.push(name, LayerKind::Scse, c, c);
        }
        Ok(())
    };

    let mut skips: Vec<usize> = Vec::new();
    let mut stem = Vec::new();
    let mut cin = 3;
    for (i, w) in [base, 2 * base, 4 * base].into_iter().enumerate() {
        if i > 0 {
            desc.push(format!("encoder.pool{i}"), LayerKind::MaxPool, cin, cin);
        }
        stem.push(b.double_conv(&format!("encoder.stem.{i}"), cin, w)?);
        push_double_conv(&mut desc, &format!("encoder.stem.{i}"), cin, w);
        if i < 2 {
            add_scse(&mut b, &mut desc, &format!("encoder.stem.{i}.scse"), w)?;
            skips.push(desc.last());
        }
        cin = w;
    }
    let stage_widths = [4 * base, 8 * base, 16 * base, 32 * base];
    let mut stages = Vec::new();
    for (s, (&w, &count)) in stage_widths.iter().zip(&config.block_counts).enumerate() {
        let mut blocks = Vec::new();
        for k in 0..count {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            let name = format!("encoder.layer{}.{k}", s + 1);
            blocks.push(b.basic_block(&name, cin, w, stride)?);
            desc.push(name, LayerKind::ResidualBlock { stride }, cin, w);
            cin = w;
        }
        stages.push(blocks);
        add_scse(&mut b, &mut desc, &format!("encoder.layer{}.scse", s + 1), w)?;
        if s < 3 {
            skips.push(desc.last());
        }
    }
    let mut ups = Vec::new();
    let mut decoders = Vec::new();
    for (i, &skip) in skips.iter().enumerate().rev() {
        let w = desc.layers[skip].out_channels;
        let name = format!("decoder.{i}");
        if with_scse {
            ups.push(b.up_transpose(&format!("{name}.up"), cin, w)?);
            desc.push(format!("{name}.up"), LayerKind::ConvTranspose, cin, w);
        } else {
            ups.push(b.up_shuffle(&format!("{name}.up"), cin, w)?);
            desc.push(format!("{name}.up"), LayerKind::PixelShuffle, cin, w);
        }
        desc.concat_skip(format!("{name}.cat"), skip);
        decoders.push(b.double_conv(&format!("{name}.conv"), 2 * w, w)?);
        push_double_conv(&mut desc, &format!("{name}.conv"), 2 * w, w);
        cin = w;
    }
    let head = b.conv("head", cin, 2, 1, 1, true)?;
    desc.push("head", LayerKind::Conv1x1Head, cin, 2);
    desc.push("softmax", LayerKind::Softmax, 2, 2);
    desc.validate()?;
    if config.pretrained {
        let path = config.pretrained_path.as_deref();
        pretrained::load_encoder_weights(&mut store, path)?;
    }
    Ok(Model {
        config: config.clone(),
        store,
        graph: desc,
        net: Net::Resnet(ResnetNet {
            stem,
            stages,
            scse,
            ups,
            decoders,
            head,
        }),
    })
}

impl Model {
    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    /// Checks a batch before it enters the network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::Shape(format!("expected an (N, 3, H, W) batch, got {shape:?}")));
        }
        if shape[1] != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {}", shape[1])));
        }
        let m = self.config.size_multiple();
        if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "{} needs spatial sizes divisible by {m}, got {}x{}",
                self.variant().name(),
                shape[2],
                shape[3]
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`, which must have been created over
    /// `self.store`. Returns the probability node.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, rng: &mut dyn RngCore) -> Result<NodeId> {
        self.check_input(g.value(x).shape())?;
        let logits = match &self.net {
            Net::Unet(net) => {
                let mut skips = Vec::new();
                let mut h = x;
                for (i, enc) in net.encoders.iter().enumerate() {
                    if i > 0 {
                        h = g.max_pool2(h)?;
                    }
                    h = enc.forward(g, h)?;
                    skips.push(h);
                }
                for (k, (up, dec)) in net.ups.iter().zip(&net.decoders).enumerate() {
                    let u = up.forward(g, h)?;
                    let cat = g.concat(&[u, skips[2 - k]])?;
                    h = dec.forward(g, cat)?;
                }
                if net.dropout > 0.0 {
                    h = g.dropout(h, net.dropout, rng)?;
                }
                net.head.forward(g, h)?
            }
            Net::Resnet(net) => {
                let mut skips = Vec::new();
                let mut h = x;
                let mut gate = 0;
                let mut recal = |g: &mut Graph<'_>, h: NodeId| -> Result<NodeId> {
                    match &net.scse {
                        Some(list) => {
                            gate += 1;
                            list[gate - 1].forward(g, h)
                        }
                        None => Ok(h),
                    }
                };
                for (i, stem) in net.stem.iter().enumerate() {
                    if i > 0 {
                        h = g.max_pool2(h)?;
                    }
                    h = stem.forward(g, h)?;
                    if i < 2 {
                        h = recal(g, h)?;
                        skips.push(h);
                    }
                }
                for (s, blocks) in net.stages.iter().enumerate() {
                    for block in blocks {
                        h = block.forward(g, h)?;
                    }
                    h = recal(g, h)?;
                    if s < 3 {
                        skips.push(h);
                    }
                }
                for (up, dec) in net.ups.iter().zip(&net.decoders) {
                    let u = up.forward(g, h)?;
                    let skip = skips.pop().expect("one skip per decoder");
                    let cat = g.concat(&[u, skip])?;
                    h = dec.forward(g, cat)?;
                }
                net.head.forward(g, h)?
            }
        };
        match self.config.head {
            HeadKind::Softmax => Ok(g.softmax_channels(logits)?),
            HeadKind::Regression => Ok(g.sigmoid(logits)),
        }
    }

    /// Evaluation-mode forward pass: dropout off, batch norm on running
    /// statistics. Deterministic.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(batch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut g, x, &mut rng)?;
        Ok(g.value(y).clone())
    }

    /// SHA-256 over every parameter name and value.
    pub fn weight_digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable_elements()
    }
}

/// One dice-loss backward pass on a random `size x size` sample; every
/// trainable parameter must receive a finite gradient that is not
/// identically zero. Returns the names of offending parameters.
pub fn gradient_flow_failures(model: &Model, size: usize, seed: u64) -> Result<Vec<String>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3 * size * size;
    let x = Tensor::new(&[1, 3, size, size], (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect())?;
    let target = ndarray::Array3::from_shape_fn((1, size, size), |(_, y, x)| {
        (y > size / 4 && y < 3 * size / 4 && x > size / 3) as u8
    });
    let mut g = Graph::new(&model.store, true);
    let xn = g.input(x);
    let probs = model.forward(&mut g, xn, &mut rng)?;
    let loss_cfg = crate::losses::LossConfig {
        kind: if model.config.head == HeadKind::Regression {
            crate::losses::LossKind::WeightedMse
        } else {
            crate::losses::LossKind::Dice
        },
        ..Default::default()
    };
    let (loss, _) = crate::losses::attach_loss(&mut g, probs, &loss_cfg, target.view(), None)?;
    let grads = g.backward(loss)?;
    let mut bad = Vec::new();
    for (id, p) in model.store.trainable() {
        match grads.param(id) {
            Some(t) if t.is_finite() && t.data().iter().any(|&v| v != 0.0) => {}
            _ => bad.push(p.name.clone()),
        }
    }
    Ok(bad)
}
