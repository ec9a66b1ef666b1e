//! Parameterised building blocks shared by the three networks.

use footprint_grad::{init, Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};
use rand::RngCore;

use crate::Result;

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Kaiming,
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut dyn RngCore,
    pub init: Init,
}

impl Builder<'_> {
    fn weight(&mut self, shape: &[usize]) -> Tensor {
        match self.init {
            Init::Xavier => init::xavier_uniform(shape, self.rng),
            Init::Kaiming => init::kaiming_normal(shape, self.rng),
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Conv> {
        let w = self.weight(&[cout, cin, k, k]);
        let w = self.store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let b = if bias {
            Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Conv { w, b, stride, pad: k / 2 })
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.store.add(format!("{name}.weight"), Tensor::full(&[c], 1.0), ParamKind::Trainable)?,
            beta: self.store.add(format!("{name}.bias"), Tensor::zeros(&[c]), ParamKind::Trainable)?,
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
            var: self.store.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), ParamKind::Buffer)?,
        })
    }

    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<ConvBnRelu> {
        Ok(ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3, stride, false)?,
            bn: self.bn(&format!("{name}.bn"), cout)?,
        })
    }

    pub fn double_conv(&mut self, name: &str, cin: usize, cout: usize) -> Result<DoubleConv> {
        Ok(DoubleConv {
            a: self.conv_bn(&format!("{name}.0"), cin, cout, 1)?,
            b: self.conv_bn(&format!("{name}.1"), cout, cout, 1)?,
        })
    }

    pub fn basic_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<BasicBlock> {
        let downsample = if stride != 1 || cin != cout {
            Some((
                self.conv(&format!("{name}.downsample.0"), cin, cout, 1, stride, false)?,
                self.bn(&format!("{name}.downsample.1"), cout)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, stride, false)?,
            bn1: self.bn(&format!("{name}.bn1"), cout)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false)?,
            bn2: self.bn(&format!("{name}.bn2"), cout)?,
            downsample,
        })
    }

    /// 2x2 stride-2 transposed convolution with bias.
    pub fn up_transpose(&mut self, name: &str, cin: usize, cout: usize) -> Result<Upsample> {
        let w = self.weight(&[cin, cout, 2, 2]);
        let w = self.store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable)?;
        Ok(Upsample::Transpose { w, b })
    }

    /// 1x1 convolution to `4 * cout` channels followed by a 2x pixel
    /// shuffle, with ICNR initialisation: the four sub-pixel filters of each
    /// output channel start equal, so the initial upsampling is
    /// nearest-neighbour-like.
    pub fn up_shuffle(&mut self, name: &str, cin: usize, cout: usize) -> Result<Upsample> {
        let base = self.weight(&[cout, cin, 1, 1]);
        let mut data = Vec::with_capacity(4 * cout * cin);
        for c in 0..cout {
            for _ in 0..4 {
                data.extend_from_slice(&base.data()[c * cin..(c + 1) * cin]);
            }
        }
        let w = Tensor::new(&[4 * cout, cin, 1, 1], data)?;
        let w = self.store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[4 * cout]), ParamKind::Trainable)?;
        Ok(Upsample::Shuffle { w, b })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        Ok(g.batch_norm(x, self.gamma, self.beta, self.mean, self.var, BN_MOMENTUM)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let c = self.conv.forward(g, x)?;
        let n = self.bn.forward(g, c)?;
        Ok(g.relu(n))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DoubleConv {
    pub a: ConvBnRelu,
    pub b: ConvBnRelu,
}

impl DoubleConv {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.a.forward(g, x)?;
        self.b.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BasicBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub downsample: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        let skip = match &self.downsample {
            Some((c, bn)) => {
                let s = c.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Upsample {
    Transpose { w: ParamId, b: ParamId },
    Shuffle { w: ParamId, b: ParamId },
}

impl Upsample {
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        match *self {
            Upsample::Transpose { w, b } => {
                let (w, b) = (g.param(w), g.param(b));
                Ok(g.conv_transpose2d(x, w, Some(b), 2, 0)?)
            }
            Upsample::Shuffle { w, b } => {
                let (w, b) = (g.param(w), g.param(b));
                let h = g.conv2d(x, w, Some(b), 1, 0)?;
                let h = g.relu(h);
                Ok(g.pixel_shuffle(h, 2)?)
            }
        }
    }
}
