//! Declarative description of a network's layer chain and skip edges.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum LayerKind {
    /// 3x3 convolution, stride 1, padding 1.
    Conv3x3,
    BatchNorm,
    Relu,
    /// 2x2 max pool, stride 2.
    MaxPool,
    /// Residual basic block; stride 2 halves the resolution.
    ResidualBlock { stride: usize },
    /// 2x2 stride-2 transposed convolution.
    ConvTranspose,
    /// 1x1 convolution then pixel shuffle by 2.
    PixelShuffle,
    Scse,
    /// Channel concatenation with exactly one skip edge.
    Concat,
    Dropout,
    Conv1x1Head,
    Softmax,
    Sigmoid,
}

impl LayerKind {
    /// Change in downsampling level (resolution = input / 2^level).
    fn level_delta(&self) -> i32 {
        match self {
            LayerKind::MaxPool => 1,
            LayerKind::ResidualBlock { stride } => (*stride == 2) as i32,
            LayerKind::ConvTranspose | LayerKind::PixelShuffle => -1,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// `from` is an encoder layer whose output feeds the `Concat` layer `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEdge {
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub layers: Vec<LayerDesc>,
    pub skips: Vec<SkipEdge>,
}

impl NetworkGraph {
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, in_channels: usize, out_channels: usize) -> usize {
        self.layers.push(LayerDesc {
            name: name.into(),
            kind,
            in_channels,
            out_channels,
        });
        self.layers.len() - 1
    }

    pub fn last(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Appends a concat fed by the chain and by encoder layer `from`.
    pub fn concat_skip(&mut self, name: impl Into<String>, from: usize) -> usize {
        let prev = self.out_channels();
        let skip = self.layers[from].out_channels;
        let to = self.push(name, LayerKind::Concat, prev, prev + skip);
        self.skips.push(SkipEdge { from, to });
        to
    }

    /// Downsampling level after each layer.
    pub fn levels(&self) -> Vec<i32> {
        let mut level = 0;
        self.layers
            .iter()
            .map(|l| {
                level += l.kind.level_delta();
                level
            })
            .collect()
    }

    /// Deepest level reached, so inputs must be divisible by 2^depth.
    pub fn depth(&self) -> u32 {
        self.levels().into_iter().max().unwrap_or(0).max(0) as u32
    }

    /// Checks channel continuity, skip pairing and resolution round trip.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("empty network".into()));
        }
        let levels = self.levels();
        for (i, pair) in self.layers.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if b.kind == LayerKind::Concat {
                continue;
            }
            if a.out_channels != b.in_channels {
                return Err(Error::Invalid(format!(
                    "layer {} ({}) emits {} channels but {} ({}) expects {}",
                    i, a.name, a.out_channels, i + 1, b.name, b.in_channels
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if levels[i] < 0 {
                return Err(Error::Invalid(format!("layer {} upsamples beyond the input resolution", l.name)));
            }
            if l.kind != LayerKind::Concat {
                continue;
            }
            let incoming: Vec<_> = self.skips.iter().filter(|e| e.to == i).collect();
            if incoming.len() != 1 {
                return Err(Error::Invalid(format!(
                    "decoder concat {} has {} skip edges, expected 1",
                    l.name,
                    incoming.len()
                )));
            }
            let e = incoming[0];
            if e.from >= i {
                return Err(Error::Invalid(format!("skip into {} comes from a later layer", l.name)));
            }
            if levels[e.from] != levels[i] {
                return Err(Error::Invalid(format!(
                    "skip {} -> {} joins resolution levels {} and {}",
                    self.layers[e.from].name, l.name, levels[e.from], levels[i]
                )));
            }
            let prev = self.layers[i - 1].out_channels;
            if l.in_channels != prev || l.out_channels != prev + self.layers[e.from].out_channels {
                return Err(Error::Invalid(format!("concat {} has inconsistent channel counts", l.name)));
            }
        }
        for e in &self.skips {
            if self.layers.get(e.to).map(|l| l.kind) != Some(LayerKind::Concat) {
                return Err(Error::Invalid(format!("skip edge {e:?} does not end at a concat")));
            }
        }
        if *levels.last().unwrap() != 0 {
            return Err(Error::Invalid("output resolution differs from input resolution".into()));
        }
        Ok(())
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkGraph {
        let mut g = NetworkGraph::default();
        let e = g.push("enc", LayerKind::Conv3x3, 3, 8);
        g.push("pool", LayerKind::MaxPool, 8, 8);
        g.push("mid", LayerKind::Conv3x3, 8, 16);
        g.push("up", LayerKind::ConvTranspose, 16, 8);
        g.concat_skip("cat", e);
        g.push("dec", LayerKind::Conv3x3, 16, 8);
        g.push("head", LayerKind::Conv1x1Head, 8, 2);
        g.push("softmax", LayerKind::Softmax, 2, 2);
        g
    }

    #[test]
    fn valid_graph_passes() {
        let g = tiny();
        g.validate().unwrap();
        assert_eq!(g.depth(), 1);
    }

    #[test]
    fn misaligned_skip_rejected() {
        let mut g = tiny();
        g.skips[0].from = 2;
        assert!(g.validate().is_err());
    }

    #[test]
    fn missing_skip_rejected() {
        let mut g = tiny();
        g.skips.clear();
        assert!(g.validate().is_err());
    }

    #[test]
    fn unbalanced_resolution_rejected() {
        let mut g = tiny();
        g.layers.remove(3);
        g.layers[3].in_channels = 16;
        assert!(g.validate().is_err());
    }
}
