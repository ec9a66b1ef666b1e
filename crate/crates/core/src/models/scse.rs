//! Concurrent spatial and channel squeeze-and-excitation.

use footprint_grad::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{Builder, Conv};
use crate::{Error, Result};

/// How the channel-gated and spatially-gated maps are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScseCombine {
    #[default]
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub struct Scse {
    pub squeeze: Conv,
    pub excite: Conv,
    pub spatial: Conv,
    pub combine: ScseCombine,
    pub channels: usize,
}

impl Scse {
    pub fn build(b: &mut Builder<'_>, name: &str, channels: usize, reduction: usize, combine: ScseCombine) -> Result<Self> {
        if reduction == 0 || channels < reduction || channels % reduction != 0 {
            return Err(Error::Invalid(format!(
                "scSE needs channels ({channels}) divisible by and at least the reduction ({reduction})"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: b.conv(&format!("{name}.cse.0"), channels, hidden, 1, 1, true)?,
            excite: b.conv(&format!("{name}.cse.1"), hidden, channels, 1, 1, true)?,
            spatial: b.conv(&format!("{name}.sse"), channels, 1, 1, 1, true)?,
            combine,
            channels,
        })
    }

    /// `combine(x * sigmoid(cSE(x)), x * sigmoid(sSE(x)))`, same shape as `x`.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let c = g.value(x).dims4()?.1;
        if c != self.channels {
            return Err(Error::Shape(format!("scSE built for {} channels, got {c}", self.channels)));
        }
        let pooled = g.global_avg_pool(x)?;
        let h = self.squeeze.forward(g, pooled)?;
        let h = g.relu(h);
        let h = self.excite.forward(g, h)?;
        let channel_gate = g.sigmoid(h);
        let s = self.spatial.forward(g, x)?;
        let spatial_gate = g.sigmoid(s);
        let cse = g.mul(x, channel_gate)?;
        let sse = g.mul(x, spatial_gate)?;
        match self.combine {
            ScseCombine::Sum => Ok(g.add(cse, sse)?),
            ScseCombine::Max => Ok(max_nodes(g, cse, sse)?),
        }
    }
}

/// Elementwise maximum built from differentiable primitives:
/// `max(a, b) = b + relu(a - b)`.
fn max_nodes(g: &mut Graph<'_>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let neg_b = g.scale(b, -1.0);
    let d = g.add(a, neg_b)?;
    let r = g.relu(d);
    Ok(g.add(b, r)?)
}

/// Saturates both gates at 1 (or 0) by zeroing weights and setting large
/// biases. Used to pin the block's behaviour in tests.
pub fn saturate_gates(store: &mut footprint_grad::ParamStore, block: &Scse, channel_bias: f32, spatial_bias: f32) -> Result<()> {
    for conv in [block.squeeze, block.excite, block.spatial] {
        let shape = store.value(conv.w).shape().to_vec();
        *store.value_mut(conv.w) = Tensor::zeros(&shape);
    }
    let n = store.value(block.excite.b.unwrap()).len();
    *store.value_mut(block.excite.b.unwrap()) = Tensor::full(&[n], channel_bias);
    *store.value_mut(block.spatial.b.unwrap()) = Tensor::full(&[1], spatial_bias);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::layers::Init;
    use footprint_grad::ParamStore;
    use rand::SeedableRng;

    fn block(c: usize, combine: ScseCombine) -> (ParamStore, Scse) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder { store: &mut store, rng: &mut rng, init: Init::Kaiming };
        let s = Scse::build(&mut b, "scse", c, 2, combine).unwrap();
        (store, s)
    }

    fn run(store: &ParamStore, s: &Scse, x: &Tensor) -> Tensor {
        let mut g = Graph::inference(store);
        let xn = g.input(x.clone());
        let y = s.forward(&mut g, xn).unwrap();
        g.value(y).clone()
    }

    fn sample(c: usize, h: usize) -> Tensor {
        let n = c * h * h;
        Tensor::new(&[1, c, h, h], (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn open_gates_give_identity_under_max() {
        let (mut store, s) = block(4, ScseCombine::Max);
        saturate_gates(&mut store, &s, 100.0, 100.0).unwrap();
        let x = sample(4, 3);
        let y = run(&store, &s, &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn open_gates_double_under_sum() {
        let (mut store, s) = block(4, ScseCombine::Sum);
        saturate_gates(&mut store, &s, 100.0, 100.0).unwrap();
        let x = sample(4, 3);
        let y = run(&store, &s, &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-5);
        }
    }

    /// 2x2x2 map: channel k closed and spatial gate closed gives exact zeros
    /// in channel k; the open channel passes through once.
    #[test]
    fn closed_gates_zero_the_channel() {
        let (mut store, s) = block(2, ScseCombine::Sum);
        saturate_gates(&mut store, &s, 100.0, -200.0).unwrap();
        let bias = s.excite.b.unwrap();
        *store.value_mut(bias) = Tensor::new(&[2], vec![-200.0, 100.0]).unwrap();
        let x = Tensor::new(&[1, 2, 2, 2], vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0, -7.0, 8.0]).unwrap();
        let y = run(&store, &s, &x);
        assert!(y.data()[..4].iter().all(|&v| v.abs() < 1e-30));
        for (a, b) in y.data()[4..].iter().zip(&x.data()[4..]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_preserved() {
        let (store, s) = block(64, ScseCombine::Sum);
        let y = run(&store, &s, &Tensor::zeros(&[1, 64, 56, 56]));
        assert_eq!(y.shape(), &[1, 64, 56, 56]);
    }

    #[test]
    fn too_few_channels_rejected() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder { store: &mut store, rng: &mut rng, init: Init::Kaiming };
        assert!(Scse::build(&mut b, "a", 1, 2, ScseCombine::Sum).is_err());
        assert!(Scse::build(&mut b, "b", 5, 2, ScseCombine::Sum).is_err());
    }
}
