use covflow_autodiff::{Graph, NodeId};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mask::{checkerboard, Parity};
use super::{per_sample_sum, LayerCtx, ParamStore};
use crate::{Error, Result, Tensor};

/// Gated residual network predicting `(s, t)` for an affine coupling.
///
/// `in` conv, `blocks` gated residual blocks, then a zero-initialized head.
/// All convolutions are 3x3.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub prefix: String,
    /// Channels of the transformed tensor (and of `s`, `t`).
    pub channels: usize,
    /// Extra conditioning channels concatenated to the input; 0 if none.
    pub cond_channels: usize,
    pub hidden: usize,
    pub blocks: usize,
}

const KERNEL: usize = 3;

impl Conditioner {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn convs(&self) -> Vec<(String, usize, usize)> {
        let (h, c) = (self.hidden, self.channels);
        let mut v = vec![("in".to_string(), h, c + self.cond_channels)];
        for b in 0..self.blocks {
            v.push((format!("block{b}.conv1"), h, h));
            v.push((format!("block{b}.conv2"), 2 * h, h));
        }
        v.push(("out".to_string(), 2 * c, h));
        v
    }

    pub fn trainable(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .convs()
            .into_iter()
            .flat_map(|(n, _, _)| [self.name(&format!("{n}.w")), self.name(&format!("{n}.b"))])
            .collect();
        names.push(self.name("s_scale"));
        names
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for (n, co, ci) in self.convs() {
            let shape = [co, ci, KERNEL, KERNEL];
            let w = if n == "out" {
                Tensor::zeros(&shape)
            } else {
                let std = 1.0 / ((ci * KERNEL * KERNEL) as f64).sqrt();
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                Tensor::from_fn(&shape, |_| dist.sample(rng))
            };
            store.insert(self.name(&format!("{n}.w")), w);
            store.insert(self.name(&format!("{n}.b")), Tensor::zeros(&[co]));
        }
        store.insert(self.name("s_scale"), Tensor::ones(&[self.channels]));
        Ok(())
    }

    fn conv(&self, g: &mut Graph, ctx: &LayerCtx<'_>, x: NodeId, part: &str) -> Result<NodeId> {
        let w = ctx.params.get(&self.name(&format!("{part}.w")))?;
        let b = ctx.params.get(&self.name(&format!("{part}.b")))?;
        let y = g.conv2d(x, w)?;
        let shape = g.shape(y).to_vec();
        let b = g.reshape(b, &[1, shape[1], 1, 1])?;
        let b = g.broadcast(b, &shape)?;
        Ok(g.add(y, b)?)
    }

    /// Returns `(s, t)`, each shaped like `masked_x`.
    pub fn apply(
        &self,
        g: &mut Graph,
        ctx: &LayerCtx<'_>,
        masked_x: NodeId,
        cond: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let input = match (cond, self.cond_channels) {
            (Some(c), k) if k > 0 => g.concat(&[masked_x, c], 1)?,
            (None, 0) => masked_x,
            (Some(_), _) => {
                return Err(Error::Input(format!("conditioner `{}` takes no conditioning", self.prefix)))
            }
            (None, _) => {
                return Err(Error::Input(format!("conditioner `{}` needs a conditioning input", self.prefix)))
            }
        };
        let got = g.shape(input)[1];
        if got != self.channels + self.cond_channels {
            return Err(Error::Input(format!(
                "conditioner `{}` expects {} input channels, got {got}",
                self.prefix,
                self.channels + self.cond_channels
            )));
        }
        let h = self.hidden;
        let mut x = self.conv(g, ctx, input, "in")?;
        for b in 0..self.blocks {
            let a = g.tanh(x)?;
            let r = self.conv(g, ctx, a, &format!("block{b}.conv1"))?;
            let a = g.tanh(r)?;
            let u = self.conv(g, ctx, a, &format!("block{b}.conv2"))?;
            let val = g.slice(u, 1, 0, h)?;
            let gate = g.slice(u, 1, h, h)?;
            let gate = g.sigmoid(gate)?;
            let gated = g.mul(val, gate)?;
            x = g.add(x, gated)?;
        }
        let a = g.tanh(x)?;
        let out = self.conv(g, ctx, a, "out")?;
        let c = self.channels;
        let s_raw = g.slice(out, 1, 0, c)?;
        let t = g.slice(out, 1, c, c)?;
        let shape = g.shape(s_raw).to_vec();
        let scale = g.reshape(ctx.params.get(&self.name("s_scale"))?, &[1, c, 1, 1])?;
        let scale = g.broadcast(scale, &shape)?;
        let th = g.tanh(s_raw)?;
        let s = g.mul(scale, th)?;
        Ok((s, t))
    }
}

/// Checkerboard affine coupling: passive squares are copied, the others
/// become `x * exp(s) + t` with `(s, t)` predicted from the passive squares
/// and the conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub prefix: String,
    pub parity: Parity,
    pub conditioner: Conditioner,
}

impl Coupling {
    pub fn new(prefix: impl Into<String>, channels: usize, cond_channels: usize, hidden: usize, blocks: usize, parity: Parity) -> Self {
        let prefix = prefix.into();
        Coupling {
            conditioner: Conditioner {
                prefix: format!("{prefix}.net"),
                channels,
                cond_channels,
                hidden,
                blocks,
            },
            prefix,
            parity,
        }
    }

    pub fn trainable(&self) -> Vec<String> {
        self.conditioner.trainable()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conditioner.init(store, rng)
    }

    fn cond(&self, ctx: &LayerCtx<'_>) -> Option<NodeId> {
        if self.conditioner.cond_channels > 0 {
            ctx.cond
        } else {
            None
        }
    }

    fn masks(&self, g: &mut Graph, shape: &[usize]) -> (NodeId, NodeId) {
        let m = checkerboard(self.parity, shape);
        let inv = m.map(|v| 1.0 - v);
        (g.constant(m), g.constant(inv))
    }

    fn check_st(&self, g: &Graph, s: NodeId, t: NodeId, shape: &[usize]) -> Result<()> {
        if g.shape(s) != shape || g.shape(t) != shape {
            return Err(Error::Input(format!(
                "coupling `{}`: conditioner output {:?} does not match input {shape:?}",
                self.prefix,
                g.shape(s)
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, ctx: &LayerCtx<'_>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.shape(x).to_vec();
        let (m, inv) = self.masks(g, &shape);
        let xm = g.mul(x, m)?;
        let (s, t) = self.conditioner.apply(g, ctx, xm, self.cond(ctx))?;
        self.check_st(g, s, t, &shape)?;
        let es = g.exp(s)?;
        let scaled = g.mul(x, es)?;
        let moved = g.add(scaled, t)?;
        let active = g.mul(moved, inv)?;
        let z = g.add(xm, active)?;
        let s_active = g.mul(s, inv)?;
        let ld = per_sample_sum(g, s_active)?;
        Ok((z, ld))
    }

    pub fn inverse(&self, g: &mut Graph, ctx: &LayerCtx<'_>, z: NodeId) -> Result<NodeId> {
        let shape = g.shape(z).to_vec();
        let (m, inv) = self.masks(g, &shape);
        let zm = g.mul(z, m)?;
        let (s, t) = self.conditioner.apply(g, ctx, zm, self.cond(ctx))?;
        self.check_st(g, s, t, &shape)?;
        let centered = g.sub(z, t)?;
        let ns = g.neg(s)?;
        let es = g.exp(ns)?;
        let restored = g.mul(centered, es)?;
        let active = g.mul(restored, inv)?;
        Ok(g.add(zm, active)?)
    }
}
