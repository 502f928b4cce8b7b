use covflow_autodiff::{kernels, Graph, NodeId};

use super::{per_sample_sum, require_cond, LayerCtx, ParamStore};
use crate::{Error, Result, Tensor};

/// Scales the high-frequency signal by `sqrt(softplus(b1) * x_L + softplus(b2))`,
/// with one `(b1, b2)` pair per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sdl {
    pub prefix: String,
    pub channels: usize,
    /// Initial `softplus(b1)`; zero makes the initial scale 1 regardless of `x_L`.
    pub gain_init: f64,
}

/// Pre-activation giving `softplus(v) = target`; `target = 0` maps to a value
/// whose softplus underflows to exactly zero.
pub fn softplus_inverse(target: f64) -> f64 {
    if target <= 0.0 {
        -800.0
    } else if target > 30.0 {
        target
    } else {
        target.exp_m1().ln()
    }
}

impl Sdl {
    pub fn new(prefix: impl Into<String>, channels: usize, gain_init: f64) -> Self {
        Sdl { prefix: prefix.into(), channels, gain_init }
    }

    pub fn beta1(&self) -> String {
        format!("{}.beta1", self.prefix)
    }

    pub fn beta2(&self) -> String {
        format!("{}.beta2", self.prefix)
    }

    pub fn trainable(&self) -> Vec<String> {
        vec![self.beta1(), self.beta2()]
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        if !(self.gain_init >= 0.0) {
            return Err(Error::Config(format!("SDL gain must be non-negative, got {}", self.gain_init)));
        }
        let c = self.channels;
        store.insert(self.beta1(), Tensor::full(&[c], softplus_inverse(self.gain_init)));
        store.insert(self.beta2(), Tensor::full(&[c], softplus_inverse(1.0)));
        Ok(())
    }

    /// Per-element log-scale node `0.5 * log(softplus(b1) x_L + softplus(b2))`.
    fn log_scale(&self, g: &mut Graph, ctx: &LayerCtx<'_>, shape: &[usize]) -> Result<NodeId> {
        let cond = require_cond(ctx, &self.prefix)?;
        if g.shape(cond) != shape {
            return Err(Error::Input(format!(
                "SDL conditioning shape {:?} differs from input {:?}",
                g.shape(cond),
                shape
            )));
        }
        let c = self.channels;
        let mut coef = Vec::with_capacity(2);
        for name in [self.beta1(), self.beta2()] {
            let b = ctx.params.get(&name)?;
            let b = g.reshape(b, &[1, c, 1, 1])?;
            let sp = g.softplus(b)?;
            coef.push(g.broadcast(sp, shape)?);
        }
        let gained = g.mul(coef[0], cond)?;
        let var = g.add(gained, coef[1])?;
        let lv = g.log(var)?;
        Ok(g.scale(lv, 0.5)?)
    }

    pub fn forward(&self, g: &mut Graph, ctx: &LayerCtx<'_>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.shape(x).to_vec();
        let log_s = self.log_scale(g, ctx, &shape)?;
        let s = g.exp(log_s)?;
        let z = g.mul(x, s)?;
        let ld = per_sample_sum(g, log_s)?;
        Ok((z, ld))
    }

    pub fn inverse(&self, g: &mut Graph, ctx: &LayerCtx<'_>, z: NodeId) -> Result<NodeId> {
        let shape = g.shape(z).to_vec();
        let log_s = self.log_scale(g, ctx, &shape)?;
        let neg = g.neg(log_s)?;
        let inv = g.exp(neg)?;
        Ok(g.mul(z, inv)?)
    }

    /// Current per-channel `(softplus(b1), softplus(b2))`.
    pub fn coefficients(&self, store: &ParamStore) -> Result<Vec<(f64, f64)>> {
        let b1 = store.get(&self.beta1())?;
        let b2 = store.get(&self.beta2())?;
        Ok(b1
            .data()
            .iter()
            .zip(b2.data())
            .map(|(&a, &b)| (kernels::softplus(a), kernels::softplus(b)))
            .collect())
    }
}
