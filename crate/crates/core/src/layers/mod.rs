//! Invertible layers: signal-dependent scaling, invertible 1x1 convolution and
//! checkerboard affine coupling.
//!
//! Layers build graph nodes; they hold no parameter values themselves. Values
//! live in a [`ParamStore`] keyed by dotted names, and [`ParamNodes`] maps
//! the same names to graph leaves. Every forward returns the transformed
//! tensor and a per-sample `[N]` log-determinant.

mod conv1x1;
mod coupling;
mod mask;
mod sdl;

use std::collections::BTreeMap;

use covflow_autodiff::{Bindings, Graph, NodeId};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Tensor};

pub use conv1x1::Conv1x1;
pub use coupling::{Conditioner, Coupling};
pub use mask::{checkerboard, Parity};
pub use sdl::Sdl;

/// Named parameter tensors of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }
}

/// Graph leaves standing for the entries of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    /// Declares one leaf per stored tensor.
    pub fn declare(graph: &mut Graph, store: &ParamStore) -> Self {
        let nodes = store
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(name.clone(), t.shape())))
            .collect();
        ParamNodes { nodes }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }

    pub fn bind<'a>(&self, bindings: &mut Bindings<'a>, store: &'a ParamStore) -> Result<()> {
        for (name, &id) in &self.nodes {
            bindings.bind(id, store.get(name)?);
        }
        Ok(())
    }
}

/// Context shared by layer graph builders.
pub struct LayerCtx<'a> {
    pub params: &'a ParamNodes,
    /// Current parameter values, needed where an inverse is computed numerically.
    pub values: &'a ParamStore,
    /// Conditioning tensor `[N, C, H, W]` when the model is conditional.
    pub cond: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Sdl(Sdl),
    Conv1x1(Conv1x1),
    Coupling(Coupling),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Sdl(l) => &l.prefix,
            Layer::Conv1x1(l) => &l.prefix,
            Layer::Coupling(l) => &l.prefix,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            Layer::Sdl(l) => l.init(store),
            Layer::Conv1x1(l) => l.init(store, rng),
            Layer::Coupling(l) => l.init(store, rng),
        }
    }

    /// Names of parameters updated by training.
    pub fn trainable(&self) -> Vec<String> {
        match self {
            Layer::Sdl(l) => l.trainable(),
            Layer::Conv1x1(l) => l.trainable(),
            Layer::Coupling(l) => l.trainable(),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &LayerCtx<'_>, x: NodeId) -> Result<(NodeId, NodeId)> {
        match self {
            Layer::Sdl(l) => l.forward(g, ctx, x),
            Layer::Conv1x1(l) => l.forward(g, ctx, x),
            Layer::Coupling(l) => l.forward(g, ctx, x),
        }
    }

    pub fn inverse(&self, g: &mut Graph, ctx: &LayerCtx<'_>, z: NodeId) -> Result<NodeId> {
        match self {
            Layer::Sdl(l) => l.inverse(g, ctx, z),
            Layer::Conv1x1(l) => l.inverse(g, ctx, z),
            Layer::Coupling(l) => l.inverse(g, ctx, z),
        }
    }
}

/// Sums a `[N, ...]` node to a per-sample `[N]` vector.
pub(crate) fn per_sample_sum(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let axes: Vec<usize> = (1..shape.len()).collect();
    let s = g.sum(x, &axes)?;
    Ok(g.reshape(s, &[shape[0]])?)
}

fn require_cond(ctx: &LayerCtx<'_>, layer: &str) -> Result<NodeId> {
    ctx.cond
        .ok_or_else(|| Error::Input(format!("layer `{layer}` needs a conditioning input")))
}

/// Numeric forward pass of a single layer, used for inspection and tests.
pub fn apply_forward(layer: &Layer, store: &ParamStore, x: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let params = ParamNodes::declare(&mut g, store);
    let xin = g.leaf("x", x.shape());
    let c = cond.map(|c| g.leaf("cond", c.shape()));
    let ctx = LayerCtx { params: &params, values: store, cond: c };
    let (z, ld) = layer.forward(&mut g, &ctx, xin)?;
    let mut b = Bindings::new();
    params.bind(&mut b, store)?;
    b.bind(xin, x);
    if let (Some(id), Some(t)) = (c, cond) {
        b.bind(id, t);
    }
    let mut out = g.evaluate(&b, &[z, ld])?.into_iter();
    Ok((out.next().unwrap(), out.next().unwrap()))
}

/// Numeric inverse pass of a single layer.
pub fn apply_inverse(layer: &Layer, store: &ParamStore, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = ParamNodes::declare(&mut g, store);
    let zin = g.leaf("z", z.shape());
    let c = cond.map(|c| g.leaf("cond", c.shape()));
    let ctx = LayerCtx { params: &params, values: store, cond: c };
    let x = layer.inverse(&mut g, &ctx, zin)?;
    let mut b = Bindings::new();
    params.bind(&mut b, store)?;
    b.bind(zin, z);
    if let (Some(id), Some(t)) = (c, cond) {
        b.bind(id, t);
    }
    Ok(g.evaluate(&b, &[x])?.remove(0))
}
