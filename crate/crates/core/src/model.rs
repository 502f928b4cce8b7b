//! Flow composition, likelihood, inversion and sampling.

use std::collections::HashMap;
use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use covflow_autodiff::{Bindings, EvalOptions, Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::freq::{self, DequantConfig};
use crate::layers::{Conv1x1, Coupling, Layer, LayerCtx, ParamNodes, ParamStore, Parity, Sdl};
use crate::{Error, Result, Tensor};

/// Which signal is modeled and what it is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Whole image, no decomposition.
    FullUnconditional,
    /// High-frequency part only, no use of the low part.
    HighUnconditional,
    /// High-frequency part with the signal-dependent layer driven by the low part.
    HighUnconditionalSdl,
    /// High-frequency part with SDL and low-part conditioning in every coupling.
    HighConditionalSdl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::FullUnconditional,
        Mode::HighUnconditional,
        Mode::HighUnconditionalSdl,
        Mode::HighConditionalSdl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FullUnconditional => "full-unconditional",
            Mode::HighUnconditional => "high-unconditional",
            Mode::HighUnconditionalSdl => "high-unconditional-sdl",
            Mode::HighConditionalSdl => "high-conditional-sdl",
        }
    }

    pub fn decomposes(self) -> bool {
        self != Mode::FullUnconditional
    }

    pub fn has_sdl(self) -> bool {
        matches!(self, Mode::HighUnconditionalSdl | Mode::HighConditionalSdl)
    }

    pub fn conditional_coupling(self) -> bool {
        self == Mode::HighConditionalSdl
    }

    /// Whether the low-frequency part is an input of the flow.
    pub fn uses_low(self) -> bool {
        self.has_sdl() || self.conditional_coupling()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "full-unconditional" => Ok(Mode::FullUnconditional),
            "2" | "high-unconditional" => Ok(Mode::HighUnconditional),
            "3" | "high-unconditional-sdl" => Ok(Mode::HighUnconditionalSdl),
            "4" | "high-conditional-sdl" => Ok(Mode::HighConditionalSdl),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub coupling_steps: usize,
    pub hidden_channels: usize,
    pub residual_blocks: usize,
    /// `[C, H, W]` of one image.
    pub input_shape: [usize; 3],
    /// Width of the Gaussian used for the frequency split.
    pub sigma: f64,
    /// Grid of the modeled signal.
    pub dequant: DequantConfig,
    /// Initial `softplus(b1)` of the signal-dependent layer.
    pub sdl_gain_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::HighConditionalSdl,
            coupling_steps: 16,
            hidden_channels: 32,
            residual_blocks: 2,
            input_shape: [3, 32, 32],
            sigma: freq::DEFAULT_SIGMA,
            dequant: DequantConfig::high_frequency(),
            sdl_gain_init: 1e-3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Defaults for `mode`, with the grid matched to the modeled signal.
    pub fn for_mode(mode: Mode) -> Self {
        let dequant = if mode.decomposes() {
            DequantConfig::high_frequency()
        } else {
            DequantConfig::unit()
        };
        ModelConfig { mode, dequant, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.dequant.validate()?;
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape must be non-empty, got {:?}", self.input_shape)));
        }
        if h * w < 2 {
            return Err(Error::Config("checkerboard coupling needs at least two pixels".into()));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("hidden_channels must be positive".into()));
        }
        if self.mode.decomposes() && !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.mode == Mode::FullUnconditional && (self.dequant.value_range[0] > 0.0 || self.dequant.value_range[1] < 1.0) {
            return Err(Error::Config("full-image mode needs a value range covering [0, 1]".into()));
        }
        if !(self.sdl_gain_init >= 0.0) {
            return Err(Error::Config("sdl_gain_init must be non-negative".into()));
        }
        Ok(())
    }

    /// Modeled dimensions per sample.
    pub fn dims(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn layers(&self) -> Vec<Layer> {
        let [c, _, _] = self.input_shape;
        let mut layers = Vec::new();
        if self.mode.has_sdl() {
            layers.push(Layer::Sdl(Sdl::new("sdl", c, self.sdl_gain_init)));
        }
        let cond_channels = if self.mode.conditional_coupling() { c } else { 0 };
        let mut parity = Parity::Even;
        for k in 0..self.coupling_steps {
            layers.push(Layer::Conv1x1(Conv1x1::new(format!("step{k}.mix"), c)));
            layers.push(Layer::Coupling(Coupling::new(
                format!("step{k}.couple"),
                c,
                cond_channels,
                self.hidden_channels,
                self.residual_blocks,
                parity,
            )));
            parity = parity.flip();
        }
        layers
    }
}

/// Per-sample likelihood decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodResult {
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub log_det_total: f64,
    pub bits_per_dim: f64,
}

impl LikelihoodResult {
    pub fn is_finite(&self) -> bool {
        self.log_likelihood.is_finite() && self.log_prior.is_finite() && self.log_det_total.is_finite()
    }
}

/// Flow input after decomposition and dequantization.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Dequantized modeled signal.
    pub input: Tensor,
    /// Low-frequency part when the mode consumes it.
    pub cond: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: ParamStore,
}

/// Samples evaluated per graph in batched passes.
pub const EVAL_CHUNK: usize = 64;

/// Builds and initializes a model from `config`.
pub fn build_model(config: &ModelConfig) -> Result<FlowModel> {
    FlowModel::new(config.clone())
}

/// Per-sample RNG keyed by `seed` and the sample's contents, so noise does not
/// depend on batch layout or dataset order.
pub fn sample_rng(seed: u64, sample: &[f64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for v in sample {
        h.update(v.to_bits().to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl FlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for l in &layers {
            l.init(&mut params, &mut rng)?;
        }
        Ok(FlowModel { config, layers, params })
    }

    /// Reassembles a model from stored parameters, checking names, shapes and invertibility.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = FlowModel::new(config.clone())?;
        if params.len() != fresh.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Input(format!("parameter `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
            if !got.is_finite() {
                return Err(Error::Numeric(format!("parameter `{name}` holds non-finite values")));
            }
        }
        let model = FlowModel { config, layers: fresh.layers, params };
        model.check_invertible()?;
        Ok(model)
    }

    /// Spot round trip on a fixed pseudo-random input.
    pub fn check_invertible(&self) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let span = self.config.dequant.width() * 0.25;
        let x = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-span..span));
        let cond = self.config.mode.uses_low().then(|| Tensor::from_fn(&[1, c, h, w], |_| rng.gen::<f64>()));
        let (z, _) = self.forward(&x, cond.as_ref())?;
        let back = self.inverse(&z, cond.as_ref())?;
        let err = back.max_abs_diff(&x);
        if !(err <= 1e-6) {
            return Err(Error::Numeric(format!("model failed its invertibility check (error {err:e})")));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Names of trainable parameters, in layer order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| l.trainable()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_names()
            .iter()
            .map(|n| self.params.get(n).map(|t| t.numel()).unwrap_or(0))
            .sum()
    }

    /// Rounds every parameter to single precision, the checkpoint storage format.
    pub fn round_to_storage(&mut self) {
        let names: Vec<String> = self.params.names().cloned().collect();
        for n in names {
            if let Some(t) = self.params.get_mut(&n) {
                t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
    }

    /// Hash of the configuration and single-precision parameters.
    pub fn fingerprint(&self) -> String {
        crate::io::checkpoint::fingerprint(&self.config, &self.params)
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        let [c, h, w] = self.config.input_shape;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::Input(format!("expected images of shape [N, {c}, {h}, {w}], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(s[0])
    }

    /// Decomposes (when the mode asks for it) and dequantizes a batch of images.
    ///
    /// Values outside the grid range are clamped before encoding. Noise for each
    /// sample comes from [`sample_rng`].
    pub fn prepare(&self, x: &Tensor, seed: u64) -> Result<Prepared> {
        let n = self.check_batch(x)?;
        let per = self.config.dims();
        let (modeled, cond) = if self.config.mode.decomposes() {
            let pair = freq::decompose(x, self.config.sigma)?;
            let cond = self.config.mode.uses_low().then_some(pair.low);
            (pair.high, cond)
        } else {
            (x.clone(), None)
        };
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let one = x.slice_outer(i, 1);
            let mut rng = sample_rng(seed, one.data());
            parts.push(freq::dequantize_saturating(&modeled.slice_outer(i, 1), &self.config.dequant, &mut rng)?);
        }
        let input = Tensor::stack_outer(&parts)?;
        debug_assert_eq!(input.numel(), n * per);
        Ok(Prepared { input, cond })
    }

    fn check_cond(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<()> {
        self.check_batch(input)?;
        match (self.config.mode.uses_low(), cond) {
            (true, Some(c)) if c.shape() == input.shape() => Ok(()),
            (true, Some(c)) => Err(Error::Input(format!(
                "conditioning shape {:?} differs from input {:?}",
                c.shape(),
                input.shape()
            ))),
            (true, None) => Err(Error::Input(format!("mode {} needs the low-frequency input", self.config.mode))),
            (false, Some(_)) => Err(Error::Input(format!("mode {} takes no conditioning input", self.config.mode))),
            (false, None) => Ok(()),
        }
    }

    /// Graph for a forward pass over `n` samples.
    pub fn forward_graph(&self, n: usize) -> Result<FlowGraph> {
        FlowGraph::build(self, n)
    }

    /// Latent and per-sample log-determinant of already prepared input.
    pub fn forward(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        self.check_cond(input, cond)?;
        let fg = self.forward_graph(input.shape()[0])?;
        let b = fg.bindings(self, input, cond)?;
        let mut out = fg.graph.evaluate(&b, &[fg.z, fg.log_det])?.into_iter();
        Ok((out.next().unwrap(), out.next().unwrap()))
    }

    /// Maps latents back to the modeled signal.
    pub fn inverse(&self, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.check_cond(z, cond)?;
        let mut g = Graph::new();
        let params = ParamNodes::declare(&mut g, &self.params);
        let zin = g.leaf("z", z.shape());
        let c = cond.map(|c| g.leaf("cond", c.shape()));
        let ctx = LayerCtx { params: &params, values: &self.params, cond: c };
        let mut x = zin;
        for l in self.layers.iter().rev() {
            x = l.inverse(&mut g, &ctx, x)?;
        }
        let mut b = Bindings::new();
        params.bind(&mut b, &self.params)?;
        b.bind(zin, z);
        if let (Some(id), Some(t)) = (c, cond) {
            b.bind(id, t);
        }
        Ok(g.evaluate(&b, &[x])?.remove(0))
    }

    fn bits_per_dim(&self, ll: f64) -> f64 {
        let d = self.config.dims() as f64;
        -(ll / LN_2) / d + self.config.dequant.bit_depth as f64 - self.config.dequant.width().log2()
    }

    /// Likelihood of prepared input; non-finite samples come back with
    /// non-finite fields instead of failing the batch.
    pub fn log_likelihood_prepared(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<Vec<LikelihoodResult>> {
        self.check_cond(input, cond)?;
        let n = input.shape()[0];
        let mut graphs: HashMap<usize, FlowGraph> = HashMap::new();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            if !graphs.contains_key(&len) {
                graphs.insert(len, self.forward_graph(len)?);
            }
            let fg = &graphs[&len];
            let xi = input.slice_outer(start, len);
            let ci = cond.map(|c| c.slice_outer(start, len));
            let b = fg.bindings(self, &xi, ci.as_ref())?;
            let vals = fg
                .graph
                .evaluate_with(&b, &[fg.log_prior, fg.log_det, fg.log_likelihood], EvalOptions { check_finite: false })?;
            for i in 0..len {
                let ll = vals[2].data()[i];
                out.push(LikelihoodResult {
                    log_likelihood: ll,
                    log_prior: vals[0].data()[i],
                    log_det_total: vals[1].data()[i],
                    bits_per_dim: self.bits_per_dim(ll),
                });
            }
            start += len;
        }
        Ok(out)
    }

    /// Per-sample likelihood of raw images with dequantization noise pinned by `seed`.
    pub fn log_likelihood(&self, x: &Tensor, seed: u64) -> Result<Vec<LikelihoodResult>> {
        let p = self.prepare(x, seed)?;
        self.log_likelihood_prepared(&p.input, p.cond.as_ref())
    }

    /// Draws modeled signals at `temperature`.
    ///
    /// Modes that consume the low-frequency part need `low`; the others take
    /// `count` and reject `low`.
    pub fn sample(&self, low: Option<&Tensor>, count: usize, temperature: f64, seed: u64) -> Result<Tensor> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::Input(format!("temperature must be non-negative, got {temperature}")));
        }
        let [c, h, w] = self.config.input_shape;
        let n = match (self.config.mode.uses_low(), low) {
            (true, Some(l)) => l.shape().first().copied().unwrap_or(0),
            (true, None) => return Err(Error::Input(format!("mode {} samples given a low-frequency image", self.config.mode))),
            (false, Some(_)) => return Err(Error::Input(format!("mode {} takes no conditioning input", self.config.mode))),
            (false, None) => count,
        };
        if n == 0 {
            return Err(Error::Input("nothing to sample".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(&[n, c, h, w], |_| temperature * rng.sample::<f64, _>(StandardNormal));
        self.inverse(&z, low)
    }
}

/// A forward pass recorded in a graph, with handles to its outputs.
pub struct FlowGraph {
    pub graph: Graph,
    pub params: ParamNodes,
    pub input: NodeId,
    pub cond: Option<NodeId>,
    pub z: NodeId,
    /// Per-sample `[N]` nodes.
    pub log_det: NodeId,
    pub log_prior: NodeId,
    pub log_likelihood: NodeId,
}

impl FlowGraph {
    pub fn build(model: &FlowModel, n: usize) -> Result<Self> {
        let [c, h, w] = model.config.input_shape;
        let shape = [n, c, h, w];
        let mut g = Graph::new();
        let params = ParamNodes::declare(&mut g, &model.params);
        let input = g.leaf("input", &shape);
        let cond = model.config.mode.uses_low().then(|| g.leaf("cond", &shape));
        let ctx = LayerCtx { params: &params, values: &model.params, cond };
        let mut x = input;
        let mut log_det = g.constant(Tensor::zeros(&[n]));
        for l in &model.layers {
            let (z, ld) = l.forward(&mut g, &ctx, x)?;
            x = z;
            log_det = g.add(log_det, ld)?;
        }
        let sq = g.square(x)?;
        let energy = crate::layers::per_sample_sum(&mut g, sq)?;
        let half_log_2pi = -0.5 * (2.0 * PI).ln() * (c * h * w) as f64;
        let log_prior = g.affine(energy, -0.5, half_log_2pi)?;
        let log_likelihood = g.add(log_prior, log_det)?;
        Ok(FlowGraph { graph: g, params, input, cond, z: x, log_det, log_prior, log_likelihood })
    }

    pub fn bindings<'a>(&self, model: &'a FlowModel, input: &'a Tensor, cond: Option<&'a Tensor>) -> Result<Bindings<'a>> {
        let mut b = Bindings::new();
        self.params.bind(&mut b, &model.params)?;
        b.bind(self.input, input);
        match (self.cond, cond) {
            (Some(id), Some(t)) => {
                b.bind(id, t);
            }
            (None, None) => {}
            _ => return Err(Error::Input("conditioning input does not match the model mode".into())),
        }
        Ok(b)
    }

    /// Appends the per-sample squared norm `[N]` of d(sum of log-likelihoods)/d(input).
    pub fn input_gradient_sq_norm(&mut self) -> Result<NodeId> {
        let total = self.graph.sum_all(self.log_likelihood)?;
        let total = self.graph.reshape(total, &[])?;
        let gx = self.graph.grad(total, &[self.input])?[0];
        let sq = self.graph.square(gx)?;
        crate::layers::per_sample_sum(&mut self.graph, sq)
    }
}
