//! The variable spiking graph neural operator.
//!
//! Pipeline for one sample, repeated for each of the `T` spike steps with the
//! same (direct-encoded) input and membranes carried across steps:
//!
//! ```text
//! e   = W2 . VSN_M(W1 u + b1) + b2                  input embedding
//! X_i = [x_i, e]                                    node features
//! v_0 = VSN_P2(W . VSN_P1(W X + b) + b)             lifting
//! per layer:
//!   spectral = VSN(Q_m (K x_1 Q_m^T v) + w(v))
//!   spatial  = VSN(gate * A . VSN(v W))             (full mode only)
//!   v'       = VSN_f(f([spatial | spectral]) + v)   (full mode only)
//!   v'       = spectral                             (spectral-only mode)
//! s~(t) = VSN_final(W1 v_L + b1)
//! ```
//!
//! and finally `s = W2 mean_t(s~(t)) + b2`.

mod checkpoint;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind};
pub use params::{BoundParams, ParamStore};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, PointCloud};
use crate::linalg::{CsrMatrix, Mat};
use crate::spectral::{combinatorial_laplacian, lowest_eigenpairs, SpectralBasis};
use crate::spiking::{
    beta_to_raw, vsn_forward, Activation, BoundVsn, Surrogate, VsnState, DEFAULT_BETA,
    DEFAULT_THETA,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    #[default]
    Full,
    SpectralOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spiking {
    #[default]
    On,
    Bypass,
}

impl std::fmt::Display for OperatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OperatorMode::Full => "full",
            OperatorMode::SpectralOnly => "spectral_only",
        })
    }
}

/// Model components whose spiking layers are reported together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    M,
    P,
    Spectral,
    Spatial,
    F,
    Final,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::M,
        Component::P,
        Component::Spectral,
        Component::Spatial,
        Component::F,
        Component::Final,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::M => "S_M",
            Component::P => "S_P",
            Component::Spectral => "S_spectral",
            Component::Spatial => "S_spatial",
            Component::F => "S_f",
            Component::Final => "S_final",
        }
    }

    /// Whether a model in `mode` has spiking layers of this component.
    pub fn present_in(self, mode: OperatorMode) -> bool {
        !(mode == OperatorMode::SpectralOnly && matches!(self, Component::Spatial | Component::F))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub modes: usize,
    pub spike_steps: usize,
    pub mode: OperatorMode,
    pub spiking: Spiking,
    pub knn_k: usize,
    pub embed_dim: usize,
    pub input_dim: usize,
    pub output_channels: usize,
    pub coord_dim: usize,
    /// Activation of every VSN except the embedding one.
    pub activation: Activation,
    pub embed_activation: Activation,
    pub surrogate: Surrogate,
    pub theta_init: f64,
    pub beta_init: f64,
    /// Multiplier on the uniform weight bound 1/sqrt(fan_in). Biases keep
    /// the plain bound.
    #[serde(default = "unit_gain")]
    pub init_gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            width: 32,
            modes: 24,
            spike_steps: 1,
            mode: OperatorMode::Full,
            spiking: Spiking::On,
            knn_k: 6,
            embed_dim: 16,
            input_dim: 22,
            output_channels: 4,
            coord_dim: 2,
            activation: Activation::Gelu,
            embed_activation: Activation::Gelu,
            surrogate: Surrogate::default(),
            theta_init: DEFAULT_THETA,
            beta_init: DEFAULT_BETA,
            init_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("width", self.width),
            ("modes", self.modes),
            ("spike_steps", self.spike_steps),
            ("knn_k", self.knn_k),
            ("embed_dim", self.embed_dim),
            ("input_dim", self.input_dim),
            ("output_channels", self.output_channels),
            ("coord_dim", self.coord_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.beta_init > 0.0 && self.beta_init < 1.0) {
            return Err(Error::Config(format!("beta_init {} outside (0, 1)", self.beta_init)));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::Config(format!("init_gain {} must be positive", self.init_gain)));
        }
        if !self.theta_init.is_finite() {
            return Err(Error::Config("theta_init must be finite".into()));
        }
        if let Surrogate::FastSigmoid { slope } = self.surrogate {
            if !(slope > 0.0 && slope.is_finite()) {
                return Err(Error::Config(format!("surrogate slope {slope} must be positive")));
            }
        }
        Ok(())
    }
}

/// One spiking layer of the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct VsnSpec {
    pub name: String,
    pub component: Component,
    pub features: usize,
    pub activation: Activation,
}

/// The spiking layers of a configuration, in forward order.
pub fn vsn_layout(cfg: &ModelConfig) -> Vec<VsnSpec> {
    let d = cfg.width;
    let spec = |name: String, component, features, activation| VsnSpec {
        name,
        component,
        features,
        activation,
    };
    let mut out = vec![
        spec("embed.vsn".into(), Component::M, cfg.embed_dim, cfg.embed_activation),
        spec("lift.vsn1".into(), Component::P, d, cfg.activation),
        spec("lift.vsn2".into(), Component::P, d, cfg.activation),
    ];
    for l in 0..cfg.layers {
        out.push(spec(format!("layer{l}.spectral.vsn"), Component::Spectral, d, cfg.activation));
        if cfg.mode == OperatorMode::Full {
            out.push(spec(format!("layer{l}.spatial.vsn1"), Component::Spatial, d, cfg.activation));
            out.push(spec(format!("layer{l}.spatial.vsn2"), Component::Spatial, d, cfg.activation));
            out.push(spec(format!("layer{l}.combine.vsn"), Component::F, d, cfg.activation));
        }
    }
    out.push(spec("down.vsn".into(), Component::Final, d, cfg.activation));
    out
}

/// Geometry shared by every sample: graph, adjacency and spectral basis.
#[derive(Clone, Debug)]
pub struct OperatorContext {
    graph: Graph,
    adjacency: Arc<CsrMatrix>,
    basis: SpectralBasis,
    q: Arc<Mat>,
    coords: Tensor,
}

impl OperatorContext {
    pub fn new(graph: Graph, modes: usize) -> Result<Self> {
        if modes > graph.n() {
            return Err(Error::Config(format!(
                "{modes} modes requested for a graph with {} nodes",
                graph.n()
            )));
        }
        let basis = lowest_eigenpairs(&combinatorial_laplacian(&graph), modes)?;
        Self::from_parts(graph, basis)
    }

    pub fn from_parts(graph: Graph, basis: SpectralBasis) -> Result<Self> {
        if basis.n() != graph.n() {
            return Err(Error::ShapeMismatch(format!(
                "basis on {} nodes for a graph with {}",
                basis.n(),
                graph.n()
            )));
        }
        let pts = graph.points();
        let coords = Tensor::new(vec![pts.len(), pts.dim()], pts.coords().to_vec())?;
        Ok(OperatorContext {
            adjacency: Arc::new(graph.adjacency().clone()),
            q: Arc::new(basis.q_matrix().clone()),
            graph,
            basis,
            coords,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz()
    }
}

/// Row `i` is `[coords_i, embedding]`.
pub fn build_node_features(points: &PointCloud, embedding: &[f64]) -> Mat {
    let (n, c, e) = (points.len(), points.dim(), embedding.len());
    let mut out = Mat::zeros(n, c + e);
    for i in 0..n {
        let row = &mut out.as_mut_slice()[i * (c + e)..(i + 1) * (c + e)];
        row[..c].copy_from_slice(points.point(i));
        row[c..].copy_from_slice(embedding);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VsGnoModel {
    config: ModelConfig,
    params: ParamStore,
    edge_count: usize,
}

impl VsGnoModel {
    /// Randomly initialised model for a graph with `edge_count` stored
    /// adjacency entries.
    pub fn new(config: ModelConfig, edge_count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (q, e, d, k, m) = (
            config.input_dim,
            config.embed_dim,
            config.width,
            config.output_channels,
            config.modes,
        );
        let gain = config.init_gain;
        let mut linear = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            p.insert(
                format!("{name}.weight"),
                params::uniform(&mut rng, &[fan_in, fan_out], gain * bound),
            );
            if bias {
                p.insert(format!("{name}.bias"), params::uniform(&mut rng, &[1, fan_out], bound));
            }
        };
        linear(&mut p, "embed.w1", q, e, true);
        linear(&mut p, "embed.w2", e, e, true);
        linear(&mut p, "lift.w1", config.coord_dim + e, d, true);
        linear(&mut p, "lift.w2", d, d, true);
        for l in 0..config.layers {
            linear(&mut p, &format!("layer{l}.w"), d, d, true);
            if config.mode == OperatorMode::Full {
                linear(&mut p, &format!("layer{l}.spatial"), d, d, false);
                linear(&mut p, &format!("layer{l}.f"), 2 * d, d, true);
            }
        }
        linear(&mut p, "down.w1", d, d, true);
        linear(&mut p, "down.w2", d, k, true);
        let kscale = 1.0 / (d * m) as f64;
        for l in 0..config.layers {
            p.insert(
                format!("layer{l}.kernel"),
                params::uniform(&mut rng, &[m, d, d], kscale),
            );
            if config.mode == OperatorMode::Full {
                p.insert(format!("layer{l}.gate"), params::filled(&[edge_count], 1.0));
            }
        }
        for spec in vsn_layout(&config) {
            p.insert(
                format!("{}.theta", spec.name),
                params::filled(&[1, spec.features], config.theta_init),
            );
            p.insert(
                format!("{}.beta", spec.name),
                params::filled(&[1, spec.features], beta_to_raw(config.beta_init)),
            );
        }
        Ok(VsGnoModel {
            config,
            params: p,
            edge_count,
        })
    }

    /// Model from explicit parameters; shapes are checked against a fresh
    /// initialisation of the same configuration.
    pub fn from_params(config: ModelConfig, edge_count: usize, params: ParamStore) -> Result<Self> {
        let template = VsGnoModel::new(config.clone(), edge_count, 0)?;
        if template.params.names() != params.names() {
            return Err(Error::Incompatible("parameter names do not match the configuration".into()));
        }
        for ((name, a), b) in template.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(VsGnoModel {
            config,
            params,
            edge_count,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Sets the spiking flag without touching parameters.
    pub fn set_spiking(&mut self, spiking: Spiking) {
        self.config.spiking = spiking;
    }

    pub fn set_spike_steps(&mut self, steps: usize) {
        self.config.spike_steps = steps.max(1);
    }

    pub fn check_context(&self, ctx: &OperatorContext) -> Result<()> {
        if ctx.edge_count() != self.edge_count {
            return Err(Error::Incompatible(format!(
                "model gates {} edges, graph stores {}",
                self.edge_count,
                ctx.edge_count()
            )));
        }
        if ctx.basis().m() != self.config.modes {
            return Err(Error::Incompatible(format!(
                "basis has {} modes, model expects {}",
                ctx.basis().m(),
                self.config.modes
            )));
        }
        if ctx.graph().points().dim() != self.config.coord_dim {
            return Err(Error::Incompatible(format!(
                "points are {}-dimensional, model expects {}",
                ctx.graph().points().dim(),
                self.config.coord_dim
            )));
        }
        Ok(())
    }

    /// Opens a forward pass on `tape`.
    pub fn session<'a>(
        &'a self,
        ctx: &'a OperatorContext,
        tape: &mut Tape,
        requires_grad: bool,
    ) -> Result<Session<'a>> {
        self.check_context(ctx)?;
        let params = self.params.bind(tape, requires_grad)?;
        let layout = vsn_layout(&self.config);
        let mut vsns = Vec::new();
        if self.config.spiking == Spiking::On {
            for spec in &layout {
                let theta = params.var(&format!("{}.theta", spec.name))?;
                let beta = params.var(&format!("{}.beta", spec.name))?;
                vsns.push(BoundVsn::new(
                    tape,
                    theta,
                    beta,
                    spec.activation,
                    self.config.surrogate,
                )?);
            }
        }
        let states = vec![VsnState::new(); layout.len()];
        Ok(Session {
            model: self,
            ctx,
            params,
            layout,
            vsns,
            states,
        })
    }

    /// Inference without gradients.
    pub fn predict(&self, ctx: &OperatorContext, input: &[f64]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut session = self.session(ctx, &mut tape, false)?;
        let out = session.forward(&mut tape, input)?;
        let output = tape.value(out.output).to_mat()?;
        Ok(Prediction {
            output,
            layers: out.layers,
        })
    }
}

/// Spike counters of one layer after a forward pass.
#[derive(Clone, Debug)]
pub struct LayerSpikes {
    pub name: String,
    pub component: Component,
    pub spikes: u64,
    pub opportunities: u64,
    /// Differentiable rate on the forward tape.
    pub rate: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// n x k
    pub output: Var,
    /// Empty in bypass mode.
    pub layers: Vec<LayerSpikes>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub output: Mat,
    pub layers: Vec<LayerSpikes>,
}

/// Mean spike rate per present component, from layer counters.
pub fn component_rates(layers: &[LayerSpikes]) -> Vec<(Component, f64)> {
    let mut out = Vec::new();
    for c in Component::ALL {
        let rates: Vec<f64> = layers
            .iter()
            .filter(|l| l.component == c && l.opportunities > 0)
            .map(|l| l.spikes as f64 / l.opportunities as f64)
            .collect();
        if !rates.is_empty() {
            out.push((c, rates.iter().sum::<f64>() / rates.len() as f64));
        }
    }
    out
}

/// A forward pass in progress: bound parameters plus per-layer VSN state.
pub struct Session<'a> {
    model: &'a VsGnoModel,
    ctx: &'a OperatorContext,
    params: BoundParams,
    layout: Vec<VsnSpec>,
    vsns: Vec<BoundVsn>,
    states: Vec<VsnState>,
}

impl<'a> Session<'a> {
    pub fn params(&self) -> &BoundParams {
        &self.params
    }

    pub fn layout(&self) -> &[VsnSpec] {
        &self.layout
    }

    pub fn states(&self) -> &[VsnState] {
        &self.states
    }

    /// Clears membranes and counters.
    pub fn reset_states(&mut self) {
        self.states = vec![VsnState::new(); self.layout.len()];
    }

    fn vsn_index(&self, name: &str) -> Result<usize> {
        self.layout
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::WrongMode("a configuration containing this layer"))
    }

    /// Applies the named spiking layer, or its plain activation in bypass.
    pub fn vsn(&mut self, tape: &mut Tape, name: &str, z: Var) -> Result<Var> {
        let i = self.vsn_index(name)?;
        if self.model.config.spiking == Spiking::Bypass {
            return self.layout[i].activation.apply(tape, z);
        }
        vsn_forward(tape, &self.vsns[i], z, &mut self.states[i])
    }

    /// `x W + b` (bias broadcast over rows).
    pub fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let y = tape.matmul(x, self.params.var(&format!("{name}.weight"))?)?;
        let bias_name = format!("{name}.bias");
        if !self.model.params.contains(&bias_name) {
            return Ok(y);
        }
        let (n, _) = tape.value(y).dims2()?;
        let b = tape.broadcast_row(self.params.var(&bias_name)?, n)?;
        tape.add(y, b)
    }

    /// Embedding `M(u)` as a `[1, embed_dim]` row.
    pub fn embed_input(&mut self, tape: &mut Tape, input: Var) -> Result<Var> {
        let (r, q) = tape.value(input).dims2()?;
        if r != 1 || q != self.model.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input of shape [{r}, {q}], expected [1, {}]",
                self.model.config.input_dim
            )));
        }
        let h = self.linear(tape, input, "embed.w1")?;
        let h = self.vsn(tape, "embed.vsn", h)?;
        self.linear(tape, h, "embed.w2")
    }

    /// `[coords | embedding]` for every node.
    pub fn node_features(&self, tape: &mut Tape, coords: Var, embedding: Var) -> Result<Var> {
        let e = tape.broadcast_row(embedding, self.ctx.n())?;
        tape.concat_columns(coords, e)
    }

    pub fn lift(&mut self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = self.linear(tape, features, "lift.w1")?;
        let h = self.vsn(tape, "lift.vsn1", h)?;
        let h = self.linear(tape, h, "lift.w2")?;
        self.vsn(tape, "lift.vsn2", h)
    }

    /// `VSN(Q_m (K x_1 Q_m^T v) + w(v))`
    pub fn spectral_block(&mut self, tape: &mut Tape, layer: usize, v: Var) -> Result<Var> {
        if self.ctx.basis().m() != self.model.config.modes {
            return Err(Error::ShapeMismatch("basis mode count differs from the model".into()));
        }
        let coeffs = tape.const_matmul(&self.ctx.q, true, v)?;
        let kernel = self.params.var(&format!("layer{layer}.kernel"))?;
        let mixed = tape.mode1_kernel(kernel, coeffs)?;
        let global = tape.const_matmul(&self.ctx.q, false, mixed)?;
        let skip = self.linear(tape, v, &format!("layer{layer}.w"))?;
        let z = tape.add(global, skip)?;
        self.vsn(tape, &format!("layer{layer}.spectral.vsn"), z)
    }

    /// `VSN2(gate * A . VSN1(v W))`
    pub fn spatial_block(&mut self, tape: &mut Tape, layer: usize, v: Var) -> Result<Var> {
        if self.model.config.mode != OperatorMode::Full {
            return Err(Error::WrongMode("full"));
        }
        let h = self.linear(tape, v, &format!("layer{layer}.spatial"))?;
        let h = self.vsn(tape, &format!("layer{layer}.spatial.vsn1"), h)?;
        let gate = self.params.var(&format!("layer{layer}.gate"))?;
        let agg = tape.sparse_gated_agg(&self.ctx.adjacency, gate, h)?;
        self.vsn(tape, &format!("layer{layer}.spatial.vsn2"), agg)
    }

    /// `VSN_f(f([spatial | spectral]) + v_prev)`
    pub fn layer_combine(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        spatial: Var,
        spectral: Var,
        prev: Var,
    ) -> Result<Var> {
        if self.model.config.mode != OperatorMode::Full {
            return Err(Error::WrongMode("full"));
        }
        let cat = tape.concat_columns(spatial, spectral)?;
        let mixed = self.linear(tape, cat, &format!("layer{layer}.f"))?;
        let z = tape.add(mixed, prev)?;
        self.vsn(tape, &format!("layer{layer}.combine.vsn"), z)
    }

    /// One spike step from node features to the first downlift output.
    pub fn step(&mut self, tape: &mut Tape, input: Var, coords: Var) -> Result<Var> {
        let e = self.embed_input(tape, input)?;
        let x = self.node_features(tape, coords, e)?;
        let mut v = self.lift(tape, x)?;
        for l in 0..self.model.config.layers {
            let spectral = self.spectral_block(tape, l, v)?;
            v = match self.model.config.mode {
                OperatorMode::SpectralOnly => spectral,
                OperatorMode::Full => {
                    let spatial = self.spatial_block(tape, l, v)?;
                    self.layer_combine(tape, l, spatial, spectral, v)?
                }
            };
        }
        let h = self.linear(tape, v, "down.w1")?;
        self.vsn(tape, "down.vsn", h)
    }

    /// Full `T`-step forward for one (normalised) input vector.
    pub fn forward(&mut self, tape: &mut Tape, input: &[f64]) -> Result<ForwardOutput> {
        let cfg = &self.model.config;
        if input.len() != cfg.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input of length {}, expected {}",
                input.len(),
                cfg.input_dim
            )));
        }
        let steps = cfg.spike_steps;
        let u = tape.constant(Tensor::new(vec![1, input.len()], input.to_vec())?)?;
        let coords = tape.constant(self.ctx.coords.clone())?;
        let mut finals = Vec::with_capacity(steps);
        for _ in 0..steps {
            finals.push(self.step(tape, u, coords)?);
        }
        let mean = if finals.len() == 1 {
            finals[0]
        } else {
            tape.mean_over(&finals)?
        };
        let output = self.linear(tape, mean, "down.w2")?;
        let mut layers = Vec::new();
        if cfg.spiking == Spiking::On {
            for (spec, state) in self.layout.iter().zip(&self.states) {
                layers.push(LayerSpikes {
                    name: spec.name.clone(),
                    component: spec.component,
                    spikes: state.spike_count(),
                    opportunities: state.opportunity_count(),
                    rate: state.rate_var(tape)?,
                });
            }
        }
        Ok(ForwardOutput { output, layers })
    }
}

#[cfg(test)]
mod tests;
