//! Hierarchical predictive stack: a tower of recurrent cells in which each
//! layer predicts its input, propagates only the prediction error upward,
//! and receives top-down context from the layer above.
//!
//! One time step runs in two sweeps. Top-down, each cell consumes its
//! previous-step error and the upsampled hidden state from above, then emits
//! a prediction Â_l through a convolution (rectified; the pixel layer
//! saturates to [0,1], which subsumes the rectification). Bottom-up, the
//! error e_l stacks the rectified halves [relu(Â−A), relu(A−Â)], and a
//! strided reduction (conv + relu + 2×2 maxpool) forms the next layer's
//! target A_{l+1}.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BuiltTape, NodeId, Tape};
use crate::cells::{
    self, xavier_kernel, CellDims, CellParamNodes, CellParams, CellState, ModelId, ModelSpec,
    PeepholeMode,
};
use crate::error::{Error, Result};
use crate::tensor::{self, Activation, ImageTensor, KernelStack};

/// Which per-layer error statistic the training loss averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean of the rectified error channels.
    EMean,
    /// Mean of their squares.
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::EMean => "e_mean",
            LossKind::Mse => "mse",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e_mean" => Ok(LossKind::EMean),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::config(format!("unknown loss '{other}' (expected e_mean or mse)"))),
        }
    }
}

/// Parse a gate activation name (only sigmoid and hard_sig are legal gates).
pub fn parse_gate_activation(s: &str) -> Result<Activation> {
    match s {
        "sigmoid" => Ok(Activation::Sigmoid),
        "hard_sig" => Ok(Activation::HardSig),
        other => Err(Error::config(format!(
            "unknown gate activation '{other}' (expected sigmoid or hard_sig)"
        ))),
    }
}

/// Full architectural description of a stack instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub model: ModelId,
    /// Frame height (layer 0).
    pub height: usize,
    /// Frame width (layer 0).
    pub width: usize,
    /// Per-layer target channels; entry 0 is the frame channel count.
    pub a_channels: Vec<usize>,
    /// Per-layer hidden/cell channels.
    pub r_channels: Vec<usize>,
    /// Convolution kernel side (odd).
    pub kernel_size: usize,
    pub gate_activation: Activation,
    /// Use the elementwise peephole in place of the stacked-conv one.
    pub elementwise_peephole: bool,
    /// λ_l: per-layer loss weights.
    pub layer_weights: Vec<f64>,
    pub loss: LossKind,
    /// w_0: weight of the first step's error in the loss (later steps share
    /// 1/(T−1) each).
    pub first_step_weight: f64,
}

impl StackConfig {
    /// A small default: weight only the pixel layer, hard-sigmoid gates,
    /// 3×3 kernels.
    pub fn new(
        model: ModelId,
        height: usize,
        width: usize,
        a_channels: Vec<usize>,
        r_channels: Vec<usize>,
    ) -> StackConfig {
        let levels = a_channels.len();
        let mut layer_weights = vec![0.0; levels];
        if levels > 0 {
            layer_weights[0] = 1.0;
        }
        StackConfig {
            model,
            height,
            width,
            a_channels,
            r_channels,
            kernel_size: 3,
            gate_activation: Activation::HardSig,
            elementwise_peephole: false,
            layer_weights,
            loss: LossKind::EMean,
            first_step_weight: 0.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.a_channels.len()
    }

    /// The cell variant actually run (peephole mode adjusted by the
    /// elementwise flag).
    pub fn cell_spec(&self) -> ModelSpec {
        let spec = cells::model_spec(self.model);
        if self.elementwise_peephole {
            spec.with_elementwise_peephole()
        } else {
            spec
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::config("stack needs at least one layer"));
        }
        if self.r_channels.len() != levels || self.layer_weights.len() != levels {
            return Err(Error::config(format!(
                "layer lists disagree: {} target channels, {} hidden channels, {} loss weights",
                levels,
                self.r_channels.len(),
                self.layer_weights.len()
            )));
        }
        if self.a_channels.iter().chain(&self.r_channels).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(format!("kernel size {} is not odd", self.kernel_size)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("frame dimensions must be positive"));
        }
        let div = 1usize << (levels - 1);
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::config(format!(
                "{}x{} frames cannot be pooled through {} layers (need divisibility by {div})",
                self.height, self.width, levels
            )));
        }
        if !matches!(self.gate_activation, Activation::Sigmoid | Activation::HardSig) {
            return Err(Error::config(format!(
                "gate activation must be sigmoid or hard_sig, got {}",
                self.gate_activation.name()
            )));
        }
        if !self.first_step_weight.is_finite()
            || self.layer_weights.iter().any(|w| !w.is_finite())
        {
            return Err(Error::config("loss weights must be finite"));
        }
        Ok(())
    }

    /// Per-layer geometry derived from the config.
    pub fn plans(&self) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        let levels = self.levels();
        Ok((0..levels)
            .map(|l| {
                let gamma = 2 * self.a_channels[l]
                    + if l + 1 < levels { self.r_channels[l + 1] } else { 0 };
                LayerPlan {
                    index: l,
                    height: self.height >> l,
                    width: self.width >> l,
                    a_channels: self.a_channels[l],
                    r_channels: self.r_channels[l],
                    gamma,
                    m: self.kernel_size,
                    has_upper: l + 1 < levels,
                }
            })
            .collect())
    }

    /// Serialize as `key=value` lines (round-trips through [`StackConfig::from_kv_text`]).
    pub fn to_kv_text(&self) -> String {
        fn join_usize(v: &[usize]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        fn join_f64(v: &[f64]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        format!(
            "model={}\nheight={}\nwidth={}\na_channels={}\nr_channels={}\nkernel_size={}\n\
             gate_activation={}\nelementwise_peephole={}\nlayer_weights={}\nloss={}\nfirst_step_weight={}\n",
            self.model,
            self.height,
            self.width,
            join_usize(&self.a_channels),
            join_usize(&self.r_channels),
            self.kernel_size,
            self.gate_activation.name(),
            self.elementwise_peephole,
            join_f64(&self.layer_weights),
            self.loss.name(),
            self.first_step_weight,
        )
    }

    /// Parse the `key=value` form produced by [`StackConfig::to_kv_text`].
    pub fn from_kv_text(text: &str) -> Result<StackConfig> {
        let mut model = None;
        let mut height = None;
        let mut width = None;
        let mut a_channels = None;
        let mut r_channels = None;
        let mut kernel_size = None;
        let mut gate_activation = None;
        let mut elementwise = None;
        let mut layer_weights = None;
        let mut loss = None;
        let mut first_step_weight = None;

        fn parse_list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
            v.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<T>()
                        .map_err(|_| Error::config(format!("bad value '{p}' in {key}")))
                })
                .collect()
        }
        fn parse_one<T: FromStr>(v: &str, key: &str) -> Result<T> {
            v.trim().parse::<T>().map_err(|_| Error::config(format!("bad value '{v}' for {key}")))
        }

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model" => model = Some(value.parse::<ModelId>()?),
                "height" => height = Some(parse_one::<usize>(value, key)?),
                "width" => width = Some(parse_one::<usize>(value, key)?),
                "a_channels" => a_channels = Some(parse_list::<usize>(value, key)?),
                "r_channels" => r_channels = Some(parse_list::<usize>(value, key)?),
                "kernel_size" => kernel_size = Some(parse_one::<usize>(value, key)?),
                "gate_activation" => gate_activation = Some(parse_gate_activation(value)?),
                "elementwise_peephole" => elementwise = Some(parse_one::<bool>(value, key)?),
                "layer_weights" => layer_weights = Some(parse_list::<f64>(value, key)?),
                "loss" => loss = Some(value.parse::<LossKind>()?),
                "first_step_weight" => first_step_weight = Some(parse_one::<f64>(value, key)?),
                other => return Err(Error::config(format!("unknown config key '{other}'"))),
            }
        }

        let missing = |k: &str| Error::config(format!("missing config key '{k}'"));
        let config = StackConfig {
            model: model.ok_or_else(|| missing("model"))?,
            height: height.ok_or_else(|| missing("height"))?,
            width: width.ok_or_else(|| missing("width"))?,
            a_channels: a_channels.ok_or_else(|| missing("a_channels"))?,
            r_channels: r_channels.ok_or_else(|| missing("r_channels"))?,
            kernel_size: kernel_size.ok_or_else(|| missing("kernel_size"))?,
            gate_activation: gate_activation.ok_or_else(|| missing("gate_activation"))?,
            elementwise_peephole: elementwise.ok_or_else(|| missing("elementwise_peephole"))?,
            layer_weights: layer_weights.ok_or_else(|| missing("layer_weights"))?,
            loss: loss.ok_or_else(|| missing("loss"))?,
            first_step_weight: first_step_weight.ok_or_else(|| missing("first_step_weight"))?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Geometry of one layer: spatial size, channel widths, and the composed
/// input channel count γ (doubled targets plus top-down context).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub a_channels: usize,
    pub r_channels: usize,
    /// Cell input channels: 2·a + (upper hidden channels if present).
    pub gamma: usize,
    pub m: usize,
    pub has_upper: bool,
}

impl LayerPlan {
    pub fn cell_dims(&self) -> CellDims {
        CellDims::new(self.height, self.width, self.gamma, self.r_channels, self.m)
    }

    /// Channels of this layer's error tensor.
    pub fn error_channels(&self) -> usize {
        2 * self.a_channels
    }
}

/// Rectified split error: channels are [relu(prediction − target),
/// relu(target − prediction)].
pub fn error_module(target: &ImageTensor, prediction: &ImageTensor) -> Result<ImageTensor> {
    let over = tensor::activation(&tensor::ew_sub(prediction, target)?, Activation::Relu);
    let under = tensor::activation(&tensor::ew_sub(target, prediction)?, Activation::Relu);
    tensor::stack_channels(&[&over, &under])
}

/// Trained parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub cell: CellParams,
    /// Prediction head: hidden state → Â (in=r, out=a).
    pub a_hat: KernelStack,
    /// Error reduction toward the next layer (in=2a, out=a_next); absent at
    /// the top.
    pub downsample: Option<KernelStack>,
}

/// A read-only view of one named parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum ParamView<'a> {
    Kernel(&'a KernelStack),
    Elementwise(&'a ImageTensor),
}

impl ParamView<'_> {
    pub fn flat_len(&self) -> usize {
        match self {
            ParamView::Kernel(k) => k.param_count(),
            ParamView::Elementwise(t) => t.len(),
        }
    }
}

/// The full model: configuration, derived layer plans, resolved cell
/// variant, and per-layer parameters.
#[derive(Debug, Clone)]
pub struct Stack {
    config: StackConfig,
    plans: Vec<LayerPlan>,
    spec: ModelSpec,
    pub layers: Vec<LayerParams>,
}

/// Recurrent state carried between steps: per-layer cell state plus the
/// previous step's error tensors (zero at the start, standing in for errors
/// of all-zero previous predictions).
#[derive(Debug, Clone)]
pub struct StackState {
    pub cells: Vec<CellState>,
    pub prev_e: Vec<ImageTensor>,
}

impl StackState {
    pub fn zeros(plans: &[LayerPlan]) -> StackState {
        StackState {
            cells: plans.iter().map(|p| CellState::zeros(&p.cell_dims())).collect(),
            prev_e: plans
                .iter()
                .map(|p| ImageTensor::zeros(p.height, p.width, p.error_channels()))
                .collect(),
        }
    }
}

/// Per-step record kept by [`Stack::rollout`].
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Mean of each layer's error tensor (all layers, regardless of λ).
    pub e_means: Vec<f64>,
    /// The pixel-layer prediction made this step.
    pub a_hat0: ImageTensor,
}

struct TapedRollout {
    tape: Tape,
    loss_node: NodeId,
    params: Vec<(String, NodeId)>,
}

/// Result of unrolling the stack over a frame sequence.
pub struct Rollout {
    pub loss: f64,
    pub steps: Vec<StepTrace>,
    taped: Option<TapedRollout>,
}

impl Rollout {
    /// Loss gradients for every trained parameter, flattened (kernel =
    /// weights then bias), in canonical parameter order. Only available when
    /// the rollout was recorded with `taped = true`; reusable.
    pub fn backward(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let taped = self
            .taped
            .as_ref()
            .ok_or_else(|| Error::usage("rollout was not taped; gradients unavailable"))?;
        let grads = taped.tape.backward(taped.loss_node)?;
        taped
            .params
            .iter()
            .map(|(name, id)| {
                let payload = grads.get(*id).ok_or_else(|| {
                    Error::verification(format!("no adjoint recorded for parameter {name}"))
                })?;
                Ok((name.clone(), payload.flat()))
            })
            .collect()
    }

    /// Hand the recorded computation to the finite-difference verifier.
    pub fn into_built_tape(self) -> Option<BuiltTape> {
        self.taped.map(|t| BuiltTape { tape: t.tape, loss: t.loss_node, params: t.params })
    }
}

struct LayerNodes {
    cell: CellParamNodes,
    a_hat: NodeId,
    downsample: Option<NodeId>,
}

struct StackNodes {
    layers: Vec<LayerNodes>,
    flat: Vec<(String, NodeId)>,
}

struct StateNodes {
    cells: Vec<(NodeId, NodeId)>,
    prev_e: Vec<NodeId>,
}

impl Stack {
    /// Build a stack with seeded uniform Xavier initialization (biases zero).
    pub fn init(config: StackConfig, seed: u64) -> Result<Stack> {
        let plans = config.plans()?;
        let spec = config.cell_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = plans
            .iter()
            .map(|plan| {
                let dims = plan.cell_dims();
                let n = dims.n();
                let gates = spec
                    .gates
                    .iter()
                    .map(|&role| {
                        (role, xavier_kernel(&mut rng, plan.m, dims.gate_stack_channels(spec.peephole), n))
                    })
                    .collect();
                let update = xavier_kernel(&mut rng, plan.m, dims.update_stack_channels(), n);
                let peephole = if spec.peephole == PeepholeMode::Elementwise {
                    let bound = (3.0 / n as f64).sqrt();
                    spec.gates
                        .iter()
                        .map(|&role| {
                            let mut t = ImageTensor::zeros(plan.height, plan.width, n);
                            for v in t.data_mut() {
                                *v = rng.gen_range(-bound..bound);
                            }
                            (role, t)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let a_hat = xavier_kernel(&mut rng, plan.m, plan.r_channels, plan.a_channels);
                let downsample = if plan.has_upper {
                    let next_a = config.a_channels[plan.index + 1];
                    Some(xavier_kernel(&mut rng, plan.m, plan.error_channels(), next_a))
                } else {
                    None
                };
                LayerParams { cell: CellParams { gates, update, peephole }, a_hat, downsample }
            })
            .collect();
        Ok(Stack { config, plans, spec, layers })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn plans(&self) -> &[LayerPlan] {
        &self.plans
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Named views of every parameter, in canonical order: per layer, the
    /// present gates, the update, any elementwise peephole tensors, the
    /// prediction head, then the downsampler.
    pub fn named_param_views(&self) -> Vec<(String, ParamView<'_>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (role, k) in &layer.cell.gates {
                out.push((format!("{}_{l}", role.letter()), ParamView::Kernel(k)));
            }
            out.push((format!("g_{l}"), ParamView::Kernel(&layer.cell.update)));
            for (role, t) in &layer.cell.peephole {
                out.push((format!("peep_{}_{l}", role.letter()), ParamView::Elementwise(t)));
            }
            out.push((format!("a_hat_{l}"), ParamView::Kernel(&layer.a_hat)));
            if let Some(ds) = &layer.downsample {
                out.push((format!("downsample_{l}"), ParamView::Kernel(ds)));
            }
        }
        out
    }

    /// Total trained scalar count.
    pub fn param_total(&self) -> usize {
        self.named_param_views().iter().map(|(_, v)| v.flat_len()).sum()
    }

    /// Flatten every parameter (kernel = weights then bias) in canonical order.
    pub fn flatten(&self) -> Vec<(String, Vec<f64>)> {
        self.named_param_views()
            .into_iter()
            .map(|(name, view)| {
                let flat = match view {
                    ParamView::Kernel(k) => {
                        let mut v = k.weights.clone();
                        v.extend_from_slice(&k.bias);
                        v
                    }
                    ParamView::Elementwise(t) => t.data().to_vec(),
                };
                (name, flat)
            })
            .collect()
    }

    /// Write one named parameter back from its flattened form.
    pub fn set_flat_param(&mut self, name: &str, flat: &[f64]) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (role, k) in layer.cell.gates.iter_mut() {
                if name == format!("{}_{l}", role.letter()) {
                    return write_kernel(name, k, flat);
                }
            }
            if name == format!("g_{l}") {
                return write_kernel(name, &mut layer.cell.update, flat);
            }
            for (role, t) in layer.cell.peephole.iter_mut() {
                if name == format!("peep_{}_{l}", role.letter()) {
                    if flat.len() != t.len() {
                        return Err(Error::config(format!(
                            "parameter {name} expects {} values, got {}",
                            t.len(),
                            flat.len()
                        )));
                    }
                    t.data_mut().copy_from_slice(flat);
                    return Ok(());
                }
            }
            if name == format!("a_hat_{l}") {
                return write_kernel(name, &mut layer.a_hat, flat);
            }
            if let Some(ds) = layer.downsample.as_mut() {
                if name == format!("downsample_{l}") {
                    return write_kernel(name, ds, flat);
                }
            }
        }
        Err(Error::config(format!("no parameter named '{name}' in this stack")))
    }

    /// Replace all parameters from flattened form (names and lengths must
    /// match [`Stack::flatten`] exactly, in order).
    pub fn unflatten_into(&mut self, flats: &[(String, Vec<f64>)]) -> Result<()> {
        let expected: Vec<(String, usize)> = self
            .named_param_views()
            .iter()
            .map(|(n, v)| (n.clone(), v.flat_len()))
            .collect();
        if flats.len() != expected.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                expected.len(),
                flats.len()
            )));
        }
        for ((name, flat), (want_name, want_len)) in flats.iter().zip(&expected) {
            if name != want_name {
                return Err(Error::config(format!(
                    "parameter order mismatch: expected {want_name}, got {name}"
                )));
            }
            if flat.len() != *want_len {
                return Err(Error::config(format!(
                    "parameter {name} expects {want_len} values, got {}",
                    flat.len()
                )));
            }
        }
        for (name, flat) in flats {
            self.set_flat_param(name, flat)?;
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> StackNodes {
        let mut flat = Vec::new();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let cell = layer.cell.register(tape, trainable);
                for ((role, _), (_, id)) in layer.cell.gates.iter().zip(&cell.gates) {
                    flat.push((format!("{}_{l}", role.letter()), *id));
                }
                flat.push((format!("g_{l}"), cell.update));
                for ((role, _), (_, id)) in layer.cell.peephole.iter().zip(&cell.peephole) {
                    flat.push((format!("peep_{}_{l}", role.letter()), *id));
                }
                let a_hat = tape.kernel_leaf(layer.a_hat.clone(), trainable);
                flat.push((format!("a_hat_{l}"), a_hat));
                let downsample = layer.downsample.as_ref().map(|ds| {
                    let id = tape.kernel_leaf(ds.clone(), trainable);
                    flat.push((format!("downsample_{l}"), id));
                    id
                });
                LayerNodes { cell, a_hat, downsample }
            })
            .collect();
        StackNodes { layers, flat }
    }

    fn state_nodes(&self, tape: &mut Tape, state: &StackState) -> StateNodes {
        StateNodes {
            cells: state
                .cells
                .iter()
                .map(|cs| {
                    (tape.image_leaf(cs.h.clone(), false), tape.image_leaf(cs.c.clone(), false))
                })
                .collect(),
            prev_e: state.prev_e.iter().map(|e| tape.image_leaf(e.clone(), false)).collect(),
        }
    }

    fn check_frame(&self, frame: &ImageTensor) -> Result<()> {
        let want = (self.config.height, self.config.width, self.config.a_channels[0]);
        if frame.shape() != want {
            return Err(Error::config(format!(
                "frame shape {:?} does not match configured {:?}",
                frame.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Record one step. Returns the new state nodes, the pixel-layer
    /// prediction node, and each layer's error node.
    fn step_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &StackNodes,
        state: &StateNodes,
        frame: NodeId,
    ) -> Result<(StateNodes, NodeId, Vec<NodeId>)> {
        let levels = self.plans.len();
        let mut new_cells: Vec<Option<(NodeId, NodeId)>> = vec![None; levels];
        for l in (0..levels).rev() {
            let mut parts = vec![state.prev_e[l]];
            if l + 1 < levels {
                let (h_above, _) = new_cells[l + 1].expect("upper layer updated first");
                parts.push(tape.upsample2(h_above));
            }
            let x = tape.stack_channels(&parts)?;
            let (h, c) = cells::run_cell(
                tape,
                &self.spec,
                &nodes.layers[l].cell,
                x,
                state.cells[l].0,
                state.cells[l].1,
                self.config.gate_activation,
            )?;
            new_cells[l] = Some((h, c));
        }

        let mut predictions = Vec::with_capacity(levels);
        for l in 0..levels {
            let (h, _) = new_cells[l].expect("updated");
            let net = tape.conv_same(h, nodes.layers[l].a_hat)?;
            // The pixel layer clamps to [0,1]; that already zeroes negatives,
            // so the clamp alone equals rectify-then-clamp exactly
            // (derivatives included).
            let pred = if l == 0 {
                tape.activation(net, Activation::Sat01)
            } else {
                tape.activation(net, Activation::Relu)
            };
            predictions.push(pred);
        }

        let mut e_nodes = Vec::with_capacity(levels);
        let mut target = frame;
        for l in 0..levels {
            let over = tape.ew_sub(predictions[l], target)?;
            let under = tape.ew_sub(target, predictions[l])?;
            let over = tape.activation(over, Activation::Relu);
            let under = tape.activation(under, Activation::Relu);
            let e = tape.stack_channels(&[over, under])?;
            e_nodes.push(e);
            if l + 1 < levels {
                let reduced = tape.conv_same(e, nodes.layers[l].downsample.expect("not top"))?;
                let rectified = tape.activation(reduced, Activation::Relu);
                target = tape.maxpool2(rectified)?;
            }
        }

        let next = StateNodes {
            cells: new_cells.into_iter().map(|c| c.expect("updated")).collect(),
            prev_e: e_nodes.clone(),
        };
        Ok((next, predictions[0], e_nodes))
    }

    /// One pure step: new state, the pixel prediction, and per-layer error
    /// means.
    pub fn step(
        &self,
        state: &StackState,
        frame: &ImageTensor,
    ) -> Result<(StackState, ImageTensor, Vec<f64>)> {
        self.check_frame(frame)?;
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, false);
        let state_nodes = self.state_nodes(&mut tape, state);
        let f = tape.image_leaf(frame.clone(), false);
        let (next, a_hat0, e_nodes) = self.step_on_tape(&mut tape, &nodes, &state_nodes, f)?;
        let new_state = StackState {
            cells: next
                .cells
                .iter()
                .map(|&(h, c)| CellState { h: tape.image(h).clone(), c: tape.image(c).clone() })
                .collect(),
            prev_e: next.prev_e.iter().map(|&e| tape.image(e).clone()).collect(),
        };
        let e_means = e_nodes.iter().map(|&e| tensor::mean(tape.image(e))).collect();
        Ok((new_state, tape.image(a_hat0).clone(), e_means))
    }

    /// Unroll over `frames` from zero state. The loss is
    /// Σ_t w_t Σ_l λ_l · term(e_l^(t)) with w_0 = first_step_weight and
    /// w_{t>0} = 1/(T−1). With `taped`, gradients become available on the
    /// returned [`Rollout`].
    pub fn rollout(&self, frames: &[ImageTensor], taped: bool) -> Result<Rollout> {
        if frames.is_empty() {
            return Err(Error::usage("rollout needs at least one frame"));
        }
        for f in frames {
            self.check_frame(f)?;
        }
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, taped);
        let mut state = {
            let zero = StackState::zeros(&self.plans);
            self.state_nodes(&mut tape, &zero)
        };
        let t_count = frames.len();
        let mut loss_node: Option<NodeId> = None;
        let mut steps = Vec::with_capacity(t_count);
        for (t, frame) in frames.iter().enumerate() {
            let f = tape.image_leaf(frame.clone(), false);
            let (next, a_hat0, e_nodes) = self.step_on_tape(&mut tape, &nodes, &state, f)?;
            let w = if t == 0 {
                self.config.first_step_weight
            } else {
                1.0 / (t_count as f64 - 1.0)
            };
            if w != 0.0 {
                for (l, &e) in e_nodes.iter().enumerate() {
                    let lambda = self.config.layer_weights[l];
                    if lambda != 0.0 {
                        let term = match self.config.loss {
                            LossKind::EMean => tape.mean(e),
                            LossKind::Mse => {
                                let sq = tape.ew_mul(e, e)?;
                                tape.mean(sq)
                            }
                        };
                        let scaled = tape.scale(term, w * lambda);
                        loss_node = Some(match loss_node {
                            Some(acc) => tape.ew_add(acc, scaled)?,
                            None => scaled,
                        });
                    }
                }
            }
            steps.push(StepTrace {
                e_means: e_nodes.iter().map(|&e| tensor::mean(tape.image(e))).collect(),
                a_hat0: tape.image(a_hat0).clone(),
            });
            state = next;
        }
        let loss_node =
            loss_node.unwrap_or_else(|| tape.image_leaf(ImageTensor::zeros(1, 1, 1), false));
        let loss = tape.scalar(loss_node)?;
        let taped = taped.then_some(TapedRollout { tape, loss_node, params: nodes.flat });
        Ok(Rollout { loss, steps, taped })
    }

    /// Run the seed frames, then keep stepping `k` more times feeding each
    /// step's pixel prediction back in as the next input frame. Returns the
    /// predictions made during the k feedback steps.
    pub fn predict_future(&self, seeds: &[ImageTensor], k: usize) -> Result<Vec<ImageTensor>> {
        if seeds.is_empty() {
            return Err(Error::usage("predict_future needs at least one seed frame"));
        }
        let mut state = StackState::zeros(&self.plans);
        let mut last_pred = None;
        for frame in seeds {
            let (next, pred, _) = self.step(&state, frame)?;
            state = next;
            last_pred = Some(pred);
        }
        let mut fed = last_pred.expect("at least one seed step ran");
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let (next, pred, _) = self.step(&state, &fed)?;
            state = next;
            out.push(pred.clone());
            fed = pred;
        }
        Ok(out)
    }
}

fn write_kernel(name: &str, k: &mut KernelStack, flat: &[f64]) -> Result<()> {
    let (nw, nb) = (k.weights.len(), k.bias.len());
    if flat.len() != nw + nb {
        return Err(Error::config(format!(
            "parameter {name} expects {} values, got {}",
            nw + nb,
            flat.len()
        )));
    }
    k.weights.copy_from_slice(&flat[..nw]);
    k.bias.copy_from_slice(&flat[nw..]);
    Ok(())
}

/// One parameter tensor's bookkeeping in an audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRow {
    pub layer: usize,
    pub name: String,
    /// (m, m, in, out) for kernels; (height, width, channels, 0) for
    /// elementwise tensors.
    pub shape: (usize, usize, usize, usize),
    pub weights: usize,
    pub biases: usize,
}

impl AuditRow {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

/// Full parameter audit of a stack architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackAudit {
    pub rows: Vec<AuditRow>,
    pub total: usize,
}

impl StackAudit {
    pub fn layer_total(&self, layer: usize) -> usize {
        self.rows.iter().filter(|r| r.layer == layer).map(AuditRow::total).sum()
    }
}

/// Count every trainable tensor of the architecture without materializing
/// weights.
pub fn audit_stack(config: &StackConfig) -> Result<StackAudit> {
    let plans = config.plans()?;
    let spec = config.cell_spec();
    let mut rows = Vec::new();
    for plan in &plans {
        let l = plan.index;
        let dims = plan.cell_dims();
        let n = dims.n();
        let m = plan.m;
        let kernel_row = |name: String, cin: usize, cout: usize| AuditRow {
            layer: l,
            name,
            shape: (m, m, cin, cout),
            weights: m * m * cin * cout,
            biases: cout,
        };
        for role in &spec.gates {
            rows.push(kernel_row(
                format!("{}_{l}", role.letter()),
                dims.gate_stack_channels(spec.peephole),
                n,
            ));
        }
        rows.push(kernel_row(format!("g_{l}"), dims.update_stack_channels(), n));
        if spec.peephole == PeepholeMode::Elementwise {
            for role in &spec.gates {
                rows.push(AuditRow {
                    layer: l,
                    name: format!("peep_{}_{l}", role.letter()),
                    shape: (plan.height, plan.width, n, 0),
                    weights: plan.height * plan.width * n,
                    biases: 0,
                });
            }
        }
        rows.push(kernel_row(format!("a_hat_{l}"), plan.r_channels, plan.a_channels));
        if plan.has_upper {
            rows.push(kernel_row(
                format!("downsample_{l}"),
                plan.error_channels(),
                config.a_channels[l + 1],
            ));
        }
    }
    let total = rows.iter().map(AuditRow::total).sum();
    Ok(StackAudit { rows, total })
}

/// Named benchmark architectures used for parameter-count comparisons.
/// A `-paper` suffix is accepted on either name.
pub fn preset_config(preset: &str, model: ModelId) -> Option<StackConfig> {
    match preset.strip_suffix("-paper").unwrap_or(preset) {
        "mnist" => Some(StackConfig::new(
            model,
            64,
            64,
            vec![1, 48, 96, 192],
            vec![1, 48, 96, 192],
        )),
        "kitti" => Some(StackConfig::new(
            model,
            128,
            160,
            vec![3, 48, 96, 192],
            vec![3, 48, 96, 192],
        )),
        _ => None,
    }
}

/// Previously published whole-model parameter totals for the presets, where
/// available. Some published figures disagree with the architecture's own
/// arithmetic by a small constant; callers should surface both numbers
/// rather than hide the difference.
pub fn published_total(preset: &str, model: ModelId) -> Option<usize> {
    match (preset.strip_suffix("-paper").unwrap_or(preset), model) {
        ("mnist", ModelId::M1) => Some(6_909_834),
        ("mnist", ModelId::M8) => Some(8_216_229),
        ("mnist", ModelId::M9) => Some(4_316_251),
        ("mnist", ModelId::M15) => Some(3_880_786),
        ("mnist", ModelId::M18) => Some(4_316_235),
        ("kitti", ModelId::M1) => Some(6_915_948),
        ("kitti", ModelId::M18) => Some(4_320_273),
        _ => None,
    }
}
