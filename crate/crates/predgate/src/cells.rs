//! The gated convolutional cell zoo: twenty models (M1–M20) spanning every
//! subset of the forget/input/output gates, with and without peephole
//! connections, including the single-gate multi-function cells where one
//! trained gate plays several state-update roles at once.
//!
//! Well-known members: M1 is the peephole-free convolutional LSTM (cLSTM),
//! M8 the peepholed convLSTM, M15 the no-peephole reduced-gate cell
//! (np-rgcLSTM), and M18 the reduced-gate convolutional LSTM (rgcLSTM) whose
//! single gate drives all three roles through a stacked-conv peephole.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ImageTensor, KernelStack};

/// Identifier of one cell variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    M1, M2, M3, M4, M5, M6, M7, M8, M9, M10,
    M11, M12, M13, M14, M15, M16, M17, M18, M19, M20,
}

impl ModelId {
    pub fn all() -> [ModelId; 20] {
        use ModelId::*;
        [M1, M2, M3, M4, M5, M6, M7, M8, M9, M10, M11, M12, M13, M14, M15, M16, M17, M18, M19, M20]
    }

    /// 1-based index matching the model name.
    pub fn index(self) -> usize {
        ModelId::all().iter().position(|&m| m == self).expect("listed") + 1
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.index())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "rgclstm" => return Ok(ModelId::M18),
            "clstm" => return Ok(ModelId::M1),
            "convlstm" => return Ok(ModelId::M8),
            "np-rgclstm" => return Ok(ModelId::M15),
            _ => {}
        }
        if let Some(num) = lower.strip_prefix('m') {
            if let Ok(n) = num.parse::<usize>() {
                if (1..=20).contains(&n) {
                    return Ok(ModelId::all()[n - 1]);
                }
            }
        }
        Err(Error::usage(format!(
            "unknown model '{s}' (expected M1..M20 or rgcLSTM, cLSTM, convLSTM, np-rgcLSTM)"
        )))
    }
}

/// One of the three classic gate positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateRole {
    Forget,
    Input,
    Output,
}

impl GateRole {
    pub fn letter(self) -> char {
        match self {
            GateRole::Forget => 'f',
            GateRole::Input => 'i',
            GateRole::Output => 'o',
        }
    }
}

/// How the cell state feeds back into gate net inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeepholeMode {
    None,
    /// c is concatenated into the gate's convolved input stack.
    StackedConv,
    /// A per-element weight tensor multiplies c into the gate's net input.
    Elementwise,
}

impl PeepholeMode {
    pub fn name(self) -> &'static str {
        match self {
            PeepholeMode::None => "none",
            PeepholeMode::StackedConv => "stacked_conv",
            PeepholeMode::Elementwise => "elementwise",
        }
    }
}

/// What multiplies a given term of the state update: a named gate's
/// activation, or the constant all-ones tensor when the model lacks that gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleSource {
    Gate(GateRole),
    One,
}

impl ScaleSource {
    pub fn label(self) -> &'static str {
        match self {
            ScaleSource::Gate(GateRole::Forget) => "f",
            ScaleSource::Gate(GateRole::Input) => "i",
            ScaleSource::Gate(GateRole::Output) => "o",
            ScaleSource::One => "one",
        }
    }
}

/// Declarative description of one cell variant: which gates physically exist,
/// how the cell state peeks into them, and which gate (or constant one)
/// scales the retained state, the input update, and the output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub gates: Vec<GateRole>,
    pub peephole: PeepholeMode,
    /// Factor on c in the state update.
    pub cell_scale: ScaleSource,
    /// Factor on g in the state update.
    pub input_scale: ScaleSource,
    /// Factor on tanh(c_new) producing h.
    pub output_scale: ScaleSource,
}

impl ModelSpec {
    pub fn has_gate(&self, role: GateRole) -> bool {
        self.gates.contains(&role)
    }

    /// Swap a stacked-conv peephole for the elementwise variant (no-op for
    /// peephole-free models).
    pub fn with_elementwise_peephole(mut self) -> ModelSpec {
        if self.peephole == PeepholeMode::StackedConv {
            self.peephole = PeepholeMode::Elementwise;
        }
        self
    }

    /// Comma-joined present gates, e.g. "f,i,o".
    pub fn gates_label(&self) -> String {
        let letters: Vec<String> = self.gates.iter().map(|g| g.letter().to_string()).collect();
        letters.join(",")
    }

    /// Role bindings, e.g. "cell=f,input=f,output=f".
    pub fn roles_label(&self) -> String {
        format!(
            "cell={},input={},output={}",
            self.cell_scale.label(),
            self.input_scale.label(),
            self.output_scale.label()
        )
    }
}

fn spec(
    id: ModelId,
    gates: &[GateRole],
    peephole: PeepholeMode,
    cell_scale: ScaleSource,
    input_scale: ScaleSource,
    output_scale: ScaleSource,
) -> ModelSpec {
    ModelSpec { id, gates: gates.to_vec(), peephole, cell_scale, input_scale, output_scale }
}

/// The binding table for all twenty variants. M1–M7 enumerate gate subsets
/// without peepholes, M8–M14 repeat them with a peephole on every present
/// gate, M15–M17 are the single-gate multi-function cells, and M18–M20 add
/// the peephole to those. A role whose gate is absent scales by one.
pub fn model_spec(id: ModelId) -> ModelSpec {
    use GateRole::*;
    use ModelId::*;
    use PeepholeMode::{None as NoPp, StackedConv};
    use ScaleSource::{Gate, One};

    match id {
        M1 => spec(id, &[Forget, Input, Output], NoPp, Gate(Forget), Gate(Input), Gate(Output)),
        M2 => spec(id, &[Forget], NoPp, Gate(Forget), One, One),
        M3 => spec(id, &[Forget, Input], NoPp, Gate(Forget), Gate(Input), One),
        M4 => spec(id, &[Forget, Output], NoPp, Gate(Forget), One, Gate(Output)),
        M5 => spec(id, &[Input], NoPp, One, Gate(Input), One),
        M6 => spec(id, &[Input, Output], NoPp, One, Gate(Input), Gate(Output)),
        M7 => spec(id, &[Output], NoPp, One, One, Gate(Output)),
        M8 => spec(id, &[Forget, Input, Output], StackedConv, Gate(Forget), Gate(Input), Gate(Output)),
        M9 => spec(id, &[Forget], StackedConv, Gate(Forget), One, One),
        M10 => spec(id, &[Forget, Input], StackedConv, Gate(Forget), Gate(Input), One),
        M11 => spec(id, &[Forget, Output], StackedConv, Gate(Forget), One, Gate(Output)),
        M12 => spec(id, &[Input], StackedConv, One, Gate(Input), One),
        M13 => spec(id, &[Input, Output], StackedConv, One, Gate(Input), Gate(Output)),
        M14 => spec(id, &[Output], StackedConv, One, One, Gate(Output)),
        M15 => spec(id, &[Forget], NoPp, Gate(Forget), Gate(Forget), Gate(Forget)),
        M16 => spec(id, &[Forget], NoPp, Gate(Forget), Gate(Forget), One),
        M17 => spec(id, &[Forget], NoPp, Gate(Forget), One, Gate(Forget)),
        M18 => spec(id, &[Forget], StackedConv, Gate(Forget), Gate(Forget), Gate(Forget)),
        M19 => spec(id, &[Forget], StackedConv, Gate(Forget), Gate(Forget), One),
        M20 => spec(id, &[Forget], StackedConv, Gate(Forget), One, Gate(Forget)),
    }
}

/// Geometry of one cell instance. κ (the h/c channel count) equals the output
/// filter count n by construction, so elementwise products are well-formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellDims {
    pub height: usize,
    pub width: usize,
    /// Input-stack channels excluding h and c.
    pub gamma: usize,
    /// Channels of h and c; equals the output filter count n.
    pub kappa: usize,
    /// Kernel side.
    pub m: usize,
}

impl CellDims {
    pub fn new(height: usize, width: usize, gamma: usize, kappa: usize, m: usize) -> CellDims {
        CellDims { height, width, gamma, kappa, m }
    }

    /// Output filter count (constrained equal to κ).
    pub fn n(&self) -> usize {
        self.kappa
    }

    /// Channels entering a gate's convolution under `peephole`.
    pub fn gate_stack_channels(&self, peephole: PeepholeMode) -> usize {
        match peephole {
            PeepholeMode::StackedConv => self.gamma + 2 * self.kappa,
            PeepholeMode::None | PeepholeMode::Elementwise => self.gamma + self.kappa,
        }
    }

    /// Channels entering the update g's convolution (never includes c).
    pub fn update_stack_channels(&self) -> usize {
        self.gamma + self.kappa
    }
}

/// Trained parameters of one cell: one kernel stack per present gate, one for
/// the update g, and (in elementwise-peephole mode) one weight tensor per
/// present gate.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub gates: Vec<(GateRole, KernelStack)>,
    pub update: KernelStack,
    pub peephole: Vec<(GateRole, ImageTensor)>,
}

impl CellParams {
    /// Total scalar parameters (weights + biases + peephole elements).
    pub fn param_count(&self) -> usize {
        self.gates.iter().map(|(_, k)| k.param_count()).sum::<usize>()
            + self.update.param_count()
            + self.peephole.iter().map(|(_, t)| t.len()).sum::<usize>()
    }
}

/// Hidden and cell state of one cell instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: ImageTensor,
    pub c: ImageTensor,
}

impl CellState {
    pub fn zeros(dims: &CellDims) -> CellState {
        CellState {
            h: ImageTensor::zeros(dims.height, dims.width, dims.n()),
            c: ImageTensor::zeros(dims.height, dims.width, dims.n()),
        }
    }
}

/// Closed-form trainable-parameter count: per present gate
/// (m²·(γ+κ+[κ if stacked peephole]) + 1)·n, plus (m²·(γ+κ) + 1)·n for g,
/// plus H·W·n per present gate in elementwise-peephole mode.
pub fn count_params(spec: &ModelSpec, dims: &CellDims) -> usize {
    let m2 = dims.m * dims.m;
    let n = dims.n();
    let gate_kernel = (m2 * dims.gate_stack_channels(spec.peephole) + 1) * n;
    let ew = if spec.peephole == PeepholeMode::Elementwise {
        dims.height * dims.width * n
    } else {
        0
    };
    spec.gates.len() * (gate_kernel + ew) + (m2 * dims.update_stack_channels() + 1) * n
}

pub(crate) fn xavier_kernel(rng: &mut ChaCha8Rng, m: usize, cin: usize, cout: usize) -> KernelStack {
    let fan_in = (m * m * cin) as f64;
    let fan_out = (m * m * cout) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let weights = (0..m * m * cin * cout).map(|_| rng.gen_range(-bound..bound)).collect();
    KernelStack::new(m, cin, cout, weights, vec![0.0; cout]).expect("valid dims")
}

/// Seeded uniform Xavier initialization: weights in ±sqrt(6/(fan_in+fan_out))
/// per kernel, biases zero. Deterministic given the seed.
pub fn init_params(spec: &ModelSpec, dims: &CellDims, seed: u64) -> CellParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.n();
    let gates = spec
        .gates
        .iter()
        .map(|&role| (role, xavier_kernel(&mut rng, dims.m, dims.gate_stack_channels(spec.peephole), n)))
        .collect();
    let update = xavier_kernel(&mut rng, dims.m, dims.update_stack_channels(), n);
    let peephole = if spec.peephole == PeepholeMode::Elementwise {
        let bound = (3.0 / n as f64).sqrt();
        spec.gates
            .iter()
            .map(|&role| {
                (
                    role,
                    ImageTensor::from_fn(dims.height, dims.width, n, |_, _, _| {
                        rng.gen_range(-bound..bound)
                    }),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    CellParams { gates, update, peephole }
}

/// Tape node ids of one cell's registered parameters.
#[derive(Debug, Clone)]
pub struct CellParamNodes {
    pub gates: Vec<(GateRole, NodeId)>,
    pub update: NodeId,
    pub peephole: Vec<(GateRole, NodeId)>,
}

impl CellParams {
    /// Put every parameter on a tape, in canonical order (gates, update,
    /// peephole tensors).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> CellParamNodes {
        CellParamNodes {
            gates: self
                .gates
                .iter()
                .map(|(role, k)| (*role, tape.kernel_leaf(k.clone(), trainable)))
                .collect(),
            update: tape.kernel_leaf(self.update.clone(), trainable),
            peephole: self
                .peephole
                .iter()
                .map(|(role, t)| (*role, tape.image_leaf(t.clone(), trainable)))
                .collect(),
        }
    }
}

/// Record one cell step on a tape and return the (h_new, c_new) node ids.
///
/// For each present gate q: net_q = conv([x, h, (c)], K_q) (+ P_q ⊙ c in
/// elementwise mode), gate_q = G(net_q); g = tanh(conv([x, h], K_g));
/// c_new = cell_scale ⊙ c + input_scale ⊙ g; h_new = output_scale ⊙
/// tanh(c_new). The stacking order is always [x, h, c]; absent roles scale
/// by the all-ones tensor.
pub fn run_cell(
    tape: &mut Tape,
    spec: &ModelSpec,
    nodes: &CellParamNodes,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    gate_activation: Activation,
) -> Result<(NodeId, NodeId)> {
    if !matches!(gate_activation, Activation::Sigmoid | Activation::HardSig) {
        return Err(Error::usage(format!(
            "gate activation must be sigmoid or hard_sig, got {}",
            gate_activation.name()
        )));
    }

    let xh = tape.stack_channels(&[x, h])?;
    let xhc = if spec.peephole == PeepholeMode::StackedConv && !spec.gates.is_empty() {
        Some(tape.stack_channels(&[x, h, c])?)
    } else {
        None
    };

    let mut gate_values: Vec<(GateRole, NodeId)> = Vec::with_capacity(spec.gates.len());
    for (role, kernel) in &nodes.gates {
        let input = match spec.peephole {
            PeepholeMode::StackedConv => xhc.expect("stacked input exists"),
            PeepholeMode::None | PeepholeMode::Elementwise => xh,
        };
        let mut net = tape.conv_same(input, *kernel)?;
        if spec.peephole == PeepholeMode::Elementwise {
            let weight = nodes
                .peephole
                .iter()
                .find(|(r, _)| r == role)
                .map(|(_, id)| *id)
                .ok_or_else(|| {
                    Error::config(format!("missing elementwise peephole weights for gate {}", role.letter()))
                })?;
            let peek = tape.ew_mul(weight, c)?;
            net = tape.ew_add(net, peek)?;
        }
        gate_values.push((*role, tape.activation(net, gate_activation)));
    }

    let g_net = tape.conv_same(xh, nodes.update)?;
    let g = tape.activation(g_net, Activation::Tanh);

    let shape = tape.image(c).shape();
    let mut ones: Option<NodeId> = None;
    let mut resolve = |tape: &mut Tape, source: ScaleSource| -> Result<NodeId> {
        match source {
            ScaleSource::Gate(role) => gate_values
                .iter()
                .find(|(r, _)| *r == role)
                .map(|(_, id)| *id)
                .ok_or_else(|| {
                    Error::config(format!("role binds gate {} which the model lacks", role.letter()))
                }),
            ScaleSource::One => Ok(*ones.get_or_insert_with(|| {
                tape.image_leaf(ImageTensor::filled(shape.0, shape.1, shape.2, 1.0), false)
            })),
        }
    };

    let cell_scale = resolve(tape, spec.cell_scale)?;
    let input_scale = resolve(tape, spec.input_scale)?;
    let output_scale = resolve(tape, spec.output_scale)?;

    let retained = tape.ew_mul(cell_scale, c)?;
    let injected = tape.ew_mul(input_scale, g)?;
    let c_new = tape.ew_add(retained, injected)?;
    let squashed = tape.activation(c_new, Activation::Tanh);
    let h_new = tape.ew_mul(output_scale, squashed)?;
    Ok((h_new, c_new))
}

/// One cell step as a pure function: returns h_new and the new state.
pub fn cell_step(
    spec: &ModelSpec,
    params: &CellParams,
    state: &CellState,
    x: &ImageTensor,
    gate_activation: Activation,
) -> Result<(ImageTensor, CellState)> {
    let expected_gamma = params.update.in_channels() - params.update.out_channels();
    if x.channels() != expected_gamma {
        return Err(Error::config(format!(
            "cell_step: input has {} channels, parameters expect {expected_gamma}",
            x.channels()
        )));
    }
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, false);
    let x_id = tape.image_leaf(x.clone(), false);
    let h_id = tape.image_leaf(state.h.clone(), false);
    let c_id = tape.image_leaf(state.c.clone(), false);
    let (h_new, c_new) = run_cell(&mut tape, spec, &nodes, x_id, h_id, c_id, gate_activation)?;
    let h = tape.image(h_new).clone();
    let c = tape.image(c_new).clone();
    Ok((h.clone(), CellState { h, c }))
}
