//! Reverse-mode automatic differentiation over the tensor operation set.
//!
//! A [`Tape`] records operations with eagerly computed forward values; a
//! single backward pass then produces adjoints for every trainable leaf.
//! Values are either whole images or kernel stacks, so convolutions can be
//! differentiated with respect to both their input and their weights/biases.
//!
//! [`finite_diff_check`] is the independent verifier: it compares backward
//! adjoints against central differences on freshly built tapes, re-randomizing
//! any instance whose activations sit within 10·h of a non-differentiable
//! point (hard_sig/relu/sat01 corners, max-pool ties).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    self, Activation, ImageTensor, KernelStack,
};

/// Reference to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A forward value: either an image or a kernel stack (weights + bias).
#[derive(Debug, Clone)]
pub enum Payload {
    Image(ImageTensor),
    Kernel(KernelStack),
}

impl Payload {
    pub fn as_image(&self) -> Option<&ImageTensor> {
        match self {
            Payload::Image(t) => Some(t),
            Payload::Kernel(_) => None,
        }
    }

    pub fn as_kernel(&self) -> Option<&KernelStack> {
        match self {
            Payload::Kernel(k) => Some(k),
            Payload::Image(_) => None,
        }
    }

    /// All scalar components: image data, or kernel weights followed by bias.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Payload::Image(t) => t.data().to_vec(),
            Payload::Kernel(k) => {
                let mut v = k.weights.clone();
                v.extend_from_slice(&k.bias);
                v
            }
        }
    }

    fn zeros_like(&self) -> Payload {
        match self {
            Payload::Image(t) => {
                let (h, w, c) = t.shape();
                Payload::Image(ImageTensor::zeros(h, w, c))
            }
            Payload::Kernel(k) => {
                let (m, _, cin, cout) = k.dims();
                Payload::Kernel(KernelStack::zeros(m, cin, cout).expect("valid dims"))
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    ConvSame { x: NodeId, k: NodeId },
    Stack { parts: Vec<NodeId> },
    EwMul { a: NodeId, b: NodeId },
    EwAdd { a: NodeId, b: NodeId },
    EwSub { a: NodeId, b: NodeId },
    Act { x: NodeId, kind: Activation },
    MaxPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Scale { x: NodeId, factor: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Payload,
    trainable: bool,
}

/// Append-only operation record with cached forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for the trainable leaves of one backward pass.
#[derive(Debug)]
pub struct GradientSet {
    adjoints: HashMap<usize, Payload>,
}

impl GradientSet {
    pub fn get(&self, id: NodeId) -> Option<&Payload> {
        self.adjoints.get(&id.0)
    }

    pub fn image(&self, id: NodeId) -> Option<&ImageTensor> {
        self.get(id).and_then(Payload::as_image)
    }

    pub fn kernel(&self, id: NodeId) -> Option<&KernelStack> {
        self.get(id).and_then(Payload::as_kernel)
    }

    pub fn all_finite(&self) -> bool {
        self.adjoints.values().all(|p| p.flat().iter().all(|v| v.is_finite()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Payload, trainable: bool) -> NodeId {
        self.nodes.push(Node { op, value, trainable });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an image leaf; `trainable` marks it for gradient collection.
    pub fn image_leaf(&mut self, value: ImageTensor, trainable: bool) -> NodeId {
        self.push(Op::Leaf, Payload::Image(value), trainable)
    }

    /// Record a kernel-stack leaf; `trainable` marks it for gradient collection.
    pub fn kernel_leaf(&mut self, value: KernelStack, trainable: bool) -> NodeId {
        self.push(Op::Leaf, Payload::Kernel(value), trainable)
    }

    pub fn value(&self, id: NodeId) -> &Payload {
        &self.nodes[id.0].value
    }

    pub fn image(&self, id: NodeId) -> &ImageTensor {
        self.nodes[id.0].value.as_image().expect("image node")
    }

    fn kernel(&self, id: NodeId) -> &KernelStack {
        self.nodes[id.0].value.as_kernel().expect("kernel node")
    }

    /// Value of a 1×1×1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let t = self
            .nodes[id.0]
            .value
            .as_image()
            .ok_or_else(|| Error::usage("scalar: node is not an image"))?;
        if t.shape() != (1, 1, 1) {
            return Err(Error::usage(format!("scalar: node has shape {:?}, want (1,1,1)", t.shape())));
        }
        Ok(t.data()[0])
    }

    pub fn conv_same(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let out = tensor::conv_same(self.image(x), self.kernel(k))?;
        Ok(self.push(Op::ConvSame { x, k }, Payload::Image(out), false))
    }

    pub fn stack_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let images: Vec<&ImageTensor> = parts.iter().map(|&p| self.image(p)).collect();
        let out = tensor::stack_channels(&images)?;
        Ok(self.push(Op::Stack { parts: parts.to_vec() }, Payload::Image(out), false))
    }

    pub fn ew_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::ew_mul(self.image(a), self.image(b))?;
        Ok(self.push(Op::EwMul { a, b }, Payload::Image(out), false))
    }

    pub fn ew_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::ew_add(self.image(a), self.image(b))?;
        Ok(self.push(Op::EwAdd { a, b }, Payload::Image(out), false))
    }

    pub fn ew_sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::ew_sub(self.image(a), self.image(b))?;
        Ok(self.push(Op::EwSub { a, b }, Payload::Image(out), false))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let out = tensor::activation(self.image(x), kind);
        self.push(Op::Act { x, kind }, Payload::Image(out), false)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = tensor::maxpool2(self.image(x))?;
        Ok(self.push(Op::MaxPool2 { x }, Payload::Image(out), false))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let out = tensor::upsample2(self.image(x));
        self.push(Op::Upsample2 { x }, Payload::Image(out), false)
    }

    /// Sum of all elements, as a 1×1×1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = tensor::sum(self.image(x));
        self.push(Op::Sum { x }, Payload::Image(ImageTensor::filled(1, 1, 1, v)), false)
    }

    /// Mean of all elements, as a 1×1×1 node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = tensor::mean(self.image(x));
        self.push(Op::Mean { x }, Payload::Image(ImageTensor::filled(1, 1, 1, v)), false)
    }

    /// Multiply by a constant (no gradient flows to the constant).
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = tensor::scale(self.image(x), factor);
        self.push(Op::Scale { x, factor }, Payload::Image(out), false)
    }

    /// Reverse-mode sweep from a scalar (1×1×1) loss node. Trainable leaves
    /// that the loss does not depend on receive exactly-zero adjoints.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet> {
        let loss_value = self.nodes[loss.0]
            .value
            .as_image()
            .ok_or_else(|| Error::usage("backward: loss node is not an image"))?;
        if loss_value.shape() != (1, 1, 1) {
            return Err(Error::usage(format!(
                "backward: loss must be scalar (1,1,1), got {:?}",
                loss_value.shape()
            )));
        }

        let mut adj: Vec<Option<Payload>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Payload::Image(ImageTensor::filled(1, 1, 1, 1.0)));

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = adj[idx].take() else { continue };
            let keep = matches!(self.nodes[idx].op, Op::Leaf);
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::ConvSame { x, k } => {
                    let g = grad.as_image().expect("image adjoint");
                    let (din, dk) = conv_backward(self.image(*x), self.kernel(*k), g);
                    accumulate(&mut adj[x.0], Payload::Image(din));
                    accumulate(&mut adj[k.0], Payload::Kernel(dk));
                }
                Op::Stack { parts } => {
                    let g = grad.as_image().expect("image adjoint");
                    let mut offset = 0;
                    for part in parts {
                        let c = self.image(*part).channels();
                        let piece = tensor::slice_channels(g, offset, c)?;
                        accumulate(&mut adj[part.0], Payload::Image(piece));
                        offset += c;
                    }
                }
                Op::EwMul { a, b } => {
                    let g = grad.as_image().expect("image adjoint");
                    let da = tensor::ew_mul(g, self.image(*b))?;
                    let db = tensor::ew_mul(g, self.image(*a))?;
                    accumulate(&mut adj[a.0], Payload::Image(da));
                    accumulate(&mut adj[b.0], Payload::Image(db));
                }
                Op::EwAdd { a, b } => {
                    let g = grad.as_image().expect("image adjoint");
                    accumulate(&mut adj[a.0], Payload::Image(g.clone()));
                    accumulate(&mut adj[b.0], Payload::Image(g.clone()));
                }
                Op::EwSub { a, b } => {
                    let g = grad.as_image().expect("image adjoint");
                    accumulate(&mut adj[a.0], Payload::Image(g.clone()));
                    accumulate(&mut adj[b.0], Payload::Image(tensor::scale(g, -1.0)));
                }
                Op::Act { x, kind } => {
                    let g = grad.as_image().expect("image adjoint");
                    let pre = self.image(*x);
                    let post = self.image(NodeId(idx));
                    let mut dx = ImageTensor::zeros(pre.height(), pre.width(), pre.channels());
                    for (i, slot) in dx.data_mut().iter_mut().enumerate() {
                        *slot = g.data()[i] * kind.derivative(pre.data()[i], post.data()[i]);
                    }
                    accumulate(&mut adj[x.0], Payload::Image(dx));
                }
                Op::MaxPool2 { x } => {
                    let g = grad.as_image().expect("image adjoint");
                    let input = self.image(*x);
                    let mut dx = ImageTensor::zeros(input.height(), input.width(), input.channels());
                    let (oh, ow, c) = g.shape();
                    for r in 0..oh {
                        for col in 0..ow {
                            for ch in 0..c {
                                // First-in-row-major winner takes the adjoint on ties.
                                let (mut br, mut bc) = (0, 0);
                                let mut best = input.get(2 * r, 2 * col, ch);
                                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                                    let v = input.get(2 * r + dr, 2 * col + dc, ch);
                                    if v > best {
                                        best = v;
                                        br = dr;
                                        bc = dc;
                                    }
                                }
                                let prev = dx.get(2 * r + br, 2 * col + bc, ch);
                                dx.set(2 * r + br, 2 * col + bc, ch, prev + g.get(r, col, ch));
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], Payload::Image(dx));
                }
                Op::Upsample2 { x } => {
                    let g = grad.as_image().expect("image adjoint");
                    let input = self.image(*x);
                    let (h, w, c) = input.shape();
                    let mut dx = ImageTensor::zeros(h, w, c);
                    for r in 0..h {
                        for col in 0..w {
                            for ch in 0..c {
                                let mut acc = 0.0;
                                for dr in 0..2 {
                                    for dc in 0..2 {
                                        acc += g.get(2 * r + dr, 2 * col + dc, ch);
                                    }
                                }
                                dx.set(r, col, ch, acc);
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], Payload::Image(dx));
                }
                Op::Sum { x } => {
                    let gv = grad.as_image().expect("image adjoint").data()[0];
                    let input = self.image(*x);
                    let (h, w, c) = input.shape();
                    accumulate(&mut adj[x.0], Payload::Image(ImageTensor::filled(h, w, c, gv)));
                }
                Op::Mean { x } => {
                    let gv = grad.as_image().expect("image adjoint").data()[0];
                    let input = self.image(*x);
                    let (h, w, c) = input.shape();
                    let per = gv / input.len() as f64;
                    accumulate(&mut adj[x.0], Payload::Image(ImageTensor::filled(h, w, c, per)));
                }
                Op::Scale { x, factor } => {
                    let g = grad.as_image().expect("image adjoint");
                    accumulate(&mut adj[x.0], Payload::Image(tensor::scale(g, *factor)));
                }
            }
            if keep {
                adj[idx] = Some(grad);
            }
        }

        let mut adjoints = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let payload = adj[idx].take().unwrap_or_else(|| node.value.zeros_like());
                adjoints.insert(idx, payload);
            }
        }
        Ok(GradientSet { adjoints })
    }

    /// Smallest distance of any piecewise-linear activation input to its kink
    /// (hard_sig at ±2, relu at 0, sat01 at 0/1), and of any max-pool window's
    /// winner to its runner-up. Infinite when the tape has no such node.
    pub fn kink_clearance(&self) -> f64 {
        let mut clearance = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Act { x, kind } => {
                    let margin: Box<dyn Fn(f64) -> f64> = match kind {
                        Activation::HardSig => Box::new(|v: f64| (v - 2.0).abs().min((v + 2.0).abs())),
                        Activation::Relu => Box::new(|v: f64| v.abs()),
                        Activation::Sat01 => Box::new(|v: f64| v.abs().min((v - 1.0).abs())),
                        Activation::Sigmoid | Activation::Tanh => continue,
                    };
                    for &v in self.image(*x).data() {
                        clearance = clearance.min(margin(v));
                    }
                }
                Op::MaxPool2 { x } => {
                    // A window whose values all sit at a rectifier's floor is
                    // harmless: every tied branch is clamped, so its gradient
                    // is zero no matter which entry wins. (The rectifier's own
                    // inputs are still screened by the Act arm above.) Ties
                    // over anything else stay disqualifying.
                    let pools_rectified =
                        matches!(self.nodes[x.0].op, Op::Act { kind: Activation::Relu, .. });
                    let input = self.image(*x);
                    let (h, w, c) = input.shape();
                    for r in (0..h).step_by(2) {
                        for col in (0..w).step_by(2) {
                            for ch in 0..c {
                                let mut vals = [
                                    input.get(r, col, ch),
                                    input.get(r, col + 1, ch),
                                    input.get(r + 1, col, ch),
                                    input.get(r + 1, col + 1, ch),
                                ];
                                vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                                if pools_rectified && vals[0] == 0.0 {
                                    continue;
                                }
                                clearance = clearance.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        clearance
    }
}

fn accumulate(slot: &mut Option<Payload>, contribution: Payload) {
    match slot {
        None => *slot = Some(contribution),
        Some(Payload::Image(acc)) => {
            let Payload::Image(add) = contribution else { panic!("adjoint kind mismatch") };
            for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
        Some(Payload::Kernel(acc)) => {
            let Payload::Kernel(add) = contribution else { panic!("adjoint kind mismatch") };
            for (a, b) in acc.weights.iter_mut().zip(&add.weights) {
                *a += b;
            }
            for (a, b) in acc.bias.iter_mut().zip(&add.bias) {
                *a += b;
            }
        }
    }
}

/// Adjoints of `same` convolution: input gradient is correlation of the
/// output adjoint with the spatially flipped, channel-transposed kernel;
/// weight gradient is the input/adjoint cross-correlation; bias gradient is
/// the per-channel adjoint sum.
fn conv_backward(x: &ImageTensor, k: &KernelStack, g: &ImageTensor) -> (ImageTensor, KernelStack) {
    let (h, w, cin) = x.shape();
    let m = k.size_m();
    let cout = k.out_channels();
    let p = (m as isize - 1) / 2;

    let mut din = ImageTensor::zeros(h, w, cin);
    let mut dk = KernelStack::zeros(m, cin, cout).expect("valid dims");

    for o in 0..cout {
        let mut acc = 0.0;
        for rc in 0..h * w {
            acc += g.data()[rc * cout + o];
        }
        dk.bias[o] = acc;
    }

    for dr in 0..m {
        let roff = dr as isize - p;
        for dc in 0..m {
            let coff = dc as isize - p;
            for r in 0..h {
                let rr = r as isize + roff;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                let rr = rr as usize;
                for c in 0..w {
                    let cc = c as isize + coff;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let cc = cc as usize;
                    let xb = (rr * w + cc) * cin;
                    let gb = (r * w + c) * cout;
                    for i in 0..cin {
                        let xv = x.data()[xb + i];
                        let widx = k.w_idx(dr, dc, i, 0);
                        let mut din_acc = 0.0;
                        for o in 0..cout {
                            let gv = g.data()[gb + o];
                            din_acc += gv * k.weights[widx + o];
                            dk.weights[widx + o] += xv * gv;
                        }
                        din.data_mut()[xb + i] += din_acc;
                    }
                }
            }
        }
    }
    (din, dk)
}

/// Named flattened parameter vectors for the finite-difference verifier.
pub type FlatParams = Vec<(String, Vec<f64>)>;

/// A taped computation handed back by a builder: the tape, its scalar loss
/// node, and the trainable leaves in the same order as the builder's inputs.
pub struct BuiltTape {
    pub tape: Tape,
    pub loss: NodeId,
    pub params: Vec<(String, NodeId)>,
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum acceptable relative error.
    pub tol: f64,
    /// Component subsample ceiling (all components are checked when fewer).
    pub max_samples: usize,
    /// Seed for component subsampling.
    pub seed: u64,
    /// How many re-randomized instances to try before giving up on finding
    /// one whose activations clear every kink.
    pub max_attempts: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { h: 1e-5, tol: 1e-4, max_samples: 256, seed: 0x9a7d, max_attempts: 20 }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub components_checked: usize,
    pub components_total: usize,
    /// Instances discarded because an activation input sat within 10·h of a kink.
    pub resampled: u64,
    /// `name[index]` of the worst component.
    pub worst: String,
    pub pass: bool,
    pub note: Option<String>,
}

/// Compare backward adjoints against central differences.
///
/// `init(round)` produces the parameter values for attempt `round`;
/// `build(round, params)` records the full computation at those values and
/// must regenerate any non-parameter inputs deterministically from `round`.
/// Relative error is |a−n| / max(|a|, |n|, 1e-8). At least 200 components are
/// sampled when subsampling (guaranteed by `max_samples` ≥ 200).
pub fn finite_diff_check<FI, FB>(cfg: &FdConfig, init: FI, build: FB) -> Result<FdReport>
where
    FI: Fn(u64) -> FlatParams,
    FB: Fn(u64, &FlatParams) -> Result<BuiltTape>,
{
    let margin = 10.0 * cfg.h;
    let mut resampled = 0;

    for round in 0..cfg.max_attempts {
        let params = init(round);
        let built = build(round, &params)?;
        if built.tape.kink_clearance() <= margin {
            resampled += 1;
            continue;
        }

        let grads = built.tape.backward(built.loss)?;
        let analytic: Vec<(String, Vec<f64>)> = built
            .params
            .iter()
            .map(|(name, id)| {
                let flat = grads
                    .get(*id)
                    .map(Payload::flat)
                    .unwrap_or_else(|| vec![0.0; params_len(&params, name)]);
                (name.clone(), flat)
            })
            .collect();

        let mut coords: Vec<(usize, usize)> = Vec::new();
        for (pi, (_, vals)) in params.iter().enumerate() {
            for ci in 0..vals.len() {
                coords.push((pi, ci));
            }
        }
        let total = coords.len();
        if total > cfg.max_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(round));
            coords.shuffle(&mut rng);
            coords.truncate(cfg.max_samples.max(200));
        }

        let mut max_rel = 0.0_f64;
        let mut worst = String::from("-");
        for &(pi, ci) in &coords {
            let mut plus = params.clone();
            plus[pi].1[ci] += cfg.h;
            let built_plus = build(round, &plus)?;
            let loss_plus = built_plus.tape.scalar(built_plus.loss)?;

            let mut minus = params.clone();
            minus[pi].1[ci] -= cfg.h;
            let built_minus = build(round, &minus)?;
            let loss_minus = built_minus.tape.scalar(built_minus.loss)?;

            let numeric = (loss_plus - loss_minus) / (2.0 * cfg.h);
            let a = analytic[pi].1[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", params[pi].0, ci);
            }
        }

        return Ok(FdReport {
            max_rel_err: max_rel,
            components_checked: coords.len(),
            components_total: total,
            resampled,
            worst,
            pass: max_rel <= cfg.tol,
            note: None,
        });
    }

    Ok(FdReport {
        max_rel_err: f64::INFINITY,
        components_checked: 0,
        components_total: 0,
        resampled,
        worst: String::from("-"),
        pass: false,
        note: Some(format!("no kink-clear instance found in {} attempts", cfg.max_attempts)),
    })
}

fn params_len(params: &FlatParams, name: &str) -> usize {
    params.iter().find(|(n, _)| n == name).map(|(_, v)| v.len()).unwrap_or(0)
}
