//! Named gradient-verification instances: every cell variant, an
//! elementwise-peephole variant, a two-layer stack rollout, and one graph
//! exercising every primitive operation. Each instance compares taped
//! gradients against central finite differences on freshly randomized
//! values, re-randomizing when any activation input sits too close to a
//! kink for the comparison to be trustworthy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, BuiltTape, FdConfig, FdReport, FlatParams, Tape};
use crate::cells::{self, CellDims, CellParams, ModelId, ModelSpec, PeepholeMode};
use crate::error::{Error, Result};
use crate::stack::{Stack, StackConfig};
use crate::tensor::{Activation, ImageTensor, KernelStack};

/// A deliberate analytic-vs-numeric mismatch, used to prove the checker
/// notices corrupted gradients: the named parameter's every component gains
/// `delta` of numeric gradient that the tape does not know about.
#[derive(Debug, Clone, PartialEq)]
pub struct GradInjection {
    pub param: String,
    pub delta: f64,
}

impl GradInjection {
    /// Parse `name:delta`.
    pub fn parse(s: &str) -> Result<GradInjection> {
        let (param, delta) = s
            .split_once(':')
            .ok_or_else(|| Error::usage(format!("expected name:delta, got '{s}'")))?;
        let delta = delta
            .parse::<f64>()
            .map_err(|_| Error::usage(format!("bad injection delta '{delta}'")))?;
        if param.is_empty() {
            return Err(Error::usage("injection parameter name is empty"));
        }
        Ok(GradInjection { param: param.to_string(), delta })
    }
}

/// All instance names, in report order.
pub fn instance_names() -> Vec<String> {
    let mut names = vec!["ops".to_string()];
    names.extend(ModelId::all().iter().map(|id| format!("cell_{}", id.to_string().to_lowercase())));
    names.push("cell_m18_elementwise".to_string());
    names.push("stack_2layer".to_string());
    names
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub name: String,
    pub report: FdReport,
}

fn cell_dims() -> CellDims {
    CellDims::new(8, 8, 2, 2, 3)
}

fn cell_flatten(params: &CellParams) -> FlatParams {
    let mut out = Vec::new();
    for (role, k) in &params.gates {
        let mut v = k.weights.clone();
        v.extend_from_slice(&k.bias);
        out.push((role.letter().to_string(), v));
    }
    let mut v = params.update.weights.clone();
    v.extend_from_slice(&params.update.bias);
    out.push(("g".to_string(), v));
    for (role, t) in &params.peephole {
        out.push((format!("peep_{}", role.letter()), t.data().to_vec()));
    }
    out
}

fn cell_unflatten(spec: &ModelSpec, dims: &CellDims, flats: &FlatParams) -> Result<CellParams> {
    let mut params = cells::init_params(spec, dims, 0);
    let expected = cell_flatten(&params);
    if flats.len() != expected.len() {
        return Err(Error::config(format!(
            "expected {} cell parameters, got {}",
            expected.len(),
            flats.len()
        )));
    }
    let mut it = flats.iter();
    for (role, k) in params.gates.iter_mut() {
        let (name, flat) = it.next().expect("checked length");
        if name != &role.letter().to_string() || flat.len() != k.param_count() {
            return Err(Error::config(format!("cell parameter mismatch at {name}")));
        }
        let nw = k.weights.len();
        k.weights.copy_from_slice(&flat[..nw]);
        k.bias.copy_from_slice(&flat[nw..]);
    }
    {
        let (name, flat) = it.next().expect("checked length");
        let k = &mut params.update;
        if name != "g" || flat.len() != k.param_count() {
            return Err(Error::config(format!("cell parameter mismatch at {name}")));
        }
        let nw = k.weights.len();
        k.weights.copy_from_slice(&flat[..nw]);
        k.bias.copy_from_slice(&flat[nw..]);
    }
    for (role, t) in params.peephole.iter_mut() {
        let (name, flat) = it.next().expect("checked length");
        if name != &format!("peep_{}", role.letter()) || flat.len() != t.len() {
            return Err(Error::config(format!("cell parameter mismatch at {name}")));
        }
        t.data_mut().copy_from_slice(flat);
    }
    Ok(params)
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lim: f64) -> ImageTensor {
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.gen_range(-lim..lim))
}

/// Two recorded cell steps ending in a scalar; gradients flow through both
/// the hidden and the cell state.
fn build_cell_tape(
    spec: &ModelSpec,
    dims: &CellDims,
    round: u64,
    flats: &FlatParams,
) -> Result<BuiltTape> {
    let params = cell_unflatten(spec, dims, flats)?;
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, true);
    let name_order: Vec<String> = cell_flatten(&params).into_iter().map(|(n, _)| n).collect();
    let mut ids = Vec::new();
    for (role, id) in &nodes.gates {
        ids.push((role.letter().to_string(), *id));
    }
    ids.push(("g".to_string(), nodes.update));
    for (role, id) in &nodes.peephole {
        ids.push((format!("peep_{}", role.letter()), *id));
    }
    debug_assert_eq!(name_order, ids.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ round);
    let mut h = tape.image_leaf(random_image(&mut rng, dims.height, dims.width, dims.n(), 0.8), false);
    let mut c = tape.image_leaf(random_image(&mut rng, dims.height, dims.width, dims.n(), 0.8), false);
    for _ in 0..2 {
        let x = tape.image_leaf(
            random_image(&mut rng, dims.height, dims.width, dims.gamma, 0.8),
            false,
        );
        let (h_new, c_new) = cells::run_cell(&mut tape, spec, &nodes, x, h, c, Activation::HardSig)?;
        h = h_new;
        c = c_new;
    }
    let h_sq = tape.ew_mul(h, h)?;
    let c_sq = tape.ew_mul(c, c)?;
    let mh = tape.mean(h_sq);
    let mc = tape.mean(c_sq);
    let loss = tape.ew_add(mh, mc)?;
    Ok(BuiltTape { tape, loss, params: ids })
}

fn stack_config() -> StackConfig {
    let mut cfg = StackConfig::new(ModelId::M18, 8, 8, vec![1, 4], vec![2, 4]);
    cfg.layer_weights = vec![1.0, 0.1];
    cfg
}

fn random_stack_flats(round: u64) -> FlatParams {
    // Biases included: with all-zero biases the first step sits exactly on
    // activation kinks and no redraw could clear them.
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce ^ round);
    Stack::init(stack_config(), 0)
        .expect("valid config")
        .flatten()
        .into_iter()
        .map(|(n, v)| (n, v.iter().map(|_| rng.gen_range(-0.5..0.5)).collect()))
        .collect()
}

fn build_stack_tape(round: u64, flats: &FlatParams) -> Result<BuiltTape> {
    let mut stack = Stack::init(stack_config(), 0)?;
    stack.unflatten_into(flats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xf00d ^ round);
    let frames: Vec<ImageTensor> =
        (0..3).map(|_| ImageTensor::from_fn(8, 8, 1, |_, _, _| rng.gen_range(0.0..1.0))).collect();
    let rollout = stack.rollout(&frames, true)?;
    rollout.into_built_tape().ok_or_else(|| Error::verification("rollout was not taped"))
}

fn ops_init(round: u64) -> FlatParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5 ^ round);
    let x: Vec<f64> = (0..6 * 6 * 2).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let k: Vec<f64> = (0..3 * 3 * 2 * 2 + 2).map(|_| rng.gen_range(-0.4..0.4)).collect();
    vec![("x".to_string(), x), ("k".to_string(), k)]
}

fn build_ops_tape(_round: u64, flats: &FlatParams) -> Result<BuiltTape> {
    if flats.len() != 2 {
        return Err(Error::config("ops instance expects parameters x and k"));
    }
    let x_val = ImageTensor::new(6, 6, 2, flats[0].1.clone())?;
    let nw = 3 * 3 * 2 * 2;
    let k_val =
        KernelStack::new(3, 2, 2, flats[1].1[..nw].to_vec(), flats[1].1[nw..].to_vec())?;
    let mut tape = Tape::new();
    let x = tape.image_leaf(x_val, true);
    let k = tape.kernel_leaf(k_val, true);

    let a = tape.conv_same(x, k)?;
    let b = tape.activation(a, Activation::Tanh);
    let prod = tape.ew_mul(b, b)?;
    let total = tape.ew_add(prod, b)?;
    let diff = tape.ew_sub(total, prod)?;
    let squashed = tape.activation(a, Activation::Sigmoid);
    let hard = tape.activation(a, Activation::HardSig);
    let rect = tape.activation(a, Activation::Relu);
    let shrunk = tape.scale(a, 0.3);
    let clamped = tape.activation(shrunk, Activation::Sat01);
    let pooled = tape.maxpool2(diff)?;
    let up = tape.upsample2(pooled);
    let stacked = tape.stack_channels(&[up, hard])?;
    let m1 = tape.mean(stacked);
    let gated = tape.ew_mul(clamped, rect)?;
    let m2 = tape.mean(gated);
    let s = tape.sum(squashed);
    let m3 = tape.scale(s, 1.0 / 72.0);
    let partial = tape.ew_add(m1, m2)?;
    let loss = tape.ew_add(partial, m3)?;
    Ok(BuiltTape {
        tape,
        loss,
        params: vec![("x".to_string(), x), ("k".to_string(), k)],
    })
}

fn with_injection(
    inject: Option<&GradInjection>,
    params: &FlatParams,
    mut built: BuiltTape,
) -> Result<BuiltTape> {
    if let Some(inj) = inject {
        let flat = params
            .iter()
            .find(|(n, _)| n == &inj.param)
            .ok_or_else(|| Error::usage(format!("no parameter named '{}' here", inj.param)))?;
        let copy = ImageTensor::new(flat.1.len(), 1, 1, flat.1.clone())?;
        let leaf = built.tape.image_leaf(copy, false);
        let total = built.tape.sum(leaf);
        let nudge = built.tape.scale(total, inj.delta);
        built.loss = built.tape.ew_add(built.loss, nudge)?;
    }
    Ok(built)
}

/// Run one named instance.
pub fn run_instance(
    name: &str,
    cfg: &FdConfig,
    inject: Option<&GradInjection>,
) -> Result<FdReport> {
    if let Some(id_str) = name.strip_prefix("cell_") {
        let (model_str, elementwise) = match id_str.strip_suffix("_elementwise") {
            Some(base) => (base, true),
            None => (id_str, false),
        };
        let id: ModelId = model_str.parse()?;
        let mut spec = cells::model_spec(id);
        if elementwise {
            if spec.peephole != PeepholeMode::StackedConv {
                return Err(Error::usage(format!(
                    "model {id} has no peephole to make elementwise"
                )));
            }
            spec = spec.with_elementwise_peephole();
        }
        let dims = cell_dims();
        let init_spec = spec.clone();
        let inject = inject.cloned();
        return finite_diff_check(
            cfg,
            move |round| cell_flatten(&cells::init_params(&init_spec, &cell_dims(), 0x11 + round)),
            move |round, params| {
                let built = build_cell_tape(&spec, &dims, round, params)?;
                with_injection(inject.as_ref(), params, built)
            },
        );
    }
    match name {
        "ops" => {
            let inject = inject.cloned();
            finite_diff_check(cfg, ops_init, move |round, params| {
                let built = build_ops_tape(round, params)?;
                with_injection(inject.as_ref(), params, built)
            })
        }
        "stack_2layer" => {
            let inject = inject.cloned();
            finite_diff_check(cfg, random_stack_flats, move |round, params| {
                let built = build_stack_tape(round, params)?;
                with_injection(inject.as_ref(), params, built)
            })
        }
        other => Err(Error::usage(format!(
            "unknown gradcheck instance '{other}' (available: {})",
            instance_names().join(", ")
        ))),
    }
}

/// Run every instance (or just `only`), collecting rows in order.
pub fn run_gradcheck(
    cfg: &FdConfig,
    only: Option<&str>,
    inject: Option<&GradInjection>,
) -> Result<Vec<GradcheckRow>> {
    let names = match only {
        Some(name) => vec![name.to_string()],
        None => instance_names(),
    };
    names
        .into_iter()
        .map(|name| {
            let report = run_instance(&name, cfg, inject)?;
            Ok(GradcheckRow { name, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> FdConfig {
        FdConfig { max_samples: 200, ..FdConfig::default() }
    }

    #[test]
    fn every_instance_name_resolves() {
        for name in instance_names() {
            // Unknown names must error; known ones must at least start.
            let got = run_instance(&name, &FdConfig { max_samples: 200, max_attempts: 1, ..FdConfig::default() }, None);
            assert!(got.is_ok(), "{name}: {got:?}");
        }
        assert!(run_instance("cell_m99", &quick_cfg(), None).is_err());
        assert!(run_instance("nonsense", &quick_cfg(), None).is_err());
    }

    #[test]
    fn representative_instances_pass() {
        for name in ["ops", "cell_m1", "cell_m18", "cell_m18_elementwise", "stack_2layer"] {
            let report = run_instance(name, &quick_cfg(), None).unwrap();
            assert!(
                report.pass,
                "{name}: max rel err {} at {}",
                report.max_rel_err, report.worst
            );
        }
    }

    #[test]
    fn injection_is_caught() {
        let inject = GradInjection { param: "f".to_string(), delta: 0.05 };
        let report = run_instance("cell_m18", &quick_cfg(), Some(&inject)).unwrap();
        assert!(!report.pass, "corrupted gradient slipped through");

        let inject = GradInjection { param: "f_0".to_string(), delta: 0.05 };
        let report = run_instance("stack_2layer", &quick_cfg(), Some(&inject)).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn injection_parse_accepts_name_colon_delta() {
        let inj = GradInjection::parse("g_0:0.01").unwrap();
        assert_eq!(inj.param, "g_0");
        assert_eq!(inj.delta, 0.01);
        assert!(GradInjection::parse("nocolon").is_err());
        assert!(GradInjection::parse("x:notanumber").is_err());
        assert!(GradInjection::parse(":0.1").is_err());
    }

    #[test]
    fn unknown_injected_parameter_is_an_error() {
        let inject = GradInjection { param: "zzz".to_string(), delta: 0.1 };
        assert!(run_instance("ops", &quick_cfg(), Some(&inject)).is_err());
    }
}
