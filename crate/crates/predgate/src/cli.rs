//! Command-line front end: `--name value` options, optional config files,
//! and the seven subcommands.
//!
//! Option precedence, lowest to highest: built-in defaults, `PREDGATE_SEED`
//! (seed only), entries from `--config` files, then explicit flags. Unknown
//! options and unknown config keys are rejected by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autodiff::FdConfig;
use crate::cells::{model_spec, ModelId};
use crate::checkpoint::{load_stack, save_stack};
use crate::datasets::{gen_sequences, load_sequences, save_sequences, SequenceSet, ShapeGenConfig, ShapeKind};
use crate::error::{Error, Result};
use crate::stack::{
    audit_stack, parse_gate_activation, preset_config, published_total, LossKind, Stack, StackConfig,
};
use crate::tensor::{Activation, ImageTensor};
use crate::trainer::{copy_last_report, evaluate, train, TrainConfig, TrainLogRow};
use crate::verify::{instance_names, run_gradcheck, GradInjection};

const DEFAULT_SEED: u64 = 7;
const SEED_ENV: &str = "PREDGATE_SEED";

/// Entry point for the binary. Returns `Ok` on success; the caller maps
/// errors to exit codes (verification failures 1, everything else 2).
pub fn run(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first().map(String::as_str) else {
        print!("{}", top_help());
        return Ok(());
    };
    if matches!(cmd, "--help" | "-h" | "help") {
        print!("{}", top_help());
        return Ok(());
    }
    let rest = &args[1..];
    if rest.iter().any(|a| a == "--help" || a == "-h") {
        print!("{}", command_help(cmd)?);
        return Ok(());
    }
    let opts = Options::from_args(rest)?;
    match cmd {
        "gen-data" => cmd_gen_data(opts),
        "train" => cmd_train(opts),
        "eval" => cmd_eval(opts),
        "predict" => cmd_predict(opts),
        "audit-params" => cmd_audit_params(opts),
        "gradcheck" => cmd_gradcheck(opts),
        "zoo" => cmd_zoo(opts),
        other => Err(Error::usage(format!("unknown command '{other}'; run --help for the list"))),
    }
}

fn top_help() -> String {
    "\
predgate - convolutional recurrent video prediction models

usage: predgate <command> [--option value]...

commands:
  gen-data      generate a bouncing-shapes sequence file
  train         train a model and write a checkpoint
  eval          score a checkpoint against a sequence file
  predict       roll a checkpoint forward and write PPM frames
  audit-params  count parameters of an architecture
  gradcheck     compare backward gradients against finite differences
  zoo           train and score a family of model variants

common options:
  --config FILE   read name=value lines ('#' comments) as defaults;
                  explicit flags override file entries
  --seed N        RNG seed (default: $PREDGATE_SEED, else 7)
  --help          show a command's options

run 'predgate <command> --help' for the command's options
"
    .to_string()
}

fn command_help(cmd: &str) -> Result<String> {
    let text = match cmd {
        "gen-data" => {
            "\
usage: predgate gen-data --out FILE [options]

  --out FILE        where to write the sequence file (required)
  --count N         sequences to generate (default 16)
  --canvas N        square frame side (default 16)
  --shapes N        moving shapes per sequence (default 2)
  --kind NAME       square or cross (default square)
  --side N          shape side, odd (default 3)
  --max-speed N     velocity component bound (default 2)
  --frames N        frames per sequence (default 10)
  --bounce BOOL     reflect off walls instead of wrapping (default true)
  --seed N          generator seed

prints the output path and its sha256 digest
"
        }
        "train" => {
            "\
usage: predgate train --data FILE --out FILE [options]

  --data FILE               training sequences (required)
  --out FILE                checkpoint to write (required)
  --model NAME              M1..M20 or an alias: rgclstm, clstm, convlstm,
                            np-rgclstm (default rgclstm)
  --epochs N                passes over the data (default 1)
  --batch-size N            sequences per optimizer step (default 4)
  --lr X                    base learning rate (default 0.001); drops to a
                            tenth after half the steps
  --beta1 X --beta2 X       Adam moment decays (default 0.9, 0.999)
  --epsilon X               Adam denominator floor (default 1e-8)
  --log FILE                write the step log CSV here instead of stdout
  --seed N                  init and shuffle seed

architecture options (shared with zoo):
  --a-channels LIST         per-layer target channels; entry 0 must match the
                            data (default: data channels, then 8)
  --r-channels LIST         per-layer hidden channels (default: 8 per layer)
  --kernel-size N           odd convolution side (default 3)
  --gate-activation NAME    hard_sig or sigmoid (default hard_sig)
  --elementwise-peephole B  per-pixel peephole weights instead of the stacked
                            convolution (default false)
  --layer-weights LIST      per-layer loss weights (default 1,0,...)
  --loss NAME               e_mean or mse (default e_mean)
  --first-step-weight X     weight of step 0 in the loss (default 0)
"
        }
        "eval" => {
            "\
usage: predgate eval --data FILE --checkpoint FILE

  --data FILE         sequences to score against (required)
  --checkpoint FILE   trained model (required)

prints one-step-ahead mse/mae/ssim plus the copy-last baseline
"
        }
        "predict" => {
            "\
usage: predgate predict --data FILE --checkpoint FILE [options]

  --data FILE         sequence file (required)
  --checkpoint FILE   trained model (required)
  --sequence N        which sequence to roll forward (default 0)
  --seeds N           frames fed before feedback begins (default: all)
  --steps N           feedback predictions to emit (default 5)
  --out-dir DIR       where PPM files go (default .)

writes s<sequence>_p<step>.ppm per step, plus _gt.ppm companions when the
file still has a real frame at that offset
"
        }
        "audit-params" => {
            "\
usage: predgate audit-params [options]

  --model NAME              M1..M20 or an alias (default rgclstm)
  --preset NAME             mnist or kitti reference architecture
                            (a '-paper' suffix is accepted on either)
  --height N --width N      frame size when no preset (default 16x16)
  --a-channels LIST         per-layer target channels (default 1,8)
  --r-channels LIST         per-layer hidden channels (default 8,8)
  --kernel-size N           convolution side (default 3)
  --elementwise-peephole B  audit the per-pixel peephole variant
  --expect N                exit 0 only if N matches the audited total
                            (the published figure also counts for presets)
"
        }
        "gradcheck" => {
            "\
usage: predgate gradcheck [options]

  --only NAME                 run a single instance (see list below)
  --tol X                     max relative error (default 1e-4)
  --samples N                 components sampled per instance (default 256)
  --inject-grad-error NAME:DELTA
                              corrupt one parameter's gradient by DELTA per
                              component; the check must then fail
  --seed N                    sampling seed

instances: ops, cell_m1..cell_m20, cell_m18_elementwise, stack_2layer
"
        }
        "zoo" => {
            "\
usage: predgate zoo --data FILE [options]

  --data FILE        sequences; the leading slice trains, the rest scores
  --train-count N    sequences used for training (default: 4/5 of the file)
  --models LIST      comma-separated ids/aliases, or 'all' (default all)
  --out FILE         write the result CSV here instead of stdout
  --epochs, --batch-size, --lr, --beta1, --beta2, --epsilon, --seed
                     as in train; every model shares the same protocol
  architecture options as in train (--a-channels, --r-channels, ...)

CSV columns: model,peephole,gates,roles,params,mse,mae,ssim,train_wall_ms
(multi-valued cells join with '+'); a model that fails gets nan metric
cells and a trailing '# <model> failed: ...' comment line
"
        }
        other => return Err(Error::usage(format!("unknown command '{other}'"))),
    };
    Ok(text.to_string())
}

/// Parsed options, merged from config files and flags. Subcommands `take`
/// the keys they understand; whatever is left is an unknown-option error.
struct Options {
    values: BTreeMap<String, String>,
}

impl Options {
    fn from_args(args: &[String]) -> Result<Options> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let name = args[i]
                .strip_prefix("--")
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::usage(format!("expected --option, got '{}'", args[i])))?;
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::usage(format!("--{name} needs a value")))?;
            pairs.push((name.to_string(), value.clone()));
            i += 2;
        }
        let mut values = BTreeMap::new();
        for (_, path) in pairs.iter().filter(|(k, _)| k == "config") {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading config {path}"), e))?;
            for (k, v) in parse_config_text(&text)? {
                values.insert(k, v);
            }
        }
        for (k, v) in pairs {
            if k != "config" {
                values.insert(k, v);
            }
        }
        Ok(Options { values })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn take_req(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| Error::usage(format!("--{key} is required")))
    }

    fn take_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            Some(v) => parse_scalar(key, &v, "an unsigned integer"),
            None => Ok(default),
        }
    }

    fn take_i64(&mut self, key: &str, default: i64) -> Result<i64> {
        match self.take(key) {
            Some(v) => parse_scalar(key, &v, "an integer"),
            None => Ok(default),
        }
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            Some(v) => parse_scalar(key, &v, "a number"),
            None => Ok(default),
        }
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::usage(format!("--{key} expects true or false, got '{v}'"))),
        }
    }

    fn take_usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| parse_scalar(key, x.trim(), "a comma list of unsigned integers"))
                .collect::<Result<Vec<usize>>>()
                .map(Some),
        }
    }

    fn take_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| parse_scalar(key, x.trim(), "a comma list of numbers"))
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// Error out if any option was never consumed.
    fn finish(self) -> Result<()> {
        if self.values.is_empty() {
            return Ok(());
        }
        let names: Vec<String> = self.values.keys().map(|k| format!("--{k}")).collect();
        Err(Error::usage(format!("unknown option(s): {}", names.join(", "))))
    }
}

fn parse_scalar<T: FromStr>(key: &str, v: &str, kind: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::usage(format!("--{key} expects {kind}, got '{v}'")))
}

/// name=value lines; blank lines and full-line '#' comments are skipped.
fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {} is not name=value: '{line}'", idx + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn take_seed(opts: &mut Options) -> Result<u64> {
    if let Some(v) = opts.take("seed") {
        return parse_scalar("seed", &v, "an unsigned integer");
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .parse::<u64>()
            .map_err(|_| Error::usage(format!("{SEED_ENV} must be an unsigned integer, got '{v}'")));
    }
    Ok(DEFAULT_SEED)
}

fn take_model(opts: &mut Options) -> Result<ModelId> {
    opts.take_or("model", "rgclstm").parse::<ModelId>()
}

/// Architecture flags shared by train and zoo. Channel lists stay optional
/// here because their defaults depend on the data file.
struct StackFlags {
    a_channels: Option<Vec<usize>>,
    r_channels: Option<Vec<usize>>,
    kernel_size: usize,
    gate_activation: Activation,
    elementwise_peephole: bool,
    layer_weights: Option<Vec<f64>>,
    loss: LossKind,
    first_step_weight: f64,
}

fn take_stack_flags(opts: &mut Options) -> Result<StackFlags> {
    Ok(StackFlags {
        a_channels: opts.take_usize_list("a-channels")?,
        r_channels: opts.take_usize_list("r-channels")?,
        kernel_size: opts.take_usize("kernel-size", 3)?,
        gate_activation: match opts.take("gate-activation") {
            Some(v) => parse_gate_activation(&v)?,
            None => Activation::HardSig,
        },
        elementwise_peephole: opts.take_bool("elementwise-peephole", false)?,
        layer_weights: opts.take_f64_list("layer-weights")?,
        loss: match opts.take("loss") {
            Some(v) => LossKind::from_str(&v)?,
            None => LossKind::EMean,
        },
        first_step_weight: opts.take_f64("first-step-weight", 0.0)?,
    })
}

fn build_stack_config(
    flags: &StackFlags,
    model: ModelId,
    height: usize,
    width: usize,
    frame_channels: usize,
) -> Result<StackConfig> {
    let a = flags.a_channels.clone().unwrap_or_else(|| vec![frame_channels, 8]);
    if a.first() != Some(&frame_channels) {
        return Err(Error::config(format!(
            "data frames have {frame_channels} channel(s) but --a-channels starts with {}",
            a.first().map(ToString::to_string).unwrap_or_else(|| "nothing".into())
        )));
    }
    let r = flags.r_channels.clone().unwrap_or_else(|| vec![8; a.len()]);
    let mut config = StackConfig::new(model, height, width, a, r);
    config.kernel_size = flags.kernel_size;
    config.gate_activation = flags.gate_activation;
    config.elementwise_peephole = flags.elementwise_peephole;
    if let Some(lw) = &flags.layer_weights {
        config.layer_weights = lw.clone();
    }
    config.loss = flags.loss;
    config.first_step_weight = flags.first_step_weight;
    config.validate()?;
    Ok(config)
}

fn take_train_config(opts: &mut Options, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        base_lr: opts.take_f64("lr", d.base_lr)?,
        beta1: opts.take_f64("beta1", d.beta1)?,
        beta2: opts.take_f64("beta2", d.beta2)?,
        epsilon: opts.take_f64("epsilon", d.epsilon)?,
        epochs: opts.take_usize("epochs", d.epochs)?,
        batch_size: opts.take_usize("batch-size", d.batch_size)?,
        seed,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// --- gen-data ---------------------------------------------------------

fn cmd_gen_data(mut opts: Options) -> Result<()> {
    let out = PathBuf::from(opts.take_req("out")?);
    let count = opts.take_usize("count", 16)?;
    let d = ShapeGenConfig::default();
    let cfg = ShapeGenConfig {
        canvas: opts.take_usize("canvas", d.canvas)?,
        shapes: opts.take_usize("shapes", d.shapes)?,
        kind: match opts.take("kind") {
            Some(v) => ShapeKind::parse(&v)?,
            None => d.kind,
        },
        side: opts.take_usize("side", d.side)?,
        max_speed: opts.take_i64("max-speed", d.max_speed)?,
        frames: opts.take_usize("frames", d.frames)?,
        seed: take_seed(&mut opts)?,
        bounce: opts.take_bool("bounce", d.bounce)?,
    };
    opts.finish()?;

    let set = gen_sequences(&cfg, count)?;
    save_sequences(&out, &set)?;
    let bytes = fs::read(&out).map_err(|e| Error::io(format!("reading back {}", out.display()), e))?;
    let digest = Sha256::digest(&bytes);
    let (n, t, h, w, c) = set.dims();
    println!("wrote {n} sequences of {t}x{h}x{w}x{c} frames to {}", out.display());
    println!("sha256={digest:x}");
    Ok(())
}

// --- train ------------------------------------------------------------

fn cmd_train(mut opts: Options) -> Result<()> {
    let data_path = PathBuf::from(opts.take_req("data")?);
    let out = PathBuf::from(opts.take_req("out")?);
    let model = take_model(&mut opts)?;
    let seed = take_seed(&mut opts)?;
    let log_path = opts.take("log").map(PathBuf::from);
    let train_cfg = take_train_config(&mut opts, seed)?;
    let flags = take_stack_flags(&mut opts)?;
    opts.finish()?;

    let data = load_sequences(&data_path)?;
    let (n, t, h, w, c) = data.dims();
    eprintln!("[train] {n} sequences of {t} frames ({h}x{w}x{c})");
    let config = build_stack_config(&flags, model, h, w, c)?;
    let mut stack = Stack::init(config, seed)?;
    let params = stack.param_total();

    let log = train(&mut stack, &data, &train_cfg)?;
    let mut csv = String::from(TrainLogRow::csv_header());
    csv.push('\n');
    for row in &log {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    match &log_path {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    save_stack(&out, &stack)?;
    match log.last() {
        Some(last) => {
            println!("trained {model} ({params} parameters) in {} steps; final batch loss {}", log.len(), last.loss)
        }
        None => println!("trained {model} ({params} parameters); no optimizer steps ran"),
    }
    println!("wrote checkpoint {}", out.display());
    Ok(())
}

// --- eval -------------------------------------------------------------

fn cmd_eval(mut opts: Options) -> Result<()> {
    let data_path = PathBuf::from(opts.take_req("data")?);
    let ckpt_path = PathBuf::from(opts.take_req("checkpoint")?);
    opts.finish()?;

    let data = load_sequences(&data_path)?;
    let stack = load_stack(&ckpt_path)?;
    let summary = evaluate(&stack, &data)?;
    let baseline = copy_last_report(&data)?;
    if summary.report.ssim_window_fallback {
        eprintln!("warning: frames are smaller than the 11x11 SSIM window; scores use one global window");
    }
    let r = &summary.report;
    println!("model={} sequences={} scored_frames={}", stack.config().model, data.len(), r.frames.len());
    println!("model: mse={} mae={} ssim={} loss={}", r.mse, r.mae, r.ssim, summary.mean_loss);
    println!("copy_last: mse={} mae={} ssim={}", baseline.mse, baseline.mae, baseline.ssim);
    Ok(())
}

// --- predict ----------------------------------------------------------

fn cmd_predict(mut opts: Options) -> Result<()> {
    let data_path = PathBuf::from(opts.take_req("data")?);
    let ckpt_path = PathBuf::from(opts.take_req("checkpoint")?);
    let steps = opts.take_usize("steps", 5)?;
    let sequence = opts.take_usize("sequence", 0)?;
    let seeds_flag = match opts.take("seeds") {
        Some(v) => Some(parse_scalar::<usize>("seeds", &v, "an unsigned integer")?),
        None => None,
    };
    let out_dir = PathBuf::from(opts.take_or("out-dir", "."));
    opts.finish()?;

    if steps == 0 {
        return Err(Error::usage("--steps must be at least 1"));
    }
    let data = load_sequences(&data_path)?;
    let stack = load_stack(&ckpt_path)?;
    let sequences = data.sequences();
    if sequence >= sequences.len() {
        return Err(Error::config(format!(
            "--sequence {sequence} is out of range; the file has {} sequences",
            sequences.len()
        )));
    }
    let frames = &sequences[sequence];
    let total = frames.len();
    let seeds = seeds_flag.unwrap_or(total);
    if seeds == 0 || seeds > total {
        return Err(Error::config(format!(
            "--seeds {seeds} must be between 1 and the sequence length {total}"
        )));
    }
    let predictions = stack.predict_future(&frames[..seeds], steps)?;
    fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    for (j, prediction) in predictions.iter().enumerate() {
        let step = j + 1;
        let path = out_dir.join(format!("s{sequence}_p{step}.ppm"));
        write_ppm(&path, prediction)?;
        println!("wrote {}", path.display());
        // the step-j prediction lines up with frame seeds+j-1 when one exists
        let gt_index = seeds + step - 1;
        if gt_index < total {
            let gt_path = out_dir.join(format!("s{sequence}_p{step}_gt.ppm"));
            write_ppm(&gt_path, &frames[gt_index])?;
            println!("wrote {}", gt_path.display());
        }
    }
    Ok(())
}

/// Binary PPM (P6). One channel replicates to grey; three map to RGB.
fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w, c) = img.shape();
    if c != 1 && c != 3 {
        return Err(Error::config(format!("PPM output needs 1 or 3 channels, image has {c}")));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.get(y, x, if c == 1 { 0 } else { ch });
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// --- audit-params -----------------------------------------------------

fn cmd_audit_params(mut opts: Options) -> Result<()> {
    let model = take_model(&mut opts)?;
    let preset = opts.take("preset");
    let elementwise = opts.take_bool("elementwise-peephole", false)?;
    let expect = match opts.take("expect") {
        Some(v) => Some(parse_scalar::<usize>("expect", &v, "an unsigned integer")?),
        None => None,
    };
    let config = match &preset {
        Some(name) => {
            for key in ["height", "width", "a-channels", "r-channels", "kernel-size"] {
                if opts.take(key).is_some() {
                    return Err(Error::usage(format!("--{key} cannot be combined with --preset")));
                }
            }
            let mut c = preset_config(name, model).ok_or_else(|| {
                Error::usage(format!("unknown preset '{name}' (expected mnist or kitti)"))
            })?;
            c.elementwise_peephole = elementwise;
            c
        }
        None => {
            let height = opts.take_usize("height", 16)?;
            let width = opts.take_usize("width", 16)?;
            let a = opts.take_usize_list("a-channels")?.unwrap_or_else(|| vec![1, 8]);
            let r = opts.take_usize_list("r-channels")?.unwrap_or_else(|| vec![8, 8]);
            let mut c = StackConfig::new(model, height, width, a, r);
            c.kernel_size = opts.take_usize("kernel-size", 3)?;
            c.elementwise_peephole = elementwise;
            c
        }
    };
    opts.finish()?;

    let audit = audit_stack(&config)?;
    let spec = config.cell_spec();
    println!(
        "model {model}  gates={}  roles={}  peephole={}",
        spec.gates_label(),
        spec.roles_label(),
        spec.peephole.name()
    );
    let mut layer = usize::MAX;
    for row in &audit.rows {
        if row.layer != layer {
            layer = row.layer;
            println!("layer {layer} ({}x{}):", config.height >> layer, config.width >> layer);
        }
        let (d0, d1, d2, d3) = row.shape;
        let shape = if d3 == 0 {
            format!("{d0}x{d1}x{d2}")
        } else {
            format!("{d0}x{d1}x{d2}->{d3}")
        };
        println!(
            "  {:<14} {:>16}  weights {:>9}  biases {:>5}",
            row.name, shape, row.weights, row.biases
        );
    }
    for l in 0..config.levels() {
        println!("layer {l} total: {}", audit.layer_total(l));
    }
    println!("total parameters: {}", audit.total);

    // published figures describe the presets' standard peephole wiring
    let published = match (&preset, elementwise) {
        (Some(p), false) => published_total(p, model),
        _ => None,
    };
    if let Some(p) = published {
        println!("published total: {p}");
        if p != audit.total {
            println!(
                "note: published figure differs from the architecture arithmetic by {:+}",
                p as i64 - audit.total as i64
            );
        }
    }
    if let Some(e) = expect {
        if e == audit.total || published == Some(e) {
            println!("expect {e}: ok");
        } else {
            let published_note =
                published.map(|p| format!(" (published {p})")).unwrap_or_default();
            return Err(Error::verification(format!(
                "expected {e} parameters but the audit says {}{published_note}",
                audit.total
            )));
        }
    }
    Ok(())
}

// --- gradcheck --------------------------------------------------------

fn cmd_gradcheck(mut opts: Options) -> Result<()> {
    let only = opts.take("only");
    let inject = match opts.take("inject-grad-error") {
        Some(s) => Some(GradInjection::parse(&s)?),
        None => None,
    };
    let mut cfg = FdConfig::default();
    cfg.tol = opts.take_f64("tol", cfg.tol)?;
    cfg.max_samples = opts.take_usize("samples", cfg.max_samples)?;
    if let Some(v) = opts.take("seed") {
        cfg.seed = parse_scalar("seed", &v, "an unsigned integer")?;
    }
    opts.finish()?;

    if let Some(name) = &only {
        if !instance_names().contains(name) {
            return Err(Error::usage(format!(
                "unknown instance '{name}'; choices: {}",
                instance_names().join(", ")
            )));
        }
    }
    let rows = run_gradcheck(&cfg, only.as_deref(), inject.as_ref())?;
    let mut failed = Vec::new();
    for row in &rows {
        let r = &row.report;
        println!(
            "{:<22} max_rel_err={:.3e}  checked={}/{}  resampled={}  {}",
            row.name,
            r.max_rel_err,
            r.components_checked,
            r.components_total,
            r.resampled,
            if r.pass { "PASS" } else { "FAIL" }
        );
        if let Some(note) = &r.note {
            println!("    note: {note}");
        }
        if !r.pass {
            println!("    worst component: {}", r.worst);
            failed.push(row.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

// --- zoo ----------------------------------------------------------------

fn cmd_zoo(mut opts: Options) -> Result<()> {
    let data_path = PathBuf::from(opts.take_req("data")?);
    let out_path = opts.take("out").map(PathBuf::from);
    let models_raw = opts.take_or("models", "all");
    let seed = take_seed(&mut opts)?;
    let train_cfg = take_train_config(&mut opts, seed)?;
    let train_count_flag = match opts.take("train-count") {
        Some(v) => Some(parse_scalar::<usize>("train-count", &v, "an unsigned integer")?),
        None => None,
    };
    let flags = take_stack_flags(&mut opts)?;
    opts.finish()?;

    let models: Vec<ModelId> = if models_raw == "all" {
        ModelId::all().to_vec()
    } else {
        models_raw
            .split(',')
            .map(|s| s.trim().parse::<ModelId>())
            .collect::<Result<Vec<ModelId>>>()?
    };
    if models.is_empty() {
        return Err(Error::usage("--models named no models"));
    }

    let data = load_sequences(&data_path)?;
    let (n, t, h, w, c) = data.dims();
    let train_count = train_count_flag.unwrap_or_else(|| ((n * 4) / 5).max(1));
    if train_count == 0 || train_count >= n {
        return Err(Error::config(format!(
            "--train-count {train_count} leaves no held-out sequences (the file has {n})"
        )));
    }
    let train_set = data.slice(0, train_count)?;
    let eval_set = data.slice(train_count, n - train_count)?;
    eprintln!(
        "[zoo] {} models; {train_count} training and {} held-out sequences of {t} frames ({h}x{w}x{c})",
        models.len(),
        n - train_count
    );

    let mut lines = vec!["model,peephole,gates,roles,params,mse,mae,ssim,train_wall_ms".to_string()];
    let mut failures: Vec<(ModelId, String)> = Vec::new();
    for model in &models {
        eprintln!("[zoo] training {model}...");
        match run_zoo_model(*model, &flags, h, w, c, seed, &train_cfg, &train_set, &eval_set) {
            Ok(line) => lines.push(line),
            Err(e) => {
                eprintln!("[zoo] {model} failed: {e}");
                let (peep, gates, roles, params) = zoo_labels(*model, &flags, h, w, c);
                lines.push(format!("{model},{peep},{gates},{roles},{params},nan,nan,nan,nan"));
                failures.push((*model, e.to_string()));
            }
        }
    }
    for (m, msg) in &failures {
        lines.push(format!("# {m} failed: {msg}"));
    }
    let mut csv = lines.join("\n");
    csv.push('\n');
    match &out_path {
        Some(p) => {
            write_text(p, &csv)?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    if failures.len() == models.len() {
        return Err(Error::verification("every zoo model failed"));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_zoo_model(
    model: ModelId,
    flags: &StackFlags,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
    train_cfg: &TrainConfig,
    train_set: &SequenceSet,
    eval_set: &SequenceSet,
) -> Result<String> {
    let config = build_stack_config(flags, model, h, w, c)?;
    let spec = config.cell_spec();
    let peep = spec.peephole.name();
    let gates = spec.gates_label().replace(',', "+");
    let roles = spec.roles_label().replace(',', "+");
    let mut stack = Stack::init(config, seed)?;
    let params = stack.param_total();
    let started = Instant::now();
    train(&mut stack, train_set, train_cfg)?;
    let wall = started.elapsed().as_millis();
    let summary = evaluate(&stack, eval_set)?;
    let r = &summary.report;
    Ok(format!("{model},{peep},{gates},{roles},{params},{},{},{},{wall}", r.mse, r.mae, r.ssim))
}

/// Identity cells for a failure row; params falls back to nan when even the
/// architecture cannot be described.
fn zoo_labels(
    model: ModelId,
    flags: &StackFlags,
    h: usize,
    w: usize,
    c: usize,
) -> (&'static str, String, String, String) {
    let spec = if flags.elementwise_peephole {
        model_spec(model).with_elementwise_peephole()
    } else {
        model_spec(model)
    };
    let params = build_stack_config(flags, model, h, w, c)
        .and_then(|cfg| audit_stack(&cfg))
        .map(|a| a.total.to_string())
        .unwrap_or_else(|_| "nan".to_string());
    (
        spec.peephole.name(),
        spec.gates_label().replace(',', "+"),
        spec.roles_label().replace(',', "+"),
        params,
    )
}
