//! Binary checkpoint container for trained stacks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "PGCK"
//! version u16      currently 1
//! config  u32 length + that many bytes of UTF-8 key=value lines
//! count   u32      number of parameter records
//! record  u32 name length + name bytes (UTF-8)
//!         4 × u32  dims — (m, m, in, out) for kernels,
//!                  (height, width, channels, 0) for elementwise tensors
//!         f64 × …  weights in storage order, then biases (kernels only)
//! ```
//!
//! A zero fourth dimension marks a rank-3 elementwise tensor, which carries
//! no bias block. Values are raw IEEE-754 bits, so a save/load cycle is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::stack::{ParamView, Stack, StackConfig};

const MAGIC: [u8; 4] = *b"PGCK";
const VERSION: u16 = 1;

fn io_err(context: &str) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(context, source)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::truncated(context)
        } else {
            Error::io(context, e)
        }
    })
}

fn read_u16(r: &mut impl Read, context: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, context)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, context: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, count: usize, context: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    read_exact(r, &mut bytes, context)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_string(r: &mut impl Read, context: &str) -> Result<String> {
    let len = read_u32(r, context)? as usize;
    let mut bytes = vec![0u8; len];
    read_exact(r, &mut bytes, context)?;
    String::from_utf8(bytes).map_err(|_| Error::config(format!("{context}: invalid UTF-8")))
}

/// Serialize a stack (architecture and all parameters) to a writer.
pub fn write_checkpoint<W: Write>(mut w: W, stack: &Stack) -> Result<()> {
    let ctx = "writing checkpoint";
    w.write_all(&MAGIC).map_err(io_err(ctx))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err(ctx))?;
    let config = stack.config().to_kv_text();
    w.write_all(&(config.len() as u32).to_le_bytes()).map_err(io_err(ctx))?;
    w.write_all(config.as_bytes()).map_err(io_err(ctx))?;

    let views = stack.named_param_views();
    w.write_all(&(views.len() as u32).to_le_bytes()).map_err(io_err(ctx))?;
    for (name, view) in views {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err(ctx))?;
        w.write_all(name.as_bytes()).map_err(io_err(ctx))?;
        match view {
            ParamView::Kernel(k) => {
                let (m0, m1, cin, cout) = k.dims();
                for d in [m0, m1, cin, cout] {
                    w.write_all(&(d as u32).to_le_bytes()).map_err(io_err(ctx))?;
                }
                for v in k.weights.iter().chain(&k.bias) {
                    w.write_all(&v.to_le_bytes()).map_err(io_err(ctx))?;
                }
            }
            ParamView::Elementwise(t) => {
                let (h, width, c) = t.shape();
                for d in [h, width, c, 0] {
                    w.write_all(&(d as u32).to_le_bytes()).map_err(io_err(ctx))?;
                }
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io_err(ctx))?;
                }
            }
        }
    }
    Ok(())
}

/// Deserialize a stack. The architecture is rebuilt from the embedded
/// config, then every record is checked by name and shape against it.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Stack> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "checkpoint magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = read_u16(&mut r, "checkpoint version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
    }
    let config_text = read_string(&mut r, "checkpoint config block")?;
    let config = StackConfig::from_kv_text(&config_text)?;
    let mut stack = Stack::init(config, 0)?;

    let expected: Vec<(String, (usize, usize, usize, usize), usize)> = stack
        .named_param_views()
        .into_iter()
        .map(|(name, view)| {
            let (shape, flat) = match view {
                ParamView::Kernel(k) => (k.dims(), k.param_count()),
                ParamView::Elementwise(t) => {
                    let (h, w, c) = t.shape();
                    ((h, w, c, 0), t.len())
                }
            };
            (name, shape, flat)
        })
        .collect();

    let count = read_u32(&mut r, "checkpoint record count")? as usize;
    if count != expected.len() {
        return Err(Error::config(format!(
            "checkpoint holds {count} parameters, architecture expects {}",
            expected.len()
        )));
    }
    for (name, shape, flat_len) in expected {
        let ctx = format!("record {name}");
        let stored_name = read_string(&mut r, &ctx)?;
        if stored_name != name {
            return Err(Error::config(format!(
                "checkpoint record order mismatch: expected {name}, found {stored_name}"
            )));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r, &ctx)? as usize;
        }
        let stored = (dims[0], dims[1], dims[2], dims[3]);
        if stored != shape {
            return Err(Error::config(format!(
                "parameter {name}: checkpoint shape {stored:?} does not match architecture {shape:?}"
            )));
        }
        let flat = read_f64s(&mut r, flat_len, &ctx)?;
        stack.set_flat_param(&name, &flat)?;
    }

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(stack),
        Ok(_) => Err(Error::config("checkpoint has trailing bytes after the last record")),
        Err(e) => Err(Error::io("checking for trailing bytes", e)),
    }
}

/// Write a checkpoint file.
pub fn save_stack(path: &Path, stack: &Stack) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, stack)?;
    w.flush().map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

/// Read a checkpoint file.
pub fn load_stack(path: &Path) -> Result<Stack> {
    let file = File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::ModelId;

    fn sample_stack(elementwise: bool) -> Stack {
        let mut cfg = StackConfig::new(ModelId::M18, 8, 8, vec![1, 4], vec![2, 4]);
        cfg.elementwise_peephole = elementwise;
        cfg.layer_weights = vec![1.0, 0.1];
        Stack::init(cfg, 99).unwrap()
    }

    fn to_bytes(stack: &Stack) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, stack).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for elementwise in [false, true] {
            let stack = sample_stack(elementwise);
            let loaded = read_checkpoint(&to_bytes(&stack)[..]).unwrap();
            assert_eq!(loaded.config(), stack.config());
            let a = stack.flatten();
            let b = loaded.flatten();
            assert_eq!(a.len(), b.len());
            for ((na, va), (nb, vb)) in a.iter().zip(&b) {
                assert_eq!(na, nb);
                assert_eq!(va.len(), vb.len());
                for (x, y) in va.iter().zip(vb) {
                    assert_eq!(x.to_bits(), y.to_bits(), "{na}");
                }
            }
        }
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pgck");
        let stack = sample_stack(false);
        save_stack(&path, &stack).unwrap();
        let loaded = load_stack(&path).unwrap();
        assert_eq!(loaded.flatten(), stack.flatten());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = to_bytes(&sample_stack(false));
        bytes[0] = b'X';
        match read_checkpoint(&bytes[..]) {
            Err(Error::BadMagic { expected, found }) => {
                assert_eq!(&expected, b"PGCK");
                assert_eq!(found[0], b'X');
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = to_bytes(&sample_stack(false));
        bytes[4] = 2;
        assert!(matches!(
            read_checkpoint(&bytes[..]),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = to_bytes(&sample_stack(false));
        for cut in [3, 5, 20, bytes.len() - 9] {
            assert!(
                matches!(read_checkpoint(&bytes[..cut]), Err(Error::Truncated { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = to_bytes(&sample_stack(false));
        bytes.push(0);
        assert!(matches!(read_checkpoint(&bytes[..]), Err(Error::Config(_))));
    }

    #[test]
    fn tampered_shape_names_both_sides() {
        let stack = sample_stack(false);
        let mut bytes = to_bytes(&stack);
        // First record's dims start right after its name; locate "f_0".
        let pos = bytes.windows(3).position(|w| w == b"f_0").unwrap() + 3;
        bytes[pos] = 5; // m: 3 → 5
        match read_checkpoint(&bytes[..]) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("f_0") && msg.contains('5') && msg.contains('3'), "{msg}");
            }
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_tensors_round_trip_with_rank3_marker() {
        let stack = sample_stack(true);
        let bytes = to_bytes(&stack);
        let loaded = read_checkpoint(&bytes[..]).unwrap();
        let has_peep = loaded
            .named_param_views()
            .iter()
            .any(|(n, v)| n.starts_with("peep_") && matches!(v, ParamView::Elementwise(_)));
        assert!(has_peep);
    }
}
