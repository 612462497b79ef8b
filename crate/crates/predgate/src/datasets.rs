//! Synthetic moving-shape videos and their binary container.
//!
//! The generator places binary shapes (filled squares or plus-shaped
//! crosses) at random integer positions with random integer velocities, then
//! advances them frame by frame, either reflecting elastically off the
//! canvas walls or wrapping around. Pixels covered by any shape are 1.0,
//! the rest 0.0.
//!
//! Container layout (integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  "PGSQ"
//! version  u16      currently 1
//! reserved u16      0
//! count    u32      sequences
//! frames   u32      frames per sequence
//! height   u32
//! width    u32
//! channels u32
//! data     f32 × count·frames·height·width·channels
//!          (sequence, frame, row, column, channel) order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

const MAGIC: [u8; 4] = *b"PGSQ";
const VERSION: u16 = 1;

/// Shape silhouette drawn into each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// Filled side×side square.
    Square,
    /// Centre row and centre column of a side×side box.
    Cross,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<ShapeKind> {
        match s {
            "square" => Ok(ShapeKind::Square),
            "cross" => Ok(ShapeKind::Cross),
            other => Err(Error::config(format!("unknown shape kind '{other}'"))),
        }
    }

    /// Lit pixels per shape instance.
    pub fn mass(self, side: usize) -> usize {
        match self {
            ShapeKind::Square => side * side,
            ShapeKind::Cross => 2 * side - 1,
        }
    }
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeGenConfig {
    /// Square canvas side (frames are canvas×canvas×1).
    pub canvas: usize,
    /// Shapes per sequence.
    pub shapes: usize,
    pub kind: ShapeKind,
    /// Shape bounding-box side (odd so crosses have a centre).
    pub side: usize,
    /// Velocity components are drawn from [-max_speed, max_speed].
    pub max_speed: i64,
    /// Frames per sequence.
    pub frames: usize,
    pub seed: u64,
    /// Reflect off walls; wraps around when false.
    pub bounce: bool,
}

impl Default for ShapeGenConfig {
    fn default() -> Self {
        ShapeGenConfig {
            canvas: 16,
            shapes: 2,
            kind: ShapeKind::Square,
            side: 3,
            max_speed: 2,
            frames: 10,
            seed: 7,
            bounce: true,
        }
    }
}

impl ShapeGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 || self.frames == 0 || self.shapes == 0 {
            return Err(Error::config("canvas, frames, and shapes must be positive"));
        }
        if self.side == 0 || self.side % 2 == 0 {
            return Err(Error::config(format!("shape side {} must be odd", self.side)));
        }
        if self.side > self.canvas {
            return Err(Error::config(format!(
                "side {} does not fit a {} canvas",
                self.side, self.canvas
            )));
        }
        if self.max_speed < 0 {
            return Err(Error::config("max_speed must be non-negative"));
        }
        let corridor = (self.canvas - self.side) as i64;
        if self.max_speed > corridor {
            return Err(Error::config(format!(
                "max_speed {} exceeds the {corridor}-pixel travel range; a single step could \
                 cross both walls",
                self.max_speed
            )));
        }
        Ok(())
    }

    /// All velocities a shape may be assigned: the integer grid minus the
    /// zero vector — except when zero is the grid's only point.
    fn velocity_candidates(&self) -> Vec<(i64, i64)> {
        let s = self.max_speed;
        let mut v = Vec::new();
        for dr in -s..=s {
            for dc in -s..=s {
                if (dr, dc) != (0, 0) {
                    v.push((dr, dc));
                }
            }
        }
        if v.is_empty() {
            v.push((0, 0));
        }
        v
    }
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    row: i64,
    col: i64,
    v_row: i64,
    v_col: i64,
}

/// Advance one coordinate by `v`, reflecting off 0 and `max` (elastic) or
/// wrapping. Returns the new position and velocity.
fn advance_axis(pos: i64, v: i64, max: i64, bounce: bool) -> (i64, i64) {
    let tentative = pos + v;
    if !bounce {
        let period = max + 1;
        return ((tentative).rem_euclid(period), v);
    }
    if tentative < 0 {
        (-tentative, -v)
    } else if tentative > max {
        (2 * max - tentative, -v)
    } else {
        (tentative, v)
    }
}

fn draw_shape(frame: &mut ImageTensor, kind: ShapeKind, side: usize, row: usize, col: usize) {
    let half = side / 2;
    for dr in 0..side {
        for dc in 0..side {
            let lit = match kind {
                ShapeKind::Square => true,
                ShapeKind::Cross => dr == half || dc == half,
            };
            if lit {
                frame.set(row + dr, col + dc, 0, 1.0);
            }
        }
    }
}

/// Generate `count` sequences. Deterministic given the config (including
/// its seed).
pub fn gen_sequences(cfg: &ShapeGenConfig, count: usize) -> Result<SequenceSet> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::config("need at least one sequence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let candidates = cfg.velocity_candidates();
    let max = (cfg.canvas - cfg.side) as i64;
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let mut movers: Vec<Mover> = (0..cfg.shapes)
            .map(|_| {
                let row = rng.gen_range(0..=max);
                let col = rng.gen_range(0..=max);
                let (v_row, v_col) = candidates[rng.gen_range(0..candidates.len())];
                Mover { row, col, v_row, v_col }
            })
            .collect();
        let mut frames = Vec::with_capacity(cfg.frames);
        for _ in 0..cfg.frames {
            let mut frame = ImageTensor::zeros(cfg.canvas, cfg.canvas, 1);
            for m in &movers {
                draw_shape(&mut frame, cfg.kind, cfg.side, m.row as usize, m.col as usize);
            }
            frames.push(frame);
            for m in movers.iter_mut() {
                let (row, v_row) = advance_axis(m.row, m.v_row, max, cfg.bounce);
                let (col, v_col) = advance_axis(m.col, m.v_col, max, cfg.bounce);
                *m = Mover { row, col, v_row, v_col };
            }
        }
        sequences.push(frames);
    }
    SequenceSet::new(sequences)
}

/// A batch of equally-shaped frame sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    sequences: Vec<Vec<ImageTensor>>,
}

impl SequenceSet {
    pub fn new(sequences: Vec<Vec<ImageTensor>>) -> Result<SequenceSet> {
        let first = sequences
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::config("sequence set cannot be empty"))?;
        let shape = first.shape();
        let frames = sequences[0].len();
        for (i, seq) in sequences.iter().enumerate() {
            if seq.len() != frames {
                return Err(Error::config(format!(
                    "sequence {i} has {} frames, expected {frames}",
                    seq.len()
                )));
            }
            for (t, f) in seq.iter().enumerate() {
                if f.shape() != shape {
                    return Err(Error::config(format!(
                        "sequence {i} frame {t} has shape {:?}, expected {shape:?}",
                        f.shape()
                    )));
                }
            }
        }
        Ok(SequenceSet { sequences })
    }

    pub fn sequences(&self) -> &[Vec<ImageTensor>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// (count, frames, height, width, channels)
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let (h, w, c) = self.sequences[0][0].shape();
        (self.sequences.len(), self.sequences[0].len(), h, w, c)
    }

    /// Borrow a contiguous range of sequences as a new set.
    pub fn slice(&self, start: usize, len: usize) -> Result<SequenceSet> {
        if start + len > self.sequences.len() || len == 0 {
            return Err(Error::config(format!(
                "cannot take sequences {start}..{} of {}",
                start + len,
                self.sequences.len()
            )));
        }
        SequenceSet::new(self.sequences[start..start + len].to_vec())
    }
}

/// Serialize a sequence set (values narrowed to f32).
pub fn write_sequences<W: Write>(mut w: W, set: &SequenceSet) -> Result<()> {
    let ctx = "writing sequences";
    let (count, frames, height, width, channels) = set.dims();
    w.write_all(&MAGIC).map_err(|e| Error::io(ctx, e))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(|e| Error::io(ctx, e))?;
    w.write_all(&0u16.to_le_bytes()).map_err(|e| Error::io(ctx, e))?;
    for d in [count, frames, height, width, channels] {
        w.write_all(&(d as u32).to_le_bytes()).map_err(|e| Error::io(ctx, e))?;
    }
    for seq in set.sequences() {
        for frame in seq {
            for v in frame.data() {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(ctx, e))?;
            }
        }
    }
    Ok(())
}

/// Deserialize a sequence set (values widened back to f64).
pub fn read_sequences<R: Read>(mut r: R) -> Result<SequenceSet> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "sequence magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = read_u16(&mut r, "sequence version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
    }
    let _reserved = read_u16(&mut r, "sequence reserved field")?;
    let count = read_u32(&mut r, "sequence count")? as usize;
    let frames = read_u32(&mut r, "frame count")? as usize;
    let height = read_u32(&mut r, "height")? as usize;
    let width = read_u32(&mut r, "width")? as usize;
    let channels = read_u32(&mut r, "channel count")? as usize;
    if count == 0 || frames == 0 || height == 0 || width == 0 || channels == 0 {
        return Err(Error::config("sequence header has a zero dimension"));
    }
    let per_frame = height * width * channels;
    let mut bytes = vec![0u8; 4 * per_frame];
    let mut sequences = Vec::with_capacity(count);
    for s in 0..count {
        let mut seq = Vec::with_capacity(frames);
        for t in 0..frames {
            read_exact(&mut r, &mut bytes, &format!("sequence {s} frame {t}"))?;
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect();
            seq.push(ImageTensor::new(height, width, channels, data)?);
        }
        sequences.push(seq);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => SequenceSet::new(sequences),
        Ok(_) => Err(Error::config("sequence file has trailing bytes")),
        Err(e) => Err(Error::io("checking for trailing bytes", e)),
    }
}

/// Write a sequence file.
pub fn save_sequences(path: &Path, set: &SequenceSet) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_sequences(&mut w, set)?;
    w.flush().map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

/// Read a sequence file.
pub fn load_sequences(path: &Path) -> Result<SequenceSet> {
    let file = File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_sequences(BufReader::new(file))
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_config_freezes_every_frame() {
        let cfg = ShapeGenConfig { max_speed: 0, ..Default::default() };
        let set = gen_sequences(&cfg, 3).unwrap();
        for seq in set.sequences() {
            for frame in &seq[1..] {
                assert_eq!(frame.data(), seq[0].data());
            }
        }
    }

    #[test]
    fn advance_moves_then_reflects_elastically() {
        // Free flight.
        assert_eq!(advance_axis(5, 2, 13, true), (7, 2));
        // Bottom wall: tentative −2 reflects to +2, velocity flips.
        assert_eq!(advance_axis(1, -3, 13, true), (2, 3));
        // Top wall: tentative 15 over max 13 reflects to 11.
        assert_eq!(advance_axis(13, 2, 13, true), (11, -2));
        // Exact landing on a wall does not flip.
        assert_eq!(advance_axis(11, 2, 13, true), (13, 2));
        assert_eq!(advance_axis(2, -2, 13, true), (0, -2));
    }

    #[test]
    fn advance_wraps_when_not_bouncing() {
        assert_eq!(advance_axis(13, 2, 13, false), (1, 2));
        assert_eq!(advance_axis(0, -1, 13, false), (13, -1));
        assert_eq!(advance_axis(5, 2, 13, false), (7, 2));
    }

    #[test]
    fn frames_are_binary() {
        let set = gen_sequences(&ShapeGenConfig::default(), 4).unwrap();
        for seq in set.sequences() {
            for frame in seq {
                assert!(frame.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn single_shape_mass_is_conserved() {
        for kind in [ShapeKind::Square, ShapeKind::Cross] {
            let cfg = ShapeGenConfig { shapes: 1, kind, ..Default::default() };
            let set = gen_sequences(&cfg, 5).unwrap();
            let mass = kind.mass(cfg.side) as f64;
            for seq in set.sequences() {
                for frame in seq {
                    assert_eq!(frame.data().iter().sum::<f64>(), mass, "{}", kind.name());
                }
            }
        }
    }

    #[test]
    fn overlapping_shapes_never_exceed_union_mass() {
        let cfg = ShapeGenConfig::default();
        let set = gen_sequences(&cfg, 6).unwrap();
        let cap = (cfg.shapes * cfg.kind.mass(cfg.side)) as f64;
        for seq in set.sequences() {
            for frame in seq {
                let mass = frame.data().iter().sum::<f64>();
                assert!(mass > 0.0 && mass <= cap);
            }
        }
    }

    #[test]
    fn cross_draws_plus_silhouette() {
        let mut frame = ImageTensor::zeros(5, 5, 1);
        draw_shape(&mut frame, ShapeKind::Cross, 3, 1, 1);
        let lit: Vec<(usize, usize)> = (0..5)
            .flat_map(|r| (0..5).map(move |c| (r, c)))
            .filter(|&(r, c)| frame.get(r, c, 0) == 1.0)
            .collect();
        assert_eq!(lit, vec![(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)]);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = ShapeGenConfig::default();
        let a = gen_sequences(&cfg, 4).unwrap();
        let b = gen_sequences(&cfg, 4).unwrap();
        assert_eq!(a, b);
        let c = gen_sequences(&ShapeGenConfig { seed: 8, ..cfg }, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn speed_cannot_outrun_the_canvas() {
        let cfg = ShapeGenConfig { max_speed: 14, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ShapeGenConfig { side: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn container_round_trips_generated_data_exactly() {
        let set = gen_sequences(&ShapeGenConfig::default(), 3).unwrap();
        let mut bytes = Vec::new();
        write_sequences(&mut bytes, &set).unwrap();
        assert_eq!(bytes.len(), 28 + 3 * 10 * 16 * 16 * 4);
        let back = read_sequences(&bytes[..]).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn container_rejects_corruption() {
        let set = gen_sequences(&ShapeGenConfig::default(), 2).unwrap();
        let mut bytes = Vec::new();
        write_sequences(&mut bytes, &set).unwrap();

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(read_sequences(&bad[..]), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_sequences(&bad[..]), Err(Error::UnsupportedVersion { .. })));

        assert!(matches!(
            read_sequences(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated { .. })
        ));

        let mut bad = bytes.clone();
        bad.push(1);
        assert!(matches!(read_sequences(&bad[..]), Err(Error::Config(_))));
    }

    #[test]
    fn slice_takes_a_contiguous_range() {
        let set = gen_sequences(&ShapeGenConfig::default(), 5).unwrap();
        let tail = set.slice(3, 2).unwrap();
        assert_eq!(tail.len(), 2);
        assert_eq!(tail.sequences()[0], set.sequences()[3]);
        assert!(set.slice(4, 2).is_err());
    }
}
