//! Dense multi-channel image tensors and the deterministic operation set the
//! rest of the crate is built on: `same` convolution, channel stacking,
//! elementwise arithmetic, 2×2 pooling/upsampling, and pointwise activations.
//!
//! All data is `f64`, row-major in (row, column, channel) order. Every
//! operation is a pure function; identical inputs produce bit-identical
//! outputs, which the file formats and determinism tests rely on.

use crate::error::{Error, Result};

/// A height × width × channels image held in row-major (row, column, channel)
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::config(format!(
                "image dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::config(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(ImageTensor { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageTensor { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        ImageTensor { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// (height, width, channels)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[(r * self.width + c) * self.channels + ch] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A bank of `out_channels` convolution kernels of side `size_m` over
/// `in_channels` input channels, plus one bias per output channel. Weights are
/// stored row-major in (kernel row, kernel column, in channel, out channel)
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    size_m: usize,
    in_channels: usize,
    out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl KernelStack {
    pub fn new(
        size_m: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if size_m == 0 || size_m % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd and positive, got {size_m}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config(format!(
                "kernel channels must be positive, got {in_channels}->{out_channels}"
            )));
        }
        if weights.len() != size_m * size_m * in_channels * out_channels {
            return Err(Error::config(format!(
                "kernel weight length {} does not match {size_m}x{size_m}x{in_channels}x{out_channels}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::config(format!(
                "kernel bias length {} does not match {out_channels} output channels",
                bias.len()
            )));
        }
        Ok(KernelStack { size_m, in_channels, out_channels, weights, bias })
    }

    pub fn zeros(size_m: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        KernelStack::new(
            size_m,
            in_channels,
            out_channels,
            vec![0.0; size_m * size_m * in_channels * out_channels],
            vec![0.0; out_channels],
        )
    }

    pub fn size_m(&self) -> usize {
        self.size_m
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// (m, m, in_channels, out_channels)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.size_m, self.size_m, self.in_channels, self.out_channels)
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn w_idx(&self, dr: usize, dc: usize, i: usize, o: usize) -> usize {
        ((dr * self.size_m + dc) * self.in_channels + i) * self.out_channels + o
    }

    #[inline]
    pub fn w(&self, dr: usize, dc: usize, i: usize, o: usize) -> f64 {
        self.weights[self.w_idx(dr, dc, i, o)]
    }
}

/// Pointwise nonlinearities used by the cells and the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    HardSig,
    Tanh,
    Relu,
    Sat01,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::HardSig => "hard_sig",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sat01 => "sat01",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::HardSig => (0.25 * x + 0.5).min(1.0).max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sat01 => x.min(1.0).max(0.0),
        }
    }

    /// Derivative at pre-activation `x`, with `y` the cached output value.
    /// Piecewise-linear kinds use open intervals, so the derivative is 0 at
    /// the kink itself.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::HardSig => {
                if x > -2.0 && x < 2.0 {
                    0.25
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sat01 => {
                if x > 0.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Zero-padded `same` convolution: output keeps the input's spatial dims and
/// takes the kernel stack's output channel count. Offsets are centered, so
/// dr, dc range over [−(m−1)/2, (m−1)/2]; the bias broadcasts per output
/// channel.
pub fn conv_same(x: &ImageTensor, k: &KernelStack) -> Result<ImageTensor> {
    if x.channels != k.in_channels {
        return Err(Error::config(format!(
            "conv_same: input has {} channels but kernel expects {}",
            x.channels, k.in_channels
        )));
    }
    let (h, w, cin) = x.shape();
    let cout = k.out_channels;
    let m = k.size_m;
    let p = (m as isize - 1) / 2;

    let mut out = vec![0.0; h * w * cout];
    for rc in 0..h * w {
        out[rc * cout..(rc + 1) * cout].copy_from_slice(&k.bias);
    }

    for dr in 0..m {
        let roff = dr as isize - p;
        for dc in 0..m {
            let coff = dc as isize - p;
            let wbase = (dr * m + dc) * cin * cout;
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
                    let ob = (r * w + c) * cout;
                    for i in 0..cin {
                        let xv = x.data[xb + i];
                        let wb = wbase + i * cout;
                        for o in 0..cout {
                            out[ob + o] += xv * k.weights[wb + o];
                        }
                    }
                }
            }
        }
    }
    Ok(ImageTensor { height: h, width: w, channels: cout, data: out })
}

/// Concatenate parts along the channel axis, in argument order.
pub fn stack_channels(parts: &[&ImageTensor]) -> Result<ImageTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("stack_channels: empty part list"))?;
    let (h, w, _) = first.shape();
    let mut total_c = 0;
    for part in parts {
        if part.height != h || part.width != w {
            return Err(Error::config(format!(
                "stack_channels: spatial mismatch, {}x{} vs {}x{}",
                part.height, part.width, h, w
            )));
        }
        total_c += part.channels;
    }
    let mut data = Vec::with_capacity(h * w * total_c);
    for rc in 0..h * w {
        for part in parts {
            let c = part.channels;
            data.extend_from_slice(&part.data[rc * c..(rc + 1) * c]);
        }
    }
    Ok(ImageTensor { height: h, width: w, channels: total_c, data })
}

/// Copy out `len` channels starting at channel `start`.
pub fn slice_channels(x: &ImageTensor, start: usize, len: usize) -> Result<ImageTensor> {
    if len == 0 || start + len > x.channels {
        return Err(Error::config(format!(
            "slice_channels: range {start}..{} out of {} channels",
            start + len,
            x.channels
        )));
    }
    let (h, w, c) = x.shape();
    let mut data = Vec::with_capacity(h * w * len);
    for rc in 0..h * w {
        let base = rc * c + start;
        data.extend_from_slice(&x.data[base..base + len]);
    }
    Ok(ImageTensor { height: h, width: w, channels: len, data })
}

fn ew_zip(a: &ImageTensor, b: &ImageTensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
    if !a.same_shape(b) {
        return Err(Error::config(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok(ImageTensor { height: a.height, width: a.width, channels: a.channels, data })
}

/// Pointwise product.
pub fn ew_mul(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    ew_zip(a, b, "ew_mul", |x, y| x * y)
}

/// Pointwise sum.
pub fn ew_add(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    ew_zip(a, b, "ew_add", |x, y| x + y)
}

/// Pointwise difference a − b.
pub fn ew_sub(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    ew_zip(a, b, "ew_sub", |x, y| x - y)
}

/// Apply an activation pointwise.
pub fn activation(x: &ImageTensor, kind: Activation) -> ImageTensor {
    let data = x.data.iter().map(|&v| kind.apply(v)).collect();
    ImageTensor { height: x.height, width: x.width, channels: x.channels, data }
}

/// Multiply every element by a constant.
pub fn scale(x: &ImageTensor, factor: f64) -> ImageTensor {
    let data = x.data.iter().map(|&v| v * factor).collect();
    ImageTensor { height: x.height, width: x.width, channels: x.channels, data }
}

/// 2×2 max-pool per channel; spatial dims halve.
pub fn maxpool2(x: &ImageTensor) -> Result<ImageTensor> {
    let (h, w, c) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("maxpool2: dims {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = ImageTensor::zeros(oh, ow, c);
    for r in 0..oh {
        for col in 0..ow {
            for ch in 0..c {
                let mut best = x.get(2 * r, 2 * col, ch);
                for (br, bc) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x.get(2 * r + br, 2 * col + bc, ch);
                    if v > best {
                        best = v;
                    }
                }
                out.set(r, col, ch, best);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor ×2 upsampling: each pixel replicates into a 2×2 block.
pub fn upsample2(x: &ImageTensor) -> ImageTensor {
    let (h, w, c) = x.shape();
    ImageTensor::from_fn(2 * h, 2 * w, c, |r, col, ch| x.get(r / 2, col / 2, ch))
}

/// Sum of all elements.
pub fn sum(x: &ImageTensor) -> f64 {
    x.data.iter().sum()
}

/// Mean of all elements.
pub fn mean(x: &ImageTensor) -> f64 {
    sum(x) / x.data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, m: usize, cin: usize, cout: usize, with_bias: bool) -> KernelStack {
        let weights = (0..m * m * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = if with_bias {
            (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect()
        } else {
            vec![0.0; cout]
        };
        KernelStack::new(m, cin, cout, weights, bias).unwrap()
    }

    /// Direct quadruple-loop convolution, kept deliberately naive so it can
    /// serve as an oracle for the production routine.
    fn conv_oracle(x: &ImageTensor, k: &KernelStack) -> ImageTensor {
        let (h, w, cin) = x.shape();
        let m = k.size_m();
        let p = (m as isize - 1) / 2;
        ImageTensor::from_fn(h, w, k.out_channels(), |r, c, o| {
            let mut acc = k.bias[o];
            for dr in 0..m {
                for dc in 0..m {
                    let rr = r as isize + dr as isize - p;
                    let cc = c as isize + dc as isize - p;
                    if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                        continue;
                    }
                    for i in 0..cin {
                        acc += x.get(rr as usize, cc as usize, i) * k.w(dr, dc, i, o);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_ramp_all_ones_kernel() {
        let x = ImageTensor::new(3, 3, 1, (1..=9).map(f64::from).collect()).unwrap();
        let k = KernelStack::new(3, 1, 1, vec![1.0; 9], vec![0.0]).unwrap();
        let y = conv_same(&x, &k).unwrap();
        assert_eq!(y.get(1, 1, 0), 45.0);
        assert_eq!(y.get(0, 0, 0), 12.0);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w, cin, cout, m) in [(3, 3, 2, 1, 3), (5, 4, 3, 2, 3), (6, 6, 1, 4, 5), (4, 7, 2, 3, 1)] {
            let x = random_image(&mut rng, h, w, cin);
            let k = random_kernel(&mut rng, m, cin, cout, true);
            let got = conv_same(&x, &k).unwrap();
            let want = conv_oracle(&x, &k);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_identity_kernel_any_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for c in [1, 3, 5] {
            let x = random_image(&mut rng, 4, 6, c);
            let mut k = KernelStack::zeros(3, c, c).unwrap();
            for ch in 0..c {
                let idx = k.w_idx(1, 1, ch, ch);
                k.weights[idx] = 1.0;
            }
            let y = conv_same(&x, &k).unwrap();
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn conv_zero_input_yields_bias_planes() {
        let x = ImageTensor::zeros(4, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = random_kernel(&mut rng, 3, 2, 3, true);
        let y = conv_same(&x, &k).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                for o in 0..3 {
                    assert_eq!(y.get(r, c, o), k.bias[o]);
                }
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input_when_bias_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_image(&mut rng, 5, 5, 2);
        let y = random_image(&mut rng, 5, 5, 2);
        let k = random_kernel(&mut rng, 3, 2, 2, false);
        let (alpha, beta) = (0.37, -1.21);
        let mixed = ew_add(&scale(&x, alpha), &scale(&y, beta)).unwrap();
        let lhs = conv_same(&mixed, &k).unwrap();
        let rhs = ew_add(
            &scale(&conv_same(&x, &k).unwrap(), alpha),
            &scale(&conv_same(&y, &k).unwrap(), beta),
        )
        .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let x = ImageTensor::zeros(4, 4, 2);
        let k = KernelStack::zeros(3, 3, 1).unwrap();
        assert!(matches!(conv_same(&x, &k), Err(Error::Config(_))));
        assert!(KernelStack::zeros(2, 1, 1).is_err());
    }

    #[test]
    fn stack_concatenates_in_order_and_slices_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let parts = [
            random_image(&mut rng, 4, 4, 2),
            random_image(&mut rng, 4, 4, 3),
            random_image(&mut rng, 4, 4, 1),
        ];
        let refs: Vec<&ImageTensor> = parts.iter().collect();
        let stacked = stack_channels(&refs).unwrap();
        assert_eq!(stacked.shape(), (4, 4, 6));
        let mut offset = 0;
        for part in &parts {
            let back = slice_channels(&stacked, offset, part.channels()).unwrap();
            assert_eq!(back.data(), part.data());
            offset += part.channels();
        }
    }

    #[test]
    fn stack_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = random_image(&mut rng, 3, 3, 1);
        let b = random_image(&mut rng, 3, 3, 2);
        let c = random_image(&mut rng, 3, 3, 3);
        let ab = stack_channels(&[&a, &b]).unwrap();
        let left = stack_channels(&[&ab, &c]).unwrap();
        let bc = stack_channels(&[&b, &c]).unwrap();
        let right = stack_channels(&[&a, &bc]).unwrap();
        let flat = stack_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(left.data(), flat.data());
        assert_eq!(right.data(), flat.data());
    }

    #[test]
    fn stack_sums_channels_of_many_parts() {
        let parts = [
            ImageTensor::zeros(64, 64, 2),
            ImageTensor::zeros(64, 64, 48),
            ImageTensor::zeros(64, 64, 1),
            ImageTensor::zeros(64, 64, 1),
        ];
        let refs: Vec<&ImageTensor> = parts.iter().collect();
        assert_eq!(stack_channels(&refs).unwrap().shape(), (64, 64, 52));
    }

    #[test]
    fn stack_rejects_spatial_mismatch() {
        let a = ImageTensor::zeros(4, 4, 1);
        let b = ImageTensor::zeros(4, 5, 1);
        assert!(stack_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = ImageTensor::new(1, 1, 1, vec![0.5]).unwrap();
        let b = ImageTensor::new(1, 1, 1, vec![0.4]).unwrap();
        assert_eq!(ew_mul(&a, &b).unwrap().data(), &[0.2]);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_image(&mut rng, 4, 4, 2);
        let ones = ImageTensor::filled(4, 4, 2, 1.0);
        let zeros = ImageTensor::zeros(4, 4, 2);
        assert_eq!(ew_mul(&x, &ones).unwrap().data(), x.data());
        assert_eq!(ew_add(&x, &zeros).unwrap().data(), x.data());
        assert!(ew_add(&x, &ImageTensor::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn elementwise_distributivity_within_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let f = random_image(&mut rng, 5, 5, 3);
        let c = random_image(&mut rng, 5, 5, 3);
        let g = random_image(&mut rng, 5, 5, 3);
        let lhs = ew_add(&ew_mul(&f, &c).unwrap(), &ew_mul(&f, &g).unwrap()).unwrap();
        let rhs = ew_mul(&f, &ew_add(&c, &g).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::HardSig.apply(0.0), 0.5);
        assert_eq!(Activation::HardSig.apply(2.0), 1.0);
        assert_eq!(Activation::HardSig.apply(-4.0), 0.0);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Sat01.apply(1.7), 1.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn hard_sig_slope_is_exactly_quarter_on_linear_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let y: f64 = rng.gen_range(-2.0..2.0);
            let lhs = Activation::HardSig.apply(x) - Activation::HardSig.apply(y);
            let rhs = 0.25 * (x - y);
            assert!((lhs - rhs).abs() <= 1e-15, "x={x} y={y}");
        }
    }

    #[test]
    fn maxpool_frozen_ramp() {
        let x = ImageTensor::new(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        let y = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_block_and_errors() {
        let x = ImageTensor::new(2, 2, 1, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[0.9]);
        assert!(maxpool2(&ImageTensor::zeros(3, 4, 1)).is_err());
        let c = ImageTensor::filled(4, 4, 2, 0.7);
        let pooled = maxpool2(&c).unwrap();
        assert_eq!(pooled.shape(), (2, 2, 2));
        assert!(pooled.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn upsample_replicates_and_inverts_under_maxpool() {
        let x = ImageTensor::new(1, 1, 1, vec![0.7]).unwrap();
        assert_eq!(upsample2(&x).data(), &[0.7; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let y = random_image(&mut rng, 3, 5, 2);
        let back = maxpool2(&upsample2(&y)).unwrap();
        assert_eq!(back.data(), y.data());

        assert_eq!(upsample2(&ImageTensor::zeros(32, 32, 48)).shape(), (64, 64, 48));
    }

    #[test]
    fn operations_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_image(&mut rng, 6, 6, 3);
        let k = random_kernel(&mut rng, 3, 3, 2, true);
        let a = conv_same(&x, &k).unwrap();
        let b = conv_same(&x, &k).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(activation(&x, Activation::Sigmoid).data(), activation(&x, Activation::Sigmoid).data());
    }
}
