//! Hand-written reference implementations for the integration suites. These
//! deliberately share no code with the library: plain output-pixel-major
//! loops, one state-update equation per statement.

#![allow(dead_code)] // each test target uses a different slice of this

use predgate::tensor::{ImageTensor, KernelStack};

/// Same-padding cross-correlation, written the slow obvious way.
pub fn naive_conv_same(x: &ImageTensor, k: &KernelStack) -> ImageTensor {
    let (height, width, cin) = x.shape();
    let m = k.size_m();
    let cout = k.out_channels();
    assert_eq!(cin, k.in_channels(), "oracle conv channel mismatch");
    let pad = (m - 1) as isize / 2;
    let mut out = ImageTensor::zeros(height, width, cout);
    for r in 0..height {
        for col in 0..width {
            for o in 0..cout {
                let mut acc = k.bias[o];
                for dr in 0..m {
                    for dc in 0..m {
                        let rr = r as isize + dr as isize - pad;
                        let cc = col as isize + dc as isize - pad;
                        if rr < 0 || rr >= height as isize || cc < 0 || cc >= width as isize {
                            continue;
                        }
                        for i in 0..cin {
                            let w = k.weights[((dr * m + dc) * cin + i) * cout + o];
                            acc += x.get(rr as usize, cc as usize, i) * w;
                        }
                    }
                }
                out.set(r, col, o, acc);
            }
        }
    }
    out
}

pub fn concat_channels(parts: &[&ImageTensor]) -> ImageTensor {
    let (height, width, _) = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = ImageTensor::zeros(height, width, total);
    for r in 0..height {
        for c in 0..width {
            let mut ch = 0;
            for part in parts {
                for pc in 0..part.channels() {
                    out.set(r, c, ch, part.get(r, c, pc));
                    ch += 1;
                }
            }
        }
    }
    out
}

pub fn map_values(x: &ImageTensor, f: impl Fn(f64) -> f64) -> ImageTensor {
    let (h, w, c) = x.shape();
    ImageTensor::from_fn(h, w, c, |r, col, ch| f(x.get(r, col, ch)))
}

pub fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn hard_sig(v: f64) -> f64 {
    (0.25 * v + 0.5).min(1.0).max(0.0)
}

/// One step of the single-gate cell with its stacked-convolution peephole:
///
///   f  = hardSig(K_f * [x, h, c] + b_f)
///   g  = tanh(K_g * [x, h] + b_g)
///   c' = f (.) c + f (.) g
///   h' = f (.) tanh(c')
///
/// Returns (h', c').
pub fn oracle_single_gate_step(
    x: &ImageTensor,
    h: &ImageTensor,
    c: &ImageTensor,
    k_f: &KernelStack,
    k_g: &KernelStack,
) -> (ImageTensor, ImageTensor) {
    let (height, width, _) = x.shape();
    let n = c.channels();

    let gate_input = concat_channels(&[x, h, c]);
    let f = map_values(&naive_conv_same(&gate_input, k_f), hard_sig);

    let update_input = concat_channels(&[x, h]);
    let g = map_values(&naive_conv_same(&update_input, k_g), f64::tanh);

    let mut c_new = ImageTensor::zeros(height, width, n);
    let mut h_new = ImageTensor::zeros(height, width, n);
    for r in 0..height {
        for col in 0..width {
            for ch in 0..n {
                let fv = f.get(r, col, ch);
                let cv = fv * c.get(r, col, ch) + fv * g.get(r, col, ch);
                c_new.set(r, col, ch, cv);
                h_new.set(r, col, ch, fv * cv.tanh());
            }
        }
    }
    (h_new, c_new)
}

/// One step of the three-gate cell without peepholes:
///
///   f  = sigmoid(K_f * [x, h] + b_f)
///   i  = sigmoid(K_i * [x, h] + b_i)
///   o  = sigmoid(K_o * [x, h] + b_o)
///   g  = tanh(K_g * [x, h] + b_g)
///   c' = f (.) c + i (.) g
///   h' = tanh(c') (.) o
///
/// Returns (h', c').
pub fn oracle_three_gate_step(
    x: &ImageTensor,
    h: &ImageTensor,
    c: &ImageTensor,
    k_f: &KernelStack,
    k_i: &KernelStack,
    k_o: &KernelStack,
    k_g: &KernelStack,
) -> (ImageTensor, ImageTensor) {
    let (height, width, _) = x.shape();
    let n = c.channels();

    let gate_input = concat_channels(&[x, h]);
    let f = map_values(&naive_conv_same(&gate_input, k_f), logistic);
    let i = map_values(&naive_conv_same(&gate_input, k_i), logistic);
    let o = map_values(&naive_conv_same(&gate_input, k_o), logistic);
    let g = map_values(&naive_conv_same(&gate_input, k_g), f64::tanh);

    let mut c_new = ImageTensor::zeros(height, width, n);
    let mut h_new = ImageTensor::zeros(height, width, n);
    for r in 0..height {
        for col in 0..width {
            for ch in 0..n {
                let cv = f.get(r, col, ch) * c.get(r, col, ch) + i.get(r, col, ch) * g.get(r, col, ch);
                c_new.set(r, col, ch, cv);
                h_new.set(r, col, ch, cv.tanh() * o.get(r, col, ch));
            }
        }
    }
    (h_new, c_new)
}

/// |a-b| scaled by max(1, |a|, |b|), maximized over all elements.
pub fn max_mixed_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
