//! Raw loops behind the tape operations.
//!
//! Every reduction runs in a fixed order that depends only on the operand
//! extents, so results are bit-reproducible and row `i` of a product depends
//! only on row `i` of the left operand.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(a, &bt, out, m, n, k);
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Extents of a depthwise convolution output, or `None` when non-positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Visit every (input offset, kernel offset, output offset) triple.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, c, k) = (self.h as isize, self.w as isize, self.c, self.k);
        for n in 0..self.batch {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let out_base = ((n * self.oh + oy) * self.ow + ox) * c;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let in_base = ((n * self.h + iy as usize) * self.w + ix as usize) * c;
                            f(in_base, (ky * k + kx) * c, out_base);
                        }
                    }
                }
            }
        }
    }
}

pub fn depthwise_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], out: &mut [f64]) {
    let c = g.c;
    g.for_each(|xi, ki, oi| {
        let o = &mut out[oi..oi + c];
        let xs = &x[xi..xi + c];
        let ks = &kernel[ki..ki + c];
        for ((o, &xv), &kv) in o.iter_mut().zip(xs).zip(ks) {
            *o += xv * kv;
        }
    });
}

pub fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let c = g.c;
    if let Some(dx) = dx {
        g.for_each(|xi, ki, oi| {
            let d = &dout[oi..oi + c];
            let ks = &kernel[ki..ki + c];
            for ((t, &dv), &kv) in dx[xi..xi + c].iter_mut().zip(d).zip(ks) {
                *t += dv * kv;
            }
        });
    }
    if let Some(dk) = dk {
        g.for_each(|xi, ki, oi| {
            let d = &dout[oi..oi + c];
            let xs = &x[xi..xi + c];
            for ((t, &dv), &xv) in dk[ki..ki + c].iter_mut().zip(d).zip(xs) {
                *t += dv * xv;
            }
        });
    }
}

/// Source taps for one output coordinate of an align-corners-false bilinear
/// resize: `(lo, hi, weight_of_hi)`.
pub fn bilinear_taps(out_extent: usize, in_extent: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_extent as f64 / out_extent as f64;
    (0..out_extent)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_extent - 1);
            let hi = (lo + 1).min(in_extent - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (A * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    let u = A * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_product() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|i| (i * i) as f64 * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);

        let at = transpose(&a, 2, 3); // 3×2
        let mut c2 = vec![0.0; 8];
        matmul_at_b_acc(&at, &b, &mut c2, 3, 2, 4);
        assert_eq!(c, c2);

        let bt = transpose(&b, 3, 4); // 4×3
        let mut c3 = vec![0.0; 8];
        matmul_a_bt_acc(&a, &bt, &mut c3, 2, 3, 4);
        assert_eq!(c, c3);
    }

    #[test]
    fn conv_extents() {
        assert_eq!(conv_out_extent(4, 3, 2, 1), Some(2));
        assert_eq!(conv_out_extent(7, 7, 1, 3), Some(7));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
        assert_eq!(conv_out_extent(4, 3, 0, 1), None);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
