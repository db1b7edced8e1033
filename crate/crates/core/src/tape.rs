//! Reverse-mode differentiation over a linear tape.
//!
//! Operations append nodes to the tape as they execute, so node order is a
//! topological order by construction. [`Tape::backward`] walks the nodes once
//! in reverse and only propagates into inputs that require a gradient.
//!
//! There is no general broadcasting. The only mixed-shape operations are the
//! trailing-axis affine forms ([`Tape::add_row`], [`Tape::mul_row`]) and the
//! per-row scaling [`Tape::mul_col`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct SoftmaxGeom {
    outer: usize,
    len: usize,
    inner: usize,
}

impl SoftmaxGeom {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Calls `f` with the flat offsets of every slice along the axis.
    fn for_each_slice(&self, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let stride = self.inner;
                let mut it = (0..self.len).map(|a| base + a * stride);
                f(&mut it);
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, SoftmaxGeom),
    LogSoftmax(Var, SoftmaxGeom),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Rc<[bool]>>,
        probs: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Patchify {
        x: Var,
        dims: [usize; 4],
        patch: usize,
    },
    Resize {
        x: Var,
        dims: [usize; 4],
        out_h: usize,
        out_w: usize,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Rope {
        x: Var,
        base: f64,
        offset: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf nodes after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when nothing reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when nothing reached it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_extent(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Value-identical copy severed from the tape: nothing flows back into `x`
    /// through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let data = t.rows().map(|r| r.iter().sum()).collect();
        let value = Tensor::new(&shape, data).expect("sum_last shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SumLast(x), rg)
    }

    fn check_row_param(&self, op: &'static str, x: Var, p: Var) -> Result<()> {
        let (vx, vp) = (self.value(x), self.value(p));
        if vp.rank() != 1 || vx.rank() == 0 || vp.numel() != last_extent(vx) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vx.shape().to_vec(),
                rhs: vp.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `x[..., n] + b[n]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_row_param("add_row", x, b)?;
        let (vx, vb) = (self.value(x), self.value(b));
        let mut out = vx.clone();
        let n = vb.numel();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[..., n] * g[n]`
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.check_row_param("mul_row", x, g)?;
        let (vx, vg) = (self.value(x), self.value(g));
        let mut out = vx.clone();
        let n = vg.numel();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &gv) in row.iter_mut().zip(vg.data()) {
                *o *= gv;
            }
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    /// Scales row `r` of `x` (viewed as `[rows, last]`) by `s[r]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let n = last_extent(vx);
        if vx.rank() == 0 || vs.numel() * n != vx.numel() {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                lhs: vx.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        let mut out = vx.clone();
        for (row, &sv) in out.data_mut().chunks_exact_mut(n).zip(vs.data()) {
            for o in row {
                *o *= sv;
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulCol(x, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs rank 2, got {:?}",
                vx.shape()
            )));
        }
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let value = Tensor::new(&[c, r], kernels::transpose(vx.data(), r, c))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    fn softmax_geom(&self, x: Var, axis: usize) -> Result<SoftmaxGeom> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for {:?}",
                vx.shape()
            )));
        }
        if !vx.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        Ok(SoftmaxGeom::new(vx.shape(), axis))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let geom = self.softmax_geom(x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        geom.for_each_slice(|idx| {
            let idx: Vec<usize> = idx.collect();
            let max = idx
                .iter()
                .map(|&i| src[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in &idx {
                let e = (src[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for &i in &idx {
                out[i] /= total;
            }
        });
        let value = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, geom), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let geom = self.softmax_geom(x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        geom.for_each_slice(|idx| {
            let idx: Vec<usize> = idx.collect();
            let max = idx
                .iter()
                .map(|&i| src[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.iter().map(|&i| (src[i] - max).exp()).sum::<f64>().ln();
            for &i in &idx {
                out[i] = src[i] - lse;
            }
        });
        let value = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x, geom), rg))
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// (biased) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_row_param("layer_norm", x, gain)?;
        self.check_row_param("layer_norm", x, bias)?;
        let vx = self.value(x);
        let n = last_extent(vx);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.numel() / n;
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for (r, row) in vx.rows().enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q[Lq×d]`, `k[Lk×d]`, `v[Lk×d]`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`. `mask[i·Lk + j]` allows query `i` to see
    /// key `j`; disallowed keys are skipped outright, and a query that may see
    /// no key produces a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Rc<[bool]>>,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.rank() != 2 || vk.rank() != 2 || vv.rank() != 2 {
            return Err(Error::invalid("attention operands must be rank 2"));
        }
        let (lq, d) = (vq.shape()[0], vq.shape()[1]);
        let lk = vk.shape()[0];
        if vk.shape()[1] != d || vv.shape() != vk.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: vq.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = &mask {
            if m.len() != lq * lk {
                return Err(Error::invalid(format!(
                    "attention mask has {} entries, expected {lq}×{lk}",
                    m.len()
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..lq {
                let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[i * lk + j]);
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..lk {
                    if !allowed(j) {
                        continue;
                    }
                    let kj = &kd[j * d + c0..j * d + c0 + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..lk {
                    if allowed(j) {
                        let e = (p[j] - max).exp();
                        p[j] = e;
                        total += e;
                    }
                }
                let o = &mut out[i * d + c0..i * d + c0 + dh];
                for j in 0..lk {
                    if allowed(j) {
                        p[j] /= total;
                        let vj = &vd[j * d + c0..j * d + c0 + dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += p[j] * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[lq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            rg,
        ))
    }

    /// Per-channel convolution of `x[h×w×c]` or `x[n×h×w×c]` with
    /// `kernel[k×k×c]`, zero padding.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (batch, h, w, c) = match *vx.shape() {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::invalid(format!(
                    "depthwise_conv input {:?}",
                    vx.shape()
                )))
            }
        };
        let k = vk.shape().first().copied().unwrap_or(0);
        if vk.shape() != [k, k, c] || k % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv",
                lhs: vx.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        let (oh, ow) = match (
            kernels::conv_out_extent(h, k, stride, pad),
            kernels::conv_out_extent(w, k, stride, pad),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::invalid(format!(
                    "stride {stride} / pad {pad} give an empty output for {h}×{w} with kernel {k}"
                )))
            }
        };
        let geom = ConvGeom {
            batch,
            h,
            w,
            c,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let mut out = vec![0.0; batch * oh * ow * c];
        kernels::depthwise_forward(&geom, vx.data(), vk.data(), &mut out);
        let shape: Vec<usize> = if vx.rank() == 3 {
            vec![oh, ow, c]
        } else {
            vec![batch, oh, ow, c]
        };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(value, Op::DepthwiseConv { x, kernel, geom }, rg))
    }

    /// `x[n×h×w×c]` → `[n·(h/p)·(w/p) × p·p·c]`, each row one non-overlapping
    /// patch flattened in `(row, col, channel)` order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let vx = self.value(x);
        let [n, h, w, c] = match *vx.shape() {
            [n, h, w, c] => [n, h, w, c],
            _ => return Err(Error::invalid(format!("patchify input {:?}", vx.shape()))),
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::invalid(format!(
                "{h}×{w} not divisible by patch {patch}"
            )));
        }
        let (ph, pw) = (h / patch, w / patch);
        let row_len = patch * patch * c;
        let src = vx.data();
        let mut out = vec![0.0; vx.numel()];
        for b in 0..n {
            for py in 0..ph {
                for px in 0..pw {
                    let row = ((b * ph + py) * pw + px) * row_len;
                    for dy in 0..patch {
                        let s = ((b * h + py * patch + dy) * w + px * patch) * c;
                        let o = row + dy * patch * c;
                        out[o..o + patch * c].copy_from_slice(&src[s..s + patch * c]);
                    }
                }
            }
        }
        let value = Tensor::new(&[n * ph * pw, row_len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Patchify {
                x,
                dims: [n, h, w, c],
                patch,
            },
            rg,
        ))
    }

    /// Bilinear resize of `x[h×w×c]` or `x[n×h×w×c]` with half-pixel
    /// (align-corners-false) sampling; source coordinates are clamped to the
    /// input extent.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let vx = self.value(x);
        let [n, h, w, c] = match *vx.shape() {
            [h, w, c] => [1, h, w, c],
            [n, h, w, c] => [n, h, w, c],
            _ => {
                return Err(Error::invalid(format!(
                    "bilinear_resize input {:?}",
                    vx.shape()
                )))
            }
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("bilinear_resize needs positive extents"));
        }
        let ty = kernels::bilinear_taps(out_h, h);
        let tx = kernels::bilinear_taps(out_w, w);
        let src = vx.data();
        let mut out = vec![0.0; n * out_h * out_w * c];
        for b in 0..n {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let o = ((b * out_h + oy) * out_w + ox) * c;
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (yy, xx, wgt) in taps {
                        let s = ((b * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += wgt * src[s + ch];
                        }
                    }
                }
            }
        }
        let shape: Vec<usize> = if vx.rank() == 3 {
            vec![out_h, out_w, c]
        } else {
            vec![n, out_h, out_w, c]
        };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Resize {
                x,
                dims: [n, h, w, c],
                out_h,
                out_w,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.rank() == 0 || vp.shape()[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: vp.shape().to_vec(),
                });
            }
            rows += vp.shape()[0];
            data.extend_from_slice(vp.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start .. start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 || start + len > vx.shape()[0] {
            return Err(Error::invalid(format!(
                "rows {start}..{} out of range for {:?}",
                start + len,
                vx.shape()
            )));
        }
        let row = vx.numel() / vx.shape()[0];
        let data = vx.data()[start * row..(start + len) * row].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    /// Selects rows along the first axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 || idx.iter().any(|&i| i >= vx.shape()[0]) {
            return Err(Error::invalid(format!(
                "gather_rows index out of range for {:?}",
                vx.shape()
            )));
        }
        let row = vx.numel() / vx.shape()[0];
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&vx.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Rotary embedding of `x[L×d]`: row `r` sits at position `offset + r` and
    /// each coordinate pair `(2m, 2m+1)` is rotated by `pos · base^(-2m/d)`.
    pub fn rope(&mut self, x: Var, base: f64, offset: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || !vx.shape()[1].is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "rope needs [L×d] with even d, got {:?}",
                vx.shape()
            )));
        }
        let mut out = vx.data().to_vec();
        rotate_pairs(&mut out, vx.shape()[1], base, offset, false);
        let value = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Rope { x, base, offset }, rg))
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let vo = self.value(out);
        if vo.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                vo.shape()
            )));
        }
        self.backward_with(&[(out, Tensor::new(vo.shape(), vec![1.0])?)])
    }

    /// Backward pass seeded with explicit output gradients.
    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            same_shape("backward seed", self.value(*v), g)?;
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; g.numel()]);
            for (s, &x) in slot.iter_mut().zip(g.data()) {
                *s += x;
            }
            top = top.max(v.0 + 1);
        }

        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..top).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b).to_vec();
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] / vb[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..s.len() {
                        s[i] -= g[i] * y[i] / vb[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c);
                }
            }
            Op::AddScalar(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Exp(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                }
            }
            Op::Ln(x) => {
                let vx = val(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        s[i] += g[i] / vx[i];
                    }
                }
            }
            Op::Powf(x, p) => {
                let vx = val(*x).to_vec();
                let p = *p;
                if let Some(s) = self.slot(grads, *x) {
                    if p != 0.0 {
                        for i in 0..s.len() {
                            s[i] += g[i] * p * vx[i].powf(p - 1.0);
                        }
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = val(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        s[i] += g[i] * kernels::gelu_grad(vx[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let scale = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|s| *s += scale);
                }
            }
            Op::SumLast(x) => {
                let n = last_extent(&self.nodes[x.0].value);
                if let Some(s) = self.slot(grads, *x) {
                    for (row, &gv) in s.chunks_exact_mut(n).zip(g) {
                        row.iter_mut().for_each(|s| *s += gv);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                let n = self.nodes[b.0].value.numel();
                if let Some(s) = self.slot(grads, *b) {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let n = self.nodes[gain.0].value.numel();
                let (vx, vg) = (val(*x).to_vec(), val(*gain).to_vec());
                if let Some(s) = self.slot(grads, *x) {
                    for (r, row) in s.chunks_exact_mut(n).enumerate() {
                        for c in 0..n {
                            row[c] += g[r * n + c] * vg[c];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    for (gr, xr) in g.chunks_exact(n).zip(vx.chunks_exact(n)) {
                        for c in 0..n {
                            s[c] += gr[c] * xr[c];
                        }
                    }
                }
            }
            Op::MulCol(x, sc) => {
                let n = last_extent(&self.nodes[x.0].value);
                let (vx, vs) = (val(*x).to_vec(), val(*sc).to_vec());
                if let Some(s) = self.slot(grads, *x) {
                    for (r, row) in s.chunks_exact_mut(n).enumerate() {
                        for c in 0..n {
                            row[c] += g[r * n + c] * vs[r];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *sc) {
                    for (r, (gr, xr)) in g.chunks_exact(n).zip(vx.chunks_exact(n)).enumerate() {
                        s[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let vb = val(*b).to_vec();
                    let s = self.slot(grads, *a).expect("requires grad");
                    kernels::matmul_a_bt_acc(g, &vb, s, m, n, k);
                }
                if self.nodes[b.0].requires_grad {
                    let va = val(*a).to_vec();
                    let s = self.slot(grads, *b).expect("requires grad");
                    kernels::matmul_at_b_acc(&va, g, s, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(s) = self.slot(grads, *x) {
                    let gt = kernels::transpose(g, r, c);
                    s.iter_mut().zip(&gt).for_each(|(s, g)| *s += g);
                }
            }
            Op::Softmax(x, geom) => {
                if let Some(s) = self.slot(grads, *x) {
                    geom.for_each_slice(|idx| {
                        let idx: Vec<usize> = idx.collect();
                        let dot: f64 = idx.iter().map(|&i| g[i] * y[i]).sum();
                        for &i in &idx {
                            s[i] += y[i] * (g[i] - dot);
                        }
                    });
                }
            }
            Op::LogSoftmax(x, geom) => {
                if let Some(s) = self.slot(grads, *x) {
                    geom.for_each_slice(|idx| {
                        let idx: Vec<usize> = idx.collect();
                        let total: f64 = idx.iter().map(|&i| g[i]).sum();
                        for &i in &idx {
                            s[i] += g[i] - y[i].exp() * total;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.nodes[gain.0].value.numel();
                let vg = val(*gain).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, row) in s.chunks_exact_mut(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = gr[c] * vg[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            let d = gr[c] * vg[c];
                            row[c] += rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    for (gr, xh) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            s[c] += gr[c] * xh[c];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for gr in g.chunks_exact(n) {
                        s.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, mask.as_deref(), probs, g, grads),
            Op::DepthwiseConv { x, kernel, geom } => {
                let (vx, vk) = (val(*x).to_vec(), val(*kernel).to_vec());
                let mut dx = self.nodes[x.0].requires_grad.then(|| vec![0.0; vx.len()]);
                let mut dk = self.nodes[kernel.0]
                    .requires_grad
                    .then(|| vec![0.0; vk.len()]);
                kernels::depthwise_backward(
                    geom,
                    &vx,
                    &vk,
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let (Some(d), Some(s)) = (dx, self.slot(grads, *x)) {
                    s.iter_mut().zip(&d).for_each(|(s, g)| *s += g);
                }
                if let (Some(d), Some(s)) = (dk, self.slot(grads, *kernel)) {
                    s.iter_mut().zip(&d).for_each(|(s, g)| *s += g);
                }
            }
            Op::Patchify { x, dims, patch } => {
                let [n, h, w, c] = *dims;
                let p = *patch;
                let (ph, pw) = (h / p, w / p);
                let row_len = p * p * c;
                if let Some(s) = self.slot(grads, *x) {
                    for b in 0..n {
                        for py in 0..ph {
                            for px in 0..pw {
                                let row = ((b * ph + py) * pw + px) * row_len;
                                for dy in 0..p {
                                    let t = ((b * h + py * p + dy) * w + px * p) * c;
                                    let o = row + dy * p * c;
                                    for i in 0..p * c {
                                        s[t + i] += g[o + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Resize {
                x,
                dims,
                out_h,
                out_w,
            } => {
                let [n, h, w, c] = *dims;
                let ty = kernels::bilinear_taps(*out_h, h);
                let tx = kernels::bilinear_taps(*out_w, w);
                if let Some(s) = self.slot(grads, *x) {
                    for b in 0..n {
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let o = ((b * out_h + oy) * out_w + ox) * c;
                                let taps = [
                                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                    (y0, x1, (1.0 - fy) * fx),
                                    (y1, x0, fy * (1.0 - fx)),
                                    (y1, x1, fy * fx),
                                ];
                                for (yy, xx, wgt) in taps {
                                    let t = ((b * h + yy) * w + xx) * c;
                                    for ch in 0..c {
                                        s[t + ch] += wgt * g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut()
                            .zip(&g[at..at + len])
                            .for_each(|(s, g)| *s += g);
                    }
                    at += len;
                }
            }
            Op::SliceRows(x, start) => {
                let vx = &self.nodes[x.0].value;
                let row = vx.numel() / vx.shape()[0];
                if let Some(s) = self.slot(grads, *x) {
                    let at = start * row;
                    s[at..at + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, g)| *s += g);
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = &self.nodes[x.0].value;
                let row = vx.numel() / vx.shape()[0];
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..row {
                            s[i * row + c] += g[r * row + c];
                        }
                    }
                }
            }
            Op::Rope { x, base, offset } => {
                let d = node.value.shape()[1];
                if let Some(s) = self.slot(grads, *x) {
                    let mut back = g.to_vec();
                    rotate_pairs(&mut back, d, *base, *offset, true);
                    s.iter_mut().zip(&back).for_each(|(s, g)| *s += g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (vq, vk, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let d = self.nodes[q.0].value.shape()[1];
        let lq = self.nodes[q.0].value.shape()[0];
        let lk = self.nodes[k.0].value.shape()[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let want = |x: Var| self.nodes[x.0].requires_grad;
        let mut dq = want(q).then(|| vec![0.0; lq * d]);
        let mut dk = want(k).then(|| vec![0.0; lk * d]);
        let mut dv = want(v).then(|| vec![0.0; lk * d]);
        let mut dp = vec![0.0; lk];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..lq {
                let allowed = |j: usize| mask.is_none_or(|m| m[i * lk + j]);
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let gi = &g[i * d + c0..i * d + c0 + dh];
                let mut dot = 0.0;
                for j in 0..lk {
                    if !allowed(j) {
                        continue;
                    }
                    let vj = &vv[j * d + c0..j * d + c0 + dh];
                    let dpj: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dp[j] = dpj;
                    dot += p[j] * dpj;
                    if let Some(dv) = dv.as_mut() {
                        for (t, &gv) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(gi) {
                            *t += p[j] * gv;
                        }
                    }
                }
                let qi = &vq[i * d + c0..i * d + c0 + dh];
                for j in 0..lk {
                    if !allowed(j) || p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &vk[j * d + c0..j * d + c0 + dh];
                    if let Some(dq) = dq.as_mut() {
                        for (t, &kv) in dq[i * d + c0..i * d + c0 + dh].iter_mut().zip(kj) {
                            *t += ds * kv;
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        for (t, &qv) in dk[j * d + c0..j * d + c0 + dh].iter_mut().zip(qi) {
                            *t += ds * qv;
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(b), Some(s)) = (buf, self.slot(grads, var)) {
                s.iter_mut().zip(&b).for_each(|(s, g)| *s += g);
            }
        }
    }
}

/// Rotates consecutive coordinate pairs of each row; `inverse` rotates by the
/// negated angle.
fn rotate_pairs(data: &mut [f64], d: usize, base: f64, offset: usize, inverse: bool) {
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|m| base.powf(-2.0 * m as f64 / d as f64))
        .collect();
    for (r, row) in data.chunks_exact_mut(d).enumerate() {
        let pos = (offset + r) as f64;
        for (m, &f) in inv_freq.iter().enumerate() {
            let (mut sin, cos) = (pos * f).sin_cos();
            if inverse {
                sin = -sin;
            }
            let (a, b) = (row[2 * m], row[2 * m + 1]);
            row[2 * m] = a * cos - b * sin;
            row[2 * m + 1] = a * sin + b * cos;
        }
    }
}
