//! Parameterized layers shared by the encoder and both Perceivers.

use std::rc::Rc;

use crate::error::Result;
use crate::params::{Binder, Init, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// `x[L×in] · W[in×out] + b[out]`
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
    ) -> Self {
        let weight = format!("{name}.weight");
        params.insert(&weight, init.fan_in(&weight, &[inp, out], inp));
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            params.insert(&b, Tensor::zeros(&[out]));
            b
        });
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let w = p.get(tape, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = p.get(tape, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gain: String,
    bias: Option<String>,
    dim: usize,
}

impl Norm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let bias = format!("{name}.bias");
        params.insert(&bias, Tensor::zeros(&[dim]));
        Self {
            bias: Some(bias),
            ..Self::gain_only(params, name, dim)
        }
    }

    /// Layer norm with a learned gain and no shift.
    pub fn gain_only(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = format!("{name}.gain");
        params.insert(&gain, Tensor::ones(&[dim]));
        Self {
            gain,
            bias: None,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let g = p.get(tape, &self.gain)?;
        let b = match &self.bias {
            Some(name) => p.get(tape, name)?,
            None => tape.constant(Tensor::zeros(&[self.dim])),
        };
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(params: &mut ParamSet, init: &Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(params, init, &format!("{name}.q"), dim, dim, true),
            // A key bias only shifts each query's logits by a constant, which
            // the softmax discards.
            k: Linear::new(params, init, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(params, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(params, init, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    /// `q[Lq×d]` attends over keys `k[Lk×d]` and values `v[Lk×d]`. With a
    /// mask, query row `i` sees key `j` only when `mask[i·Lk + j]`; a row that
    /// sees nothing yields zeros before the output projection.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Rc<[bool]>>,
    ) -> Result<Var> {
        let qp = self.q.forward(tape, p, q)?;
        let kp = self.k.forward(tape, p, k)?;
        let vp = self.v.forward(tape, p, v)?;
        let mixed = tape.attention(qp, kp, vp, self.heads, mask)?;
        self.out.forward(tape, p, mixed)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        dim: usize,
        expansion: usize,
    ) -> Self {
        Self {
            up: Linear::new(
                params,
                init,
                &format!("{name}.up"),
                dim,
                dim * expansion,
                true,
            ),
            down: Linear::new(
                params,
                init,
                &format!("{name}.down"),
                dim * expansion,
                dim,
                true,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// One latent-transformer layer: pre-norm cross-attention from the latents to
/// an input set, optional pre-norm latent self-attention, and a pre-norm
/// feed-forward block, each with a residual connection.
#[derive(Clone, Debug)]
pub struct PerceiverLayer {
    cross_q_norm: Norm,
    cross_kv_norm: Norm,
    cross: Attention,
    self_block: Option<(Norm, Attention)>,
    ff_norm: Norm,
    ff: FeedForward,
}

impl PerceiverLayer {
    pub fn new(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        dim: usize,
        heads: usize,
        self_attention: bool,
    ) -> Self {
        Self {
            cross_q_norm: Norm::new(params, &format!("{name}.cross_q_norm"), dim),
            cross_kv_norm: Norm::new(params, &format!("{name}.cross_kv_norm"), dim),
            cross: Attention::new(params, init, &format!("{name}.cross"), dim, heads),
            self_block: self_attention.then(|| {
                (
                    Norm::new(params, &format!("{name}.self_norm"), dim),
                    Attention::new(params, init, &format!("{name}.self"), dim, heads),
                )
            }),
            ff_norm: Norm::new(params, &format!("{name}.ff_norm"), dim),
            ff: FeedForward::new(params, init, &format!("{name}.ff"), dim, 4),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        latents: Var,
        inputs: Var,
        mask: Option<Rc<[bool]>>,
    ) -> Result<Var> {
        let qn = self.cross_q_norm.forward(tape, p, latents)?;
        let kvn = self.cross_kv_norm.forward(tape, p, inputs)?;
        let attended = self.cross.forward(tape, p, qn, kvn, kvn, mask)?;
        let mut x = tape.add(latents, attended)?;
        if let Some((norm, attn)) = &self.self_block {
            let xn = norm.forward(tape, p, x)?;
            let mixed = attn.forward(tape, p, xn, xn, xn, None)?;
            x = tape.add(x, mixed)?;
        }
        let xn = self.ff_norm.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, xn)?;
        tape.add(x, f)
    }
}
