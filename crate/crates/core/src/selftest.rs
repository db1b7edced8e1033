//! Built-in verification suite: gradient checks for every differentiable op
//! and for the whole tokenizer, plus the structural invariants the rest of
//! the crate relies on. The CLI `selftest` runs [`run`].

use std::rc::Rc;

use crate::config::Config;
use crate::error::Result;
use crate::gradcheck::{grad_check_many, param_grad_check};
use crate::losses::contrastive_loss;
use crate::matching::{brute_force_match, hungarian_match};
use crate::model::{Model, LABEL_EMBEDDINGS};
use crate::params::Binder;
use crate::rng::Rng;
use crate::segmenter::harden;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tensor_file::TensorFile;
use crate::train::{item_forward, prepare, PreparedVideo};
use crate::video::{generate, BackgroundKind, SceneSpec, VideoRecord};

/// Finite-difference step for single ops.
pub const OP_STEP: f64 = 1e-5;
/// Worst relative error tolerated for a single op.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Worst relative error tolerated for the full model.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value < limit,
            detail: format!("{value:.3e} < {limit:.0e}"),
        }
    }

    fn flag(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `PASS name (detail)` or `FAIL ...`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {} ({})", self.name, self.detail)
    }
}

/// Seeded standard-normal tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::keyed(0x7E57, seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Seeded tensor with entries in `[lo, hi)`.
pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = Rng::keyed(0x7E58, seed);
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(tape.shape(y), 1000 + seed));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Every differentiable op with a small random input set.
fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let r = random_tensor;
    let mask: Rc<[bool]> = (0..3 * 5)
        .map(|i| i % 5 != 1 && i / 5 != 2)
        .collect::<Vec<_>>()
        .into();
    vec![
        (
            "add",
            vec![r(&[3, 4], 1), r(&[3, 4], 2)],
            Box::new(|t, x| t.add(x[0], x[1])),
        ),
        (
            "sub",
            vec![r(&[3, 4], 3), r(&[3, 4], 4)],
            Box::new(|t, x| t.sub(x[0], x[1])),
        ),
        (
            "mul",
            vec![r(&[3, 4], 5), r(&[3, 4], 6)],
            Box::new(|t, x| t.mul(x[0], x[1])),
        ),
        (
            "div",
            vec![r(&[3, 4], 7), uniform_tensor(&[3, 4], 0.5, 2.0, 8)],
            Box::new(|t, x| t.div(x[0], x[1])),
        ),
        (
            "scale",
            vec![r(&[3, 4], 9)],
            Box::new(|t, x| Ok(t.scale(x[0], -1.7))),
        ),
        (
            "add_scalar",
            vec![r(&[3, 4], 10)],
            Box::new(|t, x| Ok(t.add_scalar(x[0], 0.3))),
        ),
        (
            "exp",
            vec![r(&[3, 4], 11)],
            Box::new(|t, x| Ok(t.exp(x[0]))),
        ),
        (
            "ln",
            vec![uniform_tensor(&[3, 4], 0.2, 3.0, 12)],
            Box::new(|t, x| Ok(t.ln(x[0]))),
        ),
        (
            "powf",
            vec![uniform_tensor(&[3, 4], 0.2, 3.0, 13)],
            Box::new(|t, x| Ok(t.powf(x[0], -0.5))),
        ),
        (
            "clamp",
            vec![Tensor::from_rows(&[
                &[-2.0, -0.5, 0.2, 0.7],
                &[1.4, -1.3, 0.05, 3.0],
            ])],
            Box::new(|t, x| Ok(t.clamp(x[0], -1.0, 1.0))),
        ),
        (
            "gelu",
            vec![r(&[3, 4], 14)],
            Box::new(|t, x| Ok(t.gelu(x[0]))),
        ),
        (
            "sum",
            vec![r(&[3, 4], 15)],
            Box::new(|t, x| Ok(t.sum(x[0]))),
        ),
        (
            "mean",
            vec![r(&[3, 4], 16)],
            Box::new(|t, x| Ok(t.mean(x[0]))),
        ),
        (
            "sum_last",
            vec![r(&[2, 3, 4], 17)],
            Box::new(|t, x| Ok(t.sum_last(x[0]))),
        ),
        (
            "add_row",
            vec![r(&[3, 4], 18), r(&[4], 19)],
            Box::new(|t, x| t.add_row(x[0], x[1])),
        ),
        (
            "mul_row",
            vec![r(&[3, 4], 20), r(&[4], 21)],
            Box::new(|t, x| t.mul_row(x[0], x[1])),
        ),
        (
            "mul_col",
            vec![r(&[3, 4], 22), r(&[3], 23)],
            Box::new(|t, x| t.mul_col(x[0], x[1])),
        ),
        (
            "matmul",
            vec![r(&[3, 4], 24), r(&[4, 2], 25)],
            Box::new(|t, x| t.matmul(x[0], x[1])),
        ),
        (
            "transpose",
            vec![r(&[3, 4], 26)],
            Box::new(|t, x| t.transpose(x[0])),
        ),
        (
            "softmax_rows",
            vec![r(&[3, 4], 27)],
            Box::new(|t, x| t.softmax(x[0], 1)),
        ),
        (
            "softmax_cols",
            vec![r(&[3, 4], 28)],
            Box::new(|t, x| t.softmax(x[0], 0)),
        ),
        (
            "log_softmax_rows",
            vec![r(&[3, 4], 29)],
            Box::new(|t, x| t.log_softmax(x[0], 1)),
        ),
        (
            "log_softmax_cols",
            vec![r(&[3, 4], 30)],
            Box::new(|t, x| t.log_softmax(x[0], 0)),
        ),
        (
            "layer_norm",
            vec![r(&[3, 4], 31), r(&[4], 32), r(&[4], 33)],
            Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)),
        ),
        (
            "attention",
            vec![r(&[3, 4], 34), r(&[5, 4], 35), r(&[5, 4], 36)],
            Box::new(|t, x| t.attention(x[0], x[1], x[2], 2, None)),
        ),
        (
            "attention_masked",
            vec![r(&[3, 4], 37), r(&[5, 4], 38), r(&[5, 4], 39)],
            Box::new(move |t, x| t.attention(x[0], x[1], x[2], 2, Some(mask.clone()))),
        ),
        (
            "depthwise_conv",
            vec![r(&[1, 4, 4, 2], 40), r(&[3, 3, 2], 41)],
            Box::new(|t, x| t.depthwise_conv(x[0], x[1], 1, 1)),
        ),
        (
            "depthwise_conv_strided",
            vec![r(&[1, 5, 5, 1], 42), r(&[3, 3, 1], 43)],
            Box::new(|t, x| t.depthwise_conv(x[0], x[1], 2, 1)),
        ),
        (
            "patchify",
            vec![r(&[1, 4, 4, 2], 44)],
            Box::new(|t, x| t.patchify(x[0], 2)),
        ),
        (
            "bilinear_up",
            vec![r(&[1, 2, 3, 2], 45)],
            Box::new(|t, x| t.bilinear_resize(x[0], 4, 5)),
        ),
        (
            "bilinear_down",
            vec![r(&[1, 4, 4, 1], 46)],
            Box::new(|t, x| t.bilinear_resize(x[0], 2, 3)),
        ),
        (
            "reshape",
            vec![r(&[3, 4], 47)],
            Box::new(|t, x| t.reshape(x[0], &[2, 6])),
        ),
        (
            "concat_rows",
            vec![r(&[2, 3], 48), r(&[1, 3], 49)],
            Box::new(|t, x| t.concat_rows(&[x[0], x[1]])),
        ),
        (
            "slice_rows",
            vec![r(&[4, 3], 50)],
            Box::new(|t, x| t.slice_rows(x[0], 1, 2)),
        ),
        (
            "gather_rows",
            vec![r(&[4, 3], 51)],
            Box::new(|t, x| t.gather_rows(x[0], &[2, 0, 2])),
        ),
        (
            "rope",
            vec![r(&[5, 6], 52)],
            Box::new(|t, x| t.rope(x[0], 100.0, 3)),
        ),
    ]
}

/// Worst relative error of every differentiable op, by name.
pub fn op_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| {
            let err = grad_check_many(
                |t, x| {
                    let y = f(t, x)?;
                    project(t, y, i as u64)
                },
                &inputs,
                OP_STEP,
            )?;
            Ok((name, err))
        })
        .collect()
}

/// A model small enough to finite-difference every parameter: 16×16 frames
/// (the smallest extent the stride-16 stage accepts), two frames, width 8.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.data.width = 16;
    c.data.height = 16;
    c.data.frames = 2;
    c.data.min_shapes = 1;
    c.data.max_shapes = 2;
    c.data.min_size = 3.0;
    c.data.max_size = 5.0;
    c.model.encoder.stage_widths = vec![4, 4, 4];
    c.model.encoder.dim = 8;
    c.model.segmenter.queries = 4;
    c.model.segmenter.perceiver_layers = 1;
    c.model.segmenter.heads = 2;
    c.model.segmenter.chunk_len = 2;
    c.model.traj.layers = 1;
    c.model.traj.heads = 2;
    c.loss.use_ce = true;
    c
}

/// Two prepared videos of distinct scene classes at `config`'s extents.
pub fn tiny_items(config: &Config) -> Result<Vec<PreparedVideo>> {
    let d = &config.data;
    let records = [
        (BackgroundKind::Gradient, 11),
        (BackgroundKind::Checker, 12),
    ]
    .into_iter()
    .map(|(background, seed)| {
        let mut spec = SceneSpec::background_only(d.width, d.height, d.frames, background, seed);
        spec.shapes = vec![
            (
                crate::video::ShapeKind::Disc,
                crate::video::MotionKind::Linear,
            ),
            (
                crate::video::ShapeKind::Rectangle,
                crate::video::MotionKind::Static,
            ),
        ];
        spec.min_size = d.min_size;
        spec.max_size = d.max_size;
        Ok(VideoRecord::from(&generate(&spec)?))
    })
    .collect::<Result<Vec<_>>>()?;
    prepare(&records, config.model.segmenter.chunk_len)
}

/// The complete training objective on a tape: segmentation losses of every
/// item plus the contrastive loss between their pooled refined tokens and
/// the label embeddings.
pub fn composite_objective(
    model: &Model,
    config: &Config,
    tape: &mut Tape,
    p: &mut Binder,
    items: &[PreparedVideo],
    n: usize,
) -> Result<Var> {
    let mut seg = Vec::with_capacity(items.len());
    let mut pooled = Vec::with_capacity(items.len());
    for item in items {
        let (loss, row, _) = item_forward(model, config, tape, p, item, Some(n))?;
        seg.push(loss);
        pooled.push(row.expect("pooled tokens requested"));
    }
    let visual = tape.concat_rows(&pooled)?;
    let table = p.get(tape, LABEL_EMBEDDINGS)?;
    let classes: Vec<usize> = items.iter().map(|i| i.scene_class).collect();
    let labels = tape.gather_rows(table, &classes)?;
    let mut total = contrastive_loss(tape, visual, labels, config.loss.temperature)?;
    for s in seg {
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Worst relative error of the composite objective over every parameter.
///
/// Feature detachment is switched off: a stop-gradient makes the tape
/// gradient differ from the true derivative on purpose, so finite
/// differences can only vouch for the undetached graph.
pub fn composite_gradient_error(config: &Config, n: usize, h: f64) -> Result<f64> {
    let mut config = config.clone();
    config.model.segmenter.detach_features = false;
    let config = &config;
    let (model, params) = Model::new(config.model.clone(), config.train.seed)?;
    let items = tiny_items(config)?;
    param_grad_check(
        |t, p| composite_objective(&model, config, t, p, &items, n),
        &params,
        h,
    )
}

/// Worst relative error of a random projection of the encoder features
/// with respect to the input pixels.
pub fn encoder_input_gradient_error(config: &Config, h: f64) -> Result<f64> {
    let (model, params) = Model::new(config.model.clone(), config.train.seed)?;
    let d = &config.data;
    let video = uniform_tensor(&[1, d.height, d.width, 3], 0.0, 1.0, 70);
    crate::gradcheck::grad_check(
        |t, x| {
            let mut p = Binder::frozen(&params);
            let features = model.encoder.forward(t, &mut p, x)?;
            project(t, features.var, 71)
        },
        &video,
        h,
    )
}

/// Refines fixed proposals against random features twice, the second time
/// with every feature row outside trajectory 0's region perturbed. Returns
/// whether trajectory 0's sub-tokens came out bit-identical.
pub fn refinement_locality(
    model: &Model,
    params: &crate::params::ParamSet,
    frames: usize,
    seed: u64,
) -> Result<bool> {
    let d = model.dim();
    let (h, w) = (4, 4);
    let positions = frames * h * w;
    let queries = model.segmenter.config().queries.min(positions);
    let mut rng = Rng::keyed(0x10CA1, seed);
    // Every query owns at least one position; the rest are spread at random.
    let winners: Vec<usize> = (0..positions)
        .map(|p| {
            if p < queries {
                p
            } else {
                rng.below(queries as u64) as usize
            }
        })
        .collect();
    let hard = crate::segmenter::HardMasks::from_winners(model.segmenter.config().queries, winners);
    let active = hard.active_queries();
    let z = random_tensor(&[active.len(), d], seed ^ 0x21);
    let base = random_tensor(&[positions, d], seed ^ 0x22);
    let mut moved = base.clone();
    for pos in 0..positions {
        if !hard.contains(active[0], pos) {
            for c in 0..d {
                moved.data_mut()[pos * d + c] += 0.5 + rng.normal();
            }
        }
    }
    let tokens = |f: &Tensor| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut p = Binder::frozen(params);
        let features = crate::encoder::FeatureMap {
            var: tape.constant(f.clone()),
            frames,
            height: h,
            width: w,
            dim: d,
        };
        let z = tape.constant(z.clone());
        let out = model
            .traj
            .refine(&mut tape, &mut p, z, &features, &hard, &active, 4)?;
        Ok(tape.value(out.var).data()[..4 * d].to_vec())
    };
    let (a, b) = (tokens(&base)?, tokens(&moved)?);
    Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn softmax_sums() -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[6, 50], 60).map(|v| 20.0 * v));
    let s = tape.softmax(x, 0)?;
    let v = tape.value(s);
    let cols = v.shape()[1];
    Ok((0..cols)
        .map(|j| ((0..6).map(|i| v.at(&[i, j])).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

fn detach_blocks_gradient() -> Result<bool> {
    let mut tape = Tape::new();
    let x = tape.param(random_tensor(&[3, 3], 61));
    let d = tape.detach(x);
    let y = tape.mul(d, d)?;
    let direct = tape.scale(x, 0.0);
    let out = tape.add(y, direct)?;
    let out = tape.sum(out);
    let g = tape.backward(out)?.get_or_zeros(&tape, x);
    Ok(g.data().iter().all(|&v| v == 0.0))
}

/// One allowed key per query returns exactly that key's value row.
fn one_hot_mask_selects_value() -> Result<bool> {
    let mut tape = Tape::new();
    let q = tape.constant(random_tensor(&[3, 4], 62));
    let k = tape.constant(random_tensor(&[5, 4], 63));
    let v = tape.constant(random_tensor(&[5, 4], 64));
    let pick = [4usize, 0, 2];
    let mask: Rc<[bool]> = (0..15)
        .map(|i| i % 5 == pick[i / 5])
        .collect::<Vec<_>>()
        .into();
    let out = tape.attention(q, k, v, 2, Some(mask))?;
    let (out, v) = (tape.value(out), tape.value(v));
    Ok(pick
        .iter()
        .enumerate()
        .all(|(i, &j)| (0..4).all(|c| (out.at(&[i, c]) - v.at(&[j, c])).abs() < 1e-12)))
}

fn hungarian_agrees(instances: usize) -> Result<usize> {
    let mut mismatches = 0;
    for s in 0..instances as u64 {
        let mut rng = Rng::keyed(0xC057, s);
        let rows = rng.range(1, 6);
        let cols = rng.range(1, 6);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| (rng.below(5) as f64) * 0.25).collect())
            .collect();
        let (a, b) = (hungarian_match(&cost)?, brute_force_match(&cost)?);
        if a.pairs != b.pairs || (a.cost - b.cost).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

fn rope_norm_error() -> Result<f64> {
    let mut tape = Tape::new();
    let x = random_tensor(&[9, 8], 65);
    let xv = tape.constant(x.clone());
    let y = tape.rope(xv, 10_000.0, 5)?;
    let y = tape.value(y);
    Ok(x.rows()
        .zip(y.rows())
        .map(|(a, b)| {
            let na: f64 = a.iter().map(|v| v * v).sum();
            let nb: f64 = b.iter().map(|v| v * v).sum();
            (na.sqrt() - nb.sqrt()).abs()
        })
        .fold(0.0, f64::max))
}

/// `⟨R_m q, R_n k⟩` depends only on `m − n`.
fn rope_shift_error() -> Result<f64> {
    let q = random_tensor(&[1, 8], 66);
    let k = random_tensor(&[1, 8], 67);
    let logit = |m: usize, n: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
        let a = tape.rope(qv, 10_000.0, m)?;
        let b = tape.rope(kv, 10_000.0, n)?;
        let (a, b) = (tape.value(a), tape.value(b));
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
    };
    let base = logit(7, 3)?;
    let mut worst = 0.0f64;
    for shift in [1, 10, 100, 1000] {
        worst = worst.max((logit(7 + shift, 3 + shift)? - base).abs());
    }
    Ok(worst)
}

fn hard_masks_partition() -> Result<bool> {
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[5, 40], 68));
    let soft = tape.softmax(x, 0)?;
    let hard = harden(tape.value(soft))?;
    let one_hot = hard.one_hot();
    Ok((0..40).all(|p| (0..5).map(|k| one_hot.at(&[k, p])).sum::<f64>() == 1.0))
}

fn tensor_file_round_trip() -> Result<bool> {
    let t = random_tensor(&[2, 3, 4], 69);
    let decoded = TensorFile::decode(
        &TensorFile::f64(&t).encode(),
        std::path::Path::new("<memory>"),
    )?;
    Ok(decoded.to_tensor()?.bit_eq(&t))
}

fn config_round_trip() -> Result<bool> {
    let c = tiny_config();
    Ok(Config::parse(&c.serialize())? == c)
}

/// Runs every check. The composite gradient check is the slow one.
pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |r: Result<Check>, name: &str| {
        out.push(r.unwrap_or_else(|e| Check::flag(name, false, format!("error: {e}"))));
    };
    match op_gradient_errors() {
        Ok(errs) => {
            for (name, e) in errs {
                push(
                    Ok(Check::bound(format!("grad {name}"), e, OP_TOLERANCE)),
                    name,
                );
            }
        }
        Err(e) => push(Err(e), "grad ops"),
    }
    let tiny = tiny_config();
    push(
        composite_gradient_error(&tiny, 2, OP_STEP)
            .map(|e| Check::bound("grad composite", e, COMPOSITE_TOLERANCE)),
        "grad composite",
    );
    push(
        encoder_input_gradient_error(&tiny, OP_STEP)
            .map(|e| Check::bound("grad encoder input", e, COMPOSITE_TOLERANCE)),
        "grad encoder input",
    );
    push(
        softmax_sums().map(|e| Check::bound("softmax sums to one", e, 1e-12)),
        "softmax",
    );
    push(
        detach_blocks_gradient()
            .map(|ok| Check::flag("detach blocks gradient", ok, "gradient exactly zero")),
        "detach",
    );
    push(
        one_hot_mask_selects_value()
            .map(|ok| Check::flag("one-hot attention mask", ok, "selects the allowed value")),
        "mask",
    );
    push(
        hard_masks_partition()
            .map(|ok| Check::flag("hard masks partition", ok, "one winner per position")),
        "hard",
    );
    push(
        hungarian_agrees(300).map(|m| {
            Check::flag(
                "hungarian vs exhaustive",
                m == 0,
                format!("{m} mismatches of 300"),
            )
        }),
        "hungarian",
    );
    push(
        rope_norm_error().map(|e| Check::bound("rope preserves norm", e, 1e-12)),
        "rope norm",
    );
    push(
        rope_shift_error().map(|e| Check::bound("rope relative shift", e, 1e-9)),
        "rope shift",
    );
    push(
        tensor_file_round_trip().map(|ok| Check::flag("tensor file round trip", ok, "bit-exact")),
        "tensor file",
    );
    push(
        config_round_trip()
            .map(|ok| Check::flag("config round trip", ok, "parse(serialize(c)) == c")),
        "config",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_gradient_matches_finite_differences() {
        for (name, err) in op_gradient_errors().unwrap() {
            assert!(err < OP_TOLERANCE, "{name}: {err:e}");
        }
    }

    #[test]
    fn cheap_invariants_hold() {
        assert!(softmax_sums().unwrap() < 1e-12);
        assert!(detach_blocks_gradient().unwrap());
        assert!(one_hot_mask_selects_value().unwrap());
        assert!(hard_masks_partition().unwrap());
        assert_eq!(hungarian_agrees(100).unwrap(), 0);
        assert!(rope_norm_error().unwrap() < 1e-12);
        assert!(rope_shift_error().unwrap() < 1e-9);
        assert!(tensor_file_round_trip().unwrap());
        assert!(config_round_trip().unwrap());
    }
}
