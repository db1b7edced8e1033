//! Segmentation supervision and the contrastive stand-in objective.
//!
//! Each soft mask row is matched one-to-one to a ground-truth region by the
//! same weighted Dice + Focal cost that is then averaged over the matched
//! pairs. The cost matrix is evaluated off the tape; only the matched pairs
//! are differentiated.

use crate::error::{Error, Result};
use crate::matching::{hungarian_match, Assignment};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities entering the focal logarithm are clamped into
/// `[FOCAL_CLAMP, 1 - FOCAL_CLAMP]`.
pub const FOCAL_CLAMP: f64 = 1e-7;
const CE_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    /// Cross-entropy weight; only used when `use_ce` is on, and taken as 1
    /// when left at 0.
    pub lambda_ce: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub temperature: f64,
    pub use_dice: bool,
    pub use_focal: bool,
    pub use_ce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            lambda_ce: 0.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1e-6,
            temperature: 0.07,
            use_dice: true,
            use_focal: true,
            use_ce: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_dice >= 0.0
            && self.lambda_focal >= 0.0
            && self.lambda_ce >= 0.0
            && self.focal_gamma >= 0.0
            && self.focal_alpha > 0.0
            && self.focal_alpha <= 1.0
            && self.temperature > 0.0
            && self.dice_eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss settings {self:?}")))
        }
    }

    /// `(dice, focal, ce)` weights after the ablation switches.
    pub fn weights(&self) -> (f64, f64, f64) {
        let dice = if self.use_dice { self.lambda_dice } else { 0.0 };
        let focal = if self.use_focal {
            self.lambda_focal
        } else {
            0.0
        };
        let ce = match (self.use_ce, self.lambda_ce) {
            (false, _) => 0.0,
            (true, w) if w == 0.0 => 1.0,
            (true, w) => w,
        };
        (dice, focal, ce)
    }
}

/// Per-row soft Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)` of `pred[R×P]`
/// against a constant binary `target[R×P]`; returns `[R]`.
pub fn dice_rows(tape: &mut Tape, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    let t = tape.constant(target.clone());
    let inter = tape.mul(pred, t)?;
    let inter = tape.sum_last(inter);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let psum = tape.sum_last(pred);
    let tsum = tape.constant(row_sums(target));
    let den = tape.add(psum, tsum)?;
    let den = tape.add_scalar(den, eps);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Per-row focal loss: mean over pixels of `−α_t (1 − p_t)^γ ln p_t`.
pub fn focal_rows(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let p = tape.clamp(pred, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let sign = tape.constant(target.map(|t| 2.0 * t - 1.0));
    let shift = tape.constant(target.map(|t| 1.0 - t));
    let alpha_t = tape.constant(target.map(|t| if t > 0.5 { alpha } else { 1.0 - alpha }));
    let pt = tape.mul(p, sign)?;
    let pt = tape.add(pt, shift)?;
    let miss = tape.scale(pt, -1.0);
    let miss = tape.add_scalar(miss, 1.0);
    let weight = tape.powf(miss, gamma);
    let log_pt = tape.ln(pt);
    let term = tape.mul(weight, log_pt)?;
    let term = tape.mul(term, alpha_t)?;
    let total = tape.sum_last(term);
    let pixels = *target.shape().last().unwrap_or(&1) as f64;
    Ok(tape.scale(total, -1.0 / pixels))
}

pub fn dice_loss(tape: &mut Tape, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    let (p, t) = as_row(tape, pred, target)?;
    let rows = dice_rows(tape, p, &t, eps)?;
    Ok(tape.sum(rows))
}

pub fn focal_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let (p, t) = as_row(tape, pred, target)?;
    let rows = focal_rows(tape, p, &t, alpha, gamma)?;
    Ok(tape.sum(rows))
}

fn as_row(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<(Var, Tensor)> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mask loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = target.numel();
    Ok((
        tape.reshape(pred, &[1, n])?,
        target.clone().reshape(&[1, n])?,
    ))
}

fn row_sums(t: &Tensor) -> Tensor {
    let p = *t.shape().last().unwrap_or(&1);
    let r = t.numel() / p.max(1);
    Tensor::from_fn(&[r], |i| t.data()[i * p..(i + 1) * p].iter().sum())
}

/// Weighted Dice + Focal cost between every soft row and every target row,
/// `[N_q][K]`, computed without the tape.
pub fn cost_matrix(soft: &Tensor, targets: &Tensor, config: &LossConfig) -> Vec<Vec<f64>> {
    let (wd, wf, _) = config.weights();
    let (nq, p) = (soft.shape()[0], soft.shape()[1]);
    let k = targets.shape()[0];
    let s = soft.data();
    let g = targets.data();
    let (alpha, gamma) = (config.focal_alpha, config.focal_gamma);
    let mut out = vec![vec![0.0; k]; nq];
    for q in 0..nq {
        let row = &s[q * p..(q + 1) * p];
        let psum: f64 = row.iter().sum();
        // Focal terms when the pixel is a target (l1) or not (l0).
        let mut l0 = vec![0.0; p];
        let mut l1 = vec![0.0; p];
        for (pix, &v) in row.iter().enumerate() {
            let pr = v.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
            l1[pix] = -alpha * (1.0 - pr).powf(gamma) * pr.ln();
            l0[pix] = -(1.0 - alpha) * pr.powf(gamma) * (1.0 - pr).ln();
        }
        let l0_sum: f64 = l0.iter().sum();
        for (kk, cell) in out[q].iter_mut().enumerate() {
            let t = &g[kk * p..(kk + 1) * p];
            let mut inter = 0.0;
            let mut tsum = 0.0;
            let mut focal = l0_sum;
            for pix in 0..p {
                if t[pix] > 0.5 {
                    inter += row[pix];
                    tsum += 1.0;
                    focal += l1[pix] - l0[pix];
                }
            }
            let dice = 1.0 - (2.0 * inter + config.dice_eps) / (psum + tsum + config.dice_eps);
            *cell = wd * dice + wf * focal / p as f64;
        }
    }
    out
}

/// Matched segmentation loss and its parts.
#[derive(Clone, Debug)]
pub struct SegLoss {
    pub total: Var,
    pub dice: f64,
    pub focal: f64,
    pub ce: f64,
    /// `(query, region)` pairs.
    pub assignment: Assignment,
}

/// Loss of `soft[N_q × P]` against binary region masks `targets[K × P]`.
pub fn segmentation_loss(
    tape: &mut Tape,
    soft: Var,
    targets: &Tensor,
    config: &LossConfig,
) -> Result<SegLoss> {
    let (nq, p) = match *tape.shape(soft) {
        [nq, p] => (nq, p),
        ref s => {
            return Err(Error::invalid(format!(
                "soft masks must be [N_q × P], got {s:?}"
            )))
        }
    };
    if targets.rank() != 2 || targets.shape()[1] != p {
        return Err(Error::ShapeMismatch {
            op: "segmentation_loss",
            lhs: vec![nq, p],
            rhs: targets.shape().to_vec(),
        });
    }
    let k = targets.shape()[0];
    if k == 0 {
        return Err(Error::invalid(
            "segmentation loss needs at least one ground-truth region",
        ));
    }
    let (wd, wf, wce) = config.weights();
    let cost = cost_matrix(tape.value(soft), targets, config);
    let assignment = hungarian_match(&cost)?;
    let queries: Vec<usize> = assignment.pairs.iter().map(|&(q, _)| q).collect();
    let regions: Vec<usize> = assignment.pairs.iter().map(|&(_, r)| r).collect();
    let matched = tape.gather_rows(soft, &queries)?;
    let m = regions.len();
    let mut tdata = Vec::with_capacity(m * p);
    for &r in &regions {
        tdata.extend_from_slice(&targets.data()[r * p..(r + 1) * p]);
    }
    let target = Tensor::new(&[m, p], tdata)?;

    let dice = dice_rows(tape, matched, &target, config.dice_eps)?;
    let dice = tape.mean(dice);
    let focal = focal_rows(
        tape,
        matched,
        &target,
        config.focal_alpha,
        config.focal_gamma,
    )?;
    let focal = tape.mean(focal);
    let wdice = tape.scale(dice, wd);
    let wfocal = tape.scale(focal, wf);
    let mut total = tape.add(wdice, wfocal)?;

    let mut ce_value = 0.0;
    if wce > 0.0 {
        let covered: f64 = target.data().iter().sum();
        if covered > 0.0 {
            let clamped = tape.clamp(matched, CE_FLOOR, 1.0);
            let logp = tape.ln(clamped);
            let t = tape.constant(target.clone());
            let picked = tape.mul(logp, t)?;
            let s = tape.sum(picked);
            let ce = tape.scale(s, -1.0 / covered);
            ce_value = tape.value(ce).item();
            let wce_var = tape.scale(ce, wce);
            total = tape.add(total, wce_var)?;
        }
    }
    Ok(SegLoss {
        total,
        dice: tape.value(dice).item(),
        focal: tape.value(focal).item(),
        ce: ce_value,
        assignment,
    })
}

/// Rows scaled to unit Euclidean norm.
pub fn unit_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ss = tape.sum_last(sq);
    let ss = tape.add_scalar(ss, NORM_EPS);
    let inv = tape.powf(ss, -0.5);
    tape.mul_col(x, inv)
}

/// Symmetric InfoNCE between pooled visual vectors `[B × d]` and their label
/// embeddings `[B × d]`, logits being cosine similarity over `temperature`.
pub fn contrastive_loss(
    tape: &mut Tape,
    visual: Var,
    labels: Var,
    temperature: f64,
) -> Result<Var> {
    let b = tape.shape(visual)[0];
    if b < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if tape.shape(visual) != tape.shape(labels) {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: tape.shape(visual).to_vec(),
            rhs: tape.shape(labels).to_vec(),
        });
    }
    let v = unit_rows(tape, visual)?;
    let l = unit_rows(tape, labels)?;
    let lt = tape.transpose(l)?;
    let logits = tape.matmul(v, lt)?;
    let logits = tape.scale(logits, 1.0 / temperature);
    let eye = tape.constant(Tensor::eye(b));
    let mut sides = Vec::with_capacity(2);
    for axis in [1, 0] {
        let ls = tape.log_softmax(logits, axis)?;
        let diag = tape.mul(ls, eye)?;
        let s = tape.sum(diag);
        sides.push(tape.scale(s, -1.0 / (2.0 * b as f64)));
    }
    tape.add(sides[0], sides[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    #[test]
    fn dice_half_overlap() {
        let d = value(|t| {
            let p = t.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
            dice_loss(t, p, &Tensor::from_rows(&[&[1.0, 0.0]]), 1e-6).unwrap()
        });
        assert!((d - 0.5).abs() < 1e-6);
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let f = value(|t| {
            let p = t.constant(Tensor::from_rows(&[&[0.5]]));
            focal_loss(t, p, &Tensor::from_rows(&[&[1.0]]), 1.0, 0.0).unwrap()
        });
        assert!((f - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn weights_follow_switches() {
        let mut c = LossConfig::default();
        assert_eq!(c.weights(), (1.0, 1.0, 0.0));
        c.use_ce = true;
        assert_eq!(c.weights().2, 1.0);
        c.lambda_ce = 0.3;
        assert_eq!(c.weights().2, 0.3);
        c.use_dice = false;
        assert_eq!(c.weights().0, 0.0);
    }

    #[test]
    fn cost_matrix_matches_taped_losses() {
        let soft = Tensor::from_rows(&[&[0.6, 0.3, 0.2], &[0.4, 0.7, 0.8]]);
        let targets = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0]]);
        let cfg = LossConfig::default();
        let cost = cost_matrix(&soft, &targets, &cfg);
        for q in 0..2 {
            for k in 0..2 {
                let row = |t: &Tensor, i: usize| {
                    Tensor::new(&[3], t.data()[i * 3..i * 3 + 3].to_vec()).unwrap()
                };
                let expect = value(|t| {
                    let p = t.constant(row(&soft, q));
                    let d = dice_loss(t, p, &row(&targets, k), cfg.dice_eps).unwrap();
                    let f = focal_loss(t, p, &row(&targets, k), cfg.focal_alpha, cfg.focal_gamma)
                        .unwrap();
                    t.add(d, f).unwrap()
                });
                assert!((cost[q][k] - expect).abs() < 1e-12, "{q},{k}");
            }
        }
    }
}
