//! Deterministic training for the segmenter alone or jointly with the
//! contrastive stand-in objective.
//!
//! Every random choice is a pure function of `(seed, step)`: the batch comes
//! from a per-epoch shuffle and the sub-token count from a per-step stream.
//! Resuming a checkpoint at step `s` therefore replays exactly the same
//! steps as an uninterrupted run. Per-item gradients may be computed in
//! parallel but are summed in item order.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, segmentation_loss};
use crate::metrics::{chunk_miou, coverage, flops_estimate, EvalReport, FlopsConfig, FlopsModel};
use crate::model::{Model, LABEL_EMBEDDINGS};
use crate::params::{Binder, ParamSet};
use crate::rng::Rng;
use crate::segmenter::chunk_video;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::traj::check_n;
use crate::video::{downsample_labels, region_masks, VideoRecord};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const N_STREAM: u64 = 0x6E5A_4D50;
const BATCH_STREAM: u64 = 0xBA7C_4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Decay after warmup.
    pub schedule: Schedule,
    pub seed: u64,
    pub n_choices: Vec<usize>,
    /// Add the contrastive objective with unit weight.
    pub joint: bool,
    /// Validation mIoU is logged every this many steps and at the end; 0
    /// disables it.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 25,
            schedule: Schedule::Cosine,
            seed: 7,
            n_choices: vec![1, 2, 4],
            joint: false,
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps and batch_size must be at least 1".into(),
            ));
        }
        if self.n_choices.is_empty() {
            return Err(Error::Config("n_choices must not be empty".into()));
        }
        for &n in &self.n_choices {
            check_n(n).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.joint && self.batch_size < 2 {
            return Err(Error::Config("joint training needs batch_size ≥ 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`: linear warmup, then decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        match self.schedule {
            Schedule::Cosine => base * 0.5 * (1.0 + (PI * progress).cos()),
            Schedule::Linear => base * (1.0 - progress),
        }
    }
}

/// The ablation switches, each living in the config section of the module
/// it changes.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub detach_features: bool,
    pub fuse_stem: bool,
    pub use_dice: bool,
    pub use_focal: bool,
    pub use_ce: bool,
    pub use_mask: bool,
    pub fourier_init: bool,
    pub perceiver_depth: usize,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::of(&Config::default())
    }
}

impl Ablation {
    pub fn of(config: &Config) -> Self {
        Self {
            detach_features: config.model.segmenter.detach_features,
            fuse_stem: config.model.encoder.fuse_stem,
            use_dice: config.loss.use_dice,
            use_focal: config.loss.use_focal,
            use_ce: config.loss.use_ce,
            use_mask: config.model.traj.use_mask,
            fourier_init: config.model.traj.fourier_init,
            perceiver_depth: config.model.segmenter.perceiver_layers,
        }
    }

    pub fn apply(&self, config: &mut Config) {
        config.model.segmenter.detach_features = self.detach_features;
        config.model.encoder.fuse_stem = self.fuse_stem;
        config.loss.use_dice = self.use_dice;
        config.loss.use_focal = self.use_focal;
        config.loss.use_ce = self.use_ce;
        config.model.traj.use_mask = self.use_mask;
        config.model.traj.fourier_init = self.fourier_init;
        config.model.segmenter.perceiver_layers = self.perceiver_depth;
    }

    /// One named row per ablation axis, baseline first.
    pub fn rows() -> Vec<(&'static str, Ablation)> {
        let base = Ablation::default();
        let with = |f: &dyn Fn(&mut Ablation)| {
            let mut a = base.clone();
            f(&mut a);
            a
        };
        vec![
            ("baseline", base.clone()),
            ("no-detach", with(&|a| a.detach_features = false)),
            ("no-hierarchy", with(&|a| a.fuse_stem = false)),
            ("no-dice", with(&|a| a.use_dice = false)),
            ("no-focal", with(&|a| a.use_focal = false)),
            ("plus-ce", with(&|a| a.use_ce = true)),
            ("no-mask", with(&|a| a.use_mask = false)),
            ("random-init", with(&|a| a.fourier_init = false)),
            ("depth-1", with(&|a| a.perceiver_depth = 1)),
            ("depth-3", with(&|a| a.perceiver_depth = 3)),
        ]
    }
}

/// Uniform draw from `choices`.
pub fn sample_n(rng: &mut Rng, choices: &[usize]) -> Result<usize> {
    if choices.is_empty() {
        return Err(Error::invalid("no sub-token counts to sample from"));
    }
    Ok(choices[rng.below(choices.len() as u64) as usize])
}

/// Sub-token count used at 0-based `step`.
pub fn step_n(seed: u64, step: usize, choices: &[usize]) -> Result<usize> {
    sample_n(&mut Rng::keyed(seed ^ N_STREAM, step as u64), choices)
}

/// Training-set indices of the batch at 0-based `step`: consecutive slices
/// of a fresh shuffle per epoch.
pub fn batch_indices(seed: u64, step: usize, batch: usize, len: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|i| {
            let g = step * batch + i;
            let (epoch, pos) = (g / len, g % len);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..len).collect();
                Rng::keyed(seed ^ BATCH_STREAM, epoch as u64).shuffle(&mut order);
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("order cached").1[pos]
        })
        .collect()
}

/// A video cut into chunks with targets on the feature grid.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub chunks: Vec<Tensor>,
    /// Grid-aligned labels of each chunk.
    pub labels: Vec<Vec<u32>>,
    /// Binary region masks `[K × P]` of each chunk, background included.
    pub targets: Vec<Tensor>,
    pub scene_class: usize,
}

impl PreparedVideo {
    pub fn new(video: &VideoRecord, chunk_len: usize) -> Result<Self> {
        let factor = crate::encoder::STEM_STRIDE;
        let [t, h, w, _] = match *video.pixels.shape() {
            [t, h, w, c] => [t, h, w, c],
            ref s => return Err(Error::invalid(format!("video must be T×H×W×3, got {s:?}"))),
        };
        if video.labels.len() != t * h * w {
            return Err(Error::invalid(format!(
                "{} labels for a {t}×{h}×{w} video",
                video.labels.len()
            )));
        }
        let grid = downsample_labels(&video.labels, t, h, w, factor);
        let cell = (h / factor) * (w / factor);
        let chunks = chunk_video(&video.pixels, chunk_len)?;
        let mut labels = Vec::with_capacity(chunks.len());
        let mut targets = Vec::with_capacity(chunks.len());
        let mut start = 0;
        for chunk in &chunks {
            let len = chunk.shape()[0];
            let lab = grid[start * cell..(start + len) * cell].to_vec();
            let (_, masks) = region_masks(&lab);
            let p = lab.len();
            let data = masks
                .iter()
                .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect();
            targets.push(Tensor::new(&[masks.len(), p], data)?);
            labels.push(lab);
            start += len;
        }
        Ok(Self {
            chunks,
            labels,
            targets,
            scene_class: video.scene_class,
        })
    }
}

pub fn prepare(videos: &[VideoRecord], chunk_len: usize) -> Result<Vec<PreparedVideo>> {
    videos
        .iter()
        .map(|v| PreparedVideo::new(v, chunk_len))
        .collect()
}

/// Parameters with their optimizer moments.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Steps completed.
    pub step: usize,
    pub params: ParamSet,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl TrainState {
    pub fn fresh(params: ParamSet) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.params.bit_eq(&other.params)
            && self.m.bit_eq(&other.m)
            && self.v.bit_eq(&other.v)
    }
}

/// One AdamW update with bias correction at 1-based step `t`.
pub fn adamw_step(
    state: &mut TrainState,
    grads: &ParamSet,
    lr: f64,
    weight_decay: f64,
    t: usize,
) -> Result<()> {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    let TrainState { params, m, v, .. } = state;
    for ((name, p), ((_, m), (_, v))) in params.iter_mut().zip(m.iter_mut().zip(v.iter_mut())) {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
        let (p, m, v, g) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS) + weight_decay * p[i];
            p[i] -= lr * update;
        }
    }
    Ok(())
}

/// Scalars recorded for one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub n: usize,
    pub loss: f64,
    pub seg: f64,
    pub dice: f64,
    pub focal: f64,
    pub ce: f64,
    pub contrastive: f64,
    /// Mean active trajectories per chunk.
    pub active: f64,
    pub val_miou: Option<f64>,
}

impl StepStats {
    /// `step=<u64> key=value ...`
    pub fn log_line(&self) -> String {
        let mut line = format!(
            "step={} lr={:.6e} n={} loss={:.6} seg={:.6} dice={:.6} focal={:.6} ce={:.6} contrastive={:.6} active={:.3}",
            self.step, self.lr, self.n, self.loss, self.seg, self.dice, self.focal, self.ce, self.contrastive, self.active
        );
        if let Some(m) = self.val_miou {
            line.push_str(&format!(" val_miou={m:.6}"));
        }
        line
    }
}

struct ItemOut {
    grads: ParamSet,
    seg: f64,
    dice: f64,
    focal: f64,
    ce: f64,
    active: f64,
}

/// Forward of one item on a tape: mean segmentation loss over chunks and,
/// when `n` is given, the mean of all refined tokens as a `[1 × d]` row.
pub fn item_forward(
    model: &Model,
    config: &Config,
    tape: &mut Tape,
    p: &mut Binder,
    item: &PreparedVideo,
    n: Option<usize>,
) -> Result<(Var, Option<Var>, [f64; 4])> {
    let chunks = item.chunks.len() as f64;
    let mut total: Option<Var> = None;
    let mut tokens = Vec::new();
    let mut stats = [0.0; 4];
    for (chunk, target) in item.chunks.iter().zip(&item.targets) {
        let (features, seg, hard) = model.segment(tape, p, chunk)?;
        let loss = segmentation_loss(tape, seg.soft, target, &config.loss)?;
        stats[0] += loss.dice / chunks;
        stats[1] += loss.focal / chunks;
        stats[2] += loss.ce / chunks;
        stats[3] += hard.active_queries().len() as f64 / chunks;
        let scaled = tape.scale(loss.total, 1.0 / chunks);
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
        if let Some(n) = n {
            let (_, refined) = model.encode_trajectories(tape, p, &features, &seg, &hard, n)?;
            tokens.push(refined.var);
        }
    }
    let total = total.ok_or_else(|| Error::invalid("video has no chunks"))?;
    let pooled = if tokens.is_empty() {
        None
    } else {
        let all = tape.concat_rows(&tokens)?;
        let rows = tape.shape(all)[0];
        let avg = tape.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
        Some(tape.matmul(avg, all)?)
    };
    Ok((total, pooled, stats))
}

/// Runs the trainer from `state` until `until` steps are complete (capped at
/// the configured total), writing one log line per step.
pub struct Trainer<'a> {
    pub model: Model,
    pub config: Config,
    pub train: &'a [PreparedVideo],
    pub val: &'a [PreparedVideo],
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: Config,
        train: &'a [PreparedVideo],
        val: &'a [PreparedVideo],
    ) -> Result<(Self, TrainState)> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let (model, params) = Model::new(config.model.clone(), config.train.seed)?;
        Ok((
            Self {
                model,
                config,
                train,
                val,
            },
            TrainState::fresh(params),
        ))
    }

    fn seg_item(&self, params: &ParamSet, item: &PreparedVideo, weight: f64) -> Result<ItemOut> {
        let mut tape = Tape::new();
        let mut p = Binder::new(params);
        let (loss, _, s) = item_forward(&self.model, &self.config, &mut tape, &mut p, item, None)?;
        let seg = tape.value(loss).item();
        let grads = tape.backward_with(&[(loss, Tensor::scalar(weight))])?;
        Ok(ItemOut {
            grads: p.gradients(&grads),
            seg,
            dice: s[0],
            focal: s[1],
            ce: s[2],
            active: s[3],
        })
    }

    fn pooled_value(&self, params: &ParamSet, item: &PreparedVideo, n: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut p = Binder::frozen(params);
        let (_, pooled, _) =
            item_forward(&self.model, &self.config, &mut tape, &mut p, item, Some(n))?;
        Ok(tape.value(pooled.expect("pooled requested")).clone())
    }

    fn joint_item(
        &self,
        params: &ParamSet,
        item: &PreparedVideo,
        n: usize,
        weight: f64,
        pooled_grad: Tensor,
    ) -> Result<ItemOut> {
        let mut tape = Tape::new();
        let mut p = Binder::new(params);
        let (loss, pooled, s) =
            item_forward(&self.model, &self.config, &mut tape, &mut p, item, Some(n))?;
        let seg = tape.value(loss).item();
        let pooled = pooled.expect("pooled requested");
        let grads = tape.backward_with(&[(loss, Tensor::scalar(weight)), (pooled, pooled_grad)])?;
        Ok(ItemOut {
            grads: p.gradients(&grads),
            seg,
            dice: s[0],
            focal: s[1],
            ce: s[2],
            active: s[3],
        })
    }

    /// Contrastive loss over the batch with gradients for the pooled rows and
    /// the label embeddings.
    fn contrastive(
        &self,
        params: &ParamSet,
        pooled: &[Tensor],
        classes: &[usize],
    ) -> Result<(f64, Vec<Tensor>, ParamSet)> {
        let d = self.model.dim();
        let data: Vec<f64> = pooled
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let mut tape = Tape::new();
        let visual = tape.param(Tensor::new(&[pooled.len(), d], data)?);
        let mut p = Binder::new(params);
        let table = p.get(&mut tape, LABEL_EMBEDDINGS)?;
        let labels = tape.gather_rows(table, classes)?;
        let loss = contrastive_loss(&mut tape, visual, labels, self.config.loss.temperature)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let dv = grads.get_or_zeros(&tape, visual);
        let rows = (0..pooled.len())
            .map(|i| Tensor::new(&[1, d], dv.data()[i * d..(i + 1) * d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((value, rows, p.gradients(&grads)))
    }

    /// One optimizer step; `state.step` advances by one.
    pub fn step(&self, state: &mut TrainState) -> Result<StepStats> {
        let cfg = &self.config.train;
        let s = state.step;
        let lr = cfg.lr_at(s);
        let n = step_n(cfg.seed, s, &cfg.n_choices)?;
        let batch = batch_indices(cfg.seed, s, cfg.batch_size, self.train.len());
        let weight = 1.0 / batch.len() as f64;
        let params = &state.params;

        let (outs, contrastive, label_grads) = if cfg.joint {
            let pooled = batch
                .par_iter()
                .map(|&i| self.pooled_value(params, &self.train[i], n))
                .collect::<Result<Vec<_>>>()?;
            let classes: Vec<usize> = batch.iter().map(|&i| self.train[i].scene_class).collect();
            let (value, rows, label_grads) = self.contrastive(params, &pooled, &classes)?;
            let outs = batch
                .par_iter()
                .zip(rows)
                .map(|(&i, g)| self.joint_item(params, &self.train[i], n, weight, g))
                .collect::<Result<Vec<_>>>()?;
            (outs, value, Some(label_grads))
        } else {
            let outs = batch
                .par_iter()
                .map(|&i| self.seg_item(params, &self.train[i], weight))
                .collect::<Result<Vec<_>>>()?;
            (outs, 0.0, None)
        };

        let mut grads = params.zeros_like();
        let mut stats = StepStats {
            step: s + 1,
            lr,
            n,
            contrastive,
            ..Default::default()
        };
        for out in &outs {
            grads.accumulate(&out.grads)?;
            stats.seg += out.seg * weight;
            stats.dice += out.dice * weight;
            stats.focal += out.focal * weight;
            stats.ce += out.ce * weight;
            stats.active += out.active * weight;
        }
        if let Some(g) = &label_grads {
            grads.accumulate(g)?;
        }
        stats.loss = stats.seg + contrastive;
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: (s + 1) as u64,
            });
        }
        adamw_step(state, &grads, lr, cfg.weight_decay, s + 1)?;
        state.step += 1;
        if cfg.eval_interval > 0
            && !self.val.is_empty()
            && (state.step.is_multiple_of(cfg.eval_interval) || state.step == cfg.steps)
        {
            stats.val_miou = Some(validation_miou(&self.model, &state.params, self.val)?);
        }
        Ok(stats)
    }

    /// Steps until `until` (or the configured total) are complete.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: Option<usize>,
        log: &mut dyn Write,
    ) -> Result<Vec<StepStats>> {
        let end = until
            .unwrap_or(self.config.train.steps)
            .min(self.config.train.steps);
        let mut all = Vec::new();
        while state.step < end {
            let stats = self.step(state)?;
            writeln!(log, "{}", stats.log_line()).map_err(|e| Error::io("<metric log>", e))?;
            all.push(stats);
        }
        Ok(all)
    }
}

/// Mean over videos of the per-chunk-averaged matched mIoU.
pub fn validation_miou(model: &Model, params: &ParamSet, videos: &[PreparedVideo]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::invalid("no validation videos"));
    }
    let per_video = videos
        .par_iter()
        .map(|v| video_miou(model, params, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_video.iter().sum::<f64>() / videos.len() as f64)
}

pub fn video_miou(model: &Model, params: &ParamSet, video: &PreparedVideo) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, labels) in video.chunks.iter().zip(&video.labels) {
        let mut tape = Tape::new();
        let mut p = Binder::frozen(params);
        let (_, _, hard) = model.segment(&mut tape, &mut p, chunk)?;
        total += chunk_miou(&hard, labels)?;
    }
    Ok(total / video.chunks.len() as f64)
}

/// Full report over `videos` at `n` sub-tokens: matched mIoU, mask
/// coverage, active trajectories and tokens per chunk, and FLOPs of both
/// models at the evaluated clip size.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    videos: &[PreparedVideo],
    n: usize,
    config: &Config,
) -> Result<EvalReport> {
    check_n(n)?;
    if videos.is_empty() {
        return Err(Error::invalid("no videos to evaluate"));
    }
    let per_video = videos
        .par_iter()
        .map(|v| -> Result<(f64, f64, Vec<usize>)> {
            let (mut miou, mut cover) = (0.0, 0.0);
            let mut active = Vec::new();
            for (chunk, labels) in v.chunks.iter().zip(&v.labels) {
                let mut tape = Tape::new();
                let mut p = Binder::frozen(params);
                let fwd = model.forward_chunk(&mut tape, &mut p, chunk, n)?;
                miou += chunk_miou(&fwd.hard, labels)?;
                let masks: Vec<Vec<bool>> = fwd
                    .hard
                    .active_queries()
                    .into_iter()
                    .map(|k| fwd.hard.mask(k))
                    .collect();
                cover += coverage(&masks);
                active.push(masks.len());
            }
            let c = v.chunks.len() as f64;
            Ok((miou / c, cover / c, active))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = videos.len() as f64;
    let actives: Vec<usize> = per_video
        .iter()
        .flat_map(|(_, _, a)| a.iter().copied())
        .collect();
    let mean_active = actives.iter().sum::<usize>() as f64 / actives.len().max(1) as f64;
    let frames: usize = videos[0].chunks.iter().map(|c| c.shape()[0]).sum();
    let shape = videos[0].chunks[0].shape();
    let flops_cfg = FlopsConfig {
        height: shape[1],
        width: shape[2],
        n,
        ..config.flops.clone()
    };
    let flops = [
        ("trajtok", FlopsModel::TrajTok),
        ("vit3d", FlopsModel::Vit3d),
    ]
    .iter()
    .map(|&(name, kind)| {
        (
            name.to_string(),
            flops_estimate(kind, frames, model.config(), &flops_cfg),
        )
    })
    .collect();
    Ok(EvalReport {
        videos: videos.len(),
        trajectory_miou: per_video.iter().map(|v| v.0).sum::<f64>() / count,
        coverage: per_video.iter().map(|v| v.1).sum::<f64>() / count,
        object_count: mean_active.round() as usize,
        tokens_per_chunk: actives.iter().map(|a| a * n).collect(),
        flops,
    })
}

/// Outcome of one ablation row.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub name: &'static str,
    pub ablation: Ablation,
    pub first_loss: f64,
    pub final_loss: f64,
    pub val_miou: f64,
    pub model: Model,
    pub params: ParamSet,
}

/// Trains every row of [`Ablation::rows`] on top of `base` from the same
/// seed and data.
pub fn run_ablations(
    base: &Config,
    train: &[PreparedVideo],
    val: &[PreparedVideo],
) -> Result<Vec<AblationResult>> {
    Ablation::rows()
        .into_iter()
        .map(|(name, ablation)| {
            let mut config = base.clone();
            ablation.apply(&mut config);
            let (trainer, mut state) = Trainer::new(config, train, val)?;
            let stats = trainer.run(&mut state, None, &mut std::io::sink())?;
            let (first, last) = match (stats.first(), stats.last()) {
                (Some(f), Some(l)) => (f.loss, l.loss),
                _ => return Err(Error::invalid("ablation run took no steps")),
            };
            Ok(AblationResult {
                name,
                ablation,
                first_loss: first,
                final_loss: last,
                val_miou: validation_miou(&trainer.model, &state.params, val)?,
                model: trainer.model,
                params: state.params,
            })
        })
        .collect()
}

/// Fixed-width comparison table, baseline first.
pub fn ablation_table(rows: &[AblationResult]) -> String {
    let mut out = format!(
        "{:<14} {:>10} {:>10} {:>9} {:>9}\n",
        "row", "loss@1", "loss@end", "val_miou", "vs_base"
    );
    let base = rows.first().map_or(0.0, |r| r.val_miou);
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>9.4} {:>+9.4}\n",
            r.name,
            r.first_loss,
            r.final_loss,
            r.val_miou,
            r.val_miou - base
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let c = TrainConfig {
            steps: 10,
            warmup_steps: 2,
            learning_rate: 1.0,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.5);
        assert_eq!(c.lr_at(1), 1.0);
        assert_eq!(c.lr_at(2), 1.0);
        assert!(c.lr_at(9) < c.lr_at(5));
        let linear = TrainConfig {
            schedule: Schedule::Linear,
            ..c
        };
        assert!((linear.lr_at(6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 2, 10)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sample_single_choice() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            assert_eq!(sample_n(&mut rng, &[1]).unwrap(), 1);
        }
        assert!(sample_n(&mut rng, &[]).is_err());
    }

    #[test]
    fn ablation_rows_differ_from_baseline_in_one_field() {
        let rows = Ablation::rows();
        let base = &rows[0].1;
        for (name, row) in &rows[1..] {
            assert_ne!(row, base, "{name}");
        }
    }
}
