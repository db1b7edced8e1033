//! Trajectory-level evaluation, data-quality filters and the analytical
//! FLOPs model comparing trajectory tokens against space-time patches.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matching::{brute_force_match, hungarian_match, Assignment};
use crate::model::ModelConfig;
use crate::segmenter::HardMasks;
use crate::video::region_masks;

/// Spatiotemporal IoU of two masks over the same grid.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou_matrix(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    if gt.is_empty() {
        return Err(Error::invalid("ground truth has no regions"));
    }
    let len = gt[0].len();
    if pred.iter().chain(gt).any(|m| m.len() != len) {
        return Err(Error::invalid(
            "prediction and ground truth live on different grids",
        ));
    }
    Ok(pred
        .iter()
        .map(|p| gt.iter().map(|g| iou(p, g)).collect())
        .collect())
}

fn miou_with(
    pred: &[Vec<bool>],
    gt: &[Vec<bool>],
    matcher: fn(&[Vec<f64>]) -> Result<Assignment>,
) -> Result<f64> {
    let m = iou_matrix(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let cost: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let a = matcher(&cost)?;
    let total: f64 = a.pairs.iter().map(|&(p, g)| m[p][g]).sum();
    Ok(total / gt.len() as f64)
}

/// Mean IoU over ground-truth trajectories after a maximum-IoU one-to-one
/// matching; unmatched ground truth scores 0.
pub fn trajectory_miou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    miou_with(pred, gt, hungarian_match)
}

/// [`trajectory_miou`] with exhaustive matching.
pub fn trajectory_miou_brute_force(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    miou_with(pred, gt, brute_force_match)
}

/// Matched mIoU of one chunk's hard masks against grid-aligned labels. The
/// ground-truth trajectories are the shape labels `1..=K`; every active query
/// competes for them, including the one holding the background. A chunk
/// showing no shape scores its background as the lone region.
pub fn chunk_miou(hard: &HardMasks, labels: &[u32]) -> Result<f64> {
    if labels.len() != hard.positions() {
        return Err(Error::invalid(format!(
            "{} labels for {} mask positions",
            labels.len(),
            hard.positions()
        )));
    }
    let pred: Vec<Vec<bool>> = hard
        .active_queries()
        .into_iter()
        .map(|k| hard.mask(k))
        .collect();
    let (ids, masks) = region_masks(labels);
    let shapes: Vec<Vec<bool>> = ids
        .iter()
        .zip(&masks)
        .filter(|(&id, _)| id != 0)
        .map(|(_, m)| m.clone())
        .collect();
    trajectory_miou(&pred, if shapes.is_empty() { &masks } else { &shapes })
}

/// Fraction of positions covered by at least one mask.
pub fn coverage(masks: &[Vec<bool>]) -> f64 {
    let Some(len) = masks.first().map(Vec::len) else {
        return 0.0;
    };
    if len == 0 {
        return 0.0;
    }
    let covered = (0..len).filter(|&i| masks.iter().any(|m| m[i])).count();
    covered as f64 / len as f64
}

/// Number of non-empty masks.
pub fn object_count(masks: &[Vec<bool>]) -> usize {
    masks.iter().filter(|m| m.iter().any(|&x| x)).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub min_coverage: f64,
    pub min_objects: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_coverage: 0.8,
            min_objects: 10,
        }
    }
}

/// Quality filter; both thresholds are inclusive.
pub fn passes_filters(masks: &[Vec<bool>], config: &FilterConfig) -> bool {
    coverage(masks) >= config.min_coverage && object_count(masks) >= config.min_objects
}

/// Cost-model knobs that are not part of the tokenizer itself.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsConfig {
    pub height: usize,
    pub width: usize,
    /// Trajectories per video; fixed by the scene, not the duration.
    pub scene_tokens: usize,
    /// Sub-tokens per trajectory.
    pub n: usize,
    pub downstream_dim: usize,
    pub downstream_depth: usize,
    pub tubelet: usize,
    pub patch: usize,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            scene_tokens: 32,
            n: 1,
            downstream_dim: 768,
            downstream_depth: 12,
            tubelet: 2,
            patch: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsModel {
    TrajTok,
    Vit3d,
}

/// Operation counts by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlopsBreakdown {
    pub encoder: f64,
    pub segmenter: f64,
    pub refine: f64,
    pub embed: f64,
    pub downstream: f64,
}

impl FlopsBreakdown {
    pub fn tokenizer(&self) -> f64 {
        self.encoder + self.segmenter + self.refine
    }

    pub fn total(&self) -> f64 {
        self.tokenizer() + self.embed + self.downstream
    }
}

/// `2mkn`.
pub fn matmul_flops(m: f64, k: f64, n: f64) -> f64 {
    2.0 * m * k * n
}

/// Self-attention over `l` tokens of width `d`: `4ld² + 4l²d`.
pub fn attention_flops(l: f64, d: f64) -> f64 {
    cross_attention_flops(l, l, d)
}

/// `lq` queries over `lk` keys; reduces to [`attention_flops`] when equal.
pub fn cross_attention_flops(lq: f64, lk: f64, d: f64) -> f64 {
    2.0 * lq * d * d + 2.0 * lk * d * d + 4.0 * lq * lk * d
}

/// Depthwise `k×k` convolution producing `out_elems` values.
pub fn depthwise_flops(k: f64, out_elems: f64) -> f64 {
    2.0 * k * k * out_elems
}

fn transformer_layer(l: f64, d: f64) -> f64 {
    attention_flops(l, d) + matmul_flops(l, d, 4.0 * d) + matmul_flops(l, 4.0 * d, d)
}

fn encoder_flops(model: &ModelConfig, frames: f64, h: f64, w: f64) -> f64 {
    let e = &model.encoder;
    let widths: Vec<f64> = e.stage_widths.iter().map(|&c| c as f64).collect();
    let d = e.dim as f64;
    let mut l = (h / 4.0) * (w / 4.0);
    let mut total = matmul_flops(l, 48.0, widths[0]);
    let mut fused = vec![(l, widths[0])];
    for (s, &c) in widths.iter().enumerate() {
        if s > 0 {
            let prev = widths[s - 1];
            l /= 4.0;
            total += matmul_flops(l, 4.0 * prev, c);
        }
        let block =
            depthwise_flops(7.0, l * c) + matmul_flops(l, c, 4.0 * c) + matmul_flops(l, 4.0 * c, c);
        total += block * e.stage_depths[s] as f64;
        fused.push((l, c));
    }
    if !e.fuse_stem {
        fused = vec![*fused.last().expect("stages")];
    }
    total += fused
        .iter()
        .map(|&(l, c)| matmul_flops(l, c, d))
        .sum::<f64>();
    total * frames
}

fn chunk_lengths(frames: usize, chunk_len: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut left = frames;
    while left > 0 {
        let len = chunk_len.min(left);
        out.push(len as f64);
        left -= len;
    }
    out
}

/// Closed-form operation count of one forward pass over `frames` frames.
pub fn flops_breakdown(
    kind: FlopsModel,
    frames: usize,
    model: &ModelConfig,
    cfg: &FlopsConfig,
) -> FlopsBreakdown {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let t = frames as f64;
    let big_d = cfg.downstream_dim as f64;
    let depth = cfg.downstream_depth as f64;
    match kind {
        FlopsModel::Vit3d => {
            let l = (t / cfg.tubelet as f64) * (h / cfg.patch as f64) * (w / cfg.patch as f64);
            let patch_len = (cfg.tubelet * cfg.patch * cfg.patch * 3) as f64;
            FlopsBreakdown {
                embed: matmul_flops(l, patch_len, big_d),
                downstream: depth * transformer_layer(l, big_d),
                ..Default::default()
            }
        }
        FlopsModel::TrajTok => {
            let d = model.encoder.dim as f64;
            let nq = model.segmenter.queries as f64;
            let grid = (h / 4.0) * (w / 4.0);
            let sub = (cfg.scene_tokens * cfg.n) as f64;
            let mut segmenter = 0.0;
            let mut refine = 0.0;
            for len in chunk_lengths(frames, model.segmenter.chunk_len) {
                let p = len * grid;
                let layer = cross_attention_flops(nq, p, d)
                    + attention_flops(nq, d)
                    + transformer_ff(nq, d);
                segmenter +=
                    layer * model.segmenter.perceiver_layers as f64 + matmul_flops(nq, d, p);
                // Masked refinement: regions partition the chunk, so each
                // position is scored by the n sub-queries of one trajectory.
                let masked = 2.0 * sub * d * d + 2.0 * p * d * d + 4.0 * cfg.n as f64 * p * d;
                refine += (masked + transformer_ff(sub, d)) * model.traj.layers as f64
                    + matmul_flops(nq, p, d);
            }
            FlopsBreakdown {
                encoder: encoder_flops(model, t, h, w),
                segmenter,
                refine,
                embed: 0.0,
                downstream: depth * transformer_layer(sub, big_d),
            }
        }
    }
}

fn transformer_ff(l: f64, d: f64) -> f64 {
    matmul_flops(l, d, 4.0 * d) + matmul_flops(l, 4.0 * d, d)
}

pub fn flops_estimate(
    kind: FlopsModel,
    frames: usize,
    model: &ModelConfig,
    cfg: &FlopsConfig,
) -> f64 {
    flops_breakdown(kind, frames, model, cfg).total()
}

/// Frames-versus-FLOPs table, one row per frame count.
pub fn flops_csv(frames: &[usize], model: &ModelConfig, cfg: &FlopsConfig) -> String {
    let mut out = String::from("frames,trajtok,vit3d,trajtok_tokenizer,trajtok_downstream\n");
    for &t in frames {
        let tt = flops_breakdown(FlopsModel::TrajTok, t, model, cfg);
        let vit = flops_estimate(FlopsModel::Vit3d, t, model, cfg);
        let _ = writeln!(
            out,
            "{t},{:.0},{:.0},{:.0},{:.0}",
            tt.total(),
            vit,
            tt.tokenizer(),
            tt.downstream
        );
    }
    out
}

/// Summary of an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub videos: usize,
    pub trajectory_miou: f64,
    pub coverage: f64,
    /// Mean active trajectories per chunk, rounded.
    pub object_count: usize,
    pub tokens_per_chunk: Vec<usize>,
    /// `(model, FLOPs)` at the evaluated clip length.
    pub flops: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "videos={}", self.videos);
        let _ = writeln!(out, "trajectory_miou={:.6}", self.trajectory_miou);
        let _ = writeln!(out, "coverage={:.6}", self.coverage);
        let _ = writeln!(out, "object_count={}", self.object_count);
        let tokens: Vec<String> = self.tokens_per_chunk.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "tokens_per_chunk={}", tokens.join(","));
        for (name, f) in &self.flops {
            let _ = writeln!(out, "flops_{name}={f:.0}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mean_tokens = if self.tokens_per_chunk.is_empty() {
            0.0
        } else {
            self.tokens_per_chunk.iter().sum::<usize>() as f64 / self.tokens_per_chunk.len() as f64
        };
        let mut header =
            String::from("videos,trajectory_miou,coverage,object_count,mean_tokens_per_chunk");
        let mut row = format!(
            "{},{:.6},{:.6},{},{:.3}",
            self.videos, self.trajectory_miou, self.coverage, self.object_count, mean_tokens
        );
        for (name, f) in &self.flops {
            let _ = write!(header, ",flops_{name}");
            let _ = write!(row, ",{f:.0}");
        }
        format!("{header}\n{row}\n")
    }
}
