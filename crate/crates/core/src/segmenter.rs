//! Learnable-query Perceiver segmenter.
//!
//! `N_q` latent queries cross-attend to rotary-embedded patch features, and
//! the processed queries `q̂` score every feature vector by dot product. A
//! softmax over the query axis turns the scores into soft masks; an argmax
//! turns those into disjoint hard masks. Queries that win no pixel are
//! inactive and produce no trajectory.

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Norm, PerceiverLayer};
use crate::params::{Binder, Init, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const QUERY_BANK: &str = "segmenter.queries";
const QUERY_INIT_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterConfig {
    pub queries: usize,
    pub perceiver_layers: usize,
    pub heads: usize,
    /// Sever the features from the tape before the Perceiver.
    pub detach_features: bool,
    /// With `detach_features`, also use the severed features for the mask
    /// logits.
    pub detach_in_logits: bool,
    pub rope_base: f64,
    /// Frames per temporal chunk.
    pub chunk_len: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            queries: 16,
            perceiver_layers: 2,
            heads: 8,
            detach_features: true,
            detach_in_logits: true,
            rope_base: 10_000.0,
            chunk_len: 8,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.perceiver_layers == 0 || self.queries == 0 || self.chunk_len == 0 {
            return Err(Error::Config(
                "segmenter needs at least one layer, one query and chunk_len ≥ 1".into(),
            ));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "feature width {dim} must be even and divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Rotary embedding of every feature vector at its flattened position
/// `t·h·w + i·w + j`.
pub fn rope_embed(tape: &mut Tape, features: &FeatureMap, base: f64) -> Result<FeatureMap> {
    if !features.dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "rope needs an even width, got {}",
            features.dim
        )));
    }
    let var = tape.rope(features.var, base, 0)?;
    Ok(features.with_var(var))
}

#[derive(Clone, Copy, Debug)]
pub struct SegmenterOutput {
    /// Processed queries `q̂[N_q×d]`.
    pub queries: Var,
    /// Soft masks `[N_q × T·h·w]`.
    pub soft: Var,
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
    layers: Vec<PerceiverLayer>,
    out_norm: Norm,
}

impl Segmenter {
    pub fn new(
        config: SegmenterConfig,
        dim: usize,
        params: &mut ParamSet,
        init: &Init,
    ) -> Result<Self> {
        config.validate(dim)?;
        params.insert(
            QUERY_BANK,
            init.normal(QUERY_BANK, &[config.queries, dim], QUERY_INIT_STD),
        );
        let layers = (0..config.perceiver_layers)
            .map(|l| {
                PerceiverLayer::new(
                    params,
                    init,
                    &format!("segmenter.layer{l}"),
                    dim,
                    config.heads,
                    true,
                )
            })
            .collect();
        // No shift here: a vector added to every query would move all mask
        // logits of a position together and never be learned.
        let out_norm = Norm::gain_only(params, "segmenter.out_norm", dim);
        Ok(Self {
            config,
            layers,
            out_norm,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    /// `q̂ = Norm(Perceiver(Q, RoPE(F)))`.
    pub fn run_perceiver(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        features: &FeatureMap,
    ) -> Result<Var> {
        let bank = p.get(tape, QUERY_BANK)?;
        let width = tape.shape(bank)[1];
        if width != features.dim {
            return Err(Error::ShapeMismatch {
                op: "run_perceiver",
                lhs: tape.shape(bank).to_vec(),
                rhs: vec![features.positions(), features.dim],
            });
        }
        let rotated = rope_embed(tape, features, self.config.rope_base)?;
        let kv = if self.config.detach_features {
            tape.detach(rotated.var)
        } else {
            rotated.var
        };
        let mut q = bank;
        for layer in &self.layers {
            q = layer.forward(tape, p, q, kv, None)?;
        }
        self.out_norm.forward(tape, p, q)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        features: &FeatureMap,
    ) -> Result<SegmenterOutput> {
        let queries = self.run_perceiver(tape, p, features)?;
        let sever = self.config.detach_features && self.config.detach_in_logits;
        let soft = soft_masks(tape, queries, features, sever)?;
        Ok(SegmenterOutput { queries, soft })
    }
}

/// `softmax_k(q̂_k · F[t,i,j])` as `[N_q × T·h·w]`.
pub fn soft_masks(
    tape: &mut Tape,
    queries: Var,
    features: &FeatureMap,
    detach_features: bool,
) -> Result<Var> {
    let f = if detach_features {
        tape.detach(features.var)
    } else {
        features.var
    };
    let ft = tape.transpose(f)?;
    let logits = tape.matmul(queries, ft)?;
    tape.softmax(logits, 0)
}

/// Per-position argmax of a soft mask, lowest query index on exact ties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardMasks {
    queries: usize,
    winner: Vec<usize>,
    active: Vec<bool>,
}

impl HardMasks {
    pub fn from_winners(queries: usize, winner: Vec<usize>) -> Self {
        let mut active = vec![false; queries];
        for &k in &winner {
            active[k] = true;
        }
        Self {
            queries,
            winner,
            active,
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn positions(&self) -> usize {
        self.winner.len()
    }

    pub fn winner(&self, pos: usize) -> usize {
        self.winner[pos]
    }

    pub fn winners(&self) -> &[usize] {
        &self.winner
    }

    pub fn contains(&self, query: usize, pos: usize) -> bool {
        self.winner[pos] == query
    }

    /// `active[k]` iff mask `k` holds at least one position.
    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_queries(&self) -> Vec<usize> {
        (0..self.queries).filter(|&k| self.active[k]).collect()
    }

    pub fn region_size(&self, query: usize) -> usize {
        self.winner.iter().filter(|&&w| w == query).count()
    }

    /// `[N_q × positions]` one-hot tensor.
    pub fn one_hot(&self) -> Tensor {
        let p = self.winner.len();
        let mut t = Tensor::zeros(&[self.queries, p]);
        for (pos, &k) in self.winner.iter().enumerate() {
            t.data_mut()[k * p + pos] = 1.0;
        }
        t
    }

    pub fn mask(&self, query: usize) -> Vec<bool> {
        self.winner.iter().map(|&w| w == query).collect()
    }
}

/// Argmax over the query axis of `soft[N_q × P]`.
pub fn harden(soft: &Tensor) -> Result<HardMasks> {
    if soft.rank() != 2 || soft.shape()[0] == 0 {
        return Err(Error::invalid(format!(
            "harden expects [N_q × P], got {:?}",
            soft.shape()
        )));
    }
    let (nq, p) = (soft.shape()[0], soft.shape()[1]);
    let d = soft.data();
    let winner = (0..p)
        .map(|pos| {
            let mut best = 0;
            for k in 1..nq {
                if d[k * p + pos] > d[best * p + pos] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(HardMasks::from_winners(nq, winner))
}

/// Soft and hard masks of one chunk.
#[derive(Clone, Debug)]
pub struct SegmentationPair {
    pub soft: Tensor,
    pub hard: HardMasks,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Consecutive chunks of `chunk_len` frames; the last may be shorter.
pub fn chunk_video(video: &Tensor, chunk_len: usize) -> Result<Vec<Tensor>> {
    if chunk_len == 0 {
        return Err(Error::invalid("chunk_len must be at least 1"));
    }
    if video.rank() == 0 || video.shape()[0] == 0 {
        return Err(Error::invalid("cannot chunk an empty video"));
    }
    let frames = video.shape()[0];
    let frame_len = video.numel() / frames;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < frames {
        let len = chunk_len.min(frames - start);
        let mut shape = video.shape().to_vec();
        shape[0] = len;
        let data = video.data()[start * frame_len..(start + len) * frame_len].to_vec();
        chunks.push(Tensor::new(&shape, data)?);
        start += len;
    }
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harden_prefers_lowest_index_on_ties() {
        let soft = Tensor::from_rows(&[&[0.7, 0.5, 0.2], &[0.3, 0.5, 0.8]]);
        let hard = harden(&soft).unwrap();
        assert_eq!(hard.winners(), &[0, 0, 1]);
        assert_eq!(hard.active(), &[true, true]);
    }

    #[test]
    fn query_that_never_wins_is_inactive() {
        let soft = Tensor::from_rows(&[&[0.6, 0.6], &[0.1, 0.1], &[0.3, 0.3]]);
        let hard = harden(&soft).unwrap();
        assert_eq!(hard.active(), &[true, false, false]);
        assert_eq!(hard.active_queries(), vec![0]);
    }

    #[test]
    fn one_hot_has_one_entry_per_position() {
        let hard = HardMasks::from_winners(3, vec![2, 0, 2, 1]);
        let oh = hard.one_hot();
        for pos in 0..4 {
            let col: f64 = (0..3).map(|k| oh.at(&[k, pos])).sum();
            assert_eq!(col, 1.0);
        }
    }

    #[test]
    fn chunking() {
        let video = Tensor::from_fn(&[10, 2, 2, 3], |i| i as f64);
        let chunks = chunk_video(&video, 8).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].shape()[0], 8);
        assert_eq!(chunks[1].shape()[0], 2);
        let joined: Vec<f64> = chunks.iter().flat_map(|c| c.data().to_vec()).collect();
        assert_eq!(joined, video.data());

        let video = Tensor::zeros(&[16, 1, 1, 3]);
        let chunks = chunk_video(&video, 8).unwrap();
        assert_eq!(
            chunks.iter().map(|c| c.shape()[0]).collect::<Vec<_>>(),
            vec![8, 8]
        );
        assert_eq!(chunk_video(&video, 40).unwrap().len(), 1);
        assert!(chunk_video(&video, 0).is_err());
    }
}
