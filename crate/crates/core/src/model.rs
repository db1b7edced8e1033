//! The full tokenizer: patch encoder, segmenter and trajectory encoder over
//! one parameter set, plus the per-class label embeddings used by the joint
//! contrastive objective.

use crate::encoder::{EncoderConfig, FeatureMap, PatchEncoder};
use crate::error::Result;
use crate::params::{Binder, Init, ParamSet};
use crate::segmenter::{
    chunk_video, harden, HardMasks, SegmentationPair, Segmenter, SegmenterConfig, SegmenterOutput,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::traj::{aggregate_soft, RefinedTokens, TrajConfig, TrajEncoder};
use crate::video::BackgroundKind;

pub const LABEL_EMBEDDINGS: &str = "contrastive.labels";
/// Scene classes of the contrastive stand-in (one per background kind).
pub const SCENE_CLASSES: usize = BackgroundKind::ALL.len();

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub segmenter: SegmenterConfig,
    pub traj: TrajConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub encoder: PatchEncoder,
    pub segmenter: Segmenter,
    pub traj: TrajEncoder,
}

/// Everything one chunk's forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ChunkForward {
    pub features: FeatureMap,
    pub seg: SegmenterOutput,
    pub hard: HardMasks,
    /// Proposals of the active queries, in query order.
    pub z_init: Var,
    pub tokens: RefinedTokens,
}

/// Refined tokens of one chunk as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTokenSet {
    /// `[N_active × n × d]`.
    pub tokens: Tensor,
    pub n: usize,
    pub chunk: usize,
    /// Query index of each trajectory.
    pub queries: Vec<usize>,
    pub empty: Vec<bool>,
}

impl TrajectoryTokenSet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ChunkResult {
    pub tokens: TrajectoryTokenSet,
    pub masks: SegmentationPair,
}

impl Model {
    /// Builds the modules and a freshly initialized parameter set.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        let mut params = ParamSet::new();
        let init = Init::new(seed);
        let model = Self::with_params(config, &mut params, &init)?;
        params.insert(
            LABEL_EMBEDDINGS,
            init.normal(LABEL_EMBEDDINGS, &[SCENE_CLASSES, model.dim()], 1.0),
        );
        Ok((model, params))
    }

    fn with_params(config: ModelConfig, params: &mut ParamSet, init: &Init) -> Result<Self> {
        let dim = config.encoder.dim;
        let encoder = PatchEncoder::new(config.encoder.clone(), params, init)?;
        let segmenter = Segmenter::new(config.segmenter.clone(), dim, params, init)?;
        let traj = TrajEncoder::new(config.traj.clone(), dim, params, init)?;
        Ok(Self {
            config,
            encoder,
            segmenter,
            traj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.dim
    }

    /// Features, segmenter output and hard masks of one chunk `[T×H×W×3]`.
    pub fn segment(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        chunk: &Tensor,
    ) -> Result<(FeatureMap, SegmenterOutput, HardMasks)> {
        let video = tape.constant(chunk.clone());
        let features = self.encoder.forward(tape, p, video)?;
        let seg = self.segmenter.forward(tape, p, &features)?;
        let hard = harden(tape.value(seg.soft))?;
        Ok((features, seg, hard))
    }

    /// Aggregation and refinement of the active queries.
    pub fn encode_trajectories(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        features: &FeatureMap,
        seg: &SegmenterOutput,
        hard: &HardMasks,
        n: usize,
    ) -> Result<(Var, RefinedTokens)> {
        let active = hard.active_queries();
        let soft = tape.gather_rows(seg.soft, &active)?;
        let z_init = aggregate_soft(tape, soft, features, self.config.traj.normalize_aggregation)?;
        let tokens = self
            .traj
            .refine(tape, p, z_init, features, hard, &active, n)?;
        Ok((z_init, tokens))
    }

    pub fn forward_chunk(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        chunk: &Tensor,
        n: usize,
    ) -> Result<ChunkForward> {
        let (features, seg, hard) = self.segment(tape, p, chunk)?;
        let (z_init, tokens) = self.encode_trajectories(tape, p, &features, &seg, &hard, n)?;
        Ok(ChunkForward {
            features,
            seg,
            hard,
            z_init,
            tokens,
        })
    }

    /// Inference over a whole video: chunk, segment, refine. Chunks are
    /// independent and come back in order.
    pub fn tokenize(
        &self,
        params: &ParamSet,
        video: &Tensor,
        n: usize,
        chunk_len: usize,
    ) -> Result<Vec<ChunkResult>> {
        let chunks = chunk_video(video, chunk_len)?;
        let mut out = Vec::with_capacity(chunks.len());
        for (index, chunk) in chunks.iter().enumerate() {
            let mut tape = Tape::new();
            let mut p = Binder::frozen(params);
            let fwd = self.forward_chunk(&mut tape, &mut p, chunk, n)?;
            let d = self.dim();
            let values = tape.value(fwd.tokens.var).clone();
            let rows = fwd.tokens.queries.len();
            out.push(ChunkResult {
                tokens: TrajectoryTokenSet {
                    tokens: values.reshape(&[rows, n, d])?,
                    n,
                    chunk: index,
                    queries: fwd.tokens.queries,
                    empty: fwd.tokens.empty,
                },
                masks: SegmentationPair {
                    soft: tape.value(fwd.seg.soft).clone(),
                    hard: fwd.hard,
                    frames: fwd.features.frames,
                    height: fwd.features.height,
                    width: fwd.features.width,
                },
            });
        }
        Ok(out)
    }

    /// Hard masks only; skips refinement.
    pub fn segment_video(
        &self,
        params: &ParamSet,
        video: &Tensor,
        chunk_len: usize,
    ) -> Result<Vec<SegmentationPair>> {
        chunk_video(video, chunk_len)?
            .iter()
            .map(|chunk| {
                let mut tape = Tape::new();
                let mut p = Binder::frozen(params);
                let (features, seg, hard) = self.segment(&mut tape, &mut p, chunk)?;
                Ok(SegmentationPair {
                    soft: tape.value(seg.soft).clone(),
                    hard,
                    frames: features.frames,
                    height: features.height,
                    width: features.width,
                })
            })
            .collect()
    }
}
