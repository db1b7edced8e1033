//! Trajectory encoder: soft aggregation of features into one proposal per
//! active query, then masked cross-attention refinement into `n` sub-tokens
//! per trajectory.
//!
//! Sub-query `j` of `n` starts from the proposal plus a Fourier embedding at
//! angular offset `θ_j = 2πj/n` plus a learnable residual. Offset 0 and the
//! residual of slot 0 are shared by every `n`, and refinement treats each
//! sub-query row independently, so the first sub-token is the same whatever
//! `n` is. Each sub-query may only attend to feature positions inside its
//! trajectory's hard mask.

use std::f64::consts::TAU;
use std::rc::Rc;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::PerceiverLayer;
use crate::params::{Binder, Init, ParamSet};
use crate::rng::Rng;
use crate::segmenter::{rope_embed, HardMasks};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SUBQUERY_RESIDUAL: &str = "traj.subquery.residual";
pub const SUPPORTED_N: [usize; 3] = [1, 2, 4];
const MAX_N: usize = 4;
const AGGREGATION_EPS: f64 = 1e-6;
const FREQ_BASE: f64 = 10_000.0;
const RANDOM_INIT_SEED: u64 = 0x5EED_0F_5AB;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajConfig {
    /// Refinement Perceiver depth.
    pub layers: usize,
    pub heads: usize,
    /// Restrict refinement attention to each trajectory's hard region.
    pub use_mask: bool,
    /// Fourier sub-query offsets; when off, fixed seeded noise instead.
    pub fourier_init: bool,
    /// Divide the soft aggregation by the soft mask mass.
    pub normalize_aggregation: bool,
    pub rope_base: f64,
}

impl Default for TrajConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            use_mask: true,
            fourier_init: true,
            normalize_aggregation: true,
            rope_base: 10_000.0,
        }
    }
}

impl TrajConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("refinement needs at least one layer".into()));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature width {dim} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

pub fn check_n(n: usize) -> Result<()> {
    if SUPPORTED_N.contains(&n) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "unsupported sub-token count {n}; expected 1, 2 or 4"
        )))
    }
}

/// `θ_j = 2πj/n`.
pub fn angular_offsets(n: usize) -> Vec<f64> {
    (0..n).map(|j| TAU * j as f64 / n as f64).collect()
}

/// `[sin(ω_m + θ), cos(ω_m + θ)]` interleaved over the ladder
/// `ω_m = 10000^(-2m/d)`.
pub fn fourier_embedding(theta: f64, dim: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    for m in 0..dim / 2 {
        let omega = FREQ_BASE.powf(-2.0 * m as f64 / dim as f64);
        let (s, c) = (omega + theta).sin_cos();
        e[2 * m] = s;
        e[2 * m + 1] = c;
    }
    e
}

/// `z_init = Σ_{t,i,j} soft[k,t,i,j] · F[t,i,j]`, optionally divided by
/// `Σ soft[k] + 1e-6`. `features` must be live: this is the path by which
/// downstream losses reach the segmenter and the encoder.
pub fn aggregate_soft(
    tape: &mut Tape,
    soft: Var,
    features: &FeatureMap,
    normalize: bool,
) -> Result<Var> {
    let z = tape.matmul(soft, features.var)?;
    if !normalize {
        return Ok(z);
    }
    let mass = tape.sum_last(soft);
    let mass = tape.add_scalar(mass, AGGREGATION_EPS);
    let inv = tape.powf(mass, -1.0);
    tape.mul_col(z, inv)
}

/// Output of refinement for one chunk.
#[derive(Clone, Debug)]
pub struct RefinedTokens {
    /// `[N_active·n × d]`, trajectory-major.
    pub var: Var,
    pub n: usize,
    /// Query index of each trajectory row.
    pub queries: Vec<usize>,
    /// Trajectories whose hard region was empty at refinement; their tokens
    /// are zero.
    pub empty: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TrajEncoder {
    config: TrajConfig,
    dim: usize,
    layers: Vec<PerceiverLayer>,
}

impl TrajEncoder {
    pub fn new(config: TrajConfig, dim: usize, params: &mut ParamSet, init: &Init) -> Result<Self> {
        config.validate(dim)?;
        params.insert(
            SUBQUERY_RESIDUAL,
            init.normal(SUBQUERY_RESIDUAL, &[MAX_N, dim], 0.02),
        );
        let layers = (0..config.layers)
            .map(|l| {
                PerceiverLayer::new(
                    params,
                    init,
                    &format!("traj.layer{l}"),
                    dim,
                    config.heads,
                    false,
                )
            })
            .collect();
        Ok(Self {
            config,
            dim,
            layers,
        })
    }

    pub fn config(&self) -> &TrajConfig {
        &self.config
    }

    /// Fixed part of each sub-query: Fourier embeddings, or seeded noise when
    /// `fourier_init` is off. `[n × d]`.
    pub fn subquery_offsets(&self, n: usize) -> Result<Tensor> {
        check_n(n)?;
        let d = self.dim;
        let mut data = Vec::with_capacity(n * d);
        for (j, theta) in angular_offsets(n).into_iter().enumerate() {
            if self.config.fourier_init {
                data.extend(fourier_embedding(theta, d));
            } else {
                let mut rng = Rng::keyed(RANDOM_INIT_SEED, j as u64);
                data.extend((0..d).map(|_| rng.normal()));
            }
        }
        Tensor::new(&[n, d], data)
    }

    /// Sub-queries `z_k + offset_j + residual_j` for every proposal row,
    /// `[rows·n × d]` with row `k·n + j`.
    pub fn build_subqueries(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        z_init: Var,
        n: usize,
    ) -> Result<Var> {
        let offsets = self.subquery_offsets(n)?;
        let rows = tape.shape(z_init)[0];
        let d = self.dim;
        let repeat: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, n)).collect();
        let slot: Vec<usize> = (0..rows).flat_map(|_| 0..n).collect();
        let z = tape.gather_rows(z_init, &repeat)?;
        let tiled: Vec<f64> = (0..rows)
            .flat_map(|_| offsets.data().iter().copied())
            .collect();
        let tiled = tape.constant(Tensor::new(&[rows * n, d], tiled)?);
        let residual = p.get(tape, SUBQUERY_RESIDUAL)?;
        let residual = tape.gather_rows(residual, &slot)?;
        let q = tape.add(z, tiled)?;
        tape.add(q, residual)
    }

    /// Refines proposals `z_init[N_active × d]` (row `r` belonging to query
    /// `queries[r]`) against `features` under the hard masks.
    pub fn refine(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        z_init: Var,
        features: &FeatureMap,
        hard: &HardMasks,
        queries: &[usize],
        n: usize,
    ) -> Result<RefinedTokens> {
        check_n(n)?;
        let rows = tape.shape(z_init)[0];
        if rows != queries.len() {
            return Err(Error::invalid(format!(
                "{rows} proposals for {} trajectories",
                queries.len()
            )));
        }
        if hard.positions() != features.positions() {
            return Err(Error::invalid(format!(
                "hard masks cover {} positions, features {}",
                hard.positions(),
                features.positions()
            )));
        }
        let empty: Vec<bool> = queries.iter().map(|&k| hard.region_size(k) == 0).collect();
        let mut x = self.build_subqueries(tape, p, z_init, n)?;
        let kv = rope_embed(tape, features, self.config.rope_base)?.var;
        let positions = features.positions();
        let mask: Option<Rc<[bool]>> = self.config.use_mask.then(|| {
            let mut m = vec![false; rows * n * positions];
            for (r, &k) in queries.iter().enumerate() {
                for j in 0..n {
                    let row = &mut m[(r * n + j) * positions..(r * n + j + 1) * positions];
                    for (pos, allowed) in row.iter_mut().enumerate() {
                        *allowed = hard.contains(k, pos);
                    }
                }
            }
            m.into()
        });
        for layer in &self.layers {
            x = layer.forward(tape, p, x, kv, mask.clone())?;
        }
        if empty.iter().any(|&e| e) {
            let keep: Vec<f64> = empty
                .iter()
                .flat_map(|&e| std::iter::repeat_n(if e { 0.0 } else { 1.0 }, n))
                .collect();
            let keep = tape.constant(Tensor::new(&[rows * n], keep)?);
            x = tape.mul_col(x, keep)?;
        }
        Ok(RefinedTokens {
            var: x,
            n,
            queries: queries.to_vec(),
            empty,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_evenly_spaced_from_zero() {
        assert_eq!(angular_offsets(1), vec![0.0]);
        let two = angular_offsets(2);
        assert_eq!(two[0], 0.0);
        assert!((two[1] - std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(angular_offsets(4).len(), 4);
    }

    #[test]
    fn opposite_offsets_negate_every_coordinate() {
        let a = fourier_embedding(0.0, 16);
        let b = fourier_embedding(std::f64::consts::PI, 16);
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() < 1e-9);
        }
    }

    #[test]
    fn unsupported_n_rejected() {
        assert!(check_n(3).is_err());
        assert!(check_n(0).is_err());
        assert!(check_n(4).is_ok());
    }
}
