//! Frame-wise convolutional patch encoder.
//!
//! A ConvNeXt-style hierarchy: a stride-4 patchify stem, then three stages at
//! strides 4, 8 and 16, each stage a stack of blocks (depthwise 7×7 conv,
//! layer norm, pointwise expansion with GELU, pointwise contraction,
//! residual). Stage outputs are projected to the feature width by bias-free
//! 1×1 convolutions, bilinearly resized to the stride-4 grid and summed.
//! Frames never mix, so permuting input frames permutes the output rows.

use crate::error::{Error, Result};
use crate::nn::{Linear, Norm};
use crate::params::{Binder, Init, ParamSet};
use crate::tape::{Tape, Var};

/// Stem and stage resolution relative to the input.
pub const STEM_STRIDE: usize = 4;
const DW_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    /// Fused output width `d`.
    pub dim: usize,
    /// Fuse the stem and every stage output; when off only the final stage
    /// is kept (no hierarchical features).
    pub fuse_stem: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_depths: vec![1, 1, 1],
            stage_widths: vec![16, 32, 64],
            dim: 64,
            fuse_stem: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.len() != 3 || self.stage_widths.len() != 3 {
            return Err(Error::Config("encoder needs exactly three stages".into()));
        }
        if self.dim == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Total downsampling of the deepest stage.
    pub fn max_stride(&self) -> usize {
        STEM_STRIDE << (self.stage_widths.len() - 1)
    }
}

/// Dense features `F` as a `[T·h·w × d]` tape variable, rows in
/// `(t, i, j)` raster order.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl FeatureMap {
    pub fn positions(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }
}

#[derive(Clone, Debug)]
struct Block {
    kernel: String,
    kernel_bias: String,
    norm: Norm,
    up: Linear,
    down: Linear,
}

impl Block {
    fn new(params: &mut ParamSet, init: &Init, name: &str, width: usize) -> Self {
        let kernel = format!("{name}.dw.kernel");
        let kernel_bias = format!("{name}.dw.bias");
        params.insert(
            &kernel,
            init.fan_in(
                &kernel,
                &[DW_KERNEL, DW_KERNEL, width],
                DW_KERNEL * DW_KERNEL,
            ),
        );
        params.insert(&kernel_bias, crate::Tensor::zeros(&[width]));
        Self {
            kernel,
            kernel_bias,
            norm: Norm::new(params, &format!("{name}.norm"), width),
            up: Linear::new(params, init, &format!("{name}.up"), width, 4 * width, true),
            down: Linear::new(
                params,
                init,
                &format!("{name}.down"),
                4 * width,
                width,
                true,
            ),
        }
    }

    /// `x[N×h×w×c]` → same shape.
    fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let c = shape[3];
        let k = p.get(tape, &self.kernel)?;
        let kb = p.get(tape, &self.kernel_bias)?;
        let y = tape.depthwise_conv(x, k, 1, DW_KERNEL / 2)?;
        let y = tape.add_row(y, kb)?;
        let y = self.norm.forward(tape, p, y)?;
        let y = tape.reshape(y, &[shape[0] * shape[1] * shape[2], c])?;
        let y = self.up.forward(tape, p, y)?;
        let y = tape.gelu(y);
        let y = self.down.forward(tape, p, y)?;
        let y = tape.reshape(y, &shape)?;
        tape.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    config: EncoderConfig,
    stem: Linear,
    stem_norm: Norm,
    downsamples: Vec<(Norm, Linear)>,
    stages: Vec<Vec<Block>>,
    /// `(scale index, projection)`; index 0 is the stem, `s + 1` stage `s`.
    fuse: Vec<(usize, Linear)>,
}

impl PatchEncoder {
    pub fn new(config: EncoderConfig, params: &mut ParamSet, init: &Init) -> Result<Self> {
        config.validate()?;
        let w = &config.stage_widths;
        let stem_in = STEM_STRIDE * STEM_STRIDE * 3;
        let stem = Linear::new(params, init, "encoder.stem.proj", stem_in, w[0], true);
        let stem_norm = Norm::new(params, "encoder.stem.norm", w[0]);
        let mut downsamples = Vec::new();
        for s in 1..w.len() {
            downsamples.push((
                Norm::new(params, &format!("encoder.down{s}.norm"), w[s - 1]),
                Linear::new(
                    params,
                    init,
                    &format!("encoder.down{s}.proj"),
                    4 * w[s - 1],
                    w[s],
                    true,
                ),
            ));
        }
        let stages = (0..w.len())
            .map(|s| {
                (0..config.stage_depths[s])
                    .map(|b| Block::new(params, init, &format!("encoder.stage{s}.block{b}"), w[s]))
                    .collect()
            })
            .collect();
        let fused: Vec<usize> = if config.fuse_stem {
            (0..=w.len()).collect()
        } else {
            vec![w.len()]
        };
        let fuse = fused
            .into_iter()
            .map(|i| {
                let width = if i == 0 { w[0] } else { w[i - 1] };
                let name = if i == 0 {
                    "encoder.fuse.stem".to_string()
                } else {
                    format!("encoder.fuse.stage{}", i - 1)
                };
                (
                    i,
                    Linear::new(params, init, &name, width, config.dim, false),
                )
            })
            .collect();
        Ok(Self {
            config,
            stem,
            stem_norm,
            downsamples,
            stages,
            fuse,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes `video[T×H×W×3]` into features on the `H/4 × W/4` grid.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, video: Var) -> Result<FeatureMap> {
        let [t, h, w, c] = match *tape.shape(video) {
            [t, h, w, c] => [t, h, w, c],
            ref s => return Err(Error::invalid(format!("video must be T×H×W×3, got {s:?}"))),
        };
        let stride = self.config.max_stride();
        if c != 3 || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "video extents {h}×{w}×{c} must be RGB and divisible by {stride}"
            )));
        }
        let widths = &self.config.stage_widths;
        let (fh, fw) = (h / STEM_STRIDE, w / STEM_STRIDE);

        let x = tape.patchify(video, STEM_STRIDE)?;
        let x = self.stem.forward(tape, p, x)?;
        let x = self.stem_norm.forward(tape, p, x)?;
        let mut x = tape.reshape(x, &[t, fh, fw, widths[0]])?;
        let mut scales = vec![x];
        let (mut sh, mut sw) = (fh, fw);
        for s in 0..widths.len() {
            if s > 0 {
                let (norm, proj) = &self.downsamples[s - 1];
                let y = norm.forward(tape, p, x)?;
                let y = tape.patchify(y, 2)?;
                let y = proj.forward(tape, p, y)?;
                sh /= 2;
                sw /= 2;
                x = tape.reshape(y, &[t, sh, sw, widths[s]])?;
            }
            for block in &self.stages[s] {
                x = block.forward(tape, p, x)?;
            }
            scales.push(x);
        }

        let mut fused: Option<Var> = None;
        for (i, proj) in &self.fuse {
            let s = scales[*i];
            let shape = tape.shape(s).to_vec();
            let flat = tape.reshape(s, &[shape[0] * shape[1] * shape[2], shape[3]])?;
            let y = proj.forward(tape, p, flat)?;
            let y = tape.reshape(y, &[t, shape[1], shape[2], self.config.dim])?;
            let y = if (shape[1], shape[2]) != (fh, fw) {
                tape.bilinear_resize(y, fh, fw)?
            } else {
                y
            };
            fused = Some(match fused {
                Some(acc) => tape.add(acc, y)?,
                None => y,
            });
        }
        let fused = fused.expect("at least one fused scale");
        let var = tape.reshape(fused, &[t * fh * fw, self.config.dim])?;
        Ok(FeatureMap {
            var,
            frames: t,
            height: fh,
            width: fw,
            dim: self.config.dim,
        })
    }
}
