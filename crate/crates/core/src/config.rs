//! The run configuration and its text form.
//!
//! The file is a list of `[section]` headers, each followed by
//! `key = value` lines whose keys are exactly the field names of that
//! section's config struct. `#` starts a comment. Unknown sections and keys
//! are errors; missing keys keep their defaults. Serialization writes every
//! field, and floats use Rust's shortest round-trip formatting, so parsing
//! a serialized config yields the identical value.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{FilterConfig, FlopsConfig};
use crate::model::ModelConfig;
use crate::segmenter::SegmenterConfig;
use crate::train::{Schedule, TrainConfig};
use crate::traj::TrajConfig;
use crate::video::DataConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub flops: FlopsConfig,
}

/// Scalar types that may appear as a config value.
trait Value: Sized {
    fn render(&self) -> String;
    fn parse(s: &str) -> Option<Self>;
}

impl Value for usize {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Value for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Value for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
    fn parse(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    }
}

impl Value for bool {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Value for Vec<usize> {
    fn render(&self) -> String {
        self.iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
    fn parse(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
}

impl Value for Schedule {
    fn render(&self) -> String {
        match self {
            Schedule::Cosine => "cosine".into(),
            Schedule::Linear => "linear".into(),
        }
    }
    fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Schedule::Cosine),
            "linear" => Some(Schedule::Linear),
            _ => None,
        }
    }
}

/// Field-by-field access for one section.
trait Section {
    fn entries(&self) -> Vec<(&'static str, String)>;
    /// `Ok(false)` when the key is not a field of this section.
    fn assign(&mut self, key: &str, value: &str) -> Result<bool>;
}

macro_rules! section {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Section for $ty {
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), Value::render(&self.$field))),*]
            }

            fn assign(&mut self, key: &str, value: &str) -> Result<bool> {
                match key {
                    $(stringify!($field) => {
                        self.$field = Value::parse(value).ok_or_else(|| {
                            Error::Config(format!("bad value {value:?} for {}", stringify!($field)))
                        })?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
        }
    };
}

section!(DataConfig {
    videos,
    width,
    height,
    frames,
    min_shapes,
    max_shapes,
    min_size,
    max_size,
    seed,
    holdout_fraction
});
section!(EncoderConfig {
    stage_depths,
    stage_widths,
    dim,
    fuse_stem
});
section!(SegmenterConfig {
    queries,
    perceiver_layers,
    heads,
    detach_features,
    detach_in_logits,
    rope_base,
    chunk_len
});
section!(TrajConfig {
    layers,
    heads,
    use_mask,
    fourier_init,
    normalize_aggregation,
    rope_base
});
section!(LossConfig {
    lambda_dice,
    lambda_focal,
    lambda_ce,
    focal_alpha,
    focal_gamma,
    dice_eps,
    temperature,
    use_dice,
    use_focal,
    use_ce
});
section!(TrainConfig {
    steps,
    batch_size,
    learning_rate,
    weight_decay,
    warmup_steps,
    schedule,
    seed,
    n_choices,
    joint,
    eval_interval
});
section!(FilterConfig {
    min_coverage,
    min_objects
});
section!(FlopsConfig {
    height,
    width,
    scene_tokens,
    n,
    downstream_dim,
    downstream_depth,
    tubelet,
    patch
});

impl Config {
    fn sections(&self) -> [(&'static str, &dyn Section); 8] {
        [
            ("data", &self.data),
            ("encoder", &self.model.encoder),
            ("segmenter", &self.model.segmenter),
            ("traj", &self.model.traj),
            ("loss", &self.loss),
            ("train", &self.train),
            ("filter", &self.filter),
            ("flops", &self.flops),
        ]
    }

    fn section_mut(&mut self, name: &str) -> Option<&mut dyn Section> {
        Some(match name {
            "data" => &mut self.data,
            "encoder" => &mut self.model.encoder,
            "segmenter" => &mut self.model.segmenter,
            "traj" => &mut self.model.traj,
            "loss" => &mut self.loss,
            "train" => &mut self.train,
            "filter" => &mut self.filter,
            "flops" => &mut self.flops,
            _ => return None,
        })
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, (name, section)) in self.sections().iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (key, value) in section.entries() {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if config.section_mut(name).is_none() {
                    return Err(at(format!("unknown section [{name}]")));
                }
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = current
                .as_deref()
                .ok_or_else(|| at(format!("key {key:?} before any section")))?;
            let known = config
                .section_mut(section)
                .expect("section validated")
                .assign(key, value)
                .map_err(|e| at(e.to_string()))?;
            if !known {
                return Err(at(format!("unknown key {key:?} in [{section}]")));
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.segmenter.validate(self.model.encoder.dim)?;
        self.model.traj.validate(self.model.encoder.dim)?;
        self.loss.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = Config::parse("[train]\nstepz = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("stepz"), "{err}");
        assert!(Config::parse("[nope]\n").is_err());
        assert!(Config::parse("steps = 3\n").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c =
            Config::parse("# comment\n[train]\nsteps = 3 # trailing\n[traj]\nuse_mask = false\n")
                .unwrap();
        assert_eq!(c.train.steps, 3);
        assert!(!c.model.traj.use_mask);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }
}
