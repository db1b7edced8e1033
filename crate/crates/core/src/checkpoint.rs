//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.cfg        run configuration
//! <dir>/index.txt         `version 1`, `step <k>`, then one `param <name>` per tensor
//! <dir>/params/<name>.ttkt
//! <dir>/adam_m/<name>.ttkt
//! <dir>/adam_v/<name>.ttkt
//! ```
//!
//! All tensors are stored in double precision so a round trip is bit-exact.
//! Loading rebuilds the model from the stored config and insists the index
//! names exactly its parameters with matching shapes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::tensor_file::TensorFile;
use crate::train::TrainState;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.txt";
pub const CONFIG_FILE: &str = "config.cfg";
const GROUPS: [&str; 3] = ["params", "adam_m", "adam_v"];

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub state: TrainState,
}

fn tensor_path(dir: &Path, group: &str, name: &str) -> PathBuf {
    dir.join(group).join(format!("{name}.ttkt"))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        for group in GROUPS {
            let sub = dir.join(group);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        self.config.save(&dir.join(CONFIG_FILE))?;
        let mut index = format!("version {CHECKPOINT_VERSION}\nstep {}\n", self.state.step);
        let sets = [&self.state.params, &self.state.m, &self.state.v];
        for (name, _) in self.state.params.iter() {
            let _ = writeln!(index, "param {name}");
            for (group, set) in GROUPS.iter().zip(sets) {
                let t = set
                    .get(name)
                    .ok_or_else(|| Error::invalid(format!("optimizer state lacks {name}")))?;
                TensorFile::f64(t).write(&tensor_path(dir, group, name))?;
            }
        }
        let path = dir.join(INDEX_FILE);
        std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = Config::load(&dir.join(CONFIG_FILE))?;
        let index_path = dir.join(INDEX_FILE);
        let index = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let bad = |msg: String| Error::format(&index_path, msg);

        let (_, expected) = Model::new(config.model.clone(), config.train.seed)?;
        let mut version = None;
        let mut step = None;
        let mut names = Vec::new();
        for line in index.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed entry {line:?}")))?;
            match key {
                "version" => {
                    version = Some(
                        value
                            .parse::<u32>()
                            .map_err(|_| bad(format!("bad version {value:?}")))?,
                    )
                }
                "step" => {
                    step = Some(
                        value
                            .parse::<usize>()
                            .map_err(|_| bad(format!("bad step {value:?}")))?,
                    )
                }
                "param" => names.push(value.to_string()),
                _ => return Err(bad(format!("unknown entry {key:?}"))),
            }
        }
        match version {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(bad(format!("version {v}, expected {CHECKPOINT_VERSION}"))),
            None => return Err(bad("missing version".into())),
        }
        let step = step.ok_or_else(|| bad("missing step".into()))?;

        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
        for name in &names {
            let want = expected
                .get(name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            for (group, set) in GROUPS.iter().zip(sets.iter_mut()) {
                let path = tensor_path(dir, group, name);
                if !path.exists() {
                    return Err(Error::format(
                        &path,
                        format!("missing file for parameter {name}"),
                    ));
                }
                let t = TensorFile::read(&path)?.to_tensor()?;
                if t.shape() != want.shape() {
                    return Err(Error::format(
                        &path,
                        format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            want.shape()
                        ),
                    ));
                }
                set.insert(name.clone(), t);
            }
        }
        if let Some(name) = expected.names().find(|n| !sets[0].contains(n)) {
            return Err(bad(format!("parameter {name} not listed")));
        }
        let [params, m, v] = sets;
        Ok(Self {
            config,
            state: TrainState { step, params, m, v },
        })
    }
}
