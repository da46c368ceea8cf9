//! Experiment configuration files (TOML).
//!
//! ```toml
//! out_dir = "runs/flagship"
//!
//! [backbone]
//! topology = "MAMBO3"
//! mixer = "HYDRA"
//! N = 3
//!
//! [train]
//! peak_lr = 1e-5
//!
//! [data]
//! t_fixed = 208
//!
//! [data.synth]
//! dims = 64
//!
//! [data.train]
//! n_bonafide = 200
//! n_spoof = 200
//!
//! [data.dev]
//! manifest = "dev/manifest.txt"
//! protocol = "dev/protocol.txt"
//! ```
//!
//! Every section except `[backbone]` may be omitted, and every field has
//! a default except `backbone.topology`.  Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{load_dataset, synth_generate, Dataset, SynthSpec, DEFAULT_T_FIXED};
use crate::training::TrainConfig;
use crate::{Error, Result};

/// World parameters shared by every synthetic split of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthWorld {
    pub frames: usize,
    pub dims: usize,
    pub local_magnitude: f32,
    pub local_frames: usize,
    pub local_dims: usize,
    pub global_magnitude: f32,
    pub global_dims: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthWorld {
    fn default() -> Self {
        let s = SynthSpec::new(1, 1, 0);
        Self {
            frames: s.frames,
            dims: s.dims,
            local_magnitude: s.local_magnitude,
            local_frames: s.local_frames,
            local_dims: s.local_dims,
            global_magnitude: s.global_magnitude,
            global_dims: s.global_dims,
            noise: s.noise,
            seed: s.seed,
        }
    }
}

impl SynthWorld {
    pub fn spec(&self, n_bonafide: usize, n_spoof: usize, offset: u64) -> SynthSpec {
        SynthSpec {
            n_bonafide,
            n_spoof,
            frames: self.frames,
            dims: self.dims,
            local_magnitude: self.local_magnitude,
            local_frames: self.local_frames,
            local_dims: self.local_dims,
            global_magnitude: self.global_magnitude,
            global_dims: self.global_dims,
            noise: self.noise,
            seed: self.seed,
            offset,
        }
    }
}

/// One split, either synthesised (`n_bonafide`, `n_spoof`) or read from a
/// manifest and protocol.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_bonafide: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_spoof: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<PathBuf>,
}

/// Resolved form of a [`SplitConfig`].
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSource {
    Synth { n_bonafide: usize, n_spoof: usize },
    Files { manifest: PathBuf, protocol: PathBuf },
}

impl SplitConfig {
    pub fn synth(n_bonafide: usize, n_spoof: usize) -> Self {
        Self {
            n_bonafide: Some(n_bonafide),
            n_spoof: Some(n_spoof),
            ..Self::default()
        }
    }

    pub fn files(manifest: impl Into<PathBuf>, protocol: impl Into<PathBuf>) -> Self {
        Self {
            manifest: Some(manifest.into()),
            protocol: Some(protocol.into()),
            ..Self::default()
        }
    }

    pub fn source(&self, name: &str) -> Result<SplitSource> {
        match (&self.n_bonafide, &self.n_spoof, &self.manifest, &self.protocol) {
            (Some(b), Some(s), None, None) => Ok(SplitSource::Synth {
                n_bonafide: *b,
                n_spoof: *s,
            }),
            (None, None, Some(m), Some(p)) => Ok(SplitSource::Files {
                manifest: m.clone(),
                protocol: p.clone(),
            }),
            _ => Err(Error::Config(format!(
                "[data.{name}] needs either n_bonafide and n_spoof, or manifest and protocol"
            ))),
        }
    }
}

fn default_t_fixed() -> usize {
    DEFAULT_T_FIXED
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_t_fixed")]
    pub t_fixed: usize,
    #[serde(default)]
    pub synth: SynthWorld,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<SplitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<SplitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<SplitConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            t_fixed: default_t_fixed(),
            synth: SynthWorld::default(),
            train: None,
            dev: None,
            eval: None,
        }
    }
}

/// The splits in stream order; synthetic splits take consecutive ranges of
/// utterance streams so they never overlap.
pub const SPLITS: [&str; 3] = ["train", "dev", "eval"];

impl DataConfig {
    fn split(&self, name: &str) -> Option<&SplitConfig> {
        match name {
            "train" => self.train.as_ref(),
            "dev" => self.dev.as_ref(),
            "eval" => self.eval.as_ref(),
            _ => None,
        }
    }

    fn offset_of(&self, name: &str) -> Result<u64> {
        let mut offset = 0u64;
        for s in SPLITS {
            if s == name {
                break;
            }
            if let Some(SplitSource::Synth { n_bonafide, n_spoof }) =
                self.split(s).map(|c| c.source(s)).transpose()?
            {
                offset += (n_bonafide + n_spoof) as u64;
            }
        }
        Ok(offset)
    }

    /// Loads or synthesises split `name`.  Relative manifest and protocol
    /// paths resolve against `base`.
    pub fn load(&self, name: &str, base: &Path) -> Result<Dataset> {
        let split = self
            .split(name)
            .ok_or_else(|| Error::Config(format!("no [data.{name}] section")))?;
        match split.source(name)? {
            SplitSource::Synth { n_bonafide, n_spoof } => {
                let spec = self.synth.spec(n_bonafide, n_spoof, self.offset_of(name)?);
                Ok(synth_generate(&spec)?.utterances)
            }
            SplitSource::Files { manifest, protocol } => {
                load_dataset(&base.join(manifest), &base.join(protocol))
            }
        }
    }

    pub fn synth_spec(&self, name: &str) -> Result<Option<SynthSpec>> {
        let Some(split) = self.split(name) else {
            return Ok(None);
        };
        Ok(match split.source(name)? {
            SplitSource::Synth { n_bonafide, n_spoof } => {
                Some(self.synth.spec(n_bonafide, n_spoof, self.offset_of(name)?))
            }
            SplitSource::Files { .. } => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        Self {
            out_dir: None,
            backbone,
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// TOML with every default written out.
    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Format {
            path: path.into(),
            detail: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.data.t_fixed == 0 {
            return Err(Error::Config("data.t_fixed must be at least 1".into()));
        }
        for name in SPLITS {
            if let Some(spec) = self.data.synth_spec(name)? {
                spec.validate()?;
                if spec.dims != self.backbone.input_dim {
                    return Err(Error::Config(format!(
                        "data.synth.dims = {} but backbone.input_dim = {}",
                        spec.dims, self.backbone.input_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies a command-line seed to training and to the synthetic world.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.synth.seed = seed;
        self
    }
}
