//! Synthetic stand-in for front-end features.
//!
//! Bonafide utterances are first-order autoregressive noise over frames with
//! per-dimension scales.  Spoofed ones add a short burst over a few
//! consecutive frames in a sparse subset of the upper half of the feature
//! dims, a rank-1 offset over another sparse subset spread across all
//! frames, or both.  Both dim subsets and their sign patterns belong to the
//! world, so they survive per-frame normalisation as fixed directions.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{format_manifest, format_protocol, write_features, Dataset, Key, ProtocolEntry, Utterance};

const AR_COEFF: f32 = 0.9;

fn default_frames() -> usize {
    super::DEFAULT_T_FIXED
}
fn default_dims() -> usize {
    1024
}
fn default_local_magnitude() -> f32 {
    5.0
}
fn default_local_frames() -> usize {
    16
}
fn default_artifact_dims() -> usize {
    8
}
fn default_global_magnitude() -> f32 {
    1.0
}
fn default_noise() -> f32 {
    0.1
}

/// Parameters of one synthetic split.  Everything shared by the splits of a
/// synthetic corpus (per-dim scales, the global pattern) derives from `seed`
/// alone; `offset` picks the range of utterance streams, so splits with the
/// same seed and disjoint ranges come from one distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_bonafide: usize,
    pub n_spoof: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_dims")]
    pub dims: usize,
    /// Burst amplitude in units of each dimension's scale.
    #[serde(default = "default_local_magnitude")]
    pub local_magnitude: f32,
    #[serde(default = "default_local_frames")]
    pub local_frames: usize,
    #[serde(default = "default_artifact_dims")]
    pub local_dims: usize,
    /// Offset amplitude in units of each dimension's scale.
    #[serde(default = "default_global_magnitude")]
    pub global_magnitude: f32,
    #[serde(default = "default_artifact_dims")]
    pub global_dims: usize,
    /// Standard deviation of white noise added on top of the base process.
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
    /// Index of the first utterance stream.
    #[serde(default)]
    pub offset: u64,
}

impl SynthSpec {
    pub fn new(n_bonafide: usize, n_spoof: usize, seed: u64) -> Self {
        Self {
            n_bonafide,
            n_spoof,
            frames: default_frames(),
            dims: default_dims(),
            local_magnitude: default_local_magnitude(),
            local_frames: default_local_frames(),
            local_dims: default_artifact_dims(),
            global_magnitude: default_global_magnitude(),
            global_dims: default_artifact_dims(),
            noise: default_noise(),
            seed,
            offset: 0,
        }
    }

    /// Total utterance count.
    pub fn len(&self) -> usize {
        self.n_bonafide + self.n_spoof
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_bonafide == 0 || self.n_spoof == 0 {
            return fail("n_bonafide and n_spoof must both be at least 1".into());
        }
        if self.frames == 0 || self.dims == 0 {
            return fail("frames and dims must be positive".into());
        }
        for (name, v) in [
            ("local_magnitude", self.local_magnitude),
            ("global_magnitude", self.global_magnitude),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        let band = self.dims - self.dims / 2;
        if self.local_dims > band {
            return fail(format!("local_dims {} exceeds the upper band of {band} dims", self.local_dims));
        }
        if self.local_frames > self.frames {
            return fail(format!("local_frames {} exceeds frames {}", self.local_frames, self.frames));
        }
        if self.global_dims > self.dims {
            return fail(format!("global_dims {} exceeds dims {}", self.global_dims, self.dims));
        }
        Ok(())
    }
}

/// Which artifacts a spoofed utterance carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Artifact {
    Local,
    Global,
    Joint,
}

impl Artifact {
    pub fn as_str(self) -> &'static str {
        match self {
            Artifact::Local => "local",
            Artifact::Global => "global",
            Artifact::Joint => "joint",
        }
    }
}

struct World {
    scales: Vec<f32>,
    local_dims: Vec<usize>,
    local_signs: Vec<f32>,
    global_dims: Vec<usize>,
    global_signs: Vec<f32>,
}

impl World {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (lo, hi) = (0.5f32.ln(), 2.0f32.ln());
        let scales = (0..spec.dims).map(|_| rng.gen_range(lo..hi).exp()).collect();
        let band_start = spec.dims / 2;
        let local_dims: Vec<usize> = sample(&mut rng, spec.dims - band_start, spec.local_dims)
            .into_iter()
            .map(|d| band_start + d)
            .collect();
        let local_signs = local_dims.iter().map(|_| sign(&mut rng)).collect();
        let global_dims = sample(&mut rng, spec.dims, spec.global_dims).into_vec();
        let global_signs = global_dims.iter().map(|_| sign(&mut rng)).collect();
        Self {
            scales,
            local_dims,
            local_signs,
            global_dims,
            global_signs,
        }
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f32 {
    if rng.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

fn utterance(spec: &SynthSpec, world: &World, index: u64, key: Key) -> (Array2<f32>, Option<Artifact>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index + 1);
    let (t_len, f) = (spec.frames, spec.dims);
    let innovation = (1.0 - AR_COEFF * AR_COEFF).sqrt();
    let mut x = Array2::<f32>::zeros((t_len, f));
    let mut state: Vec<f32> = (0..f).map(|_| normal(&mut rng)).collect();
    for t in 0..t_len {
        for d in 0..f {
            if t > 0 {
                state[d] = AR_COEFF * state[d] + innovation * normal(&mut rng);
            }
            x[[t, d]] = state[d] * world.scales[d] + spec.noise * normal(&mut rng);
        }
    }
    if key == Key::Bonafide {
        return (x, None);
    }
    let artifact = match rng.gen_range(0..3) {
        0 => Artifact::Local,
        1 => Artifact::Global,
        _ => Artifact::Joint,
    };
    if matches!(artifact, Artifact::Local | Artifact::Joint) {
        let amp = spec.local_magnitude * rng.gen_range(0.75f32..1.25);
        let start = rng.gen_range(0..=t_len - spec.local_frames);
        for (&d, &sg) in world.local_dims.iter().zip(&world.local_signs) {
            let off = amp * sg * world.scales[d];
            for t in start..start + spec.local_frames {
                x[[t, d]] += off;
            }
        }
    }
    if matches!(artifact, Artifact::Global | Artifact::Joint) {
        let amp = spec.global_magnitude * rng.gen_range(0.75f32..1.25);
        for (&d, &sg) in world.global_dims.iter().zip(&world.global_signs) {
            let off = amp * sg * world.scales[d];
            x.column_mut(d).mapv_inplace(|v| v + off);
        }
    }
    (x, Some(artifact))
}

/// A generated split with the artifact tag of every utterance.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub utterances: Dataset,
    pub artifacts: Vec<Option<Artifact>>,
}

impl SynthDataset {
    pub fn protocol(&self) -> Vec<ProtocolEntry> {
        self.utterances
            .iter()
            .map(|u| ProtocolEntry {
                id: u.id.clone(),
                key: u.key,
            })
            .collect()
    }

    pub fn protocol_text(&self) -> String {
        let tags: Vec<&str> = self
            .artifacts
            .iter()
            .map(|a| a.map_or("-", Artifact::as_str))
            .collect();
        format_protocol(&self.protocol(), &tags)
    }
}

/// Generates one split.  Bonafide utterances come first; ids encode the
/// global stream index so splits never collide.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let world = World::new(spec);
    let mut utterances = Vec::with_capacity(spec.len());
    let mut artifacts = Vec::with_capacity(spec.len());
    for j in 0..spec.len() {
        let index = spec.offset + j as u64;
        let key = if j < spec.n_bonafide {
            Key::Bonafide
        } else {
            Key::Spoof
        };
        let (features, artifact) = utterance(spec, &world, index, key);
        utterances.push(Utterance {
            id: format!("SYN_{index:06}"),
            key,
            features,
        });
        artifacts.push(artifact);
    }
    Ok(SynthDataset {
        utterances,
        artifacts,
    })
}

/// Writes `features/<id>.mbft`, `manifest.txt` and `protocol.txt` under
/// `dir`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut manifest = Vec::with_capacity(data.utterances.len());
    for u in &data.utterances {
        let rel = PathBuf::from("features").join(format!("{}.mbft", u.id));
        write_features(&dir.join(&rel), &u.features)?;
        manifest.push((u.id.clone(), rel));
    }
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("manifest.txt", format_manifest(&manifest))?;
    write("protocol.txt", data.protocol_text())
}
