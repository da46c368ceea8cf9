//! MamBo backbones: embedding, a stack of pre-norm residual layers in one of
//! four topologies, gated attention pooling and a two-logit head.

mod checkpoint;
mod layers;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::mixers::{MixerConfig, MixerKind};
use crate::params::{Bound, Init, ParamId, ParamRole, ParamSet};
use crate::{Error, Real, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use layers::{gated_attention_pool, Head, Layer, Pool, SubBlock, SwiGlu};

/// Class index of bonafide logits and labels.
pub const BONAFIDE: usize = 0;
/// Class index of spoof logits and labels.
pub const SPOOF: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topology {
    /// Every layer is a Mamba layer.
    #[serde(rename = "MAMBO1")]
    Mambo1,
    /// Every layer is a Mamer layer.
    #[serde(rename = "MAMBO2")]
    Mambo2,
    /// Mamba and Transformer layers alternate.
    #[serde(rename = "MAMBO3")]
    Mambo3,
    /// Mamba and Mamer layers alternate.
    #[serde(rename = "MAMBO4")]
    Mambo4,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Topology::Mambo1,
        Topology::Mambo2,
        Topology::Mambo3,
        Topology::Mambo4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Mambo1 => "MAMBO1",
            Topology::Mambo2 => "MAMBO2",
            Topology::Mambo3 => "MAMBO3",
            Topology::Mambo4 => "MAMBO4",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Topology::Mambo1 => 1,
            Topology::Mambo2 => 2,
            Topology::Mambo3 => 3,
            Topology::Mambo4 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    /// Layer kinds for `layers` layers.  Alternating topologies start with
    /// a Mamba layer.
    pub fn layer_spec(self, layers: usize) -> Vec<LayerKind> {
        let alternate = |other| {
            (0..layers)
                .map(|i| if i % 2 == 0 { LayerKind::Mamba } else { other })
                .collect()
        };
        match self {
            Topology::Mambo1 => vec![LayerKind::Mamba; layers],
            Topology::Mambo2 => vec![LayerKind::Mamer; layers],
            Topology::Mambo3 => alternate(LayerKind::Transformer),
            Topology::Mambo4 => alternate(LayerKind::Mamer),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown topology {s:?}")))
    }
}

/// The two residual sub-blocks of a layer are:
///
/// | kind        | first     | second  |
/// |-------------|-----------|---------|
/// | Mamba       | SSM stack | SwiGLU  |
/// | Mamer       | SSM stack | MHA     |
/// | Transformer | MHA       | SwiGLU  |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Mamba,
    Mamer,
    Transformer,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Mamba => "Mamba",
            LayerKind::Mamer => "Mamer",
            LayerKind::Transformer => "Transformer",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_layers() -> usize {
    5
}
fn default_n() -> usize {
    1
}
fn default_d() -> usize {
    128
}
fn default_input_dim() -> usize {
    1024
}
fn default_attn_heads() -> usize {
    4
}
fn default_ffn_mult() -> usize {
    4
}
fn default_norm_eps() -> f64 {
    1e-6
}

/// Accepts either a bare kind (`mixer = "HYDRA"`) or a full table.
fn mixer_from_str_or_table<'de, D: Deserializer<'de>>(de: D) -> Result<MixerConfig, D::Error> {
    struct MixerVisitor;

    impl<'de> Visitor<'de> for MixerVisitor {
        type Value = MixerConfig;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a mixer kind or a mixer table")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<MixerConfig, E> {
            v.parse::<MixerKind>().map(MixerConfig::new).map_err(E::custom)
        }

        fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<MixerConfig, A::Error> {
            MixerConfig::deserialize(de::value::MapAccessDeserializer::new(map))
        }
    }

    de.deserialize_any(MixerVisitor)
}

fn default_mixer() -> MixerConfig {
    MixerConfig::new(MixerKind::Mamba)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub topology: Topology,
    #[serde(rename = "L", default = "default_layers")]
    pub layers: usize,
    /// SSM blocks per residual unit.
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
    #[serde(rename = "D", default = "default_d")]
    pub d_model: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_mixer", deserialize_with = "mixer_from_str_or_table")]
    pub mixer: MixerConfig,
    #[serde(default = "default_attn_heads")]
    pub n_attn_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Residual-branch dropout probability, used only while training.
    #[serde(default)]
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn new(topology: Topology, kind: MixerKind) -> Self {
        Self {
            topology,
            layers: default_layers(),
            n: default_n(),
            d_model: default_d(),
            input_dim: default_input_dim(),
            mixer: MixerConfig::new(kind),
            n_attn_heads: default_attn_heads(),
            ffn_mult: default_ffn_mult(),
            norm_eps: default_norm_eps(),
            dropout: 0.0,
        }
    }

    pub fn layer_spec(&self) -> Vec<LayerKind> {
        self.topology.layer_spec(self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("L must be at least 1".into());
        }
        if self.n == 0 {
            return fail("N must be at least 1".into());
        }
        if self.input_dim == 0 || self.ffn_mult == 0 {
            return fail("input_dim and ffn_mult must be positive".into());
        }
        if self.n_attn_heads == 0 || self.d_model % self.n_attn_heads != 0 {
            return fail(format!(
                "D = {} is not divisible by n_attn_heads = {}",
                self.d_model, self.n_attn_heads
            ));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        self.mixer.validate(self.d_model)
    }
}

/// Per-call state of a forward pass.  Supplying an RNG switches on
/// training-time dropout.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    /// Inverted-dropout mask, or `None` when dropout is inactive.
    fn mask<R: Real>(&mut self, p: f64, shape: (usize, usize)) -> Option<Array2<R>> {
        let rng = self.rng.as_deref_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = R::of(1.0 / (1.0 - p));
        Some(Array2::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < p {
                R::zero()
            } else {
                keep
            }
        }))
    }
}

/// Tape handles of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    /// Embedded input, `T × D`.
    pub embedded: Var,
    /// Output of the last layer, `T × D`.
    pub hidden: Var,
    /// Pooling weights, `1 × T`.
    pub weights: Var,
    /// Pooled embedding, `1 × D`.
    pub pooled: Var,
    /// `[bonafide, spoof]`, `1 × 2`.
    pub logits: Var,
}

/// Tape-free evaluation of one utterance.
#[derive(Clone, Debug)]
pub struct Evaluation<R: Real> {
    pub hidden: Array2<R>,
    pub weights: Vec<R>,
    pub pooled: Vec<R>,
    pub logits: [R; 2],
}

impl<R: Real> Evaluation<R> {
    /// Detection score: bonafide minus spoof logit.
    pub fn score(&self) -> R {
        self.logits[BONAFIDE] - self.logits[SPOOF]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed_norm: ParamId,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<Layer>,
    pub pool: Pool,
    pub head: Head,
}

impl Backbone {
    /// Declares every parameter of `cfg` into a fresh set.  Initial values
    /// depend only on `seed` and the parameter names.
    pub fn new<R: Real>(cfg: &BackboneConfig, seed: u64) -> Result<(Self, ParamSet<R>)> {
        let mut params = ParamSet::new();
        let model = Self::declare(&mut params, cfg, seed)?;
        Ok((model, params))
    }

    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        cfg: &BackboneConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let (f, d) = (cfg.input_dim, cfg.d_model);
        let embed_norm = params.declare(seed, "embed.norm.gain", (1, f), ParamRole::Gain, Init::Ones);
        let embed_w = params.declare(
            seed,
            "embed.proj.weight",
            (d, f),
            ParamRole::Weight,
            Init::Uniform(1.0 / (f as f64).sqrt()),
        );
        let embed_b = params.declare(seed, "embed.proj.bias", (1, d), ParamRole::Bias, Init::Zeros);
        let layers = cfg
            .layer_spec()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| Layer::declare(params, seed, &format!("layers.{i}"), kind, cfg))
            .collect::<Result<Vec<_>>>()?;
        let pool = Pool::declare(params, seed, "pool", d);
        let head = Head::declare(params, seed, "head", d);
        Ok(Self {
            config: cfg.clone(),
            embed_norm,
            embed_w,
            embed_b,
            layers,
            pool,
            head,
        })
    }

    pub fn layer_spec(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    /// RMSNorm over the feature axis followed by a linear map to `D`.
    pub fn embed<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let (_, f) = tape.shape(x);
        if f != self.config.input_dim {
            return Err(Error::shape(
                "embed_features",
                format!("expected {} feature dims, found {f}", self.config.input_dim),
            ));
        }
        let normed = tape.rmsnorm(x, p[self.embed_norm], R::of(self.config.norm_eps))?;
        let proj = tape.matmul_nt(normed, p[self.embed_w])?;
        tape.add_row(proj, p[self.embed_b])
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardTrace> {
        crate::mixers::scan::ensure_finite("input features", tape.value(x))?;
        let embedded = self.embed(tape, p, x)?;
        let mut hidden = embedded;
        for layer in &self.layers {
            hidden = layer.forward(tape, p, hidden, &self.config, ctx)?;
        }
        let (weights, pooled) = self.pool.forward(tape, p, hidden)?;
        let logits = self.head.forward(tape, p, pooled)?;
        crate::mixers::scan::ensure_finite("logits", tape.value(logits))?;
        Ok(ForwardTrace {
            embedded,
            hidden,
            weights,
            pooled,
            logits,
        })
    }

    /// Evaluates one `T × F` feature matrix without dropout.
    pub fn evaluate<R: Real>(&self, params: &ParamSet<R>, x: &Array2<R>) -> Result<Evaluation<R>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let tr = self.forward(&mut tape, &p, xv, &mut ForwardCtx::eval())?;
        let l = tape.value(tr.logits);
        Ok(Evaluation {
            hidden: tape.value(tr.hidden).clone(),
            weights: tape.value(tr.weights).iter().copied().collect(),
            pooled: tape.value(tr.pooled).iter().copied().collect(),
            logits: [l[[0, BONAFIDE]], l[[0, SPOOF]]],
        })
    }

    pub fn score<R: Real>(&self, params: &ParamSet<R>, x: &Array2<R>) -> Result<R> {
        Ok(self.evaluate(params, x)?.score())
    }

    /// Applies layer `index` alone to a `T × D` input.
    pub fn apply_layer<R: Real>(
        &self,
        index: usize,
        params: &ParamSet<R>,
        x: &Array2<R>,
    ) -> Result<Array2<R>> {
        let layer = self.layers.get(index).ok_or_else(|| {
            Error::Config(format!("layer {index} out of range ({} layers)", self.layers.len()))
        })?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = layer.forward(&mut tape, &p, xv, &self.config, &mut ForwardCtx::eval())?;
        Ok(tape.value(y).clone())
    }

    /// Embedded input and last hidden state of a `T × F` feature matrix.
    pub fn encode<R: Real>(
        &self,
        params: &ParamSet<R>,
        x: &Array2<R>,
    ) -> Result<(Array2<R>, Array2<R>)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let tr = self.forward(&mut tape, &p, xv, &mut ForwardCtx::eval())?;
        Ok((tape.value(tr.embedded).clone(), tape.value(tr.hidden).clone()))
    }

    /// Final projections of every residual branch.
    pub fn branch_output_projections(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [&l.first, &l.second])
            .flat_map(SubBlock::output_projections)
            .collect()
    }

    /// Zeroes every residual branch so each layer is the identity map.
    pub fn zero_branches<R: Real>(&self, params: &mut ParamSet<R>) {
        for id in self.branch_output_projections() {
            params.value_mut(id).fill(R::zero());
        }
    }
}

/// Exact number of trainable scalars of a backbone.
pub fn count_parameters(cfg: &BackboneConfig) -> Result<usize> {
    let (_, params) = Backbone::new::<f32>(cfg, 0)?;
    Ok(params.num_scalars())
}

/// `W₂(swish(W₁x) ⊙ W₃x)` on a tape.
pub(crate) fn swiglu<R: Real>(tape: &mut Tape<R>, p: &Bound, ffn: &SwiGlu, x: Var) -> Result<Var> {
    let gate = tape.matmul_nt(x, p[ffn.w1])?;
    let gate = tape.act(gate, Activation::Silu);
    let up = tape.matmul_nt(x, p[ffn.w3])?;
    let h = tape.mul(gate, up)?;
    tape.matmul_nt(h, p[ffn.w2])
}

#[cfg(test)]
mod tests;
