//! Token mixers: four SSM variants and non-causal multi-head attention.
//!
//! Each SSM block turns its input into a value stream plus per-step
//! [`StepCoefficients`], runs one fused recurrent scan over them and gates /
//! projects the result back to the model width.  For frozen coefficients the
//! scan is linear in the value stream, so every kind has a dense matrix form
//! ([`materialize_mixer_matrix`]) that serves as the test oracle.

mod attention;
mod gdn;
mod hydra;
mod mamba;
mod mamba2;
mod materialize;
pub mod scan;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::{Error, Real, Result};

pub use attention::Attention;
pub use gdn::GdnBlock;
pub use hydra::HydraBlock;
pub use mamba::MambaBlock;
pub use mamba2::Mamba2Block;
pub use materialize::{apply_mixer_matrix, materialize_mixer_matrix};

/// Epsilon of the gated RMS norms inside the headed mixers.
pub(crate) const GATED_NORM_EPS: f64 = 1e-6;
/// Epsilon inside the square root of the GDN key/query normalisation.
pub(crate) const KEY_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixerKind {
    #[serde(rename = "MAMBA")]
    Mamba,
    #[serde(rename = "MAMBA2")]
    Mamba2,
    #[serde(rename = "HYDRA")]
    Hydra,
    #[serde(rename = "GDN")]
    Gdn,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [
        MixerKind::Mamba,
        MixerKind::Mamba2,
        MixerKind::Hydra,
        MixerKind::Gdn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MixerKind::Mamba => "MAMBA",
            MixerKind::Mamba2 => "MAMBA2",
            MixerKind::Hydra => "HYDRA",
            MixerKind::Gdn => "GDN",
        }
    }

    /// Whether the block output at frame `t` depends only on frames `..= t`.
    pub fn is_causal(self) -> bool {
        !matches!(self, MixerKind::Hydra)
    }

    pub fn code(self) -> u8 {
        match self {
            MixerKind::Mamba => 0,
            MixerKind::Mamba2 => 1,
            MixerKind::Hydra => 2,
            MixerKind::Gdn => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mixer kind {s:?}")))
    }
}

fn default_state_dim() -> usize {
    64
}
fn default_head_dim() -> usize {
    32
}
fn default_expand() -> usize {
    2
}
fn default_conv_width() -> usize {
    4
}

/// Architecture of one SSM block.  The model width comes from the owning
/// backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub kind: MixerKind,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_conv_width")]
    pub conv_width: usize,
}

impl MixerConfig {
    pub fn new(kind: MixerKind) -> Self {
        Self {
            kind,
            state_dim: default_state_dim(),
            head_dim: default_head_dim(),
            expand: default_expand(),
            conv_width: default_conv_width(),
        }
    }

    pub fn inner_dim(&self, d_model: usize) -> usize {
        d_model * self.expand
    }

    /// Number of heads of the headed kinds.
    pub fn heads(&self, d_model: usize) -> usize {
        self.inner_dim(d_model) / self.head_dim
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if d_model == 0 || self.expand == 0 {
            return Err(Error::Config("model width and expand must be positive".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be at least 1".into()));
        }
        if self.conv_width == 0 {
            return Err(Error::Config("conv_width must be at least 1".into()));
        }
        if self.kind != MixerKind::Mamba
            && (self.head_dim == 0 || self.inner_dim(d_model) % self.head_dim != 0)
        {
            return Err(Error::Config(format!(
                "inner width {} is not divisible by head_dim {}",
                self.inner_dim(d_model),
                self.head_dim
            )));
        }
        Ok(())
    }
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self::new(MixerKind::Mamba)
    }
}

/// Frozen per-step scan coefficients of one mixer evaluation.
///
/// Layouts: `T × C` per channel, `T × H` per head, `T × H·S` for per-head
/// keys and queries.
#[derive(Clone, Debug, PartialEq)]
pub enum StepCoefficients<R: Real> {
    Mamba {
        /// Step sizes Δ, `T × C`
        delta: Array2<R>,
        /// Diagonal state matrix A (negative), `C × S`
        a: Array2<R>,
        /// Input gates B, `T × S`
        b: Array2<R>,
        /// Readouts C, `T × S`
        c: Array2<R>,
        /// Channel skip d, `1 × C`
        skip: Array2<R>,
    },
    Mamba2 {
        decay: Array2<R>,
        key: Array2<R>,
        query: Array2<R>,
        skip: Array2<R>,
    },
    Hydra {
        decay: Array2<R>,
        key: Array2<R>,
        query: Array2<R>,
        /// Diagonal term δ, `T × H`
        diag: Array2<R>,
    },
    Gdn {
        decay: Array2<R>,
        beta: Array2<R>,
        key: Array2<R>,
        query: Array2<R>,
    },
}

impl<R: Real> StepCoefficients<R> {
    pub fn kind(&self) -> MixerKind {
        match self {
            StepCoefficients::Mamba { .. } => MixerKind::Mamba,
            StepCoefficients::Mamba2 { .. } => MixerKind::Mamba2,
            StepCoefficients::Hydra { .. } => MixerKind::Hydra,
            StepCoefficients::Gdn { .. } => MixerKind::Gdn,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            StepCoefficients::Mamba { delta, .. } => delta.nrows(),
            StepCoefficients::Mamba2 { decay, .. }
            | StepCoefficients::Hydra { decay, .. }
            | StepCoefficients::Gdn { decay, .. } => decay.nrows(),
        }
    }

    /// Number of independent mixing matrices: channels for Mamba, heads
    /// otherwise.
    pub fn groups(&self) -> usize {
        match self {
            StepCoefficients::Mamba { delta, .. } => delta.ncols(),
            StepCoefficients::Mamba2 { decay, .. }
            | StepCoefficients::Hydra { decay, .. }
            | StepCoefficients::Gdn { decay, .. } => decay.ncols(),
        }
    }

    fn fields(&self) -> [&Array2<R>; 5] {
        match self {
            StepCoefficients::Mamba {
                delta,
                a,
                b,
                c,
                skip,
            } => [delta, a, b, c, skip],
            StepCoefficients::Mamba2 {
                decay,
                key,
                query,
                skip,
            } => [decay, key, query, skip, skip],
            StepCoefficients::Hydra {
                decay,
                key,
                query,
                diag,
            } => [decay, key, query, diag, diag],
            StepCoefficients::Gdn {
                decay,
                beta,
                key,
                query,
            } => [decay, beta, key, query, query],
        }
    }

    /// Applies `f` to every coefficient array.
    pub fn map<S: Real>(&self, f: impl Fn(&Array2<R>) -> Array2<S>) -> StepCoefficients<S> {
        match self {
            StepCoefficients::Mamba {
                delta,
                a,
                b,
                c,
                skip,
            } => StepCoefficients::Mamba {
                delta: f(delta),
                a: f(a),
                b: f(b),
                c: f(c),
                skip: f(skip),
            },
            StepCoefficients::Mamba2 {
                decay,
                key,
                query,
                skip,
            } => StepCoefficients::Mamba2 {
                decay: f(decay),
                key: f(key),
                query: f(query),
                skip: f(skip),
            },
            StepCoefficients::Hydra {
                decay,
                key,
                query,
                diag,
            } => StepCoefficients::Hydra {
                decay: f(decay),
                key: f(key),
                query: f(query),
                diag: f(diag),
            },
            StepCoefficients::Gdn {
                decay,
                beta,
                key,
                query,
            } => StepCoefficients::Gdn {
                decay: f(decay),
                beta: f(beta),
                key: f(key),
                query: f(query),
            },
        }
    }

    /// Converts to another precision.
    pub fn cast<S: Real>(&self) -> StepCoefficients<S> {
        self.map(|m| m.mapv(|v| S::of(v.f64())))
    }

    /// Checks the range constraints the coefficient projections guarantee:
    /// Δ > 0, decays in (0, 1], β in [0, 1] and unit GDN keys (to `key_tol`).
    pub fn check_invariants(&self, key_tol: f64) -> Result<()> {
        let bad = |what: &str| Err(Error::Data(format!("coefficient invariant violated: {what}")));
        let in_unit = |m: &Array2<R>| m.iter().all(|&v| v > R::zero() && v <= R::one());
        match self {
            StepCoefficients::Mamba { delta, a, .. } => {
                if !delta.iter().all(|&d| d > R::zero()) {
                    return bad("delta > 0");
                }
                if !a.iter().all(|&v| v < R::zero()) {
                    return bad("A < 0");
                }
            }
            StepCoefficients::Mamba2 { decay, .. } | StepCoefficients::Hydra { decay, .. } => {
                if !in_unit(decay) {
                    return bad("decay in (0, 1]");
                }
            }
            StepCoefficients::Gdn {
                decay, beta, key, ..
            } => {
                if !in_unit(decay) {
                    return bad("alpha in (0, 1]");
                }
                if !beta.iter().all(|&b| b >= R::zero() && b <= R::one()) {
                    return bad("beta in [0, 1]");
                }
                let heads = decay.ncols();
                let s = key.ncols() / heads;
                for row in key.rows() {
                    for h in 0..heads {
                        let n: f64 = (0..s).map(|i| row[h * s + i].f64().powi(2)).sum::<f64>().sqrt();
                        if (n - 1.0).abs() > key_tol {
                            return bad("unit keys");
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs the recurrent core of a mixer on value stream `v`.
pub fn mixer_core<R: Real>(v: &Array2<R>, coeffs: &StepCoefficients<R>) -> Result<Array2<R>> {
    scan::ensure_finite("value stream", v)?;
    if !v.is_standard_layout() || coeffs.fields().iter().any(|m| !m.is_standard_layout()) {
        let v = v.as_standard_layout().into_owned();
        return mixer_core(&v, &coeffs.map(|m| m.as_standard_layout().into_owned()));
    }
    if v.nrows() != coeffs.steps() {
        return Err(Error::shape(
            "mixer_core",
            format!("{} value frames, {} coefficient frames", v.nrows(), coeffs.steps()),
        ));
    }
    match coeffs {
        StepCoefficients::Mamba {
            delta,
            a,
            b,
            c,
            skip,
        } => scan::selective_scan(v, delta, a, b, c, skip).map(|(y, _)| y),
        StepCoefficients::Mamba2 {
            decay,
            key,
            query,
            skip,
        } => {
            let lay = scan::HeadLayout::infer(v, decay, key)?;
            scan::headed_scan(lay, v, decay, key, query, skip).map(|(y, _)| y)
        }
        StepCoefficients::Hydra {
            decay,
            key,
            query,
            diag,
        } => {
            let lay = scan::HeadLayout::infer(v, decay, key)?;
            scan::quasiseparable_scan(lay, v, decay, key, query, diag).map(|(y, _, _)| y)
        }
        StepCoefficients::Gdn {
            decay,
            beta,
            key,
            query,
        } => {
            let lay = scan::HeadLayout::infer(v, decay, key)?;
            scan::delta_rule_scan(lay, v, decay, beta, key, query).map(|(y, _)| y)
        }
    }
}

/// 64-bit reference selective scan (Mamba recurrence).
pub fn selective_scan_ref(
    v: &Array2<f64>,
    coeffs: &StepCoefficients<f64>,
) -> Result<Array2<f64>> {
    match coeffs {
        StepCoefficients::Mamba { .. } => mixer_core(v, coeffs),
        other => Err(Error::Config(format!(
            "selective_scan_ref needs MAMBA coefficients, got {}",
            other.kind()
        ))),
    }
}

/// Tape handles of the coefficients recorded by a mixer forward.
#[derive(Clone, Copy, Debug)]
pub enum CoeffVars {
    Mamba {
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        skip: Var,
    },
    Mamba2 {
        decay: Var,
        key: Var,
        query: Var,
        skip: Var,
    },
    Hydra {
        decay: Var,
        key: Var,
        query: Var,
        diag: Var,
    },
    Gdn {
        decay: Var,
        beta: Var,
        key: Var,
        query: Var,
    },
}

/// Intermediate handles of one mixer forward.
#[derive(Clone, Copy, Debug)]
pub struct MixerTrace {
    /// Block output, `T × D`.
    pub out: Var,
    /// Value stream entering the scan.
    pub value: Var,
    /// Scan output before gating.
    pub core: Var,
    pub coeffs: CoeffVars,
}

impl MixerTrace {
    pub fn coefficients<R: Real>(&self, tape: &Tape<R>) -> StepCoefficients<R> {
        let v = |x: Var| tape.value(x).clone();
        match self.coeffs {
            CoeffVars::Mamba {
                delta,
                a,
                b,
                c,
                skip,
            } => StepCoefficients::Mamba {
                delta: v(delta),
                a: v(a),
                b: v(b),
                c: v(c),
                skip: v(skip),
            },
            CoeffVars::Mamba2 {
                decay,
                key,
                query,
                skip,
            } => StepCoefficients::Mamba2 {
                decay: v(decay),
                key: v(key),
                query: v(query),
                skip: v(skip),
            },
            CoeffVars::Hydra {
                decay,
                key,
                query,
                diag,
            } => StepCoefficients::Hydra {
                decay: v(decay),
                key: v(key),
                query: v(query),
                diag: v(diag),
            },
            CoeffVars::Gdn {
                decay,
                beta,
                key,
                query,
            } => StepCoefficients::Gdn {
                decay: v(decay),
                beta: v(beta),
                key: v(key),
                query: v(query),
            },
        }
    }
}

/// One SSM block of any kind.
#[derive(Clone, Debug)]
pub enum MixerBlock {
    Mamba(MambaBlock),
    Mamba2(Mamba2Block),
    Hydra(HydraBlock),
    Gdn(GdnBlock),
}

impl MixerBlock {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        cfg: &MixerConfig,
        d_model: usize,
    ) -> Result<Self> {
        cfg.validate(d_model)?;
        Ok(match cfg.kind {
            MixerKind::Mamba => MixerBlock::Mamba(MambaBlock::declare(params, seed, prefix, cfg, d_model)),
            MixerKind::Mamba2 => {
                MixerBlock::Mamba2(Mamba2Block::declare(params, seed, prefix, cfg, d_model))
            }
            MixerKind::Hydra => MixerBlock::Hydra(HydraBlock::declare(params, seed, prefix, cfg, d_model)),
            MixerKind::Gdn => MixerBlock::Gdn(GdnBlock::declare(params, seed, prefix, cfg, d_model)),
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            MixerBlock::Mamba(_) => MixerKind::Mamba,
            MixerBlock::Mamba2(_) => MixerKind::Mamba2,
            MixerBlock::Hydra(_) => MixerKind::Hydra,
            MixerBlock::Gdn(_) => MixerKind::Gdn,
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<MixerTrace> {
        match self {
            MixerBlock::Mamba(b) => b.forward(tape, p, x),
            MixerBlock::Mamba2(b) => b.forward(tape, p, x),
            MixerBlock::Hydra(b) => b.forward(tape, p, x),
            MixerBlock::Gdn(b) => b.forward(tape, p, x),
        }
    }

    /// Final projection back to the model width.
    pub fn output_projection(&self) -> ParamId {
        match self {
            MixerBlock::Mamba(b) => b.out_proj,
            MixerBlock::Mamba2(b) => b.out_proj,
            MixerBlock::Hydra(b) => b.out_proj,
            MixerBlock::Gdn(b) => b.out_proj,
        }
    }

    /// Evaluates the block on a single sequence without keeping the tape.
    pub fn apply<R: Real>(&self, params: &ParamSet<R>, x: &Array2<R>) -> Result<Array2<R>> {
        scan::ensure_finite("mixer input", x)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let trace = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(trace.out).clone())
    }
}

/// `1 / √fan_in`, the uniform bound for linear weights.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Softplus-inverse biases whose softplus is log-uniform on `[0.001, 0.1]`.
pub(crate) fn dt_bias_init(seed: u64, name: &str, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::params::name_hash(name));
    let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
    (0..n)
        .map(|_| {
            let dt = rng.gen_range(lo..hi).exp();
            // inverse of softplus
            dt + (-(-dt).exp_m1()).ln()
        })
        .collect()
}

/// Per-head decay rates `ln A` with `A` uniform on `[1, 16]`.
pub(crate) fn head_a_log_init(seed: u64, name: &str, heads: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::params::name_hash(name));
    (0..heads).map(|_| rng.gen_range(1.0f64..16.0).ln()).collect()
}
