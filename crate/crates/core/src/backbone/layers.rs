use ndarray::Array2;

use crate::autodiff::{Activation, Tape, Var};
use crate::mixers::{Attention, MixerBlock};
use crate::params::{Bound, Init, ParamId, ParamRole, ParamSet};
use crate::{Error, Real, Result};

use super::{swiglu, BackboneConfig, ForwardCtx, LayerKind};

/// SwiGLU feed-forward network without biases.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

impl SwiGlu {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        d_model: usize,
        hidden: usize,
    ) -> Self {
        let mut decl = |n: &str, shape: (usize, usize)| {
            params.declare(
                seed,
                format!("{prefix}.{n}"),
                shape,
                ParamRole::Weight,
                Init::Uniform(1.0 / (shape.1 as f64).sqrt()),
            )
        };
        Self {
            w1: decl("w1.weight", (hidden, d_model)),
            w2: decl("w2.weight", (d_model, hidden)),
            w3: decl("w3.weight", (hidden, d_model)),
        }
    }

    pub fn apply<R: Real>(&self, params: &ParamSet<R>, x: &Array2<R>) -> Result<Array2<R>> {
        crate::mixers::scan::ensure_finite("ffn input", x)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = swiglu(&mut tape, &p, self, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Contents of one residual branch.
#[derive(Clone, Debug)]
pub enum SubBlock {
    /// `N` SSM blocks applied one after another.
    Ssm(Vec<MixerBlock>),
    Attention(Attention),
    Ffn(SwiGlu),
}

impl SubBlock {
    fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            SubBlock::Ssm(blocks) => {
                let mut h = x;
                for b in blocks {
                    h = b.forward(tape, p, h)?.out;
                }
                Ok(h)
            }
            SubBlock::Attention(a) => a.forward(tape, p, x),
            SubBlock::Ffn(f) => swiglu(tape, p, f, x),
        }
    }

    pub fn output_projections(&self) -> Vec<ParamId> {
        match self {
            SubBlock::Ssm(blocks) => blocks.iter().map(MixerBlock::output_projection).collect(),
            SubBlock::Attention(a) => vec![a.wo],
            SubBlock::Ffn(f) => vec![f.w2],
        }
    }
}

/// Two pre-norm residual sub-blocks.
#[derive(Clone, Debug)]
pub struct Layer {
    pub kind: LayerKind,
    pub norm1: ParamId,
    pub first: SubBlock,
    pub norm2: ParamId,
    pub second: SubBlock,
}

impl Layer {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        kind: LayerKind,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let ssm = |params: &mut ParamSet<R>| -> Result<SubBlock> {
            (0..cfg.n)
                .map(|j| MixerBlock::declare(params, seed, &format!("{prefix}.ssm.{j}"), &cfg.mixer, d))
                .collect::<Result<Vec<_>>>()
                .map(SubBlock::Ssm)
        };
        let attn = |params: &mut ParamSet<R>| -> Result<SubBlock> {
            Attention::declare(params, seed, &format!("{prefix}.attn"), d, cfg.n_attn_heads)
                .map(SubBlock::Attention)
        };
        let ffn = |params: &mut ParamSet<R>| {
            SubBlock::Ffn(SwiGlu::declare(params, seed, &format!("{prefix}.ffn"), d, cfg.ffn_mult * d))
        };
        let norm1 = params.declare(seed, format!("{prefix}.norm1.gain"), (1, d), ParamRole::Gain, Init::Ones);
        let first = match kind {
            LayerKind::Mamba | LayerKind::Mamer => ssm(params)?,
            LayerKind::Transformer => attn(params)?,
        };
        let norm2 = params.declare(seed, format!("{prefix}.norm2.gain"), (1, d), ParamRole::Gain, Init::Ones);
        let second = match kind {
            LayerKind::Mamba | LayerKind::Transformer => ffn(params),
            LayerKind::Mamer => attn(params)?,
        };
        Ok(Self {
            kind,
            norm1,
            first,
            norm2,
            second,
        })
    }

    /// `x ← x + first(norm(x))`, then `x ← x + second(norm(x))`.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        x: Var,
        cfg: &BackboneConfig,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let eps = R::of(cfg.norm_eps);
        let mut h = x;
        for (norm, sub) in [(self.norm1, &self.first), (self.norm2, &self.second)] {
            let normed = tape.rmsnorm(h, p[norm], eps)?;
            let mut branch = sub.forward(tape, p, normed)?;
            if let Some(mask) = ctx.mask(cfg.dropout, tape.shape(branch)) {
                branch = tape.dropout(branch, mask)?;
            }
            h = tape.add(h, branch)?;
        }
        Ok(h)
    }
}

/// Gated attention pooling: `a_t = vᵀ(tanh(W h_t) ⊙ σ(G h_t))`,
/// `α = softmax(a)`, `pooled = Σ α_t h_t`.
#[derive(Clone, Debug)]
pub struct Pool {
    pub w: ParamId,
    pub g: ParamId,
    pub v: ParamId,
}

impl Pool {
    pub fn declare<R: Real>(params: &mut ParamSet<R>, seed: u64, prefix: &str, d: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut decl = |n: &str, shape| {
            params.declare(seed, format!("{prefix}.{n}"), shape, ParamRole::Weight, Init::Uniform(bound))
        };
        Self {
            w: decl("w.weight", (d, d)),
            g: decl("g.weight", (d, d)),
            v: decl("v.weight", (1, d)),
        }
    }

    /// Returns the `1 × T` weights and the `1 × D` pooled vector.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, h: Var) -> Result<(Var, Var)> {
        let wh = tape.matmul_nt(h, p[self.w])?;
        let wh = tape.act(wh, Activation::Tanh);
        let gh = tape.matmul_nt(h, p[self.g])?;
        let gh = tape.act(gh, Activation::Sigmoid);
        let gated = tape.mul(wh, gh)?;
        let scores = tape.matmul_nt(p[self.v], gated)?;
        crate::mixers::scan::ensure_finite("pooling scores", tape.value(scores))?;
        let weights = tape.softmax_rows(scores);
        let pooled = tape.matmul(weights, h)?;
        Ok((weights, pooled))
    }
}

/// Pools a `T × D` hidden sequence; returns `(α, pooled)`.
pub fn gated_attention_pool<R: Real>(
    params: &ParamSet<R>,
    pool: &Pool,
    h: &Array2<R>,
) -> Result<(Vec<R>, Vec<R>)> {
    if h.nrows() == 0 {
        return Err(Error::shape("gated_attention_pool", "no frames to pool"));
    }
    crate::mixers::scan::ensure_finite("pooling input", h)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let hv = tape.leaf(h.clone());
    let (w, pooled) = pool.forward(&mut tape, &p, hv)?;
    Ok((
        tape.value(w).iter().copied().collect(),
        tape.value(pooled).iter().copied().collect(),
    ))
}

/// Linear map from the pooled vector to `[bonafide, spoof]` logits.
#[derive(Clone, Debug)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

/// Bound of the small uniform head initialisation.
const HEAD_INIT_BOUND: f64 = 0.01;

impl Head {
    pub fn declare<R: Real>(params: &mut ParamSet<R>, seed: u64, prefix: &str, d: usize) -> Self {
        Self {
            w: params.declare(
                seed,
                format!("{prefix}.weight"),
                (2, d),
                ParamRole::Weight,
                Init::Uniform(HEAD_INIT_BOUND),
            ),
            b: params.declare(seed, format!("{prefix}.bias"), (1, 2), ParamRole::Bias, Init::Zeros),
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, pooled: Var) -> Result<Var> {
        let l = tape.matmul_nt(pooled, p[self.w])?;
        tape.add_row(l, p[self.b])
    }

    /// Logits of a pooled vector.
    pub fn apply<R: Real>(&self, params: &ParamSet<R>, pooled: &[R]) -> Result<[R; 2]> {
        let w = params.value(self.w);
        let b = params.value(self.b);
        if w.ncols() != pooled.len() {
            return Err(Error::shape(
                "classify_and_score",
                format!("head expects {} dims, found {}", w.ncols(), pooled.len()),
            ));
        }
        let logit = |k: usize| {
            w.row(k).iter().zip(pooled).fold(b[[0, k]], |acc, (&wi, &xi)| acc + wi * xi)
        };
        let out = [logit(0), logit(1)];
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(out)
    }
}
