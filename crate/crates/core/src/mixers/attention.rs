use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, Init, ParamId, ParamRole, ParamSet};
use crate::{Error, Real, Result};

use super::fan_in_bound;

/// Multi-head softmax attention over all frames: no mask and no positional
/// signal, so it is permutation-equivariant in time.
#[derive(Clone, Debug)]
pub struct Attention {
    pub d_model: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl Attention {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} attention heads"
            )));
        }
        let mut decl = |n: &str| {
            params.declare(
                seed,
                format!("{prefix}.{n}"),
                (d_model, d_model),
                ParamRole::Weight,
                Init::Uniform(fan_in_bound(d_model)),
            )
        };
        Ok(Self {
            d_model,
            heads,
            wq: decl("q_proj.weight"),
            wk: decl("k_proj.weight"),
            wv: decl("v_proj.weight"),
            wo: decl("out_proj.weight"),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let dh = self.head_dim();
        let scale = R::one() / R::of(dh as f64).sqrt();
        let q = tape.matmul_nt(x, p[self.wq])?;
        let k = tape.matmul_nt(x, p[self.wk])?;
        let v = tape.matmul_nt(x, p[self.wv])?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            heads.push(tape.matmul(weights, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        tape.matmul_nt(o, p[self.wo])
    }

    /// Evaluates attention on one sequence without keeping the tape.
    pub fn apply<R: Real>(&self, params: &ParamSet<R>, x: &Array2<R>) -> Result<Array2<R>> {
        super::scan::ensure_finite("attention input", x)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }
}
