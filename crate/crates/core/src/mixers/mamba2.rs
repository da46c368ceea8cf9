use crate::autodiff::{Activation, ConvMode, Tape, Var};
use crate::params::{Bound, Init, ParamId, ParamRole, ParamSet};
use crate::{Real, Result};

use super::{
    dt_bias_init, fan_in_bound, head_a_log_init, CoeffVars, MixerConfig, MixerTrace,
    GATED_NORM_EPS,
};

/// Mamba2 block: scalar decay per head, keys shared across heads and scaled
/// by the per-head step size.
#[derive(Clone, Debug)]
pub struct Mamba2Block {
    pub inner: usize,
    pub state: usize,
    pub heads: usize,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub skip: ParamId,
    pub norm: ParamId,
    pub out_proj: ParamId,
}

/// Parameters shared by the Mamba2 and Hydra layouts.
pub(super) struct HeadedDecl {
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub skip: ParamId,
    pub norm: ParamId,
    pub out_proj: ParamId,
}

/// Declares the headed-SSM parameters; `extra_heads` adds per-head columns
/// to the input projection beyond the step-size block.
pub(super) fn declare_headed<R: Real>(
    params: &mut ParamSet<R>,
    seed: u64,
    prefix: &str,
    cfg: &MixerConfig,
    d_model: usize,
    extra_heads: usize,
) -> HeadedDecl {
    let inner = cfg.inner_dim(d_model);
    let heads = cfg.heads(d_model);
    let s = cfg.state_dim;
    let conv_ch = inner + 2 * s;
    let name = |n: &str| format!("{prefix}.{n}");
    let mut decl = |n: &str, shape, role, init| params.declare(seed, name(n), shape, role, init);

    let in_proj = decl(
        "in_proj.weight",
        (inner + conv_ch + heads * (1 + extra_heads), d_model),
        ParamRole::Weight,
        Init::Uniform(fan_in_bound(d_model)),
    );
    let conv_w = decl(
        "conv.weight",
        (conv_ch, cfg.conv_width),
        ParamRole::Weight,
        Init::Uniform(fan_in_bound(cfg.conv_width)),
    );
    let conv_b = decl("conv.bias", (1, conv_ch), ParamRole::Bias, Init::Zeros);
    let dt_bias = decl(
        "dt_bias",
        (1, heads),
        ParamRole::Bias,
        Init::Values(dt_bias_init(seed, &name("dt_bias"), heads)),
    );
    let a_log = decl(
        "A_log",
        (1, heads),
        ParamRole::Dynamics,
        Init::Values(head_a_log_init(seed, &name("A_log"), heads)),
    );
    let skip = decl("D", (1, heads), ParamRole::Dynamics, Init::Ones);
    let norm = decl("norm.gain", (1, inner), ParamRole::Gain, Init::Ones);
    let out_proj = decl(
        "out_proj.weight",
        (d_model, inner),
        ParamRole::Weight,
        Init::Uniform(fan_in_bound(inner)),
    );
    HeadedDecl {
        in_proj,
        conv_w,
        conv_b,
        dt_bias,
        a_log,
        skip,
        norm,
        out_proj,
    }
}

/// Turns the convolved `[x | B | C]` stream and raw step sizes into the
/// value stream and `(decay, key, query)`:
/// `Δ = softplus(dt + bias)`, `a = exp(−Δ·exp(A_log))`, `k_h = Δ_h·B`,
/// `q_h = C`.
#[allow(clippy::too_many_arguments)]
pub(super) fn headed_coefficients<R: Real>(
    tape: &mut Tape<R>,
    xbc: Var,
    dt_raw: Var,
    dt_bias: Var,
    a_log: Var,
    inner: usize,
    state: usize,
    heads: usize,
) -> Result<(Var, Var, Var, Var)> {
    let parts = tape.split_cols(xbc, &[inner, state, state])?;
    let (xv, b, c) = (parts[0], parts[1], parts[2]);
    let dt = tape.add_row(dt_raw, dt_bias)?;
    let dt = tape.act(dt, Activation::Softplus);
    let rate = tape.act(a_log, Activation::Exp);
    let log_decay = tape.mul_row(dt, rate)?;
    let log_decay = tape.scale(log_decay, -R::one());
    let decay = tape.act(log_decay, Activation::Exp);
    let mut keys = Vec::with_capacity(heads);
    for h in 0..heads {
        let dt_h = tape.slice_cols(dt, h, 1)?;
        keys.push(tape.mul_col(b, dt_h)?);
    }
    let key = tape.concat_cols(&keys)?;
    let query = tape.concat_cols(&vec![c; heads])?;
    Ok((xv, decay, key, query))
}

impl Mamba2Block {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        cfg: &MixerConfig,
        d_model: usize,
    ) -> Self {
        let d = declare_headed(params, seed, prefix, cfg, d_model, 0);
        Self {
            inner: cfg.inner_dim(d_model),
            state: cfg.state_dim,
            heads: cfg.heads(d_model),
            in_proj: d.in_proj,
            conv_w: d.conv_w,
            conv_b: d.conv_b,
            dt_bias: d.dt_bias,
            a_log: d.a_log,
            skip: d.skip,
            norm: d.norm,
            out_proj: d.out_proj,
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<MixerTrace> {
        let conv_ch = self.inner + 2 * self.state;
        let proj = tape.matmul_nt(x, p[self.in_proj])?;
        let parts = tape.split_cols(proj, &[self.inner, conv_ch, self.heads])?;
        let (z, xbc, dt_raw) = (parts[0], parts[1], parts[2]);
        let xbc = tape.conv(xbc, p[self.conv_w], p[self.conv_b], ConvMode::Causal)?;
        let xbc = tape.silu(xbc);
        let (xv, decay, key, query) = headed_coefficients(
            tape,
            xbc,
            dt_raw,
            p[self.dt_bias],
            p[self.a_log],
            self.inner,
            self.state,
            self.heads,
        )?;
        let skip = p[self.skip];
        let y = tape.headed_scan(xv, decay, key, query, skip)?;
        let gate = tape.silu(z);
        let gated = tape.mul(y, gate)?;
        let normed = tape.rmsnorm(gated, p[self.norm], R::of(GATED_NORM_EPS))?;
        let out = tape.matmul_nt(normed, p[self.out_proj])?;
        Ok(MixerTrace {
            out,
            value: xv,
            core: y,
            coeffs: CoeffVars::Mamba2 {
                decay,
                key,
                query,
                skip,
            },
        })
    }
}
