use crate::autodiff::{Activation, ConvMode, Tape, Var};
use crate::params::{Bound, Init, ParamId, ParamRole, ParamSet};
use crate::{Real, Result};

use super::{
    dt_bias_init, fan_in_bound, head_a_log_init, CoeffVars, MixerConfig, MixerTrace,
    GATED_NORM_EPS, KEY_NORM_EPS,
};

/// Gated DeltaNet block.  Queries and keys are L2-normalised per head; only
/// the value path carries the short causal convolution.
#[derive(Clone, Debug)]
pub struct GdnBlock {
    pub inner: usize,
    pub state: usize,
    pub heads: usize,
    pub q_proj: ParamId,
    pub k_proj: ParamId,
    pub v_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub a_proj: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub b_proj_w: ParamId,
    pub b_proj_b: ParamId,
    pub g_proj: ParamId,
    pub norm: ParamId,
    pub out_proj: ParamId,
}

impl GdnBlock {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        cfg: &MixerConfig,
        d_model: usize,
    ) -> Self {
        let inner = cfg.inner_dim(d_model);
        let heads = cfg.heads(d_model);
        let s = cfg.state_dim;
        let name = |n: &str| format!("{prefix}.{n}");
        let mut decl = |n: &str, shape, role, init| params.declare(seed, name(n), shape, role, init);
        let lin = |fan_in| Init::Uniform(fan_in_bound(fan_in));

        let q_proj = decl("q_proj.weight", (heads * s, d_model), ParamRole::Weight, lin(d_model));
        let k_proj = decl("k_proj.weight", (heads * s, d_model), ParamRole::Weight, lin(d_model));
        let v_proj = decl("v_proj.weight", (inner, d_model), ParamRole::Weight, lin(d_model));
        let conv_w = decl(
            "conv.weight",
            (inner, cfg.conv_width),
            ParamRole::Weight,
            lin(cfg.conv_width),
        );
        let conv_b = decl("conv.bias", (1, inner), ParamRole::Bias, Init::Zeros);
        let a_proj = decl("a_proj.weight", (heads, d_model), ParamRole::Weight, lin(d_model));
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
        let b_proj_w = decl("b_proj.weight", (heads, d_model), ParamRole::Weight, lin(d_model));
        let b_proj_b = decl("b_proj.bias", (1, heads), ParamRole::Bias, Init::Zeros);
        let g_proj = decl("g_proj.weight", (inner, d_model), ParamRole::Weight, lin(d_model));
        let norm = decl("norm.gain", (1, inner), ParamRole::Gain, Init::Ones);
        let out_proj = decl("out_proj.weight", (d_model, inner), ParamRole::Weight, lin(inner));
        Self {
            inner,
            state: s,
            heads,
            q_proj,
            k_proj,
            v_proj,
            conv_w,
            conv_b,
            a_proj,
            dt_bias,
            a_log,
            b_proj_w,
            b_proj_b,
            g_proj,
            norm,
            out_proj,
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<MixerTrace> {
        let eps = R::of(KEY_NORM_EPS);
        let q = tape.matmul_nt(x, p[self.q_proj])?;
        let query = tape.l2norm_groups(q, self.state, eps)?;
        let k = tape.matmul_nt(x, p[self.k_proj])?;
        let key = tape.l2norm_groups(k, self.state, eps)?;

        let v = tape.matmul_nt(x, p[self.v_proj])?;
        let v = tape.conv(v, p[self.conv_w], p[self.conv_b], ConvMode::Causal)?;
        let v = tape.silu(v);

        // α = exp(−softplus(a + bias)·exp(A_log))
        let a = tape.matmul_nt(x, p[self.a_proj])?;
        let a = tape.add_row(a, p[self.dt_bias])?;
        let a = tape.act(a, Activation::Softplus);
        let rate = tape.act(p[self.a_log], Activation::Exp);
        let log_decay = tape.mul_row(a, rate)?;
        let log_decay = tape.scale(log_decay, -R::one());
        let decay = tape.act(log_decay, Activation::Exp);

        let b = tape.matmul_nt(x, p[self.b_proj_w])?;
        let b = tape.add_row(b, p[self.b_proj_b])?;
        let beta = tape.act(b, Activation::Sigmoid);

        let y = tape.delta_rule_scan(v, decay, beta, key, query)?;
        let normed = tape.rmsnorm(y, p[self.norm], R::of(GATED_NORM_EPS))?;
        let g = tape.matmul_nt(x, p[self.g_proj])?;
        let gate = tape.silu(g);
        let gated = tape.mul(normed, gate)?;
        let out = tape.matmul_nt(gated, p[self.out_proj])?;
        Ok(MixerTrace {
            out,
            value: v,
            core: y,
            coeffs: CoeffVars::Gdn {
                decay,
                beta,
                key,
                query,
            },
        })
    }
}
