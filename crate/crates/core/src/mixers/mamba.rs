use crate::autodiff::{Activation, ConvMode, Tape, Var};
use crate::params::{Bound, Init, ParamId, ParamRole, ParamSet};
use crate::{Real, Result};

use super::{dt_bias_init, fan_in_bound, CoeffVars, MixerConfig, MixerTrace};

/// Mamba (selective scan) block with per-channel diagonal state.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub inner: usize,
    pub state: usize,
    pub dt_rank: usize,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: ParamId,
    pub dt_proj_w: ParamId,
    pub dt_proj_b: ParamId,
    pub a_log: ParamId,
    pub skip: ParamId,
    pub out_proj: ParamId,
}

impl MambaBlock {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        cfg: &MixerConfig,
        d_model: usize,
    ) -> Self {
        let inner = cfg.inner_dim(d_model);
        let state = cfg.state_dim;
        let dt_rank = d_model.div_ceil(16);
        let width = cfg.conv_width;
        let name = |s: &str| format!("{prefix}.{s}");
        let mut decl = |n: &str, shape, role, init| params.declare(seed, name(n), shape, role, init);

        let in_proj = decl(
            "in_proj.weight",
            (2 * inner, d_model),
            ParamRole::Weight,
            Init::Uniform(fan_in_bound(d_model)),
        );
        let conv_w = decl(
            "conv.weight",
            (inner, width),
            ParamRole::Weight,
            Init::Uniform(fan_in_bound(width)),
        );
        let conv_b = decl("conv.bias", (1, inner), ParamRole::Bias, Init::Zeros);
        let x_proj = decl(
            "x_proj.weight",
            (dt_rank + 2 * state, inner),
            ParamRole::Weight,
            Init::Uniform(fan_in_bound(inner)),
        );
        let dt_proj_w = decl(
            "dt_proj.weight",
            (inner, dt_rank),
            ParamRole::Weight,
            Init::Uniform(fan_in_bound(dt_rank)),
        );
        let dt_proj_b = decl(
            "dt_proj.bias",
            (1, inner),
            ParamRole::Bias,
            Init::Values(dt_bias_init(seed, &name("dt_proj.bias"), inner)),
        );
        // A = -(1..=S) for every channel
        let a_values = (0..inner)
            .flat_map(|_| (1..=state).map(|n| (n as f64).ln()))
            .collect();
        let a_log = decl("A_log", (inner, state), ParamRole::Dynamics, Init::Values(a_values));
        let skip = decl("D", (1, inner), ParamRole::Dynamics, Init::Ones);
        let out_proj = decl(
            "out_proj.weight",
            (d_model, inner),
            ParamRole::Weight,
            Init::Uniform(fan_in_bound(inner)),
        );
        Self {
            inner,
            state,
            dt_rank,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj_w,
            dt_proj_b,
            a_log,
            skip,
            out_proj,
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<MixerTrace> {
        let xz = tape.matmul_nt(x, p[self.in_proj])?;
        let parts = tape.split_cols(xz, &[self.inner, self.inner])?;
        let (u, z) = (parts[0], parts[1]);
        let u = tape.conv(u, p[self.conv_w], p[self.conv_b], ConvMode::Causal)?;
        let u = tape.silu(u);

        let dbc = tape.matmul_nt(u, p[self.x_proj])?;
        let parts = tape.split_cols(dbc, &[self.dt_rank, self.state, self.state])?;
        let (dt_low, b, c) = (parts[0], parts[1], parts[2]);
        let dt = tape.matmul_nt(dt_low, p[self.dt_proj_w])?;
        let dt = tape.add_row(dt, p[self.dt_proj_b])?;
        let delta = tape.act(dt, Activation::Softplus);

        let a = tape.act(p[self.a_log], Activation::Exp);
        let a = tape.scale(a, -R::one());
        let skip = p[self.skip];

        let y = tape.selective_scan(u, delta, a, b, c, skip)?;
        let gate = tape.silu(z);
        let gated = tape.mul(y, gate)?;
        let out = tape.matmul_nt(gated, p[self.out_proj])?;
        Ok(MixerTrace {
            out,
            value: u,
            core: y,
            coeffs: CoeffVars::Mamba {
                delta,
                a,
                b,
                c,
                skip,
            },
        })
    }
}
