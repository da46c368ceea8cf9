use crate::autodiff::{ConvMode, Tape, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::{Real, Result};

use super::mamba2::{declare_headed, headed_coefficients};
use super::{CoeffVars, MixerConfig, MixerTrace, GATED_NORM_EPS};

/// Hydra block: a quasiseparable (bidirectional) mixer built from one shared
/// set of coefficients run forwards and backwards, plus a per-step diagonal.
///
/// Every stage is either pointwise in time, the symmetric convolution or the
/// direction-symmetric scan, so reversing the input reverses the output.
#[derive(Clone, Debug)]
pub struct HydraBlock {
    pub inner: usize,
    pub state: usize,
    pub heads: usize,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    /// Static part of the diagonal, added to the per-step projection.
    pub skip: ParamId,
    pub norm: ParamId,
    pub out_proj: ParamId,
}

impl HydraBlock {
    pub fn declare<R: Real>(
        params: &mut ParamSet<R>,
        seed: u64,
        prefix: &str,
        cfg: &MixerConfig,
        d_model: usize,
    ) -> Self {
        let d = declare_headed(params, seed, prefix, cfg, d_model, 1);
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
        let parts = tape.split_cols(proj, &[self.inner, conv_ch, self.heads, self.heads])?;
        let (z, xbc, dt_raw, diag_raw) = (parts[0], parts[1], parts[2], parts[3]);
        let xbc = tape.conv(xbc, p[self.conv_w], p[self.conv_b], ConvMode::Symmetric)?;
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
        let diag = tape.add_row(diag_raw, p[self.skip])?;
        let y = tape.quasiseparable_scan(xv, decay, key, query, diag)?;
        let gate = tape.silu(z);
        let gated = tape.mul(y, gate)?;
        let normed = tape.rmsnorm(gated, p[self.norm], R::of(GATED_NORM_EPS))?;
        let out = tape.matmul_nt(normed, p[self.out_proj])?;
        Ok(MixerTrace {
            out,
            value: xv,
            core: y,
            coeffs: CoeffVars::Hydra {
                decay,
                key,
                query,
                diag,
            },
        })
    }
}
