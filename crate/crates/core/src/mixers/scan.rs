//! Recurrent scan kernels and their adjoints.
//!
//! Every kernel runs sequentially over time and keeps the full state history
//! so the backward pass does not have to invert the recurrence.  Layouts are
//! row-major: value-like streams are `T × (H·P)`, key/query streams are
//! `T × (H·S)` and per-head scalars are `T × H`.

use ndarray::Array2;

use crate::{Error, Real, Result};

/// Dimensions of a headed scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub steps: usize,
    pub heads: usize,
    pub value_dim: usize,
    pub state_dim: usize,
}

impl HeadLayout {
    pub fn infer<R: Real>(v: &Array2<R>, decay: &Array2<R>, key: &Array2<R>) -> Result<Self> {
        let (steps, vw) = v.dim();
        let heads = decay.ncols();
        if heads == 0 || decay.nrows() != steps || vw % heads != 0 || key.ncols() % heads != 0 {
            return Err(Error::shape(
                "headed scan",
                format!("v {:?}, decay {:?}, key {:?}", v.dim(), decay.dim(), key.dim()),
            ));
        }
        Ok(Self {
            steps,
            heads,
            value_dim: vw / heads,
            state_dim: key.ncols() / heads,
        })
    }

    fn state_len(&self) -> usize {
        self.value_dim * self.state_dim
    }

    fn check<R: Real>(&self, name: &'static str, m: &Array2<R>, cols: usize) -> Result<()> {
        if m.dim() != (self.steps, cols) {
            return Err(Error::shape(
                name,
                format!("expected {:?}, found {:?}", (self.steps, cols), m.dim()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn ensure_finite<R: Real>(what: &str, m: &Array2<R>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn slice<R: Real>(m: &Array2<R>) -> &[R] {
    m.as_slice().expect("scan inputs are standard layout")
}

fn mat<R: Real>(rows: usize, cols: usize, data: Vec<R>) -> Array2<R> {
    Array2::from_shape_vec((rows, cols), data).expect("shape")
}

/// Mamba selective scan, one diagonal state of size `S` per channel:
///
/// `h_t = exp(Δ_t·A_c) ⊙ h_{t-1} + Δ_t·B_t·v_{t,c}`,
/// `y_{t,c} = ⟨C_t, h_t⟩ + d_c·v_{t,c}`.
///
/// Shapes: `v, delta: T × C`, `a: C × S`, `b, c: T × S`, `skip: 1 × C`.
/// Returns the output and the `T × C × S` state history.
pub fn selective_scan<R: Real>(
    v: &Array2<R>,
    delta: &Array2<R>,
    a: &Array2<R>,
    b: &Array2<R>,
    c: &Array2<R>,
    skip: &Array2<R>,
) -> Result<(Array2<R>, Vec<R>)> {
    let (steps, ch) = v.dim();
    let s_dim = a.ncols();
    if delta.dim() != (steps, ch)
        || a.nrows() != ch
        || b.dim() != (steps, s_dim)
        || c.dim() != (steps, s_dim)
        || skip.dim() != (1, ch)
    {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "v {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, d {:?}",
                v.dim(),
                delta.dim(),
                a.dim(),
                b.dim(),
                c.dim(),
                skip.dim()
            ),
        ));
    }
    for (name, m) in [("v", v), ("delta", delta), ("A", a), ("B", b), ("C", c), ("d", skip)] {
        ensure_finite(name, m)?;
    }
    let (vs, ds, a_s, bs, cs, ks) = (
        slice(v),
        slice(delta),
        slice(a),
        slice(b),
        slice(c),
        slice(skip),
    );
    let mut states = vec![R::zero(); steps * ch * s_dim];
    let mut y = vec![R::zero(); steps * ch];
    for t in 0..steps {
        let (prev, cur) = states.split_at_mut(t * ch * s_dim);
        let prev = if t == 0 {
            None
        } else {
            Some(&prev[(t - 1) * ch * s_dim..])
        };
        let cur = &mut cur[..ch * s_dim];
        let bt = &bs[t * s_dim..(t + 1) * s_dim];
        let ct = &cs[t * s_dim..(t + 1) * s_dim];
        for c_i in 0..ch {
            let dt = ds[t * ch + c_i];
            let u = vs[t * ch + c_i];
            let du = dt * u;
            let mut acc = R::zero();
            for n in 0..s_dim {
                let i = c_i * s_dim + n;
                let decay = (dt * a_s[i]).exp();
                let hp = prev.map_or(R::zero(), |p| p[i]);
                let h = decay * hp + du * bt[n];
                cur[i] = h;
                acc += ct[n] * h;
            }
            y[t * ch + c_i] = acc + ks[c_i] * u;
        }
    }
    Ok((mat(steps, ch, y), states))
}

/// Adjoint of [`selective_scan`]; returns gradients for
/// `[v, delta, a, b, c, skip]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward<R: Real>(
    v: &Array2<R>,
    delta: &Array2<R>,
    a: &Array2<R>,
    b: &Array2<R>,
    c: &Array2<R>,
    skip: &Array2<R>,
    states: &[R],
    dy: &Array2<R>,
) -> [Array2<R>; 6] {
    let (steps, ch) = v.dim();
    let s_dim = a.ncols();
    let dy = dy.as_standard_layout();
    let (vs, ds, a_s, bs, cs, ks, gy) = (
        slice(v),
        slice(delta),
        slice(a),
        slice(b),
        slice(c),
        slice(skip),
        dy.as_slice().expect("standard layout"),
    );
    let mut dv = vec![R::zero(); steps * ch];
    let mut dd = vec![R::zero(); steps * ch];
    let mut da = vec![R::zero(); ch * s_dim];
    let mut db = vec![R::zero(); steps * s_dim];
    let mut dc = vec![R::zero(); steps * s_dim];
    let mut dk = vec![R::zero(); ch];
    // adjoint of h_t, carried backwards
    let mut gh = vec![R::zero(); ch * s_dim];
    for t in (0..steps).rev() {
        let cur = &states[t * ch * s_dim..(t + 1) * ch * s_dim];
        let prev = if t == 0 {
            None
        } else {
            Some(&states[(t - 1) * ch * s_dim..t * ch * s_dim])
        };
        for c_i in 0..ch {
            let dt = ds[t * ch + c_i];
            let u = vs[t * ch + c_i];
            let g_out = gy[t * ch + c_i];
            let mut g_dt = R::zero();
            let mut g_u = g_out * ks[c_i];
            dk[c_i] += g_out * u;
            for n in 0..s_dim {
                let i = c_i * s_dim + n;
                let g = gh[i] + g_out * cs[t * s_dim + n];
                dc[t * s_dim + n] += g_out * cur[i];
                let ai = a_s[i];
                let decay = (dt * ai).exp();
                let hp = prev.map_or(R::zero(), |p| p[i]);
                let bn = bs[t * s_dim + n];
                g_dt += g * (ai * decay * hp + bn * u);
                da[i] += g * dt * decay * hp;
                db[t * s_dim + n] += g * dt * u;
                g_u += g * dt * bn;
                gh[i] = g * decay;
            }
            dd[t * ch + c_i] += g_dt;
            dv[t * ch + c_i] += g_u;
        }
    }
    [
        mat(steps, ch, dv),
        mat(steps, ch, dd),
        mat(ch, s_dim, da),
        mat(steps, s_dim, db),
        mat(steps, s_dim, dc),
        mat(1, ch, dk),
    ]
}

/// One direction of the decayed outer-product recurrence per head:
/// `S_t = a_t·S_{t-1} + v_t k_tᵀ` (a `P × S` matrix).  Readout is
/// `S_t q_t` (inclusive) or `S_{t-1} q_t` (strict).  With `reverse` the
/// recurrence runs from the last frame to the first.
///
/// Adds the readout into `y` and returns the state history in processing
/// order, `T × H × P × S`.
#[allow(clippy::too_many_arguments)]
fn outer_scan_forward<R: Real>(
    lay: HeadLayout,
    v: &[R],
    decay: &[R],
    key: &[R],
    query: &[R],
    reverse: bool,
    strict: bool,
    y: &mut [R],
) -> Vec<R> {
    let HeadLayout {
        steps,
        heads,
        value_dim: p_dim,
        state_dim: s_dim,
    } = lay;
    let sl = lay.state_len();
    let vw = heads * p_dim;
    let kw = heads * s_dim;
    let mut states = vec![R::zero(); steps * heads * sl];
    let mut cur = vec![R::zero(); heads * sl];
    for step in 0..steps {
        let t = if reverse { steps - 1 - step } else { step };
        for h in 0..heads {
            let st = &mut cur[h * sl..(h + 1) * sl];
            let a = decay[t * heads + h];
            let k = &key[t * kw + h * s_dim..t * kw + (h + 1) * s_dim];
            let q = &query[t * kw + h * s_dim..t * kw + (h + 1) * s_dim];
            for p in 0..p_dim {
                let row = &mut st[p * s_dim..(p + 1) * s_dim];
                let vp = v[t * vw + h * p_dim + p];
                let mut acc = R::zero();
                if strict {
                    for n in 0..s_dim {
                        acc += row[n] * q[n];
                        row[n] = a * row[n] + vp * k[n];
                    }
                } else {
                    for n in 0..s_dim {
                        row[n] = a * row[n] + vp * k[n];
                        acc += row[n] * q[n];
                    }
                }
                y[t * vw + h * p_dim + p] += acc;
            }
        }
        states[step * heads * sl..(step + 1) * heads * sl].copy_from_slice(&cur);
    }
    states
}

/// Adjoint of [`outer_scan_forward`]; accumulates into the gradient buffers.
#[allow(clippy::too_many_arguments)]
fn outer_scan_backward<R: Real>(
    lay: HeadLayout,
    v: &[R],
    decay: &[R],
    key: &[R],
    query: &[R],
    reverse: bool,
    strict: bool,
    states: &[R],
    dy: &[R],
    grads: &mut [Vec<R>; 4],
) {
    let HeadLayout {
        steps,
        heads,
        value_dim: p_dim,
        state_dim: s_dim,
    } = lay;
    let sl = lay.state_len();
    let vw = heads * p_dim;
    let kw = heads * s_dim;
    let [dv, da, dk, dq] = grads;
    let mut gs = vec![R::zero(); heads * sl];
    for step in (0..steps).rev() {
        let t = if reverse { steps - 1 - step } else { step };
        let cur = &states[step * heads * sl..(step + 1) * heads * sl];
        let prev = if step == 0 {
            None
        } else {
            Some(&states[(step - 1) * heads * sl..step * heads * sl])
        };
        for h in 0..heads {
            let g = &mut gs[h * sl..(h + 1) * sl];
            let s_cur = &cur[h * sl..(h + 1) * sl];
            let s_prev = prev.map(|p| &p[h * sl..(h + 1) * sl]);
            let a = decay[t * heads + h];
            let ko = t * kw + h * s_dim;
            let vo = t * vw + h * p_dim;
            if !strict {
                // readout from S_t
                for p in 0..p_dim {
                    let gyp = dy[vo + p];
                    for n in 0..s_dim {
                        g[p * s_dim + n] += gyp * query[ko + n];
                        dq[ko + n] += gyp * s_cur[p * s_dim + n];
                    }
                }
            }
            let mut g_a = R::zero();
            for p in 0..p_dim {
                let vp = v[vo + p];
                let mut g_v = R::zero();
                for n in 0..s_dim {
                    let gi = g[p * s_dim + n];
                    if let Some(sp) = s_prev {
                        g_a += gi * sp[p * s_dim + n];
                    }
                    g_v += gi * key[ko + n];
                    dk[ko + n] += gi * vp;
                }
                dv[vo + p] += g_v;
            }
            da[t * heads + h] += g_a;
            for gi in g.iter_mut() {
                *gi *= a;
            }
            if strict {
                // readout from S_{t-1}
                for p in 0..p_dim {
                    let gyp = dy[vo + p];
                    for n in 0..s_dim {
                        g[p * s_dim + n] += gyp * query[ko + n];
                        if let Some(sp) = s_prev {
                            dq[ko + n] += gyp * sp[p * s_dim + n];
                        }
                    }
                }
            }
        }
    }
}

/// Mamba2-style headed scan:
/// `S_t = a_t·S_{t-1} + v_t k_tᵀ`, `y_t = S_t q_t + d_h·v_t`.
///
/// Shapes: `v: T × H·P`, `decay: T × H`, `key, query: T × H·S`, `skip: 1 × H`.
pub fn headed_scan<R: Real>(
    lay: HeadLayout,
    v: &Array2<R>,
    decay: &Array2<R>,
    key: &Array2<R>,
    query: &Array2<R>,
    skip: &Array2<R>,
) -> Result<(Array2<R>, Vec<R>)> {
    lay.check("headed_scan query", query, lay.heads * lay.state_dim)?;
    if skip.dim() != (1, lay.heads) {
        return Err(Error::shape("headed_scan", format!("skip {:?}", skip.dim())));
    }
    for (name, m) in [("v", v), ("decay", decay), ("key", key), ("query", query), ("skip", skip)] {
        ensure_finite(name, m)?;
    }
    let vw = lay.heads * lay.value_dim;
    let mut y = vec![R::zero(); lay.steps * vw];
    let states = outer_scan_forward(
        lay,
        slice(v),
        slice(decay),
        slice(key),
        slice(query),
        false,
        false,
        &mut y,
    );
    let (vs, ks) = (slice(v), slice(skip));
    for t in 0..lay.steps {
        for h in 0..lay.heads {
            for p in 0..lay.value_dim {
                let i = t * vw + h * lay.value_dim + p;
                y[i] += ks[h] * vs[i];
            }
        }
    }
    Ok((mat(lay.steps, vw, y), states))
}

/// Adjoint of [`headed_scan`]; returns gradients for `[v, decay, key, query, skip]`.
#[allow(clippy::too_many_arguments)]
pub fn headed_scan_backward<R: Real>(
    lay: HeadLayout,
    v: &Array2<R>,
    decay: &Array2<R>,
    key: &Array2<R>,
    query: &Array2<R>,
    skip: &Array2<R>,
    states: &[R],
    dy: &Array2<R>,
) -> [Array2<R>; 5] {
    let dy = dy.as_standard_layout();
    let gy = dy.as_slice().expect("standard layout");
    let vw = lay.heads * lay.value_dim;
    let kw = lay.heads * lay.state_dim;
    let mut grads = [
        vec![R::zero(); lay.steps * vw],
        vec![R::zero(); lay.steps * lay.heads],
        vec![R::zero(); lay.steps * kw],
        vec![R::zero(); lay.steps * kw],
    ];
    outer_scan_backward(
        lay,
        slice(v),
        slice(decay),
        slice(key),
        slice(query),
        false,
        false,
        states,
        gy,
        &mut grads,
    );
    let (vs, ks) = (slice(v), slice(skip));
    let mut dskip = vec![R::zero(); lay.heads];
    for t in 0..lay.steps {
        for h in 0..lay.heads {
            for p in 0..lay.value_dim {
                let i = t * vw + h * lay.value_dim + p;
                grads[0][i] += gy[i] * ks[h];
                dskip[h] += gy[i] * vs[i];
            }
        }
    }
    let [dv, da, dk, dq] = grads;
    [
        mat(lay.steps, vw, dv),
        mat(lay.steps, lay.heads, da),
        mat(lay.steps, kw, dk),
        mat(lay.steps, kw, dq),
        mat(1, lay.heads, dskip),
    ]
}

/// Hydra-style bidirectional scan with a quasiseparable mixing matrix:
///
/// `y_t = F_{t-1} q_t + R_{t+1} q_t + δ_{t,h}·v_t` where
/// `F_t = a_t F_{t-1} + v_t k_tᵀ` runs forwards and
/// `R_t = a_t R_{t+1} + v_t k_tᵀ` runs backwards.
///
/// Shapes as [`headed_scan`], with `diag: T × H`.  Returns the output and
/// both state histories.
pub fn quasiseparable_scan<R: Real>(
    lay: HeadLayout,
    v: &Array2<R>,
    decay: &Array2<R>,
    key: &Array2<R>,
    query: &Array2<R>,
    diag: &Array2<R>,
) -> Result<(Array2<R>, Vec<R>, Vec<R>)> {
    lay.check("quasiseparable query", query, lay.heads * lay.state_dim)?;
    lay.check("quasiseparable diag", diag, lay.heads)?;
    for (name, m) in [("v", v), ("decay", decay), ("key", key), ("query", query), ("diag", diag)] {
        ensure_finite(name, m)?;
    }
    let vw = lay.heads * lay.value_dim;
    let (vs, ds, ks, qs, dg) = (slice(v), slice(decay), slice(key), slice(query), slice(diag));
    let mut y_fwd = vec![R::zero(); lay.steps * vw];
    let mut y_bwd = vec![R::zero(); lay.steps * vw];
    let fwd = outer_scan_forward(lay, vs, ds, ks, qs, false, true, &mut y_fwd);
    let bwd = outer_scan_forward(lay, vs, ds, ks, qs, true, true, &mut y_bwd);
    let mut y = vec![R::zero(); lay.steps * vw];
    for t in 0..lay.steps {
        for h in 0..lay.heads {
            let d = dg[t * lay.heads + h];
            for p in 0..lay.value_dim {
                let i = t * vw + h * lay.value_dim + p;
                y[i] = (y_fwd[i] + y_bwd[i]) + d * vs[i];
            }
        }
    }
    Ok((mat(lay.steps, vw, y), fwd, bwd))
}

/// Adjoint of [`quasiseparable_scan`]; returns gradients for
/// `[v, decay, key, query, diag]`.
#[allow(clippy::too_many_arguments)]
pub fn quasiseparable_scan_backward<R: Real>(
    lay: HeadLayout,
    v: &Array2<R>,
    decay: &Array2<R>,
    key: &Array2<R>,
    query: &Array2<R>,
    diag: &Array2<R>,
    fwd: &[R],
    bwd: &[R],
    dy: &Array2<R>,
) -> [Array2<R>; 5] {
    let dy = dy.as_standard_layout();
    let gy = dy.as_slice().expect("standard layout");
    let vw = lay.heads * lay.value_dim;
    let kw = lay.heads * lay.state_dim;
    let (vs, ds, ks, qs, dg) = (slice(v), slice(decay), slice(key), slice(query), slice(diag));
    let mut grads = [
        vec![R::zero(); lay.steps * vw],
        vec![R::zero(); lay.steps * lay.heads],
        vec![R::zero(); lay.steps * kw],
        vec![R::zero(); lay.steps * kw],
    ];
    outer_scan_backward(lay, vs, ds, ks, qs, false, true, fwd, gy, &mut grads);
    outer_scan_backward(lay, vs, ds, ks, qs, true, true, bwd, gy, &mut grads);
    let mut ddiag = vec![R::zero(); lay.steps * lay.heads];
    for t in 0..lay.steps {
        for h in 0..lay.heads {
            let d = dg[t * lay.heads + h];
            for p in 0..lay.value_dim {
                let i = t * vw + h * lay.value_dim + p;
                grads[0][i] += gy[i] * d;
                ddiag[t * lay.heads + h] += gy[i] * vs[i];
            }
        }
    }
    let [dv, da, dk, dq] = grads;
    [
        mat(lay.steps, vw, dv),
        mat(lay.steps, lay.heads, da),
        mat(lay.steps, kw, dk),
        mat(lay.steps, kw, dq),
        mat(lay.steps, lay.heads, ddiag),
    ]
}

/// Gated delta rule per head:
///
/// `S_t = S_{t-1}·α_t(I − β_t k_t k_tᵀ) + β_t v_t k_tᵀ`, `y_t = S_t q_t`.
///
/// Shapes: `v: T × H·P`, `decay, beta: T × H`, `key, query: T × H·S`.
pub fn delta_rule_scan<R: Real>(
    lay: HeadLayout,
    v: &Array2<R>,
    decay: &Array2<R>,
    beta: &Array2<R>,
    key: &Array2<R>,
    query: &Array2<R>,
) -> Result<(Array2<R>, Vec<R>)> {
    lay.check("delta_rule beta", beta, lay.heads)?;
    lay.check("delta_rule query", query, lay.heads * lay.state_dim)?;
    for (name, m) in [("v", v), ("decay", decay), ("beta", beta), ("key", key), ("query", query)] {
        ensure_finite(name, m)?;
    }
    let HeadLayout {
        steps,
        heads,
        value_dim: p_dim,
        state_dim: s_dim,
    } = lay;
    let sl = lay.state_len();
    let vw = heads * p_dim;
    let kw = heads * s_dim;
    let (vs, als, bes, ks, qs) = (slice(v), slice(decay), slice(beta), slice(key), slice(query));
    let mut states = vec![R::zero(); steps * heads * sl];
    let mut cur = vec![R::zero(); heads * sl];
    let mut y = vec![R::zero(); steps * vw];
    for t in 0..steps {
        for h in 0..heads {
            let st = &mut cur[h * sl..(h + 1) * sl];
            let alpha = als[t * heads + h];
            let beta = bes[t * heads + h];
            let k = &ks[t * kw + h * s_dim..t * kw + (h + 1) * s_dim];
            let q = &qs[t * kw + h * s_dim..t * kw + (h + 1) * s_dim];
            for p in 0..p_dim {
                let row = &mut st[p * s_dim..(p + 1) * s_dim];
                let u: R = row.iter().zip(k).map(|(&s, &kn)| s * kn).sum();
                let w = beta * (vs[t * vw + h * p_dim + p] - alpha * u);
                let mut acc = R::zero();
                for n in 0..s_dim {
                    row[n] = alpha * row[n] + w * k[n];
                    acc += row[n] * q[n];
                }
                y[t * vw + h * p_dim + p] = acc;
            }
        }
        states[t * heads * sl..(t + 1) * heads * sl].copy_from_slice(&cur);
    }
    Ok((mat(steps, vw, y), states))
}

/// Adjoint of [`delta_rule_scan`]; returns gradients for
/// `[v, decay, beta, key, query]`.
#[allow(clippy::too_many_arguments)]
pub fn delta_rule_scan_backward<R: Real>(
    lay: HeadLayout,
    v: &Array2<R>,
    decay: &Array2<R>,
    beta: &Array2<R>,
    key: &Array2<R>,
    query: &Array2<R>,
    states: &[R],
    dy: &Array2<R>,
) -> [Array2<R>; 5] {
    let HeadLayout {
        steps,
        heads,
        value_dim: p_dim,
        state_dim: s_dim,
    } = lay;
    let sl = lay.state_len();
    let vw = heads * p_dim;
    let kw = heads * s_dim;
    let dy = dy.as_standard_layout();
    let gy = dy.as_slice().expect("standard layout");
    let (vs, als, bes, ks, qs) = (slice(v), slice(decay), slice(beta), slice(key), slice(query));
    let mut dv = vec![R::zero(); steps * vw];
    let mut dal = vec![R::zero(); steps * heads];
    let mut dbe = vec![R::zero(); steps * heads];
    let mut dk = vec![R::zero(); steps * kw];
    let mut dq = vec![R::zero(); steps * kw];
    let mut gs = vec![R::zero(); heads * sl];
    let mut gk = vec![R::zero(); p_dim];
    let mut u = vec![R::zero(); p_dim];
    for t in (0..steps).rev() {
        for h in 0..heads {
            let g = &mut gs[h * sl..(h + 1) * sl];
            let s_cur = &states[t * heads * sl + h * sl..t * heads * sl + (h + 1) * sl];
            let s_prev = if t == 0 {
                None
            } else {
                Some(&states[(t - 1) * heads * sl + h * sl..(t - 1) * heads * sl + (h + 1) * sl])
            };
            let alpha = als[t * heads + h];
            let bt = bes[t * heads + h];
            let ko = t * kw + h * s_dim;
            let vo = t * vw + h * p_dim;
            let k = &ks[ko..ko + s_dim];
            let q = &qs[ko..ko + s_dim];

            for p in 0..p_dim {
                let gyp = gy[vo + p];
                for n in 0..s_dim {
                    g[p * s_dim + n] += gyp * q[n];
                    dq[ko + n] += gyp * s_cur[p * s_dim + n];
                }
            }

            let mut g_alpha = R::zero();
            let mut g_beta = R::zero();
            for p in 0..p_dim {
                let row_g = &g[p * s_dim..(p + 1) * s_dim];
                gk[p] = row_g.iter().zip(k).map(|(&a, &b)| a * b).sum();
                u[p] = match s_prev {
                    Some(sp) => sp[p * s_dim..(p + 1) * s_dim]
                        .iter()
                        .zip(k)
                        .map(|(&a, &b)| a * b)
                        .sum(),
                    None => R::zero(),
                };
                if let Some(sp) = s_prev {
                    g_alpha += row_g
                        .iter()
                        .zip(&sp[p * s_dim..(p + 1) * s_dim])
                        .map(|(&a, &b)| a * b)
                        .sum::<R>();
                }
                g_alpha -= bt * u[p] * gk[p];
                g_beta += (vs[vo + p] - alpha * u[p]) * gk[p];
                dv[vo + p] += bt * gk[p];
            }
            dal[t * heads + h] += g_alpha;
            dbe[t * heads + h] += g_beta;

            // dk = Gᵀ·β(v − αu) + S_prevᵀ·du with du = −αβ·Gk
            for p in 0..p_dim {
                let w = bt * (vs[vo + p] - alpha * u[p]);
                let du = -alpha * bt * gk[p];
                for n in 0..s_dim {
                    let mut acc = g[p * s_dim + n] * w;
                    if let Some(sp) = s_prev {
                        acc += sp[p * s_dim + n] * du;
                    }
                    dk[ko + n] += acc;
                }
            }
            // G_{t-1} = α·G + du·kᵀ
            for p in 0..p_dim {
                let du = -alpha * bt * gk[p];
                for n in 0..s_dim {
                    let i = p * s_dim + n;
                    g[i] = alpha * g[i] + du * k[n];
                }
            }
        }
    }
    [
        mat(steps, vw, dv),
        mat(steps, heads, dal),
        mat(steps, heads, dbe),
        mat(steps, kw, dk),
        mat(steps, kw, dq),
    ]
}
