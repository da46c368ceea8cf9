//! Dense mixing matrices for frozen coefficients.
//!
//! These are built entry by entry from the closed-form products, not by
//! running the recurrences, so they are an independent check on the scans.

use ndarray::{s, Array2};

use crate::{Error, Real, Result};

use super::StepCoefficients;

/// Returns one `T × T` matrix per channel (Mamba) or per head (others) such
/// that the scan output is `y = M·v` on that group's columns.
pub fn materialize_mixer_matrix<R: Real>(
    coeffs: &StepCoefficients<R>,
    steps: usize,
) -> Result<Vec<Array2<R>>> {
    if coeffs.steps() != steps {
        return Err(Error::shape(
            "materialize_mixer_matrix",
            format!("coefficients cover {} frames, asked for {steps}", coeffs.steps()),
        ));
    }
    let t_len = steps;
    let mats = match coeffs {
        StepCoefficients::Mamba {
            delta,
            a,
            b,
            c,
            skip,
        } => {
            let s_dim = a.ncols();
            (0..delta.ncols())
                .map(|ch| {
                    let mut m = Array2::zeros((t_len, t_len));
                    for t in 0..t_len {
                        for s in 0..=t {
                            let mut acc = R::zero();
                            for n in 0..s_dim {
                                let mut prod = R::one();
                                for r in s + 1..=t {
                                    prod *= (delta[[r, ch]] * a[[ch, n]]).exp();
                                }
                                acc += c[[t, n]] * prod * delta[[s, ch]] * b[[s, n]];
                            }
                            m[[t, s]] = acc;
                        }
                        m[[t, t]] += skip[[0, ch]];
                    }
                    m
                })
                .collect()
        }
        StepCoefficients::Mamba2 {
            decay,
            key,
            query,
            skip,
        } => {
            let heads = decay.ncols();
            let s_dim = key.ncols() / heads;
            (0..heads)
                .map(|h| {
                    let mut m = Array2::zeros((t_len, t_len));
                    for t in 0..t_len {
                        for s in 0..=t {
                            let prod = (s + 1..=t).fold(R::one(), |p, r| p * decay[[r, h]]);
                            m[[t, s]] = prod * head_dot(query, key, t, s, h, s_dim);
                        }
                        m[[t, t]] += skip[[0, h]];
                    }
                    m
                })
                .collect()
        }
        StepCoefficients::Hydra {
            decay,
            key,
            query,
            diag,
        } => {
            let heads = decay.ncols();
            let s_dim = key.ncols() / heads;
            (0..heads)
                .map(|h| {
                    let mut m = Array2::zeros((t_len, t_len));
                    for t in 0..t_len {
                        for s in 0..t_len {
                            m[[t, s]] = if s == t {
                                diag[[t, h]]
                            } else {
                                let (lo, hi) = if s < t { (s, t) } else { (t, s) };
                                // decays strictly between the two frames
                                let prod = (lo + 1..hi).fold(R::one(), |p, r| p * decay[[r, h]]);
                                prod * head_dot(query, key, t, s, h, s_dim)
                            };
                        }
                    }
                    m
                })
                .collect()
        }
        StepCoefficients::Gdn {
            decay,
            beta,
            key,
            query,
        } => {
            let heads = decay.ncols();
            let s_dim = key.ncols() / heads;
            (0..heads)
                .map(|h| {
                    let off = h * s_dim;
                    let mut m = Array2::zeros((t_len, t_len));
                    for s in 0..t_len {
                        // w = β_s k_sᵀ A_{s+1} ⋯ A_t, A_r = α_r (I − β_r k_r k_rᵀ)
                        let mut w: Vec<R> =
                            (0..s_dim).map(|n| key[[s, off + n]] * beta[[s, h]]).collect();
                        for t in s..t_len {
                            if t > s {
                                let (al, be) = (decay[[t, h]], beta[[t, h]]);
                                let wk: R = (0..s_dim).map(|n| w[n] * key[[t, off + n]]).sum();
                                for (n, wn) in w.iter_mut().enumerate() {
                                    *wn = al * (*wn - be * wk * key[[t, off + n]]);
                                }
                            }
                            m[[t, s]] = (0..s_dim).map(|n| w[n] * query[[t, off + n]]).sum();
                        }
                    }
                    m
                })
                .collect()
        }
    };
    Ok(mats)
}

fn head_dot<R: Real>(
    query: &Array2<R>,
    key: &Array2<R>,
    t: usize,
    s: usize,
    h: usize,
    s_dim: usize,
) -> R {
    (0..s_dim)
        .map(|n| query[[t, h * s_dim + n]] * key[[s, h * s_dim + n]])
        .sum()
}

/// Applies materialised matrices to the value stream `v`.
pub fn apply_mixer_matrix<R: Real>(mats: &[Array2<R>], v: &Array2<R>) -> Result<Array2<R>> {
    let groups = mats.len();
    if groups == 0 || v.ncols() % groups != 0 {
        return Err(Error::shape(
            "apply_mixer_matrix",
            format!("{} columns over {groups} groups", v.ncols()),
        ));
    }
    let width = v.ncols() / groups;
    let mut y = Array2::zeros(v.dim());
    for (g, m) in mats.iter().enumerate() {
        let cols = s![.., g * width..(g + 1) * width];
        y.slice_mut(cols).assign(&m.dot(&v.slice(cols)));
    }
    Ok(y)
}
