//! Normalization kernels over `[R, L, d]` inputs.

use super::real::Real;

pub const NORM_EPS: f64 = 1e-5;

/// Which elements share statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormGroups {
    /// Per instance and channel, over the `L` nodes.
    Instance,
    /// Per channel, over all `R·L` positions.
    Batch,
}

pub(crate) struct NormForward<F> {
    pub out: Vec<F>,
    pub xhat: Vec<F>,
    /// `[R, d]` for instance groups, `[d]` for batch groups.
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub(crate) fn norm_forward<F: Real>(
    groups: NormGroups,
    x: &[F],
    gamma: &[F],
    beta: &[F],
    r: usize,
    l: usize,
    d: usize,
    fixed: Option<(&[F], &[F])>,
) -> NormForward<F> {
    let eps = F::c(NORM_EPS);
    let (mean, var) = match fixed {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let (sets, per) = match groups {
                NormGroups::Instance => (r, l),
                NormGroups::Batch => (1, r * l),
            };
            let mut mean = vec![F::zero(); sets * d];
            let mut var = vec![F::zero(); sets * d];
            let nf = F::c(per as f64);
            for s in 0..sets {
                let block = &x[s * per * d..(s + 1) * per * d];
                let m = &mut mean[s * d..(s + 1) * d];
                for p in 0..per {
                    for c in 0..d {
                        m[c] += block[p * d + c];
                    }
                }
                for mc in m.iter_mut() {
                    *mc /= nf;
                }
                let vv = &mut var[s * d..(s + 1) * d];
                for p in 0..per {
                    for c in 0..d {
                        let t = block[p * d + c] - m[c];
                        vv[c] += t * t;
                    }
                }
                for vc in vv.iter_mut() {
                    *vc /= nf;
                }
            }
            (mean, var)
        }
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    for ri in 0..r {
        for li in 0..l {
            let base = (ri * l + li) * d;
            let s = if groups == NormGroups::Instance && fixed.is_none() { ri } else { 0 };
            for c in 0..d {
                let xh = (x[base + c] - mean[s * d + c]) * inv_std[s * d + c];
                xhat[base + c] = xh;
                out[base + c] = gamma[c] * xh + beta[c];
            }
        }
    }
    NormForward { out, xhat, inv_std, mean, var }
}

/// Returns `(dx, dgamma, dbeta)`. With `fixed` statistics the normalization is affine in `x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward<F: Real>(
    groups: NormGroups,
    fixed: bool,
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    g: &[F],
    r: usize,
    l: usize,
    d: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dgamma = vec![F::zero(); d];
    let mut dbeta = vec![F::zero(); d];
    for p in 0..r * l {
        for c in 0..d {
            dgamma[c] += g[p * d + c] * xhat[p * d + c];
            dbeta[c] += g[p * d + c];
        }
    }
    let mut dx = vec![F::zero(); g.len()];
    if fixed {
        for p in 0..r * l {
            for c in 0..d {
                dx[p * d + c] = g[p * d + c] * gamma[c] * inv_std[c];
            }
        }
        return (dx, dgamma, dbeta);
    }
    let (sets, per) = match groups {
        NormGroups::Instance => (r, l),
        NormGroups::Batch => (1, r * l),
    };
    let nf = F::c(per as f64);
    for s in 0..sets {
        let mut mg = vec![F::zero(); d];
        let mut mgx = vec![F::zero(); d];
        for p in s * per..(s + 1) * per {
            for c in 0..d {
                mg[c] += g[p * d + c];
                mgx[c] += g[p * d + c] * xhat[p * d + c];
            }
        }
        for c in 0..d {
            mg[c] /= nf;
            mgx[c] /= nf;
        }
        for p in s * per..(s + 1) * per {
            for c in 0..d {
                let i = p * d + c;
                dx[i] = gamma[c] * inv_std[s * d + c] * (g[i] - mg[c] - xhat[i] * mgx[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}
