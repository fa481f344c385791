//! Fused attention kernels: multi-head attention and clipped single-head scores.
//!
//! Queries `q` index into key/value rows through `kv_row`, so many queries
//! (trajectories) can share one set of encoder keys without copying them.
//! Backward passes accumulate key/value gradients per key row, visiting the
//! queries of a row in index order, which keeps results deterministic under
//! parallel execution.

use crate::parallel;

use super::real::Real;

/// Query indices grouped by the key row they attend to.
pub(crate) fn group_by_row(kv_row: &[usize], rows: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); rows];
    for (qi, &r) in kv_row.iter().enumerate() {
        groups[r].push(qi);
    }
    groups
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MhaDims {
    pub queries: usize,
    pub lq: usize,
    pub rows: usize,
    pub l: usize,
    pub d: usize,
    pub heads: usize,
}

impl MhaDims {
    fn dk(&self) -> usize {
        self.d / self.heads
    }
}

/// Returns the concatenated head outputs `[Q, Lq, d]` and attention weights `[Q, H, Lq, L]`.
pub(crate) fn mha_forward<F: Real>(
    dims: MhaDims,
    q: &[F],
    k: &[F],
    v: &[F],
    kv_row: &[usize],
    mask: Option<&[bool]>,
) -> (Vec<F>, Vec<F>) {
    let MhaDims { queries, lq, l, d, heads, .. } = dims;
    let dk = dims.dk();
    let scale = F::one() / F::c(dk as f64).sqrt();
    let mut out = vec![F::zero(); queries * lq * d];
    let mut attn = vec![F::zero(); queries * heads * lq * l];
    if queries == 0 {
        return (out, attn);
    }
    parallel::for_each_chunk_mut2(&mut out, lq * d, &mut attn, heads * lq * l, |qi, out, attn| {
        let r = kv_row[qi];
        let kr = &k[r * l * d..(r + 1) * l * d];
        let vr = &v[r * l * d..(r + 1) * l * d];
        let m = mask.map(|m| &m[qi * l..(qi + 1) * l]);
        let qq = &q[qi * lq * d..(qi + 1) * lq * d];
        for h in 0..heads {
            let off = h * dk;
            for i in 0..lq {
                let qv = &qq[i * d + off..i * d + off + dk];
                let a = &mut attn[(h * lq + i) * l..(h * lq + i + 1) * l];
                let mut max = F::neg_infinity();
                for j in 0..l {
                    if m.is_some_and(|m| m[j]) {
                        a[j] = F::neg_infinity();
                        continue;
                    }
                    let kv = &kr[j * d + off..j * d + off + dk];
                    let mut s = F::zero();
                    for c in 0..dk {
                        s += qv[c] * kv[c];
                    }
                    a[j] = s * scale;
                    if a[j] > max {
                        max = a[j];
                    }
                }
                if max == F::neg_infinity() {
                    a.fill(F::zero());
                    continue;
                }
                let mut sum = F::zero();
                for x in a.iter_mut() {
                    *x = if *x == F::neg_infinity() { F::zero() } else { (*x - max).exp() };
                    sum += *x;
                }
                for x in a.iter_mut() {
                    *x /= sum;
                }
                let o = &mut out[i * d + off..i * d + off + dk];
                for j in 0..l {
                    let w = a[j];
                    if w == F::zero() {
                        continue;
                    }
                    let vv = &vr[j * d + off..j * d + off + dk];
                    for c in 0..dk {
                        o[c] += w * vv[c];
                    }
                }
            }
        }
    });
    (out, attn)
}

/// Gradients `(dq, dk, dv)` of the fused attention.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_backward<F: Real>(
    dims: MhaDims,
    q: &[F],
    k: &[F],
    v: &[F],
    kv_row: &[usize],
    attn: &[F],
    g: &[F],
    need_q: bool,
    need_kv: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let MhaDims { queries, lq, rows, l, d, heads } = dims;
    let dk = dims.dk();
    let scale = F::one() / F::c(dk as f64).sqrt();
    let ahl = heads * lq * l;

    // score gradients and dq, per query
    let mut ds = vec![F::zero(); queries * ahl];
    let mut dq = vec![F::zero(); queries * lq * d];
    if queries > 0 {
        parallel::for_each_chunk_mut2(&mut ds, ahl, &mut dq, lq * d, |qi, ds, dq| {
            let r = kv_row[qi];
            let kr = &k[r * l * d..(r + 1) * l * d];
            let vr = &v[r * l * d..(r + 1) * l * d];
            let gq = &g[qi * lq * d..(qi + 1) * lq * d];
            let aq = &attn[qi * ahl..(qi + 1) * ahl];
            for h in 0..heads {
                let off = h * dk;
                for i in 0..lq {
                    let base = (h * lq + i) * l;
                    let a = &aq[base..base + l];
                    let gv = &gq[i * d + off..i * d + off + dk];
                    let dsr = &mut ds[base..base + l];
                    let mut s = F::zero();
                    for j in 0..l {
                        if a[j] == F::zero() {
                            continue;
                        }
                        let vv = &vr[j * d + off..j * d + off + dk];
                        let mut da = F::zero();
                        for c in 0..dk {
                            da += gv[c] * vv[c];
                        }
                        dsr[j] = da;
                        s += a[j] * da;
                    }
                    for j in 0..l {
                        dsr[j] = a[j] * (dsr[j] - s);
                    }
                    if need_q {
                        let dqv = &mut dq[i * d + off..i * d + off + dk];
                        for j in 0..l {
                            if dsr[j] == F::zero() {
                                continue;
                            }
                            let kv = &kr[j * d + off..j * d + off + dk];
                            let w = dsr[j] * scale;
                            for c in 0..dk {
                                dqv[c] += w * kv[c];
                            }
                        }
                    }
                }
            }
        });
    }

    let (dkk, dvv) = if need_kv {
        let groups = group_by_row(kv_row, rows);
        let mut dk_all = vec![F::zero(); rows * l * d];
        let mut dv_all = vec![F::zero(); rows * l * d];
        parallel::for_each_chunk_mut2(&mut dk_all, l * d, &mut dv_all, l * d, |r, dkr, dvr| {
            for &qi in &groups[r] {
                let qq = &q[qi * lq * d..(qi + 1) * lq * d];
                let gq = &g[qi * lq * d..(qi + 1) * lq * d];
                let aq = &attn[qi * ahl..(qi + 1) * ahl];
                let dsq = &ds[qi * ahl..(qi + 1) * ahl];
                for h in 0..heads {
                    let off = h * dk;
                    for i in 0..lq {
                        let base = (h * lq + i) * l;
                        let qv = &qq[i * d + off..i * d + off + dk];
                        let gv = &gq[i * d + off..i * d + off + dk];
                        for j in 0..l {
                            let a = aq[base + j];
                            if a == F::zero() {
                                continue;
                            }
                            let w = dsq[base + j] * scale;
                            let kd = &mut dkr[j * d + off..j * d + off + dk];
                            for c in 0..dk {
                                kd[c] += w * qv[c];
                            }
                            let vd = &mut dvr[j * d + off..j * d + off + dk];
                            for c in 0..dk {
                                vd[c] += a * gv[c];
                            }
                        }
                    }
                }
            }
        });
        (Some(dk_all), Some(dv_all))
    } else {
        (None, None)
    };
    (need_q.then_some(dq), dkk, dvv)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScoreDims {
    pub queries: usize,
    pub rows: usize,
    pub l: usize,
    pub d: usize,
}

/// `C·tanh(q·k/√d)` per key, `-inf` where masked. Returns `(scores, tanh values)`.
pub(crate) fn clipped_score_forward<F: Real>(
    dims: ScoreDims,
    q: &[F],
    k: &[F],
    kv_row: &[usize],
    mask: Option<&[bool]>,
    clip: F,
) -> (Vec<F>, Vec<F>) {
    let ScoreDims { queries, l, d, .. } = dims;
    let scale = F::one() / F::c(d as f64).sqrt();
    let mut out = vec![F::zero(); queries * l];
    let mut th = vec![F::zero(); queries * l];
    if queries == 0 {
        return (out, th);
    }
    parallel::for_each_chunk_mut2(&mut out, l, &mut th, l, |qi, out, th| {
        let r = kv_row[qi];
        let qv = &q[qi * d..(qi + 1) * d];
        for j in 0..l {
            if mask.is_some_and(|m| m[qi * l + j]) {
                out[j] = F::neg_infinity();
                continue;
            }
            let kv = &k[(r * l + j) * d..(r * l + j + 1) * d];
            let mut s = F::zero();
            for c in 0..d {
                s += qv[c] * kv[c];
            }
            let t = (s * scale).tanh();
            th[j] = t;
            out[j] = clip * t;
        }
    });
    (out, th)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn clipped_score_backward<F: Real>(
    dims: ScoreDims,
    q: &[F],
    k: &[F],
    kv_row: &[usize],
    mask: Option<&[bool]>,
    th: &[F],
    clip: F,
    g: &[F],
    need_q: bool,
    need_k: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let ScoreDims { queries, rows, l, d } = dims;
    let scale = F::one() / F::c(d as f64).sqrt();
    let ds: Vec<F> = (0..queries * l)
        .map(|idx| {
            if mask.is_some_and(|m| m[idx]) {
                F::zero()
            } else {
                g[idx] * clip * (F::one() - th[idx] * th[idx]) * scale
            }
        })
        .collect();
    let dq = need_q.then(|| {
        let mut dq = vec![F::zero(); queries * d];
        if queries > 0 {
            parallel::for_each_chunk_mut(&mut dq, d, |qi, dqv| {
                let r = kv_row[qi];
                for j in 0..l {
                    let w = ds[qi * l + j];
                    if w == F::zero() {
                        continue;
                    }
                    let kv = &k[(r * l + j) * d..(r * l + j + 1) * d];
                    for c in 0..d {
                        dqv[c] += w * kv[c];
                    }
                }
            });
        }
        dq
    });
    let dk = need_k.then(|| {
        let groups = group_by_row(kv_row, rows);
        let mut dk = vec![F::zero(); rows * l * d];
        parallel::for_each_chunk_mut(&mut dk, l * d, |r, dkr| {
            for &qi in &groups[r] {
                let qv = &q[qi * d..(qi + 1) * d];
                for j in 0..l {
                    let w = ds[qi * l + j];
                    if w == F::zero() {
                        continue;
                    }
                    let kd = &mut dkr[j * d..(j + 1) * d];
                    for c in 0..d {
                        kd[c] += w * qv[c];
                    }
                }
            }
        });
        dk
    });
    (dq, dk)
}
