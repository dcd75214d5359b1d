//! Fused numeric kernels behind the graph operations.

use serde::{Deserialize, Serialize};

/// Relational function combining a query channel with a key channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Subtraction,
    Summation,
    Hadamard,
}

impl Relation {
    #[inline]
    pub fn apply(self, q: f64, k: f64) -> f64 {
        match self {
            Relation::Subtraction => q - k,
            Relation::Summation => q + k,
            Relation::Hadamard => q * k,
        }
    }
}

/// `c = a * b + beta * c` for row-major `c [m, n]`; `a`/`b` strides given as (row, col).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: bounds on all three buffers are asserted above and the strides
    // describe dense row-major or transposed views of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Returns the `[n, d]` output and the `[n, kk, d]` attention weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn vector_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    pos: Option<&[f64]>,
    idx: &[usize],
    n: usize,
    kk: usize,
    d: usize,
    rel: Relation,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * d];
    let mut weights = vec![0.0; n * kk * d];
    let mut max = vec![0.0; d];
    let mut sum = vec![0.0; d];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let w = &mut weights[i * kk * d..(i + 1) * kk * d];
        max.fill(f64::NEG_INFINITY);
        for j in 0..kk {
            let r = idx[i * kk + j];
            let kr = &k[r * d..(r + 1) * d];
            let wj = &mut w[j * d..(j + 1) * d];
            for c in 0..d {
                wj[c] = rel.apply(qi[c], kr[c]);
            }
            if let Some(p) = pos {
                let pj = &p[(i * kk + j) * d..(i * kk + j + 1) * d];
                wj.iter_mut().zip(pj).for_each(|(a, b)| *a += b);
            }
            for c in 0..d {
                wj[c] *= scale;
                max[c] = max[c].max(wj[c]);
            }
        }
        sum.fill(0.0);
        for wj in w.chunks_exact_mut(d) {
            for c in 0..d {
                wj[c] = (wj[c] - max[c]).exp();
                sum[c] += wj[c];
            }
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, wj) in w.chunks_exact_mut(d).enumerate() {
            let r = idx[i * kk + j];
            let vr = &v[r * d..(r + 1) * d];
            for c in 0..d {
                wj[c] /= sum[c];
                oi[c] += wj[c] * vr[c];
            }
            if let Some(p) = pos {
                let pj = &p[(i * kk + j) * d..(i * kk + j + 1) * d];
                for c in 0..d {
                    oi[c] += wj[c] * pj[c];
                }
            }
        }
    }
    (out, weights)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn vector_attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    pos: Option<&[f64]>,
    weights: &[f64],
    idx: &[usize],
    n: usize,
    kk: usize,
    d: usize,
    rel: Relation,
    scale: f64,
    gq: &mut [f64],
    gk: &mut [f64],
    gv: &mut [f64],
    mut gp: Option<&mut [f64]>,
) {
    let mut ga = vec![0.0; kk * d];
    let mut s = vec![0.0; d];
    for i in 0..n {
        let go = &g[i * d..(i + 1) * d];
        let w = &weights[i * kk * d..(i + 1) * kk * d];
        s.fill(0.0);
        for j in 0..kk {
            let r = idx[i * kk + j];
            let vr = &v[r * d..(r + 1) * d];
            let gaj = &mut ga[j * d..(j + 1) * d];
            let wj = &w[j * d..(j + 1) * d];
            for c in 0..d {
                let mut val = vr[c];
                if let Some(p) = pos {
                    val += p[(i * kk + j) * d + c];
                }
                gaj[c] = go[c] * val;
                s[c] += wj[c] * gaj[c];
            }
            let gvr = &mut gv[r * d..(r + 1) * d];
            for c in 0..d {
                gvr[c] += wj[c] * go[c];
            }
        }
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..kk {
            let r = idx[i * kk + j];
            let wj = &w[j * d..(j + 1) * d];
            let gaj = &ga[j * d..(j + 1) * d];
            let kr = &k[r * d..(r + 1) * d];
            for c in 0..d {
                let gb = wj[c] * (gaj[c] - s[c]) * scale;
                match rel {
                    Relation::Subtraction => {
                        gq[i * d + c] += gb;
                        gk[r * d + c] -= gb;
                    }
                    Relation::Summation => {
                        gq[i * d + c] += gb;
                        gk[r * d + c] += gb;
                    }
                    Relation::Hadamard => {
                        gq[i * d + c] += gb * kr[c];
                        gk[r * d + c] += gb * qi[c];
                    }
                }
                if let Some(gp) = gp.as_deref_mut() {
                    gp[(i * kk + j) * d + c] += gb + wj[c] * go[c];
                }
            }
        }
    }
}

/// Returns the `[n, dv]` output and the `[n, kk]` attention weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scalar_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    idx: &[usize],
    n: usize,
    kk: usize,
    dq: usize,
    dv: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * dv];
    let mut weights = vec![0.0; n * kk];
    for i in 0..n {
        let qi = &q[i * dq..(i + 1) * dq];
        let w = &mut weights[i * kk..(i + 1) * kk];
        for (j, wj) in w.iter_mut().enumerate() {
            let r = idx[i * kk + j];
            let kr = &k[r * dq..(r + 1) * dq];
            *wj = scale * qi.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(w);
        let oi = &mut out[i * dv..(i + 1) * dv];
        for (j, &wj) in w.iter().enumerate() {
            let r = idx[i * kk + j];
            for (o, x) in oi.iter_mut().zip(&v[r * dv..(r + 1) * dv]) {
                *o += wj * x;
            }
        }
    }
    (out, weights)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scalar_attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    idx: &[usize],
    n: usize,
    kk: usize,
    dq: usize,
    dv: usize,
    scale: f64,
    gq: &mut [f64],
    gk: &mut [f64],
    gv: &mut [f64],
) {
    let mut gw = vec![0.0; kk];
    for i in 0..n {
        let go = &g[i * dv..(i + 1) * dv];
        let w = &weights[i * kk..(i + 1) * kk];
        let mut s = 0.0;
        for j in 0..kk {
            let r = idx[i * kk + j];
            let vr = &v[r * dv..(r + 1) * dv];
            gw[j] = go.iter().zip(vr).map(|(a, b)| a * b).sum();
            s += w[j] * gw[j];
            for (gvc, goc) in gv[r * dv..(r + 1) * dv].iter_mut().zip(go) {
                *gvc += w[j] * goc;
            }
        }
        let qi = &q[i * dq..(i + 1) * dq];
        for j in 0..kk {
            let r = idx[i * kk + j];
            let gl = w[j] * (gw[j] - s) * scale;
            let kr = &k[r * dq..(r + 1) * dq];
            for c in 0..dq {
                gq[i * dq + c] += gl * kr[c];
                gk[r * dq + c] += gl * qi[c];
            }
        }
    }
}
