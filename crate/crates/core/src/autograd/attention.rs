//! Fused multi-head scaled dot-product attention with key masking.

use rayon::prelude::*;

use super::Mat;

/// Shape and masking of one attention call.
///
/// Queries are `batch·len_q × d`, keys and values `batch·len_k × d`, each batch
/// element occupying a contiguous block of rows. A query attends to key `j`
/// when `key_mask[b·len_k + j]` holds and, if `causal`, `j <= i`. A query with
/// no visible key produces a zero output row.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub len_q: usize,
    pub len_k: usize,
    pub heads: usize,
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

impl AttentionSpec {
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * self.len_k + j] && (!self.causal || j <= i)
    }
}

pub(super) fn forward(q: &Mat, k: &Mat, v: &Mat, spec: &AttentionSpec) -> (Mat, Vec<f64>) {
    let d = q.ncols();
    let AttentionSpec {
        batch,
        len_q,
        len_k,
        heads,
        ..
    } = *spec;
    assert_eq!(q.nrows(), batch * len_q, "attention: query rows");
    assert_eq!(k.nrows(), batch * len_k, "attention: key rows");
    assert_eq!(v.dim(), k.dim(), "attention: value shape");
    assert_eq!(spec.key_mask.len(), batch * len_k, "attention: key mask");
    assert_eq!(d % heads, 0, "attention: d not divisible by heads");
    if spec.causal {
        assert_eq!(len_q, len_k, "causal attention needs square blocks");
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");

    let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut out = vec![0.0; len_q * d];
            let mut probs = vec![0.0; heads * len_q * len_k];
            let mut scores = vec![0.0; len_k];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len_q {
                    let qrow = &qs[(b * len_q + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len_k {
                        if spec.visible(b, i, j) {
                            let krow = &ks[(b * len_k + j) * d + off..][..dh];
                            let s: f64 = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[(h * len_q + i) * len_k..][..len_k];
                    let mut z = 0.0;
                    for j in 0..len_k {
                        if spec.visible(b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let orow = &mut out[i * d + off..][..dh];
                    for j in 0..len_k {
                        if p[j] != 0.0 {
                            p[j] /= z;
                            let vrow = &vs[(b * len_k + j) * d + off..][..dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
            (out, probs)
        })
        .collect();

    let mut out = Vec::with_capacity(batch * len_q * d);
    let mut probs = Vec::with_capacity(batch * heads * len_q * len_k);
    for (o, p) in per_batch {
        out.extend(o);
        probs.extend(p);
    }
    (Mat::from_shape_vec((batch * len_q, d), out).expect("shape"), probs)
}

pub(super) fn backward(g: &Mat, q: &Mat, k: &Mat, v: &Mat, probs: &[f64], spec: &AttentionSpec) -> (Mat, Mat, Mat) {
    let d = q.ncols();
    let AttentionSpec {
        batch,
        len_q,
        len_k,
        heads,
        ..
    } = *spec;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");

    let per_batch: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut dq = vec![0.0; len_q * d];
            let mut dk = vec![0.0; len_k * d];
            let mut dv = vec![0.0; len_k * d];
            let mut dp = vec![0.0; len_k];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len_q {
                    let p = &probs[((b * heads + h) * len_q + i) * len_k..][..len_k];
                    let grow = &gs[(b * len_q + i) * d + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..len_k {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vs[(b * len_k + j) * d + off..][..dh];
                        dp[j] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        dot += p[j] * dp[j];
                        let dvrow = &mut dv[j * d + off..][..dh];
                        for (o, x) in dvrow.iter_mut().zip(grow) {
                            *o += p[j] * x;
                        }
                    }
                    let qrow = &qs[(b * len_q + i) * d + off..][..dh];
                    for j in 0..len_k {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let krow = &ks[(b * len_k + j) * d + off..][..dh];
                        let dqrow = &mut dq[i * d + off..][..dh];
                        for (o, x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk[j * d + off..][..dh];
                        for (o, x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dq = Vec::with_capacity(batch * len_q * d);
    let mut dk = Vec::with_capacity(batch * len_k * d);
    let mut dv = Vec::with_capacity(batch * len_k * d);
    for (a, b, c) in per_batch {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (
        Mat::from_shape_vec((batch * len_q, d), dq).expect("shape"),
        Mat::from_shape_vec((batch * len_k, d), dk).expect("shape"),
        Mat::from_shape_vec((batch * len_k, d), dv).expect("shape"),
    )
}
