//! Decoding latents into user vectors, item scoring, and the weighted
//! training objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_term, Graph, Mat, Var};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::varinf::{GaussianParams, GaussianVars, HIDDEN};

/// Balancing constants of the noise-adaptive weight.
pub const ADAPTIVE_A: f64 = 0.8;
pub const ADAPTIVE_B: f64 = 0.8;

/// `exp(a·L/T) − b` with the default constants.
pub fn adaptive_weight(len: usize, t: usize) -> Result<f64> {
    adaptive_weight_with(len, t, ADAPTIVE_A, ADAPTIVE_B)
}

pub fn adaptive_weight_with(len: usize, t: usize, a: f64, b: f64) -> Result<f64> {
    if t == 0 || len > t {
        return Err(Error::InvalidArgument(format!("history length {len} outside 0..={t}")));
    }
    Ok((a * len as f64 / t as f64).exp() - b)
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussians(q: &GaussianParams, p: &GaussianParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "KL between Gaussians of different dimension");
    q.mu.iter()
        .zip(&q.sigma)
        .zip(p.mu.iter().zip(&p.sigma))
        .map(|((qm, qs), (pm, ps))| (ps / qs).ln() + (qs * qs + (qm - pm) * (qm - pm)) / (2.0 * ps * ps) - 0.5)
        .sum()
}

/// Per-row `KL(q ‖ p)` on the tape as an `n × 1` column. Either side may be a
/// single row, which is broadcast.
pub fn kl_rows(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Var {
    let n = g.value(q.mu).nrows().max(g.value(p.mu).nrows());
    let widen = |g: &mut Graph, v: Var| {
        if g.value(v).nrows() == n {
            v
        } else {
            g.broadcast_rows(v, n)
        }
    };
    let (qm, qs, pm, ps) = (widen(g, q.mu), widen(g, q.sigma), widen(g, p.mu), widen(g, p.sigma));
    let ln_ps = g.ln(ps);
    let ln_qs = g.ln(qs);
    let log_ratio = g.sub(ln_ps, ln_qs);
    let qs2 = g.square(qs);
    let diff = g.sub(qm, pm);
    let diff2 = g.square(diff);
    let num = g.add(qs2, diff2);
    let ps2 = g.square(ps);
    let den = g.scale(ps2, 2.0);
    let frac = g.div(num, den);
    let terms = g.add(log_ratio, frac);
    let terms = g.add_scalar(terms, -0.5);
    g.sum_cols(terms)
}

/// `Σ_i w_i · col_i / denom` for an `n × 1` column and fixed weights.
pub fn weighted_sum(g: &mut Graph, col: Var, weights: &[f64], denom: f64) -> Var {
    let w = g.constant(Mat::from_shape_vec((weights.len(), 1), weights.to_vec()).expect("weight column"));
    let prod = g.mul_col(col, w);
    let s = g.sum_all(prod);
    g.scale(s, 1.0 / denom)
}

/// Mean binary cross-entropy per positive example: every positive contributes
/// its own term plus the terms of its negatives.
pub fn bce_loss(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    assert!(!pos_scores.is_empty(), "bce_loss needs at least one positive");
    let pos: f64 = pos_scores.iter().map(|&s| bce_term(s, 1.0)).sum();
    let neg: f64 = neg_scores.iter().map(|&s| bce_term(s, 0.0)).sum();
    (pos + neg) / pos_scores.len() as f64
}

/// Dot products of a user vector with item-table rows.
pub fn score(h_u: &[f64], table: &Mat, items: &[u32]) -> Result<Vec<f64>> {
    assert_eq!(h_u.len(), table.ncols(), "user vector dimension");
    items
        .iter()
        .map(|&i| {
            if i == PAD {
                return Err(Error::InvalidArgument("padding index scored".into()));
            }
            if i as usize >= table.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: i as usize,
                    size: table.nrows(),
                });
            }
            Ok(table.row(i as usize).iter().zip(h_u).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Row-wise scores `h_u[r] · E[items[r]]` on the tape (`n × 1`).
pub fn score_rows(g: &mut Graph, store: &ParamStore, table: ParamId, h_u: Var, items: &[u32]) -> Result<Var> {
    if items.contains(&PAD) {
        return Err(Error::InvalidArgument("padding index scored".into()));
    }
    let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
    let rows = g.gather_param(store, table, &idx, false)?;
    let prod = g.mul(h_u, rows);
    Ok(g.sum_cols(prod))
}

/// Perceptron decoder over `[z; z_t; z_a]` producing the user vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, 3 * d, &HIDDEN, d, rng),
        }
    }

    pub fn decode_user(&self, g: &mut Graph, store: &ParamStore, z: Var, z_t: Var, z_a: Var) -> Var {
        let cat = g.concat_cols(&[z, z_t, z_a]);
        self.mlp.forward(g, store, cat)
    }
}

/// Every additive term of the objective and its weights, as batch scalars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_x: f64,
    pub recon_y: f64,
    pub kl_zx: f64,
    pub kl_zy: f64,
    pub kl_ztx: f64,
    pub kl_zty: f64,
    pub kl_zax: f64,
    pub kl_zay: f64,
    pub kl_transfer_yx: f64,
    pub kl_transfer_xy: f64,
    /// Unweighted denoising KLs averaged over the users that carry them.
    pub kl_denoise_x: f64,
    pub kl_denoise_y: f64,
    /// Batch means of `λ_d · KL` (the quantities that enter `total`).
    pub denoise_x: f64,
    pub denoise_y: f64,
    pub lambda_t: f64,
    pub lambda_a: f64,
    /// Adaptive weights averaged over the users that carry a denoising term.
    pub lambda_d_x: f64,
    pub lambda_d_y: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted composition of the logged components.
    pub fn recompose(&self) -> f64 {
        (1.0 + self.lambda_t) * (self.recon_x + self.recon_y + self.kl_zx + self.kl_zy)
            + self.kl_ztx
            + self.kl_zty
            + self.kl_zax
            + self.kl_zay
            + self.lambda_t * (self.kl_transfer_yx + self.kl_transfer_xy)
            + self.lambda_a * (self.denoise_x + self.denoise_y)
    }

    fn named_kls(&self) -> [(&'static str, f64); 10] {
        [
            ("kl_zx", self.kl_zx),
            ("kl_zy", self.kl_zy),
            ("kl_ztx", self.kl_ztx),
            ("kl_zty", self.kl_zty),
            ("kl_zax", self.kl_zax),
            ("kl_zay", self.kl_zay),
            ("kl_transfer_yx", self.kl_transfer_yx),
            ("kl_transfer_xy", self.kl_transfer_xy),
            ("kl_denoise_x", self.kl_denoise_x),
            ("kl_denoise_y", self.kl_denoise_y),
        ]
    }

    fn named_terms(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("recon_x", self.recon_x), ("recon_y", self.recon_y)];
        v.extend(self.named_kls());
        v.extend([("denoise_x", self.denoise_x), ("denoise_y", self.denoise_y)]);
        v
    }

    /// Element-wise mean of several breakdowns (for per-epoch logging).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.recon_x += b.recon_x / n;
            m.recon_y += b.recon_y / n;
            m.kl_zx += b.kl_zx / n;
            m.kl_zy += b.kl_zy / n;
            m.kl_ztx += b.kl_ztx / n;
            m.kl_zty += b.kl_zty / n;
            m.kl_zax += b.kl_zax / n;
            m.kl_zay += b.kl_zay / n;
            m.kl_transfer_yx += b.kl_transfer_yx / n;
            m.kl_transfer_xy += b.kl_transfer_xy / n;
            m.kl_denoise_x += b.kl_denoise_x / n;
            m.kl_denoise_y += b.kl_denoise_y / n;
            m.denoise_x += b.denoise_x / n;
            m.denoise_y += b.denoise_y / n;
            m.lambda_d_x += b.lambda_d_x / n;
            m.lambda_d_y += b.lambda_d_y / n;
            m.total += b.total / n;
        }
        if let Some(first) = items.first() {
            m.lambda_t = first.lambda_t;
            m.lambda_a = first.lambda_a;
        }
        m
    }
}

/// A denoising term: per-user KL column with its adaptive weights (zero for
/// users that carry no term) and the number of users that carry one.
#[derive(Clone, Debug)]
pub struct DenoiseTerm {
    pub kl: Var,
    pub weights: Vec<f64>,
    pub active: Vec<bool>,
}

/// Scalar tape nodes of every objective component for one batch.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    pub batch: usize,
    pub recon_x: Var,
    pub recon_y: Var,
    pub kl_zx: Var,
    pub kl_zy: Var,
    pub kl_ztx: Var,
    pub kl_zty: Var,
    pub kl_zax: Var,
    pub kl_zay: Var,
    pub kl_transfer_yx: Var,
    pub kl_transfer_xy: Var,
    pub denoise_x: DenoiseTerm,
    pub denoise_y: DenoiseTerm,
}

const KL_TOLERANCE: f64 = 1e-9;

fn active_mean(values: &Mat, active: &[bool]) -> f64 {
    let n = active.iter().filter(|&&a| a).count();
    if n == 0 {
        return 0.0;
    }
    values
        .column(0)
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| v)
        .sum::<f64>()
        / n as f64
}

fn active_weight_mean(weights: &[f64], active: &[bool]) -> f64 {
    let n = active.iter().filter(|&&a| a).count();
    if n == 0 {
        return 0.0;
    }
    weights
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(w, _)| w)
        .sum::<f64>()
        / n as f64
}

/// Assemble the minimized objective
/// `(1+λ_t)(recon_x + recon_y + kl_zx + kl_zy) + kl_ztx + kl_zty + kl_zax + kl_zay
///  + λ_t (kl_transfer_yx + kl_transfer_xy) + λ_a (denoise_x + denoise_y)`.
pub fn total_objective(
    g: &mut Graph,
    terms: &ObjectiveTerms,
    lambda_t: f64,
    lambda_a: f64,
) -> Result<(Var, LossBreakdown)> {
    let b = terms.batch as f64;
    let dn_x = weighted_sum(g, terms.denoise_x.kl, &terms.denoise_x.weights, b);
    let dn_y = weighted_sum(g, terms.denoise_y.kl, &terms.denoise_y.weights, b);

    let elbo = [terms.recon_x, terms.recon_y, terms.kl_zx, terms.kl_zy]
        .into_iter()
        .reduce(|a, c| g.add(a, c))
        .expect("non-empty");
    let mut total = g.scale(elbo, 1.0 + lambda_t);
    for t in [terms.kl_ztx, terms.kl_zty, terms.kl_zax, terms.kl_zay] {
        total = g.add(total, t);
    }
    let transfer = g.add(terms.kl_transfer_yx, terms.kl_transfer_xy);
    let transfer = g.scale(transfer, lambda_t);
    total = g.add(total, transfer);
    let denoise = g.add(dn_x, dn_y);
    let denoise = g.scale(denoise, lambda_a);
    total = g.add(total, denoise);

    let breakdown = LossBreakdown {
        recon_x: g.scalar(terms.recon_x),
        recon_y: g.scalar(terms.recon_y),
        kl_zx: g.scalar(terms.kl_zx),
        kl_zy: g.scalar(terms.kl_zy),
        kl_ztx: g.scalar(terms.kl_ztx),
        kl_zty: g.scalar(terms.kl_zty),
        kl_zax: g.scalar(terms.kl_zax),
        kl_zay: g.scalar(terms.kl_zay),
        kl_transfer_yx: g.scalar(terms.kl_transfer_yx),
        kl_transfer_xy: g.scalar(terms.kl_transfer_xy),
        kl_denoise_x: active_mean(g.value(terms.denoise_x.kl), &terms.denoise_x.active),
        kl_denoise_y: active_mean(g.value(terms.denoise_y.kl), &terms.denoise_y.active),
        denoise_x: g.scalar(dn_x),
        denoise_y: g.scalar(dn_y),
        lambda_t,
        lambda_a,
        lambda_d_x: active_weight_mean(&terms.denoise_x.weights, &terms.denoise_x.active),
        lambda_d_y: active_weight_mean(&terms.denoise_y.weights, &terms.denoise_y.active),
        total: g.scalar(total),
    };
    for (name, v) in breakdown.named_terms() {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite objective term `{name}` ({v})")));
        }
    }
    for (name, v) in breakdown.named_kls() {
        if v < -KL_TOLERANCE {
            return Err(Error::Numerical(format!("negative KL term `{name}` ({v})")));
        }
    }
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical("non-finite objective total".into()));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, Normal};

    fn g1(mu: f64, sigma: f64) -> GaussianParams {
        GaussianParams {
            mu: vec![mu],
            sigma: vec![sigma],
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let e = std::f64::consts::E;
        assert_eq!(kl_diag_gaussians(&g1(0.3, 1.7), &g1(0.3, 1.7)), 0.0);
        assert!((kl_diag_gaussians(&g1(1.0, 1.0), &g1(0.0, 1.0)) - 0.5).abs() < 1e-12);
        assert!((kl_diag_gaussians(&g1(0.0, e), &g1(0.0, 1.0)) - (e * e - 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_graph_matches_value_level() {
        let mut r = stream(1, "kl", 0);
        let qm = crate::params::normal(3, 4, 1.0, &mut r);
        let qs = crate::params::normal(3, 4, 1.0, &mut r).mapv(|v| v.abs() + 0.1);
        let pm = crate::params::normal(1, 4, 1.0, &mut r);
        let ps = crate::params::normal(1, 4, 1.0, &mut r).mapv(|v| v.abs() + 0.1);
        let mut g = Graph::new();
        let q = GaussianVars {
            mu: g.constant(qm.clone()),
            sigma: g.constant(qs.clone()),
        };
        let p = GaussianVars {
            mu: g.constant(pm.clone()),
            sigma: g.constant(ps.clone()),
        };
        let k = kl_rows(&mut g, q, p);
        let pv = GaussianParams::from_rows(&pm, &ps, 0);
        for row in 0..3 {
            let qv = GaussianParams::from_rows(&qm, &qs, row);
            assert!((g.value(k)[[row, 0]] - kl_diag_gaussians(&qv, &pv)).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_matches_monte_carlo_small() {
        // log q(z) - log p(z) averaged over z ~ q
        let (qm, qs, pm, ps) = (0.4, 0.7, -0.2, 1.3);
        let mut r = stream(9, "mc", 0);
        let dist = Normal::new(qm, qs).unwrap();
        let n = 200_000;
        let lp = |z: f64, m: f64, s: f64| -(s.ln()) - (z - m) * (z - m) / (2.0 * s * s);
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let z = dist.sample(&mut r);
                lp(z, qm, qs) - lp(z, pm, ps)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let exact = kl_diag_gaussians(&g1(qm, qs), &g1(pm, ps));
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn adaptive_weight_values() {
        let t = 20;
        assert!((adaptive_weight(0, t).unwrap() - 0.2).abs() < 1e-12);
        assert!((adaptive_weight(t, t).unwrap() - (0.8f64.exp() - 0.8)).abs() < 1e-12);
        assert!((adaptive_weight(t / 2, t).unwrap() - (0.4f64.exp() - 0.8)).abs() < 1e-12);
        assert!(adaptive_weight(t + 1, t).is_err());
    }

    #[test]
    fn bce_values() {
        assert!(bce_loss(&[20.0], &[]) < 1e-7);
        assert!((bce_loss(&[0.0], &[]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.0], &[0.0]) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[-20.0], &[]) + 1e-7f64.ln()).abs() < 1e-9);
        assert!(bce_loss(&[-20.0], &[]) > 16.1);
    }

    #[test]
    fn scoring_contracts() {
        let table = ndarray::array![[0.0, 0.0], [0.6, 0.8], [1.0, -1.0]];
        assert_eq!(score(&[0.0, 0.0], &table, &[1, 2]).unwrap(), vec![0.0, 0.0]);
        let s = score(&[0.6, 0.8], &table, &[1]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(matches!(
            score(&[0.6, 0.8], &table, &[0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            score(&[0.6, 0.8], &table, &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn score_rows_rejects_padding() {
        let mut store = ParamStore::new();
        let t = store.add_table("t", ndarray::array![[0.0, 0.0], [1.0, 2.0]]);
        let mut g = Graph::new();
        let h = g.constant(ndarray::array![[1.0, 1.0]]);
        assert!(score_rows(&mut g, &store, t, h, &[0]).is_err());
        let s = score_rows(&mut g, &store, t, h, &[1]).unwrap();
        assert_eq!(g.scalar(s), 3.0);
    }

    #[test]
    fn decoder_uses_every_latent() {
        let mut r = stream(4, "dec", 0);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec_x", 4, &mut r);
        let run = |za: f64| {
            let mut g = Graph::new();
            let z = g.constant(Mat::from_elem((1, 4), 0.3));
            let zt = g.constant(Mat::from_elem((1, 4), -0.2));
            let a = g.constant(Mat::from_elem((1, 4), za));
            let h = dec.decode_user(&mut g, &store, z, zt, a);
            g.value(h).clone()
        };
        assert_ne!(run(0.0), run(1e-3));
        let mut g = Graph::new();
        let z = g.constant(Mat::zeros((1, 4)));
        let h = dec.decode_user(&mut g, &store, z, z, z);
        // zero biases at initialization
        assert!(g.value(h).iter().all(|v| *v == 0.0));
    }

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.input(Mat::from_elem((1, 1), v))
    }

    fn terms(g: &mut Graph, vals: [f64; 10], kx: [f64; 2], ky: [f64; 2], wx: Vec<f64>, wy: Vec<f64>) -> ObjectiveTerms {
        let s: Vec<Var> = vals.iter().map(|&v| scalar(g, v)).collect();
        let kx = g.input(Mat::from_shape_vec((2, 1), kx.to_vec()).unwrap());
        let ky = g.input(Mat::from_shape_vec((2, 1), ky.to_vec()).unwrap());
        ObjectiveTerms {
            batch: 2,
            recon_x: s[0],
            recon_y: s[1],
            kl_zx: s[2],
            kl_zy: s[3],
            kl_ztx: s[4],
            kl_zty: s[5],
            kl_zax: s[6],
            kl_zay: s[7],
            kl_transfer_yx: s[8],
            kl_transfer_xy: s[9],
            denoise_x: DenoiseTerm {
                kl: kx,
                active: wx.iter().map(|w| *w != 0.0).collect(),
                weights: wx,
            },
            denoise_y: DenoiseTerm {
                kl: ky,
                active: wy.iter().map(|w| *w != 0.0).collect(),
                weights: wy,
            },
        }
    }

    #[test]
    fn total_matches_hand_composition() {
        let mut g = Graph::new();
        let vals = [0.7, 0.4, 0.1, 0.2, 0.3, 0.05, 0.6, 0.25, 0.8, 0.9];
        let t = terms(&mut g, vals, [0.5, 1.5], [2.0, 0.0], vec![0.2, 1.4], vec![0.6, 0.0]);
        let (lt, la) = (2e-3, 5e-3);
        let (total, b) = total_objective(&mut g, &t, lt, la).unwrap();
        let hand = (1.0 + lt) * (0.7 + 0.4 + 0.1 + 0.2)
            + 0.3
            + 0.05
            + 0.6
            + 0.25
            + lt * (0.8 + 0.9)
            + la * ((0.2 * 0.5 + 1.4 * 1.5) / 2.0 + (0.6 * 2.0) / 2.0);
        assert!((g.scalar(total) - hand).abs() < 1e-12);
        assert!((b.recompose() - b.total).abs() <= 1e-12 * b.total.abs());
        assert!((b.kl_denoise_x - 1.0).abs() < 1e-12);
        assert!((b.kl_denoise_y - 2.0).abs() < 1e-12);
        assert!((b.lambda_d_x - 0.8).abs() < 1e-12);
    }

    #[test]
    fn vanishing_terms_give_zero_total_and_ablations_drop_terms() {
        let mut g = Graph::new();
        let t = terms(&mut g, [0.0; 10], [0.0; 2], [0.0; 2], vec![1.0, 1.0], vec![1.0, 1.0]);
        let (total, _) = total_objective(&mut g, &t, 1e-3, 1e-3).unwrap();
        assert_eq!(g.scalar(total), 0.0);

        let vals = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 5.0];
        let t = terms(&mut g, vals, [3.0, 3.0], [3.0, 3.0], vec![1.0, 1.0], vec![1.0, 1.0]);
        let (_, b) = total_objective(&mut g, &t, 0.0, 1e-3).unwrap();
        assert!((b.total - (2.0 + 1e-3 * 6.0)).abs() < 1e-12);
        let (_, b) = total_objective(&mut g, &t, 1e-3, 0.0).unwrap();
        assert!((b.total - (1.001 * 2.0 + 1e-3 * 10.0)).abs() < 1e-12);
        assert!(b.kl_denoise_x > 0.0, "denoise terms still logged");
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut g = Graph::new();
        let mut vals = [0.1; 10];
        vals[5] = f64::NAN;
        let t = terms(&mut g, vals, [0.0; 2], [0.0; 2], vec![1.0, 1.0], vec![1.0, 1.0]);
        match total_objective(&mut g, &t, 1e-3, 1e-3) {
            Err(Error::Numerical(m)) => assert!(m.contains("kl_zty"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
