//! The full model: sequence encoders, inference network and decoders wired
//! together over a batch of users.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{Domain, UserExample};
use crate::error::{Error, Result};
use crate::nn::Dropout;
use crate::objective::{
    adaptive_weight_with, kl_rows, score_rows, total_objective, weighted_sum, Decoder, DenoiseTerm, LossBreakdown,
    ObjectiveTerms,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::seqenc::{EmbeddingTables, SelfAttentionBlock, SeqKind, SequenceEncoder, SequenceRep};
use crate::varinf::{reparameterize, CrossMode, Direction, GaussianParams, GaussianVars, InferenceNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub t: usize,
    pub t_prime: usize,
    pub n_items_x: usize,
    pub n_items_y: usize,
    pub cross_mode: CrossMode,
    pub dropout: f64,
    /// Zero the pseudo-sequence latent of a domain the user has no history in.
    pub mask_absent_pseudo: bool,
    /// Uniform same-domain negatives per positive in the reconstruction loss.
    pub neg_per_pos: usize,
    /// Constants of the noise-adaptive denoising weight `exp(a·L/T) − b`.
    pub adaptive_a: f64,
    pub adaptive_b: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            ));
        }
        if self.t < 2 || self.t_prime < self.t {
            return bad(format!("need 2 <= T ({}) <= T' ({})", self.t, self.t_prime));
        }
        if self.n_items_x < 2 || self.n_items_y < 2 {
            return bad("each domain needs at least two items".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.neg_per_pos == 0 {
            return bad("neg_per_pos must be >= 1".into());
        }
        Ok(())
    }

    fn n_items(&self, d: Domain) -> usize {
        match d {
            Domain::X => self.n_items_x,
            Domain::Y => self.n_items_y,
        }
    }
}

/// Source of the cross-domain latent for a user with no history in the
/// decoded domain, at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdStartRoute {
    /// The auxiliary single-domain encoder `r`.
    #[default]
    Auxiliary,
    /// The cross-domain encoder with an empty query side (auxiliary encoders
    /// disabled).
    CrossEncoder,
    /// The prior mean (zero).
    PriorMean,
}

pub enum Mode<'a> {
    /// One reparameterization draw per latent from `noise`; dropout from
    /// `dropout` at the configured rate.
    Train { noise: &'a mut Rng, dropout: &'a mut Rng },
    /// Noise-free, dropout-free forward pass with a cold-start route.
    Eval(ColdStartRoute),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImVae {
    pub config: ModelConfig,
    pub encoder: SequenceEncoder,
    pub inference: InferenceNet,
    pub decoder_x: Decoder,
    pub decoder_y: Decoder,
}

/// Posterior parameters and latents of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    /// Users with a non-empty input window, per domain.
    pub present_x: Vec<bool>,
    pub present_y: Vec<bool>,
    pub q_zx: GaussianVars,
    pub q_zy: GaussianVars,
    pub q_zax: GaussianVars,
    pub q_zay: GaussianVars,
    /// `q(z_t^x | x, y)`, queries from Y.
    pub q_ztx: GaussianVars,
    /// `q(z_t^y | x, y)`, queries from X.
    pub q_zty: GaussianVars,
    pub r_x: GaussianVars,
    pub r_y: GaussianVars,
    pub z_x: Var,
    pub z_y: Var,
    pub z_a_x: Var,
    pub z_a_y: Var,
    pub z_t_x: Var,
    pub z_t_y: Var,
    pub h_x: Var,
    pub h_y: Var,
}

impl Forward {
    pub fn present(&self, d: Domain) -> &[bool] {
        match d {
            Domain::X => &self.present_x,
            Domain::Y => &self.present_y,
        }
    }

    pub fn user_vectors(&self, d: Domain) -> Var {
        match d {
            Domain::X => self.h_x,
            Domain::Y => self.h_y,
        }
    }
}

/// Value-level posteriors of one user, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct UserPosteriors {
    pub z_x: GaussianParams,
    pub z_y: GaussianParams,
    pub z_a_x: GaussianParams,
    pub z_a_y: GaussianParams,
    pub z_t_x: GaussianParams,
    pub z_t_y: GaussianParams,
    pub r_x: GaussianParams,
    pub r_y: GaussianParams,
}

/// Users of one optimizer step with their sampled training negatives
/// (`negatives_*[k][r]` is the `k`-th negative of the `r`-th user).
pub struct Batch<'a> {
    pub examples: Vec<&'a UserExample>,
    pub negatives_x: Vec<Vec<u32>>,
    pub negatives_y: Vec<Vec<u32>>,
}

impl<'a> Batch<'a> {
    /// Sample `neg_per_pos` uniform same-domain negatives per user and
    /// domain, never equal to the user's target.
    pub fn sample(examples: Vec<&'a UserExample>, config: &ModelConfig, rng: &mut Rng) -> Self {
        let mut draw = |d: Domain| {
            let n = config.n_items(d) as u32;
            (0..config.neg_per_pos)
                .map(|_| {
                    examples
                        .iter()
                        .map(|e| {
                            let target = e.domain(d).target;
                            loop {
                                let i = rng.random_range(1..=n);
                                if Some(i) != target {
                                    break i;
                                }
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let negatives_x = draw(Domain::X);
        let negatives_y = draw(Domain::Y);
        Self {
            examples,
            negatives_x,
            negatives_y,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn negatives(&self, d: Domain) -> &[Vec<u32>] {
        match d {
            Domain::X => &self.negatives_x,
            Domain::Y => &self.negatives_y,
        }
    }
}

fn column(values: impl Iterator<Item = f64>, n: usize) -> Mat {
    Mat::from_shape_vec((n, 1), values.collect()).expect("column shape")
}

fn as_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn standard_normal(rng: &mut Rng, n: usize, d: usize) -> Mat {
    Mat::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

impl ImVae {
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let tables = EmbeddingTables::new(
            store,
            config.n_items_x,
            config.n_items_y,
            d,
            config.t,
            config.t_prime,
            rng,
        );
        let block_x = SelfAttentionBlock::new(store, "self_attn_x", d, config.heads, rng);
        let block_y = SelfAttentionBlock::new(store, "self_attn_y", d, config.heads, rng);
        let inference = InferenceNet::new(store, d, config.heads, config.cross_mode, rng);
        let decoder_x = Decoder::new(store, "decoder_x", d, rng);
        let decoder_y = Decoder::new(store, "decoder_y", d, rng);
        Ok(Self {
            config,
            encoder: SequenceEncoder {
                tables,
                block_x,
                block_y,
            },
            inference,
            decoder_x,
            decoder_y,
        })
    }

    pub fn decoder(&self, d: Domain) -> &Decoder {
        match d {
            Domain::X => &self.decoder_x,
            Domain::Y => &self.decoder_y,
        }
    }

    fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        examples: &[&UserExample],
        d: Domain,
        kind: SeqKind,
        dropout: &mut Dropout,
    ) -> Result<SequenceRep> {
        let seqs: Vec<&[u32]> = examples
            .iter()
            .map(|e| match kind {
                SeqKind::Real => e.domain(d).seq.as_slice(),
                SeqKind::Pseudo => e.domain(d).pseudo.as_slice(),
            })
            .collect();
        self.encoder
            .encode(g, store, &seqs, d, kind, dropout)
            .map_err(|err| match (kind, err) {
                (SeqKind::Pseudo, Error::Shape(m)) => Error::InvalidArgument(format!(
                    "pseudo-sequences missing or of the wrong length ({m}); run pseudo-sequence generation first"
                )),
                (_, e) => e,
            })
    }

    /// Forward pass over a batch of users.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, examples: &[&UserExample], mode: Mode) -> Result<Forward> {
        let b = examples.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (mut noise, mut dropout, route) = match mode {
            Mode::Train { noise, dropout } => (Some(noise), Dropout::train(self.config.dropout, dropout), None),
            Mode::Eval(route) => (None, Dropout::eval(), Some(route)),
        };
        let inf = &self.inference;

        let real_x = self.encode(g, store, examples, Domain::X, SeqKind::Real, &mut dropout)?;
        let real_y = self.encode(g, store, examples, Domain::Y, SeqKind::Real, &mut dropout)?;
        let pseudo_x = self.encode(g, store, examples, Domain::X, SeqKind::Pseudo, &mut dropout)?;
        let pseudo_y = self.encode(g, store, examples, Domain::Y, SeqKind::Pseudo, &mut dropout)?;

        let q_zx = inf.encode_domain(g, store, real_x.pooled, Domain::X);
        let q_zy = inf.encode_domain(g, store, real_y.pooled, Domain::Y);
        let q_zax = inf.encode_pseudo(g, store, pseudo_x.pooled, Domain::X);
        let q_zay = inf.encode_pseudo(g, store, pseudo_y.pooled, Domain::Y);
        let q_zty = inf.encode_cross(g, store, &real_x, &real_y, Direction::YtoX);
        let q_ztx = inf.encode_cross(g, store, &real_y, &real_x, Direction::XtoY);
        let r_y = inf.encode_aux(g, store, real_y.pooled, Direction::YtoX);
        let r_x = inf.encode_aux(g, store, real_x.pooled, Direction::XtoY);

        for (name, p) in [
            ("q(z_x)", q_zx),
            ("q(z_y)", q_zy),
            ("q(z_a_x)", q_zax),
            ("q(z_a_y)", q_zay),
            ("q(z_t_y)", q_zty),
            ("q(z_t_x)", q_ztx),
            ("r(z_t_y)", r_y),
            ("r(z_t_x)", r_x),
        ] {
            if !p.is_finite(g) {
                return Err(Error::Numerical(format!("non-finite posterior {name}")));
            }
        }

        let d = self.config.d;
        let mut sample = |g: &mut Graph, p: GaussianVars| {
            let eps = noise.as_deref_mut().map(|r| standard_normal(r, b, d));
            reparameterize(g, p, eps)
        };
        let s_zx = sample(g, q_zx);
        let s_zy = sample(g, q_zy);
        let s_zax = sample(g, q_zax);
        let s_zay = sample(g, q_zay);
        let s_zty = sample(g, q_zty);
        let s_ztx = sample(g, q_ztx);
        let s_ry = sample(g, r_y);
        let s_rx = sample(g, r_x);

        let present_x: Vec<bool> = examples.iter().map(|e| e.x.true_len > 0).collect();
        let present_y: Vec<bool> = examples.iter().map(|e| e.y.true_len > 0).collect();
        let mask = |g: &mut Graph, v: Var, keep: &[bool]| {
            let m = g.constant(column(as_weights(keep).into_iter(), b));
            g.mul_col(v, m)
        };
        let pseudo_keep = |present: &[bool]| -> Vec<bool> {
            if self.config.mask_absent_pseudo {
                present.to_vec()
            } else {
                vec![true; b]
            }
        };
        let z_x = mask(g, s_zx, &present_x);
        let z_y = mask(g, s_zy, &present_y);
        let z_a_x = mask(g, s_zax, &pseudo_keep(&present_x));
        let z_a_y = mask(g, s_zay, &pseudo_keep(&present_y));

        // Cross latent for decoding domain `target`: from the cross encoder when
        // the user has history there, otherwise from the cold-start route.
        let cross = |g: &mut Graph, q: Var, aux: Var, present: &[bool]| -> Var {
            let absent: Vec<bool> = present.iter().map(|p| !p).collect();
            match route {
                Some(ColdStartRoute::CrossEncoder) => q,
                Some(ColdStartRoute::PriorMean) => mask(g, q, present),
                Some(ColdStartRoute::Auxiliary) | None => {
                    let a = mask(g, q, present);
                    let c = mask(g, aux, &absent);
                    g.add(a, c)
                }
            }
        };
        let z_t_y = cross(g, s_zty, s_ry, &present_x);
        let z_t_x = cross(g, s_ztx, s_rx, &present_y);

        let h_x = self.decoder_x.decode_user(g, store, z_x, z_t_y, z_a_x);
        let h_y = self.decoder_y.decode_user(g, store, z_y, z_t_x, z_a_y);
        Ok(Forward {
            batch: b,
            present_x,
            present_y,
            q_zx,
            q_zy,
            q_zax,
            q_zay,
            q_ztx,
            q_zty,
            r_x,
            r_y,
            z_x,
            z_y,
            z_a_x,
            z_a_y,
            z_t_x,
            z_t_y,
            h_x,
            h_y,
        })
    }

    fn recon(&self, g: &mut Graph, store: &ParamStore, fwd: &Forward, batch: &Batch, d: Domain) -> Result<Var> {
        let rows: Vec<usize> = (0..batch.len())
            .filter(|&r| batch.examples[r].domain(d).target.is_some())
            .collect();
        if rows.is_empty() {
            return Ok(g.constant(Mat::zeros((1, 1))));
        }
        let table = self.encoder.tables.items(d);
        let h = g.select_rows(fwd.user_vectors(d), &rows);
        let targets: Vec<u32> = rows
            .iter()
            .map(|&r| batch.examples[r].domain(d).target.expect("filtered"))
            .collect();
        let pos = score_rows(g, store, table, h, &targets)?;
        let pos = g.bce_logits(pos, &vec![1.0; rows.len()]);
        let mut loss = g.sum_all(pos);
        for negs in batch.negatives(d) {
            let items: Vec<u32> = rows.iter().map(|&r| negs[r]).collect();
            let neg = score_rows(g, store, table, h, &items)?;
            let neg = g.bce_logits(neg, &vec![0.0; rows.len()]);
            let neg = g.sum_all(neg);
            loss = g.add(loss, neg);
        }
        Ok(g.scale(loss, 1.0 / rows.len() as f64))
    }

    /// Every objective component of a training batch.
    pub fn objective_terms(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(Forward, ObjectiveTerms)> {
        let fwd = self.forward(g, store, &batch.examples, mode)?;
        let b = fwd.batch as f64;
        let priors = &self.inference.priors;
        let both: Vec<bool> = fwd
            .present_x
            .iter()
            .zip(&fwd.present_y)
            .map(|(x, y)| *x && *y)
            .collect();

        let masked_kl = |g: &mut Graph, q: GaussianVars, p: GaussianVars, keep: &[bool]| {
            let k = kl_rows(g, q, p);
            weighted_sum(g, k, &as_weights(keep), b)
        };
        let p_zx = priors.z_x.forward(g, store);
        let p_zy = priors.z_y.forward(g, store);
        let p_zax = priors.z_a_x.forward(g, store);
        let p_zay = priors.z_a_y.forward(g, store);
        let p_cross = priors.cross(g);
        let kl_zx = masked_kl(g, fwd.q_zx, p_zx, &fwd.present_x);
        let kl_zy = masked_kl(g, fwd.q_zy, p_zy, &fwd.present_y);
        let kl_zax = masked_kl(g, fwd.q_zax, p_zax, &fwd.present_x);
        let kl_zay = masked_kl(g, fwd.q_zay, p_zay, &fwd.present_y);
        let kl_zty = masked_kl(g, fwd.q_zty, p_cross, &fwd.present_x);
        let kl_ztx = masked_kl(g, fwd.q_ztx, p_cross, &fwd.present_y);
        let kl_transfer_yx = masked_kl(g, fwd.q_zty, fwd.r_y, &both);
        let kl_transfer_xy = masked_kl(g, fwd.q_ztx, fwd.r_x, &both);

        let denoise = |g: &mut Graph, d: Domain, q: GaussianVars, qa: GaussianVars| -> Result<DenoiseTerm> {
            let kl = kl_rows(g, q, qa);
            let active = fwd.present(d).to_vec();
            let weights = batch
                .examples
                .iter()
                .zip(&active)
                .map(|(e, &a)| {
                    if a {
                        adaptive_weight_with(
                            e.domain(d).true_len,
                            self.config.t,
                            self.config.adaptive_a,
                            self.config.adaptive_b,
                        )
                    } else {
                        Ok(0.0)
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(DenoiseTerm { kl, weights, active })
        };
        let denoise_x = denoise(g, Domain::X, fwd.q_zx, fwd.q_zax)?;
        let denoise_y = denoise(g, Domain::Y, fwd.q_zy, fwd.q_zay)?;

        let recon_x = self.recon(g, store, &fwd, batch, Domain::X)?;
        let recon_y = self.recon(g, store, &fwd, batch, Domain::Y)?;
        let terms = ObjectiveTerms {
            batch: fwd.batch,
            recon_x,
            recon_y,
            kl_zx,
            kl_zy,
            kl_ztx,
            kl_zty,
            kl_zax,
            kl_zay,
            kl_transfer_yx,
            kl_transfer_xy,
            denoise_x,
            denoise_y,
        };
        Ok((fwd, terms))
    }

    /// Total objective of a batch with its breakdown.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        mode: Mode,
        lambda_t: f64,
        lambda_a: f64,
    ) -> Result<(Var, LossBreakdown)> {
        let (_, terms) = self.objective_terms(g, store, batch, mode)?;
        total_objective(g, &terms, lambda_t, lambda_a)
    }

    /// Value-level posteriors of every user (evaluation mode).
    pub fn posteriors(&self, store: &ParamStore, examples: &[&UserExample]) -> Result<Vec<UserPosteriors>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, store, examples, Mode::Eval(ColdStartRoute::Auxiliary))?;
        Ok((0..examples.len())
            .map(|r| UserPosteriors {
                z_x: f.q_zx.values(&g, r),
                z_y: f.q_zy.values(&g, r),
                z_a_x: f.q_zax.values(&g, r),
                z_a_y: f.q_zay.values(&g, r),
                z_t_x: f.q_ztx.values(&g, r),
                z_t_y: f.q_zty.values(&g, r),
                r_x: f.r_x.values(&g, r),
                r_y: f.r_y.values(&g, r),
            })
            .collect())
    }

    /// Evaluation-mode user vectors for one domain (`n × d`), computed in
    /// parallel chunks.
    pub fn user_vectors(
        &self,
        store: &ParamStore,
        examples: &[&UserExample],
        domain: Domain,
        route: ColdStartRoute,
    ) -> Result<Mat> {
        const CHUNK: usize = 256;
        let parts = examples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let f = self.forward(&mut g, store, chunk, Mode::Eval(route))?;
                Ok(g.value(f.user_vectors(domain)).clone())
            })
            .collect::<Result<Vec<Mat>>>()?;
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        if views.is_empty() {
            return Ok(Mat::zeros((0, self.config.d)));
        }
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("chunks share width"))
    }
}
