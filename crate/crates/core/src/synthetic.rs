//! Two-domain interaction logs with planted shared and domain-specific
//! interest factors, for controlled experiments.
//!
//! Every user has a shared factor vector `s_u` and one specific vector per
//! domain `p_u^x`, `p_u^y`; every item has a shared part `a_i` and a specific
//! part `b_i`. A user's affinity to an item of domain X is
//! `√w · s_u·a_i + √(1−w) · p_u^x·b_i` (scaled by the factor dimension), and
//! a history of `L_u` distinct items is drawn with Gumbel-top-`L` sampling at
//! temperature `τ`, then put in random order. Only the shared part links the
//! two domains, so cross-domain transfer is learnable exactly through `s_u`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{Domain, InteractionLog};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items_x: usize,
    pub items_y: usize,
    pub shared_dim: usize,
    pub specific_dim: usize,
    /// Share `w` of the affinity carried by the shared factors.
    pub shared_weight: f64,
    pub temperature: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Mean of the geometric number of items beyond `min_len`.
    pub mean_extra_len: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items_x: 1200,
            items_y: 1100,
            shared_dim: 8,
            specific_dim: 8,
            shared_weight: 0.7,
            temperature: 0.2,
            min_len: 3,
            max_len: 40,
            mean_extra_len: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.users < 10 {
            return bad("need at least 10 users");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if self.items_x < self.max_len || self.items_y < self.max_len {
            return bad("each catalog must hold at least max_len items");
        }
        if !(0.0..=1.0).contains(&self.shared_weight) || self.temperature <= 0.0 || self.mean_extra_len < 0.0 {
            return bad("shared_weight in [0,1], temperature > 0 and mean_extra_len >= 0 required");
        }
        if self.shared_dim == 0 || self.specific_dim == 0 {
            return bad("factor dimensions must be positive");
        }
        Ok(())
    }
}

pub struct SyntheticCorpus {
    pub log_x: InteractionLog,
    pub log_y: InteractionLog,
}

fn gaussian(rows: usize, cols: usize, r: &mut rng::Rng) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || r.sample(StandardNormal))
}

pub fn user_id(u: usize) -> String {
    format!("u{u:06}")
}

pub fn item_id(domain: Domain, i: usize) -> String {
    let prefix = match domain {
        Domain::X => "x",
        Domain::Y => "y",
    };
    format!("{prefix}{i:05}")
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "synthetic_factors", 0);
    let shared = gaussian(cfg.users, cfg.shared_dim, &mut r);
    let specific_x = gaussian(cfg.users, cfg.specific_dim, &mut r);
    let specific_y = gaussian(cfg.users, cfg.specific_dim, &mut r);
    let items = |n: usize, r: &mut rng::Rng| (gaussian(n, cfg.shared_dim, r), gaussian(n, cfg.specific_dim, r));
    let (ax, bx) = items(cfg.items_x, &mut r);
    let (ay, by) = items(cfg.items_y, &mut r);

    let ws = (cfg.shared_weight / cfg.shared_dim as f64).sqrt();
    let wp = ((1.0 - cfg.shared_weight) / cfg.specific_dim as f64).sqrt();
    let affinity_x = shared.dot(&ax.t()) * ws + specific_x.dot(&bx.t()) * wp;
    let affinity_y = shared.dot(&ay.t()) * ws + specific_y.dot(&by.t()) * wp;
    let p = 1.0 / (1.0 + cfg.mean_extra_len);
    let geometric = Geometric::new(p).map_err(|e| Error::Config(format!("synthetic corpus: {e}")))?;

    let histories = |domain: Domain, affinity: &Mat| -> Vec<(String, String, i64)> {
        (0..cfg.users)
            .into_par_iter()
            .flat_map_iter(|u| {
                let mut r = rng::stream(cfg.seed, &format!("synthetic_{domain}"), u as u64);
                let len = (cfg.min_len + geometric.sample(&mut r) as usize).min(cfg.max_len);
                let mut keyed: Vec<(f64, usize)> = affinity
                    .row(u)
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        let uniform: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
                        (a / cfg.temperature - (-uniform.ln()).ln(), i)
                    })
                    .collect();
                keyed.select_nth_unstable_by(len - 1, |a, b| b.0.total_cmp(&a.0));
                let mut chosen: Vec<usize> = keyed[..len].iter().map(|(_, i)| *i).collect();
                chosen.sort_unstable();
                chosen.shuffle(&mut r);
                chosen
                    .into_iter()
                    .enumerate()
                    .map(move |(t, i)| (user_id(u), item_id(domain, i + 1), t as i64))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    Ok(SyntheticCorpus {
        log_x: InteractionLog::from_triples(Domain::X, histories(Domain::X, &affinity_x)),
        log_y: InteractionLog::from_triples(Domain::Y, histories(Domain::Y, &affinity_y)),
    })
}
