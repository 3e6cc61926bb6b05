use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Domain, InteractionLog};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Valid,
    Test,
}

/// User-level partition of a two-domain corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub k_o: f64,
    pub k_cs: f64,
    pub roles: BTreeMap<String, Role>,
    /// Users with interactions in both domains.
    pub overlapping: BTreeSet<String>,
    /// Overlapping training users whose history in one domain was withheld
    /// to lower the overlap ratio.
    pub dropped_domain: BTreeMap<String, Domain>,
    /// Evaluation users whose history in one domain was removed.
    pub cold_start: BTreeMap<String, Domain>,
}

impl UserSplit {
    pub fn role(&self, user: &str) -> Option<Role> {
        self.roles.get(user).copied()
    }

    pub fn users_with_role(&self, role: Role) -> impl Iterator<Item = &str> {
        self.roles
            .iter()
            .filter(move |(_, r)| **r == role)
            .map(|(u, _)| u.as_str())
    }

    pub fn count(&self, role: Role) -> usize {
        self.users_with_role(role).count()
    }
}

fn bucket_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let train = ((ratios[0] * n as f64).round() as usize).min(n);
    let valid = ((ratios[1] * n as f64).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

/// Assign every user of either domain to train/valid/test and thin the
/// overlapping training users down to a `k_o` share.
pub fn split_users(
    log_x: &InteractionLog,
    log_y: &InteractionLog,
    ratios: [f64; 3],
    k_o: f64,
    seed: u64,
) -> Result<UserSplit> {
    if !(k_o > 0.0 && k_o <= 1.0) {
        return Err(Error::InvalidArgument(format!("k_o = {k_o} outside (0, 1]")));
    }
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let ux = log_x.users();
    let uy = log_y.users();
    if ux.len() < 10 || uy.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 users per domain to split, found {} and {}",
            ux.len(),
            uy.len()
        )));
    }
    let mut users: Vec<&str> = ux.union(&uy).copied().collect();
    let overlapping: BTreeSet<String> = ux.intersection(&uy).map(|u| u.to_string()).collect();

    users.shuffle(&mut rng::stream(seed, "split", 0));
    let (n_train, n_valid, _) = bucket_sizes(users.len(), ratios);
    let roles: BTreeMap<String, Role> = users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let role = if i < n_train {
                Role::Train
            } else if i < n_train + n_valid {
                Role::Valid
            } else {
                Role::Test
            };
            (u.to_string(), role)
        })
        .collect();

    let mut train_overlap: Vec<&String> = overlapping
        .iter()
        .filter(|u| roles[u.as_str()] == Role::Train)
        .collect();
    let n_drop = ((1.0 - k_o) * train_overlap.len() as f64).round() as usize;
    let mut drop_rng = rng::stream(seed, "overlap", 0);
    train_overlap.shuffle(&mut drop_rng);
    let dropped_domain = train_overlap
        .into_iter()
        .take(n_drop)
        .map(|u| {
            let d = if drop_rng.random_bool(0.5) {
                Domain::X
            } else {
                Domain::Y
            };
            (u.clone(), d)
        })
        .collect();

    Ok(UserSplit {
        seed,
        ratios,
        k_o,
        k_cs: 0.0,
        roles,
        overlapping,
        dropped_domain,
        cold_start: BTreeMap::new(),
    })
}

/// Turn a `k_cs` share of the overlapping validation and test users (counted
/// per role) into cold-start users of a uniformly chosen domain.
pub fn simulate_cold_start(split: &UserSplit, k_cs: f64, seed: u64) -> Result<UserSplit> {
    if !(0.0..=1.0).contains(&k_cs) {
        return Err(Error::InvalidArgument(format!("k_cs = {k_cs} outside [0, 1]")));
    }
    let mut out = split.clone();
    out.k_cs = k_cs;
    out.cold_start.clear();
    if k_cs == 0.0 {
        return Ok(out);
    }
    let mut any = false;
    for (i, role) in [Role::Valid, Role::Test].into_iter().enumerate() {
        let mut candidates: Vec<&String> = split
            .overlapping
            .iter()
            .filter(|u| split.roles[u.as_str()] == role)
            .collect();
        any |= !candidates.is_empty();
        let mut r = rng::stream(seed, "cold_start", i as u64);
        candidates.shuffle(&mut r);
        let n = (k_cs * candidates.len() as f64).round() as usize;
        for u in candidates.into_iter().take(n) {
            let d = if r.random_bool(0.5) { Domain::X } else { Domain::Y };
            out.cold_start.insert(u.clone(), d);
        }
    }
    if !any {
        return Err(Error::InvalidArgument(
            "k_cs > 0 but there are no overlapping validation/test users".into(),
        ));
    }
    Ok(out)
}
