//! Leave-one-out ranking evaluation: one held-out positive against sampled
//! negatives, HR@10 and NDCG@10 per domain and user group.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Domain, Role, UserExample};
use crate::error::{Error, Result};
use crate::model::{ColdStartRoute, ImVae};
use crate::params::ParamStore;
use crate::rng::{self, sub_seed};

pub const CUTOFF: usize = 10;
pub const NUM_NEGATIVES: usize = 999;
const MIN_CATALOG: usize = 10;

/// `n` items drawn uniformly without replacement from `1..=catalog_size`
/// minus `interacted`, in draw order. Takes every remaining item when fewer
/// than `n` are left. Deterministic per `(seed, user, domain)`.
pub fn sample_negatives(
    user: &str,
    domain: Domain,
    catalog_size: usize,
    interacted: &HashSet<u32>,
    n: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    if catalog_size < MIN_CATALOG {
        return Err(Error::InvalidArgument(format!(
            "domain {domain} catalog of {catalog_size} items is too small to rank against"
        )));
    }
    let pool: Vec<u32> = (1..=catalog_size as u32).filter(|i| !interacted.contains(i)).collect();
    if pool.len() <= n {
        return Ok(pool);
    }
    let mut r = rng::stream(seed, &format!("eval_negatives/{domain}/{user}"), 0);
    Ok(rand::seq::index::sample(&mut r, pool.len(), n)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

/// Pessimistic rank of the positive: one plus the number of other candidates
/// scoring at least as high.
pub fn rank_of(scores: &[f64], pos: usize) -> Result<usize> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score in ranking".into()));
    }
    let p = scores[pos];
    Ok(1 + scores.iter().enumerate().filter(|&(j, &s)| j != pos && s >= p).count())
}

/// `(hr, ndcg)` at cutoff `k` for one positive among the candidates.
pub fn rank_metrics(scores: &[f64], pos: usize, k: usize) -> Result<(f64, f64)> {
    let r = rank_of(scores, pos)?;
    Ok(metrics_from_rank(r, k))
}

pub fn metrics_from_rank(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Candidate list of one user in one domain: the positive first, then the
/// sampled negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidates {
    pub user: String,
    pub domain: Domain,
    pub items: Vec<u32>,
    /// How many negatives short of the requested count the user was.
    pub shortfall: usize,
}

/// Candidate lists for every example of `role` with a target in `domain`,
/// excluding each user's full interaction history from the negatives.
pub fn build_candidates(
    examples: &[UserExample],
    corpus: &Corpus,
    domain: Domain,
    role: Role,
    n: usize,
    seed: u64,
) -> Result<Vec<Candidates>> {
    let size = corpus.catalog_size(domain);
    examples
        .par_iter()
        .filter(|e| e.role == role)
        .filter_map(|e| e.domain(domain).target.map(|t| (e, t)))
        .map(|(e, target)| {
            let mut interacted: HashSet<u32> = corpus.domain(domain).history(&e.user).iter().copied().collect();
            interacted.extend(e.domain(domain).real());
            interacted.insert(target);
            let negs = sample_negatives(&e.user, domain, size, &interacted, n, seed)?;
            let mut items = Vec::with_capacity(negs.len() + 1);
            items.push(target);
            let shortfall = n - negs.len();
            items.extend(negs);
            Ok(Candidates {
                user: e.user.clone(),
                domain,
                items,
                shortfall,
            })
        })
        .collect()
}

/// Anything that scores candidate items for users.
pub trait Scorer: Sync {
    /// Scores of `candidates[i]` for `users[i]`.
    fn score(&self, users: &[&UserExample], domain: Domain, candidates: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

/// Trained model in evaluation mode.
pub struct ModelScorer<'a> {
    pub model: &'a ImVae,
    pub store: &'a ParamStore,
    pub route: ColdStartRoute,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, users: &[&UserExample], domain: Domain, candidates: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let h = self.model.user_vectors(self.store, users, domain, self.route)?;
        let table = self.store.value(self.model.encoder.tables.items(domain));
        candidates
            .par_iter()
            .enumerate()
            .map(|(r, items)| crate::objective::score(h.row(r).as_slice().expect("contiguous row"), table, items))
            .collect()
    }
}

/// Fixed pseudo-random scores, uniform in `[0, 1)` per `(seed, user, item)`.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, users: &[&UserExample], domain: Domain, candidates: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(users
            .iter()
            .zip(candidates)
            .map(|(u, items)| {
                let base = sub_seed(self.seed, &format!("random_scorer/{domain}/{}", u.user), 0);
                items
                    .iter()
                    .map(|&i| (sub_seed(base, "item", i as u64) >> 11) as f64 / (1u64 << 53) as f64)
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Tailed,
    ColdStart,
    All,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Tailed, Group::ColdStart, Group::All];

    pub fn contains(self, e: &UserExample, d: Domain) -> bool {
        match self {
            Group::Tailed => e.tags.tailed(d),
            Group::ColdStart => e.is_cold(d),
            Group::All => true,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::Tailed => "Tailed",
            Group::ColdStart => "Cold-start",
            Group::All => "All",
        }
    }
}

/// Outcome for one user and domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user: String,
    pub domain: Domain,
    pub rank: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// Mean and standard deviation (over seeds) of a percentage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub domain: Domain,
    pub group: Group,
    pub n_users: usize,
    /// Percentages; `None` for an empty group.
    pub hr_at_10: Option<Stat>,
    pub ndcg_at_10: Option<Stat>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub negative_seed: u64,
    pub role: Option<Role>,
    pub route: Option<ColdStartRoute>,
    /// Users whose negative pool was smaller than requested.
    pub shortfall_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub cells: Vec<GroupMetrics>,
}

impl EvalReport {
    pub fn cell(&self, domain: Domain, group: Group) -> &GroupMetrics {
        self.cells
            .iter()
            .find(|c| c.domain == domain && c.group == group)
            .expect("every domain × group cell is present")
    }

    /// NDCG@10 mean (percent) of a cell, 0 for an empty group.
    pub fn ndcg(&self, domain: Domain, group: Group) -> f64 {
        self.cell(domain, group).ndcg_at_10.map_or(0.0, |s| s.mean)
    }

    pub fn hr(&self, domain: Domain, group: Group) -> f64 {
        self.cell(domain, group).hr_at_10.map_or(0.0, |s| s.mean)
    }

    /// Mean ± standard deviation across per-seed reports of the same setup.
    pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
        let cells = first
            .cells
            .iter()
            .map(|c| {
                let collect = |f: &dyn Fn(&GroupMetrics) -> Option<Stat>| -> Vec<f64> {
                    reports
                        .iter()
                        .filter_map(|r| f(r.cell(c.domain, c.group)).map(|s| s.mean))
                        .collect()
                };
                GroupMetrics {
                    domain: c.domain,
                    group: c.group,
                    n_users: c.n_users,
                    hr_at_10: Stat::of(&collect(&|m| m.hr_at_10)),
                    ndcg_at_10: Stat::of(&collect(&|m| m.ndcg_at_10)),
                }
            })
            .collect();
        let mut metadata = first.metadata.clone();
        metadata.seeds = reports.iter().flat_map(|r| r.metadata.seeds.iter().copied()).collect();
        Ok(EvalReport { metadata, cells })
    }

    /// Rows Tailed / Cold-start / All × NDCG@10 / HR@10, one column per domain.
    pub fn to_table(&self) -> String {
        let fmt = |s: Option<Stat>| s.map_or_else(|| "-".to_string(), |s| s.to_string());
        let mut out = String::new();
        let _ = writeln!(out, "{:<11} {:<8} {:>14} {:>14}", "Users", "Metric", "X", "Y");
        for group in Group::ALL {
            for (metric, pick) in [
                (
                    "NDCG@10",
                    (|m: &GroupMetrics| m.ndcg_at_10) as fn(&GroupMetrics) -> Option<Stat>,
                ),
                ("HR@10", |m: &GroupMetrics| m.hr_at_10),
            ] {
                let _ = writeln!(
                    out,
                    "{:<11} {:<8} {:>14} {:>14}",
                    group.label(),
                    metric,
                    fmt(pick(self.cell(Domain::X, group))),
                    fmt(pick(self.cell(Domain::Y, group))),
                );
            }
        }
        for d in Domain::BOTH {
            let n: Vec<String> = Group::ALL
                .iter()
                .map(|g| format!("{}={}", g.label(), self.cell(d, *g).n_users))
                .collect();
            let _ = writeln!(out, "users {d}: {}", n.join(" "));
        }
        out
    }
}

/// Evaluation settings shared by every compared model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub role: Role,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            role: Role::Test,
            negatives: NUM_NEGATIVES,
            seed: 0,
        }
    }
}

/// Rank every `(user, domain)` with a target among its candidates.
pub fn evaluate_users(
    scorer: &dyn Scorer,
    examples: &[UserExample],
    corpus: &Corpus,
    cfg: &EvalConfig,
) -> Result<(Vec<UserOutcome>, usize)> {
    let mut outcomes = Vec::new();
    let mut shortfall = 0;
    for d in Domain::BOTH {
        let cands = build_candidates(examples, corpus, d, cfg.role, cfg.negatives, cfg.seed)?;
        shortfall += cands.iter().filter(|c| c.shortfall > 0).count();
        let by_user: std::collections::HashMap<&str, &UserExample> =
            examples.iter().map(|e| (e.user.as_str(), e)).collect();
        const CHUNK: usize = 1024;
        for chunk in cands.chunks(CHUNK) {
            let users: Vec<&UserExample> = chunk.iter().map(|c| by_user[c.user.as_str()]).collect();
            let items: Vec<&[u32]> = chunk.iter().map(|c| c.items.as_slice()).collect();
            let scores = scorer.score(&users, d, &items)?;
            for (c, s) in chunk.iter().zip(scores) {
                let rank = rank_of(&s, 0)?;
                let (hr, ndcg) = metrics_from_rank(rank, CUTOFF);
                outcomes.push(UserOutcome {
                    user: c.user.clone(),
                    domain: d,
                    rank,
                    hr,
                    ndcg,
                });
            }
        }
    }
    Ok((outcomes, shortfall))
}

/// Per-group report of one model on one seed.
pub fn evaluate(
    scorer: &dyn Scorer,
    examples: &[UserExample],
    corpus: &Corpus,
    cfg: &EvalConfig,
    metadata: EvalMetadata,
) -> Result<EvalReport> {
    let (outcomes, shortfall) = evaluate_users(scorer, examples, corpus, cfg)?;
    Ok(report_from_outcomes(&outcomes, examples, cfg, metadata, shortfall))
}

pub fn report_from_outcomes(
    outcomes: &[UserOutcome],
    examples: &[UserExample],
    cfg: &EvalConfig,
    mut metadata: EvalMetadata,
    shortfall: usize,
) -> EvalReport {
    let by_user: std::collections::HashMap<&str, &UserExample> =
        examples.iter().map(|e| (e.user.as_str(), e)).collect();
    let mut cells = Vec::new();
    for d in Domain::BOTH {
        for group in Group::ALL {
            let members: Vec<&UserOutcome> = outcomes
                .iter()
                .filter(|o| o.domain == d && group.contains(by_user[o.user.as_str()], d))
                .collect();
            let n = members.len();
            let pct = |f: fn(&UserOutcome) -> f64| {
                (n > 0).then(|| Stat {
                    mean: 100.0 * members.iter().map(|o| f(o)).sum::<f64>() / n as f64,
                    std: 0.0,
                })
            };
            cells.push(GroupMetrics {
                domain: d,
                group,
                n_users: n,
                hr_at_10: pct(|o| o.hr),
                ndcg_at_10: pct(|o| o.ndcg),
            });
        }
    }
    metadata.negative_seed = cfg.seed;
    metadata.role = Some(cfg.role);
    metadata.shortfall_users = shortfall;
    EvalReport { metadata, cells }
}
