//! Two-domain interaction corpus: ingestion, user splits, cold-start
//! simulation and fixed-length training/evaluation examples.

mod ingest;
mod split;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{ingest_ratings, IngestOptions, IngestStats, Interaction, InteractionLog};
pub use split::{simulate_cold_start, split_users, Role, UserSplit};

/// Reserved item index for padding; real items start at 1.
pub const PAD: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::X, Domain::Y];

    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::X => "X",
            Domain::Y => "Y",
        })
    }
}

/// Item vocabulary of one domain. Raw ids are sorted and numbered from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "CatalogRepr", from = "CatalogRepr")]
pub struct Catalog {
    pub domain: Domain,
    ids: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Catalog {
    pub fn new(domain: Domain, mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        let lookup = ids.iter().enumerate().map(|(i, s)| (s.clone(), i as u32 + 1)).collect();
        Self { domain, ids, lookup }
    }

    /// Number of real items (excluding padding).
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index(&self, raw: &str) -> Option<u32> {
        self.lookup.get(raw).copied()
    }

    pub fn raw(&self, index: u32) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.ids.get(i as usize))
            .map(String::as_str)
    }
}

#[derive(Serialize, Deserialize)]
struct CatalogRepr {
    domain: Domain,
    ids: Vec<String>,
}

impl From<Catalog> for CatalogRepr {
    fn from(c: Catalog) -> Self {
        Self {
            domain: c.domain,
            ids: c.ids,
        }
    }
}

impl From<CatalogRepr> for Catalog {
    fn from(r: CatalogRepr) -> Self {
        Catalog::new(r.domain, r.ids)
    }
}

/// Indexed chronological histories of one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainHistory {
    pub catalog: Catalog,
    pub sequences: BTreeMap<String, Vec<u32>>,
}

impl DomainHistory {
    pub fn from_log(log: &InteractionLog) -> Self {
        let catalog = Catalog::new(log.domain, log.items().into_iter().map(String::from).collect());
        let sequences = log
            .sequences()
            .into_iter()
            .map(|(u, items)| {
                let idx = items.iter().map(|i| catalog.index(i).expect("catalog item")).collect();
                (u.to_string(), idx)
            })
            .collect();
        Self { catalog, sequences }
    }

    pub fn history(&self, user: &str) -> &[u32] {
        self.sequences.get(user).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub x: DomainHistory,
    pub y: DomainHistory,
}

impl Corpus {
    pub fn from_logs(log_x: &InteractionLog, log_y: &InteractionLog) -> Self {
        Self {
            x: DomainHistory::from_log(log_x),
            y: DomainHistory::from_log(log_y),
        }
    }

    pub fn domain(&self, d: Domain) -> &DomainHistory {
        match d {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }

    pub fn catalog_size(&self, d: Domain) -> usize {
        self.domain(d).catalog.len()
    }
}

/// One user's view of one domain.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSlice {
    /// Most recent inputs, left-padded with [`PAD`] to the window length.
    pub seq: Vec<u32>,
    pub true_len: usize,
    /// Pseudo-sequence; empty until recalled.
    pub pseudo: Vec<u32>,
    pub target: Option<u32>,
}

impl DomainSlice {
    /// Unpadded input items.
    pub fn real(&self) -> &[u32] {
        &self.seq[self.seq.len() - self.true_len..]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tags {
    pub tailed_x: bool,
    pub tailed_y: bool,
    pub cold_start: bool,
    pub overlapping: bool,
}

impl Tags {
    pub fn tailed(&self, d: Domain) -> bool {
        match d {
            Domain::X => self.tailed_x,
            Domain::Y => self.tailed_y,
        }
    }

    fn set_tailed(&mut self, d: Domain, v: bool) {
        match d {
            Domain::X => self.tailed_x = v,
            Domain::Y => self.tailed_y = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserExample {
    pub user: String,
    pub role: Role,
    pub x: DomainSlice,
    pub y: DomainSlice,
    pub cold_start_domain: Option<Domain>,
    pub tags: Tags,
}

impl UserExample {
    pub fn domain(&self, d: Domain) -> &DomainSlice {
        match d {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }

    pub fn domain_mut(&mut self, d: Domain) -> &mut DomainSlice {
        match d {
            Domain::X => &mut self.x,
            Domain::Y => &mut self.y,
        }
    }

    pub fn is_cold(&self, d: Domain) -> bool {
        self.cold_start_domain == Some(d)
    }
}

fn left_pad(items: &[u32], t: usize) -> Vec<u32> {
    let recent = &items[items.len().saturating_sub(t)..];
    let mut seq = vec![PAD; t - recent.len()];
    seq.extend_from_slice(recent);
    seq
}

fn slice_for(history: &[u32], t: usize, withheld: bool, cold: bool) -> DomainSlice {
    let Some((&target, before)) = history.split_last() else {
        return DomainSlice {
            seq: vec![PAD; t],
            ..Default::default()
        };
    };
    if withheld {
        return DomainSlice {
            seq: vec![PAD; t],
            ..Default::default()
        };
    }
    if cold {
        return DomainSlice {
            seq: vec![PAD; t],
            true_len: 0,
            pseudo: Vec::new(),
            target: Some(target),
        };
    }
    // Earlier repeats of the target are dropped so it never appears in the input.
    let inputs: Vec<u32> = before.iter().copied().filter(|&i| i != target).collect();
    let seq = left_pad(&inputs, t);
    let true_len = inputs.len().min(t);
    DomainSlice {
        seq,
        true_len,
        pseudo: Vec::new(),
        target: Some(target),
    }
}

/// Leave-one-out examples with a window of the `t` most recent inputs per
/// domain, one per user of the split, ordered by user id.
pub fn build_examples(corpus: &Corpus, split: &UserSplit, t: usize) -> Result<Vec<UserExample>> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("window length T = {t} must be >= 2")));
    }
    let examples = split
        .roles
        .iter()
        .map(|(user, &role)| {
            let cold = split.cold_start.get(user).copied();
            let dropped = split.dropped_domain.get(user).copied();
            let make = |d: Domain| slice_for(corpus.domain(d).history(user), t, dropped == Some(d), cold == Some(d));
            UserExample {
                user: user.clone(),
                role,
                x: make(Domain::X),
                y: make(Domain::Y),
                cold_start_domain: cold,
                tags: Tags {
                    tailed_x: false,
                    tailed_y: false,
                    cold_start: cold.is_some(),
                    overlapping: split.overlapping.contains(user),
                },
            }
        })
        .collect();
    Ok(examples)
}

/// Mean length of the shortest `max(1, floor(0.8 n))` lengths.
pub fn tail_threshold(lengths: &[usize]) -> Option<f64> {
    if lengths.is_empty() {
        return None;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let k = ((lengths.len() as f64 * 0.8).floor() as usize).max(1);
    Some(sorted[..k].iter().sum::<usize>() as f64 / k as f64)
}

/// Mark users of `domain` whose input length is strictly below the mean
/// length of the bottom 80% of users. Only users with a target in the domain
/// and not cold-started there take part. Returns the threshold.
pub fn tag_user_groups(examples: &mut [UserExample], domain: Domain) -> Option<f64> {
    let eligible = |e: &UserExample| e.domain(domain).target.is_some() && !e.is_cold(domain);
    let lengths: Vec<usize> = examples
        .iter()
        .filter(|e| eligible(e))
        .map(|e| e.domain(domain).true_len)
        .collect();
    let threshold = tail_threshold(&lengths);
    for e in examples.iter_mut() {
        let tailed = match threshold {
            Some(th) if eligible(e) => (e.domain(domain).true_len as f64) < th,
            _ => false,
        };
        e.tags.set_tailed(domain, tailed);
        e.tags.cold_start = e.cold_start_domain.is_some();
    }
    threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(items: &[u32]) -> Vec<u32> {
        items.to_vec()
    }

    #[test]
    fn leave_one_out_with_left_padding() {
        let s = slice_for(&hist(&[1, 2]), 4, false, false);
        assert_eq!(s.seq, vec![PAD, PAD, PAD, 1]);
        assert_eq!(s.target, Some(2));
        assert_eq!(s.true_len, 1);
        assert_eq!(s.real(), &[1]);
    }

    #[test]
    fn window_keeps_most_recent() {
        let s = slice_for(&hist(&[1, 2, 3, 4]), 2, false, false);
        assert_eq!(s.seq, vec![2, 3]);
        assert_eq!(s.target, Some(4));
    }

    #[test]
    fn single_interaction_gives_target_only() {
        let s = slice_for(&hist(&[7]), 3, false, false);
        assert_eq!(s.seq, vec![PAD; 3]);
        assert_eq!(s.true_len, 0);
        assert_eq!(s.target, Some(7));
    }

    #[test]
    fn cold_domain_keeps_only_last_as_target() {
        let s = slice_for(&hist(&[1, 2, 3]), 4, false, true);
        assert_eq!(s.true_len, 0);
        assert_eq!(s.target, Some(3));
        assert_eq!(s.seq, vec![PAD; 4]);
    }

    #[test]
    fn repeated_target_is_removed_from_inputs() {
        let s = slice_for(&hist(&[5, 1, 5]), 4, false, false);
        assert_eq!(s.real(), &[1]);
        assert_eq!(s.target, Some(5));
    }

    #[test]
    fn tail_threshold_examples() {
        assert_eq!(tail_threshold(&[1, 2, 3, 4, 10]), Some(2.5));
        assert_eq!(tail_threshold(&[3, 3, 3]), Some(3.0));
        assert_eq!(tail_threshold(&[6]), Some(6.0));
        assert_eq!(tail_threshold(&[]), None);
    }

    fn example(user: &str, len: usize) -> UserExample {
        let mut seq = vec![PAD; 12];
        for i in 0..len {
            seq[12 - len + i] = i as u32 + 1;
        }
        UserExample {
            user: user.into(),
            role: Role::Test,
            x: DomainSlice {
                seq,
                true_len: len,
                pseudo: Vec::new(),
                target: Some(99),
            },
            y: DomainSlice::default(),
            cold_start_domain: None,
            tags: Tags::default(),
        }
    }

    #[test]
    fn tagging_marks_strictly_shorter_users() {
        let mut ex: Vec<_> = [1, 2, 3, 4, 10]
            .iter()
            .enumerate()
            .map(|(i, &l)| example(&format!("u{i}"), l))
            .collect();
        let th = tag_user_groups(&mut ex, Domain::X);
        assert_eq!(th, Some(2.5));
        let tailed: Vec<bool> = ex.iter().map(|e| e.tags.tailed_x).collect();
        assert_eq!(tailed, vec![true, true, false, false, false]);

        let mut equal: Vec<_> = (0..4).map(|i| example(&format!("e{i}"), 3)).collect();
        tag_user_groups(&mut equal, Domain::X);
        assert!(equal.iter().all(|e| !e.tags.tailed_x));

        let mut single = vec![example("s", 2)];
        tag_user_groups(&mut single, Domain::X);
        assert!(!single[0].tags.tailed_x);
    }

    #[test]
    fn catalog_indices_start_at_one() {
        let c = Catalog::new(Domain::Y, vec!["b".into(), "a".into(), "b".into()]);
        assert_eq!(c.len(), 2);
        assert_eq!(c.index("a"), Some(1));
        assert_eq!(c.raw(2), Some("b"));
        assert_eq!(c.raw(PAD), None);
    }
}
