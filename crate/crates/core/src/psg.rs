//! Pseudo-sequence generator: a light graph-convolution recall model over the
//! unified user–item graph of both domains.
//!
//! Items of the two domains share one index space: item `i` of domain X maps
//! to `i - 1`, item `j` of domain Y to `|V^X| + j - 1`. Propagation is
//! symmetric-normalized neighbour averaging without transforms or
//! nonlinearities; the output embedding of a node is the mean of its layer
//! outputs, layer 0 included.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{Domain, Role, UserExample, PAD};
use crate::error::{Error, Result};
use crate::params::{normal, Adam, ParamStore};
use crate::rng;

/// Which interactions become graph edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityPolicy {
    /// Input windows of every user (never evaluation targets).
    #[default]
    AllUsers,
    /// Input windows of training users only.
    TrainOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    pub users: Vec<String>,
    pub trainable: Vec<bool>,
    pub n_items_x: usize,
    pub n_items_y: usize,
    /// Sorted, unique `(user, unified item)` pairs.
    pub edges: Vec<(u32, u32)>,
    pub user_degree: Vec<u32>,
    pub item_degree: Vec<u32>,
    user_index: HashMap<String, u32>,
}

impl BipartiteGraph {
    pub fn new(
        users: Vec<String>,
        trainable: Vec<bool>,
        n_items_x: usize,
        n_items_y: usize,
        edges: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let edges: Vec<(u32, u32)> = edges.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if edges.is_empty() {
            return Err(Error::Empty("recall graph has no edges".into()));
        }
        let n_items = n_items_x + n_items_y;
        let mut user_degree = vec![0u32; users.len()];
        let mut item_degree = vec![0u32; n_items];
        for &(u, v) in &edges {
            if u as usize >= users.len() || v as usize >= n_items {
                return Err(Error::InvalidArgument(format!("edge ({u}, {v}) out of range")));
            }
            user_degree[u as usize] += 1;
            item_degree[v as usize] += 1;
        }
        let user_index = users.iter().enumerate().map(|(i, u)| (u.clone(), i as u32)).collect();
        Ok(Self {
            users,
            trainable,
            n_items_x,
            n_items_y,
            edges,
            user_degree,
            item_degree,
            user_index,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items_x + self.n_items_y
    }

    pub fn user(&self, name: &str) -> Option<u32> {
        self.user_index.get(name).copied()
    }

    pub fn unified(&self, domain: Domain, item: u32) -> u32 {
        debug_assert!(item != PAD);
        match domain {
            Domain::X => item - 1,
            Domain::Y => self.n_items_x as u32 + item - 1,
        }
    }

    pub fn local(&self, unified: u32) -> (Domain, u32) {
        if (unified as usize) < self.n_items_x {
            (Domain::X, unified + 1)
        } else {
            (Domain::Y, unified - self.n_items_x as u32 + 1)
        }
    }

    /// Unified index range of a domain's items.
    pub fn domain_range(&self, domain: Domain) -> std::ops::Range<usize> {
        match domain {
            Domain::X => 0..self.n_items_x,
            Domain::Y => self.n_items_x..self.n_items(),
        }
    }

    fn with_edges(&self, edges: Vec<(u32, u32)>) -> Result<Self> {
        Self::new(
            self.users.clone(),
            self.trainable.clone(),
            self.n_items_x,
            self.n_items_y,
            edges,
        )
    }
}

/// Build the recall graph from examples. Users keep the example order.
pub fn build_unified_graph(
    examples: &[UserExample],
    n_items_x: usize,
    n_items_y: usize,
    policy: VisibilityPolicy,
) -> Result<BipartiteGraph> {
    let users: Vec<String> = examples.iter().map(|e| e.user.clone()).collect();
    let trainable: Vec<bool> = examples.iter().map(|e| e.role == Role::Train).collect();
    let mut edges = Vec::new();
    for (u, e) in examples.iter().enumerate() {
        if policy == VisibilityPolicy::TrainOnly && e.role != Role::Train {
            continue;
        }
        for &item in e.x.real() {
            edges.push((u as u32, item - 1));
        }
        for &item in e.y.real() {
            edges.push((u as u32, n_items_x as u32 + item - 1));
        }
    }
    BipartiteGraph::new(users, trainable, n_items_x, n_items_y, edges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallEmbeddings {
    pub users: Mat,
    pub items: Mat,
    pub layers: usize,
}

impl RecallEmbeddings {
    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn random(n_users: usize, n_items: usize, d: usize, std: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "psg_init", 0);
        Self {
            users: normal(n_users, d, std, &mut r),
            items: normal(n_items, d, std, &mut r),
            layers: 0,
        }
    }

    fn is_finite(&self) -> bool {
        self.users.iter().chain(self.items.iter()).all(|x| x.is_finite())
    }

    pub fn score(&self, user: u32, item: u32) -> f64 {
        self.users.row(user as usize).dot(&self.items.row(item as usize))
    }
}

/// One propagation layer `Â·E` for the users/items blocks.
fn layer(graph: &BipartiteGraph, users: &Mat, items: &Mat) -> (Mat, Mat) {
    let d = users.ncols();
    let mut nu = Mat::zeros((graph.n_users(), d));
    let mut ni = Mat::zeros((graph.n_items(), d));
    for &(u, v) in &graph.edges {
        let w = 1.0 / ((graph.user_degree[u as usize] as f64) * (graph.item_degree[v as usize] as f64)).sqrt();
        nu.row_mut(u as usize).scaled_add(w, &items.row(v as usize));
        ni.row_mut(v as usize).scaled_add(w, &users.row(u as usize));
    }
    (nu, ni)
}

/// Mean of `layers + 1` propagation outputs. Nodes without edges keep their
/// input rows. The map is linear and self-adjoint, so it also back-propagates
/// gradients from output to input embeddings.
fn propagate_mats(graph: &BipartiteGraph, users: &Mat, items: &Mat, layers: usize) -> (Mat, Mat) {
    let mut su = users.clone();
    let mut si = items.clone();
    let (mut cu, mut ci) = (users.clone(), items.clone());
    for _ in 0..layers {
        let (nu, ni) = layer(graph, &cu, &ci);
        su += &nu;
        si += &ni;
        cu = nu;
        ci = ni;
    }
    let k = 1.0 / (layers as f64 + 1.0);
    su *= k;
    si *= k;
    for (u, &deg) in graph.user_degree.iter().enumerate() {
        if deg == 0 {
            su.row_mut(u).assign(&users.row(u));
        }
    }
    for (v, &deg) in graph.item_degree.iter().enumerate() {
        if deg == 0 {
            si.row_mut(v).assign(&items.row(v));
        }
    }
    (su, si)
}

pub fn propagate_embeddings(
    graph: &BipartiteGraph,
    initial: &RecallEmbeddings,
    layers: usize,
) -> Result<RecallEmbeddings> {
    if !initial.is_finite() {
        return Err(Error::Numerical("non-finite recall embeddings".into()));
    }
    if initial.users.nrows() != graph.n_users() || initial.items.nrows() != graph.n_items() {
        return Err(Error::Shape(format!(
            "embeddings {}+{} rows for graph with {} users and {} items",
            initial.users.nrows(),
            initial.items.nrows(),
            graph.n_users(),
            graph.n_items()
        )));
    }
    let (users, items) = propagate_mats(graph, &initial.users, &initial.items, layers);
    Ok(RecallEmbeddings { users, items, layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsgConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// L2 penalty on the layer-0 rows touched by a batch.
    pub reg: f64,
    pub neg_per_pos: usize,
    pub val_fraction: f64,
    pub eval_every: usize,
    /// Cutoff of the validation recall, normally the pseudo-sequence length.
    pub top_k: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for PsgConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 3,
            epochs: 1000,
            lr: 1e-3,
            batch_size: 2048,
            reg: 1e-4,
            neg_per_pos: 1,
            val_fraction: 0.2,
            eval_every: 10,
            top_k: 40,
            init_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsgEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsgReport {
    pub history: Vec<PsgEpoch>,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub train_edges: usize,
    pub val_edges: usize,
}

/// Held-out validation edges grouped by user.
struct Validation {
    by_user: Vec<(u32, Vec<u32>)>,
}

/// Mean recall@k over users' held-out edges, ranking same-domain items by
/// propagated scores and skipping items already in the training graph.
fn recall_at_k(
    emb_users: &Mat,
    emb_items: &Mat,
    train_graph: &BipartiteGraph,
    seen: &[HashSet<u32>],
    val: &Validation,
    k: usize,
) -> f64 {
    let per_pair: Vec<f64> = val
        .by_user
        .par_iter()
        .flat_map_iter(|(u, held)| {
            let mut out = Vec::new();
            for domain in Domain::BOTH {
                let range = train_graph.domain_range(domain);
                let targets: HashSet<u32> = held
                    .iter()
                    .copied()
                    .filter(|v| range.contains(&(*v as usize)))
                    .collect();
                if targets.is_empty() {
                    continue;
                }
                let urow = emb_users.row(*u as usize);
                let mut scored: Vec<(f64, u32)> = range
                    .clone()
                    .filter(|v| !seen[*u as usize].contains(&(*v as u32)))
                    .map(|v| (urow.dot(&emb_items.row(v)), v as u32))
                    .collect();
                let top = top_k_indices(&mut scored, k);
                let hits = top.iter().filter(|v| targets.contains(v)).count();
                out.push(hits as f64 / targets.len() as f64);
            }
            out
        })
        .collect();
    if per_pair.is_empty() {
        0.0
    } else {
        per_pair.iter().sum::<f64>() / per_pair.len() as f64
    }
}

/// Descending score, ascending index on ties.
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn top_k_indices(scored: &mut [(f64, u32)], k: usize) -> Vec<u32> {
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
    }
    let top = &mut scored[..k];
    top.sort_by(rank_order);
    top.iter().map(|(_, v)| *v).collect()
}

/// Pairwise-ranking training of the recall model. Positives are the edges of
/// training users; a `val_fraction` share of them is held out (and removed
/// from the propagation graph) to pick the best checkpoint by recall@k.
/// Returns layer-0 embeddings of the best checkpoint.
pub fn train_psg(graph: &BipartiteGraph, cfg: &PsgConfig) -> Result<(RecallEmbeddings, PsgReport)> {
    let mut r = rng::stream(cfg.seed, "psg_split", 0);
    let mut train_user_edges: Vec<(u32, u32)> = graph
        .edges
        .iter()
        .copied()
        .filter(|(u, _)| graph.trainable[*u as usize])
        .collect();
    if train_user_edges.is_empty() {
        return Err(Error::Empty("no training-user edges for the recall model".into()));
    }
    train_user_edges.shuffle(&mut r);
    let n_val = (cfg.val_fraction * train_user_edges.len() as f64).round() as usize;
    let val_edges: Vec<(u32, u32)> = train_user_edges[..n_val].to_vec();
    let mut positives: Vec<(u32, u32)> = train_user_edges[n_val..].to_vec();
    positives.sort_unstable();

    let val_set: HashSet<(u32, u32)> = val_edges.iter().copied().collect();
    let train_graph = graph.with_edges(graph.edges.iter().copied().filter(|e| !val_set.contains(e)).collect())?;
    let mut seen: Vec<HashSet<u32>> = vec![HashSet::new(); graph.n_users()];
    for &(u, v) in &train_graph.edges {
        seen[u as usize].insert(v);
    }
    let mut by_user: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
    for &(u, v) in &val_edges {
        by_user.entry(u).or_default().push(v);
    }
    let val = Validation {
        by_user: by_user.into_iter().collect(),
    };

    let init = RecallEmbeddings::random(graph.n_users(), graph.n_items(), cfg.dim, cfg.init_std, cfg.seed);
    let mut store = ParamStore::new();
    let uid = store.add("psg.users", init.users);
    let iid = store.add("psg.items", init.items);
    let mut opt = Adam::new(cfg.lr);

    let evaluate = |store: &ParamStore| {
        let (pu, pi) = propagate_mats(&train_graph, store.value(uid), store.value(iid), cfg.layers);
        recall_at_k(&pu, &pi, &train_graph, &seen, &val, cfg.top_k)
    };

    let mut best_recall = if val.by_user.is_empty() { 0.0 } else { evaluate(&store) };
    let mut best = (store.value(uid).clone(), store.value(iid).clone());
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let batch_size = cfg.batch_size.max(1);

    for epoch in 1..=cfg.epochs {
        let mut order = positives.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "psg_shuffle", epoch as u64));
        let mut neg_rng = rng::stream(cfg.seed, "psg_negatives", epoch as u64);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(batch_size) {
            let (pu, pi) = propagate_mats(&train_graph, store.value(uid), store.value(iid), cfg.layers);
            let mut gu = Mat::zeros(pu.dim());
            let mut gi = Mat::zeros(pi.dim());
            let mut reg_u = Mat::zeros(pu.dim());
            let mut reg_i = Mat::zeros(pi.dim());
            let n = (batch.len() * cfg.neg_per_pos) as f64;
            for &(u, pos) in batch {
                let (domain, _) = graph.local(pos);
                let range = graph.domain_range(domain);
                for _ in 0..cfg.neg_per_pos {
                    let neg = loop {
                        let cand = neg_rng.random_range(range.clone()) as u32;
                        if !seen[u as usize].contains(&cand) && !val_set.contains(&(u, cand)) {
                            break cand;
                        }
                        if seen[u as usize].len() >= range.len() {
                            break cand;
                        }
                    };
                    let eu = pu.row(u as usize);
                    let diff = eu.dot(&pi.row(pos as usize)) - eu.dot(&pi.row(neg as usize));
                    // -ln sigmoid(diff)
                    epoch_loss += (-diff).max(0.0) + (-diff.abs()).exp().ln_1p();
                    count += 1;
                    let coef = -1.0 / (1.0 + diff.exp()) / n;
                    let delta = &pi.row(pos as usize) - &pi.row(neg as usize);
                    gu.row_mut(u as usize).scaled_add(coef, &delta);
                    gi.row_mut(pos as usize).scaled_add(coef, &eu);
                    gi.row_mut(neg as usize).scaled_add(-coef, &eu);
                    let w = cfg.reg / n;
                    reg_u
                        .row_mut(u as usize)
                        .scaled_add(w, &store.value(uid).row(u as usize));
                    reg_i
                        .row_mut(pos as usize)
                        .scaled_add(w, &store.value(iid).row(pos as usize));
                    reg_i
                        .row_mut(neg as usize)
                        .scaled_add(w, &store.value(iid).row(neg as usize));
                }
            }
            let (mut g0u, mut g0i) = propagate_mats(&train_graph, &gu, &gi, cfg.layers);
            g0u += &reg_u;
            g0i += &reg_i;
            let mut grads = std::collections::BTreeMap::new();
            grads.insert(uid, g0u);
            grads.insert(iid, g0i);
            opt.step(&mut store, &grads);
        }
        let mean_loss = if count == 0 { 0.0 } else { epoch_loss / count as f64 };
        if !mean_loss.is_finite() || !store.is_finite() {
            return Err(Error::Numerical(format!("recall model diverged at epoch {epoch}")));
        }
        let val_recall = if !val.by_user.is_empty() && (epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs) {
            let rc = evaluate(&store);
            if rc > best_recall {
                best_recall = rc;
                best = (store.value(uid).clone(), store.value(iid).clone());
                best_epoch = epoch;
            }
            Some(rc)
        } else {
            None
        };
        log::debug!("psg epoch {epoch}: loss {mean_loss:.5} recall {val_recall:?}");
        history.push(PsgEpoch {
            epoch,
            loss: mean_loss,
            val_recall,
        });
    }
    if val.by_user.is_empty() {
        best = (store.value(uid).clone(), store.value(iid).clone());
        best_epoch = cfg.epochs;
    }
    Ok((
        RecallEmbeddings {
            users: best.0,
            items: best.1,
            layers: 0,
        },
        PsgReport {
            history,
            best_epoch,
            best_recall,
            train_edges: positives.len(),
            val_edges: val_edges.len(),
        },
    ))
}

/// Validation-style recall@k of arbitrary embeddings against held-out
/// `(user, unified item)` pairs, excluding each user's edges in `graph`.
pub fn recall_against(graph: &BipartiteGraph, emb: &RecallEmbeddings, held_out: &[(u32, u32)], k: usize) -> f64 {
    let mut seen: Vec<HashSet<u32>> = vec![HashSet::new(); graph.n_users()];
    for &(u, v) in &graph.edges {
        seen[u as usize].insert(v);
    }
    let mut by_user: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
    for &(u, v) in held_out {
        by_user.entry(u).or_default().push(v);
    }
    let val = Validation {
        by_user: by_user.into_iter().collect(),
    };
    recall_at_k(&emb.users, &emb.items, graph, &seen, &val, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Recalled,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoSequence {
    pub domain: Domain,
    /// Domain-local item indices, left-padded with [`PAD`] to the full length.
    pub items: Vec<u32>,
    pub provenance: Vec<Option<Provenance>>,
}

impl PseudoSequence {
    pub fn recalled(&self) -> impl Iterator<Item = u32> + '_ {
        self.items
            .iter()
            .zip(&self.provenance)
            .filter(|(_, p)| **p == Some(Provenance::Recalled))
            .map(|(i, _)| *i)
    }
}

fn assemble(domain: Domain, history: &[u32], recalled: &[u32], t_prime: usize) -> PseudoSequence {
    let original = &history[history.len().saturating_sub(t_prime)..];
    let room = t_prime - original.len();
    let recalled = &recalled[..recalled.len().min(room)];
    let pad = t_prime - original.len() - recalled.len();
    let mut items = vec![PAD; pad];
    let mut provenance = vec![None; pad];
    items.extend_from_slice(original);
    provenance.extend(std::iter::repeat_n(Some(Provenance::Original), original.len()));
    items.extend_from_slice(recalled);
    provenance.extend(std::iter::repeat_n(Some(Provenance::Recalled), recalled.len()));
    PseudoSequence {
        domain,
        items,
        provenance,
    }
}

/// Pseudo-sequence of `t_prime` items: the user's real `history` followed by
/// the highest-scoring same-domain items outside it. Users without any graph
/// edge fall back to item popularity.
pub fn generate_pseudo(
    emb: &RecallEmbeddings,
    graph: &BipartiteGraph,
    user: u32,
    domain: Domain,
    history: &[u32],
    t_prime: usize,
) -> PseudoSequence {
    let range = graph.domain_range(domain);
    let exclude: HashSet<u32> = history.iter().copied().collect();
    let isolated = graph.user_degree[user as usize] == 0;
    let urow = emb.users.row(user as usize);
    let mut scored: Vec<(f64, u32)> = range
        .clone()
        .map(|v| {
            let local = graph.local(v as u32).1;
            let score = if isolated {
                graph.item_degree[v] as f64
            } else {
                urow.dot(&emb.items.row(v))
            };
            (score, local)
        })
        .filter(|(_, local)| !exclude.contains(local))
        .collect();
    let room = t_prime.saturating_sub(history.len().min(t_prime));
    let recalled = top_k_indices(&mut scored, room);
    assemble(domain, history, &recalled, t_prime)
}

/// Fill `pseudo` of every example from propagated embeddings.
pub fn fill_pseudo_sequences(
    examples: &mut [UserExample],
    graph: &BipartiteGraph,
    emb: &RecallEmbeddings,
    t_prime: usize,
) -> Result<()> {
    let rows: Vec<Option<u32>> = examples.iter().map(|e| graph.user(&e.user)).collect();
    if let Some(i) = rows.iter().position(Option::is_none) {
        return Err(Error::InvalidArgument(format!(
            "user {} is not in the recall graph",
            examples[i].user
        )));
    }
    examples.par_iter_mut().zip(rows).for_each(|(e, row)| {
        let u = row.expect("checked");
        for d in Domain::BOTH {
            let seq = generate_pseudo(emb, graph, u, d, e.domain(d).real(), t_prime);
            e.domain_mut(d).pseudo = seq.items;
        }
    });
    Ok(())
}

/// Replace every pseudo-sequence by `t_prime` uniformly random items of the
/// same domain.
pub fn random_pseudo_sequences(
    examples: &mut [UserExample],
    n_items_x: usize,
    n_items_y: usize,
    t_prime: usize,
    seed: u64,
) {
    let mut r = rng::stream(seed, "random_pseudo", 0);
    for e in examples.iter_mut() {
        for (d, n) in [(Domain::X, n_items_x), (Domain::Y, n_items_y)] {
            e.domain_mut(d).pseudo = (0..t_prime).map(|_| r.random_range(1..=n as u32)).collect();
        }
    }
}
