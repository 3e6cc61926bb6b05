//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Exact oracles and invariants make the process fail when they do not hold.
//! The directional comparisons between trained variants are experiments on
//! synthetic data; their lines are printed either way and only fail the
//! process when `ACCEPTANCE_STRICT=1`.
//!
//! Run with `cargo test --release -p imvae --test acceptance`.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;

use imvae::corpus::{Domain, Role, UserExample};
use imvae::evalharness::{
    self, build_candidates, rank_metrics, EvalConfig, EvalMetadata, EvalReport, Group, RandomScorer,
};
use imvae::experiment::{evaluate_variant, generate_pseudo_sequences, prepare, train_variant, CorpusParams, Prepared};
use imvae::model::{Batch, ColdStartRoute, ImVae};
use imvae::objective::{adaptive_weight, kl_diag_gaussians};
use imvae::params::ParamStore;
use imvae::psg::{build_unified_graph, generate_pseudo, propagate_embeddings, RecallEmbeddings, VisibilityPolicy};
use imvae::rng::stream;
use imvae::synthetic::{generate, SyntheticConfig};
use imvae::trainer::{Ablation, RunConfig};
use imvae::varinf::{CrossMode, GaussianParams};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const T: usize = 10;
const T_PRIME: usize = 20;

/// Whether a failing line fails the process.
#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Exact,
    Directional,
}

struct Line {
    name: &'static str,
    kind: Kind,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(name: &'static str, kind: Kind, f: impl FnOnce() -> (bool, String)) -> Line {
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let line = Line {
        name,
        kind,
        pass,
        detail,
        elapsed: start.elapsed(),
    };
    println!(
        "{} {:<34} {:>8.1}s  {}",
        if line.pass { "PASS" } else { "FAIL" },
        line.name,
        line.elapsed.as_secs_f64(),
        line.detail
    );
    line
}

fn metric_oracle() -> (bool, String) {
    let mut r = stream(0, "acceptance/metric_oracle", 0);
    let mut mismatches = 0;
    let mut ties = 0;
    for v in 0..10_000 {
        // alternate coarse grids (many ties with the positive) and continuous scores
        let scores: Vec<f64> = (0..1000)
            .map(|_| match v % 3 {
                0 => r.random_range(0..20) as f64,
                1 => r.random_range(0..400) as f64 * 0.01,
                _ => r.random::<f64>(),
            })
            .collect();
        let pos = r.random_range(0..1000);
        ties += usize::from(scores.iter().enumerate().any(|(i, &s)| i != pos && s == scores[pos]));
        if rank_metrics(&scores, pos, 10).unwrap() != common::brute_force_metrics(&scores, pos, 10) {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("10000 vectors of 1000, {ties} with ties at the positive, {mismatches} mismatches"),
    )
}

/// Monte-Carlo estimate of KL(q‖p) with its standard error.
fn kl_monte_carlo(q: &GaussianParams, p: &GaussianParams, n: usize, seed: u64) -> (f64, f64) {
    let mut r = stream(seed, "acceptance/kl_mc", 0);
    let log_density = |g: &GaussianParams, x: &[f64]| -> f64 {
        x.iter()
            .zip(g.mu.iter().zip(&g.sigma))
            .map(|(x, (m, s))| -0.5 * ((x - m) / s).powi(2) - s.ln())
            .sum()
    };
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut x = vec![0.0; q.dim()];
    for _ in 0..n {
        for (k, xk) in x.iter_mut().enumerate() {
            let e: f64 = r.sample(StandardNormal);
            *xk = q.mu[k] + q.sigma[k] * e;
        }
        let v = log_density(q, &x) - log_density(p, &x);
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    (mean, (var / n as f64).sqrt())
}

fn kl_closed_form() -> (bool, String) {
    let g = |mu: &[f64], sigma: &[f64]| GaussianParams {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
    };
    let std1 = GaussianParams::standard(1);
    let e = std::f64::consts::E;
    let analytic = [
        (g(&[0.0], &[1.0]), 0.0),
        (g(&[1.0], &[1.0]), 0.5),
        (g(&[0.0], &[e]), (e * e - 3.0) / 2.0),
    ];
    let mut ok = true;
    let mut worst = 0.0f64;
    for (q, want) in &analytic {
        let err = (kl_diag_gaussians(q, &std1) - want).abs();
        worst = worst.max(err);
        ok &= err <= 1e-9;
    }
    let mc_cases = [
        (g(&[1.0], &[1.0]), std1.clone()),
        (g(&[0.0], &[e]), std1.clone()),
        (
            g(&[0.3, -1.2, 2.0], &[0.5, 1.7, 0.9]),
            g(&[-0.4, 0.1, 1.0], &[1.3, 0.6, 2.2]),
        ),
    ];
    let mut worst_z = 0.0f64;
    for (i, (q, p)) in mc_cases.iter().enumerate() {
        let (mean, se) = kl_monte_carlo(q, p, 1_000_000, i as u64);
        let z = (mean - kl_diag_gaussians(q, p)).abs() / se;
        worst_z = worst_z.max(z);
        ok &= z <= 3.0;
    }
    (
        ok,
        format!("worst analytic error {worst:.1e}; worst Monte-Carlo deviation {worst_z:.2} SE (1e6 samples)"),
    )
}

fn adaptive_weight_values() -> (bool, String) {
    let t = 20;
    let checks = [(0, 0.2), (t, 0.8f64.exp() - 0.8), (t / 2, 0.4f64.exp() - 0.8)];
    let worst = checks
        .iter()
        .map(|&(l, want)| (adaptive_weight(l, t).unwrap() - want).abs())
        .fold(0.0, f64::max);
    let w: Vec<f64> = (0..=t).map(|l| adaptive_weight(l, t).unwrap()).collect();
    let monotone = w.windows(2).all(|p| p[1] > p[0]);
    (
        worst <= 1e-6 && monotone,
        format!("T={t}: worst error {worst:.1e}, strictly increasing over 0..=T: {monotone}"),
    )
}

fn gradient_check() -> (bool, String) {
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [CrossMode::Attention, CrossMode::Mlp] {
        let r = common::gradient_check(mode);
        ok &= r.worst < 1e-4 && r.checked_groups * 10 >= r.groups * 9;
        parts.push(format!(
            "{mode:?} {}/{} groups, worst rel {:.1e}",
            r.checked_groups, r.groups, r.worst
        ));
    }
    (ok, format!("d=4 T=3 T'=5: {}", parts.join("; ")))
}

/// Sharp, low-rank preferences over catalogs large enough that every
/// evaluation user gets the full 999 negatives.
fn synthetic(users: usize) -> SyntheticConfig {
    SyntheticConfig {
        users,
        items_x: 2000,
        items_y: 1900,
        shared_dim: 4,
        specific_dim: 4,
        temperature: 0.1,
        ..Default::default()
    }
}

fn psg_config() -> imvae::psg::PsgConfig {
    imvae::psg::PsgConfig {
        dim: 32,
        layers: 2,
        epochs: 60,
        lr: 5e-3,
        batch_size: 1024,
        top_k: T_PRIME,
        eval_every: 5,
        ..Default::default()
    }
}

fn run_config(seed: u64, ablation: Ablation) -> RunConfig {
    RunConfig {
        d: 32,
        batch: 64,
        lr: 2e-3,
        epochs: 15,
        t: T,
        t_prime: T_PRIME,
        heads: 2,
        lambda_t: 5e-3,
        lambda_a: 5e-3,
        neg_per_pos: 10,
        valid_negatives: 999,
        seed,
        ablation,
        ..Default::default()
    }
}

/// The 2,000-user corpus at overlap ratio `k_o`, with pseudo-sequences and
/// the propagated recall embeddings that produced them.
fn prepared(k_o: f64) -> (Prepared, RecallEmbeddings) {
    let syn = generate(&synthetic(2000)).unwrap();
    let mut p = prepare(
        &syn.log_x,
        &syn.log_y,
        &CorpusParams {
            t: T,
            k_o,
            k_cs: 0.2,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = psg_config();
    let (emb, _) = generate_pseudo_sequences(&mut p, &cfg, T_PRIME).unwrap();
    let graph = build_unified_graph(
        &p.examples,
        p.n_items(Domain::X),
        p.n_items(Domain::Y),
        VisibilityPolicy::AllUsers,
    )
    .unwrap();
    let propagated = propagate_embeddings(&graph, &emb, cfg.layers).unwrap();
    (p, propagated)
}

/// Replace one domain's inputs by random items, keeping the other intact.
fn scramble(e: &UserExample, d: Domain, n_items: usize, r: &mut imvae::rng::Rng) -> UserExample {
    let mut out = e.clone();
    let s = out.domain_mut(d);
    let len = r.random_range(0..=T);
    s.seq = vec![imvae::corpus::PAD; T - len];
    s.seq.extend((0..len).map(|_| r.random_range(1..=n_items as u32)));
    s.true_len = len;
    s.pseudo = (0..T_PRIME).map(|_| r.random_range(1..=n_items as u32)).collect();
    out
}

fn factorization_and_leaks(p: &Prepared) -> (bool, String) {
    let (nx, ny) = (p.n_items(Domain::X), p.n_items(Domain::Y));
    let mut r = stream(0, "acceptance/users", 0);
    let picked: Vec<usize> = sample(&mut r, p.examples.len(), 1000).into_vec();
    let users: Vec<&UserExample> = picked.iter().map(|&i| &p.examples[i]).collect();

    let config = run_config(0, Ablation::default()).model_config(nx, ny);
    let mut store = ParamStore::new();
    let model = ImVae::new(config.clone(), &mut store, &mut stream(0, "init", 0)).unwrap();
    let base = model.posteriors(&store, &users).unwrap();
    let mut failures = 0;
    for (d, n) in [(Domain::Y, ny), (Domain::X, nx)] {
        let perturbed: Vec<UserExample> = users.iter().map(|e| scramble(e, d, n, &mut r)).collect();
        let post = model.posteriors(&store, &perturbed.iter().collect::<Vec<_>>()).unwrap();
        for (a, b) in base.iter().zip(&post) {
            let same = match d {
                Domain::Y => a.z_x == b.z_x && a.z_a_x == b.z_a_x && a.r_x == b.r_x,
                Domain::X => a.z_y == b.z_y && a.z_a_y == b.z_a_y && a.r_y == b.r_y,
            };
            failures += usize::from(!same);
        }
    }

    let graph = build_unified_graph(&p.examples, nx, ny, VisibilityPolicy::AllUsers).unwrap();
    let edges: HashSet<(u32, u32)> = graph.edges.iter().copied().collect();
    let batch = Batch::sample(users.clone(), &config, &mut stream(0, "negatives", 0));
    let mut targets = 0;
    let mut recalled_targets = 0;
    for (k, (&row, e)) in picked.iter().zip(&users).enumerate() {
        for d in Domain::BOTH {
            let s = e.domain(d);
            let Some(target) = s.target else { continue };
            targets += 1;
            let mut leaked = s.seq.contains(&target) || edges.contains(&(row as u32, graph.unified(d, target)));
            leaked |= batch.negatives(d).iter().any(|negs| negs[k] == target);
            if e.role != Role::Train {
                let cands = build_candidates(std::slice::from_ref(*e), &p.corpus, d, e.role, 999, 0).unwrap();
                leaked |= cands[0].items[1..].contains(&target);
            }
            failures += usize::from(leaked);
            recalled_targets += usize::from(s.pseudo.contains(&target));
        }
    }
    (
        failures == 0,
        format!(
            "1000 users, {targets} targets, {failures} failures ({recalled_targets} targets recalled by the graph model)"
        ),
    )
}

fn pseudo_sequence_properties(p: &Prepared, emb: &RecallEmbeddings) -> (bool, String) {
    let (nx, ny) = (p.n_items(Domain::X), p.n_items(Domain::Y));
    let graph = build_unified_graph(&p.examples, nx, ny, VisibilityPolicy::AllUsers).unwrap();
    let mut failures = 0;
    let mut checked = 0;
    for (u, e) in p.examples.iter().enumerate() {
        for d in Domain::BOTH {
            let history = e.domain(d).real();
            let seq = generate_pseudo(emb, &graph, u as u32, d, history, T_PRIME);
            let recalled: Vec<u32> = seq.recalled().collect();
            let n = p.n_items(d) as u32;
            let isolated = graph.user_degree[u] == 0;
            let score = |i: u32| {
                let v = graph.unified(d, i);
                if isolated {
                    graph.item_degree[v as usize] as f64
                } else {
                    emb.score(u as u32, v)
                }
            };
            let unique: HashSet<u32> = recalled.iter().copied().collect();
            let ok = seq.items == e.domain(d).pseudo
                && seq.domain == d
                && unique.len() == recalled.len()
                && recalled.iter().all(|i| (1..=n).contains(i) && !history.contains(i))
                && recalled.windows(2).all(|w| {
                    let (a, b) = (score(w[0]), score(w[1]));
                    a > b || (a == b && w[0] < w[1])
                });
            failures += usize::from(!ok);
            checked += 1;
        }
    }

    let zero = propagate_embeddings(
        &graph,
        &RecallEmbeddings::random(graph.n_users(), graph.n_items(), 8, 1.0, 1),
        0,
    )
    .unwrap();
    let base = RecallEmbeddings::random(graph.n_users(), graph.n_items(), 8, 1.0, 1);
    let identity = zero.users == base.users && zero.items == base.items;
    let a = -2.5;
    let scaled = RecallEmbeddings {
        users: &base.users * a,
        items: &base.items * a,
        layers: 0,
    };
    let p1 = propagate_embeddings(&graph, &base, 3).unwrap();
    let p2 = propagate_embeddings(&graph, &scaled, 3).unwrap();
    let linear = p1
        .users
        .iter()
        .chain(p1.items.iter())
        .zip(p2.users.iter().chain(p2.items.iter()))
        .all(|(x, y)| (a * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
    (
        failures == 0 && identity && linear,
        format!(
            "{checked} sequences, {failures} failures; 0-layer identity: {identity}; linear under scaling: {linear}"
        ),
    )
}

fn random_baseline() -> (bool, String) {
    let syn = generate(&SyntheticConfig {
        users: 6000,
        ..Default::default()
    })
    .unwrap();
    let p = prepare(
        &syn.log_x,
        &syn.log_y,
        &CorpusParams {
            t: T,
            ratios: [0.1, 0.05, 0.85],
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = EvalConfig {
        role: Role::Test,
        negatives: evalharness::NUM_NEGATIVES,
        seed: 0,
    };
    let report = evalharness::evaluate(
        &RandomScorer { seed: 0 },
        &p.examples,
        &p.corpus,
        &cfg,
        EvalMetadata::default(),
    )
    .unwrap();
    let users = p.examples.iter().filter(|e| e.role == Role::Test).count();
    let (mut hits, mut n) = (0.0, 0);
    let mut per_domain = Vec::new();
    for d in Domain::BOTH {
        let c = report.cell(d, Group::All);
        hits += report.hr(d, Group::All) * c.n_users as f64;
        n += c.n_users;
        per_domain.push(format!("{d} {:.2}%", report.hr(d, Group::All)));
    }
    let hr = hits / n as f64;
    (
        users >= 5000 && (hr - 1.0).abs() <= 0.3 && report.metadata.shortfall_users == 0,
        format!(
            "{users} test users, {n} rankings: HR@10 {hr:.3}% ({}), shortfall users {}",
            per_domain.join(", "),
            report.metadata.shortfall_users
        ),
    )
}

/// Mean over the two domains of one group's NDCG@10.
fn ndcg(r: &EvalReport, g: Group) -> f64 {
    Domain::BOTH.iter().map(|&d| r.ndcg(d, g)).sum::<f64>() / 2.0
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

/// Test reports of one variant over every seed, one per requested route
/// (`None` is the variant's own route).
fn reports(p: &Prepared, ablation: Ablation, routes: &[Option<ColdStartRoute>]) -> Vec<Vec<EvalReport>> {
    let mut out = vec![Vec::new(); routes.len()];
    for seed in SEEDS {
        let config = run_config(seed, ablation);
        let (outcome, inputs) = train_variant(p, &config, &mut |_, _, _| Ok(())).unwrap();
        for (k, route) in routes.iter().enumerate() {
            let route = route.unwrap_or(config.eval_route());
            out[k].push(evaluate_variant(p, &outcome, &inputs, route, 0, EvalMetadata::default()).unwrap());
        }
    }
    out
}

fn ablation_directions(p: &Prepared) -> [(bool, String); 2] {
    let full = reports(p, Ablation::default(), &[None]).remove(0);
    let no_if_ds = reports(p, Ablation::parse("no_if_ds").unwrap(), &[None]).remove(0);
    let no_dn = reports(p, Ablation::parse("no_dn").unwrap(), &[None]).remove(0);
    let compare = |other: &[EvalReport], g: Group, label: &str| {
        let a: Vec<f64> = full.iter().map(|r| ndcg(r, g)).collect();
        let b: Vec<f64> = other.iter().map(|r| ndcg(r, g)).collect();
        let gain = mean(&a) - mean(&b);
        (
            gain > 0.0,
            format!(
                "{} NDCG@10 full {} vs {label} {} -> mean gain {gain:+.3}",
                g.label(),
                fmt(&a),
                fmt(&b)
            ),
        )
    };
    [
        compare(&no_if_ds, Group::ColdStart, "no_if_ds"),
        compare(&no_dn, Group::Tailed, "no_dn"),
    ]
}

fn overlap_directions() -> (bool, String) {
    let routes = [Some(ColdStartRoute::Auxiliary), Some(ColdStartRoute::CrossEncoder)];
    let mut cold = Vec::new();
    for k_o in [0.25, 1.0] {
        let (p, _) = prepared(k_o);
        let r = reports(&p, Ablation::default(), &routes);
        cold.push(
            r.iter()
                .map(|rs| rs.iter().map(|r| ndcg(r, Group::ColdStart)).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        );
    }
    let (low, high) = (&cold[0], &cold[1]);
    let drop_full = mean(&high[0]) - mean(&low[0]);
    let drop_without_r = mean(&high[1]) - mean(&low[1]);
    (
        drop_full > 0.0 && drop_full < drop_without_r,
        format!(
            "cold-start NDCG@10 K_o=25% {} / 100% {}; drop {drop_full:+.3} vs {drop_without_r:+.3} without r",
            fmt(&low[0]),
            fmt(&high[0])
        ),
    )
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines = vec![
        run("metric oracle", Kind::Exact, metric_oracle),
        run("KL closed form", Kind::Exact, kl_closed_form),
        run("adaptive weight", Kind::Exact, adaptive_weight_values),
        run("gradient check", Kind::Exact, gradient_check),
    ];
    let (p, emb) = prepared(0.3);
    lines.push(run("factorization / no leak", Kind::Exact, || {
        factorization_and_leaks(&p)
    }));
    lines.push(run("pseudo-sequence properties", Kind::Exact, || {
        pseudo_sequence_properties(&p, &emb)
    }));
    lines.push(run("random-model baseline", Kind::Exact, random_baseline));

    let start = Instant::now();
    let [cold, tailed] = ablation_directions(&p);
    let shared = start.elapsed();
    for (name, (pass, detail)) in [
        ("full > no_if_ds (cold-start)", cold),
        ("full > no_dn (tailed)", tailed),
    ] {
        let line = run(name, Kind::Directional, || {
            (pass, format!("{detail} [{:.0}s for both]", shared.as_secs_f64()))
        });
        lines.push(line);
    }
    lines.push(run("overlap-ratio degradation", Kind::Directional, overlap_directions));
    println!(
        "SKIP {:<34} {:>8}   needs the Game-Video ratings, which are not bundled",
        "real-data check", "-"
    );

    let fatal: Vec<&str> = lines
        .iter()
        .filter(|l| !l.pass && (l.kind == Kind::Exact || strict))
        .map(|l| l.name)
        .collect();
    let failed_directional = lines.iter().filter(|l| !l.pass && l.kind == Kind::Directional).count();
    println!(
        "{} of {} criteria passed{}",
        lines.iter().filter(|l| l.pass).count(),
        lines.len(),
        if failed_directional > 0 && !strict {
            " (directional failures are reported, not fatal; set ACCEPTANCE_STRICT=1 to enforce)"
        } else {
            ""
        }
    );
    if !fatal.is_empty() {
        eprintln!("failed: {}", fatal.join(", "));
        std::process::exit(1);
    }
}
