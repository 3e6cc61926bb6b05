#![allow(dead_code)]

use imvae::autograd::Graph;
use imvae::corpus::{Domain, DomainSlice, Role, Tags, UserExample, PAD};
use imvae::model::{Batch, ImVae, Mode, ModelConfig};
use imvae::params::{ParamId, ParamStore};
use imvae::rng::stream;
use imvae::varinf::CrossMode;

pub fn tiny_model_config(d: usize, t: usize, t_prime: usize, cross_mode: CrossMode) -> ModelConfig {
    ModelConfig {
        d,
        heads: 2,
        t,
        t_prime,
        n_items_x: 9,
        n_items_y: 7,
        cross_mode,
        dropout: 0.0,
        mask_absent_pseudo: true,
        neg_per_pos: 1,
        adaptive_a: 0.8,
        adaptive_b: 0.8,
    }
}

pub fn slice(items: &[u32], recalled: &[u32], t: usize, t_prime: usize, target: Option<u32>) -> DomainSlice {
    let items = &items[items.len().saturating_sub(t)..];
    let mut seq = vec![PAD; t - items.len()];
    seq.extend_from_slice(items);
    let mut pseudo: Vec<u32> = items.iter().chain(recalled).copied().take(t_prime).collect();
    let mut padded = vec![PAD; t_prime - pseudo.len()];
    padded.append(&mut pseudo);
    DomainSlice {
        seq,
        true_len: items.len(),
        pseudo: padded,
        target,
    }
}

/// Overlapping users, a user cold in each domain and users with a single
/// domain, covering every masking path of the objective.
pub fn tiny_examples(c: &ModelConfig) -> Vec<UserExample> {
    let (t, tp) = (c.t, c.t_prime);
    let mk = |user: &str, x: DomainSlice, y: DomainSlice, cold: Option<Domain>| UserExample {
        user: user.into(),
        role: Role::Train,
        x,
        y,
        cold_start_domain: cold,
        tags: Tags::default(),
    };
    vec![
        mk(
            "a",
            slice(&[1, 2, 3], &[4, 5], t, tp, Some(6)),
            slice(&[1, 2], &[3, 4, 5], t, tp, Some(7)),
            None,
        ),
        mk(
            "b",
            slice(&[4], &[1, 2, 3, 5], t, tp, Some(8)),
            slice(&[6, 5, 4], &[1, 2], t, tp, Some(3)),
            None,
        ),
        mk(
            "c",
            slice(&[], &[1, 2, 3, 4, 5], t, tp, Some(2)),
            slice(&[2, 3], &[1, 4, 5], t, tp, Some(6)),
            Some(Domain::X),
        ),
        mk(
            "d",
            slice(&[7, 8], &[1, 2, 3], t, tp, Some(9)),
            slice(&[], &[1, 2, 3, 4, 5], t, tp, Some(1)),
            Some(Domain::Y),
        ),
        mk(
            "e",
            slice(&[5, 9], &[1, 2, 3], t, tp, Some(1)),
            slice(&[], &[2, 3, 4, 5, 6], t, tp, None),
            None,
        ),
    ]
}

/// Full sort of the candidates with the positive placed after every tie.
pub fn brute_force_metrics(scores: &[f64], pos: usize, k: usize) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == pos).cmp(&(b == pos)))
    });
    let rank = order.iter().position(|&i| i == pos).unwrap() + 1;
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &c)| if c == pos { 1.0 / ((i + 2) as f64).log2() } else { 0.0 })
        .sum();
    let idcg = 1.0;
    (if rank <= k { 1.0 } else { 0.0 }, dcg / idcg)
}

pub struct GradientReport {
    pub groups: usize,
    /// Groups with at least one sampled entry of non-negligible gradient.
    pub checked_groups: usize,
    /// Largest relative error over all compared entries.
    pub worst: f64,
}

const LAMBDA_T: f64 = 3e-3;
const LAMBDA_A: f64 = 5e-3;
const STEP: f64 = 3e-4;
const ENTRIES_PER_GROUP: usize = 6;

fn loss(model: &ImVae, store: &ParamStore, batch: &Batch) -> f64 {
    let mut g = Graph::new();
    let (mut noise, mut dropout) = (stream(5, "noise", 0), stream(5, "dropout", 0));
    let (total, _) = model
        .loss(
            &mut g,
            store,
            batch,
            Mode::Train {
                noise: &mut noise,
                dropout: &mut dropout,
            },
            LAMBDA_T,
            LAMBDA_A,
        )
        .unwrap();
    g.scalar(total)
}

/// Compare analytic and finite-difference gradients on sampled entries of
/// every parameter group; panics on the first entry beyond `1e-4`.
pub fn gradient_check(mode: CrossMode) -> GradientReport {
    let config = tiny_model_config(4, 3, 5, mode);
    let mut store = ParamStore::new();
    let model = ImVae::new(config.clone(), &mut store, &mut stream(2, "init", 0)).unwrap();
    // move learnable priors and biases away from their initial values so every
    // group has a non-trivial gradient
    let mut r = stream(2, "perturb", 0);
    for id in store.ids().collect::<Vec<_>>() {
        let noise = imvae::params::normal(store.value(id).nrows(), store.value(id).ncols(), 0.05, &mut r);
        let pad = store.has_pad_row(id);
        let v = store.value_mut(id);
        *v += &noise;
        if pad {
            v.row_mut(0).fill(0.0);
        }
    }
    let examples = tiny_examples(&config);
    let refs: Vec<_> = examples.iter().collect();
    let batch = Batch::sample(refs, &config, &mut stream(2, "negatives", 0));

    let mut g = Graph::new();
    let (mut noise, mut dropout) = (stream(5, "noise", 0), stream(5, "dropout", 0));
    let (total, _) = model
        .loss(
            &mut g,
            &store,
            &batch,
            Mode::Train {
                noise: &mut noise,
                dropout: &mut dropout,
            },
            LAMBDA_T,
            LAMBDA_A,
        )
        .unwrap();
    let grads = g.backward(total);

    let mut checked_groups = 0;
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<ParamId>>() {
        let (rows, cols) = store.value(id).dim();
        let first_row = usize::from(store.has_pad_row(id));
        let n = (rows - first_row) * cols;
        let mut picks = stream(3, store.name(id), 0);
        let entries: Vec<(usize, usize)> = (0..ENTRIES_PER_GROUP.min(n))
            .map(|_| {
                use rand::Rng as _;
                let k = picks.random_range(0..n);
                (first_row + k / cols, k % cols)
            })
            .collect();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| ndarray::Array2::zeros((rows, cols)));
        let mut any_nonzero = false;
        for (i, j) in entries {
            let orig = store.value(id)[[i, j]];
            let mut at = |k: f64| {
                store.value_mut(id)[[i, j]] = orig + k * STEP;
                loss(&model, &store, &batch)
            };
            // fourth-order central difference
            let fd = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * STEP);
            store.value_mut(id)[[i, j]] = orig;
            let an = analytic[[i, j]];
            let scale = an.abs().max(fd.abs());
            if scale < 1e-7 {
                assert!((an - fd).abs() < 1e-9, "{} [{i},{j}]: {an} vs {fd}", store.name(id));
                continue;
            }
            any_nonzero = true;
            let rel = (an - fd).abs() / scale;
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "{} [{i},{j}]: analytic {an} vs fd {fd} (rel {rel})",
                store.name(id)
            );
        }
        if any_nonzero {
            checked_groups += 1;
        }
    }
    GradientReport {
        groups: store.len(),
        checked_groups,
        worst,
    }
}
