//! Training loop, run configuration, ablation variants and grid search.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{Corpus, Domain, Role, UserExample};
use crate::error::{Error, Result};
use crate::evalharness::{self, EvalConfig, EvalMetadata, Group, ModelScorer, Stat};
use crate::model::{Batch, ColdStartRoute, ImVae, Mode, ModelConfig};
use crate::objective::{kl_diag_gaussians, LossBreakdown};
use crate::params::{clip_global_norm, Adam, ParamStore};
use crate::psg::random_pseudo_sequences;
use crate::rng::RunSeeds;
use crate::varinf::CrossMode;

/// Learning rates, weights and seed counts searched in the reference setup.
pub const LR_GRID: [f64; 6] = [3e-4, 4e-4, 5e-4, 6e-4, 7e-4, 8e-4];
pub const LAMBDA_GRID: [f64; 6] = [5e-4, 1e-3, 2e-3, 3e-3, 4e-3, 5e-3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Replace pseudo-sequences by random same-length sequences.
    pub no_psg: bool,
    /// Drop the transfer terms (`λ_t = 0`); cold-start users fall back to the
    /// prior mean at evaluation.
    pub no_if_ds: bool,
    /// Drop the denoising terms (`λ_a = 0`).
    pub no_dn: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Ablation> {
        let mut a = Ablation::default();
        for part in name.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "no_psg" => a.no_psg = true,
                "no_if_ds" => a.no_if_ds = true,
                "no_dn" => a.no_dn = true,
                "full" | "none" => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation `{other}` (no_psg, no_if_ds, no_dn)"
                    )))
                }
            }
        }
        Ok(a)
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_psg, "no_psg"),
            (self.no_if_ds, "no_if_ds"),
            (self.no_dn, "no_dn"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub d: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub t: usize,
    pub t_prime: usize,
    pub heads: usize,
    pub lambda_t: f64,
    pub lambda_a: f64,
    pub adaptive_a: f64,
    pub adaptive_b: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub cross_encoder: CrossMode,
    pub dropout: f64,
    pub neg_per_pos: usize,
    pub clip_norm: f64,
    pub mask_absent_pseudo: bool,
    /// Negatives per validation user when selecting the epoch-best model.
    pub valid_negatives: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 128,
            batch: 512,
            lr: 5e-4,
            epochs: 100,
            t: 20,
            t_prime: 40,
            heads: 4,
            lambda_t: 1e-3,
            lambda_a: 1e-3,
            adaptive_a: 0.8,
            adaptive_b: 0.8,
            seed: 0,
            ablation: Ablation::default(),
            cross_encoder: CrossMode::Attention,
            dropout: 0.2,
            neg_per_pos: 1,
            clip_norm: 5.0,
            mask_absent_pseudo: true,
            valid_negatives: evalharness::NUM_NEGATIVES,
        }
    }
}

fn in_grid(v: f64, grid: &[f64]) -> bool {
    grid.iter().any(|g| (g - v).abs() <= 1e-12 * g.abs())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.lambda_t < 0.0 || self.lambda_a < 0.0 {
            return Err(Error::Config("λ_t and λ_a must be non-negative".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Fields that differ from the reference hyperparameters or fall outside
    /// the reference search grids.
    pub fn off_grid(&self) -> Vec<String> {
        let reference = RunConfig::default();
        let mut out = Vec::new();
        for (name, v, r) in [
            ("d", self.d, reference.d),
            ("batch", self.batch, reference.batch),
            ("epochs", self.epochs, reference.epochs),
            ("t", self.t, reference.t),
            ("t_prime", self.t_prime, reference.t_prime),
            ("heads", self.heads, reference.heads),
        ] {
            if v != r {
                out.push(format!("{name} = {v} (reference {r})"));
            }
        }
        if !in_grid(self.lr, &LR_GRID) {
            out.push(format!("lr = {} outside the search grid", self.lr));
        }
        for (name, v) in [("lambda_t", self.lambda_t), ("lambda_a", self.lambda_a)] {
            if !in_grid(v, &LAMBDA_GRID) {
                out.push(format!("{name} = {v} outside the search grid"));
            }
        }
        out
    }

    pub fn model_config(&self, n_items_x: usize, n_items_y: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            t: self.t,
            t_prime: self.t_prime,
            n_items_x,
            n_items_y,
            cross_mode: self.cross_encoder,
            dropout: self.dropout,
            mask_absent_pseudo: self.mask_absent_pseudo,
            neg_per_pos: self.neg_per_pos,
            adaptive_a: self.adaptive_a,
            adaptive_b: self.adaptive_b,
        }
    }

    /// `(λ_t, λ_a)` after the ablation flags.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        (
            if self.ablation.no_if_ds { 0.0 } else { self.lambda_t },
            if self.ablation.no_dn { 0.0 } else { self.lambda_a },
        )
    }

    /// Cold-start route used at evaluation for this variant.
    pub fn eval_route(&self) -> ColdStartRoute {
        if self.ablation.no_if_ds {
            ColdStartRoute::PriorMean
        } else {
            ColdStartRoute::Auxiliary
        }
    }
}

/// Sub-seeds of a run: parameter initialization, batch shuffling, noise
/// draws, dropout masks and training negatives, each an independent stream
/// derived from the run seed (see [`crate::rng`]).
pub fn set_seed(seed: u64) -> RunSeeds {
    RunSeeds::new(seed)
}

/// Model inputs of a variant: with `no_psg`, every pseudo-sequence is replaced
/// by uniformly random items (seeded by the run seed).
pub fn variant_inputs(
    config: &RunConfig,
    examples: &[UserExample],
    n_items_x: usize,
    n_items_y: usize,
) -> Vec<UserExample> {
    let mut out = examples.to_vec();
    if config.ablation.no_psg {
        random_pseudo_sequences(&mut out, n_items_x, n_items_y, config.t_prime, config.seed);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub loss: LossBreakdown,
    pub valid_ndcg_x: f64,
    pub valid_ndcg_y: f64,
    pub valid_hr_x: f64,
    pub valid_hr_y: f64,
    /// Mean of the two domains' validation NDCG@10 (percent).
    pub valid_score: f64,
    /// Mean `KL(q(z_t^y|x,y) ‖ r^y(z_t^y|y))` over validation users with
    /// history in both domains.
    pub valid_transfer_kl: Option<f64>,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: ImVae,
    /// Parameters of the epoch-best model.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<EpochRecord>,
}

/// What the training loop needs besides the examples.
pub struct TrainContext<'a> {
    pub corpus: &'a Corpus,
    pub n_items_x: usize,
    pub n_items_y: usize,
}

fn validation(
    model: &ImVae,
    store: &ParamStore,
    examples: &[UserExample],
    ctx: &TrainContext,
    config: &RunConfig,
) -> Result<(evalharness::EvalReport, Option<f64>)> {
    let scorer = ModelScorer {
        model,
        store,
        route: config.eval_route(),
    };
    let cfg = EvalConfig {
        role: Role::Valid,
        negatives: config.valid_negatives,
        seed: config.seed,
    };
    let report = evalharness::evaluate(&scorer, examples, ctx.corpus, &cfg, EvalMetadata::default())?;
    let overlapping: Vec<&UserExample> = examples
        .iter()
        .filter(|e| e.role == Role::Valid && e.x.true_len > 0 && e.y.true_len > 0)
        .collect();
    let kl = if overlapping.is_empty() {
        None
    } else {
        let post = model.posteriors(store, &overlapping)?;
        Some(post.iter().map(|p| kl_diag_gaussians(&p.z_t_y, &p.r_y)).sum::<f64>() / post.len() as f64)
    };
    Ok((report, kl))
}

/// Train one model. `examples` must already carry pseudo-sequences (the
/// variant's inputs, see [`variant_inputs`]). `on_best` is called with the
/// parameters each time the validation score improves, so a checkpoint
/// survives a later numerical failure.
pub fn train(
    config: &RunConfig,
    examples: &[UserExample],
    ctx: &TrainContext,
    on_best: &mut dyn FnMut(&ImVae, &ParamStore, &EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let seeds = set_seed(config.seed);
    let mut store = ParamStore::new();
    let model = ImVae::new(
        config.model_config(ctx.n_items_x, ctx.n_items_y),
        &mut store,
        &mut seeds.init(),
    )?;
    let (lambda_t, lambda_a) = config.effective_lambdas();
    let mut adam = Adam::new(config.lr);
    let mut train_users: Vec<&UserExample> = examples.iter().filter(|e| e.role == Role::Train).collect();
    if train_users.is_empty() {
        return Err(Error::Empty("no training users".into()));
    }

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(ParamStore, usize, f64)> = None;
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs {
        train_users.shuffle(&mut seeds.shuffle(epoch as u64));
        let mut breakdowns = Vec::new();
        let mut grad_norm = 0.0;
        for chunk in train_users.chunks(config.batch) {
            let batch = Batch::sample(chunk.to_vec(), &model.config, &mut seeds.negatives(step));
            let mut g = Graph::new();
            let (mut noise, mut dropout) = (seeds.noise(step), seeds.dropout(step));
            let mode = Mode::Train {
                noise: &mut noise,
                dropout: &mut dropout,
            };
            let (total, breakdown) = model.loss(&mut g, &store, &batch, mode, lambda_t, lambda_a)?;
            let mut grads = g.backward(total).into_params();
            grad_norm = clip_global_norm(&mut grads, config.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient norm at epoch {epoch}, step {step}"
                )));
            }
            adam.step(&mut store, &grads);
            if !store.is_finite() {
                return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
            }
            breakdowns.push(breakdown);
            step += 1;
        }
        let (report, transfer_kl) = validation(&model, &store, examples, ctx, config)?;
        let nx = report.ndcg(Domain::X, Group::All);
        let ny = report.ndcg(Domain::Y, Group::All);
        let record = EpochRecord {
            epoch,
            steps: step,
            loss: LossBreakdown::mean(&breakdowns),
            valid_ndcg_x: nx,
            valid_ndcg_y: ny,
            valid_hr_x: report.hr(Domain::X, Group::All),
            valid_hr_y: report.hr(Domain::Y, Group::All),
            valid_score: (nx + ny) / 2.0,
            valid_transfer_kl: transfer_kl,
            grad_norm,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} valid NDCG@10 X {nx:.2} Y {ny:.2}",
            record.loss.total
        );
        if best.as_ref().is_none_or(|(_, _, s)| record.valid_score > *s) {
            on_best(&model, &store, &record)?;
            best = Some((store.clone(), epoch, record.valid_score));
        }
        history.push(record);
    }
    let (best, best_epoch, best_score) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        best_score,
        history,
    })
}

/// Values searched by [`grid_search`]; every combination is one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpace {
    pub lr: Vec<f64>,
    pub lambda_t: Vec<f64>,
    pub lambda_a: Vec<f64>,
}

impl GridSpace {
    pub fn reference() -> Self {
        Self {
            lr: LR_GRID.to_vec(),
            lambda_t: LAMBDA_GRID.to_vec(),
            lambda_a: LAMBDA_GRID.to_vec(),
        }
    }

    pub fn points(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &lambda_t in &self.lambda_t {
                for &lambda_a in &self.lambda_a {
                    out.push(RunConfig {
                        lr,
                        lambda_t,
                        lambda_a,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub lambda_t: f64,
    pub lambda_a: f64,
    pub per_seed: Vec<f64>,
    pub valid_ndcg: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub seeds: Vec<u64>,
    pub points: Vec<GridPoint>,
    pub best: RunConfig,
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,lambda_t,lambda_a,valid_ndcg_mean,valid_ndcg_std,cell\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                p.lr, p.lambda_t, p.lambda_a, p.valid_ndcg.mean, p.valid_ndcg.std, p.valid_ndcg
            );
        }
        out
    }
}

/// Evaluate every grid point under every seed with `run` (which returns the
/// validation score, e.g. the epoch-best mean NDCG@10) and select the point
/// with the highest seed mean; ties go to lower λ_a, then lower λ_t, then
/// lower learning rate.
pub fn grid_search(
    base: &RunConfig,
    space: &GridSpace,
    seeds: &[u64],
    run: &mut dyn FnMut(&RunConfig) -> Result<f64>,
) -> Result<GridReport> {
    let points = space.points(base);
    if points.is_empty() || seeds.is_empty() {
        return Err(Error::Config("empty grid or seed list".into()));
    }
    let mut report_points = Vec::with_capacity(points.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let per_seed = seeds
            .iter()
            .map(|&seed| run(&RunConfig { seed, ..p.clone() }))
            .collect::<Result<Vec<f64>>>()?;
        let stat = Stat::of(&per_seed).expect("non-empty seeds");
        let better = match best {
            None => true,
            Some((j, m)) => {
                let q = &points[j];
                stat.mean > m
                    || (stat.mean == m
                        && (p.lambda_a, p.lambda_t, p.lr)
                            .partial_cmp(&(q.lambda_a, q.lambda_t, q.lr))
                            .is_some_and(|o| o.is_lt()))
            }
        };
        if better {
            best = Some((i, stat.mean));
        }
        report_points.push(GridPoint {
            lr: p.lr,
            lambda_t: p.lambda_t,
            lambda_a: p.lambda_a,
            per_seed,
            valid_ndcg: stat,
        });
    }
    let (i, _) = best.expect("non-empty grid");
    Ok(GridReport {
        seeds: seeds.to_vec(),
        points: report_points,
        best: points[i].clone(),
    })
}
