//! In-memory building blocks shared by the staged pipeline and by
//! experiments: corpus preparation, pseudo-sequence generation, training and
//! evaluation of one variant.

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_examples, simulate_cold_start, split_users, tag_user_groups, Corpus, Domain, InteractionLog, Role,
    UserExample, UserSplit,
};
use crate::error::{Error, Result};
use crate::evalharness::{self, EvalConfig, EvalMetadata, EvalReport, ModelScorer};
use crate::model::ColdStartRoute;
use crate::psg::{self, PsgConfig, PsgReport, RecallEmbeddings, VisibilityPolicy};
use crate::trainer::{self, RunConfig, TrainContext, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    /// Input window length.
    pub t: usize,
    /// Train / validation / test user shares.
    pub ratios: [f64; 3],
    /// Share of overlapping training users that keep both domains.
    pub k_o: f64,
    /// Share of overlapping validation and test users turned cold-start.
    pub k_cs: f64,
    /// Share of interaction records kept.
    pub density: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            t: 20,
            ratios: [0.8, 0.1, 0.1],
            k_o: 1.0,
            k_cs: 0.2,
            density: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub corpus: Corpus,
    pub split: UserSplit,
    pub examples: Vec<UserExample>,
    pub tail_threshold_x: Option<f64>,
    pub tail_threshold_y: Option<f64>,
}

impl Prepared {
    pub fn n_items(&self, d: Domain) -> usize {
        self.corpus.catalog_size(d)
    }
}

/// Density downsampling, user split, cold-start simulation, leave-one-out
/// examples and group tags.
pub fn prepare(log_x: &InteractionLog, log_y: &InteractionLog, params: &CorpusParams) -> Result<Prepared> {
    if !(params.density > 0.0 && params.density <= 1.0) {
        return Err(Error::Config(format!("density {} outside (0, 1]", params.density)));
    }
    let (log_x, log_y) = if params.density < 1.0 {
        (
            log_x.downsample(params.density, params.seed)?,
            log_y.downsample(params.density, params.seed)?,
        )
    } else {
        (log_x.clone(), log_y.clone())
    };
    let split = split_users(&log_x, &log_y, params.ratios, params.k_o, params.seed)?;
    let split = simulate_cold_start(&split, params.k_cs, params.seed)?;
    let corpus = Corpus::from_logs(&log_x, &log_y);
    let mut examples = build_examples(&corpus, &split, params.t)?;
    let tail_threshold_x = tag_user_groups(&mut examples, Domain::X);
    let tail_threshold_y = tag_user_groups(&mut examples, Domain::Y);
    Ok(Prepared {
        corpus,
        split,
        examples,
        tail_threshold_x,
        tail_threshold_y,
    })
}

/// Train the recall model on the unified graph and fill every example's
/// pseudo-sequences. Returns the layer-0 embeddings and the training report.
pub fn generate_pseudo_sequences(
    prepared: &mut Prepared,
    cfg: &PsgConfig,
    t_prime: usize,
) -> Result<(RecallEmbeddings, PsgReport)> {
    let (nx, ny) = (prepared.n_items(Domain::X), prepared.n_items(Domain::Y));
    let graph = psg::build_unified_graph(&prepared.examples, nx, ny, VisibilityPolicy::AllUsers)?;
    let (emb, report) = psg::train_psg(&graph, cfg)?;
    fill_from_embeddings(prepared, &emb, cfg.layers, t_prime)?;
    Ok((emb, report))
}

/// Fill pseudo-sequences from layer-0 embeddings (propagated here).
pub fn fill_from_embeddings(
    prepared: &mut Prepared,
    emb: &RecallEmbeddings,
    layers: usize,
    t_prime: usize,
) -> Result<()> {
    let (nx, ny) = (prepared.n_items(Domain::X), prepared.n_items(Domain::Y));
    let graph = psg::build_unified_graph(&prepared.examples, nx, ny, VisibilityPolicy::AllUsers)?;
    let propagated = psg::propagate_embeddings(&graph, emb, layers)?;
    psg::fill_pseudo_sequences(&mut prepared.examples, &graph, &propagated, t_prime)
}

/// Train one variant (applying its input ablations).
pub fn train_variant(
    prepared: &Prepared,
    config: &RunConfig,
    on_best: &mut dyn FnMut(&crate::model::ImVae, &crate::params::ParamStore, &trainer::EpochRecord) -> Result<()>,
) -> Result<(TrainOutcome, Vec<UserExample>)> {
    let (nx, ny) = (prepared.n_items(Domain::X), prepared.n_items(Domain::Y));
    let inputs = trainer::variant_inputs(config, &prepared.examples, nx, ny);
    let ctx = TrainContext {
        corpus: &prepared.corpus,
        n_items_x: nx,
        n_items_y: ny,
    };
    let outcome = trainer::train(config, &inputs, &ctx, on_best)?;
    Ok((outcome, inputs))
}

/// Test-set report of a trained variant.
pub fn evaluate_variant(
    prepared: &Prepared,
    outcome: &TrainOutcome,
    inputs: &[UserExample],
    route: ColdStartRoute,
    eval_seed: u64,
    metadata: EvalMetadata,
) -> Result<EvalReport> {
    let scorer = ModelScorer {
        model: &outcome.model,
        store: &outcome.best,
        route,
    };
    let cfg = EvalConfig {
        role: Role::Test,
        negatives: evalharness::NUM_NEGATIVES,
        seed: eval_seed,
    };
    let metadata = EvalMetadata {
        route: Some(route),
        ..metadata
    };
    evalharness::evaluate(&scorer, inputs, &prepared.corpus, &cfg, metadata)
}
