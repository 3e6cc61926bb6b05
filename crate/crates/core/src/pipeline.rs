//! Staged pipeline behind the command-line interface.
//!
//! ```text
//! prepare → train-psg → pseudo → train → evaluate
//! ```
//!
//! Each stage reads the artifacts of the previous one from the output
//! directory, checks that they were built with the current configuration and
//! writes its own stamped artifacts. A stage whose outputs already carry the
//! current hash is skipped unless `force` is set; rerunning with `force`
//! rewrites byte-identical files because every stage is deterministic.
//! `ablate` and `sweep` drive the stages over variants, seeds and settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, PipelineConfig};
use crate::corpus::{ingest_ratings, Domain, IngestOptions, InteractionLog};
use crate::error::{Error, Result};
use crate::evalharness::{EvalMetadata, EvalReport, Group};
use crate::experiment::{self, Prepared};
use crate::model::ColdStartRoute;
use crate::psg::{self, PsgReport, VisibilityPolicy};
use crate::store;
use crate::synthetic;
use crate::trainer::{self, Ablation, EpochRecord, RunConfig, TrainOutcome};

const PREPARED_FORMAT: &str = "prepared-examples";
const PSEUDO_FORMAT: &str = "pseudo-examples";
const PSG_REPORT_FORMAT: &str = "psg-report";
const OUTCOME_FORMAT: &str = "train-outcome";
const REPORT_FORMAT: &str = "eval-report";

/// Whether a stage did work or found its outputs up to date.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ran,
    UpToDate,
}

/// Summary of a finished training run, written last so an interrupted run is
/// never mistaken for a complete one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs: usize,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub force: bool,
}

/// Output layout below the configured `out` directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.toml")
    }
    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepare/examples.json")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("prepare/split.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("psg/embeddings.bin")
    }
    pub fn psg_report(&self) -> PathBuf {
        self.root.join("psg/report.json")
    }
    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo/examples.json")
    }
    pub fn run_dir(&self, run: &str) -> PathBuf {
        self.root.join("train").join(run)
    }
    pub fn checkpoint(&self, run: &str) -> PathBuf {
        self.run_dir(run).join("model.bin")
    }
    pub fn history(&self, run: &str) -> PathBuf {
        self.run_dir(run).join("history.jsonl")
    }
    pub fn summary(&self, run: &str) -> PathBuf {
        self.run_dir(run).join("summary.json")
    }
    pub fn report(&self, run: &str) -> PathBuf {
        self.root.join("eval").join(run).join("report.json")
    }
    pub fn report_table(&self, run: &str) -> PathBuf {
        self.root.join("eval").join(run).join("report.txt")
    }
}

/// Name of a training run: variant, cross-encoder mode and seed.
pub fn run_name(model: &RunConfig) -> String {
    let mode = match model.cross_encoder {
        crate::varinf::CrossMode::Attention => "",
        crate::varinf::CrossMode::Mlp => "-mlp",
    };
    format!("{}{mode}-seed{}", model.ablation.name(), model.seed)
}

fn up_to_date(path: &Path, hash: &str) -> Result<bool> {
    Ok(store::peek_header(path)?.is_some_and(|h| h.config_hash == hash && h.version == store::FORMAT_VERSION))
}

pub fn load_logs(config: &PipelineConfig) -> Result<(InteractionLog, InteractionLog)> {
    match config.data.source {
        DataSource::Synthetic => {
            let s = synthetic::generate(&config.synthetic)?;
            Ok((s.log_x, s.log_y))
        }
        DataSource::Files => {
            let opts = IngestOptions {
                delimiter: config.data.delimiter,
                max_malformed: config.data.max_malformed,
            };
            let read = |p: &Option<PathBuf>, d: Domain| -> Result<InteractionLog> {
                let p = p
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("data.{d} is not set")))?;
                let (log, stats) = ingest_ratings(p, d, &opts)?;
                log::info!(
                    "{}: {} users, {} items, {} interactions ({} malformed lines skipped)",
                    p.display(),
                    stats.users,
                    stats.items,
                    stats.interactions,
                    stats.malformed
                );
                Ok(log)
            };
            Ok((read(&config.data.x, Domain::X)?, read(&config.data.y, Domain::Y)?))
        }
    }
}

/// Comparison of variants averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<(String, EvalReport)>,
}

impl Comparison {
    pub fn to_csv(&self, key: &str) -> String {
        let mut out = format!("{key},domain,group,n_users,ndcg_mean,ndcg_std,hr_mean,hr_std\n");
        for (name, report) in &self.rows {
            for c in &report.cells {
                let s = |v: Option<crate::evalharness::Stat>| {
                    v.map_or_else(|| ",".to_string(), |s| format!("{:.4},{:.4}", s.mean, s.std))
                };
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{},{}",
                    c.domain,
                    c.group.label(),
                    c.n_users,
                    s(c.ndcg_at_10),
                    s(c.hr_at_10)
                );
            }
        }
        out
    }

    /// One row per entry, NDCG@10 / HR@10 for every domain × group.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14}", "variant");
        for d in Domain::BOTH {
            for g in Group::ALL {
                let _ = write!(out, " {:>24}", format!("{d} {} NDCG/HR", g.label()));
            }
        }
        out.push('\n');
        for (name, r) in &self.rows {
            let _ = write!(out, "{name:<14}");
            for d in Domain::BOTH {
                for g in Group::ALL {
                    let cell = r.cell(d, g);
                    let f = |s: Option<crate::evalharness::Stat>| s.map_or("-".into(), |s| s.to_string());
                    let _ = write!(out, " {:>24}", format!("{} / {}", f(cell.ndcg_at_10), f(cell.hr_at_10)));
                }
            }
            out.push('\n');
        }
        out
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool) -> Self {
        Self { config, force }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.config.out.clone(),
        }
    }

    /// Write the resolved configuration next to the outputs.
    pub fn write_resolved_config(&self) -> Result<()> {
        store::write_atomic(&self.layout().resolved_config(), self.config.to_toml()?.as_bytes())
    }

    pub fn prepare(&self) -> Result<Status> {
        let hash = self.config.prepare_hash()?;
        let layout = self.layout();
        if !self.force && up_to_date(&layout.prepared(), &hash)? && up_to_date(&layout.split(), &hash)? {
            log::info!("prepare: up to date");
            return Ok(Status::UpToDate);
        }
        let (log_x, log_y) = load_logs(&self.config)?;
        let prepared = experiment::prepare(&log_x, &log_y, &self.config.corpus)?;
        log::info!(
            "prepare: {} users ({} train / {} valid / {} test), catalogs {} / {}",
            prepared.examples.len(),
            prepared.split.count(crate::corpus::Role::Train),
            prepared.split.count(crate::corpus::Role::Valid),
            prepared.split.count(crate::corpus::Role::Test),
            prepared.n_items(Domain::X),
            prepared.n_items(Domain::Y)
        );
        store::save_json(&layout.split(), "split-manifest", &hash, &prepared.split)?;
        store::save_json(&layout.prepared(), PREPARED_FORMAT, &hash, &prepared)?;
        Ok(Status::Ran)
    }

    fn load_prepared(&self) -> Result<Prepared> {
        let hash = self.config.prepare_hash()?;
        store::load_json(&self.layout().prepared(), PREPARED_FORMAT, Some(&hash), "prepare")
    }

    pub fn train_psg(&self) -> Result<Status> {
        let hash = self.config.psg_hash()?;
        let layout = self.layout();
        if !self.force && up_to_date(&layout.embeddings(), &hash)? {
            log::info!("train-psg: up to date");
            return Ok(Status::UpToDate);
        }
        let prepared = self.load_prepared()?;
        let (nx, ny) = (prepared.n_items(Domain::X), prepared.n_items(Domain::Y));
        let graph = psg::build_unified_graph(&prepared.examples, nx, ny, VisibilityPolicy::AllUsers)?;
        let (emb, report) = psg::train_psg(&graph, &self.config.psg)?;
        log::info!(
            "train-psg: best validation recall {:.4} at epoch {}",
            report.best_recall,
            report.best_epoch
        );
        store::save_json(&layout.psg_report(), PSG_REPORT_FORMAT, &hash, &report)?;
        store::save_recall(&layout.embeddings(), &hash, &emb, serde_json::Value::Null)?;
        Ok(Status::Ran)
    }

    pub fn psg_report(&self) -> Result<PsgReport> {
        store::load_json(
            &self.layout().psg_report(),
            PSG_REPORT_FORMAT,
            Some(&self.config.psg_hash()?),
            "train-psg",
        )
    }

    pub fn pseudo(&self) -> Result<Status> {
        let hash = self.config.pseudo_hash()?;
        let layout = self.layout();
        if !self.force && up_to_date(&layout.pseudo(), &hash)? {
            log::info!("pseudo: up to date");
            return Ok(Status::UpToDate);
        }
        let mut prepared = self.load_prepared()?;
        let emb = store::load_recall(&layout.embeddings(), Some(&self.config.psg_hash()?))?;
        experiment::fill_from_embeddings(&mut prepared, &emb, self.config.psg.layers, self.config.model.t_prime)?;
        store::save_json(&layout.pseudo(), PSEUDO_FORMAT, &hash, &prepared)?;
        Ok(Status::Ran)
    }

    /// Examples with pseudo-sequences, as consumed by training.
    pub fn load_pseudo(&self) -> Result<Prepared> {
        store::load_json(
            &self.layout().pseudo(),
            PSEUDO_FORMAT,
            Some(&self.config.pseudo_hash()?),
            "pseudo",
        )
    }

    pub fn train(&self) -> Result<Status> {
        let hash = self.config.train_hash()?;
        let layout = self.layout();
        let run = run_name(&self.config.model);
        if !self.force && up_to_date(&layout.summary(&run), &hash)? && up_to_date(&layout.checkpoint(&run), &hash)? {
            log::info!("train {run}: up to date");
            return Ok(Status::UpToDate);
        }
        for w in self.config.model.off_grid() {
            log::warn!("model setting off the reference grid: {w}");
        }
        let prepared = self.load_pseudo()?;
        let checkpoint = layout.checkpoint(&run);
        let mut on_best = |model: &crate::model::ImVae, params: &crate::params::ParamStore, rec: &EpochRecord| {
            store::save_model(
                &checkpoint,
                &hash,
                model,
                params,
                serde_json::json!({ "epoch": rec.epoch, "valid_score": rec.valid_score }),
            )
        };
        let (outcome, _) = experiment::train_variant(&prepared, &self.config.model, &mut on_best)?;
        self.write_history(&run, &outcome)?;
        let summary = RunSummary {
            run: run.clone(),
            best_epoch: outcome.best_epoch,
            best_score: outcome.best_score,
            epochs: outcome.history.len(),
        };
        store::save_json(&layout.summary(&run), OUTCOME_FORMAT, &hash, &summary)?;
        log::info!(
            "train {run}: best validation NDCG@10 {:.2} at epoch {}",
            outcome.best_score,
            outcome.best_epoch
        );
        Ok(Status::Ran)
    }

    fn write_history(&self, run: &str, outcome: &TrainOutcome) -> Result<()> {
        let mut text = String::new();
        for rec in &outcome.history {
            text.push_str(&serde_json::to_string(rec)?);
            text.push('\n');
        }
        store::write_atomic(&self.layout().history(run), text.as_bytes())
    }

    pub fn read_history(&self) -> Result<Vec<EpochRecord>> {
        let path = self.layout().history(&run_name(&self.config.model));
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.clone(),
                stage: "train",
            },
            _ => Error::io(&path, e),
        })?;
        text.lines()
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    /// Evaluate the trained run of the configured seed and variant on the test
    /// users. `route` overrides the variant's cold-start route.
    pub fn evaluate(&self, route: Option<ColdStartRoute>) -> Result<(Status, EvalReport)> {
        let layout = self.layout();
        let run = run_name(&self.config.model);
        let route = route.unwrap_or_else(|| self.config.model.eval_route());
        let hash = crate::config::chain("evaluate", &self.config.eval_hash()?, &route)?;
        let report_path = layout.report(&run);
        if !self.force && up_to_date(&report_path, &hash)? {
            log::info!("evaluate {run}: up to date");
            let report = store::load_json(&report_path, REPORT_FORMAT, Some(&hash), "evaluate")?;
            return Ok((Status::UpToDate, report));
        }
        let train_hash = self.config.train_hash()?;
        store::load_json::<RunSummary>(&layout.summary(&run), OUTCOME_FORMAT, Some(&train_hash), "train")?;
        let (model, params, _) = store::load_model(&layout.checkpoint(&run), Some(&train_hash))?;
        let prepared = self.load_pseudo()?;
        let (nx, ny) = (prepared.n_items(Domain::X), prepared.n_items(Domain::Y));
        let inputs = trainer::variant_inputs(&self.config.model, &prepared.examples, nx, ny);
        let metadata = EvalMetadata {
            config_hash: train_hash,
            seeds: vec![self.config.model.seed],
            negative_seed: self.config.eval.negative_seed,
            ..Default::default()
        };
        let outcome = TrainOutcome {
            model,
            best: params,
            best_epoch: 0,
            best_score: 0.0,
            history: Vec::new(),
        };
        let report = experiment::evaluate_variant(
            &prepared,
            &outcome,
            &inputs,
            route,
            self.config.eval.negative_seed,
            metadata,
        )?;
        if report.metadata.shortfall_users > 0 {
            log::warn!(
                "{} test users had fewer than {} candidate negatives",
                report.metadata.shortfall_users,
                crate::evalharness::NUM_NEGATIVES
            );
        }
        store::save_json(&report_path, REPORT_FORMAT, &hash, &report)?;
        store::write_atomic(&layout.report_table(&run), report.to_table().as_bytes())?;
        Ok((Status::Ran, report))
    }

    /// Every stage up to pseudo-sequences.
    pub fn upstream(&self) -> Result<()> {
        self.prepare()?;
        self.train_psg()?;
        self.pseudo()?;
        Ok(())
    }

    /// Train and evaluate `variants` over every configured seed; one averaged
    /// report per variant.
    pub fn compare(&self, variants: &[(String, RunConfig, Option<ColdStartRoute>)]) -> Result<Comparison> {
        self.upstream()?;
        let mut rows = Vec::new();
        for (name, model, route) in variants {
            let mut reports = Vec::new();
            for &seed in &self.config.eval.seeds {
                let mut config = self.config.clone();
                config.model = RunConfig { seed, ..model.clone() };
                let p = Pipeline::new(config, self.force);
                p.train()?;
                reports.push(p.evaluate(*route)?.1);
            }
            rows.push((name.clone(), EvalReport::aggregate(&reports)?));
        }
        Ok(Comparison { rows })
    }

    /// Full model and the three single-module ablations over every seed.
    pub fn ablate(&self) -> Result<Comparison> {
        let base = RunConfig {
            ablation: Ablation::default(),
            ..self.config.model.clone()
        };
        let variants: Vec<(String, RunConfig, Option<ColdStartRoute>)> = ["full", "no_psg", "no_if_ds", "no_dn"]
            .iter()
            .map(|v| {
                let ablation = Ablation::parse(v)?;
                Ok((
                    v.to_string(),
                    RunConfig {
                        ablation,
                        ..base.clone()
                    },
                    None,
                ))
            })
            .collect::<Result<_>>()?;
        let cmp = self.compare(&variants)?;
        let dir = self.config.out.join("ablate");
        store::write_atomic(&dir.join("comparison.csv"), cmp.to_csv("variant").as_bytes())?;
        store::write_atomic(&dir.join("comparison.txt"), cmp.to_table().as_bytes())?;
        store::write_atomic(&dir.join("comparison.json"), &serde_json::to_vec_pretty(&cmp)?)?;
        Ok(cmp)
    }

    /// Sweep every non-empty list of the `sweep` section; each point is a full
    /// pipeline in its own directory below `out/sweep`.
    pub fn sweep(&self) -> Result<Comparison> {
        let s = &self.config.sweep;
        let mut points: Vec<(String, PipelineConfig)> = Vec::new();
        let mut point = |axis: &str, value: String, edit: &dyn Fn(&mut PipelineConfig)| {
            let mut c = self.config.clone();
            edit(&mut c);
            let name = format!("{axis}={value}");
            c.out = self.config.out.join("sweep").join(&name);
            points.push((name, c));
        };
        for &v in &s.density {
            point("density", v.to_string(), &|c| c.corpus.density = v);
        }
        for &v in &s.k_o {
            point("k_o", v.to_string(), &|c| c.corpus.k_o = v);
        }
        for &v in &s.t {
            point("t", v.to_string(), &|c| {
                c.corpus.t = v;
                c.model.t = v;
            });
        }
        for &v in &s.lambda_a {
            point("lambda_a", v.to_string(), &|c| c.model.lambda_a = v);
        }
        for &v in &s.lambda_t {
            point("lambda_t", v.to_string(), &|c| c.model.lambda_t = v);
        }
        if points.is_empty() {
            return Err(Error::Config("sweep: every list in [sweep] is empty".into()));
        }
        let mut rows = Vec::new();
        for (name, config) in points {
            config.validate()?;
            log::info!("sweep point {name}");
            let p = Pipeline::new(config, self.force);
            p.write_resolved_config()?;
            let variant = vec![(name.clone(), p.config.model.clone(), None)];
            let mut cmp = p.compare(&variant)?;
            rows.append(&mut cmp.rows);
        }
        let cmp = Comparison { rows };
        let dir = self.config.out.join("sweep");
        store::write_atomic(&dir.join("summary.csv"), cmp.to_csv("point").as_bytes())?;
        store::write_atomic(&dir.join("summary.txt"), cmp.to_table().as_bytes())?;
        Ok(cmp)
    }
}
