//! Drives a full run: source pretraining, warm-up, the slice loop, report
//! files, and checkpointing when an annotation barrier times out.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;
use vigil_core::annotation::{AnnotationError, AnnotationVerdict, Annotator, ReviewItem};
use vigil_core::metrics::eer_operating_point;
use vigil_core::pipeline::{ConfigIssue, PipelineError};
use vigil_core::{LabelKind, OracleAnnotator, Pipeline, RunReport, Sample, ScorerKind, ScorerModel, ScriptedAnnotator};

use crate::checkpoint::{Barrier, Checkpoint, CHECKPOINT_FILE, CHECKPOINT_FORMAT_VERSION};
use crate::config::{AnnotatorMode, RunConfig};
use crate::io::{
    load_dataset, load_scores, read_json, write_json, write_report, write_summary_csv, DataError, Dataset,
};
use crate::server::{self, AnnotationHub, BandBounds, Phase, SliceConfusion};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const VERDICTS_FILE: &str = "verdicts.json";

pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const TIMEOUT: u8 = 4;
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigIssue>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("annotation timed out with {outstanding} verdict(s) outstanding; checkpoint written to {}", checkpoint.display())]
    Timeout { checkpoint: PathBuf, outstanding: usize },
    #[error("annotation server: {0}")]
    Server(io::Error),
}

impl RunError {
    pub fn config(path: &str, message: impl Into<String>) -> Self {
        Self::Config(vec![ConfigIssue::new(path, message)])
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => exit::CONFIG,
            Self::Data(_) => exit::DATA,
            Self::Timeout { .. } => exit::TIMEOUT,
            Self::Server(_) => exit::FAILURE,
            Self::Pipeline(e) => match e {
                PipelineError::InvalidConfig(_) => exit::CONFIG,
                PipelineError::Scorer(_)
                | PipelineError::Model(_)
                | PipelineError::Metrics(_)
                | PipelineError::EmptyWarmStream
                | PipelineError::InsufficientAnomalies
                | PipelineError::InsufficientNormals => exit::DATA,
                _ => exit::FAILURE,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub report_path: PathBuf,
    pub summary_path: PathBuf,
    pub verdicts_path: PathBuf,
}

/// Pretrains the source scorer and its threshold from the dataset's source
/// stream. Trainable scorers fit on the even-`seq` normals and calibrate on
/// the odd-`seq` samples; a replay scorer calibrates on every source sample.
pub fn source_model(config: &RunConfig, dataset: &Dataset) -> Result<(ScorerModel, f64), RunError> {
    let scored = |model: &ScorerModel, samples: &[&Sample]| -> Result<Vec<(f64, LabelKind)>, RunError> {
        samples
            .iter()
            .filter_map(|s| s.ground_truth.map(|t| (s, t)))
            .map(|(s, t)| Ok((model.score(s).map_err(PipelineError::from)?, t)))
            .collect()
    };
    let (model, calibration): (ScorerModel, Vec<&Sample>) = match config.scorer.kind {
        ScorerKind::Replay => {
            let path = config
                .scorer
                .scores
                .as_ref()
                .ok_or_else(|| RunError::config("scorer.scores", "replay scorer needs a score file"))?;
            let table: BTreeMap<String, f64> = load_scores(path)?.into_iter().map(|r| (r.id, r.score)).collect();
            let model =
                ScorerModel::replay(table, format!("replay:{}", path.display())).map_err(PipelineError::from)?;
            (model, dataset.source.iter().collect())
        }
        kind => {
            let fit: Vec<&[f64]> = dataset
                .source
                .iter()
                .filter(|s| s.seq % 2 == 0 && s.ground_truth != Some(LabelKind::Anomalous))
                .map(|s| s.features.as_slice())
                .collect();
            let model = ScorerModel::fit(kind, &fit, &config.scorer_config(), "source").map_err(PipelineError::from)?;
            (model, dataset.source.iter().filter(|s| s.seq % 2 == 1).collect())
        }
    };
    let data = scored(&model, &calibration)?;
    let theta = eer_operating_point(&data).map_err(PipelineError::from)?.theta;
    Ok((model, theta))
}

enum Gathered {
    Complete(Vec<AnnotationVerdict>),
    Interrupted {
        answered: Vec<AnnotationVerdict>,
        outstanding: Vec<String>,
    },
}

enum Source {
    Oracle(OracleAnnotator),
    Scripted(ScriptedAnnotator),
    Hub {
        hub: AnnotationHub,
        timeout: Duration,
        poll: Duration,
    },
}

impl Source {
    /// Collects verdicts for `items`, starting from any already `known`.
    fn gather(&mut self, items: &[ReviewItem], known: &[AnnotationVerdict]) -> Result<Gathered, RunError> {
        let ids: HashSet<&str> = items.iter().map(|i| i.request.request_id.as_str()).collect();
        let mut have: Vec<AnnotationVerdict> = known
            .iter()
            .filter(|v| ids.contains(v.request_id.as_str()))
            .cloned()
            .collect();
        let done: HashSet<String> = have.iter().map(|v| v.request_id.clone()).collect();
        let todo: Vec<ReviewItem> = items
            .iter()
            .filter(|i| !done.contains(&i.request.request_id))
            .cloned()
            .collect();
        if todo.is_empty() {
            return Ok(Gathered::Complete(have));
        }
        match self {
            Source::Oracle(o) => {
                have.extend(o.review(&todo).map_err(PipelineError::from)?);
                Ok(Gathered::Complete(have))
            }
            Source::Scripted(s) => {
                let mut outstanding = Vec::new();
                for item in &todo {
                    match s.review(std::slice::from_ref(item)) {
                        Ok(v) => have.extend(v),
                        Err(AnnotationError::MissingVerdict(_)) => outstanding.push(item.request.request_id.clone()),
                        Err(e) => return Err(PipelineError::from(e).into()),
                    }
                }
                if outstanding.is_empty() {
                    Ok(Gathered::Complete(have))
                } else {
                    Ok(Gathered::Interrupted {
                        answered: have,
                        outstanding,
                    })
                }
            }
            Source::Hub { hub, timeout, poll } => {
                let requests: Vec<_> = items.iter().map(|i| i.request.clone()).collect();
                hub.open_barrier(&requests, &have);
                let deadline = Instant::now() + *timeout;
                loop {
                    if hub.barrier_complete() {
                        let verdicts = hub.barrier_verdicts();
                        hub.close_barrier();
                        return Ok(Gathered::Complete(verdicts));
                    }
                    if Instant::now() >= deadline {
                        return Ok(Gathered::Interrupted {
                            answered: hub.barrier_verdicts(),
                            outstanding: hub.outstanding_ids(),
                        });
                    }
                    thread::sleep(*poll);
                }
            }
        }
    }
}

struct Run<'a> {
    config: &'a RunConfig,
    hub: Option<AnnotationHub>,
    source: Source,
    history: Vec<AnnotationVerdict>,
}

impl Run<'_> {
    fn park(
        &self,
        barrier: Barrier,
        answered: Vec<AnnotationVerdict>,
        outstanding: Vec<String>,
    ) -> Result<RunError, RunError> {
        let path = self.config.output_dir.join(CHECKPOINT_FILE);
        let count = outstanding.len();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            barrier,
            answered,
            pending_request_ids: outstanding,
            history: self.history.clone(),
        }
        .write(&path)?;
        Ok(RunError::Timeout {
            checkpoint: path,
            outstanding: count,
        })
    }

    fn publish(&self, pipeline: &Pipeline, total: usize, current: Option<i64>) {
        let Some(hub) = &self.hub else { return };
        let report = pipeline.report();
        let band = pipeline.band();
        hub.update_progress(|p| {
            p.methodology = Some(self.config.methodology);
            p.slice = current;
            p.slices_done = pipeline.slices_done();
            p.slices_total = total;
            p.theta = Some(pipeline.threshold().theta);
            p.band = Some(BandBounds {
                lower: band.theta_eer(),
                upper: band.theta_med(),
            });
            p.per_slice = report
                .per_slice
                .iter()
                .map(|s| SliceConfusion {
                    slice: s.slice_index,
                    confusion: s.confusion,
                })
                .collect();
            p.trajectory = report.threshold_trajectory;
        });
    }
}

/// Runs `config`, optionally resuming from a checkpoint, with annotation
/// according to `config.annotator`. In server mode the HTTP service is bound
/// on `127.0.0.1` at the configured port for the duration of the run.
pub fn execute(config: &RunConfig, resume: Option<Checkpoint>) -> Result<RunOutcome, RunError> {
    if config.annotator.mode == AnnotatorMode::Server {
        let hub = AnnotationHub::new(Duration::from_secs(config.annotator.lease_secs));
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, config.annotator.port));
        let handle = server::spawn(hub.clone(), addr).map_err(RunError::Server)?;
        eprintln!("annotation server listening on http://{}", handle.addr());
        let out = execute_with_hub(config, resume, Some(hub));
        drop(handle);
        out
    } else {
        execute_with_hub(config, resume, None)
    }
}

/// Like [`execute`] but with a caller-owned hub; in server mode the caller
/// is responsible for serving it.
pub fn execute_with_hub(
    config: &RunConfig,
    resume: Option<Checkpoint>,
    hub: Option<AnnotationHub>,
) -> Result<RunOutcome, RunError> {
    let issues = config.issues();
    if !issues.is_empty() {
        return Err(RunError::Config(issues));
    }
    let source = match config.annotator.mode {
        AnnotatorMode::Oracle => Source::Oracle(
            OracleAnnotator::new(config.annotator.flip_probability, config.seeds.oracle)
                .map_err(PipelineError::from)?,
        ),
        AnnotatorMode::Scripted => {
            let path = config.annotator.verdicts.as_ref().expect("checked by issues()");
            let log: Vec<AnnotationVerdict> = read_json(path)?;
            Source::Scripted(ScriptedAnnotator::new(log))
        }
        AnnotatorMode::Server => Source::Hub {
            hub: hub
                .clone()
                .ok_or_else(|| RunError::config("annotator.mode", "server mode needs an annotation hub"))?,
            timeout: Duration::from_secs(config.annotator.timeout_secs),
            poll: Duration::from_millis(config.annotator.poll_ms),
        },
    };

    let dataset = load_dataset(&config.dataset)?;
    let (model, source_theta) = source_model(config, &dataset)?;
    let pcfg = config.pipeline_config();
    pcfg.validate_for(&model)?;
    let total = dataset.slices.len();

    let mut run = Run {
        config,
        hub,
        source,
        history: resume.as_ref().map(|c| c.history.clone()).unwrap_or_default(),
    };
    let (resume_barrier, mut resume_answered) = match resume {
        Some(c) => (Some(c.barrier), c.answered),
        None => (None, Vec::new()),
    };

    let (mut pipeline, start) = match resume_barrier {
        None | Some(Barrier::Warmup) => {
            if let Some(h) = &run.hub {
                h.set_phase(Phase::Warmup);
                h.update_progress(|p| {
                    p.methodology = Some(config.methodology);
                    p.slices_total = total;
                });
            }
            let plan = Pipeline::plan_warmup(&pcfg, &model, &dataset.warm, source_theta)?;
            let known = std::mem::take(&mut resume_answered);
            let verdicts = match run.source.gather(plan.review_items(), &known)? {
                Gathered::Complete(v) => v,
                Gathered::Interrupted { answered, outstanding } => {
                    return Err(run.park(Barrier::Warmup, answered, outstanding)?)
                }
            };
            let p = Pipeline::from_warmup(pcfg, model, &plan, &verdicts)?;
            run.history.extend(verdicts);
            (p, 0)
        }
        Some(Barrier::Slice { position, state, .. }) => (Pipeline::from_state(pcfg, *state)?, position),
    };

    if let Some(h) = &run.hub {
        h.set_phase(Phase::Active);
    }
    for (position, slice) in dataset.slices.iter().enumerate().skip(start) {
        let pending = pipeline.begin_slice(slice)?;
        run.publish(&pipeline, total, Some(pending.slice_index()));
        let known = std::mem::take(&mut resume_answered);
        let verdicts = match run.source.gather(pending.review_items(), &known)? {
            Gathered::Complete(v) => v,
            Gathered::Interrupted { answered, outstanding } => {
                let barrier = Barrier::Slice {
                    position,
                    slice_index: pending.slice_index(),
                    state: Box::new(pipeline.state().clone()),
                };
                return Err(run.park(barrier, answered, outstanding)?);
            }
        };
        pipeline.finish_slice(pending, &verdicts)?;
        run.history.extend(verdicts);
        run.publish(&pipeline, total, None);
    }

    let report = pipeline.report();
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    let outcome = RunOutcome {
        report_path: out.join(REPORT_FILE),
        summary_path: out.join(SUMMARY_FILE),
        verdicts_path: out.join(VERDICTS_FILE),
        report,
    };
    write_report(&outcome.report, &outcome.report_path)?;
    write_summary_csv(&outcome.report, &outcome.summary_path)?;
    write_json(&outcome.verdicts_path, &run.history)?;
    let stale = out.join(CHECKPOINT_FILE);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| DataError::io(&stale, e))?;
    }
    if let Some(h) = &run.hub {
        let path = outcome.report_path.display().to_string();
        h.update_progress(|p| p.report_path = Some(path));
        h.set_phase(Phase::Done);
    }
    Ok(outcome)
}

/// Resolves the checkpoint path for an output directory.
pub fn checkpoint_path(output_dir: &Path) -> PathBuf {
    output_dir.join(CHECKPOINT_FILE)
}
