use super::{load_state, save_state, train_step, BatchItem, StepReport, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalReport};
use crate::synth::{Dataset, Taxonomy};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const METRICS_LOG: &str = "metrics.csv";
pub const EVAL_LOG: &str = "eval.csv";
pub const STATE_FILE: &str = "checkpoint.bin";

const METRICS_HEADER: &str = "iter,loss_total,loss_sup,loss_mix,loss_proto,lr";
const EVAL_HEADER: &str = "iter,miou,static,dynamic_small";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from a state written by an earlier run.
    pub resume_from: Option<PathBuf>,
    /// Stop (and checkpoint) after this many completed steps.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Reports of the steps executed by this call.
    pub reports: Vec<StepReport>,
    /// `(completed steps, report)` for every evaluation of this call.
    pub evals: Vec<(usize, EvalReport)>,
    /// Present when training reached `total_iters` and a test split exists.
    pub final_eval: Option<EvalReport>,
    pub state: TrainState,
}

/// Opens a CSV log, keeping earlier rows whose key passes `keep` when
/// resuming.
fn open_log(path: &Path, header: &str, resume: bool, keep: impl Fn(usize) -> bool) -> Result<File> {
    let mut body = format!("{header}\n");
    if resume {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let key = line.split(',').next().and_then(|k| k.parse::<usize>().ok());
                if key.is_some_and(&keep) {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
    }
    fs::write(path, &body).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn append(file: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains on `dataset`, writing metrics, evaluations and the final state
/// under `out_dir`.
pub fn run(
    cfg: &TrainConfig,
    dataset: &Dataset,
    taxonomy: &Taxonomy,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    cfg.validate()?;
    if dataset.source.is_empty() {
        return Err(Error::Config("dataset has no source samples".into()));
    }
    if cfg.uses_target() && dataset.target.is_empty() {
        return Err(Error::Config("dataset has no target pairs".into()));
    }
    if cfg.model.num_classes != taxonomy.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes, taxonomy has {}",
            cfg.model.num_classes,
            taxonomy.num_classes()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match &opts.resume_from {
        Some(p) => load_state(p, cfg)?,
        None => TrainState::new(cfg)?,
    };
    let start = state.iteration;
    if start > cfg.total_iters {
        return Err(Error::Config(format!(
            "checkpoint is at step {start}, beyond total_iters {}",
            cfg.total_iters
        )));
    }
    let end = opts
        .stop_after
        .unwrap_or(cfg.total_iters)
        .min(cfg.total_iters);
    let resume = opts.resume_from.is_some();
    let metrics_path = out_dir.join(METRICS_LOG);
    let eval_path = out_dir.join(EVAL_LOG);
    let state_path = out_dir.join(STATE_FILE);
    let mut metrics = open_log(&metrics_path, METRICS_HEADER, resume, |k| k < start)?;
    let mut eval_log = open_log(&eval_path, EVAL_HEADER, resume, |k| k <= start)?;

    let k = cfg.pairs_per_step();
    let (ns, nt) = (dataset.source.len(), dataset.target.len().max(1));
    let mut reports = Vec::with_capacity(end.saturating_sub(start));
    let mut evals = Vec::new();
    let evaluate =
        |state: &TrainState, done: usize, log: &mut File| -> Result<Option<EvalReport>> {
            if dataset.test.is_empty() {
                return Ok(None);
            }
            let (report, _) = evalkit::evaluate_model(&state.student, &dataset.test, taxonomy)?;
            let row = format!(
                "{done},{},{},{}",
                report.miou, report.static_miou, report.dynamic_miou
            );
            append(log, &eval_path, &row)?;
            log::info!(
                "step {done}: night mIoU {:.2} (static {:.2}, dynamic+small {:.2})",
                100.0 * report.miou,
                100.0 * report.static_miou,
                100.0 * report.dynamic_miou
            );
            Ok(Some(report))
        };

    for t in start..end {
        let batch: Vec<BatchItem> = (0..k)
            .map(|j| {
                let (xs, ys) = &dataset.source[(t * k + j) % ns];
                let (xd, xn) = dataset
                    .target
                    .get((t * k + j) % nt)
                    .map_or((xs, xs), |(d, n)| (d, n));
                BatchItem {
                    source_image: xs,
                    source_label: ys,
                    target_day: xd,
                    target_night: xn,
                }
            })
            .collect();
        let report = train_step(&mut state, cfg, taxonomy, &batch)?;
        append(&mut metrics, &metrics_path, &report.csv_row())?;
        if cfg.log_every > 0 && (t + 1) % cfg.log_every == 0 {
            log::info!(
                "step {}/{}: loss {:.4} (sup {:.4}, mix {:.4}, proto {:.4}) lr {:.3e}",
                t + 1,
                cfg.total_iters,
                report.loss_total,
                report.loss_sup,
                report.loss_mix,
                report.loss_proto,
                report.lr
            );
        }
        reports.push(report);
        let done = t + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.total_iters {
            if let Some(r) = evaluate(&state, done, &mut eval_log)? {
                evals.push((done, r));
            }
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < end {
            save_state(&state, &state_path)?;
        }
    }
    save_state(&state, &state_path)?;
    let mut final_eval = None;
    if state.iteration == cfg.total_iters {
        final_eval = evaluate(&state, state.iteration, &mut eval_log)?;
        if let Some(r) = &final_eval {
            evals.push((state.iteration, r.clone()));
            r.write(out_dir)?;
        }
    }
    if state.empty_mix > 0 {
        log::warn!("{} mixed samples had no labelled pixels", state.empty_mix);
    }
    Ok(RunSummary {
        reports,
        evals,
        final_eval,
        state,
    })
}
