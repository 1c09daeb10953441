//! Training loop driver: batch sampling, step logging, checkpoint cadence,
//! and held-out evaluation.
//!
//! The driver is a thin deterministic shell around [`Trainer::train_step`].
//! Batches are drawn with replacement from the manifest's labeled and
//! unlabeled pools on streams keyed by the step index, so a resumed run
//! samples exactly what the uninterrupted run would have.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::data::{sample_batch, SegDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, BranchSelector};
use crate::metrics::MiouReport;
use crate::rng::Stream;
use crate::trainer::{LabeledItem, StepReport, Trainer};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Write `checkpoint.bin` every this many steps; 0 writes only the
    /// final checkpoint.
    pub checkpoint_every: u64,
    /// Evaluate the held-out set every this many steps; 0 evaluates only
    /// at the end.
    pub eval_every: u64,
    /// Stop after reaching this step even though the schedule continues.
    /// The learning-rate and ramp schedules still follow `iters_max`, so a
    /// run stopped here and resumed matches an uninterrupted one.
    pub stop_at_step: Option<u64>,
    pub out_dir: PathBuf,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            checkpoint_every: 0,
            eval_every: 0,
            stop_at_step: None,
            out_dir: out_dir.into(),
        }
    }
}

#[derive(Serialize)]
struct StepRecord<'a> {
    kind: &'static str,
    #[serde(flatten)]
    report: &'a StepReport,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    kind: &'static str,
    step: u64,
    branch: &'a str,
    miou: f64,
    per_class: &'a [Option<f64>],
}

fn append_line(file: &mut File, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(value)
        .map_err(|e| Error::Validation {
            context: "log record",
            message: e.to_string(),
        })?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}

/// Per-branch evaluation written to the log and returned to the caller.
pub fn log_evaluation(
    log: &mut File,
    trainer: &Trainer,
    val: &SegDataset,
    step: u64,
    branches: &[BranchSelector],
) -> Result<Vec<(BranchSelector, MiouReport)>> {
    let mut out = Vec::new();
    for &sel in branches {
        let report = evaluate_dataset(sel.pick(trainer), val, None)?;
        let name = match sel {
            BranchSelector::Student1 => "student1",
            BranchSelector::Student2 => "student2",
            BranchSelector::Teacher1 => "teacher1",
            BranchSelector::Teacher2 => "teacher2",
        };
        append_line(
            log,
            &EvalRecord {
                kind: "eval",
                step,
                branch: name,
                miou: report.mean,
                per_class: &report.per_class,
            },
        )?;
        out.push((sel, report));
    }
    Ok(out)
}

/// Runs the trainer from its current step up to `iters_max`. Returns the
/// final held-out evaluations (empty when no validation set was given).
///
/// A non-finite loss saves the failing state to `checkpoint-failed.bin`
/// and propagates the error.
pub fn run_training(
    trainer: &mut Trainer,
    train: &SegDataset,
    val: Option<&SegDataset>,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<(BranchSelector, MiouReport)>> {
    fs::create_dir_all(&opts.out_dir)?;
    let labeled_pool = train.labeled_indices();
    let unlabeled_pool = train.unlabeled_indices();
    if labeled_pool.is_empty() {
        return Err(Error::Dataset("training set has no labeled items".into()));
    }
    let needs_unlabeled = trainer.cfg.alpha != 0.0 || trainer.cfg.beta != 0.0;
    if needs_unlabeled && unlabeled_pool.is_empty() && trainer.cfg.batch_unlabeled > 0 {
        return Err(Error::Dataset(
            "consistency terms are enabled but the training set has no unlabeled items".into(),
        ));
    }

    // images convert to [0,1] once up front
    let images: Vec<Array3<f64>> = train.items.iter().map(|it| it.image_f64()).collect();

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(opts.out_dir.join("train_log.jsonl"))?;

    let seed = trainer.cfg.seed;
    let iters_max = trainer.cfg.iters_max as u64;
    let stop_at = opts.stop_at_step.unwrap_or(u64::MAX).min(iters_max);
    while trainer.step < stop_at {
        let step = trainer.step;
        let labeled_idx = sample_batch(
            &labeled_pool,
            trainer.cfg.batch_labeled,
            seed,
            Stream::SamplerLabeled,
            step,
        )?;
        let unlabeled_idx = if needs_unlabeled && !unlabeled_pool.is_empty() {
            sample_batch(
                &unlabeled_pool,
                trainer.cfg.batch_unlabeled,
                seed,
                Stream::SamplerUnlabeled,
                step,
            )?
        } else {
            Vec::new()
        };

        let labeled: Vec<LabeledItem> = labeled_idx
            .iter()
            .map(|&i| {
                let labels = train.items[i]
                    .labels
                    .as_ref()
                    .expect("labeled pool items carry labels");
                (images[i].view(), labels.view())
            })
            .collect();
        let unlabeled: Vec<_> = unlabeled_idx.iter().map(|&i| images[i].view()).collect();

        let report = match trainer.train_step(&labeled, &unlabeled) {
            Ok(r) => r,
            Err(err) => {
                let _ = save_checkpoint(&opts.out_dir.join("checkpoint-failed.bin"), trainer);
                return Err(err);
            }
        };
        append_line(&mut log, &StepRecord {
            kind: "step",
            report: &report,
        })?;
        on_step(&report);

        let done = trainer.step;
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 && done < iters_max {
            save_checkpoint(&opts.out_dir.join("checkpoint.bin"), trainer)?;
        }
        if opts.eval_every > 0 && done % opts.eval_every == 0 && done < iters_max {
            if let Some(val) = val {
                log_evaluation(&mut log, trainer, val, done, &[BranchSelector::Student1])?;
            }
        }
    }

    save_checkpoint(&opts.out_dir.join("checkpoint-final.bin"), trainer)?;
    match val {
        Some(val) => log_evaluation(
            &mut log,
            trainer,
            val,
            trainer.step,
            &[BranchSelector::Student1, BranchSelector::Student2],
        ),
        None => Ok(Vec::new()),
    }
}

/// Reads a JSONL training log back into step reports, skipping non-step
/// records.
pub fn read_step_log(path: &Path) -> Result<Vec<StepReport>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Validation {
            context: "training log",
            message: e.to_string(),
        })?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("step") {
            let report: StepReport =
                serde_json::from_value(value).map_err(|e| Error::Validation {
                    context: "training log",
                    message: e.to_string(),
                })?;
            out.push(report);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    use crate::augment::AugmentParams;
    use crate::checkpoint::load_checkpoint;
    use crate::data::{generate_synthetic, make_partition, SyntheticSceneConfig};
    use crate::isda::CovarianceMode;
    use crate::model::ArchConfig;
    use crate::types::TrainConfig;

    fn tiny_setup(iters: usize) -> (Trainer, SegDataset, SegDataset) {
        let cfg = TrainConfig {
            num_classes: 4,
            crop: (16, 16),
            iters_max: iters,
            batch_labeled: 2,
            batch_unlabeled: 2,
            seed: 21,
            ..TrainConfig::default()
        };
        let arch = ArchConfig {
            widths: [2, 3, 4],
            feature_dim: 3,
            num_classes: 4,
            ..ArchConfig::default()
        };
        let trainer =
            Trainer::new(cfg, arch, AugmentParams::default(), CovarianceMode::Diagonal).unwrap();
        let scene = SyntheticSceneConfig {
            height: 24,
            width: 24,
            seed: 31,
            ..SyntheticSceneConfig::default()
        };
        let train = make_partition(&generate_synthetic(&scene, 8).unwrap(), 2, 1).unwrap();
        let val = generate_synthetic(
            &SyntheticSceneConfig {
                seed: 77,
                ..scene
            },
            3,
        )
        .unwrap();
        (trainer, train, val)
    }

    #[test]
    fn run_writes_log_and_final_checkpoint() {
        let (mut trainer, train, val) = tiny_setup(3);
        let dir = tempdir().unwrap();
        let opts = RunOptions::new(dir.path());
        let mut seen = 0usize;
        let finals =
            run_training(&mut trainer, &train, Some(&val), &opts, |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(trainer.step, 3);
        assert_eq!(finals.len(), 2);
        let log = read_step_log(&dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].step, 0);
        assert_eq!(log[2].step, 2);
        let restored = load_checkpoint(&dir.path().join("checkpoint-final.bin")).unwrap();
        assert_eq!(restored.step, 3);
    }

    #[test]
    fn periodic_checkpoint_resumes_bitwise() {
        let (mut full, train, val) = tiny_setup(4);
        let dir_full = tempdir().unwrap();
        run_training(
            &mut full,
            &train,
            Some(&val),
            &RunOptions::new(dir_full.path()),
            |_| {},
        )
        .unwrap();
        let full_log = read_step_log(&dir_full.path().join("train_log.jsonl")).unwrap();

        let (mut partial, _, _) = tiny_setup(4);
        let dir_a = tempdir().unwrap();
        let opts_a = RunOptions {
            checkpoint_every: 2,
            eval_every: 0,
            stop_at_step: Some(2),
            out_dir: dir_a.path().to_path_buf(),
        };
        run_training(&mut partial, &train, None, &opts_a, |_| {}).unwrap();

        let mut resumed = load_checkpoint(&dir_a.path().join("checkpoint-final.bin")).unwrap();
        assert_eq!(resumed.step, 2);
        let dir_b = tempdir().unwrap();
        run_training(&mut resumed, &train, None, &RunOptions::new(dir_b.path()), |_| {}).unwrap();
        let tail = read_step_log(&dir_b.path().join("train_log.jsonl")).unwrap();
        assert_eq!(tail.len(), 2);
        for (a, b) in full_log[2..].iter().zip(tail.iter()) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn missing_labeled_pool_is_rejected() {
        let (mut trainer, mut train, _) = tiny_setup(2);
        for entry in &mut train.manifest {
            entry.labeled = false;
        }
        let dir = tempdir().unwrap();
        let err = run_training(&mut trainer, &train, None, &RunOptions::new(dir.path()), |_| {});
        assert!(err.is_err());
    }
}
