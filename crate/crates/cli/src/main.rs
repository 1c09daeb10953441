//! Command-line front end: train, evaluate, generate synthetic data, make
//! splits, and plot training curves.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mkdseg::augment::AugmentParams;
use mkdseg::checkpoint::{config_fingerprint, load_checkpoint};
use mkdseg::data::{
    apply_manifest, generate_synthetic, load_folder_dataset, make_partition, read_manifest,
    save_dataset, write_manifest, SyntheticSceneConfig,
};
use mkdseg::driver::{run_training, RunOptions};
use mkdseg::eval::{evaluate_dataset, BranchSelector};
use mkdseg::isda::CovarianceMode;
use mkdseg::model::ArchConfig;
use mkdseg::trainer::Trainer;
use mkdseg::types::TrainConfig;

#[derive(Parser)]
#[command(
    name = "mkdseg",
    about = "Semi-supervised semantic segmentation with mutual knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training from a config file, optionally resuming a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate one of the four networks in a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root containing images/ and labels/.
        #[arg(long)]
        data: PathBuf,
        /// One of student1, student2, teacher1, teacher2.
        #[arg(long)]
        branch: String,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// Scene config; omitted fields use documented defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Shuffle a dataset into a 1/n labeled split and write the manifest.
    Split {
        /// Dataset root containing images/ and labels/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        denominator: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss and mIoU curves from a training log as SVG.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            branch,
        } => cmd_eval(&checkpoint, &data, &branch),
        Command::Synth { config, out, count } => cmd_synth(config.as_deref(), &out, count),
        Command::Split {
            data,
            denominator,
            seed,
            out,
        } => cmd_split(&data, denominator, seed, &out),
        Command::Plot { log, out } => cmd_plot(&log, &out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn default_covariance() -> CovarianceMode {
    CovarianceMode::Diagonal
}

/// Paths and cadence for one training run.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    train_images: PathBuf,
    train_labels: PathBuf,
    #[serde(default)]
    manifest: Option<PathBuf>,
    #[serde(default)]
    val_images: Option<PathBuf>,
    #[serde(default)]
    val_labels: Option<PathBuf>,
    out_dir: PathBuf,
    #[serde(default)]
    checkpoint_every: u64,
    #[serde(default)]
    eval_every: u64,
    #[serde(default = "default_covariance")]
    covariance: CovarianceMode,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    run: RunSection,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    arch: ArchConfig,
    #[serde(default)]
    augment: AugmentParams,
}

fn load_run_config(path: &Path) -> Result<RunConfigFile, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    let file: RunConfigFile = toml::from_str(&text)
        .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
    Ok(file)
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> CmdResult {
    let file = load_run_config(config_path)?;
    let cfg = file.train.clone().validate().map_err(usage)?;

    let mut train_ds =
        load_folder_dataset(&file.run.train_images, &file.run.train_labels, cfg.num_classes)
            .map_err(usage)?;
    if let Some(manifest_path) = &file.run.manifest {
        let entries = read_manifest(manifest_path).map_err(usage)?;
        train_ds = apply_manifest(&train_ds, &entries).map_err(usage)?;
    }
    let val_ds = match (&file.run.val_images, &file.run.val_labels) {
        (Some(imgs), Some(labs)) => {
            Some(load_folder_dataset(imgs, labs, cfg.num_classes).map_err(usage)?)
        }
        (None, None) => None,
        _ => {
            return Err(usage(anyhow!(
                "val_images and val_labels must be given together"
            )))
        }
    };

    let mut trainer = match resume {
        Some(path) => {
            let t = load_checkpoint(path).map_err(runtime)?;
            let expected = config_fingerprint(&file.arch, &cfg, &file.augment);
            let actual = config_fingerprint(t.arch(), &t.cfg, &t.aug_params);
            if expected != actual {
                return Err(usage(anyhow!(
                    "checkpoint at {} was created under a different configuration",
                    path.display()
                )));
            }
            println!("resuming from step {}", t.step);
            t
        }
        None => Trainer::new(
            cfg.clone(),
            file.arch.clone(),
            file.augment.clone(),
            file.run.covariance,
        )
        .map_err(usage)?,
    };

    let opts = RunOptions {
        checkpoint_every: file.run.checkpoint_every,
        eval_every: file.run.eval_every,
        stop_at_step: None,
        out_dir: file.run.out_dir.clone(),
    };
    let print_every = (cfg.iters_max as u64 / 20).max(1);
    let finals = run_training(&mut trainer, &train_ds, val_ds.as_ref(), &opts, |r| {
        if r.step % print_every == 0 || r.step + 1 == cfg.iters_max as u64 {
            println!(
                "step {:>6}  total {:>9.4}  sup {:>9.4}  st {:>9.4}  ss {:>9.4}  lr {:.5}",
                r.step, r.total, r.sup, r.st, r.ss, r.lr
            );
        }
    })
    .map_err(runtime)?;
    for (sel, report) in &finals {
        println!("\nfinal {:?} held-out evaluation:\n{report}", sel);
    }
    println!(
        "done: {} steps, outputs in {}",
        trainer.step,
        file.run.out_dir.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, branch: &str) -> CmdResult {
    let sel: BranchSelector = branch.parse().map_err(usage)?;
    let trainer = load_checkpoint(checkpoint).map_err(runtime)?;
    let ds = load_folder_dataset(
        &data.join("images"),
        &data.join("labels"),
        trainer.cfg.num_classes,
    )
    .map_err(usage)?;
    let report = evaluate_dataset(sel.pick(&trainer), &ds, None).map_err(runtime)?;
    println!("checkpoint step {}  branch {branch}", trainer.step);
    println!("{report}");
    Ok(())
}

fn cmd_synth(config: Option<&Path>, out: &Path, count: usize) -> CmdResult {
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            toml::from_str::<SyntheticSceneConfig>(&text)
                .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?
        }
        None => SyntheticSceneConfig::default(),
    };
    let ds = generate_synthetic(&cfg, count).map_err(usage)?;
    save_dataset(&ds, out).map_err(runtime)?;
    println!(
        "wrote {count} synthetic scenes ({}x{}, {} classes) to {}",
        cfg.height,
        cfg.width,
        cfg.class_count,
        out.display()
    );
    Ok(())
}

fn cmd_split(data: &Path, denominator: usize, seed: u64, out: &Path) -> CmdResult {
    // class bound 254 accepts any label byte except the IGNORE sentinel
    let ds = load_folder_dataset(&data.join("images"), &data.join("labels"), 254)
        .map_err(usage)?;
    let part = make_partition(&ds, denominator, seed).map_err(usage)?;
    write_manifest(&part, out).map_err(runtime)?;
    println!(
        "split {} items into {} labeled / {} unlabeled -> {}",
        part.items.len(),
        part.labeled_indices().len(),
        part.unlabeled_indices().len(),
        out.display()
    );
    Ok(())
}

fn cmd_plot(log: &Path, out: &Path) -> CmdResult {
    let parsed = plot::parse_log(log).map_err(runtime)?;
    if parsed.skipped > 0 {
        eprintln!("warning: skipped {} malformed log lines", parsed.skipped);
    }
    let svg = plot::render_curves(&parsed).map_err(runtime)?;
    fs::write(out, svg)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(runtime)?;
    println!(
        "plotted {} step records and {} eval records to {}",
        parsed.steps.len(),
        parsed.evals.len(),
        out.display()
    );
    Ok(())
}
