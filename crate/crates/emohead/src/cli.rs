//! `emohead` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use emohead_core::fusion::{fit_fusion_weights, fuse_all};
use emohead_core::metrics::{EMOTIONS, NUM_CLASSES};
use emohead_core::model::{component_of, model_gradcheck, Architecture, HeadModel, Utterance};
use emohead_core::rng::{stream, Stream};
use emohead_core::train::{evaluate, train, training_class_weights, TrainError};
use emohead_core::Tensor;
use rand::Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{GradcheckConfig, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::load_manifest;
use crate::outputs::{load_prediction_set, write_fused, write_fusion_report, write_metrics, write_predictions, write_train_log};
use crate::synthetic::generate_synthetic_dataset;

#[derive(Debug, Parser)]
#[command(name = "emohead", version, about = "Speech-emotion head over precomputed upstream features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lr=1e-3`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifests.
    GenData(Common),
    /// Train a head and save its best checkpoint.
    Train(Common),
    /// Score a manifest with a checkpoint.
    Eval(Common),
    /// Fit fusion weights over several prediction files.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Prediction CSVs; `paths.predictions` when omitted.
        predictions: Vec<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check the five preset models instead of the configured one.
        #[arg(long)]
        presets: bool,
    },
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 for invalid configuration or usage, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {}", s);
                source = s.source();
            }
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p, &common.overrides),
        None => RunConfig::parse("", &common.overrides),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&load_config(&c)?),
        Command::Train(c) => train_cmd(&load_config(&c)?),
        Command::Eval(c) => eval_cmd(&load_config(&c)?),
        Command::Fuse { common, predictions } => fuse_cmd(&load_config(&common)?, predictions),
        Command::Gradcheck { common, presets } => gradcheck_cmd(&load_config(&common)?, presets),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let (train, dev) = generate_synthetic_dataset(&cfg.data, dir)?;
    println!("wrote {} train and {} dev utterances to {}", train.len(), dev.len(), dir.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let train_set = load_manifest(&cfg.paths.train_manifest)?;
    let dev_set = load_manifest(&cfg.paths.dev_manifest)?;
    eprintln!("train classes: {}", train_set.describe_histogram());
    let train_utts = train_set.load_utterances(&cfg.model)?;
    let dev_utts = dev_set.load_utterances(&cfg.model)?;

    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.describe()).map_err(|e| Error::io(out.join("config.toml"), e))?;
    let model = HeadModel::<f32>::new(cfg.model.clone(), &mut stream(cfg.seed, Stream::Init))?;
    eprintln!("parameters: {}", model.parameter_count());

    match train(model, &train_utts, &dev_utts, &cfg.train) {
        Ok(outcome) => {
            for e in &outcome.log {
                eprintln!(
                    "epoch {:>3}  loss {:.6}  dev F1-macro {}",
                    e.epoch,
                    e.train_loss,
                    e.dev_f1_macro.map_or("-".into(), |f| format!("{:.4}", f))
                );
            }
            write_train_log(out.join("train_log.jsonl"), &outcome.log)?;
            save_checkpoint(cfg.paths.checkpoint_dir(), &outcome.best, Some(outcome.best_epoch), outcome.best_dev_f1)?;
            println!(
                "best epoch {} dev F1-macro {}; checkpoint in {}",
                outcome.best_epoch,
                outcome.best_dev_f1.map_or("-".into(), |f| format!("{:.4}", f)),
                cfg.paths.checkpoint_dir().display()
            );
            Ok(())
        }
        Err(TrainError::Diverged { epoch, reason, last_good, log }) => {
            write_train_log(out.join("train_log.jsonl"), &log)?;
            save_checkpoint(cfg.paths.checkpoint_dir(), &last_good, None, None)?;
            Err(TrainError::Diverged { epoch, reason, last_good, log }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let (model, _) = load_checkpoint(cfg.paths.checkpoint_dir())?;
    let manifest = load_manifest(cfg.paths.eval_manifest())?;
    let utts = manifest.load_utterances(model.architecture())?;
    let eval = evaluate(&model, &utts)?;
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    write_predictions(out.join("predictions.csv"), &eval)?;
    write_metrics(out.join("metrics.json"), &eval.report)?;
    println!("F1-macro {:.4} over {} utterances", eval.report.macro_f1, utts.len());
    Ok(())
}

fn fuse_cmd(cfg: &RunConfig, predictions: Vec<PathBuf>) -> Result<()> {
    let files = if predictions.is_empty() { cfg.paths.predictions.clone() } else { predictions };
    let set = load_prediction_set(&files)?;
    let (weights, report) = fit_fusion_weights(&set, &cfg.fusion)?;
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    write_fused(out.join("fused.csv"), &set.ids, &fuse_all(&set, &weights)?)?;
    write_fusion_report(out.join("fusion_report.json"), &set, &weights, &report)?;

    let width = set.model_names.iter().map(|n| n.chars().count()).max().unwrap_or(0).max(14) + 2;
    let mut table = String::new();
    table.push_str(&format!("{:<width$}", "model"));
    for e in EMOTIONS {
        table.push_str(&format!("{:>9}", e));
    }
    table.push_str(&format!("{:>9}\n", "macro"));
    let mut row = |name: &str, r: &emohead_core::metrics::F1Report| {
        table.push_str(&format!("{:<width$}", name));
        for v in &r.per_class {
            table.push_str(&format!("{:>9.4}", v));
        }
        table.push_str(&format!("{:>9.4}\n", r.macro_f1));
    };
    for (n, r) in set.model_names.iter().zip(&report.per_model) {
        row(n, r);
    }
    row("fusion_uniform", &report.initial);
    row("fusion_fitted", &report.fitted);
    print!("{}", table);
    if report.no_gain {
        println!("fitting found no gain over uniform weights");
    }
    Ok(())
}

fn gradcheck_batch<R: Rng>(arch: &Architecture, g: &GradcheckConfig, rng: &mut R) -> Result<Vec<Utterance>> {
    (0..g.batch)
        .map(|i| {
            let n = arch.num_layers * g.frames * arch.hidden;
            let features =
                Tensor::from_vec(&[arch.num_layers, g.frames, arch.hidden], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let text = Tensor::vector((0..arch.text_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            Ok(Utterance { id: format!("g{}", i), features, gender: (i % 2) as u8, text, label: (3 * i) % NUM_CLASSES })
        })
        .collect()
}

/// Worst relative error per component of one architecture.
pub fn gradcheck_architecture(arch: &Architecture, g: &GradcheckConfig, seed: u64) -> Result<Vec<(String, usize, f64)>> {
    let mut rng = stream(seed, Stream::Gradcheck);
    let model = HeadModel::<f64>::new(arch.clone(), &mut stream(seed, Stream::Init))?;
    let batch = gradcheck_batch(arch, g, &mut rng)?;
    let weights = training_class_weights(&model.cast::<f32>(), &batch)?;
    let refs: Vec<&Utterance> = batch.iter().collect();
    let entries = model_gradcheck(&model, &refs, &weights, g.eps, g.max_coords, &mut rng)?;
    let mut by_component: Vec<(String, usize, f64)> = Vec::new();
    for e in entries {
        let c = component_of(&e.parameter).to_string();
        match by_component.iter_mut().find(|(n, _, _)| *n == c) {
            Some(slot) => {
                slot.1 += e.checked;
                slot.2 = slot.2.max(e.max_rel_error);
            }
            None => by_component.push((c, e.checked, e.max_rel_error)),
        }
    }
    Ok(by_component)
}

fn gradcheck_cmd(cfg: &RunConfig, presets: bool) -> Result<()> {
    let g = &cfg.gradcheck;
    let sized = |a: Architecture| Architecture { text_dim: g.text_dim, ..a.with_dims(g.num_layers, g.hidden, g.projection) };
    let arches: Vec<(String, Architecture)> = if presets {
        (1..=5).map(|i| Ok((format!("model{}", i), sized(Architecture::preset(i)?)))).collect::<Result<_>>()?
    } else {
        vec![("configured".to_string(), sized(cfg.model.clone()))]
    };
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    let mut csv = String::from("model,component,checked,max_rel_error,status\n");
    let mut failed = 0;
    let stdout = std::io::stdout();
    let mut so = stdout.lock();
    let _ = writeln!(so, "{:<12}{:<14}{:>8}{:>14}  status", "model", "component", "checked", "max rel err");
    for (name, arch) in &arches {
        arch.validate()?;
        for (component, checked, err) in gradcheck_architecture(arch, g, cfg.seed)? {
            let ok = err < g.tolerance;
            failed += usize::from(!ok);
            let status = if ok { "pass" } else { "FAIL" };
            let _ = writeln!(so, "{:<12}{:<14}{:>8}{:>14.3e}  {}", name, component, checked, err, status);
            csv.push_str(&format!("{},{},{},{:e},{}\n", name, component, checked, err, status));
        }
    }
    fs::write(out.join("gradcheck.csv"), csv).map_err(|e| Error::io(out.join("gradcheck.csv"), e))?;
    if failed > 0 {
        return Err(Error::Input(format!("{} component(s) exceed relative error {}", failed, g.tolerance)));
    }
    Ok(())
}
