//! `basisnet` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::cost::{model_cost, sweep};
use crate::disturbance::{layer_sweep, mean_std, CoefficientCache, Disturbance, DisturbTarget, DisturbanceKind};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, resume_checkpoint, save_checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{export_coefficients, write_csv, DisturbRow};
use crate::training::{distill_targets, evaluate, train, train_backbone, DistillConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "basisnet", version, about = "Two-stage basis-kernel synthesis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a resume checkpoint saved under a different config.
        #[arg(long)]
        force: bool,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Accuracy of the lightweight and full models, and the skip rate.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Accuracy / cost trade-off over early-termination thresholds.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        thresholds: Vec<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Accuracy under coefficient disturbances.
    Disturb {
        #[arg(long)]
        ckpt: PathBuf,
        /// correct, top1, mean, uniform, shuffled, or `all` for the config's list.
        #[arg(long)]
        kind: String,
        /// Disturb only this layer (`layers` with shuffled sweeps every layer).
        #[arg(long)]
        layer: Option<String>,
        /// Shuffle seeds to average over.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Itemized parameter and MAdds report for a config.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Predicted coefficients of every evaluation image as CSV.
    ExportCoeffs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{line}");
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn out_dir(cfg: &ExperimentConfig, over: Option<PathBuf>) -> Result<PathBuf> {
    let dir = over.unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            resume,
            force,
            output_dir,
        } => cmd_train(&config, resume.as_deref(), force, output_dir),
        Command::Eval {
            ckpt,
            threshold,
            output_dir,
        } => {
            let (state, cfg) = load_checkpoint(&ckpt)?;
            let t = threshold.unwrap_or(cfg.eval.default_threshold);
            let data = cfg.dataset.load()?;
            let e = evaluate(&state.model, &data.eval, t)?;
            let report = serde_json::json!({
                "step": state.step,
                "threshold": t,
                "acc_lm": e.acc_lm,
                "acc_full": e.acc_full,
                "skip_rate": e.skip_rate,
            });
            write_json(&out_dir(&cfg, output_dir)?.join("eval.json"), &report)?;
            println!(
                "step {}: lm acc {:.4}, full acc {:.4}, skip rate {:.4} at threshold {t}",
                state.step, e.acc_lm, e.acc_full, e.skip_rate
            );
            Ok(())
        }
        Command::Sweep {
            ckpt,
            thresholds,
            output_dir,
        } => {
            let (state, cfg) = load_checkpoint(&ckpt)?;
            let data = cfg.dataset.load()?;
            let points = sweep(&state.model, &data.eval, &thresholds)?;
            write_csv(&out_dir(&cfg, output_dir)?.join("sweep.csv"), &points)?;
            for p in &points {
                println!(
                    "threshold {:>6}: skip {:.4}  avg MAdds {:.1}  acc {:.4}",
                    p.threshold, p.skip_rate, p.avg_madds, p.accuracy
                );
            }
            Ok(())
        }
        Command::Disturb {
            ckpt,
            kind,
            layer,
            seeds,
            output_dir,
        } => cmd_disturb(&ckpt, &kind, layer.as_deref(), seeds, output_dir),
        Command::Cost { config, output_dir } => {
            let cfg = ExperimentConfig::from_json(
                &std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?,
            )?;
            let report = model_cost(&cfg.build_model()?)?;
            write_json(&out_dir(&cfg, output_dir)?.join("cost.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::ExportCoeffs { ckpt, out } => {
            let (state, cfg) = load_checkpoint(&ckpt)?;
            let data = cfg.dataset.load()?;
            let rows = export_coefficients(&state.model, &data.eval)?;
            write_csv(&out, &rows)?;
            println!("wrote {} coefficient rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn cmd_train(config: &Path, resume: Option<&Path>, force: bool, over: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let dir = out_dir(&cfg, over)?;
    let data = cfg.dataset.load()?;
    let mut state = match resume {
        Some(ckpt) => resume_checkpoint(ckpt, &cfg, force)?,
        None => TrainState::new(cfg.build_model()?),
    };
    let soft = match &cfg.loss.distill {
        DistillConfig::Off => None,
        DistillConfig::On { teacher, .. } => {
            let params = train_backbone(&teacher.backbone, &data.train, teacher, cfg.seed ^ 0x7eac)?;
            Some(distill_targets(
                &teacher.backbone,
                &params,
                &data.train.images(),
                state.model.num_classes(),
            )?)
        }
    };
    let rows = train(
        &mut state,
        &data.train,
        &data.eval,
        soft.as_deref(),
        &cfg.schedule,
        &cfg.loss,
        cfg.eval.default_threshold,
        |r| {
            println!(
                "step {:>6}  loss {:.4}  lm acc {:.4}  full acc {:.4}  eps {:.3}  skip {:.3}",
                r.step, r.train_loss, r.eval_acc_lm, r.eval_acc_full, r.epsilon, r.skip_rate_at_default_threshold
            )
        },
    )?;
    write_csv(&dir.join("metrics.csv"), &rows)?;
    let ckpt = dir.join("checkpoint");
    save_checkpoint(&state, &cfg, &ckpt)?;
    println!("saved checkpoint at step {} to {}", state.step, ckpt.display());
    Ok(())
}

fn cmd_disturb(ckpt: &Path, kind: &str, layer: Option<&str>, seeds: Option<usize>, over: Option<PathBuf>) -> Result<()> {
    let (state, cfg) = load_checkpoint(ckpt)?;
    let model = &state.model;
    let seeds = seeds.unwrap_or(cfg.eval.shuffle_seeds).max(1);
    let data = cfg.dataset.load()?;
    let eval = &data.eval;
    let dir = out_dir(&cfg, over)?;

    let mut rows = Vec::new();
    if layer == Some("layers") {
        if kind != "shuffled" {
            return Err(Error::invalid("per-layer sweeps use --kind shuffled"));
        }
        let (table, reference) = layer_sweep(model, eval, seeds)?;
        rows.push(DisturbRow {
            kind_or_layer: "correct".into(),
            accuracy: reference,
            delta_vs_correct: 0.0,
        });
        for t in table {
            rows.push(DisturbRow {
                kind_or_layer: format!("layer{}", t.layer),
                accuracy: t.mean_accuracy,
                delta_vs_correct: t.mean_accuracy - reference,
            });
        }
    } else {
        let target = match layer {
            None => DisturbTarget::AllLayers,
            Some(s) => DisturbTarget::SingleLayer {
                layer: s
                    .parse()
                    .map_err(|_| Error::invalid(format!("--layer expects an index or 'layers', got '{s}'")))?,
            },
        };
        let kinds: Vec<String> = if kind == "all" {
            cfg.eval.disturbances.clone()
        } else {
            vec![kind.to_string()]
        };
        let cache = CoefficientCache::build(model, eval)?;
        let run = |k: DisturbanceKind| crate::disturbance::evaluate_cached(model, eval, &cache, Disturbance { kind: k, target });
        let reference = run(DisturbanceKind::Correct)?;
        for name in &kinds {
            let acc = match DisturbanceKind::parse(name, 0)? {
                DisturbanceKind::Shuffled { .. } => {
                    let accs = (0..seeds as u64)
                        .map(|s| run(DisturbanceKind::Shuffled { seed: s }))
                        .collect::<Result<Vec<_>>>()?;
                    mean_std(&accs).0
                }
                k => run(k)?,
            };
            let label = match target {
                DisturbTarget::AllLayers => name.clone(),
                DisturbTarget::SingleLayer { layer } => format!("{name}@layer{layer}"),
            };
            rows.push(DisturbRow {
                kind_or_layer: label,
                accuracy: acc,
                delta_vs_correct: acc - reference,
            });
        }
    }
    write_csv(&dir.join("disturb.csv"), &rows)?;
    for r in &rows {
        println!("{:<20} {:.4} ({:+.4})", r.kind_or_layer, r.accuracy, r.delta_vs_correct);
    }
    Ok(())
}
