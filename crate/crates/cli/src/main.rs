//! Experiment driver: dataset synthesis, training, evaluation and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ztad_core::config::ExperimentConfig;
use ztad_core::error::Error;
use ztad_core::evaluate::{make_zero_shot_splits, pr_curves};
use ztad_core::experiment::{
    average_map, checkpoint_path, evaluate_split, load_bundle, load_checkpoint, predictions_json,
    results_csv, save_bundle, save_checkpoint, synthesize, train_log_path,
    SplitEval, TrainRecord,
};
use ztad_core::plot::{polyline_chart, write_svg, Series};

#[derive(Parser)]
#[command(
    name = "ztad",
    about = "Zero-shot temporal action detection on a synthetic benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (annotations, feature binaries, class list,
    /// frozen encoder archive).
    Synth {
        /// Experiment config TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path config overrides, e.g. --set dataset.seed=9
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on the seen classes of one zero-shot split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split id within the configured split set.
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
    /// Evaluate checkpoints on the unseen classes of their splits.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        dataset: PathBuf,
        /// A checkpoint file, or a directory of checkpoint_split*.bin.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plots and a summary table from a run directory.
    Report {
        /// Directory containing train logs and/or results.csv.
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config { .. } | Error::Refusal(_) => ExitCode::from(2),
                Error::Leakage(_) | Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            config,
            overrides,
            out,
            force,
        } => {
            let config = resolve_config(config.as_deref(), &overrides)?;
            let bundle = synthesize(&config)?;
            save_bundle(&bundle, &out, force)?;
            println!(
                "wrote {} videos, {} classes to {}",
                bundle.dataset.videos.len(),
                bundle.dataset.class_names.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            overrides,
            dataset,
            out,
            split,
        } => {
            let config = resolve_config(config.as_deref(), &overrides)?;
            let bundle = load_bundle(&dataset)?;
            let splits = make_zero_shot_splits(
                &bundle.dataset.class_names,
                config.eval.seen_fraction,
                config.eval.n_splits,
                config.eval.split_seed,
            )?;
            let Some(chosen) = splits.get(split) else {
                return Err(Error::config(
                    "split",
                    format!("split {split} outside 0..{}", splits.len()),
                ));
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            config.save(&out.join("config.toml"))?;
            let cadence = config.training.checkpoint_every;
            let trained = ztad_core::experiment::train_split_with(
                &bundle,
                &config,
                chosen,
                |epoch, params| {
                    if cadence == 0 || epoch % cadence != 0 {
                        return Ok(());
                    }
                    let snapshot = ztad_core::experiment::TrainedModel {
                        params: params.clone(),
                        log: Vec::new(),
                        seen_classes: chosen.seen.clone(),
                        mode: config.training.finetune,
                    };
                    save_checkpoint(
                        &out.join(format!("checkpoint_split{split}_epoch{epoch}.bin")),
                        &config,
                        chosen,
                        &snapshot,
                    )
                },
            )?;
            let log_path = train_log_path(&out, split);
            write_train_log(&log_path, &trained.log)?;
            let ckpt = checkpoint_path(&out, split);
            save_checkpoint(&ckpt, &config, chosen, &trained)?;
            let last = trained.log.last().expect("at least one step");
            println!(
                "split {split}: {} steps, final loss {:.4} (cls {:.4}, l1 {:.4}, giou {:.4}, act {:.4})",
                trained.log.len(),
                last.total,
                last.cls,
                last.bbox_l1,
                last.bbox_giou,
                last.actionness
            );
            println!("checkpoint: {}", ckpt.display());
            println!("training log: {}", log_path.display());
            Ok(())
        }
        Command::Eval {
            config,
            overrides,
            dataset,
            checkpoint,
            out,
        } => {
            let config = resolve_config(config.as_deref(), &overrides)?;
            let bundle = load_bundle(&dataset)?;
            let splits = make_zero_shot_splits(
                &bundle.dataset.class_names,
                config.eval.seen_fraction,
                config.eval.n_splits,
                config.eval.split_seed,
            )?;
            let paths = checkpoint_files(&checkpoint)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            config.save(&out.join("config.toml"))?;
            let mut evals: Vec<SplitEval> = Vec::new();
            for path in paths {
                let (trained, meta) = load_checkpoint(&path, &bundle, &config)?;
                let Some(split) = splits.get(meta.split_id) else {
                    return Err(Error::Refusal(format!(
                        "checkpoint {} references split {} outside the configured {} splits",
                        path.display(),
                        meta.split_id,
                        splits.len()
                    )));
                };
                if split.seen != meta.seen_classes {
                    return Err(Error::Refusal(format!(
                        "checkpoint {} seen-class list does not match split {}",
                        path.display(),
                        meta.split_id
                    )));
                }
                let eval = evaluate_split(&bundle, &config, split, &trained)?;
                if eval.clipped > 0 {
                    eprintln!(
                        "warning: split {}: {} detections clipped to their window extent",
                        meta.split_id, eval.clipped
                    );
                }
                for class in &eval.table.skipped_classes {
                    eprintln!(
                        "warning: split {}: class `{class}` has no ground truth and was skipped",
                        meta.split_id
                    );
                }
                let preds = predictions_json(&eval.detections)?;
                let pred_path = out.join(format!("predictions_split{}.json", meta.split_id));
                std::fs::write(&pred_path, preds).map_err(|e| Error::io(&pred_path, e))?;
                write_pr_plot(&out, &eval, &config)?;
                println!(
                    "split {}: AVG mAP {:.4} over {:?}",
                    meta.split_id,
                    eval.table.average,
                    config.eval.iou_thresholds
                );
                evals.push(eval);
            }
            evals.sort_by_key(|e| e.split_id);
            let csv = results_csv(&evals, &config.eval.iou_thresholds);
            let csv_path = out.join("results.csv");
            std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
            println!("grand AVG mAP: {:.4}", average_map(&evals));
            println!("results: {}", csv_path.display());
            Ok(())
        }
        Command::Report { run } => report(&run),
    }
}

/// Loads the base config (file or defaults) and applies dotted-path
/// overrides, e.g. `training.epochs=40` or `structure=two_stage`.
fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let base = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => ExperimentConfig::default().to_toml()?,
    };
    let mut value: toml::Value =
        toml::from_str(&base).map_err(|e| Error::Serde(e.to_string()))?;
    for entry in overrides {
        let Some((path, raw)) = entry.split_once('=') else {
            return Err(Error::config(
                "--set",
                format!("expected PATH=VALUE, got `{entry}`"),
            ));
        };
        apply_override(&mut value, path.trim(), raw.trim())?;
    }
    let text = toml::to_string(&value).map_err(|e| Error::Serde(e.to_string()))?;
    ExperimentConfig::from_toml(&text)
}

fn apply_override(value: &mut toml::Value, path: &str, raw: &str) -> Result<(), Error> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .get_mut(part)
            .ok_or_else(|| Error::config(path, format!("unknown config table `{part}`")))?;
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::config(path, "not a config table"))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .map(|t| t["v"].clone())
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn checkpoint_files(path: &Path) -> Result<Vec<PathBuf>, Error> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| {
                    // final checkpoints only, not the periodic _epochN ones
                    n.strip_prefix("checkpoint_split")
                        .and_then(|rest| rest.strip_suffix(".bin"))
                        .is_some_and(|middle| middle.chars().all(|c| c.is_ascii_digit()))
                })
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Refusal(format!(
            "no checkpoint_split*.bin under {}",
            path.display()
        )));
    }
    Ok(files)
}

fn write_train_log(path: &Path, log: &[TrainRecord]) -> Result<(), Error> {
    let mut out = String::new();
    for record in log {
        out.push_str(&serde_json::to_string(record).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_pr_plot(out: &Path, eval: &SplitEval, config: &ExperimentConfig) -> Result<(), Error> {
    let threshold = config.eval.iou_thresholds[0];
    let curves = pr_curves(&eval.detections, &eval.ground_truth, threshold);
    let series: Vec<Series> = curves
        .into_iter()
        .map(|(label, points)| Series {
            label,
            points: points.into_iter().map(|(p, r)| (r, p)).collect(),
        })
        .collect();
    let svg = polyline_chart(
        &format!("PR, split {} @ IoU {threshold:.2}", eval.split_id),
        "recall",
        "precision",
        &series,
    );
    write_svg(&out.join(format!("pr_split{}.svg", eval.split_id)), &svg)
}

fn report(run: &Path) -> Result<(), Error> {
    let mut wrote_anything = false;
    // Loss curves from training logs.
    let mut logs: Vec<PathBuf> = std::fs::read_dir(run)
        .map_err(|e| Error::io(run, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("train_log_split") && n.ends_with(".jsonl"))
        })
        .collect();
    logs.sort();
    for log_path in &logs {
        let text = std::fs::read_to_string(log_path).map_err(|e| Error::io(log_path, e))?;
        let records: Vec<TrainRecord> = text
            .lines()
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Serde(e.to_string()))?;
        let series = vec![
            Series {
                label: "total".into(),
                points: records.iter().map(|r| (r.step as f64, r.total)).collect(),
            },
            Series {
                label: "cls".into(),
                points: records.iter().map(|r| (r.step as f64, r.cls)).collect(),
            },
            Series {
                label: "actionness".into(),
                points: records
                    .iter()
                    .map(|r| (r.step as f64, r.actionness))
                    .collect(),
            },
        ];
        let name = log_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("train_log")
            .replace("train_log_", "loss_");
        let svg_path = run.join(format!("{name}.svg"));
        write_svg(&svg_path, &polyline_chart("training loss", "step", "loss", &series))?;
        println!("wrote {}", svg_path.display());
        wrote_anything = true;
    }
    // Summary table from results.csv.
    let csv_path = run.join("results.csv");
    if csv_path.exists() {
        let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let md = results_markdown(&text)?;
        let md_path = run.join("report.md");
        std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
        println!("wrote {}", md_path.display());
        wrote_anything = true;
    }
    if !wrote_anything {
        return Err(Error::Refusal(format!(
            "nothing to report under {} (no train logs or results.csv)",
            run.display()
        )));
    }
    Ok(())
}

/// Pivots the results CSV into a markdown grid: one row per split,
/// thresholds as columns, plus the AVG column.
fn results_markdown(csv: &str) -> Result<String, Error> {
    let mut thresholds: Vec<String> = Vec::new();
    let mut rows: std::collections::BTreeMap<String, Vec<(String, String)>> = Default::default();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("bad results row: `{line}`")));
        }
        if fields[1] != "AVG" && !thresholds.iter().any(|t| t == fields[1]) {
            thresholds.push(fields[1].to_string());
        }
        rows.entry(fields[0].to_string())
            .or_default()
            .push((fields[1].to_string(), fields[2].to_string()));
    }
    let mut md = String::from("# Results\n\n| split |");
    for t in &thresholds {
        md.push_str(&format!(" {t} |"));
    }
    md.push_str(" AVG |\n|---|");
    md.push_str(&"---|".repeat(thresholds.len() + 1));
    md.push('\n');
    for (split, cells) in rows {
        md.push_str(&format!("| {split} |"));
        for t in &thresholds {
            let cell = cells
                .iter()
                .find(|(thr, _)| thr == t)
                .map(|(_, v)| v.as_str())
                .unwrap_or("-");
            md.push_str(&format!(" {cell} |"));
        }
        let avg: Vec<f64> = cells
            .iter()
            .filter(|(thr, _)| thr != "AVG")
            .filter_map(|(_, v)| v.parse::<f64>().ok())
            .collect();
        if avg.is_empty() {
            let grand = cells
                .iter()
                .find(|(thr, _)| thr == "AVG")
                .map(|(_, v)| v.as_str())
                .unwrap_or("-");
            md.push_str(&format!(" {grand} |\n"));
        } else {
            md.push_str(&format!(
                " {:.6} |\n",
                avg.iter().sum::<f64>() / avg.len() as f64
            ));
        }
    }
    Ok(md)
}
