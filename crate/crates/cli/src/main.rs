use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mrs_core::evalkit::{coco_thresholds, mean_ap, MapReport};
use mrs_core::gradcheck::GradCase;
use mrs_core::head::{decode_detections, group_levels};
use mrs_core::io::{load_checkpoint, load_tensor, read_detections, read_ground_truth, save_checkpoint, write_detections};
use mrs_core::model::{cost_report, count_params};
use mrs_core::prune::{prune_model, PruneMode};
use mrs_core::{Model, ModelConfig};

#[derive(Parser)]
#[command(name = "mrs", version, about = "Build, inspect, prune and evaluate toy MRS-YOLO detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Block {
    Akdc,
    Makdf,
    C3k2,
    Rau,
    Sba,
    Sru,
    Cru,
    Head,
    Full,
}

impl From<Block> for GradCase {
    fn from(b: Block) -> Self {
        match b {
            Block::Akdc => GradCase::Akdc,
            Block::Makdf => GradCase::Makdf,
            Block::C3k2 => GradCase::C3k2,
            Block::Rau => GradCase::Rau,
            Block::Sba => GradCase::Sba,
            Block::Sru => GradCase::Sru,
            Block::Cru => GradCase::Cru,
            Block::Head => GradCase::Head,
            Block::Full => GradCase::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Channel,
    Unstructured,
}

impl From<Mode> for PruneMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Channel => PruneMode::Channel,
            Mode::Unstructured => PruneMode::Unstructured,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a model from a JSON config and write a checkpoint.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "MRS_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter and FLOP table.
    Summarize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        input_size: Option<Vec<usize>>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient check of one block.
    Gradcheck {
        #[arg(long, value_enum)]
        block: Block,
        #[arg(long, env = "MRS_SEED", default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        json: bool,
    },
    /// Prune a checkpoint at one rate.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long, value_enum, default_value = "channel")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Parameters and GFLOPs over a grid of pruning rates.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// `start:stop:step` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0.1:0.9:0.1")]
        rates: String,
        #[arg(long, value_enum, default_value = "channel")]
        mode: Mode,
        #[arg(long)]
        json: bool,
    },
    /// Precision, recall, per-class AP and mAP of detections.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        /// Evaluate at a single IoU threshold.
        #[arg(long, conflicts_with = "coco_range")]
        iou: Option<f64>,
        /// Evaluate at IoU 0.50:0.05:0.95 (the default).
        #[arg(long)]
        coco_range: bool,
        #[arg(long)]
        json: bool,
    },
    /// Forward a tensor file through a checkpoint and decode detections.
    Run {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.65)]
        nms: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load(path: &PathBuf) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn parse_rates(text: &str) -> Result<Vec<f64>> {
    let parse = |s: &str| s.trim().parse::<f64>().with_context(|| format!("bad rate `{s}`"));
    let parts: Vec<&str> = text.split(':').collect();
    let rates = match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (parse(a)?, parse(b)?, parse(step)?);
            if step <= 0.0 || b < a {
                bail!("rate range `{text}` is empty");
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect()
        }
        [_] => text.split(',').map(parse).collect::<Result<Vec<_>>>()?,
        _ => bail!("rates must be `start:stop:step` or a comma-separated list"),
    };
    Ok(rates)
}

#[derive(Serialize)]
struct SweepRow {
    rate: f64,
    achieved_rate: f64,
    params: u64,
    flops: u64,
    gflops: f64,
    note: Option<String>,
}

#[derive(Serialize)]
struct SweepReport {
    mode: PruneMode,
    input_size: (usize, usize),
    params_before: u64,
    flops_before: u64,
    rows: Vec<SweepRow>,
}

#[derive(Serialize)]
struct ClassSummary {
    class_id: usize,
    num_gt: usize,
    num_pred: usize,
    precision: f64,
    recall: f64,
    ap: f64,
    ap50: Option<f64>,
}

#[derive(Serialize)]
struct EvalSummary {
    thresholds: Vec<f64>,
    precision: f64,
    recall: f64,
    map: f64,
    map50: Option<f64>,
    map50_95: Option<f64>,
    classes: Vec<ClassSummary>,
    excluded_classes: Vec<usize>,
}

fn summarize_eval(r: MapReport, coco: bool) -> EvalSummary {
    EvalSummary {
        precision: r.precision,
        recall: r.recall,
        map: r.map,
        map50: coco.then(|| r.map_per_threshold[0]),
        map50_95: coco.then_some(r.map),
        classes: r
            .classes
            .iter()
            .map(|c| ClassSummary {
                class_id: c.class_id,
                num_gt: c.num_gt,
                num_pred: c.num_pred,
                precision: c.precision,
                recall: c.recall,
                ap: c.ap_mean,
                ap50: coco.then(|| c.ap[0]),
            })
            .collect(),
        excluded_classes: r.excluded_classes,
        thresholds: r.thresholds,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Build { config, seed, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("cannot read {}", config.display()))?;
            let cfg: ModelConfig = serde_json::from_str(&text).context("invalid config")?;
            let model = Model::build(&cfg, seed)?;
            save_checkpoint(&out, &model)?;
            println!("wrote {} ({} parameters, seed {})", out.display(), count_params(&model.graph), seed);
        }
        Command::Summarize { ckpt, input_size, json } => {
            let model = load(&ckpt)?;
            let size = input_size.map_or(model.config.input_size, |v| (v[0], v[1]));
            let report = cost_report(&model.graph, size)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Gradcheck { block, seed, tol, json } => {
            let case = GradCase::from(block);
            let report = case.run(seed, tol)?;
            if json {
                print_json(&serde_json::json!({
                    "block": case.name(),
                    "seed": seed,
                    "tol": tol,
                    "passed": report.passed,
                    "max_rel_err": report.max_rel_err,
                    "samples": report.samples.len(),
                }))?;
            } else {
                println!(
                    "{} seed {}: max relative error {:.3e} over {} samples (tol {:e}) {}",
                    case.name(),
                    seed,
                    report.max_rel_err,
                    report.samples.len(),
                    tol,
                    if report.passed { "PASS" } else { "FAIL" }
                );
            }
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Prune { ckpt, rate, mode, out, plan, json } => {
            let model = load(&ckpt)?;
            let (pruned, p) = prune_model(&model, rate, mode.into())?;
            save_checkpoint(&out, &pruned)?;
            if let Some(path) = plan {
                std::fs::write(&path, serde_json::to_vec_pretty(&p)?)
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            if json {
                print_json(&serde_json::json!({
                    "mode": p.mode,
                    "rate": p.rate,
                    "achieved_rate": p.achieved_rate,
                    "params_before": p.params_before,
                    "params_after": p.params_after,
                    "flops_before": p.flops_before,
                    "flops_after": p.flops_after,
                    "note": p.note,
                }))?;
            } else {
                println!("params  {:>12} -> {:>12}", p.params_before, p.params_after);
                println!("flops   {:>12} -> {:>12}", p.flops_before.unwrap_or(0), p.flops_after.unwrap_or(0));
                println!("rate    requested {:.4}, achieved {:.4}", p.rate, p.achieved_rate);
                if let Some(note) = &p.note {
                    println!("note    {note}");
                }
            }
        }
        Command::Sweep { ckpt, rates, mode, json } => {
            let model = load(&ckpt)?;
            let size = model.config.input_size;
            let base = cost_report(&model.graph, size)?;
            let mut rows = Vec::new();
            for rate in parse_rates(&rates)? {
                let (_, p) = prune_model(&model, rate, mode.into())?;
                let flops = p.flops_after.unwrap_or(0);
                rows.push(SweepRow {
                    rate,
                    achieved_rate: p.achieved_rate,
                    params: p.params_after,
                    flops,
                    gflops: flops as f64 / 1e9,
                    note: p.note,
                });
            }
            let report = SweepReport {
                mode: mode.into(),
                input_size: size,
                params_before: base.total_params,
                flops_before: base.total_flops,
                rows,
            };
            if json {
                print_json(&report)?;
            } else {
                println!("{:>6}  {:>8}  {:>12}  {:>10}", "rate", "achieved", "params", "GFLOPs");
                println!("{:>6}  {:>8}  {:>12}  {:>10.6}", "0", "0", report.params_before, report.flops_before as f64 / 1e9);
                for r in &report.rows {
                    println!("{:>6.2}  {:>8.4}  {:>12}  {:>10.6}", r.rate, r.achieved_rate, r.params, r.gflops);
                }
            }
        }
        Command::Eval { preds, gts, iou, coco_range: _, json } => {
            let preds = read_detections(&preds).with_context(|| format!("cannot read {}", preds.display()))?;
            let gts = read_ground_truth(&gts).with_context(|| format!("cannot read {}", gts.display()))?;
            let coco = iou.is_none();
            let thresholds = match iou {
                Some(t) if (0.0..=1.0).contains(&t) => vec![t],
                Some(t) => bail!("IoU threshold {t} outside [0, 1]"),
                None => coco_thresholds(),
            };
            let s = summarize_eval(mean_ap(&preds, &gts, &thresholds)?, coco);
            if json {
                print_json(&s)?;
            } else {
                println!("{:>6}  {:>5}  {:>5}  {:>7}  {:>7}  {:>7}", "class", "gt", "pred", "P", "R", "AP");
                for c in &s.classes {
                    println!(
                        "{:>6}  {:>5}  {:>5}  {:>7.4}  {:>7.4}  {:>7.4}",
                        c.class_id, c.num_gt, c.num_pred, c.precision, c.recall, c.ap
                    );
                }
                println!("P {:.4}  R {:.4}", s.precision, s.recall);
                match (s.map50, s.map50_95) {
                    (Some(a), Some(b)) => println!("mAP50 {a:.4}  mAP50:95 {b:.4}"),
                    _ => println!("mAP@{} {:.4}", s.thresholds[0], s.map),
                }
                if !s.excluded_classes.is_empty() {
                    println!("classes without ground truth (excluded): {:?}", s.excluded_classes);
                }
            }
        }
        Command::Run { ckpt, input, conf, nms, out } => {
            let model = load(&ckpt)?;
            let x = load_tensor(&input).with_context(|| format!("cannot read {}", input.display()))?;
            let outputs = model.forward(&x)?;
            let levels = group_levels(outputs, x.h())?;
            let ids: Vec<String> = (0..x.n()).map(|i| i.to_string()).collect();
            let dets = decode_detections(&levels, &ids, conf, nms);
            write_detections(&out, &dets)?;
            println!("wrote {} detections to {}", dets.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
