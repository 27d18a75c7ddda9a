use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use protoseg::checkpoint::Checkpoint;
use protoseg::data::{generate_dataset, load_dataset, make_splits, save_dataset, Dataset, SplitConfig};
use protoseg::evaluation::{evaluate, evaluate_with, png_sink, EvalConfig, EvalReport};
use protoseg::metrics::CSV_HEADER;
use protoseg::train::{StepRecord, TrainConfig, Trainer};

use crate::args::{EvalArgs, GenArgs, Grid, SweepArgs, TrainArgs};
use crate::config::{apply_eval, apply_gen, apply_train, FileConfig, LR_MULTIPLIERS};
use crate::manifest::{prepare_output, sha256_hex, RunManifest};

/// Loss curve granularity, in episodes.
const LOSS_WINDOW: usize = 100;

fn load_split(data: &Path, split: usize) -> anyhow::Result<(Dataset, SplitConfig)> {
    let ds = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let split = make_splits(ds.config.num_classes, split)?;
    Ok((ds, split))
}

pub fn gen(args: &GenArgs, file: &FileConfig, config_path: Option<&Path>) -> anyhow::Result<()> {
    let cfg = apply_gen(file.gen, args);
    cfg.validate()?;
    prepare_output(&args.out.out, args.out.force)?;
    let mut run = RunManifest::start("gen", config_path, cfg.seed, &args.out.out);
    run.settings = serde_json::to_value(cfg)?;
    let ds = generate_dataset(&cfg)?;
    let manifest = save_dataset(&ds, &args.out.out)?;
    run.artifacts.push("manifest.json".into());
    for s in &manifest.samples {
        run.artifacts.push(s.image.clone());
        run.artifacts.push(s.label.clone());
    }
    let hash = sha256_hex(&std::fs::read(args.out.out.join("manifest.json"))?);
    run.settings["manifest_sha256"] = hash.clone().into();
    println!("wrote {} samples to {} (manifest sha256 {hash})", ds.len(), args.out.out.display());
    run.finish()
}

/// Mean losses over one window of training steps.
#[derive(Default)]
struct Window {
    steps: usize,
    total: f64,
    l_q: f64,
    l_s: f64,
    l_seg: f64,
}

impl Window {
    fn push(&mut self, r: &StepRecord) {
        self.steps += 1;
        self.total += r.loss.total;
        self.l_q += r.loss.l_q;
        self.l_s += r.loss.l_s;
        self.l_seg += r.loss.l_seg;
    }

    fn row(&self, r: &StepRecord) -> String {
        let n = self.steps.max(1) as f64;
        format!(
            "{},{},{},{},{},{},{}\n",
            r.episode,
            r.step,
            r.lr,
            self.total / n,
            self.l_q / n,
            self.l_s / n,
            self.l_seg / n
        )
    }
}

pub const LOSS_HEADER: &str = "episode,step,lr,loss,l_q,l_s,l_seg";

/// Trains to completion, returning the checkpoint and the loss curve CSV.
fn train_run(ds: &Dataset, split: &SplitConfig, cfg: &TrainConfig, verbose: bool) -> anyhow::Result<(Checkpoint, String)> {
    let mut trainer = Trainer::new(cfg.clone(), split.clone())?;
    let mut csv = format!("{LOSS_HEADER}\n");
    let mut window = Window::default();
    let mut reported = 0;
    while let Some(r) = trainer.step(ds)? {
        window.push(&r);
        if r.episode / LOSS_WINDOW != (r.episode - r.episode.min(cfg.batch_size)) / LOSS_WINDOW || trainer.is_finished() {
            csv.push_str(&window.row(&r));
            window = Window::default();
        }
        if verbose && trainer.history.len() > reported {
            let v = trainer.history[reported];
            println!("episode {:>6}  val mean-IoU {:.4}  binary-IoU {:.4}", v.episode, v.mean_iou, v.binary_iou);
            reported += 1;
        }
    }
    let ck = Checkpoint::new(&trainer.net, cfg, split, trainer.episodes_done(), trainer.history.clone());
    Ok((ck, csv))
}

pub fn train(args: &TrainArgs, file: &FileConfig, config_path: Option<&Path>) -> anyhow::Result<()> {
    let cfg = apply_train(file.train.clone(), &args.train);
    cfg.validate()?;
    let (ds, split) = load_split(&args.data, args.split)?;
    prepare_output(&args.out.out, args.out.force)?;
    let mut run = RunManifest::start("train", config_path, cfg.seed, &args.out.out);
    run.settings = serde_json::json!({ "data": args.data, "split": split, "train": cfg });

    let (ck, loss_csv) = train_run(&ds, &split, &cfg, true)?;
    run.write("loss.csv", loss_csv)?;
    let mut val = String::from("episode,mean_iou,binary_iou\n");
    for v in &ck.history {
        writeln!(val, "{},{},{}", v.episode, v.mean_iou, v.binary_iou)?;
    }
    run.write("validation.csv", val)?;
    let path = run.write("model.ckpt", ck.to_bytes())?;
    run.checkpoint = Some(path.clone());
    println!("checkpoint written to {}", path.display());
    run.finish()
}

fn write_eval(run: &mut RunManifest, report: &EvalReport) -> anyhow::Result<()> {
    run.write("metrics.csv", report.to_csv())?;
    let mut runs = format!("run,{CSV_HEADER}\n");
    for (i, r) in report.per_run.iter().enumerate() {
        for line in r.csv_rows(report.split_index, report.config.seed).lines() {
            writeln!(runs, "{i},{line}")?;
        }
    }
    run.write("runs.csv", runs)?;
    run.write("episodes.jsonl", report.episodes_jsonl())?;
    let summary = serde_json::json!({
        "mean_iou": report.aggregate.mean_iou,
        "binary_iou": report.aggregate.binary_iou,
        "per_run_mean_iou": report.per_run.iter().map(|r| r.mean_iou).collect::<Vec<_>>(),
        "fallbacks": report.fallback_count(),
        "config": report.config,
    });
    run.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

pub fn eval(args: &EvalArgs, file: &FileConfig, config_path: Option<&Path>) -> anyhow::Result<()> {
    let cfg = apply_eval(file.eval.clone(), &args.eval);
    cfg.validate()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let net = ck.network()?;
    let ds = load_dataset(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    prepare_output(&args.out.out, args.out.force)?;
    let mut run = RunManifest::start("eval", config_path, cfg.seed, &args.out.out);
    run.checkpoint = Some(args.checkpoint.clone());
    run.settings = serde_json::json!({ "data": args.data, "split": ck.split, "eval": cfg, "save_masks": args.save_masks });

    let report = if args.save_masks {
        let dir = args.out.out.join("masks");
        let mut sink = png_sink(&dir)?;
        let report = evaluate_with(&net, &ds, &ck.split, &cfg, &mut sink)?;
        for r in &report.episodes {
            run.artifacts.push(format!("masks/{}", protoseg::evaluation::mask_file_name(r)));
        }
        report
    } else {
        evaluate(&net, &ds, &ck.split, &cfg)?
    };
    write_eval(&mut run, &report)?;
    println!(
        "split {}  mean-IoU {:.4}  binary-IoU {:.4}  ({} runs x {} episodes)",
        report.split_index, report.aggregate.mean_iou, report.aggregate.binary_iou, cfg.runs, cfg.episodes
    );
    run.finish()
}

/// One grid point of a sweep.
struct Point {
    lambda_mcl: f64,
    lr0: f64,
    batch_size: usize,
}

pub fn sweep(args: &SweepArgs, file: &FileConfig, config_path: Option<&Path>) -> anyhow::Result<()> {
    let sf = &file.sweep;
    let mut base = file.train.clone();
    base.episodes = sf.episodes;
    let base = apply_train(base, &args.train);
    base.validate()?;
    let eval_cfg = EvalConfig {
        runs: args.eval_runs.unwrap_or(sf.eval_runs),
        episodes: args.eval_episodes.unwrap_or(sf.eval_episodes),
        seed: base.seed,
        ..file.eval.clone()
    };
    eval_cfg.validate()?;
    let (ds, split) = load_split(&args.data, args.split)?;

    let mut points: Vec<Point> = match args.grid {
        Grid::Lambda => args
            .lambdas
            .clone()
            .unwrap_or_else(|| sf.lambdas.clone())
            .into_iter()
            .map(|l| Point {
                lambda_mcl: l,
                lr0: base.lr0,
                batch_size: base.batch_size,
            })
            .collect(),
        Grid::LrBatch => {
            let lrs = args
                .lrs
                .clone()
                .or_else(|| sf.lrs.clone())
                .unwrap_or_else(|| LR_MULTIPLIERS.iter().map(|m| m * base.lr0).collect());
            let batches = args.batches.clone().unwrap_or_else(|| sf.batches.clone());
            lrs.iter()
                .flat_map(|&lr0| batches.iter().map(move |&b| (lr0, b)))
                .map(|(lr0, batch_size)| Point {
                    lambda_mcl: base.lambda_mcl,
                    lr0,
                    batch_size,
                })
                .collect()
        }
    };
    if points.is_empty() {
        return Err(crate::UsageError("empty sweep grid".into()).into());
    }
    points.sort_by(|a, b| {
        a.lambda_mcl
            .total_cmp(&b.lambda_mcl)
            .then(a.lr0.total_cmp(&b.lr0))
            .then(a.batch_size.cmp(&b.batch_size))
    });

    prepare_output(&args.out.out, args.out.force)?;
    let mut run = RunManifest::start("sweep", config_path, base.seed, &args.out.out);
    run.settings = serde_json::json!({ "data": args.data, "split": split, "grid": format!("{:?}", args.grid), "train": base, "eval": eval_cfg });
    let mut csv = match args.grid {
        Grid::Lambda => String::from("lambda_mcl,mean_iou,binary_iou\n"),
        Grid::LrBatch => String::from("lr0,batch_size,mean_iou,binary_iou\n"),
    };
    for p in &points {
        let cfg = TrainConfig {
            lambda_mcl: p.lambda_mcl,
            lr0: p.lr0,
            batch_size: p.batch_size,
            ..base.clone()
        };
        cfg.validate()?;
        let (ck, _) = train_run(&ds, &split, &cfg, false)?;
        let report = evaluate(&ck.network()?, &ds, &split, &eval_cfg)?;
        let (m, b) = (report.aggregate.mean_iou, report.aggregate.binary_iou);
        match args.grid {
            Grid::Lambda => {
                writeln!(csv, "{},{m},{b}", p.lambda_mcl)?;
                println!("lambda {:<6} mean-IoU {m:.4}", p.lambda_mcl);
            }
            Grid::LrBatch => {
                writeln!(csv, "{},{},{m},{b}", p.lr0, p.batch_size)?;
                println!("lr0 {:<8} batch {} mean-IoU {m:.4}", p.lr0, p.batch_size);
            }
        }
    }
    run.write("sweep.csv", csv)?;
    run.finish()
}
