//! `sad`: generate streams, train, evaluate and run the experiment sweeps.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sad_core::config::{Ablation, ExperimentConfig};
use sad_core::egraph::{ingest_csv, write_csv, EventStream, Label};
use sad_core::eval::{self, FEWSHOT_RATIOS};
use sad_core::losses::Mode;
use sad_core::synth::{self, SynthConfig, DAY};
use sad_core::trainer::{self, TrainOptions};

#[derive(Parser)]
#[command(name = "sad", version, about = "Semi-supervised anomaly detection on dynamic graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled interaction stream as CSV.
    Generate(GenerateArgs),
    /// Train one model and report validation and test AUC.
    Train(TrainArgs),
    /// Score a stream with a trained checkpoint.
    Eval(EvalArgs),
    /// Test AUC for drop ratios 0.1..0.9 over several seeds.
    Fewshot(SweepArgs),
    /// Test AUC of each ablation rung at drop ratio 0.5.
    Ablate(SweepArgs),
    /// Write per-event source-node embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 50)]
    items: usize,
    #[arg(long, default_value_t = 14.0)]
    days: f64,
    /// Mean events per user per day.
    #[arg(long, default_value_t = 4.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.05)]
    anomaly_fraction: f64,
    /// Added to every edge feature of anomalous events.
    #[arg(long, default_value_t = 2.0)]
    shift: f64,
    #[arg(long, default_value_t = 3.0)]
    window_days: f64,
    #[arg(long, default_value_t = 8)]
    edge_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Experiment settings shared by the training commands. A config file is
/// applied first, then `--set` pairs, then the dedicated flags.
#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// File of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    drop_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    per_hop: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            cfg.set(k, v)?;
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<Mode>()?;
        }
        if let Some(a) = &self.ablation {
            cfg.ablation = a.parse::<Ablation>()?;
        }
        if let Some(v) = self.drop_ratio {
            cfg.drop_ratio = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.per_hop {
            cfg.per_hop = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Interaction CSV (user_id,item_id,timestamp,state_label,features...).
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint path; defaults to the report path with extension `ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-event score CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

fn load_stream(path: &Path) -> Result<EventStream> {
    ingest_csv(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |a| format!("{a:.4}"))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_users: a.users,
        num_items: a.items,
        horizon_seconds: a.days * DAY,
        base_rate: a.rate,
        daily_cycle_amplitude: a.amplitude,
        anomaly_user_fraction: a.anomaly_fraction,
        anomaly_window_seconds: a.window_days * DAY,
        seed: a.seed,
        ..SynthConfig::default()
    }
    .with_uniform_shift(a.edge_dim, a.shift);
    let stream = synth::generate(&cfg)?;
    write_csv(&stream, &a.out)?;
    let pos = stream.labels().filter(|&l| l == Label::Anomalous).count();
    println!("events     {}", stream.len());
    println!("nodes      {}", stream.num_nodes());
    println!("anomalous  {pos} ({:.2}%)", 100.0 * pos as f64 / stream.len().max(1) as f64);
    println!("written    {}", a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.experiment.resolve()?;
    let stream = load_stream(&a.data)?;
    let ckpt = a.checkpoint.unwrap_or_else(|| a.out.with_extension("ckpt"));
    let options = TrainOptions { checkpoint: Some(ckpt), progress: true };
    let out = trainer::train(&stream, &cfg, &options)?;
    let r = &out.report;
    r.write_json(&a.out)?;
    println!("{:>5}  {:>10}  {:>10}  {:>10}  {:>10}  {:>8}", "epoch", "loss", "dev", "scl", "sup", "val_auc");
    for e in &r.epochs {
        println!(
            "{:>5}  {:>10.5}  {:>10.5}  {:>10.5}  {:>10.5}  {:>8}",
            e.epoch,
            e.loss,
            e.dev_loss,
            e.scl_loss,
            e.sup_loss,
            fmt_auc(e.val_auc)
        );
    }
    println!("best epoch {}  val_auc {}  test_auc {}", r.best_epoch, fmt_auc(r.best_val_auc), fmt_auc(r.test_auc));
    println!("report {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = a.experiment.resolve()?;
    let stream = load_stream(&a.data)?;
    let model = trainer::load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let scores = trainer::infer_scores(&stream, &model, &cfg)?;
    let [_, _, test] = trainer::split_ranges(&stream, cfg.split)?;
    let auc_over = |range: std::ops::Range<usize>| -> Option<f64> {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (e, s) in stream.events()[range.clone()].iter().zip(&scores[range]) {
            if e.label.is_labeled() {
                xs.push(s.ranking_value(cfg.mode));
                ys.push(e.label == Label::Anomalous);
            }
        }
        eval::auc_roc(&xs, &ys).ok()
    };
    let all = auc_over(0..stream.len());
    let test_auc = auc_over(test);
    println!("{:<10} {:>8}", "events", stream.len());
    println!("{:<10} {:>8}", "auc", fmt_auc(all));
    println!("{:<10} {:>8}", "test_auc", fmt_auc(test_auc));
    if let Some(path) = &a.scores {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["user_id", "timestamp", "label", "score", "probability"])?;
        for (e, s) in stream.events().iter().zip(&scores) {
            w.write_record([
                e.src.to_string(),
                e.t.to_string(),
                e.label.as_i8().to_string(),
                s.score.to_string(),
                s.probability.to_string(),
            ])?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.out {
        write_json(
            path,
            &serde_json::json!({
                "checkpoint": a.checkpoint,
                "data": a.data,
                "events": stream.len(),
                "auc": all,
                "test_auc": test_auc,
                "mode": cfg.mode,
            }),
        )?;
    }
    Ok(())
}

fn seed_list(n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        bail!("--seeds must be at least 1");
    }
    Ok((0..n).collect())
}

fn fewshot(a: SweepArgs) -> Result<()> {
    let cfg = a.experiment.resolve()?;
    let stream = load_stream(&a.data)?;
    let rows = eval::run_fewshot(&stream, &cfg, &FEWSHOT_RATIOS, &seed_list(a.seeds)?)?;
    println!("{:>5}  {:>8}  {:>8}  {:>5}", "p", "auc", "std", "seeds");
    for r in &rows {
        println!(
            "{:>5.1}  {:>8.4}  {:>8.4}  {:>5}",
            r.drop_ratio,
            r.metrics.auc,
            r.metrics.auc_std,
            r.metrics.seeds.len()
        );
    }
    if let Some(path) = &a.out {
        write_json(path, &rows)?;
    }
    Ok(())
}

fn ablate(a: SweepArgs) -> Result<()> {
    let cfg = a.experiment.resolve()?;
    let stream = load_stream(&a.data)?;
    let rows = eval::run_ablation(&stream, &cfg, &seed_list(a.seeds)?)?;
    println!("{:<9}  {:>8}  {:>8}  {:>5}", "variant", "auc", "std", "seeds");
    for r in &rows {
        println!(
            "{:<9}  {:>8.4}  {:>8.4}  {:>5}",
            r.variant.to_string(),
            r.metrics.auc,
            r.metrics.auc_std,
            r.metrics.seeds.len()
        );
    }
    if let Some(path) = &a.out {
        write_json(path, &rows)?;
    }
    Ok(())
}

fn export_embeddings(a: ExportArgs) -> Result<()> {
    let cfg = a.experiment.resolve()?;
    let stream = load_stream(&a.data)?;
    let model = trainer::load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let emb = trainer::embed_events(&stream, &model, &cfg)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let dim = model.config.embed_dim;
    let mut header = vec!["node_id".to_string(), "t".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for (e, z) in stream.events().iter().zip(&emb) {
        let mut rec = vec![e.src.to_string(), e.t.to_string()];
        rec.extend(z.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("wrote {} embeddings of width {dim} to {}", emb.len(), a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Fewshot(a) => fewshot(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportEmbeddings(a) => export_embeddings(a),
    }
}
