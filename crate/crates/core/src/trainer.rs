//! Chronological mini-batch training and batched inference.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::egraph::{chronological_split, drop_labels, EventStream, Label, Subgraph, TemporalGraph};
use crate::error::{Error, Result};
use crate::eval::auc_roc;
use crate::losses::{self, Mode};
use crate::membank::{MemoryBank, ReferenceScore};
use crate::model::{class_one_probability, EncoderBatch, ModelConfig, SadModel};
use crate::numcore::{adam_step, checkpoint, AdamState, BoundParams, Tape, Tensor, Var};
use crate::parallel::{self, Execution};

/// Mean loss terms over the batches of one epoch. Disabled terms are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub dev_loss: f64,
    pub scl_loss: f64,
    pub sup_loss: f64,
    pub val_auc: Option<f64>,
    pub bank_len: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub train_events: usize,
    pub train_labeled: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the best-epoch parameters.
    pub checkpoint: Option<PathBuf>,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters from the best validation epoch.
    pub model: SadModel,
}

/// Per-event outputs of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    /// Raw detector output.
    pub score: f64,
    /// Probability of class 1 from the projection head.
    pub probability: f64,
}

impl EventScore {
    /// The number ranked by AUC in the given mode.
    pub fn ranking_value(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Anomaly => self.score,
            Mode::Downstream => self.probability,
        }
    }
}

/// Index ranges of the chronological train/validation/test split.
pub fn split_ranges(stream: &EventStream, fractions: (f64, f64, f64)) -> Result<[Range<usize>; 3]> {
    let s = chronological_split(stream, fractions)?;
    let (a, b) = (s.train.len(), s.train.len() + s.val.len());
    Ok([0..a, a..b, b..stream.len()])
}

fn sampling_rng(seed: u64, event: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(event as u64);
    rng
}

/// Samples the source-node trees of events `range`, one per event.
fn sample_batch(graph: &TemporalGraph, config: &ExperimentConfig, range: Range<usize>) -> Result<Vec<Subgraph>> {
    let events = graph.stream.events();
    parallel::map(config.execution, range.collect(), |i| {
        let e = &events[i];
        graph.sample(
            e.src,
            e.t,
            config.hops,
            config.per_hop,
            config.neighbor_strategy,
            &mut sampling_rng(config.seed, i),
        )
    })
    .into_iter()
    .collect()
}

fn check_dims(model: &SadModel, stream: &EventStream) -> Result<()> {
    if model.config.edge_feat_dim != stream.edge_feature_dim() {
        return Err(Error::invalid(format!(
            "model expects {} edge features, stream has {}",
            model.config.edge_feat_dim,
            stream.edge_feature_dim()
        )));
    }
    Ok(())
}

fn chunks(range: Range<usize>, size: usize) -> Vec<Range<usize>> {
    range
        .clone()
        .step_by(size)
        .map(|s| s..(s + size).min(range.end))
        .collect()
}

/// Embeddings `[n, embed_dim]` and scores for events `range`, no side effects.
fn forward_range(
    graph: &TemporalGraph,
    model: &SadModel,
    config: &ExperimentConfig,
    range: Range<usize>,
) -> Result<(Vec<Vec<f64>>, Vec<EventScore>)> {
    check_dims(model, &graph.stream)?;
    let inner = ExperimentConfig { execution: Execution::Sequential, ..config.clone() };
    let parts = parallel::map(config.execution, chunks(range, config.batch_size), |r| {
        let trees = sample_batch(graph, &inner, r)?;
        let batch = EncoderBatch::from_subgraphs(&trees, model.config.layers, model.config.edge_feat_dim)?;
        let mut tape = Tape::new();
        let bp = tape.bind(&model.store);
        let z = model.encode(&mut tape, &bp, &batch)?;
        let s = model.detect(&mut tape, &bp, z)?;
        let logits = model.project(&mut tape, &bp, z)?;
        let (zt, st, lt) = (tape.value(z), tape.value(s), tape.value(logits));
        let emb = (0..zt.rows()).map(|i| zt.row(i).to_vec()).collect::<Vec<_>>();
        let scores = (0..st.rows())
            .map(|i| EventScore {
                score: st.data()[i],
                probability: class_one_probability([lt.row(i)[0], lt.row(i)[1]]),
            })
            .collect::<Vec<_>>();
        Ok::<_, Error>((emb, scores))
    });
    let mut emb = Vec::new();
    let mut scores = Vec::new();
    for p in parts {
        let (e, s) = p?;
        emb.extend(e);
        scores.extend(s);
    }
    Ok((emb, scores))
}

/// Scores of events `range` of `graph`, each computed from strictly earlier
/// history. Deterministic; touches neither parameters nor any bank.
pub fn infer_range(
    graph: &TemporalGraph,
    model: &SadModel,
    config: &ExperimentConfig,
    range: Range<usize>,
) -> Result<Vec<EventScore>> {
    forward_range(graph, model, config, range).map(|(_, s)| s)
}

/// Scores of every event in `stream`.
pub fn infer_scores(stream: &EventStream, model: &SadModel, config: &ExperimentConfig) -> Result<Vec<EventScore>> {
    check_dims(model, stream)?;
    let graph = TemporalGraph::new(stream.clone());
    infer_range(&graph, model, config, 0..stream.len())
}

/// Source-node embedding of every event in `stream`.
pub fn embed_events(stream: &EventStream, model: &SadModel, config: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    check_dims(model, stream)?;
    let graph = TemporalGraph::new(stream.clone());
    forward_range(&graph, model, config, 0..stream.len()).map(|(e, _)| e)
}

/// AUC over the labeled events of `range`; `None` unless both classes occur.
pub fn range_auc(
    graph: &TemporalGraph,
    model: &SadModel,
    config: &ExperimentConfig,
    range: Range<usize>,
) -> Result<Option<f64>> {
    let events = &graph.stream.events()[range.clone()];
    let has = |l: Label| events.iter().any(|e| e.label == l);
    if !has(Label::Normal) || !has(Label::Anomalous) {
        return Ok(None);
    }
    let scores = infer_range(graph, model, config, range)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (e, s) in events.iter().zip(&scores) {
        if e.label.is_labeled() {
            xs.push(s.ranking_value(config.mode));
            ys.push(e.label == Label::Anomalous);
        }
    }
    auc_roc(&xs, &ys).map(Some)
}

#[derive(Default)]
struct BatchLosses {
    total: f64,
    dev: f64,
    scl: f64,
    sup: f64,
}

struct Objective {
    total: Var,
    dev: Option<Var>,
    scl: Option<Var>,
    sup: Option<Var>,
    scores: Var,
    devs: Vec<f64>,
}

/// Builds the training objective for one batch on `tape`.
#[allow(clippy::too_many_arguments)]
fn objective(
    tape: &mut Tape,
    bp: &BoundParams,
    model: &SadModel,
    config: &ExperimentConfig,
    batch: &EncoderBatch,
    labels: &[Label],
    reference: &ReferenceScore,
    pair_devs: Option<&[f64]>,
) -> Result<Objective> {
    let z = model.encode(tape, bp, batch)?;
    let s = model.detect(tape, bp, z)?;
    let shifted = tape.offset(s, -reference.mu)?;
    let dev = tape.scale(shifted, 1.0 / reference.sigma)?;

    let (rows, row_labels): (Vec<usize>, Vec<Label>) = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_labeled())
        .map(|(i, &l)| (i, l))
        .unzip();
    let dev_loss = if config.ablation.uses_deviation() {
        losses::deviation_loss_var(tape, dev, &rows, &row_labels, config.loss.margin)?
    } else {
        None
    };
    let devs = tape.value(dev).data().to_vec();
    let scl_loss = if config.ablation.uses_contrastive() {
        let groups = pair_devs.unwrap_or(&devs);
        Some(losses::contrastive_loss_var(tape, z, groups, &config.loss)?)
    } else {
        None
    };
    let sup_loss = match config.mode {
        Mode::Anomaly => None,
        Mode::Downstream => {
            let zin = if config.sup_to_encoder { z } else { tape.detach(z) };
            let logits = model.project(tape, bp, zin)?;
            losses::cross_entropy_var(tape, logits, &rows, &row_labels)?
        }
    };
    let total = losses::combine(tape, dev_loss, scl_loss, sup_loss, config.mode, &config.loss)?;
    Ok(Objective { total, dev: dev_loss, scl: scl_loss, sup: sup_loss, scores: s, devs })
}

struct BatchOutcome {
    losses: BatchLosses,
    scores: Vec<f64>,
    reference: ReferenceScore,
}

/// One optimization step over training events `range`.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    graph: &TemporalGraph,
    config: &ExperimentConfig,
    model: &mut SadModel,
    adam: &mut AdamState,
    bank: &MemoryBank,
    bank_rng: &mut ChaCha8Rng,
    labels: &[Label],
    range: Range<usize>,
) -> Result<BatchOutcome> {
    let t0 = graph.stream.events()[range.start].t;
    let trees = sample_batch(graph, config, range)?;
    let batch = EncoderBatch::from_subgraphs(&trees, model.config.layers, model.config.edge_feat_dim)?;
    let reference = if config.ablation.uses_bank() && bank.is_warm() {
        bank.reference(t0, bank_rng)?.unwrap_or(ReferenceScore::standard(t0))
    } else {
        ReferenceScore::standard(t0)
    };

    let mut tape = Tape::with_execution(config.execution);
    let bp = tape.bind(&model.store);
    let obj = objective(&mut tape, &bp, model, config, &batch, labels, &reference, None)?;
    let value = |v: Option<Var>| v.map_or(Ok(0.0), |v| tape.value(v).item());
    let losses = BatchLosses {
        total: tape.value(obj.total).item()?,
        dev: value(obj.dev)?,
        scl: value(obj.scl)?,
        sup: value(obj.sup)?,
    };
    let grads = tape.backward(obj.total)?.for_params(&tape, &bp);
    let scores = tape.value(obj.scores).data().to_vec();
    drop(tape);
    adam_step(&mut model.store, &grads, adam, config.lr)?;
    Ok(BatchOutcome { losses, scores, reference })
}

fn batch_diagnostics(scores: &[f64], reference: Option<&ReferenceScore>, bank: &MemoryBank) -> String {
    let finite: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    format!(
        "previous batch scores: n={} mean={mean:.6e} min={lo:.6e} max={hi:.6e}; reference {:?}; bank holds {}",
        scores.len(),
        reference,
        bank.len()
    )
}

/// Starts the projection head at the labeled class balance, so that early
/// steps go to separating classes rather than to learning the prior.
fn init_class_prior(model: &mut SadModel, labels: &[Label]) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l == Label::Anomalous).count() as f64;
    let neg = labels.iter().filter(|&&l| l == Label::Normal).count() as f64;
    if pos > 0.0 && neg > 0.0 {
        model.store.set(model.projection.b2, Tensor::vector(vec![0.0, (pos / neg).ln()])?)?;
    }
    Ok(())
}

/// Trains a fresh model on the training split of `stream`.
pub fn train(stream: &EventStream, config: &ExperimentConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let [train_r, val_r, test_r] = split_ranges(stream, config.split)?;
    if train_r.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let train_labels: Vec<Label> = {
        let s = chronological_split(stream, config.split)?;
        drop_labels(&s.train, config.drop_ratio, config.seed)?.labels().collect()
    };
    let train_labeled = train_labels.iter().filter(|l| l.is_labeled()).count();
    let graph = TemporalGraph::new(stream.clone());

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = SadModel::new(ModelConfig::new(stream.edge_feature_dim()), &mut init_rng)?;
    init_class_prior(&mut model, &train_labels)?;
    let mut adam = AdamState::new(&model.store);
    let mut bank = MemoryBank::new(config.bank_capacity, config.bank_sample_size, config.weighting())?;
    let mut bank_rng = ChaCha8Rng::seed_from_u64(config.seed);
    bank_rng.set_stream(u64::MAX);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, Option<f64>, SadModel)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        // pushes must be chronological, so every pass restarts the bank
        bank.clear();
        let mut sums = BatchLosses::default();
        let batches = chunks(train_r.clone(), config.batch_size);
        let mut last: Option<(Vec<f64>, ReferenceScore)> = None;
        for (bi, r) in batches.iter().enumerate() {
            let labels = &train_labels[r.clone()];
            let out = train_batch(&graph, config, &mut model, &mut adam, &bank, &mut bank_rng, labels, r.clone())
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged {
                        epoch,
                        batch: bi,
                        details: format!(
                            "non-finite value in {op}; {}",
                            match &last {
                                Some((s, rf)) => batch_diagnostics(s, Some(rf), &bank),
                                None => batch_diagnostics(&[], None, &bank),
                            }
                        ),
                    },
                    other => other,
                })?;
            sums.total += out.losses.total;
            sums.dev += out.losses.dev;
            sums.scl += out.losses.scl;
            sums.sup += out.losses.sup;
            if config.ablation.uses_bank() {
                for ((e, s), &l) in graph.stream.events()[r.clone()].iter().zip(&out.scores).zip(labels) {
                    bank.push(*s, e.t, l)?;
                }
            }
            last = Some((out.scores, out.reference));
        }
        let n = batches.len() as f64;
        let val_auc = range_auc(&graph, &model, config, val_r.clone())?;
        let stats = EpochStats {
            epoch,
            loss: sums.total / n,
            dev_loss: sums.dev / n,
            scl_loss: sums.scl / n,
            sup_loss: sums.sup / n,
            val_auc,
            bank_len: bank.len(),
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if options.progress {
            eprintln!(
                "epoch {:>3}  loss {:.5}  dev {:.5}  scl {:.5}  sup {:.5}  val_auc {}  ({:.1}s)",
                epoch,
                stats.loss,
                stats.dev_loss,
                stats.scl_loss,
                stats.sup_loss,
                val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
                stats.seconds
            );
        }
        epochs.push(stats);

        // without a usable validation AUC the latest epoch wins
        let improved = match (&best, val_auc) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(a)) => a > *b,
            (Some((_, None, _)), _) => true,
            (Some((_, Some(_), _)), None) => false,
        };
        if improved {
            best = Some((epoch, val_auc, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_auc, best_model) = best.expect("at least one epoch");
    if let Some(path) = &options.checkpoint {
        checkpoint::save(path, &best_model.store)?;
    }
    let test_auc = range_auc(&graph, &best_model, config, test_r)?;
    Ok(TrainOutcome {
        report: TrainReport {
            seed: config.seed,
            config: config.clone(),
            epochs,
            best_epoch,
            best_val_auc,
            test_auc,
            checkpoint: options.checkpoint.clone(),
            train_events: train_r.len(),
            train_labeled,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
        model: best_model,
    })
}

/// Loads a checkpoint written by [`train`].
pub fn load_model(path: impl AsRef<Path>) -> Result<SadModel> {
    SadModel::from_store(checkpoint::load(path)?)
}

/// Training objective of one batch, evaluated without stepping.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    pub value: f64,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Tensor>,
    /// Deviations of the batch members against the reference.
    pub devs: Vec<f64>,
}

/// Evaluates the training objective on events `range` of `graph` against a
/// fixed reference. Labels are taken from the stream as is. Contrastive
/// pseudo-groups come from `pair_devs` when given, else from the batch's
/// own deviations.
pub fn batch_objective(
    graph: &TemporalGraph,
    model: &SadModel,
    config: &ExperimentConfig,
    range: Range<usize>,
    reference: &ReferenceScore,
    pair_devs: Option<&[f64]>,
) -> Result<BatchObjective> {
    let labels: Vec<Label> = graph.stream.events()[range.clone()].iter().map(|e| e.label).collect();
    let trees = sample_batch(graph, config, range)?;
    let batch = EncoderBatch::from_subgraphs(&trees, model.config.layers, model.config.edge_feat_dim)?;
    let mut tape = Tape::with_execution(config.execution);
    let bp = tape.bind(&model.store);
    let obj = objective(&mut tape, &bp, model, config, &batch, &labels, reference, pair_devs)?;
    Ok(BatchObjective {
        value: tape.value(obj.total).item()?,
        grads: tape.backward(obj.total)?.for_params(&tape, &bp),
        devs: obj.devs,
    })
}
