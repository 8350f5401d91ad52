//! ROC AUC and the multi-seed experiment harnesses.

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig};
use crate::egraph::EventStream;
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::trainer::{train, TrainOptions};

/// Area under the ROC curve by the rank-sum method, ties at midranks.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "auc_roc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "auc_roc" });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "auc_roc needs both classes, got {pos} positive and {neg} negative labels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Test AUC aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub auc_std: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub config: ExperimentConfig,
    pub embeddings: Option<std::path::PathBuf>,
}

impl MetricsReport {
    pub fn from_runs(config: ExperimentConfig, seeds: Vec<u64>, per_seed: Vec<f64>) -> Self {
        let (auc, auc_std) = mean_std(&per_seed);
        MetricsReport { auc, auc_std, seeds, per_seed, config, embeddings: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub drop_ratio: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub metrics: MetricsReport,
}

pub const FEWSHOT_RATIOS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const ABLATION_DROP_RATIO: f64 = 0.5;

/// Trains one isolated job and returns its test AUC.
fn test_auc(stream: &EventStream, config: &ExperimentConfig) -> Result<f64> {
    let out = train(stream, config, &TrainOptions::default())?;
    out.report.test_auc.ok_or_else(|| {
        Error::invalid(format!(
            "test split of the stream lacks one of the classes (seed {})",
            config.seed
        ))
    })
}

/// Runs every configuration for every seed as independent jobs and
/// aggregates per configuration, preserving order.
pub fn run_grid(stream: &EventStream, configs: &[ExperimentConfig], seeds: &[u64]) -> Result<Vec<MetricsReport>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let exec = configs.first().map_or(Execution::default(), |c| c.execution);
    let jobs: Vec<ExperimentConfig> = configs
        .iter()
        .flat_map(|c| {
            seeds.iter().map(move |&seed| ExperimentConfig {
                seed,
                // jobs are the unit of parallelism; each runs sequentially
                execution: Execution::Sequential,
                ..c.clone()
            })
        })
        .collect();
    let aucs = parallel::map(exec, jobs, |job| test_auc(stream, &job))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    Ok(configs
        .iter()
        .zip(aucs.chunks(seeds.len()))
        .map(|(c, a)| MetricsReport::from_runs(c.clone(), seeds.to_vec(), a.to_vec()))
        .collect())
}

/// Test AUC per drop ratio.
pub fn run_fewshot(
    stream: &EventStream,
    config: &ExperimentConfig,
    p_values: &[f64],
    seeds: &[u64],
) -> Result<Vec<FewShotRow>> {
    let configs: Vec<ExperimentConfig> = p_values
        .iter()
        .map(|&p| ExperimentConfig { drop_ratio: p, ..config.clone() })
        .collect();
    Ok(run_grid(stream, &configs, seeds)?
        .into_iter()
        .zip(p_values)
        .map(|(metrics, &drop_ratio)| FewShotRow { drop_ratio, metrics })
        .collect())
}

/// Test AUC of every ablation rung at the ablation drop ratio.
pub fn run_ablation(stream: &EventStream, config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let configs: Vec<ExperimentConfig> = Ablation::LADDER
        .iter()
        .map(|&variant| ExperimentConfig {
            ablation: variant,
            drop_ratio: ABLATION_DROP_RATIO,
            ..config.clone()
        })
        .collect();
    Ok(run_grid(stream, &configs, seeds)?
        .into_iter()
        .zip(Ablation::LADDER)
        .map(|(metrics, variant)| AblationRow { variant, metrics })
        .collect())
}
