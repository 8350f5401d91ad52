//! Deviation loss, pseudo-grouped contrastive loss, and their weighted
//! combinations.

use serde::{Deserialize, Serialize};

use crate::egraph::Label;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Pre-softmax score that removes an entry from a softmax.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Deviation margin for anomalies, in reference standard deviations.
    pub margin: f64,
    pub temperature: f64,
    /// Pairs closer than this in deviation share a pseudo-group.
    pub group_threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Use raw embedding dot products instead of cosine similarity.
    pub raw_dot_product: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 5.0,
            temperature: 0.5,
            group_threshold: 1.0,
            alpha: 0.1,
            beta: 0.01,
            raw_dot_product: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::invalid("margin must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        Ok(())
    }
}

/// Which joint objective is being optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `dev + alpha * scl`
    Anomaly,
    /// `sup + alpha * dev + beta * scl`
    #[default]
    Downstream,
}

fn target(label: Label) -> Result<f64> {
    match label {
        Label::Normal => Ok(0.0),
        Label::Anomalous => Ok(1.0),
        Label::Unlabeled => Err(Error::invalid("deviation loss given an unlabeled sample")),
    }
}

/// `(1 - y) |dev| + y max(0, m - |dev|)` for one labeled sample.
pub fn deviation_loss(dev: f64, label: Label, margin: f64) -> Result<f64> {
    let y = target(label)?;
    let a = dev.abs();
    Ok((1.0 - y) * a + y * (margin - a).max(0.0))
}

/// Mean deviation loss over `rows` of the deviation column `devs`.
/// `None` when there are no labeled rows.
pub fn deviation_loss_var(
    tape: &mut Tape,
    devs: Var,
    rows: &[usize],
    labels: &[Label],
    margin: f64,
) -> Result<Option<Var>> {
    if rows.len() != labels.len() {
        return Err(Error::invalid("deviation loss: rows and labels differ in length"));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let ys = labels.iter().map(|&l| target(l)).collect::<Result<Vec<f64>>>()?;
    let n = rows.len();
    let picked = tape.select_rows(devs, rows)?;
    let abs = tape.abs(picked)?;
    let normal_mask = tape.constant(Tensor::matrix(n, 1, ys.iter().map(|y| 1.0 - y).collect())?);
    let anomaly_mask = tape.constant(Tensor::matrix(n, 1, ys)?);
    let pull = tape.mul(abs, normal_mask)?;
    let neg = tape.scale(abs, -1.0)?;
    let gap = tape.offset(neg, margin)?;
    let hinge = tape.relu(gap)?;
    let push = tape.mul(hinge, anomaly_mask)?;
    let both = tape.add(pull, push)?;
    tape.mean(both).map(Some)
}

/// Pseudo-group pair structure over a batch of deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeights {
    n: usize,
    /// Row-major `n x n`; zero on the diagonal and for inactive pairs.
    weights: Vec<f64>,
}

impl PairWeights {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn active(&self, i: usize, j: usize) -> bool {
        self.weights[i * self.n + j] > 0.0
    }

    /// `1 / (1 + |dev_i - dev_j|)` for active pairs, otherwise 0.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn num_active(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

pub fn pseudo_groups(devs: &[f64], threshold: f64) -> Result<PairWeights> {
    let n = devs.len();
    if n < 2 {
        return Err(Error::invalid("pseudo-grouping needs at least two samples"));
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = (devs[i] - devs[j]).abs();
            if i != j && d < threshold {
                weights[i * n + j] = 1.0 / (1.0 + d);
            }
        }
    }
    Ok(PairWeights { n, weights })
}

/// Sum over the batch of the pseudo-grouped contrastive loss of each sample.
///
/// `z` is `[N, d]`; `devs` are treated as constants. Similarities are
/// cosine unless `raw_dot_product` is set.
pub fn contrastive_loss_var(tape: &mut Tape, z: Var, devs: &[f64], cfg: &LossConfig) -> Result<Var> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {} must be positive", cfg.temperature)));
    }
    let zt = tape.value(z);
    let n = zt.rows();
    if zt.shape().len() != 2 || n != devs.len() {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: zt.shape().to_vec(),
            rhs: vec![devs.len()],
        });
    }
    let pairs = pseudo_groups(devs, cfg.group_threshold)?;
    let emb = if cfg.raw_dot_product { z } else { tape.l2_normalize(z)? };
    let embt = tape.transpose(emb)?;
    let sim = tape.matmul(emb, embt)?;
    let sim = tape.scale(sim, 1.0 / cfg.temperature)?;
    let mut mask = vec![0.0; n * n];
    (0..n).for_each(|i| mask[i * n + i] = MASKED);
    let mask = tape.constant(Tensor::matrix(n, n, mask)?);
    let logits = tape.add(sim, mask)?;
    let logp = tape.log_softmax(logits)?;
    let coeff = -1.0 / (n as f64 - 1.0);
    let c = tape.constant(Tensor::matrix(n, n, pairs.weights.iter().map(|w| w * coeff).collect())?);
    let terms = tape.mul(logp, c)?;
    tape.sum(terms)
}

pub fn contrastive_loss(z: &Tensor, devs: &[f64], cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let loss = contrastive_loss_var(&mut tape, zv, devs, cfg)?;
    tape.value(loss).item()
}

/// Weighted objective from whichever losses are present; absent ones count as 0.
pub fn combine(
    tape: &mut Tape,
    dev: Option<Var>,
    scl: Option<Var>,
    sup: Option<Var>,
    mode: Mode,
    cfg: &LossConfig,
) -> Result<Var> {
    let terms: Vec<(Option<Var>, f64)> = match mode {
        Mode::Anomaly => vec![(dev, 1.0), (scl, cfg.alpha)],
        Mode::Downstream => vec![(sup, 1.0), (dev, cfg.alpha), (scl, cfg.beta)],
    };
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let Some(v) = v else { continue };
        let scaled = if w == 1.0 { v } else { tape.scale(v, w)? };
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::zeros(&[1])),
    })
}

/// [`combine`] on plain numbers.
pub fn combine_values(dev: f64, scl: f64, sup: Option<f64>, mode: Mode, cfg: &LossConfig) -> f64 {
    match mode {
        Mode::Anomaly => dev + cfg.alpha * scl,
        Mode::Downstream => sup.unwrap_or(0.0) + cfg.alpha * dev + cfg.beta * scl,
    }
}

/// Mean cross-entropy of two-class `logits` rows against `labels`.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, rows: &[usize], labels: &[Label]) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let ys = labels.iter().map(|&l| target(l)).collect::<Result<Vec<f64>>>()?;
    let picked = tape.select_rows(logits, rows)?;
    let logp = tape.log_softmax(picked)?;
    let onehot: Vec<f64> = ys.iter().flat_map(|&y| [1.0 - y, y]).collect();
    let onehot = tape.constant(Tensor::matrix(rows.len(), 2, onehot)?);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / rows.len() as f64).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_loss_table() {
        assert_eq!(deviation_loss(0.0, Label::Normal, 5.0).unwrap(), 0.0);
        assert_eq!(deviation_loss(7.0, Label::Anomalous, 5.0).unwrap(), 0.0);
        assert_eq!(deviation_loss(2.0, Label::Anomalous, 5.0).unwrap(), 3.0);
        assert_eq!(deviation_loss(-2.0, Label::Normal, 5.0).unwrap(), 2.0);
        assert!(deviation_loss(1.0, Label::Unlabeled, 5.0).is_err());
    }

    #[test]
    fn deviation_loss_batch_is_mean() {
        let mut tape = Tape::new();
        let devs = tape.constant(Tensor::matrix(4, 1, vec![0.5, 2.0, -9.0, 1.0]).unwrap());
        let labels = [Label::Normal, Label::Anomalous, Label::Anomalous];
        let l = deviation_loss_var(&mut tape, devs, &[0, 1, 2], &labels, 5.0).unwrap().unwrap();
        assert!((tape.value(l).item().unwrap() - (0.5 + 3.0 + 0.0) / 3.0).abs() < 1e-15);
        assert!(deviation_loss_var(&mut tape, devs, &[], &[], 5.0).unwrap().is_none());
        assert!(deviation_loss_var(&mut tape, devs, &[3], &[Label::Unlabeled], 5.0).is_err());
    }

    #[test]
    fn pair_weights() {
        let p = pseudo_groups(&[0.0, 0.5], 1.0).unwrap();
        assert!(p.active(0, 1));
        assert!((p.weight(0, 1) - 1.0 / 1.5).abs() < 1e-15);
        assert_eq!(p.weight(0, 1), p.weight(1, 0));
        assert!(!pseudo_groups(&[0.0, 2.0], 1.0).unwrap().active(0, 1));
        assert_eq!(pseudo_groups(&[0.3, 0.3], 1.0).unwrap().weight(0, 1), 1.0);
        assert!(pseudo_groups(&[0.3], 1.0).is_err());
    }

    #[test]
    fn contrastive_two_sample_cases() {
        let cfg = LossConfig::default();
        let z = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(contrastive_loss(&z, &[0.0, 3.0], &cfg).unwrap(), 0.0);
        assert!(contrastive_loss(&z, &[0.2, 0.2], &cfg).unwrap().abs() < 1e-15);
        let bad = LossConfig { temperature: 0.0, ..cfg };
        assert!(contrastive_loss(&z, &[0.2, 0.2], &bad).is_err());
    }

    #[test]
    fn combine_examples() {
        let cfg = LossConfig::default();
        let zero = LossConfig { alpha: 0.0, beta: 0.0, ..cfg.clone() };
        assert_eq!(combine_values(3.0, 4.0, Some(2.5), Mode::Downstream, &zero), 2.5);
        let anomaly = combine_values(1.0, 2.0, None, Mode::Anomaly, &cfg);
        assert!((anomaly - 1.2).abs() < 1e-15);
        let down = combine_values(1.0, 1.0, Some(1.0), Mode::Downstream, &cfg);
        assert!((down - 1.11).abs() < 1e-15);

        let mut tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0).unwrap());
        let l = combine(&mut tape, Some(one), Some(one), Some(one), Mode::Downstream, &cfg).unwrap();
        assert!((tape.value(l).item().unwrap() - 1.11).abs() < 1e-15);
        let empty = combine(&mut tape, None, None, None, Mode::Anomaly, &cfg).unwrap();
        assert_eq!(tape.value(empty).item().unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 2]));
        let l = cross_entropy_var(&mut tape, logits, &[0, 2], &[Label::Normal, Label::Anomalous])
            .unwrap()
            .unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }
}
