//! Time-equipped memory bank of historical anomaly scores.
//!
//! The bank is a bounded FIFO of `(score, stored_at)` messages from normal
//! and unlabeled samples. A reference draw samples `k = min(M_s, len)`
//! messages without replacement and computes
//!
//! ```text
//! mu    = (1/k) * sum_i w_i * r_i
//! sigma = sqrt( sum_i w_i * (r_i - mu)^2 / (k - 1) )
//! w_i   = 1 / (ln(t - t_i + 1) + 1)
//! ```
//!
//! Note the mean divides by `k`, not by the weight total.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::egraph::Label;
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 4000;
pub const DEFAULT_SAMPLE_SIZE: usize = 1000;
/// Lower clamp on the reference standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// How stored scores are weighted in a reference draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w = 1 / (ln(dt + 1) + 1)`, weighted sums divided by `k`.
    #[default]
    Decay,
    /// All weights 1: plain sample mean and `(k - 1)` standard deviation.
    Uniform,
    /// Decay weights, with the weighted sums divided by the weight total
    /// instead of `k` (and the variance rescaled by `k / (k - 1)`).
    NormalizedDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub mu: f64,
    pub sigma: f64,
    pub at: f64,
    pub count: usize,
}

impl ReferenceScore {
    /// The standard-normal reference used before the bank warms up.
    pub fn standard(at: f64) -> Self {
        ReferenceScore { mu: 0.0, sigma: 1.0, at, count: 0 }
    }
}

/// Time-decay weight of a message stored at `stored_at`, seen at `t`.
pub fn decay_weight(t: f64, stored_at: f64) -> Result<f64> {
    if !(t >= stored_at) {
        return Err(Error::invalid(format!(
            "decay_weight: query time {t} precedes storage time {stored_at}"
        )));
    }
    Ok(1.0 / ((t - stored_at + 1.0).ln() + 1.0))
}

/// z-score of `score` against `reference`.
pub fn deviation(score: f64, reference: &ReferenceScore) -> f64 {
    (score - reference.mu) / reference.sigma
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    queue: VecDeque<(f64, f64)>,
    capacity: usize,
    sample_size: usize,
    weighting: Weighting,
}

impl MemoryBank {
    pub fn new(capacity: usize, sample_size: usize, weighting: Weighting) -> Result<Self> {
        if capacity == 0 || sample_size == 0 {
            return Err(Error::invalid("memory bank capacity and sample size must be positive"));
        }
        Ok(MemoryBank {
            queue: VecDeque::with_capacity(capacity),
            capacity,
            sample_size,
            weighting,
        })
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    /// Enough entries for a full-size draw.
    pub fn is_warm(&self) -> bool {
        self.queue.len() >= self.sample_size
    }

    pub fn entries(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.queue.iter().copied()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }

    /// Stores `(score, t)` when `label` is normal or unlabeled, evicting the
    /// oldest message at capacity. Returns whether the message was stored.
    ///
    /// Pushes must be chronological; a timestamp older than the newest
    /// stored one is an error.
    pub fn push(&mut self, score: f64, t: f64, label: Label) -> Result<bool> {
        if label == Label::Anomalous {
            return Ok(false);
        }
        if !score.is_finite() || !t.is_finite() {
            return Err(Error::NonFinite { op: "memory bank push" });
        }
        if let Some(&(_, last)) = self.queue.back() {
            if t < last {
                return Err(Error::invalid(format!(
                    "memory bank push at {t} after a message stored at {last}"
                )));
            }
        }
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back((score, t));
        Ok(true)
    }

    /// Positions of a uniform draw of `min(M_s, len)` messages, ascending.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let k = self.sample_size.min(self.queue.len());
        let mut idx = index::sample(rng, self.queue.len(), k).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Reference statistics at time `t` over the given message positions.
    pub fn reference_over(&self, positions: &[usize], t: f64) -> Result<ReferenceScore> {
        let k = positions.len();
        if k == 0 {
            return Err(Error::invalid("reference over an empty sample"));
        }
        let mut scores = Vec::with_capacity(k);
        let mut weights = Vec::with_capacity(k);
        for &p in positions {
            let &(r, ti) = self
                .queue
                .get(p)
                .ok_or_else(|| Error::invalid(format!("bank position {p} out of range")))?;
            scores.push(r);
            weights.push(match self.weighting {
                Weighting::Uniform => 1.0,
                Weighting::Decay | Weighting::NormalizedDecay => decay_weight(t, ti)?,
            });
        }
        let kf = k as f64;
        let (mu, sigma) = match self.weighting {
            Weighting::Decay | Weighting::Uniform => {
                let mu = weights.iter().zip(&scores).map(|(w, r)| w * r).sum::<f64>() / kf;
                let sigma = if k > 1 {
                    let ss: f64 = weights.iter().zip(&scores).map(|(w, r)| w * (r - mu).powi(2)).sum();
                    (ss / (kf - 1.0)).sqrt()
                } else {
                    0.0
                };
                (mu, sigma)
            }
            Weighting::NormalizedDecay => {
                let wsum: f64 = weights.iter().sum();
                let mu = weights.iter().zip(&scores).map(|(w, r)| w * r).sum::<f64>() / wsum;
                let sigma = if k > 1 {
                    let ss: f64 = weights.iter().zip(&scores).map(|(w, r)| w * (r - mu).powi(2)).sum();
                    (ss / wsum * kf / (kf - 1.0)).sqrt()
                } else {
                    0.0
                };
                (mu, sigma)
            }
        };
        Ok(ReferenceScore {
            mu,
            sigma: sigma.max(SIGMA_FLOOR),
            at: t,
            count: k,
        })
    }

    /// Draws a sample and computes the reference at `t`; `None` when the
    /// bank is empty (cold start).
    pub fn reference<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<Option<ReferenceScore>> {
        if self.queue.is_empty() {
            return Ok(None);
        }
        let positions = self.draw(rng);
        self.reference_over(&positions, t).map(Some)
    }

    /// Writes `score,t` lines, oldest first.
    pub fn dump_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "score,t")?;
        for (s, t) in &self.queue {
            writeln!(f, "{s},{t}")?;
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    #[test]
    fn push_rules() {
        let mut bank = MemoryBank::new(3, 2, Weighting::Decay).unwrap();
        assert!(!bank.push(1.0, 0.0, Label::Anomalous).unwrap());
        assert!(bank.is_empty());
        assert!(bank.push(1.0, 0.0, Label::Unlabeled).unwrap());
        for (i, s) in [2.0, 3.0, 4.0].iter().enumerate() {
            bank.push(*s, i as f64 + 1.0, Label::Normal).unwrap();
        }
        let scores: Vec<f64> = bank.entries().map(|e| e.0).collect();
        assert_eq!(scores, vec![2.0, 3.0, 4.0]);
        assert!(bank.push(5.0, 0.5, Label::Normal).is_err());
    }

    #[test]
    fn decay_weight_values() {
        assert_eq!(decay_weight(5.0, 5.0).unwrap(), 1.0);
        assert!((decay_weight(E - 1.0, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((decay_weight(E.powi(3) - 1.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(decay_weight(0.0, 1.0).is_err());
        assert!(decay_weight(10.0, 0.0).unwrap() < decay_weight(9.0, 0.0).unwrap());
    }

    fn bank_with(entries: &[(f64, f64)]) -> MemoryBank {
        let mut b = MemoryBank::new(100, 100, Weighting::Decay).unwrap();
        for &(s, t) in entries {
            b.push(s, t, Label::Normal).unwrap();
        }
        b
    }

    #[test]
    fn reference_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = bank_with(&[(1.0, 2.0); 3]).reference(2.0, &mut rng).unwrap().unwrap();
        assert_eq!((r.mu, r.sigma), (1.0, SIGMA_FLOOR));

        let r = bank_with(&[(0.0, 2.0), (2.0, 2.0)]).reference(2.0, &mut rng).unwrap().unwrap();
        assert!((r.mu - 1.0).abs() < 1e-15);
        assert!((r.sigma - 2f64.sqrt()).abs() < 1e-15);

        // second entry stored e - 1 seconds before the query has weight 0.5
        let t = E - 1.0;
        let r = bank_with(&[(2.0, 0.0), (2.0, t)]).reference(t, &mut rng).unwrap().unwrap();
        assert!((r.mu - 1.5).abs() < 1e-15);

        let single = bank_with(&[(3.0, 0.0)]).reference(0.0, &mut rng).unwrap().unwrap();
        assert_eq!(single.sigma, SIGMA_FLOOR);
        assert!(bank_with(&[]).reference(0.0, &mut rng).unwrap().is_none());
    }

    #[test]
    fn deviation_examples() {
        let r = ReferenceScore { mu: 1.0, sigma: 0.5, at: 0.0, count: 4 };
        assert_eq!(deviation(1.0, &r), 0.0);
        assert_eq!(deviation(2.0, &r), 2.0);
        assert_eq!(deviation(0.5, &r), -1.0);
    }

    #[test]
    fn draw_is_bounded_and_seeded() {
        let mut b = MemoryBank::new(50, 10, Weighting::Decay).unwrap();
        for i in 0..50 {
            b.push(i as f64, i as f64, Label::Normal).unwrap();
        }
        let d1 = b.draw(&mut ChaCha8Rng::seed_from_u64(4));
        let d2 = b.draw(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(d1.len(), 10);
        assert_eq!(d1, d2);
        assert!(d1.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn normalized_weighting_is_weighted_mean() {
        let mut b = MemoryBank::new(10, 10, Weighting::NormalizedDecay).unwrap();
        b.push(2.0, 0.0, Label::Normal).unwrap();
        b.push(2.0, 5.0, Label::Normal).unwrap();
        let r = b.reference(7.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().unwrap();
        assert!((r.mu - 2.0).abs() < 1e-15);
    }
}
