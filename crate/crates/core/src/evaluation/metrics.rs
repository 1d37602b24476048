use serde::{Deserialize, Serialize};

use crate::datasets::BagTarget;

/// Confusion counts; every metric in the crate is derived from these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Exact matches, binary or count.
    pub correct: usize,
    pub total: usize,
    /// Count targets seen (regression bags).
    pub counts: usize,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

impl Confusion {
    pub fn record(&mut self, predicted: BagTarget, truth: BagTarget) {
        self.total += 1;
        if predicted == truth {
            self.correct += 1;
        }
        match (predicted, truth) {
            (BagTarget::Binary(p), BagTarget::Binary(t)) => match (p, t) {
                (true, true) => self.tp += 1,
                (false, false) => self.tn += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
            },
            _ => self.counts += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (BagTarget, BagTarget)>) -> Self {
        let mut c = Self::default();
        for (p, t) in pairs {
            c.record(p, t);
        }
        c
    }

    pub fn error_rate(&self) -> f64 {
        pct(self.total - self.correct, self.total)
    }

    pub fn accuracy(&self) -> f64 {
        pct(self.correct, self.total)
    }

    pub fn is_binary(&self) -> bool {
        self.counts == 0 && self.total > 0
    }

    pub fn precision(&self) -> f64 {
        pct(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        pct(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)` in percent; `None` for count targets.
    pub fn f1(&self) -> Option<f64> {
        if !self.is_binary() {
            return None;
        }
        let (p, r) = (self.precision(), self.recall());
        Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
    }
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub error_rate: f64,
    pub accuracy: f64,
    pub f1: Option<f64>,
    pub confusion: Confusion,
}

impl From<Confusion> for MetricBundle {
    fn from(c: Confusion) -> Self {
        Self {
            error_rate: c.error_rate(),
            accuracy: c.accuracy(),
            f1: c.f1(),
            confusion: c,
        }
    }
}

/// `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed metrics with their mean and std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricBundle>,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl SeedSummary {
    pub fn new(seeds: Vec<u64>, per_seed: Vec<MetricBundle>) -> Self {
        let errs: Vec<f64> = per_seed.iter().map(|m| m.error_rate).collect();
        let accs: Vec<f64> = per_seed.iter().map(|m| m.accuracy).collect();
        let (mean_error, std_error) = mean_std(&errs);
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        Self {
            seeds,
            per_seed,
            mean_error,
            std_error,
            mean_accuracy,
            std_accuracy,
        }
    }
}
