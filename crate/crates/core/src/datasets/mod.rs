//! Instance pools, the four MNIST-bag scenarios and their bag generators.

mod bags;
mod cache;
mod glyphs;
pub mod idx;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bags::{make_bags, make_pair_bags, sample_cardinality, shuffle_bag, singletons};
pub use cache::{read_bag_cache, write_bag_cache, BagCacheHeader};
pub use glyphs::synth_glyphs;
pub use idx::{load_mnist_dir, load_mnist_idx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled images of one split, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePool {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    split: Split,
}

impl InstancePool {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Consistency("image side must be positive".into()));
        }
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::Consistency(format!(
                "{} labels need {} pixel bytes, got {}",
                labels.len(),
                labels.len() * rows * cols,
                pixels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Consistency(format!("label {bad} outside 0..=9")));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.rows * self.cols;
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Count of images per class 0..=9.
    pub fn histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Indices of every image of each class.
    pub fn by_class(&self) -> [Vec<usize>; 10] {
        let mut out: [Vec<usize>; 10] = Default::default();
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// First `n` images (all if fewer), keeping the split tag.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let s = self.rows * self.cols;
        Self {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..n * s].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }
}

/// Bag-level supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum BagTarget {
    Binary(bool),
    Count(u32),
}

impl BagTarget {
    pub fn as_f64(self) -> f64 {
        match self {
            BagTarget::Binary(b) => f64::from(u8::from(b)),
            BagTarget::Count(c) => f64::from(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SingleDigit,
    MultiDigit,
    Counting,
    Outlier,
}

impl ScenarioKind {
    pub fn witnesses(self) -> &'static [u8] {
        match self {
            ScenarioKind::SingleDigit | ScenarioKind::Counting => &[9],
            ScenarioKind::MultiDigit => &[3, 6],
            ScenarioKind::Outlier => &[],
        }
    }

    pub fn is_regression(self) -> bool {
        self == ScenarioKind::Counting
    }

    /// Smallest cardinality the generator will emit.
    pub fn min_cardinality(self) -> usize {
        if self == ScenarioKind::Counting {
            1
        } else {
            2
        }
    }

    /// Number of instance clusters the bag task implies.
    pub fn cluster_count(self) -> usize {
        match self {
            ScenarioKind::SingleDigit | ScenarioKind::Counting => 2,
            ScenarioKind::MultiDigit => 3,
            ScenarioKind::Outlier => 10,
        }
    }

    /// Maps a digit to its cluster-level class for purity scoring:
    /// witnesses keep their own id, every other digit shares one id.
    pub fn instance_class(self, digit: u8) -> u8 {
        match self {
            ScenarioKind::Outlier => digit,
            _ if self.witnesses().contains(&digit) => digit,
            _ => u8::MAX,
        }
    }

    /// The bag labeling rule applied to latent instance labels.
    pub fn label(self, labels: &[u8]) -> BagTarget {
        match self {
            ScenarioKind::SingleDigit => BagTarget::Binary(labels.contains(&9)),
            ScenarioKind::MultiDigit => BagTarget::Binary(labels.contains(&3) && labels.contains(&6)),
            ScenarioKind::Counting => BagTarget::Count(labels.iter().filter(|&&l| l == 9).count() as u32),
            ScenarioKind::Outlier => BagTarget::Binary(labels.iter().any(|&l| l != labels[0])),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::SingleDigit => "single_digit",
            ScenarioKind::MultiDigit => "multi_digit",
            ScenarioKind::Counting => "counting",
            ScenarioKind::Outlier => "outlier",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_digit" => Ok(ScenarioKind::SingleDigit),
            "multi_digit" => Ok(ScenarioKind::MultiDigit),
            "counting" => Ok(ScenarioKind::Counting),
            "outlier" => Ok(ScenarioKind::Outlier),
            other => Err(Error::Contract(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub mean_cardinality: f64,
    pub std_cardinality: f64,
    pub n_bags: usize,
    pub seed: u64,
    /// Outlier instances per positive bag (outlier task only).
    pub outlier_count: usize,
}

impl ScenarioSpec {
    /// Scenario with the reference cardinality settings for its kind.
    pub fn standard(kind: ScenarioKind, n_bags: usize, seed: u64) -> Self {
        let (m, sigma) = match kind {
            ScenarioKind::SingleDigit => (10.0, 2.0),
            ScenarioKind::MultiDigit => (12.0, 2.0),
            ScenarioKind::Counting => (15.0, 0.0),
            ScenarioKind::Outlier => (6.0, 1.0),
        };
        Self {
            kind,
            mean_cardinality: m,
            std_cardinality: sigma,
            n_bags,
            seed,
            outlier_count: 1,
        }
    }

    pub fn with_cardinality(mut self, mean: f64, std: f64) -> Self {
        self.mean_cardinality = mean;
        self.std_cardinality = std;
        self
    }

    pub fn witnesses(&self) -> &'static [u8] {
        self.kind.witnesses()
    }
}

/// Shared pixel buffer of one instance.
pub type Pixels = Arc<[u8]>;

/// An ordered bag of images with bag-level supervision.
///
/// Latent instance labels travel with the bag so that evaluation can score
/// instance-level recovery; training code never reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    rows: usize,
    cols: usize,
    instances: Vec<Pixels>,
    instance_labels: Vec<u8>,
    target: Option<BagTarget>,
}

impl Bag {
    pub fn new(
        rows: usize,
        cols: usize,
        instances: Vec<Pixels>,
        instance_labels: Vec<u8>,
        target: Option<BagTarget>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Contract("a bag needs at least one instance".into()));
        }
        if instances.len() != instance_labels.len() {
            return Err(Error::Consistency(format!(
                "{} instances but {} instance labels",
                instances.len(),
                instance_labels.len()
            )));
        }
        if instances.iter().any(|p| p.len() != rows * cols) {
            return Err(Error::Consistency(format!("instance size differs from {rows}x{cols}")));
        }
        if let Some(BagTarget::Count(c)) = target {
            if c as usize > instances.len() {
                return Err(Error::Consistency(format!(
                    "count {c} exceeds cardinality {}",
                    instances.len()
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            instances,
            instance_labels,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn instances(&self) -> &[Pixels] {
        &self.instances
    }

    pub fn target(&self) -> Option<BagTarget> {
        self.target
    }

    /// Latent per-instance classes. Evaluation-only.
    pub fn latent_labels(&self) -> &[u8] {
        &self.instance_labels
    }

    /// Reorders instances (and their latent labels) by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            instances: order.iter().map(|&i| Arc::clone(&self.instances[i])).collect(),
            instance_labels: order.iter().map(|&i| self.instance_labels[i]).collect(),
            target: self.target,
        }
    }
}
