use std::sync::Arc;

use super::{Bag, BagTarget, InstancePool, Pixels, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// `round(Normal(mean, std))`, clamped below at `floor`.
pub fn sample_cardinality(mean: f64, std: f64, floor: usize, rng: &mut Rng) -> usize {
    assert!(mean >= 1.0, "mean cardinality must be at least 1");
    let draw = if std > 0.0 { rng.normal(mean, std) } else { mean };
    (draw.round().max(0.0) as usize).max(floor)
}

struct Sampler<'p> {
    pool: &'p InstancePool,
    by_class: [Vec<usize>; 10],
    images: Vec<Pixels>,
}

impl<'p> Sampler<'p> {
    fn new(pool: &'p InstancePool) -> Self {
        let images = (0..pool.len()).map(|i| Arc::from(pool.image(i))).collect();
        Self {
            pool,
            by_class: pool.by_class(),
            images,
        }
    }

    fn require(&self, classes: &[u8]) -> Result<()> {
        for &c in classes {
            if self.by_class[c as usize].is_empty() {
                return Err(Error::Generation(format!("pool has no instances of class {c}")));
            }
        }
        Ok(())
    }

    fn of_class(&self, class: u8, rng: &mut Rng) -> usize {
        let ids = &self.by_class[class as usize];
        ids[rng.below(ids.len())]
    }

    fn any(&self, rng: &mut Rng) -> usize {
        rng.below(self.pool.len())
    }

    fn excluding(&self, allowed: &[usize], rng: &mut Rng) -> usize {
        allowed[rng.below(allowed.len())]
    }

    fn indices_without(&self, excluded: &[u8]) -> Vec<usize> {
        (0..self.pool.len())
            .filter(|&i| !excluded.contains(&self.pool.labels()[i]))
            .collect()
    }

    fn bag(&self, ids: Vec<usize>, kind: ScenarioKind) -> Bag {
        let labels: Vec<u8> = ids.iter().map(|&i| self.pool.labels()[i]).collect();
        let target = kind.label(&labels);
        Bag::new(
            self.pool.rows(),
            self.pool.cols(),
            ids.iter().map(|&i| Arc::clone(&self.images[i])).collect(),
            labels,
            Some(target),
        )
        .expect("generated bag is consistent")
    }
}

/// Generates `spec.n_bags` bags. Binary scenarios are balanced: positives get
/// their witnesses injected, negatives are drawn with witnesses rejected.
pub fn make_bags(spec: &ScenarioSpec, pool: &InstancePool) -> Result<Vec<Bag>> {
    if pool.is_empty() {
        return Err(Error::Generation("empty instance pool".into()));
    }
    let s = Sampler::new(pool);
    let mut rng = Rng::labeled(spec.seed, "bags");
    let floor = spec.kind.min_cardinality();
    let draw_m = |rng: &mut Rng| sample_cardinality(spec.mean_cardinality, spec.std_cardinality, floor, rng);

    if spec.kind == ScenarioKind::Counting {
        return Ok((0..spec.n_bags)
            .map(|_| {
                let m = draw_m(&mut rng);
                let ids = (0..m).map(|_| s.any(&mut rng)).collect();
                s.bag(ids, spec.kind)
            })
            .collect());
    }

    let mut polarity: Vec<bool> = (0..spec.n_bags).map(|i| i < spec.n_bags.div_ceil(2)).collect();
    rng.shuffle(&mut polarity);

    let mut bags = Vec::with_capacity(spec.n_bags);
    match spec.kind {
        ScenarioKind::SingleDigit => {
            s.require(&[9])?;
            let negatives = s.indices_without(&[9]);
            if negatives.is_empty() {
                return Err(Error::Generation("pool has no non-witness instances".into()));
            }
            for &positive in &polarity {
                let m = draw_m(&mut rng);
                let ids = if positive {
                    let mut ids: Vec<usize> = (0..m).map(|_| s.any(&mut rng)).collect();
                    if !ids.iter().any(|&i| pool.labels()[i] == 9) {
                        let slot = rng.below(m);
                        ids[slot] = s.of_class(9, &mut rng);
                    }
                    ids
                } else {
                    (0..m).map(|_| s.excluding(&negatives, &mut rng)).collect()
                };
                bags.push(s.bag(ids, spec.kind));
            }
        }
        ScenarioKind::MultiDigit => {
            s.require(&[3, 6])?;
            let without = [s.indices_without(&[3]), s.indices_without(&[6])];
            for &positive in &polarity {
                let m = draw_m(&mut rng);
                let ids = if positive {
                    let mut ids: Vec<usize> = (0..m).map(|_| s.any(&mut rng)).collect();
                    inject_pair(&mut ids, pool, &s, &mut rng);
                    ids
                } else {
                    let allowed = &without[rng.below(2)];
                    (0..m).map(|_| s.excluding(allowed, &mut rng)).collect()
                };
                bags.push(s.bag(ids, spec.kind));
            }
        }
        ScenarioKind::Outlier => {
            let present: Vec<u8> = (0..10u8)
                .filter(|&c| !s.by_class[c as usize].is_empty())
                .collect();
            if present.len() < 2 {
                return Err(Error::Generation("outlier bags need at least two classes".into()));
            }
            let k = spec.outlier_count.max(1);
            for &positive in &polarity {
                let majority = present[rng.below(present.len())];
                let ids = if positive {
                    let m = draw_m(&mut rng).max(2 * k + 1);
                    let outlier = loop {
                        let c = present[rng.below(present.len())];
                        if c != majority {
                            break c;
                        }
                    };
                    let mut ids: Vec<usize> = (0..m - k).map(|_| s.of_class(majority, &mut rng)).collect();
                    ids.extend((0..k).map(|_| s.of_class(outlier, &mut rng)));
                    rng.shuffle(&mut ids);
                    ids
                } else {
                    let m = draw_m(&mut rng);
                    (0..m).map(|_| s.of_class(majority, &mut rng)).collect()
                };
                bags.push(s.bag(ids, spec.kind));
            }
        }
        ScenarioKind::Counting => unreachable!(),
    }
    Ok(bags)
}

/// Ensures at least one '3' and one '6' without overwriting the only copy of
/// the other witness.
fn inject_pair(ids: &mut [usize], pool: &InstancePool, s: &Sampler<'_>, rng: &mut Rng) {
    for (need, other) in [(3u8, 6u8), (6, 3)] {
        let labels: Vec<u8> = ids.iter().map(|&i| pool.labels()[i]).collect();
        if labels.contains(&need) {
            continue;
        }
        let other_count = labels.iter().filter(|&&l| l == other).count();
        let slots: Vec<usize> = (0..ids.len())
            .filter(|&p| !(labels[p] == other && other_count == 1))
            .collect();
        let slot = slots[rng.below(slots.len())];
        ids[slot] = s.of_class(need, rng);
    }
}

/// Multi-digit bags of exact cardinality `m` holding a single witness pair:
/// positives contain exactly one '3' and one '6', negatives exactly one of
/// the two. Used by the cardinality generalization protocol.
pub fn make_pair_bags(m: usize, n_bags: usize, pool: &InstancePool, seed: u64) -> Result<Vec<Bag>> {
    if m < 2 {
        return Err(Error::Generation("pair bags need cardinality >= 2".into()));
    }
    let s = Sampler::new(pool);
    s.require(&[3, 6])?;
    let fillers = s.indices_without(&[3, 6]);
    if fillers.is_empty() {
        return Err(Error::Generation("pool has no non-witness instances".into()));
    }
    let mut rng = Rng::labeled(seed, "pair-bags");
    let mut polarity: Vec<bool> = (0..n_bags).map(|i| i < n_bags.div_ceil(2)).collect();
    rng.shuffle(&mut polarity);
    Ok(polarity
        .into_iter()
        .map(|positive| {
            let witnesses: Vec<u8> = if positive {
                vec![3, 6]
            } else {
                vec![if rng.below(2) == 0 { 3 } else { 6 }]
            };
            let mut ids: Vec<usize> = (0..m - witnesses.len())
                .map(|_| s.excluding(&fillers, &mut rng))
                .collect();
            ids.extend(witnesses.iter().map(|&w| s.of_class(w, &mut rng)));
            rng.shuffle(&mut ids);
            s.bag(ids, ScenarioKind::MultiDigit)
        })
        .collect())
}

/// Same bag under a fresh random instance order.
pub fn shuffle_bag(bag: &Bag, rng: &mut Rng) -> Bag {
    bag.permuted(&rng.permutation(bag.len()))
}

/// One unlabeled cardinality-1 bag per instance, in order.
pub fn singletons(bag: &Bag) -> Vec<Bag> {
    bag.instances()
        .iter()
        .zip(bag.latent_labels())
        .map(|(img, &label)| {
            Bag::new(bag.rows(), bag.cols(), vec![Arc::clone(img)], vec![label], None)
                .expect("singleton is consistent")
        })
        .collect()
}

impl BagTarget {
    pub fn is_positive(self) -> bool {
        matches!(self, BagTarget::Binary(true))
    }
}
