//! Frequency profiles over release regions and top-K neighbor selection.

use serde::{Deserialize, Serialize};

use crate::forest::LeafRule;
use crate::varprio::{Membership, ReleaseIndex};
use crate::{Error, Result};

/// Co-occurrence of one training point with a query across the release
/// regions of the rules containing the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityProfile {
    /// `counts[k]`: rules whose release on the k-th signal feature holds the point.
    pub counts: Vec<u32>,
    pub total: u64,
    pub freqs: Vec<f64>,
    /// Gini dispersion Σ p(1−p).
    pub dispersion: f64,
    /// `total · dispersion`.
    pub weight: f64,
}

impl ProximityProfile {
    pub fn from_counts(counts: Vec<u32>) -> Self {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let (dispersion, weight) = gini_weight(total, counts.iter().map(|&c| c as u64));
        let freqs = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self {
            counts,
            total,
            freqs,
            dispersion,
            weight,
        }
    }
}

/// Dispersion and weight from integer counts. Working from the integer sum of
/// squares keeps Σp exactly 1 in effect and W exactly `total · S`.
fn gini_weight(total: u64, counts: impl Iterator<Item = u64>) -> (f64, f64) {
    if total == 0 {
        return (0.0, 0.0);
    }
    let sumsq: u64 = counts.map(|c| c * c).sum();
    let t2 = (total * total) as f64;
    let dispersion = (t2 - sumsq as f64) / t2;
    (dispersion, total as f64 * dispersion)
}

/// Per-query counting state: points inside a rule count once for every
/// signal feature, points outside by one bound count for that feature only.
pub(crate) struct Counter<'a> {
    index: &'a ReleaseIndex,
    /// Position of each feature in the signal set.
    slot: &'a [Option<usize>],
    m: usize,
    relevant: Vec<bool>,
    region: Vec<u32>,
    released: Vec<u32>,
}

impl<'a> Counter<'a> {
    pub(crate) fn new(index: &'a ReleaseIndex, slot: &'a [Option<usize>], m: usize) -> Self {
        let n = index.n();
        Self {
            index,
            slot,
            m,
            relevant: slot.iter().map(Option::is_some).collect(),
            region: vec![0; n],
            released: vec![0; n * m],
        }
    }

    pub(crate) fn add_rule(&mut self, rule: &LeafRule) {
        let Self {
            index,
            slot,
            m,
            relevant,
            region,
            released,
        } = self;
        index.for_each_member_on(rule, relevant, |i, how| match how {
            Membership::Region => region[i] += 1,
            Membership::ReleasedOn(f) => {
                if let Some(k) = slot[f] {
                    released[i * *m + k] += 1;
                }
            }
        });
    }

    pub(crate) fn counts(&self, i: usize) -> impl Iterator<Item = u32> + '_ {
        let base = self.region[i];
        self.released[i * self.m..(i + 1) * self.m]
            .iter()
            .map(move |&r| base + r)
    }

    pub(crate) fn profiles(&self) -> Vec<ProximityProfile> {
        (0..self.index.n())
            .map(|i| ProximityProfile::from_counts(self.counts(i).collect()))
            .collect()
    }

    /// (index, total, weight) for every point with a nonzero total.
    pub(crate) fn candidates(&self, exclude: Option<usize>) -> Vec<Candidate> {
        let mut out = Vec::new();
        for i in 0..self.index.n() {
            if Some(i) == exclude {
                continue;
            }
            let total: u64 = self.counts(i).map(|c| c as u64).sum();
            if total == 0 {
                continue;
            }
            let (_, weight) = gini_weight(total, self.counts(i).map(|c| c as u64));
            out.push(Candidate {
                index: i,
                total,
                weight,
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Candidate {
    pub index: usize,
    pub total: u64,
    pub weight: f64,
}

/// Profiles of every training point against the given rules.
pub fn profiles_from_rules(
    rules: &[LeafRule],
    index: &ReleaseIndex,
    signal: &[usize],
) -> Result<Vec<ProximityProfile>> {
    let slot = signal_slots(signal, index.d())?;
    let mut counter = Counter::new(index, &slot, signal.len());
    for rule in rules {
        counter.add_rule(rule);
    }
    Ok(counter.profiles())
}

pub(crate) fn signal_slots(signal: &[usize], d: usize) -> Result<Vec<Option<usize>>> {
    if signal.is_empty() {
        return Err(Error::InvalidParameter("empty signal set".into()));
    }
    let mut slot = vec![None; d];
    for (k, &s) in signal.iter().enumerate() {
        if s >= d || slot[s].is_some() {
            return Err(Error::InvalidParameter(format!("bad signal feature {s}")));
        }
        slot[s] = Some(k);
    }
    Ok(slot)
}

/// Neighbors chosen for a query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub indices: Vec<usize>,
    /// The K that was asked for; `indices` is shorter when fewer training
    /// points co-occur with the query.
    pub requested: usize,
}

impl Neighborhood {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// The `k` profiles with the largest weight among those with a nonzero total.
/// Ties prefer the larger total, then the lower index.
pub fn select_neighborhood(profiles: &[ProximityProfile], k: usize) -> Result<Neighborhood> {
    let candidates = profiles
        .iter()
        .enumerate()
        .filter(|(_, p)| p.total > 0)
        .map(|(index, p)| Candidate {
            index,
            total: p.total,
            weight: p.weight,
        })
        .collect();
    top_k(candidates, k)
}

pub(crate) fn top_k(mut c: Vec<Candidate>, k: usize) -> Result<Neighborhood> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    if c.is_empty() {
        return Err(Error::NoCooccurrence);
    }
    let order = |a: &Candidate, b: &Candidate| {
        b.weight
            .total_cmp(&a.weight)
            .then(b.total.cmp(&a.total))
            .then(a.index.cmp(&b.index))
    };
    if c.len() > k {
        c.select_nth_unstable_by(k - 1, order);
        c.truncate(k);
    }
    c.sort_unstable_by(order);
    Ok(Neighborhood {
        indices: c.into_iter().map(|c| c.index).collect(),
        requested: k,
    })
}
