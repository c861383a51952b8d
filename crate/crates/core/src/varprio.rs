//! Variable prioritization through release regions.
//!
//! Releasing feature `s` from a terminal-node rule drops that coordinate's
//! bound and keeps every other bound. A feature matters when the mean response
//! inside the rule moves once its bound is released. The same release
//! machinery drives frequency profiling in [`crate::outpro`].

use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::forest::{Forest, LeafRule, RuleRegion};
use crate::{Error, Result};

/// `region` with the bound on `feature` removed.
pub fn release(region: &RuleRegion, feature: usize) -> Result<RuleRegion> {
    region.release(feature)
}

/// How a training point relates to a rule and its release regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    /// Inside the rule, hence inside every release region.
    Region,
    /// Violates only the bound on this feature, so it lies in exactly one
    /// release region: the one that drops that bound.
    ReleasedOn(usize),
}

/// Training matrix with per-feature sorted columns, for enumerating the
/// points that sit in at least one release region of a rule.
#[derive(Debug, Clone)]
pub struct ReleaseIndex {
    n: usize,
    d: usize,
    data: Vec<f64>,
    sorted_vals: Vec<Vec<f64>>,
    sorted_rows: Vec<Vec<u32>>,
}

impl ReleaseIndex {
    pub fn new(x: &Array2<f64>) -> Self {
        let (n, d) = x.dim();
        let data = x.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
        let mut sorted_vals = Vec::with_capacity(d);
        let mut sorted_rows = Vec::with_capacity(d);
        for j in 0..d {
            let mut rows: Vec<u32> = (0..n as u32).collect();
            rows.sort_by(|&a, &b| data[a as usize * d + j].total_cmp(&data[b as usize * d + j]));
            sorted_vals.push(rows.iter().map(|&i| data[i as usize * d + j]).collect());
            sorted_rows.push(rows);
        }
        Self {
            n,
            d,
            data,
            sorted_vals,
            sorted_rows,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    fn value(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.d + j]
    }

    /// Visits every training point lying in `rule` or in exactly one of its
    /// release regions. Points violating two or more bounds are skipped.
    pub fn for_each_member<F: FnMut(usize, Membership)>(&self, rule: &LeafRule, visit: F) {
        self.scan(rule, None, visit)
    }

    /// Like [`ReleaseIndex::for_each_member`] but only reports releases on
    /// features with `relevant[f]` set.
    pub fn for_each_member_on<F: FnMut(usize, Membership)>(&self, rule: &LeafRule, relevant: &[bool], visit: F) {
        self.scan(rule, Some(relevant), visit)
    }

    /// Only points inside the two most selective bounds can violate at most
    /// one bound, so the scan touches those two sorted ranges. When some bound
    /// may not be released, every reported point satisfies it and its range
    /// alone is scanned when that range is the cheaper one.
    fn scan<F: FnMut(usize, Membership)>(&self, rule: &LeafRule, relevant: Option<&[bool]>, mut visit: F) {
        let rel = |f: usize| relevant.is_none_or(|r| r[f]);
        let cs = &rule.constraints;
        match cs.len() {
            0 => (0..self.n).for_each(|i| visit(i, Membership::Region)),
            1 => {
                let c = cs[0];
                let released = rel(c.feature);
                for i in 0..self.n {
                    if c.admits(self.value(i, c.feature)) {
                        visit(i, Membership::Region)
                    } else if released {
                        visit(i, Membership::ReleasedOn(c.feature))
                    }
                }
            }
            _ => {
                let ranges: Vec<(usize, usize)> = cs
                    .iter()
                    .map(|c| {
                        let vals = &self.sorted_vals[c.feature];
                        let lo = vals.partition_point(|&v| v <= c.lower);
                        let hi = vals.partition_point(|&v| v <= c.upper);
                        (lo, hi.max(lo))
                    })
                    .collect();
                let size = |k: usize| ranges[k].1 - ranges[k].0;
                let smallest = (0..cs.len()).min_by_key(|&k| size(k)).expect("two bounds");
                let second = (0..cs.len())
                    .filter(|&k| k != smallest)
                    .min_by_key(|&k| size(k))
                    .expect("two bounds");
                let fixed = (0..cs.len())
                    .filter(|&k| !rel(cs[k].feature))
                    .min_by_key(|&k| size(k))
                    .filter(|&k| size(k) <= size(smallest) + size(second));
                let a = fixed.unwrap_or(smallest);

                // Points admitted by bound `a`: count violations among the rest.
                let rows_a = &self.sorted_rows[cs[a].feature][ranges[a].0..ranges[a].1];
                'outer: for &i in rows_a {
                    let i = i as usize;
                    let mut violated = None;
                    for (k, c) in cs.iter().enumerate() {
                        if k != a && !c.admits(self.value(i, c.feature)) {
                            if violated.is_some() {
                                continue 'outer;
                            }
                            violated = Some(c.feature);
                        }
                    }
                    match violated {
                        None => visit(i, Membership::Region),
                        Some(f) if rel(f) => visit(i, Membership::ReleasedOn(f)),
                        Some(_) => {}
                    }
                }
                if fixed.is_some() {
                    return;
                }

                // Points violating `a` but admitted by `b`: in range only if
                // every bound other than `a` holds.
                let b = second;
                let ca = cs[a];
                let rows_b = &self.sorted_rows[cs[b].feature][ranges[b].0..ranges[b].1];
                for &i in rows_b {
                    let i = i as usize;
                    if ca.admits(self.value(i, ca.feature)) {
                        continue;
                    }
                    let ok = cs
                        .iter()
                        .enumerate()
                        .all(|(k, c)| k == a || k == b || c.admits(self.value(i, c.feature)));
                    if ok {
                        visit(i, Membership::ReleasedOn(ca.feature));
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarPrioParams {
    /// Terminal nodes sampled (without replacement) across the forest.
    pub max_rules: usize,
    pub policy: SelectionPolicy,
    pub seed: u64,
}

impl Default for VarPrioParams {
    fn default() -> Self {
        Self {
            max_rules: 1000,
            policy: SelectionPolicy::MeanPositive,
            seed: 0,
        }
    }
}

/// Release-region importance of every feature.
///
/// For each sampled rule and each feature it constrains, the term is
/// `|mean_y(R) − mean_y(R released on j)|` over training points, weighted by the
/// number of training points in R. A feature's score is the weighted average
/// of its terms, or 0 when no sampled rule constrains it.
pub fn compute_importance(
    forest: &Forest,
    x: &Array2<f64>,
    y: &[f64],
    max_rules: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let index = ReleaseIndex::new(x);
    compute_importance_with(forest, &index, y, max_rules, seed)
}

pub(crate) fn compute_importance_with(
    forest: &Forest,
    index: &ReleaseIndex,
    y: &[f64],
    max_rules: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = forest.n_features();
    if index.d() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: index.d(),
        });
    }
    if y.len() != index.n() {
        return Err(Error::InvalidParameter("response length differs from row count".into()));
    }
    let rules = forest.all_leaf_rules();
    let take = max_rules.min(rules.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, rules.len(), take).into_vec();
    picked.sort_unstable();

    // (feature, weight, |mean shift|) per constrained feature of each rule.
    let terms: Vec<Vec<(usize, f64, f64)>> = picked.par_iter().map(|&r| rule_terms(&rules[r], index, y)).collect();

    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for (f, w, shift) in terms.into_iter().flatten() {
        num[f] += w * shift;
        den[f] += w;
    }
    Ok(num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
        .collect())
}

fn rule_terms(rule: &LeafRule, index: &ReleaseIndex, y: &[f64]) -> Vec<(usize, f64, f64)> {
    let m = rule.constraints.len();
    if m == 0 {
        return Vec::new();
    }
    let (mut in_sum, mut in_cnt) = (0.0, 0usize);
    let mut rel_sum = vec![0.0; m];
    let mut rel_cnt = vec![0usize; m];
    index.for_each_member(rule, |i, how| match how {
        Membership::Region => {
            in_sum += y[i];
            in_cnt += 1;
        }
        Membership::ReleasedOn(f) => {
            let k = rule.constraints.iter().position(|c| c.feature == f).unwrap();
            rel_sum[k] += y[i];
            rel_cnt[k] += 1;
        }
    });
    if in_cnt == 0 {
        return Vec::new();
    }
    let in_mean = in_sum / in_cnt as f64;
    rule.constraints
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let rel_mean = (in_sum + rel_sum[k]) / (in_cnt + rel_cnt[k]) as f64;
            (c.feature, in_cnt as f64, (in_mean - rel_mean).abs())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum SelectionPolicy {
    /// Keep features scoring at least the mean of the positive scores.
    MeanPositive,
    /// Keep the k highest positive scores.
    TopK(usize),
    /// Keep positive scores at or above this quantile of the positive scores.
    Quantile(f64),
}

/// Signal features and their normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportancePlan {
    /// Ascending feature indices.
    pub signal: Vec<usize>,
    /// Aligned with `signal`; strictly positive and summing to 1.
    pub weights: Vec<f64>,
    pub raw_scores: Vec<f64>,
    /// How the signal set was chosen, carried into output metadata.
    pub policy: String,
}

impl ImportancePlan {
    /// All features with equal weight; the fallback when nothing scores positive.
    pub fn uniform(d: usize) -> Self {
        Self {
            signal: (0..d).collect(),
            weights: vec![1.0 / d as f64; d],
            raw_scores: vec![0.0; d],
            policy: "uniform-fallback".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    pub fn weight_of(&self, feature: usize) -> Option<f64> {
        self.signal.iter().position(|&s| s == feature).map(|k| self.weights[k])
    }

    /// One row per feature: name, raw score, weight (0 when not selected), selected flag.
    pub fn write_csv(&self, names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["feature", "raw_score", "weight", "selected"])?;
        for (j, name) in names.iter().enumerate() {
            let weight = self.weight_of(j);
            w.write_record([
                name.clone(),
                self.raw_scores.get(j).copied().unwrap_or(0.0).to_string(),
                weight.unwrap_or(0.0).to_string(),
                weight.is_some().to_string(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn select_signal(raw_scores: &[f64], policy: SelectionPolicy) -> Result<ImportancePlan> {
    let positive: Vec<(usize, f64)> = raw_scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, s)| *s > 0.0)
        .collect();
    if positive.is_empty() {
        return Err(Error::NoSignal);
    }
    let mut signal: Vec<usize> = match policy {
        SelectionPolicy::MeanPositive => {
            let mean = positive.iter().map(|p| p.1).sum::<f64>() / positive.len() as f64;
            let cut = mean * (1.0 - 1e-12);
            positive.iter().filter(|p| p.1 >= cut).map(|p| p.0).collect()
        }
        SelectionPolicy::TopK(k) => {
            if k == 0 {
                return Err(Error::InvalidParameter("top-k selection needs k ≥ 1".into()));
            }
            let mut order = positive.clone();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            order.into_iter().take(k).map(|p| p.0).collect()
        }
        SelectionPolicy::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidParameter(format!("quantile {q} outside [0,1]")));
            }
            let mut vals: Vec<f64> = positive.iter().map(|p| p.1).collect();
            vals.sort_by(f64::total_cmp);
            let k = ((q * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
            let cut = vals[k - 1];
            positive.iter().filter(|p| p.1 >= cut).map(|p| p.0).collect()
        }
    };
    signal.sort_unstable();
    let total: f64 = signal.iter().map(|&s| raw_scores[s]).sum();
    let weights = signal.iter().map(|&s| raw_scores[s] / total).collect();
    let policy = match policy {
        SelectionPolicy::MeanPositive => "mean-positive".to_string(),
        SelectionPolicy::TopK(k) => format!("top-{k}"),
        SelectionPolicy::Quantile(q) => format!("quantile-{q}"),
    };
    Ok(ImportancePlan {
        signal,
        weights,
        raw_scores: raw_scores.to_vec(),
        policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{Constraint, ForestParams, Node, Tree};
    use proptest::prelude::*;
    use rand::Rng;

    fn region(d: usize, bounds: &[(usize, f64, f64)]) -> RuleRegion {
        let mut r = RuleRegion::unbounded(d);
        for &(j, lo, hi) in bounds {
            r.lower[j] = lo;
            r.upper[j] = hi;
        }
        r
    }

    #[test]
    fn releasing_the_only_bound_gives_the_full_space() {
        let r = region(3, &[(1, -1.0, 2.0)]);
        assert_eq!(release(&r, 1).unwrap(), RuleRegion::unbounded(3));
        assert_eq!(release(&r, 0).unwrap(), r);
        assert!(release(&r, 3).is_err());
    }

    #[test]
    fn cube_released_on_first_axis_is_unbounded_only_there() {
        let cube = region(3, &[(0, -1.0, 1.0), (1, -1.0, 1.0), (2, -1.0, 1.0)]);
        let r = release(&cube, 0).unwrap();
        assert_eq!(r.lower, vec![f64::NEG_INFINITY, -1.0, -1.0]);
        assert_eq!(r.upper, vec![f64::INFINITY, 1.0, 1.0]);
    }

    #[test]
    fn release_contains_original_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = region(4, &[(0, -0.5, 0.4), (2, 0.1, 0.9), (3, -2.0, 0.0)]);
        for s in 0..4 {
            let rel = release(&r, s).unwrap();
            assert_eq!(release(&rel, s).unwrap(), rel);
            for _ in 0..10_000 {
                let p: Vec<f64> = (0..4).map(|_| rng.random_range(-2.5..1.5)).collect();
                if r.contains(&p) {
                    assert!(rel.contains(&p));
                }
            }
        }
    }

    #[test]
    fn index_enumeration_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array2::from_shape_fn((300, 4), |_| rng.random_range(-1.0..1.0));
        let index = ReleaseIndex::new(&x);
        for trial in 0..200 {
            let m = trial % 5;
            let mut constraints = Vec::new();
            for f in rand::seq::index::sample(&mut rng, 4, m.min(4)) {
                let a: f64 = rng.random_range(-1.2..1.0);
                let b: f64 = rng.random_range(a..1.2);
                let lower = if rng.random_bool(0.2) { f64::NEG_INFINITY } else { a };
                let upper = if rng.random_bool(0.2) { f64::INFINITY } else { b };
                constraints.push(Constraint {
                    feature: f,
                    lower,
                    upper,
                });
            }
            let rule = LeafRule {
                constraints,
                mean: 0.0,
                count: 1,
            };
            let relevant: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
            let mut got = vec![None; 300];
            index.for_each_member(&rule, |i, how| {
                assert!(got[i].is_none(), "visited twice");
                got[i] = Some(how);
            });
            let mut got_on = vec![None; 300];
            index.for_each_member_on(&rule, &relevant, |i, how| {
                assert!(got_on[i].is_none(), "visited twice");
                got_on[i] = Some(how);
            });
            for i in 0..300 {
                let viol: Vec<usize> = rule
                    .constraints
                    .iter()
                    .filter(|c| !c.admits(x[[i, c.feature]]))
                    .map(|c| c.feature)
                    .collect();
                let want = match viol.len() {
                    0 => Some(Membership::Region),
                    1 => Some(Membership::ReleasedOn(viol[0])),
                    _ => None,
                };
                assert_eq!(got[i], want);
                let want_on = want.filter(|w| match w {
                    Membership::Region => true,
                    Membership::ReleasedOn(f) => relevant[*f],
                });
                assert_eq!(got_on[i], want_on);
            }
        }
    }

    #[test]
    fn selection_examples() {
        let p = select_signal(&[4.0, 4.0, 0.0, 0.0], SelectionPolicy::MeanPositive).unwrap();
        assert_eq!(p.signal, vec![0, 1]);
        assert_eq!(p.weights, vec![0.5, 0.5]);

        let p = select_signal(&[9.0, 1.0, 0.0, 0.0, 0.0], SelectionPolicy::MeanPositive).unwrap();
        assert_eq!(p.signal, vec![0]);
        assert_eq!(p.weights, vec![1.0]);

        let p = select_signal(&[1.0, 3.0, 2.0, -1.0], SelectionPolicy::TopK(2)).unwrap();
        assert_eq!(p.signal, vec![1, 2]);
        let p = select_signal(&[1.0, 3.0, 2.0, -1.0], SelectionPolicy::Quantile(0.5)).unwrap();
        assert_eq!(p.signal, vec![1, 2]);
    }

    #[test]
    fn nonpositive_scores_ask_for_the_fallback() {
        assert!(matches!(
            select_signal(&[0.0, -1.0], SelectionPolicy::MeanPositive),
            Err(Error::NoSignal)
        ));
        let u = ImportancePlan::uniform(4);
        assert_eq!(u.weights.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn unconstrained_feature_scores_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((200, 3), |(_, j)| if j == 1 { 0.0 } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..200).map(|i| 5.0 * x[[i, 0]] + x[[i, 2]]).collect();
        let f = Forest::fit(
            &x,
            &y,
            &ForestParams {
                ntree: 30,
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let s = compute_importance(&f, &x, &y, 1000, 3).unwrap();
        assert_eq!(s[1], 0.0);
        assert!(s[0] > s[2]);
    }

    #[test]
    fn importance_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((150, 4), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..150)
            .map(|i| 3.0 * x[[i, 0]] - 2.0 * x[[i, 3]] + x[[i, 1]] * x[[i, 2]])
            .collect();
        let perm = [2usize, 0, 3, 1]; // new column k holds old column perm[k]
        let xp = Array2::from_shape_fn((150, 4), |(i, k)| x[[i, perm[k]]]);
        let forest = Forest::fit(
            &x,
            &y,
            &ForestParams {
                ntree: 20,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let mut inv = [0usize; 4];
        for (k, &f) in perm.iter().enumerate() {
            inv[f] = k;
        }
        // The same trees with features relabeled to match the permuted columns.
        let relabeled: Vec<Tree> = forest
            .trees()
            .iter()
            .map(|t| {
                let nodes = t
                    .nodes()
                    .iter()
                    .map(|n| match *n {
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => Node::Split {
                            feature: inv[feature],
                            threshold,
                            left,
                            right,
                        },
                        ref leaf => leaf.clone(),
                    })
                    .collect();
                Tree::from_nodes(nodes, t.oob().to_vec())
            })
            .collect();
        let permuted = Forest::from_trees(relabeled, 4).unwrap();
        let a = compute_importance(&forest, &x, &y, 500, 1).unwrap();
        let b = compute_importance(&permuted, &xp, &y, 500, 1).unwrap();
        for k in 0..4 {
            assert_eq!(b[k], a[perm[k]]);
        }
    }

    proptest! {
        #[test]
        fn weights_are_positive_and_normalized(scores in proptest::collection::vec(-1.0f64..10.0, 1..30)) {
            prop_assume!(scores.iter().any(|s| *s > 0.0));
            for policy in [SelectionPolicy::MeanPositive, SelectionPolicy::TopK(3), SelectionPolicy::Quantile(0.7)] {
                let p = select_signal(&scores, policy).unwrap();
                prop_assert!(!p.signal.is_empty());
                prop_assert!(p.weights.iter().all(|w| *w > 0.0));
                prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn plan_is_scale_invariant(scores in proptest::collection::vec(0.0f64..10.0, 2..20), c in 1e-3f64..1e3, e in -20i32..20) {
            prop_assume!(scores.iter().any(|s| *s > 0.0));
            let base = select_signal(&scores, SelectionPolicy::MeanPositive).unwrap();
            // Powers of two scale exactly, so the plan must be bit-identical.
            let two = 2f64.powi(e);
            let exact: Vec<f64> = scores.iter().map(|s| s * two).collect();
            let p = select_signal(&exact, SelectionPolicy::MeanPositive).unwrap();
            prop_assert_eq!(&p.signal, &base.signal);
            prop_assert_eq!(&p.weights, &base.weights);
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            let p = select_signal(&scaled, SelectionPolicy::MeanPositive).unwrap();
            prop_assert_eq!(&p.signal, &base.signal);
            for (a, b) in p.weights.iter().zip(&base.weights) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }
}
