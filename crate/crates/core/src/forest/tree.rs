//! CART regression tree grown on a bootstrap sample.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rules::{Constraint, LeafRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
        /// Bootstrap samples (with multiplicity) that reached the leaf.
        count: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    /// Training rows not drawn into this tree's bootstrap sample, ascending.
    oob: Vec<u32>,
}

pub(crate) struct GrowParams {
    pub mtry: usize,
    pub min_node_size: usize,
}

impl Tree {
    /// A single-leaf tree, mostly useful in tests.
    pub fn leaf(value: f64, count: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, count }],
            oob: Vec::new(),
        }
    }

    pub fn from_nodes(nodes: Vec<Node>, oob: Vec<u32>) -> Self {
        Self { nodes, oob }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn oob(&self) -> &[u32] {
        &self.oob
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    /// The terminal-node rule for `x`: the conjunction of split conditions on
    /// its root-to-leaf path, one interval per constrained feature.
    pub fn rule_for(&self, x: &[f64]) -> LeafRule {
        let mut constraints: Vec<Constraint> = Vec::new();
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, count } => {
                    return LeafRule {
                        constraints,
                        mean: value,
                        count,
                    }
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let goes_left = x[feature] <= threshold;
                    tighten(&mut constraints, feature, threshold, goes_left);
                    at = if goes_left { left } else { right };
                }
            }
        }
    }

    /// Every terminal-node rule of the tree, in depth-first order.
    pub fn leaf_rules(&self) -> Vec<LeafRule> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::<Constraint>::new())];
        while let Some((at, constraints)) = stack.pop() {
            match self.nodes[at] {
                Node::Leaf { value, count } => out.push(LeafRule {
                    constraints,
                    mean: value,
                    count,
                }),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let mut r = constraints.clone();
                    tighten(&mut r, feature, threshold, false);
                    stack.push((right, r));
                    let mut l = constraints;
                    tighten(&mut l, feature, threshold, true);
                    stack.push((left, l));
                }
            }
        }
        out
    }

    pub fn uses_feature(&self, j: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, Node::Split { feature, .. } if *feature == j))
    }

    /// Grows a tree on `sample` (bootstrap row indices, with repeats).
    pub(crate) fn grow<R: Rng>(
        x: &Array2<f64>,
        y: &[f64],
        sample: Vec<usize>,
        oob: Vec<u32>,
        params: &GrowParams,
        rng: &mut R,
    ) -> Self {
        let d = x.ncols();
        let data = x.as_slice().expect("standard layout");
        let mut nodes = vec![Node::Leaf { value: 0.0, count: 0 }];
        let mut stack = vec![(0usize, sample)];
        let mut buf: Vec<(f64, f64)> = Vec::new();

        while let Some((at, idx)) = stack.pop() {
            let m = idx.len();
            let sum: f64 = idx.iter().map(|&i| y[i]).sum();
            let leaf = Node::Leaf {
                value: sum / m as f64,
                count: m,
            };
            if m < 2 * params.min_node_size {
                nodes[at] = leaf;
                continue;
            }
            let mut features = index::sample(rng, d, params.mtry).into_vec();
            features.sort_unstable();
            let Some((feature, threshold)) =
                best_split(data, d, y, &idx, &features, params.min_node_size, sum, &mut buf)
            else {
                nodes[at] = leaf;
                continue;
            };
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
                idx.into_iter().partition(|&i| data[i * d + feature] <= threshold);
            let left = nodes.len();
            nodes.push(Node::Leaf { value: 0.0, count: 0 });
            let right = nodes.len();
            nodes.push(Node::Leaf { value: 0.0, count: 0 });
            nodes[at] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
            stack.push((right, right_idx));
            stack.push((left, left_idx));
        }
        Self { nodes, oob }
    }
}

fn tighten(constraints: &mut Vec<Constraint>, feature: usize, threshold: f64, goes_left: bool) {
    let c = match constraints.iter_mut().find(|c| c.feature == feature) {
        Some(c) => c,
        None => {
            constraints.push(Constraint {
                feature,
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
            });
            constraints.last_mut().unwrap()
        }
    };
    if goes_left {
        c.upper = c.upper.min(threshold);
    } else {
        c.lower = c.lower.max(threshold);
    }
}

/// Split minimizing the summed within-child squared error over the candidate
/// features. Thresholds sit at midpoints of consecutive distinct values and
/// both children keep at least `min_leaf` samples. Exact ties keep the lowest
/// feature index, then the lowest threshold.
#[allow(clippy::too_many_arguments)]
fn best_split(
    data: &[f64],
    d: usize,
    y: &[f64],
    idx: &[usize],
    features: &[usize],
    min_leaf: usize,
    total: f64,
    buf: &mut Vec<(f64, f64)>,
) -> Option<(usize, f64)> {
    let m = idx.len();
    let parent = total * total / m as f64;
    let sumsq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    let tol = 1e-12 * sumsq.max(1.0);
    let mut best: Option<(f64, usize, f64)> = None;

    for &f in features {
        buf.clear();
        buf.extend(idx.iter().map(|&i| (data[i * d + f], y[i])));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        if buf[0].0 == buf[m - 1].0 {
            continue;
        }
        let mut left_sum = 0.0;
        for k in 1..m {
            left_sum += buf[k - 1].1;
            if k < min_leaf || m - k < min_leaf || buf[k - 1].0 == buf[k].0 {
                continue;
            }
            let right_sum = total - left_sum;
            let proxy = left_sum * left_sum / k as f64 + right_sum * right_sum / (m - k) as f64;
            if best.is_none_or(|(b, _, _)| proxy > b) {
                let (lo, hi) = (buf[k - 1].0, buf[k].0);
                let mut t = 0.5 * (lo + hi);
                if t >= hi {
                    t = lo;
                }
                best = Some((proxy, f, t));
            }
        }
    }
    match best {
        Some((proxy, f, t)) if proxy - parent > tol => Some((f, t)),
        _ => None,
    }
}
