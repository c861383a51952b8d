//! Terminal-node rules as hyperrectangles.
//!
//! A split sends `x[f] <= t` left, so every interval here is half open:
//! a point is inside when `lower < x <= upper` on each coordinate.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub feature: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Constraint {
    #[inline]
    pub fn admits(&self, v: f64) -> bool {
        self.lower < v && v <= self.upper
    }
}

/// Sparse form of a terminal node: only the features split on along the path,
/// each appearing once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRule {
    pub constraints: Vec<Constraint>,
    /// Mean bootstrap response in the node.
    pub mean: f64,
    pub count: usize,
}

impl LeafRule {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.constraints.iter().all(|c| c.admits(x[c.feature]))
    }

    pub fn constrains(&self, feature: usize) -> bool {
        self.constraints.iter().any(|c| c.feature == feature)
    }

    pub fn to_region(&self, d: usize) -> RuleRegion {
        let mut lower = vec![f64::NEG_INFINITY; d];
        let mut upper = vec![f64::INFINITY; d];
        for c in &self.constraints {
            lower[c.feature] = c.lower;
            upper[c.feature] = c.upper;
        }
        RuleRegion {
            lower,
            upper,
            node_mean: self.mean,
            node_count: self.count,
        }
    }
}

/// Dense per-feature bounds of one terminal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub node_mean: f64,
    pub node_count: usize,
}

impl RuleRegion {
    pub fn unbounded(d: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; d],
            upper: vec![f64::INFINITY; d],
            node_mean: 0.0,
            node_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| lo < v && v <= hi)
    }

    /// Same region with the bound on `feature` removed.
    pub fn release(&self, feature: usize) -> Result<RuleRegion> {
        if feature >= self.dim() {
            return Err(Error::InvalidParameter(format!(
                "feature {feature} out of range for dimension {}",
                self.dim()
            )));
        }
        let mut out = self.clone();
        out.lower[feature] = f64::NEG_INFINITY;
        out.upper[feature] = f64::INFINITY;
        Ok(out)
    }
}
