//! Regression random forest with terminal-node rule extraction.
//!
//! Trees are CART regression trees grown on bootstrap samples; each split
//! considers `mtry` randomly drawn features. Every tree draws from its own
//! ChaCha stream keyed by (seed, tree index), so a fit is reproducible
//! regardless of how trees are scheduled across threads.

mod importance;
mod rules;
mod tree;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use importance::{permutation_importance, top_features};
pub use rules::{Constraint, LeafRule, RuleRegion};
pub use tree::{Node, Tree};

use crate::data::row_slice;
use crate::{Error, Result};
use tree::GrowParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub ntree: usize,
    /// Features tried per split; `None` means ⌈d/3⌉.
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            ntree: 500,
            mtry: None,
            min_node_size: 5,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, d: usize) -> usize {
        self.mtry.unwrap_or_else(|| d.div_ceil(3)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
    mtry: usize,
    min_node_size: usize,
    seed: u64,
    oob_predictions: Vec<f64>,
}

impl Forest {
    /// Fits on a standard-layout feature matrix (the caller standardizes).
    pub fn fit(x: &Array2<f64>, y: &[f64], params: &ForestParams) -> Result<Forest> {
        let (n, d) = x.dim();
        if n == 0 || d == 0 {
            return Err(Error::TooSmall("forest needs a nonempty training set".into()));
        }
        if y.len() != n {
            return Err(Error::InvalidParameter(format!(
                "response has {} values for {n} rows",
                y.len()
            )));
        }
        if params.ntree == 0 {
            return Err(Error::InvalidParameter("ntree must be at least 1".into()));
        }
        if params.min_node_size == 0 {
            return Err(Error::InvalidParameter("min_node_size must be at least 1".into()));
        }
        let mtry = params.resolved_mtry(d);
        if mtry > d {
            return Err(Error::InvalidParameter(format!("mtry {mtry} exceeds d = {d}")));
        }
        if params.ntree < 50 {
            log::warn!(
                "ntree = {} is small; some training points may never be out-of-bag",
                params.ntree
            );
        }
        let x = if x.is_standard_layout() {
            std::borrow::Cow::Borrowed(x)
        } else {
            std::borrow::Cow::Owned(x.as_standard_layout().into_owned())
        };
        let grow = GrowParams {
            mtry,
            min_node_size: params.min_node_size,
        };
        let trees: Vec<Tree> = (0..params.ntree)
            .into_par_iter()
            .map(|t| {
                let mut rng = tree_rng(params.seed, t);
                let mut inbag = vec![false; n];
                let sample: Vec<usize> = (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        inbag[i] = true;
                        i
                    })
                    .collect();
                let oob = (0..n).filter(|&i| !inbag[i]).map(|i| i as u32).collect();
                Tree::grow(&x, y, sample, oob, &grow, &mut rng)
            })
            .collect();

        let mut forest = Forest {
            trees,
            n_features: d,
            mtry,
            min_node_size: params.min_node_size,
            seed: params.seed,
            oob_predictions: Vec::new(),
        };
        forest.oob_predictions = forest.compute_oob(&x);
        Ok(forest)
    }

    /// Assembles a forest from prebuilt trees. OOB predictions are left empty.
    pub fn from_trees(trees: Vec<Tree>, n_features: usize) -> Result<Forest> {
        if trees.is_empty() {
            return Err(Error::InvalidParameter("a forest needs at least one tree".into()));
        }
        Ok(Forest {
            trees,
            n_features,
            mtry: n_features,
            min_node_size: 1,
            seed: 0,
            oob_predictions: Vec::new(),
        })
    }

    fn compute_oob(&self, x: &Array2<f64>) -> Vec<f64> {
        let n = x.nrows();
        let mut sum = vec![0.0; n];
        let mut cnt = vec![0u32; n];
        for tree in &self.trees {
            for &i in tree.oob() {
                let i = i as usize;
                sum[i] += tree.predict(row_slice(x, i));
                cnt[i] += 1;
            }
        }
        let missing = cnt.iter().filter(|&&c| c == 0).count();
        if missing > 0 {
            log::warn!("{missing} training points are never out-of-bag; using in-bag predictions for them");
        }
        (0..n)
            .map(|i| {
                if cnt[i] > 0 {
                    sum[i] / cnt[i] as f64
                } else {
                    self.predict_unchecked(row_slice(x, i))
                }
            })
            .collect()
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn ntree(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn mtry(&self) -> usize {
        self.mtry
    }

    pub fn min_node_size(&self) -> usize {
        self.min_node_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn oob_predictions(&self) -> &[f64] {
        &self.oob_predictions
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Mean of the per-tree terminal-node means.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Prediction for training row `i` at input `x` using only trees where `i`
    /// was out-of-bag; falls back to the full forest when there are none.
    pub fn predict_oob(&self, i: usize, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for tree in &self.trees {
            if tree.oob().binary_search(&(i as u32)).is_ok() {
                sum += tree.predict(x);
                cnt += 1;
            }
        }
        Ok(if cnt > 0 {
            sum / cnt as f64
        } else {
            self.predict_unchecked(x)
        })
    }

    /// One sparse rule per tree: the terminal node `x` falls into.
    pub fn leaf_rules_containing(&self, x: &[f64]) -> Result<Vec<LeafRule>> {
        self.check_dim(x)?;
        Ok(self.trees.iter().map(|t| t.rule_for(x)).collect())
    }

    /// Rules containing `x` from the trees where training row `i` was
    /// out-of-bag; every tree when there are none.
    pub fn oob_leaf_rules_containing(&self, i: usize, x: &[f64]) -> Result<Vec<LeafRule>> {
        self.check_dim(x)?;
        let oob: Vec<LeafRule> = self
            .trees
            .iter()
            .filter(|t| t.oob().binary_search(&(i as u32)).is_ok())
            .map(|t| t.rule_for(x))
            .collect();
        if oob.is_empty() {
            return self.leaf_rules_containing(x);
        }
        Ok(oob)
    }

    /// One dense region per tree: the terminal node `x` falls into.
    pub fn rules_containing(&self, x: &[f64]) -> Result<Vec<RuleRegion>> {
        Ok(self
            .leaf_rules_containing(x)?
            .iter()
            .map(|r| r.to_region(self.n_features))
            .collect())
    }

    /// Every terminal node of every tree, tree by tree.
    pub fn all_leaf_rules(&self) -> Vec<LeafRule> {
        self.trees.iter().flat_map(Tree::leaf_rules).collect()
    }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}
