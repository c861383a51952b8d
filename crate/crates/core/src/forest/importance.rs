//! Out-of-bag permutation importance.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::Forest;
use crate::{Error, Result};

/// Increase in each tree's OOB mean squared error after permuting column j
/// among that tree's OOB rows, averaged over trees with a nonempty OOB set.
///
/// A tree that never splits on j contributes exactly 0 for it. Noise features
/// can come out negative.
pub fn permutation_importance(forest: &Forest, x: &Array2<f64>, y: &[f64], seed: u64) -> Result<Vec<f64>> {
    let (n, d) = x.dim();
    if d != forest.n_features() {
        return Err(Error::DimensionMismatch {
            expected: forest.n_features(),
            found: d,
        });
    }
    if y.len() != n {
        return Err(Error::InvalidParameter("response length differs from row count".into()));
    }
    let x = x.as_standard_layout();
    let data = x.as_slice().expect("standard layout");

    let per_tree: Vec<Option<Vec<f64>>> = forest
        .trees()
        .par_iter()
        .enumerate()
        .map(|(t, tree)| {
            let oob: Vec<usize> = tree.oob().iter().map(|&i| i as usize).filter(|&i| i < n).collect();
            if oob.is_empty() {
                return None;
            }
            let base: f64 = oob
                .iter()
                .map(|&i| (tree.predict(&data[i * d..(i + 1) * d]) - y[i]).powi(2))
                .sum::<f64>()
                / oob.len() as f64;
            let mut row = vec![0.0; d];
            let drops = (0..d)
                .map(|j| {
                    if !tree.uses_feature(j) {
                        return 0.0;
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((t as u64) << 32) | j as u64);
                    let mut perm: Vec<f64> = oob.iter().map(|&i| data[i * d + j]).collect();
                    perm.shuffle(&mut rng);
                    let mse = oob
                        .iter()
                        .zip(&perm)
                        .map(|(&i, &v)| {
                            row.copy_from_slice(&data[i * d..(i + 1) * d]);
                            row[j] = v;
                            (tree.predict(&row) - y[i]).powi(2)
                        })
                        .sum::<f64>()
                        / oob.len() as f64;
                    mse - base
                })
                .collect();
            Some(drops)
        })
        .collect();

    let mut total = vec![0.0; d];
    let mut used = 0usize;
    for drops in per_tree.into_iter().flatten() {
        used += 1;
        for (acc, v) in total.iter_mut().zip(drops) {
            *acc += v;
        }
    }
    if used > 0 {
        total.iter_mut().for_each(|v| *v /= used as f64);
    }
    Ok(total)
}

/// Indices of the `ceil(fraction·d)` (at least one) largest scores, best first.
/// Ties keep the lower index.
pub fn top_features(scores: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::ForestParams;
    use rand::Rng;

    #[test]
    fn unused_feature_scores_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((200, 3), |(_, j)| if j == 2 { 0.5 } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..200).map(|i| 4.0 * x[[i, 0]]).collect();
        let f = Forest::fit(
            &x,
            &y,
            &ForestParams {
                ntree: 40,
                mtry: Some(3),
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let imp = permutation_importance(&f, &x, &y, 5).unwrap();
        assert_eq!(imp[2], 0.0);
        assert!(imp[0] > imp[1]);
    }

    #[test]
    fn top_fraction_rounds_up() {
        let s = [0.1, 5.0, 3.0, -1.0, 5.0];
        assert_eq!(top_features(&s, 0.1), vec![1]);
        assert_eq!(top_features(&s, 0.5), vec![1, 4, 2]);
    }
}
