//! OPTICS reachability of a query inside its neighborhood.

use ndarray::Array2;

use crate::{Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Reachability distance assigned to row `query` when OPTICS orders the rows
/// of `points` with an unbounded radius.
///
/// The core distance of a point is its distance to the `min_pts`-th nearest
/// row, itself included. The ordering starts from the non-query row with the
/// smallest core distance, so the query always gets a finite reachability:
/// `max(core(p), |p − q|)` minimized over rows `p` processed before it.
/// Pending rows are taken by smallest reachability, then lowest index.
pub fn optics_reachability(points: &Array2<f64>, query: usize, min_pts: usize) -> Result<f64> {
    let m = points.nrows();
    if query >= m {
        return Err(Error::InvalidParameter(format!("query row {query} out of range")));
    }
    if m < min_pts {
        return Err(Error::TooSmall(format!(
            "OPTICS needs at least min_pts = {min_pts} points, the neighborhood has {m}; increase K"
        )));
    }
    if m == 1 {
        return Ok(0.0);
    }
    let pts = points.as_standard_layout();
    let row = |i: usize| pts.row(i).to_slice().expect("standard layout");

    let mut dm = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..i {
            let v = dist(row(i), row(j));
            dm[i * m + j] = v;
            dm[j * m + i] = v;
        }
    }
    let core: Vec<f64> = (0..m)
        .map(|i| {
            let mut r = dm[i * m..(i + 1) * m].to_vec();
            r.select_nth_unstable_by(min_pts - 1, f64::total_cmp);
            r[min_pts - 1]
        })
        .collect();

    let mut start = if query == 0 { 1 } else { 0 };
    for i in 0..m {
        if i != query && core[i] < core[start] {
            start = i;
        }
    }

    let mut reach = vec![f64::INFINITY; m];
    let mut done = vec![false; m];
    let mut at = start;
    loop {
        if at == query {
            return Ok(reach[query]);
        }
        done[at] = true;
        for j in 0..m {
            if !done[j] {
                let r = core[at].max(dm[at * m + j]);
                if r < reach[j] {
                    reach[j] = r;
                }
            }
        }
        let mut next = usize::MAX;
        for j in 0..m {
            if !done[j] && (next == usize::MAX || reach[j] < reach[next]) {
                next = j;
            }
        }
        at = next;
    }
}
