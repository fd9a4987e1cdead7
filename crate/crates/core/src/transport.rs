//! Exact minibatch optimal transport, empirical W2, energy distance and
//! trajectory length statistics.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2, ArrayView3, Axis};

/// A bijective assignment between rows and columns of a square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// `forward[i]` is the column matched to row i.
    pub forward: Vec<usize>,
    /// `inverse[j]` is the row matched to column j.
    pub inverse: Vec<usize>,
    pub cost: f64,
}

/// `C[i][j] = ||x_i - y_j||^2`, accumulated in double precision.
pub fn cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::shape("cost_matrix", format!("dimensions {} and {} differ", x.ncols(), y.ncols())));
    }
    let mut c = Array2::zeros((x.nrows(), y.nrows()));
    for (i, xi) in x.outer_iter().enumerate() {
        for (j, yj) in y.outer_iter().enumerate() {
            c[[i, j]] = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    Ok(c)
}

/// Minimum-cost perfect matching by the shortest augmenting path method with
/// dual potentials, O(n^3). Among equal reduced costs the lowest column index
/// wins, so the result is deterministic.
pub fn solve_assignment(c: ArrayView2<f64>) -> Result<Coupling> {
    let (n, m) = c.dim();
    if n != m {
        return Err(Error::shape("solve_assignment", format!("cost matrix is {n}x{m}, not square")));
    }
    if let Some(v) = c.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain("solve_assignment", format!("non-finite cost {v}")));
    }
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut forward = vec![0; n];
    let mut inverse = vec![0; n];
    for j in 1..=n {
        let i = row_of[j] - 1;
        forward[i] = j - 1;
        inverse[j - 1] = i;
    }
    let cost = (0..n).map(|i| c[[i, forward[i]]]).sum();
    Ok(Coupling { forward, inverse, cost })
}

/// Minibatch estimator of `W2^2`: optimal assignment cost divided by B.
pub fn empirical_w2_sq(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("empirical_w2_sq", format!("batch sizes {} and {} differ", x.nrows(), y.nrows())));
    }
    if x.nrows() == 0 {
        return Err(Error::shape("empirical_w2_sq", "empty batch"));
    }
    let c = cost_matrix(x, y)?;
    Ok(solve_assignment(c.view())?.cost / x.nrows() as f64)
}

fn mean_pairwise_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut s = 0.0;
    for ai in a.outer_iter() {
        for bj in b.outer_iter() {
            s += ai.iter().zip(bj).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    s / (a.nrows() * b.nrows()) as f64
}

/// V-statistic of the squared MMD with kernel `-||x - y||`:
/// `E||X-Y|| - E||X-X'||/2 - E||Y-Y'||/2`.
pub fn energy_mmd_sq(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::shape("energy_mmd_sq", "empty sample set"));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::shape("energy_mmd_sq", format!("dimensions {} and {} differ", x.ncols(), y.ncols())));
    }
    Ok(mean_pairwise_distance(x, y) - 0.5 * mean_pairwise_distance(x, x) - 0.5 * mean_pairwise_distance(y, y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathStats {
    pub mean: f64,
    pub max: f64,
}

/// Polyline arc length per sample of trajectories shaped `[steps + 1, batch, d]`.
pub fn path_lengths(states: ArrayView3<f64>) -> Vec<f64> {
    let (steps, batch, _) = states.dim();
    let mut len = vec![0.0; batch];
    for k in 1..steps {
        let a = states.index_axis(Axis(0), k - 1);
        let b = states.index_axis(Axis(0), k);
        for (i, l) in len.iter_mut().enumerate() {
            let ai = a.row(i);
            let bi = b.row(i);
            *l += ai.iter().zip(bi).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    len
}

pub fn path_length_stats(states: ArrayView3<f64>) -> PathStats {
    let l = path_lengths(states);
    if l.is_empty() {
        return PathStats { mean: 0.0, max: 0.0 };
    }
    PathStats { mean: l.iter().sum::<f64>() / l.len() as f64, max: l.iter().copied().fold(0.0, f64::max) }
}
