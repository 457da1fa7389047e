//! Neighboring-attractor probe: how many distinct argmax tokens appear along
//! the straight segment between consecutive hidden states.

use crate::error::{Error, Result};
use crate::head::{argmax, UnembeddingHead};
use crate::linalg::check_dim;
use crate::trajectory::Trajectory;

/// `alpha in {0, 0.1, ..., 1}`.
pub const DEFAULT_GRID: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub unique_count: usize,
    /// Argmax token at each grid point, from `h_a` to `h_b`.
    pub tokens: Vec<usize>,
}

/// Argmax of the head along `h(alpha) = (1 - alpha) h_a + alpha h_b` on a
/// uniform grid of `grid_n` points, ties to the lowest token id.
///
/// Both weights are formed as integer ratios `(n-1-i)/(n-1)` and `i/(n-1)`,
/// so swapping the endpoints visits bitwise the same states in reverse.
pub fn interpolate_unique_tokens(
    head: &UnembeddingHead,
    h_a: &[f64],
    h_b: &[f64],
    grid_n: usize,
) -> Result<Interpolation> {
    check_dim(head.hidden_dim(), h_a.len())?;
    check_dim(head.hidden_dim(), h_b.len())?;
    if grid_n < 2 {
        return Err(Error::InvalidParams(format!(
            "grid must have at least 2 points, got {grid_n}"
        )));
    }
    let last = (grid_n - 1) as f64;
    let tokens = (0..grid_n)
        .map(|i| {
            let wa = (grid_n - 1 - i) as f64 / last;
            let wb = i as f64 / last;
            let h: Vec<f64> = h_a.iter().zip(h_b).map(|(a, b)| wa * a + wb * b).collect();
            Ok(argmax(&head.logits(&h)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut distinct = tokens.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(Interpolation {
        unique_count: distinct.len(),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSummary {
    pub mean_unique: f64,
    /// Population standard deviation.
    pub std_unique: f64,
    pub per_pair_counts: Vec<usize>,
}

/// Applies [`interpolate_unique_tokens`] to every consecutive pair of hidden
/// states of a trajectory.
pub fn probe_trajectory(traj: &Trajectory, grid_n: usize) -> Result<ProbeSummary> {
    let head = traj.require_head()?;
    if traj.len() < 2 {
        return Err(Error::TooShort {
            what: "trajectory steps",
            needed: 2,
            got: traj.len(),
        });
    }
    let hidden: Vec<Vec<f64>> = (0..traj.len()).map(|t| traj.hidden_f64(t)).collect();
    let per_pair_counts = hidden
        .windows(2)
        .map(|w| interpolate_unique_tokens(head, &w[0], &w[1], grid_n).map(|r| r.unique_count))
        .collect::<Result<Vec<_>>>()?;
    let n = per_pair_counts.len() as f64;
    let mean_unique = per_pair_counts.iter().sum::<usize>() as f64 / n;
    let var = per_pair_counts
        .iter()
        .map(|&c| (c as f64 - mean_unique).powi(2))
        .sum::<f64>()
        / n;
    Ok(ProbeSummary {
        mean_unique,
        std_unique: var.sqrt(),
        per_pair_counts,
    })
}
