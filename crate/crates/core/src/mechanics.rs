//! Per-step log-Lagrangian quantities and the aggregate conservation, drift,
//! entropy, power and correlation statistics built on them.
//!
//! Conservation and drift statistics are computed on the log-energy
//! `H_t = K_t + V_t`; `E_t = exp(H_t)` is carried per step for reporting.
//! Variances are population variances. Reductions run sequentially in input
//! order.

use crate::error::{Error, Result};
use crate::head::head_probs;
use crate::linalg::{check_dim, dot, exact_sum, norm_sq, sub, to_f64};
use crate::trajectory::{MechanicsSummary, StepMechanics, Trajectory};

/// Mechanics of the step `h_prev -> h_curr` whose realized token had
/// probability `p_realized` at `h_curr`.
pub fn step_mechanics(t: usize, h_prev: &[f64], h_curr: &[f64], p_realized: f64) -> Result<StepMechanics> {
    check_dim(h_prev.len(), h_curr.len())?;
    if !(p_realized > 0.0 && p_realized <= 1.0) {
        return Err(Error::InvalidProbability(p_realized));
    }
    let velocity = sub(h_curr, h_prev);
    let speed_sq_half = 0.5 * norm_sq(&velocity);
    if speed_sq_half == 0.0 {
        return Err(Error::DegenerateDynamics);
    }
    let kinetic = speed_sq_half.ln();
    // + 0.0 keeps p = 1 at V = +0 rather than -0
    let potential = -p_realized.ln() + 0.0;
    Ok(StepMechanics {
        t,
        velocity,
        speed_sq_half,
        kinetic,
        potential,
        lagrangian: kinetic - potential,
        log_energy: kinetic + potential,
        energy: speed_sq_half / p_realized,
    })
}

/// One record per `t = 1..T-1`.
pub fn trajectory_mechanics(traj: &Trajectory) -> Result<Vec<StepMechanics>> {
    if traj.len() < 2 {
        return Err(Error::TooShort {
            what: "trajectory steps",
            needed: 2,
            got: traj.len(),
        });
    }
    let hidden: Vec<Vec<f64>> = traj.hidden().iter().map(|h| to_f64(h)).collect();
    hidden
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let t = i + 1;
            step_mechanics(t, &pair[0], &pair[1], f64::from(traj.p_realized()[t])).map_err(|e| Error::at_step(t, e))
        })
        .collect()
}

/// Sums are correctly rounded, so pooled statistics do not depend on the
/// order in which steps or trajectories arrive.
fn mean(xs: &[f64]) -> f64 {
    exact_sum(xs) / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let mu = mean(xs);
    let squares: Vec<f64> = xs.iter().map(|x| (x - mu) * (x - mu)).collect();
    (exact_sum(&squares) / xs.len() as f64).sqrt()
}

/// Population coefficient of variation `sigma / |mu|`.
pub fn coefficient_of_variation(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::UndefinedStatistic("coefficient of variation of an empty series"));
    }
    let mu = mean(xs);
    if mu == 0.0 {
        return Err(Error::UndefinedStatistic("coefficient of variation with zero mean"));
    }
    Ok(population_std(xs) / mu.abs())
}

fn log_energies(series: &[StepMechanics]) -> Vec<f64> {
    series.iter().map(|s| s.log_energy).collect()
}

/// Mean signed drift, mean absolute jump and drift ratio of `H_t`.
///
/// The drift ratio `sum(dH) / sum(|dH|)` is defined as 0 for a constant
/// series.
pub fn local_energy_stats(series: &[StepMechanics]) -> Result<(f64, f64, f64)> {
    local_stats_of(&log_energies(series))
}

pub(crate) fn local_stats_of(h: &[f64]) -> Result<(f64, f64, f64)> {
    if h.len() < 2 {
        return Err(Error::TooShort {
            what: "energy series",
            needed: 2,
            got: h.len(),
        });
    }
    let deltas = log_energy_increments_of(h);
    let sum = exact_sum(&deltas);
    let abs_sum = exact_sum(&deltas.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let n = deltas.len() as f64;
    let ratio = if abs_sum == 0.0 { 0.0 } else { sum / abs_sum };
    Ok((sum / n, abs_sum / n, ratio))
}

fn log_energy_increments_of(h: &[f64]) -> Vec<f64> {
    h.windows(2).map(|w| w[1] - w[0]).collect()
}

/// `dH_t = H_{t+1} - H_t`, the per-step proxy for power.
pub fn log_energy_increments(series: &[StepMechanics]) -> Vec<f64> {
    log_energy_increments_of(&log_energies(series))
}

/// Aggregates per-trajectory step series.
///
/// * `global_cv`: CV of all `H_t` pooled across trajectories.
/// * `avg_traj_cv`: unweighted mean of per-trajectory CVs.
/// * `kv_ratio`: mean `K_t` over mean `V_t` (ratio of means).
/// * drift fields: [`local_energy_stats`] per trajectory, averaged with equal
///   weight over the trajectories that have at least two steps; 0 when none do.
///
/// `mean_entropy` is left unset; see [`attach_entropy`].
pub fn summarize(series_per_trajectory: &[Vec<StepMechanics>]) -> Result<MechanicsSummary> {
    let nonempty: Vec<&Vec<StepMechanics>> = series_per_trajectory.iter().filter(|s| !s.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::TooShort {
            what: "nonempty step series",
            needed: 1,
            got: 0,
        });
    }

    let pooled: Vec<f64> = nonempty.iter().flat_map(|s| log_energies(s)).collect();
    let global_cv = coefficient_of_variation(&pooled)?;
    let per_traj_cv = nonempty
        .iter()
        .map(|s| coefficient_of_variation(&log_energies(s)))
        .collect::<Result<Vec<_>>>()?;
    let avg_traj_cv = mean(&per_traj_cv);

    let kinetic: Vec<f64> = nonempty.iter().flat_map(|s| s.iter().map(|m| m.kinetic)).collect();
    let potential: Vec<f64> = nonempty.iter().flat_map(|s| s.iter().map(|m| m.potential)).collect();
    let mean_potential = mean(&potential);
    if mean_potential == 0.0 {
        return Err(Error::UndefinedStatistic("K/V ratio with zero mean potential"));
    }
    let kv_ratio = mean(&kinetic) / mean_potential;

    let drifts = nonempty
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| local_energy_stats(s))
        .collect::<Result<Vec<_>>>()?;
    let (mean_drift, mean_abs_jump, drift_ratio) = if drifts.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let n = drifts.len() as f64;
        (
            exact_sum(&drifts.iter().map(|d| d.0).collect::<Vec<_>>()) / n,
            exact_sum(&drifts.iter().map(|d| d.1).collect::<Vec<_>>()) / n,
            exact_sum(&drifts.iter().map(|d| d.2).collect::<Vec<_>>()) / n,
        )
    };

    Ok(MechanicsSummary {
        n_steps: pooled.len(),
        mean_log_e: mean(&pooled),
        global_cv,
        avg_traj_cv,
        kv_ratio,
        mean_drift,
        mean_abs_jump,
        drift_ratio,
        mean_entropy: None,
    })
}

/// CV of `H_t` across trajectories at each step index `t` (1-based), for
/// indices present in at least one series. Entries are `None` where the
/// statistic is undefined (zero mean).
pub fn step_index_cv(series_per_trajectory: &[Vec<StepMechanics>]) -> Vec<(usize, usize, Option<f64>)> {
    let max_len = series_per_trajectory.iter().map(Vec::len).max().unwrap_or(0);
    (0..max_len)
        .map(|i| {
            let column: Vec<f64> = series_per_trajectory
                .iter()
                .filter_map(|s| s.get(i).map(|m| m.log_energy))
                .collect();
            (i + 1, column.len(), coefficient_of_variation(&column).ok())
        })
        .collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    if let Some(bad) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>() + 0.0)
}

/// Entropy of the head distribution at each `h_t`, `t = 1..T-1`, aligned with
/// [`trajectory_mechanics`].
pub fn entropy_series(traj: &Trajectory) -> Result<Vec<f64>> {
    let head = traj.require_head()?;
    (1..traj.len())
        .map(|t| shannon_entropy(&head_probs(head, &traj.hidden_f64(t))?))
        .collect()
}

/// Sets `summary.mean_entropy` to the mean of all pooled entropy values.
pub fn attach_entropy(summary: &mut MechanicsSummary, entropies: &[Vec<f64>]) {
    let pooled: Vec<f64> = entropies.iter().flatten().copied().collect();
    summary.mean_entropy = (!pooled.is_empty()).then(|| mean(&pooled));
}

/// Discrete power `dE/dt = E_t (2 v_t . a_t / |v_t|^2 - F_t . v_t)` with
/// `a_t = v_{t+1} - v_t`; one value per consecutive pair of steps.
pub fn power_series(series: &[StepMechanics], forces: &[Vec<f64>]) -> Result<Vec<f64>> {
    if forces.len() != series.len() {
        return Err(Error::Dimension {
            expected: series.len(),
            actual: forces.len(),
        });
    }
    series
        .windows(2)
        .zip(forces)
        .map(|(pair, force)| {
            let (cur, next) = (&pair[0], &pair[1]);
            check_dim(cur.velocity.len(), next.velocity.len())?;
            check_dim(cur.velocity.len(), force.len())?;
            let accel = sub(&next.velocity, &cur.velocity);
            let speed_sq = norm_sq(&cur.velocity);
            Ok(cur.energy * (2.0 * dot(&cur.velocity, &accel) / speed_sq - dot(force, &cur.velocity)))
        })
        .collect()
}

/// Typical per-step energy swing `sigma ~ CV * mu`.
pub fn energy_swing_proxy(cv: f64, mean_energy: f64) -> f64 {
    cv * mean_energy
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooShort {
            what: "correlation samples",
            needed: 2,
            got: xs.len(),
        });
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedStatistic("correlation with a constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
