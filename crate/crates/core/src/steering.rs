//! Minimal-action Jacobian steering.
//!
//! The steering direction for a target token is `g(h) = grad_h ln p_t(h)`.
//! Among all perturbations with the same first-order gain `g . dh = c`, the
//! one parallel to `g` has the smallest norm, `c / |g|`. [`steer`] climbs
//! along normalized `g` with a backtracking line search that only accepts
//! strict increases of `p_t`; [`minimal_action_check`] samples competing
//! perturbations to confirm the norm bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{head_probs, UnembeddingHead};
use crate::linalg::{axpy, dot, norm, scale, sub};
use crate::model::{generate_greedy, Model};
use crate::trajectory::Trajectory;
use crate::variational::{gradient_from_probs, log_prob_gradient};

/// First trial step of each line search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitialStep {
    /// `max(factor * |h_k|, 1e-3)` at the current iterate `h_k`.
    RelativeToState(f64),
    Fixed(f64),
}

impl InitialStep {
    pub const FLOOR: f64 = 1e-3;

    fn resolve(self, h: &[f64]) -> f64 {
        match self {
            InitialStep::RelativeToState(f) => (f * norm(h)).max(Self::FLOOR),
            InitialStep::Fixed(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerParams {
    /// Target probability threshold, in `(0, 1)`.
    pub eta: f64,
    pub max_steps: usize,
    pub alpha0: InitialStep,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for SteerParams {
    fn default() -> Self {
        Self {
            eta: 0.5,
            max_steps: 50,
            alpha0: InitialStep::RelativeToState(0.1),
            backtrack_factor: 0.5,
            max_backtracks: 20,
        }
    }
}

impl SteerParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0, 1), got {}", self.eta));
        }
        if self.max_steps == 0 || self.max_backtracks == 0 {
            return bad("max_steps and max_backtracks must be positive".into());
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            ));
        }
        let a = match self.alpha0 {
            InitialStep::RelativeToState(f) | InitialStep::Fixed(f) => f,
        };
        if !(a.is_finite() && a > 0.0) {
            return bad(format!("alpha0 must be positive, got {a}"));
        }
        Ok(())
    }
}

/// One accepted iteration: the target probability after the step and the
/// step length used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerStep {
    pub p_target: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerResult {
    pub h_hat: Vec<f64>,
    pub steps_taken: usize,
    pub p_initial: f64,
    pub p_final: f64,
    pub converged: bool,
    pub path: Vec<SteerStep>,
    pub total_displacement: f64,
}

/// `grad_h ln p_target(h)`; the same computation as [`log_prob_gradient`].
pub fn steering_direction(head: &UnembeddingHead, h: &[f64], target: usize) -> Result<Vec<f64>> {
    log_prob_gradient(head, h, target)
}

/// Steers `h` until `p_target >= eta` or `max_steps` iterations have run.
pub fn steer(head: &UnembeddingHead, h: &[f64], target: usize, params: &SteerParams) -> Result<SteerResult> {
    params.validate()?;
    head.check_token(target)?;
    let mut probs = head_probs(head, h)?;
    let p_initial = probs[target];
    let mut current = h.to_vec();
    let mut path: Vec<SteerStep> = Vec::new();

    for iteration in 0..params.max_steps {
        let p = probs[target];
        if p >= params.eta {
            break;
        }
        let g = gradient_from_probs(head, &probs, target);
        let g_norm = norm(&g);
        if g_norm < 1e-12 {
            return Err(Error::SaturatedGradient { p_target: p });
        }
        let direction = scale(&g, 1.0 / g_norm);

        let mut alpha = params.alpha0.resolve(&current);
        let mut accepted = None;
        for _ in 0..=params.max_backtracks {
            let candidate = axpy(&current, alpha, &direction);
            let candidate_probs = head_probs(head, &candidate)?;
            if candidate_probs[target] > p {
                accepted = Some((candidate, candidate_probs));
                break;
            }
            alpha *= params.backtrack_factor;
        }
        let Some((next, next_probs)) = accepted else {
            return Err(Error::SteeringStalled { iteration, path });
        };
        path.push(SteerStep {
            p_target: next_probs[target],
            step_length: alpha,
        });
        current = next;
        probs = next_probs;
    }

    let p_final = probs[target];
    let total_displacement = norm(&sub(&current, h));
    let travelled: f64 = path.iter().map(|s| s.step_length).sum();
    debug_assert!(total_displacement <= travelled * (1.0 + 1e-12) + 1e-12);
    Ok(SteerResult {
        steps_taken: path.len(),
        h_hat: current,
        p_initial,
        p_final,
        converged: p_final >= params.eta,
        path,
        total_displacement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimalActionReport {
    /// `|dh*| = c / |g|`
    pub optimal_norm: f64,
    /// Smallest `|r'| / |dh*|` over accepted samples.
    pub min_ratio: f64,
    pub accepted: usize,
    pub rejected: usize,
}

/// Rescaled random perturbation with the same first-order gain `c`, or `None`
/// when the draw is too close to orthogonal to `g`.
pub fn equal_gain_rescale(g: &[f64], r: &[f64], c: f64) -> Option<Vec<f64>> {
    let gr = dot(g, r);
    if gr.abs() < 1e-6 * norm(g) * norm(r) {
        return None;
    }
    Some(scale(r, c / gr))
}

/// Samples `n_samples` Gaussian directions, rescales each to first-order gain
/// `c`, and checks that none is shorter than `dh* = c g / |g|^2`.
pub fn minimal_action_check(
    head: &UnembeddingHead,
    h: &[f64],
    target: usize,
    c: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MinimalActionReport> {
    if c.is_nan() || c <= 0.0 || n_samples == 0 {
        return Err(Error::InvalidParams("c must be positive and n_samples nonzero".into()));
    }
    let g = steering_direction(head, h, target)?;
    let g_sq = dot(&g, &g);
    if g_sq == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let optimal = scale(&g, c / g_sq);
    let optimal_norm = norm(&optimal);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_ratio = f64::INFINITY;
    let mut accepted = 0;
    let mut rejected = 0;
    for _ in 0..n_samples {
        let r: Vec<f64> = (0..g.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let Some(candidate) = equal_gain_rescale(&g, &r, c) else {
            rejected += 1;
            continue;
        };
        accepted += 1;
        let n = norm(&candidate);
        if n < optimal_norm - 1e-9 {
            return Err(Error::OptimalityViolated {
                sampled: n,
                optimal: optimal_norm,
            });
        }
        min_ratio = min_ratio.min(n / optimal_norm);
    }
    Ok(MinimalActionReport {
        optimal_norm,
        min_ratio,
        accepted,
        rejected,
    })
}

/// Steers the hidden state at `step_index` toward `target`, substitutes
/// `target` as the realized token there and greedily regenerates
/// `continue_steps` tokens from the modified prefix. The continuation is
/// `None` when `continue_steps` is 0.
///
/// `traj` must come from [`generate_greedy`] on `model`; the prompt is taken
/// from its `prompt_ids` note.
pub fn steer_and_continue(
    model: &Model,
    traj: &Trajectory,
    step_index: usize,
    target: usize,
    params: &SteerParams,
    continue_steps: usize,
) -> Result<(SteerResult, Option<Trajectory>)> {
    if step_index >= traj.len() {
        return Err(Error::InvalidParams(format!(
            "step index {step_index} out of range for trajectory of length {}",
            traj.len()
        )));
    }
    let prompt: Vec<u32> = traj
        .notes()
        .get("prompt_ids")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Header("trajectory carries no prompt_ids note".into()))?;
    let result = steer(model.head(), &traj.hidden_f64(step_index), target, params)?;
    if continue_steps == 0 {
        return Ok((result, None));
    }
    let mut prefix = prompt;
    prefix.extend_from_slice(&traj.token_ids()[..step_index]);
    prefix.push(u32::try_from(target).expect("target checked against vocab"));
    let continuation = generate_greedy(model, &prefix, continue_steps)?;
    Ok((result, Some(continuation)))
}

/// Assembles the steered trajectory: the original steps before `step_index`,
/// the steered state with `target` and its probability at `step_index`, then
/// the continuation. Header fields and notes are kept; a `steered` note
/// records the intervention.
pub fn splice_steered(
    traj: &Trajectory,
    step_index: usize,
    target: usize,
    result: &SteerResult,
    continuation: Option<&Trajectory>,
) -> Result<Trajectory> {
    if step_index >= traj.len() {
        return Err(Error::InvalidParams(format!(
            "step index {step_index} out of range for trajectory of length {}",
            traj.len()
        )));
    }
    let target_id = u32::try_from(target).map_err(|_| Error::InvalidParams(format!("target {target} too large")))?;
    let mut hidden = traj.hidden()[..step_index].to_vec();
    let mut ids = traj.token_ids()[..step_index].to_vec();
    let mut probs = traj.p_realized()[..step_index].to_vec();
    hidden.push(result.h_hat.iter().map(|&x| x as f32).collect());
    ids.push(target_id);
    probs.push(result.p_final as f32);
    if let Some(c) = continuation {
        hidden.extend_from_slice(c.hidden());
        ids.extend_from_slice(c.token_ids());
        probs.extend_from_slice(c.p_realized());
    }
    let mut notes = traj.notes().clone();
    notes.insert(
        "steered".into(),
        serde_json::json!({ "step": step_index, "target": target, "steps_taken": result.steps_taken }),
    );
    let spliced = Trajectory::new(traj.model_id(), traj.context_len(), hidden, ids, probs)?.with_notes(notes);
    match traj.head() {
        Some(head) => spliced.with_head(head.clone()),
        None => Ok(spliced),
    }
}
