//! Analytic head gradients, discrete Euler-Lagrange residuals and the
//! first-order energy-conservation perturbation test.
//!
//! The stationarity condition and the conservation bracket appear with
//! opposite signs on the gradient term, so both are available through
//! [`SignConvention`]:
//!
//! * `Proposition`: `2v'/|v'|^2 - 2v/|v|^2 = grad`
//! * `Theorem`:     `2v'/|v'|^2 - 2v/|v|^2 = -grad`
//!
//! Only the `Theorem` form makes the first-order change of `H` vanish.

use crate::error::{Error, Result};
use crate::head::{head_probs, UnembeddingHead};
use crate::linalg::{add, axpy, check_dim, dot, inversion, norm, norm_sq, scale, sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignConvention {
    Proposition,
    Theorem,
}

impl SignConvention {
    fn sign(self) -> f64 {
        match self {
            SignConvention::Proposition => 1.0,
            SignConvention::Theorem => -1.0,
        }
    }
}

/// `grad_h ln p_j(h) = W_j - sum_k p_k(h) W_k`.
pub fn log_prob_gradient(head: &UnembeddingHead, h: &[f64], j: usize) -> Result<Vec<f64>> {
    head.check_token(j)?;
    let p = head_probs(head, h)?;
    Ok(gradient_from_probs(head, &p, j))
}

pub(crate) fn gradient_from_probs(head: &UnembeddingHead, p: &[f64], j: usize) -> Vec<f64> {
    let d = head.hidden_dim();
    let mut expected = vec![0.0; d];
    for (k, &pk) in p.iter().enumerate() {
        for (e, &w) in expected.iter_mut().zip(head.row(k)) {
            *e += pk * f64::from(w);
        }
    }
    head.row(j)
        .iter()
        .zip(&expected)
        .map(|(&w, e)| f64::from(w) - e)
        .collect()
}

/// Euler-Lagrange residual of the velocity pair `(v_t, v_next)` under force
/// `grad`; zero on exact dynamics.
pub fn el_residual(v_t: &[f64], v_next: &[f64], grad: &[f64], conv: SignConvention) -> Result<Vec<f64>> {
    check_dim(v_t.len(), v_next.len())?;
    check_dim(v_t.len(), grad.len())?;
    let lhs = sub(&inversion(v_next)?, &inversion(v_t)?);
    Ok(axpy(&lhs, -conv.sign(), grad))
}

/// The `v_next` satisfying the Euler-Lagrange equation exactly: with
/// `u = 2v_t/|v_t|^2 +/- grad`, `v_next = 2u/|u|^2`.
pub fn solve_next_velocity(v_t: &[f64], grad: &[f64], conv: SignConvention) -> Result<Vec<f64>> {
    check_dim(v_t.len(), grad.len())?;
    let u = axpy(&inversion(v_t)?, conv.sign(), grad);
    inversion(&u).map_err(|_| Error::SingularDynamics)
}

fn check_unit(direction: &[f64]) -> Result<()> {
    let n = norm(direction);
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(())
}

/// The conservation bracket `B = 2v_t/|v_t|^2 - grad - 2v_next/|v_next|^2`.
pub fn conservation_bracket(v_t: &[f64], v_next: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
    check_dim(v_t.len(), v_next.len())?;
    check_dim(v_t.len(), grad.len())?;
    Ok(sub(&sub(&inversion(v_t)?, grad), &inversion(v_next)?))
}

/// `B . direction`; multiplied by `eps` it is the first-order change of `H`
/// under `h_t -> h_t + eps * direction`.
pub fn conservation_first_order(v_t: &[f64], v_next: &[f64], grad: &[f64], direction: &[f64]) -> Result<f64> {
    check_unit(direction)?;
    let bracket = conservation_bracket(v_t, v_next, grad)?;
    check_dim(bracket.len(), direction.len())?;
    Ok(dot(&bracket, direction))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSample {
    pub eps: f64,
    pub measured: f64,
    pub predicted: f64,
}

/// Geometric grid `eps = 1e-2 * 2^-k`, `k = 0..=10`, from `1e-2` down to
/// about `9.8e-6`.
pub fn default_eps_list() -> Vec<f64> {
    (0..11).map(|k| 1e-2 * 0.5f64.powi(k)).collect()
}

/// `ln(|v + s * eps * eta|^2 / |v|^2)` without cancellation.
fn log_norm_ratio(v: &[f64], eta: &[f64], s: f64, eps: f64) -> f64 {
    let n2 = norm_sq(v);
    let rel = (2.0 * s * eps * dot(v, eta) + eps * eps * norm_sq(eta)) / n2;
    rel.ln_1p()
}

/// Perturbs `h_t -> h_t + eps * direction` and measures the exact change of
/// `ln(|v_t|^2/2) + ln PPL_t + ln(|v_next|^2/2)`, recomputing `p_{x_t}`
/// through the head, next to the first-order prediction `eps * B . direction`.
///
/// Differences are formed with `ln_1p`/`exp_m1` so that the measured change is
/// accurate to relative machine precision even when it is `O(eps^2)`.
pub fn conservation_perturbation_test(
    h_prev: &[f64],
    h_t: &[f64],
    h_next: &[f64],
    head: &UnembeddingHead,
    x_t: usize,
    eps_list: &[f64],
    direction: &[f64],
) -> Result<Vec<PerturbationSample>> {
    check_dim(head.hidden_dim(), h_prev.len())?;
    check_dim(head.hidden_dim(), h_t.len())?;
    check_dim(head.hidden_dim(), h_next.len())?;
    check_dim(head.hidden_dim(), direction.len())?;
    check_unit(direction)?;
    head.check_token(x_t)?;

    let v_t = sub(h_t, h_prev);
    let v_next = sub(h_next, h_t);
    if norm_sq(&v_t) == 0.0 || norm_sq(&v_next) == 0.0 {
        return Err(Error::DegenerateDynamics);
    }
    let p = head_probs(head, h_t)?;
    let grad = gradient_from_probs(head, &p, x_t);
    let slope = dot(&conservation_bracket(&v_t, &v_next, &grad)?, direction);
    // logit sensitivities W_j . eta
    let sens: Vec<f64> = (0..head.vocab_size())
        .map(|j| head.row(j).iter().zip(direction).map(|(&w, e)| f64::from(w) * e).sum())
        .collect();

    eps_list
        .iter()
        .map(|&eps| {
            if eps == 0.0 {
                return Ok(PerturbationSample {
                    eps,
                    measured: 0.0,
                    predicted: 0.0,
                });
            }
            let moved_t = axpy(&v_t, eps, direction);
            let moved_next = axpy(&v_next, -eps, direction);
            if norm_sq(&moved_t) == 0.0 || norm_sq(&moved_next) == 0.0 {
                return Err(Error::DegenerateDynamics);
            }
            let d_kin_t = log_norm_ratio(&v_t, direction, 1.0, eps);
            let d_kin_next = log_norm_ratio(&v_next, direction, -1.0, eps);
            // d ln p_x = eps * s_x - ln sum_j p_j exp(eps * s_j)
            let lse_shift = p
                .iter()
                .zip(&sens)
                .map(|(pj, s)| pj * (eps * s).exp_m1())
                .sum::<f64>()
                .ln_1p();
            let d_log_p = eps * sens[x_t] - lse_shift;
            Ok(PerturbationSample {
                eps,
                measured: d_kin_t - d_log_p + d_kin_next,
                predicted: eps * slope,
            })
        })
        .collect()
}

/// Least-squares slope of `ln|measured|` against `ln eps`.
pub fn convergence_order(samples: &[PerturbationSample]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.eps > 0.0 && s.measured != 0.0)
        .map(|s| (s.eps.ln(), s.measured.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

/// Least-squares slope of `ln|measured - predicted|` against `ln eps`; the
/// first-order prediction error should decay with order about 2.
pub fn remainder_order(samples: &[PerturbationSample]) -> Option<f64> {
    let residual: Vec<PerturbationSample> = samples
        .iter()
        .map(|s| PerturbationSample {
            measured: s.measured - s.predicted,
            ..*s
        })
        .collect();
    convergence_order(&residual)
}

/// Builds `h_next` so that `(h_prev, h_t, h_next)` obeys the Euler-Lagrange
/// equation exactly under `conv` for the realized token `x_t`.
pub fn el_exact_next_state(
    head: &UnembeddingHead,
    h_prev: &[f64],
    h_t: &[f64],
    x_t: usize,
    conv: SignConvention,
) -> Result<Vec<f64>> {
    let grad = log_prob_gradient(head, h_t, x_t)?;
    let v_next = solve_next_velocity(&sub(h_t, h_prev), &grad, conv)?;
    Ok(add(h_t, &v_next))
}

/// `2w/|w|^2` applied to a nonzero vector; exposed for property checks.
pub fn momentum_inversion(w: &[f64]) -> Result<Vec<f64>> {
    inversion(w)
}

/// Forces `F_t = grad ln p_{x_t}(h_t)` for `t = 1..T-1`, aligned with the
/// mechanics records of a trajectory.
pub fn trajectory_forces(traj: &crate::trajectory::Trajectory) -> Result<Vec<Vec<f64>>> {
    let head = traj.require_head()?;
    (1..traj.len())
        .map(|t| log_prob_gradient(head, &traj.hidden_f64(t), traj.token_ids()[t] as usize))
        .collect()
}

/// `v / |v|`.
pub fn unit(v: &[f64]) -> Vec<f64> {
    scale(v, 1.0 / norm(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn identity2() -> UnembeddingHead {
        UnembeddingHead::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize, s: f64) -> Vec<f64> {
        (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn random_head(rng: &mut ChaCha8Rng, v: usize, d: usize, s: f64) -> UnembeddingHead {
        let rows: Vec<Vec<f64>> = (0..v).map(|_| random_vec(rng, d, s)).collect();
        let bias = random_vec(rng, v, s);
        UnembeddingHead::from_rows(&rows, &bias).unwrap()
    }

    fn log_p(head: &UnembeddingHead, h: &[f64], j: usize) -> f64 {
        crate::head::log_softmax(&head.logits(h).unwrap())[j]
    }

    #[test]
    fn gradient_symmetric_case() {
        let g = log_prob_gradient(&identity2(), &[0.0, 0.0], 0).unwrap();
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn gradient_single_token_is_zero() {
        let head = UnembeddingHead::from_rows(&[vec![0.3, -2.0, 1.0]], &[0.7]).unwrap();
        assert_eq!(log_prob_gradient(&head, &[1.0, 2.0, 3.0], 0).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            log_prob_gradient(&head, &[1.0, 2.0, 3.0], 1),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = random_head(&mut rng, 7, 4, 1.0);
        let h = random_vec(&mut rng, 4, 1.0);
        for j in 0..7 {
            let g = log_prob_gradient(&head, &h, j).unwrap();
            let step = 1e-4;
            let fd: Vec<f64> = (0..4)
                .map(|k| {
                    let mut hp = h.clone();
                    let mut hm = h.clone();
                    hp[k] += step;
                    hm[k] -= step;
                    (log_p(&head, &hp, j) - log_p(&head, &hm, j)) / (2.0 * step)
                })
                .collect();
            let err = norm(&sub(&g, &fd)) / norm(&fd).max(1e-300);
            assert!(err < 1e-4, "j={j} rel err {err}");
        }
    }

    #[test]
    fn gradients_are_probability_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = random_head(&mut rng, 9, 5, 1.0);
        let h = random_vec(&mut rng, 5, 1.0);
        let p = head_probs(&head, &h).unwrap();
        let mut total = vec![0.0; 5];
        for (j, pj) in p.iter().enumerate() {
            total = axpy(&total, *pj, &log_prob_gradient(&head, &h, j).unwrap());
        }
        assert!(norm(&total) <= 1e-9);
    }

    #[test]
    fn residual_examples() {
        for conv in [SignConvention::Proposition, SignConvention::Theorem] {
            let r = el_residual(&[0.3, -1.0], &[0.3, -1.0], &[0.0, 0.0], conv).unwrap();
            assert_eq!(r, vec![0.0, 0.0]);
        }
        let v_next = solve_next_velocity(&[1.0, 0.0], &[1.0, 0.0], SignConvention::Proposition).unwrap();
        let r = el_residual(&[1.0, 0.0], &v_next, &[1.0, 0.0], SignConvention::Proposition).unwrap();
        assert!(norm(&r) < 1e-15);
        let r = el_residual(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], SignConvention::Proposition).unwrap();
        assert_eq!(r, vec![-1.0, 0.0]);
        assert!(matches!(
            el_residual(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], SignConvention::Theorem),
            Err(Error::DegenerateDynamics)
        ));
    }

    #[test]
    fn solve_examples() {
        let v = [0.4, -2.0, 1.0];
        for conv in [SignConvention::Proposition, SignConvention::Theorem] {
            let next = solve_next_velocity(&v, &[0.0; 3], conv).unwrap();
            assert!(norm(&sub(&next, &v)) <= 1e-15 * norm(&v));
        }
        let next = solve_next_velocity(&[1.0, 0.0], &[1.0, 0.0], SignConvention::Proposition).unwrap();
        assert!((next[0] - 2.0 / 3.0).abs() < 1e-15 && next[1] == 0.0);
        let g = scale(&inversion(&v).unwrap(), -1.0);
        assert!(matches!(
            solve_next_velocity(&v, &g, SignConvention::Proposition),
            Err(Error::SingularDynamics)
        ));
    }

    #[test]
    fn bracket_vanishes_on_theorem_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_vec(&mut rng, 6, 1.0);
        let g = random_vec(&mut rng, 6, 0.3);
        let next = solve_next_velocity(&v, &g, SignConvention::Theorem).unwrap();
        for _ in 0..100 {
            let eta = unit(&random_vec(&mut rng, 6, 1.0));
            assert!(conservation_first_order(&v, &next, &g, &eta).unwrap().abs() < 1e-12);
        }
        let still = conservation_first_order(&v, &v, &[0.0; 6], &unit(&v)).unwrap();
        assert_eq!(still, 0.0);
    }

    #[test]
    fn proposition_triples_leave_twice_the_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_vec(&mut rng, 5, 1.0);
        let g = random_vec(&mut rng, 5, 0.3);
        let next = solve_next_velocity(&v, &g, SignConvention::Proposition).unwrap();
        for _ in 0..20 {
            let eta = unit(&random_vec(&mut rng, 5, 1.0));
            let got = conservation_first_order(&v, &next, &g, &eta).unwrap();
            assert!((got - (-2.0 * dot(&g, &eta))).abs() < 1e-12);
        }
        assert!(matches!(
            conservation_first_order(&v, &next, &g, &[1.0, 1.0, 0.0, 0.0, 0.0]),
            Err(Error::NonUnitDirection(_))
        ));
    }

    #[test]
    fn perturbation_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = random_head(&mut rng, 12, 6, 0.5);
        let h_prev = random_vec(&mut rng, 6, 1.0);
        let h_t = add(&h_prev, &random_vec(&mut rng, 6, 1.0));
        let h_next = el_exact_next_state(&head, &h_prev, &h_t, 3, SignConvention::Theorem).unwrap();
        let eta = unit(&random_vec(&mut rng, 6, 1.0));

        let zero = conservation_perturbation_test(&h_prev, &h_t, &h_next, &head, 3, &[0.0], &eta).unwrap();
        assert_eq!(zero[0].measured, 0.0);

        let eps = default_eps_list();
        let s = conservation_perturbation_test(&h_prev, &h_t, &h_next, &head, 3, &eps, &eta).unwrap();
        for w in s.windows(2) {
            let shrink = w[0].measured.abs() / w[1].measured.abs();
            assert!(shrink > 3.5, "halving eps shrank |dH| only {shrink}x");
        }
        assert!(convergence_order(&s).unwrap() > 1.9);

        // generic triple: first order limit equals the bracket
        let h_next = add(&h_t, &random_vec(&mut rng, 6, 1.0));
        let s = conservation_perturbation_test(&h_prev, &h_t, &h_next, &head, 3, &[1e-5], &eta).unwrap();
        let ratio = s[0].measured / s[0].predicted;
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
        let s = conservation_perturbation_test(&h_prev, &h_t, &h_next, &head, 3, &eps, &eta).unwrap();
        assert!(remainder_order(&s).unwrap() > 1.9);
    }

    #[test]
    fn perturbation_rejects_zero_velocity() {
        let head = identity2();
        let r = conservation_perturbation_test(&[1.0, 1.0], &[1.0, 1.0], &[2.0, 0.0], &head, 0, &[1e-3], &[1.0, 0.0]);
        assert!(matches!(r, Err(Error::DegenerateDynamics)));
        // perturbation that lands exactly on h_prev
        let r = conservation_perturbation_test(&[0.0, 0.0], &[-0.5, 0.0], &[1.0, 0.0], &head, 0, &[0.5], &[1.0, 0.0]);
        assert!(matches!(r, Err(Error::DegenerateDynamics)));
    }
}
