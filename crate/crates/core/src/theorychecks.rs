//! Runtime estimators for the convergence analysis.
//!
//! Each round the engine can record the global objective `F`, its gradient,
//! and every client's full-batch local gradient at the broadcast point. From
//! those this module estimates gradient dissimilarity `B`, the alignment
//! constant `ε`, a trajectory-local smoothness `L`, and checks the per-round
//! descent inequality `F^t − F^{t+1} ≥ ρ‖∇F^t‖²` with
//! `ρ = η(ε − LηB²/2)`, plus the averaged form
//! `(1/T) Σ ρ‖∇F^t‖² ≤ F⁰ − F*`, using the best observed `F` for `F*`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradients below this squared norm make the ratio estimators undefined.
pub const DEGENERATE_GRAD_NORM_SQ: f64 = 1e-12;

/// One client's full-batch gradient and sample count.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientGradient {
    pub grad: Vec<f64>,
    pub n_k: usize,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ (n_k/N) g_k` over the given clients, in order.
pub fn weighted_gradient(clients: &[ClientGradient]) -> Result<Vec<f64>> {
    weighted_subset(clients, &(0..clients.len()).collect::<Vec<_>>())
}

fn weighted_subset(clients: &[ClientGradient], subset: &[usize]) -> Result<Vec<f64>> {
    let first = subset
        .first()
        .and_then(|&i| clients.get(i))
        .ok_or_else(|| Error::invalid("no client gradients"))?;
    let total: usize = subset.iter().map(|&i| clients[i].n_k).sum();
    if total == 0 {
        return Err(Error::invalid("total sample count is zero"));
    }
    let mut out = vec![0.0; first.grad.len()];
    for &i in subset {
        let c = clients.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: clients.len(),
        })?;
        if c.grad.len() != out.len() {
            return Err(Error::invalid("client gradients have different lengths"));
        }
        let w = c.n_k as f64 / total as f64;
        out.iter_mut().zip(&c.grad).for_each(|(o, g)| *o += w * g);
    }
    Ok(out)
}

/// `B = √(E‖∇f_k‖² / ‖∇F‖²)` with the expectation weighted by `n_k/N`.
/// `None` when `‖∇F‖²` is degenerate.
pub fn estimate_b(clients: &[ClientGradient]) -> Result<Option<f64>> {
    let grad_f = weighted_gradient(clients)?;
    let denom = norm_sq(&grad_f);
    if denom <= DEGENERATE_GRAD_NORM_SQ {
        return Ok(None);
    }
    let total: usize = clients.iter().map(|c| c.n_k).sum();
    let expected: f64 = clients
        .iter()
        .map(|c| c.n_k as f64 / total as f64 * norm_sq(&c.grad))
        .sum();
    Ok(Some((expected / denom).sqrt()))
}

/// Tightest `ε` with `∇Fᵀ E[∇f_k] ≥ ε‖∇F‖²`, where `∇F` is the weighted
/// gradient over all clients and `E[∇f_k]` the weighted gradient over the
/// clients that actually took part in the round (the direction the server
/// applies). `None` when `‖∇F‖²` is degenerate.
pub fn estimate_eps(clients: &[ClientGradient], participating: &[usize]) -> Result<Option<f64>> {
    let grad_f = weighted_gradient(clients)?;
    let denom = norm_sq(&grad_f);
    if denom <= DEGENERATE_GRAD_NORM_SQ {
        return Ok(None);
    }
    let direction = weighted_subset(clients, participating)?;
    Ok(Some(dot(&grad_f, &direction) / denom))
}

/// Objective state logged at the start of a round (and once after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub f_value: f64,
    pub grad_norm_sq: f64,
    pub b_est: Option<f64>,
    pub eps_est: Option<f64>,
    /// Global parameters and gradient, kept for the smoothness estimate.
    #[serde(skip)]
    pub params: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// Largest secant ratio `‖∇F_{t+1} − ∇F_t‖ / ‖w_{t+1} − w_t‖` over
/// consecutive observations; `None` if no pair moved.
pub fn estimate_smoothness(history: &[Observation]) -> Option<f64> {
    history
        .windows(2)
        .filter_map(|pair| {
            let dw: f64 = pair[1]
                .params
                .iter()
                .zip(&pair[0].params)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let dg: f64 = pair[1]
                .grad
                .iter()
                .zip(&pair[0].grad)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (dw > 0.0).then(|| dg / dw)
        })
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// Zero-based round index `t`.
    pub round: usize,
    pub grad_norm_sq: f64,
    pub b_est: Option<f64>,
    pub eps_est: Option<f64>,
    /// `None` when `B` or `ε` is undefined at this point.
    pub rho: Option<f64>,
    pub decrease_observed: f64,
    pub decrease_bound: f64,
    pub bound_satisfied: bool,
    /// `ρ ≤ 0`: the step size is too large for the guarantee to say anything.
    pub vacuous: bool,
    /// `F⁰` minus the best objective seen up to `t + 1`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentSummary {
    pub reports: Vec<TheoryReport>,
    pub smoothness: f64,
    /// `(1/T) Σ ρ‖∇F^t‖²`.
    pub aggregate_lhs: f64,
    /// `F⁰ − F*` with `F*` the best observed objective.
    pub delta: f64,
    pub aggregate_satisfied: bool,
    pub violations: Vec<usize>,
    pub vacuous_rounds: Vec<usize>,
}

impl DescentSummary {
    pub fn vacuous_message(&self) -> Option<&'static str> {
        (!self.vacuous_rounds.is_empty()).then_some("step size too large for guarantee")
    }
}

fn tolerance(scale: f64) -> f64 {
    1e-9 * scale.abs().max(1.0)
}

/// Per-round and averaged descent checks over `history` (`T + 1` points for
/// `T` rounds). Never fails on a violated bound; violations are reported.
pub fn descent_check(history: &[Observation], eta: f64, smoothness: f64) -> Result<DescentSummary> {
    if history.len() < 2 {
        return Err(Error::invalid("descent check needs at least two observations"));
    }
    if !(eta > 0.0 && smoothness >= 0.0) {
        return Err(Error::invalid(format!(
            "need eta > 0 and L >= 0, got eta={eta}, L={smoothness}"
        )));
    }
    let f0 = history[0].f_value;
    let mut best = f0;
    let mut reports = Vec::with_capacity(history.len() - 1);
    let mut lhs_sum = 0.0;
    for (t, pair) in history.windows(2).enumerate() {
        let (now, next) = (&pair[0], &pair[1]);
        best = best.min(next.f_value);
        let rho = match (now.b_est, now.eps_est) {
            (Some(b), Some(eps)) => Some(eta * (eps - smoothness * eta * b * b / 2.0)),
            _ => None,
        };
        let bound = rho.map_or(0.0, |r| r * now.grad_norm_sq);
        let observed = now.f_value - next.f_value;
        lhs_sum += bound;
        reports.push(TheoryReport {
            round: t,
            grad_norm_sq: now.grad_norm_sq,
            b_est: now.b_est,
            eps_est: now.eps_est,
            rho,
            decrease_observed: observed,
            decrease_bound: bound,
            bound_satisfied: observed >= bound - tolerance(now.f_value),
            vacuous: rho.is_some_and(|r| r <= 0.0),
            delta: f0 - best,
        });
    }
    let t = reports.len() as f64;
    let aggregate_lhs = lhs_sum / t;
    let delta = f0 - best;
    Ok(DescentSummary {
        violations: reports.iter().filter(|r| !r.bound_satisfied).map(|r| r.round).collect(),
        vacuous_rounds: reports.iter().filter(|r| r.vacuous).map(|r| r.round).collect(),
        reports,
        smoothness,
        aggregate_lhs,
        delta,
        aggregate_satisfied: aggregate_lhs <= delta + tolerance(f0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cg(grad: &[f64], n_k: usize) -> ClientGradient {
        ClientGradient {
            grad: grad.to_vec(),
            n_k,
        }
    }

    #[test]
    fn identical_clients() {
        let g = [0.3, -1.2, 4.0];
        let clients = vec![cg(&g, 10), cg(&g, 30), cg(&g, 5)];
        let b = estimate_b(&clients).unwrap().unwrap();
        let eps = estimate_eps(&clients, &[0, 1, 2]).unwrap().unwrap();
        assert!((b - 1.0).abs() < 1e-9);
        assert!((eps - 1.0).abs() < 1e-9);
    }

    #[test]
    fn opposite_gradients_are_undefined() {
        let clients = vec![cg(&[1.0, 2.0], 4), cg(&[-1.0, -2.0], 4)];
        assert_eq!(estimate_b(&clients).unwrap(), None);
        assert_eq!(estimate_eps(&clients, &[0]).unwrap(), None);
    }

    #[test]
    fn orthogonal_unit_gradients() {
        let clients = vec![cg(&[1.0, 0.0], 7), cg(&[0.0, 1.0], 7)];
        let b = estimate_b(&clients).unwrap().unwrap();
        assert!((b - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eps_zero_when_round_direction_is_orthogonal() {
        // ∇F = (0, 0.5); only client 0 took part and moved along (1, 0).
        let clients = vec![cg(&[1.0, 0.0], 1), cg(&[-1.0, 1.0], 1)];
        assert_eq!(estimate_eps(&clients, &[0]).unwrap(), Some(0.0));
        assert_eq!(estimate_eps(&clients, &[0, 1]).unwrap(), Some(1.0));
    }

    #[test]
    fn estimates_are_scale_consistent() {
        let base = vec![cg(&[1.0, 2.0], 3), cg(&[-0.5, 4.0], 5), cg(&[2.0, 0.1], 2)];
        let scaled: Vec<_> = base.iter().map(|c| cg(&c.grad, c.n_k * 7)).collect();
        let b0 = estimate_b(&base).unwrap().unwrap();
        let b1 = estimate_b(&scaled).unwrap().unwrap();
        assert!((b0 - b1).abs() < 1e-12);
        let e0 = estimate_eps(&base, &[0, 2]).unwrap().unwrap();
        let e1 = estimate_eps(&scaled, &[0, 2]).unwrap().unwrap();
        assert!((e0 - e1).abs() < 1e-12);
        assert_eq!(estimate_b(&base).unwrap(), estimate_b(&base).unwrap());
    }

    fn quadratic_history(w0: f64, eta: f64, steps: usize) -> Vec<Observation> {
        let mut w = w0;
        (0..=steps)
            .map(|_| {
                let g = 2.0 * w;
                let obs = Observation {
                    f_value: w * w,
                    grad_norm_sq: g * g,
                    b_est: (g * g > DEGENERATE_GRAD_NORM_SQ).then_some(1.0),
                    eps_est: (g * g > DEGENERATE_GRAD_NORM_SQ).then_some(1.0),
                    params: vec![w],
                    grad: vec![g],
                };
                w -= eta * g;
                obs
            })
            .collect()
    }

    #[test]
    fn quadratic_satisfies_both_bounds() {
        let history = quadratic_history(3.0, 0.1, 20);
        let l = estimate_smoothness(&history).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        let s = descent_check(&history, 0.1, l).unwrap();
        assert!(s.violations.is_empty(), "{:?}", s.violations);
        assert!(s.aggregate_satisfied);
        assert!(s.vacuous_rounds.is_empty());
        // ρ = 0.1·(1 − 2·0.1/2) = 0.09 and the decrease is exactly 0.36·w².
        assert!((s.reports[0].rho.unwrap() - 0.09).abs() < 1e-15);
        assert!((s.reports[0].decrease_observed - 0.36 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn large_step_is_vacuous() {
        let history = quadratic_history(1.0, 1.5, 3);
        let s = descent_check(&history, 1.5, 2.0).unwrap();
        assert!(s.reports.iter().all(|r| r.vacuous));
        assert_eq!(s.vacuous_message(), Some("step size too large for guarantee"));
    }

    #[test]
    fn optimum_start_is_trivially_satisfied() {
        let history = quadratic_history(0.0, 0.1, 3);
        let s = descent_check(&history, 0.1, 2.0).unwrap();
        for r in &s.reports {
            assert_eq!(r.decrease_observed, 0.0);
            assert_eq!(r.decrease_bound, 0.0);
            assert!(r.bound_satisfied);
        }
        assert_eq!(estimate_smoothness(&history), None);
        assert!(descent_check(&history[..1], 0.1, 2.0).is_err());
    }
}
