//! Exact finite-state verification of the theory: regularized Bellman
//! operator, dual temperature solve, closed-form policy, value iteration,
//! contraction audit, and EM monotonic improvement. Everything here is
//! computed to solver precision so the function-approximation code can be
//! checked against it.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NpqlError, Result};

/// Lower cap for the dual temperature. Constant-Q rows return this value
/// (the infimum is not attained); the policy then equals the prior to 1e-9,
/// which is the correct limit.
pub const ALPHA_FLOOR: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 1e3;

/// Finite KL-regularized MDP instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularRmdp {
    /// rewards[s, a]
    pub rewards: Array2<f64>,
    /// transitions[s, a, s'] row-stochastic over s'
    pub transitions: Array3<f64>,
    /// prior[s, a] strictly positive rows summing to 1
    pub prior: Array2<f64>,
    pub discount: f64,
    /// KL limit; `f64::INFINITY` recovers the unregularized problem.
    pub epsilon: f64,
}

impl TabularRmdp {
    pub fn new(
        rewards: Array2<f64>,
        transitions: Array3<f64>,
        prior: Array2<f64>,
        discount: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let (s, a) = rewards.dim();
        if transitions.dim() != (s, a, s) || prior.dim() != (s, a) {
            return Err(NpqlError::ShapeMismatch("rmdp matrices".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(NpqlError::InvalidConfig(format!("discount {discount}")));
        }
        if !(epsilon > 0.0) {
            return Err(NpqlError::InvalidConfig(format!("epsilon {epsilon}")));
        }
        for si in 0..s {
            for ai in 0..a {
                let row_sum: f64 = (0..s).map(|sj| transitions[[si, ai, sj]]).sum();
                if (row_sum - 1.0).abs() > 1e-12 {
                    return Err(NpqlError::InvalidConfig(format!(
                        "transition row ({si},{ai}) sums to {row_sum}"
                    )));
                }
            }
            let prior_sum: f64 = prior.row(si).sum();
            if (prior_sum - 1.0).abs() > 1e-12 {
                return Err(NpqlError::InvalidConfig(format!(
                    "prior row {si} sums to {prior_sum}"
                )));
            }
            if prior.row(si).iter().any(|&p| p <= 0.0) {
                return Err(NpqlError::InvalidConfig(format!(
                    "prior row {si} not strictly positive"
                )));
            }
        }
        Ok(Self {
            rewards,
            transitions,
            prior,
            discount,
            epsilon,
        })
    }

    pub fn n_states(&self) -> usize {
        self.rewards.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.rewards.ncols()
    }

    /// Random instance: |S| in [3,8], |A| in [2,6], rewards U[0,1],
    /// Dirichlet(1) transition rows and priors.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let s = rng.gen_range(3..=8);
        let a = rng.gen_range(2..=6);
        let discount = rng.gen_range(0.7..0.95);
        let epsilon = rng.gen_range(0.1..2.0);
        Self::random_sized(s, a, discount, epsilon, rng)
    }

    pub fn random_sized<R: Rng>(
        s: usize,
        a: usize,
        discount: f64,
        epsilon: f64,
        rng: &mut R,
    ) -> Self {
        let rewards = Array2::from_shape_fn((s, a), |_| rng.gen_range(0.0..1.0));
        let mut transitions = Array3::zeros((s, a, s));
        for si in 0..s {
            for ai in 0..a {
                let row = dirichlet_unit(s, rng);
                for (sj, v) in row.iter().enumerate() {
                    transitions[[si, ai, sj]] = *v;
                }
            }
        }
        let mut prior = Array2::zeros((s, a));
        for si in 0..s {
            let row = dirichlet_unit(a, rng);
            for (ai, v) in row.iter().enumerate() {
                prior[[si, ai]] = *v;
            }
        }
        Self::new(rewards, transitions, prior, discount, epsilon).unwrap()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| NpqlError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: TabularRmdp =
            serde_json::from_str(text).map_err(|e| NpqlError::Serde(e.to_string()))?;
        Self::new(
            raw.rewards,
            raw.transitions,
            raw.prior,
            raw.discount,
            raw.epsilon,
        )
    }
}

/// Dirichlet(1, ..., 1) draw via normalized exponentials, renormalized so the
/// 1e-12 row-sum invariant holds exactly.
fn dirichlet_unit<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().ln().max(1e-12)).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    let sum2: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum2);
    row
}

/// Max of Q over the prior's support. Stabilizing with an off-support max
/// would underflow every on-support term when the gap is large.
fn support_max(q_row: &ArrayView1<f64>, b_row: &ArrayView1<f64>) -> f64 {
    q_row
        .iter()
        .zip(b_row.iter())
        .filter(|(_, &b)| b > 0.0)
        .map(|(&q, _)| q)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Dual objective g(alpha) = alpha * eps + alpha * log sum_a b(a) exp(Q(a)/alpha).
pub fn dual_objective(q_row: &ArrayView1<f64>, b_row: &ArrayView1<f64>, eps: f64, alpha: f64) -> f64 {
    let m = support_max(q_row, b_row);
    let lse: f64 = q_row
        .iter()
        .zip(b_row.iter())
        .map(|(&q, &b)| b * ((q - m) / alpha).exp())
        .sum::<f64>()
        .ln();
    alpha * eps + m + alpha * lse
}

/// Minimize the dual over [ALPHA_FLOOR, ALPHA_MAX] by golden section.
/// Constant Q rows return ALPHA_FLOOR directly.
pub fn solve_alpha(q_row: &ArrayView1<f64>, b_row: &ArrayView1<f64>, eps: f64) -> Result<f64> {
    if q_row.len() != b_row.len() || q_row.is_empty() {
        return Err(NpqlError::ShapeMismatch("alpha solve rows".into()));
    }
    if !(eps > 0.0) {
        return Err(NpqlError::InvalidConfig("eps must be positive".into()));
    }
    let q_min = q_row.iter().cloned().fold(f64::INFINITY, f64::min);
    let q_max = q_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if q_max - q_min < 1e-14 || eps.is_infinite() {
        return Ok(ALPHA_FLOOR);
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (ALPHA_FLOOR, ALPHA_MAX);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = dual_objective(q_row, b_row, eps, x1);
    let mut f2 = dual_objective(q_row, b_row, eps, x2);
    while hi - lo > 1e-12 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = dual_objective(q_row, b_row, eps, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = dual_objective(q_row, b_row, eps, x2);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// pi(a) proportional to b(a) exp(Q(a)/alpha), log-sum-exp normalized.
pub fn closed_form_policy(
    q_row: &ArrayView1<f64>,
    b_row: &ArrayView1<f64>,
    alpha: f64,
) -> Result<Array1<f64>> {
    if !(alpha > 0.0) {
        return Err(NpqlError::InvalidConfig("alpha must be positive".into()));
    }
    let m = support_max(q_row, b_row);
    let mut pi: Array1<f64> = q_row
        .iter()
        .zip(b_row.iter())
        .map(|(&q, &b)| b * ((q - m) / alpha).exp())
        .collect();
    let sum = pi.sum();
    pi /= sum;
    Ok(pi)
}

/// State value under the exact constrained maximization, reported as the
/// dual optimum g(alpha*). At an interior optimum this equals E_pi*[Q] by
/// strong duality, but unlike the primal expectation it is stationary in
/// alpha, so the solver's bracket width does not leak into the value.
/// Infinite epsilon degenerates to the greedy max over the prior's support.
pub fn state_value(mdp: &TabularRmdp, q_row: &ArrayView1<f64>, s: usize) -> Result<f64> {
    let b_row = mdp.prior.row(s);
    let m = support_max(q_row, &b_row);
    if mdp.epsilon.is_infinite() {
        return Ok(m);
    }
    // Slack constraint: a point mass on the argmax set is feasible, so the
    // value is exactly m (and g(alpha) > m for every alpha > 0, so the
    // clamped dual would overshoot by up to alpha_floor * eps here).
    let argmax_mass: f64 = q_row
        .iter()
        .zip(b_row.iter())
        .filter(|(&q, &b)| b > 0.0 && m - q < 1e-12)
        .map(|(_, &b)| b)
        .sum();
    if -argmax_mass.ln() <= mdp.epsilon {
        return Ok(m);
    }
    let alpha = solve_alpha(q_row, &b_row, mdp.epsilon)?;
    Ok(dual_objective(q_row, &b_row, mdp.epsilon, alpha))
}

/// One application of the regularized Bellman operator:
/// TQ[s,a] = r[s,a] + gamma * sum_s' P[s,a,s'] V(s').
pub fn regularized_bellman_apply(mdp: &TabularRmdp, q: &Array2<f64>) -> Result<Array2<f64>> {
    let (s, a) = mdp.rewards.dim();
    if q.dim() != (s, a) {
        return Err(NpqlError::ShapeMismatch("Q shape".into()));
    }
    let mut values = Array1::zeros(s);
    for si in 0..s {
        values[si] = state_value(mdp, &q.row(si), si)?;
    }
    let mut tq = mdp.rewards.clone();
    for si in 0..s {
        for ai in 0..a {
            let mut acc = 0.0;
            for sj in 0..s {
                acc += mdp.transitions[[si, ai, sj]] * values[sj];
            }
            tq[[si, ai]] += mdp.discount * acc;
        }
    }
    Ok(tq)
}

/// Iterate the regularized operator to its fixed point. Returns the fixed
/// point, the converged per-state policy, and the iteration count.
pub fn value_iteration(
    mdp: &TabularRmdp,
    tol: f64,
) -> Result<(Array2<f64>, Array2<f64>, usize)> {
    if !(tol > 0.0) {
        return Err(NpqlError::InvalidConfig("tol must be positive".into()));
    }
    let (s, a) = mdp.rewards.dim();
    let mut q = Array2::zeros((s, a));
    let mut iters = 0;
    loop {
        let tq = regularized_bellman_apply(mdp, &q)?;
        let delta = (&tq - &q)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        q = tq;
        iters += 1;
        if delta < tol {
            break;
        }
        if iters > 1_000_000 {
            return Err(NpqlError::NonFinite("value iteration diverged".into()));
        }
    }
    let mut policy = Array2::zeros((s, a));
    for si in 0..s {
        let b_row = mdp.prior.row(si);
        let pi = if mdp.epsilon.is_infinite() {
            greedy_over_support(&q.row(si), &b_row)
        } else {
            let alpha = solve_alpha(&q.row(si), &b_row, mdp.epsilon)?;
            closed_form_policy(&q.row(si), &b_row, alpha)?
        };
        policy.row_mut(si).assign(&pi);
    }
    Ok((q, policy, iters))
}

fn greedy_over_support(q_row: &ArrayView1<f64>, b_row: &ArrayView1<f64>) -> Array1<f64> {
    let mut best = usize::MAX;
    let mut best_q = f64::NEG_INFINITY;
    for (a, (&q, &b)) in q_row.iter().zip(b_row.iter()).enumerate() {
        if b > 0.0 && q > best_q {
            best_q = q;
            best = a;
        }
    }
    let mut pi = Array1::zeros(q_row.len());
    pi[best] = 1.0;
    pi
}

/// Classical (unregularized) value iteration, used as the epsilon -> infinity
/// cross-check.
pub fn classical_value_iteration(mdp: &TabularRmdp, tol: f64) -> Result<Array2<f64>> {
    let unreg = TabularRmdp {
        epsilon: f64::INFINITY,
        ..mdp.clone()
    };
    let (q, _, _) = value_iteration(&unreg, tol)?;
    Ok(q)
}

/// Randomized contraction audit: over random Q pairs, asserts
/// ||TQ1 - TQ2||_inf <= gamma * ||Q1 - Q2||_inf + 1e-9 and returns the
/// maximal observed ratio.
pub fn check_contraction<R: Rng>(mdp: &TabularRmdp, trials: usize, rng: &mut R) -> Result<f64> {
    if trials == 0 {
        return Err(NpqlError::InvalidConfig("trials must be >= 1".into()));
    }
    let (s, a) = mdp.rewards.dim();
    let mut max_ratio: f64 = 0.0;
    for _ in 0..trials {
        let q1 = Array2::from_shape_fn((s, a), |_| rng.gen_range(-5.0..5.0));
        let q2 = Array2::from_shape_fn((s, a), |_| rng.gen_range(-5.0..5.0));
        let tq1 = regularized_bellman_apply(mdp, &q1)?;
        let tq2 = regularized_bellman_apply(mdp, &q2)?;
        let num = (&tq1 - &tq2).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let den = (&q1 - &q2).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if den == 0.0 {
            continue;
        }
        if num > mdp.discount * den + 1e-9 {
            return Err(NpqlError::NonFinite(format!(
                "contraction violated: ||TQ1-TQ2|| = {num}, gamma*||Q1-Q2|| = {}",
                mdp.discount * den
            )));
        }
        max_ratio = max_ratio.max(num / den);
    }
    Ok(max_ratio)
}

/// KL(p || q) = sum p ln(p/q) with 0 ln 0 = 0. Support violations return
/// +infinity.
pub fn kl_divergence(p: &ArrayView1<f64>, q: &ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (pi / qi).ln();
    }
    acc
}

/// Exact policy evaluation: V = (I - gamma P_pi)^{-1} r_pi.
pub fn policy_evaluation(mdp: &TabularRmdp, policy: &Array2<f64>) -> Result<Array1<f64>> {
    let s = mdp.n_states();
    let a = mdp.n_actions();
    let mut p_pi = Array2::<f64>::zeros((s, s));
    let mut r_pi = Array1::zeros(s);
    for si in 0..s {
        for ai in 0..a {
            let w = policy[[si, ai]];
            r_pi[si] += w * mdp.rewards[[si, ai]];
            for sj in 0..s {
                p_pi[[si, sj]] += w * mdp.transitions[[si, ai, sj]];
            }
        }
    }
    let mut system = Array2::<f64>::zeros((s, s));
    for si in 0..s {
        for sj in 0..s {
            system[[si, sj]] = (if si == sj { 1.0 } else { 0.0 }) - mdp.discount * p_pi[[si, sj]];
        }
    }
    solve_linear(&system, &r_pi)
}

/// Gaussian elimination with partial pivoting; instances are tiny.
fn solve_linear(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = b.len();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[[row, col]].abs() > m[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if m[[pivot, col]].abs() < 1e-14 {
            return Err(NpqlError::NonFinite("singular system".into()));
        }
        if pivot != col {
            for j in 0..n {
                let tmp = m[[col, j]];
                m[[col, j]] = m[[pivot, j]];
                m[[pivot, j]] = tmp;
            }
            rhs.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for j in col..n {
                m[[row, j]] -= f * m[[col, j]];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for j in row + 1..n {
            acc -= m[[row, j]] * x[j];
        }
        x[row] = acc / m[[row, row]];
    }
    Ok(x)
}

/// One EM trace entry.
#[derive(Debug, Clone)]
pub struct EmRecord {
    /// J(q^k, theta_k): expected value of the E-step policy under a uniform
    /// state distribution, by exact policy evaluation.
    pub objective: f64,
    /// max_s KL(q^k_s || b_{theta_k, s})
    pub max_kl: f64,
}

/// Alternate exact E-steps (value iteration under the current prior) and
/// M-steps (exact KL projection onto the all-categoricals family, i.e.
/// b <- q). Returns the J trace, which must be non-decreasing.
pub fn em_joint_solve(mdp: &TabularRmdp, iterations: usize, tol: f64) -> Result<Vec<EmRecord>> {
    let mut current = mdp.clone();
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (_, policy, _) = value_iteration(&current, tol)?;
        let values = policy_evaluation(&current, &policy)?;
        let objective = values.mean().unwrap();
        let max_kl = (0..current.n_states())
            .map(|s| kl_divergence(&policy.row(s), &current.prior.row(s)))
            .fold(0.0f64, f64::max);
        trace.push(EmRecord { objective, max_kl });
        // M-step: the all-categoricals family admits the exact projection
        current.prior = policy.clone();
    }
    Ok(trace)
}
