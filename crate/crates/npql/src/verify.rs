//! Verification suites shared by the `verify` subcommand and the integration
//! tests: exact tabular audits plus finite-difference checks on every learned
//! head. Each suite returns a machine-readable report.

use crate::agent::{
    alpha_dual_loss, alpha_head_loss, boltzmann_weights, e_step_loss, m_step_loss,
    prepare_e_step_targets, prepare_m_step, AgentConfig, NpqlNetworks,
};
use crate::baselines::{mpo_projection_loss, prepare_sac_samples, sac_projection_loss, GaussianPolicy};
use crate::dist::{HybridAction, Support};
use crate::error::{NpqlError, Result};
use crate::nn::{adam_step, AdamState, Mlp};
use crate::oracle::{
    check_contraction, classical_value_iteration, dual_objective, em_joint_solve, kl_divergence,
    regularized_bellman_apply, solve_alpha, state_value, value_iteration, TabularRmdp,
};
use crate::replay::NStepTransition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SUITES: &[&str] = &[
    "contraction",
    "fixed-point",
    "em",
    "identity",
    "gradients",
    "projection",
    "alpha",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

struct Audit {
    checks: usize,
    failures: Vec<String>,
}

impl Audit {
    fn new() -> Self {
        Self {
            checks: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(detail());
        }
    }

    fn into_report(self, suite: &str, started: std::time::Instant) -> SuiteReport {
        SuiteReport {
            suite: suite.to_string(),
            passed: self.failures.is_empty(),
            checks: self.checks,
            failures: self.failures,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audit = match name {
        "contraction" => suite_contraction(&mut rng)?,
        "fixed-point" => suite_fixed_point(&mut rng)?,
        "em" => suite_em(&mut rng)?,
        "identity" => suite_identity(&mut rng)?,
        "gradients" => suite_gradients(&mut rng)?,
        "projection" => suite_projection(&mut rng)?,
        "alpha" => suite_alpha(&mut rng)?,
        other => {
            return Err(NpqlError::InvalidConfig(format!(
                "unknown suite {other:?}; expected one of {SUITES:?}"
            )))
        }
    };
    Ok(audit.into_report(name, started))
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, seed)).collect()
}

/// 100 random instances x 100 Q-pairs: the operator never expands distances
/// by more than gamma.
fn suite_contraction<R: Rng>(rng: &mut R) -> Result<Audit> {
    let mut audit = Audit::new();
    for i in 0..100 {
        let mdp = TabularRmdp::random(rng);
        let ratio = check_contraction(&mdp, 100, rng)?;
        audit.check(ratio <= mdp.discount + 1e-9, || {
            format!("instance {i}: ratio {ratio} > gamma {}", mdp.discount)
        });
    }
    Ok(audit)
}

/// Fixed points of the operator: small residual, feasible policies, and
/// dual/primal agreement on the state values.
fn suite_fixed_point<R: Rng>(rng: &mut R) -> Result<Audit> {
    let mut audit = Audit::new();
    for i in 0..50 {
        let mdp = TabularRmdp::random(rng);
        let (q, policy, _) = value_iteration(&mdp, 1e-10)?;
        let tq = regularized_bellman_apply(&mdp, &q)?;
        let residual = (&tq - &q).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        audit.check(residual < 1e-9, || format!("instance {i}: residual {residual}"));
        for s in 0..mdp.n_states() {
            let kl = kl_divergence(&policy.row(s), &mdp.prior.row(s));
            audit.check(kl <= mdp.epsilon + 1e-6, || {
                format!("instance {i} state {s}: KL {kl} > eps {}", mdp.epsilon)
            });
            // primal value of the exact optimizer: when the constraint is
            // slack the optimum is the prior-weighted point mass on the
            // argmax set (value = support max); otherwise the interior
            // closed-form policy
            let q_row = q.row(s);
            let b_row = mdp.prior.row(s);
            let m = q_row
                .iter()
                .zip(b_row.iter())
                .filter(|(_, &b)| b > 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let argmax_mass: f64 = q_row
                .iter()
                .zip(b_row.iter())
                .filter(|(&v, &b)| b > 0.0 && m - v < 1e-12)
                .map(|(_, &b)| b)
                .sum();
            // exact duality needs an interior multiplier; a clamped alpha
            // (optimum below the solver floor) biases the dual by
            // O(alpha_floor * eps) and is excluded, as is the slack case
            // where both sides are the support max by construction
            let primal = if -argmax_mass.ln() <= mdp.epsilon {
                Some(m)
            } else {
                let alpha = solve_alpha(&q_row, &b_row, mdp.epsilon)?;
                if alpha > 1.5e-3 {
                    let pi = crate::oracle::closed_form_policy(&q_row, &b_row, alpha)?;
                    Some(pi.iter().zip(q_row.iter()).map(|(&p, &v)| p * v).sum())
                } else {
                    None
                }
            };
            if let Some(primal) = primal {
                let dual = state_value(&mdp, &q_row, s)?;
                audit.check((dual - primal).abs() < 1e-7, || {
                    format!("instance {i} state {s}: dual {dual} vs primal {primal}")
                });
            }
        }
    }
    Ok(audit)
}

/// EM on the all-categoricals family: the joint objective never decreases,
/// and with the constraint removed it matches classical value iteration.
fn suite_em<R: Rng>(rng: &mut R) -> Result<Audit> {
    let mut audit = Audit::new();
    for i in 0..50 {
        let mdp = TabularRmdp::random(rng);
        let trace = em_joint_solve(&mdp, 20, 1e-12)?;
        for (k, pair) in trace.windows(2).enumerate() {
            audit.check(pair[1].objective >= pair[0].objective - 1e-10, || {
                format!(
                    "instance {i} step {k}: J {} -> {}",
                    pair[0].objective, pair[1].objective
                )
            });
        }
    }
    for i in 0..10 {
        let mut mdp = TabularRmdp::random(rng);
        mdp.epsilon = f64::INFINITY;
        let trace = em_joint_solve(&mdp, 5, 1e-12)?;
        let q_star = classical_value_iteration(&mdp, 1e-12)?;
        let optimal = (0..mdp.n_states())
            .map(|s| q_star.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / mdp.n_states() as f64;
        let reached = trace.last().unwrap().objective;
        audit.check((reached - optimal).abs() < 1e-6, || {
            format!("instance {i}: EM {reached} vs classical {optimal}")
        });
    }
    Ok(audit)
}

/// Mix-then-project equals the weighted per-sample projection: the projection
/// and cross-entropy are both linear in the target distribution.
fn suite_identity<R: Rng>(rng: &mut R) -> Result<Audit> {
    let mut audit = Audit::new();
    let support = Support::new(0.0, 1.05, 51)?;
    for i in 0..1000 {
        let n = rng.gen_range(2..10);
        let reward = rng.gen_range(0.0..1.0);
        let discount = rng.gen_range(0.0..1.0);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let wsum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
        let dists: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..51).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let pred: Vec<f64> = {
            let raw: Vec<f64> = (0..51).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        // per-sample: project each, average the cross-entropies with weights
        let mut lhs = 0.0;
        for (d, &w) in dists.iter().zip(&weights) {
            let mut proj = vec![0.0; 51];
            support.project_into(reward, discount, d, 1.0, &mut proj);
            lhs -= w * proj
                .iter()
                .zip(&pred)
                .map(|(&t, &p)| t * p.ln())
                .sum::<f64>();
        }
        // pre-averaged: mix first, project once
        let mut mixed = vec![0.0; 51];
        for (d, &w) in dists.iter().zip(&weights) {
            for (m, &v) in mixed.iter_mut().zip(d) {
                *m += w * v;
            }
        }
        let mut proj = vec![0.0; 51];
        support.project_into(reward, discount, &mixed, 1.0, &mut proj);
        let rhs = -proj
            .iter()
            .zip(&pred)
            .map(|(&t, &p)| t * p.ln())
            .sum::<f64>();
        let rel = (lhs - rhs).abs() / rhs.abs().max(1e-12);
        audit.check(rel < 1e-10, || format!("batch {i}: relative gap {rel}"));
    }
    Ok(audit)
}

fn tiny_cfg() -> AgentConfig {
    AgentConfig {
        trunk_layers: vec![10, 6],
        head_hidden: 8,
        z_hidden: 10,
        alpha_hidden: 6,
        n_policy: 6,
        n_target: 6,
        batch_size: 3,
        ..AgentConfig::default()
    }
}

fn random_batch<R: Rng>(obs_dim: usize, n: usize, rng: &mut R) -> Vec<NStepTransition> {
    (0..n)
        .map(|_| NStepTransition {
            obs: (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            action: HybridAction::new(
                vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                rng.gen(),
            ),
            ap_labels: (0..3)
                .map(|_| {
                    (
                        vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        rng.gen(),
                    )
                })
                .collect(),
            cumulative_reward: rng.gen_range(0.0..1.0),
            bootstrap_obs: (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            discount: rng.gen_range(0.5..0.99),
            done: rng.gen_bool(0.2),
        })
        .collect()
}

fn fd_check(
    audit: &mut Audit,
    label: &str,
    instance: usize,
    mlp_params: &[f64],
    analytic: &[f64],
    probes: usize,
    mut eval: impl FnMut(&[f64]) -> f64,
) {
    let h = 1e-6;
    for p in 0..probes {
        let idx = (p * 7919 + instance * 104729) % mlp_params.len();
        let mut plus = mlp_params.to_vec();
        plus[idx] += h;
        let mut minus = mlp_params.to_vec();
        minus[idx] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = analytic[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        audit.check(rel < 1e-4, || {
            format!("{label} instance {instance} param {idx}: fd {fd} vs analytic {an}")
        });
    }
}

fn with_params(mlp: &Mlp, params: &[f64]) -> Mlp {
    let mut m = mlp.clone();
    m.set_params(params).unwrap();
    m
}

/// Central finite differences against every analytic gradient: critic heads,
/// the prior head, the temperature head, the dual derivative, and both
/// parametric projections.
fn suite_gradients<R: Rng>(rng: &mut R) -> Result<Audit> {
    let mut audit = Audit::new();
    let cfg = tiny_cfg();
    let obs_dim = 7;
    for i in 0..50 {
        let nets = NpqlNetworks::new(obs_dim, 3, 2, &cfg, rng)?;
        let batch = random_batch(obs_dim, cfg.batch_size, rng);
        let batch_obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
        let targets = prepare_e_step_targets(&batch, &nets, &cfg, rng)?;
        let grads = e_step_loss(&batch, &targets, &nets, &cfg)?;

        // critic + behavior-cloning heads, then the shared trunk
        for (label, mlp, g) in [
            ("e-step/trunk", &nets.trunk, &grads.trunk),
            ("e-step/head_ap", &nets.head_ap, &grads.head_ap),
            ("e-step/head_z", &nets.head_z, &grads.head_z),
        ] {
            fd_check(&mut audit, label, i, &mlp.params(), &g.flat(), 2, |p| {
                let mut work = nets.clone();
                match label {
                    "e-step/trunk" => work.trunk = with_params(mlp, p),
                    "e-step/head_ap" => work.head_ap = with_params(mlp, p),
                    _ => work.head_z = with_params(mlp, p),
                }
                e_step_loss(&batch, &targets, &work, &cfg).unwrap().loss(&cfg)
            });
        }

        let samples = prepare_m_step(&batch_obs, &nets, &cfg, rng)?;
        let nu = 0.3;
        let (_, m_grads, _) = m_step_loss(&samples, &nets, &cfg, nu)?;
        fd_check(
            &mut audit,
            "m-step/head_bp",
            i,
            &nets.head_bp.params(),
            &m_grads.flat(),
            2,
            |p| {
                let mut work = nets.clone();
                work.head_bp = with_params(&nets.head_bp, p);
                m_step_loss(&samples, &work, &cfg, nu).unwrap().0
            },
        );

        let (_, a_grads, _) = alpha_head_loss(&samples, &nets, &cfg)?;
        fd_check(
            &mut audit,
            "alpha/head",
            i,
            &nets.head_alpha.params(),
            &a_grads.flat(),
            2,
            |p| {
                let mut work = nets.clone();
                work.head_alpha = with_params(&nets.head_alpha, p);
                alpha_head_loss(&samples, &work, &cfg).unwrap().0
            },
        );

        // scalar dual derivative
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let alpha = rng.gen_range(0.05..2.0);
        let (_, d) = alpha_dual_loss(&q, cfg.eps, alpha)?;
        let h = 1e-6;
        let fd = (alpha_dual_loss(&q, cfg.eps, alpha + h)?.0
            - alpha_dual_loss(&q, cfg.eps, alpha - h)?.0)
            / (2.0 * h);
        audit.check((fd - d).abs() / fd.abs().max(d.abs()).max(1e-3) < 1e-4, || {
            format!("alpha/dual instance {i}: fd {fd} vs analytic {d}")
        });

        // parametric projections
        let policy = GaussianPolicy::new(nets.phi_dim(), 2, 8, rng)?;
        let (_, mpo_grads) = mpo_projection_loss(&samples, &policy)?;
        fd_check(
            &mut audit,
            "mpo/policy",
            i,
            &policy.head.params(),
            &mpo_grads.flat(),
            2,
            |p| {
                let mut work = policy.clone();
                work.head = with_params(&policy.head, p);
                mpo_projection_loss(&samples, &work).unwrap().0
            },
        );
        let sac_samples = prepare_sac_samples(&batch_obs, &nets, i % 2 == 0, rng)?;
        let (_, sac_grads) = sac_projection_loss(&sac_samples, &policy, &nets)?;
        fd_check(
            &mut audit,
            "sac/policy",
            i,
            &policy.head.params(),
            &sac_grads.flat(),
            2,
            |p| {
                let mut work = policy.clone();
                work.head = with_params(&policy.head, p);
                sac_projection_loss(&sac_samples, &work, &nets).unwrap().0
            },
        );
    }
    Ok(audit)
}

/// 10,000 random categorical projections: mass conserved to 1e-9 and, when
/// nothing clips at the support edges, the mean shifts exactly (within one
/// atom spacing).
fn suite_projection<R: Rng>(rng: &mut R) -> Result<Audit> {
    let mut audit = Audit::new();
    let support = Support::new(0.0, 1.05, 51)?;
    let spacing = 1.05 / 50.0;
    for i in 0..10_000 {
        let reward = rng.gen_range(0.0..1.0);
        let discount = rng.gen_range(0.0..1.0);
        let raw: Vec<f64> = (0..51).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.into_iter().map(|v| v / s).collect();
        let mut proj = vec![0.0; 51];
        support.project_into(reward, discount, &probs, 1.0, &mut proj);
        let mass: f64 = proj.iter().sum();
        audit.check((mass - 1.0).abs() < 1e-9, || {
            format!("projection {i}: mass {mass}")
        });
        let no_clip = reward + discount * 1.05 <= 1.05 && reward >= 0.0;
        if no_clip {
            let src_mean: f64 = probs
                .iter()
                .enumerate()
                .map(|(j, &p)| p * support.atom(j))
                .sum();
            let proj_mean: f64 = proj
                .iter()
                .enumerate()
                .map(|(j, &p)| p * support.atom(j))
                .sum();
            let expect = reward + discount * src_mean;
            audit.check((proj_mean - expect).abs() <= spacing, || {
                format!("projection {i}: mean {proj_mean} vs {expect}")
            });
        }
    }
    Ok(audit)
}

/// Temperature checks: the golden-section solve against a dense grid, and a
/// trained temperature head against the solver on frozen batches.
fn suite_alpha<R: Rng>(rng: &mut R) -> Result<Audit> {
    let mut audit = Audit::new();
    use ndarray::Array1;
    // dense-grid cross-check on random rows
    for i in 0..20 {
        let n = rng.gen_range(3..8);
        let q = Array1::from_shape_fn(n, |_| rng.gen_range(0.0..1.0));
        let raw = Array1::from_shape_fn(n, |_| rng.gen_range(0.1..1.0f64));
        let b = &raw / raw.sum();
        let eps = rng.gen_range(0.1..2.0);
        let alpha = solve_alpha(&q.view(), &b.view(), eps)?;
        let g_star = dual_objective(&q.view(), &b.view(), eps, alpha);
        // log-spaced dense grid over the solver bracket
        let mut best = f64::INFINITY;
        let (lo, hi) = (1e-3f64.ln(), 1e3f64.ln());
        let grid = 1_000_000;
        for k in 0..=grid {
            let a = (lo + (hi - lo) * k as f64 / grid as f64).exp();
            best = best.min(dual_objective(&q.view(), &b.view(), eps, a));
        }
        audit.check((g_star - best).abs() <= 1e-8, || {
            format!("row {i}: golden-section {g_star} vs grid {best}")
        });
    }
    // trained head within 5% of the solver on a frozen candidate batch
    let cfg = AgentConfig {
        trunk_layers: vec![10, 8],
        head_hidden: 8,
        z_hidden: 10,
        alpha_hidden: 8,
        n_policy: 64,
        ..AgentConfig::default()
    };
    let mut nets = NpqlNetworks::new(7, 3, 2, &cfg, rng)?;
    let obs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    // frozen uniform-prior candidates so the dual target is stationary
    let samples: Vec<crate::agent::MStepSample> = obs
        .iter()
        .map(|o| {
            let phi = nets.features(o).unwrap();
            let candidates: Vec<HybridAction> = (0..cfg.n_policy)
                .map(|_| {
                    HybridAction::new(
                        vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        rng.gen(),
                    )
                })
                .collect();
            // synthetic value spread: an untrained critic is near-constant,
            // which pins the optimal temperature at its floor
            let q_values: Vec<f64> = (0..cfg.n_policy).map(|_| rng.gen_range(0.0..1.0)).collect();
            let weights = boltzmann_weights(&q_values, 1.0).unwrap();
            crate::agent::MStepSample {
                phi,
                means: ndarray::Array2::zeros((3, 2)),
                candidates,
                q_values,
                weights,
                alpha: 1.0,
            }
        })
        .collect();
    let mut opt = AdamState::new(nets.head_alpha.num_params(), 3e-3);
    for _ in 0..4000 {
        let (_, grads, _) = alpha_head_loss(&samples, &nets, &cfg)?;
        let mut p = nets.head_alpha.params();
        adam_step(&mut p, &grads.flat(), &mut opt)?;
        nets.head_alpha.set_params(&p)?;
    }
    for (i, s) in samples.iter().enumerate() {
        let learned = nets.alpha(&s.phi)?;
        // sample-based dual over the same frozen candidates
        let n = s.q_values.len();
        let q = Array1::from_vec(s.q_values.clone());
        let b = Array1::from_elem(n, 1.0 / n as f64);
        let exact = solve_alpha(&q.view(), &b.view(), cfg.eps)?;
        audit.check((learned - exact).abs() / exact.max(1e-3) < 0.05, || {
            format!("state {i}: head {learned} vs solver {exact}")
        });
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nonsense", 0).is_err());
    }

    #[test]
    fn identity_suite_passes() {
        let report = run_suite("identity", 1).unwrap();
        assert!(report.passed, "{:?}", report.failures);
        assert_eq!(report.checks, 1000);
    }

    #[test]
    fn projection_suite_passes() {
        let report = run_suite("projection", 2).unwrap();
        assert!(report.passed, "{:?}", report.failures);
    }
}
