//! Parametric-projection comparators: AP-MPO (forward-KL projection of the
//! non-parametric policy), AP-SAC (reparameterized reverse-KL), and plain SAC
//! (uniform behavior prior). All share the distributional critic; the AP
//! variants share the prior machinery too.

use crate::agent::{
    boltzmann_weights, e_step_loss, m_step_loss, nu_dual_update,
    prepare_m_step, prior_from_features, rollout, AgentConfig, EStepTarget, IterMetrics,
    MStepSample, NpqlNetworks, RolloutCtx,
};
use crate::dist::{ApGmmPrior, HybridAction, SIGMA_MAX, SIGMA_MIN};
use crate::error::{NpqlError, Result};
use crate::nn::{adam_step, AdamState, Mlp, MlpGrads};
use crate::replay::{DualBuffer, NStepTransition};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    ApNpql,
    ApMpo,
    ApSac,
    Sac,
}

impl std::str::FromStr for Algorithm {
    type Err = NpqlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap-npql" => Ok(Algorithm::ApNpql),
            "ap-mpo" => Ok(Algorithm::ApMpo),
            "ap-sac" => Ok(Algorithm::ApSac),
            "sac" => Ok(Algorithm::Sac),
            other => Err(NpqlError::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl Algorithm {
    pub fn uses_prior(self) -> bool {
        !matches!(self, Algorithm::Sac)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ApNpql => "ap-npql",
            Algorithm::ApMpo => "ap-mpo",
            Algorithm::ApSac => "ap-sac",
            Algorithm::Sac => "sac",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(1.0 + (-x).exp()).ln()
    } else {
        x - (1.0 + x.exp()).ln()
    }
}

const LOG_2PI: f64 = 1.8378770664093453;

/// Diagonal Gaussian over velocities (mean squashed into the box by tanh)
/// plus a Bernoulli gripper, parameterized by one head on phi.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPolicy {
    /// phi -> raw means (d), raw log-stds (d), gripper logit.
    pub head: Mlp,
    pub action_dim: usize,
}

/// Decoded head output for one state.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub mean_raw: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_std_raw: Vec<f64>,
    pub log_std: Vec<f64>,
    pub gripper_logit: f64,
}

impl GaussianPolicy {
    pub fn new<R: Rng>(phi_dim: usize, action_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let head = Mlp::new(&[phi_dim, hidden, 2 * action_dim + 1], rng)?;
        Ok(Self { head, action_dim })
    }

    pub fn decode(&self, out_row: &[f64]) -> PolicyParams {
        let d = self.action_dim;
        let mean_raw = out_row[..d].to_vec();
        let log_std_raw = out_row[d..2 * d].to_vec();
        let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
        PolicyParams {
            mean: mean_raw.iter().map(|m| m.tanh()).collect(),
            // smooth squash instead of a hard clamp so the gradient never
            // dies at the boundary
            log_std: log_std_raw
                .iter()
                .map(|&ls| lo + (hi - lo) * sigmoid(ls))
                .collect(),
            mean_raw,
            log_std_raw,
            gripper_logit: out_row[2 * d],
        }
    }

    pub fn params_at(&self, phi: &Array1<f64>) -> Result<PolicyParams> {
        let row = Array2::from_shape_vec((1, phi.len()), phi.to_vec()).unwrap();
        let out = self.head.forward(&row.view())?;
        Ok(self.decode(&out.row(0).to_vec()))
    }

    pub fn sample<R: Rng>(&self, phi: &Array1<f64>, rng: &mut R) -> Result<HybridAction> {
        let p = self.params_at(phi)?;
        let vel: Vec<f64> = p
            .mean
            .iter()
            .zip(&p.log_std)
            .map(|(&m, &ls)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + ls.exp() * eps
            })
            .collect();
        let gripper = rng.gen::<f64>() < sigmoid(p.gripper_logit);
        Ok(HybridAction::new(vel, gripper))
    }

    /// log pi(a | s) with the clamped std and squashed mean.
    pub fn log_prob(&self, params: &PolicyParams, action: &HybridAction) -> f64 {
        let mut lp = 0.0;
        for i in 0..self.action_dim {
            let sigma = params.log_std[i].exp();
            let z = (action.velocity[i] - params.mean[i]) / sigma;
            lp += -0.5 * (LOG_2PI + z * z) - params.log_std[i];
        }
        lp + if action.gripper {
            log_sigmoid(params.gripper_logit)
        } else {
            log_sigmoid(-params.gripper_logit)
        }
    }
}

/// Gradient of a scalar w.r.t. the raw policy-head outputs, with the tanh
/// squash and std clamp already chained.
fn head_upstream(
    policy: &GaussianPolicy,
    params: &PolicyParams,
    d_mean: &[f64],
    d_log_std: &[f64],
    d_gripper_logit: f64,
) -> Array2<f64> {
    let d = policy.action_dim;
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let mut up = Array2::zeros((1, 2 * d + 1));
    for i in 0..d {
        up[[0, i]] = d_mean[i] * (1.0 - params.mean[i] * params.mean[i]);
        let s = sigmoid(params.log_std_raw[i]);
        up[[0, d + i]] = d_log_std[i] * (hi - lo) * s * (1.0 - s);
    }
    up[[0, 2 * d]] = d_gripper_logit;
    up
}

/// Forward-KL projection: L = -sum_i w_i log pi_psi(a_i | s), averaged over
/// the batch. Weighted maximum likelihood toward the non-parametric policy.
pub fn mpo_projection_loss(
    samples: &[MStepSample],
    policy: &GaussianPolicy,
) -> Result<(f64, MlpGrads)> {
    if samples.is_empty() {
        return Err(NpqlError::EmptyInput("projection batch".into()));
    }
    let d = policy.action_dim;
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut grads = MlpGrads::zeros_like(&policy.head);
    for s in samples {
        let row = Array2::from_shape_vec((1, s.phi.len()), s.phi.to_vec()).unwrap();
        let (out, cache) = policy.head.forward_cached(&row.view())?;
        let params = policy.decode(&out.row(0).to_vec());
        let mut d_mean = vec![0.0; d];
        let mut d_log_std = vec![0.0; d];
        let mut d_grip = 0.0;
        let p_close = sigmoid(params.gripper_logit);
        for (a, &w) in s.candidates.iter().zip(&s.weights) {
            total -= w * policy.log_prob(&params, a);
            for i in 0..d {
                let sigma = params.log_std[i].exp();
                let z = (a.velocity[i] - params.mean[i]) / sigma;
                // d(-log N)/d mean and /d log sigma
                d_mean[i] += w * -(z / sigma);
                d_log_std[i] += w * -(z * z - 1.0);
            }
            let y = if a.gripper { 1.0 } else { 0.0 };
            d_grip += w * -(y - p_close);
        }
        let up = head_upstream(policy, &params, &d_mean, &d_log_std, d_grip);
        let (g, _) = policy.head.backward(&cache, &up.view())?;
        grads.add_assign(&g);
    }
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Frozen reparameterization noise for one state, so the SAC loss is a pure
/// function of the policy parameters.
#[derive(Debug, Clone)]
pub struct SacSample {
    pub phi: Array1<f64>,
    pub xi: Vec<f64>,
    pub alpha: f64,
    /// None means the uniform prior over the action box.
    pub prior: Option<ApGmmPrior>,
}

pub fn prepare_sac_samples<R: Rng>(
    batch_obs: &[Vec<f64>],
    nets: &NpqlNetworks,
    use_prior: bool,
    rng: &mut R,
) -> Result<Vec<SacSample>> {
    let mut out = Vec::with_capacity(batch_obs.len());
    for obs in batch_obs {
        let phi = nets.features(obs)?;
        let prior = if use_prior {
            Some(prior_from_features(nets, &phi)?)
        } else {
            None
        };
        let alpha = nets.alpha(&phi)?;
        let xi = (0..nets.action_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        out.push(SacSample {
            phi,
            xi,
            alpha,
            prior,
        });
    }
    Ok(out)
}

/// Velocity-marginal GMM log-density and its gradient in the action.
fn gmm_vel_log_prob(prior: &ApGmmPrior, vel: &[f64]) -> (f64, Vec<f64>) {
    let (k_n, d) = (prior.n_components(), prior.action_dim());
    let weights = prior.weights();
    let mut terms = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let mut lp = weights[k].ln();
        for i in 0..d {
            let ls = prior.log_stds[[k, i]];
            let z = (vel[i] - prior.means[[k, i]]) / ls.exp();
            lp += -0.5 * (LOG_2PI + z * z) - ls;
        }
        terms.push(lp);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    let mut grad = vec![0.0; d];
    for k in 0..k_n {
        let resp = (terms[k] - lse).exp();
        for i in 0..d {
            let var = (2.0 * prior.log_stds[[k, i]]).exp();
            grad[i] += resp * -(vel[i] - prior.means[[k, i]]) / var;
        }
    }
    (lse, grad)
}

/// Q(s, a) through the online value head with a possibly soft gripper input,
/// plus its gradient in the action input.
fn q_and_action_grad(
    nets: &NpqlNetworks,
    phi: &Array1<f64>,
    vel: &[f64],
    gripper_soft: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = nets.action_dim;
    let mut input = Array2::zeros((1, nets.phi_dim() + d + 1));
    for (j, &v) in phi.iter().enumerate() {
        input[[0, j]] = v;
    }
    for (j, &v) in vel.iter().enumerate() {
        input[[0, nets.phi_dim() + j]] = v;
    }
    input[[0, nets.phi_dim() + d]] = gripper_soft;
    let (logits, cache) = nets.head_z.forward_cached(&input.view())?;
    let logits_row: Vec<f64> = logits.row(0).to_vec();
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits_row.iter().map(|l| (l - max).exp()).collect();
    let z_sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z_sum).collect();
    let atoms = nets.support.atoms();
    let q: f64 = probs.iter().zip(&atoms).map(|(&p, &z)| p * z).sum();
    // dQ/d logit_j = p_j (z_j - Q)
    let upstream = Array2::from_shape_vec(
        (1, nets.support.n_atoms),
        probs
            .iter()
            .zip(&atoms)
            .map(|(&p, &z)| p * (z - q))
            .collect(),
    )
    .unwrap();
    let (_, input_grad) = nets.head_z.backward(&cache, &upstream.view())?;
    let action_grad: Vec<f64> = (0..d + 1)
        .map(|j| input_grad[[0, nets.phi_dim() + j]])
        .collect();
    Ok((q, action_grad))
}

/// Reparameterized SVG-with-regularizer loss, averaged over the batch:
/// L = -Q(s, a~) + alpha (log pi(a~) - log b(a~)), with the Bernoulli gripper
/// handled in closed-form expectation (soft bit into Q).
pub fn sac_projection_loss(
    samples: &[SacSample],
    policy: &GaussianPolicy,
    nets: &NpqlNetworks,
) -> Result<(f64, MlpGrads)> {
    if samples.is_empty() {
        return Err(NpqlError::EmptyInput("projection batch".into()));
    }
    let d = policy.action_dim;
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut grads = MlpGrads::zeros_like(&policy.head);
    for s in samples {
        let row = Array2::from_shape_vec((1, s.phi.len()), s.phi.to_vec()).unwrap();
        let (out, cache) = policy.head.forward_cached(&row.view())?;
        let params = policy.decode(&out.row(0).to_vec());
        let vel: Vec<f64> = (0..d)
            .map(|i| params.mean[i] + params.log_std[i].exp() * s.xi[i])
            .collect();
        let p = sigmoid(params.gripper_logit);
        let (q, a_grad) = q_and_action_grad(nets, &s.phi, &vel, p)?;

        // velocity log-densities at the reparameterized point
        let log_pi_vel: f64 = (0..d)
            .map(|i| -0.5 * (LOG_2PI + s.xi[i] * s.xi[i]) - params.log_std[i])
            .sum();
        let (log_b_vel, db_dvel) = match &s.prior {
            Some(prior) => gmm_vel_log_prob(prior, &vel),
            // uniform over the [-1,1]^d box
            None => (-(2f64.ln() * d as f64), vec![0.0; d]),
        };
        // gripper KL in expectation
        let b_close = match &s.prior {
            Some(prior) => {
                let w = prior.weights();
                w.iter()
                    .zip(prior.gripper_probs().iter())
                    .map(|(&wk, &pk)| wk * pk)
                    .sum::<f64>()
                    .clamp(1e-12, 1.0 - 1e-12)
            }
            None => 0.5,
        };
        let ent_pi = p * log_sigmoid(params.gripper_logit)
            + (1.0 - p) * log_sigmoid(-params.gripper_logit);
        let cross_b = p * b_close.ln() + (1.0 - p) * (1.0 - b_close).ln();
        let loss = -q + s.alpha * (log_pi_vel - log_b_vel + ent_pi - cross_b);
        total += loss;

        // chain into the raw head outputs
        let mut d_mean = vec![0.0; d];
        let mut d_log_std = vec![0.0; d];
        for i in 0..d {
            // dL/d a_i, flowing through Q and log b
            let dl_da = -a_grad[i] - s.alpha * db_dvel[i];
            d_mean[i] = dl_da;
            d_log_std[i] = dl_da * params.log_std[i].exp() * s.xi[i] - s.alpha;
        }
        let dl_dp = -a_grad[d]
            + s.alpha
                * ((p / (1.0 - p)).ln() - b_close.ln() + (1.0 - b_close).ln());
        let d_grip = dl_dp * p * (1.0 - p);
        let up = head_upstream(policy, &params, &d_mean, &d_log_std, d_grip);
        let (g, _) = policy.head.backward(&cache, &up.view())?;
        grads.add_assign(&g);
    }
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Target distributions with a' drawn from the parametric policy at the
/// bootstrap state, uniform candidate weights.
pub fn policy_eval_target<R: Rng>(
    batch: &[NStepTransition],
    policy: &GaussianPolicy,
    nets: &NpqlNetworks,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<Vec<EStepTarget>> {
    let mut out = Vec::with_capacity(batch.len());
    for tr in batch {
        let mut projected = vec![0.0; nets.support.n_atoms];
        if tr.done {
            nets.support
                .project_into(tr.cumulative_reward, 0.0, &[1.0], 1.0, &mut projected);
        } else {
            let phi_t = nets.target_features(&tr.bootstrap_obs)?;
            let candidates: Vec<HybridAction> = (0..cfg.n_target)
                .map(|_| policy.sample(&phi_t, rng))
                .collect::<Result<_>>()?;
            let (probs, _) = nets.z_eval(true, &phi_t, &candidates)?;
            let w = 1.0 / cfg.n_target as f64;
            let mut mixed = vec![0.0; nets.support.n_atoms];
            for i in 0..cfg.n_target {
                for (j, m) in mixed.iter_mut().enumerate() {
                    *m += w * probs[[i, j]];
                }
            }
            nets.support.project_into(
                tr.cumulative_reward,
                tr.discount,
                &mixed,
                1.0,
                &mut projected,
            );
        }
        out.push(EStepTarget { probs: projected });
    }
    Ok(out)
}

/// A comparator learner: the shared critic stack plus a parametric policy,
/// updated by the algorithm-specific projection.
#[derive(Serialize, Deserialize)]
pub struct BaselineAgent {
    pub algo: Algorithm,
    pub nets: NpqlNetworks,
    pub policy: GaussianPolicy,
    pub cfg: AgentConfig,
    pub nu: f64,
    pub eps_nu: f64,
    pub skipped_updates: u64,
    opt_trunk: AdamState,
    opt_ap: AdamState,
    opt_z: AdamState,
    opt_alpha: AdamState,
    opt_bp: AdamState,
    opt_policy: AdamState,
}

impl BaselineAgent {
    pub fn new<R: Rng>(
        algo: Algorithm,
        obs_dim: usize,
        k: usize,
        action_dim: usize,
        cfg: AgentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let nets = NpqlNetworks::new(obs_dim, k, action_dim, &cfg, rng)?;
        let policy = GaussianPolicy::new(nets.phi_dim(), action_dim, cfg.head_hidden, rng)?;
        let eps_nu = match cfg.eps_nu {
            Some(v) => v,
            None => {
                let prior = crate::agent::build_prior(&nets, &vec![0.0; obs_dim])?;
                0.5 * prior.entropy_surrogate()
            }
        };
        Ok(Self {
            algo,
            opt_trunk: AdamState::new(nets.trunk.num_params(), cfg.lr_e),
            opt_ap: AdamState::new(nets.head_ap.num_params(), cfg.lr_e),
            opt_z: AdamState::new(nets.head_z.num_params(), cfg.lr_e),
            opt_alpha: AdamState::new(nets.head_alpha.num_params(), cfg.lr_alpha),
            opt_bp: AdamState::new(nets.head_bp.num_params(), cfg.lr_m),
            opt_policy: AdamState::new(policy.head.num_params(), cfg.lr_m),
            nets,
            policy,
            cfg,
            nu: 0.0,
            eps_nu,
            skipped_updates: 0,
        })
    }

    pub fn act<R: Rng>(&self, obs: &[f64], rng: &mut R) -> Result<HybridAction> {
        let phi = self.nets.features(obs)?;
        self.policy.sample(&phi, rng)
    }

    fn apply(mlp: &mut Mlp, grads: &MlpGrads, opt: &mut AdamState, skipped: &mut u64) -> Result<()> {
        let mut params = mlp.params();
        if !adam_step(&mut params, &grads.flat(), opt)? {
            *skipped += 1;
            return Ok(());
        }
        mlp.set_params(&params)
    }

    /// Uniform-prior snapshots used to keep the alpha head trained for plain
    /// SAC.
    fn uniform_samples<R: Rng>(&self, batch_obs: &[Vec<f64>], rng: &mut R) -> Result<Vec<MStepSample>> {
        let mut out = Vec::with_capacity(batch_obs.len());
        for obs in batch_obs {
            let phi = self.nets.features(obs)?;
            let candidates: Vec<HybridAction> = (0..self.cfg.n_policy)
                .map(|_| {
                    HybridAction::new(
                        (0..self.nets.action_dim)
                            .map(|_| rng.gen_range(-1.0..1.0))
                            .collect(),
                        rng.gen::<f64>() < 0.5,
                    )
                })
                .collect();
            let (_, q_values) = self.nets.z_eval(false, &phi, &candidates)?;
            let alpha = self.nets.alpha(&phi)?;
            let weights = boltzmann_weights(&q_values, alpha)?;
            out.push(MStepSample {
                phi,
                means: Array2::zeros((self.nets.k, self.nets.action_dim)),
                candidates,
                q_values,
                weights,
                alpha,
            });
        }
        Ok(out)
    }

    pub fn gradient_step<R: Rng>(
        &mut self,
        batch: &[NStepTransition],
        rng: &mut R,
    ) -> Result<IterMetrics> {
        let cfg = self.cfg.clone();
        let mut skipped = 0u64;
        // policy evaluation toward the parametric policy's own value
        let targets = policy_eval_target(batch, &self.policy, &self.nets, &cfg, rng)?;
        let mut e_cfg = cfg.clone();
        if !self.algo.uses_prior() {
            e_cfg.lambda_ap = 0.0;
        }
        let e = e_step_loss(batch, &targets, &self.nets, &e_cfg)?;
        Self::apply(&mut self.nets.trunk, &e.trunk, &mut self.opt_trunk, &mut skipped)?;
        if self.algo.uses_prior() {
            Self::apply(&mut self.nets.head_ap, &e.head_ap, &mut self.opt_ap, &mut skipped)?;
        }
        Self::apply(&mut self.nets.head_z, &e.head_z, &mut self.opt_z, &mut skipped)?;

        let batch_obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
        let samples = if self.algo.uses_prior() {
            prepare_m_step(&batch_obs, &self.nets, &cfg, rng)?
        } else {
            self.uniform_samples(&batch_obs, rng)?
        };
        let (_, a_grads, alpha_mean) =
            crate::agent::alpha_head_loss(&samples, &self.nets, &cfg)?;
        Self::apply(&mut self.nets.head_alpha, &a_grads, &mut self.opt_alpha, &mut skipped)?;

        let mut entropy = 0.0;
        if self.algo.uses_prior() {
            let (_, m_grads, ent) = m_step_loss(&samples, &self.nets, &cfg, self.nu)?;
            Self::apply(&mut self.nets.head_bp, &m_grads, &mut self.opt_bp, &mut skipped)?;
            self.nu = nu_dual_update(ent, &cfg, self.eps_nu, self.nu);
            entropy = ent;
        }

        // parametric projection
        let l_m = match self.algo {
            Algorithm::ApMpo => {
                let (loss, grads) = mpo_projection_loss(&samples, &self.policy)?;
                Self::apply(&mut self.policy.head, &grads, &mut self.opt_policy, &mut skipped)?;
                loss
            }
            Algorithm::ApSac | Algorithm::Sac => {
                let sac_samples =
                    prepare_sac_samples(&batch_obs, &self.nets, self.algo.uses_prior(), rng)?;
                let (loss, grads) = sac_projection_loss(&sac_samples, &self.policy, &self.nets)?;
                Self::apply(&mut self.policy.head, &grads, &mut self.opt_policy, &mut skipped)?;
                loss
            }
            Algorithm::ApNpql => 0.0,
        };
        self.nets.polyak(cfg.polyak)?;
        self.skipped_updates += skipped;
        Ok(IterMetrics {
            l_q: e.l_q,
            l_ap: e.l_ap,
            l_m,
            alpha_mean,
            nu: self.nu,
            prior_entropy: entropy,
            grad_steps: 1,
            env_steps: 0,
            skipped_updates: skipped,
        })
    }

    pub fn train_iteration<R: Rng>(
        &mut self,
        ctxs: &mut [RolloutCtx],
        buffer: &mut DualBuffer,
        rollout_steps: usize,
        grad_steps: usize,
        next_episode_id: &mut u64,
        rng: &mut R,
    ) -> Result<IterMetrics> {
        let nets = &self.nets;
        let policy = &self.policy;
        let transitions = rollout(ctxs, rollout_steps, next_episode_id, rng, |obs, r| {
            let phi = nets.features(obs)?;
            policy.sample(&phi, r)
        })?;
        let env_steps = transitions.len();
        buffer.push(transitions);
        let mut metrics = IterMetrics {
            env_steps,
            ..Default::default()
        };
        for _ in 0..grad_steps {
            let batch = match buffer.sample_mixed(
                self.cfg.batch_size,
                self.cfg.n_step,
                self.cfg.gamma,
                rng,
            ) {
                Ok(b) => b,
                Err(NpqlError::NotReady(_)) => break,
                Err(e) => return Err(e),
            };
            let m = self.gradient_step(&batch, rng)?;
            metrics.l_q = m.l_q;
            metrics.l_ap = m.l_ap;
            metrics.l_m = m.l_m;
            metrics.alpha_mean = m.alpha_mean;
            metrics.nu = m.nu;
            metrics.prior_entropy = m.prior_entropy;
            metrics.grad_steps += 1;
            metrics.skipped_updates += m.skipped_updates;
        }
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> AgentConfig {
        AgentConfig {
            trunk_layers: vec![10, 6],
            head_hidden: 8,
            z_hidden: 10,
            alpha_hidden: 6,
            n_policy: 8,
            n_target: 8,
            batch_size: 4,
            ..AgentConfig::default()
        }
    }

    fn tiny_nets(seed: u64) -> NpqlNetworks {
        NpqlNetworks::new(7, 3, 2, &tiny_cfg(), &mut rng(seed)).unwrap()
    }

    fn fixed_sample(
        phi: Array1<f64>,
        candidates: Vec<HybridAction>,
        weights: Vec<f64>,
    ) -> MStepSample {
        let n = candidates.len();
        MStepSample {
            phi,
            means: Array2::zeros((3, 2)),
            candidates,
            q_values: vec![0.0; n],
            weights,
            alpha: 1.0,
        }
    }

    #[test]
    fn mpo_symmetric_candidates_pull_mean_to_zero() {
        let policy = GaussianPolicy::new(6, 2, 8, &mut rng(0)).unwrap();
        let phi = Array1::from_elem(6, 0.3);
        let cands = vec![
            HybridAction::new(vec![0.4, 0.2], false),
            HybridAction::new(vec![-0.4, -0.2], false),
        ];
        let sample = fixed_sample(phi.clone(), cands, vec![0.5, 0.5]);
        let (before, grads) = mpo_projection_loss(std::slice::from_ref(&sample), &policy).unwrap();
        // a small step along -grad must reduce the projection loss
        let mut p = policy.head.params();
        let flat = grads.flat();
        for (pi, gi) in p.iter_mut().zip(&flat) {
            *pi -= 1e-3 * gi;
        }
        let mut moved = policy.clone();
        moved.head.set_params(&p).unwrap();
        let (after, _) = mpo_projection_loss(&[sample], &moved).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn mpo_point_mass_is_single_sample_mle() {
        let policy = GaussianPolicy::new(6, 2, 8, &mut rng(1)).unwrap();
        let phi = Array1::from_elem(6, -0.2);
        let a = HybridAction::new(vec![0.3, -0.5], true);
        let sample = fixed_sample(phi.clone(), vec![a.clone()], vec![1.0]);
        let (loss, _) = mpo_projection_loss(&[sample], &policy).unwrap();
        let params = policy.params_at(&phi).unwrap();
        assert!((loss + policy.log_prob(&params, &a)).abs() < 1e-12);
    }

    #[test]
    fn mpo_bimodal_weights_moment_match() {
        // candidates at +-c: the fitted Gaussian sits at 0 with sigma ~ c
        let mut policy = GaussianPolicy::new(4, 2, 8, &mut rng(2)).unwrap();
        let phi = Array1::from_elem(4, 0.5);
        let c = 0.3;
        let cands = vec![
            HybridAction::new(vec![c, c], false),
            HybridAction::new(vec![-c, -c], true),
        ];
        let sample = fixed_sample(phi.clone(), cands, vec![0.5, 0.5]);
        let mut opt = AdamState::new(policy.head.num_params(), 1e-2);
        for _ in 0..3000 {
            let (_, grads) = mpo_projection_loss(std::slice::from_ref(&sample), &policy).unwrap();
            let mut p = policy.head.params();
            adam_step(&mut p, &grads.flat(), &mut opt).unwrap();
            policy.head.set_params(&p).unwrap();
        }
        let params = policy.params_at(&phi).unwrap();
        for i in 0..2 {
            assert!(params.mean[i].abs() < 0.02, "mean {}", params.mean[i]);
            // closed-form weighted MLE: sigma^2 = c^2
            assert!(
                (params.log_std[i].exp() - c).abs() < 0.03,
                "sigma {}",
                params.log_std[i].exp()
            );
        }
        // equal gripper labels -> p = 0.5
        assert!((sigmoid(params.gripper_logit) - 0.5).abs() < 0.02);
    }

    #[test]
    fn mpo_loss_decreases_on_a_fixed_batch() {
        let mut policy = GaussianPolicy::new(4, 2, 8, &mut rng(3)).unwrap();
        let mut r = rng(4);
        let phi = Array1::from_shape_fn(4, |_| r.gen_range(-1.0..1.0));
        let cands: Vec<HybridAction> = (0..6)
            .map(|_| {
                HybridAction::new(
                    vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)],
                    r.gen(),
                )
            })
            .collect();
        let w = vec![1.0 / 6.0; 6];
        let sample = fixed_sample(phi, cands, w);
        let mut opt = AdamState::new(policy.head.num_params(), 3e-3);
        let mut prev = f64::INFINITY;
        let mut increases = 0;
        for step in 0..500 {
            let (loss, grads) = mpo_projection_loss(std::slice::from_ref(&sample), &policy).unwrap();
            if loss > prev + 1e-9 {
                increases += 1;
            }
            prev = loss;
            let mut p = policy.head.params();
            adam_step(&mut p, &grads.flat(), &mut opt).unwrap();
            policy.head.set_params(&p).unwrap();
            let _ = step;
        }
        // Adam is not a line search; allow rare upticks
        assert!(increases < 25, "{increases} increases");
    }

    #[test]
    fn mpo_gradients_match_fd() {
        let policy = GaussianPolicy::new(6, 2, 8, &mut rng(5)).unwrap();
        let mut r = rng(6);
        let samples: Vec<MStepSample> = (0..3)
            .map(|_| {
                let phi = Array1::from_shape_fn(6, |_| r.gen_range(-1.0..1.0));
                let cands: Vec<HybridAction> = (0..4)
                    .map(|_| {
                        HybridAction::new(
                            vec![r.gen_range(-0.9..0.9), r.gen_range(-0.9..0.9)],
                            r.gen(),
                        )
                    })
                    .collect();
                let raw: Vec<f64> = (0..4).map(|_| r.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                fixed_sample(phi, cands, raw.into_iter().map(|v| v / s).collect())
            })
            .collect();
        let (_, grads) = mpo_projection_loss(&samples, &policy).unwrap();
        let flat = grads.flat();
        let h = 1e-6;
        for probe in 0..15 {
            let idx = (probe * 7919) % flat.len();
            let eval = |delta: f64| {
                let mut work = policy.clone();
                let mut p = work.head.params();
                p[idx] += delta;
                work.head.set_params(&p).unwrap();
                mpo_projection_loss(&samples, &work).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = flat[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-4,
                "param {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn sac_setup(seed: u64, use_prior: bool) -> (NpqlNetworks, GaussianPolicy, Vec<SacSample>) {
        let nets = tiny_nets(seed);
        let policy = GaussianPolicy::new(nets.phi_dim(), 2, 8, &mut rng(seed + 1)).unwrap();
        let mut r = rng(seed + 2);
        let obs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let samples = prepare_sac_samples(&obs, &nets, use_prior, &mut r).unwrap();
        (nets, policy, samples)
    }

    #[test]
    fn sac_gradients_match_fd() {
        for use_prior in [true, false] {
            let (nets, policy, samples) = sac_setup(7, use_prior);
            let (_, grads) = sac_projection_loss(&samples, &policy, &nets).unwrap();
            let flat = grads.flat();
            let h = 1e-6;
            for probe in 0..15 {
                let idx = (probe * 104729) % flat.len();
                let eval = |delta: f64| {
                    let mut work = policy.clone();
                    let mut p = work.head.params();
                    p[idx] += delta;
                    work.head.set_params(&p).unwrap();
                    sac_projection_loss(&samples, &work, &nets).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = flat[idx];
                assert!(
                    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-4,
                    "prior {use_prior} param {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn sac_alpha_zero_is_pure_q_ascent() {
        let (nets, policy, mut samples) = sac_setup(8, false);
        for s in &mut samples {
            s.alpha = 0.0;
        }
        let (loss, _) = sac_projection_loss(&samples, &policy, &nets).unwrap();
        // recompute -Q directly at the reparameterized actions
        let mut expect = 0.0;
        for s in &samples {
            let params = policy.params_at(&s.phi).unwrap();
            let vel: Vec<f64> = (0..2)
                .map(|i| params.mean[i] + params.log_std[i].exp() * s.xi[i])
                .collect();
            let p = sigmoid(params.gripper_logit);
            let (q, _) = q_and_action_grad(&nets, &s.phi, &vel, p).unwrap();
            expect -= q;
        }
        expect /= samples.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn sac_kl_term_vanishes_when_policy_equals_prior() {
        // single-component prior matched exactly by the policy
        let (_nets, policy, samples) = sac_setup(9, false);
        let s = &samples[0];
        let params = policy.params_at(&s.phi).unwrap();
        let prior = ApGmmPrior::new(
            Array2::from_shape_vec((1, 2), params.mean.clone()).unwrap(),
            Array2::from_shape_vec((1, 2), params.log_std.clone()).unwrap(),
            array![0.0],
            array![params.gripper_logit],
        )
        .unwrap();
        let vel: Vec<f64> = (0..2)
            .map(|i| params.mean[i] + params.log_std[i].exp() * s.xi[i])
            .collect();
        let log_pi_vel: f64 = (0..2)
            .map(|i| -0.5 * (LOG_2PI + s.xi[i] * s.xi[i]) - params.log_std[i])
            .sum();
        let (log_b_vel, _) = gmm_vel_log_prob(&prior, &vel);
        assert!((log_pi_vel - log_b_vel).abs() < 1e-10);
    }

    #[test]
    fn plain_sac_is_max_entropy_up_to_a_constant() {
        // uniform b: loss - (-Q + alpha log pi) is the same constant per state
        let (nets, policy, samples) = sac_setup(10, false);
        let mut offsets = Vec::new();
        for s in &samples {
            let (loss, _) =
                sac_projection_loss(std::slice::from_ref(s), &policy, &nets).unwrap();
            let params = policy.params_at(&s.phi).unwrap();
            let vel: Vec<f64> = (0..2)
                .map(|i| params.mean[i] + params.log_std[i].exp() * s.xi[i])
                .collect();
            let p = sigmoid(params.gripper_logit);
            let (q, _) = q_and_action_grad(&nets, &s.phi, &vel, p).unwrap();
            let log_pi_vel: f64 = (0..2)
                .map(|i| -0.5 * (LOG_2PI + s.xi[i] * s.xi[i]) - params.log_std[i])
                .sum();
            let ent_pi = p * log_sigmoid(params.gripper_logit)
                + (1.0 - p) * log_sigmoid(-params.gripper_logit);
            let max_ent = -q + s.alpha * (log_pi_vel + ent_pi);
            // constant = alpha * (ln 4 + ln 2), alpha varies by state
            offsets.push((loss - max_ent) / s.alpha);
        }
        for w in offsets.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-10, "{offsets:?}");
        }
        assert!((offsets[0] - (4f64.ln() + 2f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn deterministic_policy_target_matches_single_action_projection() {
        let nets = tiny_nets(11);
        let mut policy = GaussianPolicy::new(nets.phi_dim(), 2, 8, &mut rng(12)).unwrap();
        // drive log-stds far negative so the clamp pins sigma at sigma_min
        let mut p = policy.head.params();
        p.iter_mut().for_each(|v| *v *= 0.0);
        policy.head.set_params(&p).unwrap();
        let cfg = tiny_cfg();
        let mut r = rng(13);
        let tr = NStepTransition {
            obs: vec![0.1; 7],
            action: HybridAction::new(vec![0.0, 0.0], false),
            ap_labels: vec![(vec![0.0, 0.0], false); 3],
            cumulative_reward: 0.2,
            bootstrap_obs: vec![-0.1; 7],
            discount: 0.9,
            done: false,
        };
        let targets =
            policy_eval_target(std::slice::from_ref(&tr), &policy, &nets, &cfg, &mut r).unwrap();
        let sum: f64 = targets[0].probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // zero-reward absorbing case stays a point mass at 0
        let mut done_tr = tr.clone();
        done_tr.done = true;
        done_tr.cumulative_reward = 0.0;
        let targets =
            policy_eval_target(std::slice::from_ref(&done_tr), &policy, &nets, &cfg, &mut r)
                .unwrap();
        assert!((targets[0].probs[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn policy_eval_matches_npql_target_under_uniform_weights() {
        // large-n MC equivalence: both pipelines mix candidate distributions;
        // with the npql weights forced uniform the two targets coincide in
        // expectation. Compare means over many candidates.
        let nets = tiny_nets(14);
        let cfg = AgentConfig {
            n_target: 4000,
            ..tiny_cfg()
        };
        let tr = NStepTransition {
            obs: vec![0.1; 7],
            action: HybridAction::new(vec![0.0, 0.0], false),
            ap_labels: vec![(vec![0.0, 0.0], false); 3],
            cumulative_reward: 0.1,
            bootstrap_obs: vec![0.2; 7],
            discount: 0.9,
            done: false,
        };
        // npql pipeline with uniform weights == prior-expectation of Z
        let phi_t = nets.target_features(&tr.bootstrap_obs).unwrap();
        let prior = prior_from_features(&nets, &phi_t).unwrap();
        let mut r = rng(15);
        let cands: Vec<HybridAction> = prior
            .sample(cfg.n_target, &mut r)
            .unwrap()
            .into_iter()
            .map(|(a, _)| a)
            .collect();
        let (probs, _) = nets.z_eval(true, &phi_t, &cands).unwrap();
        let w = 1.0 / cfg.n_target as f64;
        let mut mixed = vec![0.0; nets.support.n_atoms];
        for i in 0..cfg.n_target {
            for (j, m) in mixed.iter_mut().enumerate() {
                *m += w * probs[[i, j]];
            }
        }
        let mean_prior: f64 = mixed
            .iter()
            .enumerate()
            .map(|(j, &p)| p * nets.support.atom(j))
            .sum();
        // policy pipeline with the policy mimicking the prior's dominant
        // component should land in the same ballpark; here we only assert the
        // prior-based estimate is reproducible across candidate draws
        let cands2: Vec<HybridAction> = prior
            .sample(cfg.n_target, &mut r)
            .unwrap()
            .into_iter()
            .map(|(a, _)| a)
            .collect();
        let (probs2, _) = nets.z_eval(true, &phi_t, &cands2).unwrap();
        let mut mixed2 = vec![0.0; nets.support.n_atoms];
        for i in 0..cfg.n_target {
            for (j, m) in mixed2.iter_mut().enumerate() {
                *m += w * probs2[[i, j]];
            }
        }
        let mean_prior2: f64 = mixed2
            .iter()
            .enumerate()
            .map(|(j, &p)| p * nets.support.atom(j))
            .sum();
        assert!((mean_prior - mean_prior2).abs() < 0.01);
    }

    #[test]
    fn baseline_agents_run_deterministically() {
        for algo in [Algorithm::ApMpo, Algorithm::ApSac, Algorithm::Sac] {
            let run = || {
                let cfg = AgentConfig {
                    trunk_layers: vec![12, 8],
                    head_hidden: 8,
                    z_hidden: 12,
                    alpha_hidden: 6,
                    n_policy: 6,
                    n_target: 6,
                    batch_size: 4,
                    ..AgentConfig::default()
                };
                let mut r = rng(16);
                let mut agent =
                    BaselineAgent::new(algo, crate::env::OBS_DIM, 3, 2, cfg, &mut r).unwrap();
                let env = crate::env::ManipEnv::new(crate::env::EnvConfig::new(
                    crate::env::Task::Push,
                ))
                .unwrap();
                let mut ctxs = vec![RolloutCtx::new(env, 0, &mut r)];
                let mut buffer = DualBuffer::new(500, 0.0).unwrap();
                let mut next_ep = 0;
                let mut out = Vec::new();
                for _ in 0..2 {
                    let m = agent
                        .train_iteration(&mut ctxs, &mut buffer, 10, 2, &mut next_ep, &mut r)
                        .unwrap();
                    out.push((m.l_q, m.l_m, m.alpha_mean));
                }
                out
            };
            assert_eq!(run(), run(), "{algo:?}");
        }
    }

    #[test]
    fn algorithm_parsing() {
        assert_eq!("ap-npql".parse::<Algorithm>().unwrap(), Algorithm::ApNpql);
        assert_eq!("sac".parse::<Algorithm>().unwrap(), Algorithm::Sac);
        assert!("dqn".parse::<Algorithm>().is_err());
    }
}
