//! The AP-NPQL agent: network layout, the closed-form non-parametric policy
//! realized by weighting prior candidates, the dual temperature head, and the
//! E-step / M-step losses driving the training iteration.

use crate::dist::{
    ApGmmPrior, HybridAction, PriorGrad, Support, SIGMA_MAX, SIGMA_MIN,
};
use crate::env::{compute_aps, ManipEnv};
use crate::error::{NpqlError, Result};
use crate::nn::{adam_step, polyak_update, AdamState, Mlp, MlpGrads};
use crate::oracle::ALPHA_FLOOR;
use crate::replay::{DualBuffer, NStepTransition, Transition};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    /// KL limit epsilon.
    pub eps: f64,
    /// Entropy floor for the nu dual; resolved from the initial prior when
    /// absent.
    pub eps_nu: Option<f64>,
    /// Behavior-cloning loss scale lambda^ap.
    pub lambda_ap: f64,
    /// Candidates per state for the Boltzmann policy.
    pub n_policy: usize,
    /// Candidates per bootstrap state for the target value.
    pub n_target: usize,
    /// N-step lookahead.
    pub n_step: usize,
    pub lr_e: f64,
    pub lr_alpha: f64,
    pub lr_m: f64,
    pub lr_nu: f64,
    pub polyak: f64,
    pub batch_size: usize,
    /// Expert fraction of each batch.
    pub expert_ratio: f64,
    /// +1 treats the M-step entropy term as a bonus (exploration-consistent);
    /// -1 reproduces the literal penalty reading.
    pub entropy_sign: f64,
    pub trunk_layers: Vec<usize>,
    pub head_hidden: usize,
    pub z_hidden: usize,
    pub alpha_hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            eps: 1.0,
            eps_nu: None,
            lambda_ap: 1.0,
            n_policy: 100,
            n_target: 120,
            n_step: 5,
            lr_e: 3e-4,
            lr_alpha: 1e-4,
            lr_m: 3e-4,
            lr_nu: 1e-4,
            polyak: 0.05,
            batch_size: 24,
            expert_ratio: 0.25,
            entropy_sign: 1.0,
            trunk_layers: vec![48, 24],
            head_hidden: 32,
            z_hidden: 48,
            alpha_hidden: 16,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_e, self.lr_alpha, self.lr_m, self.lr_nu];
        if rates.iter().any(|&r| r <= 0.0) {
            return Err(NpqlError::InvalidConfig("learning rates must be positive".into()));
        }
        if self.eps <= 0.0 {
            return Err(NpqlError::InvalidConfig("eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || self.gamma >= 1.0 {
            return Err(NpqlError::InvalidConfig("gamma must be in [0,1)".into()));
        }
        if self.n_policy == 0 || self.n_target == 0 || self.n_step == 0 || self.batch_size == 0 {
            return Err(NpqlError::InvalidConfig("counts must be positive".into()));
        }
        if !(0.0 < self.polyak && self.polyak <= 1.0) {
            return Err(NpqlError::InvalidConfig("polyak rate must be in (0,1]".into()));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

/// Feature trunk plus output heads, with target copies of the trunk and the
/// value head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NpqlNetworks {
    pub trunk: Mlp,
    /// phi -> mixture logits (K), log-stds (K*d), gripper logits (K).
    pub head_bp: Mlp,
    /// phi -> AP means (K*d), AP gripper logits (K).
    pub head_ap: Mlp,
    /// (phi, action input) -> atom logits.
    pub head_z: Mlp,
    /// phi -> alpha pre-activation.
    pub head_alpha: Mlp,
    pub target_trunk: Mlp,
    pub target_head_z: Mlp,
    pub support: Support,
    pub k: usize,
    pub action_dim: usize,
}

impl NpqlNetworks {
    pub fn new<R: Rng>(obs_dim: usize, k: usize, action_dim: usize, cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        let support = Support::default_return();
        let mut trunk_sizes = vec![obs_dim];
        trunk_sizes.extend_from_slice(&cfg.trunk_layers);
        let phi = *trunk_sizes.last().unwrap();
        let trunk = Mlp::new(&trunk_sizes, rng)?;
        let head_bp = Mlp::new(&[phi, cfg.head_hidden, 2 * k + k * action_dim], rng)?;
        let head_ap = Mlp::new(&[phi, cfg.head_hidden, k * action_dim + k], rng)?;
        // action input carries the gripper bit
        let head_z = Mlp::new(&[phi + action_dim + 1, cfg.z_hidden, support.n_atoms], rng)?;
        let head_alpha = Mlp::new(&[phi, cfg.alpha_hidden, 1], rng)?;
        let target_trunk = trunk.clone();
        let target_head_z = head_z.clone();
        Ok(Self {
            trunk,
            head_bp,
            head_ap,
            head_z,
            head_alpha,
            target_trunk,
            target_head_z,
            support,
            k,
            action_dim,
        })
    }

    pub fn phi_dim(&self) -> usize {
        self.trunk.out_dim()
    }

    pub fn features(&self, obs: &[f64]) -> Result<Array1<f64>> {
        Ok(self.trunk.forward(&row(obs).view())?.row(0).to_owned())
    }

    pub fn target_features(&self, obs: &[f64]) -> Result<Array1<f64>> {
        Ok(self.target_trunk.forward(&row(obs).view())?.row(0).to_owned())
    }

    /// alpha = softplus(head output) + floor, always positive.
    pub fn alpha(&self, phi: &Array1<f64>) -> Result<f64> {
        let out = self.head_alpha.forward(&row(phi.as_slice().unwrap()).view())?;
        Ok(softplus(out[[0, 0]]) + ALPHA_FLOOR)
    }

    /// Atom probabilities and their mean for a batch of actions at one state,
    /// through either the online or target value head.
    pub fn z_eval(
        &self,
        target: bool,
        phi: &Array1<f64>,
        actions: &[HybridAction],
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let head = if target { &self.target_head_z } else { &self.head_z };
        let n = actions.len();
        let mut inputs = Array2::zeros((n, self.phi_dim() + self.action_dim + 1));
        for (i, a) in actions.iter().enumerate() {
            let q_in = a.q_input();
            for (j, &v) in phi.iter().enumerate() {
                inputs[[i, j]] = v;
            }
            for (j, &v) in q_in.iter().enumerate() {
                inputs[[i, self.phi_dim() + j]] = v;
            }
        }
        let logits = head.forward(&inputs.view())?;
        let probs = softmax_rows(&logits.view());
        let atoms = self.support.atoms();
        let means = probs
            .axis_iter(Axis(0))
            .map(|p| p.iter().zip(&atoms).map(|(&pi, &z)| pi * z).sum())
            .collect();
        Ok((probs, means))
    }

    pub fn polyak(&mut self, rate: f64) -> Result<()> {
        polyak_update(&mut self.target_trunk, &self.trunk, rate)?;
        polyak_update(&mut self.target_head_z, &self.head_z, rate)
    }

    pub fn params_finite(&self) -> bool {
        [
            &self.trunk,
            &self.head_bp,
            &self.head_ap,
            &self.head_z,
            &self.head_alpha,
        ]
        .iter()
        .all(|m| m.params_finite())
    }
}

fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Split a bp-head output row into (mixture logits, raw log-stds, gripper
/// logits).
fn split_bp(out: &[f64], k: usize, d: usize) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let logits = Array1::from_vec(out[..k].to_vec());
    let log_stds = Array2::from_shape_vec((k, d), out[k..k + k * d].to_vec()).unwrap();
    let gripper = Array1::from_vec(out[k + k * d..].to_vec());
    (logits, log_stds, gripper)
}

/// Prior from already-computed features: frozen means out of the AP head,
/// adaptable parameters out of the bp head, log-stds clamped.
pub fn prior_from_features(nets: &NpqlNetworks, phi: &Array1<f64>) -> Result<ApGmmPrior> {
    let (k, d) = (nets.k, nets.action_dim);
    let phi_row = row(phi.as_slice().unwrap());
    let bp = nets.head_bp.forward(&phi_row.view())?;
    let ap = nets.head_ap.forward(&phi_row.view())?;
    let bp_row: Vec<f64> = bp.row(0).to_vec();
    let ap_row: Vec<f64> = ap.row(0).to_vec();
    if bp_row.iter().chain(ap_row.iter()).any(|v| !v.is_finite()) {
        return Err(NpqlError::NonFinite(format!(
            "prior head produced non-finite output (bp {bp_row:?}, ap {ap_row:?})"
        )));
    }
    let means = Array2::from_shape_vec((k, d), ap_row[..k * d].to_vec()).unwrap();
    let (logits, log_stds, gripper) = split_bp(&bp_row, k, d);
    let mut prior = ApGmmPrior::new(means, log_stds, logits, gripper)?;
    prior.clamp_stds();
    Ok(prior)
}

pub fn build_prior(nets: &NpqlNetworks, obs: &[f64]) -> Result<ApGmmPrior> {
    let phi = nets.features(obs)?;
    prior_from_features(nets, &phi)
}

/// Self-normalized importance weights w_i = softmax(Q_i / alpha).
pub fn boltzmann_weights(q_values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(NpqlError::InvalidConfig("alpha must be positive".into()));
    }
    if q_values.is_empty() {
        return Err(NpqlError::EmptyInput("q values".into()));
    }
    let scaled: Vec<f64> = q_values.iter().map(|q| q / alpha).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    Ok(w)
}

/// Candidates from the prior with their Boltzmann weights: the realized
/// non-parametric policy at one state.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub candidates: Vec<HybridAction>,
    pub prior_log_probs: Vec<f64>,
    pub q_values: Vec<f64>,
    pub alpha: f64,
    pub weights: Vec<f64>,
}

impl PolicyBatch {
    pub fn build<R: Rng>(
        nets: &NpqlNetworks,
        obs: &[f64],
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let phi = nets.features(obs)?;
        let prior = prior_from_features(nets, &phi)?;
        let samples = prior.sample(n, rng)?;
        let (candidates, prior_log_probs): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
        let (_, q_values) = nets.z_eval(false, &phi, &candidates)?;
        let alpha = nets.alpha(&phi)?;
        let weights = boltzmann_weights(&q_values, alpha)?;
        Ok(Self {
            candidates,
            prior_log_probs,
            q_values,
            alpha,
            weights,
        })
    }
}

/// Categorical draw over the candidates by weight.
pub fn sample_action<R: Rng>(pb: &PolicyBatch, rng: &mut R) -> HybridAction {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, &w) in pb.candidates.iter().zip(&pb.weights) {
        acc += w;
        if u < acc {
            return a.clone();
        }
    }
    pb.candidates.last().unwrap().clone()
}

/// Importance-sampled expectation of per-candidate values under q.
pub fn expected_under_q(values: &[f64], pb: &PolicyBatch) -> Result<f64> {
    if values.len() != pb.weights.len() {
        return Err(NpqlError::ShapeMismatch("values vs candidates".into()));
    }
    Ok(values.iter().zip(&pb.weights).map(|(&v, &w)| v * w).sum())
}

/// Eq. 6 sample estimate: alpha*eps + alpha*log((1/n) sum exp(Q_i/alpha)),
/// plus its derivative in alpha.
pub fn alpha_dual_loss(q_values: &[f64], eps: f64, alpha: f64) -> Result<(f64, f64)> {
    if q_values.len() < 2 {
        return Err(NpqlError::EmptyInput("need >= 2 q samples".into()));
    }
    if !(alpha > 0.0) {
        return Err(NpqlError::InvalidConfig("alpha must be positive".into()));
    }
    let n = q_values.len() as f64;
    let m = q_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = q_values.iter().map(|q| ((q - m) / alpha).exp()).collect();
    let z: f64 = exps.iter().sum();
    // s = alpha * log((1/n) sum exp(Q/alpha))
    let s = alpha * (z.ln() - n.ln()) + m;
    let e_q: f64 = q_values
        .iter()
        .zip(&exps)
        .map(|(&q, &e)| q * e / z)
        .sum();
    let loss = alpha * eps + s;
    let dloss = eps + (s - e_q) / alpha;
    Ok((loss, dloss))
}

/// Frozen per-state snapshot shared by the alpha update and the M-step: the
/// candidates act as b_{theta_k} while theta moves.
#[derive(Debug, Clone)]
pub struct MStepSample {
    pub phi: Array1<f64>,
    /// Frozen AP means for the prior.
    pub means: Array2<f64>,
    pub candidates: Vec<HybridAction>,
    pub q_values: Vec<f64>,
    pub weights: Vec<f64>,
    pub alpha: f64,
}

pub fn prepare_m_step<R: Rng>(
    batch_obs: &[Vec<f64>],
    nets: &NpqlNetworks,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<Vec<MStepSample>> {
    if batch_obs.is_empty() {
        return Err(NpqlError::EmptyInput("m-step batch".into()));
    }
    let mut out = Vec::with_capacity(batch_obs.len());
    for obs in batch_obs {
        let phi = nets.features(obs)?;
        let prior = prior_from_features(nets, &phi)?;
        let samples = prior.sample(cfg.n_policy, rng)?;
        let candidates: Vec<HybridAction> = samples.into_iter().map(|(a, _)| a).collect();
        let (_, q_values) = nets.z_eval(false, &phi, &candidates)?;
        let alpha = nets.alpha(&phi)?;
        let weights = boltzmann_weights(&q_values, alpha)?;
        out.push(MStepSample {
            phi,
            means: prior.means.clone(),
            candidates,
            q_values,
            weights,
            alpha,
        });
    }
    Ok(out)
}

/// L^M = mean_s [ -sum_i w_i log b_theta(a_i) - sign * nu * H(b_theta) ],
/// differentiated w.r.t. the bp head only. Returns (loss, bp grads, mean
/// entropy surrogate).
pub fn m_step_loss(
    samples: &[MStepSample],
    nets: &NpqlNetworks,
    cfg: &AgentConfig,
    nu: f64,
) -> Result<(f64, MlpGrads, f64)> {
    if samples.is_empty() {
        return Err(NpqlError::EmptyInput("m-step batch".into()));
    }
    let (k, d) = (nets.k, nets.action_dim);
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut entropy_sum = 0.0;
    let mut grads = MlpGrads::zeros_like(&nets.head_bp);
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    for s in samples {
        let phi_row = row(s.phi.as_slice().unwrap());
        let (bp_out, cache) = nets.head_bp.forward_cached(&phi_row.view())?;
        let bp_row: Vec<f64> = bp_out.row(0).to_vec();
        let (logits, raw_log_stds, gripper) = split_bp(&bp_row, k, d);
        let prior = {
            let mut p = ApGmmPrior::new(s.means.clone(), raw_log_stds.clone(), logits, gripper)?;
            p.clamp_stds();
            p
        };
        let mut loss_i = 0.0;
        let mut pg = PriorGrad::zeros(k, d);
        for (a, &w) in s.candidates.iter().zip(&s.weights) {
            let (lp, g) = prior.log_prob_grad(a)?;
            loss_i -= w * lp;
            pg.add_scaled(&g, -w);
        }
        let (entropy, hg) = prior.entropy_surrogate_grad();
        entropy_sum += entropy;
        loss_i -= cfg.entropy_sign * nu * entropy;
        pg.add_scaled(&hg, -cfg.entropy_sign * nu);
        total += loss_i;
        // zero the gradient where the std clamp is active
        let mut flat = pg.flat();
        for ki in 0..k {
            for di in 0..d {
                let raw = raw_log_stds[[ki, di]];
                if raw <= lo || raw >= hi {
                    flat[k + ki * d + di] = 0.0;
                }
            }
        }
        let upstream = Array2::from_shape_vec((1, flat.len()), flat).unwrap();
        let (g, _) = nets.head_bp.backward(&cache, &upstream.view())?;
        grads.add_assign(&g);
    }
    grads.scale(scale);
    Ok((total * scale, grads, entropy_sum * scale))
}

/// Dual ascent on the entropy floor: nu grows while entropy < eps_nu.
pub fn nu_dual_update(entropy_estimate: f64, cfg: &AgentConfig, eps_nu: f64, nu: f64) -> f64 {
    (nu - cfg.lr_nu * (entropy_estimate - eps_nu)).max(0.0)
}

/// Eq. 6 loss summed over a batch of frozen per-state snapshots,
/// differentiated into the alpha head.
pub fn alpha_head_loss(
    samples: &[MStepSample],
    nets: &NpqlNetworks,
    cfg: &AgentConfig,
) -> Result<(f64, MlpGrads, f64)> {
    if samples.is_empty() {
        return Err(NpqlError::EmptyInput("alpha batch".into()));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut alpha_sum = 0.0;
    let mut grads = MlpGrads::zeros_like(&nets.head_alpha);
    for s in samples {
        let phi_row = row(s.phi.as_slice().unwrap());
        let (out, cache) = nets.head_alpha.forward_cached(&phi_row.view())?;
        let pre = out[[0, 0]];
        let alpha = softplus(pre) + ALPHA_FLOOR;
        alpha_sum += alpha;
        let (loss, dloss_dalpha) = alpha_dual_loss(&s.q_values, cfg.eps, alpha)?;
        total += loss;
        // d alpha / d pre = sigmoid(pre)
        let upstream = row(&[dloss_dalpha * sigmoid(pre)]);
        let (g, _) = nets.head_alpha.backward(&cache, &upstream.view())?;
        grads.add_assign(&g);
    }
    grads.scale(scale);
    Ok((total * scale, grads, alpha_sum * scale))
}

/// Frozen per-transition target distribution for the E-step value loss.
#[derive(Debug, Clone)]
pub struct EStepTarget {
    pub probs: Vec<f64>,
}

/// Build the averaged projected targets: mix the candidate distributions by
/// their Boltzmann weights, then project once (projection is linear in the
/// probabilities, so this equals the per-sample expected projection).
pub fn prepare_e_step_targets<R: Rng>(
    batch: &[NStepTransition],
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
            let prior = prior_from_features(nets, &phi_t)?;
            let samples = prior.sample(cfg.n_target, rng)?;
            let candidates: Vec<HybridAction> = samples.into_iter().map(|(a, _)| a).collect();
            let (probs, q_values) = nets.z_eval(true, &phi_t, &candidates)?;
            let alpha = nets.alpha(&phi_t)?;
            let weights = boltzmann_weights(&q_values, alpha)?;
            let mut mixed = vec![0.0; nets.support.n_atoms];
            for (i, &w) in weights.iter().enumerate() {
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

pub struct EStepGrads {
    pub trunk: MlpGrads,
    pub head_ap: MlpGrads,
    pub head_z: MlpGrads,
    pub l_ap: f64,
    pub l_q: f64,
}

impl EStepGrads {
    pub fn loss(&self, cfg: &AgentConfig) -> f64 {
        cfg.lambda_ap * self.l_ap + self.l_q
    }
}

/// L^E = lambda^ap * L^ap + L^Q against frozen targets, differentiated into
/// trunk, AP head and value head. The bp and alpha heads receive nothing.
pub fn e_step_loss(
    batch: &[NStepTransition],
    targets: &[EStepTarget],
    nets: &NpqlNetworks,
    cfg: &AgentConfig,
) -> Result<EStepGrads> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(NpqlError::ShapeMismatch("batch vs targets".into()));
    }
    let (k, d) = (nets.k, nets.action_dim);
    let scale = 1.0 / batch.len() as f64;
    let mut g_trunk = MlpGrads::zeros_like(&nets.trunk);
    let mut g_ap = MlpGrads::zeros_like(&nets.head_ap);
    let mut g_z = MlpGrads::zeros_like(&nets.head_z);
    let mut l_ap_sum = 0.0;
    let mut l_q_sum = 0.0;
    for (tr, tgt) in batch.iter().zip(targets) {
        let obs_row = row(&tr.obs);
        let (phi, trunk_cache) = nets.trunk.forward_cached(&obs_row.view())?;
        let mut phi_grad = Array2::zeros((1, nets.phi_dim()));

        // behavior cloning on the privileged AP labels
        let (ap_out, ap_cache) = nets.head_ap.forward_cached(&phi.view())?;
        let mut ap_upstream = Array2::zeros((1, k * d + k));
        let mut mse = 0.0;
        let mut bce = 0.0;
        for (ki, (vel, grip)) in tr.ap_labels.iter().enumerate() {
            for di in 0..d {
                let pred = ap_out[[0, ki * d + di]];
                let diff = pred - vel[di];
                mse += diff * diff / (k * d) as f64;
                ap_upstream[[0, ki * d + di]] = 2.0 * diff / (k * d) as f64;
            }
            let logit = ap_out[[0, k * d + ki]];
            let y = if *grip { 1.0 } else { 0.0 };
            let p = sigmoid(logit);
            bce += -(y * p.max(1e-300).ln() + (1.0 - y) * (1.0 - p).max(1e-300).ln()) / k as f64;
            ap_upstream[[0, k * d + ki]] = (p - y) / k as f64;
        }
        let l_ap = mse + bce;
        l_ap_sum += l_ap;
        ap_upstream.mapv_inplace(|v| v * cfg.lambda_ap * scale);
        let (ga, ap_input_grad) = nets.head_ap.backward(&ap_cache, &ap_upstream.view())?;
        g_ap.add_assign(&ga);
        phi_grad += &ap_input_grad;

        // cross-entropy of the online value head against the frozen target
        let phi1 = phi.row(0).to_owned();
        let q_in = tr.action.q_input();
        let mut z_input = Array2::zeros((1, nets.phi_dim() + d + 1));
        for (j, &v) in phi1.iter().enumerate() {
            z_input[[0, j]] = v;
        }
        for (j, &v) in q_in.iter().enumerate() {
            z_input[[0, nets.phi_dim() + j]] = v;
        }
        let (logits, z_cache) = nets.head_z.forward_cached(&z_input.view())?;
        let logits_row: Vec<f64> = logits.row(0).to_vec();
        let log_probs = log_softmax_row(&logits_row);
        let l_q: f64 = -tgt
            .probs
            .iter()
            .zip(&log_probs)
            .map(|(&t, &lp)| t * lp)
            .sum::<f64>();
        l_q_sum += l_q;
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let z_upstream = Array2::from_shape_vec(
            (1, nets.support.n_atoms),
            probs
                .iter()
                .zip(&tgt.probs)
                .map(|(&p, &t)| (p - t) * scale)
                .collect(),
        )
        .unwrap();
        let (gz, z_input_grad) = nets.head_z.backward(&z_cache, &z_upstream.view())?;
        g_z.add_assign(&gz);
        for j in 0..nets.phi_dim() {
            phi_grad[[0, j]] += z_input_grad[[0, j]];
        }

        let (gt, _) = nets.trunk.backward(&trunk_cache, &phi_grad.view())?;
        g_trunk.add_assign(&gt);
    }
    Ok(EStepGrads {
        trunk: g_trunk,
        head_ap: g_ap,
        head_z: g_z,
        l_ap: l_ap_sum * scale,
        l_q: l_q_sum * scale,
    })
}

/// One-step metric record emitted by `train_iteration`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IterMetrics {
    pub l_q: f64,
    pub l_ap: f64,
    pub l_m: f64,
    pub alpha_mean: f64,
    pub nu: f64,
    pub prior_entropy: f64,
    pub grad_steps: usize,
    pub env_steps: usize,
    pub skipped_updates: u64,
}

/// Rollout bookkeeping for one environment instance.
pub struct RolloutCtx {
    pub env: ManipEnv,
    pub obs: Vec<f64>,
    pub episode_id: u64,
    pub step_id: u32,
}

impl RolloutCtx {
    pub fn new<R: Rng>(mut env: ManipEnv, episode_id: u64, rng: &mut R) -> Self {
        let obs = env.reset(rng);
        Self {
            env,
            obs,
            episode_id,
            step_id: 0,
        }
    }
}

/// Step each context once per round, recording transitions with privileged
/// AP labels, resetting on episode end.
pub fn rollout<R, F>(
    ctxs: &mut [RolloutCtx],
    steps: usize,
    next_episode_id: &mut u64,
    rng: &mut R,
    mut policy: F,
) -> Result<Vec<Transition>>
where
    R: Rng,
    F: FnMut(&[f64], &mut R) -> Result<HybridAction>,
{
    let mut out = Vec::with_capacity(steps);
    let mut taken = 0;
    while taken < steps {
        for ctx in ctxs.iter_mut() {
            if taken >= steps {
                break;
            }
            let ap_labels = compute_aps(&ctx.env.state, &ctx.env.cfg);
            let action = policy(&ctx.obs, rng)?;
            let (next_obs, reward, done) = ctx.env.step(&action)?;
            out.push(Transition {
                obs: ctx.obs.clone(),
                action,
                reward,
                next_obs: next_obs.clone(),
                done,
                ap_labels,
                episode_id: ctx.episode_id,
                step_id: ctx.step_id,
            });
            taken += 1;
            if done {
                *next_episode_id += 1;
                ctx.episode_id = *next_episode_id;
                ctx.step_id = 0;
                ctx.obs = ctx.env.reset(rng);
            } else {
                ctx.step_id += 1;
                ctx.obs = next_obs;
            }
        }
    }
    Ok(out)
}

/// The AP-NPQL learner: networks plus per-head optimizer state and the nu
/// dual variable.
#[derive(Serialize, Deserialize)]
pub struct NpqlAgent {
    pub nets: NpqlNetworks,
    pub cfg: AgentConfig,
    pub nu: f64,
    pub eps_nu: f64,
    pub skipped_updates: u64,
    opt_trunk: AdamState,
    opt_ap: AdamState,
    opt_z: AdamState,
    opt_alpha: AdamState,
    opt_bp: AdamState,
}

impl NpqlAgent {
    pub fn new<R: Rng>(obs_dim: usize, k: usize, action_dim: usize, cfg: AgentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let nets = NpqlNetworks::new(obs_dim, k, action_dim, &cfg, rng)?;
        // entropy floor defaults to half the initial prior entropy
        let eps_nu = match cfg.eps_nu {
            Some(v) => v,
            None => {
                let prior = build_prior(&nets, &vec![0.0; obs_dim])?;
                0.5 * prior.entropy_surrogate()
            }
        };
        let opt_trunk = AdamState::new(nets.trunk.num_params(), cfg.lr_e);
        let opt_ap = AdamState::new(nets.head_ap.num_params(), cfg.lr_e);
        let opt_z = AdamState::new(nets.head_z.num_params(), cfg.lr_e);
        let opt_alpha = AdamState::new(nets.head_alpha.num_params(), cfg.lr_alpha);
        let opt_bp = AdamState::new(nets.head_bp.num_params(), cfg.lr_m);
        Ok(Self {
            nets,
            cfg,
            nu: 0.0,
            eps_nu,
            skipped_updates: 0,
            opt_trunk,
            opt_ap,
            opt_z,
            opt_alpha,
            opt_bp,
        })
    }

    pub fn act<R: Rng>(&self, obs: &[f64], rng: &mut R) -> Result<HybridAction> {
        let pb = PolicyBatch::build(&self.nets, obs, self.cfg.n_policy, rng)?;
        Ok(sample_action(&pb, rng))
    }

    fn apply(mlp: &mut Mlp, grads: &MlpGrads, opt: &mut AdamState, skipped: &mut u64) -> Result<()> {
        let mut params = mlp.params();
        if !adam_step(&mut params, &grads.flat(), opt)? {
            *skipped += 1;
            return Ok(());
        }
        mlp.set_params(&params)
    }

    /// One Algorithm-1 gradient step on a sampled batch: E-step, alpha
    /// update, M-step, nu update, Polyak target tracking.
    pub fn gradient_step<R: Rng>(
        &mut self,
        batch: &[NStepTransition],
        rng: &mut R,
    ) -> Result<IterMetrics> {
        let cfg = self.cfg.clone();
        let targets = prepare_e_step_targets(batch, &self.nets, &cfg, rng)?;
        let e = e_step_loss(batch, &targets, &self.nets, &cfg)?;
        let mut skipped = 0u64;
        Self::apply(&mut self.nets.trunk, &e.trunk, &mut self.opt_trunk, &mut skipped)?;
        Self::apply(&mut self.nets.head_ap, &e.head_ap, &mut self.opt_ap, &mut skipped)?;
        Self::apply(&mut self.nets.head_z, &e.head_z, &mut self.opt_z, &mut skipped)?;

        let batch_obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
        let samples = prepare_m_step(&batch_obs, &self.nets, &cfg, rng)?;
        let (_, a_grads, alpha_mean) = alpha_head_loss(&samples, &self.nets, &cfg)?;
        Self::apply(&mut self.nets.head_alpha, &a_grads, &mut self.opt_alpha, &mut skipped)?;
        let (l_m, m_grads, entropy) = m_step_loss(&samples, &self.nets, &cfg, self.nu)?;
        Self::apply(&mut self.nets.head_bp, &m_grads, &mut self.opt_bp, &mut skipped)?;
        self.nu = nu_dual_update(entropy, &cfg, self.eps_nu, self.nu);
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

    /// Algorithm 1 body: batch rollout into the buffer, then the configured
    /// number of gradient steps.
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
        let cfg = &self.cfg;
        let transitions = rollout(ctxs, rollout_steps, next_episode_id, rng, |obs, r| {
            let pb = PolicyBatch::build(nets, obs, cfg.n_policy, r)?;
            Ok(sample_action(&pb, r))
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
