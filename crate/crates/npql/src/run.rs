//! Experiment plumbing shared by the CLI and the integration tests: run
//! configuration with dotted-path overrides, the training loop with metrics
//! CSV + checkpoints, and evaluation helpers.

use crate::agent::{AgentConfig, NpqlAgent, RolloutCtx};
use crate::baselines::{Algorithm, BaselineAgent};
use crate::dist::HybridAction;
use crate::env::{
    compute_aps, scripted_expert, EnvConfig, ManipEnv, Task, ACTION_DIM, NUM_APS, OBS_DIM,
};
use crate::error::{NpqlError, Result};
use crate::replay::{load_transitions, save_transitions, DualBuffer, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str =
    "env_steps,grad_steps,success_rate,loss_q,loss_ap,loss_m,alpha_mean,nu,prior_entropy,wall_time";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub task: Task,
    pub seed: u64,
    /// Total environment-step budget.
    pub budget: usize,
    /// Environment steps between evaluation points (and checkpoints).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Environment steps collected per training iteration.
    pub rollout_steps: usize,
    /// Gradient steps per training iteration.
    pub grad_steps: usize,
    pub buffer_capacity: usize,
    /// Scripted-expert episodes seeding the offline half of the buffer.
    pub expert_episodes: usize,
    pub agent: AgentConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::ApNpql,
            task: Task::Push,
            seed: 0,
            budget: 150_000,
            eval_every: 10_000,
            eval_episodes: 20,
            rollout_steps: 50,
            grad_steps: 12,
            buffer_capacity: 200_000,
            expert_episodes: 200,
            agent: AgentConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| NpqlError::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| NpqlError::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Apply a `dotted.path=value` override onto the TOML representation.
    pub fn with_override(&self, spec: &str) -> Result<Self> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| NpqlError::InvalidConfig(format!("override {spec:?} lacks '='")))?;
        let mut root: toml::Value =
            toml::from_str(&self.to_toml()?).map_err(|e| NpqlError::Serde(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for key in &parts[..parts.len() - 1] {
            node = node
                .get_mut(key)
                .ok_or_else(|| NpqlError::InvalidConfig(format!("unknown config field {key:?}")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| NpqlError::InvalidConfig(format!("{path:?} is not a table path")))?;
        let leaf = *parts.last().unwrap();
        let parsed: toml::Value = raw
            .parse::<i64>()
            .map(toml::Value::Integer)
            .or_else(|_| raw.parse::<f64>().map(toml::Value::Float))
            .or_else(|_| raw.parse::<bool>().map(toml::Value::Boolean))
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        if !table.contains_key(leaf) {
            return Err(NpqlError::InvalidConfig(format!(
                "unknown config field {path:?}"
            )));
        }
        table.insert(leaf.to_string(), parsed);
        root.try_into()
            .map_err(|e| NpqlError::InvalidConfig(format!("override {spec:?}: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        if self.eval_every == 0 || self.rollout_steps == 0 {
            return Err(NpqlError::InvalidConfig(
                "eval_every and rollout_steps must be positive".into(),
            ));
        }
        if self.eval_episodes == 0 {
            return Err(NpqlError::InvalidConfig("eval_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Either learner behind one dispatch surface.
#[derive(Serialize, Deserialize)]
pub enum Learner {
    Npql(NpqlAgent),
    Baseline(BaselineAgent),
}

impl Learner {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        match cfg.algorithm {
            Algorithm::ApNpql => Ok(Learner::Npql(NpqlAgent::new(
                OBS_DIM,
                NUM_APS,
                ACTION_DIM,
                cfg.agent.clone(),
                rng,
            )?)),
            algo => Ok(Learner::Baseline(BaselineAgent::new(
                algo,
                OBS_DIM,
                NUM_APS,
                ACTION_DIM,
                cfg.agent.clone(),
                rng,
            )?)),
        }
    }

    pub fn act<R: Rng>(&self, obs: &[f64], rng: &mut R) -> Result<HybridAction> {
        match self {
            Learner::Npql(a) => a.act(obs, rng),
            Learner::Baseline(a) => a.act(obs, rng),
        }
    }

    fn train_iteration<R: Rng>(
        &mut self,
        ctxs: &mut [RolloutCtx],
        buffer: &mut DualBuffer,
        rollout_steps: usize,
        grad_steps: usize,
        next_episode_id: &mut u64,
        rng: &mut R,
    ) -> Result<crate::agent::IterMetrics> {
        match self {
            Learner::Npql(a) => {
                a.train_iteration(ctxs, buffer, rollout_steps, grad_steps, next_episode_id, rng)
            }
            Learner::Baseline(a) => {
                a.train_iteration(ctxs, buffer, rollout_steps, grad_steps, next_episode_id, rng)
            }
        }
    }
}

/// Full training state persisted at every evaluation point.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub learner: Learner,
    pub env_steps: usize,
    pub grad_steps: u64,
    pub next_episode_id: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| NpqlError::Serde(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| NpqlError::Serde(e.to_string()))
    }
}

/// Roll the scripted expert and collect labeled transitions.
pub fn collect_expert<R: Rng>(
    cfg: &EnvConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let mut env = ManipEnv::new(cfg.clone())?;
    let mut out = Vec::new();
    for ep in 0..episodes {
        let mut obs = env.reset(rng);
        let mut step_id = 0u32;
        loop {
            let action = scripted_expert(&env.state, cfg, rng);
            let ap_labels = compute_aps(&env.state, cfg);
            let (next, reward, done) = env.step(&action)?;
            out.push(Transition {
                obs: obs.clone(),
                action: action.clone(),
                reward,
                next_obs: next.clone(),
                done,
                ap_labels,
                episode_id: ep as u64,
                step_id,
            });
            step_id += 1;
            if done {
                break;
            }
            obs = next;
        }
    }
    Ok(out)
}

/// Load the expert buffer from `path`, generating and persisting it first if
/// missing.
pub fn expert_transitions(
    path: &Path,
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    if path.exists() {
        let file = fs::File::open(path)?;
        return load_transitions(BufReader::new(file));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_eeef);
    let transitions = collect_expert(env_cfg, episodes, &mut rng)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    save_transitions(&mut file, &transitions)?;
    Ok(transitions)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub env_steps: usize,
    pub success_rate: f64,
}

/// One metrics CSV row.
fn csv_row(
    env_steps: usize,
    grad_steps: u64,
    success: f64,
    m: &crate::agent::IterMetrics,
    wall: f64,
) -> String {
    format!(
        "{env_steps},{grad_steps},{success},{},{},{},{},{},{},{wall}",
        m.l_q, m.l_ap, m.l_m, m.alpha_mean, m.nu, m.prior_entropy
    )
}

pub struct RunResult {
    pub dir: PathBuf,
    pub evals: Vec<EvalPoint>,
    pub final_success: f64,
}

/// Execute a training run to budget: rollout/update iterations with an
/// evaluation + checkpoint every `eval_every` environment steps. The metrics
/// CSV gets one row per evaluation point.
pub fn run_training(cfg: &RunConfig, expert_cache: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let env_cfg = EnvConfig::new(cfg.task);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let learner = Learner::new(cfg, &mut rng)?;
    let mut buffer = DualBuffer::new(cfg.buffer_capacity, cfg.agent.expert_ratio)?;
    if cfg.expert_episodes > 0 {
        let default_path = cfg.out_dir.join(format!("expert_{}.jsonl", cfg.task.name()));
        let path = expert_cache.unwrap_or(&default_path);
        buffer.load_expert(expert_transitions(
            path,
            &env_cfg,
            cfg.expert_episodes,
            cfg.seed,
        )?);
    }

    let mut ctxs = vec![RolloutCtx::new(ManipEnv::new(env_cfg.clone())?, 0, &mut rng)];
    let mut next_episode_id = 1u64;
    let mut env_steps = 0usize;
    let mut grad_steps = 0u64;
    let mut evals = Vec::new();
    let start = std::time::Instant::now();

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');

    let eval_and_log = |learner: &Learner,
                            env_steps: usize,
                            grad_steps: u64,
                            metrics: &crate::agent::IterMetrics,
                            csv: &mut String,
                            evals: &mut Vec<EvalPoint>|
     -> Result<f64> {
        // fixed eval seed stream decoupled from the training stream
        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (env_steps as u64) ^ 0xe7a1);
        let rate = crate::env::evaluate_success(&env_cfg, cfg.eval_episodes, &mut eval_rng, |obs, r| {
            learner.act(obs, r)
        })?;
        evals.push(EvalPoint {
            env_steps,
            success_rate: rate,
        });
        csv.push_str(&csv_row(
            env_steps,
            grad_steps,
            rate,
            metrics,
            start.elapsed().as_secs_f64(),
        ));
        csv.push('\n');
        Ok(rate)
    };

    let mut last_metrics = crate::agent::IterMetrics::default();
    let mut final_rate = eval_and_log(&learner, 0, 0, &last_metrics, &mut csv, &mut evals)?;
    Checkpoint {
        config: cfg.clone(),
        learner,
        env_steps,
        grad_steps,
        next_episode_id,
    }
    .save(&cfg.out_dir.join("checkpoint_0.json"))?;
    let restored = Checkpoint::load(&cfg.out_dir.join("checkpoint_0.json"))?;
    let mut learner = restored.learner;

    let mut next_eval = cfg.eval_every;
    while env_steps < cfg.budget {
        let steps = cfg.rollout_steps.min(cfg.budget - env_steps);
        let m = learner.train_iteration(
            &mut ctxs,
            &mut buffer,
            steps,
            cfg.grad_steps,
            &mut next_episode_id,
            &mut rng,
        )?;
        env_steps += m.env_steps;
        grad_steps += m.grad_steps as u64;
        last_metrics = m;
        if env_steps >= next_eval || env_steps >= cfg.budget {
            final_rate =
                eval_and_log(&learner, env_steps, grad_steps, &last_metrics, &mut csv, &mut evals)?;
            Checkpoint {
                config: cfg.clone(),
                learner,
                env_steps,
                grad_steps,
                next_episode_id,
            }
            .save(&cfg.out_dir.join(format!("checkpoint_{env_steps}.json")))?;
            let restored =
                Checkpoint::load(&cfg.out_dir.join(format!("checkpoint_{env_steps}.json")))?;
            learner = restored.learner;
            while next_eval <= env_steps {
                next_eval += cfg.eval_every;
            }
        }
    }

    let mut file = fs::File::create(cfg.out_dir.join("metrics.csv"))?;
    file.write_all(csv.as_bytes())?;
    Ok(RunResult {
        dir: cfg.out_dir.clone(),
        evals,
        final_success: final_rate,
    })
}

/// Parse the success-rate curve back out of a metrics CSV.
pub fn read_curve(path: &Path) -> Result<Vec<EvalPoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| NpqlError::EmptyInput("metrics csv".into()))?;
    if header != METRICS_HEADER {
        return Err(NpqlError::InvalidConfig(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(NpqlError::InvalidConfig(format!("bad metrics row {line:?}")));
        }
        out.push(EvalPoint {
            env_steps: cols[0]
                .parse()
                .map_err(|e| NpqlError::InvalidConfig(format!("{e}")))?,
            success_rate: cols[2]
                .parse()
                .map_err(|e| NpqlError::InvalidConfig(format!("{e}")))?,
        });
    }
    Ok(out)
}

/// Byte comparison of two metrics CSVs with the wall-clock column removed
/// (wall time is the one legitimately nondeterministic field).
pub fn csv_equal_modulo_wall_time(a: &str, b: &str) -> bool {
    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| {
                let mut cols: Vec<&str> = l.split(',').collect();
                if cols.len() == 10 {
                    cols.truncate(9);
                }
                cols.join(",")
            })
            .collect()
    };
    strip(a) == strip(b)
}
