//! Toy 2-D manipulation tasks with sparse terminal rewards: a point robot
//! pushes an object to a goal, or picks it up and places it. Both carry the
//! same hybrid action space (planar velocity command + gripper bit) and the
//! same action-primitive geometry as their tabletop counterparts.

use crate::dist::HybridAction;
use crate::error::{NpqlError, Result};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const ACTION_DIM: usize = 2;
/// Number of action primitives: toward-object, toward-goal, toward-neutral.
pub const NUM_APS: usize = 3;
/// Frames of robot pose/gripper history stacked into the observation.
pub const STACK: usize = 3;
/// pos(2) + vel(2) + gripper(1) per stacked frame.
pub const ROBOT_DIMS: usize = 5;
/// Stacked robot frames + object position + goal position.
pub const OBS_DIM: usize = STACK * ROBOT_DIMS + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Push,
    PickPlace,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Push => "push",
            Task::PickPlace => "pickplace",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = NpqlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "push" => Ok(Task::Push),
            "pickplace" | "pick-place" => Ok(Task::PickPlace),
            other => Err(NpqlError::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: Task,
    /// Control period in seconds.
    pub dt: f64,
    /// Episode length in steps; dt * horizon must stay within 14 s.
    pub horizon: usize,
    /// Object/goal spawn box, half-width around the origin per axis.
    pub spawn_half_width: f64,
    pub success_radius: f64,
    /// Contact radius for push, grasp radius for pick-place.
    pub contact_radius: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    /// Gain from positional error to commanded velocity in the APs.
    pub ap_gain: f64,
    /// Workspace half-width; positions are clamped into the box.
    pub workspace_half_width: f64,
}

impl EnvConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            dt: 0.15,
            horizon: 93,
            spawn_half_width: 0.8,
            success_radius: 0.1,
            contact_radius: 0.12,
            max_speed: 1.0,
            max_accel: 1.2,
            ap_gain: 4.0,
            workspace_half_width: 1.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dt * self.horizon as f64 > 14.0 + 1e-9 {
            return Err(NpqlError::InvalidConfig(format!(
                "horizon {} x dt {} exceeds the 14 s budget",
                self.horizon, self.dt
            )));
        }
        if self.dt <= 0.0 || self.horizon == 0 || self.success_radius <= 0.0 {
            return Err(NpqlError::InvalidConfig("non-positive env parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipState {
    pub robot_pos: [f64; 2],
    pub robot_vel: [f64; 2],
    pub gripper_closed: bool,
    pub holding: bool,
    pub object_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub step: usize,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub struct ManipEnv {
    pub cfg: EnvConfig,
    pub state: ManipState,
    /// Last STACK robot frames, oldest first.
    history: Vec<[f64; ROBOT_DIMS]>,
}

impl ManipEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let state = ManipState {
            robot_pos: [0.0; 2],
            robot_vel: [0.0; 2],
            gripper_closed: false,
            holding: false,
            object_pos: [0.0; 2],
            goal_pos: [0.0; 2],
            step: 0,
        };
        Ok(Self {
            cfg,
            state,
            history: vec![[0.0; ROBOT_DIMS]; STACK],
        })
    }

    /// Robot to neutral, object and goal uniform in the spawn box.
    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> Vec<f64> {
        let w = self.cfg.spawn_half_width;
        let draw = |r: &mut R| [r.gen_range(-w..w), r.gen_range(-w..w)];
        self.state = ManipState {
            robot_pos: [0.0; 2],
            robot_vel: [0.0; 2],
            gripper_closed: false,
            holding: false,
            object_pos: draw(rng),
            goal_pos: draw(rng),
            step: 0,
        };
        let frame = self.robot_frame();
        self.history = vec![frame; STACK];
        self.observation()
    }

    fn robot_frame(&self) -> [f64; ROBOT_DIMS] {
        let s = &self.state;
        [
            s.robot_pos[0],
            s.robot_pos[1],
            s.robot_vel[0],
            s.robot_vel[1],
            if s.gripper_closed { 1.0 } else { 0.0 },
        ]
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(OBS_DIM);
        for frame in &self.history {
            obs.extend_from_slice(frame);
        }
        obs.extend_from_slice(&self.state.object_pos);
        obs.extend_from_slice(&self.state.goal_pos);
        obs
    }

    fn success(&self) -> bool {
        let near = dist2(self.state.object_pos, self.state.goal_pos) <= self.cfg.success_radius;
        match self.cfg.task {
            Task::Push => near,
            Task::PickPlace => near && !self.state.holding,
        }
    }

    /// Velocity slews toward the command under the acceleration cap, the
    /// position integrates, and task-specific contact rules apply.
    pub fn step(&mut self, action: &HybridAction) -> Result<(Vec<f64>, f64, bool)> {
        if action.velocity.len() != ACTION_DIM {
            return Err(NpqlError::ShapeMismatch("action dimension".into()));
        }
        let cfg = &self.cfg;
        let dv_cap = cfg.max_accel * cfg.dt;
        let prev_pos = self.state.robot_pos;
        for i in 0..2 {
            let cmd = action.velocity[i].clamp(-cfg.max_speed, cfg.max_speed);
            let dv = (cmd - self.state.robot_vel[i]).clamp(-dv_cap, dv_cap);
            self.state.robot_vel[i] += dv;
            self.state.robot_pos[i] = (self.state.robot_pos[i] + self.state.robot_vel[i] * cfg.dt)
                .clamp(-cfg.workspace_half_width, cfg.workspace_half_width);
        }
        match cfg.task {
            Task::Push => {
                // quasi-static: the object rides along while in contact
                if dist2(prev_pos, self.state.object_pos) <= cfg.contact_radius {
                    for i in 0..2 {
                        self.state.object_pos[i] = (self.state.object_pos[i]
                            + (self.state.robot_pos[i] - prev_pos[i]))
                            .clamp(-cfg.workspace_half_width, cfg.workspace_half_width);
                    }
                }
            }
            Task::PickPlace => {
                let closing = action.gripper;
                if closing
                    && !self.state.holding
                    && dist2(self.state.robot_pos, self.state.object_pos) <= cfg.contact_radius
                {
                    self.state.holding = true;
                }
                if !closing {
                    self.state.holding = false;
                }
                self.state.gripper_closed = closing;
                if self.state.holding {
                    self.state.object_pos = self.state.robot_pos;
                }
            }
        }
        self.state.step += 1;
        self.history.remove(0);
        self.history.push(self.robot_frame());
        let succeeded = self.success();
        let reward = if succeeded { 1.0 } else { 0.0 };
        let done = succeeded || self.state.step >= cfg.horizon;
        Ok((self.observation(), reward, done))
    }
}

/// One action primitive: a velocity command plus a gripper bit.
pub type ApLabel = (Vec<f64>, bool);

/// The three privileged primitives: toward-object, toward-goal,
/// toward-neutral. Each velocity is the clipped, gain-scaled vector from the
/// robot to its target.
pub fn compute_aps(state: &ManipState, cfg: &EnvConfig) -> Vec<ApLabel> {
    let toward = |target: [f64; 2]| -> Vec<f64> {
        (0..2)
            .map(|i| (cfg.ap_gain * (target[i] - state.robot_pos[i])).clamp(-1.0, 1.0))
            .collect()
    };
    let grasping = matches!(cfg.task, Task::PickPlace) && state.holding;
    vec![
        (toward(state.object_pos), !grasping && matches!(cfg.task, Task::PickPlace)
            && dist2(state.robot_pos, state.object_pos) <= cfg.contact_radius),
        (toward(state.goal_pos), grasping),
        (toward([0.0, 0.0]), false),
    ]
}

/// Hand-coded expert: approach, (grasp,) transport, release. Gaussian
/// velocity noise, clipped back into the box.
pub fn scripted_expert<R: Rng>(state: &ManipState, cfg: &EnvConfig, rng: &mut R) -> HybridAction {
    let aps = compute_aps(state, cfg);
    let (vel, grip) = match cfg.task {
        Task::Push => {
            if dist2(state.robot_pos, state.object_pos) > cfg.contact_radius * 0.7 {
                aps[0].clone()
            } else {
                aps[1].clone()
            }
        }
        Task::PickPlace => {
            if state.holding {
                if dist2(state.robot_pos, state.goal_pos) <= cfg.success_radius * 0.5 {
                    // over the goal: open up and let go
                    (vec![0.0, 0.0], false)
                } else {
                    (aps[1].0.clone(), true)
                }
            } else if dist2(state.robot_pos, state.object_pos) <= cfg.contact_radius * 0.8 {
                (aps[0].0.clone(), true)
            } else {
                aps[0].clone()
            }
        }
    };
    let noised = vel
        .iter()
        .map(|v| {
            let eps: f64 = rand_distr::StandardNormal.sample(rng);
            v + 0.05 * eps
        })
        .collect();
    HybridAction::new(noised, grip)
}

/// Fraction of `episodes` on which `policy` reaches the sparse reward.
pub fn evaluate_success<R, F>(
    cfg: &EnvConfig,
    episodes: usize,
    rng: &mut R,
    mut policy: F,
) -> Result<f64>
where
    R: Rng,
    F: FnMut(&[f64], &mut R) -> Result<HybridAction>,
{
    if episodes == 0 {
        return Err(NpqlError::InvalidConfig("episodes must be >= 1".into()));
    }
    let mut env = ManipEnv::new(cfg.clone())?;
    let mut successes = 0usize;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        loop {
            let action = policy(&obs, rng)?;
            let (next, reward, done) = env.step(&action)?;
            if reward > 0.5 {
                successes += 1;
            }
            if done {
                break;
            }
            obs = next;
        }
    }
    Ok(successes as f64 / episodes as f64)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TraceStep {
    pub state: ManipState,
    pub action: HybridAction,
    pub reward: f64,
}

/// Append one episode as JSON lines, one step per line.
pub fn write_trace<W: Write>(out: &mut W, steps: &[TraceStep]) -> Result<()> {
    for step in steps {
        let line = serde_json::to_string(step)
            .map_err(|e| NpqlError::Serde(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
