//! Dual replay buffers: an online ring buffer plus a fixed expert buffer,
//! sampled at a fixed ratio, with N-step target assembly that respects
//! episode boundaries.

use crate::dist::HybridAction;
use crate::env::ApLabel;
use crate::error::{NpqlError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: HybridAction,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// Privileged AP labels recorded at collection time.
    pub ap_labels: Vec<ApLabel>,
    pub episode_id: u64,
    pub step_id: u32,
}

/// One assembled N-step sample. `discount` is gamma^n, or 0 when the episode
/// terminated inside the segment (no bootstrap).
#[derive(Debug, Clone, PartialEq)]
pub struct NStepTransition {
    pub obs: Vec<f64>,
    pub action: HybridAction,
    pub ap_labels: Vec<ApLabel>,
    pub cumulative_reward: f64,
    pub bootstrap_obs: Vec<f64>,
    pub discount: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Online,
    Expert,
}

pub struct DualBuffer {
    online: VecDeque<Transition>,
    expert: Vec<Transition>,
    capacity: usize,
    /// Expert fraction per batch.
    pub rho: f64,
}

impl DualBuffer {
    pub fn new(capacity: usize, rho: f64) -> Result<Self> {
        if capacity == 0 || !(0.0..=1.0).contains(&rho) {
            return Err(NpqlError::InvalidConfig(
                "capacity must be positive and rho in [0,1]".into(),
            ));
        }
        Ok(Self {
            online: VecDeque::with_capacity(capacity.min(1 << 20)),
            expert: Vec::new(),
            capacity,
            rho,
        })
    }

    pub fn push(&mut self, transitions: Vec<Transition>) {
        for t in transitions {
            if self.online.len() == self.capacity {
                self.online.pop_front();
            }
            self.online.push_back(t);
        }
    }

    pub fn load_expert(&mut self, transitions: Vec<Transition>) {
        self.expert = transitions;
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    pub fn expert_len(&self) -> usize {
        self.expert.len()
    }

    fn get(&self, source: Source, index: usize) -> Option<&Transition> {
        match source {
            Source::Online => self.online.get(index),
            Source::Expert => self.expert.get(index),
        }
    }

    fn len(&self, source: Source) -> usize {
        match source {
            Source::Online => self.online.len(),
            Source::Expert => self.expert.len(),
        }
    }

    /// Accumulate up to N rewards from `index`, stopping at episode
    /// boundaries, and bootstrap from the last reached observation.
    pub fn nstep_assemble(
        &self,
        source: Source,
        index: usize,
        n: usize,
        gamma: f64,
    ) -> Result<NStepTransition> {
        let first = self
            .get(source, index)
            .ok_or_else(|| NpqlError::IndexOutOfRange(index.to_string()))?;
        let mut cumulative = 0.0;
        let mut scale = 1.0;
        let mut last = first;
        let mut steps = 0usize;
        for k in 0..n {
            let t = match self.get(source, index + k) {
                // same episode, consecutive steps only
                Some(t)
                    if t.episode_id == first.episode_id
                        && t.step_id == first.step_id + k as u32 =>
                {
                    t
                }
                _ => break,
            };
            cumulative += scale * t.reward;
            scale *= gamma;
            last = t;
            steps += 1;
            if t.done {
                break;
            }
        }
        let done = last.done;
        Ok(NStepTransition {
            obs: first.obs.clone(),
            action: first.action.clone(),
            ap_labels: first.ap_labels.clone(),
            cumulative_reward: cumulative,
            bootstrap_obs: last.next_obs.clone(),
            discount: if done { 0.0 } else { gamma.powi(steps as i32) },
            done,
        })
    }

    /// Mixed batch: floor(rho * batch) expert rows (when the expert buffer is
    /// nonempty), the rest online, uniform within each source.
    pub fn sample_mixed<R: Rng>(
        &self,
        batch_size: usize,
        n: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Vec<NStepTransition>> {
        if batch_size == 0 {
            return Err(NpqlError::InvalidConfig("batch size must be >= 1".into()));
        }
        let n_expert = if self.expert.is_empty() {
            0
        } else {
            (self.rho * batch_size as f64).floor() as usize
        };
        let n_online = batch_size - n_expert;
        if n_online > 0 && self.online.is_empty() {
            return Err(NpqlError::NotReady("online buffer empty".into()));
        }
        if n_expert > 0 && self.expert.is_empty() {
            return Err(NpqlError::NotReady("expert buffer empty".into()));
        }
        let mut batch = Vec::with_capacity(batch_size);
        for (source, count) in [(Source::Online, n_online), (Source::Expert, n_expert)] {
            let len = self.len(source);
            for _ in 0..count {
                let idx = rng.gen_range(0..len);
                batch.push(self.nstep_assemble(source, idx, n, gamma)?);
            }
        }
        Ok(batch)
    }
}

/// Persist transitions as JSON lines, one per row.
pub fn save_transitions<W: Write>(out: &mut W, transitions: &[Transition]) -> Result<()> {
    for t in transitions {
        let line = serde_json::to_string(t).map_err(|e| NpqlError::Serde(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_transitions<R: BufRead>(input: R) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| NpqlError::Serde(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(episode: u64, step: u32, reward: f64, done: bool) -> Transition {
        Transition {
            obs: vec![episode as f64, step as f64],
            action: HybridAction::new(vec![0.1, -0.1], false),
            reward,
            next_obs: vec![episode as f64, step as f64 + 1.0],
            done,
            ap_labels: vec![(vec![0.0, 0.0], false); 3],
            episode_id: episode,
            step_id: step,
        }
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut buf = DualBuffer::new(3, 0.0).unwrap();
        buf.push((0..5).map(|i| t(0, i, 0.0, false)).collect());
        assert_eq!(buf.online_len(), 3);
        assert_eq!(buf.get(Source::Online, 0).unwrap().step_id, 2);
    }

    #[test]
    fn push_empty_is_noop() {
        let mut buf = DualBuffer::new(3, 0.0).unwrap();
        buf.push(vec![]);
        assert_eq!(buf.online_len(), 0);
    }

    #[test]
    fn interleaved_episodes_keep_per_episode_order() {
        let mut buf = DualBuffer::new(100, 0.0).unwrap();
        for step in 0..5u32 {
            buf.push(vec![t(1, step, 0.0, false), t(2, step, 0.0, false)]);
        }
        for ep in [1u64, 2] {
            let steps: Vec<u32> = (0..buf.online_len())
                .filter_map(|i| buf.get(Source::Online, i))
                .filter(|tr| tr.episode_id == ep)
                .map(|tr| tr.step_id)
                .collect();
            assert_eq!(steps, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn nstep_one_is_the_plain_transition() {
        let mut buf = DualBuffer::new(10, 0.0).unwrap();
        buf.push(vec![t(0, 0, 0.5, false), t(0, 1, 0.25, false)]);
        let n1 = buf.nstep_assemble(Source::Online, 0, 1, 0.99).unwrap();
        assert_eq!(n1.cumulative_reward, 0.5);
        assert_eq!(n1.discount, 0.99);
        assert_eq!(n1.bootstrap_obs, vec![0.0, 1.0]);
    }

    #[test]
    fn terminal_inside_segment_stops_accumulation() {
        let mut buf = DualBuffer::new(10, 0.0).unwrap();
        buf.push(vec![t(0, 0, 0.0, false), t(0, 1, 1.0, true)]);
        let seg = buf.nstep_assemble(Source::Online, 0, 5, 0.99).unwrap();
        assert!((seg.cumulative_reward - 0.99).abs() < 1e-12);
        assert!(seg.done);
        assert_eq!(seg.discount, 0.0);
    }

    #[test]
    fn three_step_discount_example() {
        let mut buf = DualBuffer::new(10, 0.0).unwrap();
        buf.push(vec![
            t(0, 0, 0.0, false),
            t(0, 1, 0.0, false),
            t(0, 2, 1.0, false),
        ]);
        let seg = buf.nstep_assemble(Source::Online, 0, 3, 0.99).unwrap();
        assert!((seg.cumulative_reward - 0.9801).abs() < 1e-12);
        assert!((seg.discount - 0.99f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn segments_never_cross_episode_boundaries() {
        let mut buf = DualBuffer::new(10, 0.0).unwrap();
        buf.push(vec![t(0, 7, 0.3, false), t(1, 0, 1.0, false)]);
        let seg = buf.nstep_assemble(Source::Online, 0, 5, 0.99).unwrap();
        // only the first row belongs to episode 0
        assert_eq!(seg.cumulative_reward, 0.3);
        assert_eq!(seg.bootstrap_obs, vec![0.0, 8.0]);
        assert!((seg.discount - 0.99).abs() < 1e-12);
    }

    #[test]
    fn nstep_matches_brute_force_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = DualBuffer::new(200, 0.0).unwrap();
        let mut rows = Vec::new();
        for ep in 0..8u64 {
            let len = rng.gen_range(1..12u32);
            for s in 0..len {
                rows.push(t(ep, s, rng.gen_range(0.0..1.0), s == len - 1 && rng.gen()));
            }
        }
        buf.push(rows.clone());
        let gamma = 0.97;
        for i in 0..rows.len() {
            let seg = buf.nstep_assemble(Source::Online, i, 4, gamma).unwrap();
            let mut expect = 0.0;
            let mut scale = 1.0;
            for k in 0..4 {
                match rows.get(i + k) {
                    Some(r)
                        if r.episode_id == rows[i].episode_id
                            && r.step_id == rows[i].step_id + k as u32 =>
                    {
                        expect += scale * r.reward;
                        scale *= gamma;
                        if r.done {
                            break;
                        }
                    }
                    _ => break,
                }
            }
            assert!((seg.cumulative_reward - expect).abs() < 1e-12, "index {i}");
        }
    }

    #[test]
    fn mixed_batches_respect_the_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = DualBuffer::new(100, 0.25).unwrap();
        buf.push((0..50).map(|i| t(0, i, 0.0, false)).collect());
        buf.load_expert((0..50).map(|i| t(999, i, 0.0, false)).collect());
        for _ in 0..100 {
            let batch = buf.sample_mixed(16, 3, 0.99, &mut rng).unwrap();
            let experts = batch.iter().filter(|s| s.obs[0] == 999.0).count();
            assert_eq!(experts, 4); // floor(0.25 * 16)
        }
    }

    #[test]
    fn rho_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buf = DualBuffer::new(100, 0.0).unwrap();
        buf.push((0..10).map(|i| t(0, i, 0.0, false)).collect());
        buf.load_expert((0..10).map(|i| t(999, i, 0.0, false)).collect());
        let batch = buf.sample_mixed(8, 1, 0.99, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.obs[0] == 0.0));
        buf.rho = 1.0;
        let batch = buf.sample_mixed(8, 1, 0.99, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.obs[0] == 999.0));
    }

    #[test]
    fn empty_online_buffer_is_retryable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let buf = DualBuffer::new(100, 0.25).unwrap();
        match buf.sample_mixed(8, 1, 0.99, &mut rng) {
            Err(NpqlError::NotReady(_)) => {}
            other => panic!("expected NotReady, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_index_rejected() {
        let buf = DualBuffer::new(10, 0.0).unwrap();
        assert!(buf.nstep_assemble(Source::Online, 3, 1, 0.99).is_err());
    }

    #[test]
    fn transitions_round_trip_bit_identically() {
        let rows: Vec<Transition> = (0..7)
            .map(|i| {
                let mut row = t(3, i, 0.123456789123456789, i == 6);
                // awkward floats exercise exact round-tripping
                row.obs = vec![0.1 + i as f64 * 1e-17, std::f64::consts::PI * 1e-3];
                row
            })
            .collect();
        let mut buf = Vec::new();
        save_transitions(&mut buf, &rows).unwrap();
        let loaded = load_transitions(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(loaded, rows);
    }
}
