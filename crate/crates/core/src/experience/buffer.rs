//! Ring replay buffer with uniform sampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Action as sent to the environment.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Terminal flag; truncation at the horizon is not terminal.
    pub done: bool,
}

/// A sampled minibatch, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
    cursor: usize,
    size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            obs_dim,
            act_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            cursor: 0,
            size: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Slot the next insert writes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn insert(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.obs_dim || t.next_state.len() != self.obs_dim || t.action.len() != self.act_dim {
            return Err(Error::InvalidTransition(format!(
                "expected obs dim {} and action dim {}, got {}/{}/{}",
                self.obs_dim,
                self.act_dim,
                t.state.len(),
                t.action.len(),
                t.next_state.len()
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !t.reward.is_finite() || !finite(&t.state) || !finite(&t.action) || !finite(&t.next_state) {
            return Err(Error::InvalidTransition(format!("non-finite values (reward {})", t.reward)));
        }
        let i = self.cursor;
        if self.size < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.next_states.extend_from_slice(&t.next_state);
            self.dones.push(t.done);
            self.size += 1;
        } else {
            self.states[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.state);
            self.actions[i * self.act_dim..(i + 1) * self.act_dim].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.next_states[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.next_state);
            self.dones[i] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<Transition> {
        (i < self.size).then(|| Transition {
            state: self.states[i * self.obs_dim..(i + 1) * self.obs_dim].to_vec(),
            action: self.actions[i * self.act_dim..(i + 1) * self.act_dim].to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states[i * self.obs_dim..(i + 1) * self.obs_dim].to_vec(),
            done: self.dones[i],
        })
    }

    /// Uniform slot indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch == 0 || self.size < batch {
            return Err(Error::InsufficientData {
                size: self.size,
                requested: batch,
            });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.size)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        let gather = |src: &[f64], width: usize| {
            let mut out = Vec::with_capacity(idx.len() * width);
            for &i in &idx {
                out.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            Tensor::from_parts(vec![idx.len(), width], out)
        };
        Ok(Batch {
            states: gather(&self.states, self.obs_dim),
            actions: gather(&self.actions, self.act_dim),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: gather(&self.next_states, self.obs_dim),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn transition(v: f64) -> Transition {
        Transition {
            state: vec![v],
            action: vec![0.0, 0.0],
            reward: v,
            next_state: vec![v + 1.0],
            done: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(2, 1, 2).unwrap();
        for v in [1.0, 2.0, 3.0] {
            buf.insert(transition(v)).unwrap();
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.get(0).unwrap().reward, 3.0);
        assert_eq!(buf.get(1).unwrap().reward, 2.0);
    }

    #[test]
    fn undersized_sampling_fails() {
        let mut buf = ReplayBuffer::new(8, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample(1, &mut rng), Err(Error::InsufficientData { .. })));
        buf.insert(transition(0.0)).unwrap();
        assert!(buf.sample(2, &mut rng).is_err());
        assert!(buf.sample(1, &mut rng).is_ok());
    }

    #[test]
    fn bad_transitions_rejected() {
        let mut buf = ReplayBuffer::new(8, 1, 2).unwrap();
        let mut t = transition(0.0);
        t.reward = f64::NAN;
        assert!(matches!(buf.insert(t), Err(Error::InvalidTransition(_))));
        let mut t = transition(0.0);
        t.action.push(1.0);
        assert!(buf.insert(t).is_err());
        assert!(buf.is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut buf = ReplayBuffer::new(100, 1, 2).unwrap();
        for v in 0..100 {
            buf.insert(transition(v as f64)).unwrap();
        }
        let a = buf.sample(16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = buf.sample(16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for r in 0..16 {
            assert_eq!(a.next_states.get(r, 0), a.states.get(r, 0) + 1.0);
        }
    }
}
