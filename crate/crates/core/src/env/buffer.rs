use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::{Source, Trajectory, Transition};
use crate::error::{CtrlFlowError, Result};

/// FIFO ring of transitions with episode boundaries, so contiguous
/// in-episode windows can be sampled for trajectory training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    source: Source,
    /// RNG stream this buffer's samplers draw from (bookkeeping only; the
    /// generator itself is passed in by the caller).
    pub rng_stream: u64,
    storage: VecDeque<(u64, Transition)>,
    next_episode: u64,
    in_episode: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, source: Source, rng_stream: u64) -> Self {
        Self {
            capacity,
            source,
            rng_stream,
            storage: VecDeque::with_capacity(capacity.min(1 << 20)),
            next_episode: 0,
            in_episode: false,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn source(&self) -> Source {
        self.source
    }

    /// Opens a new episode; subsequent pushes belong to it.
    pub fn begin_episode(&mut self) -> u64 {
        let id = self.next_episode;
        self.next_episode += 1;
        self.in_episode = true;
        id
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !self.in_episode {
            return Err(CtrlFlowError::config(
                "push before begin_episode; transitions need an episode id",
            ));
        }
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back((self.next_episode - 1, t));
        Ok(())
    }

    pub fn push_episode(&mut self, transitions: Vec<Transition>) -> Result<u64> {
        let id = self.begin_episode();
        for t in transitions {
            self.push(t)?;
        }
        Ok(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Transition)> {
        self.storage.iter().map(|(id, t)| (*id, t))
    }

    fn valid_indices(&self) -> Vec<usize> {
        self.storage
            .iter()
            .enumerate()
            .filter(|(_, (_, t))| t.valid_flag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Uniform sample (with replacement) over stored valid transitions.
    pub fn sample_batch(&self, rng: &mut ChaCha12Rng, n: usize) -> Result<Vec<Transition>> {
        let valid = self.valid_indices();
        if valid.is_empty() {
            return Err(CtrlFlowError::NotReady("replay buffer has no eligible entries".into()));
        }
        Ok((0..n)
            .map(|_| {
                let i = valid[rng.random_range(0..valid.len())];
                self.storage[i].1.clone()
            })
            .collect())
    }

    /// Maximal runs of same-episode, valid, stored-contiguous transitions,
    /// as `(start, len, episode)` ring indices.
    fn runs(&self) -> Vec<(usize, usize, u64)> {
        let mut runs = Vec::new();
        let mut start = 0;
        while start < self.storage.len() {
            let (ep, ref t0) = self.storage[start];
            if !t0.valid_flag {
                start += 1;
                continue;
            }
            let mut end = start + 1;
            while end < self.storage.len() {
                let (e, ref t) = self.storage[end];
                if e != ep || !t.valid_flag {
                    break;
                }
                end += 1;
            }
            runs.push((start, end - start, ep));
            start = end;
        }
        runs
    }

    /// Uniform draw over every contiguous in-episode window of length `h`.
    pub fn sample_trajectory(&self, rng: &mut ChaCha12Rng, h: usize) -> Result<Trajectory> {
        self.sample_trajectories(rng, h, 1)
            .map(|mut v| v.pop().unwrap())
    }

    pub fn sample_trajectories(
        &self,
        rng: &mut ChaCha12Rng,
        h: usize,
        count: usize,
    ) -> Result<Vec<Trajectory>> {
        self.sample_trajectories_recent(rng, h, count, u64::MAX)
    }

    /// Restricts window sampling to the most recent `last_k` episodes, the
    /// stand-in for conditioning generation on the current policy.
    pub fn sample_trajectories_recent(
        &self,
        rng: &mut ChaCha12Rng,
        h: usize,
        count: usize,
        last_k: u64,
    ) -> Result<Vec<Trajectory>> {
        if h == 0 {
            return Err(CtrlFlowError::config("trajectory length must be >= 1"));
        }
        let min_episode = self.next_episode.saturating_sub(last_k);
        let runs: Vec<(usize, usize, u64)> = self
            .runs()
            .into_iter()
            .filter(|&(_, _, ep)| ep >= min_episode)
            .collect();
        let offsets: Vec<(usize, usize)> = runs
            .iter()
            .filter(|(_, len, _)| *len >= h)
            .map(|&(start, len, _)| (start, len - h + 1))
            .collect();
        let total: usize = offsets.iter().map(|(_, n)| n).sum();
        if total == 0 {
            return Err(CtrlFlowError::NotReady("replay buffer has no eligible entries".into()));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut k = rng.random_range(0..total);
            let mut begin = 0;
            for &(start, n) in &offsets {
                if k < n {
                    begin = start + k;
                    break;
                }
                k -= n;
            }
            let transitions: Vec<Transition> = (begin..begin + h)
                .map(|i| self.storage[i].1.clone())
                .collect();
            out.push(Trajectory {
                transitions,
                source: self.source,
            });
        }
        Ok(out)
    }

    /// Longest sampleable window length currently stored.
    pub fn max_window(&self) -> usize {
        self.runs().iter().map(|&(_, len, _)| len).max().unwrap_or(0)
    }
}
