//! Epoch planning into memory, general and review nodes, and the bank of
//! memorized student states.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "M")]
    Memory,
    #[serde(rename = "G")]
    General,
    #[serde(rename = "R")]
    Review,
}

impl NodeKind {
    pub fn code(self) -> &'static str {
        match self {
            NodeKind::Memory => "M",
            NodeKind::General => "G",
            NodeKind::Review => "R",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// After `warmup` general epochs, cycles of `k·δ + 1` epochs repeat: offsets
/// `0, δ, …, (k-1)·δ` memorize, offset `k·δ` reviews, everything else trains
/// only. A trailing partial cycle is all general.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSchedule {
    pub total_epochs: usize,
    pub delta: usize,
    pub k: usize,
    pub warmup: usize,
    kinds: Vec<NodeKind>,
}

pub fn build_schedule(
    total_epochs: usize,
    delta: usize,
    k: usize,
    warmup: usize,
) -> Result<TrainingSchedule> {
    let mut errs = Vec::new();
    if delta < 1 {
        errs.push("memory interval delta must be >= 1".to_string());
    }
    if k < 1 {
        errs.push("memory count k must be >= 1".to_string());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let cycle = k * delta + 1;
    let kinds = (0..total_epochs)
        .map(|e| {
            if e < warmup {
                return NodeKind::General;
            }
            let offset = (e - warmup) % cycle;
            if e - offset + cycle > total_epochs {
                NodeKind::General
            } else if offset == k * delta {
                NodeKind::Review
            } else if offset.is_multiple_of(delta) {
                NodeKind::Memory
            } else {
                NodeKind::General
            }
        })
        .collect();
    Ok(TrainingSchedule {
        total_epochs,
        delta,
        k,
        warmup,
        kinds,
    })
}

impl TrainingSchedule {
    /// Every epoch general: the schedule of plain training.
    pub fn all_general(total_epochs: usize) -> Self {
        TrainingSchedule {
            total_epochs,
            delta: 1,
            k: 1,
            warmup: total_epochs,
            kinds: vec![NodeKind::General; total_epochs],
        }
    }

    pub fn cycle_len(&self) -> usize {
        self.k * self.delta + 1
    }

    pub fn kind(&self, epoch: usize) -> NodeKind {
        self.kinds[epoch]
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    fn epochs_of(&self, kind: NodeKind) -> Vec<usize> {
        (0..self.total_epochs)
            .filter(|&e| self.kinds[e] == kind)
            .collect()
    }

    pub fn memory_epochs(&self) -> Vec<usize> {
        self.epochs_of(NodeKind::Memory)
    }

    pub fn general_epochs(&self) -> Vec<usize> {
        self.epochs_of(NodeKind::General)
    }

    pub fn review_epochs(&self) -> Vec<usize> {
        self.epochs_of(NodeKind::Review)
    }

    /// Message for schedules too short to hold a single review.
    pub fn warning(&self) -> Option<String> {
        self.review_epochs().is_empty().then(|| {
            format!(
                "{} epochs with warmup {} cannot fit a {}-epoch memorize/review cycle; training is all general",
                self.total_epochs,
                self.warmup,
                self.cycle_len()
            )
        })
    }

    /// True when `epoch` is the first memory node of a cycle.
    pub fn is_cycle_start(&self, epoch: usize) -> bool {
        epoch >= self.warmup
            && (epoch - self.warmup).is_multiple_of(self.cycle_len())
            && self.kinds.get(epoch) == Some(&NodeKind::Memory)
    }

    /// Memory epochs `t - k·δ, …, t - δ` feeding the review at `t`.
    pub fn memory_epochs_for_review(&self, t: usize) -> Result<Vec<usize>> {
        if self.kinds.get(t) != Some(&NodeKind::Review) {
            return Err(Error::contract(format!("epoch {t} is not a review node")));
        }
        Ok((1..=self.k).rev().map(|j| t - j * self.delta).collect())
    }
}

/// Bounded FIFO of frozen student states, cleared at each cycle start.
#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    capacity: usize,
    entries: VecDeque<(usize, ParamStore<T>)>,
}

impl<T: Real> MemoryBank<T> {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.entries.iter().map(|(e, _)| *e).collect()
    }

    pub fn snapshots(&self) -> impl Iterator<Item = (usize, &ParamStore<T>)> {
        self.entries.iter().map(|(e, p)| (*e, p))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Store a frozen copy of `params` taken at the end of memory epoch `epoch`.
    pub fn memorize(
        &mut self,
        schedule: &TrainingSchedule,
        epoch: usize,
        params: &ParamStore<T>,
    ) -> Result<()> {
        if schedule.kinds.get(epoch) != Some(&NodeKind::Memory) {
            return Err(Error::contract(format!(
                "memorize called at epoch {epoch}, which is not a memory node"
            )));
        }
        if schedule.is_cycle_start(epoch) {
            self.entries.clear();
        }
        if let Some((last, _)) = self.entries.back() {
            if *last >= epoch {
                return Err(Error::contract(format!(
                    "memory bank epochs must increase: {last} then {epoch}"
                )));
            }
        }
        self.entries.push_back((epoch, params.snapshot()));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Restore an entry verbatim (resuming a run).
    pub fn restore(&mut self, epoch: usize, params: ParamStore<T>) {
        self.entries.push_back((epoch, params));
    }
}
