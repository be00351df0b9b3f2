//! Byte-exact memory accounting for the training pipelines.
//!
//! The ledger is an accounting model of the allocator, not an allocator:
//! each category tracks live bytes and the peak over history, and every
//! alloc/free is logged as an event. Activation bytes per layer are
//! `batch_rows * out_dim * element_size`, which makes the 1/N and 1/M
//! reduction claims exactly testable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemCategory {
    Weights,
    Gradients,
    OptimizerStates,
    Activations,
}

pub const ALL_CATEGORIES: [MemCategory; 4] = [
    MemCategory::Weights,
    MemCategory::Gradients,
    MemCategory::OptimizerStates,
    MemCategory::Activations,
];

impl MemCategory {
    pub fn index(self) -> usize {
        match self {
            MemCategory::Weights => 0,
            MemCategory::Gradients => 1,
            MemCategory::OptimizerStates => 2,
            MemCategory::Activations => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemCategory::Weights => "weights",
            MemCategory::Gradients => "gradients",
            MemCategory::OptimizerStates => "optimizer_states",
            MemCategory::Activations => "activations",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub step: usize,
    pub category: MemCategory,
    /// Positive for alloc, negative for free.
    pub delta: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub live: [u64; 4],
    pub peak: [u64; 4],
}

impl LedgerSnapshot {
    pub fn live_of(&self, cat: MemCategory) -> u64 {
        self.live[cat.index()]
    }

    pub fn peak_of(&self, cat: MemCategory) -> u64 {
        self.peak[cat.index()]
    }

    pub fn peak_total(&self) -> u64 {
        self.peak.iter().sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryLedger {
    live: [u64; 4],
    peak: [u64; 4],
    step: usize,
    events: Vec<LedgerEvent>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn alloc(&mut self, cat: MemCategory, bytes: u64) {
        let i = cat.index();
        self.live[i] += bytes;
        if self.live[i] > self.peak[i] {
            self.peak[i] = self.live[i];
        }
        self.events.push(LedgerEvent {
            step: self.step,
            category: cat,
            delta: bytes as i64,
        });
    }

    pub fn free(&mut self, cat: MemCategory, bytes: u64) -> Result<()> {
        let i = cat.index();
        if self.live[i] < bytes {
            return Err(Error::State(format!(
                "ledger underflow: freeing {} bytes of {} with only {} live",
                bytes,
                cat.name(),
                self.live[i]
            )));
        }
        self.live[i] -= bytes;
        self.events.push(LedgerEvent {
            step: self.step,
            category: cat,
            delta: -(bytes as i64),
        });
        Ok(())
    }

    pub fn live(&self, cat: MemCategory) -> u64 {
        self.live[cat.index()]
    }

    pub fn peak(&self, cat: MemCategory) -> u64 {
        self.peak[cat.index()]
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            live: self.live,
            peak: self.peak,
        }
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Checks the end-of-run contract: gradients and activations fully
    /// freed, weights and optimizer states still live.
    pub fn check_end_of_run(&self) -> Result<()> {
        if self.live(MemCategory::Gradients) != 0 {
            return Err(Error::State(format!(
                "{} gradient bytes still live at end of run",
                self.live(MemCategory::Gradients)
            )));
        }
        if self.live(MemCategory::Activations) != 0 {
            return Err(Error::State(format!(
                "{} activation bytes still live at end of run",
                self.live(MemCategory::Activations)
            )));
        }
        Ok(())
    }
}
