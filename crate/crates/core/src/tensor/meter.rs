use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Memory pool a buffer lives in. FAST stands in for accelerator memory and
/// may carry a byte budget; HOST is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pool {
    Fast,
    Host,
}

/// Byte-accurate live/peak accounting for both pools plus transfer totals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolMeter {
    pub fast_live_bytes: u64,
    pub fast_peak_bytes: u64,
    pub host_live_bytes: u64,
    pub host_peak_bytes: u64,
    pub transfer_bytes_fast_to_host: u64,
    pub transfer_bytes_host_to_fast: u64,
    pub fast_budget_bytes: Option<u64>,
}

impl PoolMeter {
    pub fn with_budget(budget: Option<u64>) -> Self {
        PoolMeter {
            fast_budget_bytes: budget,
            ..Default::default()
        }
    }

    pub fn live(&self, pool: Pool) -> u64 {
        match pool {
            Pool::Fast => self.fast_live_bytes,
            Pool::Host => self.host_live_bytes,
        }
    }

    pub fn total_live(&self) -> u64 {
        self.fast_live_bytes + self.host_live_bytes
    }

    fn check_budget(&self) -> Result<()> {
        match self.fast_budget_bytes {
            Some(budget) if self.fast_live_bytes > budget => Err(Error::Budget {
                live: self.fast_live_bytes,
                peak: self.fast_peak_bytes,
                budget,
                advisory_min: None,
            }),
            _ => Ok(()),
        }
    }

    fn bump(&mut self, pool: Pool, bytes: u64) {
        match pool {
            Pool::Fast => {
                self.fast_live_bytes += bytes;
                self.fast_peak_bytes = self.fast_peak_bytes.max(self.fast_live_bytes);
            }
            Pool::Host => {
                self.host_live_bytes += bytes;
                self.host_peak_bytes = self.host_peak_bytes.max(self.host_live_bytes);
            }
        }
    }

    fn drop_bytes(&mut self, pool: Pool, bytes: u64) -> Result<()> {
        let live = match pool {
            Pool::Fast => &mut self.fast_live_bytes,
            Pool::Host => &mut self.host_live_bytes,
        };
        *live = live.checked_sub(bytes).ok_or_else(|| {
            Error::Contract(format!("{pool:?} meter would go negative freeing {bytes} bytes"))
        })?;
        Ok(())
    }

    /// Counts a new buffer; the peak is updated even when the budget check fails.
    pub fn alloc(&mut self, pool: Pool, bytes: u64) -> Result<()> {
        self.bump(pool, bytes);
        self.check_budget()
    }

    pub fn free(&mut self, pool: Pool, bytes: u64) -> Result<()> {
        self.drop_bytes(pool, bytes)
    }

    pub fn transfer(&mut self, from: Pool, to: Pool, bytes: u64) -> Result<()> {
        if from == to {
            return Ok(());
        }
        self.drop_bytes(from, bytes)?;
        self.bump(to, bytes);
        match to {
            Pool::Host => self.transfer_bytes_fast_to_host += bytes,
            Pool::Fast => self.transfer_bytes_host_to_fast += bytes,
        }
        self.check_budget()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferKind {
    Value,
    Grad,
}

/// A buffer owned by a graph: a node's value or its gradient accumulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BufferId {
    pub node: usize,
    pub kind: BufferKind,
}

/// One entry of a [`MemoryTrace`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MemoryEvent {
    Alloc {
        buffer: BufferId,
        bytes: u64,
        pool: Pool,
        group: Option<usize>,
        /// Trainable parameters and gradients; never offloaded.
        pinned: bool,
    },
    Free {
        buffer: BufferId,
        bytes: u64,
        pool: Pool,
    },
    Move {
        buffer: BufferId,
        bytes: u64,
        from: Pool,
        to: Pool,
    },
    /// Values of these nodes are read by the operation about to run.
    Use { nodes: Vec<usize> },
    GroupEnd { group: usize },
    Recompute { group: usize },
}

impl MemoryEvent {
    /// Moves are inserted by offload schedules; every other event belongs to
    /// the underlying computation and keeps its index across schedules.
    pub fn is_reference(&self) -> bool {
        !matches!(self, MemoryEvent::Move { .. })
    }
}

/// Ordered allocation history of one graph.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTrace {
    pub events: Vec<MemoryEvent>,
}

impl MemoryTrace {
    /// Rebuilds the pool meter from the event stream alone.
    pub fn replay(&self) -> Result<PoolMeter> {
        let mut m = PoolMeter::default();
        for e in &self.events {
            match *e {
                MemoryEvent::Alloc { bytes, pool, .. } => m.alloc(pool, bytes)?,
                MemoryEvent::Free { bytes, pool, .. } => m.free(pool, bytes)?,
                MemoryEvent::Move { bytes, from, to, .. } => m.transfer(from, to, bytes)?,
                _ => {}
            }
        }
        Ok(m)
    }

    pub fn recomputed_groups(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                MemoryEvent::Recompute { group } => Some(*group),
                _ => None,
            })
            .collect()
    }

    pub fn moves(&self) -> impl Iterator<Item = &MemoryEvent> {
        self.events.iter().filter(|e| !e.is_reference())
    }

    /// JSON-lines dump, one event per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// A pool move to perform just before the reference event with index `at`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedMove {
    pub at: usize,
    pub node: usize,
    pub to: Pool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn move_accounting_identity() {
        let mut m = PoolMeter::default();
        m.alloc(Pool::Fast, 1024).unwrap();
        m.transfer(Pool::Fast, Pool::Host, 1024).unwrap();
        assert_eq!(m.fast_live_bytes, 0);
        assert_eq!(m.host_live_bytes, 1024);
        assert_eq!(m.transfer_bytes_fast_to_host, 1024);
        assert_eq!(m.fast_peak_bytes, 1024);
    }

    #[test]
    fn same_pool_transfer_is_noop() {
        let mut m = PoolMeter::default();
        m.alloc(Pool::Fast, 64).unwrap();
        let before = m.clone();
        m.transfer(Pool::Fast, Pool::Fast, 64).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn free_below_zero_is_rejected() {
        let mut m = PoolMeter::default();
        m.alloc(Pool::Host, 8).unwrap();
        assert!(m.free(Pool::Host, 16).is_err());
    }

    #[test]
    fn budget_violation_reports_peak() {
        let mut m = PoolMeter::with_budget(Some(100));
        m.alloc(Pool::Fast, 80).unwrap();
        match m.alloc(Pool::Fast, 40) {
            Err(Error::Budget { peak, budget, .. }) => {
                assert_eq!(peak, 120);
                assert_eq!(budget, 100);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }
}
