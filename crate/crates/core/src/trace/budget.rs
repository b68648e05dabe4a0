use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::BudgetExceeded;

/// Optional limits on each ledger counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCaps {
    pub generation_units: Option<u64>,
    pub prm_eval_units: Option<u64>,
    /// Cap on modeled latency, in nanoseconds.
    pub latency_ns: Option<u64>,
}

impl BudgetCaps {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn generation(units: u64) -> Self {
        BudgetCaps {
            generation_units: Some(units),
            ..Self::default()
        }
    }

    pub fn latency(ns: u64) -> Self {
        BudgetCaps {
            latency_ns: Some(ns),
            ..Self::default()
        }
    }
}

/// Compute accounting for one search or annotation job.
///
/// One generation unit is one generated step; one PRM unit is one forward
/// pass of the reward model. Latency is modeled rather than measured (see
/// [`crate::search::LatencyModel`]) so that it is reproducible; the measured
/// elapsed time is kept alongside but never serialized.
///
/// Charges are all-or-nothing: a charge that would cross a cap fails and
/// leaves the counter untouched, so counters never decrease and never exceed
/// their caps. All counters are atomics and the ledger can be shared across
/// worker threads.
#[derive(Debug)]
pub struct BudgetLedger {
    generation_units: AtomicU64,
    prm_eval_units: AtomicU64,
    latency_ns: AtomicU64,
    caps: BudgetCaps,
    started: Instant,
}

impl Default for BudgetLedger {
    fn default() -> Self {
        Self::new(BudgetCaps::default())
    }
}

impl BudgetLedger {
    pub fn new(caps: BudgetCaps) -> Self {
        BudgetLedger {
            generation_units: AtomicU64::new(0),
            prm_eval_units: AtomicU64::new(0),
            latency_ns: AtomicU64::new(0),
            caps,
            started: Instant::now(),
        }
    }

    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn caps(&self) -> BudgetCaps {
        self.caps
    }

    pub fn charge_generation(&self, units: u64) -> Result<(), BudgetExceeded> {
        charge(
            &self.generation_units,
            units,
            self.caps.generation_units,
            "generation_units",
        )
    }

    pub fn charge_prm(&self, units: u64) -> Result<(), BudgetExceeded> {
        charge(
            &self.prm_eval_units,
            units,
            self.caps.prm_eval_units,
            "prm_eval_units",
        )
    }

    pub fn charge_latency(&self, ns: u64) -> Result<(), BudgetExceeded> {
        charge(&self.latency_ns, ns, self.caps.latency_ns, "latency_ns")
    }

    pub fn generation_units(&self) -> u64 {
        self.generation_units.load(Ordering::Acquire)
    }

    pub fn prm_eval_units(&self) -> u64 {
        self.prm_eval_units.load(Ordering::Acquire)
    }

    pub fn latency_ns(&self) -> u64 {
        self.latency_ns.load(Ordering::Acquire)
    }

    pub fn remaining_generation(&self) -> Option<u64> {
        self.caps
            .generation_units
            .map(|cap| cap.saturating_sub(self.generation_units()))
    }

    pub fn remaining_latency(&self) -> Option<u64> {
        self.caps
            .latency_ns
            .map(|cap| cap.saturating_sub(self.latency_ns()))
    }

    /// True when `units` more generation and `ns` more latency would both fit.
    pub fn fits(&self, units: u64, ns: u64) -> bool {
        self.remaining_generation().is_none_or(|r| units <= r)
            && self.remaining_latency().is_none_or(|r| ns <= r)
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            generation_units: self.generation_units(),
            prm_eval_units: self.prm_eval_units(),
            latency_ns: self.latency_ns(),
            caps: self.caps,
            elapsed_ns: self.elapsed().as_nanos() as u64,
        }
    }
}

fn charge(
    counter: &AtomicU64,
    units: u64,
    cap: Option<u64>,
    name: &'static str,
) -> Result<(), BudgetExceeded> {
    counter
        .fetch_update(Ordering::AcqRel, Ordering::Acquire, |used| {
            let next = used.checked_add(units)?;
            match cap {
                Some(cap) if next > cap => None,
                _ => Some(next),
            }
        })
        .map(|_| ())
        .map_err(|used| BudgetExceeded {
            counter: name,
            cap: cap.unwrap_or(u64::MAX),
            used,
            requested: units,
        })
}

/// Frozen copy of a ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub generation_units: u64,
    pub prm_eval_units: u64,
    pub latency_ns: u64,
    pub caps: BudgetCaps,
    /// Measured wall-clock time; machine dependent, so never written out.
    #[serde(skip)]
    pub elapsed_ns: u64,
}
