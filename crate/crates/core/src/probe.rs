//! Per-thread counters of decoupling-head evaluations and memory-bank access.
//!
//! The inference path must never touch either; tests snapshot the counters
//! around a call and assert the difference is zero.

use std::cell::Cell;

thread_local! {
    static STFD_EVALS: Cell<u64> = const { Cell::new(0) };
    static BANK_READS: Cell<u64> = const { Cell::new(0) };
    static BANK_WRITES: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub stfd_evals: u64,
    pub bank_reads: u64,
    pub bank_writes: u64,
}

impl Counters {
    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            stfd_evals: self.stfd_evals - earlier.stfd_evals,
            bank_reads: self.bank_reads - earlier.bank_reads,
            bank_writes: self.bank_writes - earlier.bank_writes,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Counters::default()
    }
}

pub fn snapshot() -> Counters {
    Counters {
        stfd_evals: STFD_EVALS.with(Cell::get),
        bank_reads: BANK_READS.with(Cell::get),
        bank_writes: BANK_WRITES.with(Cell::get),
    }
}

pub(crate) fn stfd_eval() {
    STFD_EVALS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn bank_read() {
    BANK_READS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn bank_write() {
    BANK_WRITES.with(|c| c.set(c.get() + 1));
}
