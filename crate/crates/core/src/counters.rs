//! Per-thread operation counters.
//!
//! Extraction-cost claims are checked by counting encoder and classifier
//! passes rather than trusting call-site structure. Counters are thread-local
//! and monotonic: diff two snapshots around a call made on the same thread to
//! get its exact cost, regardless of what other threads are doing.

use std::cell::Cell;

thread_local! {
    static ENCODER_PASSES: Cell<u64> = const { Cell::new(0) };
    static CLASSIFIER_PASSES: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_encoder_pass() {
    ENCODER_PASSES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_classifier_pass() {
    CLASSIFIER_PASSES.with(|c| c.set(c.get() + 1));
}

pub fn encoder_passes() -> u64 {
    ENCODER_PASSES.with(Cell::get)
}

pub fn classifier_passes() -> u64 {
    CLASSIFIER_PASSES.with(Cell::get)
}
