//! Per-thread counters proving that a code path never trains.
//!
//! The tape bumps `grad_buffers` for every gradient buffer it allocates during
//! backward and the optimizer bumps `optimizer_steps` on every update. Both are
//! thread-local so concurrent tests cannot disturb each other's readings.

use std::cell::Cell;

thread_local! {
    static GRAD_BUFFERS: Cell<u64> = const { Cell::new(0) };
    static OPTIMIZER_STEPS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub grad_buffers: u64,
    pub optimizer_steps: u64,
}

impl Counters {
    pub fn snapshot() -> Self {
        Self {
            grad_buffers: GRAD_BUFFERS.with(Cell::get),
            optimizer_steps: OPTIMIZER_STEPS.with(Cell::get),
        }
    }

    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            grad_buffers: self.grad_buffers - earlier.grad_buffers,
            optimizer_steps: self.optimizer_steps - earlier.optimizer_steps,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grad_buffers == 0 && self.optimizer_steps == 0
    }
}

/// Runs `f` and returns its result together with the training activity it caused.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, Counters) {
    let before = Counters::snapshot();
    let out = f();
    (out, Counters::snapshot().since(before))
}

pub(crate) fn note_grad_buffer() {
    GRAD_BUFFERS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_optimizer_step() {
    OPTIMIZER_STEPS.with(|c| c.set(c.get() + 1));
}
