use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding in-flight backend calls.
#[derive(Debug)]
pub struct Limiter {
    capacity: usize,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct LimiterState {
    in_flight: usize,
    peak: usize,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(LimiterState::default()),
            freed: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().expect("limiter lock");
        while state.in_flight >= self.capacity {
            state = self.freed.wait(state).expect("limiter lock");
        }
        state.in_flight += 1;
        state.peak = state.peak.max(state.in_flight);
        Permit { limiter: self }
    }

    /// Highest number of simultaneously held permits so far.
    pub fn peak(&self) -> usize {
        self.state.lock().expect("limiter lock").peak
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().expect("limiter lock");
        state.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}
