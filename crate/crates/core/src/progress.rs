//! Progress reporting from long-running training loops.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed fraction in `[0, 1]`; never decreases within a run.
    pub fraction: f64,
    pub eta_seconds: Option<f64>,
}

/// Receives progress from a training thread.
///
/// Returning `Err(Error::Cancelled)` asks the caller to stop at this
/// checkpoint; any error is propagated out of the training loop.
pub trait ProgressSink: Send + Sync {
    fn report(&self, progress: Progress) -> Result<()>;
}

/// Discards every report.
pub struct NoProgress;

impl ProgressSink for NoProgress {
    fn report(&self, _: Progress) -> Result<()> {
        Ok(())
    }
}

impl<F> ProgressSink for F
where
    F: Fn(Progress) -> Result<()> + Send + Sync,
{
    fn report(&self, progress: Progress) -> Result<()> {
        self(progress)
    }
}

/// Below this fraction the remaining time is not estimated.
pub const ETA_MIN_FRACTION: f64 = 0.02;

/// Proportional remaining-time estimate: `elapsed * (1 - p) / p`.
pub fn eta_seconds(elapsed_seconds: f64, fraction: f64) -> Option<f64> {
    (fraction >= ETA_MIN_FRACTION).then(|| (elapsed_seconds * (1.0 - fraction) / fraction).max(0.0))
}

/// Turns step counts into monotone [`Progress`] reports.
pub struct ProgressTracker<'a> {
    sink: &'a dyn ProgressSink,
    start: Instant,
    total_steps: usize,
    done: usize,
}

impl<'a> ProgressTracker<'a> {
    pub fn new(sink: &'a dyn ProgressSink, total_steps: usize) -> Self {
        Self {
            sink,
            start: Instant::now(),
            total_steps: total_steps.max(1),
            done: 0,
        }
    }

    pub fn start(&self) -> Result<()> {
        self.sink.report(Progress {
            fraction: 0.0,
            eta_seconds: None,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        self.done = (self.done + 1).min(self.total_steps);
        let fraction = self.done as f64 / self.total_steps as f64;
        let eta = eta_seconds(self.start.elapsed().as_secs_f64(), fraction);
        self.sink.report(Progress {
            fraction,
            eta_seconds: eta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn eta_absent_before_threshold() {
        assert_eq!(eta_seconds(10.0, 0.0), None);
        assert_eq!(eta_seconds(10.0, 0.019), None);
        assert_eq!(eta_seconds(10.0, 0.5), Some(10.0));
        assert_eq!(eta_seconds(10.0, 1.0), Some(0.0));
    }

    #[test]
    fn tracker_is_monotone() {
        let seen = Mutex::new(Vec::new());
        let sink = |p: Progress| {
            seen.lock().unwrap().push(p.fraction);
            Ok(())
        };
        let mut t = ProgressTracker::new(&sink, 3);
        t.start().unwrap();
        for _ in 0..5 {
            t.step().unwrap();
        }
        let seen = seen.into_inner().unwrap();
        assert!(seen.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*seen.last().unwrap(), 1.0);
    }
}
