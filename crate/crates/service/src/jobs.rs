//! Fixed-size worker pool with a FIFO queue and pollable job records.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use ncdkit_core::progress::{Progress, ProgressSink};
use ncdkit_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    TrainBaseline,
    TrainTabularNcd,
    Kmeans,
    Spectral,
    Tsne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed | JobStatus::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
}

/// Snapshot of a job as returned to pollers.
///
/// Timestamps are seconds since the Unix epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub eta_seconds: Option<f64>,
    pub created_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub result_id: Option<String>,
    pub error: Option<JobError>,
}

/// Work run on a pool thread. Returns the id of the stored result.
pub type Work = Box<dyn FnOnce(&dyn ProgressSink) -> Result<String> + Send>;

struct Entry {
    job: Job,
    cancel: Arc<AtomicBool>,
    work: Option<Work>,
}

#[derive(Default)]
struct State {
    jobs: HashMap<String, Entry>,
    queue: VecDeque<String>,
    shutdown: bool,
}

struct Shared {
    state: Mutex<State>,
    wake: Condvar,
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("job registry lock poisoned")
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Progress sink handed to a running job.
struct JobSink {
    shared: Arc<Shared>,
    id: String,
    cancel: Arc<AtomicBool>,
}

impl ProgressSink for JobSink {
    fn report(&self, p: Progress) -> Result<()> {
        if self.cancel.load(Ordering::SeqCst) {
            return Err(Error::Cancelled);
        }
        let mut state = self.shared.lock();
        if let Some(entry) = state.jobs.get_mut(&self.id) {
            let job = &mut entry.job;
            job.progress = job.progress.max(p.fraction.clamp(0.0, 1.0));
            job.eta_seconds = p.eta_seconds;
        }
        Ok(())
    }
}

pub struct JobQueue {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl JobQueue {
    /// Starts `workers` pool threads (at least one).
    pub fn new(workers: usize) -> Self {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            wake: Condvar::new(),
        });
        let workers = (0..workers.max(1))
            .map(|i| {
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("ncdkit-worker-{i}"))
                    .spawn(move || worker_loop(shared))
                    .expect("failed to spawn worker")
            })
            .collect();
        Self { shared, workers }
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    pub fn submit(&self, kind: JobKind, work: Work) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        let job = Job {
            id: id.clone(),
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            eta_seconds: None,
            created_at: now(),
            started_at: None,
            finished_at: None,
            result_id: None,
            error: None,
        };
        let mut state = self.shared.lock();
        state.jobs.insert(
            id.clone(),
            Entry {
                job,
                cancel: Arc::new(AtomicBool::new(false)),
                work: Some(work),
            },
        );
        state.queue.push_back(id.clone());
        drop(state);
        self.shared.wake.notify_one();
        id
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.shared.lock().jobs.get(id).map(|e| e.job.clone())
    }

    pub fn list(&self) -> Vec<Job> {
        let mut jobs: Vec<Job> = self.shared.lock().jobs.values().map(|e| e.job.clone()).collect();
        jobs.sort_by(|a, b| a.created_at.total_cmp(&b.created_at));
        jobs
    }

    /// Requests cancellation. A queued job is cancelled at once and never
    /// runs; a running job stops at its next progress report. Finished jobs
    /// are left as they are.
    pub fn cancel(&self, id: &str) -> Option<Job> {
        let mut state = self.shared.lock();
        let status = state.jobs.get(id)?.job.status;
        match status {
            JobStatus::Queued => {
                state.queue.retain(|q| q != id);
                let entry = state.jobs.get_mut(id)?;
                entry.work = None;
                entry.job.status = JobStatus::Cancelled;
                entry.job.eta_seconds = None;
                entry.job.finished_at = Some(now());
            }
            JobStatus::Running => state.jobs.get(id)?.cancel.store(true, Ordering::SeqCst),
            _ => {}
        }
        state.jobs.get(id).map(|e| e.job.clone())
    }

    /// Number of jobs currently running.
    pub fn running(&self) -> usize {
        self.shared
            .lock()
            .jobs
            .values()
            .filter(|e| e.job.status == JobStatus::Running)
            .count()
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        let mut state = self.shared.lock();
        state.shutdown = true;
        for entry in state.jobs.values() {
            entry.cancel.store(true, Ordering::SeqCst);
        }
        drop(state);
        self.shared.wake.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn worker_loop(shared: Arc<Shared>) {
    loop {
        let (id, work, cancel) = {
            let mut state = shared.lock();
            loop {
                if state.shutdown {
                    return;
                }
                if let Some(id) = state.queue.pop_front() {
                    let entry = state.jobs.get_mut(&id).expect("queued job missing");
                    entry.job.status = JobStatus::Running;
                    entry.job.started_at = Some(now());
                    let work = entry.work.take().expect("queued job without work");
                    let cancel = entry.cancel.clone();
                    break (id, work, cancel);
                }
                state = shared.wake.wait(state).expect("job registry lock poisoned");
            }
        };
        let sink = JobSink {
            shared: shared.clone(),
            id: id.clone(),
            cancel,
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| work(&sink)))
            .unwrap_or_else(|_| Err(Error::DivergedError("job panicked".into())));
        let mut state = shared.lock();
        let job = &mut state.jobs.get_mut(&id).expect("running job missing").job;
        job.finished_at = Some(now());
        job.eta_seconds = None;
        match outcome {
            Ok(result_id) => {
                job.status = JobStatus::Succeeded;
                job.progress = 1.0;
                job.eta_seconds = Some(0.0);
                job.result_id = Some(result_id);
            }
            Err(Error::Cancelled) => job.status = JobStatus::Cancelled,
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(JobError {
                    code: e.code().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
}
