//! Bounded in-memory result store with optional write-through to disk.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use ncdkit_core::pipeline::{RunResult, TsneJob};
use ncdkit_core::projection::PlotPayload;
use ncdkit_core::{Error, Result};
use serde::Serialize;

/// A finished t-SNE job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsneResult {
    pub job: TsneJob,
    pub request_key: String,
    pub cache_hit: bool,
    #[serde(flatten)]
    pub payload: PlotPayload,
}

#[derive(Debug, Clone)]
pub enum StoredResult {
    Run(Arc<RunResult>),
    Tsne(Arc<TsneResult>),
}

struct Inner {
    entries: HashMap<String, (StoredResult, u64)>,
    clock: u64,
}

pub struct ResultStore {
    capacity: usize,
    dir: Option<PathBuf>,
    inner: Mutex<Inner>,
}

pub const DEFAULT_RESULT_CAPACITY: usize = 64;

impl ResultStore {
    /// `dir`, when set, receives `<id>/provenance.json` plus the result
    /// files for every inserted entry.
    pub fn new(capacity: usize, dir: Option<PathBuf>) -> Self {
        Self {
            capacity: capacity.max(1),
            dir,
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                clock: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("result store lock poisoned").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, result: StoredResult) -> Result<String> {
        let id = uuid::Uuid::new_v4().to_string();
        if let Some(dir) = &self.dir {
            persist(&dir.join(&id), &result)?;
        }
        let mut inner = self.inner.lock().expect("result store lock poisoned");
        inner.clock += 1;
        let tick = inner.clock;
        inner.entries.insert(id.clone(), (result, tick));
        while inner.entries.len() > self.capacity {
            let oldest = inner
                .entries
                .iter()
                .min_by_key(|(_, (_, t))| *t)
                .map(|(k, _)| k.clone())
                .expect("store is not empty");
            inner.entries.remove(&oldest);
        }
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<StoredResult> {
        let mut inner = self.inner.lock().expect("result store lock poisoned");
        inner.clock += 1;
        let tick = inner.clock;
        let (result, last) = inner
            .entries
            .get_mut(id)
            .ok_or_else(|| Error::StaleResult(format!("no result {id:?}")))?;
        *last = tick;
        Ok(result.clone())
    }

    /// The model run stored under `id`.
    pub fn run(&self, id: &str) -> Result<Arc<RunResult>> {
        match self.get(id)? {
            StoredResult::Run(r) => Ok(r),
            StoredResult::Tsne(_) => Err(Error::StaleResult(format!("result {id:?} is not a model run"))),
        }
    }
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn persist(dir: &std::path::Path, result: &StoredResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    match result {
        StoredResult::Run(run) => {
            let provenance = serde_json::json!({
                "dataset_id": run.dataset_id,
                "selection": run.selection,
                "config": run.config,
                "seed": run.config.seed(),
            });
            write_json(dir.join("provenance.json"), &provenance)?;
            write_json(dir.join("summary.json"), &run.summary())?;
            if let Some(model) = &run.model {
                std::fs::write(dir.join("model.json"), model.to_checkpoint())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        StoredResult::Tsne(t) => {
            write_json(dir.join("provenance.json"), &t.job)?;
            write_json(dir.join("payload.json"), &t.payload)?;
        }
    }
    Ok(())
}
