//! Progress records for long computations, polled through `/jobs`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

const KEEP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Running,
    Done,
    Failed,
}

pub struct Job {
    pub id: usize,
    pub kind: &'static str,
    pub pair_id: usize,
    pub total: usize,
    pub done: AtomicUsize,
    state: Mutex<JobState>,
}

impl Job {
    pub fn finish(&self, ok: bool) {
        *self.state.lock().unwrap() = if ok { JobState::Done } else { JobState::Failed };
    }

    pub fn to_json(&self) -> Value {
        let state = match *self.state.lock().unwrap() {
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
        };
        json!({
            "id": self.id,
            "kind": self.kind,
            "pair_id": self.pair_id,
            "done": self.done.load(Ordering::Relaxed),
            "total": self.total,
            "state": state,
        })
    }
}

#[derive(Default)]
pub struct Jobs {
    inner: Mutex<(usize, Vec<Arc<Job>>)>,
}

impl Jobs {
    pub fn start(&self, kind: &'static str, pair_id: usize, total: usize) -> Arc<Job> {
        let mut inner = self.inner.lock().unwrap();
        let job = Arc::new(Job {
            id: inner.0,
            kind,
            pair_id,
            total,
            done: AtomicUsize::new(0),
            state: Mutex::new(JobState::Running),
        });
        inner.0 += 1;
        inner.1.push(job.clone());
        if inner.1.len() > KEEP {
            inner.1.remove(0);
        }
        job
    }

    pub fn list(&self) -> Vec<Arc<Job>> {
        self.inner.lock().unwrap().1.clone()
    }

    pub fn get(&self, id: usize) -> Option<Arc<Job>> {
        self.inner.lock().unwrap().1.iter().find(|j| j.id == id).cloned()
    }
}
