use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::flow::Resources;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapacity {
    pub cpu_slots: u32,
    pub memory_mb: u64,
    pub gpu_slots: u32,
}

impl Default for BackendCapacity {
    /// One slot per available CPU, a nominal terabyte of memory, no GPUs.
    fn default() -> Self {
        let cpus = std::thread::available_parallelism().map_or(1, |n| n.get() as u32);
        BackendCapacity { cpu_slots: cpus, memory_mb: 1 << 20, gpu_slots: 0 }
    }
}

impl BackendCapacity {
    pub fn fits(&self, r: &Resources) -> bool {
        r.cpu <= self.cpu_slots && r.memory_mb <= self.memory_mb && r.gpu <= self.gpu_slots
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LifecycleKind {
    Admit,
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub seq: u64,
    pub label: String,
    pub kind: LifecycleKind,
    pub resources: Resources,
}

#[derive(Debug)]
struct LedgerState {
    used: Resources,
    seq: u64,
    log: Vec<LifecycleEvent>,
}

/// Cooperative slot accounting shared by every task of a backend.
#[derive(Debug)]
pub struct CapacityLedger {
    capacity: BackendCapacity,
    state: Mutex<LedgerState>,
    freed: Condvar,
}

fn add(a: Resources, b: Resources) -> Resources {
    Resources { cpu: a.cpu + b.cpu, memory_mb: a.memory_mb + b.memory_mb, gpu: a.gpu + b.gpu }
}

fn sub(a: Resources, b: Resources) -> Resources {
    Resources { cpu: a.cpu - b.cpu, memory_mb: a.memory_mb - b.memory_mb, gpu: a.gpu - b.gpu }
}

impl CapacityLedger {
    pub fn new(capacity: BackendCapacity) -> Result<Arc<CapacityLedger>, BackendError> {
        if capacity.cpu_slots == 0 || capacity.memory_mb == 0 {
            return Err(BackendError::InvalidCapacity(capacity));
        }
        let state = LedgerState { used: Resources { cpu: 0, memory_mb: 0, gpu: 0 }, seq: 0, log: Vec::new() };
        Ok(Arc::new(CapacityLedger { capacity, state: Mutex::new(state), freed: Condvar::new() }))
    }

    pub fn capacity(&self) -> BackendCapacity {
        self.capacity
    }

    /// Waits until `request` fits next to what is already admitted.
    pub fn acquire(self: &Arc<Self>, label: String, request: Resources) -> Result<Permit, BackendError> {
        if !self.capacity.fits(&request) {
            return Err(BackendError::Rejected { requested: request, capacity: self.capacity });
        }
        let mut state = self.state.lock().expect("ledger poisoned");
        while !self.capacity.fits(&add(state.used, request)) {
            state = self.freed.wait(state).expect("ledger poisoned");
        }
        state.used = add(state.used, request);
        state.seq += 1;
        let seq = state.seq;
        state.log.push(LifecycleEvent { seq, label: label.clone(), kind: LifecycleKind::Admit, resources: request });
        Ok(Permit { ledger: self.clone(), label, resources: request })
    }

    fn release(&self, label: &str, resources: Resources) {
        let mut state = self.state.lock().expect("ledger poisoned");
        state.used = sub(state.used, resources);
        state.seq += 1;
        let seq = state.seq;
        state.log.push(LifecycleEvent { seq, label: label.to_string(), kind: LifecycleKind::Release, resources });
        drop(state);
        self.freed.notify_all();
    }

    /// Admissions and releases in the order they happened.
    pub fn lifecycle(&self) -> Vec<LifecycleEvent> {
        self.state.lock().expect("ledger poisoned").log.clone()
    }

    pub fn in_use(&self) -> Resources {
        self.state.lock().expect("ledger poisoned").used
    }
}

/// Admitted slots; released on drop.
#[derive(Debug)]
pub struct Permit {
    ledger: Arc<CapacityLedger>,
    label: String,
    resources: Resources,
}

impl Permit {
    pub fn resources(&self) -> Resources {
        self.resources
    }
}

impl Drop for Permit {
    fn drop(&mut self) {
        self.ledger.release(&self.label, self.resources);
    }
}

/// Highest simultaneous load seen in a lifecycle log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PeakUsage {
    pub tasks: usize,
    pub cpu: u32,
    pub memory_mb: u64,
    pub gpu: u32,
}

pub fn peak_usage(events: &[LifecycleEvent]) -> PeakUsage {
    let mut sorted: Vec<&LifecycleEvent> = events.iter().collect();
    sorted.sort_by_key(|e| e.seq);
    let (mut tasks, mut cpu, mut mem, mut gpu) = (0i64, 0i64, 0i64, 0i64);
    let mut peak = PeakUsage::default();
    for e in sorted {
        let s = if e.kind == LifecycleKind::Admit { 1 } else { -1 };
        tasks += s;
        cpu += s * e.resources.cpu as i64;
        mem += s * e.resources.memory_mb as i64;
        gpu += s * e.resources.gpu as i64;
        peak.tasks = peak.tasks.max(tasks as usize);
        peak.cpu = peak.cpu.max(cpu as u32);
        peak.memory_mb = peak.memory_mb.max(mem as u64);
        peak.gpu = peak.gpu.max(gpu as u32);
    }
    peak
}
