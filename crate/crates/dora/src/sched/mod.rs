//! Stage-2 scheduling: place (layer, execution mode) pairs in time on the
//! shared unit pools so precedence and resource limits hold and the makespan
//! is minimized.
//!
//! All solvers build schedules through the same serial generation scheme: pick
//! the next ready layer, pick one of its candidate modes, start it at the
//! earliest time where enough units of every class are free until it finishes.
//! Iterating that scheme over all ready-layer orders and mode choices reaches
//! an optimal schedule for makespan, which is what the exact solver searches
//! and what the genetic algorithm samples.

pub mod exact;
pub mod ga;
pub mod partition;

use crate::arch::ArchConfig;
use crate::perfmodel::{CandidateTable, ResourceReq};
use crate::workload::WorkloadDag;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub layer: usize,
    /// Index into the layer's candidate mode list.
    pub mode: usize,
    pub req: ResourceReq,
    pub start: u64,
    pub end: u64,
    pub lmu_ids: Vec<u32>,
    pub mmu_ids: Vec<u32>,
    pub sfu_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Proven optimal by exhausting the branch-and-bound tree.
    Optimal,
    /// Best schedule found within the search budget.
    Feasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub status: SolveStatus,
    pub wall_time_ms: f64,
    pub nodes_explored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub format_version: u32,
    pub entries: Vec<ScheduleEntry>,
    pub makespan: u64,
    pub meta: SolverMeta,
}

impl Schedule {
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SchedError> {
        let text = std::fs::read_to_string(path).map_err(|e| SchedError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| SchedError::Parse(e.to_string()))
    }

    /// Entries sorted by (start, layer); the lowering consumes this order.
    pub fn entries_by_start(&self) -> Vec<&ScheduleEntry> {
        let mut v: Vec<&ScheduleEntry> = self.entries.iter().collect();
        v.sort_by_key(|e| (e.start, e.layer));
        v
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchedError {
    #[error("layer {0} has no candidate modes")]
    NoCandidates(usize),
    #[error("candidate table covers {table} layers, workload has {dag}")]
    TableMismatch { table: usize, dag: usize },
    #[error("mode index {mode} out of range for layer {layer}")]
    BadMode { layer: usize, mode: usize },
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Unit pools and placement
// ---------------------------------------------------------------------------

/// Busy intervals per unit of one class. Units are interchangeable; placement
/// always grabs the lowest free indices, so count-feasibility and
/// index-feasibility coincide.
#[derive(Debug, Clone)]
pub struct UnitPool {
    units: Vec<Vec<(u64, u64)>>,
}

impl UnitPool {
    pub fn new(count: u32) -> Self {
        Self { units: vec![Vec::new(); count as usize] }
    }

    fn unit_free(&self, unit: usize, start: u64, end: u64) -> bool {
        self.units[unit].iter().all(|&(s, e)| end <= s || e <= start)
    }

    fn free_units(&self, start: u64, end: u64, want: u32) -> Option<Vec<u32>> {
        let mut ids = Vec::with_capacity(want as usize);
        for u in 0..self.units.len() {
            if ids.len() == want as usize {
                break;
            }
            if self.unit_free(u, start, end) {
                ids.push(u as u32);
            }
        }
        (ids.len() == want as usize).then_some(ids)
    }

    fn occupy(&mut self, ids: &[u32], start: u64, end: u64) {
        for &u in ids {
            self.units[u as usize].push((start, end));
        }
    }

    fn interval_ends(&self) -> impl Iterator<Item = u64> + '_ {
        self.units.iter().flatten().map(|&(_, e)| e)
    }
}

/// The three unit pools of one overlay instance.
#[derive(Debug, Clone)]
pub struct Placer {
    pub lmu: UnitPool,
    pub mmu: UnitPool,
    pub sfu: UnitPool,
}

impl Placer {
    pub fn new(cfg: &ArchConfig) -> Self {
        Self {
            lmu: UnitPool::new(cfg.num_lmu),
            mmu: UnitPool::new(cfg.num_mmu),
            sfu: UnitPool::new(cfg.num_sfu),
        }
    }

    fn feasible_at(&self, start: u64, end: u64, req: ResourceReq) -> bool {
        self.lmu.free_units(start, end, req.lmu).is_some()
            && self.mmu.free_units(start, end, req.mmu).is_some()
            && self.sfu.free_units(start, end, req.sfu).is_some()
    }

    /// Earliest start >= `est` where `req` units are free for `dur` cycles.
    pub fn earliest(&self, est: u64, dur: u64, req: ResourceReq) -> u64 {
        let mut candidates: Vec<u64> = self
            .lmu
            .interval_ends()
            .chain(self.mmu.interval_ends())
            .chain(self.sfu.interval_ends())
            .filter(|&e| e > est)
            .collect();
        candidates.push(est);
        candidates.sort_unstable();
        candidates.dedup();
        for t in candidates {
            if self.feasible_at(t, t + dur, req) {
                return t;
            }
        }
        unreachable!("placement is always feasible after the last busy interval")
    }

    /// Place at the earliest feasible start, occupying the lowest free unit
    /// indices of every class.
    pub fn place(&mut self, est: u64, dur: u64, req: ResourceReq) -> (u64, Vec<u32>, Vec<u32>, Vec<u32>) {
        let start = self.earliest(est, dur, req);
        let end = start + dur;
        let lmu = self.lmu.free_units(start, end, req.lmu).unwrap();
        let mmu = self.mmu.free_units(start, end, req.mmu).unwrap();
        let sfu = self.sfu.free_units(start, end, req.sfu).unwrap();
        self.lmu.occupy(&lmu, start, end);
        self.mmu.occupy(&mmu, start, end);
        self.sfu.occupy(&sfu, start, end);
        (start, lmu, mmu, sfu)
    }
}

fn check_table(dag: &WorkloadDag, table: &CandidateTable) -> Result<(), SchedError> {
    if table.per_layer.len() != dag.len() {
        return Err(SchedError::TableMismatch { table: table.per_layer.len(), dag: dag.len() });
    }
    for (i, lc) in table.per_layer.iter().enumerate() {
        if lc.modes.is_empty() {
            return Err(SchedError::NoCandidates(i));
        }
    }
    Ok(())
}

/// Serial generation scheme: repeatedly schedule the ready layer with the
/// highest priority (ties to the lowest id) in its given mode.
pub fn sgs_decode(
    dag: &WorkloadDag,
    table: &CandidateTable,
    cfg: &ArchConfig,
    priority: &[f64],
    modes: &[usize],
) -> Result<Schedule, SchedError> {
    check_table(dag, table)?;
    let n = dag.len();
    assert_eq!(priority.len(), n);
    assert_eq!(modes.len(), n);
    for (layer, &m) in modes.iter().enumerate() {
        if m >= table.modes(layer).len() {
            return Err(SchedError::BadMode { layer, mode: m });
        }
    }
    let mut placer = Placer::new(cfg);
    let mut indeg = vec![0usize; n];
    for &(_, j) in &dag.edges {
        indeg[j] += 1;
    }
    let mut done = vec![false; n];
    let mut finish = vec![0u64; n];
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let next = (0..n)
            .filter(|&i| !done[i] && indeg[i] == 0)
            .max_by(|&a, &b| {
                priority[a]
                    .partial_cmp(&priority[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .expect("a DAG always has a ready layer");
        let mode = &table.modes(next)[modes[next]];
        let est = dag.predecessors(next).iter().map(|&p| finish[p]).max().unwrap_or(0);
        let (start, lmu_ids, mmu_ids, sfu_ids) = placer.place(est, mode.latency_cycles, mode.req);
        let end = start + mode.latency_cycles;
        finish[next] = end;
        done[next] = true;
        for j in dag.successors(next) {
            indeg[j] -= 1;
        }
        entries.push(ScheduleEntry {
            layer: next,
            mode: modes[next],
            req: mode.req,
            start,
            end,
            lmu_ids,
            mmu_ids,
            sfu_ids,
        });
    }
    let makespan = entries.iter().map(|e| e.end).max().unwrap_or(0);
    Ok(Schedule {
        format_version: SCHEDULE_FORMAT_VERSION,
        entries,
        makespan,
        meta: SolverMeta { status: SolveStatus::Feasible, wall_time_ms: 0.0, nodes_explored: 0 },
    })
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    MissingLayer { layer: usize },
    DuplicateLayer { layer: usize },
    BadMode { layer: usize, mode: usize },
    EndMismatch { layer: usize, expected: u64, actual: u64 },
    Precedence { producer: usize, consumer: usize },
    ResourceCount { layer: usize, class: &'static str, want: u32, got: usize },
    UnitOutOfRange { layer: usize, class: &'static str, unit: u32 },
    UnitOverlap { class: &'static str, unit: u32, a: usize, b: usize },
    MakespanMismatch { claimed: u64, actual: u64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MissingLayer { layer } => write!(f, "layer {layer} is not scheduled"),
            Violation::DuplicateLayer { layer } => write!(f, "layer {layer} scheduled twice"),
            Violation::BadMode { layer, mode } => {
                write!(f, "layer {layer}: mode index {mode} out of range")
            }
            Violation::EndMismatch { layer, expected, actual } => {
                write!(f, "layer {layer}: end should be start + {expected}, got span {actual}")
            }
            Violation::Precedence { producer, consumer } => {
                write!(f, "layer {consumer} starts before producer {producer} ends")
            }
            Violation::ResourceCount { layer, class, want, got } => {
                write!(f, "layer {layer}: wants {want} {class}s, got {got}")
            }
            Violation::UnitOutOfRange { layer, class, unit } => {
                write!(f, "layer {layer}: {class} id {unit} out of range")
            }
            Violation::UnitOverlap { class, unit, a, b } => {
                write!(f, "{class} {unit} used by overlapping layers {a} and {b}")
            }
            Violation::MakespanMismatch { claimed, actual } => {
                write!(f, "makespan {claimed} but latest end is {actual}")
            }
        }
    }
}

/// Check a schedule against the workload, the candidate table, and the unit
/// counts. Returns every violation found, empty means valid.
pub fn verify_schedule(
    dag: &WorkloadDag,
    table: &CandidateTable,
    cfg: &ArchConfig,
    schedule: &Schedule,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = dag.len();
    let mut seen = vec![0usize; n];
    for e in &schedule.entries {
        if e.layer >= n {
            out.push(Violation::UnitOutOfRange { layer: e.layer, class: "layer", unit: 0 });
            continue;
        }
        seen[e.layer] += 1;
    }
    for (layer, &count) in seen.iter().enumerate() {
        match count {
            0 => out.push(Violation::MissingLayer { layer }),
            1 => {}
            _ => out.push(Violation::DuplicateLayer { layer }),
        }
    }
    let mut finish = vec![None::<u64>; n];
    let mut start = vec![None::<u64>; n];
    for e in &schedule.entries {
        if e.layer >= n {
            continue;
        }
        if e.layer >= table.per_layer.len() || e.mode >= table.modes(e.layer).len() {
            out.push(Violation::BadMode { layer: e.layer, mode: e.mode });
            continue;
        }
        let mode = &table.modes(e.layer)[e.mode];
        if e.end.saturating_sub(e.start) != mode.latency_cycles {
            out.push(Violation::EndMismatch {
                layer: e.layer,
                expected: mode.latency_cycles,
                actual: e.end.saturating_sub(e.start),
            });
        }
        for (class, ids, want, cap) in [
            ("lmu", &e.lmu_ids, mode.req.lmu, cfg.num_lmu),
            ("mmu", &e.mmu_ids, mode.req.mmu, cfg.num_mmu),
            ("sfu", &e.sfu_ids, mode.req.sfu, cfg.num_sfu),
        ] {
            if ids.len() != want as usize {
                out.push(Violation::ResourceCount { layer: e.layer, class, want, got: ids.len() });
            }
            for &u in ids.iter() {
                if u >= cap {
                    out.push(Violation::UnitOutOfRange { layer: e.layer, class, unit: u });
                }
            }
        }
        start[e.layer] = Some(e.start);
        finish[e.layer] = Some(e.end);
    }
    for &(i, j) in &dag.edges {
        if let (Some(fi), Some(sj)) = (finish[i], start[j]) {
            if sj < fi {
                out.push(Violation::Precedence { producer: i, consumer: j });
            }
        }
    }
    for (ai, a) in schedule.entries.iter().enumerate() {
        for b in schedule.entries.iter().skip(ai + 1) {
            if a.start < b.end && b.start < a.end {
                for (class, au, bu) in [
                    ("lmu", &a.lmu_ids, &b.lmu_ids),
                    ("mmu", &a.mmu_ids, &b.mmu_ids),
                    ("sfu", &a.sfu_ids, &b.sfu_ids),
                ] {
                    for &u in au.iter() {
                        if bu.contains(&u) {
                            out.push(Violation::UnitOverlap { class, unit: u, a: a.layer, b: b.layer });
                        }
                    }
                }
            }
        }
    }
    let actual = schedule.entries.iter().map(|e| e.end).max().unwrap_or(0);
    if schedule.makespan != actual {
        out.push(Violation::MakespanMismatch { claimed: schedule.makespan, actual });
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::perfmodel::{CandidateMode, LayerCandidates, LmuSplit, RuntimeParams};
    use crate::workload::{Layer, LayerKind};

    pub(crate) fn dummy_params() -> RuntimeParams {
        RuntimeParams {
            mmu_m: 1,
            mmu_n: 1,
            lmu_m: 32,
            lmu_k: 32,
            lmu_n: 32,
            lhs_mmu_row: 1,
            lhs_mmu_col: 1,
            rhs_mmu_row: 1,
            rhs_mmu_col: 1,
            out_mmu_row: 1,
            out_mmu_col: 1,
            bound_i: 32,
            bound_k: 32,
            bound_j: 32,
            lmu_split: LmuSplit { lhs: 1, rhs: 1, out: 1, nl: 0 },
        }
    }

    pub(crate) fn table_of(modes: Vec<Vec<(ResourceReq, u64)>>) -> CandidateTable {
        CandidateTable {
            format_version: 1,
            per_layer: modes
                .into_iter()
                .map(|ms| {
                    let feasible_triples = ms.len();
                    LayerCandidates {
                        modes: ms
                            .into_iter()
                            .map(|(req, latency_cycles)| CandidateMode {
                                req,
                                params: dummy_params(),
                                latency_cycles,
                                iter_times: 1,
                            })
                            .collect(),
                        feasible_triples,
                    }
                })
                .collect(),
        }
    }

    pub(crate) fn chain_dag(n: usize) -> WorkloadDag {
        WorkloadDag::new(
            (0..n)
                .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                .collect(),
            (0..n.saturating_sub(1)).map(|i| (i, i + 1)),
        )
        .unwrap()
    }

    fn small_cfg() -> ArchConfig {
        ArchConfig { num_lmu: 7, num_mmu: 2, num_sfu: 1, ..ArchConfig::default_vck190() }
    }

    #[test]
    fn sgs_chain_is_sequential() {
        let dag = chain_dag(3);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 3]);
        let cfg = small_cfg();
        let s = sgs_decode(&dag, &table, &cfg, &[0.0; 3], &[0; 3]).unwrap();
        assert_eq!(s.makespan, 30);
        assert!(verify_schedule(&dag, &table, &cfg, &s).is_empty());
    }

    #[test]
    fn independent_layers_run_in_parallel_when_units_allow() {
        let dag = WorkloadDag::new(
            (0..2)
                .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                .collect(),
            [],
        )
        .unwrap();
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 2]);
        let cfg = small_cfg();
        let s = sgs_decode(&dag, &table, &cfg, &[0.0; 2], &[0; 2]).unwrap();
        assert_eq!(s.makespan, 10);
        assert!(verify_schedule(&dag, &table, &cfg, &s).is_empty());
        // Unit sets must be disjoint.
        let a = &s.entries[0];
        let b = &s.entries[1];
        assert!(a.lmu_ids.iter().all(|u| !b.lmu_ids.contains(u)));
    }

    #[test]
    fn resource_contention_serializes() {
        // Two independent layers each wanting 2 MMUs on a 2-MMU overlay.
        let dag = WorkloadDag::new(
            (0..2)
                .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                .collect(),
            [],
        )
        .unwrap();
        let req = ResourceReq { lmu: 3, mmu: 2, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 2]);
        let cfg = small_cfg();
        let s = sgs_decode(&dag, &table, &cfg, &[0.0; 2], &[0; 2]).unwrap();
        assert_eq!(s.makespan, 20);
        assert!(verify_schedule(&dag, &table, &cfg, &s).is_empty());
    }

    #[test]
    fn verify_catches_violations() {
        let dag = chain_dag(2);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 2]);
        let cfg = small_cfg();
        let mut s = sgs_decode(&dag, &table, &cfg, &[0.0; 2], &[0; 2]).unwrap();
        // Break precedence: start the consumer before the producer ends.
        s.entries[1].start = 0;
        s.entries[1].end = 10;
        let v = verify_schedule(&dag, &table, &cfg, &s);
        assert!(v.iter().any(|x| matches!(x, Violation::Precedence { .. })), "{v:?}");
        assert!(v.iter().any(|x| matches!(x, Violation::MakespanMismatch { .. })));
    }

    #[test]
    fn verify_catches_unit_overlap() {
        let dag = WorkloadDag::new(
            (0..2)
                .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                .collect(),
            [],
        )
        .unwrap();
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 2]);
        let cfg = small_cfg();
        let mut s = sgs_decode(&dag, &table, &cfg, &[0.0; 2], &[0; 2]).unwrap();
        s.entries[1].lmu_ids = s.entries[0].lmu_ids.clone();
        let v = verify_schedule(&dag, &table, &cfg, &s);
        assert!(v.iter().any(|x| matches!(x, Violation::UnitOverlap { class: "lmu", .. })), "{v:?}");
    }

    #[test]
    fn priority_breaks_order() {
        let dag = WorkloadDag::new(
            (0..2)
                .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                .collect(),
            [],
        )
        .unwrap();
        let req = ResourceReq { lmu: 3, mmu: 2, sfu: 0 };
        let table = table_of(vec![vec![(req, 5)], vec![(req, 7)]]);
        let cfg = small_cfg();
        let s = sgs_decode(&dag, &table, &cfg, &[0.1, 0.9], &[0, 0]).unwrap();
        // Layer 1 has higher priority, so it goes first.
        let e1 = s.entries.iter().find(|e| e.layer == 1).unwrap();
        assert_eq!(e1.start, 0);
    }
}
