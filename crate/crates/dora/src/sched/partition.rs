//! Scalability path for large DAGs: cut the topological order into contiguous
//! segments of balanced work, schedule each segment on the full overlay, and
//! compose the results with a barrier between segments. Every cross-segment
//! edge points forward, so the barrier satisfies it by construction.

use super::{Schedule, SchedError, SolveStatus, SolverMeta, check_table};
use crate::arch::ArchConfig;
use crate::perfmodel::{CandidateTable, LayerCandidates};
use crate::workload::WorkloadDag;
use rayon::prelude::*;

/// Split layer ids (already a topological order) into up to `segments`
/// contiguous chunks with roughly equal total minimum latency.
pub fn partition_dag(
    dag: &WorkloadDag,
    table: &CandidateTable,
    segments: usize,
) -> Result<Vec<Vec<usize>>, SchedError> {
    check_table(dag, table)?;
    if segments == 0 {
        return Err(SchedError::Parse("segment count must be positive".into()));
    }
    let n = dag.len();
    if n == 0 {
        return Ok(vec![]);
    }
    let weight: Vec<u64> = (0..n)
        .map(|i| table.modes(i).iter().map(|m| m.latency_cycles).min().unwrap())
        .collect();
    let total: u64 = weight.iter().sum();
    let segments = segments.min(n);
    let mut out = Vec::with_capacity(segments);
    let mut current = Vec::new();
    let mut cum = 0u64;
    let mut boundary = 1u64;
    for i in 0..n {
        current.push(i);
        cum += weight[i];
        // Leave enough layers for the remaining segments.
        let remaining_layers = n - i - 1;
        let remaining_segments = segments - out.len() - 1;
        if out.len() + 1 < segments
            && (cum * segments as u64 >= boundary * total || remaining_layers == remaining_segments)
        {
            out.push(std::mem::take(&mut current));
            boundary += 1;
        }
    }
    out.push(current);
    Ok(out)
}

/// Extract the sub-DAG and sub-table for one segment. Segment layers are
/// relabeled to 0..len; only intra-segment edges are kept.
fn segment_problem(
    dag: &WorkloadDag,
    table: &CandidateTable,
    segment: &[usize],
) -> (WorkloadDag, CandidateTable) {
    let first = segment[0];
    let set: std::ops::Range<usize> = first..first + segment.len();
    let layers = segment
        .iter()
        .map(|&old| {
            let mut l = dag.layers[old].clone();
            l.id = old - first;
            l
        })
        .collect();
    let edges = dag
        .edges
        .iter()
        .filter(|(i, j)| set.contains(i) && set.contains(j))
        .map(|&(i, j)| (i - first, j - first));
    let sub_dag = WorkloadDag::new(layers, edges).expect("segment of a valid DAG is valid");
    let sub_table = CandidateTable {
        format_version: table.format_version,
        per_layer: segment.iter().map(|&old| table.per_layer[old].clone()).collect::<Vec<LayerCandidates>>(),
    };
    (sub_dag, sub_table)
}

/// Schedule each segment independently (in parallel) and chain the results:
/// segment k+1 starts when segment k has fully drained.
pub fn solve_partitioned<F>(
    dag: &WorkloadDag,
    table: &CandidateTable,
    cfg: &ArchConfig,
    segments: usize,
    solver: F,
) -> Result<Schedule, SchedError>
where
    F: Fn(&WorkloadDag, &CandidateTable, &ArchConfig) -> Result<Schedule, SchedError> + Sync,
{
    let parts = partition_dag(dag, table, segments)?;
    let solved: Result<Vec<Schedule>, SchedError> = parts
        .par_iter()
        .map(|segment| {
            let (sub_dag, sub_table) = segment_problem(dag, table, segment);
            solver(&sub_dag, &sub_table, cfg)
        })
        .collect();
    let solved = solved?;

    let mut entries = Vec::with_capacity(dag.len());
    let mut offset = 0u64;
    let mut nodes = 0u64;
    let mut wall = 0.0f64;
    let mut all_optimal = true;
    for (segment, sched) in parts.iter().zip(&solved) {
        let first = segment[0];
        for e in &sched.entries {
            let mut e = e.clone();
            e.layer += first;
            e.start += offset;
            e.end += offset;
            entries.push(e);
        }
        offset += sched.makespan;
        nodes += sched.meta.nodes_explored;
        wall += sched.meta.wall_time_ms;
        all_optimal &= sched.meta.status == SolveStatus::Optimal;
    }
    let status = if all_optimal && parts.len() <= 1 { SolveStatus::Optimal } else { SolveStatus::Feasible };
    let makespan = entries.iter().map(|e| e.end).max().unwrap_or(0);
    Ok(Schedule {
        format_version: super::SCHEDULE_FORMAT_VERSION,
        entries,
        makespan,
        meta: SolverMeta { status, wall_time_ms: wall, nodes_explored: nodes },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::ResourceReq;
    use crate::sched::exact::{Budget, solve_exact};
    use crate::sched::tests::{chain_dag, table_of};
    use crate::sched::verify_schedule;

    fn cfg_small() -> ArchConfig {
        ArchConfig { num_lmu: 7, num_mmu: 2, num_sfu: 1, ..ArchConfig::default_vck190() }
    }

    #[test]
    fn partitions_cover_and_stay_contiguous() {
        let dag = chain_dag(10);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 10]);
        let parts = partition_dag(&dag, &table, 3).unwrap();
        assert_eq!(parts.len(), 3);
        let flat: Vec<usize> = parts.iter().flatten().copied().collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn uneven_weights_balance() {
        let dag = chain_dag(4);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        // Weights 30, 10, 10, 10: the first layer alone is nearly half.
        let table = table_of(vec![
            vec![(req, 30)],
            vec![(req, 10)],
            vec![(req, 10)],
            vec![(req, 10)],
        ]);
        let parts = partition_dag(&dag, &table, 2).unwrap();
        assert_eq!(parts, vec![vec![0], vec![1, 2, 3]]);
    }

    #[test]
    fn more_segments_than_layers() {
        let dag = chain_dag(3);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 5)]; 3]);
        let parts = partition_dag(&dag, &table, 8).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn composed_schedule_is_valid() {
        let dag = chain_dag(9);
        let fast = ResourceReq { lmu: 4, mmu: 2, sfu: 0 };
        let slow = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(slow, 12), (fast, 8)]; 9]);
        let cfg = cfg_small();
        let s = solve_partitioned(&dag, &table, &cfg, 3, |d, t, c| {
            solve_exact(d, t, c, Budget::default())
        })
        .unwrap();
        assert!(verify_schedule(&dag, &table, &cfg, &s).is_empty());
        assert_eq!(s.makespan, 9 * 8);
        assert_eq!(s.meta.status, SolveStatus::Feasible);
    }

    #[test]
    fn single_segment_matches_exact() {
        let dag = chain_dag(4);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 4]);
        let cfg = cfg_small();
        let whole = solve_exact(&dag, &table, &cfg, Budget::default()).unwrap();
        let part = solve_partitioned(&dag, &table, &cfg, 1, |d, t, c| {
            solve_exact(d, t, c, Budget::default())
        })
        .unwrap();
        assert_eq!(part.makespan, whole.makespan);
        assert_eq!(part.meta.status, SolveStatus::Optimal);
    }
}
