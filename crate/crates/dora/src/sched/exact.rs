//! Exact makespan minimization by depth-first branch-and-bound over serial
//! schedule generation: each node picks one ready layer and one of its modes
//! and places it at the earliest feasible start. Exhausting the tree proves
//! optimality; a node or time budget degrades the result to a feasible
//! incumbent.
//!
//! `export_lp` emits the equivalent mixed-integer program in CPLEX LP format
//! so external solvers can cross-check small instances.

use super::{Placer, Schedule, SchedError, ScheduleEntry, SolveStatus, SolverMeta, check_table, sgs_decode};
use crate::arch::ArchConfig;
use crate::perfmodel::CandidateTable;
use crate::workload::WorkloadDag;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub max_nodes: u64,
    pub max_time: Option<Duration>,
}

impl Default for Budget {
    fn default() -> Self {
        Self { max_nodes: u64::MAX, max_time: None }
    }
}

impl Budget {
    pub fn nodes(max_nodes: u64) -> Self {
        Self { max_nodes, ..Self::default() }
    }

    pub fn time(d: Duration) -> Self {
        Self { max_time: Some(d), ..Self::default() }
    }
}

struct Search<'a> {
    dag: &'a WorkloadDag,
    table: &'a CandidateTable,
    min_lat: Vec<u64>,
    /// Longest min-latency path from a layer (inclusive) to any sink.
    tail: Vec<u64>,
    /// Static per-class lower bound on the makespan from total work.
    work_lb: u64,
    incumbent: Vec<ScheduleEntry>,
    incumbent_makespan: u64,
    nodes: u64,
    budget: Budget,
    started: Instant,
    exhausted: bool,
}

impl Search<'_> {
    fn out_of_budget(&self) -> bool {
        self.nodes >= self.budget.max_nodes
            || self.budget.max_time.is_some_and(|t| self.started.elapsed() >= t)
    }

    /// Critical-path lower bound given current finish times of scheduled
    /// layers; ids are topologically ordered so one forward pass suffices.
    fn lower_bound(&self, done: &[bool], finish: &[u64], cur_end: u64) -> u64 {
        let n = self.dag.len();
        let mut est = vec![0u64; n];
        let mut lb = cur_end.max(self.work_lb);
        for j in 0..n {
            if done[j] {
                continue;
            }
            let mut e = 0;
            for &(i, jj) in self.dag.edges.range((0, 0)..(j + 1, 0)) {
                if jj != j {
                    continue;
                }
                e = e.max(if done[i] { finish[i] } else { est[i] + self.min_lat[i] });
            }
            est[j] = e;
            lb = lb.max(e + self.tail[j]);
        }
        lb
    }

    fn dfs(
        &mut self,
        placer: &Placer,
        done: &mut Vec<bool>,
        indeg: &mut Vec<usize>,
        finish: &mut Vec<u64>,
        entries: &mut Vec<ScheduleEntry>,
        cur_end: u64,
    ) {
        self.nodes += 1;
        if entries.len() == self.dag.len() {
            if cur_end < self.incumbent_makespan {
                self.incumbent_makespan = cur_end;
                self.incumbent = entries.clone();
            }
            return;
        }
        if self.out_of_budget() {
            self.exhausted = true;
            return;
        }
        if self.lower_bound(done, finish, cur_end) >= self.incumbent_makespan {
            return;
        }
        let ready: Vec<usize> =
            (0..self.dag.len()).filter(|&i| !done[i] && indeg[i] == 0).collect();
        for layer in ready {
            for mode_idx in 0..self.table.modes(layer).len() {
                let mode = &self.table.modes(layer)[mode_idx];
                let est = self
                    .dag
                    .predecessors(layer)
                    .iter()
                    .map(|&p| finish[p])
                    .max()
                    .unwrap_or(0);
                let mut next = placer.clone();
                let (start, lmu_ids, mmu_ids, sfu_ids) =
                    next.place(est, mode.latency_cycles, mode.req);
                let end = start + mode.latency_cycles;
                done[layer] = true;
                finish[layer] = end;
                for j in self.dag.successors(layer) {
                    indeg[j] -= 1;
                }
                entries.push(ScheduleEntry {
                    layer,
                    mode: mode_idx,
                    req: mode.req,
                    start,
                    end,
                    lmu_ids,
                    mmu_ids,
                    sfu_ids,
                });
                self.dfs(&next, done, indeg, finish, entries, cur_end.max(end));
                entries.pop();
                for j in self.dag.successors(layer) {
                    indeg[j] += 1;
                }
                done[layer] = false;
                if self.exhausted {
                    return;
                }
            }
        }
    }
}

/// Minimize the makespan exactly (subject to the budget). The returned status
/// is `Optimal` only when the whole search tree was explored.
pub fn solve_exact(
    dag: &WorkloadDag,
    table: &CandidateTable,
    cfg: &ArchConfig,
    budget: Budget,
) -> Result<Schedule, SchedError> {
    check_table(dag, table)?;
    let started = Instant::now();
    let n = dag.len();
    if n == 0 {
        return Ok(Schedule {
            format_version: super::SCHEDULE_FORMAT_VERSION,
            entries: vec![],
            makespan: 0,
            meta: SolverMeta {
                status: SolveStatus::Optimal,
                wall_time_ms: 0.0,
                nodes_explored: 0,
            },
        });
    }
    let min_lat: Vec<u64> = (0..n)
        .map(|i| table.modes(i).iter().map(|m| m.latency_cycles).min().unwrap())
        .collect();
    let mut tail = vec![0u64; n];
    for i in (0..n).rev() {
        let succ_tail = dag.successors(i).iter().map(|&j| tail[j]).max().unwrap_or(0);
        tail[i] = min_lat[i] + succ_tail;
    }
    let work_lb = {
        let mut lb = 0u64;
        for (class, cap) in [(0, cfg.num_lmu), (1, cfg.num_mmu), (2, cfg.num_sfu)] {
            if cap == 0 {
                continue;
            }
            let total: u64 = (0..n)
                .map(|i| {
                    table
                        .modes(i)
                        .iter()
                        .map(|m| {
                            let req = match class {
                                0 => m.req.lmu,
                                1 => m.req.mmu,
                                _ => m.req.sfu,
                            };
                            req as u64 * m.latency_cycles
                        })
                        .min()
                        .unwrap()
                })
                .sum();
            lb = lb.max(total.div_ceil(cap as u64));
        }
        lb
    };

    // Greedy incumbent: lowest-id-first order, min-latency modes.
    let greedy_modes: Vec<usize> = (0..n)
        .map(|i| {
            table
                .modes(i)
                .iter()
                .enumerate()
                .min_by_key(|(_, m)| m.latency_cycles)
                .map(|(idx, _)| idx)
                .unwrap()
        })
        .collect();
    let greedy_prio: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
    let greedy = sgs_decode(dag, table, cfg, &greedy_prio, &greedy_modes)?;

    let mut search = Search {
        dag,
        table,
        min_lat,
        tail,
        work_lb,
        incumbent_makespan: greedy.makespan,
        incumbent: greedy.entries,
        nodes: 0,
        budget,
        started,
        exhausted: false,
    };
    let mut indeg = vec![0usize; n];
    for &(_, j) in &dag.edges {
        indeg[j] += 1;
    }
    let mut done = vec![false; n];
    let mut finish = vec![0u64; n];
    let mut entries = Vec::with_capacity(n);
    search.dfs(&Placer::new(cfg), &mut done, &mut indeg, &mut finish, &mut entries, 0);

    let status = if search.exhausted { SolveStatus::Feasible } else { SolveStatus::Optimal };
    Ok(Schedule {
        format_version: super::SCHEDULE_FORMAT_VERSION,
        entries: search.incumbent,
        makespan: search.incumbent_makespan,
        meta: SolverMeta {
            status,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            nodes_explored: search.nodes,
        },
    })
}

/// Emit the scheduling problem as a mixed-integer program in CPLEX LP format.
///
/// Variables: `x_i_m` selects mode m for layer i, `s_i`/`e_i` are start and
/// end times, `o_i_j` orders layer pairs (1 means i finishes before j starts),
/// `cmax` is the makespan. Pairs left unordered in both directions must fit
/// inside the per-class unit counts together.
pub fn export_lp(dag: &WorkloadDag, table: &CandidateTable, cfg: &ArchConfig) -> Result<String, SchedError> {
    use std::fmt::Write;
    check_table(dag, table)?;
    let n = dag.len();
    let horizon: u64 = (0..n)
        .map(|i| table.modes(i).iter().map(|m| m.latency_cycles).max().unwrap())
        .sum::<u64>()
        + 1;
    let mut s = String::new();
    writeln!(s, "Minimize\n obj: cmax\nSubject To").unwrap();
    for i in 0..n {
        let terms: Vec<String> =
            (0..table.modes(i).len()).map(|m| format!("x_{i}_{m}")).collect();
        writeln!(s, " pick_{i}: {} = 1", terms.join(" + ")).unwrap();
        let dur: Vec<String> = table
            .modes(i)
            .iter()
            .enumerate()
            .map(|(m, md)| format!("{} x_{i}_{m}", md.latency_cycles))
            .collect();
        writeln!(s, " dur_{i}: e_{i} - s_{i} - {} = 0", dur.join(" - ")).unwrap();
        writeln!(s, " span_{i}: cmax - e_{i} >= 0").unwrap();
    }
    for &(i, j) in &dag.edges {
        writeln!(s, " prec_{i}_{j}: s_{j} - e_{i} >= 0").unwrap();
    }
    for i in 0..n {
        for j in (i + 1)..n {
            writeln!(s, " ord_{i}_{j}: o_{i}_{j} + o_{j}_{i} <= 1").unwrap();
            // o_i_j = 1 forces e_i <= s_j.
            writeln!(s, " before_{i}_{j}: e_{i} - s_{j} + {horizon} o_{i}_{j} <= {horizon}").unwrap();
            writeln!(s, " before_{j}_{i}: e_{j} - s_{i} + {horizon} o_{j}_{i} <= {horizon}").unwrap();
            for (class, cap) in [("lmu", cfg.num_lmu), ("mmu", cfg.num_mmu), ("sfu", cfg.num_sfu)] {
                let req = |l: usize, m: usize| match class {
                    "lmu" => table.modes(l)[m].req.lmu,
                    "mmu" => table.modes(l)[m].req.mmu,
                    _ => table.modes(l)[m].req.sfu,
                };
                let max_sum: u32 = (0..table.modes(i).len()).map(|m| req(i, m)).max().unwrap()
                    + (0..table.modes(j).len()).map(|m| req(j, m)).max().unwrap();
                if max_sum <= cap {
                    continue;
                }
                let big = max_sum;
                let mut terms = Vec::new();
                for (l, other) in [(i, j), (j, i)] {
                    let _ = other;
                    for m in 0..table.modes(l).len() {
                        let r = req(l, m);
                        if r > 0 {
                            terms.push(format!("{r} x_{l}_{m}"));
                        }
                    }
                }
                writeln!(
                    s,
                    " res_{class}_{i}_{j}: {} - {big} o_{i}_{j} - {big} o_{j}_{i} <= {cap}",
                    terms.join(" + ")
                )
                .unwrap();
            }
        }
    }
    writeln!(s, "Bounds").unwrap();
    for i in 0..n {
        writeln!(s, " 0 <= s_{i}\n 0 <= e_{i}").unwrap();
    }
    writeln!(s, "Binaries").unwrap();
    for i in 0..n {
        for m in 0..table.modes(i).len() {
            writeln!(s, " x_{i}_{m}").unwrap();
        }
        for j in 0..n {
            if i != j {
                writeln!(s, " o_{i}_{j}").unwrap();
            }
        }
    }
    writeln!(s, "End").unwrap();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::ResourceReq;
    use crate::sched::tests::{chain_dag, table_of};
    use crate::workload::{Layer, LayerKind, WorkloadDag};

    fn cfg_small() -> ArchConfig {
        ArchConfig { num_lmu: 7, num_mmu: 2, num_sfu: 1, ..ArchConfig::default_vck190() }
    }

    #[test]
    fn chain_makespan_is_sum_of_min_latencies() {
        let dag = chain_dag(4);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![
            vec![(req, 10), (ResourceReq { lmu: 4, mmu: 2, sfu: 0 }, 6)],
            vec![(req, 20)],
            vec![(req, 5), (ResourceReq { lmu: 5, mmu: 2, sfu: 0 }, 3)],
            vec![(req, 8)],
        ]);
        let s = solve_exact(&dag, &table, &cfg_small(), Budget::default()).unwrap();
        assert_eq!(s.meta.status, crate::sched::SolveStatus::Optimal);
        assert_eq!(s.makespan, 6 + 20 + 3 + 8);
        assert!(crate::sched::verify_schedule(&dag, &table, &cfg_small(), &s).is_empty());
    }

    #[test]
    fn mode_tradeoff_under_contention() {
        // Two independent layers. Fast mode needs both MMUs, slow mode one.
        // Running both fast serializes (12), mixed is 10, both slow is 10.
        let dag = WorkloadDag::new(
            (0..2)
                .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                .collect(),
            [],
        )
        .unwrap();
        let fast = ResourceReq { lmu: 3, mmu: 2, sfu: 0 };
        let slow = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(fast, 6), (slow, 10)]; 2]);
        let s = solve_exact(&dag, &table, &cfg_small(), Budget::default()).unwrap();
        assert_eq!(s.makespan, 10);
    }

    #[test]
    fn exact_matches_brute_force_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let cfg = cfg_small();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for case in 0..12 {
            let n = rng.gen_range(2..=5);
            let mut edges = Vec::new();
            for j in 1..n {
                for i in 0..j {
                    if rng.gen_bool(0.4) {
                        edges.push((i, j));
                    }
                }
            }
            let dag = WorkloadDag::new(
                (0..n)
                    .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                    .collect(),
                edges,
            )
            .unwrap();
            let table = table_of(
                (0..n)
                    .map(|_| {
                        let n_modes = rng.gen_range(1..=2);
                        (0..n_modes)
                            .map(|_| {
                                let mmu = rng.gen_range(1..=2);
                                let lmu = rng.gen_range(3..=5);
                                (ResourceReq { lmu, mmu, sfu: 0 }, rng.gen_range(3..=20))
                            })
                            .collect()
                    })
                    .collect(),
            );
            let s = solve_exact(&dag, &table, &cfg, Budget::default()).unwrap();
            assert!(crate::sched::verify_schedule(&dag, &table, &cfg, &s).is_empty());

            // Oracle: all priority permutations x all mode vectors through the
            // same serial generation scheme.
            let mut best = u64::MAX;
            let perms = permutations(n);
            let mode_counts: Vec<usize> = (0..n).map(|i| table.modes(i).len()).collect();
            for perm in &perms {
                let prio: Vec<f64> = {
                    let mut p = vec![0.0; n];
                    for (rank, &l) in perm.iter().enumerate() {
                        p[l] = (n - rank) as f64;
                    }
                    p
                };
                let mut modes = vec![0usize; n];
                loop {
                    let sched = sgs_decode(&dag, &table, &cfg, &prio, &modes).unwrap();
                    best = best.min(sched.makespan);
                    // Next mode vector.
                    let mut carry = 0;
                    while carry < n {
                        modes[carry] += 1;
                        if modes[carry] < mode_counts[carry] {
                            break;
                        }
                        modes[carry] = 0;
                        carry += 1;
                    }
                    if carry == n {
                        break;
                    }
                }
            }
            assert_eq!(s.makespan, best, "case {case}");
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut items: Vec<usize> = (0..n).collect();
        heap_permute(&mut items, n, &mut out);
        out
    }

    fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap_permute(items, k - 1, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn budget_gives_feasible() {
        // Independent layers with a real mode trade-off: the greedy incumbent
        // (min-latency modes) serializes on the MMUs, so the search has work
        // to do and the tiny node budget cuts it short.
        let dag = WorkloadDag::new(
            (0..8)
                .map(|i| Layer { id: i, kind: LayerKind::MatMul, m: 32, k: 32, n: 32, name: None })
                .collect(),
            [],
        )
        .unwrap();
        let table = table_of(vec![vec![
            (ResourceReq { lmu: 3, mmu: 1, sfu: 0 }, 10),
            (ResourceReq { lmu: 3, mmu: 2, sfu: 0 }, 6),
        ]; 8]);
        let s = solve_exact(&dag, &table, &cfg_small(), Budget::nodes(5)).unwrap();
        assert_eq!(s.meta.status, crate::sched::SolveStatus::Feasible);
        assert!(crate::sched::verify_schedule(&dag, &table, &cfg_small(), &s).is_empty());
    }

    #[test]
    fn empty_dag_trivial() {
        let dag = WorkloadDag::new(vec![], []).unwrap();
        let table = table_of(vec![]);
        let s = solve_exact(&dag, &table, &cfg_small(), Budget::default()).unwrap();
        assert_eq!(s.makespan, 0);
        assert_eq!(s.meta.status, crate::sched::SolveStatus::Optimal);
    }

    #[test]
    fn lp_export_well_formed() {
        let dag = chain_dag(2);
        let req = ResourceReq { lmu: 3, mmu: 2, sfu: 0 };
        let table = table_of(vec![vec![(req, 10)]; 2]);
        let lp = export_lp(&dag, &table, &cfg_small()).unwrap();
        assert!(lp.starts_with("Minimize"));
        assert!(lp.contains("pick_0: x_0_0 = 1"));
        assert!(lp.contains("prec_0_1: s_1 - e_0 >= 0"));
        assert!(lp.contains("res_mmu_0_1:"));
        assert!(lp.trim_end().ends_with("End"));
    }
}
