//! Genetic-algorithm scheduler for instances too large for the exact search.
//!
//! A chromosome holds 2N genes in [0,1): the first N are layer priorities, the
//! second N select the candidate mode. Decoding runs the shared serial
//! generation scheme, so every chromosome maps to a feasible schedule and the
//! search space contains an optimal one.

use super::{Schedule, SchedError, SolveStatus, check_table, sgs_decode};
use crate::arch::ArchConfig;
use crate::perfmodel::CandidateTable;
use crate::workload::WorkloadDag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    /// Per-gene resample probability.
    pub mutation_rate: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 64,
            generations: 200,
            tournament: 4,
            crossover_rate: 0.9,
            mutation_rate: 0.05,
            elitism: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaTracePoint {
    pub generation: usize,
    pub best_makespan: u64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct GaResult {
    pub schedule: Schedule,
    /// Best makespan after every generation (index 0 = initial population).
    pub trace: Vec<GaTracePoint>,
}

#[derive(Clone)]
struct Individual {
    genes: Vec<f64>,
    makespan: u64,
}

fn decode_modes(genes: &[f64], table: &CandidateTable, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let count = table.modes(i).len();
            ((genes[n + i] * count as f64) as usize).min(count - 1)
        })
        .collect()
}

pub fn solve_ga(
    dag: &WorkloadDag,
    table: &CandidateTable,
    cfg: &ArchConfig,
    ga: &GaConfig,
) -> Result<GaResult, SchedError> {
    check_table(dag, table)?;
    if ga.population == 0 || ga.tournament == 0 {
        return Err(SchedError::Parse("population and tournament must be positive".into()));
    }
    let started = Instant::now();
    let n = dag.len();
    if n == 0 {
        let mut s = sgs_decode(dag, table, cfg, &[], &[])?;
        s.meta.status = SolveStatus::Feasible;
        return Ok(GaResult { schedule: s, trace: vec![] });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ga.seed);
    let evaluate = |genes: &[f64]| -> Result<u64, SchedError> {
        let modes = decode_modes(genes, table, n);
        Ok(sgs_decode(dag, table, cfg, &genes[..n], &modes)?.makespan)
    };

    let mut pop: Vec<Individual> = (0..ga.population)
        .map(|_| {
            let genes: Vec<f64> = (0..2 * n).map(|_| rng.gen::<f64>()).collect();
            let makespan = evaluate(&genes)?;
            Ok(Individual { genes, makespan })
        })
        .collect::<Result<_, SchedError>>()?;
    pop.sort_by_key(|i| i.makespan);

    let mut trace = vec![GaTracePoint {
        generation: 0,
        best_makespan: pop[0].makespan,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    }];

    for generation in 1..=ga.generations {
        let mut next: Vec<Individual> = pop.iter().take(ga.elitism.min(pop.len())).cloned().collect();
        while next.len() < ga.population {
            let pick = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let mut best: Option<&Individual> = None;
                for _ in 0..ga.tournament {
                    let c = &pop[rng.gen_range(0..pop.len())];
                    if best.map_or(true, |b| c.makespan < b.makespan) {
                        best = Some(c);
                    }
                }
                best.unwrap().genes.clone()
            };
            let a = pick(&mut rng);
            let b = pick(&mut rng);
            let mut child = if rng.gen_bool(ga.crossover_rate) {
                (0..2 * n).map(|g| if rng.gen_bool(0.5) { a[g] } else { b[g] }).collect::<Vec<f64>>()
            } else {
                a
            };
            for g in child.iter_mut() {
                if rng.gen_bool(ga.mutation_rate) {
                    *g = rng.gen::<f64>();
                }
            }
            let makespan = evaluate(&child)?;
            next.push(Individual { genes: child, makespan });
        }
        next.sort_by_key(|i| i.makespan);
        pop = next;
        trace.push(GaTracePoint {
            generation,
            best_makespan: pop[0].makespan,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let best = &pop[0];
    let modes = decode_modes(&best.genes, table, n);
    let mut schedule = sgs_decode(dag, table, cfg, &best.genes[..n], &modes)?;
    schedule.meta.status = SolveStatus::Feasible;
    schedule.meta.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    schedule.meta.nodes_explored = (ga.population * (ga.generations + 1)) as u64;
    Ok(GaResult { schedule, trace })
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
    fn deterministic_given_seed() {
        let dag = chain_dag(6);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 10), (ResourceReq { lmu: 4, mmu: 2, sfu: 0 }, 7)]; 6]);
        let ga = GaConfig { generations: 20, seed: 42, ..Default::default() };
        let a = solve_ga(&dag, &table, &cfg_small(), &ga).unwrap();
        let b = solve_ga(&dag, &table, &cfg_small(), &ga).unwrap();
        // Everything but wall-clock time must match.
        assert_eq!(a.schedule.entries, b.schedule.entries);
        assert_eq!(a.schedule.makespan, b.schedule.makespan);
        let best = |r: &GaResult| r.trace.iter().map(|t| t.best_makespan).collect::<Vec<_>>();
        assert_eq!(best(&a), best(&b));
    }

    #[test]
    fn trace_never_worsens() {
        let dag = chain_dag(8);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(req, 9), (ResourceReq { lmu: 5, mmu: 2, sfu: 0 }, 6)]; 8]);
        let ga = GaConfig { generations: 30, seed: 1, ..Default::default() };
        let r = solve_ga(&dag, &table, &cfg_small(), &ga).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].best_makespan <= w[0].best_makespan);
        }
        assert!(verify_schedule(&dag, &table, &cfg_small(), &r.schedule).is_empty());
    }

    #[test]
    fn matches_exact_on_small_instance() {
        let dag = chain_dag(4);
        let fast = ResourceReq { lmu: 4, mmu: 2, sfu: 0 };
        let slow = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let table = table_of(vec![vec![(slow, 12), (fast, 8)]; 4]);
        let cfg = cfg_small();
        let exact = solve_exact(&dag, &table, &cfg, Budget::default()).unwrap();
        let ga = GaConfig { generations: 50, seed: 3, ..Default::default() };
        let r = solve_ga(&dag, &table, &cfg, &ga).unwrap();
        assert_eq!(r.schedule.makespan, exact.makespan);
    }
}
