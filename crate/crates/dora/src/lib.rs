//! Compiler and simulator for an instruction-orchestrated DNN accelerator overlay.
//!
//! The pipeline maps a DNN workload DAG onto a configurable overlay of local
//! memory units (LMU), matrix-multiplication units (MMU), and special function
//! units (SFU). Stage 1 enumerates per-layer runtime parameters under every
//! feasible resource budget and records the latency-optimal candidates. Stage 2
//! places layers in time with either an exact branch-and-bound scheduler or a
//! genetic algorithm, optionally after partitioning the DAG. Schedules are
//! lowered to bit-exact per-unit instruction streams which a discrete-event
//! functional + timing simulator can execute and validate.

pub mod arch;
pub mod isa;
pub mod matrix;
pub mod perfmodel;
pub mod sched;
pub mod sim;
pub mod workload;

pub use arch::ArchConfig;
pub use workload::WorkloadDag;
