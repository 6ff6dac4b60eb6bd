//! Stage-1 design-space exploration: per-layer analytical latency model and
//! candidate execution table.
//!
//! For a matmul of M x K x N the on-chip tile is LMU_m x LMU_k x LMU_n and the
//! total latency is the sum over the tile iteration grid of
//! `max(dram_cycles, onchip_cycles, sfu_cycles)` for each iteration: transfer
//! and compute overlap through ping-pong buffering at both the LMU and MMU
//! level, so stages combine with max, not sum. Ragged edge tiles are not
//! padded; they cost their proportional cycles via dynamic loop bounds. When
//! every dimension divides its tile this collapses to
//! `latency_LMU * iter_times` with `iter_times = (M/LMU_m)(K/LMU_k)(N/LMU_n)`.
//!
//! The simulator implements the same timing semantics from the lowered
//! instruction stream; exact agreement between the two is asserted in tests to
//! pin both against drift.

use crate::arch::ArchConfig;
use crate::workload::{Layer, LayerKind, WorkloadDag};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const CANDIDATE_TABLE_FORMAT_VERSION: u32 = 1;

/// Cap on the LMU tile multiplier per dimension; beyond this, tiles exceed any
/// realistic LMU capacity.
pub const MAX_TILE_MULTIPLIER: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResourceReq {
    pub lmu: u32,
    pub mmu: u32,
    pub sfu: u32,
}

/// How the granted LMUs are divided among operand roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LmuSplit {
    pub lhs: u32,
    pub rhs: u32,
    pub out: u32,
    /// Non-linear output buffers (fused layers only).
    pub nl: u32,
}

impl LmuSplit {
    pub fn total(&self) -> u32 {
        self.lhs + self.rhs + self.out + self.nl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RuntimeParams {
    /// MMU aggregation along the non-reduced dims (MMU_m x 1 x MMU_n).
    pub mmu_m: u32,
    pub mmu_n: u32,
    /// On-chip tile dims in elements.
    pub lmu_m: u64,
    pub lmu_k: u64,
    pub lmu_n: u64,
    /// MMU-granularity tiles buffered per LMU, per operand (row x col).
    pub lhs_mmu_row: u32,
    pub lhs_mmu_col: u32,
    pub rhs_mmu_row: u32,
    pub rhs_mmu_col: u32,
    pub out_mmu_row: u32,
    pub out_mmu_col: u32,
    /// Full-tile dynamic loop bounds issued per MMU (elements).
    pub bound_i: u64,
    pub bound_k: u64,
    pub bound_j: u64,
    pub lmu_split: LmuSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMode {
    pub req: ResourceReq,
    pub params: RuntimeParams,
    pub latency_cycles: u64,
    pub iter_times: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCandidates {
    /// Latency-minimal mode per resource triple, dominated triples pruned.
    pub modes: Vec<CandidateMode>,
    /// Number of feasible resource triples before dominance pruning.
    pub feasible_triples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTable {
    pub format_version: u32,
    pub per_layer: Vec<LayerCandidates>,
}

impl CandidateTable {
    pub fn modes(&self, layer: usize) -> &[CandidateMode] {
        &self.per_layer[layer].modes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    /// For a full tile: does compute dominate the stream feed at the MMU level?
    pub mmu_compute_bound: bool,
    /// For a full iteration: does on-chip work dominate the DRAM transfer?
    pub lmu_compute_bound: bool,
    pub latency_mmu: u64,
    pub latency_lmu: u64,
    pub iter_times: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum PerfError {
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer {layer}: no feasible execution mode under the architecture")]
    NoFeasibleMode { layer: usize },
}

pub fn ceil_div(a: u64, b: u64) -> u64 {
    debug_assert!(b > 0);
    a.div_ceil(b)
}

/// Minimum units a layer needs: one LMU per live operand, one MMU if there is
/// a matmul, one SFU if there is a non-linear kernel.
pub fn min_resources(layer: &Layer) -> ResourceReq {
    match layer.kind {
        LayerKind::MatMul => ResourceReq { lmu: 3, mmu: 1, sfu: 0 },
        LayerKind::MatMulFused { .. } => ResourceReq { lmu: 4, mmu: 1, sfu: 1 },
        LayerKind::NonLinearOnly { .. } => ResourceReq { lmu: 2, mmu: 0, sfu: 1 },
    }
}

/// Split `total` row/col units into `parts` contiguous chunks, largest first.
/// Shared by the model, the lowering, and the capacity checks so all three
/// agree on per-LMU content.
pub fn chunk_units(total: u64, parts: u32) -> Vec<(u64, u64)> {
    debug_assert!(parts > 0);
    let chunk = ceil_div(total, parts as u64);
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let take = chunk.min(total - start);
        out.push((start, take));
        start += take;
    }
    out
}

/// Segments of a dimension tiled by `tile`: (segment length, count).
fn dim_segments(total: u64, tile: u64) -> Vec<(u64, u64)> {
    let full = total / tile;
    let rem = total % tile;
    let mut segs = Vec::with_capacity(2);
    if full > 0 {
        segs.push((tile, full));
    }
    if rem > 0 {
        segs.push((rem, 1));
    }
    segs
}

/// DRAM cycles to move a `rows x cols` element window split row-wise (or
/// col-wise) into `parts` per-LMU transfers.
fn dram_cycles_split(rows: u64, cols: u64, parts: u32, row_split: bool, cfg: &ArchConfig) -> u64 {
    let units = if row_split { rows } else { cols };
    chunk_units(units, parts)
        .iter()
        .map(|&(_, take)| {
            let bytes = if row_split { take * cols } else { rows * take } * cfg.elem_size;
            ceil_div(bytes, cfg.dram_bandwidth)
        })
        .sum()
}

/// Cycles for one MMU launch over a `bm x bk x bn` element tile, aggregated
/// over an mmu_m x mmu_n group. The group member with the largest share bounds
/// the launch; members fill row/col blocks of the storage tile in order.
fn launch_cycles(bm: u64, bk: u64, bn: u64, cfg: &ArchConfig) -> (u64, u64) {
    let (sm0, _, sn0) = cfg.storage_tile();
    let pm = sm0.min(bm);
    let pn = sn0.min(bn);
    let compute = ceil_div(pm * bk * pn, cfg.macs_per_cycle_per_proc * cfg.mmu_grid.procs());
    let feed = ceil_div(pm * bk * cfg.elem_size, cfg.stream_width)
        + ceil_div(bk * pn * cfg.elem_size, cfg.stream_width);
    (compute, feed)
}

/// On-chip cycles for one LMU iteration over a `tm x tk x tn` tile.
fn onchip_cycles(tm: u64, tk: u64, tn: u64, params: &RuntimeParams, cfg: &ArchConfig) -> u64 {
    let (sm0, sk0, sn0) = cfg.storage_tile();
    let sm = sm0 * params.mmu_m as u64;
    let sn = sn0 * params.mmu_n as u64;
    let mut total = 0u64;
    for &(bm, cm) in &dim_segments(tm, sm) {
        for &(bk, ck) in &dim_segments(tk, sk0) {
            for &(bn, cn) in &dim_segments(tn, sn) {
                let (compute, feed) = launch_cycles(bm, bk, bn, cfg);
                total += (compute.max(feed) + cfg.launch_overhead) * cm * ck * cn;
            }
        }
    }
    total
}

/// SFU cycles to process `rows` rows of length `row_len`, split over `sfus`.
fn sfu_cycles(rows: u64, row_len: u64, sfus: u32, cfg: &ArchConfig) -> u64 {
    debug_assert!(sfus > 0);
    ceil_div(ceil_div(rows, sfus as u64) * row_len, cfg.sfu_throughput)
}

fn check_params(
    layer: &Layer,
    cfg: &ArchConfig,
    params: &RuntimeParams,
    req: ResourceReq,
) -> Result<(), PerfError> {
    let (sm0, sk0, sn0) = cfg.storage_tile();
    if params.mmu_m == 0 || params.mmu_n == 0 {
        return Err(PerfError::Shape("mmu_m and mmu_n must be positive".into()));
    }
    if params.mmu_m as u64 * params.mmu_n as u64 > req.mmu as u64 {
        return Err(PerfError::Shape(format!(
            "mmu grid {}x{} exceeds granted {} MMUs",
            params.mmu_m, params.mmu_n, req.mmu
        )));
    }
    let sm = sm0 * params.mmu_m as u64;
    let sn = sn0 * params.mmu_n as u64;
    if params.lmu_m % sm != 0 || params.lmu_k % sk0 != 0 || params.lmu_n % sn != 0 {
        return Err(PerfError::Shape(format!(
            "tile {}x{}x{} not a multiple of granularity {}x{}x{}",
            params.lmu_m, params.lmu_k, params.lmu_n, sm, sk0, sn
        )));
    }
    if params.lmu_split.total() > req.lmu {
        return Err(PerfError::Shape(format!(
            "lmu split uses {} LMUs, only {} granted",
            params.lmu_split.total(),
            req.lmu
        )));
    }
    if layer.kind.nonlinear().map_or(false, |nl| nl.needs_full_row()) && params.lmu_n < layer.n {
        return Err(PerfError::Shape(format!(
            "row-wise non-linear needs the full output row on chip: lmu_n {} < N {}",
            params.lmu_n, layer.n
        )));
    }
    // Per-LMU bytes per operand.
    let checks = [
        ("lhs", params.lhs_mmu_row as u64 * params.lhs_mmu_col as u64 * sm0 * sk0),
        ("rhs", params.rhs_mmu_row as u64 * params.rhs_mmu_col as u64 * sk0 * sn0),
        ("out", params.out_mmu_row as u64 * params.out_mmu_col as u64 * sm0 * sn0),
    ];
    for (name, elems) in checks {
        if elems * cfg.elem_size > cfg.lmu_capacity {
            return Err(PerfError::Capacity(format!(
                "{name} operand holds {} bytes per LMU, capacity is {}",
                elems * cfg.elem_size,
                cfg.lmu_capacity
            )));
        }
    }
    Ok(())
}

/// Analytical latency of a matmul (optionally fused) layer under `params`.
pub fn mm_latency(
    layer: &Layer,
    cfg: &ArchConfig,
    params: &RuntimeParams,
    req: ResourceReq,
) -> Result<(u64, LatencyBreakdown), PerfError> {
    if !layer.kind.has_matmul() {
        return Err(PerfError::Shape("mm_latency requires a matmul layer".into()));
    }
    check_params(layer, cfg, params, req)?;
    let (m, k, n) = (layer.m, layer.k, layer.n);
    let split = params.lmu_split;
    let fused = layer.kind.nonlinear();
    if fused.is_some() && (req.sfu == 0 || split.nl == 0) {
        return Err(PerfError::Shape("fused layer needs an SFU and an NL output buffer".into()));
    }

    let m_segs = dim_segments(m, params.lmu_m);
    let k_segs = dim_segments(k, params.lmu_k);
    let n_segs = dim_segments(n, params.lmu_n);
    let k_iters: u64 = k_segs.iter().map(|&(_, c)| c).sum();

    let mut total = 0u64;
    for &(tm, cm) in &m_segs {
        for &(tn, cn) in &n_segs {
            let mut k_seen = 0u64;
            for &(tk, ck) in &k_segs {
                for _ in 0..ck {
                    k_seen += 1;
                    let last_k = k_seen == k_iters;
                    let mut dram = dram_cycles_split(tm, tk, split.lhs, true, cfg)
                        + dram_cycles_split(tk, tn, split.rhs, false, cfg);
                    let mut sfu = 0;
                    if last_k {
                        let store_parts = if fused.is_some() { split.nl } else { split.out };
                        dram += dram_cycles_split(tm, tn, store_parts, true, cfg);
                        if fused.is_some() {
                            sfu = sfu_cycles(tm, tn, req.sfu, cfg);
                        }
                    }
                    let onchip = onchip_cycles(tm, tk, tn, params, cfg);
                    total = total
                        .checked_add(dram.max(onchip).max(sfu) * cm * cn)
                        .ok_or_else(|| PerfError::Shape("latency overflow".into()))?;
                }
            }
        }
    }

    let iter_times = ceil_div(m, params.lmu_m) * ceil_div(k, params.lmu_k) * ceil_div(n, params.lmu_n);
    // Breakdown on a full interior tile.
    let (sm0, sk0, sn0) = cfg.storage_tile();
    let sm = sm0 * params.mmu_m as u64;
    let sn = sn0 * params.mmu_n as u64;
    let (compute, feed) = launch_cycles(sm.min(m), sk0.min(k), sn.min(n), cfg);
    let full_onchip = onchip_cycles(params.lmu_m.min(m), params.lmu_k.min(k), params.lmu_n.min(n), params, cfg);
    let full_dram = dram_cycles_split(params.lmu_m.min(m), params.lmu_k.min(k), split.lhs, true, cfg)
        + dram_cycles_split(params.lmu_k.min(k), params.lmu_n.min(n), split.rhs, false, cfg);
    let breakdown = LatencyBreakdown {
        mmu_compute_bound: compute >= feed,
        lmu_compute_bound: full_onchip >= full_dram,
        latency_mmu: compute.max(feed) + cfg.launch_overhead,
        latency_lmu: full_onchip.max(full_dram),
        iter_times,
    };
    Ok((total, breakdown))
}

/// Latency of a standalone non-linear layer processed in row stripes of
/// `params.lmu_m` rows (streaming through the SFU line buffer).
pub fn nl_latency(
    layer: &Layer,
    cfg: &ArchConfig,
    params: &RuntimeParams,
    req: ResourceReq,
) -> Result<u64, PerfError> {
    if layer.kind.has_matmul() {
        return Err(PerfError::Shape("nl_latency requires a non-linear-only layer".into()));
    }
    if req.sfu == 0 {
        return Err(PerfError::Shape("non-linear layer needs an SFU".into()));
    }
    let split = params.lmu_split;
    if split.lhs == 0 || split.out == 0 {
        return Err(PerfError::Shape("non-linear layer needs input and output LMUs".into()));
    }
    let mut total = 0u64;
    for &(rows, count) in &dim_segments(layer.m, params.lmu_m) {
        let dram = dram_cycles_split(rows, layer.n, split.lhs, true, cfg)
            + dram_cycles_split(rows, layer.n, split.out, true, cfg);
        let sfu = sfu_cycles(rows, layer.n, req.sfu, cfg);
        total += dram.max(sfu) * count;
    }
    Ok(total)
}

/// Layer latency under `params`, dispatching on the layer kind.
pub fn layer_latency(
    layer: &Layer,
    cfg: &ArchConfig,
    params: &RuntimeParams,
    req: ResourceReq,
) -> Result<u64, PerfError> {
    if layer.kind.has_matmul() {
        mm_latency(layer, cfg, params, req).map(|(l, _)| l)
    } else {
        nl_latency(layer, cfg, params, req)
    }
}

/// Fraction of issued MAC slots doing useful work across all launches.
pub fn mac_utilization(layer: &Layer, cfg: &ArchConfig, params: &RuntimeParams) -> f64 {
    let (sm0, sk0, sn0) = cfg.storage_tile();
    let sm = sm0 * params.mmu_m as u64;
    let sn = sn0 * params.mmu_n as u64;
    let group = params.mmu_m as u64 * params.mmu_n as u64;
    let slots_per_cycle = cfg.macs_per_cycle_per_proc * cfg.mmu_grid.procs() * group;
    let mut slot_cycles = 0u64;
    for &(tm, cm) in &dim_segments(layer.m, params.lmu_m) {
        for &(tk, ck) in &dim_segments(layer.k, params.lmu_k) {
            for &(tn, cn) in &dim_segments(layer.n, params.lmu_n) {
                let mut per_iter = 0u64;
                for &(bm, lm) in &dim_segments(tm, sm) {
                    for &(bk, lk) in &dim_segments(tk, sk0) {
                        for &(bn, ln) in &dim_segments(tn, sn) {
                            let (compute, _) = launch_cycles(bm, bk, bn, cfg);
                            per_iter += compute * lm * lk * ln;
                        }
                    }
                }
                slot_cycles += per_iter * cm * ck * cn;
            }
        }
    }
    let effective = (layer.m * layer.k * layer.n) as f64;
    effective / (slot_cycles as f64 * slots_per_cycle as f64)
}

// ---------------------------------------------------------------------------
// Candidate enumeration
// ---------------------------------------------------------------------------

/// Build the layout descriptors and minimal LMU counts for a tile choice, or
/// None if even a dedicated LMU per chunk cannot hold the operand.
struct Layout {
    split: LmuSplit,
    lhs: (u32, u32),
    rhs: (u32, u32),
    out: (u32, u32),
}

fn plan_layout(
    gm: u64,
    gk: u64,
    gn: u64,
    mmu_m: u32,
    mmu_n: u32,
    max_lmu: u32,
    fused: bool,
    cfg: &ArchConfig,
) -> Option<Layout> {
    let (sm0, sk0, sn0) = cfg.storage_tile();
    // Tile counts at storage granularity.
    let rows_m = gm * mmu_m as u64;
    let cols_n = gn * mmu_n as u64;
    let cap_lhs = cfg.lmu_capacity / (sm0 * sk0 * cfg.elem_size);
    let cap_rhs = cfg.lmu_capacity / (sk0 * sn0 * cfg.elem_size);
    let cap_out = cfg.lmu_capacity / (sm0 * sn0 * cfg.elem_size);

    // Minimal LMU count per operand: LHS and OUT split by tile rows, RHS by
    // tile columns.
    let min_parts = |units: u64, other: u64, cap: u64| -> Option<u32> {
        if other == 0 || other > cap {
            return None;
        }
        let per_lmu = cap / other;
        let parts = ceil_div(units, per_lmu);
        u32::try_from(parts).ok()
    };
    let a = min_parts(rows_m, gk, cap_lhs)?;
    let b = min_parts(cols_n, gk, cap_rhs)?;
    let c = min_parts(rows_m, cols_n, cap_out)?;
    let d = if fused { min_parts(rows_m, cols_n, cap_out)? } else { 0 };
    let split = LmuSplit { lhs: a, rhs: b, out: c, nl: d };
    if split.total() > max_lmu {
        return None;
    }
    let lhs = (ceil_div(rows_m, a as u64) as u32, gk as u32);
    let rhs = (gk as u32, ceil_div(cols_n, b as u64) as u32);
    let out = (ceil_div(rows_m, c as u64) as u32, cols_n as u32);
    Some(Layout { split, lhs, rhs, out })
}

fn factor_pairs(max_product: u32) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for a in 1..=max_product {
        for b in 1..=max_product / a {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Best (latency, params) over the runtime-parameter space for one resource
/// triple, or None if nothing fits.
fn best_mode_for_req(layer: &Layer, cfg: &ArchConfig, req: ResourceReq) -> Option<CandidateMode> {
    let mut best: Option<CandidateMode> = None;
    let mut consider = |latency: u64, iter_times: u64, params: RuntimeParams| {
        let better = match &best {
            None => true,
            Some(b) => {
                latency < b.latency_cycles
                    || (latency == b.latency_cycles && params < b.params)
            }
        };
        if better {
            best = Some(CandidateMode { req, params, latency_cycles: latency, iter_times });
        }
    };

    if !layer.kind.has_matmul() {
        // Row-stripe enumeration for standalone non-linear layers.
        let (sm0, _, _) = cfg.storage_tile();
        let cap_gm = ceil_div(layer.m, sm0).min(MAX_TILE_MULTIPLIER);
        // Split granted LMUs between input and output staging.
        for lhs in 1..req.lmu {
            let out = req.lmu - lhs;
            for gm in 1..=cap_gm {
                let params = RuntimeParams {
                    mmu_m: 0,
                    mmu_n: 0,
                    lmu_m: gm * sm0,
                    lmu_k: 0,
                    lmu_n: layer.n,
                    lhs_mmu_row: gm as u32,
                    lhs_mmu_col: 0,
                    rhs_mmu_row: 0,
                    rhs_mmu_col: 0,
                    out_mmu_row: gm as u32,
                    out_mmu_col: 0,
                    bound_i: (gm * sm0).min(layer.m),
                    bound_k: 0,
                    bound_j: layer.n,
                    lmu_split: LmuSplit { lhs, rhs: 0, out, nl: 0 },
                };
                if let Ok(latency) = nl_latency(layer, cfg, &params, req) {
                    consider(latency, ceil_div(layer.m, params.lmu_m), params);
                }
            }
        }
        return best;
    }

    let (sm0, sk0, sn0) = cfg.storage_tile();
    let full_row = layer.kind.nonlinear().map_or(false, |nl| nl.needs_full_row());
    let fused = layer.kind.nonlinear().is_some();
    for (mmu_m, mmu_n) in factor_pairs(req.mmu) {
        let sm = sm0 * mmu_m as u64;
        let sn = sn0 * mmu_n as u64;
        let cap_gm = ceil_div(layer.m, sm).min(MAX_TILE_MULTIPLIER);
        let cap_gk = ceil_div(layer.k, sk0).min(MAX_TILE_MULTIPLIER);
        let cap_gn = ceil_div(layer.n, sn).min(MAX_TILE_MULTIPLIER);
        let gn_range: Vec<u64> = if full_row {
            let need = ceil_div(layer.n, sn);
            if need > MAX_TILE_MULTIPLIER {
                continue;
            }
            vec![need]
        } else {
            (1..=cap_gn).collect()
        };
        for gm in 1..=cap_gm {
            for gk in 1..=cap_gk {
                let mut any_fit = false;
                for &gn in &gn_range {
                    let Some(layout) = plan_layout(gm, gk, gn, mmu_m, mmu_n, req.lmu, fused, cfg)
                    else {
                        // Larger gn only grows RHS/OUT footprints.
                        if any_fit {
                            break;
                        }
                        continue;
                    };
                    any_fit = true;
                    let params = RuntimeParams {
                        mmu_m,
                        mmu_n,
                        lmu_m: gm * sm,
                        lmu_k: gk * sk0,
                        lmu_n: gn * sn,
                        lhs_mmu_row: layout.lhs.0,
                        lhs_mmu_col: layout.lhs.1,
                        rhs_mmu_row: layout.rhs.0,
                        rhs_mmu_col: layout.rhs.1,
                        out_mmu_row: layout.out.0,
                        out_mmu_col: layout.out.1,
                        bound_i: sm0.min(layer.m),
                        bound_k: sk0.min(layer.k),
                        bound_j: sn0.min(layer.n),
                        lmu_split: layout.split,
                    };
                    if let Ok((latency, bd)) = mm_latency(layer, cfg, &params, req) {
                        consider(latency, bd.iter_times, params);
                    }
                }
            }
        }
    }
    best
}

/// Enumerate candidate modes for one layer: the latency-minimal parameters for
/// every feasible resource triple, with dominated triples pruned.
pub fn enumerate_candidates(layer: &Layer, cfg: &ArchConfig) -> Result<LayerCandidates, PerfError> {
    let min = min_resources(layer);
    let mut modes = Vec::new();
    let lmu_hi = cfg.num_lmu;
    let (mmu_range, sfu_range): (Vec<u32>, Vec<u32>) = match layer.kind {
        LayerKind::MatMul => ((min.mmu..=cfg.num_mmu).collect(), vec![0]),
        LayerKind::MatMulFused { .. } => {
            ((min.mmu..=cfg.num_mmu).collect(), (min.sfu..=cfg.num_sfu).collect())
        }
        LayerKind::NonLinearOnly { .. } => (vec![0], (min.sfu..=cfg.num_sfu).collect()),
    };
    if min.lmu > lmu_hi || (min.sfu > 0 && cfg.num_sfu < min.sfu) || (min.mmu > 0 && cfg.num_mmu < min.mmu)
    {
        return Err(PerfError::NoFeasibleMode { layer: layer.id });
    }
    for lmu in min.lmu..=lmu_hi {
        for &mmu in &mmu_range {
            for &sfu in &sfu_range {
                let req = ResourceReq { lmu, mmu, sfu };
                if let Some(mode) = best_mode_for_req(layer, cfg, req) {
                    modes.push(mode);
                }
            }
        }
    }
    if modes.is_empty() {
        return Err(PerfError::NoFeasibleMode { layer: layer.id });
    }
    let feasible_triples = modes.len();
    Ok(LayerCandidates { modes: prune_dominated(modes), feasible_triples })
}

/// Remove modes dominated by another: same or fewer of every resource and
/// lower-or-equal latency. Among fully equal entries the lexicographically
/// smallest params wins.
fn prune_dominated(mut modes: Vec<CandidateMode>) -> Vec<CandidateMode> {
    modes.sort_by_key(|m| (m.req, m.params));
    let mut keep: Vec<CandidateMode> = Vec::new();
    for m in &modes {
        let dominated = modes.iter().any(|o| {
            o.req.lmu <= m.req.lmu
                && o.req.mmu <= m.req.mmu
                && o.req.sfu <= m.req.sfu
                && o.latency_cycles <= m.latency_cycles
                && (o.req != m.req || o.latency_cycles != m.latency_cycles || o.params < m.params)
        });
        if !dominated {
            keep.push(m.clone());
        }
    }
    keep
}

/// Build the full candidate table; layers are independent and evaluated in
/// parallel with a deterministic (in-order) reduction.
pub fn build_candidate_table(dag: &WorkloadDag, cfg: &ArchConfig) -> Result<CandidateTable, PerfError> {
    let per_layer: Result<Vec<_>, _> = dag
        .layers
        .par_iter()
        .map(|layer| enumerate_candidates(layer, cfg))
        .collect();
    Ok(CandidateTable { format_version: CANDIDATE_TABLE_FORMAT_VERSION, per_layer: per_layer? })
}

pub fn export_table(table: &CandidateTable) -> String {
    serde_json::to_string_pretty(table).expect("table serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::NonLinearKind;

    fn mm_layer(m: u64, k: u64, n: u64) -> Layer {
        Layer { id: 0, kind: LayerKind::MatMul, m, k, n, name: None }
    }

    fn fused_layer(m: u64, k: u64, n: u64, nl: NonLinearKind) -> Layer {
        Layer { id: 0, kind: LayerKind::MatMulFused { nonlinear: nl }, m, k, n, name: None }
    }

    #[test]
    fn min_resources_per_kind() {
        assert_eq!(min_resources(&mm_layer(8, 8, 8)), ResourceReq { lmu: 3, mmu: 1, sfu: 0 });
        assert_eq!(
            min_resources(&fused_layer(8, 8, 8, NonLinearKind::Softmax)),
            ResourceReq { lmu: 4, mmu: 1, sfu: 1 }
        );
        let nl = Layer {
            id: 0,
            kind: LayerKind::NonLinearOnly { nonlinear: NonLinearKind::Softmax },
            m: 8,
            k: 0,
            n: 8,
            name: None,
        };
        assert_eq!(min_resources(&nl), ResourceReq { lmu: 2, mmu: 0, sfu: 1 });
    }

    fn simple_params(layer: &Layer, cfg: &ArchConfig, gm: u64, gk: u64, gn: u64) -> RuntimeParams {
        let (sm0, sk0, sn0) = cfg.storage_tile();
        RuntimeParams {
            mmu_m: 1,
            mmu_n: 1,
            lmu_m: gm * sm0,
            lmu_k: gk * sk0,
            lmu_n: gn * sn0,
            lhs_mmu_row: (gm) as u32,
            lhs_mmu_col: gk as u32,
            rhs_mmu_row: gk as u32,
            rhs_mmu_col: gn as u32,
            out_mmu_row: gm as u32,
            out_mmu_col: gn as u32,
            bound_i: sm0.min(layer.m),
            bound_k: sk0.min(layer.k),
            bound_j: sn0.min(layer.n),
            lmu_split: LmuSplit { lhs: 1, rhs: 1, out: 1, nl: 0 },
        }
    }

    #[test]
    fn iter_times_single_iteration() {
        let cfg = ArchConfig::default_vck190();
        let layer = mm_layer(64, 64, 64);
        let params = simple_params(&layer, &cfg, 2, 2, 2);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let (_, bd) = mm_latency(&layer, &cfg, &params, req).unwrap();
        assert_eq!(bd.iter_times, 1);
    }

    #[test]
    fn doubling_m_doubles_latency() {
        let cfg = ArchConfig::default_vck190();
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let small = mm_layer(64, 64, 64);
        let big = mm_layer(128, 64, 64);
        let params = simple_params(&small, &cfg, 2, 2, 2);
        let (a, _) = mm_latency(&small, &cfg, &params, req).unwrap();
        let (b, _) = mm_latency(&big, &cfg, &params, req).unwrap();
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn iter_times_formula_divisible() {
        let cfg = ArchConfig::default_vck190();
        let layer = mm_layer(256, 128, 192);
        let params = simple_params(&layer, &cfg, 2, 2, 2);
        let req = ResourceReq { lmu: 3, mmu: 1, sfu: 0 };
        let (_, bd) = mm_latency(&layer, &cfg, &params, req).unwrap();
        assert_eq!(bd.iter_times, (256 / 64) * (128 / 64) * (192 / 64));
    }

    #[test]
    fn case_study_eight_candidates() {
        let cfg = ArchConfig::case_study();
        let layer = fused_layer(256, 256, 256, NonLinearKind::Softmax);
        let cands = enumerate_candidates(&layer, &cfg).unwrap();
        // LMU in {4..7} x MMU in {1,2} x SFU {1}.
        assert_eq!(cands.feasible_triples, 8);
    }

    #[test]
    fn min_equals_max_single_triple() {
        let cfg = ArchConfig {
            num_lmu: 3,
            num_mmu: 1,
            num_sfu: 0,
            ..ArchConfig::default_vck190()
        };
        cfg.validate().unwrap();
        let layer = mm_layer(64, 64, 64);
        let cands = enumerate_candidates(&layer, &cfg).unwrap();
        assert_eq!(cands.feasible_triples, 1);
        assert_eq!(cands.modes.len(), 1);
    }

    #[test]
    fn tiny_mm_brute_force_agrees() {
        // Brute force over the full parameter grid for the (4,1,1)-style
        // request and compare with the enumerator's pick.
        let cfg = ArchConfig::default_vck190();
        let layer = mm_layer(8, 8, 8);
        let req = ResourceReq { lmu: 4, mmu: 1, sfu: 0 };
        let (sm0, sk0, sn0) = cfg.storage_tile();
        let mut best: Option<(u64, RuntimeParams)> = None;
        for gm in 1..=4u64 {
            for gk in 1..=4u64 {
                for gn in 1..=4u64 {
                    for lhs in 1..=2u32 {
                        for rhs in 1..=2u32 {
                            for out in 1..=2u32 {
                                if lhs + rhs + out > req.lmu {
                                    continue;
                                }
                                let params = RuntimeParams {
                                    mmu_m: 1,
                                    mmu_n: 1,
                                    lmu_m: gm * sm0,
                                    lmu_k: gk * sk0,
                                    lmu_n: gn * sn0,
                                    lhs_mmu_row: ceil_div(gm, lhs as u64) as u32,
                                    lhs_mmu_col: gk as u32,
                                    rhs_mmu_row: gk as u32,
                                    rhs_mmu_col: ceil_div(gn, rhs as u64) as u32,
                                    out_mmu_row: ceil_div(gm, out as u64) as u32,
                                    out_mmu_col: gn as u32,
                                    bound_i: 8,
                                    bound_k: 8,
                                    bound_j: 8,
                                    lmu_split: LmuSplit { lhs, rhs, out, nl: 0 },
                                };
                                if let Ok((lat, _)) = mm_latency(&layer, &cfg, &params, req) {
                                    if best.as_ref().map_or(true, |(b, bp)| {
                                        lat < *b || (lat == *b && params < *bp)
                                    }) {
                                        best = Some((lat, params));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let brute = best.unwrap();
        let picked = best_mode_for_req(&layer, &cfg, req).unwrap();
        assert_eq!(picked.latency_cycles, brute.0);
    }

    #[test]
    fn table_modes_not_dominated_and_within_capacity() {
        let cfg = ArchConfig::default_vck190();
        let spec = crate::workload::GeneratorSpec {
            num_layers: 16,
            chain_density: 1.0,
            extra_edge_density: 0.0,
            seed: 3,
            ..Default::default()
        };
        let dag = crate::workload::generate_synthetic(&spec).unwrap();
        let table = build_candidate_table(&dag, &cfg).unwrap();
        let (sm0, sk0, sn0) = cfg.storage_tile();
        for lc in &table.per_layer {
            assert!(!lc.modes.is_empty());
            for (i, a) in lc.modes.iter().enumerate() {
                let lhs = a.params.lhs_mmu_row as u64 * a.params.lhs_mmu_col as u64 * sm0 * sk0;
                let rhs = a.params.rhs_mmu_row as u64 * a.params.rhs_mmu_col as u64 * sk0 * sn0;
                let out = a.params.out_mmu_row as u64 * a.params.out_mmu_col as u64 * sm0 * sn0;
                for elems in [lhs, rhs, out] {
                    assert!(elems * cfg.elem_size <= cfg.lmu_capacity);
                }
                for (j, b) in lc.modes.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let dominates = a.req.lmu <= b.req.lmu
                        && a.req.mmu <= b.req.mmu
                        && a.req.sfu <= b.req.sfu
                        && a.latency_cycles <= b.latency_cycles;
                    assert!(!dominates, "mode {i} dominates mode {j}");
                }
            }
        }
    }

    #[test]
    fn monotone_in_resources() {
        let cfg = ArchConfig::default_vck190();
        let layer = mm_layer(256, 256, 256);
        let mut last = u64::MAX;
        for lmu in 3..=8 {
            let req = ResourceReq { lmu, mmu: 2, sfu: 0 };
            let mode = best_mode_for_req(&layer, &cfg, req).unwrap();
            assert!(mode.latency_cycles <= last);
            last = mode.latency_cycles;
        }
        let a = best_mode_for_req(&layer, &cfg, ResourceReq { lmu: 6, mmu: 1, sfu: 0 }).unwrap();
        let b = best_mode_for_req(&layer, &cfg, ResourceReq { lmu: 6, mmu: 4, sfu: 0 }).unwrap();
        assert!(b.latency_cycles <= a.latency_cycles);
    }

    #[test]
    fn empty_dag_empty_table() {
        let cfg = ArchConfig::default_vck190();
        let dag = WorkloadDag::new(vec![], []).unwrap();
        let table = build_candidate_table(&dag, &cfg).unwrap();
        assert!(table.per_layer.is_empty());
    }

    #[test]
    fn dynamic_bounds_beat_padding() {
        let cfg = ArchConfig::default_vck190();
        let (sm0, sk0, sn0) = cfg.storage_tile();
        let layer = mm_layer(8, 24, 16);
        let params = simple_params(&layer, &cfg, 1, 1, 1);
        let util_dyn = mac_utilization(&layer, &cfg, &params);
        let padded = mm_layer(sm0, sk0, sn0);
        let pparams = simple_params(&padded, &cfg, 1, 1, 1);
        let util_pad_effective = (8 * 24 * 16) as f64 / (sm0 * sk0 * sn0) as f64
            * mac_utilization(&padded, &cfg, &pparams);
        assert!(util_dyn >= util_pad_effective);
    }
}
